//! Model JSON.
//!
//! Native document:
//!
//! ```text
//! { "base_score": 0.0,
//!   "feature_names": ["V1", ...],
//!   "trees": [ NODE, ... ] }
//!
//! NODE := { "split": "V1", "split_condition": 0.5, "children": [LEFT, RIGHT] }
//!       | { "leaf": 0.3 }
//! ```
//!
//! The loader also takes the common per-tree text-dump layout, where each node
//! may carry `nodeid`, `yes`, `no`, `missing` and `depth`; when `yes`/`no` are
//! present the children are matched by `nodeid` (`yes` is the `<` branch).
//! A bare array of tree nodes, or a single node, is accepted as a document.

use serde_json::{json, Map, Value};

use super::{GbdtError, TreeEnsemble, TreeNode};

pub fn save_model(model: &TreeEnsemble) -> Vec<u8> {
    let doc = json!({
        "base_score": model.base_score,
        "feature_names": model.feature_names,
        "trees": model.trees.iter().map(node_to_json).collect::<Vec<_>>(),
    });
    serde_json::to_vec_pretty(&doc).expect("model serializes")
}

fn node_to_json(node: &TreeNode) -> Value {
    match node {
        TreeNode::Leaf { value } => json!({ "leaf": value }),
        TreeNode::Split {
            feature,
            threshold,
            left,
            right,
        } => json!({
            "split": feature,
            "split_condition": threshold,
            "children": [node_to_json(left), node_to_json(right)],
        }),
    }
}

pub fn load_model(bytes: &[u8]) -> Result<TreeEnsemble, GbdtError> {
    let doc: Value = serde_json::from_slice(bytes).map_err(|e| GbdtError::Parse {
        path: "$".into(),
        message: e.to_string(),
    })?;
    match &doc {
        Value::Array(trees) => {
            let trees = parse_trees(trees, "$")?;
            Ok(TreeEnsemble::new(trees, 0.0))
        }
        Value::Object(obj) if obj.contains_key("trees") => {
            let trees_val = obj.get("trees").expect("checked");
            let trees = match trees_val {
                Value::Array(a) => parse_trees(a, "$.trees")?,
                _ => return Err(err("$.trees", "expected an array of trees")),
            };
            let base_score = match obj.get("base_score") {
                None => 0.0,
                Some(v) => v
                    .as_f64()
                    .ok_or_else(|| err("$.base_score", "expected a number"))?,
            };
            let mut model = TreeEnsemble::new(trees, base_score);
            if let Some(names) = obj.get("feature_names") {
                let names = names
                    .as_array()
                    .ok_or_else(|| err("$.feature_names", "expected an array of strings"))?;
                let mut declared = Vec::with_capacity(names.len());
                for (i, n) in names.iter().enumerate() {
                    let s = n.as_str().ok_or_else(|| {
                        err(&format!("$.feature_names[{i}]"), "expected a string")
                    })?;
                    declared.push(s.to_string());
                }
                model.feature_names = declared;
            }
            model.validate()?;
            Ok(model)
        }
        Value::Object(_) => {
            let tree = parse_node(&doc, "$")?;
            Ok(TreeEnsemble::new(vec![tree], 0.0))
        }
        _ => Err(err("$", "expected a model object, a tree array or a node")),
    }
}

fn parse_trees(trees: &[Value], path: &str) -> Result<Vec<TreeNode>, GbdtError> {
    if trees.is_empty() {
        return Err(err(path, "model has no trees"));
    }
    trees
        .iter()
        .enumerate()
        .map(|(i, t)| parse_node(t, &format!("{path}[{i}]")))
        .collect()
}

fn parse_node(value: &Value, path: &str) -> Result<TreeNode, GbdtError> {
    let obj = value
        .as_object()
        .ok_or_else(|| err(path, "expected a node object"))?;
    if let Some(leaf) = obj.get("leaf") {
        let v = leaf
            .as_f64()
            .ok_or_else(|| err(&format!("{path}.leaf"), "expected a number"))?;
        return Ok(TreeNode::leaf(v));
    }
    let feature = obj
        .get("split")
        .ok_or_else(|| err(path, "node has neither `leaf` nor `split`"))?
        .as_str()
        .ok_or_else(|| err(&format!("{path}.split"), "expected a feature name"))?
        .to_string();
    let threshold = obj
        .get("split_condition")
        .ok_or_else(|| err(path, "split node is missing `split_condition`"))?
        .as_f64()
        .ok_or_else(|| err(&format!("{path}.split_condition"), "expected a number"))?;
    let children = obj
        .get("children")
        .ok_or_else(|| err(path, "split node is missing `children`"))?
        .as_array()
        .ok_or_else(|| err(&format!("{path}.children"), "expected an array"))?;
    if children.len() != 2 {
        return Err(err(
            &format!("{path}.children"),
            &format!("expected exactly 2 children, found {}", children.len()),
        ));
    }
    let (li, ri) = child_order(obj, children, path)?;
    let left = parse_node(&children[li], &format!("{path}.children[{li}]"))?;
    let right = parse_node(&children[ri], &format!("{path}.children[{ri}]"))?;
    Ok(TreeNode::split(feature, threshold, left, right))
}

/// Index of the `<` child and the `>=` child.
fn child_order(
    obj: &Map<String, Value>,
    children: &[Value],
    path: &str,
) -> Result<(usize, usize), GbdtError> {
    let (Some(yes), Some(no)) = (obj.get("yes"), obj.get("no")) else {
        return Ok((0, 1));
    };
    let yes = yes
        .as_i64()
        .ok_or_else(|| err(&format!("{path}.yes"), "expected a node id"))?;
    let no = no
        .as_i64()
        .ok_or_else(|| err(&format!("{path}.no"), "expected a node id"))?;
    let id = |i: usize| children[i].get("nodeid").and_then(Value::as_i64);
    match (id(0), id(1)) {
        (Some(a), Some(b)) if a == yes && b == no => Ok((0, 1)),
        (Some(a), Some(b)) if a == no && b == yes => Ok((1, 0)),
        _ => Err(err(
            &format!("{path}.children"),
            "children node ids do not match `yes`/`no`",
        )),
    }
}

fn err(path: &str, message: &str) -> GbdtError {
    GbdtError::Parse {
        path: path.to_string(),
        message: message.to_string(),
    }
}
