//! Plaintext gradient-boosted decision trees.
//!
//! A [`TreeEnsemble`] is a list of binary trees whose reached leaf values are
//! summed with a base margin. Routing goes left iff `value < threshold`.

mod json;
mod train;

use std::collections::BTreeSet;

use indexmap::IndexMap;
use thiserror::Error;

pub use json::{load_model, save_model};
pub use train::{train, train_with_report, TrainConfig, TrainReport};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GbdtError {
    #[error("transaction is missing feature `{0}`")]
    MissingFeature(String),
    #[error("model parse error at {path}: {message}")]
    Parse { path: String, message: String },
    #[error("training error: {0}")]
    Training(String),
    #[error("invalid model: {0}")]
    Invalid(String),
}

/// A feature map as seen by the models, keyed by column name.
pub type FeatureMap = IndexMap<String, f64>;

#[derive(Clone, Debug, PartialEq)]
pub enum TreeNode {
    Split {
        feature: String,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
    Leaf {
        value: f64,
    },
}

impl TreeNode {
    pub fn leaf(value: f64) -> Self {
        TreeNode::Leaf { value }
    }

    pub fn split(
        feature: impl Into<String>,
        threshold: f64,
        left: TreeNode,
        right: TreeNode,
    ) -> Self {
        TreeNode::Split {
            feature: feature.into(),
            threshold,
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    /// Follows the routing rule down to a leaf and returns its value.
    pub fn evaluate(&self, tx: &FeatureMap) -> Result<f64, GbdtError> {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { value } => return Ok(*value),
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    let v = tx
                        .get(feature)
                        .ok_or_else(|| GbdtError::MissingFeature(feature.clone()))?;
                    node = if *v < *threshold { left } else { right };
                }
            }
        }
    }

    /// Number of edges on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    pub fn node_count(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 1,
            TreeNode::Split { left, right, .. } => 1 + left.node_count() + right.node_count(),
        }
    }

    pub fn leaf_count(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 1,
            TreeNode::Split { left, right, .. } => left.leaf_count() + right.leaf_count(),
        }
    }

    pub fn visit_splits<'a>(&'a self, f: &mut impl FnMut(&'a str, f64)) {
        if let TreeNode::Split {
            feature,
            threshold,
            left,
            right,
        } = self
        {
            f(feature, *threshold);
            left.visit_splits(f);
            right.visit_splits(f);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeEnsemble {
    pub trees: Vec<TreeNode>,
    /// Initial margin (log-odds) added to the tree sum.
    pub base_score: f64,
    pub feature_names: Vec<String>,
}

impl TreeEnsemble {
    /// Builds an ensemble, deriving `feature_names` from the splits in
    /// first-seen order.
    pub fn new(trees: Vec<TreeNode>, base_score: f64) -> Self {
        let mut names: Vec<String> = Vec::new();
        for tree in &trees {
            tree.visit_splits(&mut |f, _| {
                if !names.iter().any(|n| n == f) {
                    names.push(f.to_string());
                }
            });
        }
        TreeEnsemble {
            trees,
            base_score,
            feature_names: names,
        }
    }

    pub fn validate(&self) -> Result<(), GbdtError> {
        if self.trees.is_empty() {
            return Err(GbdtError::Invalid("ensemble has no trees".into()));
        }
        let known: BTreeSet<&str> = self.feature_names.iter().map(String::as_str).collect();
        let mut missing = None;
        for tree in &self.trees {
            tree.visit_splits(&mut |f, _| {
                if !known.contains(f) && missing.is_none() {
                    missing = Some(f.to_string());
                }
            });
        }
        match missing {
            Some(f) => Err(GbdtError::Invalid(format!(
                "split on undeclared feature `{f}`"
            ))),
            None => Ok(()),
        }
    }

    pub fn num_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn max_depth(&self) -> usize {
        self.trees.iter().map(TreeNode::depth).max().unwrap_or(0)
    }

    pub fn predict_margin(&self, tx: &FeatureMap) -> Result<f64, GbdtError> {
        let mut margin = self.base_score;
        for tree in &self.trees {
            margin += tree.evaluate(tx)?;
        }
        Ok(margin)
    }

    pub fn predict_proba(&self, tx: &FeatureMap) -> Result<f64, GbdtError> {
        self.predict_margin(tx).map(sigmoid)
    }

    pub fn predict_label(&self, tx: &FeatureMap) -> Result<u8, GbdtError> {
        self.predict_proba(tx).map(label_from_proba)
    }

    /// Smallest and largest split threshold over all trees.
    pub fn threshold_range(&self) -> Option<(f64, f64)> {
        let mut range: Option<(f64, f64)> = None;
        for tree in &self.trees {
            tree.visit_splits(&mut |_, t| {
                range = Some(match range {
                    None => (t, t),
                    Some((lo, hi)) => (lo.min(t), hi.max(t)),
                });
            });
        }
        range
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fraud iff the probability is at least one half.
pub fn label_from_proba(p: f64) -> u8 {
    u8::from(p >= 0.5)
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn stub_trees_give_base_score() {
        let m = TreeEnsemble::new(vec![TreeNode::leaf(0.0), TreeNode::leaf(0.0)], 0.7);
        assert_eq!(m.predict_margin(&FeatureMap::new()).unwrap(), 0.7);
    }

    #[test]
    fn hand_built_margin() {
        let m = two_tree_ensemble();
        let t = tx(&[("V1", 2.0), ("V2", 0.5)]);
        // hand traversal: V1=2 >= 0 -> +0.3; V2=0.5 < 1 -> -0.2
        let margin = m.predict_margin(&t).unwrap();
        assert!((margin - 0.1).abs() < 1e-15);
        let oracle = 1.0 / (1.0 + (-0.1f64).exp());
        assert!((m.predict_proba(&t).unwrap() - oracle).abs() < 1e-15);
        assert!((oracle - 0.52498).abs() < 1e-5);
        let mut reversed = m.clone();
        reversed.trees.reverse();
        assert_eq!(reversed.predict_margin(&t).unwrap(), margin);
    }

    #[test]
    fn boundary_goes_right() {
        let m = two_tree_ensemble();
        let t = tx(&[("V1", 0.0), ("V2", 1.0)]);
        assert!((m.predict_margin(&t).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn missing_feature_named() {
        let m = two_tree_ensemble();
        let t = tx(&[("V1", 2.0)]);
        assert_eq!(
            m.predict_margin(&t),
            Err(GbdtError::MissingFeature("V2".into()))
        );
    }

    #[test]
    fn sigmoid_and_labels() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(1e6) - 1.0).abs() < 1e-12);
        assert!(sigmoid(-1e6) >= 0.0);
        assert!((sigmoid(0.1) - 0.52498).abs() < 1e-5);
        assert_eq!(label_from_proba(0.5), 1);
        assert_eq!(label_from_proba(0.4999), 0);
    }

    #[test]
    fn shape_metrics() {
        let m = two_tree_ensemble();
        assert_eq!(m.max_depth(), 1);
        assert_eq!(m.trees[0].node_count(), 3);
        assert_eq!(m.feature_names, vec!["V1".to_string(), "V2".to_string()]);
        assert_eq!(m.threshold_range(), Some((0.0, 1.0)));
        m.validate().unwrap();
    }

    fn arb_tree(depth: u32) -> impl Strategy<Value = TreeNode> {
        let leaf = (-1.0f64..1.0).prop_map(TreeNode::leaf);
        leaf.prop_recursive(depth, 64, 2, |inner| {
            (0usize..3, -2.0f64..2.0, inner.clone(), inner)
                .prop_map(|(f, t, l, r)| TreeNode::split(format!("f{f}"), t, l, r))
        })
    }

    /// Enumerates every root-to-leaf path of a tree with its constraints and
    /// picks the unique one the transaction satisfies.
    /// `(feature, threshold, went left)` conditions along a root-to-leaf path.
    type Path = Vec<(String, f64, bool)>;

    fn path_oracle(tree: &TreeNode, tx: &FeatureMap) -> f64 {
        fn paths(node: &TreeNode, prefix: Path, out: &mut Vec<(Path, f64)>) {
            match node {
                TreeNode::Leaf { value } => out.push((prefix, *value)),
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    let mut l = prefix.clone();
                    l.push((feature.clone(), *threshold, true));
                    paths(left, l, out);
                    let mut r = prefix;
                    r.push((feature.clone(), *threshold, false));
                    paths(right, r, out);
                }
            }
        }
        let mut all = Vec::new();
        paths(tree, Vec::new(), &mut all);
        let hits: Vec<f64> = all
            .into_iter()
            .filter(|(conds, _)| {
                conds
                    .iter()
                    .all(|(f, t, is_left)| (tx[f.as_str()] < *t) == *is_left)
            })
            .map(|(_, v)| v)
            .collect();
        assert_eq!(hits.len(), 1);
        hits[0]
    }

    proptest! {
        #[test]
        fn margin_matches_path_enumeration(
            trees in prop::collection::vec(arb_tree(4), 1..5),
            base in -1.0f64..1.0,
            vals in prop::collection::vec(-3.0f64..3.0, 3),
        ) {
            let tx: FeatureMap = vals.iter().enumerate().map(|(i, v)| (format!("f{i}"), *v)).collect();
            let oracle = base + trees.iter().map(|t| path_oracle(t, &tx)).sum::<f64>();
            let model = TreeEnsemble::new(trees, base);
            let got = model.predict_margin(&tx).unwrap();
            prop_assert!((got - oracle).abs() < 1e-12);
            prop_assert_eq!(got, model.predict_margin(&tx).unwrap());
        }
    }
}
