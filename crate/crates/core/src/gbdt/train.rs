//! Exact-greedy second-order boosting for the logistic objective.

use crate::data::{self, TransactionRecord};

use super::{sigmoid, GbdtError, TreeEnsemble, TreeNode};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub max_depth: usize,
    pub num_estimators: usize,
    pub learning_rate: f64,
    /// L2 penalty on leaf values.
    pub lambda: f64,
    /// Minimum hessian sum in each child of a split.
    pub min_child_weight: f64,
    pub undersampling_num_negatives: Option<usize>,
    pub base_score: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_depth: 6,
            num_estimators: 100,
            learning_rate: 0.3,
            lambda: 1.0,
            min_child_weight: 1.0,
            undersampling_num_negatives: None,
            base_score: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), GbdtError> {
        if self.max_depth < 1 {
            return Err(GbdtError::Training("max_depth must be at least 1".into()));
        }
        if self.num_estimators < 1 {
            return Err(GbdtError::Training(
                "num_estimators must be at least 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(GbdtError::Training(
                "learning_rate must be in (0, 1]".into(),
            ));
        }
        if self.lambda < 0.0 {
            return Err(GbdtError::Training("lambda must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Mean logistic loss on the training set; entry 0 is before any tree.
    pub losses: Vec<f64>,
    /// How many times each round's leaves were halved to keep the loss from rising.
    pub shrink_steps: Vec<u32>,
}

pub fn train(records: &[TransactionRecord], cfg: &TrainConfig) -> Result<TreeEnsemble, GbdtError> {
    train_with_report(records, cfg).map(|(m, _)| m)
}

pub fn train_with_report(
    records: &[TransactionRecord],
    cfg: &TrainConfig,
) -> Result<(TreeEnsemble, TrainReport), GbdtError> {
    cfg.validate()?;
    let sampled;
    let records = match cfg.undersampling_num_negatives {
        Some(k) => {
            sampled = data::undersample(records, k, cfg.seed)
                .map_err(|e| GbdtError::Training(e.to_string()))?;
            &sampled[..]
        }
        None => records,
    };
    let (names, columns) =
        data::feature_columns(records).map_err(|e| GbdtError::Training(e.to_string()))?;
    let labels: Vec<f64> = records.iter().map(|r| f64::from(r.label)).collect();
    let positives = labels.iter().filter(|&&y| y == 1.0).count();
    if positives == 0 || positives == labels.len() {
        return Err(GbdtError::Training(
            "training data must contain both classes".into(),
        ));
    }

    let sorted: Vec<Vec<usize>> = columns
        .iter()
        .map(|col| {
            let mut idx: Vec<usize> = (0..col.len()).collect();
            idx.sort_by(|&a, &b| col[a].total_cmp(&col[b]));
            idx
        })
        .collect();

    let mut margins = vec![cfg.base_score; labels.len()];
    let mut report = TrainReport {
        losses: vec![logistic_loss(&margins, &labels)],
        shrink_steps: Vec::new(),
    };
    let mut trees = Vec::with_capacity(cfg.num_estimators);
    let mut grad = vec![0.0; labels.len()];
    let mut hess = vec![0.0; labels.len()];

    for _round in 0..cfg.num_estimators {
        for i in 0..labels.len() {
            let p = sigmoid(margins[i]);
            grad[i] = p - labels[i];
            hess[i] = p * (1.0 - p);
        }
        let builder = TreeBuilder {
            cfg,
            columns: &columns,
            sorted: &sorted,
            grad: &grad,
            hess: &hess,
        };
        let (mut arena, leaf_of_row) = builder.build();

        let prev_loss = *report.losses.last().expect("initial loss recorded");
        let mut shrink = 0u32;
        let (new_margins, loss) = loop {
            let candidate: Vec<f64> = margins
                .iter()
                .zip(&leaf_of_row)
                .map(|(m, &leaf)| m + arena.leaf_value(leaf))
                .collect();
            let loss = logistic_loss(&candidate, &labels);
            if loss <= prev_loss {
                break (candidate, loss);
            }
            shrink += 1;
            if shrink > 40 {
                arena.scale_leaves(0.0);
                break (margins.clone(), prev_loss);
            }
            arena.scale_leaves(0.5);
        };
        margins = new_margins;
        report.losses.push(loss);
        report.shrink_steps.push(shrink);
        trees.push(arena.into_tree(&names));
    }

    let mut model = TreeEnsemble::new(trees, cfg.base_score);
    model.feature_names = names;
    Ok((model, report))
}

pub(crate) fn logistic_loss(margins: &[f64], labels: &[f64]) -> f64 {
    let total: f64 = margins
        .iter()
        .zip(labels)
        .map(|(&z, &y)| {
            // log(1 + e^z) - y z, computed stably
            let softplus = if z > 0.0 {
                z + (-z).exp().ln_1p()
            } else {
                z.exp().ln_1p()
            };
            softplus - y * z
        })
        .sum();
    total / margins.len() as f64
}

enum ArenaNode {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

struct Arena {
    nodes: Vec<ArenaNode>,
}

impl Arena {
    fn leaf_value(&self, id: usize) -> f64 {
        match self.nodes[id] {
            ArenaNode::Leaf(v) => v,
            ArenaNode::Split { .. } => unreachable!("rows always end in leaves"),
        }
    }

    fn scale_leaves(&mut self, factor: f64) {
        for n in &mut self.nodes {
            if let ArenaNode::Leaf(v) = n {
                *v *= factor;
            }
        }
    }

    fn into_tree(self, names: &[String]) -> TreeNode {
        fn walk(nodes: &[ArenaNode], id: usize, names: &[String]) -> TreeNode {
            match nodes[id] {
                ArenaNode::Leaf(v) => TreeNode::leaf(v),
                ArenaNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => TreeNode::split(
                    names[feature].clone(),
                    threshold,
                    walk(nodes, left, names),
                    walk(nodes, right, names),
                ),
            }
        }
        walk(&self.nodes, 0, names)
    }
}

struct TreeBuilder<'a> {
    cfg: &'a TrainConfig,
    columns: &'a [Vec<f64>],
    sorted: &'a [Vec<usize>],
    grad: &'a [f64],
    hess: &'a [f64],
}

#[derive(Clone, Copy)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

impl TreeBuilder<'_> {
    fn leaf_weight(&self, g: f64, h: f64) -> f64 {
        -self.cfg.learning_rate * g / (h + self.cfg.lambda)
    }

    fn score(&self, g: f64, h: f64) -> f64 {
        g * g / (h + self.cfg.lambda)
    }

    /// Grows one tree level by level. Returns the arena and the leaf id each
    /// row ends in.
    fn build(&self) -> (Arena, Vec<usize>) {
        let n = self.grad.len();
        let mut arena = Arena {
            nodes: vec![ArenaNode::Leaf(0.0)],
        };
        // arena id of the open node holding each row, or usize::MAX once closed
        let mut open_of_row = vec![0usize; n];
        let mut leaf_of_row = vec![0usize; n];
        let mut open: Vec<usize> = vec![0];

        for depth in 0..=self.cfg.max_depth {
            if open.is_empty() {
                break;
            }
            // position of each open node in `open`
            let mut slot = vec![usize::MAX; arena.nodes.len()];
            for (i, &id) in open.iter().enumerate() {
                slot[id] = i;
            }
            let mut g_tot = vec![0.0; open.len()];
            let mut h_tot = vec![0.0; open.len()];
            for (r, &id) in open_of_row.iter().enumerate() {
                if id != usize::MAX {
                    g_tot[slot[id]] += self.grad[r];
                    h_tot[slot[id]] += self.hess[r];
                }
            }

            let mut best: Vec<Option<Candidate>> = vec![None; open.len()];
            if depth < self.cfg.max_depth {
                for (f, order) in self.sorted.iter().enumerate() {
                    let col = &self.columns[f];
                    let mut gl = vec![0.0; open.len()];
                    let mut hl = vec![0.0; open.len()];
                    let mut last: Vec<Option<f64>> = vec![None; open.len()];
                    for &r in order {
                        let id = open_of_row[r];
                        if id == usize::MAX {
                            continue;
                        }
                        let s = slot[id];
                        let v = col[r];
                        if let Some(prev) = last[s] {
                            if v > prev {
                                let gr = g_tot[s] - gl[s];
                                let hr = h_tot[s] - hl[s];
                                if hl[s] >= self.cfg.min_child_weight
                                    && hr >= self.cfg.min_child_weight
                                {
                                    let gain = 0.5
                                        * (self.score(gl[s], hl[s]) + self.score(gr, hr)
                                            - self.score(g_tot[s], h_tot[s]));
                                    if gain > 1e-12 && best[s].is_none_or(|b| gain > b.gain) {
                                        best[s] = Some(Candidate {
                                            gain,
                                            feature: f,
                                            threshold: midpoint(prev, v),
                                        });
                                    }
                                }
                            }
                        }
                        gl[s] += self.grad[r];
                        hl[s] += self.hess[r];
                        last[s] = Some(v);
                    }
                }
            }

            let mut next_open = Vec::new();
            let mut children = vec![(usize::MAX, usize::MAX); open.len()];
            for (s, &id) in open.iter().enumerate() {
                match best[s] {
                    Some(c) => {
                        let left = arena.nodes.len();
                        arena.nodes.push(ArenaNode::Leaf(0.0));
                        arena.nodes.push(ArenaNode::Leaf(0.0));
                        arena.nodes[id] = ArenaNode::Split {
                            feature: c.feature,
                            threshold: c.threshold,
                            left,
                            right: left + 1,
                        };
                        children[s] = (left, left + 1);
                        next_open.push(left);
                        next_open.push(left + 1);
                    }
                    None => {
                        arena.nodes[id] = ArenaNode::Leaf(self.leaf_weight(g_tot[s], h_tot[s]));
                    }
                }
            }
            for r in 0..n {
                let id = open_of_row[r];
                if id == usize::MAX {
                    continue;
                }
                let s = slot[id];
                match (best[s], children[s]) {
                    (Some(c), (l, rt)) => {
                        open_of_row[r] = if self.columns[c.feature][r] < c.threshold {
                            l
                        } else {
                            rt
                        };
                    }
                    (None, _) => {
                        leaf_of_row[r] = id;
                        open_of_row[r] = usize::MAX;
                    }
                }
            }
            open = next_open;
        }
        (arena, leaf_of_row)
    }
}

/// Threshold strictly above `lo` and at most `hi`, so `lo < t` fails and
/// `hi < t` fails as well.
fn midpoint(lo: f64, hi: f64) -> f64 {
    let m = lo + (hi - lo) / 2.0;
    if m > lo {
        m
    } else {
        hi
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gbdt::FeatureMap;

    fn rec(pairs: &[(&str, f64)], label: u8, i: usize) -> TransactionRecord {
        let features: FeatureMap = pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        TransactionRecord {
            features,
            label,
            time_index: i,
        }
    }

    fn step_data() -> Vec<TransactionRecord> {
        (0..60)
            .map(|i| {
                let x = (i as f64 - 30.0) / 10.0 + 0.05;
                rec(&[("x", x)], u8::from(x > 0.0), i)
            })
            .collect()
    }

    #[test]
    fn perfect_1d_split() {
        let data = step_data();
        let cfg = TrainConfig {
            max_depth: 1,
            num_estimators: 10,
            ..Default::default()
        };
        let model = train(&data, &cfg).unwrap();
        assert_eq!(model.num_trees(), 10);
        assert!(model.max_depth() <= 1);
        let correct = data
            .iter()
            .filter(|r| model.predict_label(&r.features).unwrap() == r.label)
            .count();
        assert_eq!(correct, data.len());
    }

    #[test]
    fn loss_non_increasing() {
        let mut data = step_data();
        // label noise so the fit cannot become perfect
        for r in data.iter_mut().step_by(7) {
            r.label ^= 1;
        }
        let cfg = TrainConfig {
            max_depth: 3,
            num_estimators: 25,
            learning_rate: 1.0,
            lambda: 0.0,
            min_child_weight: 0.0,
            ..Default::default()
        };
        let (_, report) = train_with_report(&data, &cfg).unwrap();
        assert_eq!(report.losses.len(), 26);
        for w in report.losses.windows(2) {
            assert!(w[1] <= w[0], "loss rose: {w:?}");
        }
    }

    #[test]
    fn constant_feature_moves_toward_prior() {
        let data: Vec<_> = (0..40)
            .map(|i| rec(&[("c", 1.0)], u8::from(i < 10), i))
            .collect();
        let cfg = TrainConfig {
            max_depth: 3,
            num_estimators: 1,
            ..Default::default()
        };
        let model = train(&data, &cfg).unwrap();
        assert_eq!(model.trees[0].node_count(), 1);
        let prior = (10.0f64 / 30.0).ln();
        let m = model.predict_margin(&data[0].features).unwrap();
        assert!(m < 0.0 && m > prior);
    }

    #[test]
    fn single_class_rejected() {
        let data: Vec<_> = (0..10).map(|i| rec(&[("x", i as f64)], 0, i)).collect();
        assert!(matches!(
            train(&data, &TrainConfig::default()),
            Err(GbdtError::Training(_))
        ));
    }

    #[test]
    fn logistic_loss_matches_direct_formula() {
        let z = [0.3, -2.0, 5.0];
        let y = [1.0, 0.0, 1.0];
        let direct: f64 = z
            .iter()
            .zip(&y)
            .map(|(&z, &y): (&f64, &f64)| {
                let p = 1.0 / (1.0 + (-z).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 3.0;
        assert!((logistic_loss(&z, &y) - direct).abs() < 1e-12);
    }
}
