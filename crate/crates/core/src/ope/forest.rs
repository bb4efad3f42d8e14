use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub bootstrap: bool,
    /// Features tried per split; `None` means `ceil(sqrt(d))`.
    pub max_features: Option<usize>,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 80,
            max_depth: 12,
            min_samples_leaf: 5,
            bootstrap: true,
            max_features: None,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 || self.min_samples_leaf == 0 {
            return Err(Error::Config("n_trees and min_samples_leaf must be >= 1".into()));
        }
        if self.max_features == Some(0) {
            return Err(Error::Config("max_features must be >= 1".into()));
        }
        Ok(())
    }

    pub fn features_per_split(&self, d: usize) -> usize {
        self.max_features
            .unwrap_or_else(|| (d as f64).sqrt().ceil() as usize)
            .clamp(1, d.max(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum TreeNode {
    Leaf { value: f64, samples: usize },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

/// CART regression tree grown by variance reduction. Samples with
/// `x[feature] <= threshold` go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<TreeNode>,
}

impl RegressionTree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                TreeNode::Leaf { value, .. } => return value,
                TreeNode::Split { feature, threshold, left, right } => {
                    at = if x[feature] <= threshold { left } else { right };
                }
            }
        }
    }

    /// Adds this tree's prediction for every one-hot action to `out`.
    /// Inputs are `state` followed by a one-hot block of `out.len()`
    /// entries; a split on the action block routes each action separately.
    pub fn accumulate_actions(&self, state: &[f64], out: &mut [f64]) {
        let mut actions: Vec<usize> = (0..out.len()).collect();
        self.descend(0, state, &mut actions, out);
    }

    fn descend(&self, at: usize, state: &[f64], actions: &mut Vec<usize>, out: &mut [f64]) {
        match self.nodes[at] {
            TreeNode::Leaf { value, .. } => actions.iter().for_each(|&a| out[a] += value),
            TreeNode::Split { feature, threshold, left, right } => {
                if feature < state.len() {
                    let next = if state[feature] <= threshold { left } else { right };
                    return self.descend(next, state, actions, out);
                }
                let target = feature - state.len();
                let (mut hot, mut cold): (Vec<usize>, Vec<usize>) = actions.iter().partition(|&&a| a == target);
                let side = |v: f64| if v <= threshold { left } else { right };
                if !hot.is_empty() {
                    self.descend(side(1.0), state, &mut hot, out);
                }
                if !cold.is_empty() {
                    self.descend(side(0.0), state, &mut cold, out);
                }
            }
        }
    }

    pub fn leaves(&self) -> impl Iterator<Item = (f64, usize)> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            TreeNode::Leaf { value, samples } => Some((*value, *samples)),
            TreeNode::Split { .. } => None,
        })
    }
}

struct Grower<'a> {
    /// Column-major features.
    columns: &'a [Vec<f64>],
    y: &'a [f64],
    config: &'a ForestConfig,
    mtry: usize,
    rng: ChaCha8Rng,
    nodes: Vec<TreeNode>,
}

impl Grower<'_> {
    /// `samples` holds `(index, multiplicity)` pairs.
    fn grow(&mut self, samples: Vec<(usize, usize)>, depth: usize) -> usize {
        let id = self.nodes.len();
        let n: usize = samples.iter().map(|s| s.1).sum();
        let total: f64 = samples.iter().map(|&(i, c)| c as f64 * self.y[i]).sum();
        self.nodes.push(TreeNode::Leaf { value: total / n as f64, samples: n });
        let min_leaf = self.config.min_samples_leaf;
        if depth >= self.config.max_depth || n < 2 * min_leaf || samples.len() < 2 {
            return id;
        }
        let parent_score = total * total / n as f64;
        let tolerance = 1e-12 * parent_score.abs().max(1.0);
        let improves = |best: &Option<(f64, usize, f64)>| best.is_some_and(|(s, _, _)| s - parent_score > tolerance);
        // Candidates beyond the first `mtry` are examined only while no
        // improving split has been found.
        let order = sample(&mut self.rng, self.columns.len(), self.columns.len()).into_vec();
        let mut best: Option<(f64, usize, f64)> = None;
        let mut sorted: Vec<(f64, usize, usize)> = Vec::with_capacity(samples.len());
        for (k, &j) in order.iter().enumerate() {
            if k >= self.mtry && improves(&best) {
                break;
            }
            let col = &self.columns[j];
            sorted.clear();
            sorted.extend(samples.iter().map(|&(i, c)| (col[i], i, c)));
            sorted.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            if sorted[0].0 == sorted[sorted.len() - 1].0 {
                continue;
            }
            let mut left_sum = 0.0;
            let mut n_left = 0;
            for pos in 0..sorted.len() - 1 {
                let (v, i, c) = sorted[pos];
                left_sum += c as f64 * self.y[i];
                n_left += c;
                if n_left < min_leaf || n - n_left < min_leaf || v == sorted[pos + 1].0 {
                    continue;
                }
                let right_sum = total - left_sum;
                let score = left_sum * left_sum / n_left as f64 + right_sum * right_sum / (n - n_left) as f64;
                if best.is_none_or(|(s, _, _)| score > s) {
                    best = Some((score, j, 0.5 * (v + sorted[pos + 1].0)));
                }
            }
        }
        if !improves(&best) {
            return id;
        }
        let (_, feature, threshold) = best.expect("improving split");
        let col = &self.columns[feature];
        let (left, right): (Vec<_>, Vec<_>) = samples.into_iter().partition(|&(i, _)| col[i] <= threshold);
        let l = self.grow(left, depth + 1);
        let r = self.grow(right, depth + 1);
        self.nodes[id] = TreeNode::Split { feature, threshold, left: l, right: r };
        id
    }
}

/// Bagged regression trees. An empty forest predicts 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    pub n_features: usize,
    pub trees: Vec<RegressionTree>,
}

impl RandomForest {
    pub fn empty(n_features: usize) -> Self {
        Self { n_features, trees: Vec::new() }
    }

    /// Fits on `n` rows of width `d` (row-major `x`). Samples are first put
    /// in a canonical order (lexicographic on features, then target), so
    /// the fit does not depend on input order; tree `t` draws from stream
    /// `t` of `seed`.
    pub fn fit(x: &[f64], y: &[f64], d: usize, config: &ForestConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if d == 0 || x.len() != y.len() * d {
            return Err(Error::Shape(format!("{} feature values for {} targets of width {d}", x.len(), y.len())));
        }
        if y.is_empty() {
            return Err(Error::InsufficientData("cannot fit a forest on zero samples".into()));
        }
        if x.iter().chain(y).any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite forest training data".into()));
        }
        let n = y.len();
        let mut canon: Vec<usize> = (0..n).collect();
        canon.sort_by(|&a, &b| {
            let ra = &x[a * d..(a + 1) * d];
            let rb = &x[b * d..(b + 1) * d];
            ra.iter()
                .zip(rb)
                .map(|(p, q)| p.total_cmp(q))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(y[a].total_cmp(&y[b]))
        });
        let columns: Vec<Vec<f64>> = (0..d).map(|j| canon.iter().map(|&i| x[i * d + j]).collect()).collect();
        let cy: Vec<f64> = canon.iter().map(|&i| y[i]).collect();
        let mtry = config.features_per_split(d);
        let mut trees = Vec::with_capacity(config.n_trees);
        for t in 0..config.n_trees {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            let samples: Vec<(usize, usize)> = if config.bootstrap {
                let mut counts = vec![0usize; n];
                for _ in 0..n {
                    counts[rng.random_range(0..n)] += 1;
                }
                counts.into_iter().enumerate().filter(|c| c.1 > 0).collect()
            } else {
                (0..n).map(|i| (i, 1)).collect()
            };
            let mut g = Grower { columns: &columns, y: &cy, config, mtry, rng, nodes: Vec::new() };
            g.grow(samples, 0);
            trees.push(RegressionTree { nodes: g.nodes });
        }
        Ok(Self { n_features: d, trees })
    }

    /// Predictions for `state` joined with each one-hot action of
    /// `n_actions`.
    pub fn predict_actions(&self, state: &[f64], n_actions: usize) -> Vec<f64> {
        let mut out = vec![0.0; n_actions];
        if self.trees.is_empty() {
            return out;
        }
        for t in &self.trees {
            t.accumulate_actions(state, &mut out);
        }
        let n = self.trees.len() as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        if self.trees.is_empty() {
            return 0.0;
        }
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let a: f64 = rng.random_range(-1.0..1.0);
            let b: f64 = rng.random_range(-1.0..1.0);
            x.extend([a, b]);
            y.push(if a > 0.2 { 3.0 } else { -1.0 } + 0.5 * b);
        }
        (x, y)
    }

    #[test]
    fn constant_target_is_exact() {
        let (x, _) = dataset(200, 0);
        let y = vec![2.5; 200];
        let f = RandomForest::fit(&x, &y, 2, &ForestConfig { n_trees: 5, ..Default::default() }, 1).unwrap();
        assert!(f.trees.iter().all(|t| t.nodes.len() == 1));
        assert_eq!(f.predict(&[0.3, 0.3]), 2.5);
    }

    #[test]
    fn learns_a_step() {
        let (x, y) = dataset(2000, 1);
        let cfg = ForestConfig { n_trees: 20, max_features: Some(2), ..Default::default() };
        let f = RandomForest::fit(&x, &y, 2, &cfg, 2).unwrap();
        assert!((f.predict(&[0.8, 0.0]) - 3.0).abs() < 0.15);
        assert!((f.predict(&[-0.5, 0.0]) + 1.0).abs() < 0.15);
    }

    #[test]
    fn leaves_respect_min_samples() {
        let (x, y) = dataset(500, 3);
        let cfg = ForestConfig { n_trees: 4, min_samples_leaf: 7, ..Default::default() };
        let f = RandomForest::fit(&x, &y, 2, &cfg, 4).unwrap();
        for t in &f.trees {
            assert!(t.leaves().all(|(_, s)| s >= 7));
        }
    }

    #[test]
    fn invariant_to_sample_order() {
        let (x, y) = dataset(300, 5);
        let cfg = ForestConfig { n_trees: 6, ..Default::default() };
        let f = RandomForest::fit(&x, &y, 2, &cfg, 9).unwrap();
        let perm: Vec<usize> = (0..300).rev().collect();
        let px: Vec<f64> = perm.iter().flat_map(|&i| [x[2 * i], x[2 * i + 1]]).collect();
        let py: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
        let g = RandomForest::fit(&px, &py, 2, &cfg, 9).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn action_sweep_matches_pointwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for _ in 0..600 {
            let s: f64 = rng.random_range(-1.0..1.0);
            let a = rng.random_range(0..4);
            x.push(s);
            x.extend((0..4).map(|b| if a == b { 1.0 } else { 0.0 }));
            y.push(s * a as f64 + a as f64);
        }
        let cfg = ForestConfig { n_trees: 8, max_features: Some(5), ..Default::default() };
        let f = RandomForest::fit(&x, &y, 5, &cfg, 3).unwrap();
        for s in [-0.7, 0.0, 0.4] {
            let sweep = f.predict_actions(&[s], 4);
            for (a, v) in sweep.iter().enumerate() {
                let mut row = vec![s, 0.0, 0.0, 0.0, 0.0];
                row[1 + a] = 1.0;
                assert!((v - f.predict(&row)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_forest_predicts_zero() {
        assert_eq!(RandomForest::empty(3).predict(&[1.0, 2.0, 3.0]), 0.0);
    }
}
