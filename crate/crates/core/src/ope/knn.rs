use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::data::Standardizer;
use crate::error::{Error, Result};
use crate::policy::{DecisionPoint, StochasticPolicy};

const LEAF_SIZE: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum KdNode {
    Leaf { start: usize, end: usize },
    Split { dim: usize, value: f64, left: usize, right: usize },
}

/// Exact k-d tree over a fixed point set. Neighbors are ordered by squared
/// Euclidean distance, then by point index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdTree {
    dim: usize,
    points: Vec<f64>,
    order: Vec<usize>,
    nodes: Vec<KdNode>,
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    dist: f64,
    index: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Candidate {}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist.total_cmp(&other.dist).then(self.index.cmp(&other.index))
    }
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl KdTree {
    /// `points` holds `n` rows of width `dim`, row-major.
    pub fn build(points: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || !points.len().is_multiple_of(dim) {
            return Err(Error::Shape(format!("{} values do not form rows of width {dim}", points.len())));
        }
        let n = points.len() / dim;
        let mut tree = Self {
            dim,
            points,
            order: (0..n).collect(),
            nodes: Vec::new(),
        };
        if n > 0 {
            tree.build_node(0, n);
        }
        Ok(tree)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(KdNode::Leaf { start, end });
        if end - start <= LEAF_SIZE {
            return id;
        }
        let dim = (0..self.dim)
            .map(|j| {
                let (lo, hi) = self.order[start..end].iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                    let v = self.points[i * self.dim + j];
                    (lo.min(v), hi.max(v))
                });
                (j, hi - lo)
            })
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|(j, _)| j)
            .expect("dim > 0");
        let mid = start + (end - start) / 2;
        let (points, d) = (&self.points, self.dim);
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a * d + dim].total_cmp(&points[b * d + dim]).then(a.cmp(&b))
        });
        let value = self.points[self.order[mid] * self.dim + dim];
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = KdNode::Split { dim, value, left, right };
        id
    }

    /// Indices of the `k` nearest points to `query`, nearest first.
    pub fn nearest(&self, query: &[f64], k: usize) -> Vec<usize> {
        if k == 0 || self.is_empty() {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(0, query, k, &mut heap);
        let mut found = heap.into_vec();
        found.sort();
        found.into_iter().map(|c| c.index).collect()
    }

    fn search(&self, node: usize, query: &[f64], k: usize, heap: &mut BinaryHeap<Candidate>) {
        match self.nodes[node] {
            KdNode::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let c = Candidate { dist: squared_distance(query, self.point(i)), index: i };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().expect("k > 0") {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            KdNode::Split { dim, value, left, right } => {
                let diff = query[dim] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.search(near, query, k, heap);
                // equal bounds are explored so lower-index ties are not missed
                if heap.len() < k || diff * diff <= heap.peek().expect("nonempty").dist {
                    self.search(far, query, k, heap);
                }
            }
        }
    }
}

/// Smoothed nearest-neighbor estimate of the behavior policy:
/// `(count of a among the k nearest + alpha) / (k + n_actions * alpha)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnBehavior {
    pub k: usize,
    pub alpha: f64,
    pub n_actions: usize,
    pub scaler: Standardizer,
    pub actions: Vec<usize>,
    tree: KdTree,
}

impl KnnBehavior {
    /// Indexes standardized copies of `states`; the standardizer is fitted
    /// on the same states.
    pub fn fit(states: &[Vec<f64>], actions: &[usize], n_actions: usize, k: usize, alpha: f64) -> Result<Self> {
        if states.len() != actions.len() {
            return Err(Error::Shape(format!("{} states but {} actions", states.len(), actions.len())));
        }
        if k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        if states.len() < k {
            return Err(Error::InsufficientData(format!(
                "kNN needs at least k = {k} reference states, got {}",
                states.len()
            )));
        }
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(Error::Config(format!("alpha {alpha} must be finite and >= 0")));
        }
        if let Some(&bad) = actions.iter().find(|&&a| a >= n_actions) {
            return Err(Error::Domain(format!("action {bad} outside 0..{n_actions}")));
        }
        let scaler = Standardizer::fit(states.iter().map(|s| s.as_slice()))?;
        let dim = scaler.dim();
        let mut flat = Vec::with_capacity(states.len() * dim);
        for s in states {
            flat.extend(scaler.apply(s));
        }
        Ok(Self {
            k,
            alpha,
            n_actions,
            scaler,
            actions: actions.to_vec(),
            tree: KdTree::build(flat, dim)?,
        })
    }

    /// Reference indices of the `k` neighbors of a raw state.
    pub fn neighbors(&self, state: &[f64]) -> Result<Vec<usize>> {
        if state.len() != self.scaler.dim() {
            return Err(Error::Shape(format!(
                "state width {} but kNN index holds width {}",
                state.len(),
                self.scaler.dim()
            )));
        }
        Ok(self.tree.nearest(&self.scaler.apply(state), self.k))
    }

    pub fn proba(&self, state: &[f64]) -> Result<Vec<f64>> {
        let mut counts = vec![0.0; self.n_actions];
        for i in self.neighbors(state)? {
            counts[self.actions[i]] += 1.0;
        }
        let denom = self.k as f64 + self.n_actions as f64 * self.alpha;
        Ok(counts.into_iter().map(|c| (c + self.alpha) / denom).collect())
    }
}

impl StochasticPolicy for KnnBehavior {
    fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn action_proba(&self, point: &DecisionPoint) -> Result<Vec<f64>> {
        self.proba(&point.state)
    }
}
