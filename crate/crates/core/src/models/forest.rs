//! Random forest of Gini CART trees; scores are the fraction of trees voting class 1.

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::{rng_for, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf {
        p1: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForestParams {
    pub n_trees: usize,
    /// `None` grows until leaves are pure.
    pub max_depth: Option<usize>,
    pub mtry: usize,
    pub bootstrap: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    pub trees: Vec<Tree>,
}

struct Builder<'a> {
    x: ArrayView2<'a, f64>,
    y: &'a [u8],
    params: ForestParams,
    rng: Rng,
    nodes: Vec<Node>,
}

fn gini(pos: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = pos as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

impl Builder<'_> {
    fn leaf(&mut self, idx: &[usize]) -> usize {
        let pos = idx.iter().filter(|&&i| self.y[i] == 1).count();
        self.nodes.push(Node::Leaf {
            p1: pos as f64 / idx.len() as f64,
        });
        self.nodes.len() - 1
    }

    /// Best (weighted child impurity, threshold) for one feature, if any split exists.
    fn best_split_on(&self, idx: &[usize], feature: usize) -> Option<(f64, f64)> {
        let mut pairs: Vec<(f64, u8)> = idx.iter().map(|&i| (self.x[(i, feature)], self.y[i])).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let n = pairs.len();
        let total_pos = pairs.iter().filter(|p| p.1 == 1).count();
        let mut left_pos = 0;
        let mut best: Option<(f64, f64)> = None;
        for k in 1..n {
            left_pos += usize::from(pairs[k - 1].1);
            if pairs[k].0 == pairs[k - 1].0 {
                continue;
            }
            let right_pos = total_pos - left_pos;
            let imp = (k as f64 * gini(left_pos, k) + (n - k) as f64 * gini(right_pos, n - k)) / n as f64;
            if best.is_none_or(|(b, _)| imp < b) {
                best = Some((imp, 0.5 * (pairs[k - 1].0 + pairs[k].0)));
            }
        }
        best
    }

    fn grow(&mut self, idx: Vec<usize>, depth: usize) -> usize {
        let pos = idx.iter().filter(|&&i| self.y[i] == 1).count();
        let pure = pos == 0 || pos == idx.len();
        if pure || idx.len() < 2 || self.params.max_depth.is_some_and(|d| depth >= d) {
            return self.leaf(&idx);
        }
        let m = self.x.ncols();
        let mut features: Vec<usize> = (0..m).collect();
        features.shuffle(&mut self.rng);
        let (candidates, rest) = features.split_at(self.params.mtry.min(m));

        let mut best: Option<(f64, usize, f64)> = None;
        for &f in candidates {
            if let Some((imp, thr)) = self.best_split_on(&idx, f) {
                if best.is_none_or(|(b, _, _)| imp < b) {
                    best = Some((imp, f, thr));
                }
            }
        }
        if best.is_none() {
            // none of the sampled features varies here; fall back to the others
            for &f in rest {
                if let Some((imp, thr)) = self.best_split_on(&idx, f) {
                    best = Some((imp, f, thr));
                    break;
                }
            }
        }
        let Some((_, feature, threshold)) = best else {
            return self.leaf(&idx);
        };
        let (left, right): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.x[(i, feature)] <= threshold);
        let me = self.nodes.len();
        self.nodes.push(Node::Leaf { p1: 0.0 });
        let l = self.grow(left, depth + 1);
        let r = self.grow(right, depth + 1);
        self.nodes[me] = Node::Split {
            feature,
            threshold,
            left: l,
            right: r,
        };
        me
    }
}

impl Tree {
    pub fn leaf_p1(&self, row: ndarray::ArrayView1<'_, f64>) -> f64 {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { p1 } => return *p1,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if row[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn vote(&self, row: ndarray::ArrayView1<'_, f64>) -> f64 {
        let p = self.leaf_p1(row);
        if p > 0.5 {
            1.0
        } else if p < 0.5 {
            0.0
        } else {
            0.5
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match &nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

impl RandomForest {
    pub fn fit(x: ArrayView2<'_, f64>, y: &[u8], params: ForestParams, seed: u64) -> Self {
        let n = y.len();
        let trees = (0..params.n_trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = rng_for(seed, &[t as u64]);
                let idx: Vec<usize> = if params.bootstrap {
                    (0..n).map(|_| rng.random_range(0..n)).collect()
                } else {
                    (0..n).collect()
                };
                let mut b = Builder {
                    x,
                    y,
                    params,
                    rng,
                    nodes: Vec::new(),
                };
                b.grow(idx, 0);
                Tree { nodes: b.nodes }
            })
            .collect();
        Self { trees }
    }

    pub fn decision(&self, x: ArrayView2<'_, f64>) -> Vec<f64> {
        let k = self.trees.len() as f64;
        x.rows()
            .into_iter()
            .map(|r| self.trees.iter().map(|t| t.vote(r)).sum::<f64>() / k)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;

    #[test]
    fn single_unbootstrapped_tree_memorizes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let x = Array2::from_shape_fn((60, 5), |_| rng.random::<f64>());
        let y: Vec<u8> = (0..60).map(|_| rng.random_range(0..2)).collect();
        let params = ForestParams {
            n_trees: 1,
            max_depth: None,
            mtry: 2,
            bootstrap: false,
        };
        let f = RandomForest::fit(x.view(), &y, params, 1);
        let s = f.decision(x.view());
        assert!(s.iter().zip(&y).all(|(s, &y)| *s == f64::from(y)));
    }

    #[test]
    fn depth_zero_is_constant() {
        let x = Array2::from_shape_fn((10, 2), |(i, j)| (i * 3 + j) as f64);
        let y = [1, 1, 1, 0, 1, 0, 1, 1, 0, 1];
        let params = ForestParams {
            n_trees: 1,
            max_depth: Some(0),
            mtry: 1,
            bootstrap: false,
        };
        let f = RandomForest::fit(x.view(), &y, params, 0);
        assert_eq!(f.trees[0].depth(), 0);
        assert_eq!(f.trees[0].leaf_p1(x.row(0)), 0.7);
        assert!(f.decision(x.view()).iter().all(|v| *v == 1.0));
    }
}
