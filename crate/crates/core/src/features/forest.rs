//! Random forest over feature vectors with possible holes.
//!
//! Training imputes absent values with per-column medians and the forest
//! carries those medians, so prediction accepts the same holes. Trees grow
//! on bootstrap resamples with Gini impurity, `floor(sqrt(F))` candidate
//! features per split, and a positive-gain requirement; each tree draws
//! from its own seeded substream, so results do not depend on thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::FeatureError;

const GAIN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_split: usize,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 1000,
            max_depth: 10,
            min_samples_split: 2,
            seed: 0,
        }
    }
}

/// Rows with `x[feature] <= threshold` descend left.
#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        positive_fraction: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf { positive_fraction } => return positive_fraction,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x[feature] <= threshold { left } else { right };
                }
            }
        }
    }

    /// Longest root-to-leaf edge count.
    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], i: usize) -> usize {
            match nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    pub trees: Vec<Tree>,
    pub n_features: usize,
    /// Per-column training medians used to fill absent values.
    pub medians: Vec<f64>,
}

/// Mean positive-fraction vote of all trees, in `[0, 1]`. Absent or
/// non-finite entries fall back to the training medians.
pub fn rf_predict(forest: &Forest, row: &[Option<f64>]) -> Result<f64, FeatureError> {
    if row.len() != forest.n_features {
        return Err(FeatureError::DimensionMismatch {
            got: row.len(),
            want: forest.n_features,
        });
    }
    let x: Vec<f64> = row
        .iter()
        .zip(&forest.medians)
        .map(|(v, &m)| match v {
            Some(v) if v.is_finite() => *v,
            _ => m,
        })
        .collect();
    let sum: f64 = forest.trees.iter().map(|t| t.predict(&x)).sum();
    Ok(sum / forest.trees.len() as f64)
}

pub fn rf_predict_batch(
    forest: &Forest,
    rows: &[Vec<Option<f64>>],
) -> Result<Vec<f64>, FeatureError> {
    rows.par_iter().map(|r| rf_predict(forest, r)).collect()
}

pub fn rf_train(
    rows: &[Vec<Option<f64>>],
    labels: &[bool],
    params: &ForestParams,
) -> Result<Forest, FeatureError> {
    rf_train_oob(rows, labels, params).map(|(f, _)| f)
}

/// Trains a forest and returns the out-of-bag score per training row
/// (absent for rows drawn into every bootstrap).
pub fn rf_train_oob(
    rows: &[Vec<Option<f64>>],
    labels: &[bool],
    params: &ForestParams,
) -> Result<(Forest, Vec<Option<f64>>), FeatureError> {
    if rows.is_empty() {
        return Err(FeatureError::EmptyTrainingSet);
    }
    assert_eq!(rows.len(), labels.len());
    assert!(params.n_trees > 0 && params.min_samples_split >= 2);
    let n = rows.len();
    let n_features = rows[0].len();
    for (r, row) in rows.iter().enumerate() {
        if row.len() != n_features {
            return Err(FeatureError::DimensionMismatch {
                got: row.len(),
                want: n_features,
            });
        }
        for (c, v) in row.iter().enumerate() {
            if let Some(v) = v {
                if !v.is_finite() {
                    return Err(FeatureError::NonFinite { row: r, col: c });
                }
            }
        }
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 || n_pos == n {
        return Err(FeatureError::SingleClass);
    }

    let medians = column_medians(rows, n_features);
    let mut x = vec![0.0f64; n * n_features];
    for (r, row) in rows.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            x[r * n_features + c] = v.unwrap_or(medians[c]);
        }
    }

    let grown: Vec<(Tree, Vec<bool>)> = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            rng.set_stream(t as u64 + 1);
            let mut in_bag = vec![false; n];
            let sample: Vec<u32> = (0..n)
                .map(|_| {
                    let i = rng.gen_range(0..n);
                    in_bag[i] = true;
                    i as u32
                })
                .collect();
            let mut grower = Grower {
                x: &x,
                labels,
                n_features,
                params,
                nodes: Vec::new(),
                pool: (0..n_features).collect(),
                scratch: Vec::new(),
            };
            grower.grow(sample, 0, &mut rng);
            (
                Tree {
                    nodes: grower.nodes,
                },
                in_bag,
            )
        })
        .collect();

    let mut acc = vec![0.0f64; n];
    let mut cnt = vec![0u32; n];
    let mut trees = Vec::with_capacity(params.n_trees);
    for (tree, in_bag) in grown {
        for i in 0..n {
            if !in_bag[i] {
                acc[i] += tree.predict(&x[i * n_features..(i + 1) * n_features]);
                cnt[i] += 1;
            }
        }
        trees.push(tree);
    }
    let oob = acc
        .iter()
        .zip(&cnt)
        .map(|(&a, &c)| if c > 0 { Some(a / f64::from(c)) } else { None })
        .collect();

    Ok((
        Forest {
            trees,
            n_features,
            medians,
        },
        oob,
    ))
}

/// Median of the present values per column; columns with no present value
/// fall back to zero.
pub fn column_medians(rows: &[Vec<Option<f64>>], n_features: usize) -> Vec<f64> {
    let mut medians = vec![0.0f64; n_features];
    let mut col = Vec::with_capacity(rows.len());
    for (c, m) in medians.iter_mut().enumerate() {
        col.clear();
        col.extend(rows.iter().filter_map(|r| r[c]));
        if col.is_empty() {
            continue;
        }
        col.sort_unstable_by(f64::total_cmp);
        let k = col.len();
        *m = if k % 2 == 1 {
            col[k / 2]
        } else {
            0.5 * (col[k / 2 - 1] + col[k / 2])
        };
    }
    medians
}

struct Grower<'a> {
    x: &'a [f64],
    labels: &'a [bool],
    n_features: usize,
    params: &'a ForestParams,
    nodes: Vec<TreeNode>,
    pool: Vec<usize>,
    scratch: Vec<(f64, bool)>,
}

impl Grower<'_> {
    fn value(&self, row: u32, feature: usize) -> f64 {
        self.x[row as usize * self.n_features + feature]
    }

    fn leaf(&mut self, pos: usize, n: usize) -> usize {
        self.nodes.push(TreeNode::Leaf {
            positive_fraction: pos as f64 / n as f64,
        });
        self.nodes.len() - 1
    }

    fn grow(&mut self, idx: Vec<u32>, depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let n = idx.len();
        let pos = idx
            .iter()
            .filter(|&&i| self.labels[i as usize])
            .count();
        if depth >= self.params.max_depth
            || n < self.params.min_samples_split
            || pos == 0
            || pos == n
        {
            return self.leaf(pos, n);
        }

        let k = ((self.n_features as f64).sqrt().floor() as usize).max(1);
        let f_total = self.n_features;
        for (i, p) in self.pool.iter_mut().enumerate() {
            *p = i;
        }
        let mut evaluated = 0;
        let mut best: Option<(f64, usize, f64)> = None;
        for j in 0..f_total {
            let pick = j + rng.gen_range(0..f_total - j);
            self.pool.swap(j, pick);
            let f = self.pool[j];
            let (non_constant, split) = self.scan_feature(f, &idx, pos);
            if let Some((gain, thr)) = split {
                if best.map_or(true, |(bg, _, _)| gain > bg) {
                    best = Some((gain, f, thr));
                }
            }
            if non_constant {
                evaluated += 1;
                if evaluated >= k {
                    break;
                }
            }
        }

        let Some((_, feature, threshold)) = best else {
            return self.leaf(pos, n);
        };
        let (left_idx, right_idx): (Vec<u32>, Vec<u32>) = idx
            .into_iter()
            .partition(|&i| self.value(i, feature) <= threshold);
        debug_assert!(!left_idx.is_empty() && !right_idx.is_empty());

        let me = self.nodes.len();
        self.nodes.push(TreeNode::Leaf {
            positive_fraction: 0.0,
        });
        let left = self.grow(left_idx, depth + 1, rng);
        let right = self.grow(right_idx, depth + 1, rng);
        self.nodes[me] = TreeNode::Split {
            feature,
            threshold,
            left,
            right,
        };
        me
    }

    /// Scans one feature for the best Gini split. Returns whether the
    /// feature varies on these rows, and the best positive-gain split.
    fn scan_feature(
        &mut self,
        feature: usize,
        idx: &[u32],
        pos: usize,
    ) -> (bool, Option<(f64, f64)>) {
        let mut scratch = std::mem::take(&mut self.scratch);
        scratch.clear();
        scratch.extend(
            idx.iter()
                .map(|&i| (self.value(i, feature), self.labels[i as usize])),
        );
        scratch.sort_unstable_by(|a, b| f64::total_cmp(&a.0, &b.0));

        let n = scratch.len();
        let non_constant = scratch[0].0 < scratch[n - 1].0;
        let mut best: Option<(f64, f64)> = None;
        if non_constant {
            let nf = n as f64;
            let pf = pos as f64;
            let parent = 1.0 - (pf / nf).powi(2) - ((nf - pf) / nf).powi(2);
            let mut left_pos = 0usize;
            for i in 1..n {
                if scratch[i - 1].1 {
                    left_pos += 1;
                }
                let (lo, hi) = (scratch[i - 1].0, scratch[i].0);
                if lo == hi {
                    continue;
                }
                let nl = i as f64;
                let nr = nf - nl;
                let pl = left_pos as f64;
                let pr = pf - pl;
                let gini_l = 1.0 - (pl / nl).powi(2) - ((nl - pl) / nl).powi(2);
                let gini_r = 1.0 - (pr / nr).powi(2) - ((nr - pr) / nr).powi(2);
                let gain = parent - (nl * gini_l + nr * gini_r) / nf;
                if gain > GAIN_EPS && best.map_or(true, |(bg, _)| gain > bg) {
                    let mut thr = lo + (hi - lo) * 0.5;
                    if thr >= hi {
                        thr = lo;
                    }
                    best = Some((gain, thr));
                }
            }
        }
        self.scratch = scratch;
        (non_constant, best)
    }
}
