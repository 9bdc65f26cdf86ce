//! Random forest of CART trees grown on bootstrap samples with gini
//! splitting.
//!
//! Candidate thresholds come from per-feature bins fitted on the training
//! matrix: features with at most 256 distinct values get one bin per value
//! (exact CART), others get 256 quantile bins. Thresholds are stored in
//! feature units so prediction never needs the bins.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{substream, LearnError};

const MAX_BINS: usize = 256;
const LEAF: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    /// `None` grows until leaves are pure or too small to split.
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    /// `None` uses the rounded square root of the number of usable features.
    pub features_per_split: Option<usize>,
    pub bootstrap: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 100,
            max_depth: None,
            min_samples_leaf: 1,
            features_per_split: None,
            bootstrap: true,
        }
    }
}

/// Flat node arrays; node 0 is the root. `left[i] == u32::MAX` marks a leaf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub feature: Vec<u32>,
    pub threshold: Vec<f64>,
    pub left: Vec<u32>,
    pub right: Vec<u32>,
    /// Positive-class fraction of the node's (bootstrap) samples.
    pub value: Vec<f64>,
    pub n_samples: Vec<u32>,
    pub impurity: Vec<f64>,
}

impl Tree {
    fn with_capacity(n: usize) -> Self {
        Tree {
            feature: Vec::with_capacity(n),
            threshold: Vec::with_capacity(n),
            left: Vec::with_capacity(n),
            right: Vec::with_capacity(n),
            value: Vec::with_capacity(n),
            n_samples: Vec::with_capacity(n),
            impurity: Vec::with_capacity(n),
        }
    }

    fn push(&mut self, value: f64, n: u32, impurity: f64) -> usize {
        self.feature.push(0);
        self.threshold.push(0.0);
        self.left.push(LEAF);
        self.right.push(LEAF);
        self.value.push(value);
        self.n_samples.push(n);
        self.impurity.push(impurity);
        self.value.len() - 1
    }

    pub fn n_nodes(&self) -> usize {
        self.value.len()
    }

    pub fn is_leaf(&self, node: usize) -> bool {
        self.left[node] == LEAF
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        while !self.is_leaf(i) {
            i = if x[self.feature[i] as usize] <= self.threshold[i] {
                self.left[i]
            } else {
                self.right[i]
            } as usize;
        }
        self.value[i]
    }

    /// Weighted gini decrease per feature, normalized to sum to 1 (all zero
    /// for a single-leaf tree).
    pub fn importances(&self, n_features: usize) -> Vec<f64> {
        let mut imp = vec![0.0; n_features];
        for i in 0..self.n_nodes() {
            if self.is_leaf(i) {
                continue;
            }
            let (l, r) = (self.left[i] as usize, self.right[i] as usize);
            let w = |k: usize| self.n_samples[k] as f64 * self.impurity[k];
            imp[self.feature[i] as usize] += w(i) - w(l) - w(r);
        }
        let total: f64 = imp.iter().sum();
        if total > 0.0 {
            imp.iter_mut().for_each(|v| *v /= total);
        }
        imp
    }

    fn validate(&self, n_features: usize) -> bool {
        let n = self.n_nodes();
        [
            self.feature.len(),
            self.threshold.len(),
            self.left.len(),
            self.right.len(),
            self.n_samples.len(),
            self.impurity.len(),
        ]
        .iter()
        .all(|&len| len == n)
            && n > 0
            && (0..n).all(|i| {
                (0.0..=1.0).contains(&self.value[i])
                    && (self.is_leaf(i)
                        || ((self.feature[i] as usize) < n_features
                            && (self.left[i] as usize) < n
                            && (self.right[i] as usize) < n
                            && self.left[i] as usize > i
                            && self.right[i] as usize > i))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub params: ForestParams,
    pub seed: u64,
    /// Extra keys mixed into each tree's RNG stream (e.g. the run index).
    pub stream: Vec<u64>,
    pub n_features: usize,
    pub trees: Vec<Tree>,
}

impl ForestModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let s: f64 = self.trees.iter().map(|t| t.predict(x)).sum();
        (s / self.trees.len() as f64).clamp(0.0, 1.0)
    }

    /// First `n` trees as a forest of their own.
    pub fn truncated(&self, n: usize) -> ForestModel {
        let mut f = self.clone();
        f.trees.truncate(n);
        f.params.n_trees = f.trees.len();
        f
    }

    pub fn validate(&self) -> Result<(), LearnError> {
        if self.trees.is_empty() || !self.trees.iter().all(|t| t.validate(self.n_features)) {
            return Err(LearnError::InvalidInput("malformed forest".into()));
        }
        Ok(())
    }
}

/// Bins for the features that vary in the training matrix.
pub(crate) struct BinnedData {
    n: usize,
    /// Original column index of each usable feature.
    cols: Vec<usize>,
    cuts: Vec<Vec<f64>>,
    /// `bins[k][row]` for usable feature `k`.
    bins: Vec<Vec<u8>>,
}

fn cut_points(values: &mut [f64]) -> Vec<f64> {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    let mut distinct: Vec<(f64, usize)> = Vec::new();
    for &v in values.iter() {
        match distinct.last_mut() {
            Some((last, c)) if *last == v => *c += 1,
            _ => distinct.push((v, 1)),
        }
    }
    if distinct.len() <= 1 {
        return Vec::new();
    }
    // cut between distinct[i] and distinct[i+1] at distinct[i]: x <= cut goes left
    if distinct.len() <= MAX_BINS {
        return distinct[..distinct.len() - 1].iter().map(|d| d.0).collect();
    }
    let mut cuts = Vec::with_capacity(MAX_BINS - 1);
    let mut cum = 0usize;
    let mut next_target = 1;
    for (i, &(v, c)) in distinct[..distinct.len() - 1].iter().enumerate() {
        cum += c;
        let _ = i;
        if cum * MAX_BINS >= next_target * n {
            cuts.push(v);
            while next_target * n <= cum * MAX_BINS {
                next_target += 1;
            }
            if cuts.len() == MAX_BINS - 1 {
                break;
            }
        }
    }
    cuts
}

impl BinnedData {
    pub(crate) fn new(x: &[f64], d: usize, n: usize) -> Self {
        let per_col: Vec<(usize, Vec<f64>, Vec<u8>)> = (0..d)
            .into_par_iter()
            .filter_map(|j| {
                let mut vals: Vec<f64> = (0..n).map(|i| x[i * d + j]).collect();
                let cuts = cut_points(&mut vals);
                if cuts.is_empty() {
                    return None;
                }
                let bins = (0..n)
                    .map(|i| {
                        let v = x[i * d + j];
                        cuts.partition_point(|&c| c < v) as u8
                    })
                    .collect();
                Some((j, cuts, bins))
            })
            .collect();
        let mut out = BinnedData {
            n,
            cols: Vec::with_capacity(per_col.len()),
            cuts: Vec::with_capacity(per_col.len()),
            bins: Vec::with_capacity(per_col.len()),
        };
        for (j, c, b) in per_col {
            out.cols.push(j);
            out.cuts.push(c);
            out.bins.push(b);
        }
        out
    }

    pub(crate) fn n_usable(&self) -> usize {
        self.cols.len()
    }
}

struct Split {
    feature: usize,
    bin: usize,
    child_impurity: f64,
}

fn gini(pos: f64, n: f64) -> f64 {
    if n == 0.0 {
        0.0
    } else {
        let p = pos / n;
        2.0 * p * (1.0 - p)
    }
}

fn grow_tree(
    data: &BinnedData,
    y: &[bool],
    params: &ForestParams,
    mtry: usize,
    rng: &mut impl Rng,
) -> Tree {
    let n = data.n;
    let mut samples: Vec<u32> = if params.bootstrap {
        (0..n).map(|_| rng.gen_range(0..n as u32)).collect()
    } else {
        (0..n as u32).collect()
    };
    let min_leaf = params.min_samples_leaf.max(1);
    let n_cand = data.n_usable();
    let mut order: Vec<usize> = (0..n_cand).collect();
    let mut cnt = [0u32; MAX_BINS];
    let mut pos = [0u32; MAX_BINS];

    let mut tree = Tree::with_capacity(64);
    // (node, start, end, depth)
    let mut stack = Vec::new();
    let root_pos = samples.iter().filter(|&&s| y[s as usize]).count() as f64;
    tree.push(root_pos / n as f64, n as u32, gini(root_pos, n as f64));
    stack.push((0usize, 0usize, n, 0usize));

    while let Some((node, start, end, depth)) = stack.pop() {
        let nn = end - start;
        let node_imp = tree.impurity[node];
        if node_imp == 0.0
            || nn < 2 * min_leaf
            || params.max_depth.is_some_and(|m| depth >= m)
            || n_cand == 0
        {
            continue;
        }
        let node_samples = &samples[start..end];
        let mut best: Option<Split> = None;
        let mut visited = 0;
        for k in 0..n_cand {
            if visited == mtry {
                break;
            }
            let pick = rng.gen_range(k..n_cand);
            order.swap(k, pick);
            let f = order[k];
            let bins = &data.bins[f];
            cnt.fill(0);
            pos.fill(0);
            for &s in node_samples {
                let b = bins[s as usize] as usize;
                cnt[b] += 1;
                pos[b] += y[s as usize] as u32;
            }
            let n_bins = data.cuts[f].len() + 1;
            if cnt[..n_bins].iter().filter(|&&c| c > 0).count() < 2 {
                continue;
            }
            visited += 1;
            let total_pos: u32 = pos[..n_bins].iter().sum();
            let (mut ln, mut lp) = (0u32, 0u32);
            for b in 0..n_bins - 1 {
                ln += cnt[b];
                lp += pos[b];
                if cnt[b] == 0 {
                    continue;
                }
                let rn = nn as u32 - ln;
                if (ln as usize) < min_leaf || (rn as usize) < min_leaf {
                    continue;
                }
                let rp = total_pos - lp;
                let child =
                    ln as f64 * gini(lp as f64, ln as f64) + rn as f64 * gini(rp as f64, rn as f64);
                if best.as_ref().map_or(true, |s| child < s.child_impurity) {
                    best = Some(Split {
                        feature: f,
                        bin: b,
                        child_impurity: child,
                    });
                }
            }
        }
        let Some(split) = best else { continue };
        // partition samples[start..end] by bin <= split.bin
        let bins = &data.bins[split.feature];
        let seg = &mut samples[start..end];
        let mut i = 0;
        let mut j = seg.len();
        while i < j {
            if bins[seg[i] as usize] as usize <= split.bin {
                i += 1;
            } else {
                j -= 1;
                seg.swap(i, j);
            }
        }
        let mid = start + i;
        let side = |lo: usize, hi: usize| {
            let p = samples[lo..hi].iter().filter(|&&s| y[s as usize]).count() as f64;
            let m = (hi - lo) as f64;
            (p / m, (hi - lo) as u32, gini(p, m))
        };
        let (lv, ln, li) = side(start, mid);
        let (rv, rn, ri) = side(mid, end);
        let l = tree.push(lv, ln, li);
        let r = tree.push(rv, rn, ri);
        tree.feature[node] = data.cols[split.feature] as u32;
        tree.threshold[node] = data.cuts[split.feature][split.bin];
        tree.left[node] = l as u32;
        tree.right[node] = r as u32;
        stack.push((r, mid, end, depth + 1));
        stack.push((l, start, mid, depth + 1));
    }
    tree
}

fn mtry_for(params: &ForestParams, usable: usize) -> usize {
    params
        .features_per_split
        .unwrap_or_else(|| (usable as f64).sqrt().round() as usize)
        .clamp(1, usable.max(1))
}

pub(crate) fn train_on_binned(
    data: &BinnedData,
    d: usize,
    y: &[bool],
    params: &ForestParams,
    seed: u64,
    stream: &[u64],
) -> Result<ForestModel, LearnError> {
    if params.n_trees == 0 {
        return Err(LearnError::InvalidInput("need at least one tree".into()));
    }
    let mtry = mtry_for(params, data.n_usable());
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut keys = stream.to_vec();
            keys.push(t as u64);
            let mut rng = substream(seed, &keys);
            grow_tree(data, y, params, mtry, &mut rng)
        })
        .collect();
    Ok(ForestModel {
        params: params.clone(),
        seed,
        stream: stream.to_vec(),
        n_features: d,
        trees,
    })
}

pub(crate) fn check_labels(y: &[bool]) -> Result<(), LearnError> {
    let pos = y.iter().filter(|&&v| v).count();
    if pos == 0 || pos == y.len() {
        return Err(LearnError::DegenerateLabels);
    }
    Ok(())
}

/// Trains on a row-major `x` (`y.len()` rows by `d` columns). Tree `t` draws
/// from the RNG stream keyed by `(seed, stream..., t)`, so a forest's first
/// `k` trees do not depend on how many trees it has.
pub fn train_forest(
    x: &[f64],
    d: usize,
    y: &[bool],
    params: &ForestParams,
    seed: u64,
    stream: &[u64],
) -> Result<ForestModel, LearnError> {
    let n = y.len();
    if x.len() != n * d || n == 0 {
        return Err(LearnError::InvalidInput("matrix shape".into()));
    }
    check_labels(y)?;
    let data = BinnedData::new(x, d, n);
    train_on_binned(&data, d, y, params, seed, stream)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub feature: usize,
    pub mean: f64,
    pub std: f64,
}

/// Per-tree normalized gini importance, summarized as mean and population
/// standard deviation across trees, most important first.
pub fn feature_importance(forest: &ForestModel) -> Vec<FeatureImportance> {
    let d = forest.n_features;
    let per_tree: Vec<Vec<f64>> = forest.trees.iter().map(|t| t.importances(d)).collect();
    let k = per_tree.len() as f64;
    let mut out: Vec<FeatureImportance> = (0..d)
        .map(|j| {
            let mean = per_tree.iter().map(|v| v[j]).sum::<f64>() / k;
            let var = per_tree.iter().map(|v| (v[j] - mean).powi(2)).sum::<f64>() / k;
            FeatureImportance {
                feature: j,
                mean,
                std: var.sqrt(),
            }
        })
        .collect();
    out.sort_by(|a, b| b.mean.total_cmp(&a.mean).then(a.feature.cmp(&b.feature)));
    out
}
