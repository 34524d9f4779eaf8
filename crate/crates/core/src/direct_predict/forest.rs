//! Multi-output regression forests with axis-aligned threshold splits.
//!
//! Splits minimise the summed squared error of the target vectors. Candidate
//! thresholds are per-feature quantile cut points computed once from the
//! training inputs, so each node needs a single histogram pass per feature.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Fraction of input features considered at each split.
    pub feature_fraction: f64,
    /// Bootstrap sample size per tree; the full row count when absent.
    pub max_samples: Option<usize>,
    /// Candidate thresholds per feature (at most 255).
    pub max_bins: usize,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams { n_trees: 40, max_depth: 12, min_leaf: 5, feature_fraction: 1.0, max_samples: None, max_bins: 64 }
    }
}

impl ForestParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_trees == 0 || self.min_leaf == 0 {
            return Err("n_trees and min_leaf must be positive".into());
        }
        if !(self.feature_fraction > 0.0 && self.feature_fraction <= 1.0) {
            return Err(format!("feature_fraction must lie in (0, 1], got {}", self.feature_fraction));
        }
        if !(2..=255).contains(&self.max_bins) {
            return Err(format!("max_bins must lie in [2, 255], got {}", self.max_bins));
        }
        if self.max_samples == Some(0) {
            return Err("max_samples must be positive".into());
        }
        Ok(())
    }
}

/// Flat tree: `feature == LEAF` marks a leaf whose value starts at
/// `left * output_dim` in `values`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub feature: Vec<u32>,
    pub threshold: Vec<f64>,
    pub left: Vec<u32>,
    pub right: Vec<u32>,
    pub values: Vec<f64>,
}

pub const LEAF: u32 = u32::MAX;

impl Tree {
    pub fn n_nodes(&self) -> usize {
        self.feature.len()
    }

    fn leaf_of(&self, x: &[f64]) -> usize {
        let mut n = 0;
        while self.feature[n] != LEAF {
            n = if x[self.feature[n] as usize] <= self.threshold[n] { self.left[n] } else { self.right[n] } as usize;
        }
        self.left[n] as usize
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, n: usize) -> usize {
            if t.feature[n] == LEAF {
                0
            } else {
                1 + go(t, t.left[n] as usize).max(go(t, t.right[n] as usize))
            }
        }
        go(self, 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionForest {
    pub input_dim: usize,
    pub output_dim: usize,
    pub trees: Vec<Tree>,
}

impl RegressionForest {
    /// Mean of the trees' leaf values.
    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.input_dim, "forest input dimension");
        let mut out = vec![0.0; self.output_dim];
        for t in &self.trees {
            let leaf = t.leaf_of(x);
            for (o, v) in out.iter_mut().zip(&t.values[leaf * self.output_dim..(leaf + 1) * self.output_dim]) {
                *o += v;
            }
        }
        let n = self.trees.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }

    /// Trains on row-major `inputs` (`n x input_dim`) and `targets`
    /// (`n x output_dim`).
    pub fn train(
        inputs: &[f64],
        input_dim: usize,
        targets: &[f64],
        output_dim: usize,
        params: &ForestParams,
        seed: u64,
    ) -> Result<RegressionForest, String> {
        params.validate()?;
        if input_dim == 0 || output_dim == 0 {
            return Err("empty input or output dimension".into());
        }
        let n = inputs.len() / input_dim;
        if inputs.len() != n * input_dim || targets.len() != n * output_dim {
            return Err("inputs and targets disagree on the row count".into());
        }
        if n < 2 * params.min_leaf {
            return Err(format!("{n} rows, need at least {}", 2 * params.min_leaf));
        }
        if inputs.iter().chain(targets).any(|v| !v.is_finite()) {
            return Err("non-finite training value".into());
        }
        let binned = BinnedInputs::new(inputs, input_dim, params.max_bins);
        let data = TrainData { binned: &binned, targets, output_dim };
        let mut trees = Vec::with_capacity(params.n_trees);
        for t in 0..params.n_trees {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            let m = params.max_samples.unwrap_or(n);
            let rows: Vec<u32> = (0..m).map(|_| rng.gen_range(0..n) as u32).collect();
            trees.push(grow(&data, rows, params, &mut rng));
        }
        Ok(RegressionForest { input_dim, output_dim, trees })
    }
}

struct BinnedInputs {
    n_features: usize,
    /// Column-major bin index per row and feature.
    bins: Vec<Vec<u8>>,
    /// Threshold of each bin: bin `b` holds values `<= cuts[f][b]` and above
    /// the previous cut.
    cuts: Vec<Vec<f64>>,
}

impl BinnedInputs {
    fn new(inputs: &[f64], dim: usize, max_bins: usize) -> Self {
        let n = inputs.len() / dim;
        let mut bins = Vec::with_capacity(dim);
        let mut cuts = Vec::with_capacity(dim);
        for f in 0..dim {
            let mut col: Vec<f64> = (0..n).map(|r| inputs[r * dim + f]).collect();
            col.sort_by(f64::total_cmp);
            let mut c: Vec<f64> = (1..max_bins).map(|q| col[(q * n / max_bins).min(n - 1)]).collect();
            c.dedup();
            // the last bin reaches the column maximum
            if c.last() != col.last() {
                c.push(col[n - 1]);
            }
            let b: Vec<u8> =
                (0..n).map(|r| c.partition_point(|&cut| cut < inputs[r * dim + f]).min(c.len() - 1) as u8).collect();
            bins.push(b);
            cuts.push(c);
        }
        BinnedInputs { n_features: dim, bins, cuts }
    }
}

struct TrainData<'a> {
    binned: &'a BinnedInputs,
    targets: &'a [f64],
    output_dim: usize,
}

struct Builder {
    tree: Tree,
}

impl Builder {
    fn push_leaf(&mut self, value: Vec<f64>) -> u32 {
        let id = self.tree.feature.len() as u32;
        let leaf_index = (self.tree.values.len() / value.len().max(1)) as u32;
        self.tree.feature.push(LEAF);
        self.tree.threshold.push(0.0);
        self.tree.left.push(leaf_index);
        self.tree.right.push(leaf_index);
        self.tree.values.extend(value);
        id
    }
}

fn mean_target(data: &TrainData<'_>, rows: &[u32]) -> Vec<f64> {
    let d = data.output_dim;
    let mut m = vec![0.0; d];
    for &r in rows {
        for (k, v) in m.iter_mut().enumerate() {
            *v += data.targets[r as usize * d + k];
        }
    }
    m.iter_mut().for_each(|v| *v /= rows.len() as f64);
    m
}

struct Split {
    feature: usize,
    bin: usize,
}

fn best_split(data: &TrainData<'_>, rows: &[u32], params: &ForestParams, rng: &mut ChaCha8Rng) -> Option<Split> {
    let d = data.output_dim;
    let nf = data.binned.n_features;
    let mut features: Vec<usize> = (0..nf).collect();
    let k = ((nf as f64 * params.feature_fraction).ceil() as usize).clamp(1, nf);
    if k < nf {
        features.shuffle(rng);
        features.truncate(k);
        features.sort_unstable();
    }
    let n = rows.len();
    let mut total = vec![0.0; d];
    for &r in rows {
        for (k, t) in total.iter_mut().enumerate() {
            *t += data.targets[r as usize * d + k];
        }
    }
    let mut best: Option<(f64, Split)> = None;
    let mut count = Vec::new();
    let mut sums = Vec::new();
    for f in features {
        let nb = data.binned.cuts[f].len();
        count.clear();
        count.resize(nb, 0usize);
        sums.clear();
        sums.resize(nb * d, 0.0);
        let col = &data.binned.bins[f];
        for &r in rows {
            let b = col[r as usize] as usize;
            count[b] += 1;
            let t = &data.targets[r as usize * d..(r as usize + 1) * d];
            for (s, v) in sums[b * d..(b + 1) * d].iter_mut().zip(t) {
                *s += v;
            }
        }
        // the sum of squares is split-independent, so maximise
        // |S_l|^2 / n_l + |S_r|^2 / n_r instead of minimising the SSE
        let mut nl = 0usize;
        let mut sl = vec![0.0; d];
        for b in 0..nb.saturating_sub(1) {
            nl += count[b];
            for (s, v) in sl.iter_mut().zip(&sums[b * d..(b + 1) * d]) {
                *s += v;
            }
            let nr = n - nl;
            if nl < params.min_leaf {
                continue;
            }
            if nr < params.min_leaf {
                break;
            }
            let gain_l: f64 = sl.iter().map(|v| v * v).sum::<f64>() / nl as f64;
            let gain_r: f64 = sl.iter().zip(&total).map(|(l, t)| (t - l) * (t - l)).sum::<f64>() / nr as f64;
            let score = gain_l + gain_r;
            if best.as_ref().is_none_or(|(s, _)| score > *s) {
                best = Some((score, Split { feature: f, bin: b }));
            }
        }
    }
    let (score, split) = best?;
    let parent: f64 = total.iter().map(|v| v * v).sum::<f64>() / n as f64;
    (score > parent * (1.0 + 1e-12) + 1e-12).then_some(split)
}

fn grow(data: &TrainData<'_>, rows: Vec<u32>, params: &ForestParams, rng: &mut ChaCha8Rng) -> Tree {
    let mut b = Builder {
        tree: Tree { feature: Vec::new(), threshold: Vec::new(), left: Vec::new(), right: Vec::new(), values: Vec::new() },
    };
    grow_node(data, rows, 0, params, rng, &mut b);
    b.tree
}

fn grow_node(
    data: &TrainData<'_>,
    rows: Vec<u32>,
    depth: usize,
    params: &ForestParams,
    rng: &mut ChaCha8Rng,
    b: &mut Builder,
) -> u32 {
    let split = if depth < params.max_depth && rows.len() >= 2 * params.min_leaf {
        best_split(data, &rows, params, rng)
    } else {
        None
    };
    let Some(split) = split else {
        return b.push_leaf(mean_target(data, &rows));
    };
    let col = &data.binned.bins[split.feature];
    let (left, right): (Vec<u32>, Vec<u32>) = rows.into_iter().partition(|&r| col[r as usize] as usize <= split.bin);
    let id = b.tree.feature.len();
    b.tree.feature.push(split.feature as u32);
    b.tree.threshold.push(data.binned.cuts[split.feature][split.bin]);
    b.tree.left.push(0);
    b.tree.right.push(0);
    let l = grow_node(data, left, depth + 1, params, rng, b);
    let r = grow_node(data, right, depth + 1, params, rng, b);
    b.tree.left[id] = l;
    b.tree.right[id] = r;
    id as u32
}
