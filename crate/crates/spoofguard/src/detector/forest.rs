//! Isolation forest built from scratch: random binary partition trees over
//! z-scored feature windows, anomaly score `2^(-E[h]/c(psi))`, and a binary
//! threshold at the `(1 - alpha)` quantile of the training scores.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use super::DetectorError;

/// Model file schema version.
pub const MODEL_VERSION: u32 = 1;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Average path length of an unsuccessful BST search over `n` points; the
/// normalizer `c(n)` of the anomaly score and the leaf-size adjustment.
/// Small sizes are special-cased exactly (c(2) = 1), larger ones use the
/// harmonic-number approximation `H(i) = ln(i) + gamma`.
pub fn average_path_length(n: usize) -> f64 {
    match n {
        0 | 1 => 0.0,
        2 => 1.0,
        _ => {
            let nf = n as f64;
            2.0 * ((nf - 1.0).ln() + EULER_GAMMA) - 2.0 * (nf - 1.0) / nf
        }
    }
}

/// Linear-interpolation quantile of an unsorted sample, `q` in [0, 1].
pub fn quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of empty sample");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("scores are finite"));
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = pos - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum Node {
    Leaf {
        size: usize,
    },
    Split {
        feature: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// One random partition tree stored as an arena.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IsolationTree {
    nodes: Vec<Node>,
}

impl IsolationTree {
    fn build(data: &[Vec<f64>], subsample: &[usize], height_limit: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut nodes = Vec::new();
        let idx: Vec<usize> = subsample.to_vec();
        Self::grow(data, idx, 0, height_limit, rng, &mut nodes);
        Self { nodes }
    }

    fn grow(
        data: &[Vec<f64>],
        idx: Vec<usize>,
        depth: usize,
        height_limit: usize,
        rng: &mut ChaCha8Rng,
        nodes: &mut Vec<Node>,
    ) -> usize {
        let dim = data[0].len();
        if depth >= height_limit || idx.len() <= 1 {
            nodes.push(Node::Leaf { size: idx.len() });
            return nodes.len() - 1;
        }
        // Candidate features are those with spread in the data reaching
        // this node; identical points cannot be separated.
        let mut splittable = Vec::with_capacity(dim);
        for f in 0..dim {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &i in &idx {
                lo = lo.min(data[i][f]);
                hi = hi.max(data[i][f]);
            }
            if hi > lo {
                splittable.push((f, lo, hi));
            }
        }
        if splittable.is_empty() {
            nodes.push(Node::Leaf { size: idx.len() });
            return nodes.len() - 1;
        }
        let (feature, lo, hi) = splittable[rng.gen_range(0..splittable.len())];
        let value = rng.gen_range(lo..hi);
        let (left_idx, right_idx): (Vec<usize>, Vec<usize>) = idx.into_iter().partition(|&i| data[i][feature] < value);
        let slot = nodes.len();
        nodes.push(Node::Leaf { size: 0 }); // placeholder until children exist
        let left = Self::grow(data, left_idx, depth + 1, height_limit, rng, nodes);
        let right = Self::grow(data, right_idx, depth + 1, height_limit, rng, nodes);
        nodes[slot] = Node::Split {
            feature,
            value,
            left,
            right,
        };
        slot
    }

    /// Edges walked to reach the sample's leaf plus the leaf-size
    /// adjustment `c(size)`.
    pub fn path_length(&self, x: &[f64]) -> f64 {
        let mut node = 0usize;
        let mut depth = 0.0;
        loop {
            match &self.nodes[node] {
                Node::Leaf { size } => return depth + average_path_length(*size),
                Node::Split {
                    feature,
                    value,
                    left,
                    right,
                } => {
                    node = if x[*feature] < *value { *left } else { *right };
                    depth += 1.0;
                }
            }
        }
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ForestParams {
    /// Number of trees `T`.
    pub trees: usize,
    /// Subsample size `psi`, capped at the training-set size.
    pub subsample: usize,
    /// Contamination: the assumed anomaly fraction that sets the threshold.
    pub alpha: f64,
    /// Sliding-window width `W`; inputs are `3 * W`-dimensional.
    pub window: usize,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            trees: 100,
            subsample: 256,
            alpha: 0.2,
            window: 3,
        }
    }
}

/// A trained ensemble plus everything scoring needs: the normalizer,
/// threshold, window width, and the feature standardization constants.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IsolationForest {
    version: u32,
    trees: Vec<IsolationTree>,
    psi: usize,
    c_psi: f64,
    threshold: f64,
    alpha: f64,
    window: usize,
    dim: usize,
    feature_mean: Vec<f64>,
    feature_std: Vec<f64>,
}

impl IsolationForest {
    /// Train on windowed feature vectors (each of dimension `3 * W`).
    /// Deterministic for a fixed seed.
    pub fn train(samples: &[Vec<f64>], params: &ForestParams, seed: u64) -> Result<Self, DetectorError> {
        if params.trees == 0 {
            return Err(DetectorError::BadParams("forest needs at least one tree".into()));
        }
        if !(params.alpha > 0.0 && params.alpha < 1.0) {
            return Err(DetectorError::BadParams(format!(
                "contamination must lie in (0, 1), got {}",
                params.alpha
            )));
        }
        let psi = params.subsample.min(samples.len());
        if psi < 2 {
            return Err(DetectorError::TooFewSamples {
                need: 2,
                got: samples.len(),
            });
        }
        let dim = samples.first().map(|s| s.len()).unwrap_or(0);
        if dim == 0 || samples.iter().any(|s| s.len() != dim) {
            return Err(DetectorError::BadParams("inconsistent sample dimensions".into()));
        }

        // z-score per dimension; the three raw features live on wildly
        // different scales (dimensionless, m, m^4).
        let n = samples.len() as f64;
        let mut mean = vec![0.0; dim];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v / n;
            }
        }
        let mut std = vec![0.0; dim];
        for s in samples {
            for d in 0..dim {
                std[d] += (s[d] - mean[d]).powi(2) / n;
            }
        }
        for sd in &mut std {
            *sd = sd.sqrt();
            if *sd <= 0.0 || !sd.is_finite() {
                *sd = 1.0;
            }
        }
        let standardized: Vec<Vec<f64>> = samples
            .iter()
            .map(|s| s.iter().enumerate().map(|(d, v)| (v - mean[d]) / std[d]).collect())
            .collect();

        let height_limit = (psi as f64).log2().ceil() as usize;
        let mut master = ChaCha8Rng::seed_from_u64(seed);
        let mut trees = Vec::with_capacity(params.trees);
        for _ in 0..params.trees {
            let mut tree_rng = ChaCha8Rng::seed_from_u64(master.gen());
            let subsample = rand::seq::index::sample(&mut tree_rng, standardized.len(), psi).into_vec();
            trees.push(IsolationTree::build(&standardized, &subsample, height_limit, &mut tree_rng));
        }

        let mut forest = Self {
            version: MODEL_VERSION,
            trees,
            psi,
            c_psi: average_path_length(psi),
            threshold: 0.0,
            alpha: params.alpha,
            window: params.window,
            dim,
            feature_mean: mean,
            feature_std: std,
        };
        let train_scores: Vec<f64> = standardized.iter().map(|s| forest.score_standardized(s)).collect();
        forest.threshold = quantile(&train_scores, 1.0 - params.alpha);
        Ok(forest)
    }

    fn score_standardized(&self, x: &[f64]) -> f64 {
        let total: f64 = self.trees.iter().map(|t| t.path_length(x)).sum();
        let mean_path = total / self.trees.len() as f64;
        2f64.powf(-mean_path / self.c_psi)
    }

    /// Anomaly score in (0, 1); higher means easier to isolate.
    pub fn anomaly_score(&self, window: &[f64]) -> Result<f64, DetectorError> {
        if window.len() != self.dim {
            return Err(DetectorError::DimensionMismatch {
                expected: self.dim,
                got: window.len(),
            });
        }
        let standardized: Vec<f64> = window
            .iter()
            .enumerate()
            .map(|(d, v)| (v - self.feature_mean[d]) / self.feature_std[d])
            .collect();
        Ok(self.score_standardized(&standardized))
    }

    /// Binary decision: positive iff the score exceeds the trained
    /// threshold.
    pub fn is_positive(&self, score: f64) -> bool {
        score > self.threshold
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn psi(&self) -> usize {
        self.psi
    }

    pub fn c_psi(&self) -> f64 {
        self.c_psi
    }

    pub fn save(&self, path: &Path) -> Result<(), DetectorError> {
        let json = serde_json::to_string_pretty(self).map_err(|e| DetectorError::Model(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| DetectorError::Model(format!("write {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, DetectorError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| DetectorError::Model(format!("read {}: {e}", path.display())))?;
        let forest: Self = serde_json::from_str(&raw).map_err(|e| DetectorError::Model(e.to_string()))?;
        if forest.version != MODEL_VERSION {
            return Err(DetectorError::Model(format!(
                "model version {} unsupported (expected {MODEL_VERSION})",
                forest.version
            )));
        }
        Ok(forest)
    }
}
