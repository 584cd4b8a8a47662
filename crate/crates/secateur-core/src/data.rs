//! In-memory token datasets and the synthetic task-pair generator.
//!
//! The generator builds two sequence-classification tasks over one latent
//! feature space. Each feature owns a disjoint token bucket; a sample
//! activates a random subset of features and emits tokens from the active
//! buckets mixed with noise tokens. Labels are linear-threshold functions of
//! the latent activations. The `relatedness` knob is the fraction of the
//! target task's features (with their weights) shared by the auxiliary
//! task's labeling function, so 1.0 means the same function sampled twice
//! and 0.0 means functions over disjoint feature sets.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coupling::TaskRole;
use crate::error::CoreError;
use crate::rngutil;

/// Reserved token ids.
pub const PAD_TOKEN: u32 = 0;
pub const MASK_TOKEN: u32 = 1;
pub const FIRST_CONTENT_TOKEN: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification { num_classes: usize },
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Labels {
    Class(Vec<u32>),
    Real(Vec<f64>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Class(v) => v.len(),
            Labels::Real(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, idx: &[usize]) -> Labels {
        match self {
            Labels::Class(v) => Labels::Class(idx.iter().map(|&i| v[i]).collect()),
            Labels::Real(v) => Labels::Real(idx.iter().map(|&i| v[i]).collect()),
        }
    }
}

/// Fixed-length token sequences with labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDataset {
    pub name: String,
    pub kind: TaskKind,
    pub seq_len: usize,
    /// n * seq_len token ids, row-major.
    pub tokens: Vec<u32>,
    pub labels: Labels,
}

impl TokenDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sequence(&self, i: usize) -> &[u32] {
        &self.tokens[i * self.seq_len..(i + 1) * self.seq_len]
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if self.tokens.len() != self.len() * self.seq_len {
            return Err(CoreError::Shape(format!(
                "dataset '{}': {} tokens vs {} examples x seq {}",
                self.name,
                self.tokens.len(),
                self.len(),
                self.seq_len
            )));
        }
        if let (TaskKind::Classification { num_classes }, Labels::Class(ls)) = (&self.kind, &self.labels) {
            if let Some(bad) = ls.iter().find(|&&l| l as usize >= *num_classes) {
                return Err(CoreError::Invalid(format!(
                    "dataset '{}': label {bad} >= {num_classes} classes",
                    self.name
                )));
            }
        }
        match (&self.kind, &self.labels) {
            (TaskKind::Classification { .. }, Labels::Real(_)) => {
                return Err(CoreError::Invalid(format!(
                    "dataset '{}': real labels on a classification task",
                    self.name
                )))
            }
            (TaskKind::Regression, Labels::Class(_)) => {
                return Err(CoreError::Invalid(format!(
                    "dataset '{}': class labels on a regression task",
                    self.name
                )))
            }
            _ => {}
        }
        Ok(())
    }

    pub fn select(&self, idx: &[usize]) -> TokenDataset {
        let mut tokens = Vec::with_capacity(idx.len() * self.seq_len);
        for &i in idx {
            tokens.extend_from_slice(self.sequence(i));
        }
        TokenDataset {
            name: self.name.clone(),
            kind: self.kind,
            seq_len: self.seq_len,
            tokens,
            labels: self.labels.select(idx),
        }
    }

    /// Deterministic seeded subsample of a fraction of the examples.
    pub fn subsample(&self, fraction: f64, seed: u64) -> Result<TokenDataset, CoreError> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(CoreError::Invalid(format!("fraction must be in (0,1], got {fraction}")));
        }
        let keep = (libm::ceil(self.len() as f64 * fraction) as usize).clamp(1, self.len());
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = rngutil::stream(seed, &format!("subsample:{}", self.name));
        idx.shuffle(&mut rng);
        idx.truncate(keep);
        idx.sort_unstable();
        Ok(self.select(&idx))
    }

    /// Shuffled minibatches for one epoch; the epoch index seeds the order.
    pub fn epoch_batches(&self, batch_size: usize, seed: u64, epoch: u64) -> Vec<Batch> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = rngutil::stream(seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15), &format!("epoch:{}", self.name));
        idx.shuffle(&mut rng);
        idx.chunks(batch_size)
            .map(|chunk| {
                let sub = self.select(chunk);
                Batch { tokens: sub.tokens, labels: sub.labels, size: chunk.len() }
            })
            .collect()
    }

    /// Fixed-order batches (evaluation).
    pub fn ordered_batches(&self, batch_size: usize) -> Vec<Batch> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(batch_size)
            .map(|chunk| {
                let sub = self.select(chunk);
                Batch { tokens: sub.tokens, labels: sub.labels, size: chunk.len() }
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub tokens: Vec<u32>,
    pub labels: Labels,
    pub size: usize,
}

/// Knobs of the synthetic pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPairParams {
    /// Fraction of the target's latent features shared with the auxiliary
    /// task, in [0, 1].
    pub relatedness: f64,
    pub n_target: usize,
    pub n_aux: usize,
    pub vocab_size: usize,
    /// Label flip probability.
    pub noise: f64,
    pub seq_len: usize,
    pub num_latents: usize,
    pub tokens_per_feature: usize,
    pub num_classes: usize,
    /// Probability a position carries a feature token rather than noise.
    pub signal_rate: f64,
}

impl Default for SyntheticPairParams {
    fn default() -> Self {
        SyntheticPairParams {
            relatedness: 0.8,
            n_target: 100,
            n_aux: 10_000,
            vocab_size: 1000,
            noise: 0.05,
            seq_len: 32,
            num_latents: 12,
            tokens_per_feature: 8,
            num_classes: 2,
            signal_rate: 0.75,
        }
    }
}

impl SyntheticPairParams {
    pub fn validate(&self) -> Result<(), CoreError> {
        if !(0.0..=1.0).contains(&self.relatedness) {
            return Err(CoreError::Invalid(format!("relatedness must be in [0,1], got {}", self.relatedness)));
        }
        if self.n_target == 0 || self.n_aux == 0 || self.num_latents == 0 {
            return Err(CoreError::Invalid("sizes must be positive".into()));
        }
        if !(0.0..0.5).contains(&self.noise) {
            return Err(CoreError::Invalid(format!("noise must be in [0, 0.5), got {}", self.noise)));
        }
        if self.num_classes < 2 {
            return Err(CoreError::Invalid("need at least two classes".into()));
        }
        let shared = self.shared_features();
        let total_features = 2 * self.num_latents - shared;
        let needed = total_features * self.tokens_per_feature + self.tokens_per_feature;
        if needed + FIRST_CONTENT_TOKEN as usize > self.vocab_size {
            return Err(CoreError::Invalid(format!(
                "vocab {} too small for {} features x {} tokens",
                self.vocab_size, total_features, self.tokens_per_feature
            )));
        }
        Ok(())
    }

    pub fn shared_features(&self) -> usize {
        libm::round(self.relatedness * self.num_latents as f64) as usize
    }
}

/// Materialized pair structure: feature buckets, per-task weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticPair {
    pub params: SyntheticPairParams,
    pub seed: u64,
    /// Feature -> token bucket, for all 2L - k features.
    buckets: Vec<Vec<u32>>,
    noise_pool: Vec<u32>,
    /// Per-class weight vectors over the full latent space; zero outside the
    /// task's own features.
    weights_target: Vec<Vec<f64>>,
    weights_aux: Vec<Vec<f64>>,
    /// Feature indices used by each task.
    features_target: Vec<usize>,
    features_aux: Vec<usize>,
}

impl SyntheticPair {
    pub fn new(params: SyntheticPairParams, seed: u64) -> Result<Self, CoreError> {
        params.validate()?;
        let l = params.num_latents;
        let shared = params.shared_features();
        let total = 2 * l - shared;
        let mut rng = rngutil::stream(seed, "pair-structure");

        // disjoint token buckets over a shuffled content vocabulary
        let mut content: Vec<u32> = (FIRST_CONTENT_TOKEN..params.vocab_size as u32).collect();
        content.shuffle(&mut rng);
        let g = params.tokens_per_feature;
        let buckets: Vec<Vec<u32>> = (0..total).map(|f| content[f * g..(f + 1) * g].to_vec()).collect();
        let noise_pool: Vec<u32> = content[total * g..].to_vec();

        let features_target: Vec<usize> = (0..l).collect();
        let features_aux: Vec<usize> = (0..shared).chain(l..total).collect();
        debug_assert_eq!(features_aux.len(), l);

        // class weights: shared features keep identical weights across tasks
        let mut weights_target = vec![vec![0.0; total]; params.num_classes];
        let mut weights_aux = vec![vec![0.0; total]; params.num_classes];
        for c in 0..params.num_classes {
            for &f in &features_target {
                weights_target[c][f] = rngutil::standard_normal(&mut rng);
            }
            for &f in &features_aux {
                weights_aux[c][f] = if f < shared {
                    weights_target[c][f]
                } else {
                    rngutil::standard_normal(&mut rng)
                };
            }
        }

        Ok(SyntheticPair {
            params,
            seed,
            buckets,
            noise_pool,
            weights_target,
            weights_aux,
            features_target,
            features_aux,
        })
    }

    pub fn total_features(&self) -> usize {
        self.buckets.len()
    }

    /// Noiseless labels of both tasks on one latent activation vector.
    pub fn labels_for(&self, latents: &[bool]) -> (u32, u32) {
        let score = |weights: &[Vec<f64>]| -> u32 {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for (c, w) in weights.iter().enumerate() {
                let v: f64 = w
                    .iter()
                    .zip(latents)
                    .map(|(wf, &a)| wf * (if a { 0.5 } else { -0.5 }))
                    .sum();
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            best as u32
        };
        (score(&self.weights_target), score(&self.weights_aux))
    }

    pub fn sample_latents<R: Rng>(&self, rng: &mut R) -> Vec<bool> {
        (0..self.total_features()).map(|_| rng.gen_bool(0.5)).collect()
    }

    pub fn emit_tokens<R: Rng>(&self, latents: &[bool], rng: &mut R) -> Vec<u32> {
        let active: Vec<usize> = (0..latents.len()).filter(|&f| latents[f]).collect();
        (0..self.params.seq_len)
            .map(|_| {
                if !active.is_empty() && rng.gen_bool(self.params.signal_rate) {
                    let f = active[rng.gen_range(0..active.len())];
                    let bucket = &self.buckets[f];
                    bucket[rng.gen_range(0..bucket.len())]
                } else {
                    self.noise_pool[rng.gen_range(0..self.noise_pool.len())]
                }
            })
            .collect()
    }

    /// Materialize a labeled dataset for a task; `stream` names the split so
    /// train/val/test draws stay independent.
    pub fn dataset(&self, role: TaskRole, n: usize, stream: &str) -> TokenDataset {
        let mut rng = rngutil::stream(self.seed, &format!("data:{}:{stream}", role.label()));
        let mut tokens = Vec::with_capacity(n * self.params.seq_len);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let latents = self.sample_latents(&mut rng);
            tokens.extend(self.emit_tokens(&latents, &mut rng));
            let (lt, la) = self.labels_for(&latents);
            let mut label = match role {
                TaskRole::Target => lt,
                TaskRole::Aux => la,
            };
            if self.params.noise > 0.0 && rng.gen_bool(self.params.noise) {
                label = (label + 1 + rng.gen_range(0..self.params.num_classes as u32 - 1))
                    % self.params.num_classes as u32;
            }
            labels.push(label);
        }
        TokenDataset {
            name: format!("synth-{}-{stream}", role.label()),
            kind: TaskKind::Classification { num_classes: self.params.num_classes },
            seq_len: self.params.seq_len,
            tokens,
            labels: Labels::Class(labels),
        }
    }

    /// Unlabeled sequences from the same token process, for masked-token
    /// pretraining.
    pub fn corpus(&self, n: usize) -> Vec<u32> {
        let mut rng = rngutil::stream(self.seed, "corpus");
        let mut tokens = Vec::with_capacity(n * self.params.seq_len);
        for _ in 0..n {
            let latents = self.sample_latents(&mut rng);
            tokens.extend(self.emit_tokens(&latents, &mut rng));
        }
        tokens
    }
}

#[cfg(test)]
mod tests {
    extern crate std;

    use super::*;

    fn params(rho: f64) -> SyntheticPairParams {
        SyntheticPairParams {
            relatedness: rho,
            n_target: 50,
            n_aux: 80,
            vocab_size: 400,
            seq_len: 12,
            ..Default::default()
        }
    }

    #[test]
    fn full_relatedness_means_identical_labels() {
        let pair = SyntheticPair::new(params(1.0), 5).unwrap();
        let mut rng = rngutil::stream(5, "t");
        for _ in 0..200 {
            let latents = pair.sample_latents(&mut rng);
            let (t, a) = pair.labels_for(&latents);
            assert_eq!(t, a);
        }
    }

    #[test]
    fn zero_relatedness_label_agreement_is_chance() {
        let pair = SyntheticPair::new(params(0.0), 6).unwrap();
        let mut rng = rngutil::stream(6, "t");
        let n = 100_000usize;
        let mut agree = 0usize;
        for _ in 0..n {
            let latents = pair.sample_latents(&mut rng);
            let (t, a) = pair.labels_for(&latents);
            if t == a {
                agree += 1;
            }
        }
        // binary labels: agreement within 3 binomial sigmas of 1/2
        let p = agree as f64 / n as f64;
        let sigma = (0.25 / n as f64).sqrt();
        assert!((p - 0.5).abs() < 3.0 * sigma, "agreement {p}");
    }

    #[test]
    fn datasets_are_deterministic_and_sized() {
        let pair = SyntheticPair::new(params(0.8), 7).unwrap();
        let a = pair.dataset(TaskRole::Target, 50, "train");
        let b = pair.dataset(TaskRole::Target, 50, "train");
        assert_eq!(a, b);
        assert_eq!(a.len(), 50);
        a.validate().unwrap();
        let c = pair.dataset(TaskRole::Target, 50, "val");
        assert_ne!(a.tokens, c.tokens, "splits must differ");
    }

    #[test]
    fn subsample_is_deterministic_and_proportional() {
        let pair = SyntheticPair::new(params(0.5), 8).unwrap();
        let ds = pair.dataset(TaskRole::Aux, 80, "train");
        let s1 = ds.subsample(0.25, 3).unwrap();
        let s2 = ds.subsample(0.25, 3).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(s1.len(), 20);
        let full = ds.subsample(1.0, 3).unwrap();
        assert_eq!(full.len(), 80);
    }

    #[test]
    fn epoch_batches_cover_everything_once() {
        let pair = SyntheticPair::new(params(0.5), 9).unwrap();
        let ds = pair.dataset(TaskRole::Target, 50, "train");
        let batches = ds.epoch_batches(16, 1, 0);
        let total: usize = batches.iter().map(|b| b.size).sum();
        assert_eq!(total, 50);
        assert_eq!(batches.len(), 4);
        // same epoch seed, same order; different epoch, different order
        let again = ds.epoch_batches(16, 1, 0);
        assert_eq!(batches[0].tokens, again[0].tokens);
        let other = ds.epoch_batches(16, 1, 1);
        assert_ne!(batches[0].tokens, other[0].tokens);
    }

    #[test]
    fn label_mismatch_rejected() {
        let ds = TokenDataset {
            name: "bad".into(),
            kind: TaskKind::Regression,
            seq_len: 2,
            tokens: vec![2, 3],
            labels: Labels::Class(vec![0]),
        };
        assert!(ds.validate().is_err());
    }
}
