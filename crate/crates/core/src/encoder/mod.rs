//! Embedding-table dual encoder.
//!
//! A text is encoded as the mean of its token embedding rows, L2-normalized.
//! Query and document towers share one table. Training minimizes a margin
//! contrastive loss on cosine distance `d = 1 − cos`:
//!
//! ```text
//! loss = ½·( y·d² + (1 − y)·max(0, m − d)² )      y = 1 for similar pairs
//! ```
//!
//! [`mlm`] adds a masked-token pretraining objective over the same table.

mod checkpoint;
mod dense;
pub mod mlm;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tokenize::{TokenId, TokenizerScheme, Vocabulary};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use dense::{dense_retrieve, DenseIndex, DENSE_TAG};
pub use mlm::{mlm_batch_gradient, mlm_batch_loss, mlm_pretrain, MaskedExample, MlmReport};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    embeddings: Vec<f64>,
    vocab_size: usize,
    dim: usize,
    scheme: TokenizerScheme,
    vocab_fingerprint: String,
    provenance: Vec<String>,
}

impl EncoderParams {
    /// Uniform init in `[−0.5/dim, 0.5/dim]` from a seeded generator.
    pub fn init(vocab: &Vocabulary, dim: usize, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidConfig(format!("encoder dim must be >= 2, got {dim}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = 0.5 / dim as f64;
        let embeddings = (0..vocab.len() * dim).map(|_| rng.random_range(-h..=h)).collect();
        Ok(EncoderParams {
            embeddings,
            vocab_size: vocab.len(),
            dim,
            scheme: vocab.scheme(),
            vocab_fingerprint: vocab.fingerprint(),
            provenance: Vec::new(),
        })
    }

    /// Wraps an explicit row-major `vocab_size × dim` matrix.
    pub fn from_matrix(
        embeddings: Vec<f64>,
        dim: usize,
        scheme: TokenizerScheme,
        vocab_fingerprint: impl Into<String>,
    ) -> Result<Self> {
        if dim < 2 || embeddings.len() % dim != 0 {
            return Err(Error::InvalidConfig(format!(
                "matrix of {} values does not split into rows of dim {dim}",
                embeddings.len()
            )));
        }
        if embeddings.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidConfig("embedding matrix has non-finite entries".into()));
        }
        Ok(EncoderParams {
            vocab_size: embeddings.len() / dim,
            embeddings,
            dim,
            scheme,
            vocab_fingerprint: vocab_fingerprint.into(),
            provenance: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn scheme(&self) -> TokenizerScheme {
        self.scheme
    }

    pub fn vocab_fingerprint(&self) -> &str {
        &self.vocab_fingerprint
    }

    /// Row-major embedding matrix.
    pub fn embeddings(&self) -> &[f64] {
        &self.embeddings
    }

    pub fn embeddings_mut(&mut self) -> &mut [f64] {
        &mut self.embeddings
    }

    pub fn row(&self, id: TokenId) -> &[f64] {
        let i = id as usize * self.dim;
        &self.embeddings[i..i + self.dim]
    }

    /// Stage records such as `variant=lms-mlm stage=stage2`, oldest first.
    pub fn provenance(&self) -> &[String] {
        &self.provenance
    }

    pub fn push_provenance(&mut self, entry: impl Into<String>) {
        self.provenance.push(entry.into());
    }

    pub fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        match ids.iter().find(|&&id| id as usize >= self.vocab_size) {
            Some(&id) => Err(Error::TokenOutOfRange {
                id,
                vocab_size: self.vocab_size,
            }),
            None => Ok(()),
        }
    }

    /// Mean of the token rows; zero vector for an empty sequence.
    fn pool(&self, ids: &[TokenId]) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        if ids.is_empty() {
            return acc;
        }
        for &id in ids {
            for (a, x) in acc.iter_mut().zip(self.row(id)) {
                *a += x;
            }
        }
        let n = ids.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}

pub(crate) fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub(crate) fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

/// Mean-pooled, unit-normalized embedding. Empty input (or a pooled zero
/// vector) gives the zero vector.
pub fn embed(params: &EncoderParams, token_ids: &[TokenId]) -> Result<Vec<f64>> {
    params.check_ids(token_ids)?;
    let mut v = params.pool(token_ids);
    let n = norm(&v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    Ok(v)
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        0.0
    } else {
        dot(u, v) / (nu * nv)
    }
}

/// How a cosine similarity becomes the distance fed to the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistanceMode {
    /// `d = 1 − cos`: similar pairs are pulled toward cosine 1.
    #[default]
    OneMinusCosine,
    /// `d = cos`, the similarity used directly as a distance. Kept only for
    /// comparison runs; it drives similar pairs toward orthogonality.
    RawCosine,
}

impl DistanceMode {
    fn distance(self, sim: f64) -> f64 {
        match self {
            DistanceMode::OneMinusCosine => 1.0 - sim,
            DistanceMode::RawCosine => sim,
        }
    }

    fn d_distance_d_sim(self) -> f64 {
        match self {
            DistanceMode::OneMinusCosine => -1.0,
            DistanceMode::RawCosine => 1.0,
        }
    }
}

impl fmt::Display for DistanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistanceMode::OneMinusCosine => "one_minus_cosine",
            DistanceMode::RawCosine => "raw_cosine",
        })
    }
}

impl FromStr for DistanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one_minus_cosine" => Ok(DistanceMode::OneMinusCosine),
            "raw_cosine" => Ok(DistanceMode::RawCosine),
            _ => Err(Error::InvalidConfig(format!("unknown distance mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PairLabel {
    Dissimilar = 0,
    Similar = 1,
}

impl PairLabel {
    pub fn as_f64(self) -> f64 {
        match self {
            PairLabel::Dissimilar => 0.0,
            PairLabel::Similar => 1.0,
        }
    }
}

/// Margin contrastive loss on `d = 1 − sim`.
pub fn contrastive_loss(sim: f64, label: PairLabel, margin: f64) -> f64 {
    contrastive_loss_with(sim, label, margin, DistanceMode::OneMinusCosine)
}

pub fn contrastive_loss_with(sim: f64, label: PairLabel, margin: f64, mode: DistanceMode) -> f64 {
    let d = mode.distance(sim);
    let y = label.as_f64();
    let hinge = (margin - d).max(0.0);
    0.5 * (y * d * d + (1.0 - y) * hinge * hinge)
}

/// d loss / d distance.
fn loss_slope(d: f64, label: PairLabel, margin: f64) -> f64 {
    match label {
        PairLabel::Similar => d,
        PairLabel::Dissimilar => -(margin - d).max(0.0),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingPair {
    pub query_ids: Vec<TokenId>,
    pub doc_ids: Vec<TokenId>,
    pub label: PairLabel,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub margin: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mask_rate: f64,
    pub distance: DistanceMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            margin: 0.5,
            learning_rate: 0.1,
            epochs: 20,
            batch_size: 32,
            seed: 0,
            mask_rate: 0.15,
            distance: DistanceMode::OneMinusCosine,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.margin > 0.0 && self.margin <= 1.0) {
            return bad(format!("margin must be in (0, 1], got {}", self.margin));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return bad(format!("mask_rate must be in (0, 1), got {}", self.mask_rate));
        }
        Ok(())
    }
}

/// Dense gradient buffer shaped like the embedding matrix, with the set of
/// rows that received any contribution.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    values: Vec<f64>,
    touched: Vec<bool>,
    dim: usize,
}

impl Gradient {
    pub fn zeros(params: &EncoderParams) -> Self {
        Gradient {
            values: vec![0.0; params.embeddings.len()],
            touched: vec![false; params.vocab_size],
            dim: params.dim,
        }
    }

    /// Row-major values, same layout as [`EncoderParams::embeddings`].
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn touched_rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.touched.iter().enumerate().filter(|(_, &t)| t).map(|(i, _)| i)
    }

    fn add_row(&mut self, row: usize, coef: f64, v: &[f64]) {
        self.touched[row] = true;
        let r = &mut self.values[row * self.dim..(row + 1) * self.dim];
        for (g, x) in r.iter_mut().zip(v) {
            *g += coef * x;
        }
    }

    fn is_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }

    fn apply(&mut self, params: &mut EncoderParams, lr: f64) {
        let dim = self.dim;
        for row in 0..self.touched.len() {
            if !std::mem::take(&mut self.touched[row]) {
                continue;
            }
            let g = &mut self.values[row * dim..(row + 1) * dim];
            let e = &mut params.embeddings[row * dim..(row + 1) * dim];
            for (x, gx) in e.iter_mut().zip(g.iter_mut()) {
                *x -= lr * *gx;
                *gx = 0.0;
            }
        }
    }
}

/// Loss of one pair, adding `scale · ∂loss/∂E` into `grad`.
fn pair_loss_grad(
    params: &EncoderParams,
    pair: &TrainingPair,
    cfg: &TrainConfig,
    scale: f64,
    grad: &mut Gradient,
) -> f64 {
    let a = params.pool(&pair.query_ids);
    let b = params.pool(&pair.doc_ids);
    let (na, nb) = (norm(&a), norm(&b));
    if na == 0.0 || nb == 0.0 {
        // Cosine is pinned at 0 and has no gradient.
        return contrastive_loss_with(0.0, pair.label, cfg.margin, cfg.distance);
    }
    let u: Vec<f64> = a.iter().map(|x| x / na).collect();
    let v: Vec<f64> = b.iter().map(|x| x / nb).collect();
    let sim = dot(&u, &v);
    let d = cfg.distance.distance(sim);
    let loss = contrastive_loss_with(sim, pair.label, cfg.margin, cfg.distance);
    let slope = loss_slope(d, pair.label, cfg.margin) * cfg.distance.d_distance_d_sim();
    if slope == 0.0 {
        return loss;
    }
    // ∂sim/∂a = (v − sim·u)/|a|, spread evenly over the pooled tokens.
    let ga: Vec<f64> = u.iter().zip(&v).map(|(ui, vi)| (vi - sim * ui) / na).collect();
    let gb: Vec<f64> = u.iter().zip(&v).map(|(ui, vi)| (ui - sim * vi) / nb).collect();
    let ca = scale * slope / pair.query_ids.len() as f64;
    let cb = scale * slope / pair.doc_ids.len() as f64;
    for &t in &pair.query_ids {
        grad.add_row(t as usize, ca, &ga);
    }
    for &t in &pair.doc_ids {
        grad.add_row(t as usize, cb, &gb);
    }
    loss
}

/// Mean contrastive loss over `pairs` and its exact gradient.
pub fn contrastive_batch_gradient(
    params: &EncoderParams,
    pairs: &[TrainingPair],
    cfg: &TrainConfig,
) -> (f64, Gradient) {
    let mut grad = Gradient::zeros(params);
    let loss = accumulate_pairs(params, pairs.iter(), cfg, &mut grad);
    (loss, grad)
}

fn accumulate_pairs<'a>(
    params: &EncoderParams,
    pairs: impl ExactSizeIterator<Item = &'a TrainingPair>,
    cfg: &TrainConfig,
    grad: &mut Gradient,
) -> f64 {
    let n = pairs.len();
    if n == 0 {
        return 0.0;
    }
    let scale = 1.0 / n as f64;
    pairs.map(|p| pair_loss_grad(params, p, cfg, scale, grad)).sum::<f64>() * scale
}

/// Mean contrastive loss over `pairs`.
pub fn contrastive_batch_loss(params: &EncoderParams, pairs: &[TrainingPair], cfg: &TrainConfig) -> f64 {
    contrastive_batch_gradient(params, pairs, cfg).0
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Mean pair loss of each epoch, measured before each batch's update.
    pub epoch_losses: Vec<f64>,
}

/// Mini-batch gradient descent on the contrastive loss. Pair order is
/// reshuffled every epoch from `cfg.seed`; identical inputs give
/// bit-identical parameters.
pub fn train_contrastive(
    params: &EncoderParams,
    pairs: &[TrainingPair],
    cfg: &TrainConfig,
) -> Result<(EncoderParams, TrainReport)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::NoTrainingPairs);
    }
    for p in pairs {
        params.check_ids(&p.query_ids)?;
        params.check_ids(&p.doc_ids)?;
    }
    let mut params = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut grad = Gradient::zeros(&params);
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let loss = accumulate_pairs(&params, idx.iter().map(|&i| &pairs[i]), cfg, &mut grad);
            if !loss.is_finite() {
                return Err(Error::NonFinite { what: "loss", epoch, batch });
            }
            if !grad.is_finite() {
                return Err(Error::NonFinite { what: "gradient", epoch, batch });
            }
            grad.apply(&mut params, cfg.learning_rate);
            total += loss * idx.len() as f64;
        }
        report.epoch_losses.push(total / pairs.len() as f64);
    }
    Ok((params, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(rows: &[&[f64]]) -> EncoderParams {
        let dim = rows[0].len();
        EncoderParams::from_matrix(rows.concat(), dim, TokenizerScheme::WhitespaceLower, "test").unwrap()
    }

    fn random_params(vocab: usize, dim: usize, seed: u64) -> EncoderParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = (0..vocab * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        EncoderParams::from_matrix(m, dim, TokenizerScheme::WhitespaceLower, "test").unwrap()
    }

    #[test]
    fn loss_fixtures() {
        assert_eq!(contrastive_loss(1.0, PairLabel::Similar, 0.5), 0.0);
        assert_eq!(contrastive_loss(0.5, PairLabel::Dissimilar, 0.5), 0.0);
        assert!((contrastive_loss(1.0, PairLabel::Dissimilar, 0.5) - 0.125).abs() <= 1e-12);
        assert!((contrastive_loss(0.2, PairLabel::Similar, 0.5) - 0.32).abs() <= 1e-12);
    }

    #[test]
    fn raw_cosine_mode_uses_similarity_as_distance() {
        let l = contrastive_loss_with(0.2, PairLabel::Similar, 0.5, DistanceMode::RawCosine);
        assert!((l - 0.5 * 0.04).abs() < 1e-15);
        let l = contrastive_loss_with(0.2, PairLabel::Dissimilar, 0.5, DistanceMode::RawCosine);
        assert!((l - 0.5 * 0.09).abs() < 1e-15);
    }

    #[test]
    fn embed_rules() {
        let p = params(&[&[3.0, 4.0], &[1.0, 0.0]]);
        assert_eq!(embed(&p, &[0]).unwrap(), vec![0.6, 0.8]);
        assert_eq!(embed(&p, &[0, 0]).unwrap(), embed(&p, &[0]).unwrap());
        assert_eq!(embed(&p, &[]).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(embed(&p, &[2]), Err(Error::TokenOutOfRange { id: 2, .. })));
    }

    #[test]
    fn cosine_rules() {
        assert!((cosine(&[0.3, -1.0], &[0.3, -1.0]) - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!((cosine(&[1.0, 2.0], &[2.0, 4.0]) - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
    }

    #[test]
    fn identical_similar_pairs_do_not_move() {
        let p = random_params(6, 4, 1);
        let pairs: Vec<TrainingPair> = [vec![3, 4], vec![5], vec![3, 3, 5]]
            .into_iter()
            .map(|ids| TrainingPair {
                query_ids: ids.clone(),
                doc_ids: ids,
                label: PairLabel::Similar,
            })
            .collect();
        let cfg = TrainConfig { epochs: 3, ..TrainConfig::default() };
        assert!(contrastive_batch_loss(&p, &pairs, &cfg) < 1e-30);
        let (trained, _) = train_contrastive(&p, &pairs, &cfg).unwrap();
        assert_eq!(trained.embeddings(), p.embeddings());
    }

    #[test]
    fn dissimilar_pair_loss_decreases() {
        let p = params(&[&[1.0, 0.1, 0.0], &[1.0, 0.0, 0.1], &[0.0, 1.0, 0.0]]);
        let pairs = [TrainingPair {
            query_ids: vec![0],
            doc_ids: vec![1],
            label: PairLabel::Dissimilar,
        }];
        let cfg = TrainConfig { learning_rate: 0.01, epochs: 20, ..TrainConfig::default() };
        assert!(cosine(p.row(0), p.row(1)) > 1.0 - cfg.margin);
        let (_, report) = train_contrastive(&p, &pairs, &cfg).unwrap();
        assert!(report.epoch_losses.windows(2).take(5).all(|w| w[1] < w[0]), "{:?}", report.epoch_losses);
    }

    #[test]
    fn training_is_deterministic() {
        let p = random_params(10, 5, 3);
        let pairs: Vec<TrainingPair> = (0..40)
            .map(|i| TrainingPair {
                query_ids: vec![3 + (i % 7) as u32, 4],
                doc_ids: vec![3 + ((i * 3) % 7) as u32],
                label: if i % 3 == 0 { PairLabel::Similar } else { PairLabel::Dissimilar },
            })
            .collect();
        let cfg = TrainConfig { batch_size: 8, seed: 9, ..TrainConfig::default() };
        let (a, ra) = train_contrastive(&p, &pairs, &cfg).unwrap();
        let (b, rb) = train_contrastive(&p, &pairs, &cfg).unwrap();
        assert!(a.embeddings().iter().zip(b.embeddings()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(ra, rb);
        let (c, _) = train_contrastive(&p, &pairs, &TrainConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(a.embeddings(), c.embeddings());
    }

    #[test]
    fn training_preconditions() {
        let p = random_params(4, 3, 0);
        assert!(matches!(train_contrastive(&p, &[], &TrainConfig::default()), Err(Error::NoTrainingPairs)));
        let bad = [TrainingPair { query_ids: vec![9], doc_ids: vec![1], label: PairLabel::Similar }];
        assert!(matches!(
            train_contrastive(&p, &bad, &TrainConfig::default()),
            Err(Error::TokenOutOfRange { id: 9, .. })
        ));
    }

    #[test]
    fn diverging_training_is_reported() {
        let p = random_params(4, 3, 0);
        let pairs = [TrainingPair { query_ids: vec![0], doc_ids: vec![1], label: PairLabel::Similar }];
        let cfg = TrainConfig { learning_rate: f64::MAX, epochs: 50, batch_size: 1, ..TrainConfig::default() };
        match train_contrastive(&p, &pairs, &cfg) {
            Err(Error::NonFinite { .. }) => {}
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut checked = 0;
        for trial in 0..60 {
            let p = random_params(8, 4, 100 + trial);
            let cfg = TrainConfig::default();
            let pairs: Vec<TrainingPair> = (0..3)
                .map(|_| {
                    let len_q = rng.random_range(1..4);
                    let len_d = rng.random_range(1..5);
                    TrainingPair {
                        query_ids: (0..len_q).map(|_| rng.random_range(0..8)).collect(),
                        doc_ids: (0..len_d).map(|_| rng.random_range(0..8)).collect(),
                        label: if rng.random_bool(0.5) { PairLabel::Similar } else { PairLabel::Dissimilar },
                    }
                })
                .collect();
            let near_hinge = pairs.iter().any(|pr| {
                let s = cosine(&embed(&p, &pr.query_ids).unwrap(), &embed(&p, &pr.doc_ids).unwrap());
                pr.label == PairLabel::Dissimilar && ((1.0 - s) - cfg.margin).abs() < 1e-3
            });
            if near_hinge {
                continue;
            }
            let (_, g) = contrastive_batch_gradient(&p, &pairs, &cfg);
            for i in 0..p.embeddings().len() {
                let mut plus = p.clone();
                plus.embeddings_mut()[i] += h;
                let mut minus = p.clone();
                minus.embeddings_mut()[i] -= h;
                let fd = (contrastive_batch_loss(&plus, &pairs, &cfg) - contrastive_batch_loss(&minus, &pairs, &cfg)) / (2.0 * h);
                let an = g.values()[i];
                let scale = an.abs().max(fd.abs()).max(1e-6);
                assert!((an - fd).abs() / scale < 1e-4, "trial {trial} entry {i}: analytic {an} vs fd {fd}");
            }
            checked += 1;
        }
        assert!(checked >= 50, "only {checked} trials checked");
    }
}
