//! Masked-token pretraining over the encoder's embedding table.
//!
//! Each document has a random subset of positions masked (at least one).
//! The context vector is the mean embedding of the unmasked tokens and
//! every vocabulary row doubles as an output vector: the logit of token `v`
//! is `context · E[v]`. The loss is the mean cross-entropy of the masked
//! tokens under a softmax over the full vocabulary.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{dot, EncoderParams, Gradient, TrainConfig};
use crate::error::{Error, Result};
use crate::tokenize::TokenId;

/// A document with a fixed masking pattern.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedExample {
    pub tokens: Vec<TokenId>,
    pub masked: Vec<bool>,
}

impl MaskedExample {
    fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    /// True when there is both something to predict and something to
    /// predict it from.
    fn is_usable(&self) -> bool {
        let m = self.masked_count();
        m > 0 && m < self.tokens.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MlmReport {
    /// Mean masked-token cross-entropy per epoch, measured before each
    /// batch's update.
    pub epoch_losses: Vec<f64>,
    /// Documents shorter than two tokens, never used.
    pub short_documents: usize,
    /// Draws in which every position ended up masked, summed over epochs.
    pub all_masked_skipped: usize,
}

/// Adds the gradient of one example's summed cross-entropy, times `scale`,
/// and returns that summed cross-entropy.
fn example_loss_grad(params: &EncoderParams, ex: &MaskedExample, scale: f64, grad: &mut Gradient) -> f64 {
    let dim = params.dim();
    let context_ids: Vec<TokenId> = ex
        .tokens
        .iter()
        .zip(&ex.masked)
        .filter(|(_, &m)| !m)
        .map(|(&t, _)| t)
        .collect();
    let context = params.pool(&context_ids);

    let logits: Vec<f64> = (0..params.vocab_size())
        .map(|v| dot(&context, params.row(v as TokenId)))
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let log_z = max + sum_exp.ln();

    let targets: Vec<TokenId> = ex
        .tokens
        .iter()
        .zip(&ex.masked)
        .filter(|(_, &m)| m)
        .map(|(&t, _)| t)
        .collect();
    let loss: f64 = targets.iter().map(|&y| log_z - logits[y as usize]).sum();

    // ∂loss/∂z_v = M·p_v − #{targets equal to v}
    let m = targets.len() as f64;
    let mut dz: Vec<f64> = logits.iter().map(|z| m * (z - log_z).exp()).collect();
    for &y in &targets {
        dz[y as usize] -= 1.0;
    }

    let mut d_context = vec![0.0; dim];
    for (v, &g) in dz.iter().enumerate() {
        let row = params.row(v as TokenId);
        for (dc, e) in d_context.iter_mut().zip(row) {
            *dc += g * e;
        }
        grad.add_row(v, scale * g, &context);
    }
    let coef = scale / context_ids.len() as f64;
    for &t in &context_ids {
        grad.add_row(t as usize, coef, &d_context);
    }
    loss
}

/// Mean masked-token cross-entropy over `examples` and its exact gradient.
/// Examples with nothing masked or nothing left as context are ignored.
pub fn mlm_batch_gradient(params: &EncoderParams, examples: &[MaskedExample]) -> Result<(f64, Gradient)> {
    let mut grad = Gradient::zeros(params);
    let loss = accumulate(params, examples.iter(), &mut grad)?;
    Ok((loss, grad))
}

pub fn mlm_batch_loss(params: &EncoderParams, examples: &[MaskedExample]) -> Result<f64> {
    Ok(mlm_batch_gradient(params, examples)?.0)
}

fn accumulate<'a>(
    params: &EncoderParams,
    examples: impl Iterator<Item = &'a MaskedExample> + Clone,
    grad: &mut Gradient,
) -> Result<f64> {
    let mut total_masked = 0;
    for ex in examples.clone() {
        if ex.tokens.len() != ex.masked.len() {
            return Err(Error::InvalidConfig("mask length differs from token count".into()));
        }
        params.check_ids(&ex.tokens)?;
        if ex.is_usable() {
            total_masked += ex.masked_count();
        }
    }
    if total_masked == 0 {
        return Ok(0.0);
    }
    let scale = 1.0 / total_masked as f64;
    let loss: f64 = examples
        .filter(|ex| ex.is_usable())
        .map(|ex| example_loss_grad(params, ex, scale, grad))
        .sum();
    Ok(loss * scale)
}

/// Draws a mask: each position independently with probability `rate`, and
/// one uniformly chosen position when the draw came up empty.
fn draw_mask(len: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let mut masked: Vec<bool> = (0..len).map(|_| rng.random::<f64>() < rate).collect();
    if !masked.contains(&true) {
        masked[rng.random_range(0..len)] = true;
    }
    masked
}

/// Pretrains the embedding table with masked-token prediction. Uses the
/// learning rate, epochs, batch size, seed and mask rate from `cfg`.
pub fn mlm_pretrain(
    params: &EncoderParams,
    docs: &[Vec<TokenId>],
    cfg: &TrainConfig,
) -> Result<(EncoderParams, MlmReport)> {
    cfg.validate()?;
    for d in docs {
        params.check_ids(d)?;
    }
    let usable: Vec<&Vec<TokenId>> = docs.iter().filter(|d| d.len() >= 2).collect();
    let mut report = MlmReport {
        short_documents: docs.len() - usable.len(),
        ..MlmReport::default()
    };
    if usable.is_empty() {
        return Err(Error::EmptyDocuments);
    }

    let mut params = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut grad = Gradient::zeros(&params);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut positions) = (0.0, 0usize);
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let examples: Vec<MaskedExample> = idx
                .iter()
                .map(|&i| MaskedExample {
                    tokens: usable[i].clone(),
                    masked: draw_mask(usable[i].len(), cfg.mask_rate, &mut rng),
                })
                .collect();
            report.all_masked_skipped += examples.iter().filter(|e| !e.is_usable()).count();
            let masked: usize = examples.iter().filter(|e| e.is_usable()).map(|e| e.masked_count()).sum();
            if masked == 0 {
                continue;
            }
            let loss = accumulate(&params, examples.iter(), &mut grad)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite { what: "loss", epoch, batch });
            }
            if !grad.is_finite() {
                return Err(Error::NonFinite { what: "gradient", epoch, batch });
            }
            grad.apply(&mut params, cfg.learning_rate);
            total += loss * masked as f64;
            positions += masked;
        }
        report.epoch_losses.push(if positions == 0 { 0.0 } else { total / positions as f64 });
    }
    Ok((params, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::cosine;
    use crate::tokenize::TokenizerScheme;

    fn random_params(vocab: usize, dim: usize, seed: u64) -> EncoderParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = (0..vocab * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        EncoderParams::from_matrix(m, dim, TokenizerScheme::WhitespaceLower, "test").unwrap()
    }

    #[test]
    fn mask_draw_always_masks_something() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for len in 1..20 {
            for _ in 0..20 {
                assert!(draw_mask(len, 0.01, &mut rng).contains(&true));
            }
        }
    }

    #[test]
    fn unusable_examples_are_ignored() {
        let p = random_params(5, 3, 0);
        let all = MaskedExample { tokens: vec![3, 4], masked: vec![true, true] };
        let (loss, grad) = mlm_batch_gradient(&p, &[all]).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grad.touched_rows().count(), 0);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..50 {
            let p = random_params(7, 3, 200 + trial);
            let examples: Vec<MaskedExample> = (0..2)
                .map(|_| {
                    let len = rng.random_range(2..6);
                    let tokens: Vec<TokenId> = (0..len).map(|_| rng.random_range(0..7)).collect();
                    let mut masked = vec![false; len];
                    masked[rng.random_range(0..len)] = true;
                    MaskedExample { tokens, masked }
                })
                .collect();
            let (_, g) = mlm_batch_gradient(&p, &examples).unwrap();
            for i in 0..p.embeddings().len() {
                let mut plus = p.clone();
                plus.embeddings_mut()[i] += h;
                let mut minus = p.clone();
                minus.embeddings_mut()[i] -= h;
                let fd = (mlm_batch_loss(&plus, &examples).unwrap() - mlm_batch_loss(&minus, &examples).unwrap()) / (2.0 * h);
                let an = g.values()[i];
                let scale = an.abs().max(fd.abs()).max(1e-6);
                assert!((an - fd).abs() / scale < 1e-4, "trial {trial} entry {i}: analytic {an} vs fd {fd}");
            }
        }
    }

    #[test]
    fn pretraining_reduces_loss_and_is_deterministic() {
        let p = random_params(12, 6, 1);
        let docs: Vec<Vec<TokenId>> = (0..30).map(|i| vec![3 + (i % 3), 6 + (i % 3), 9 + (i % 3)]).collect();
        let cfg = TrainConfig { epochs: 30, batch_size: 8, seed: 5, ..TrainConfig::default() };
        let (a, ra) = mlm_pretrain(&p, &docs, &cfg).unwrap();
        let (b, _) = mlm_pretrain(&p, &docs, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(ra.epoch_losses.last().unwrap() < ra.epoch_losses.first().unwrap());
        // Tokens from the same template end up closer than tokens from different ones.
        assert!(cosine(a.row(3), a.row(6)) > cosine(a.row(3), a.row(7)));
    }

    #[test]
    fn short_documents_are_counted() {
        let p = random_params(6, 3, 1);
        let docs = vec![vec![3], vec![3, 4, 5], vec![]];
        let (_, r) = mlm_pretrain(&p, &docs, &TrainConfig { epochs: 1, ..TrainConfig::default() }).unwrap();
        assert_eq!(r.short_documents, 2);
        assert!(matches!(
            mlm_pretrain(&p, &[vec![4]], &TrainConfig::default()),
            Err(Error::EmptyDocuments)
        ));
    }
}
