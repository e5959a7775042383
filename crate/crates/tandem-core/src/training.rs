//! Losses and training loops: standalone, distilled-standalone, the tandem
//! configurations (frozen primary, both-trained variants, two-stage
//! distillation) and the deep-tandem pair.
//!
//! Determinism contract: a fixed seed and fixed chunk order give a
//! bit-identical loss curve. Batches are drawn with a counter RNG keyed by
//! step, parameters update in insertion order, and every pass is
//! single-threaded.

use crate::deeptandem::{block_parallel_backward, block_parallel_train, DeepTandem};
use crate::error::{Error, Result};
use crate::nncore::adam::{Adam, AdamParams};
use crate::nncore::ops::log_sum_exp;
use crate::nncore::param::ParameterStore;
use crate::nncore::rng::CounterRng;
use crate::nncore::tensor::{Scalar, Tensor};
use crate::tandem::TandemModel;
use crate::transformer::Decoder;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TrainVariant {
    Standalone,
    StandaloneDistil,
    TandemFrozenPrimary,
    TandemBothLossSecondary,
    TandemBothLossBoth,
    TandemDistil,
    DeepTandem,
    BlockParallel,
}

impl TrainVariant {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "standalone" => TrainVariant::Standalone,
            "standalone-distil" => TrainVariant::StandaloneDistil,
            "tandem-frozen-primary" => TrainVariant::TandemFrozenPrimary,
            "tandem-both-loss-secondary" => TrainVariant::TandemBothLossSecondary,
            "tandem-both-loss-both" => TrainVariant::TandemBothLossBoth,
            "tandem-distil" => TrainVariant::TandemDistil,
            "deep-tandem" => TrainVariant::DeepTandem,
            "block-parallel" => TrainVariant::BlockParallel,
            other => {
                return Err(Error::InvalidConfig(format!("unknown variant '{other}'")));
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            TrainVariant::Standalone => "standalone",
            TrainVariant::StandaloneDistil => "standalone-distil",
            TrainVariant::TandemFrozenPrimary => "tandem-frozen-primary",
            TrainVariant::TandemBothLossSecondary => "tandem-both-loss-secondary",
            TrainVariant::TandemBothLossBoth => "tandem-both-loss-both",
            TrainVariant::TandemDistil => "tandem-distil",
            TrainVariant::DeepTandem => "deep-tandem",
            TrainVariant::BlockParallel => "block-parallel",
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub variant: TrainVariant,
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Distillation mix weight: `lambda * ce + (1 - lambda) * distill`.
    pub lambda: f64,
    /// First step of stage 2 for the two-stage tandem distillation recipe.
    pub stage_boundary: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.seq_len < 2 {
            return Err(Error::InvalidConfig("steps, batch_size, seq_len must be positive (seq_len >= 2)".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidConfig(format!("lambda {} not in [0,1]", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub loss_ce: f64,
    pub loss_distill: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub curve: Vec<LossRecord>,
}

/// Mean cross entropy of `logits` against integer targets.
pub fn ce_loss<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<T> {
    Ok(ce_loss_grad(logits, targets)?.0)
}

/// Cross entropy plus its gradient with respect to the logits (already
/// divided by the number of positions).
pub fn ce_loss_grad<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<(T, Tensor<T>)> {
    let v = logits.shape()[1];
    let s = logits.shape()[0];
    if targets.len() != s {
        return Err(Error::shape(format!("{s} targets"), format!("{}", targets.len()), "ce_loss"));
    }
    let inv_s = T::from_f64(1.0 / s as f64);
    let mut grad = Tensor::zeros(vec![s, v]);
    let mut loss = T::zero();
    for (i, &t) in targets.iter().enumerate() {
        if t >= v {
            return Err(Error::TokenOutOfRange { id: t, vocab: v });
        }
        let row = logits.row(i);
        let lse = log_sum_exp(row);
        loss = loss + (lse - row[t]);
        let g = grad.row_mut(i);
        for c in 0..v {
            g[c] = (row[c] - lse).exp() * inv_s;
        }
        g[t] = g[t] - inv_s;
    }
    Ok((loss * inv_s, grad))
}

/// Mean soft-target cross entropy: student softmax scored against the
/// teacher's softmax at temperature 1.
pub fn distill_loss<T: Scalar>(student: &Tensor<T>, teacher: &Tensor<T>) -> Result<T> {
    Ok(distill_loss_grad(student, teacher)?.0)
}

pub fn distill_loss_grad<T: Scalar>(student: &Tensor<T>, teacher: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    if student.shape() != teacher.shape() {
        return Err(Error::shape(
            format!("{:?}", teacher.shape()),
            format!("{:?}", student.shape()),
            "distill_loss",
        ));
    }
    let s = student.shape()[0];
    let v = student.shape()[1];
    let inv_s = T::from_f64(1.0 / s as f64);
    let mut grad = Tensor::zeros(vec![s, v]);
    let mut loss = T::zero();
    for i in 0..s {
        let srow = student.row(i);
        let trow = teacher.row(i);
        let s_lse = log_sum_exp(srow);
        let t_lse = log_sum_exp(trow);
        let g = grad.row_mut(i);
        for c in 0..v {
            let tp = (trow[c] - t_lse).exp();
            loss = loss - tp * (srow[c] - s_lse);
            g[c] = ((srow[c] - s_lse).exp() - tp) * inv_s;
        }
    }
    Ok((loss * inv_s, grad))
}

/// `lambda * ce + (1 - lambda) * distill`.
pub fn combined_loss<T: Scalar>(ce: T, distill: T, lambda: f64) -> T {
    let l = T::from_f64(lambda);
    l * ce + (T::one() - l) * distill
}

/// Cosine decay to zero with linear warm-up.
pub fn lr_at(cfg: &TrainConfig, step: usize) -> f64 {
    if cfg.warmup_steps > 0 && step < cfg.warmup_steps {
        return cfg.lr * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let total = cfg.steps.saturating_sub(cfg.warmup_steps).max(1);
    let t = (step.saturating_sub(cfg.warmup_steps)) as f64 / total as f64;
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

fn batch_indices(seed: u64, step: usize, batch: usize, n: usize) -> Vec<usize> {
    let mut rng = CounterRng::new(seed, 0x0b47c4 + step as u64);
    (0..batch).map(|_| rng.next_below(n)).collect()
}

fn check_chunks(chunks: &[Vec<usize>]) -> Result<()> {
    if chunks.is_empty() {
        return Err(Error::EmptyInput("training chunks"));
    }
    if chunks.iter().any(|c| c.len() < 2) {
        return Err(Error::InvalidConfig("every chunk needs at least 2 tokens".into()));
    }
    Ok(())
}

/// Train a standalone decoder with CE loss, optionally mixing in logit
/// distillation against a frozen teacher (the distilled-standalone recipe).
pub fn train_standalone<T: Scalar>(
    store: &mut ParameterStore<T>,
    model: &Decoder,
    chunks: &[Vec<usize>],
    cfg: &TrainConfig,
    teacher: Option<(&ParameterStore<T>, &Decoder)>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_chunks(chunks)?;
    if cfg.variant == TrainVariant::StandaloneDistil && teacher.is_none() {
        return Err(Error::InvalidConfig("standalone-distil requires a teacher".into()));
    }
    let mut opt = Adam::new(AdamParams::default());
    let mut curve = Vec::with_capacity(cfg.steps);
    let inv_b = 1.0 / cfg.batch_size as f64;

    for step in 0..cfg.steps {
        store.zero_grads();
        let mut ce_sum = 0.0;
        let mut distill_sum = 0.0;
        for &ci in &batch_indices(cfg.seed, step, cfg.batch_size, chunks.len()) {
            let chunk = &chunks[ci];
            let inputs = &chunk[..chunk.len() - 1];
            let targets = &chunk[1..];
            let (logits, cache) = model.forward_train(store, inputs)?;
            let (ce, mut dlogits) = ce_loss_grad(&logits, targets)?;
            ce_sum += ce.as_f64() * inv_b;
            match (cfg.variant, teacher) {
                (TrainVariant::StandaloneDistil, Some((tstore, tmodel))) => {
                    let tlogits = tmodel.forward_full(tstore, inputs)?;
                    let (dl, ddistill) = distill_loss_grad(&logits, &tlogits)?;
                    distill_sum += dl.as_f64() * inv_b;
                    let lam = T::from_f64(cfg.lambda);
                    let one_m = T::one() - lam;
                    let scale = T::from_f64(inv_b);
                    let d = dlogits.data_mut();
                    let dd = ddistill.data();
                    for i in 0..d.len() {
                        d[i] = (lam * d[i] + one_m * dd[i]) * scale;
                    }
                }
                _ => {
                    let scale = T::from_f64(inv_b);
                    for g in dlogits.data_mut() {
                        *g = *g * scale;
                    }
                }
            }
            model.backward(store, &cache, Some(&dlogits), None);
        }
        opt.step(store, lr_at(cfg, step));
        let loss = if cfg.variant == TrainVariant::StandaloneDistil {
            cfg.lambda * ce_sum + (1.0 - cfg.lambda) * distill_sum
        } else {
            ce_sum
        };
        curve.push(LossRecord {
            step,
            loss,
            loss_ce: ce_sum,
            loss_distill: distill_sum,
        });
    }
    Ok(TrainOutcome { curve })
}

/// Train a tandem pair under one of the tandem configurations. Freezing is
/// applied here according to the variant.
pub fn train_tandem<T: Scalar>(
    store: &mut ParameterStore<T>,
    model: &TandemModel,
    chunks: &[Vec<usize>],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_chunks(chunks)?;
    let (freeze_primary, backprop_primary) = match cfg.variant {
        TrainVariant::TandemFrozenPrimary | TrainVariant::TandemDistil => (true, false),
        TrainVariant::TandemBothLossSecondary | TrainVariant::TandemBothLossBoth => (false, true),
        other => {
            return Err(Error::InvalidConfig(format!(
                "train_tandem cannot run variant '{}'",
                other.name()
            )));
        }
    };
    store.set_trainable_prefix("primary.", !freeze_primary);

    let mut opt = Adam::new(AdamParams::default());
    let mut curve = Vec::with_capacity(cfg.steps);
    let inv_b = 1.0 / cfg.batch_size as f64;

    for step in 0..cfg.steps {
        store.zero_grads();
        let mut ce_sum = 0.0;
        let mut distill_sum = 0.0;
        let stage2 = cfg.variant == TrainVariant::TandemDistil && step >= cfg.stage_boundary;
        for &ci in &batch_indices(cfg.seed, step, cfg.batch_size, chunks.len()) {
            let chunk = &chunks[ci];
            let inputs = &chunk[..chunk.len() - 1];
            let targets = &chunk[1..];
            let (logits, cache) = model.forward_teacher_train(store, inputs)?;
            let (ce, mut dlogits) = ce_loss_grad(&logits, targets)?;
            ce_sum += ce.as_f64() * inv_b;
            let scale = T::from_f64(inv_b);
            let mut d_primary: Option<Tensor<T>> = None;
            if stage2 {
                let (dl, ddistill) = distill_loss_grad(&logits, &cache.primary_logits)?;
                distill_sum += dl.as_f64() * inv_b;
                let lam = T::from_f64(cfg.lambda);
                let one_m = T::one() - lam;
                let d = dlogits.data_mut();
                let dd = ddistill.data();
                for i in 0..d.len() {
                    d[i] = (lam * d[i] + one_m * dd[i]) * scale;
                }
            } else {
                for g in dlogits.data_mut() {
                    *g = *g * scale;
                }
            }
            if cfg.variant == TrainVariant::TandemBothLossBoth {
                // unweighted sum of the two CE losses
                let (pce, mut dp) = ce_loss_grad(&cache.primary_logits, targets)?;
                ce_sum += pce.as_f64() * inv_b;
                for g in dp.data_mut() {
                    *g = *g * scale;
                }
                d_primary = Some(dp);
            }
            model.backward(store, &cache, &dlogits, d_primary.as_ref(), backprop_primary);
        }
        opt.step(store, lr_at(cfg, step));
        let loss = if stage2 {
            cfg.lambda * ce_sum + (1.0 - cfg.lambda) * distill_sum
        } else {
            ce_sum
        };
        curve.push(LossRecord {
            step,
            loss,
            loss_ce: ce_sum,
            loss_distill: distill_sum,
        });
    }
    Ok(TrainOutcome { curve })
}

/// Train the deep-tandem pair end to end: CE on the small model's output,
/// skipping position 0 (its prediction conditions on nothing but markers).
pub fn train_deep<T: Scalar>(
    store: &mut ParameterStore<T>,
    model: &DeepTandem,
    chunks: &[Vec<usize>],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_chunks(chunks)?;
    let mut opt = Adam::new(AdamParams::default());
    let mut curve = Vec::with_capacity(cfg.steps);
    let inv_b = 1.0 / cfg.batch_size as f64;

    for step in 0..cfg.steps {
        store.zero_grads();
        let mut ce_sum = 0.0;
        for &ci in &batch_indices(cfg.seed, step, cfg.batch_size, chunks.len()) {
            let chunk = &chunks[ci];
            let (logits, cache) = model.forward_train(store, chunk)?;
            let (ce, dlogits) = ce_from_position_one(&logits, chunk, inv_b)?;
            ce_sum += ce * inv_b;
            model.backward(store, &cache, &dlogits);
        }
        opt.step(store, lr_at(cfg, step));
        curve.push(LossRecord {
            step,
            loss: ce_sum,
            loss_ce: ce_sum,
            loss_distill: 0.0,
        });
    }
    Ok(TrainOutcome { curve })
}

/// Train the block-parallel ablation: the sketch stream mapped through the
/// unembedding, same targets as [`train_deep`].
pub fn train_block_parallel<T: Scalar>(
    store: &mut ParameterStore<T>,
    large: &Decoder,
    gamma: usize,
    begin_token: usize,
    chunks: &[Vec<usize>],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_chunks(chunks)?;
    let mut opt = Adam::new(AdamParams::default());
    let mut curve = Vec::with_capacity(cfg.steps);
    let inv_b = 1.0 / cfg.batch_size as f64;

    for step in 0..cfg.steps {
        store.zero_grads();
        let mut ce_sum = 0.0;
        for &ci in &batch_indices(cfg.seed, step, cfg.batch_size, chunks.len()) {
            let chunk = &chunks[ci];
            let (logits, cache) = block_parallel_train(large, store, chunk, gamma, begin_token, true)?;
            let (ids, stack) = cache.expect("cache requested");
            let (ce, dlogits) = ce_from_position_one(&logits, chunk, inv_b)?;
            ce_sum += ce * inv_b;
            block_parallel_backward(large, store, &ids, &stack, &dlogits);
        }
        opt.step(store, lr_at(cfg, step));
        curve.push(LossRecord {
            step,
            loss: ce_sum,
            loss_ce: ce_sum,
            loss_distill: 0.0,
        });
    }
    Ok(TrainOutcome { curve })
}

/// CE for predict-token-at-own-position models, masked to positions >= 1,
/// with the gradient already batch-scaled.
fn ce_from_position_one<T: Scalar>(
    logits: &Tensor<T>,
    tokens: &[usize],
    inv_b: f64,
) -> Result<(f64, Tensor<T>)> {
    let s = logits.shape()[0];
    let v = logits.shape()[1];
    debug_assert_eq!(s, tokens.len());
    let n = s - 1;
    let inv_n = T::from_f64(1.0 / n as f64);
    let scale = T::from_f64(inv_b);
    let mut grad = Tensor::zeros(vec![s, v]);
    let mut loss = T::zero();
    for i in 1..s {
        let t = tokens[i];
        if t >= v {
            return Err(Error::TokenOutOfRange { id: t, vocab: v });
        }
        let row = logits.row(i);
        let lse = log_sum_exp(row);
        loss = loss + (lse - row[t]);
        let g = grad.row_mut(i);
        for c in 0..v {
            g[c] = (row[c] - lse).exp() * inv_n * scale;
        }
        g[t] = g[t] - inv_n * scale;
    }
    Ok(((loss * inv_n).as_f64(), grad))
}
