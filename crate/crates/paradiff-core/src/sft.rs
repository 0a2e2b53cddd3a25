//! Supervised training with the timestep-reweighted, modality-weighted
//! masked objective, including classifier-free-guidance input dropout.
//!
//! Per batch item: draw one `t` for the whole sequence, optionally drop
//! input segments to MASK, apply forward noise, and sum the weighted
//! negative log-likelihood of the gold tokens over the masked output
//! positions. The batch loss is the mean of per-item sums. Per-item graphs
//! run concurrently; gradients reduce in item order, so the update is
//! deterministic given seed and batch order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{
    apply_forward_noise_to, cfg_drop_inputs, InterleavedSequence, NoiseDraw, Role, UnifiedVocab,
};
use crate::metrics::JsonlWriter;
use crate::model::{forward_with, bind_params, MaskPredictor};
use crate::optim::{warmup_cosine_lr, AdamW};
use crate::par::par_map;
use crate::real::Real;
use crate::seeds;
use crate::tensor::Tape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightKind {
    InverseT,
    Constant,
}

/// Modality-specific timestep weighting for the masked objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightPolicy {
    pub text: WeightKind,
    pub image: WeightKind,
    /// Clamp floor applied to `t` before inversion.
    pub t_floor: f64,
}

impl Default for WeightPolicy {
    fn default() -> Self {
        WeightPolicy {
            text: WeightKind::InverseT,
            image: WeightKind::Constant,
            t_floor: 0.01,
        }
    }
}

impl WeightPolicy {
    pub fn uniform(kind: WeightKind) -> Self {
        WeightPolicy {
            text: kind,
            image: kind,
            t_floor: 0.01,
        }
    }

    /// Loss weight for an output position of `role` at time `t`.
    pub fn weight_for(&self, t: f64, role: Role) -> Result<f64> {
        if self.t_floor <= 0.0 {
            return Err(Error::Config("weight t_floor must be positive".into()));
        }
        let kind = match role {
            Role::OutputText => self.text,
            Role::OutputImage => self.image,
            other => {
                return Err(Error::Contract(format!(
                    "loss weights apply to output segments only, got {other:?}"
                )))
            }
        };
        Ok(match kind {
            WeightKind::InverseT => 1.0 / t.max(self.t_floor),
            WeightKind::Constant => 1.0,
        })
    }
}

/// Joint noising (the default) or the single-modality variant used by the
/// sequential-training comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoisingMode {
    Joint,
    SingleModality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    /// Probability of replacing the text input with MASK per item.
    pub dropout_text: f64,
    /// Probability of replacing the image input with MASK per item.
    pub dropout_image: f64,
    pub seed: u64,
    pub weights: WeightPolicy,
    pub noising: NoisingMode,
    /// Lower bound of the `t ~ Uniform(t_min, 1]` draw.
    pub t_min: f64,
    /// Evaluate every this many steps (0 = never).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 8,
            lr: 3e-4,
            warmup_steps: 200,
            weight_decay: 0.01,
            dropout_text: 0.10,
            dropout_image: 0.10,
            seed: 0,
            weights: WeightPolicy::default(),
            noising: NoisingMode::Joint,
            t_min: 0.01,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (p, name) in [(self.dropout_text, "dropout_text"), (self.dropout_image, "dropout_image")]
        {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0,1], got {p}")));
            }
        }
        if !(self.t_min > 0.0 && self.t_min < 1.0) {
            return Err(Error::Config("t_min must be in (0,1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

struct ItemResult<R> {
    loss: f64,
    masked: usize,
    grads: Vec<Vec<R>>,
    t: f64,
}

/// One training step over a batch of gold sequences. Returns the batch loss
/// (mean over items of the per-item weighted sums). The optimizer update is
/// skipped when no position was masked anywhere in the batch, leaving
/// parameters bitwise unchanged.
pub fn sft_step<R: Real>(
    model: &mut MaskPredictor<R>,
    opt: &mut AdamW<R>,
    vocab: &UnifiedVocab,
    batch: &[&InterleavedSequence],
    cfg: &TrainConfig,
    step: usize,
    lr: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("sft_step: empty batch".into()));
    }
    let frozen = &*model;
    let items: Vec<(usize, &InterleavedSequence)> =
        batch.iter().copied().enumerate().collect();
    let results: Vec<Result<ItemResult<R>>> = par_map(&items, |item| {
        {
            let (i, gold) = *item;
            let item_seed = seeds::derive(cfg.seed, 0x5f7, (step * cfg.batch_size + i) as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(item_seed);

            // one t per sequence
            let t = cfg.t_min + (1.0 - cfg.t_min) * (1.0 - rng.random::<f64>());
            let drop_text = rng.random::<f64>() < cfg.dropout_text;
            let drop_image = rng.random::<f64>() < cfg.dropout_image;
            let noise_seed = rng.random::<u64>();
            let (noise_image, noise_text) = match cfg.noising {
                NoisingMode::Joint => (true, true),
                NoisingMode::SingleModality => {
                    if rng.random::<f64>() < 0.5 {
                        (true, false)
                    } else {
                        (false, true)
                    }
                }
            };

            let mut seq = if drop_text || drop_image {
                cfg_drop_inputs(vocab, gold, drop_text, drop_image)
            } else {
                gold.clone()
            };
            seq = apply_forward_noise_to(
                vocab,
                &seq,
                NoiseDraw::new(t, noise_seed)?,
                noise_image,
                noise_text,
            )?;

            let masked = seq.masked_count();
            if masked == 0 {
                return Ok(ItemResult {
                    loss: 0.0,
                    masked: 0,
                    grads: Vec::new(),
                    t,
                });
            }

            let mut tape = Tape::new();
            let bound = bind_params(&mut tape, &frozen.params);
            let logits = forward_with(&mut tape, &bound, &frozen.config, &seq)?;
            let mut active = vec![false; seq.len()];
            let mut weights = vec![R::zero(); seq.len()];
            for pos in 0..seq.len() {
                if seq.masked[pos] {
                    active[pos] = true;
                    weights[pos] =
                        R::from_f64(cfg.weights.weight_for(t, seq.role_of(pos))?);
                }
            }
            let loss = tape.masked_cross_entropy(logits, &gold.tokens, &active, &weights)?;
            let loss_val = tape.value(loss)[0].to_f64();
            if !loss_val.is_finite() {
                return Err(Error::NonFinite(format!(
                    "item {i}: loss {loss_val} at t={t:.4}, {masked} masked"
                )));
            }
            tape.backward(loss)?;
            Ok(ItemResult {
                loss: loss_val,
                masked,
                grads: bound.grads(&tape),
                t,
            })
        }
    });

    let mut total_loss = 0.0;
    let mut total_masked = 0usize;
    let mut collected = Vec::with_capacity(batch.len());
    let mut diagnostics = Vec::new();
    for r in results {
        match r {
            Ok(item) => {
                total_loss += item.loss;
                total_masked += item.masked;
                diagnostics.push(item.t);
                collected.push(item);
            }
            Err(Error::NonFinite(msg)) => {
                return Err(Error::NonFinite(format!(
                    "step {step}: {msg}; batch t-draws so far: {diagnostics:?}"
                )));
            }
            Err(e) => return Err(e),
        }
    }
    let batch_loss = total_loss / batch.len() as f64;

    if total_masked > 0 {
        model.params.zero_grads();
        for item in &collected {
            if !item.grads.is_empty() {
                model.params.accumulate_grads(&item.grads);
            }
        }
        model.params.scale_grads(R::from_f64(1.0 / batch.len() as f64));
        opt.step(&mut model.params, lr);
    }
    Ok(batch_loss)
}

/// Per-step record written to the metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<serde_json::Value>,
}

/// Training outcome: the loss trace and any evaluation snapshots.
#[derive(Debug, Clone, Default)]
pub struct SftOutcome {
    pub losses: Vec<f64>,
    pub evals: Vec<(usize, serde_json::Value)>,
}

/// Full training loop: linear warmup then cosine decay, periodic evaluation
/// through the supplied callback, one JSONL record per step.
pub fn train<R: Real>(
    model: &mut MaskPredictor<R>,
    vocab: &UnifiedVocab,
    dataset: &[InterleavedSequence],
    cfg: &TrainConfig,
    evaluator: Option<&(dyn Fn(&MaskPredictor<R>) -> serde_json::Value + Sync)>,
    mut log: Option<&mut JsonlWriter>,
) -> Result<SftOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Contract("train: empty dataset".into()));
    }
    let mut opt = AdamW::new(&model.params, cfg.weight_decay);
    let mut out = SftOutcome::default();
    let mut batch_rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, 0xba7c, 0));

    for step in 0..cfg.steps {
        let batch: Vec<&InterleavedSequence> = (0..cfg.batch_size)
            .map(|_| &dataset[batch_rng.random_range(0..dataset.len())])
            .collect();
        let lr = warmup_cosine_lr(step, cfg.steps, cfg.warmup_steps, cfg.lr);
        let loss = sft_step(model, &mut opt, vocab, &batch, cfg, step, lr)?;
        out.losses.push(loss);

        let eval = if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            evaluator.map(|f| f(model))
        } else {
            None
        };
        if let Some(ref e) = eval {
            out.evals.push((step, e.clone()));
        }
        if let Some(log) = log.as_deref_mut() {
            log.write(&StepRecord {
                step,
                loss,
                lr,
                eval,
            })?;
        }
    }
    if let Some(log) = log.as_deref_mut() {
        log.flush()?;
    }
    Ok(out)
}
