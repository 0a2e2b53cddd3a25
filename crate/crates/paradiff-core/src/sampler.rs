//! Parallel denoising with dual schedulers, confidence-based unmasking,
//! classifier-free guidance, and full trajectory recording.
//!
//! Each shared step runs one forward pass on the pre-step state (plus one
//! unconditional pass when guidance is active), draws a candidate token for
//! every masked position in scope, and reveals the per-modality counts the
//! plan demands, keeping the highest-confidence candidates. Semi-
//! autoregressive text honors block order: no position in a later block is
//! revealed before every earlier block is complete.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{cfg_drop_inputs, InterleavedSequence, Role, SequenceDump, UnifiedVocab};
use crate::model::MaskPredictor;
use crate::real::Real;
use crate::schedule::{DecodePlan, Modality};
use crate::tensor::softmax_in_place;

/// Classifier-free guidance scales per modality. A scale of zero means the
/// conditional logits are used as-is (and no unconditional pass runs).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub image_scale: f64,
    pub text_scale: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            image_scale: 3.5,
            text_scale: 0.0,
        }
    }
}

impl GuidanceConfig {
    pub fn off() -> Self {
        GuidanceConfig {
            image_scale: 0.0,
            text_scale: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_scale < 0.0 || self.text_scale < 0.0 {
            return Err(Error::Config("guidance scales must be >= 0".into()));
        }
        Ok(())
    }
}

/// `cond + scale * (cond - uncond)`, elementwise. Scale 0 returns `cond`
/// exactly.
pub fn guided_logits<R: Real>(cond: &[R], uncond: &[R], scale: f64) -> Result<Vec<R>> {
    if cond.len() != uncond.len() {
        return Err(Error::Shape(format!(
            "guided_logits: {} vs {} elements",
            cond.len(),
            uncond.len()
        )));
    }
    if scale == 0.0 {
        return Ok(cond.to_vec());
    }
    let s = R::from_f64(scale);
    Ok(cond
        .iter()
        .zip(uncond.iter())
        .map(|(&c, &u)| c + s * (c - u))
        .collect())
}

/// Candidate drawing policy for masked positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SelectPolicy {
    /// Highest-probability candidate; confidence is its probability.
    Greedy,
    /// Sample from the temperature-adjusted distribution; confidence is the
    /// candidate's probability under that distribution. Temperature 0 falls
    /// back to greedy.
    Temperature(f64),
}

/// One revealed token with its bookkeeping for evaluation and RL replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reveal {
    pub pos: usize,
    pub token: u32,
    /// Probability of the candidate under the sampling distribution.
    pub confidence: f64,
    /// Model probability of the candidate (temperature-1 softmax of the
    /// logits used for selection); the behavior-policy probability for RL.
    pub prob: f64,
    /// Full temperature-1 probability row at this position, for KL terms.
    pub row: Vec<f64>,
}

/// Confidence-based reveal selection over `(position, probability-row)`
/// pairs for the masked positions in scope. The `count` highest-confidence
/// candidates are revealed; ties break toward the lowest position index.
/// With `reveal_lowest` the ordering is inverted (the literal
/// lowest-confidence reading; off by default).
pub fn select_reveals<G: Rng>(
    dists: &[(usize, Vec<f64>)],
    count: usize,
    policy: SelectPolicy,
    reveal_lowest: bool,
    rng: &mut G,
) -> Result<Vec<Reveal>> {
    if count > dists.len() {
        return Err(Error::Contract(format!(
            "select_reveals: count {count} exceeds {} masked positions in scope",
            dists.len()
        )));
    }
    let mut candidates = Vec::with_capacity(dists.len());
    for (pos, row) in dists {
        let (token, confidence) = match policy {
            SelectPolicy::Greedy => argmax(row),
            SelectPolicy::Temperature(t) if t <= 0.0 => argmax(row),
            SelectPolicy::Temperature(t) => {
                let inv = 1.0 / t;
                let weights: Vec<f64> = row.iter().map(|&p| p.powf(inv)).collect();
                let total: f64 = weights.iter().sum();
                let u: f64 = rng.random::<f64>() * total;
                let mut acc = 0.0;
                let mut tok = weights.len() - 1;
                for (i, &w) in weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        tok = i;
                        break;
                    }
                }
                (tok as u32, weights[tok] / total)
            }
        };
        candidates.push(Reveal {
            pos: *pos,
            token,
            confidence,
            prob: row[token as usize],
            row: row.clone(),
        });
    }
    if reveal_lowest {
        candidates.sort_by(|a, b| {
            a.confidence
                .partial_cmp(&b.confidence)
                .unwrap()
                .then(a.pos.cmp(&b.pos))
        });
    } else {
        candidates.sort_by(|a, b| {
            b.confidence
                .partial_cmp(&a.confidence)
                .unwrap()
                .then(a.pos.cmp(&b.pos))
        });
    }
    let mut chosen: Vec<Reveal> = candidates.into_iter().take(count).collect();
    chosen.sort_by_key(|r| r.pos);
    Ok(chosen)
}

fn argmax(row: &[f64]) -> (u32, f64) {
    let mut best = 0usize;
    for (i, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = i;
        }
    }
    (best as u32, row[best])
}

/// One decode step: shared time index, per-modality reveals, and the
/// pre-step state the model conditioned on.
#[derive(Debug, Clone)]
pub struct TrajectoryStep {
    pub index: usize,
    pub image: Vec<Reveal>,
    pub text: Vec<Reveal>,
    pub snapshot: InterleavedSequence,
}

/// Ordered record of the whole decode.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
    pub final_seq: InterleavedSequence,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// State at the end of step `t` (1-based); `t = 0` is the initial fully
    /// masked state.
    pub fn state_after(&self, t: usize) -> &InterleavedSequence {
        if t >= self.steps.len() {
            &self.final_seq
        } else {
            &self.steps[t].snapshot
        }
    }

    /// Tokens revealed at step `t` (1-based), image reveals first.
    pub fn reveals_at(&self, t: usize) -> impl Iterator<Item = &Reveal> {
        let step = &self.steps[t - 1];
        step.image.iter().chain(step.text.iter())
    }
}

/// Serialized form of one trajectory step: reveal triples per modality and
/// the masked count remaining after the step. One JSONL record per step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub step: usize,
    pub image: Vec<(usize, u32, f64)>,
    pub text: Vec<(usize, u32, f64)>,
    pub masked_remaining: usize,
}

impl Trajectory {
    pub fn records(&self) -> Vec<TrajectoryRecord> {
        let total: usize = self.final_seq.len();
        let _ = total;
        let mut remaining = self.steps.first().map_or(0, |s| s.snapshot.masked_count());
        self.steps
            .iter()
            .map(|s| {
                let revealed = s.image.len() + s.text.len();
                remaining -= revealed;
                TrajectoryRecord {
                    step: s.index,
                    image: s.image.iter().map(|r| (r.pos, r.token, r.confidence)).collect(),
                    text: s.text.iter().map(|r| (r.pos, r.token, r.confidence)).collect(),
                    masked_remaining: remaining,
                }
            })
            .collect()
    }
}

/// Everything the decoder needs besides the model and the query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeSettings {
    pub plan: DecodePlan,
    pub guidance: GuidanceConfig,
    /// Image candidate sampling temperature; 0 = greedy.
    pub image_temperature: f64,
    /// Text candidate sampling temperature; 0 = greedy (the default).
    pub text_temperature: f64,
    /// Invert confidence ordering (the literal "reveal lowest confidence"
    /// reading); kept behind a flag for comparison runs.
    pub reveal_lowest_confidence: bool,
}

impl DecodeSettings {
    pub fn new(plan: DecodePlan) -> Self {
        DecodeSettings {
            plan,
            guidance: GuidanceConfig::default(),
            image_temperature: 1.0,
            text_temperature: 0.0,
            reveal_lowest_confidence: false,
        }
    }

    /// Greedy parallel decoding with guidance off: the cheap deterministic
    /// configuration used for evaluation during training.
    pub fn greedy_eval(plan: DecodePlan) -> Self {
        DecodeSettings {
            plan,
            guidance: GuidanceConfig::off(),
            image_temperature: 0.0,
            text_temperature: 0.0,
            reveal_lowest_confidence: false,
        }
    }
}

/// Forward-pass counts, used to assert the guidance contract.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DecodeStats {
    pub cond_forwards: usize,
    pub uncond_forwards: usize,
}

/// Run the reverse process from a fully masked output state to a complete
/// sequence, recording the full trajectory.
pub fn decode<R: Real>(
    model: &MaskPredictor<R>,
    vocab: &UnifiedVocab,
    seq: &InterleavedSequence,
    settings: &DecodeSettings,
    seed: u64,
) -> Result<(Trajectory, DecodeStats)> {
    settings.guidance.validate()?;
    let img_seg = seq
        .segment(Role::OutputImage)
        .ok_or_else(|| Error::Contract("sequence has no output image segment".into()))?;
    let txt_seg = seq
        .segment(Role::OutputText)
        .ok_or_else(|| Error::Contract("sequence has no output text segment".into()))?;
    for &pos in &seq.output_positions() {
        if !seq.masked[pos] {
            return Err(Error::Contract(
                "decode expects fully masked output segments".into(),
            ));
        }
    }
    let m_img = img_seg.end - img_seg.start;
    let m_txt = txt_seg.end - txt_seg.start;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = seq.clone();
    let mut stats = DecodeStats::default();
    let mut revealed_img = 0usize;
    let mut revealed_txt = 0usize;
    let mut steps = Vec::with_capacity(settings.plan.total_steps());

    let v = model.config.vocab_size;
    for k in 1..=settings.plan.total_steps() {
        let img_need = settings.plan.target(Modality::Image, k, m_img)? - revealed_img;
        let txt_need = settings.plan.target(Modality::Text, k, m_txt)? - revealed_txt;
        let snapshot = state.clone();
        let mut step = TrajectoryStep {
            index: k,
            image: Vec::new(),
            text: Vec::new(),
            snapshot,
        };

        if img_need + txt_need > 0 {
            let cond = model.logits(&state)?;
            stats.cond_forwards += 1;
            check_finite(&cond, k, vocab, &state)?;

            let gi = settings.guidance.image_scale;
            let gt = settings.guidance.text_scale;
            let need_uncond = (img_need > 0 && gi != 0.0) || (txt_need > 0 && gt != 0.0);
            let uncond = if need_uncond {
                let dropped = cfg_drop_inputs(vocab, &state, true, true);
                let u = model.logits(&dropped)?;
                stats.uncond_forwards += 1;
                check_finite(&u, k, vocab, &state)?;
                Some(u)
            } else {
                None
            };

            let dist_at = |pos: usize, scale: f64| -> Result<(usize, Vec<f64>)> {
                let crow = &cond[pos * v..(pos + 1) * v];
                let logits = match (&uncond, scale != 0.0) {
                    (Some(u), true) => guided_logits(crow, &u[pos * v..(pos + 1) * v], scale)?,
                    _ => crow.to_vec(),
                };
                let mut row: Vec<f64> = logits.iter().map(|&x| x.to_f64()).collect();
                softmax_in_place(&mut row);
                Ok((pos, row))
            };

            if img_need > 0 {
                let scope: Vec<usize> = (img_seg.start..img_seg.end)
                    .filter(|&p| state.masked[p])
                    .collect();
                let dists = scope
                    .iter()
                    .map(|&p| dist_at(p, gi))
                    .collect::<Result<Vec<_>>>()?;
                let reveals = select_reveals(
                    &dists,
                    img_need,
                    SelectPolicy::Temperature(settings.image_temperature),
                    settings.reveal_lowest_confidence,
                    &mut rng,
                )?;
                for r in &reveals {
                    state.tokens[r.pos] = r.token;
                    state.masked[r.pos] = false;
                }
                revealed_img += reveals.len();
                step.image = reveals;
            }

            if txt_need > 0 {
                let mut need = txt_need;
                while need > 0 {
                    let scope: Vec<usize> = if settings.plan.semi_ar_text {
                        active_block(&state, txt_seg.start, txt_seg.end, settings.plan.text_block)
                    } else {
                        (txt_seg.start..txt_seg.end)
                            .filter(|&p| state.masked[p])
                            .collect()
                    };
                    let take = need.min(scope.len());
                    let dists = scope
                        .iter()
                        .map(|&p| dist_at(p, gt))
                        .collect::<Result<Vec<_>>>()?;
                    let reveals = select_reveals(
                        &dists,
                        take,
                        if settings.text_temperature > 0.0 {
                            SelectPolicy::Temperature(settings.text_temperature)
                        } else {
                            SelectPolicy::Greedy
                        },
                        settings.reveal_lowest_confidence,
                        &mut rng,
                    )?;
                    for r in &reveals {
                        state.tokens[r.pos] = r.token;
                        state.masked[r.pos] = false;
                    }
                    revealed_txt += reveals.len();
                    need -= take;
                    step.text.extend(reveals);
                }
            }
        }
        steps.push(step);
    }

    debug_assert_eq!(state.masked_count(), 0);
    Ok((
        Trajectory {
            steps,
            final_seq: state,
        },
        stats,
    ))
}

/// Masked positions of the earliest block that still has any.
fn active_block(
    state: &InterleavedSequence,
    start: usize,
    end: usize,
    block: usize,
) -> Vec<usize> {
    let block = block.max(1);
    let mut b = start;
    while b < end {
        let be = (b + block).min(end);
        let scope: Vec<usize> = (b..be).filter(|&p| state.masked[p]).collect();
        if !scope.is_empty() {
            return scope;
        }
        b = be;
    }
    Vec::new()
}

fn check_finite<R: Real>(
    logits: &[R],
    step: usize,
    vocab: &UnifiedVocab,
    state: &InterleavedSequence,
) -> Result<()> {
    if logits.iter().all(|x| x.is_finite()) {
        return Ok(());
    }
    let dump = serde_json::to_string(&SequenceDump::new(vocab, state)).unwrap_or_default();
    Err(Error::NonFinite(format!(
        "non-finite logits at decode step {step}; state dump: {dump}"
    )))
}
