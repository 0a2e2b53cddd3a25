//! Unified vocabulary, interleaved sequence layout, and forward noising.
//!
//! Text tokens, image tokens, and sentinels share one id space. A training
//! or decoding example is a single interleaved sequence:
//!
//! ```text
//! Input:  <task> <soi> [img] <eoi> <bos> [text] <eos>
//! Output: <soi> [img] <eoi> <bos> [text] <eos>
//! ```
//!
//! The forward process is absorbing-state masking parameterized directly by
//! the marginal: at time `t` each output-segment token independently becomes
//! MASK with probability `t` (survival probability `alpha = 1 - t`). Input
//! and sentinel positions are never noised.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of sentinel ids appended after the modality ranges.
const SENTINEL_COUNT: u32 = 7;

/// Position role within an interleaved sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Task,
    InputImage,
    InputText,
    OutputImage,
    OutputText,
    Sentinel,
}

/// Task tag sentinel selecting the scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskTag {
    ThinkGen,
    ThinkEdit,
}

/// One id space over text tokens, image tokens, and sentinels.
///
/// Layout: text ids in `[0, text_count)`, image ids in
/// `[text_count, text_count + image_count)`, then the seven sentinels with
/// MASK last.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnifiedVocab {
    pub text_count: u32,
    pub image_count: u32,
}

impl UnifiedVocab {
    pub fn new(text_count: u32, image_count: u32) -> Self {
        UnifiedVocab {
            text_count,
            image_count,
        }
    }

    pub fn size(&self) -> u32 {
        self.text_count + self.image_count + SENTINEL_COUNT
    }

    pub fn text_range(&self) -> std::ops::Range<u32> {
        0..self.text_count
    }

    pub fn image_range(&self) -> std::ops::Range<u32> {
        self.text_count..self.text_count + self.image_count
    }

    fn sentinel_base(&self) -> u32 {
        self.text_count + self.image_count
    }

    pub fn thinkgen(&self) -> u32 {
        self.sentinel_base()
    }
    pub fn thinkedit(&self) -> u32 {
        self.sentinel_base() + 1
    }
    pub fn soi(&self) -> u32 {
        self.sentinel_base() + 2
    }
    pub fn eoi(&self) -> u32 {
        self.sentinel_base() + 3
    }
    pub fn bos(&self) -> u32 {
        self.sentinel_base() + 4
    }
    pub fn eos(&self) -> u32 {
        self.sentinel_base() + 5
    }
    pub fn mask(&self) -> u32 {
        self.sentinel_base() + 6
    }

    pub fn task_token(&self, tag: TaskTag) -> u32 {
        match tag {
            TaskTag::ThinkGen => self.thinkgen(),
            TaskTag::ThinkEdit => self.thinkedit(),
        }
    }

    pub fn is_text(&self, tok: u32) -> bool {
        self.text_range().contains(&tok)
    }

    pub fn is_image(&self, tok: u32) -> bool {
        self.image_range().contains(&tok)
    }
}

/// Half-open span of positions sharing one role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub role: Role,
    pub start: usize,
    pub end: usize,
}

/// The single token sequence holding input/output image/text segments.
///
/// `masked[i]` marks positions absorbed by forward noise (or awaiting
/// decoding); it is only ever true on output segments. Input segments
/// dropped for guidance hold MASK tokens but keep `masked = false`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterleavedSequence {
    pub tokens: Vec<u32>,
    pub segments: Vec<Segment>,
    pub masked: Vec<bool>,
}

impl InterleavedSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn role_of(&self, pos: usize) -> Role {
        for seg in &self.segments {
            if pos >= seg.start && pos < seg.end {
                return seg.role;
            }
        }
        unreachable!("segments tile the sequence");
    }

    /// The unique segment with `role`, if present.
    pub fn segment(&self, role: Role) -> Option<Segment> {
        self.segments.iter().copied().find(|s| s.role == role)
    }

    /// Positions of both output segments, image first.
    pub fn output_positions(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for role in [Role::OutputImage, Role::OutputText] {
            if let Some(seg) = self.segment(role) {
                out.extend(seg.start..seg.end);
            }
        }
        out
    }

    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    /// Tokens and mask flags of one segment.
    pub fn segment_view(&self, role: Role) -> (Vec<u32>, Vec<bool>) {
        match self.segment(role) {
            Some(seg) => (
                self.tokens[seg.start..seg.end].to_vec(),
                self.masked[seg.start..seg.end].to_vec(),
            ),
            None => (Vec::new(), Vec::new()),
        }
    }
}

/// Per-run segment length configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutSpec {
    pub vocab: UnifiedVocab,
    pub output_image_len: usize,
    pub output_text_len: usize,
}

impl LayoutSpec {
    /// Assemble the interleaved sequence. Absent outputs become MASK-filled
    /// segments of the configured lengths with `masked = true`.
    pub fn build_sequence(
        &self,
        tag: TaskTag,
        input_image: &[u32],
        input_text: &[u32],
        output_image: Option<&[u32]>,
        output_text: Option<&[u32]>,
    ) -> Result<InterleavedSequence> {
        let v = &self.vocab;
        for &tok in input_image {
            if !v.is_image(tok) {
                return Err(Error::Vocab(format!(
                    "input image token {tok} outside image range {:?}",
                    v.image_range()
                )));
            }
        }
        for &tok in input_text {
            if !v.is_text(tok) {
                return Err(Error::Vocab(format!(
                    "input text token {tok} outside text range {:?}",
                    v.text_range()
                )));
            }
        }
        for (out, len, pred, what) in [
            (
                output_image,
                self.output_image_len,
                UnifiedVocab::is_image as fn(&UnifiedVocab, u32) -> bool,
                "image",
            ),
            (
                output_text,
                self.output_text_len,
                UnifiedVocab::is_text as fn(&UnifiedVocab, u32) -> bool,
                "text",
            ),
        ] {
            if let Some(toks) = out {
                if toks.len() != len {
                    return Err(Error::Contract(format!(
                        "output {what} has {} tokens, expected {len}",
                        toks.len()
                    )));
                }
                for &tok in toks {
                    if !pred(v, tok) {
                        return Err(Error::Vocab(format!(
                            "output {what} token {tok} outside its modality range"
                        )));
                    }
                }
            }
        }

        let mut seq = InterleavedSequence {
            tokens: Vec::new(),
            segments: Vec::new(),
            masked: Vec::new(),
        };
        let one = |seq: &mut InterleavedSequence, tok: u32, role: Role| {
            let start = seq.tokens.len();
            seq.segments.push(Segment {
                role,
                start,
                end: start + 1,
            });
            seq.tokens.push(tok);
            seq.masked.push(false);
        };
        let span = |seq: &mut InterleavedSequence, toks: Option<&[u32]>, len: usize, role: Role| {
            let start = seq.tokens.len();
            match toks {
                Some(ts) => {
                    seq.tokens.extend_from_slice(ts);
                    seq.masked.extend(std::iter::repeat(false).take(ts.len()));
                    seq.segments.push(Segment {
                        role,
                        start,
                        end: start + ts.len(),
                    });
                }
                None => {
                    seq.tokens.extend(std::iter::repeat(v.mask()).take(len));
                    seq.masked.extend(std::iter::repeat(true).take(len));
                    seq.segments.push(Segment {
                        role,
                        start,
                        end: start + len,
                    });
                }
            }
        };

        one(&mut seq, v.task_token(tag), Role::Task);
        one(&mut seq, v.soi(), Role::Sentinel);
        span(&mut seq, Some(input_image), 0, Role::InputImage);
        one(&mut seq, v.eoi(), Role::Sentinel);
        one(&mut seq, v.bos(), Role::Sentinel);
        span(&mut seq, Some(input_text), 0, Role::InputText);
        one(&mut seq, v.eos(), Role::Sentinel);
        one(&mut seq, v.soi(), Role::Sentinel);
        span(
            &mut seq,
            output_image,
            self.output_image_len,
            Role::OutputImage,
        );
        one(&mut seq, v.eoi(), Role::Sentinel);
        one(&mut seq, v.bos(), Role::Sentinel);
        span(
            &mut seq,
            output_text,
            self.output_text_len,
            Role::OutputText,
        );
        one(&mut seq, v.eos(), Role::Sentinel);

        Ok(seq)
    }
}

/// One draw of the forward-noise time variable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseDraw {
    /// Mask probability, in `(0, 1]`.
    pub t: f64,
    /// Survival probability `1 - t`.
    pub alpha: f64,
    pub seed: u64,
}

impl NoiseDraw {
    pub fn new(t: f64, seed: u64) -> Result<Self> {
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::Contract(format!(
                "noise t must be in (0,1], got {t}"
            )));
        }
        Ok(NoiseDraw {
            t,
            alpha: 1.0 - t,
            seed,
        })
    }
}

/// Absorbing-state forward noise: each output-segment token independently
/// becomes MASK with probability `t`. All other positions are returned
/// bitwise unchanged, and the new mask flags mark exactly the replacements.
pub fn apply_forward_noise(
    vocab: &UnifiedVocab,
    seq: &InterleavedSequence,
    draw: NoiseDraw,
) -> Result<InterleavedSequence> {
    apply_forward_noise_to(vocab, seq, draw, true, true)
}

/// Forward noise restricted to chosen output modalities; the
/// single-modality variant backs the sequential-training comparison.
pub fn apply_forward_noise_to(
    vocab: &UnifiedVocab,
    seq: &InterleavedSequence,
    draw: NoiseDraw,
    noise_image: bool,
    noise_text: bool,
) -> Result<InterleavedSequence> {
    if seq.masked.iter().any(|&m| m) {
        return Err(Error::Contract(
            "apply_forward_noise expects unmasked gold outputs".into(),
        ));
    }
    let mut out = seq.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(draw.seed);
    for pos in seq.output_positions() {
        let u: f64 = rng.random();
        let eligible = match seq.role_of(pos) {
            Role::OutputImage => noise_image,
            Role::OutputText => noise_text,
            _ => unreachable!("output_positions yields output roles"),
        };
        if eligible && u < draw.t {
            out.tokens[pos] = vocab.mask();
            out.masked[pos] = true;
        }
    }
    Ok(out)
}

/// Replace selected input segments with MASK tokens (sentinels retained),
/// producing the unconditional branch used by training dropout and by
/// classifier-free guidance. Mask flags are not touched: dropped inputs are
/// not part of the denoising target.
pub fn cfg_drop_inputs(
    vocab: &UnifiedVocab,
    seq: &InterleavedSequence,
    drop_text: bool,
    drop_image: bool,
) -> InterleavedSequence {
    let mut out = seq.clone();
    let mut drop = |role: Role| {
        if let Some(seg) = out.segment(role) {
            for pos in seg.start..seg.end {
                out.tokens[pos] = vocab.mask();
            }
        }
    };
    if drop_image {
        drop(Role::InputImage);
    }
    if drop_text {
        drop(Role::InputText);
    }
    out
}

/// Self-describing serialization of a sequence (vocab metadata, segment
/// table, token ids, mask flags). Written as JSON by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceDump {
    pub vocab: UnifiedVocab,
    pub segments: Vec<Segment>,
    pub tokens: Vec<u32>,
    pub masked: Vec<bool>,
}

impl SequenceDump {
    pub fn new(vocab: &UnifiedVocab, seq: &InterleavedSequence) -> Self {
        SequenceDump {
            vocab: vocab.clone(),
            segments: seq.segments.clone(),
            tokens: seq.tokens.clone(),
            masked: seq.masked.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec() -> LayoutSpec {
        LayoutSpec {
            vocab: UnifiedVocab::new(15, 8),
            output_image_len: 64,
            output_text_len: 16,
        }
    }

    fn gold_sequence(spec: &LayoutSpec) -> InterleavedSequence {
        let v = &spec.vocab;
        let img: Vec<u32> = (0..64).map(|i| v.image_range().start + (i % 8)).collect();
        let txt: Vec<u32> = (0..16).map(|i| i as u32 % 12).collect();
        spec.build_sequence(TaskTag::ThinkEdit, &img, &txt[..12], Some(&img), Some(&txt))
            .unwrap()
    }

    #[test]
    fn vocab_ranges_are_disjoint_and_sized() {
        let v = UnifiedVocab::new(15, 8);
        assert_eq!(v.size(), 30);
        assert!(!v.is_text(v.mask()) && !v.is_image(v.mask()));
        assert_eq!(v.mask(), 29);
        for t in v.text_range() {
            assert!(!v.is_image(t));
        }
    }

    #[test]
    fn empty_outputs_become_masked_slots() {
        let s = spec();
        let seq = s
            .build_sequence(TaskTag::ThinkGen, &[], &[0, 1, 2], None, None)
            .unwrap();
        assert_eq!(seq.masked_count(), 80);
        assert_eq!(seq.len(), 1 + 1 + 1 + 1 + 3 + 1 + 1 + 64 + 1 + 1 + 16 + 1);
        for (pos, &m) in seq.masked.iter().enumerate() {
            if m {
                assert!(matches!(
                    seq.role_of(pos),
                    Role::OutputImage | Role::OutputText
                ));
                assert_eq!(seq.tokens[pos], s.vocab.mask());
            }
        }
    }

    #[test]
    fn full_gold_outputs_are_unmasked() {
        let s = spec();
        let seq = gold_sequence(&s);
        assert_eq!(seq.masked_count(), 0);
    }

    #[test]
    fn wrong_modality_token_is_rejected() {
        let s = spec();
        let img_tok = s.vocab.image_range().start;
        let err = s
            .build_sequence(TaskTag::ThinkGen, &[], &[img_tok], None, None)
            .unwrap_err();
        assert!(matches!(err, Error::Vocab(_)));
    }

    #[test]
    fn segments_tile_the_sequence() {
        let s = spec();
        let seq = gold_sequence(&s);
        let mut cursor = 0;
        for seg in &seq.segments {
            assert_eq!(seg.start, cursor);
            assert!(seg.end >= seg.start);
            cursor = seg.end;
        }
        assert_eq!(cursor, seq.len());
    }

    #[test]
    fn noise_limits() {
        let s = spec();
        let seq = gold_sequence(&s);
        // t -> 0+ : identity on outputs
        let low = apply_forward_noise(&s.vocab, &seq, NoiseDraw::new(1e-12, 7).unwrap()).unwrap();
        assert_eq!(low.tokens, seq.tokens);
        // t = 1 : all output tokens MASK
        let hi = apply_forward_noise(&s.vocab, &seq, NoiseDraw::new(1.0, 7).unwrap()).unwrap();
        for pos in seq.output_positions() {
            assert_eq!(hi.tokens[pos], s.vocab.mask());
            assert!(hi.masked[pos]);
        }
        assert_eq!(hi.masked_count(), 80);
    }

    #[test]
    fn noise_rejects_bad_t() {
        assert!(NoiseDraw::new(0.0, 1).is_err());
        assert!(NoiseDraw::new(1.5, 1).is_err());
    }

    #[test]
    fn empirical_mask_rate_matches_t() {
        // 80 output tokens x 125 seeds = 10_000 draws at t = 0.3
        let s = spec();
        let seq = gold_sequence(&s);
        let mut masked = 0usize;
        let mut total = 0usize;
        for seed in 0..125 {
            let noisy =
                apply_forward_noise(&s.vocab, &seq, NoiseDraw::new(0.3, seed).unwrap()).unwrap();
            masked += noisy.masked_count();
            total += 80;
        }
        let rate = masked as f64 / total as f64;
        assert!((rate - 0.3).abs() < 0.015, "rate {rate}");
    }

    #[test]
    fn cfg_drop_variants() {
        let s = spec();
        let seq = gold_sequence(&s);
        let same = cfg_drop_inputs(&s.vocab, &seq, false, false);
        assert_eq!(same, seq);

        let text_only = cfg_drop_inputs(&s.vocab, &seq, true, false);
        let tseg = seq.segment(Role::InputText).unwrap();
        for pos in tseg.start..tseg.end {
            assert_eq!(text_only.tokens[pos], s.vocab.mask());
            assert!(!text_only.masked[pos]);
        }
        let iseg = seq.segment(Role::InputImage).unwrap();
        assert_eq!(
            text_only.tokens[iseg.start..iseg.end],
            seq.tokens[iseg.start..iseg.end]
        );

        let both = cfg_drop_inputs(&s.vocab, &seq, true, true);
        for role in [Role::InputImage, Role::InputText] {
            let seg = seq.segment(role).unwrap();
            for pos in seg.start..seg.end {
                assert_eq!(both.tokens[pos], s.vocab.mask());
            }
        }
        // sentinels untouched
        for seg in both.segments.iter().filter(|s| s.role == Role::Sentinel) {
            assert_eq!(both.tokens[seg.start], seq.tokens[seg.start]);
        }
    }

    proptest! {
        #[test]
        fn noise_never_touches_non_output_positions(t in 0.01f64..=1.0, seed: u64) {
            let s = spec();
            let seq = gold_sequence(&s);
            let noisy = apply_forward_noise(&s.vocab, &seq, NoiseDraw::new(t, seed).unwrap()).unwrap();
            for (pos, (&a, &b)) in seq.tokens.iter().zip(noisy.tokens.iter()).enumerate() {
                let role = seq.role_of(pos);
                if !matches!(role, Role::OutputImage | Role::OutputText) {
                    prop_assert_eq!(a, b);
                    prop_assert!(!noisy.masked[pos]);
                }
            }
        }

        #[test]
        fn noise_is_reproducible(t in 0.01f64..=1.0, seed: u64) {
            let s = spec();
            let seq = gold_sequence(&s);
            let a = apply_forward_noise(&s.vocab, &seq, NoiseDraw::new(t, seed).unwrap()).unwrap();
            let b = apply_forward_noise(&s.vocab, &seq, NoiseDraw::new(t, seed).unwrap()).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
