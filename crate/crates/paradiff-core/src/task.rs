//! The color-grid task: instructions that need a resolution step in the
//! text output, realized in a color-grid image output, with an exact,
//! partially-evaluable alignment oracle standing in for a learned reward.
//!
//! An instance assigns each grid quadrant a color, either literally or via
//! indirection ("complement of RED", "same as TL"). The gold text states
//! the four resolved (quadrant, color) claims twice — 16 alternating
//! tag/color tokens — and the gold grid realizes them quadrant-uniformly.
//!
//! Token id map (text range 0..15, image range 15..23):
//!
//! ```text
//! 0..4    quadrant tags TL TR BL BR
//! 4..12   color words   RED GREEN BLUE CYAN MAGENTA YELLOW BLACK WHITE
//! 12..15  ops           LIT CMP REF
//! 15..23  grid cells    one per color
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{InterleavedSequence, LayoutSpec, Role, TaskTag, UnifiedVocab};

/// Output caption length: four claims, stated twice, two tokens each.
pub const TEXT_LEN: usize = 16;
/// Instruction length: four directives of three tokens each.
pub const INSTR_LEN: usize = 12;

pub const TEXT_TOKENS: u32 = 15;
pub const IMAGE_TOKENS: u32 = 8;

const OP_LIT: u32 = 12;
const OP_CMP: u32 = 13;
const OP_REF: u32 = 14;
const COLOR_BASE: u32 = 4;
const CELL_BASE: u32 = 15;

/// The eight grid colors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Color {
    Red,
    Green,
    Blue,
    Cyan,
    Magenta,
    Yellow,
    Black,
    White,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Cyan,
        Color::Magenta,
        Color::Yellow,
        Color::Black,
        Color::White,
    ];

    pub fn id(self) -> u32 {
        Color::ALL.iter().position(|&c| c == self).unwrap() as u32
    }

    pub fn from_id(id: u32) -> Option<Color> {
        Color::ALL.get(id as usize).copied()
    }
}

/// Fixed complement involution over the color set.
pub struct ColorTable;

impl ColorTable {
    pub fn complement(c: Color) -> Color {
        match c {
            Color::Red => Color::Cyan,
            Color::Cyan => Color::Red,
            Color::Green => Color::Magenta,
            Color::Magenta => Color::Green,
            Color::Blue => Color::Yellow,
            Color::Yellow => Color::Blue,
            Color::Black => Color::White,
            Color::White => Color::Black,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Quadrant {
    TL,
    TR,
    BL,
    BR,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [Quadrant::TL, Quadrant::TR, Quadrant::BL, Quadrant::BR];

    pub fn index(self) -> usize {
        Quadrant::ALL.iter().position(|&q| q == self).unwrap()
    }

    pub fn from_index(i: usize) -> Quadrant {
        Quadrant::ALL[i]
    }
}

// token helpers

pub fn tag_token(q: Quadrant) -> u32 {
    q.index() as u32
}

pub fn color_word(c: Color) -> u32 {
    COLOR_BASE + c.id()
}

pub fn cell_token(c: Color) -> u32 {
    CELL_BASE + c.id()
}

pub fn parse_tag(tok: u32) -> Option<Quadrant> {
    (tok < 4).then(|| Quadrant::from_index(tok as usize))
}

pub fn parse_color_word(tok: u32) -> Option<Color> {
    (COLOR_BASE..COLOR_BASE + 8)
        .contains(&tok)
        .then(|| Color::from_id(tok - COLOR_BASE).unwrap())
}

pub fn parse_cell(tok: u32) -> Option<Color> {
    (CELL_BASE..CELL_BASE + 8)
        .contains(&tok)
        .then(|| Color::from_id(tok - CELL_BASE).unwrap())
}

/// The unified vocabulary this task lives in.
pub fn task_vocab() -> UnifiedVocab {
    UnifiedVocab::new(TEXT_TOKENS, IMAGE_TOKENS)
}

/// Interleaved-sequence layout for a given grid side length.
pub fn task_layout(grid_n: usize) -> LayoutSpec {
    LayoutSpec {
        vocab: task_vocab(),
        output_image_len: grid_n * grid_n,
        output_text_len: TEXT_LEN,
    }
}

/// An N x N grid of colors, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub n: usize,
    pub cells: Vec<Color>,
}

impl Grid {
    pub fn uniform_quadrants(n: usize, colors: [Color; 4]) -> Grid {
        let mut cells = vec![Color::Red; n * n];
        for (i, cell) in cells.iter_mut().enumerate() {
            let q = quadrant_of_cell(n, i);
            *cell = colors[q.index()];
        }
        Grid { n, cells }
    }

    pub fn quadrant_color(&self, q: Quadrant) -> Color {
        // representative cell; grids built by the generator are uniform
        let idx = quadrant_cells(self.n, q)[0];
        self.cells[idx]
    }

    pub fn to_tokens(&self) -> Vec<u32> {
        self.cells.iter().map(|&c| cell_token(c)).collect()
    }

    pub fn color_ids(&self) -> Vec<u8> {
        self.cells.iter().map(|&c| c.id() as u8).collect()
    }

    pub fn from_color_ids(n: usize, ids: &[u8]) -> Result<Grid> {
        if ids.len() != n * n {
            return Err(Error::Contract(format!(
                "grid has {} cells, expected {}",
                ids.len(),
                n * n
            )));
        }
        let cells = ids
            .iter()
            .map(|&id| {
                Color::from_id(id as u32)
                    .ok_or_else(|| Error::Vocab(format!("color id {id} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Grid { n, cells })
    }
}

/// Quadrant of cell index `i` in an `n x n` row-major grid.
pub fn quadrant_of_cell(n: usize, i: usize) -> Quadrant {
    let (row, col) = (i / n, i % n);
    let h = n / 2;
    match (row < h, col < h) {
        (true, true) => Quadrant::TL,
        (true, false) => Quadrant::TR,
        (false, true) => Quadrant::BL,
        (false, false) => Quadrant::BR,
    }
}

/// Cell indices of one quadrant.
pub fn quadrant_cells(n: usize, q: Quadrant) -> Vec<usize> {
    (0..n * n).filter(|&i| quadrant_of_cell(n, i) == q).collect()
}

/// What one instruction directive does to its quadrant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DirectiveOp {
    /// Set the quadrant to a literal color.
    Lit(Color),
    /// Complement of a literal color.
    CompColor(Color),
    /// Complement of another quadrant's color (input grid for editing,
    /// resolved output for generation).
    CompQuad(Quadrant),
    /// Copy another quadrant's color (self-reference keeps the input).
    FromQuad(Quadrant),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Generation,
    Editing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KindMix {
    Generation,
    Editing,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    /// Grid side length; must be even and >= 2.
    pub grid_n: usize,
    /// Probability that a directive is indirect.
    pub difficulty: f64,
    pub kinds: KindMix,
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_n < 2 || self.grid_n % 2 != 0 {
            return Err(Error::Config(format!(
                "grid_n must be even and >= 2, got {}",
                self.grid_n
            )));
        }
        if !(0.0..=1.0).contains(&self.difficulty) {
            return Err(Error::Config("difficulty must be in [0,1]".into()));
        }
        Ok(())
    }
}

/// One fully resolved task instance: instruction, optional input grid, and
/// the mutually consistent gold outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub kind: TaskKind,
    pub seed: u64,
    pub grid_n: usize,
    pub directives: Vec<DirectiveOp>,
    pub input_grid: Option<Grid>,
    pub gold_colors: [Color; 4],
}

impl TaskInstance {
    pub fn task_tag(&self) -> TaskTag {
        match self.kind {
            TaskKind::Generation => TaskTag::ThinkGen,
            TaskKind::Editing => TaskTag::ThinkEdit,
        }
    }

    /// Instruction tokens: `[tag, op, arg]` per quadrant.
    pub fn instruction_tokens(&self) -> Vec<u32> {
        let mut toks = Vec::with_capacity(INSTR_LEN);
        for (i, d) in self.directives.iter().enumerate() {
            toks.push(tag_token(Quadrant::from_index(i)));
            match *d {
                DirectiveOp::Lit(c) => {
                    toks.push(OP_LIT);
                    toks.push(color_word(c));
                }
                DirectiveOp::CompColor(c) => {
                    toks.push(OP_CMP);
                    toks.push(color_word(c));
                }
                DirectiveOp::CompQuad(q) => {
                    toks.push(OP_CMP);
                    toks.push(tag_token(q));
                }
                DirectiveOp::FromQuad(q) => {
                    toks.push(OP_REF);
                    toks.push(tag_token(q));
                }
            }
        }
        toks
    }

    /// Gold caption: the four (tag, color) claims in quadrant order, twice.
    pub fn gold_text_tokens(&self) -> Vec<u32> {
        let mut toks = Vec::with_capacity(TEXT_LEN);
        for round in 0..2 {
            let _ = round;
            for q in Quadrant::ALL {
                toks.push(tag_token(q));
                toks.push(color_word(self.gold_colors[q.index()]));
            }
        }
        toks
    }

    pub fn gold_grid(&self) -> Grid {
        Grid::uniform_quadrants(self.grid_n, self.gold_colors)
    }

    /// Fully specified training sequence (gold outputs present).
    pub fn gold_sequence(&self, layout: &LayoutSpec) -> Result<InterleavedSequence> {
        let input_img = self.input_grid.as_ref().map(Grid::to_tokens).unwrap_or_default();
        layout.build_sequence(
            self.task_tag(),
            &input_img,
            &self.instruction_tokens(),
            Some(&self.gold_grid().to_tokens()),
            Some(&self.gold_text_tokens()),
        )
    }

    /// Decoding query: outputs absent, so both output segments are masked.
    pub fn query_sequence(&self, layout: &LayoutSpec) -> Result<InterleavedSequence> {
        let input_img = self.input_grid.as_ref().map(Grid::to_tokens).unwrap_or_default();
        layout.build_sequence(
            self.task_tag(),
            &input_img,
            &self.instruction_tokens(),
            None,
            None,
        )
    }
}

/// Deterministic instance generation from a seed.
pub fn generate_instance(cfg: &TaskConfig, seed: u64) -> Result<TaskInstance> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = match cfg.kinds {
        KindMix::Generation => TaskKind::Generation,
        KindMix::Editing => TaskKind::Editing,
        KindMix::Both => {
            if rng.random::<f64>() < 0.5 {
                TaskKind::Generation
            } else {
                TaskKind::Editing
            }
        }
    };
    let rand_color = |rng: &mut ChaCha8Rng| Color::ALL[rng.random_range(0..8)];

    match kind {
        TaskKind::Generation => {
            let mut directives = Vec::with_capacity(4);
            for qi in 0..4 {
                let indirect = rng.random::<f64>() < cfg.difficulty;
                let d = if !indirect {
                    DirectiveOp::Lit(rand_color(&mut rng))
                } else if qi == 0 {
                    // first quadrant has nothing earlier to reference
                    DirectiveOp::CompColor(rand_color(&mut rng))
                } else {
                    match rng.random_range(0..3u32) {
                        0 => DirectiveOp::CompColor(rand_color(&mut rng)),
                        1 => DirectiveOp::CompQuad(Quadrant::from_index(rng.random_range(0..qi))),
                        _ => DirectiveOp::FromQuad(Quadrant::from_index(rng.random_range(0..qi))),
                    }
                };
                directives.push(d);
            }
            // resolve in quadrant order; references only point earlier
            let mut colors = [Color::Red; 4];
            for (qi, d) in directives.iter().enumerate() {
                colors[qi] = match *d {
                    DirectiveOp::Lit(c) => c,
                    DirectiveOp::CompColor(c) => ColorTable::complement(c),
                    DirectiveOp::CompQuad(q) => ColorTable::complement(colors[q.index()]),
                    DirectiveOp::FromQuad(q) => colors[q.index()],
                };
            }
            Ok(TaskInstance {
                kind,
                seed,
                grid_n: cfg.grid_n,
                directives,
                input_grid: None,
                gold_colors: colors,
            })
        }
        TaskKind::Editing => {
            let input_colors = [
                rand_color(&mut rng),
                rand_color(&mut rng),
                rand_color(&mut rng),
                rand_color(&mut rng),
            ];
            let keep = rng.random_range(0..4usize);
            let mut directives = Vec::with_capacity(4);
            for qi in 0..4 {
                if qi == keep {
                    // one quadrant always stays, so image consistency is
                    // well-defined on every editing instance
                    directives.push(DirectiveOp::FromQuad(Quadrant::from_index(qi)));
                    continue;
                }
                let indirect = rng.random::<f64>() < cfg.difficulty;
                let d = if !indirect {
                    DirectiveOp::Lit(rand_color(&mut rng))
                } else {
                    match rng.random_range(0..3u32) {
                        0 => DirectiveOp::CompColor(rand_color(&mut rng)),
                        1 => DirectiveOp::CompQuad(Quadrant::from_index(rng.random_range(0..4))),
                        _ => DirectiveOp::FromQuad(Quadrant::from_index(rng.random_range(0..4))),
                    }
                };
                directives.push(d);
            }
            // references resolve against the input grid
            let mut colors = [Color::Red; 4];
            for (qi, d) in directives.iter().enumerate() {
                colors[qi] = match *d {
                    DirectiveOp::Lit(c) => c,
                    DirectiveOp::CompColor(c) => ColorTable::complement(c),
                    DirectiveOp::CompQuad(q) => ColorTable::complement(input_colors[q.index()]),
                    DirectiveOp::FromQuad(q) => input_colors[q.index()],
                };
            }
            Ok(TaskInstance {
                kind,
                seed,
                grid_n: cfg.grid_n,
                directives,
                input_grid: Some(Grid::uniform_quadrants(cfg.grid_n, input_colors)),
                gold_colors: colors,
            })
        }
    }
}

/// Generate `count` instances with per-instance seeds `base_seed + i`.
pub fn generate_dataset(cfg: &TaskConfig, base_seed: u64, count: usize) -> Result<Vec<TaskInstance>> {
    (0..count)
        .map(|i| generate_instance(cfg, base_seed.wrapping_add(i as u64)))
        .collect()
}

/// Per-quadrant oracle outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadDetail {
    pub quadrant: Quadrant,
    pub evaluable: bool,
    pub matched: bool,
    pub claimed: Option<Color>,
    pub modal: Option<Color>,
}

/// Exact partial-alignment report over possibly partially revealed outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub evaluable: usize,
    pub matched: usize,
    pub score: f64,
    pub quads: Vec<QuadDetail>,
}

/// Partial text-image alignment. A claim is evaluable iff a color token of
/// its claim slots is revealed and its quadrant has at least one revealed
/// grid cell; it matches iff the claimed color equals the modal color among
/// that quadrant's revealed cells (ties break toward the lower color id).
/// A revealed grammar violation in a claim counts evaluable-and-unmatched.
pub fn oracle_partial_alignment(
    text: &[u32],
    text_masked: &[bool],
    grid: &[u32],
    grid_masked: &[bool],
    grid_n: usize,
) -> Result<OracleReport> {
    if text.len() != TEXT_LEN || text_masked.len() != TEXT_LEN {
        return Err(Error::Contract(format!(
            "caption must be {TEXT_LEN} tokens, got {}",
            text.len()
        )));
    }
    if grid.len() != grid_n * grid_n || grid_masked.len() != grid.len() {
        return Err(Error::Contract(format!(
            "grid must be {} tokens, got {}",
            grid_n * grid_n,
            grid.len()
        )));
    }

    let mut quads = Vec::with_capacity(4);
    let mut evaluable = 0;
    let mut matched = 0;
    for q in Quadrant::ALL {
        let qi = q.index();
        let mut malformed = false;
        let mut claimed: Option<Color> = None;
        // claim slots for quadrant qi: slot qi and slot qi + 4
        for slot in [qi, qi + 4] {
            let tag_pos = 2 * slot;
            let col_pos = 2 * slot + 1;
            if !text_masked[tag_pos] && parse_tag(text[tag_pos]) != Some(q) {
                malformed = true;
            }
            if !text_masked[col_pos] {
                match parse_color_word(text[col_pos]) {
                    Some(c) => match claimed {
                        None => claimed = Some(c),
                        Some(prev) if prev != c => malformed = true,
                        _ => {}
                    },
                    None => malformed = true,
                }
            }
        }

        let revealed_cells: Vec<u32> = quadrant_cells(grid_n, q)
            .into_iter()
            .filter(|&i| !grid_masked[i])
            .map(|i| grid[i])
            .collect();
        let modal = modal_color(&revealed_cells);

        let detail = if malformed {
            evaluable += 1;
            QuadDetail {
                quadrant: q,
                evaluable: true,
                matched: false,
                claimed,
                modal,
            }
        } else {
            match (claimed, revealed_cells.is_empty()) {
                (Some(c), false) => {
                    evaluable += 1;
                    let is_match = modal == Some(c);
                    if is_match {
                        matched += 1;
                    }
                    QuadDetail {
                        quadrant: q,
                        evaluable: true,
                        matched: is_match,
                        claimed,
                        modal,
                    }
                }
                _ => QuadDetail {
                    quadrant: q,
                    evaluable: false,
                    matched: false,
                    claimed,
                    modal,
                },
            }
        };
        quads.push(detail);
    }

    let score = if evaluable > 0 {
        matched as f64 / evaluable as f64
    } else {
        0.0
    };
    Ok(OracleReport {
        evaluable,
        matched,
        score,
        quads,
    })
}

/// Most frequent valid color among revealed cells; ties break toward the
/// lower color id. Cells holding non-image tokens never match anything.
fn modal_color(cells: &[u32]) -> Option<Color> {
    let mut counts = [0usize; 8];
    for &tok in cells {
        if let Some(c) = parse_cell(tok) {
            counts[c.id() as usize] += 1;
        }
    }
    let best = (0..8).max_by_key(|&i| (counts[i], std::cmp::Reverse(i)))?;
    (counts[best] > 0).then(|| Color::from_id(best as u32).unwrap())
}

/// Scores over the six evaluation axes; `image_consistency` only applies to
/// editing instances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisScores {
    pub text_quality: f64,
    pub text_alignment: f64,
    pub image_quality: f64,
    pub image_alignment: f64,
    pub image_consistency: Option<f64>,
    pub output_alignment: f64,
}

/// Six-axis evaluation of fully revealed outputs against an instance.
pub fn eval_axes(text: &[u32], grid: &[u32], instance: &TaskInstance) -> Result<AxisScores> {
    let n = instance.grid_n;
    if text.len() != TEXT_LEN || grid.len() != n * n {
        return Err(Error::Contract(
            "eval_axes expects full-length caption and grid".into(),
        ));
    }
    let none = vec![false; TEXT_LEN];
    let gnone = vec![false; n * n];

    // text quality: fraction of positions holding the grammatically
    // expected token type (the canonical tag at tag slots, any color word
    // at color slots)
    let mut ok = 0usize;
    for slot in 0..8 {
        let q = Quadrant::from_index(slot % 4);
        if parse_tag(text[2 * slot]) == Some(q) {
            ok += 1;
        }
        if parse_color_word(text[2 * slot + 1]).is_some() {
            ok += 1;
        }
    }
    let text_quality = ok as f64 / TEXT_LEN as f64;

    // text alignment: claims resolved to the gold colors
    let mut aligned = 0usize;
    for q in Quadrant::ALL {
        let claims: Vec<Option<Color>> = [q.index(), q.index() + 4]
            .iter()
            .map(|&slot| parse_color_word(text[2 * slot + 1]))
            .collect();
        let gold = instance.gold_colors[q.index()];
        if claims.iter().all(|&c| c == Some(gold)) {
            aligned += 1;
        }
    }
    let text_alignment = aligned as f64 / 4.0;

    // image quality: mean quadrant color uniformity
    let mut unif = 0.0;
    for q in Quadrant::ALL {
        let cells = quadrant_cells(n, q);
        let toks: Vec<u32> = cells.iter().map(|&i| grid[i]).collect();
        let mut counts = [0usize; 8];
        for &t in &toks {
            if let Some(c) = parse_cell(t) {
                counts[c.id() as usize] += 1;
            }
        }
        unif += *counts.iter().max().unwrap() as f64 / cells.len() as f64;
    }
    let image_quality = unif / 4.0;

    // image alignment: modal quadrant color equals the gold color
    let mut img_aligned = 0usize;
    for q in Quadrant::ALL {
        let toks: Vec<u32> = quadrant_cells(n, q).iter().map(|&i| grid[i]).collect();
        if modal_color(&toks) == Some(instance.gold_colors[q.index()]) {
            img_aligned += 1;
        }
    }
    let image_alignment = img_aligned as f64 / 4.0;

    // image consistency (editing): cells the edit leaves unchanged must be
    // preserved from the input grid
    let image_consistency = instance.input_grid.as_ref().map(|input| {
        let gold = instance.gold_grid();
        let mut unedited = 0usize;
        let mut preserved = 0usize;
        for i in 0..n * n {
            if gold.cells[i] == input.cells[i] {
                unedited += 1;
                if grid[i] == cell_token(input.cells[i]) {
                    preserved += 1;
                }
            }
        }
        if unedited == 0 {
            1.0
        } else {
            preserved as f64 / unedited as f64
        }
    });

    let output_alignment =
        oracle_partial_alignment(text, &none, grid, &gnone, n)?.score;

    Ok(AxisScores {
        text_quality,
        text_alignment,
        image_quality,
        image_alignment,
        image_consistency,
        output_alignment,
    })
}

/// Scoring interface the RL trainer and harness use; implemented by the
/// color-grid oracle, exact by construction.
pub trait AlignmentOracle: Sync {
    /// Partial alignment score of a (possibly partially masked) state.
    fn partial_score(&self, seq: &InterleavedSequence) -> f64;
}

/// [`AlignmentOracle`] over interleaved sequences for a fixed grid size.
#[derive(Debug, Clone, Copy)]
pub struct ColorGridOracle {
    pub grid_n: usize,
}

impl AlignmentOracle for ColorGridOracle {
    fn partial_score(&self, seq: &InterleavedSequence) -> f64 {
        let (text, text_masked) = seq.segment_view(Role::OutputText);
        let (grid, grid_masked) = seq.segment_view(Role::OutputImage);
        oracle_partial_alignment(&text, &text_masked, &grid, &grid_masked, self.grid_n)
            .map(|r| r.score)
            .unwrap_or(0.0)
    }
}

/// Dataset manifest: everything needed to regenerate a corpus bit-exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: TaskConfig,
    pub base_seed: u64,
    pub count: usize,
    pub seeds: Vec<u64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(difficulty: f64, kinds: KindMix) -> TaskConfig {
        TaskConfig {
            grid_n: 4,
            difficulty,
            kinds,
        }
    }

    #[test]
    fn complement_is_an_involution_and_fixed_point_free() {
        for c in Color::ALL {
            let cc = ColorTable::complement(c);
            assert_ne!(c, cc);
            assert_eq!(ColorTable::complement(cc), c);
        }
    }

    #[test]
    fn difficulty_zero_generation_is_all_literal() {
        for seed in 0..50 {
            let inst = generate_instance(&cfg(0.0, KindMix::Generation), seed).unwrap();
            for (qi, d) in inst.directives.iter().enumerate() {
                match *d {
                    DirectiveOp::Lit(c) => assert_eq!(inst.gold_colors[qi], c),
                    other => panic!("difficulty 0 produced {other:?}"),
                }
            }
        }
    }

    #[test]
    fn complement_directive_resolves_via_table() {
        let inst = TaskInstance {
            kind: TaskKind::Generation,
            seed: 0,
            grid_n: 4,
            directives: vec![
                DirectiveOp::CompColor(Color::Red),
                DirectiveOp::Lit(Color::Blue),
                DirectiveOp::Lit(Color::Black),
                DirectiveOp::Lit(Color::White),
            ],
            input_grid: None,
            gold_colors: [Color::Cyan, Color::Blue, Color::Black, Color::White],
        };
        // TL = complement of RED must be claimed CYAN and realized CYAN
        assert_eq!(inst.gold_colors[0], Color::Cyan);
        let grid = inst.gold_grid();
        for &i in &quadrant_cells(4, Quadrant::TL) {
            assert_eq!(grid.cells[i], Color::Cyan);
        }
        let text = inst.gold_text_tokens();
        assert_eq!(text[1], color_word(Color::Cyan));
    }

    #[test]
    fn swap_edit_swaps_gold_quadrants() {
        // swap TL and BR on grid(TL = RED, BR = BLUE)
        let input = Grid::uniform_quadrants(4, [Color::Red, Color::Green, Color::Black, Color::Blue]);
        let inst = TaskInstance {
            kind: TaskKind::Editing,
            seed: 0,
            grid_n: 4,
            directives: vec![
                DirectiveOp::FromQuad(Quadrant::BR),
                DirectiveOp::FromQuad(Quadrant::TR),
                DirectiveOp::FromQuad(Quadrant::BL),
                DirectiveOp::FromQuad(Quadrant::TL),
            ],
            input_grid: Some(input.clone()),
            gold_colors: [Color::Blue, Color::Green, Color::Black, Color::Red],
        };
        let gold = inst.gold_grid();
        assert_eq!(gold.quadrant_color(Quadrant::TL), Color::Blue);
        assert_eq!(gold.quadrant_color(Quadrant::BR), Color::Red);
        assert_eq!(gold.quadrant_color(Quadrant::TR), input.quadrant_color(Quadrant::TR));
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let c = cfg(0.7, KindMix::Both);
        for seed in [0u64, 1, 99, 12345] {
            let a = generate_instance(&c, seed).unwrap();
            let b = generate_instance(&c, seed).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn everything_masked_scores_zero_with_no_evidence() {
        let report = oracle_partial_alignment(
            &[0; TEXT_LEN],
            &[true; TEXT_LEN],
            &[15; 16],
            &[true; 16],
            4,
        )
        .unwrap();
        assert_eq!(report.evaluable, 0);
        assert_eq!(report.score, 0.0);
    }

    #[test]
    fn gold_instances_score_one_at_full_reveal() {
        for seed in 0..80 {
            let inst = generate_instance(&cfg(0.8, KindMix::Both), seed).unwrap();
            let text = inst.gold_text_tokens();
            let grid = inst.gold_grid().to_tokens();
            let report = oracle_partial_alignment(
                &text,
                &vec![false; TEXT_LEN],
                &grid,
                &vec![false; grid.len()],
                4,
            )
            .unwrap();
            assert_eq!(report.score, 1.0, "seed {seed}");
            assert_eq!(report.evaluable, 4);
        }
    }

    #[test]
    fn partial_reveal_two_matching_claims() {
        // two claims revealed and matched, other two fully masked
        let inst = generate_instance(&cfg(0.0, KindMix::Generation), 3).unwrap();
        let text = inst.gold_text_tokens();
        let grid = inst.gold_grid().to_tokens();
        let mut text_masked = vec![true; TEXT_LEN];
        // reveal color tokens of claims TL and TR (first round)
        text_masked[1] = false;
        text_masked[3] = false;
        let mut grid_masked = vec![true; grid.len()];
        // reveal one cell in TL and TR
        grid_masked[quadrant_cells(4, Quadrant::TL)[0]] = false;
        grid_masked[quadrant_cells(4, Quadrant::TR)[0]] = false;
        let report =
            oracle_partial_alignment(&text, &text_masked, &grid, &grid_masked, 4).unwrap();
        assert_eq!(report.evaluable, 2);
        assert_eq!(report.matched, 2);
        assert_eq!(report.score, 1.0);
    }

    #[test]
    fn malformed_tag_counts_evaluable_and_unmatched() {
        let inst = generate_instance(&cfg(0.0, KindMix::Generation), 5).unwrap();
        let mut text = inst.gold_text_tokens();
        let grid = inst.gold_grid().to_tokens();
        // a color token sits in TL's tag position
        text[0] = color_word(Color::Red);
        let report = oracle_partial_alignment(
            &text,
            &vec![false; TEXT_LEN],
            &grid,
            &vec![false; grid.len()],
            4,
        )
        .unwrap();
        assert_eq!(report.evaluable, 4);
        assert_eq!(report.matched, 3);
        assert!(!report.quads[0].matched && report.quads[0].evaluable);
    }

    #[test]
    fn modal_ties_break_toward_lower_color_id() {
        // two revealed cells, GREEN(1) and RED(0): tie resolves to RED
        let cells = vec![cell_token(Color::Green), cell_token(Color::Red)];
        assert_eq!(modal_color(&cells), Some(Color::Red));
    }

    #[test]
    fn eval_axes_gold_is_all_ones() {
        for seed in 0..40 {
            let inst = generate_instance(&cfg(0.6, KindMix::Both), seed).unwrap();
            let axes = eval_axes(
                &inst.gold_text_tokens(),
                &inst.gold_grid().to_tokens(),
                &inst,
            )
            .unwrap();
            assert_eq!(axes.text_quality, 1.0);
            assert_eq!(axes.text_alignment, 1.0);
            assert_eq!(axes.image_quality, 1.0);
            assert_eq!(axes.image_alignment, 1.0);
            assert_eq!(axes.output_alignment, 1.0);
            match inst.kind {
                TaskKind::Editing => assert_eq!(axes.image_consistency, Some(1.0)),
                TaskKind::Generation => assert_eq!(axes.image_consistency, None),
            }
        }
    }

    #[test]
    fn eval_axes_text_right_grid_wrong() {
        let inst = generate_instance(&cfg(0.0, KindMix::Generation), 11).unwrap();
        let text = inst.gold_text_tokens();
        // uniform grid in a color none of the claims use
        let wrong = Color::ALL
            .into_iter()
            .find(|c| !inst.gold_colors.contains(c))
            .unwrap();
        let grid = vec![cell_token(wrong); 16];
        let axes = eval_axes(&text, &grid, &inst).unwrap();
        assert_eq!(axes.text_alignment, 1.0);
        assert_eq!(axes.image_alignment, 0.0);
        assert_eq!(axes.output_alignment, 0.0);
        assert_eq!(axes.image_quality, 1.0);
    }

    #[test]
    fn sequences_roundtrip_through_layout() {
        let inst = generate_instance(&cfg(0.5, KindMix::Editing), 21).unwrap();
        let layout = task_layout(inst.grid_n);
        let gold = inst.gold_sequence(&layout).unwrap();
        assert_eq!(gold.masked_count(), 0);
        let query = inst.query_sequence(&layout).unwrap();
        assert_eq!(query.masked_count(), 16 + TEXT_LEN);
        let (text, _) = gold.segment_view(Role::OutputText);
        assert_eq!(text, inst.gold_text_tokens());
    }

    proptest! {
        #[test]
        fn gold_consistency_invariant(seed: u64, diff in 0.0f64..=1.0) {
            let inst = generate_instance(&cfg(diff, KindMix::Both), seed).unwrap();
            let report = oracle_partial_alignment(
                &inst.gold_text_tokens(),
                &vec![false; TEXT_LEN],
                &inst.gold_grid().to_tokens(),
                &vec![false; 16],
                4,
            ).unwrap();
            prop_assert_eq!(report.score, 1.0);
        }

        #[test]
        fn monotone_evidence_on_gold_outputs(seed: u64, reveal_steps in 1usize..=8) {
            // progressively unmask a gold instance; evaluable never drops
            let inst = generate_instance(&cfg(0.5, KindMix::Generation), seed).unwrap();
            let text = inst.gold_text_tokens();
            let grid = inst.gold_grid().to_tokens();
            let mut text_masked = vec![true; TEXT_LEN];
            let mut grid_masked = vec![true; grid.len()];
            let mut order: Vec<usize> = (0..TEXT_LEN + grid.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            for i in (1..order.len()).rev() {
                let j = rng.random_range(0..=i);
                order.swap(i, j);
            }
            let mut prev = 0usize;
            for chunk in order.chunks(order.len().div_ceil(reveal_steps)) {
                for &idx in chunk {
                    if idx < TEXT_LEN {
                        text_masked[idx] = false;
                    } else {
                        grid_masked[idx - TEXT_LEN] = false;
                    }
                }
                let rep = oracle_partial_alignment(&text, &text_masked, &grid, &grid_masked, 4).unwrap();
                prop_assert!(rep.evaluable >= prev, "evaluable dropped {prev} -> {}", rep.evaluable);
                prop_assert_eq!(rep.matched, rep.evaluable, "gold revealed tokens must match");
                prev = rep.evaluable;
            }
        }
    }
}
