//! The unified masked-token predictor: a small bidirectional transformer
//! over the unified vocabulary producing per-position logits for both
//! modalities.
//!
//! Every position attends to every position (no causal mask); masked slots
//! are embedded through the MASK token's embedding row. Learned absolute
//! positional embeddings plus segment-role embeddings distinguish output
//! image slots from output text slots.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{InterleavedSequence, Role};
use crate::real::Real;
use crate::tensor::{Tape, TensorId};

/// Number of distinct [`Role`] values, for the role embedding table.
pub const ROLE_COUNT: usize = 6;

fn role_index(role: Role) -> u32 {
    match role {
        Role::Task => 0,
        Role::InputImage => 1,
        Role::InputText => 2,
        Role::OutputImage => 3,
        Role::OutputText => 4,
        Role::Sentinel => 5,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model == 0 || self.n_layers == 0 || self.d_ff == 0 || self.vocab_size == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// One named parameter tensor with its gradient slot.
#[derive(Debug, Clone)]
pub struct Param<R> {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<R>,
    pub grad: Vec<R>,
}

/// All learnable values, sorted by name. Sorted order is the canonical
/// order for gradient buffers, the optimizer, and the checkpoint container.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<R> {
    entries: Vec<(String, Param<R>)>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: &str, rows: usize, cols: usize, values: Vec<R>) {
        debug_assert_eq!(values.len(), rows * cols);
        let grad = vec![R::zero(); values.len()];
        let param = Param {
            rows,
            cols,
            values,
            grad,
        };
        match self.entries.binary_search_by(|(n, _)| n.as_str().cmp(name)) {
            Ok(i) => self.entries[i] = (name.to_string(), param),
            Err(i) => self.entries.insert(i, (name.to_string(), param)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Param<R>> {
        self.entries
            .binary_search_by(|(n, _)| n.as_str().cmp(name))
            .ok()
            .map(|i| &self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count.
    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, p)| p.values.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<R>)> {
        self.entries.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<R>)> {
        self.entries.iter_mut().map(|(n, p)| (n.as_str(), p))
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.entries.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g = R::zero());
        }
    }

    /// Add one gradient set (aligned with sorted order) into the grad slots.
    pub fn accumulate_grads(&mut self, grads: &[Vec<R>]) {
        debug_assert_eq!(grads.len(), self.entries.len());
        for ((_, p), g) in self.entries.iter_mut().zip(grads.iter()) {
            for (slot, &gv) in p.grad.iter_mut().zip(g.iter()) {
                *slot += gv;
            }
        }
    }

    pub fn scale_grads(&mut self, s: R) {
        for (_, p) in self.entries.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g *= s);
        }
    }
}

/// Tape leaves for every parameter of a store, in sorted order.
pub struct Bound {
    ids: Vec<TensorId>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn id(&self, name: &str) -> TensorId {
        self.ids[self.index[name]]
    }

    /// Gradients aligned with the store's sorted parameter order.
    pub fn grads<R: Real>(&self, tape: &Tape<R>) -> Vec<Vec<R>> {
        self.ids.iter().map(|&id| tape.grad(id).to_vec()).collect()
    }
}

/// Copy all parameters onto a tape as leaves.
pub fn bind_params<R: Real>(tape: &mut Tape<R>, store: &ParamStore<R>) -> Bound {
    let mut ids = Vec::with_capacity(store.len());
    let mut index = HashMap::with_capacity(store.len());
    for (i, (name, p)) in store.iter().enumerate() {
        let id = tape
            .leaf(p.rows, p.cols, p.values.clone())
            .expect("param shape is consistent");
        ids.push(id);
        index.insert(name.to_string(), i);
    }
    Bound { ids, index }
}

/// All parameter values concatenated in sorted order; pairs with
/// [`bind_params_from_flat`] for whole-model gradient checks.
pub fn flatten_params<R: Real>(store: &ParamStore<R>) -> Vec<R> {
    let mut out = Vec::with_capacity(store.num_values());
    for (_, p) in store.iter() {
        out.extend_from_slice(&p.values);
    }
    out
}

/// Bind parameters as views into one flat `1 x P` leaf, so a loss built on
/// them differentiates against a single tensor.
pub fn bind_params_from_flat<R: Real>(
    tape: &mut Tape<R>,
    store: &ParamStore<R>,
    flat: TensorId,
) -> Result<Bound> {
    let total = store.num_values();
    if tape.shape(flat) != (1, total) {
        let (r, c) = tape.shape(flat);
        return Err(Error::Shape(format!(
            "flat parameter leaf is {r}x{c}, expected 1x{total}"
        )));
    }
    let mut ids = Vec::with_capacity(store.len());
    let mut index = HashMap::with_capacity(store.len());
    let mut offset = 0;
    for (i, (name, p)) in store.iter().enumerate() {
        let len = p.values.len();
        let slice = tape.slice_cols(flat, offset, len)?;
        let shaped = tape.reshape(slice, p.rows, p.cols)?;
        ids.push(shaped);
        index.insert(name.to_string(), i);
        offset += len;
    }
    Ok(Bound { ids, index })
}

/// The mask predictor: config plus parameters.
#[derive(Debug, Clone)]
pub struct MaskPredictor<R: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<R>,
}

impl<R: Real> MaskPredictor<R> {
    /// Deterministic initialization: weights from N(0, 0.02^2), biases zero,
    /// layer-norm gains one.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let std = 0.02;
        let normal = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| -> Vec<R> {
            (0..rows * cols)
                .map(|_| {
                    let x = R::standard_normal(rng);
                    x * R::from_f64(std)
                })
                .collect()
        };
        let d = config.d_model;
        let f = config.d_ff;
        let v = config.vocab_size;

        let vals = normal(v, d, &mut rng);
        store.insert("tok_emb", v, d, vals);
        let vals = normal(config.max_seq_len, d, &mut rng);
        store.insert("pos_emb", config.max_seq_len, d, vals);
        let vals = normal(ROLE_COUNT, d, &mut rng);
        store.insert("role_emb", ROLE_COUNT, d, vals);

        for l in 0..config.n_layers {
            for w in ["wq", "wk", "wv", "wo"] {
                let vals = normal(d, d, &mut rng);
                store.insert(&format!("layer{l}.attn.{w}"), d, d, vals);
            }
            for b in ["bq", "bk", "bv", "bo"] {
                store.insert(&format!("layer{l}.attn.{b}"), 1, d, vec![R::zero(); d]);
            }
            store.insert(&format!("layer{l}.ln1.g"), 1, d, vec![R::one(); d]);
            store.insert(&format!("layer{l}.ln1.b"), 1, d, vec![R::zero(); d]);
            store.insert(&format!("layer{l}.ln2.g"), 1, d, vec![R::one(); d]);
            store.insert(&format!("layer{l}.ln2.b"), 1, d, vec![R::zero(); d]);
            let vals = normal(d, f, &mut rng);
            store.insert(&format!("layer{l}.ffn.w1"), d, f, vals);
            store.insert(&format!("layer{l}.ffn.b1"), 1, f, vec![R::zero(); f]);
            let vals = normal(f, d, &mut rng);
            store.insert(&format!("layer{l}.ffn.w2"), f, d, vals);
            store.insert(&format!("layer{l}.ffn.b2"), 1, d, vec![R::zero(); d]);
        }
        store.insert("final_ln.g", 1, d, vec![R::one(); d]);
        store.insert("final_ln.b", 1, d, vec![R::zero(); d]);
        let vals = normal(d, v, &mut rng);
        store.insert("out.w", d, v, vals);
        store.insert("out.b", 1, v, vec![R::zero(); v]);

        Ok(MaskPredictor {
            config,
            params: store,
        })
    }

    /// Record the full forward pass on `tape`, returning per-position logits
    /// (`L x V`) and the parameter bindings for gradient extraction.
    pub fn forward(
        &self,
        tape: &mut Tape<R>,
        seq: &InterleavedSequence,
    ) -> Result<(TensorId, Bound)> {
        let bound = bind_params(tape, &self.params);
        let logits = forward_with(tape, &bound, &self.config, seq)?;
        Ok((logits, bound))
    }

    /// Forward pass returning raw logit values only (no gradient use).
    pub fn logits(&self, seq: &InterleavedSequence) -> Result<Vec<R>> {
        let mut tape = Tape::new();
        let (id, _) = self.forward(&mut tape, seq)?;
        Ok(tape.value(id).to_vec())
    }
}

/// Forward pass against already-bound parameters. Used by trainers that
/// bind once per tape and need the binding for gradient extraction.
pub fn forward_with<R: Real>(
    tape: &mut Tape<R>,
    bound: &Bound,
    config: &ModelConfig,
    seq: &InterleavedSequence,
) -> Result<TensorId> {
    let len = seq.len();
    if len > config.max_seq_len {
        return Err(Error::Contract(format!(
            "sequence length {len} exceeds max {}",
            config.max_seq_len
        )));
    }
    for &tok in &seq.tokens {
        if tok as usize >= config.vocab_size {
            return Err(Error::Vocab(format!(
                "token {tok} outside model vocabulary of size {}",
                config.vocab_size
            )));
        }
    }
    let positions: Vec<u32> = (0..len as u32).collect();
    let roles: Vec<u32> = (0..len).map(|p| role_index(seq.role_of(p))).collect();

    let tok = tape.gather_rows(bound.id("tok_emb"), &seq.tokens)?;
    let pos = tape.gather_rows(bound.id("pos_emb"), &positions)?;
    let role = tape.gather_rows(bound.id("role_emb"), &roles)?;
    let tp = tape.add(tok, pos)?;
    let mut x = tape.add(tp, role)?;

    let heads = config.n_heads;
    let dh = config.d_model / heads;
    let scale = R::from_f64(1.0 / (dh as f64).sqrt());

    for l in 0..config.n_layers {
        let p = |n: &str| bound.id(&format!("layer{l}.{n}"));

        let h = tape.layer_norm(x, p("ln1.g"), p("ln1.b"))?;
        let q0 = tape.matmul(h, p("attn.wq"))?;
        let q = tape.add_bias(q0, p("attn.bq"))?;
        let k0 = tape.matmul(h, p("attn.wk"))?;
        let k = tape.add_bias(k0, p("attn.bk"))?;
        let v0 = tape.matmul(h, p("attn.wv"))?;
        let v = tape.add_bias(v0, p("attn.bv"))?;

        let mut ctxs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let qh = tape.slice_cols(q, hd * dh, dh)?;
            let kh = tape.slice_cols(k, hd * dh, dh)?;
            let vh = tape.slice_cols(v, hd * dh, dh)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scaled = tape.mul_scalar(scores, scale);
            let attn = tape.softmax_rows(scaled);
            let ctx = tape.matmul(attn, vh)?;
            ctxs.push(ctx);
        }
        let ctx = tape.concat_cols(&ctxs)?;
        let o0 = tape.matmul(ctx, p("attn.wo"))?;
        let o = tape.add_bias(o0, p("attn.bo"))?;
        x = tape.add(x, o)?;

        let h2 = tape.layer_norm(x, p("ln2.g"), p("ln2.b"))?;
        let f0 = tape.matmul(h2, p("ffn.w1"))?;
        let f1 = tape.add_bias(f0, p("ffn.b1"))?;
        let fa = tape.relu_sq(f1);
        let f2 = tape.matmul(fa, p("ffn.w2"))?;
        let f3 = tape.add_bias(f2, p("ffn.b2"))?;
        x = tape.add(x, f3)?;
    }

    let xf = tape.layer_norm(x, bound.id("final_ln.g"), bound.id("final_ln.b"))?;
    let lg = tape.matmul(xf, bound.id("out.w"))?;
    let logits = tape.add_bias(lg, bound.id("out.b"))?;
    Ok(logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{LayoutSpec, TaskTag, UnifiedVocab};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 48,
            vocab_size: 30,
            seed: 11,
        }
    }

    fn tiny_seq(masked: bool) -> InterleavedSequence {
        let spec = LayoutSpec {
            vocab: UnifiedVocab::new(15, 8),
            output_image_len: 4,
            output_text_len: 4,
        };
        let img: Vec<u32> = vec![15, 16, 17, 18];
        let txt: Vec<u32> = vec![0, 4, 1, 5];
        if masked {
            spec.build_sequence(TaskTag::ThinkGen, &[], &[0, 12, 4], None, None)
                .unwrap()
        } else {
            spec.build_sequence(TaskTag::ThinkGen, &[], &[0, 12, 4], Some(&img), Some(&txt))
                .unwrap()
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = MaskPredictor::<f64>::init(tiny_config()).unwrap();
        let b = MaskPredictor::<f64>::init(tiny_config()).unwrap();
        for ((na, pa), (nb, pb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(pa.values, pb.values);
        }
        let mut other = tiny_config();
        other.seed = 12;
        let c = MaskPredictor::<f64>::init(other).unwrap();
        assert_ne!(
            a.params.get("tok_emb").unwrap().values,
            c.params.get("tok_emb").unwrap().values
        );
    }

    #[test]
    fn init_rejects_indivisible_heads() {
        let mut cfg = tiny_config();
        cfg.d_model = 8;
        cfg.n_heads = 3;
        assert!(matches!(
            MaskPredictor::<f64>::init(cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn forward_shape_and_purity() {
        let model = MaskPredictor::<f64>::init(tiny_config()).unwrap();
        let seq = tiny_seq(true);
        let a = model.logits(&seq).unwrap();
        let b = model.logits(&seq).unwrap();
        assert_eq!(a.len(), seq.len() * 30);
        assert_eq!(a, b);
    }

    #[test]
    fn forward_rejects_over_length() {
        let mut cfg = tiny_config();
        cfg.max_seq_len = 4;
        let model = MaskPredictor::<f64>::init(cfg).unwrap();
        let seq = tiny_seq(true);
        assert!(matches!(
            model.logits(&seq),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn attention_is_bidirectional() {
        // changing a later token must change logits at an earlier masked slot
        let model = MaskPredictor::<f64>::init(tiny_config()).unwrap();
        let seq = tiny_seq(false);
        let out_img = seq.segment(Role::OutputImage).unwrap();
        let out_txt = seq.segment(Role::OutputText).unwrap();
        assert!(out_img.start < out_txt.start);

        let base = model.logits(&seq).unwrap();
        let mut perturbed = seq.clone();
        // flip a text token (j) far after the image slot (i)
        perturbed.tokens[out_txt.start] = 7;
        let alt = model.logits(&perturbed).unwrap();
        let v = model.config.vocab_size;
        let i = out_img.start;
        let row_changed = (0..v).any(|c| base[i * v + c] != alt[i * v + c]);
        assert!(row_changed, "position {i} logits did not react to later token");
    }

    #[test]
    fn duplicate_sequences_give_identical_rows() {
        let model = MaskPredictor::<f64>::init(tiny_config()).unwrap();
        let seq = tiny_seq(true);
        // "batch of two" is two independent graphs over the same frozen params
        let a = model.logits(&seq).unwrap();
        let b = model.logits(&seq).unwrap();
        assert_eq!(a, b);
    }
}
