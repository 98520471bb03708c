//! The translation network.
//!
//! Functions in [`layers`] record onto a caller-supplied [`Tape`], reading
//! parameters through the slice of leaves returned by
//! [`ParamStore::bind`]. [`Model`] wraps the common entry points: loss with
//! gradients, and greedy decoding.

pub mod checks;
pub mod layers;

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{BOS, EOS};
use crate::features::FeatureBundle;
use crate::numeric::{
    read_checkpoint, write_checkpoint, NumericError, ParamId, ParamStore, Tape, Tensor,
};

pub use layers::{
    attention_context, average_pool, bi_attention, decoder_step, encode_source, encode_text,
    gru_cell, sequence_loss, visual_attend, AttentionMemory, Encoded, Fused, VisualAttention,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error("source sentence is empty")]
    EmptySource,
    #[error("target sentence is empty")]
    EmptyTarget,
    #[error("feature bundle has no images")]
    NoImages,
    #[error("image {index} has shape {found:?}, expected [_, {expected}]")]
    ImageShape {
        index: usize,
        expected: usize,
        found: Vec<usize>,
    },
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("max_len must be at least 1")]
    ZeroMaxLen,
    #[error("hyperparameters: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Network dimensions. `ctx_dim` (text state width) is twice `enc_hidden`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub emb_dim: usize,
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    pub feat_dim: usize,
    pub att_dim: usize,
    pub readout_dim: usize,
}

impl ModelConfig {
    pub fn new(src_vocab: usize, tgt_vocab: usize) -> Self {
        Self {
            src_vocab,
            tgt_vocab,
            emb_dim: 256,
            enc_hidden: 256,
            dec_hidden: 512,
            feat_dim: 1024,
            att_dim: 512,
            readout_dim: 256,
        }
    }

    pub fn ctx_dim(&self) -> usize {
        2 * self.enc_hidden
    }

    const KEYS: [&'static str; 8] = [
        "src_vocab",
        "tgt_vocab",
        "emb_dim",
        "enc_hidden",
        "dec_hidden",
        "feat_dim",
        "att_dim",
        "readout_dim",
    ];

    fn fields(&self) -> [usize; 8] {
        [
            self.src_vocab,
            self.tgt_vocab,
            self.emb_dim,
            self.enc_hidden,
            self.dec_hidden,
            self.feat_dim,
            self.att_dim,
            self.readout_dim,
        ]
    }

    /// `key = value` lines, one per field.
    pub fn to_kv_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in Self::KEYS.iter().zip(self.fields()) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn from_kv_text(text: &str) -> Result<Self, ModelError> {
        let mut vals: [Option<usize>; 8] = [None; 8];
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ModelError::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let slot = Self::KEYS
                .iter()
                .position(|key| *key == k)
                .ok_or_else(|| ModelError::Config(format!("unknown key {k}")))?;
            vals[slot] = Some(
                v.parse()
                    .map_err(|_| ModelError::Config(format!("{k}: not an integer: {v}")))?,
            );
        }
        let get = |i: usize| vals[i].ok_or_else(|| ModelError::Config(format!("missing {}", Self::KEYS[i])));
        Ok(Self {
            src_vocab: get(0)?,
            tgt_vocab: get(1)?,
            emb_dim: get(2)?,
            enc_hidden: get(3)?,
            dec_hidden: get(4)?,
            feat_dim: get(5)?,
            att_dim: get(6)?,
            readout_dim: get(7)?,
        })
    }
}

/// The nine tensors of one GRU block.
#[derive(Debug, Clone, Copy)]
pub struct GruParams {
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_h: ParamId,
    pub u_h: ParamId,
    pub b_h: ParamId,
}

impl GruParams {
    fn declare(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, input: usize, hidden: usize) -> Self {
        let mut gate = |g: &str| {
            let w = store.add_uniform(&format!("{name}.w_{g}"), &[hidden, input], input, rng);
            let u = store.add_uniform(&format!("{name}.u_{g}"), &[hidden, hidden], hidden, rng);
            let b = store.add_uniform(&format!("{name}.b_{g}"), &[hidden], hidden, rng);
            (w, u, b)
        };
        let (w_z, u_z, b_z) = gate("z");
        let (w_r, u_r, b_r) = gate("r");
        let (w_h, u_h, b_h) = gate("h");
        Self {
            w_z,
            u_z,
            b_z,
            w_r,
            u_r,
            b_r,
            w_h,
            u_h,
            b_h,
        }
    }

    pub fn all(&self) -> [ParamId; 9] {
        [
            self.w_z, self.u_z, self.b_z, self.w_r, self.u_r, self.b_r, self.w_h, self.u_h, self.b_h,
        ]
    }
}

/// Additive attention: `v · tanh(W_a s' + U_a row)`. `u_a` is stored
/// transposed (`ctx × att`) so all rows project in one product.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub w_a: ParamId,
    pub u_a: ParamId,
    pub v: ParamId,
}

/// Every parameter of the network, in declaration (= initialization) order.
#[derive(Debug, Clone, Copy)]
pub struct ModelParams {
    pub src_emb: ParamId,
    pub tgt_emb: ParamId,
    pub enc_fwd: GruParams,
    pub enc_bwd: GruParams,
    /// Image scoring map, `ctx × feat`.
    pub vis_w: ParamId,
    /// Region projection shared by the alignment and both enhancements,
    /// stored `feat × ctx`.
    pub bi_wp: ParamId,
    pub init_w: ParamId,
    pub init_b: ParamId,
    pub dec_gru1: GruParams,
    pub att_text: AttentionParams,
    pub att_img: AttentionParams,
    /// Input is `c_t ⊕ i_t`; columns `ctx..2·ctx` carry the visual context.
    pub dec_gru2: GruParams,
    pub read_s: ParamId,
    pub read_e: ParamId,
    pub read_c: ParamId,
    pub read_i: ParamId,
    pub read_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

impl ModelParams {
    pub fn declare(config: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let ModelConfig {
            src_vocab,
            tgt_vocab,
            emb_dim: e,
            enc_hidden: h,
            dec_hidden: s,
            feat_dim: d,
            att_dim: a,
            readout_dim: r,
        } = *config;
        let c = config.ctx_dim();
        let src_emb = store.add_uniform("src_emb", &[src_vocab, e], e, rng);
        let tgt_emb = store.add_uniform("tgt_emb", &[tgt_vocab, e], e, rng);
        let enc_fwd = GruParams::declare(store, rng, "enc_fwd", e, h);
        let enc_bwd = GruParams::declare(store, rng, "enc_bwd", e, h);
        let vis_w = store.add_uniform("vis_w", &[c, d], d, rng);
        let bi_wp = store.add_uniform("bi_wp", &[d, c], d, rng);
        let init_w = store.add_uniform("init_w", &[s, c], c, rng);
        let init_b = store.add_uniform("init_b", &[s], c, rng);
        let dec_gru1 = GruParams::declare(store, rng, "dec_gru1", e, s);
        let mut attention = |name: &str| AttentionParams {
            w_a: store.add_uniform(&format!("{name}.w_a"), &[a, s], s, rng),
            u_a: store.add_uniform(&format!("{name}.u_a"), &[c, a], c, rng),
            v: store.add_uniform(&format!("{name}.v"), &[a], a, rng),
        };
        let att_text = attention("att_text");
        let att_img = attention("att_img");
        let dec_gru2 = GruParams::declare(store, rng, "dec_gru2", 2 * c, s);
        let read_s = store.add_uniform("read_s", &[r, s], s, rng);
        let read_e = store.add_uniform("read_e", &[r, e], e, rng);
        let read_c = store.add_uniform("read_c", &[r, c], c, rng);
        let read_i = store.add_uniform("read_i", &[r, c], c, rng);
        let read_b = store.add_uniform("read_b", &[r], r, rng);
        let out_w = store.add_uniform("out_w", &[tgt_vocab, r], r, rng);
        let out_b = store.add_uniform("out_b", &[tgt_vocab], r, rng);
        Self {
            src_emb,
            tgt_emb,
            enc_fwd,
            enc_bwd,
            vis_w,
            bi_wp,
            init_w,
            init_b,
            dec_gru1,
            att_text,
            att_img,
            dec_gru2,
            read_s,
            read_e,
            read_c,
            read_i,
            read_b,
            out_w,
            out_b,
        }
    }
}

/// Parameters plus their layout.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub ids: ModelParams,
}

/// Converts a feature bundle into the dense matrices the network consumes.
pub fn bundle_tensors(bundle: &FeatureBundle) -> Vec<Tensor> {
    bundle
        .matrices()
        .iter()
        .map(|m| Tensor::matrix(m.rows(), m.cols(), m.values().to_vec()).expect("dims match"))
        .collect()
}

impl Model {
    /// Fresh parameters drawn from one seeded stream in declaration order.
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ids = ModelParams::declare(&config, &mut store, &mut rng);
        Self { config, store, ids }
    }

    fn check_tokens(&self, ids: &[u32], vocab: usize) -> Result<(), ModelError> {
        match ids.iter().find(|&&id| id as usize >= vocab) {
            Some(&id) => Err(ModelError::TokenOutOfRange { id, vocab }),
            None => Ok(()),
        }
    }

    /// Mean per-token NLL and its gradient for every parameter, in store order.
    pub fn loss_and_grads(
        &self,
        src: &[u32],
        tgt: &[u32],
        images: &[Tensor],
    ) -> Result<(f64, Vec<Tensor>), ModelError> {
        self.check_tokens(src, self.config.src_vocab)?;
        self.check_tokens(tgt, self.config.tgt_vocab)?;
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape);
        let loss = sequence_loss(&mut tape, &vars, &self.ids, src, tgt, images)?;
        let value = tape.value(loss).item();
        let mut grads = tape.backward(loss)?;
        let out = self
            .store
            .tensors()
            .iter()
            .zip(&vars)
            .map(|(t, &v)| grads.take_or_zeros(v, t.shape()))
            .collect();
        Ok((value, out))
    }

    pub fn loss(&self, src: &[u32], tgt: &[u32], images: &[Tensor]) -> Result<f64, ModelError> {
        self.check_tokens(src, self.config.src_vocab)?;
        self.check_tokens(tgt, self.config.tgt_vocab)?;
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape);
        let loss = sequence_loss(&mut tape, &vars, &self.ids, src, tgt, images)?;
        Ok(tape.value(loss).item())
    }

    /// Argmax decoding from BOS until EOS or `max_len` tokens; EOS is not
    /// included in the output.
    pub fn greedy_decode(
        &self,
        src: &[u32],
        images: &[Tensor],
        max_len: usize,
    ) -> Result<Vec<u32>, ModelError> {
        if max_len == 0 {
            return Err(ModelError::ZeroMaxLen);
        }
        self.check_tokens(src, self.config.src_vocab)?;
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape);
        let enc = encode_source(&mut tape, &vars, &self.ids, src, images)?;
        let mut state = enc.s0;
        let mut prev = BOS;
        let mut out = Vec::new();
        for _ in 0..max_len {
            let (next, log_probs) = decoder_step(&mut tape, &vars, &self.ids, &enc, state, prev)?;
            let best = argmax(tape.value(log_probs).data()) as u32;
            if best == EOS {
                break;
            }
            out.push(best);
            state = next;
            prev = best;
        }
        Ok(out)
    }

    pub fn save(&self, ckpt: &Path, hparams: &Path) -> Result<(), ModelError> {
        write_checkpoint(ckpt, &self.store)?;
        std::fs::write(hparams, self.config.to_kv_text()).map_err(|source| ModelError::Io {
            path: hparams.display().to_string(),
            source,
        })
    }

    pub fn load(ckpt: &Path, hparams: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(hparams).map_err(|source| ModelError::Io {
            path: hparams.display().to_string(),
            source,
        })?;
        let config = ModelConfig::from_kv_text(&text)?;
        let mut model = Self::new(config, 0);
        model.store.load_named(read_checkpoint(ckpt)?)?;
        Ok(model)
    }
}

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
