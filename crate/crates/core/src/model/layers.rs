//! Graph-building functions. Each takes the tape, the bound parameter
//! leaves (indexed by [`ParamId::index`]) and the relevant parameter ids.

use std::cmp::Ordering;

use super::{AttentionParams, GruParams, ModelError, ModelParams};
use crate::corpus::{BOS, EOS};
use crate::numeric::{ParamId, Tape, Tensor, Var};

fn p(vars: &[Var], id: ParamId) -> Var {
    vars[id.index()]
}

/// `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
/// `h̃ = tanh(W_h x + U_h (r ⊙ h) + b_h)`, `h' = (1 − z) ⊙ h + z ⊙ h̃`.
pub fn gru_cell(tape: &mut Tape, vars: &[Var], g: &GruParams, x: Var, h: Var) -> Result<Var, ModelError> {
    let gate = |tape: &mut Tape, w: ParamId, u: ParamId, b: ParamId, hh: Var| -> Result<Var, ModelError> {
        let wx = tape.matvec(p(vars, w), x)?;
        let uh = tape.matvec(p(vars, u), hh)?;
        let sum = tape.add(wx, uh)?;
        Ok(tape.add_bias(sum, p(vars, b))?)
    };
    let z_pre = gate(tape, g.w_z, g.u_z, g.b_z, h)?;
    let z = tape.sigmoid(z_pre)?;
    let r_pre = gate(tape, g.w_r, g.u_r, g.b_r, h)?;
    let r = tape.sigmoid(r_pre)?;
    let rh = tape.mul(r, h)?;
    let cand_pre = gate(tape, g.w_h, g.u_h, g.b_h, rh)?;
    let cand = tape.tanh(cand_pre)?;
    let keep = tape.one_minus(z)?;
    let old = tape.mul(keep, h)?;
    let new = tape.mul(z, cand)?;
    Ok(tape.add(old, new)?)
}

/// Bi-GRU over the source: row `n` of the result is `fwd_n ⊕ bwd_n`, where
/// `bwd_n` has read tokens `N..n` in reverse.
pub fn encode_text(tape: &mut Tape, vars: &[Var], ids: &ModelParams, src: &[u32]) -> Result<Var, ModelError> {
    if src.is_empty() {
        return Err(ModelError::EmptySource);
    }
    let hidden = tape.shape(p(vars, ids.enc_fwd.b_z))[0];
    let emb = p(vars, ids.src_emb);
    let xs = src
        .iter()
        .map(|&t| tape.row(emb, t as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let zero = tape.constant(Tensor::zeros(&[hidden]));

    let mut fwd = Vec::with_capacity(xs.len());
    let mut h = zero;
    for &x in &xs {
        h = gru_cell(tape, vars, &ids.enc_fwd, x, h)?;
        fwd.push(h);
    }
    let mut bwd = vec![zero; xs.len()];
    let mut h = zero;
    for (n, &x) in xs.iter().enumerate().rev() {
        h = gru_cell(tape, vars, &ids.enc_bwd, x, h)?;
        bwd[n] = h;
    }
    let rows = fwd
        .iter()
        .zip(&bwd)
        .map(|(&f, &b)| tape.concat(&[f, b]))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(tape.stack_rows(&rows)?)
}

/// `C′ = (1/N) Σ_n h_n`
pub fn average_pool(tape: &mut Tape, c: Var) -> Result<Var, ModelError> {
    Ok(tape.mean_rows(c)?)
}

pub struct VisualAttention {
    /// Fused `R × D` image.
    pub fused: Var,
    /// Image weights in canonical order; see [`VisualAttention::alpha`].
    pub alpha: Var,
    /// `order[k]` is the bundle position of canonical image `k`.
    pub order: Vec<usize>,
}

impl VisualAttention {
    /// Weights in the bundle's own image order.
    pub fn alpha(&self, tape: &Tape) -> Vec<f64> {
        let canon = tape.value(self.alpha).data();
        let mut out = vec![0.0; canon.len()];
        for (k, &pos) in self.order.iter().enumerate() {
            out[pos] = canon[k];
        }
        out
    }
}

fn content_cmp(a: &Tensor, b: &Tensor) -> Ordering {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Scores each image by `(W · mean_rows(A^m)) · C′ / √d_c`, softmaxes over
/// images and returns `Σ_m α_m A^m`.
///
/// Images are processed in a canonical content order, so permuting the
/// bundle permutes α and leaves the fused matrix bit-identical.
pub fn visual_attend(
    tape: &mut Tape,
    vars: &[Var],
    ids: &ModelParams,
    images: &[Tensor],
    c_pool: Var,
) -> Result<VisualAttention, ModelError> {
    let first = images.first().ok_or(ModelError::NoImages)?;
    let w = p(vars, ids.vis_w);
    let feat = tape.shape(w)[1];
    let (rows, cols) = first.dims2().unwrap_or((0, 0));
    for (index, img) in images.iter().enumerate() {
        if img.dims2() != Some((rows, feat)) || cols != feat {
            return Err(ModelError::ImageShape {
                index,
                expected: feat,
                found: img.shape().to_vec(),
            });
        }
    }
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.sort_by(|&a, &b| content_cmp(&images[a], &images[b]));

    let scale = 1.0 / (tape.shape(c_pool)[0] as f64).sqrt();
    let mut scores = Vec::with_capacity(images.len());
    let mut flat = Vec::with_capacity(images.len());
    for &i in &order {
        let img = tape.constant(images[i].clone());
        let pooled = tape.mean_rows(img)?;
        let projected = tape.matvec(w, pooled)?;
        let score = tape.dot(projected, c_pool)?;
        let score = tape.scale(score, scale)?;
        scores.push(tape.reshape(score, &[1])?);
        flat.push(tape.reshape(img, &[rows * cols])?);
    }
    let scores = tape.concat(&scores)?;
    let alpha = tape.softmax(scores)?;
    let stacked = tape.stack_rows(&flat)?;
    let stacked_t = tape.transpose(stacked)?;
    let fused = tape.matvec(stacked_t, alpha)?;
    let fused = tape.reshape(fused, &[rows, cols])?;
    Ok(VisualAttention { fused, alpha, order })
}

pub struct Fused {
    /// Enhanced text states `C̄`, `N × d_c`.
    pub c_bar: Var,
    /// Enhanced projected regions `Ā`, `L × d_c`.
    pub a_bar: Var,
    /// Projected regions `A′`, `L × d_c`.
    pub a_proj: Var,
    /// Alignment `S`, `N × L`.
    pub s: Var,
    /// Row softmax of `S`, `N × L`.
    pub w_t2v: Var,
    /// Row softmax of `Sᵀ` (column softmax of `S`), `L × N`.
    pub w_v2t: Var,
}

/// `A′ = A W_p`, `S = C A′ᵀ / √d_c`, `C̄ = C + softmax(S) A′`,
/// `Ā = A′ + softmax(Sᵀ) C`.
pub fn bi_attention(tape: &mut Tape, vars: &[Var], ids: &ModelParams, c: Var, a: Var) -> Result<Fused, ModelError> {
    let a_proj = tape.matmul(a, p(vars, ids.bi_wp))?;
    let d_c = tape.shape(a_proj)[1];
    let a_proj_t = tape.transpose(a_proj)?;
    let s = tape.matmul(c, a_proj_t)?;
    let s = tape.scale(s, 1.0 / (d_c as f64).sqrt())?;
    let w_t2v = tape.softmax(s)?;
    let to_text = tape.matmul(w_t2v, a_proj)?;
    let c_bar = tape.add(c, to_text)?;
    let s_t = tape.transpose(s)?;
    let w_v2t = tape.softmax(s_t)?;
    let to_vis = tape.matmul(w_v2t, c)?;
    let a_bar = tape.add(a_proj, to_vis)?;
    Ok(Fused {
        c_bar,
        a_bar,
        a_proj,
        s,
        w_t2v,
        w_v2t,
    })
}

/// Attention over a fixed set of rows, with the `U_a` projection of every
/// row computed once.
#[derive(Debug, Clone, Copy)]
pub struct AttentionMemory {
    pub params: AttentionParams,
    pub states_t: Var,
    pub keys: Var,
}

impl AttentionMemory {
    pub fn new(tape: &mut Tape, vars: &[Var], params: AttentionParams, states: Var) -> Result<Self, ModelError> {
        if tape.shape(states).first() == Some(&0) {
            return Err(ModelError::Numeric(crate::numeric::NumericError::Empty {
                op: "attention_context",
            }));
        }
        let keys = tape.matmul(states, p(vars, params.u_a))?;
        let states_t = tape.transpose(states)?;
        Ok(Self {
            params,
            states_t,
            keys,
        })
    }

    /// Returns `(context, weights)`.
    pub fn context(&self, tape: &mut Tape, vars: &[Var], s_prime: Var) -> Result<(Var, Var), ModelError> {
        let query = tape.matvec(p(vars, self.params.w_a), s_prime)?;
        let pre = tape.add_bias(self.keys, query)?;
        let act = tape.tanh(pre)?;
        let e = tape.matvec(act, p(vars, self.params.v))?;
        let weights = tape.softmax(e)?;
        let ctx = tape.matvec(self.states_t, weights)?;
        Ok((ctx, weights))
    }
}

/// `e_n = v · tanh(W_a s′ + U_a row_n)`, `context = Σ_n softmax(e)_n row_n`.
pub fn attention_context(
    tape: &mut Tape,
    vars: &[Var],
    params: AttentionParams,
    states: Var,
    s_prime: Var,
) -> Result<(Var, Var), ModelError> {
    AttentionMemory::new(tape, vars, params, states)?.context(tape, vars, s_prime)
}

/// Everything the decoder needs from one source sentence and its images.
pub struct Encoded {
    pub c: Var,
    pub c_pool: Var,
    pub visual: VisualAttention,
    pub fused: Fused,
    pub text_memory: AttentionMemory,
    pub image_memory: AttentionMemory,
    /// `s_0 = tanh(W_init · mean(C̄) + b_init)`
    pub s0: Var,
}

pub fn encode_source(
    tape: &mut Tape,
    vars: &[Var],
    ids: &ModelParams,
    src: &[u32],
    images: &[Tensor],
) -> Result<Encoded, ModelError> {
    let c = encode_text(tape, vars, ids, src)?;
    let c_pool = average_pool(tape, c)?;
    let visual = visual_attend(tape, vars, ids, images, c_pool)?;
    let fused = bi_attention(tape, vars, ids, c, visual.fused)?;
    let text_memory = AttentionMemory::new(tape, vars, ids.att_text, fused.c_bar)?;
    let image_memory = AttentionMemory::new(tape, vars, ids.att_img, fused.a_bar)?;
    let mean = tape.mean_rows(fused.c_bar)?;
    let s0 = tape.matvec(p(vars, ids.init_w), mean)?;
    let s0 = tape.add_bias(s0, p(vars, ids.init_b))?;
    let s0 = tape.tanh(s0)?;
    Ok(Encoded {
        c,
        c_pool,
        visual,
        fused,
        text_memory,
        image_memory,
        s0,
    })
}

/// One cGRU step: `s′ = GRU₁(emb(y), s)`, text and image contexts from
/// `s′`, `s_t = GRU₂(c ⊕ i, s′)`, then the readout and log-softmax.
/// Returns `(s_t, log-probabilities)`.
pub fn decoder_step(
    tape: &mut Tape,
    vars: &[Var],
    ids: &ModelParams,
    enc: &Encoded,
    state: Var,
    prev: u32,
) -> Result<(Var, Var), ModelError> {
    let emb = tape.row(p(vars, ids.tgt_emb), prev as usize)?;
    let s_prime = gru_cell(tape, vars, &ids.dec_gru1, emb, state)?;
    let (ctx, _) = enc.text_memory.context(tape, vars, s_prime)?;
    let (img, _) = enc.image_memory.context(tape, vars, s_prime)?;
    let both = tape.concat(&[ctx, img])?;
    let s = gru_cell(tape, vars, &ids.dec_gru2, both, s_prime)?;

    let mut acc = tape.matvec(p(vars, ids.read_s), s)?;
    for (w, x) in [(ids.read_e, emb), (ids.read_c, ctx), (ids.read_i, img)] {
        let term = tape.matvec(p(vars, w), x)?;
        acc = tape.add(acc, term)?;
    }
    let acc = tape.add_bias(acc, p(vars, ids.read_b))?;
    let hidden = tape.tanh(acc)?;
    let logits = tape.matvec(p(vars, ids.out_w), hidden)?;
    let logits = tape.add_bias(logits, p(vars, ids.out_b))?;
    Ok((s, tape.log_softmax(logits)?))
}

/// Teacher-forced NLL of `tgt ⊕ EOS` given `BOS ⊕ tgt`, averaged over the
/// `len(tgt) + 1` predictions.
pub fn sequence_loss(
    tape: &mut Tape,
    vars: &[Var],
    ids: &ModelParams,
    src: &[u32],
    tgt: &[u32],
    images: &[Tensor],
) -> Result<Var, ModelError> {
    if tgt.is_empty() {
        return Err(ModelError::EmptyTarget);
    }
    let enc = encode_source(tape, vars, ids, src, images)?;
    let mut state = enc.s0;
    let mut prev = BOS;
    let mut picks = Vec::with_capacity(tgt.len() + 1);
    for &gold in tgt.iter().chain(std::iter::once(&EOS)) {
        let (next, log_probs) = decoder_step(tape, vars, ids, &enc, state, prev)?;
        let lp = tape.pick(log_probs, gold as usize)?;
        picks.push(tape.reshape(lp, &[1])?);
        state = next;
        prev = gold;
    }
    let all = tape.concat(&picks)?;
    let total = tape.sum(all)?;
    Ok(tape.scale(total, -1.0 / picks.len() as f64)?)
}
