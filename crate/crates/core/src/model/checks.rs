//! Finite-difference checks for each network block and the full loss, on
//! a deliberately tiny configuration.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::*;
use super::{Model, ModelConfig, ModelError};
use crate::numeric::suite::{probe, random_tensor};
use crate::numeric::{check_gradients_at, GradCheckReport, ParamId, Tape, Tensor, Var};

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        src_vocab: 9,
        tgt_vocab: 8,
        emb_dim: 3,
        enc_hidden: 2,
        dec_hidden: 3,
        feat_dim: 5,
        att_dim: 3,
        readout_dim: 4,
    }
}

pub fn random_images(rng: &mut ChaCha8Rng, m: usize, rows: usize, cols: usize) -> Vec<Tensor> {
    (0..m).map(|_| random_tensor(rng, &[rows, cols], 1.0)).collect()
}

/// All coordinates of the given parameters, addressed as gradcheck inputs.
fn all_coords(model: &Model, ids: &[ParamId]) -> Vec<(usize, usize)> {
    ids.iter()
        .flat_map(|&id| (0..model.store.get(id).len()).map(move |k| (id.index(), k)))
        .collect()
}

fn extra_coords(base: usize, extra: &[Tensor]) -> Vec<(usize, usize)> {
    extra
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |k| (base + i, k)))
        .collect()
}

/// Checks `f(params, extras)` at the listed coordinates; inputs are every
/// parameter followed by `extra`.
fn check_block<F>(
    model: &Model,
    extra: &[Tensor],
    coords: &[(usize, usize)],
    f: F,
) -> Result<GradCheckReport, ModelError>
where
    F: Fn(&mut Tape, &[Var], &[Var]) -> Result<Var, ModelError>,
{
    let n = model.store.len();
    let mut inputs = model.store.tensors().to_vec();
    inputs.extend_from_slice(extra);
    check_gradients_at(&inputs, coords, |tape, vars| f(tape, &vars[..n], &vars[n..]))
}

/// Parameter group of a name: the part before the first dot.
fn group(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Runs the block-level checks and the end-to-end loss check (at least
/// `per_group` random coordinates of every parameter group, or all of a
/// smaller group's coordinates).
pub fn gradient_checks(seed: u64, per_group: usize) -> Result<Vec<(String, GradCheckReport)>, ModelError> {
    let config = tiny_config();
    let model = Model::new(config, seed);
    let ids = model.ids;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let d_c = config.ctx_dim();
    let (regions, feat) = (4, config.feat_dim);
    let images = random_images(&mut rng, 3, regions, feat);
    let src = [4u32, 7, 5];
    let tgt = [6u32, 4, 5];
    let n = model.store.len();
    let mut out = Vec::new();

    let x = random_tensor(&mut rng, &[config.emb_dim], 1.0);
    let h = random_tensor(&mut rng, &[config.dec_hidden], 1.0);
    let mut coords = all_coords(&model, &ids.dec_gru1.all());
    coords.extend(extra_coords(n, &[x.clone(), h.clone()]));
    out.push((
        "gru_cell".to_owned(),
        check_block(&model, &[x, h], &coords, |tape, p, e| {
            let o = gru_cell(tape, p, &ids.dec_gru1, e[0], e[1])?;
            Ok(probe(tape, o, 31)?)
        })?,
    ));

    let mut enc_ids = vec![ids.src_emb];
    enc_ids.extend(ids.enc_fwd.all());
    enc_ids.extend(ids.enc_bwd.all());
    out.push((
        "encode_text".to_owned(),
        check_block(&model, &[], &all_coords(&model, &enc_ids), |tape, p, _| {
            let c = encode_text(tape, p, &ids, &src)?;
            Ok(probe(tape, c, 32)?)
        })?,
    ));

    let c_pool = random_tensor(&mut rng, &[d_c], 1.0);
    let mut coords = all_coords(&model, &[ids.vis_w]);
    coords.extend(extra_coords(n, std::slice::from_ref(&c_pool)));
    out.push((
        "visual_attend".to_owned(),
        check_block(&model, &[c_pool], &coords, |tape, p, e| {
            let va = visual_attend(tape, p, &ids, &images, e[0])?;
            Ok(probe(tape, va.fused, 33)?)
        })?,
    ));

    let c = random_tensor(&mut rng, &[3, d_c], 1.0);
    let a = random_tensor(&mut rng, &[4, feat], 1.0);
    let mut coords = all_coords(&model, &[ids.bi_wp]);
    coords.extend(extra_coords(n, &[c.clone(), a.clone()]));
    out.push((
        "bi_attention".to_owned(),
        check_block(&model, &[c, a], &coords, |tape, p, e| {
            let f = bi_attention(tape, p, &ids, e[0], e[1])?;
            let hc = probe(tape, f.c_bar, 34)?;
            let ha = probe(tape, f.a_bar, 35)?;
            Ok(tape.add(hc, ha)?)
        })?,
    ));

    let states = random_tensor(&mut rng, &[3, d_c], 1.0);
    let s_prime = random_tensor(&mut rng, &[config.dec_hidden], 1.0);
    let att = ids.att_text;
    let mut coords = all_coords(&model, &[att.w_a, att.u_a, att.v]);
    coords.extend(extra_coords(n, &[states.clone(), s_prime.clone()]));
    out.push((
        "attention_context".to_owned(),
        check_block(&model, &[states, s_prime], &coords, |tape, p, e| {
            let (ctx, _) = attention_context(tape, p, att, e[0], e[1])?;
            Ok(probe(tape, ctx, 36)?)
        })?,
    ));

    let state = random_tensor(&mut rng, &[config.dec_hidden], 1.0);
    let mut dec_ids = vec![ids.tgt_emb, ids.bi_wp, ids.vis_w];
    dec_ids.extend(ids.dec_gru1.all());
    dec_ids.extend([ids.att_text.w_a, ids.att_text.u_a, ids.att_text.v]);
    dec_ids.extend([ids.att_img.w_a, ids.att_img.u_a, ids.att_img.v]);
    dec_ids.extend(ids.dec_gru2.all());
    dec_ids.extend([ids.read_s, ids.read_e, ids.read_c, ids.read_i, ids.read_b, ids.out_w, ids.out_b]);
    let mut coords = all_coords(&model, &dec_ids);
    coords.extend(extra_coords(n, std::slice::from_ref(&state)));
    out.push((
        "decoder_step".to_owned(),
        check_block(&model, &[state], &coords, |tape, p, e| {
            let enc = encode_source(tape, p, &ids, &src, &images)?;
            let (s, lp) = decoder_step(tape, p, &ids, &enc, e[0], 6)?;
            let hs = probe(tape, s, 37)?;
            let hl = probe(tape, lp, 38)?;
            Ok(tape.add(hs, hl)?)
        })?,
    ));

    let mut groups: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
    for id in model.store.ids() {
        let g = group(model.store.name(id)).to_owned();
        groups
            .entry(g)
            .or_default()
            .extend(all_coords(&model, &[id]));
    }
    for (g, coords) in groups {
        let picked: Vec<(usize, usize)> = if coords.len() <= per_group {
            coords
        } else {
            sample(&mut rng, coords.len(), per_group)
                .into_iter()
                .map(|i| coords[i])
                .collect()
        };
        let report = check_block(&model, &[], &picked, |tape, p, _| {
            sequence_loss(tape, p, &ids, &src, &tgt, &images)
        })?;
        out.push((format!("sequence_loss/{g}"), report));
    }
    Ok(out)
}
