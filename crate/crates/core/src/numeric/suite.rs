//! Finite-difference checks for every tape primitive on random small
//! tensors. Each case reduces the primitive's output to a scalar by a dot
//! product with a fixed random probe, so every output coordinate matters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_gradients, GradCheckReport, NumericError, Tape, Tensor, Var};

pub fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches count")
}

/// `Σ out ⊙ probe`, with the probe recorded as a constant.
pub fn probe(tape: &mut Tape, out: Var, seed: u64) -> Result<Var, NumericError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = tape.value(out).len();
    let flat = tape.reshape(out, &[n])?;
    let p = tape.constant(random_tensor(&mut rng, &[n], 1.0));
    tape.dot(flat, p)
}

type Case = (&'static str, Vec<Tensor>, fn(&mut Tape, &[Var]) -> Result<Var, NumericError>);

fn cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut t = |shape: &[usize]| random_tensor(rng, shape, 1.0);
    vec![
        ("matmul", vec![t(&[3, 4]), t(&[4, 2])], |tp, v| {
            let o = tp.matmul(v[0], v[1])?;
            probe(tp, o, 1)
        }),
        ("matvec", vec![t(&[3, 4]), t(&[4])], |tp, v| {
            let o = tp.matvec(v[0], v[1])?;
            probe(tp, o, 2)
        }),
        ("add", vec![t(&[2, 3]), t(&[2, 3])], |tp, v| {
            let o = tp.add(v[0], v[1])?;
            probe(tp, o, 3)
        }),
        ("sub", vec![t(&[4]), t(&[4])], |tp, v| {
            let o = tp.sub(v[0], v[1])?;
            probe(tp, o, 4)
        }),
        ("hadamard", vec![t(&[2, 3]), t(&[2, 3])], |tp, v| {
            let o = tp.mul(v[0], v[1])?;
            probe(tp, o, 5)
        }),
        ("add_bias", vec![t(&[3, 4]), t(&[4])], |tp, v| {
            let o = tp.add_bias(v[0], v[1])?;
            probe(tp, o, 6)
        }),
        ("scale", vec![t(&[5])], |tp, v| {
            let o = tp.scale(v[0], -1.7)?;
            probe(tp, o, 7)
        }),
        ("one_minus", vec![t(&[5])], |tp, v| {
            let o = tp.one_minus(v[0])?;
            probe(tp, o, 8)
        }),
        ("tanh", vec![t(&[2, 4])], |tp, v| {
            let o = tp.tanh(v[0])?;
            probe(tp, o, 9)
        }),
        ("sigmoid", vec![t(&[2, 4])], |tp, v| {
            let o = tp.sigmoid(v[0])?;
            probe(tp, o, 10)
        }),
        ("softmax_vector", vec![t(&[5])], |tp, v| {
            let o = tp.softmax(v[0])?;
            probe(tp, o, 11)
        }),
        ("softmax_rows", vec![t(&[3, 4])], |tp, v| {
            let o = tp.softmax(v[0])?;
            probe(tp, o, 12)
        }),
        ("log_softmax", vec![t(&[2, 5])], |tp, v| {
            let o = tp.log_softmax(v[0])?;
            probe(tp, o, 13)
        }),
        ("concat", vec![t(&[2]), t(&[3])], |tp, v| {
            let o = tp.concat(&[v[0], v[1], v[0]])?;
            probe(tp, o, 14)
        }),
        ("slice", vec![t(&[6])], |tp, v| {
            let o = tp.slice(v[0], 1, 3)?;
            probe(tp, o, 15)
        }),
        ("row", vec![t(&[3, 4])], |tp, v| {
            let o = tp.row(v[0], 2)?;
            probe(tp, o, 16)
        }),
        ("stack_rows", vec![t(&[3]), t(&[3])], |tp, v| {
            let o = tp.stack_rows(&[v[1], v[0], v[1]])?;
            probe(tp, o, 17)
        }),
        ("mean_rows", vec![t(&[4, 3])], |tp, v| {
            let o = tp.mean_rows(v[0])?;
            probe(tp, o, 18)
        }),
        ("transpose", vec![t(&[2, 3])], |tp, v| {
            let o = tp.transpose(v[0])?;
            probe(tp, o, 19)
        }),
        ("reshape", vec![t(&[2, 3])], |tp, v| {
            let o = tp.reshape(v[0], &[3, 2])?;
            probe(tp, o, 20)
        }),
        ("dot", vec![t(&[4]), t(&[4])], |tp, v| tp.dot(v[0], v[1])),
        ("sum", vec![t(&[2, 3])], |tp, v| {
            let sq = tp.mul(v[0], v[0])?;
            tp.sum(sq)
        }),
        ("pick", vec![t(&[5])], |tp, v| {
            let e = tp.tanh(v[0])?;
            tp.pick(e, 3)
        }),
        ("softmax_matmul_chain", vec![t(&[3, 4]), t(&[4, 3])], |tp, v| {
            let m = tp.matmul(v[0], v[1])?;
            let s = tp.softmax(m)?;
            probe(tp, s, 21)
        }),
    ]
}

/// Runs every primitive case; names are stable.
pub fn primitive_checks(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>, NumericError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cases(&mut rng)
        .into_iter()
        .map(|(name, inputs, f)| Ok((name, check_gradients(&inputs, f)?)))
        .collect()
}
