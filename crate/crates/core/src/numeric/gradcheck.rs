use super::{NumericError, Tape, Tensor, Var};

/// Outcome of comparing tape gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// (input index, flat coordinate, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps near-zero gradients
/// from turning round-off into huge relative errors.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-4);
    (analytic - numeric).abs() / denom
}

fn evaluate<F, E>(inputs: &[Tensor], f: &F) -> Result<f64, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<NumericError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if value.len() != 1 {
        return Err(NumericError::NotScalar {
            shape: value.shape().to_vec(),
        }
        .into());
    }
    Ok(value.item())
}

/// `(f(x + h e_k) - f(x - h e_k)) / 2h` for coordinate `k` of input `i`.
pub fn central_difference<F, E>(
    inputs: &[Tensor],
    input: usize,
    coord: usize,
    h: f64,
    f: &F,
) -> Result<f64, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<NumericError>,
{
    let mut shifted = inputs.to_vec();
    let x = inputs[input].data()[coord];
    shifted[input].data_mut()[coord] = x + h;
    let plus = evaluate(&shifted, f)?;
    shifted[input].data_mut()[coord] = x - h;
    let minus = evaluate(&shifted, f)?;
    Ok((plus - minus) / (2.0 * h))
}

/// Checks every coordinate of every input.
pub fn check_gradients<F, E>(inputs: &[Tensor], f: F) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<NumericError>,
{
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |k| (i, k)))
        .collect();
    check_gradients_at(inputs, &coords, f)
}

/// Checks only the listed `(input, coordinate)` pairs, with h = 1e-5.
pub fn check_gradients_at<F, E>(
    inputs: &[Tensor],
    coords: &[(usize, usize)],
    f: F,
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<NumericError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for &(i, k) in coords {
        let analytic = grads.wrt(vars[i]).map_or(0.0, |g| g.data()[k]);
        let numeric = central_difference(inputs, i, k, 1e-5, &f)?;
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((i, k, analytic, numeric));
        }
    }
    Ok(report)
}
