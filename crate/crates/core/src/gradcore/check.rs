use rand::Rng;

use crate::error::{Error, Result};

use super::tape::{Tape, Var};
use super::tensor::DenseTensor;

/// Floor on the denominator of the relative error, so coordinates whose true
/// derivative is ~0 are judged on absolute error instead.
const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter, flat index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Draws `count` `(parameter, flat index)` coordinates uniformly.
pub fn sample_coords<R: Rng>(params: &[DenseTensor], count: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let total: usize = params.iter().map(DenseTensor::len).sum();
    assert!(total > 0, "no parameters to sample");
    (0..count)
        .map(|_| {
            let mut flat = rng.random_range(0..total);
            let mut which = 0;
            while flat >= params[which].len() {
                flat -= params[which].len();
                which += 1;
            }
            (which, flat)
        })
        .collect()
}

/// Compares `analytic` against central differences
/// `(f(θ+h) − f(θ−h)) / 2h` on the listed coordinates.
pub fn compare_gradients<F>(
    params: &[DenseTensor],
    analytic: &[DenseTensor],
    coords: &[(usize, usize)],
    h: f64,
    mut value: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&[DenseTensor]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    if analytic.len() != params.len() {
        return Err(Error::ShapeMismatch(
            "one analytic gradient per parameter required".into(),
        ));
    }
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for &(which, idx) in coords {
        let orig = work[which].data()[idx];
        work[which].data_mut()[idx] = orig + h;
        let plus = value(&work)?;
        work[which].data_mut()[idx] = orig - h;
        let minus = value(&work)?;
        work[which].data_mut()[idx] = orig;

        let numeric = (plus - minus) / (2.0 * h);
        let exact = analytic[which].data()[idx];
        let err = (numeric - exact).abs() / exact.abs().max(numeric.abs()).max(REL_FLOOR);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            if err >= report.max_rel_error {
                report.worst = Some((which, idx));
            }
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Checks the tape gradient of the scalar built by `build` against central
/// differences. `build` receives one leaf per parameter.
pub fn grad_check<F>(params: &[DenseTensor], coords: &[(usize, usize)], h: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = params
        .iter()
        .map(|p| tape.leaf(p.clone(), true))
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<DenseTensor> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| DenseTensor::zeros(p.shape().to_vec()))
        })
        .collect();

    compare_gradients(params, &analytic, coords, h, |ps| {
        let mut tape = Tape::new();
        let vars = ps
            .iter()
            .map(|p| tape.leaf(p.clone(), false))
            .collect::<Result<Vec<_>>>()?;
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    })
}
