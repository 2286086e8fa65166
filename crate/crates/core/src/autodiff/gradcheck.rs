use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, TensorError, Var};

/// Which coordinates a finite-difference sweep visits.
#[derive(Clone, Copy, Debug)]
pub enum CoordinateSelection {
    All,
    /// Up to `per_tensor` distinct random coordinates from each input.
    Sample {
        per_tensor: usize,
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Input tensor and flat coordinate where the worst error occurred.
    pub worst: (usize, usize),
    pub checked: usize,
    /// Coordinates left out because a step of `eps` crossed a ReLU kink.
    pub skipped: usize,
}

/// Gradient check of a scalar function of one tensor over all coordinates.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, TensorError>,
{
    let report = grad_check_many(
        |g, vars| f(g, vars[0]),
        std::slice::from_ref(point),
        eps,
        CoordinateSelection::All,
    )?;
    Ok(report.max_rel_error)
}

/// Compares reverse-mode gradients with central differences.
///
/// The error at a coordinate is `|analytic - fd| / max(1, |analytic|)`.
/// A coordinate whose `+eps` or `-eps` evaluation switches any ReLU on or
/// off lies within `eps` of a point where the function is not
/// differentiable, so the central difference there does not estimate the
/// derivative. Such coordinates are counted in `skipped`; when sampling,
/// another coordinate of the same tensor takes their place.
pub fn grad_check_many<F>(
    f: F,
    points: &[Tensor],
    eps: f64,
    selection: CoordinateSelection,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(TensorError::InvalidArgument {
            op: "grad_check",
            reason: format!("eps must lie in (0, 1e-2], got {eps}"),
        });
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.leaf(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let value = g.value(out).item().ok_or_else(|| TensorError::NotScalar {
        shape: g.shape(out).to_vec(),
    })?;
    if !value.is_finite() {
        return Err(TensorError::NonFinite {
            coordinate: 0,
            value,
        });
    }
    let signature = g.activation_signature();
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(points)
        .map(|(&v, p)| {
            g.grad(v)
                .map(Tensor::into_data)
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect();
    drop(g);

    let mut rng = match selection {
        CoordinateSelection::Sample { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        CoordinateSelection::All => None,
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
        skipped: 0,
    };
    for (t, point) in points.iter().enumerate() {
        let n = point.numel();
        let (order, wanted): (Vec<usize>, usize) = match (selection, rng.as_mut()) {
            (CoordinateSelection::Sample { per_tensor, .. }, Some(rng)) => {
                (rand::seq::index::sample(rng, n, n).into_vec(), per_tensor)
            }
            _ => ((0..n).collect(), n),
        };
        let mut checked = 0;
        for coord in order {
            if checked == wanted {
                break;
            }
            let (plus, sig_plus) = evaluate(&f, points, t, coord, eps)?;
            let (minus, sig_minus) = evaluate(&f, points, t, coord, -eps)?;
            if sig_plus != signature || sig_minus != signature {
                report.skipped += 1;
                continue;
            }
            let fd = (plus - minus) / (2.0 * eps);
            let a = analytic[t][coord];
            let err = (a - fd).abs() / a.abs().max(1.0);
            checked += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                report.worst = (t, coord);
            }
        }
        report.checked += checked;
    }
    Ok(report)
}

/// Value and activation signature of `f` with coordinate `coord` of input
/// `which` moved by `delta`.
fn evaluate<F>(
    f: &F,
    points: &[Tensor],
    which: usize,
    coord: usize,
    delta: f64,
) -> Result<(f64, u64), TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut p = p.clone();
            if i == which {
                p.data_mut()[coord] += delta;
            }
            g.constant(p)
        })
        .collect();
    let out = f(&mut g, &vars)?;
    let value = g.value(out).item().ok_or_else(|| TensorError::NotScalar {
        shape: g.shape(out).to_vec(),
    })?;
    if value.is_finite() {
        Ok((value, g.activation_signature()))
    } else {
        Err(TensorError::NonFinite {
            coordinate: coord,
            value,
        })
    }
}

/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` for coordinate `coord` of
/// input `which`.
pub fn central_difference<F>(
    f: &F,
    points: &[Tensor],
    which: usize,
    coord: usize,
    eps: f64,
) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    let (plus, _) = evaluate(f, points, which, coord, eps)?;
    let (minus, _) = evaluate(f, points, which, coord, -eps)?;
    Ok((plus - minus) / (2.0 * eps))
}

/// Random tensor with entries uniform in `[-scale, scale]`.
pub(crate) fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..=scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}
