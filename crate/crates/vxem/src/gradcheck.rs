//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Result, VxError};
use crate::rng::seeded_rng;
use crate::tensor::ParamSet;

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the gradients already stored on `params` against central finite
/// differences of `forward`, perturbing every scalar parameter by ±eps.
/// Returns the maximum relative error (denominator max(|a|,|b|,1e-8)).
pub fn grad_check<F>(forward: F, params: &mut ParamSet, eps: f64) -> Result<f64>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut worst = 0.0f64;
    for name in names {
        let n = params.get(&name).unwrap().numel();
        let err = check_coords(&forward, params, eps, &name, &(0..n).collect::<Vec<_>>())?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// As [`grad_check`], but probing at most `coords_per_tensor` randomly chosen
/// coordinates of each parameter. Networks with hundreds of thousands of
/// scalars make the exhaustive sweep unaffordable; a seeded sample keeps the
/// check cheap without losing coverage across layers.
pub fn grad_check_sampled<F>(
    forward: F,
    params: &mut ParamSet,
    eps: f64,
    coords_per_tensor: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    let mut rng = seeded_rng(seed ^ 0x6772616463686b); // "gradchk"
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut worst = 0.0f64;
    for name in names {
        let n = params.get(&name).unwrap().numel();
        let coords: Vec<usize> = if n <= coords_per_tensor {
            (0..n).collect()
        } else {
            let mut idx = sample(&mut rng, n, coords_per_tensor).into_vec();
            idx.sort_unstable();
            idx
        };
        let err = check_coords(&forward, params, eps, &name, &coords)?;
        worst = worst.max(err);
    }
    let _ = rng.random::<u64>();
    Ok(worst)
}

fn check_coords<F>(
    forward: &F,
    params: &mut ParamSet,
    eps: f64,
    name: &str,
    coords: &[usize],
) -> Result<f64>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    let analytic: Vec<f64> = {
        let t = params
            .get(name)
            .ok_or_else(|| VxError::UnknownParameter(name.to_string()))?;
        let g = t
            .grad()
            .ok_or_else(|| VxError::MissingGradient(name.to_string()))?;
        coords.iter().map(|&c| g[c]).collect()
    };
    let mut worst = 0.0f64;
    for (&c, &a) in coords.iter().zip(&analytic) {
        let orig = params.get(name).unwrap().data()[c];
        params.get_mut(name).unwrap().data_mut()[c] = orig + eps;
        let f_plus = forward(params)?;
        params.get_mut(name).unwrap().data_mut()[c] = orig - eps;
        let f_minus = forward(params)?;
        params.get_mut(name).unwrap().data_mut()[c] = orig;
        let numeric = (f_plus - f_minus) / (2.0 * eps);
        worst = worst.max(relative_error(a, numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::tensor::Tensor;

    fn quadratic_params() -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::new(vec![3], vec![0.5, -1.25, 2.0]).unwrap())
            .unwrap();
        ps
    }

    fn quadratic_loss(ps: &ParamSet) -> crate::error::Result<f64> {
        let mut g = Graph::new();
        let w = g.param(ps, "w")?;
        let sq = g.mul(w, w)?;
        let loss = g.sum_all(sq);
        Ok(g.value(loss))
    }

    #[test]
    fn quadratic_loss_checks_below_1e7() {
        let mut ps = quadratic_params();
        let mut g = Graph::new();
        let w = g.param(&ps, "w").unwrap();
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum_all(sq);
        g.backward_into(loss, &mut ps).unwrap();

        let err = grad_check(quadratic_loss, &mut ps, 1e-5).unwrap();
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn constant_loss_has_vanishing_gradients() {
        let mut ps = quadratic_params();
        let mut g = Graph::new();
        let w = g.param(&ps, "w").unwrap();
        let zero = g.scale(w, 0.0);
        let loss = g.sum_all(zero);
        g.backward_into(loss, &mut ps).unwrap();

        assert!(ps.get("w").unwrap().grad().unwrap().iter().all(|&v| v == 0.0));
        let err = grad_check(
            |ps| {
                let mut g = Graph::new();
                let w = g.param(ps, "w")?;
                let zero = g.scale(w, 0.0);
                let loss = g.sum_all(zero);
                Ok(g.value(loss))
            },
            &mut ps,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "relative error {err}");
    }

    #[test]
    fn missing_gradient_is_reported() {
        let mut ps = quadratic_params();
        let err = grad_check(quadratic_loss, &mut ps, 1e-5);
        assert!(matches!(err, Err(VxError::MissingGradient(_))));
    }
}
