//! Central finite-difference utilities.  The models are validated by
//! comparing analytic gradients against these estimates at f64 precision.

use crate::param::ParamSet;

/// Central difference of a scalar function of the parameters with respect to
/// flat parameter index `flat`, using step `h`.  The parameter set is
/// restored to its original value afterwards.
pub fn central_difference<F>(params: &mut ParamSet, flat: usize, h: f64, mut f: F) -> f64
where
    F: FnMut(&ParamSet) -> f64,
{
    let original = params.get_flat(flat);
    params.set_flat(flat, original + h);
    let plus = f(params);
    params.set_flat(flat, original - h);
    let minus = f(params);
    params.set_flat(flat, original);
    (plus - minus) / (2.0 * h)
}

/// Relative error with an absolute floor: `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Arr;
    use ndarray::IxDyn;

    #[test]
    fn central_difference_recovers_polynomial_slopes() {
        let mut p = ParamSet::new();
        p.register("x", Arr::from_shape_vec(IxDyn(&[2]), vec![2.0, -1.0]).unwrap());
        // f = x0^3 + 4 x1, df/dx0 = 3 x0^2 = 12, df/dx1 = 4.
        let f = |p: &ParamSet| {
            let x0 = p.get_flat(0);
            let x1 = p.get_flat(1);
            x0.powi(3) + 4.0 * x1
        };
        let d0 = central_difference(&mut p, 0, 1e-5, f);
        let d1 = central_difference(&mut p, 1, 1e-5, f);
        assert!(relative_error(d0, 12.0) < 1e-8);
        assert!(relative_error(d1, 4.0) < 1e-8);
        assert_eq!(p.get_flat(0), 2.0);
    }

    #[test]
    fn relative_error_uses_absolute_floor_near_zero() {
        assert!(relative_error(0.0, 0.0) == 0.0);
        assert!(relative_error(1e-9, 0.0) < 1e-2);
    }
}
