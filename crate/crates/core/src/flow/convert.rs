//! Exact conversions between score, velocity and clean prediction for a
//! Gaussian probability path.

use crate::error::{Error, Result};
use crate::flow::schedule::NoiseSchedule;
use crate::lattice::LatticeField;

/// Probability-flow velocity from a score:
/// `v = (alpha_dot / alpha) x - ((sigma_dot sigma alpha - alpha_dot sigma^2) / alpha) s`.
///
/// `tau` is clamped into `[eps, 1 - eps]` so that `alpha > 0` and `sigma > 0`.
pub fn velocity_from_score(
    x: &LatticeField,
    score: &LatticeField,
    tau: f64,
    sched: &NoiseSchedule,
) -> Result<LatticeField> {
    let p = sched.point(sched.velocity_tau(tau)?);
    let (a, b) = p.velocity_coefficients();
    x.zip_map(score, |xi, si| a * xi + b * si)
}

/// Clean (data-endpoint) prediction
/// `x0 = sigma / (alpha_dot sigma - sigma_dot alpha) v - sigma_dot / (alpha_dot sigma - sigma_dot alpha) x`.
pub fn clean_prediction(
    x: &LatticeField,
    velocity: &LatticeField,
    tau: f64,
    sched: &NoiseSchedule,
) -> Result<LatticeField> {
    let p = sched.point(sched.velocity_tau(tau)?);
    let d = p.cross();
    if d.abs() < 1e-12 {
        return Err(Error::Domain(format!(
            "clean prediction denominator vanishes at tau = {tau}"
        )));
    }
    let cv = p.sigma / d;
    let cx = -p.sigma_dot / d;
    x.zip_map(velocity, |xi, vi| cv * vi + cx * xi)
}

/// Inverse of [`velocity_from_score`], for backends that emit velocities.
pub fn score_from_velocity(
    x: &LatticeField,
    velocity: &LatticeField,
    tau: f64,
    sched: &NoiseSchedule,
) -> Result<LatticeField> {
    let p = sched.point(sched.velocity_tau(tau)?);
    let (a, b) = p.velocity_coefficients();
    if b.abs() < 1e-300 {
        return Err(Error::Domain(format!(
            "score coefficient of the velocity map vanishes at tau = {tau}"
        )));
    }
    x.zip_map(velocity, |xi, vi| (vi - a * xi) / b)
}

/// Scalar `d x0 / d x` with the score held fixed (`1 / alpha` for any path).
pub fn clean_prediction_jacobian(tau: f64, sched: &NoiseSchedule) -> Result<f64> {
    let p = sched.point(sched.velocity_tau(tau)?);
    let d = p.cross();
    if d.abs() < 1e-12 {
        return Err(Error::Domain(format!(
            "clean prediction denominator vanishes at tau = {tau}"
        )));
    }
    Ok(p.sigma / d * p.alpha_dot / p.alpha - p.sigma_dot / d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::schedule::ScheduleKind;
    use crate::lattice::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(rng: &mut ChaCha8Rng, shape: Shape, scale: f64) -> LatticeField {
        LatticeField::from_fn(shape, |_| scale * (2.0 * rng.gen::<f64>() - 1.0))
    }

    /// Gaussian data N(mu, I): conditional expectations by direct Gaussian conditioning.
    fn gaussian_posterior(x: f64, mu: f64, alpha: f64, sigma: f64) -> (f64, f64, f64) {
        let var = alpha * alpha + sigma * sigma;
        let resid = x - alpha * mu;
        let e_x1 = mu + alpha / var * resid;
        let e_eps = sigma / var * resid;
        let score = -resid / var;
        (e_x1, e_eps, score)
    }

    #[test]
    fn velocity_matches_conditional_expectation_for_gaussian_data() {
        let sched = NoiseSchedule::rectified();
        let tau = 0.5;
        let p = sched.point(tau);
        let shape = Shape::new(2, 2, 3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mu = random_field(&mut rng, shape, 2.0);
        let x = random_field(&mut rng, shape, 3.0);
        let mut s = LatticeField::zeros(shape);
        let mut expected = LatticeField::zeros(shape);
        for i in 0..shape.len() {
            let (e_x1, e_eps, score) = gaussian_posterior(x.data()[i], mu.data()[i], p.alpha, p.sigma);
            s.data_mut()[i] = score;
            expected.data_mut()[i] = p.alpha_dot * e_x1 + p.sigma_dot * e_eps;
        }
        let v = velocity_from_score(&x, &s, tau, &sched).unwrap();
        assert!(v.max_abs_diff(&expected) < 1e-9);
    }

    #[test]
    fn zero_inputs_give_zero_velocity() {
        let sched = NoiseSchedule::rectified();
        let z = LatticeField::zeros(Shape::new(1, 2, 2, 1));
        for tau in [0.0, 0.3, 0.999] {
            let v = velocity_from_score(&z, &z, tau, &sched).unwrap();
            assert!(v.data().iter().all(|&e| e == 0.0));
        }
    }

    #[test]
    fn standard_normal_midpoint_has_zero_velocity() {
        // alpha = sigma = 1/2: the marginal is N(0, 1/2), s = -2x and v vanishes.
        let sched = NoiseSchedule::rectified();
        let x = LatticeField::from_fn(Shape::new(1, 1, 5, 1), |i| i as f64 - 2.0);
        let s = x.scaled(-2.0);
        let v = velocity_from_score(&x, &s, 0.5, &sched).unwrap();
        assert!(v.data().iter().all(|e| e.abs() < 1e-15));
    }

    #[test]
    fn clean_prediction_recovers_path_endpoint() {
        let sched = NoiseSchedule::rectified();
        let shape = Shape::new(1, 3, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x1 = random_field(&mut rng, shape, 2.0);
        let eps = random_field(&mut rng, shape, 1.0);
        for tau in [0.2, 0.5, 0.9] {
            let x = x1.zip_map(&eps, |a, e| tau * a + (1.0 - tau) * e).unwrap();
            let v = x1.zip_map(&eps, |a, e| a - e).unwrap();
            let x0 = clean_prediction(&x, &v, tau, &sched).unwrap();
            assert!(x0.max_abs_diff(&x1) < 1e-9);
        }
    }

    #[test]
    fn clean_prediction_with_zero_velocity_is_identity_for_rectified() {
        let sched = NoiseSchedule::rectified();
        let x = LatticeField::from_fn(Shape::new(1, 1, 4, 1), |i| 0.3 * i as f64);
        let v = LatticeField::zeros(x.shape());
        let x0 = clean_prediction(&x, &v, 0.4, &sched).unwrap();
        assert_eq!(x0, x);
    }

    #[test]
    fn clean_prediction_equals_gaussian_posterior_mean() {
        for kind in [ScheduleKind::RectifiedLinear, ScheduleKind::VariancePreserving] {
            let sched = NoiseSchedule::new(kind, 1e-3).unwrap();
            let shape = Shape::new(1, 1, 6, 1);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mu = random_field(&mut rng, shape, 1.5);
            let x = random_field(&mut rng, shape, 2.0);
            for tau in [0.1, 0.5, 0.8] {
                let p = sched.point(tau);
                let mut s = LatticeField::zeros(shape);
                let mut e = LatticeField::zeros(shape);
                for i in 0..shape.len() {
                    let (e_x1, _, score) = gaussian_posterior(x.data()[i], mu.data()[i], p.alpha, p.sigma);
                    s.data_mut()[i] = score;
                    e.data_mut()[i] = e_x1;
                }
                let v = velocity_from_score(&x, &s, tau, &sched).unwrap();
                let x0 = clean_prediction(&x, &v, tau, &sched).unwrap();
                assert!(x0.max_abs_diff(&e) < 1e-9, "{kind:?} tau={tau}");
                // Tweedie form (x + sigma^2 s) / alpha.
                let tweedie = x
                    .zip_map(&s, |xi, si| (xi + p.sigma * p.sigma * si) / p.alpha)
                    .unwrap();
                assert!(x0.max_abs_diff(&tweedie) < 1e-9);
            }
        }
    }

    #[test]
    fn score_velocity_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let shape = Shape::new(2, 2, 2, 2);
        for kind in [ScheduleKind::RectifiedLinear, ScheduleKind::VariancePreserving] {
            let sched = NoiseSchedule::new(kind, 1e-3).unwrap();
            for _ in 0..100 {
                let x = random_field(&mut rng, shape, 3.0);
                let v = random_field(&mut rng, shape, 3.0);
                let tau = rng.gen_range(0.01..0.99);
                let s = score_from_velocity(&x, &v, tau, &sched).unwrap();
                let back = velocity_from_score(&x, &s, tau, &sched).unwrap();
                assert!(back.max_abs_diff(&v) < 1e-12);
            }
        }
    }

    #[test]
    fn score_from_analytic_velocity() {
        let sched = NoiseSchedule::rectified();
        let tau = 0.35;
        let p = sched.point(tau);
        let shape = Shape::new(1, 2, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mu = random_field(&mut rng, shape, 1.0);
        let x = random_field(&mut rng, shape, 2.0);
        let mut v = LatticeField::zeros(shape);
        let mut s_true = LatticeField::zeros(shape);
        for i in 0..shape.len() {
            let (e_x1, e_eps, score) = gaussian_posterior(x.data()[i], mu.data()[i], p.alpha, p.sigma);
            v.data_mut()[i] = p.alpha_dot * e_x1 + p.sigma_dot * e_eps;
            s_true.data_mut()[i] = score;
        }
        let s = score_from_velocity(&x, &v, tau, &sched).unwrap();
        assert!(s.max_abs_diff(&s_true) < 1e-9);
        let z = LatticeField::zeros(shape);
        assert_eq!(score_from_velocity(&z, &z, tau, &sched).unwrap(), z);
    }

    #[test]
    fn out_of_domain_and_shape_errors() {
        let sched = NoiseSchedule::rectified();
        let a = LatticeField::zeros(Shape::new(1, 1, 2, 1));
        let b = LatticeField::zeros(Shape::new(1, 1, 3, 1));
        assert!(matches!(
            velocity_from_score(&a, &b, 0.5, &sched),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            velocity_from_score(&a, &a, -0.1, &sched),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn jacobian_is_inverse_alpha() {
        for kind in [ScheduleKind::RectifiedLinear, ScheduleKind::VariancePreserving] {
            let sched = NoiseSchedule::new(kind, 1e-3).unwrap();
            for tau in [0.1, 0.6, 0.95] {
                let j = clean_prediction_jacobian(tau, &sched).unwrap();
                assert!((j - 1.0 / sched.alpha(tau)).abs() < 1e-12);
            }
        }
    }
}
