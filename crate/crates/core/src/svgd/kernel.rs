use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lattice::LatticeField;

pub const BANDWIDTH_FLOOR: f64 = 1e-8;

/// Median of the `L(L-1)/2` unordered pairwise Euclidean distances, floored.
/// An even count takes the mean of the two middle values.
pub fn median_bandwidth(particles: &[LatticeField], floor: f64) -> f64 {
    let l = particles.len();
    if l < 2 {
        return floor;
    }
    let mut d = Vec::with_capacity(l * (l - 1) / 2);
    for i in 0..l {
        for j in i + 1..l {
            d.push(sq_dist(&particles[i], &particles[j]).sqrt());
        }
    }
    let m = d.len();
    let (lower, upper, _) = d.select_nth_unstable_by(m / 2, f64::total_cmp);
    let upper = *upper;
    let med = if m % 2 == 1 {
        upper
    } else {
        0.5 * (lower.iter().copied().fold(f64::NEG_INFINITY, f64::max) + upper)
    };
    med.max(floor)
}

fn sq_dist(a: &LatticeField, b: &LatticeField) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `k(a, b) = exp(-|a - b|^2 / h)`.
pub fn rbf(a: &LatticeField, b: &LatticeField, h: f64) -> f64 {
    (-sq_dist(a, b) / h).exp()
}

/// Stein direction for particle `l`:
/// `(1/L) sum_j [k(x_j, x_l) s_j + (2/h)(x_l - x_j) k(x_j, x_l)]`.
/// The second (repulsive) term is dropped when `repulsion` is false.
pub fn svgd_direction(
    l: usize,
    particles: &[LatticeField],
    scores: &[LatticeField],
    h: f64,
    repulsion: bool,
) -> Result<LatticeField> {
    if particles.len() != scores.len() {
        return Err(Error::InvalidArgument(format!(
            "{} particles but {} scores",
            particles.len(),
            scores.len()
        )));
    }
    let xl = &particles[l];
    let mut out = LatticeField::zeros(xl.shape());
    for (j, (xj, sj)) in particles.iter().zip(scores).enumerate() {
        sj.ensure_shape(xl.shape())?;
        if !sj.is_finite() {
            return Err(Error::NonFiniteScore { particle: j });
        }
        let k = rbf(xj, xl, h);
        if k == 0.0 {
            continue;
        }
        let rep = if repulsion { 2.0 / h * k } else { 0.0 };
        for ((o, &s), (&a, &b)) in out.data_mut().iter_mut().zip(sj.data()).zip(xl.data().iter().zip(xj.data())) {
            *o += k * s + rep * (a - b);
        }
    }
    out.scale(1.0 / particles.len() as f64);
    Ok(out)
}

/// All Stein directions at once from one kernel matrix. Runs on the current
/// rayon pool.
///
/// `phi_l = (1/L) [sum_j k_lj s_j + (2/h)(x_l sum_j k_lj - sum_j k_lj x_j)]`.
pub fn svgd_directions(
    particles: &[LatticeField],
    scores: &[LatticeField],
    h: f64,
    repulsion: bool,
) -> Result<Vec<LatticeField>> {
    directions_impl(particles, scores, h, repulsion, rayon::current_num_threads() > 1)
}

pub(crate) fn directions_impl(
    particles: &[LatticeField],
    scores: &[LatticeField],
    h: f64,
    repulsion: bool,
    parallel: bool,
) -> Result<Vec<LatticeField>> {
    let l = particles.len();
    if l != scores.len() {
        return Err(Error::InvalidArgument(format!("{l} particles but {} scores", scores.len())));
    }
    if l == 0 {
        return Ok(Vec::new());
    }
    let shape = particles[0].shape();
    for (j, s) in scores.iter().enumerate() {
        s.ensure_shape(shape)?;
        if !s.is_finite() {
            return Err(Error::NonFiniteScore { particle: j });
        }
    }
    let d = shape.len();
    let c = if repulsion { 2.0 / h } else { 0.0 };
    let inv_h = 1.0 / h;
    let mut xf = Vec::with_capacity(l * d);
    for x in particles {
        xf.extend_from_slice(x.data());
    }
    // Drift terms stored cell-major so each output cell is one dot product.
    let mut gt = vec![0.0; d * l];
    for (j, (x, s)) in particles.iter().zip(scores).enumerate() {
        for (q, (&sv, &xv)) in s.data().iter().zip(x.data()).enumerate() {
            gt[q * l + j] = sv - c * xv;
        }
    }
    // Upper triangle first, then mirror; every entry is computed the same way
    // whichever thread owns the row, so results do not depend on the pool size.
    let mut k = vec![0.0; l * l];
    let fill = |(i, row): (usize, &mut [f64])| {
        let xi = &xf[i * d..(i + 1) * d];
        row[i] = 1.0;
        for j in i + 1..l {
            let xj = &xf[j * d..(j + 1) * d];
            let sq: f64 = xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum();
            row[j] = (-sq * inv_h).exp();
        }
    };
    if parallel {
        k.par_chunks_mut(l).enumerate().for_each(fill);
    } else {
        k.chunks_mut(l).enumerate().for_each(fill);
    }
    for i in 0..l {
        for j in 0..i {
            k[i * l + j] = k[j * l + i];
        }
    }
    let inv_l = 1.0 / l as f64;
    let row_out = |i: usize| {
        let row = &k[i * l..(i + 1) * l];
        let r = c * row.iter().sum::<f64>();
        let x = &xf[i * d..(i + 1) * d];
        LatticeField::from_fn(shape, |q| {
            let g = &gt[q * l..(q + 1) * l];
            let dot: f64 = row.iter().zip(g).map(|(a, b)| a * b).sum();
            inv_l * (dot + r * x[q])
        })
    };
    let out = if parallel {
        (0..l).into_par_iter().map(row_out).collect()
    } else {
        (0..l).map(row_out).collect()
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::Shape;

    fn scalar(v: f64) -> LatticeField {
        LatticeField::filled(Shape::new(1, 1, 1, 1), v)
    }

    #[test]
    fn bandwidth_examples() {
        assert_eq!(median_bandwidth(&[scalar(0.0), scalar(2.5)], BANDWIDTH_FLOOR), 2.5);
        assert_eq!(median_bandwidth(&[scalar(0.0), scalar(1.0), scalar(3.0)], BANDWIDTH_FLOOR), 2.0);
        assert_eq!(median_bandwidth(&vec![scalar(1.0); 4], BANDWIDTH_FLOOR), BANDWIDTH_FLOOR);
        assert_eq!(median_bandwidth(&[scalar(1.0)], BANDWIDTH_FLOOR), BANDWIDTH_FLOOR);
    }

    #[test]
    fn single_particle_follows_score() {
        let x = [scalar(0.4)];
        let s = [scalar(-1.7)];
        let phi = svgd_direction(0, &x, &s, 1.0, true).unwrap();
        assert_eq!(phi.data()[0], -1.7);
    }

    #[test]
    fn two_particle_repulsion_closed_form() {
        let (a, b, h) = (0.0, 1.0, 1.0);
        let x = [scalar(a), scalar(b)];
        let s = [scalar(0.0), scalar(0.0)];
        let phi = svgd_direction(0, &x, &s, h, true).unwrap();
        let k = (-(b - a) * (b - a) / h).exp();
        let want = 0.5 * (2.0 / h) * (a - b) * k;
        assert!((phi.data()[0] - want).abs() < 1e-15);
        assert!(phi.data()[0] < 0.0);
        let none = svgd_direction(0, &x, &s, h, false).unwrap();
        assert_eq!(none.data()[0], 0.0);
    }

    #[test]
    fn no_repulsion_is_kernel_weighted_score() {
        let x = [scalar(0.0), scalar(0.5)];
        let s = [scalar(1.0), scalar(3.0)];
        let phi = svgd_direction(1, &x, &s, 2.0, false).unwrap();
        let k = (-0.25f64 / 2.0).exp();
        assert!((phi.data()[0] - 0.5 * (k * 1.0 + 3.0)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_score_is_flagged() {
        let x = [scalar(0.0), scalar(1.0)];
        let s = [scalar(0.0), scalar(f64::NAN)];
        assert!(matches!(svgd_direction(0, &x, &s, 1.0, true), Err(Error::NonFiniteScore { particle: 1 })));
    }

    #[test]
    fn batched_matches_single() {
        let shape = crate::lattice::Shape::new(1, 2, 2, 1);
        let xs: Vec<_> = (0..7).map(|i| LatticeField::from_fn(shape, |q| ((i * 4 + q) as f64 * 0.77).sin())).collect();
        let ss: Vec<_> = (0..7).map(|i| LatticeField::from_fn(shape, |q| ((i * 3 + q) as f64 * 1.3).cos())).collect();
        let h = median_bandwidth(&xs, BANDWIDTH_FLOOR);
        for rep in [true, false] {
            let all = svgd_directions(&xs, &ss, h, rep).unwrap();
            for l in 0..7 {
                let one = svgd_direction(l, &xs, &ss, h, rep).unwrap();
                assert!(one.max_abs_diff(&all[l]) < 1e-12);
            }
        }
    }
}
