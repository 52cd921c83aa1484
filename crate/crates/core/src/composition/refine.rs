//! Mask smoothing and the threshold rule that grows the foreground mask.

use serde::{Deserialize, Serialize};

use crate::composition::mask::{Mask, MaskSet};
use crate::error::{Error, Result};
use crate::lattice::{LatticeField, Shape};

/// Dilation radius and blur width, both in cells.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Smoothing {
    #[serde(default = "default_radius")]
    pub radius: usize,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
}

fn default_radius() -> usize {
    1
}

fn default_sigma() -> f64 {
    0.5
}

impl Default for Smoothing {
    fn default() -> Self {
        Self {
            radius: default_radius(),
            sigma: default_sigma(),
        }
    }
}

/// When and how masks are refined during sampling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineConfig {
    /// Refine after every `every` annealing steps.
    #[serde(default = "default_every")]
    pub every: usize,
    /// Absolute threshold; `None` means half the per-cell RMS of the reference.
    #[serde(default)]
    pub threshold: Option<f64>,
    /// Fraction of the gap to the configured mask closed per refinement.
    #[serde(default = "default_decay")]
    pub decay: f64,
}

fn default_every() -> usize {
    5
}

fn default_decay() -> f64 {
    0.5
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            every: default_every(),
            threshold: None,
            decay: default_decay(),
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.every == 0 {
            return Err(Error::Config("refine.every must be positive".into()));
        }
        if let Some(th) = self.threshold {
            if th.is_nan() || th < 0.0 {
                return Err(Error::Config(format!("refine.threshold {th} must be >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.decay) {
            return Err(Error::Config(format!("refine.decay {} outside [0, 1]", self.decay)));
        }
        Ok(())
    }

    /// Threshold actually used against reference `z0`.
    pub fn resolve_threshold(&self, z0: &LatticeField) -> f64 {
        self.threshold
            .unwrap_or_else(|| 0.5 * (z0.data().iter().map(|v| v * v).sum::<f64>() / z0.len() as f64).sqrt())
    }
}

/// Grey dilation (max over the `(2r+1)^3` cube) followed by a separable Gaussian
/// blur with edge replication. Cells already at their input value never
/// decrease, so the blur cannot erode the original mask.
pub fn smooth_mask(m: &Mask, dilation_radius: usize, blur_sigma: f64) -> Mask {
    let s = m.shape();
    let mut vals = m.values().to_vec();
    if dilation_radius > 0 {
        vals = dilate(&vals, s, dilation_radius);
    }
    if blur_sigma > 0.0 {
        let kernel = gaussian_kernel(blur_sigma);
        for axis in 0..3 {
            vals = blur_axis(&vals, s, axis, &kernel);
        }
    }
    let out: Vec<f64> = vals
        .iter()
        .zip(m.values())
        .map(|(v, orig)| v.max(*orig).clamp(0.0, 1.0))
        .collect();
    Mask::from_values(m.kind(), s, out).expect("smoothing preserves shape and range")
}

fn dilate(vals: &[f64], s: Shape, r: usize) -> Vec<f64> {
    let r = r as isize;
    let mut out = vec![0.0; vals.len()];
    for h in 0..s.h {
        for w in 0..s.w {
            for n in 0..s.n {
                let mut best = 0.0f64;
                for dh in -r..=r {
                    for dw in -r..=r {
                        for dn in -r..=r {
                            let (hh, ww, nn) = (h as isize + dh, w as isize + dw, n as isize + dn);
                            if hh < 0 || ww < 0 || nn < 0 || hh >= s.h as isize || ww >= s.w as isize || nn >= s.n as isize {
                                continue;
                            }
                            best = best.max(vals[s.cell_index(hh as usize, ww as usize, nn as usize)]);
                        }
                    }
                }
                out[s.cell_index(h, w, n)] = best;
            }
        }
    }
    out
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

fn blur_axis(vals: &[f64], s: Shape, axis: usize, kernel: &[f64]) -> Vec<f64> {
    let len = [s.h, s.w, s.n][axis];
    let r = (kernel.len() / 2) as isize;
    let mut out = vec![0.0; vals.len()];
    for h in 0..s.h {
        for w in 0..s.w {
            for n in 0..s.n {
                let pos = [h, w, n];
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let off = (pos[axis] as isize + k as isize - r).clamp(0, len as isize - 1) as usize;
                    let mut p = pos;
                    p[axis] = off;
                    acc += kv * vals[s.cell_index(p[0], p[1], p[2])];
                }
                out[s.cell_index(h, w, n)] = acc;
            }
        }
    }
    out
}

/// One refinement of the raw foreground mask: cells outside `sim` whose clean
/// prediction misses the reference by more than `threshold` (max over
/// channels) become foreground; all other cells move a `decay` fraction back
/// toward the configured foreground. The context mask is then recomputed.
pub fn refine_masks(
    x0_hat: &LatticeField,
    z0: &LatticeField,
    masks: &mut MaskSet,
    threshold: f64,
    decay: f64,
) -> Result<()> {
    x0_hat.ensure_same_shape(z0)?;
    masks.fg_prior().ensure_fits(z0.shape())?;
    if threshold.is_nan() || threshold < 0.0 {
        return Err(Error::InvalidArgument(format!("threshold {threshold} must be >= 0")));
    }
    let c = z0.shape().c;
    let cells = z0.shape().cells();
    let mut raw = masks.fg_raw().values().to_vec();
    let prior = masks.fg_prior().values();
    let sim = masks.sim().values();
    for cell in 0..cells {
        let dev = (0..c)
            .map(|k| (x0_hat.data()[cell * c + k] - z0.data()[cell * c + k]).abs())
            .fold(0.0, f64::max);
        raw[cell] = if dev > threshold && sim[cell] < 0.5 {
            1.0
        } else {
            raw[cell] + decay * (prior[cell] - raw[cell])
        };
    }
    masks.set_fg_raw(raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composition::MaskKind;

    #[test]
    fn identity_parameters() {
        let s = Shape::new(3, 3, 4, 1);
        let m = Mask::from_values(MaskKind::Fg, s, (0..s.cells()).map(|i| (i % 5) as f64 / 4.0).collect()).unwrap();
        assert_eq!(smooth_mask(&m, 0, 0.0), m);
    }

    #[test]
    fn single_cell_dilation_is_a_cube() {
        let s = Shape::new(5, 5, 5, 1);
        let mut m = Mask::zeros(MaskKind::Fg, s);
        m.values_mut()[s.cell_index(2, 2, 2)] = 1.0;
        let d = smooth_mask(&m, 1, 0.0);
        let mut count = 0;
        for h in 0..5 {
            for w in 0..5 {
                for n in 0..5 {
                    let inside = (1..=3).contains(&h) && (1..=3).contains(&w) && (1..=3).contains(&n);
                    let v = d.values()[s.cell_index(h, w, n)];
                    assert_eq!(v, if inside { 1.0 } else { 0.0 });
                    count += inside as usize;
                }
            }
        }
        assert_eq!(count, 27);
    }

    #[test]
    fn ones_are_a_fixed_point() {
        let s = Shape::new(2, 3, 4, 1);
        let m = Mask::ones(MaskKind::Sim, s);
        assert!(smooth_mask(&m, 2, 1.3).is_all(1.0));
        let z = Mask::zeros(MaskKind::Sim, s);
        assert!(smooth_mask(&z, 2, 1.3).is_all(0.0));
    }

    #[test]
    fn blur_spreads_but_stays_in_range() {
        let s = Shape::new(1, 1, 9, 1);
        let mut m = Mask::zeros(MaskKind::Fg, s);
        m.values_mut()[4] = 1.0;
        let b = smooth_mask(&m, 0, 1.0);
        assert_eq!(b.values()[4], 1.0);
        assert!(b.values()[3] > 0.0 && b.values()[3] < 1.0);
        assert!((b.values()[3] - b.values()[5]).abs() < 1e-15);
    }

    fn set(shape: Shape) -> MaskSet {
        MaskSet::new(Mask::zeros(MaskKind::Fg, shape), Mask::zeros(MaskKind::Sim, shape), None).unwrap()
    }

    #[test]
    fn deviation_turns_cell_into_foreground() {
        let s = Shape::new(2, 2, 2, 1);
        let z0 = LatticeField::zeros(s);
        let mut x0 = z0.clone();
        x0.data_mut()[3] = 10.0 * 0.2;
        let mut ms = set(s);
        refine_masks(&x0, &z0, &mut ms, 0.2, 0.5).unwrap();
        assert_eq!(ms.fg().values()[3], 1.0);
        assert_eq!(ms.context().values()[3], 0.0);
        assert_eq!(ms.fg().values().iter().filter(|v| **v > 0.0).count(), 1);
    }

    #[test]
    fn exact_match_only_decays() {
        let s = Shape::new(2, 2, 2, 1);
        let z0 = LatticeField::filled(s, 1.0);
        let mut ms = set(s);
        ms.set_fg_raw(vec![1.0; s.cells()]).unwrap();
        refine_masks(&z0, &z0, &mut ms, 0.1, 0.5).unwrap();
        assert!(ms.fg_raw().values().iter().all(|v| (*v - 0.5).abs() < 1e-15));
        ms.check_identity(1e-12).unwrap();
    }

    #[test]
    fn infinite_threshold_never_adds() {
        let s = Shape::new(1, 2, 2, 1);
        let z0 = LatticeField::zeros(s);
        let x0 = LatticeField::filled(s, 1e6);
        let mut ms = set(s);
        refine_masks(&x0, &z0, &mut ms, f64::INFINITY, 0.5).unwrap();
        assert!(ms.fg().is_all(0.0));
    }

    #[test]
    fn sim_cells_are_not_claimed() {
        let s = Shape::new(1, 1, 2, 1);
        let sim = Mask::from_values(MaskKind::Sim, s, vec![1.0, 0.0]).unwrap();
        let mut ms = MaskSet::new(Mask::zeros(MaskKind::Fg, s), sim, None).unwrap();
        let z0 = LatticeField::zeros(s);
        let x0 = LatticeField::filled(s, 5.0);
        refine_masks(&x0, &z0, &mut ms, 1.0, 0.5).unwrap();
        assert_eq!(ms.fg().values(), &[0.0, 1.0]);
        assert_eq!(ms.context().values(), &[0.0, 0.0]);
    }

    #[test]
    fn default_threshold_is_half_rms() {
        let s = Shape::new(1, 1, 2, 1);
        let z0 = LatticeField::from_vec(s, vec![3.0, 4.0]).unwrap();
        let th = RefineConfig::default().resolve_threshold(&z0);
        assert!((th - 0.5 * (12.5f64).sqrt()).abs() < 1e-15);
    }
}
