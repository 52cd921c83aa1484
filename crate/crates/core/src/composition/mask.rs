use serde::{Deserialize, Serialize};

use std::ops::Range;

use crate::composition::refine::{smooth_mask, Smoothing};
use crate::error::{Error, Result};
use crate::lattice::{LatticeField, Shape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Fg,
    Sim,
    Context,
    Custom,
}

/// Half-open index box over `(h, w, n)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellBox {
    pub h: [usize; 2],
    pub w: [usize; 2],
    pub n: [usize; 2],
}

/// Per-cell weights in `[0, 1]`, broadcast over channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    kind: MaskKind,
    shape: Shape,
    values: Vec<f64>,
}

impl Mask {
    pub fn filled(kind: MaskKind, shape: Shape, value: f64) -> Self {
        Self {
            kind,
            shape: shape.cell_shape(),
            values: vec![value.clamp(0.0, 1.0); shape.cells()],
        }
    }

    pub fn ones(kind: MaskKind, shape: Shape) -> Self {
        Self::filled(kind, shape, 1.0)
    }

    pub fn zeros(kind: MaskKind, shape: Shape) -> Self {
        Self::filled(kind, shape, 0.0)
    }

    pub fn from_values(kind: MaskKind, shape: Shape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.cells() {
            return Err(Error::LengthMismatch {
                shape: shape.cell_shape(),
                expected: shape.cells(),
                found: values.len(),
            });
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("mask value {bad} outside [0, 1]")));
        }
        Ok(Self {
            kind,
            shape: shape.cell_shape(),
            values,
        })
    }

    /// Ones inside any of `boxes`, zeros elsewhere.
    pub fn from_boxes(kind: MaskKind, shape: Shape, boxes: &[CellBox]) -> Result<Self> {
        let mut m = Self::zeros(kind, shape);
        for b in boxes {
            if b.h[1] > shape.h || b.w[1] > shape.w || b.n[1] > shape.n {
                return Err(Error::InvalidArgument(format!(
                    "mask box {b:?} exceeds lattice {shape}"
                )));
            }
            for h in b.h[0]..b.h[1] {
                for w in b.w[0]..b.w[1] {
                    for n in b.n[0]..b.n[1] {
                        m.values[shape.cell_index(h, w, n)] = 1.0;
                    }
                }
            }
        }
        Ok(m)
    }

    /// Frames `range` set to `value`, other cells untouched.
    pub fn set_frames(&mut self, frames: std::ops::Range<usize>, value: f64) {
        let s = self.shape;
        for h in 0..s.h {
            for w in 0..s.w {
                for n in frames.clone() {
                    self.values[s.cell_index(h, w, n)] = value;
                }
            }
        }
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn with_kind(mut self, kind: MaskKind) -> Self {
        self.kind = kind;
        self
    }

    /// Cell shape (`C = 1`).
    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn is_all(&self, value: f64) -> bool {
        self.values.iter().all(|&v| v == value)
    }

    /// Checks that the mask covers the cells of `shape`.
    pub fn ensure_fits(&self, shape: Shape) -> Result<()> {
        if self.shape != shape.cell_shape() {
            return Err(Error::ShapeMismatch {
                expected: shape.cell_shape(),
                found: self.shape,
            });
        }
        Ok(())
    }

    /// `M ⊙ x`, broadcasting over channels.
    pub fn apply(&self, x: &LatticeField) -> Result<LatticeField> {
        self.ensure_fits(x.shape())?;
        let c = x.shape().c;
        Ok(LatticeField::from_fn(x.shape(), |i| self.values[i / c] * x.data()[i]))
    }

    /// `1 - M`.
    pub fn complement(&self, kind: MaskKind) -> Self {
        Self {
            kind,
            shape: self.shape,
            values: self.values.iter().map(|v| 1.0 - v).collect(),
        }
    }

    /// `(1 - fg) ⊙ (1 - sim)`.
    pub fn context_from(fg: &Mask, sim: &Mask) -> Result<Self> {
        if fg.shape != sim.shape {
            return Err(Error::ShapeMismatch {
                expected: fg.shape,
                found: sim.shape,
            });
        }
        Ok(Self {
            kind: MaskKind::Context,
            shape: fg.shape,
            values: fg
                .values
                .iter()
                .zip(&sim.values)
                .map(|(f, s)| (1.0 - f) * (1.0 - s))
                .collect(),
        })
    }
}

/// The working masks of one composite target: configured foreground prior,
/// the refined raw foreground, the smoothed effective masks and the derived
/// context mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    fg_prior: Mask,
    fg_raw: Mask,
    fg: Mask,
    sim: Mask,
    context: Mask,
    smoothing: Option<Smoothing>,
    pinned: Option<Range<usize>>,
}

impl MaskSet {
    /// `sim` is smoothed once here; `fg` is re-smoothed after every refinement.
    pub fn new(fg: Mask, sim: Mask, smoothing: Option<Smoothing>) -> Result<Self> {
        if fg.shape != sim.shape {
            return Err(Error::ShapeMismatch {
                expected: fg.shape,
                found: sim.shape,
            });
        }
        let sim = match smoothing {
            Some(sm) => smooth_mask(&sim, sm.radius, sm.sigma),
            None => sim,
        }
        .with_kind(MaskKind::Sim);
        let fg = fg.with_kind(MaskKind::Fg);
        let mut out = Self {
            fg_prior: fg.clone(),
            fg_raw: fg.clone(),
            fg: fg.clone(),
            context: Mask::context_from(&fg, &sim)?,
            sim,
            smoothing,
            pinned: None,
        };
        out.recompute();
        Ok(out)
    }

    /// Foreground everywhere, no sim region, empty context.
    pub fn full_foreground(shape: Shape) -> Self {
        Self::new(Mask::ones(MaskKind::Fg, shape), Mask::zeros(MaskKind::Sim, shape), None)
            .expect("matching shapes")
    }

    /// Pure context: `M_context = 1` everywhere.
    pub fn full_context(shape: Shape) -> Self {
        Self::new(Mask::zeros(MaskKind::Fg, shape), Mask::zeros(MaskKind::Sim, shape), None)
            .expect("matching shapes")
    }

    /// Forces `fg = sim = 0` (hence `context = 1`) on `frames`, now and after
    /// every refinement.
    pub fn with_pinned_frames(mut self, frames: Range<usize>) -> Result<Self> {
        if frames.end > self.fg.shape.n {
            return Err(Error::InvalidArgument(format!(
                "pinned frames {frames:?} exceed {} frames",
                self.fg.shape.n
            )));
        }
        self.sim.set_frames(frames.clone(), 0.0);
        self.pinned = Some(frames);
        self.recompute();
        Ok(self)
    }

    fn recompute(&mut self) {
        self.fg = match self.smoothing {
            Some(sm) => smooth_mask(&self.fg_raw, sm.radius, sm.sigma),
            None => self.fg_raw.clone(),
        };
        if let Some(p) = &self.pinned {
            self.fg.set_frames(p.clone(), 0.0);
        }
        self.context = Mask::context_from(&self.fg, &self.sim).expect("matching shapes");
    }

    pub fn shape(&self) -> Shape {
        self.fg.shape
    }

    pub fn fg_prior(&self) -> &Mask {
        &self.fg_prior
    }

    pub fn fg_raw(&self) -> &Mask {
        &self.fg_raw
    }

    /// Effective (smoothed, pinned) foreground mask.
    pub fn fg(&self) -> &Mask {
        &self.fg
    }

    pub fn sim(&self) -> &Mask {
        &self.sim
    }

    pub fn context(&self) -> &Mask {
        &self.context
    }

    pub fn pinned(&self) -> Option<&Range<usize>> {
        self.pinned.as_ref()
    }

    /// Replaces the raw foreground and re-derives the effective masks.
    pub fn set_fg_raw(&mut self, values: Vec<f64>) -> Result<()> {
        self.fg_raw = Mask::from_values(MaskKind::Fg, self.fg.shape, values)?;
        self.recompute();
        Ok(())
    }

    /// Verifies `context = (1 - fg)(1 - sim)` elementwise within `tol`.
    pub fn check_identity(&self, tol: f64) -> Result<()> {
        for i in 0..self.context.values.len() {
            let want = (1.0 - self.fg.values[i]) * (1.0 - self.sim.values[i]);
            if (self.context.values[i] - want).abs() > tol {
                return Err(Error::InvalidArgument(format!(
                    "context mask identity broken at cell {i}: {} vs {want}",
                    self.context.values[i]
                )));
            }
        }
        Ok(())
    }
}
