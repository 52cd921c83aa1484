//! Exact reference quantities for products of analytic experts.

use crate::analytic::gmm::{log_sum_exp, GmmExpert};
use crate::composition::Mask;
use crate::error::{Error, Result};
use crate::flow::NoiseSchedule;
use crate::lattice::{LatticeField, Shape};

/// Moments of a product of isotropic Gaussian experts.
#[derive(Clone, Debug, PartialEq)]
pub struct ProductOracle {
    pub mean: LatticeField,
    pub var: f64,
}

impl ProductOracle {
    /// Log-density of `N(mean, var I)` at `x`.
    pub fn log_density(&self, x: &LatticeField) -> Result<f64> {
        let d = x.len() as f64;
        x.ensure_same_shape(&self.mean)?;
        let sq = x.sq_dist(&self.mean);
        Ok(-0.5 * sq / self.var - 0.5 * d * (2.0 * std::f64::consts::PI * self.var).ln())
    }
}

/// Precision-weighted mean and variance of `prod_i N(mu_i, v_i I)`.
pub fn product_oracle_moments(experts: &[&GmmExpert]) -> Result<ProductOracle> {
    let first = experts
        .first()
        .ok_or_else(|| Error::UnsupportedOracle("product of zero experts".into()))?;
    let shape = first.shape();
    let mut precision = 0.0;
    let mut weighted = LatticeField::zeros(shape);
    for e in experts {
        if !e.is_single_gaussian() {
            return Err(Error::UnsupportedOracle(format!(
                "expert '{}' is not a single unrestricted Gaussian",
                crate::expert::ScoreModel::name(*e)
            )));
        }
        let c = &e.components()[0];
        c.mean.ensure_shape(shape)?;
        precision += 1.0 / c.var;
        weighted.axpy(1.0 / c.var, &c.mean)?;
    }
    let var = 1.0 / precision;
    Ok(ProductOracle {
        mean: weighted.scaled(var),
        var,
    })
}

/// Axis-aligned grid used on every lattice coordinate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
    /// Path time at which expert marginals are evaluated (1 = clean data).
    pub tau: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            lo: -6.0,
            hi: 6.0,
            points: 121,
            tau: 1.0,
        }
    }
}

impl GridSpec {
    pub fn axis(&self) -> Vec<f64> {
        let n = self.points;
        (0..n)
            .map(|i| self.lo + (self.hi - self.lo) * i as f64 / (n - 1) as f64)
            .collect()
    }

    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / (self.points - 1) as f64
    }
}

/// Normalized product density tabulated on a tensor grid.
#[derive(Clone, Debug)]
pub struct DensityTable {
    dims: usize,
    spec: GridSpec,
    axis: Vec<f64>,
    /// Normalized density values, first coordinate slowest.
    values: Vec<f64>,
    log_norm: f64,
}

impl DensityTable {
    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn axis(&self) -> &[f64] {
        &self.axis
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn coords(&self, mut flat: usize) -> Vec<usize> {
        let n = self.axis.len();
        let mut idx = vec![0; self.dims];
        for d in (0..self.dims).rev() {
            idx[d] = flat % n;
            flat /= n;
        }
        idx
    }

    fn trapezoid_weight(&self, idx: &[usize]) -> f64 {
        let n = self.axis.len();
        let h = self.spec.spacing();
        idx.iter()
            .map(|&i| if i == 0 || i == n - 1 { 0.5 * h } else { h })
            .product()
    }

    /// Trapezoid-rule integral of the table.
    pub fn integral(&self) -> f64 {
        (0..self.values.len())
            .map(|i| self.values[i] * self.trapezoid_weight(&self.coords(i)))
            .sum()
    }

    /// Grid point with the largest density.
    pub fn argmax(&self) -> Vec<f64> {
        let (best, _) = self
            .values
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        self.coords(best).into_iter().map(|i| self.axis[i]).collect()
    }

    /// Density-weighted mean of each coordinate.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dims];
        for i in 0..self.values.len() {
            let idx = self.coords(i);
            let w = self.values[i] * self.trapezoid_weight(&idx);
            for d in 0..self.dims {
                m[d] += w * self.axis[idx[d]];
            }
        }
        m
    }

    /// Normalized log-density of the nearest grid cell; points outside the
    /// grid snap to the boundary.
    pub fn log_density_at(&self, point: &[f64]) -> Result<f64> {
        if point.len() != self.dims {
            return Err(Error::InvalidArgument(format!(
                "point has {} coordinates, table has {}",
                point.len(),
                self.dims
            )));
        }
        let n = self.axis.len();
        let h = self.spec.spacing();
        let mut flat = 0;
        for &p in point {
            let i = ((p - self.spec.lo) / h).round().clamp(0.0, (n - 1) as f64) as usize;
            flat = flat * n + i;
        }
        Ok(self.values[flat].ln())
    }

    /// Log normalizer subtracted from the raw log-product.
    pub fn log_norm(&self) -> f64 {
        self.log_norm
    }
}

/// Brute-force masked product density on a grid over a lattice of at most
/// three scalars. Each expert enters as `p_i(x)` raised per cell to its mask.
pub fn grid_brute_density(
    experts: &[(&GmmExpert, Option<&Mask>)],
    shape: Shape,
    spec: GridSpec,
    sched: &NoiseSchedule,
) -> Result<DensityTable> {
    let dims = shape.len();
    if dims == 0 || dims > 3 {
        return Err(Error::UnsupportedOracle(format!(
            "grid oracle needs 1..=3 lattice scalars, got {dims}"
        )));
    }
    if spec.points < 2 || !(spec.hi > spec.lo) {
        return Err(Error::InvalidArgument("grid needs >= 2 points and hi > lo".into()));
    }
    for (e, _) in experts {
        if e.shape() != shape {
            return Err(Error::ShapeMismatch {
                expected: shape,
                found: e.shape(),
            });
        }
    }
    let axis = spec.axis();
    let n = axis.len();
    let total = n.pow(dims as u32);
    let mut logs = Vec::with_capacity(total);
    let mut x = LatticeField::zeros(shape);
    for flat in 0..total {
        let mut rem = flat;
        for d in (0..dims).rev() {
            x.data_mut()[d] = axis[rem % n];
            rem /= n;
        }
        let mut acc = 0.0;
        for (e, m) in experts {
            acc += e.log_density(&x, spec.tau, sched, *m)?;
        }
        logs.push(acc);
    }
    let mut table = DensityTable {
        dims,
        spec,
        axis,
        values: vec![0.0; total],
        log_norm: 0.0,
    };
    let weighted: Vec<f64> = (0..total)
        .map(|i| logs[i] + table.trapezoid_weight(&table.coords(i)).ln())
        .collect();
    let log_norm = log_sum_exp(&weighted);
    table.values = logs.iter().map(|l| (l - log_norm).exp()).collect();
    table.log_norm = log_norm;
    Ok(table)
}
