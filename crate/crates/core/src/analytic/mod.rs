//! Closed-form Gaussian-mixture experts and exact product oracles.

mod gmm;
mod oracle;

pub use gmm::{gmm_marginal_score, GmmComponent, GmmExpert};
pub use oracle::{grid_brute_density, product_oracle_moments, DensityTable, GridSpec, ProductOracle};
