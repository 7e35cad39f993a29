//! Monte Carlo validation and the statistical tests it relies on.

pub mod montecarlo;
pub mod normal;
pub mod shapiro;

pub use montecarlo::{run_monte_carlo, McConfig, McReport, McSummary, NormalitySample};
pub use normal::{normal_cdf, normal_quantile, qq_series};
pub use shapiro::{shapiro_wilk, shapiro_wilk_test, ShapiroWilk};
