//! Dense real linear algebra and the small set of statistics the scorers need.

mod eigen;
mod matrix;
mod stats;

pub use eigen::{sym_eigenvalues, Spectrum, JACOBI_MAX_SWEEPS, PSD_CLAMP_TOL};
pub use matrix::{gram_class_space, gram_smaller_side, DenseMatrix};
pub use stats::{average_ranks, cosine, dot, mean, median, median_mad, norm, pearson, spearman, std_dev};
