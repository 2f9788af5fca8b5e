//! Dense linear algebra, transforms and the tensor archive format.
//!
//! Every reduction runs in a fixed order so results are bit-reproducible
//! regardless of how callers parallelize around them.

mod archive;
mod hadamard;
mod matrix;
mod rng;
mod spectral;
mod sym_eigen;

pub use archive::{ArchiveIndex, TensorArchive, TensorEntry};
pub use hadamard::{hadamard, hadamard_in_place, pad_pow2};
pub use matrix::{dot, l2_norm_rows, norm, sum_sq, Matrix};
pub use rng::Rng;
pub use spectral::{
    angle_cos_with_norm, matrix_vector_angle_cos, spectral_norm, spectral_norm_with,
    SpectralNorm, DEFAULT_MAX_ITER, DEFAULT_TOL, POWER_ITERATION_SEED,
};
pub use sym_eigen::{sym_eigen, sym_matrix_power, SymEigen};
