use rand::Rng;
use rand_distr::StandardNormal;

use super::Dataset;
use crate::linalg::{dot, norm, DenseMatrix};
use crate::rng::{self, Purpose};
use crate::{Error, Result};

/// Class centers `separation * u_c`: seeded random unit directions,
/// orthonormalized when the space is wide enough.
fn class_directions(classes: usize, dim: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(classes);
    while dirs.len() < classes {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if dim >= classes {
            for u in &dirs {
                let proj = dot(&v, u);
                for (x, y) in v.iter_mut().zip(u) {
                    *x -= proj * y;
                }
            }
        }
        let n = norm(&v);
        if n < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        dirs.push(v);
    }
    dirs
}

/// Balanced isotropic Gaussian blobs (unit variance), stored class by class.
pub fn generate_blobs(
    classes: usize,
    dim: usize,
    per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 || dim < 2 || per_class < 1 {
        return Err(Error::Dimension(format!(
            "blobs need classes >= 2, dim >= 2, per_class >= 1 (got {classes}, {dim}, {per_class})"
        )));
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(Error::invalid("separation", format!("{separation} must be positive")));
    }
    let mut rng = rng::stream(seed, Purpose::Blobs, 0, 0);
    let dirs = class_directions(classes, dim, &mut rng);
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (c, u) in dirs.iter().enumerate() {
        for _ in 0..per_class {
            for &x in u {
                let z: f64 = rng.sample(StandardNormal);
                data.push(separation * x + z);
            }
            labels.push(c);
        }
    }
    Dataset::new(DenseMatrix::new(n, dim, data)?, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_labels() {
        let ds = generate_blobs(2, 2, 5, 3.0, 0).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.labels(), &[0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
        assert_eq!(ds.dim(), 2);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_blobs(4, 6, 20, 3.0, 42).unwrap();
        let b = generate_blobs(4, 6, 20, 3.0, 42).unwrap();
        let c = generate_blobs(4, 6, 20, 3.0, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn orthonormal_directions_when_wide() {
        let mut rng = rng::stream(1, Purpose::Blobs, 0, 0);
        let dirs = class_directions(5, 8, &mut rng);
        for i in 0..5 {
            for j in 0..5 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot(&dirs[i], &dirs[j]) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn class_means_sit_near_centers() {
        let ds = generate_blobs(3, 4, 2000, 10.0, 3).unwrap();
        for idx in ds.class_indices() {
            let mut m = vec![0.0; 4];
            for &i in &idx {
                for (a, b) in m.iter_mut().zip(ds.sample(i)) {
                    *a += b / idx.len() as f64;
                }
            }
            assert!((norm(&m) - 10.0).abs() < 0.2);
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(generate_blobs(1, 2, 5, 1.0, 0).is_err());
        assert!(generate_blobs(2, 1, 5, 1.0, 0).is_err());
        assert!(generate_blobs(2, 2, 0, 1.0, 0).is_err());
        assert!(generate_blobs(2, 2, 5, 0.0, 0).is_err());
    }
}
