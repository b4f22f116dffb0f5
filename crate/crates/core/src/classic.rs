//! Reference implementation of normalized convolution as weighted least
//! squares over an arbitrary basis, plus the classical output-confidence
//! measures.
//!
//! A neighborhood sample vector `f` with confidence `c` is projected onto
//! basis columns `B` localized by a non-negative applicability `a`:
//!
//!   r = (B' Da Dc B)^-1 B' Da Dc f
//!
//! With the naive basis (a single all-ones column) this reduces to
//! normalized averaging, `sum(a*c*f) / sum(a*c)`, which
//! [`normalized_average_map`] applies over a whole 2-D signal. That map is
//! the exact oracle the trainable layer is checked against: it never
//! injects a stabilizing epsilon, it reports undefined pixels in a validity
//! mask instead.

use crate::error::{Error, Result};
use crate::tensor::{PadMode, Tensor};

/// Relative pivot threshold for declaring a Grammian singular.
const SINGULAR_REL_TOL: f64 = 1e-12;

/// Small dense square matrix, row-major. Grammians are tiny (m x m with m
/// the number of basis functions), so a plain Vec-backed matrix with
/// partial-pivot LU is all that is needed.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMat {
    n: usize,
    a: Vec<f64>,
}

impl SquareMat {
    pub fn new(n: usize, data: Vec<f64>) -> Result<SquareMat> {
        if data.len() != n * n {
            return Err(Error::shape(format!(
                "square matrix of order {} needs {} entries, got {}",
                n,
                n * n,
                data.len()
            )));
        }
        Ok(SquareMat { n, a: data })
    }

    pub fn zeros(n: usize) -> SquareMat {
        SquareMat {
            n,
            a: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> SquareMat {
        let mut m = SquareMat::zeros(n);
        for i in 0..n {
            m.a[i * n + i] = 1.0;
        }
        m
    }

    pub fn order(&self) -> usize {
        self.n
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.a[i * self.n + j] = v;
    }

    /// Largest absolute diagonal entry; the scale used for the relative
    /// singularity threshold.
    fn diag_scale(&self) -> f64 {
        let mut s = 0.0f64;
        for i in 0..self.n {
            s = s.max(self.at(i, i).abs());
        }
        if s == 0.0 {
            1.0
        } else {
            s
        }
    }

    /// Partial-pivot LU factorization. Returns the packed factors, the row
    /// permutation, and the determinant. `None` when a pivot falls below
    /// the relative threshold.
    fn lu(&self) -> Option<(Vec<f64>, Vec<usize>, f64)> {
        let n = self.n;
        let mut lu = self.a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut det = 1.0;
        let tol = SINGULAR_REL_TOL * self.diag_scale();
        for k in 0..n {
            let mut p = k;
            let mut best = lu[k * n + k].abs();
            for i in k + 1..n {
                let v = lu[i * n + k].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best < tol {
                return None;
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
                det = -det;
            }
            let pivot = lu[k * n + k];
            det *= pivot;
            for i in k + 1..n {
                let factor = lu[i * n + k] / pivot;
                lu[i * n + k] = factor;
                for j in k + 1..n {
                    lu[i * n + j] -= factor * lu[k * n + j];
                }
            }
        }
        Some((lu, perm, det))
    }

    /// Determinant via LU; 0.0 for a numerically singular matrix.
    pub fn det(&self) -> f64 {
        match self.lu() {
            Some((_, _, det)) => det,
            None => 0.0,
        }
    }

    /// Solve `self * x = rhs` with partial pivoting.
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        if rhs.len() != self.n {
            return Err(Error::shape(format!(
                "rhs length {} for order-{} system",
                rhs.len(),
                self.n
            )));
        }
        let (lu, perm, _) = self.lu().ok_or_else(|| {
            Error::SingularGrammian(format!(
                "pivot below {SINGULAR_REL_TOL} relative to the diagonal scale"
            ))
        })?;
        let n = self.n;
        let mut x: Vec<f64> = perm.iter().map(|&p| rhs[p]).collect();
        for i in 1..n {
            for j in 0..i {
                x[i] -= lu[i * n + j] * x[j];
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                x[i] -= lu[i * n + j] * x[j];
            }
            x[i] /= lu[i * n + i];
        }
        Ok(x)
    }

    /// Inverse via column-by-column solves.
    pub fn inverse(&self) -> Result<SquareMat> {
        let n = self.n;
        let mut out = SquareMat::zeros(n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            let col = self.solve(&e)?;
            e[j] = 0.0;
            for i in 0..n {
                out.set(i, j, col[i]);
            }
        }
        Ok(out)
    }

    /// Spectral norm (largest singular value) by power iteration on
    /// `A' A`: 50 iterations or relative change below 1e-12.
    pub fn spectral_norm(&self) -> f64 {
        let n = self.n;
        if n == 0 {
            return 0.0;
        }
        // Gram matrix A' A so the iteration works for non-symmetric input.
        let mut g = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += self.at(k, i) * self.at(k, j);
                }
                g[i * n + j] = acc;
            }
        }
        // Deterministic start vector with unequal components so it is not
        // orthogonal to the leading eigenvector of a permutation-symmetric G.
        let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.001 * i as f64).collect();
        let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nv = norm(&v);
        for x in &mut v {
            *x /= nv;
        }
        let mut lambda = 0.0;
        for _ in 0..50 {
            let mut w = vec![0.0; n];
            for i in 0..n {
                for j in 0..n {
                    w[i] += g[i * n + j] * v[j];
                }
            }
            let wn = norm(&w);
            if wn < 1e-300 {
                return 0.0;
            }
            let new_lambda = v.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            for (x, y) in v.iter_mut().zip(&w) {
                *x = y / wn;
            }
            if (new_lambda - lambda).abs() <= 1e-12 * new_lambda.abs() {
                lambda = new_lambda;
                break;
            }
            lambda = new_lambda;
        }
        lambda.max(0.0).sqrt()
    }
}

/// Basis functions sampled on the neighborhood, arranged as the columns of
/// an `n x m` matrix.
#[derive(Debug, Clone)]
pub struct Basis {
    /// `n x m`, row-major: `matrix[i, k]` is basis k sampled at point i.
    matrix: Tensor,
    naive: bool,
}

impl Basis {
    /// Build a basis from its sampled columns; rejects linearly dependent
    /// columns (checked through the rank of `B'B`).
    pub fn new(matrix: Tensor) -> Result<Basis> {
        if matrix.rank() != 2 {
            return Err(Error::shape(format!(
                "basis matrix must be rank 2, got {:?}",
                matrix.shape()
            )));
        }
        let (n, m) = (matrix.shape()[0], matrix.shape()[1]);
        if m < 1 || n < m {
            return Err(Error::arg(format!(
                "basis needs n >= m >= 1, got n={n}, m={m}"
            )));
        }
        let mut gram = SquareMat::zeros(m);
        for p in 0..m {
            for q in 0..m {
                let mut acc = 0.0;
                for i in 0..n {
                    acc += matrix.at(&[i, p]) * matrix.at(&[i, q]);
                }
                gram.set(p, q, acc);
            }
        }
        if gram.lu().is_none() {
            return Err(Error::DegenerateBasis(
                "columns are linearly dependent".into(),
            ));
        }
        let naive = m == 1 && matrix.data().iter().all(|&v| v == 1.0);
        Ok(Basis { matrix, naive })
    }

    /// The single all-ones column on `n` sample points.
    pub fn naive(n: usize) -> Basis {
        Basis {
            matrix: Tensor::full(&[n, 1], 1.0),
            naive: true,
        }
    }

    pub fn points(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn columns(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn is_naive(&self) -> bool {
        self.naive
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }
}

/// One neighborhood: samples, their confidences, and the applicability
/// weighting of the basis.
#[derive(Debug, Clone)]
pub struct Neighborhood {
    pub samples: Vec<f64>,
    pub confidence: Vec<f64>,
    pub applicability: Vec<f64>,
}

impl Neighborhood {
    pub fn new(samples: Vec<f64>, confidence: Vec<f64>, applicability: Vec<f64>) -> Result<Self> {
        let n = samples.len();
        if confidence.len() != n || applicability.len() != n {
            return Err(Error::shape(format!(
                "neighborhood vectors disagree: {} samples, {} confidences, {} applicabilities",
                n,
                confidence.len(),
                applicability.len()
            )));
        }
        if confidence.iter().any(|&c| c < 0.0) {
            return Err(Error::arg("confidence must be non-negative"));
        }
        if applicability.iter().any(|&a| a < 0.0) {
            return Err(Error::arg("applicability must be non-negative"));
        }
        Ok(Neighborhood {
            samples,
            confidence,
            applicability,
        })
    }
}

/// The Grammians under partial confidence (`B' Da Dc B`) and full
/// confidence (`B' Da B`), in that order.
pub fn grammians(basis: &Basis, nb: &Neighborhood) -> Result<(SquareMat, SquareMat)> {
    let n = basis.points();
    let m = basis.columns();
    if nb.samples.len() != n {
        return Err(Error::shape(format!(
            "neighborhood has {} points, basis expects {}",
            nb.samples.len(),
            n
        )));
    }
    let b = basis.matrix();
    let mut g = SquareMat::zeros(m);
    let mut g0 = SquareMat::zeros(m);
    for p in 0..m {
        for q in 0..m {
            let mut wc = 0.0;
            let mut wa = 0.0;
            for i in 0..n {
                let bb = b.at(&[i, p]) * b.at(&[i, q]);
                wa += nb.applicability[i] * bb;
                wc += nb.applicability[i] * nb.confidence[i] * bb;
            }
            g.set(p, q, wc);
            g0.set(p, q, wa);
        }
    }
    Ok((g, g0))
}

/// Project one neighborhood onto the basis: the coefficient vector
/// `r = (B' Da Dc B)^-1 B' Da Dc f`.
///
/// Fails with `SingularGrammian` when the confident samples cannot support
/// the basis dimension.
pub fn nc_solve(basis: &Basis, nb: &Neighborhood) -> Result<Vec<f64>> {
    let (g, _) = grammians(basis, nb)?;
    let n = basis.points();
    let m = basis.columns();
    let b = basis.matrix();
    let mut rhs = vec![0.0; m];
    for p in 0..m {
        let mut acc = 0.0;
        for i in 0..n {
            acc += b.at(&[i, p]) * nb.applicability[i] * nb.confidence[i] * nb.samples[i];
        }
        rhs[p] = acc;
    }
    g.solve(&rhs)
}

/// Result of [`normalized_average_map`]: the averaged signal, the raw
/// denominator map `a (*) C`, and a validity mask that is false wherever the
/// denominator is exactly zero (no confident sample reaches the pixel). At
/// invalid pixels `values` holds 0.0 and is meaningless.
#[derive(Debug, Clone)]
pub struct NormalizedMap {
    pub values: Tensor,
    pub denom: Tensor,
    pub valid: Vec<bool>,
}

/// Normalized averaging of a full 2-D signal under a confidence map:
///
///   R[k] = (a (*) (F . C))[k] / (a (*) C)[k]
///
/// using the same sliding-window correlation and zero padding as the
/// trainable layer, so the two are directly comparable pixel by pixel.
/// No epsilon is injected; zero-denominator pixels are flagged instead.
pub fn normalized_average_map(
    signal: &Tensor,
    confidence: &Tensor,
    applicability: &Tensor,
) -> Result<NormalizedMap> {
    if signal.shape() != confidence.shape() {
        return Err(Error::shape(format!(
            "signal {:?} vs confidence {:?}",
            signal.shape(),
            confidence.shape()
        )));
    }
    if applicability.data().iter().any(|&a| a < 0.0) {
        return Err(Error::arg("applicability must be non-negative"));
    }
    let weighted = signal.mul(confidence)?;
    let numer = weighted.correlate2d(applicability, PadMode::Zero)?;
    let denom = confidence.correlate2d(applicability, PadMode::Zero)?;
    let mut values = Tensor::zeros(signal.shape());
    let mut valid = vec![false; signal.len()];
    for (i, ((v, &n), &d)) in values
        .data_mut()
        .iter_mut()
        .zip(numer.data())
        .zip(denom.data())
        .enumerate()
    {
        if d != 0.0 {
            *v = n / d;
            valid[i] = true;
        }
    }
    Ok(NormalizedMap {
        values,
        denom,
        valid,
    })
}

/// Output-confidence measure from the geometric ratio between the partial-
/// and full-confidence Grammians: `(det G / det G0)^(1/m)`.
///
/// For the naive basis this is `sum(a*c) / sum(a)`. A Grammian is positive
/// semidefinite, so a negative determinant ratio can only be roundoff and
/// is clamped to zero.
pub fn confidence_westelius(g: &SquareMat, g0: &SquareMat) -> Result<f64> {
    if g.order() != g0.order() {
        return Err(Error::shape(format!(
            "Grammian orders disagree: {} vs {}",
            g.order(),
            g0.order()
        )));
    }
    let det0 = g0.det();
    if det0 <= 0.0 {
        return Err(Error::DegenerateBasis(format!(
            "full-confidence Grammian determinant {det0} is not positive"
        )));
    }
    let ratio = (g.det() / det0).max(0.0);
    Ok(ratio.powf(1.0 / g.order() as f64))
}

/// Output-confidence measure `1 / (|G^-1|_2 * |G0|_2)` with the spectral
/// norm. Fails with `SingularGrammian` when `G` cannot be inverted.
pub fn confidence_karlholm(g: &SquareMat, g0: &SquareMat) -> Result<f64> {
    if g.order() != g0.order() {
        return Err(Error::shape(format!(
            "Grammian orders disagree: {} vs {}",
            g.order(),
            g0.order()
        )));
    }
    let g_inv = g.inverse()?;
    Ok(1.0 / (g_inv.spectral_norm() * g0.spectral_norm()))
}

/// Sampled 2-D Gaussian applicability, normalized to unit sum.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<Tensor> {
    if size % 2 == 0 || size == 0 {
        return Err(Error::arg(format!("kernel size must be odd, got {size}")));
    }
    if sigma <= 0.0 {
        return Err(Error::arg(format!("sigma must be positive, got {sigma}")));
    }
    let half = (size / 2) as isize;
    let mut data = Vec::with_capacity(size * size);
    for i in -half..=half {
        for j in -half..=half {
            let r2 = (i * i + j * j) as f64;
            data.push((-r2 / (2.0 * sigma * sigma)).exp());
        }
    }
    let total: f64 = data.iter().sum();
    for v in &mut data {
        *v /= total;
    }
    Tensor::from_vec(&[size, size], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line_basis() -> Basis {
        // {1, x} sampled on x = [-1, 0, 1].
        Basis::new(
            Tensor::from_vec(&[3, 2], vec![1.0, -1.0, 1.0, 0.0, 1.0, 1.0]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn naive_solve_is_plain_mean() {
        let basis = Basis::naive(2);
        let nb = Neighborhood::new(vec![3.0, 5.0], vec![1.0, 1.0], vec![1.0, 1.0]).unwrap();
        let r = nc_solve(&basis, &nb).unwrap();
        assert_eq!(r, vec![4.0]);
    }

    #[test]
    fn line_through_two_confident_points() {
        let nb = Neighborhood::new(vec![1.0, 2.0, 99.0], vec![1.0, 1.0, 0.0], vec![1.0; 3]).unwrap();
        let r = nc_solve(&line_basis(), &nb).unwrap();
        assert!((r[0] - 2.0).abs() < 1e-12 && (r[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn collinear_data_recovers_the_line() {
        let nb = Neighborhood::new(vec![1.0, 2.0, 3.0], vec![1.0; 3], vec![1.0; 3]).unwrap();
        let r = nc_solve(&line_basis(), &nb).unwrap();
        assert!((r[0] - 2.0).abs() < 1e-12 && (r[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_confidence_is_singular() {
        let basis = Basis::naive(3);
        let nb = Neighborhood::new(vec![1.0; 3], vec![0.0; 3], vec![1.0; 3]).unwrap();
        match nc_solve(&basis, &nb) {
            Err(Error::SingularGrammian(_)) => {}
            other => panic!("expected SingularGrammian, got {other:?}"),
        }
    }

    #[test]
    fn degenerate_basis_rejected_at_construction() {
        // Two identical columns.
        let m = Tensor::from_vec(&[3, 2], vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]).unwrap();
        match Basis::new(m) {
            Err(Error::DegenerateBasis(_)) => {}
            other => panic!("expected DegenerateBasis, got {other:?}"),
        }
    }

    #[test]
    fn full_confidence_equals_applicability_weighted_least_squares() {
        // Independent 2x2 normal-equation solve by Cramer's rule.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let f: Vec<f64> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let a: Vec<f64> = (0..3).map(|_| rng.gen_range(0.1..2.0)).collect();
            let nb = Neighborhood::new(f.clone(), vec![1.0; 3], a.clone()).unwrap();
            let r = nc_solve(&line_basis(), &nb).unwrap();

            let xs = [-1.0, 0.0, 1.0];
            let (mut s00, mut s01, mut s11, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..3 {
                s00 += a[i];
                s01 += a[i] * xs[i];
                s11 += a[i] * xs[i] * xs[i];
                t0 += a[i] * f[i];
                t1 += a[i] * xs[i] * f[i];
            }
            let det = s00 * s11 - s01 * s01;
            let r0 = (t0 * s11 - t1 * s01) / det;
            let r1 = (s00 * t1 - s01 * t0) / det;
            assert!((r[0] - r0).abs() < 1e-12 && (r[1] - r1).abs() < 1e-12);
        }
    }

    #[test]
    fn solution_invariant_to_confidence_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let f: Vec<f64> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let c: Vec<f64> = (0..3).map(|_| rng.gen_range(0.05..1.0)).collect();
            let a: Vec<f64> = (0..3).map(|_| rng.gen_range(0.1..2.0)).collect();
            let s = rng.gen_range(0.01..100.0);
            let nb = Neighborhood::new(f.clone(), c.clone(), a.clone()).unwrap();
            let scaled =
                Neighborhood::new(f, c.iter().map(|x| x * s).collect(), a).unwrap();
            let r1 = nc_solve(&line_basis(), &nb).unwrap();
            let r2 = nc_solve(&line_basis(), &scaled).unwrap();
            for (x, y) in r1.iter().zip(&r2) {
                assert!((x - y).abs() < 1e-12 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn naive_solution_is_a_convex_combination() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.gen_range(2..8);
            let f: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let c: Vec<f64> = (0..n)
                .map(|_| if rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(0.0..1.0) })
                .collect();
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let live: Vec<f64> = f
                .iter()
                .zip(c.iter().zip(&a))
                .filter(|(_, (&ci, &ai))| ci * ai > 0.0)
                .map(|(&fi, _)| fi)
                .collect();
            if live.is_empty() {
                continue;
            }
            let nb = Neighborhood::new(f, c, a).unwrap();
            match nc_solve(&Basis::naive(n), &nb) {
                Ok(r) => {
                    let lo = live.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = live.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    assert!(r[0] >= lo - 1e-9 && r[0] <= hi + 1e-9);
                }
                Err(Error::SingularGrammian(_)) => {}
                Err(e) => panic!("{e}"),
            }
        }
    }

    #[test]
    fn constant_confidence_reduces_to_plain_filtering() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = Tensor::from_vec(&[6, 6], (0..36).map(|_| rng.gen_range(0.0..5.0)).collect())
            .unwrap();
        let c = Tensor::full(&[6, 6], 1.0);
        let a = Tensor::full(&[3, 3], 1.0 / 9.0);
        let out = normalized_average_map(&f, &c, &a).unwrap();
        // At constant confidence, R = (a*F)/(a*1); away from borders the box
        // correlation of ones is exactly 1 and R equals the box filter.
        let boxed = f.correlate2d(&a, PadMode::Zero).unwrap();
        for i in 1..5 {
            for j in 1..5 {
                assert!((out.values.at(&[i, j]) - boxed.at(&[i, j])).abs() < 1e-12);
            }
        }
        assert!(out.valid.iter().all(|&v| v));
    }

    #[test]
    fn single_confident_pixel_replicates_its_value() {
        let mut f = Tensor::zeros(&[5, 5]);
        f.set(&[2, 2], 7.5);
        let mut c = Tensor::zeros(&[5, 5]);
        c.set(&[2, 2], 1.0);
        let a = gaussian_kernel(3, 1.0).unwrap();
        let out = normalized_average_map(&f, &c, &a).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let idx = i * 5 + j;
                if out.valid[idx] {
                    assert!((out.values.at(&[i, j]) - 7.5).abs() < 1e-12);
                    assert!(out.denom.at(&[i, j]) > 0.0);
                } else {
                    assert_eq!(out.denom.at(&[i, j]), 0.0);
                }
            }
        }
        // The kernel support around the sample must be valid.
        assert!(out.valid[2 * 5 + 2] && out.valid[1 * 5 + 2] && out.valid[2 * 5 + 3]);
        // Far corner is out of reach of a 3x3 kernel.
        assert!(!out.valid[0]);
    }

    #[test]
    fn map_matches_per_window_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = Tensor::from_vec(&[8, 8], (0..64).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .unwrap();
        let c = Tensor::from_vec(
            &[8, 8],
            (0..64).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        let a = gaussian_kernel(3, 0.8).unwrap();
        let out = normalized_average_map(&f, &c, &a).unwrap();
        for i in 0..8isize {
            for j in 0..8isize {
                // Gather the 3x3 window with zero padding.
                let mut fs = Vec::new();
                let mut cs = Vec::new();
                let mut asv = Vec::new();
                for m in -1..=1isize {
                    for n in -1..=1isize {
                        let (y, x) = (i + m, j + n);
                        let inside = y >= 0 && y < 8 && x >= 0 && x < 8;
                        fs.push(if inside { f.at(&[y as usize, x as usize]) } else { 0.0 });
                        cs.push(if inside { c.at(&[y as usize, x as usize]) } else { 0.0 });
                        asv.push(a.at(&[(m + 1) as usize, (n + 1) as usize]));
                    }
                }
                let nb = Neighborhood::new(fs, cs, asv).unwrap();
                let idx = (i * 8 + j) as usize;
                match nc_solve(&Basis::naive(9), &nb) {
                    Ok(r) => {
                        assert!(out.valid[idx]);
                        assert!(
                            (r[0] - out.values.at(&[i as usize, j as usize])).abs() < 1e-12
                        );
                    }
                    Err(Error::SingularGrammian(_)) => assert!(!out.valid[idx]),
                    Err(e) => panic!("{e}"),
                }
            }
        }
    }

    #[test]
    fn westelius_naive_examples() {
        // Full confidence: G == G0.
        let basis = Basis::naive(3);
        let nb = Neighborhood::new(vec![0.0; 3], vec![1.0; 3], vec![1.0, 2.0, 1.0]).unwrap();
        let (g, g0) = grammians(&basis, &nb).unwrap();
        assert!((confidence_westelius(&g, &g0).unwrap() - 1.0).abs() < 1e-15);

        let nb = Neighborhood::new(vec![0.0; 3], vec![1.0, 0.0, 1.0], vec![1.0, 2.0, 1.0]).unwrap();
        let (g, g0) = grammians(&basis, &nb).unwrap();
        assert!((confidence_westelius(&g, &g0).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn westelius_line_basis_partial_confidence() {
        // a = 1, c = [1,1,0] on the {1,x} basis gives G = [[2,-1],[-1,1]],
        // G0 = [[3,0],[0,2]]; the expected value follows from the 2x2
        // determinants: det G = 2*1 - (-1)*(-1) = 1, det G0 = 6.
        let nb = Neighborhood::new(vec![0.0; 3], vec![1.0, 1.0, 0.0], vec![1.0; 3]).unwrap();
        let (g, g0) = grammians(&line_basis(), &nb).unwrap();
        assert_eq!(g.at(0, 0), 2.0);
        assert_eq!(g.at(0, 1), -1.0);
        assert_eq!(g.at(1, 1), 1.0);
        let expected = (1.0f64 / 6.0).sqrt();
        assert!((confidence_westelius(&g, &g0).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.40825).abs() < 1e-5);
    }

    #[test]
    fn westelius_bounded_for_bounded_confidence() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let n = rng.gen_range(2..9);
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..2.0)).collect();
            let c: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            if a.iter().sum::<f64>() == 0.0 {
                continue;
            }
            let nb = Neighborhood::new(vec![0.0; n], c, a).unwrap();
            let (g, g0) = grammians(&Basis::naive(n), &nb).unwrap();
            let w = confidence_westelius(&g, &g0).unwrap();
            assert!((0.0..=1.0 + 1e-12).contains(&w));
        }
    }

    #[test]
    fn westelius_rejects_nonpositive_full_grammian() {
        let g = SquareMat::identity(2);
        let g0 = SquareMat::zeros(2);
        match confidence_westelius(&g, &g0) {
            Err(Error::DegenerateBasis(_)) => {}
            other => panic!("expected DegenerateBasis, got {other:?}"),
        }
    }

    #[test]
    fn karlholm_scalar_and_identity_cases() {
        let g = SquareMat::new(1, vec![2.0]).unwrap();
        let g0 = SquareMat::new(1, vec![4.0]).unwrap();
        assert!((confidence_karlholm(&g, &g0).unwrap() - 0.5).abs() < 1e-12);

        let id = SquareMat::identity(3);
        assert!((confidence_karlholm(&id, &id).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn karlholm_matches_closed_form_singular_values() {
        // G = [[2,-1],[-1,1]] so G^-1 = [[1,1],[1,2]] (det G = 1). For a
        // symmetric 2x2 the largest eigenvalue is
        // ((a+d) + sqrt((a-d)^2 + 4 b^2)) / 2, giving |G^-1|_2 = (3+sqrt5)/2
        // and |G0|_2 = 3 for G0 = diag(3,2).
        let g = SquareMat::new(2, vec![2.0, -1.0, -1.0, 1.0]).unwrap();
        let g0 = SquareMat::new(2, vec![3.0, 0.0, 0.0, 2.0]).unwrap();
        let ginv_norm = (3.0 + 5.0f64.sqrt()) / 2.0;
        let expected = 1.0 / (ginv_norm * 3.0);
        assert!((confidence_karlholm(&g, &g0).unwrap() - expected).abs() < 1e-10);
    }

    #[test]
    fn karlholm_singular_grammian_is_reported() {
        let g = SquareMat::zeros(2);
        let g0 = SquareMat::identity(2);
        match confidence_karlholm(&g, &g0) {
            Err(Error::SingularGrammian(_)) => {}
            other => panic!("expected SingularGrammian, got {other:?}"),
        }
    }

    #[test]
    fn spectral_norm_matches_closed_form_on_random_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let (a, b, d) = (
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            );
            let m = SquareMat::new(2, vec![a, b, b, d]).unwrap();
            let lam1 = ((a + d) + ((a - d).powi(2) + 4.0 * b * b).sqrt()) / 2.0;
            let lam2 = ((a + d) - ((a - d).powi(2) + 4.0 * b * b).sqrt()) / 2.0;
            let expected = lam1.abs().max(lam2.abs());
            assert!(
                (m.spectral_norm() - expected).abs() < 1e-9 * expected.max(1.0),
                "{} vs {}",
                m.spectral_norm(),
                expected
            );
        }
    }
}
