//! Image quality metrics: Fréchet distance over embedded features, PSNR and SSIM.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::Graph;
use crate::nn::{Activation, ConvGeom};
use crate::rng;
use crate::Tensor;

/// Mean and unbiased covariance of a feature sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub n: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Statistics of the rows of an `n × D` feature matrix.
pub fn gaussian_stats(features: &DMatrix<f64>) -> Result<GaussianStats> {
    let n = features.nrows();
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 samples for a covariance, got {n}")));
    }
    let mu = features.row_mean().transpose();
    let mut centered = features.clone();
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let s = centered.transpose() * &centered / (n - 1) as f64;
    let sigma = (&s + s.transpose()) * 0.5;
    Ok(GaussianStats { mu, sigma, n })
}

/// Same as [`gaussian_stats`] for features given as rows.
pub fn gaussian_stats_rows(rows: &[Vec<f64>]) -> Result<GaussianStats> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::invalid("feature rows have different lengths"));
    }
    gaussian_stats(&DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
}

/// Principal square root of a symmetric positive semi-definite matrix.
///
/// Eigenvalues slightly below zero from rounding are clamped; anything below
/// `-1e-6·‖A‖` is rejected.
pub fn matrix_sqrt_psd(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::ShapeMismatch { op: "matrix_sqrt_psd", left: vec![a.nrows()], right: vec![a.ncols()] });
    }
    let scale = a.norm();
    let asym = (a - a.transpose()).norm();
    if asym > 1e-8 * scale.max(1.0) {
        return Err(Error::invalid(format!("matrix is not symmetric (asymmetry {asym:.3e})")));
    }
    let eig = SymmetricEigen::new((a + a.transpose()) * 0.5);
    let min = eig.eigenvalues.min();
    if min < -1e-6 * scale {
        return Err(Error::invalid(format!("matrix is not positive semi-definite (eigenvalue {min:.3e})")));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    let b = v * DMatrix::from_diagonal(&roots) * v.transpose();
    Ok((&b + b.transpose()) * 0.5)
}

fn trace_cross(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    let rx = matrix_sqrt_psd(x)?;
    let m = &rx * y * &rx;
    Ok(matrix_sqrt_psd(&((&m + m.transpose()) * 0.5))?.trace())
}

/// Fréchet distance `‖μx−μy‖² + Tr Σx + Tr Σy − 2·Tr (Σx^½ Σy Σx^½)^½`.
///
/// The cross term is averaged over both argument orders, so swapping the
/// arguments gives a bit-identical result.
pub fn fid(x: &GaussianStats, y: &GaussianStats) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::ShapeMismatch { op: "fid", left: vec![x.dim()], right: vec![y.dim()] });
    }
    let mean_term: f64 = x.mu.iter().zip(y.mu.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    let cross = trace_cross(&x.sigma, &y.sigma)? + trace_cross(&y.sigma, &x.sigma)?;
    let d = mean_term + (x.sigma.trace() + y.sigma.trace()) - cross;
    Ok(d.max(0.0))
}

fn same_shape(op: &'static str, x: &Tensor, y: &Tensor) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch { op, left: x.shape().to_vec(), right: y.shape().to_vec() });
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB; identical inputs give `+∞`.
pub fn psnr(x: &Tensor, y: &Tensor, max_val: f64) -> Result<f64> {
    same_shape("psnr", x, y)?;
    if max_val <= 0.0 {
        return Err(Error::invalid("max_val must be positive"));
    }
    let mse = x.values().iter().zip(y.values()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0; SSIM_WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - c;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Separable valid-mode Gaussian filter of one `h × w` plane.
fn blur_valid(p: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = taps.iter().enumerate().map(|(k, t)| t * p[i * w + j + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = taps.iter().enumerate().map(|(k, t)| t * rows[(i + k) * ow + j]).sum();
        }
    }
    out
}

fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize, c1: f64, c2: f64, taps: &[f64; SSIM_WINDOW]) -> f64 {
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mx = blur_valid(x, h, w, taps);
    let my = blur_valid(y, h, w, taps);
    let mxx = blur_valid(&prod(x, x), h, w, taps);
    let myy = blur_valid(&prod(y, y), h, w, taps);
    let mxy = blur_valid(&prod(x, y), h, w, taps);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    total / mx.len() as f64
}

/// Mean structural similarity with an 11×11 Gaussian window (σ = 1.5), valid
/// windows only, averaged over every channel plane of the input.
pub fn ssim(x: &Tensor, y: &Tensor, max_val: f64) -> Result<f64> {
    same_shape("ssim", x, y)?;
    if max_val <= 0.0 {
        return Err(Error::invalid("max_val must be positive"));
    }
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(Error::InvalidShape { shape: shape.to_vec(), reason: "ssim needs spatial dimensions".into() });
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidShape { shape: shape.to_vec(), reason: format!("image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window") });
    }
    let c1 = (0.01 * max_val).powi(2);
    let c2 = (0.03 * max_val).powi(2);
    let taps = gaussian_taps();
    let plane = h * w;
    let planes = x.len() / plane;
    let total: f64 = (0..planes)
        .map(|p| {
            let r = p * plane..(p + 1) * plane;
            ssim_plane(&x.values()[r.clone()], &y.values()[r], h, w, c1, c2, &taps)
        })
        .sum();
    Ok(total / planes as f64)
}

fn normal(r: &mut rng::Rng) -> f64 {
    StandardNormal.sample(r)
}

pub const EMBED_DIM: usize = 64;
const EMBED_HIDDEN: usize = 32;
const EMBED_CHUNK: usize = 64;

/// Frozen random feature extractor standing in for a pretrained classifier:
/// two strided 4×4 convolutions with ReLU, then a global average pool.
#[derive(Clone, Debug)]
pub struct Embedding {
    input: [usize; 3],
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl Embedding {
    pub fn new(input: [usize; 3], seed: u64) -> Result<Self> {
        if input[1] < 4 || input[2] < 4 {
            return Err(Error::InvalidShape { shape: input.to_vec(), reason: "embedding needs at least 4x4 images".into() });
        }
        let he = |name: &str, shape: [usize; 4]| {
            let mut r = rng::stream(seed, name);
            let std = (2.0 / (shape[1] * shape[2] * shape[3]) as f64).sqrt();
            Tensor::from_fn(&shape, |_| std * normal(&mut r))
        };
        let small = |name: &str, n: usize| {
            let mut r = rng::stream(seed, name);
            Tensor::from_fn(&[n], |_| 0.1 * normal(&mut r))
        };
        Ok(Embedding {
            input,
            w1: he("embed.conv1.weight", [EMBED_HIDDEN, input[0], 4, 4])?,
            b1: small("embed.conv1.bias", EMBED_HIDDEN)?,
            w2: he("embed.conv2.weight", [EMBED_DIM, EMBED_HIDDEN, 4, 4])?,
            b2: small("embed.conv2.bias", EMBED_DIM)?,
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    /// One `EMBED_DIM` row per image of an `(n, c, h, w)` batch.
    pub fn embed(&self, images: &Tensor) -> Result<DMatrix<f64>> {
        let (n, c, h, w) = images.dims4()?;
        if [c, h, w] != self.input {
            return Err(Error::ShapeMismatch { op: "embed", left: images.shape().to_vec(), right: self.input.to_vec() });
        }
        let geom = ConvGeom::new(2, 1, 1);
        let mut out = DMatrix::zeros(n, EMBED_DIM);
        for start in (0..n).step_by(EMBED_CHUNK) {
            let count = EMBED_CHUNK.min(n - start);
            let mut g = Graph::new();
            let x = g.constant(&images.slice_batch(start, count)?);
            let (w1, b1, w2, b2) = (g.constant(&self.w1), g.constant(&self.b1), g.constant(&self.w2), g.constant(&self.b2));
            let h1 = g.conv2d(x, w1, Some(b1), geom)?;
            let h1 = g.activation(h1, Activation::Relu)?;
            let h2 = g.conv2d(h1, w2, Some(b2), geom)?;
            let h2 = g.activation(h2, Activation::Relu)?;
            let shape = g.shape(h2)?.to_vec();
            let area = shape[2] * shape[3];
            let vals = g.value(h2)?;
            for i in 0..count {
                for d in 0..EMBED_DIM {
                    let off = (i * EMBED_DIM + d) * area;
                    out[(start + i, d)] = vals[off..off + area].iter().sum::<f64>() / area as f64;
                }
            }
        }
        Ok(out)
    }

    /// Gaussian statistics of the embedded batch.
    pub fn stats(&self, images: &Tensor) -> Result<GaussianStats> {
        gaussian_stats(&self.embed(images)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng as _, SeedableRng};

    fn random_psd(d: usize, seed: u64) -> DMatrix<f64> {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let m = DMatrix::from_fn(d + 2, d, |_, _| r.random_range(-1.0..1.0));
        m.transpose() * m
    }

    fn stats(mu: &[f64], sigma: DMatrix<f64>) -> GaussianStats {
        GaussianStats { mu: DVector::from_row_slice(mu), sigma, n: 100 }
    }

    #[test]
    fn two_point_covariance() {
        let s = gaussian_stats(&DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 2.0, 0.0])).unwrap();
        assert_eq!(s.mu.as_slice(), &[1.0, 0.0]);
        assert_eq!(s.sigma, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]));
        let same = gaussian_stats(&DMatrix::from_element(4, 3, 1.5)).unwrap();
        assert!(same.sigma.iter().all(|&v| v == 0.0));
        assert!(gaussian_stats(&DMatrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn sqrt_of_diagonal_and_reconstruction() {
        let b = matrix_sqrt_psd(&DMatrix::from_diagonal(&DVector::from_row_slice(&[4.0, 9.0]))).unwrap();
        assert!((b - DMatrix::from_diagonal(&DVector::from_row_slice(&[2.0, 3.0]))).norm() < 1e-14);
        let id = DMatrix::<f64>::identity(3, 3);
        assert!((matrix_sqrt_psd(&id).unwrap() - &id).norm() < 1e-14);
        let a = random_psd(5, 1);
        let r = matrix_sqrt_psd(&a).unwrap();
        assert!((&r * &r - &a).norm() / a.norm() < 1e-8);
    }

    #[test]
    fn rejects_indefinite() {
        let a = DMatrix::from_diagonal(&DVector::from_row_slice(&[1.0, -1.0]));
        assert!(matrix_sqrt_psd(&a).is_err());
        assert!(matrix_sqrt_psd(&DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0])).is_err());
    }

    #[test]
    fn fid_closed_forms() {
        let a = random_psd(4, 2);
        let x = stats(&[0.1, 0.2, 0.3, 0.4], a);
        assert!(fid(&x, &x).unwrap() <= 1e-8);
        let id = DMatrix::identity(2, 2);
        let d = fid(&stats(&[1.0, 2.0], id.clone()), &stats(&[0.0, 0.0], id)).unwrap();
        assert!((d - 5.0).abs() < 1e-12);
        let diag = |v: &[f64]| DMatrix::from_diagonal(&DVector::from_row_slice(v));
        let d = fid(&stats(&[0.0, 0.0], diag(&[4.0, 1.0])), &stats(&[0.0, 0.0], diag(&[1.0, 1.0]))).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fid_is_exactly_symmetric() {
        let x = stats(&[0.0, 1.0, 2.0], random_psd(3, 3));
        let y = stats(&[1.0, -1.0, 0.5], random_psd(3, 4));
        assert_eq!(fid(&x, &y).unwrap().to_bits(), fid(&y, &x).unwrap().to_bits());
        assert!(fid(&x, &stats(&[0.0], DMatrix::identity(1, 1))).is_err());
    }

    #[test]
    fn psnr_cases() {
        let x = Tensor::full(&[1, 4, 4], 0.25).unwrap();
        let y = Tensor::full(&[1, 4, 4], 0.75).unwrap();
        assert!((psnr(&x, &y, 1.0).unwrap() - 10.0 * 4f64.log10()).abs() < 1e-12);
        assert_eq!(psnr(&x, &x, 1.0).unwrap(), f64::INFINITY);
        assert!(psnr(&x, &Tensor::zeros(&[16]).unwrap(), 1.0).is_err());
    }

    #[test]
    fn ssim_cases() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_fn(&[2, 3, 16, 16], |_| r.random_range(0.0..1.0)).unwrap();
        let y = Tensor::from_fn(&[2, 3, 16, 16], |_| r.random_range(0.0..1.0)).unwrap();
        assert!((ssim(&x, &x, 1.0).unwrap() - 1.0).abs() <= 1e-12);
        assert_eq!(ssim(&x, &y, 1.0).unwrap(), ssim(&y, &x, 1.0).unwrap());
        let zero = Tensor::zeros(&[1, 12, 12]).unwrap();
        let one = Tensor::ones(&[1, 12, 12]).unwrap();
        let c1: f64 = 1e-4;
        assert!((ssim(&zero, &one, 1.0).unwrap() - c1 / (1.0 + c1)).abs() < 1e-12);
        assert!(ssim(&Tensor::zeros(&[1, 10, 12]).unwrap(), &Tensor::zeros(&[1, 10, 12]).unwrap(), 1.0).is_err());
    }

    #[test]
    fn ssim_matches_brute_force_window() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let (h, w) = (13, 12);
        let x: Vec<f64> = (0..h * w).map(|_| r.random_range(0.0..1.0)).collect();
        let y: Vec<f64> = (0..h * w).map(|_| r.random_range(0.0..1.0)).collect();
        let g: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
        let norm: f64 = g.iter().flat_map(|a| g.iter().map(move |b| a * b)).sum();
        let (c1, c2) = (1e-4, 9e-4);
        let mut total = 0.0;
        for i in 0..h - 10 {
            for j in 0..w - 10 {
                let (mut ux, mut uy, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for a in 0..11 {
                    for b in 0..11 {
                        let k = g[a] * g[b] / norm;
                        let (p, q) = (x[(i + a) * w + j + b], y[(i + a) * w + j + b]);
                        ux += k * p;
                        uy += k * q;
                        xx += k * p * p;
                        yy += k * q * q;
                        xy += k * p * q;
                    }
                }
                let (vx, vy, cxy) = (xx - ux * ux, yy - uy * uy, xy - ux * uy);
                total += (2.0 * ux * uy + c1) * (2.0 * cxy + c2) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            }
        }
        let expected = total / ((h - 10) * (w - 10)) as f64;
        let got = ssim(&Tensor::new(&[h, w], x).unwrap(), &Tensor::new(&[h, w], y).unwrap(), 1.0).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn embedding_is_deterministic_per_row() {
        let e = Embedding::new([3, 8, 8], 11).unwrap();
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let one = Tensor::from_fn(&[1, 3, 8, 8], |_| r.random_range(-1.0..1.0)).unwrap();
        let other = Tensor::from_fn(&[1, 3, 8, 8], |_| r.random_range(-1.0..1.0)).unwrap();
        let batch = Tensor::cat_batch(&[&one, &other, &one]).unwrap();
        let f = e.embed(&batch).unwrap();
        assert_eq!(f.shape(), (3, EMBED_DIM));
        assert_eq!(f.row(0), f.row(2));
        assert_ne!(f.row(0), f.row(1));
        assert_eq!(f, Embedding::new([3, 8, 8], 11).unwrap().embed(&batch).unwrap());
        assert!(e.embed(&Tensor::zeros(&[1, 1, 8, 8]).unwrap()).is_err());
    }

    proptest::proptest! {
        #[test]
        fn fid_symmetric_and_nonnegative(d in 1usize..6, a in 0u64..1000, b in 0u64..1000, shift in -2.0f64..2.0) {
            let mu_x: Vec<f64> = (0..d).map(|i| i as f64 * 0.3).collect();
            let mu_y: Vec<f64> = (0..d).map(|i| i as f64 * 0.3 + shift).collect();
            let x = stats(&mu_x, random_psd(d, a));
            let y = stats(&mu_y, random_psd(d, b));
            let xy = fid(&x, &y).unwrap();
            proptest::prop_assert!(xy >= 0.0);
            proptest::prop_assert_eq!(xy.to_bits(), fid(&y, &x).unwrap().to_bits());
            proptest::prop_assert!(fid(&x, &x).unwrap() <= 1e-8 * (1.0 + x.sigma.trace()));
        }

        #[test]
        fn sqrt_squares_back(d in 1usize..8, seed in 0u64..1000) {
            let a = random_psd(d, seed);
            let r = matrix_sqrt_psd(&a).unwrap();
            proptest::prop_assert!((&r * &r - &a).norm() <= 1e-8 * a.norm());
            proptest::prop_assert!((&r - r.transpose()).norm() <= 1e-12 * r.norm());
        }

        #[test]
        fn psnr_ssim_scale_with_range(seed in 0u64..1000, k in 0.1f64..10.0) {
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::from_fn(&[2, 12, 12], |_| r.random_range(0.0..1.0)).unwrap();
            let y = Tensor::from_fn(&[2, 12, 12], |_| r.random_range(0.0..1.0)).unwrap();
            let kx = x.map(|v| v * k);
            let ky = y.map(|v| v * k);
            let s = ssim(&x, &y, 1.0).unwrap();
            proptest::prop_assert!((ssim(&kx, &ky, k).unwrap() - s).abs() < 1e-9);
            proptest::prop_assert!(s <= 1.0 && s >= -1.0);
            proptest::prop_assert_eq!(s, ssim(&y, &x, 1.0).unwrap());
            let p = psnr(&x, &y, 1.0).unwrap();
            proptest::prop_assert!((psnr(&kx, &ky, k).unwrap() - p).abs() < 1e-9);
        }
    }
}
