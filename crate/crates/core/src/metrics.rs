//! Task accuracy, reconstruction quality, mutual-information leakage and
//! cost profiling, plus the CSV row types the harness writes.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::codec::ModelBundle;
use crate::data::ImageShape;
use crate::error::{validation, Error, Result};
use crate::rng::{self, rng_for, tag};
use crate::system::Transceiver;

/// Fraction of predictions equal to their labels.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return validation("accuracy of an empty set");
    }
    if predictions.len() != labels.len() {
        return validation(format!("{} predictions for {} labels", predictions.len(), labels.len()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean squared error of each image row.
pub fn per_image_mse(a: &Array2<f32>, b: &Array2<f32>) -> Result<Vec<f64>> {
    if a.dim() != b.dim() {
        return validation(format!("image shapes differ: {:?} vs {:?}", a.dim(), b.dim()));
    }
    Ok(a.rows()
        .into_iter()
        .zip(b.rows())
        .map(|(x, y)| x.iter().zip(y.iter()).map(|(&p, &q)| (p as f64 - q as f64).powi(2)).sum::<f64>() / x.len() as f64)
        .collect())
}

/// PSNR in dB for pixel range [0, 1]; `+∞` for identical images.
pub fn psnr(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return validation(format!("image sizes differ: {} vs {}", a.len(), b.len()));
    }
    let mse = a.iter().zip(b).map(|(&p, &q)| (p as f64 - q as f64).powi(2)).sum::<f64>() / a.len() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// Grayscale projection of NHWC rows onto a `side × side` grid by area
/// averaging (ITU-R 601 luma weights for three channels).
pub fn grayscale_projection(images: &Array2<f32>, shape: ImageShape, side: usize) -> Result<Array2<f64>> {
    if images.ncols() != shape.len() {
        return validation(format!("image rows have {} values, shape needs {}", images.ncols(), shape.len()));
    }
    let (h, w, c) = (shape.height, shape.width, shape.channels);
    let weights: Vec<f64> = if c == 3 { vec![0.299, 0.587, 0.114] } else { vec![1.0 / c as f64; c] };
    let mut out = Array2::zeros((images.nrows(), side * side));
    let mut counts = vec![0.0f64; side * side];
    for y in 0..h {
        for x in 0..w {
            counts[(y * side / h) * side + x * side / w] += 1.0;
        }
    }
    for (mut o, img) in out.rows_mut().into_iter().zip(images.rows()) {
        for y in 0..h {
            for x in 0..w {
                let base = (y * w + x) * c;
                let lum: f64 = (0..c).map(|k| weights[k] * img[base + k] as f64).sum();
                o[(y * side / h) * side + x * side / w] += lum;
            }
        }
        for (v, n) in o.iter_mut().zip(&counts) {
            *v /= n;
        }
    }
    Ok(out)
}

/// Settings of the Donsker-Varadhan estimator used for MI leakage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiConfig {
    pub min_pairs: usize,
    /// Side of the grayscale projection both images are reduced to.
    pub projection_side: usize,
    /// Whitened principal components kept per side.
    pub max_components: usize,
    pub ridge: f64,
    /// Number of critic temperatures in [0, 1] searched on the evaluation half.
    pub temperatures: usize,
}

impl Default for MiConfig {
    fn default() -> Self {
        Self { min_pairs: 1000, projection_side: 16, max_components: 32, ridge: 1e-3, temperatures: 41 }
    }
}

struct Whitening {
    mean: DVector<f64>,
    /// `dim × k`: principal directions scaled by 1/σ.
    w: DMatrix<f64>,
}

impl Whitening {
    fn fit(x: &DMatrix<f64>, k: usize) -> Self {
        let n = x.nrows() as f64;
        let mean = x.row_mean().transpose();
        let mut c = x.clone();
        for mut row in c.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = c.transpose() * &c / n;
        let eig = cov.symmetric_eigen();
        let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let top = eig.eigenvalues[order[0]].max(1e-30);
        let keep: Vec<usize> = order.into_iter().filter(|&i| eig.eigenvalues[i] > 1e-9 * top).take(k).collect();
        let mut w = DMatrix::zeros(x.ncols(), keep.len());
        for (j, &i) in keep.iter().enumerate() {
            w.set_column(j, &(eig.eigenvectors.column(i) / eig.eigenvalues[i].sqrt()));
        }
        Self { mean, w }
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut c = x.clone();
        for mut row in c.row_iter_mut() {
            row -= self.mean.transpose();
        }
        c * &self.w
    }
}

/// Pointwise log density ratio log p(x,y) − log p(x) − log p(y) of a joint
/// Gaussian fitted to whitened projections.
struct GaussianCritic {
    wx: Whitening,
    wy: Whitening,
    qa: DMatrix<f64>,
    qc: DMatrix<f64>,
    b: DMatrix<f64>,
    constant: f64,
}

fn logdet_spd(m: &DMatrix<f64>) -> Result<f64> {
    let ch = m.clone().cholesky().ok_or_else(|| Error::Degenerate("covariance is not positive definite".into()))?;
    Ok(2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

fn inverse_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Degenerate("covariance is not positive definite".into()))
}

impl GaussianCritic {
    fn fit(x: &DMatrix<f64>, y: &DMatrix<f64>, cfg: &MiConfig) -> Result<Self> {
        let wx = Whitening::fit(x, cfg.max_components);
        let wy = Whitening::fit(y, cfg.max_components);
        let (px, py) = (wx.apply(x), wy.apply(y));
        let (kx, ky) = (px.ncols(), py.ncols());
        if kx == 0 || ky == 0 {
            return Err(Error::Degenerate("one side of the pairs has no variance".into()));
        }
        let mut z = DMatrix::zeros(px.nrows(), kx + ky);
        z.view_mut((0, 0), (px.nrows(), kx)).copy_from(&px);
        z.view_mut((0, kx), (py.nrows(), ky)).copy_from(&py);
        let zm = z.row_mean();
        for mut row in z.row_iter_mut() {
            row -= &zm;
        }
        let s = z.transpose() * &z / px.nrows() as f64 + DMatrix::identity(kx + ky, kx + ky) * cfg.ridge;
        let sx = s.view((0, 0), (kx, kx)).into_owned();
        let sy = s.view((kx, kx), (ky, ky)).into_owned();
        let l = inverse_spd(&s)?;
        let qa = l.view((0, 0), (kx, kx)).into_owned() - inverse_spd(&sx)?;
        let qc = l.view((kx, kx), (ky, ky)).into_owned() - inverse_spd(&sy)?;
        let b = l.view((0, kx), (kx, ky)).into_owned();
        let constant = -0.5 * (logdet_spd(&s)? - logdet_spd(&sx)? - logdet_spd(&sy)?);
        Ok(Self { wx, wy, qa, qc, b, constant })
    }

    /// Critic values for every (x_i, y_j) pair.
    fn scores(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
        let u = self.wx.apply(x);
        let v = self.wy.apply(y);
        let quad = |m: &DMatrix<f64>, q: &DMatrix<f64>| -> Vec<f64> {
            let mq = m * q;
            (0..m.nrows()).map(|i| -0.5 * mq.row(i).dot(&m.row(i))).collect()
        };
        let a = quad(&u, &self.qa);
        let c = quad(&v, &self.qc);
        let mut t = -(&u * &self.b * v.transpose());
        for i in 0..t.nrows() {
            for j in 0..t.ncols() {
                t[(i, j)] += self.constant + a[i] + c[j];
            }
        }
        t
    }
}

/// DV bound: mean critic on matched pairs minus log-mean-exp over all
/// mismatched pairs, at temperature `alpha`.
fn dv_bound(t: &DMatrix<f64>, alpha: f64) -> f64 {
    let n = t.nrows();
    let pos = (0..n).map(|i| t[(i, i)]).sum::<f64>() / n as f64;
    let mut max = f64::NEG_INFINITY;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                max = max.max(alpha * t[(i, j)]);
            }
        }
    }
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                acc += (alpha * t[(i, j)] - max).exp();
            }
        }
    }
    alpha * pos - (max + (acc / (n * (n - 1)) as f64).ln())
}

fn to_dmatrix(a: &Array2<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), a.ncols(), |i, j| a[[rows[i], j]])
}

fn pair_hash(x: ndarray::ArrayView1<f64>, y: ndarray::ArrayView1<f64>) -> u64 {
    x.iter()
        .chain(y.iter())
        .fold(0xCBF2_9CE4_8422_2325u64, |h, v| (h ^ v.to_bits()).wrapping_mul(0x0100_0000_01B3))
}

/// DV lower bound on I(X; Y) in nats from paired samples. Pairs are put in
/// a content-defined order and split in half by `seed`; the Gaussian critic
/// is fitted on one half and the bound is evaluated on the other half with
/// all mismatched pairs as negatives, at the best critic temperature in
/// [0, 1]. Temperature 0 gives the trivial bound 0.
pub fn mi_estimate(x: &Array2<f64>, y: &Array2<f64>, cfg: &MiConfig, seed: u64) -> Result<f64> {
    if x.nrows() != y.nrows() {
        return validation(format!("{} originals vs {} reconstructions", x.nrows(), y.nrows()));
    }
    if x.nrows() < cfg.min_pairs.max(4) {
        return validation(format!("MI estimate needs at least {} pairs, got {}", cfg.min_pairs, x.nrows()));
    }
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    order.sort_by_key(|&i| (pair_hash(x.row(i), y.row(i)), i));
    let perm = rng::permutation(&mut rng_for(seed, &[tag("mi-split")]), order.len());
    let shuffled: Vec<usize> = perm.iter().map(|&p| order[p]).collect();
    let h = shuffled.len() / 2;
    let (fit_idx, eval_idx) = shuffled.split_at(h);
    let critic = GaussianCritic::fit(&to_dmatrix(x, fit_idx), &to_dmatrix(y, fit_idx), cfg)?;
    let t = critic.scores(&to_dmatrix(x, eval_idx), &to_dmatrix(y, eval_idx));
    let steps = cfg.temperatures.max(2) - 1;
    Ok((0..=steps).map(|i| dv_bound(&t, i as f64 / steps as f64)).fold(f64::NEG_INFINITY, f64::max))
}

/// MI leakage between original images and an attacker's reconstructions,
/// measured on grayscale projections of both.
pub fn mi_leakage(
    originals: &Array2<f32>,
    reconstructions: &Array2<f32>,
    shape: ImageShape,
    cfg: &MiConfig,
    seed: u64,
) -> Result<f64> {
    if originals.dim() != reconstructions.dim() {
        return validation(format!("shapes differ: {:?} vs {:?}", originals.dim(), reconstructions.dim()));
    }
    let x = grayscale_projection(originals, shape, cfg.projection_side)?;
    let y = grayscale_projection(reconstructions, shape, cfg.projection_side)?;
    mi_estimate(&x, &y, cfg, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub flops: u64,
    pub params: u64,
    pub epoch_seconds: f64,
    pub inference_seconds: f64,
}

fn median_time(mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    f()?;
    let mut t = Vec::with_capacity(5);
    for _ in 0..5 {
        let start = Instant::now();
        f()?;
        t.push(start.elapsed().as_secs_f64());
    }
    t.sort_by(f64::total_cmp);
    Ok(t[2])
}

/// Analytic cost of the bundled scheme plus wall-clock timing: the median
/// of five single-instance inferences, and one epoch of `epoch_len` items
/// extrapolated from the median time of a training step at `batch_size`.
pub fn profile(bundle: &ModelBundle, sample: &Array2<f32>, batch_size: usize, epoch_len: usize) -> Result<Profile> {
    if sample.nrows() == 0 || batch_size == 0 {
        return validation("profiling needs a sample image and a positive batch size");
    }
    let mut tx = Transceiver::<f32>::from_bundle(bundle)?;
    let cost = tx.cost();
    let one = sample.slice(ndarray::s![0..1, ..]).to_owned();
    let mut rng = rng_for(0, &[tag("profile")]);
    let inference_seconds = median_time(|| tx.infer(&one, 12.0, &mut rng).map(|_| ()))?;
    let rows: Vec<usize> = (0..batch_size).map(|i| i % sample.nrows()).collect();
    let batch = sample.select(ndarray::Axis(0), &rows);
    let labels = vec![0usize; batch_size];
    let step = median_time(|| tx.train_step(&batch, &labels, 12.0, 5.0, &mut rng).map(|_| ()))?;
    let epoch_seconds = step * epoch_len.div_ceil(batch_size) as f64;
    Ok(Profile { flops: cost.flops, params: cost.params, epoch_seconds, inference_seconds })
}

/// CPU model and core count, attached to every timing measurement.
pub fn hardware_descriptor() -> String {
    let model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| s.lines().find(|l| l.starts_with("model name")).and_then(|l| l.split(':').nth(1)).map(|m| m.trim().to_string()))
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{model} x{cores}")
}

/// One evaluation row. Columns appear in declaration order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub scheme: String,
    pub dataset: String,
    pub preprocess: String,
    pub seed: u64,
    pub snr_train_db: f64,
    pub snr_db: f64,
    pub accuracy: f64,
    pub effective_snr_db: f64,
    pub mi_leakage: Option<f64>,
    pub attacker_mse: Option<f64>,
    pub attacker_psnr_db: Option<f64>,
    pub flops: u64,
    pub params: u64,
    pub epsilon: Option<f64>,
    pub clip_bound: Option<f64>,
    pub lambda_adv: Option<f64>,
    pub lambda_ib: Option<f64>,
    pub codebook_size: Option<usize>,
    pub seg_dim: Option<usize>,
    pub config_hash: String,
}

pub const METRICS_COLUMNS: [&str; 20] = [
    "scheme",
    "dataset",
    "preprocess",
    "seed",
    "snr_train_db",
    "snr_db",
    "accuracy",
    "effective_snr_db",
    "mi_leakage",
    "attacker_mse",
    "attacker_psnr_db",
    "flops",
    "params",
    "epsilon",
    "clip_bound",
    "lambda_adv",
    "lambda_ib",
    "codebook_size",
    "seg_dim",
    "config_hash",
];

/// Wall-clock measurements, kept apart from [`MetricsRecord`] so metric
/// files stay reproducible across runs and machines.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub scheme: String,
    pub seed: u64,
    pub epoch_seconds: f64,
    pub inference_seconds: f64,
    pub hardware: String,
    pub config_hash: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[1], &[1, 2]).is_err());
        let relabel = |v: &[usize]| v.iter().map(|&x| (x * 7 + 3) % 10).collect::<Vec<_>>();
        let p = [0, 1, 2, 3, 4, 5];
        let l = [0, 1, 9, 3, 8, 5];
        assert_eq!(accuracy(&p, &l).unwrap(), accuracy(&relabel(&p), &relabel(&l)).unwrap());
    }

    #[test]
    fn psnr_cases() {
        assert_eq!(psnr(&[0.2, 0.4], &[0.2, 0.4]).unwrap(), f64::INFINITY);
        assert!((psnr(&[0.0; 4], &[1.0; 4]).unwrap()).abs() < 1e-12);
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
        assert!(psnr(&[0.0; 4], &[0.0; 3]).is_err());
    }

    #[test]
    fn projection_averages_blocks() {
        let shape = ImageShape::new(32, 32, 3);
        let img = Array2::from_elem((1, shape.len()), 0.5f32);
        let p = grayscale_projection(&img, shape, 16).unwrap();
        assert_eq!(p.ncols(), 256);
        assert!(p.iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn independent_pairs_give_no_information() {
        let mut rng = crate::rng::rng_from(4);
        let x = Array2::from_shape_fn((1200, 8), |_| rng.sample::<f64, _>(StandardNormal));
        let y = Array2::from_shape_fn((1200, 8), |_| rng.sample::<f64, _>(StandardNormal));
        let mi = mi_estimate(&x, &y, &MiConfig::default(), 0).unwrap();
        assert!(mi <= 0.05, "{mi}");
        assert!(mi_estimate(&x.slice(ndarray::s![..10, ..]).to_owned(), &y.slice(ndarray::s![..10, ..]).to_owned(), &MiConfig::default(), 0).is_err());
    }

    #[test]
    fn joint_permutation_does_not_change_the_estimate() {
        let mut rng = crate::rng::rng_from(5);
        let x = Array2::from_shape_fn((1000, 6), |_| rng.sample::<f64, _>(StandardNormal));
        let y = &x * 0.8 + Array2::from_shape_fn((1000, 6), |_| 0.6 * rng.sample::<f64, _>(StandardNormal));
        let perm = crate::rng::permutation(&mut rng, 1000);
        let xp = x.select(ndarray::Axis(0), &perm);
        let yp = y.select(ndarray::Axis(0), &perm);
        let cfg = MiConfig::default();
        assert_eq!(mi_estimate(&x, &y, &cfg, 3).unwrap(), mi_estimate(&xp, &yp, &cfg, 3).unwrap());
    }

    #[test]
    #[ignore]
    fn calibration_report() {
        for seed in 0..4u64 {
            let mut rng = crate::rng::rng_from(100 + seed);
            for (n, rho) in [(2000, 0.9), (4000, 0.9), (4000, 0.5)] {
                let x = Array2::from_shape_fn((n, 16), |_| rng.sample::<f64, _>(StandardNormal));
                let y = &x * rho + Array2::from_shape_fn((n, 16), |_| (1.0f64 - rho * rho).sqrt() * rng.sample::<f64, _>(StandardNormal));
                let est = mi_estimate(&x, &y, &MiConfig::default(), seed).unwrap();
                eprintln!("seed {seed} n {n} rho {rho}: {est:.3} vs {:.3}", -8.0 * (1.0f64 - rho * rho).ln());
            }
            let imgs = Array2::from_shape_fn((4, 256), |_| rng.random::<f64>());
            let k: Vec<usize> = (0..2000).map(|_| rng.random_range(0..4)).collect();
            let x = imgs.select(ndarray::Axis(0), &k);
            eprintln!("seed {seed} disc4: {:.3}", mi_estimate(&x, &x, &MiConfig::default(), seed).unwrap());
        }
    }
}
