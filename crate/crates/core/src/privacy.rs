//! Privacy mechanisms on the feature path: Laplace noise on clipped
//! features, keyed coordinate shuffling, the vector-quantization codebook,
//! and the configuration types for adversarially trained encoders.

use std::fmt;

use ndarray::{Array2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{validation, Result};
use crate::nn::{lit, Param, Real};
use crate::rng::{self, rng_from};

pub use crate::system::ibal_train_step;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    pub epsilon: f64,
    /// L1 sensitivity bound Δ.
    pub clip_bound: f64,
}

impl DpConfig {
    pub fn new(epsilon: f64, clip_bound: f64) -> Result<Self> {
        let cfg = Self { epsilon, clip_bound };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return validation(format!("privacy budget epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.clip_bound > 0.0 && self.clip_bound.is_finite()) {
            return validation(format!("clip bound must be positive, got {}", self.clip_bound));
        }
        Ok(())
    }

    /// Laplace scale b = Δ/ε.
    pub fn laplace_scale(&self) -> f64 {
        self.clip_bound / self.epsilon
    }
}

/// Row-wise L1 clipping: rows with `‖x‖₁ > bound` are rescaled to L1 norm
/// `bound`, other rows pass unchanged.
pub fn clip_l1<S: Real>(x: &Array2<S>, bound: f64) -> Array2<S> {
    let b: S = lit(bound);
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let l1 = row.iter().map(|v| v.abs()).sum::<S>();
        if l1 > b {
            let k = b / l1;
            row.mapv_inplace(|v| v * k);
        }
    }
    out
}

/// Backward pass of [`clip_l1`] given the unclipped input.
pub fn clip_l1_backward<S: Real>(x: &Array2<S>, bound: f64, g: &Array2<S>) -> Array2<S> {
    let b: S = lit(bound);
    let mut dx = g.clone();
    for (mut d, xr) in dx.rows_mut().into_iter().zip(x.rows()) {
        let l1 = xr.iter().map(|v| v.abs()).sum::<S>();
        if l1 > b {
            let dot: S = xr.iter().zip(d.iter()).map(|(&a, &gv)| a * gv).sum();
            let k = b / l1;
            for (dj, &xj) in d.iter_mut().zip(xr.iter()) {
                *dj = k * (*dj - xj.signum() * dot / l1);
            }
        }
    }
    dx
}

/// Adds i.i.d. Laplace(0, Δ/ε) noise to every coordinate, drawing from `rng`.
pub fn dp_noise_rows<S: Real, R: Rng + ?Sized>(x: &Array2<S>, cfg: &DpConfig, rng: &mut R) -> Result<Array2<S>> {
    cfg.validate()?;
    let b = cfg.laplace_scale();
    Ok(x.mapv(|v| v + lit::<S>(rng::laplace(rng, b))))
}

/// Laplace mechanism on already clipped features, deterministic under `seed`.
pub fn dp_perturb<S: Real>(x: &Array2<S>, cfg: &DpConfig, seed: u64) -> Result<Array2<S>> {
    dp_noise_rows(x, cfg, &mut rng_from(seed))
}

/// 128-bit shuffling key and the coordinate permutation it induces on
/// length-`d` feature blocks.
#[derive(Clone, PartialEq, Eq)]
pub struct ShuffleKey {
    key: [u8; 16],
    perm: Vec<usize>,
    inv: Vec<usize>,
}

impl fmt::Debug for ShuffleKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ShuffleKey").field("d", &self.perm.len()).finish_non_exhaustive()
    }
}

impl ShuffleKey {
    /// The permutation is a Fisher-Yates shuffle driven by a ChaCha20 stream
    /// keyed with SHA-256(key ‖ d).
    pub fn new(key: [u8; 16], d: usize) -> Result<Self> {
        if d == 0 {
            return validation("shuffle key needs a positive feature length");
        }
        let mut h = Sha256::new();
        h.update(b"tosc-shuffle-v1");
        h.update(key);
        h.update((d as u64).to_le_bytes());
        let seed: [u8; 32] = h.finalize().into();
        let perm = rng::permutation(&mut ChaCha20Rng::from_seed(seed), d);
        let mut inv = vec![0; d];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        Ok(Self { key, perm, inv })
    }

    pub fn from_hex(hex_key: &str, d: usize) -> Result<Self> {
        let bytes = hex::decode(hex_key.trim())
            .ok()
            .and_then(|b| <[u8; 16]>::try_from(b).ok())
            .map_or_else(|| validation("shuffle key must be 32 hex digits (128 bits)"), Ok)?;
        Self::new(bytes, d)
    }

    /// Key derived from a seed, for tests and for an attacker's guess.
    pub fn from_seed(seed: u64, d: usize) -> Self {
        let mut key = [0u8; 16];
        rng_from(seed).fill(&mut key);
        Self::new(key, d).expect("d checked by caller")
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.key)
    }

    pub fn d(&self) -> usize {
        self.perm.len()
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    fn check<S>(&self, x: &Array2<S>) -> Result<()> {
        if x.ncols() != self.d() {
            return validation(format!("feature length {} does not match key length {}", x.ncols(), self.d()));
        }
        Ok(())
    }
}

/// `out[:, i] = x[:, perm[i]]`.
pub fn shuffle_encrypt<S: Real>(x: &Array2<S>, key: &ShuffleKey) -> Result<Array2<S>> {
    key.check(x)?;
    Ok(x.select(Axis(1), &key.perm))
}

/// Inverse of [`shuffle_encrypt`]; also its adjoint.
pub fn shuffle_decrypt<S: Real>(x: &Array2<S>, key: &ShuffleKey) -> Result<Array2<S>> {
    key.check(x)?;
    Ok(x.select(Axis(1), &key.inv))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimAdversarySpec {
    /// Channel widths of the transposed-conv upsampling stages.
    pub widths: Vec<usize>,
}

impl SimAdversarySpec {
    /// 16/32-channel decoder starting from a 4×4 grid.
    pub fn for_side(side: usize) -> Self {
        let stages = (side / 4).max(2).ilog2() as usize;
        let mut widths = vec![32; stages];
        widths[0] = 16;
        widths[stages - 1] = 16;
        Self { widths }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IbalConfig {
    pub lambda_adv: f64,
    pub lambda_ib: f64,
    #[serde(default)]
    pub sim_adversary: Option<SimAdversarySpec>,
}

impl Default for IbalConfig {
    fn default() -> Self {
        Self { lambda_adv: 0.1, lambda_ib: 0.01, sim_adversary: None }
    }
}

impl IbalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_adv >= 0.0 && self.lambda_ib >= 0.0) {
            return validation("IBAL weights must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LbvqConfig {
    pub codebook_size: usize,
    pub seg_dim: usize,
    pub commitment_beta: f64,
    /// Epochs trained as a plain analog system before the codebook is
    /// initialized by k-means.
    pub warmup_epochs: usize,
}

impl Default for LbvqConfig {
    fn default() -> Self {
        Self { codebook_size: 16, seg_dim: 4, commitment_beta: 0.25, warmup_epochs: 1 }
    }
}

impl LbvqConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        let k = self.codebook_size;
        if k < 4 || !k.is_power_of_two() || !k.ilog2().is_multiple_of(2) {
            return validation(format!("codebook size {k} must be a square QAM order (4, 16, 64, ...)"));
        }
        if self.seg_dim == 0 || d % self.seg_dim != 0 {
            return validation(format!("d = {d} is not divisible by seg_dim = {}", self.seg_dim));
        }
        if self.commitment_beta < 0.0 {
            return validation("commitment beta must be non-negative");
        }
        Ok(())
    }
}

/// `K × seg_dim` learnable codewords. Each index is carried by one
/// `K`-QAM symbol.
pub struct Codebook<S: Real> {
    pub codewords: Param<S>,
    pub commitment_beta: f64,
}

impl<S: Real> Codebook<S> {
    pub fn new(codewords: Array2<S>, commitment_beta: f64) -> Self {
        Self { codewords: Param::new(codewords), commitment_beta }
    }

    pub fn size(&self) -> usize {
        self.codewords.value.nrows()
    }

    pub fn seg_dim(&self) -> usize {
        self.codewords.value.ncols()
    }

    /// Concatenated codewords for an `n × segments` index matrix.
    pub fn lookup(&self, indices: &Array2<u32>) -> Array2<S> {
        let m = self.seg_dim();
        let mut out = Array2::zeros((indices.nrows(), indices.ncols() * m));
        for ((r, s), &j) in indices.indexed_iter() {
            out.slice_mut(ndarray::s![r, s * m..(s + 1) * m]).assign(&self.codewords.value.row(j as usize));
        }
        out
    }
}

/// Nearest codeword (squared Euclidean distance, lowest index on ties) for
/// every `seg_dim` segment of each row.
pub fn vq_quantize<S: Real>(x: &Array2<S>, cb: &Codebook<S>) -> Result<(Array2<u32>, Array2<S>)> {
    let m = cb.seg_dim();
    if m == 0 || x.ncols() % m != 0 {
        return validation(format!("feature length {} is not divisible by seg_dim {m}", x.ncols()));
    }
    let segs = x.ncols() / m;
    let cw = &cb.codewords.value;
    let mut idx = Array2::zeros((x.nrows(), segs));
    for (r, row) in x.rows().into_iter().enumerate() {
        for s in 0..segs {
            let seg = row.slice(ndarray::s![s * m..(s + 1) * m]);
            let mut best = (0u32, S::infinity());
            for (j, c) in cw.rows().into_iter().enumerate() {
                let dist: S = seg.iter().zip(c.iter()).map(|(&a, &b)| (a - b) * (a - b)).sum();
                if dist < best.1 {
                    best = (j as u32, dist);
                }
            }
            idx[[r, s]] = best.0;
        }
    }
    let q = cb.lookup(&idx);
    Ok((idx, q))
}

pub struct VqLoss<S: Real> {
    pub value: S,
    pub codebook_term: S,
    pub commitment_term: S,
    /// Gradient of the commitment term w.r.t. the features.
    pub grad_features: Array2<S>,
    /// Gradient of the codebook term w.r.t. the codewords.
    pub grad_codebook: Array2<S>,
}

/// `‖sg(z) − e‖² + β‖z − sg(e)‖²`, both terms averaged over feature elements.
pub fn vq_loss<S: Real>(features: &Array2<S>, quantized: &Array2<S>, indices: &Array2<u32>, cb: &Codebook<S>) -> VqLoss<S> {
    assert_eq!(features.dim(), quantized.dim(), "vq_loss shape mismatch");
    let m = cb.seg_dim();
    let k: S = lit(1.0 / features.len().max(1) as f64);
    let beta: S = lit(cb.commitment_beta);
    let two: S = lit(2.0);
    let diff = features - quantized;
    let sq = diff.iter().map(|&d| d * d).sum::<S>() * k;
    let grad_features = diff.mapv(|d| beta * two * d * k);
    let mut grad_codebook = Array2::zeros(cb.codewords.value.raw_dim());
    for ((r, s), &j) in indices.indexed_iter() {
        let mut g = grad_codebook.row_mut(j as usize);
        for (gi, &d) in g.iter_mut().zip(diff.slice(ndarray::s![r, s * m..(s + 1) * m]).iter()) {
            *gi -= two * d * k;
        }
    }
    VqLoss { value: sq + beta * sq, codebook_term: sq, commitment_term: beta * sq, grad_features, grad_codebook }
}

/// Splits rows into `seg_dim` segments stacked as rows.
pub fn segments<S: Real>(x: &Array2<S>, seg_dim: usize) -> Array2<S> {
    let n = x.len() / seg_dim;
    x.as_standard_layout().to_owned().into_shape_with_order((n, seg_dim)).expect("divisible length")
}

fn sq_dist<S: Real>(a: ndarray::ArrayView1<S>, b: ndarray::ArrayView1<S>) -> f64 {
    a.iter().zip(b.iter()).map(|(&x, &y)| (x - y) * (x - y)).sum::<S>().to_f64().unwrap_or(f64::INFINITY)
}

/// Lloyd's k-means with k-means++ seeding; empty clusters are re-seeded
/// from random points.
pub fn kmeans<S: Real>(points: &Array2<S>, k: usize, iters: usize, seed: u64) -> Result<Array2<S>> {
    if points.nrows() < k || k == 0 {
        return validation(format!("k-means needs at least {k} points, got {}", points.nrows()));
    }
    let mut rng = rng_from(seed);
    let mut chosen = vec![rng.random_range(0..points.nrows())];
    let mut d2: Vec<f64> = points.rows().into_iter().map(|p| sq_dist(p, points.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            d2.iter().position(|&w| {
                u -= w;
                u < 0.0
            })
            .unwrap_or(points.nrows() - 1)
        } else {
            rng.random_range(0..points.nrows())
        };
        chosen.push(next);
        for (w, p) in d2.iter_mut().zip(points.rows()) {
            *w = w.min(sq_dist(p, points.row(next)));
        }
    }
    let mut centres = points.select(Axis(0), &chosen);
    for _ in 0..iters {
        let cb = Codebook::new(centres.clone(), 0.0);
        let (assign, _) = vq_quantize(points, &cb)?;
        let mut sums = Array2::<S>::zeros(centres.raw_dim());
        let mut counts = vec![0usize; k];
        for (p, &a) in points.rows().into_iter().zip(assign.iter()) {
            let mut s = sums.row_mut(a as usize);
            s += &p;
            counts[a as usize] += 1;
        }
        for (j, &c) in counts.iter().enumerate() {
            if c > 0 {
                let inv: S = lit(1.0 / c as f64);
                centres.row_mut(j).assign(&sums.row(j).mapv(|v| v * inv));
            } else {
                let pick = rng.random_range(0..points.nrows());
                centres.row_mut(j).assign(&points.row(pick));
            }
        }
    }
    Ok(centres)
}

/// Replaces codewords that were never selected with random feature segments
/// (plus a small jitter). Returns how many were replaced.
pub fn reseed_dead_codewords<S: Real, R: Rng + ?Sized>(
    cb: &mut Codebook<S>,
    usage: &[u64],
    segments: &Array2<S>,
    rng: &mut R,
) -> usize {
    let mut replaced = 0;
    for (j, &u) in usage.iter().enumerate() {
        if u == 0 && segments.nrows() > 0 {
            let pick = rng.random_range(0..segments.nrows());
            let mut row = cb.codewords.value.row_mut(j);
            Zip::from(&mut row).and(&segments.row(pick)).for_each(|c, &s| {
                *c = s + lit::<S>(1e-3 * (rng.random::<f64>() - 0.5));
            });
            cb.codewords.m.row_mut(j).fill(S::zero());
            cb.codewords.v.row_mut(j).fill(S::zero());
            replaced += 1;
        }
    }
    replaced
}

/// Which mechanism sits on the feature path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mechanism", rename_all = "snake_case")]
pub enum MechanismConfig {
    None,
    Dp(DpConfig),
    Encryption {
        /// 32 hex digits; empty means "resolve from the environment".
        #[serde(default)]
        key_hex: String,
    },
    Ibal(IbalConfig),
    Lbvq(LbvqConfig),
}

impl MechanismConfig {
    pub fn scheme_name(&self) -> &'static str {
        match self {
            MechanismConfig::None => "baseline",
            MechanismConfig::Dp(_) => "dp",
            MechanismConfig::Encryption { .. } => "encryption",
            MechanismConfig::Ibal(_) => "ibal",
            MechanismConfig::Lbvq(_) => "lbvq",
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        match self {
            MechanismConfig::None => Ok(()),
            MechanismConfig::Dp(c) => c.validate(),
            MechanismConfig::Encryption { key_hex } => ShuffleKey::from_hex(key_hex, d).map(|_| ()),
            MechanismConfig::Ibal(c) => c.validate(),
            MechanismConfig::Lbvq(c) => c.validate(d),
        }
    }
}

/// A configured mechanism together with its runtime state.
pub enum Mechanism<S: Real> {
    None,
    Dp(DpConfig),
    Encryption(ShuffleKey),
    Ibal(IbalConfig),
    Lbvq(Codebook<S>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Output of [`apply_mechanism`], ready for the channel: analog blocks go
/// through AWGN directly, index blocks through QAM.
#[derive(Clone, Debug, PartialEq)]
pub enum Transmit<S: Real> {
    Analog(Array2<S>),
    Indices {
        indices: Array2<u32>,
        order: u32,
        /// Quantized features, kept in training mode for the VQ loss.
        quantized: Option<Array2<S>>,
    },
}

/// Applies the mechanism to power-normalized features. DP clips, adds
/// Laplace noise and renormalizes to unit symbol power.
pub fn apply_mechanism<S: Real>(features: &Array2<S>, mech: &Mechanism<S>, mode: Mode, seed: u64) -> Result<Transmit<S>> {
    Ok(match mech {
        Mechanism::None | Mechanism::Ibal(_) => Transmit::Analog(features.clone()),
        Mechanism::Dp(cfg) => {
            let noisy = dp_perturb(&clip_l1(features, cfg.clip_bound), cfg, seed)?;
            Transmit::Analog(crate::channel::power_normalize_rows(&noisy)?.0)
        }
        Mechanism::Encryption(key) => Transmit::Analog(shuffle_encrypt(features, key)?),
        Mechanism::Lbvq(cb) => {
            let (indices, q) = vq_quantize(features, cb)?;
            Transmit::Indices {
                indices,
                order: cb.size() as u32,
                quantized: (mode == Mode::Train).then_some(q),
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn laplace_scale_is_delta_over_epsilon() {
        assert_eq!(DpConfig::new(0.05, 1.0).unwrap().laplace_scale(), 20.0);
        assert!(DpConfig::new(0.0, 1.0).is_err());
        assert!(DpConfig::new(-1.0, 1.0).is_err());
        assert!(DpConfig::new(0.1, 0.0).is_err());
    }

    #[test]
    fn clipping_cases() {
        let x = array![[0.25f64, -0.25], [1.0, -1.0], [0.0, 0.0]];
        let y = clip_l1(&x, 1.0);
        assert_eq!(y.row(0), x.row(0));
        assert!((y.row(1).iter().map(|v| v.abs()).sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(y.row(2), x.row(2));
    }

    #[test]
    fn huge_epsilon_is_nearly_identity() {
        let x = Array2::from_elem((4, 128), 0.001f64);
        let cfg = DpConfig::new(1e6, 1.0).unwrap();
        let y = dp_perturb(&x, &cfg, 3).unwrap();
        assert!((&y - &x).iter().all(|d| d.abs() < 1e-3));
        assert_eq!(y, dp_perturb(&x, &cfg, 3).unwrap());
    }

    #[test]
    fn shuffle_round_trip_and_norm() {
        let key = ShuffleKey::from_seed(1, 128);
        let x = Array2::from_shape_fn((3, 128), |(i, j)| ((i * 131 + j * 17) % 29) as f64 - 14.0);
        let e = shuffle_encrypt(&x, &key).unwrap();
        assert_ne!(e, x);
        assert_eq!(shuffle_decrypt(&e, &key).unwrap(), x);
        for (a, b) in e.rows().into_iter().zip(x.rows()) {
            assert_eq!(a.iter().map(|v| v * v).sum::<f64>(), b.iter().map(|v| v * v).sum::<f64>());
        }
        assert!(shuffle_encrypt(&Array2::<f64>::zeros((1, 64)), &key).is_err());
        let one = ShuffleKey::from_seed(9, 1);
        let v = array![[2.5f64]];
        assert_eq!(shuffle_encrypt(&v, &one).unwrap(), v);
    }

    #[test]
    fn hex_keys() {
        let k = ShuffleKey::from_hex("00112233445566778899aabbccddeeff", 128).unwrap();
        assert_eq!(k.to_hex(), "00112233445566778899aabbccddeeff");
        assert_eq!(k, ShuffleKey::from_hex("00112233445566778899AABBCCDDEEFF", 128).unwrap());
        assert!(ShuffleKey::from_hex("0011", 128).is_err());
        assert!(ShuffleKey::from_hex("zz112233445566778899aabbccddeeff", 128).is_err());
    }

    #[test]
    fn vq_exact_match_and_tie_rule() {
        let mut cw = Array2::<f64>::zeros((16, 4));
        for j in 0..16 {
            cw[[j, j % 4]] = (j + 1) as f64;
        }
        cw.row_mut(2).assign(&array![1.0, 0.0, 0.0, 0.0]);
        cw.row_mut(5).assign(&array![-1.0, 0.0, 0.0, 0.0]);
        cw.row_mut(0).assign(&array![9.0, 9.0, 9.0, 9.0]);
        let cb = Codebook::new(cw.clone(), 0.25);
        let x = ndarray::concatenate![Axis(1), cw.slice(ndarray::s![7..8, ..]), array![[0.0, 0.0, 0.0, 0.0]]];
        let (idx, q) = vq_quantize(&x, &cb).unwrap();
        assert_eq!(idx, array![[7u32, 2]]);
        assert_eq!(q.slice(ndarray::s![.., 0..4]), cw.slice(ndarray::s![7..8, ..]));
        assert!(vq_quantize(&Array2::<f64>::zeros((1, 6)), &cb).is_err());
    }

    #[test]
    fn vq_loss_zero_on_codewords_and_beta_zero() {
        let cw = Array2::from_shape_fn((16, 4), |(i, j)| (i * 4 + j) as f64 * 0.1);
        let cb = Codebook::new(cw, 0.0);
        let x = Array2::from_shape_fn((2, 8), |(i, j)| (i * 3 + j) as f64 * 0.07);
        let (idx, q) = vq_quantize(&x, &cb).unwrap();
        let l = vq_loss(&x, &q, &idx, &cb);
        assert_eq!(l.value, l.codebook_term);
        assert_eq!(l.commitment_term, 0.0);
        let exact = cb.lookup(&idx);
        let l0 = vq_loss(&exact, &exact, &idx, &cb);
        assert_eq!(l0.value, 0.0);
    }

    #[test]
    fn kmeans_finds_separated_clusters() {
        let pts = Array2::from_shape_fn((400, 2), |(i, j)| {
            let c = (i % 4) as f64;
            let centre = if j == 0 { c * 10.0 } else { -c * 10.0 };
            centre + ((i * 7 + j * 13) % 11) as f64 * 0.01
        });
        let mut c = kmeans(&pts, 4, 20, 2).unwrap();
        let mut xs: Vec<f64> = c.column(0).to_vec();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (k, x) in xs.iter().enumerate() {
            assert!((x - 10.0 * k as f64).abs() < 0.2, "{xs:?}");
        }
        let mut cb = Codebook::new(c.clone(), 0.25);
        let n = reseed_dead_codewords(&mut cb, &[1, 0, 3, 4], &pts, &mut rng_from(0));
        assert_eq!(n, 1);
        c.row_mut(1).assign(&cb.codewords.value.row(1));
        assert_eq!(c, cb.codewords.value);
    }

    #[test]
    fn mechanism_dispatch() {
        let x = Array2::from_shape_fn((2, 128), |(i, j)| ((i + j) % 5) as f64 - 2.0 + 0.5);
        let x = crate::channel::power_normalize_rows(&x).unwrap().0;
        assert_eq!(apply_mechanism(&x, &Mechanism::None, Mode::Eval, 0).unwrap(), Transmit::Analog(x.clone()));
        let dp = Mechanism::Dp(DpConfig::new(0.1, 1.0).unwrap());
        let a = apply_mechanism(&x, &dp, Mode::Eval, 5).unwrap();
        assert_eq!(a, apply_mechanism(&x, &dp, Mode::Eval, 5).unwrap());
        let cb = Codebook::new(Array2::from_shape_fn((16, 4), |(i, j)| ((i >> j) & 1) as f64 - 0.5), 0.25);
        match apply_mechanism(&x, &Mechanism::Lbvq(cb), Mode::Eval, 0).unwrap() {
            Transmit::Indices { indices, order, quantized } => {
                assert_eq!(indices.dim(), (2, 32));
                assert_eq!(order, 16);
                assert!(quantized.is_none());
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        assert!(LbvqConfig::default().validate(128).is_ok());
        assert!(LbvqConfig { seg_dim: 3, ..Default::default() }.validate(128).is_err());
        assert!(LbvqConfig { codebook_size: 8, ..Default::default() }.validate(128).is_err());
        assert!(MechanismConfig::Encryption { key_hex: String::new() }.validate(128).is_err());
        let toml_like = serde_json::json!({"mechanism": "dp", "epsilon": 0.05, "clip_bound": 1.0});
        let m: MechanismConfig = serde_json::from_value(toml_like).unwrap();
        assert_eq!(m.scheme_name(), "dp");
        assert_eq!(SimAdversarySpec::for_side(32).widths, vec![16, 32, 16]);
        assert_eq!(SimAdversarySpec::for_side(64).widths, vec![16, 32, 32, 16]);
    }
}
