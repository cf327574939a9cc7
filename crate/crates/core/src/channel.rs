//! Transmit power normalization, analog and Gray-mapped square-QAM
//! constellation mapping, and AWGN corruption.
//!
//! SNR is defined per complex symbol against unit average signal power:
//! the noise added to each symbol is circularly-symmetric complex Gaussian
//! with variance `10^(-snr_db/10)`, split equally between I and Q.

use ndarray::Array2;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::nn::{lit, Real};
use crate::rng;

/// Sentinel SNR meaning "no noise at all".
pub const NOISELESS: f64 = f64::INFINITY;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    Awgn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Modulation {
    /// Continuous feature values sent as unquantized complex symbols.
    AnalogFullResolution,
    Qam { order: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub kind: ChannelKind,
    pub snr_db: f64,
    pub modulation: Modulation,
    pub seed: u64,
}

impl ChannelConfig {
    pub fn analog(snr_db: f64, seed: u64) -> Self {
        Self { kind: ChannelKind::Awgn, snr_db, modulation: Modulation::AnalogFullResolution, seed }
    }

    pub fn qam(snr_db: f64, order: u32, seed: u64) -> Self {
        Self { kind: ChannelKind::Awgn, snr_db, modulation: Modulation::Qam { order }, seed }
    }

    pub fn validate(&self) -> Result<()> {
        check_snr(self.snr_db)?;
        if let Modulation::Qam { order } = self.modulation {
            Qam::new(order)?;
        }
        Ok(())
    }
}

fn check_snr(snr_db: f64) -> Result<()> {
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return validation(format!("snr_db must be finite or the noiseless sentinel, got {snr_db}"));
    }
    Ok(())
}

/// Per-symbol complex noise variance for an SNR in dB; zero when noiseless.
pub fn noise_variance(snr_db: f64) -> f64 {
    if snr_db == NOISELESS {
        0.0
    } else {
        10f64.powf(-snr_db / 10.0)
    }
}

/// Complex baseband symbols plus the scale applied at the transmitter.
#[derive(Clone, Debug, PartialEq)]
pub struct SymbolBlock {
    pub symbols: Vec<Complex64>,
    /// Factor the source features were multiplied by; 1.0 for QAM blocks.
    pub scale: f64,
}

impl SymbolBlock {
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn average_power(&self) -> f64 {
        if self.symbols.is_empty() {
            return 0.0;
        }
        self.symbols.iter().map(|s| s.norm_sqr()).sum::<f64>() / self.symbols.len() as f64
    }

    /// Interleaved real view `[re0, im0, re1, im1, ...]`.
    pub fn to_real(&self) -> Vec<f64> {
        self.symbols.iter().flat_map(|s| [s.re, s.im]).collect()
    }

    /// Receiver-side inverse of [`power_normalize`].
    pub fn denormalize(&self) -> Vec<f64> {
        self.to_real().into_iter().map(|v| v / self.scale).collect()
    }
}

/// Pairs consecutive features into complex symbols scaled to unit average
/// power (`scale = sqrt(d/2) / ||x||`).
pub fn power_normalize(features: &[f64]) -> Result<SymbolBlock> {
    if features.len() % 2 != 0 {
        return validation(format!("feature length {} is odd", features.len()));
    }
    let norm = features.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Degenerate(format!("feature norm {norm}; power scale undefined")));
    }
    let scale = ((features.len() / 2) as f64).sqrt() / norm;
    let symbols = features
        .chunks_exact(2)
        .map(|p| Complex64::new(p[0] * scale, p[1] * scale))
        .collect();
    Ok(SymbolBlock { symbols, scale })
}

/// Adds circularly-symmetric complex Gaussian noise of variance
/// `10^(-snr_db/10)`. The noiseless sentinel returns the input unchanged.
pub fn awgn(block: &SymbolBlock, snr_db: f64, seed: u64) -> Result<SymbolBlock> {
    check_snr(snr_db)?;
    let mut out = block.clone();
    if snr_db == NOISELESS {
        return Ok(out);
    }
    let std = (noise_variance(snr_db) / 2.0).sqrt();
    let mut rng = rng::rng_from(seed);
    for s in &mut out.symbols {
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        *s += Complex64::new(re * std, im * std);
    }
    Ok(out)
}

fn gray(p: u32) -> u32 {
    p ^ (p >> 1)
}

fn gray_inverse(mut g: u32) -> u32 {
    let mut p = g;
    while g > 1 {
        g >>= 1;
        p ^= g;
    }
    p
}

/// Square M-QAM with reflected-binary Gray labelling on each axis.
///
/// The high half of an index's bits selects the in-phase level and the low
/// half the quadrature level; level `p` on an axis sits at `2p - (side - 1)`
/// before the unit-energy scaling by `sqrt(2 (M - 1) / 3)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Qam {
    order: u32,
    side: u32,
    bits_per_axis: u32,
    norm: f64,
}

impl Qam {
    pub fn new(order: u32) -> Result<Self> {
        let bits = order.trailing_zeros();
        if order < 4 || !order.is_power_of_two() || bits % 2 != 0 {
            return validation(format!("QAM order {order} is not a square power of two (4, 16, 64, ...)"));
        }
        let side = 1u32 << (bits / 2);
        Ok(Self {
            order,
            side,
            bits_per_axis: bits / 2,
            norm: (2.0 * (order as f64 - 1.0) / 3.0).sqrt(),
        })
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    pub fn bits_per_symbol(&self) -> u32 {
        2 * self.bits_per_axis
    }

    fn level(&self, gray_code: u32) -> f64 {
        (2.0 * gray_inverse(gray_code) as f64 - (self.side as f64 - 1.0)) / self.norm
    }

    fn decide(&self, v: f64) -> u32 {
        let p = ((v * self.norm + (self.side as f64 - 1.0)) / 2.0).round();
        gray(p.clamp(0.0, self.side as f64 - 1.0) as u32)
    }

    pub fn point(&self, index: u32) -> Result<Complex64> {
        if index >= self.order {
            return validation(format!("symbol index {index} out of range for {}-QAM", self.order));
        }
        let mask = self.side - 1;
        Ok(Complex64::new(self.level(index >> self.bits_per_axis), self.level(index & mask)))
    }

    pub fn modulate(&self, indices: &[u32]) -> Result<SymbolBlock> {
        let symbols = indices.iter().map(|&i| self.point(i)).collect::<Result<_>>()?;
        Ok(SymbolBlock { symbols, scale: 1.0 })
    }

    /// Minimum-Euclidean-distance hard decision; for a square grid this is
    /// an independent nearest-level decision per axis.
    pub fn demodulate_symbol(&self, s: Complex64) -> u32 {
        (self.decide(s.re) << self.bits_per_axis) | self.decide(s.im)
    }

    pub fn demodulate(&self, block: &SymbolBlock) -> Vec<u32> {
        block.symbols.iter().map(|&s| self.demodulate_symbol(s)).collect()
    }
}

pub fn qam_modulate(indices: &[u32], order: u32) -> Result<SymbolBlock> {
    Qam::new(order)?.modulate(indices)
}

pub fn qam_demodulate(block: &SymbolBlock, order: u32) -> Result<Vec<u32>> {
    Ok(Qam::new(order)?.demodulate(block))
}

/// Sends index rows through modulation, AWGN and hard demodulation.
pub fn transmit_indices<R: Rng + ?Sized>(
    qam: &Qam,
    indices: &[u32],
    snr_db: f64,
    rng: &mut R,
) -> Result<Vec<u32>> {
    check_snr(snr_db)?;
    let std = (noise_variance(snr_db) / 2.0).sqrt();
    indices
        .iter()
        .map(|&i| {
            let mut s = qam.point(i)?;
            if std > 0.0 {
                let re: f64 = StandardNormal.sample(rng);
                let im: f64 = StandardNormal.sample(rng);
                s += Complex64::new(re * std, im * std);
            }
            Ok(qam.demodulate_symbol(s))
        })
        .collect()
}

/// Row-wise power normalization of a feature batch. Returns the normalized
/// rows and each row's L2 norm (kept for the backward pass).
pub fn power_normalize_rows<S: Real>(x: &Array2<S>) -> Result<(Array2<S>, Vec<S>)> {
    let d = x.ncols();
    if d % 2 != 0 {
        return validation(format!("feature length {d} is odd"));
    }
    let target: S = lit(((d / 2) as f64).sqrt());
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.nrows());
    for mut row in out.rows_mut() {
        let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt();
        if norm == S::zero() || !norm.is_finite() {
            return Err(Error::Degenerate(format!("feature row norm {norm:?}")));
        }
        let k = target / norm;
        row.mapv_inplace(|v| v * k);
        norms.push(norm);
    }
    Ok((out, norms))
}

/// Backward pass of [`power_normalize_rows`]:
/// `dx = c/||x|| · (g - x (x·g)/||x||²)`.
pub fn power_normalize_rows_backward<S: Real>(x: &Array2<S>, norms: &[S], g: &Array2<S>) -> Array2<S> {
    let target: S = lit(((x.ncols() / 2) as f64).sqrt());
    let mut dx = g.clone();
    for ((mut d, xr), &n) in dx.rows_mut().into_iter().zip(x.rows()).zip(norms) {
        let dot: S = xr.iter().zip(d.iter()).map(|(&a, &b)| a * b).sum();
        let k = target / n;
        let proj = dot / (n * n);
        for (dj, &xj) in d.iter_mut().zip(xr.iter()) {
            *dj = k * (*dj - xj * proj);
        }
    }
    dx
}

/// Adds AWGN to rows of interleaved I/Q values in place.
pub fn add_awgn_rows<S: Real, R: Rng + ?Sized>(x: &mut Array2<S>, snr_db: f64, rng: &mut R) -> Result<()> {
    check_snr(snr_db)?;
    if snr_db == NOISELESS {
        return Ok(());
    }
    let std = (noise_variance(snr_db) / 2.0).sqrt();
    x.mapv_inplace(|v| {
        let z: f64 = StandardNormal.sample(rng);
        v + lit::<S>(z * std)
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_vector_normalizes_to_unit_symbols() {
        let b = power_normalize(&[0.3; 128]).unwrap();
        assert_eq!(b.len(), 64);
        for s in &b.symbols {
            assert!((s.norm_sqr() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn impulse_vector_concentrates_power() {
        let mut x = vec![0.0; 128];
        x[0] = 1.0;
        let b = power_normalize(&x).unwrap();
        assert!((b.symbols[0].norm_sqr() - 64.0).abs() < 1e-9);
        assert!(b.symbols[1..].iter().all(|s| s.norm_sqr() == 0.0));
        assert!((b.average_power() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_vector_is_degenerate() {
        assert!(matches!(power_normalize(&[0.0; 8]), Err(Error::Degenerate(_))));
        assert!(power_normalize(&[1.0; 3]).is_err());
    }

    #[test]
    fn denormalize_round_trips() {
        let x: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
        let back = power_normalize(&x).unwrap().denormalize();
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1e-9));
        }
    }

    #[test]
    fn noiseless_awgn_is_bit_exact() {
        let b = power_normalize(&[0.1, -0.7, 2.0, 0.5]).unwrap();
        assert_eq!(awgn(&b, NOISELESS, 9).unwrap(), b);
    }

    #[test]
    fn noise_variance_formula() {
        assert!((noise_variance(12.0) - 0.0631).abs() < 1e-4);
        assert_eq!(noise_variance(0.0), 1.0);
    }

    #[test]
    fn qam_rejects_bad_orders_and_indices() {
        for bad in [0, 2, 8, 32, 12] {
            assert!(Qam::new(bad).is_err(), "{bad}");
        }
        assert!(qam_modulate(&[16], 16).is_err());
    }

    #[test]
    fn qam16_unit_energy_and_scaling() {
        let q = Qam::new(16).unwrap();
        let all: Vec<u32> = (0..16).collect();
        let b = q.modulate(&all).unwrap();
        assert!((b.average_power() - 1.0).abs() < 1e-12);
        // corner point (3, 3) / sqrt(10)
        let corner = b.symbols.iter().map(|s| s.re.abs()).fold(0.0, f64::max);
        assert!((corner - 3.0 / 10f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn gray_neighbours_differ_in_one_bit() {
        for order in [4u32, 16, 64] {
            let q = Qam::new(order).unwrap();
            let step = 2.0 / q.norm;
            for a in 0..order {
                for b in 0..order {
                    let d = (q.point(a).unwrap() - q.point(b).unwrap()).norm();
                    if (d - step).abs() < 1e-9 {
                        assert_eq!((a ^ b).count_ones(), 1, "{order}-QAM {a} vs {b}");
                    }
                }
            }
        }
    }

    #[test]
    fn noiseless_roundtrip_all_orders() {
        for order in [4u32, 16, 64] {
            let all: Vec<u32> = (0..order).collect();
            let b = qam_modulate(&all, order).unwrap();
            assert_eq!(qam_demodulate(&b, order).unwrap(), all);
        }
    }

    #[test]
    fn row_normalization_matches_scalar_path() {
        let x = Array2::from_shape_fn((3, 8), |(i, j)| ((i * 8 + j) as f64 * 0.71).cos());
        let (y, _) = power_normalize_rows(&x).unwrap();
        for (row, yr) in x.rows().into_iter().zip(y.rows()) {
            let b = power_normalize(row.as_slice().unwrap()).unwrap();
            for (a, b) in b.to_real().iter().zip(yr.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn snr_validation() {
        assert!(ChannelConfig::analog(f64::NAN, 0).validate().is_err());
        assert!(ChannelConfig::analog(NOISELESS, 0).validate().is_ok());
        assert!(ChannelConfig::qam(12.0, 8, 0).validate().is_err());
    }
}
