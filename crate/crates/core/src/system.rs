//! The full transceiver for one scheme: encoder, privacy mechanism, channel
//! and task head, with end-to-end training through sampled channel noise.

use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::channel::{self, Qam};
use crate::codec::{decoder_layers, predictions, task_loss, Encoder, EncoderSpec, HeadSpec, ModelBundle, TaskHead};
use crate::data::{batch_indices, ImageShape, LabeledImageSet, TaskKind};
use crate::error::{validation, Error, Result};
use crate::nn::{clip_grad_norm, lit, loss, Adam, Cost, LayerSpec, Param, Real, Sequential};
use crate::privacy::{
    apply_mechanism, clip_l1, clip_l1_backward, dp_noise_rows, kmeans, reseed_dead_codewords, segments,
    shuffle_decrypt, shuffle_encrypt, vq_loss, vq_quantize, Codebook, IbalConfig, Mechanism, MechanismConfig, Mode,
    ShuffleKey, SimAdversarySpec, Transmit,
};
use crate::rng::{rng_for, tag};

/// Architecture and mechanism of one transceiver. Everything needed to
/// rebuild it from a bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub task: TaskKind,
    pub encoder: EncoderSpec,
    pub head: HeadSpec,
    pub mechanism: MechanismConfig,
    #[serde(default)]
    pub sim_adversary: Option<Vec<LayerSpec>>,
}

impl SystemSpec {
    /// Default architecture for a scheme. IBAL adds a variational encoder and
    /// a simulated inversion network; LBVQ adds a refinement conv block and a
    /// wider receiver network that de-quantizes the codeword sequence.
    pub fn for_scheme(shape: ImageShape, task: TaskKind, d: usize, mechanism: MechanismConfig) -> Result<Self> {
        mechanism.validate(d)?;
        let mut encoder = EncoderSpec::new(shape, d);
        let mut head = HeadSpec::new(task, d);
        let mut sim_adversary = None;
        match &mechanism {
            MechanismConfig::Ibal(cfg) => {
                encoder.variational = cfg.lambda_ib > 0.0;
                let spec = cfg.sim_adversary.clone().unwrap_or_else(|| SimAdversarySpec::for_side(shape.height.min(shape.width)));
                sim_adversary = Some(decoder_layers(d, shape, &spec.widths)?);
            }
            MechanismConfig::Lbvq(_) => {
                encoder.refine_stages = vec![0];
                head.hidden = vec![4 * d, 2 * d];
            }
            _ => {}
        }
        let spec = Self { task, encoder, head, mechanism, sim_adversary };
        spec.encoder.validate()?;
        Ok(spec)
    }

    pub fn scheme(&self) -> &'static str {
        self.mechanism.scheme_name()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub snr_train_db: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { snr_train_db: 12.0, epochs: 10, batch_size: 512, lr: 1e-3, grad_clip: 5.0, seed: 0 }
    }
}

/// Weighted loss terms of one step; `total` is their sum. `sim_mse` is the
/// raw reconstruction error of the simulated adversary (not a summand).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub task: f64,
    pub adversarial: f64,
    pub rate: f64,
    pub vq: f64,
    pub total: f64,
    pub sim_mse: f64,
}

impl LossComponents {
    pub fn sum_of_terms(&self) -> f64 {
        self.task + self.adversarial + self.rate + self.vq
    }

    fn accumulate(&mut self, o: &LossComponents, w: f64) {
        self.task += w * o.task;
        self.adversarial += w * o.adversarial;
        self.rate += w * o.rate;
        self.vq += w * o.vq;
        self.total += w * o.total;
        self.sim_mse += w * o.sim_mse;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    /// Sample-weighted means over the epoch.
    pub loss: LossComponents,
    pub seconds: f64,
    /// Codewords re-seeded at the end of the epoch.
    pub reseeded: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub n: usize,
    /// Signal-to-total-noise ratio at the receiver, counting DP noise.
    pub effective_snr_db: f64,
}

/// Where an eavesdropper taps the link.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tap {
    #[default]
    PostChannel,
    PreChannel,
}

/// What an eavesdropper observes for a batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Interception {
    Analog(Array2<f32>),
    /// Demodulated codebook indices and the codebook size.
    Indices(Array2<u32>, usize),
}

impl Interception {
    pub fn len(&self) -> usize {
        match self {
            Interception::Analog(a) => a.nrows(),
            Interception::Indices(i, _) => i.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Width of [`Interception::to_input`].
    pub fn input_dim(&self) -> usize {
        match self {
            Interception::Analog(a) => a.ncols(),
            Interception::Indices(idx, k) => idx.ncols() * k,
        }
    }

    /// Attacker network input: analog values, or one-hot indices.
    pub fn to_input(&self) -> Array2<f32> {
        match self {
            Interception::Analog(a) => a.clone(),
            Interception::Indices(idx, k) => {
                let mut out = Array2::zeros((idx.nrows(), idx.ncols() * k));
                for ((r, s), &j) in idx.indexed_iter() {
                    out[[r, s * k + j as usize]] = 1.0;
                }
                out
            }
        }
    }

    pub fn rows(&self, range: std::ops::Range<usize>) -> Interception {
        match self {
            Interception::Analog(a) => Interception::Analog(a.slice(ndarray::s![range, ..]).to_owned()),
            Interception::Indices(i, k) => Interception::Indices(i.slice(ndarray::s![range, ..]).to_owned(), *k),
        }
    }
}

pub struct Transceiver<S: Real = f32> {
    pub spec: SystemSpec,
    pub encoder: Encoder<S>,
    pub head: TaskHead<S>,
    pub sim_adversary: Option<Sequential<S>>,
    pub mechanism: Mechanism<S>,
    /// LBVQ only: false during the analog warm-up epochs.
    pub quantizing: bool,
    opt: Adam,
    opt_sim: Adam,
    steps: u64,
    /// Codeword selection counts since the last reset, and the most recent
    /// batch of feature segments (LBVQ dead-code re-seeding).
    usage: Vec<u64>,
    last_segments: Option<Array2<S>>,
}

fn convert<S: Real>(x: &Array2<f32>) -> Array2<S> {
    x.mapv(|v| lit(v as f64))
}

fn to_f32<S: Real>(x: &Array2<S>) -> Array2<f32> {
    x.mapv(|v| v.to_f32().unwrap_or(f32::NAN))
}

fn load_params<S: Real>(params: Vec<&mut Param<S>>, tensors: &[Array2<S>], what: &str) -> Result<()> {
    if params.len() != tensors.len() {
        return Err(Error::Format(format!("{what}: expected {} tensors, found {}", params.len(), tensors.len())));
    }
    for (p, t) in params.into_iter().zip(tensors) {
        if p.value.dim() != t.dim() {
            return Err(Error::Format(format!("{what}: tensor shape {:?} != {:?}", t.dim(), p.value.dim())));
        }
        p.value.assign(t);
    }
    Ok(())
}

impl<S: Real> Transceiver<S> {
    pub fn new(spec: SystemSpec, lr: f64, seed: u64) -> Result<Self> {
        let mut rng = rng_for(seed, &[tag("init")]);
        let encoder = Encoder::new(spec.encoder.clone(), &mut rng)?;
        let head = TaskHead::new(spec.head.clone(), &mut rng)?;
        let sim_adversary = match &spec.sim_adversary {
            Some(layers) => Some(Sequential::new(spec.encoder.d, layers, &mut rng)?),
            None => None,
        };
        let d = spec.encoder.d;
        let mechanism = match &spec.mechanism {
            MechanismConfig::None => Mechanism::None,
            MechanismConfig::Dp(c) => Mechanism::Dp(*c),
            MechanismConfig::Encryption { key_hex } => Mechanism::Encryption(ShuffleKey::from_hex(key_hex, d)?),
            MechanismConfig::Ibal(c) => Mechanism::Ibal(c.clone()),
            MechanismConfig::Lbvq(c) => {
                c.validate(d)?;
                Mechanism::Lbvq(Codebook::new(Array2::zeros((c.codebook_size, c.seg_dim)), c.commitment_beta))
            }
        };
        Ok(Self {
            spec,
            encoder,
            head,
            sim_adversary,
            mechanism,
            quantizing: false,
            opt: Adam::new(lr),
            opt_sim: Adam::new(lr),
            steps: 0,
            usage: Vec::new(),
            last_segments: None,
        })
    }

    pub fn scheme(&self) -> &'static str {
        self.spec.scheme()
    }

    pub fn codebook(&self) -> Option<&Codebook<S>> {
        match &self.mechanism {
            Mechanism::Lbvq(cb) => Some(cb),
            _ => None,
        }
    }

    fn ibal(&self) -> Option<&IbalConfig> {
        match &self.mechanism {
            Mechanism::Ibal(c) => Some(c),
            _ => None,
        }
    }

    fn digital(&self) -> bool {
        matches!(self.mechanism, Mechanism::Lbvq(_)) && self.quantizing
    }

    /// Analytic per-instance cost of every trained network in the scheme,
    /// including the simulated adversary IBAL trains against.
    pub fn cost(&self) -> Cost {
        let mut c = self.encoder.cost() + self.head.net.cost();
        if let Some(sim) = &self.sim_adversary {
            c = c + sim.cost();
        }
        if let Some(cb) = self.codebook() {
            c = c + Cost { flops: 3 * (self.spec.encoder.d * cb.size()) as u64, params: cb.codewords.len() as u64 };
        }
        c
    }

    /// Parameters updated by the main optimizer (encoder, head, codebook).
    pub fn trainable(&mut self) -> Vec<&mut Param<S>> {
        let mut p = self.encoder.params_mut();
        p.extend(self.head.net.params_mut());
        if let Mechanism::Lbvq(cb) = &mut self.mechanism {
            p.push(&mut cb.codewords);
        }
        p
    }

    fn sample_posterior<R: Rng + ?Sized>(&self, mu: &Array2<S>, rng: &mut R) -> (Array2<S>, Option<Array2<S>>) {
        match &self.encoder.logvar {
            Some(lv) => {
                let std = lv.value.mapv(|v| (v * lit(0.5)).exp());
                let eps = Array2::from_shape_fn(mu.raw_dim(), |_| lit::<S>(rng.sample::<f64, _>(StandardNormal)));
                (mu + &(&eps * &std), Some(eps))
            }
            None => (mu.clone(), None),
        }
    }

    /// Forward and backward pass for one batch at `snr_db`. Accumulates
    /// gradients for the encoder, head and codebook. For IBAL it first
    /// updates the simulated adversary on the current received block.
    pub fn compute_gradients<R: Rng + ?Sized>(
        &mut self,
        x: &Array2<S>,
        labels: &[usize],
        snr_db: f64,
        rng: &mut R,
    ) -> Result<LossComponents> {
        let task = self.spec.task;
        let mu = self.encoder.forward(x.clone())?;
        let (z, eps) = self.sample_posterior(&mu, rng);
        let (a, norms_a) = channel::power_normalize_rows(&z)?;
        let mut comps = LossComponents::default();

        // transmitter side of the mechanism
        let mut dp_state = None;
        let mut vq_state = None;
        let received = if self.digital() {
            let Mechanism::Lbvq(cb) = &self.mechanism else { unreachable!() };
            let (idx, q) = vq_quantize(&a, cb)?;
            let qam = Qam::new(cb.size() as u32)?;
            let flat: Vec<u32> = idx.iter().copied().collect();
            let rx = channel::transmit_indices(&qam, &flat, snr_db, rng)?;
            let rx = Array2::from_shape_vec(idx.raw_dim(), rx).expect("same shape");
            let l = vq_loss(&a, &q, &idx, cb);
            self.usage.resize(cb.size(), 0);
            for &j in idx.iter() {
                self.usage[j as usize] += 1;
            }
            self.last_segments = Some(segments(&a, cb.seg_dim()));
            comps.vq = l.value.to_f64().unwrap_or(f64::NAN);
            let received = cb.lookup(&rx);
            vq_state = Some(l);
            received
        } else {
            let t = match &self.mechanism {
                Mechanism::Dp(cfg) => {
                    let noisy = dp_noise_rows(&clip_l1(&a, cfg.clip_bound), cfg, rng)?;
                    let (t, nt) = channel::power_normalize_rows(&noisy)?;
                    dp_state = Some((noisy, nt, cfg.clip_bound));
                    t
                }
                Mechanism::Encryption(key) => shuffle_encrypt(&a, key)?,
                _ => a.clone(),
            };
            let mut r = t;
            channel::add_awgn_rows(&mut r, snr_db, rng)?;
            r
        };

        // simulated adversary: (a) its own update, (b) gradient it exerts
        let mut g_sim = None;
        if let (Some(cfg), Some(sim)) = (self.ibal().cloned(), self.sim_adversary.as_mut()) {
            let recon = sim.forward(received.clone());
            let (_, g) = loss::mse(&recon, x);
            sim.backward(g);
            self.opt_sim.step(sim.params_mut());
            let recon = sim.forward(received.clone());
            let (m, g) = loss::mse(&recon, x);
            let w: S = lit(-cfg.lambda_adv);
            g_sim = Some(sim.backward(g.mapv(|v| v * w)));
            sim.zero_grad();
            comps.sim_mse = m.to_f64().unwrap_or(f64::NAN);
            comps.adversarial = -cfg.lambda_adv * comps.sim_mse;
        }

        // receiver
        let head_in = match &self.mechanism {
            Mechanism::Encryption(key) if !self.digital() => shuffle_decrypt(&received, key)?,
            _ => received,
        };
        let logits = self.head.forward(head_in)?;
        let (ce, g_logits) = task_loss(task, &logits, labels)?;
        comps.task = ce.to_f64().unwrap_or(f64::NAN);
        let g_head_in = self.head.backward(g_logits);

        let mut g_r = match &self.mechanism {
            Mechanism::Encryption(key) if !self.digital() => shuffle_encrypt(&g_head_in, key)?,
            _ => g_head_in,
        };
        if let Some(g) = g_sim {
            g_r += &g;
        }

        let g_a = if let Some(l) = vq_state {
            // straight-through: the received codeword gradient lands on the features
            let Mechanism::Lbvq(cb) = &mut self.mechanism else { unreachable!() };
            cb.codewords.grad += &l.grad_codebook;
            g_r + &l.grad_features
        } else {
            match (&self.mechanism, dp_state) {
                (Mechanism::Dp(_), Some((noisy, nt, bound))) => {
                    let g_noisy = channel::power_normalize_rows_backward(&noisy, &nt, &g_r);
                    clip_l1_backward(&a, bound, &g_noisy)
                }
                (Mechanism::Encryption(key), _) => shuffle_decrypt(&g_r, key)?,
                _ => g_r,
            }
        };
        let g_z = channel::power_normalize_rows_backward(&z, &norms_a, &g_a);

        let mut g_mu = g_z.clone();
        if let (Some(eps), Some(cfg)) = (eps, self.ibal().cloned()) {
            let lv = self.encoder.logvar.as_ref().expect("variational encoder").value.clone();
            let lv_rows = lv.broadcast(mu.raw_dim()).expect("1 × d").to_owned();
            let (kl, gk_mu, gk_lv) = loss::gaussian_kl(&mu, &lv_rows);
            let w: S = lit(cfg.lambda_ib);
            comps.rate = cfg.lambda_ib * kl.to_f64().unwrap_or(f64::NAN);
            g_mu += &gk_mu.mapv(|v| v * w);
            let std = lv.mapv(|v| (v * lit(0.5)).exp() * lit(0.5));
            let g_lv = (&g_z * &eps * &std + gk_lv.mapv(|v| v * w)).sum_axis(Axis(0)).insert_axis(Axis(0));
            self.encoder.logvar.as_mut().expect("variational encoder").grad += &g_lv;
        }
        self.encoder.backward(g_mu);

        comps.total = comps.sum_of_terms();
        if !comps.total.is_finite() {
            return Err(Error::Divergence {
                step: self.steps as usize,
                detail: format!("{} loss is {:?} ({comps:?})", self.scheme(), comps.total),
            });
        }
        Ok(comps)
    }

    pub fn zero_grad(&mut self) {
        for p in self.trainable() {
            p.zero_grad();
        }
    }

    /// One optimizer step on a batch.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        x: &Array2<S>,
        labels: &[usize],
        snr_db: f64,
        grad_clip: f64,
        rng: &mut R,
    ) -> Result<LossComponents> {
        let comps = match self.compute_gradients(x, labels, snr_db, rng) {
            Ok(c) => c,
            Err(e) => {
                self.zero_grad();
                return Err(e);
            }
        };
        let mut params = self.trainable();
        let norm = clip_grad_norm(&mut params, grad_clip);
        if !norm.is_finite() {
            let step = self.steps;
            self.zero_grad();
            return Err(Error::Divergence { step: step as usize, detail: format!("gradient norm {norm}") });
        }
        let mut opt = std::mem::replace(&mut self.opt, Adam::new(0.0));
        opt.step(self.trainable());
        self.opt = opt;
        self.steps += 1;
        Ok(comps)
    }

    /// Power-normalized features of `x` (posterior samples for variational encoders).
    fn features<R: Rng + ?Sized>(&self, x: &Array2<S>, rng: &mut R) -> Result<Array2<S>> {
        let mu = self.encoder.infer(x.clone())?;
        let (z, _) = self.sample_posterior(&mu, rng);
        Ok(channel::power_normalize_rows(&z)?.0)
    }

    /// Initializes the codebook by k-means over feature segments of `set`
    /// and switches LBVQ to the digital path.
    pub fn init_codebook(&mut self, set: &LabeledImageSet, seed: u64) -> Result<()> {
        let Mechanism::Lbvq(cb) = &self.mechanism else {
            return validation("codebook initialization needs an LBVQ transceiver");
        };
        let (k, m) = (cb.size(), cb.seg_dim());
        let sample = set.subset(2000, seed);
        let mut rng = rng_for(seed, &[tag("kmeans-features")]);
        let feats = self.features(&convert(&sample.images), &mut rng)?;
        let centres = kmeans(&segments(&feats, m), k, 25, seed)?;
        if let Mechanism::Lbvq(cb) = &mut self.mechanism {
            cb.codewords = Param::new(centres);
        }
        self.quantizing = true;
        Ok(())
    }

    /// One pass over `set` in seeded random batch order.
    pub fn train_epoch(&mut self, set: &LabeledImageSet, cfg: &TrainConfig, epoch: usize) -> Result<EpochLog> {
        let start = Instant::now();
        if let MechanismConfig::Lbvq(l) = &self.spec.mechanism {
            if epoch >= l.warmup_epochs && !self.quantizing {
                self.init_codebook(set, rng_for(cfg.seed, &[tag("kmeans"), epoch as u64]).random())?;
            }
        }
        let batches = batch_indices(set.len(), cfg.batch_size, rng_for(cfg.seed, &[tag("batches"), epoch as u64]).random())?;
        let mut rng = rng_for(cfg.seed, &[tag("train-noise"), epoch as u64]);
        let mut mean = LossComponents::default();
        self.usage.iter_mut().for_each(|u| *u = 0);
        self.last_segments = None;
        for idx in &batches {
            let (xb, yb) = set.gather(idx)?;
            let xb: Array2<S> = convert(&xb);
            let comps = self.train_step(&xb, &yb, cfg.snr_train_db, cfg.grad_clip, &mut rng)?;
            mean.accumulate(&comps, idx.len() as f64 / set.len() as f64);
        }
        let mut reseeded = 0;
        if let (Mechanism::Lbvq(cb), Some(segs)) = (&mut self.mechanism, self.last_segments.take()) {
            reseeded = reseed_dead_codewords(cb, &self.usage, &segs, &mut rng_for(cfg.seed, &[tag("reseed"), epoch as u64]));
        }
        Ok(EpochLog { epoch, steps: batches.len(), loss: mean, seconds: start.elapsed().as_secs_f64(), reseeded })
    }

    fn transmit_with<R: Rng + ?Sized>(
        &self,
        x: &Array2<S>,
        key_override: Option<&ShuffleKey>,
        rng: &mut R,
    ) -> Result<(Transmit<S>, Array2<S>)> {
        let a = self.features(x, rng)?;
        let t = match (&self.mechanism, key_override) {
            (Mechanism::Encryption(_), Some(k)) => Transmit::Analog(shuffle_encrypt(&a, k)?),
            (Mechanism::Lbvq(_), _) if !self.quantizing => Transmit::Analog(a.clone()),
            (m, _) => apply_mechanism(&a, m, Mode::Eval, rng.random())?,
        };
        Ok((t, a))
    }

    fn through_channel<R: Rng + ?Sized>(&self, t: Transmit<S>, snr_db: f64, rng: &mut R) -> Result<Interception> {
        Ok(match t {
            Transmit::Analog(mut v) => {
                channel::add_awgn_rows(&mut v, snr_db, rng)?;
                Interception::Analog(to_f32(&v))
            }
            Transmit::Indices { indices, order, .. } => {
                let qam = Qam::new(order)?;
                let flat: Vec<u32> = indices.iter().copied().collect();
                let rx = channel::transmit_indices(&qam, &flat, snr_db, rng)?;
                Interception::Indices(Array2::from_shape_vec(indices.raw_dim(), rx).expect("same shape"), order as usize)
            }
        })
    }

    fn receive(&self, obs: &Interception) -> Result<Array2<S>> {
        match (obs, &self.mechanism) {
            (Interception::Analog(r), Mechanism::Encryption(key)) => shuffle_decrypt(&convert(r), key),
            (Interception::Analog(r), _) => Ok(convert(r)),
            (Interception::Indices(idx, _), Mechanism::Lbvq(cb)) => Ok(cb.lookup(idx)),
            (Interception::Indices(..), _) => validation("index block received by an analog receiver"),
        }
    }

    /// Task logits for `x` sent over the channel at `snr_db`.
    pub fn infer<R: Rng + ?Sized>(&self, x: &Array2<S>, snr_db: f64, rng: &mut R) -> Result<Array2<S>> {
        let (t, _) = self.transmit_with(x, None, rng)?;
        let obs = self.through_channel(t, snr_db, rng)?;
        self.head.infer_task(&self.receive(&obs)?)
    }

    /// What an eavesdropper sees for `x`. `key_override` replaces the shuffle
    /// key, which is how a party without the secret key queries the system.
    pub fn intercept(
        &self,
        x: &Array2<f32>,
        snr_db: f64,
        seed: u64,
        tap: Tap,
        key_override: Option<&ShuffleKey>,
    ) -> Result<Interception> {
        let mut rng = rng_for(seed, &[tag("intercept")]);
        let (t, _) = self.transmit_with(&convert(x), key_override, &mut rng)?;
        let snr = if tap == Tap::PreChannel { channel::NOISELESS } else { snr_db };
        self.through_channel(t, snr, &mut rng)
    }

    /// Accuracy over `set` at `snr_db` with a channel stream fixed by `seed`.
    pub fn evaluate(&self, set: &LabeledImageSet, snr_db: f64, seed: u64) -> Result<Evaluation> {
        if set.is_empty() {
            return validation("cannot evaluate on an empty set");
        }
        let mut rng = rng_for(seed, &[tag("eval")]);
        let targets = set.targets()?;
        let mut correct = 0usize;
        let mut signal_fraction = 0.0;
        for start in (0..set.len()).step_by(256) {
            let end = (start + 256).min(set.len());
            let xb: Array2<S> = convert(&set.images.slice(ndarray::s![start..end, ..]).to_owned());
            let logits = self.infer(&xb, snr_db, &mut rng)?;
            let pred = predictions(self.spec.task, &logits);
            correct += pred.iter().zip(&targets[start..end]).filter(|(p, t)| p == t).count();
            if let Mechanism::Dp(cfg) = &self.mechanism {
                let a = self.features(&xb, &mut rng_for(seed, &[tag("eval-snr"), start as u64]))?;
                let c = clip_l1(&a, cfg.clip_bound);
                let dp_noise = 2.0 * cfg.laplace_scale().powi(2) * c.ncols() as f64;
                for row in c.rows() {
                    let s: f64 = row.iter().map(|v| v.to_f64().unwrap_or(0.0).powi(2)).sum();
                    signal_fraction += s / (s + dp_noise);
                }
            }
        }
        let n = set.len();
        let sigma2 = channel::noise_variance(snr_db);
        let effective_snr_db = match &self.mechanism {
            Mechanism::Dp(_) => {
                let f = signal_fraction / n as f64;
                10.0 * (f / (1.0 - f + sigma2)).log10()
            }
            _ => snr_db,
        };
        Ok(Evaluation { accuracy: correct as f64 / n as f64, n, effective_snr_db })
    }

    pub fn to_bundle(&self, training: serde_json::Value) -> Result<ModelBundle> {
        let mut tensors = Vec::new();
        for (i, p) in self.encoder.params().into_iter().enumerate() {
            tensors.push((format!("encoder.{i:03}"), to_f32(&p.value)));
        }
        for (i, p) in self.head.net.params().into_iter().enumerate() {
            tensors.push((format!("head.{i:03}"), to_f32(&p.value)));
        }
        if let Some(sim) = &self.sim_adversary {
            for (i, p) in sim.params().into_iter().enumerate() {
                tensors.push((format!("sim.{i:03}"), to_f32(&p.value)));
            }
        }
        if let Some(cb) = self.codebook() {
            tensors.push(("codebook".into(), to_f32(&cb.codewords.value)));
        }
        let metadata = serde_json::json!({
            "scheme": self.scheme(),
            "spec": self.spec,
            "quantizing": self.quantizing,
            "training": training,
        });
        Ok(ModelBundle { metadata, tensors })
    }

    pub fn from_bundle(bundle: &ModelBundle) -> Result<Self> {
        let spec: SystemSpec = serde_json::from_value(bundle.metadata["spec"].clone())
            .map_err(|e| Error::Format(format!("bundle spec: {e}")))?;
        let mut tx = Self::new(spec, 0.0, 0)?;
        load_params(tx.encoder.params_mut(), &bundle.group("encoder."), "encoder")?;
        load_params(tx.head.net.params_mut(), &bundle.group("head."), "head")?;
        if let Some(sim) = tx.sim_adversary.as_mut() {
            load_params(sim.params_mut(), &bundle.group("sim."), "simulated adversary")?;
        }
        if let Mechanism::Lbvq(cb) = &mut tx.mechanism {
            load_params(vec![&mut cb.codewords], &bundle.group("codebook"), "codebook")?;
        }
        tx.quantizing = bundle.metadata["quantizing"].as_bool().unwrap_or(false);
        Ok(tx)
    }
}

/// One IBAL training step: the simulated adversary is updated on the current
/// received features, then encoder and head take a step on
/// `L_task − λ_adv·L_sim + λ_ib·KL`.
pub fn ibal_train_step<S: Real, R: Rng + ?Sized>(
    tx: &mut Transceiver<S>,
    x: &Array2<S>,
    labels: &[usize],
    snr_db: f64,
    grad_clip: f64,
    rng: &mut R,
) -> Result<LossComponents> {
    if tx.ibal().is_none() {
        return validation(format!("IBAL step on a {} transceiver", tx.scheme()));
    }
    tx.train_step(x, labels, snr_db, grad_clip, rng)
}

/// Convenience for tests and tools: a freshly trained transceiver.
pub fn train<S: Real>(
    spec: SystemSpec,
    set: &LabeledImageSet,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Transceiver<S>> {
    let mut tx = Transceiver::new(spec, cfg.lr, cfg.seed)?;
    for epoch in 0..cfg.epochs {
        let log = tx.train_epoch(set, cfg, epoch)?;
        on_epoch(&log);
    }
    Ok(tx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{write_corpus, SynthKind, SynthSpec};
    use crate::data::{load_dataset, Split};
    use crate::privacy::{DpConfig, LbvqConfig};
    use crate::rng::rng_from;

    fn tiny_spec(mechanism: MechanismConfig) -> SystemSpec {
        let mut s = SystemSpec::for_scheme(ImageShape::new(16, 16, 3), TaskKind::Multiclass { classes: 3 }, 8, mechanism).unwrap();
        s.encoder.widths = vec![4, 4];
        s.head.hidden = vec![6];
        if let Some(layers) = s.sim_adversary.as_mut() {
            *layers = decoder_layers(8, ImageShape::new(16, 16, 3), &[4, 4]).unwrap();
        }
        s
    }

    fn batch() -> (Array2<f64>, Vec<usize>) {
        let x = Array2::from_shape_fn((4, 16 * 16 * 3), |(i, j)| (((i * 37 + j * 11) % 23) as f64) / 23.0);
        (x, vec![0, 1, 2, 1])
    }

    fn grads(tx: &mut Transceiver<f64>) -> Vec<Array2<f64>> {
        tx.trainable().into_iter().map(|p| p.grad.clone()).collect()
    }

    #[test]
    fn ibal_with_zero_weights_matches_baseline_gradients() {
        let (x, y) = batch();
        let mut base = Transceiver::<f64>::new(tiny_spec(MechanismConfig::None), 1e-3, 5).unwrap();
        let ibal_cfg = IbalConfig { lambda_adv: 0.0, lambda_ib: 0.0, sim_adversary: None };
        let mut ibal = Transceiver::<f64>::new(tiny_spec(MechanismConfig::Ibal(ibal_cfg)), 1e-3, 5).unwrap();
        let cb = base.compute_gradients(&x, &y, 12.0, &mut rng_from(1)).unwrap();
        let ci = ibal.compute_gradients(&x, &y, 12.0, &mut rng_from(1)).unwrap();
        assert!((cb.total - ci.total).abs() < 1e-12);
        for (a, b) in grads(&mut base).iter().zip(grads(&mut ibal).iter()) {
            for (u, v) in a.iter().zip(b.iter()) {
                assert!((u - v).abs() <= 1e-6 * (1.0 + u.abs()), "{u} vs {v}");
            }
        }
    }

    #[test]
    fn loss_components_sum_to_total() {
        let (x, y) = batch();
        let mut tx = Transceiver::<f64>::new(tiny_spec(MechanismConfig::Ibal(IbalConfig::default())), 1e-3, 2).unwrap();
        for s in 0..3 {
            let c = ibal_train_step(&mut tx, &x, &y, 12.0, 5.0, &mut rng_from(s)).unwrap();
            assert!((c.total - c.sum_of_terms()).abs() < 1e-6);
            assert!(c.rate > 0.0 && c.adversarial < 0.0);
        }
        let mut base = Transceiver::<f64>::new(tiny_spec(MechanismConfig::None), 1e-3, 2).unwrap();
        assert!(ibal_train_step(&mut base, &x, &y, 12.0, 5.0, &mut rng_from(0)).is_err());
    }

    #[test]
    fn every_scheme_steps_and_round_trips_through_a_bundle() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &SynthSpec { kind: SynthKind::Objects, name: "obj".into(), train: 60, test: 30, seed: 1 }).unwrap();
        let train_set = load_dataset("obj", dir.path(), Split::Train).unwrap();
        let test_set = load_dataset("obj", dir.path(), Split::Test).unwrap();
        let task = train_set.task().unwrap();
        let cfg = TrainConfig { epochs: 2, batch_size: 32, ..Default::default() };
        let mechs = [
            MechanismConfig::None,
            MechanismConfig::Dp(DpConfig::new(0.9, 1.0).unwrap()),
            MechanismConfig::Encryption { key_hex: "000102030405060708090a0b0c0d0e0f".into() },
            MechanismConfig::Ibal(IbalConfig::default()),
            MechanismConfig::Lbvq(LbvqConfig::default()),
        ];
        for m in mechs {
            let spec = SystemSpec::for_scheme(train_set.shape, task, 128, m).unwrap();
            let mut logs = Vec::new();
            let tx = train::<f32>(spec, &train_set, &cfg, |l| logs.push(l.clone())).unwrap();
            assert_eq!(logs.len(), 2);
            let e1 = tx.evaluate(&test_set, 12.0, 9).unwrap();
            let bundle = tx.to_bundle(serde_json::json!({"epochs": 2})).unwrap();
            let path = dir.path().join(format!("{}.bundle", tx.scheme()));
            bundle.save(&path).unwrap();
            let back = Transceiver::<f32>::from_bundle(&ModelBundle::load(&path).unwrap()).unwrap();
            let e2 = back.evaluate(&test_set, 12.0, 9).unwrap();
            assert_eq!(e1, e2, "{}", tx.scheme());
            assert_eq!(back.cost(), tx.cost());
            let obs = tx.intercept(&test_set.images, 12.0, 1, Tap::PostChannel, None).unwrap();
            assert_eq!(obs.len(), test_set.len());
            match (&obs, tx.scheme()) {
                (Interception::Indices(i, 16), "lbvq") => assert_eq!(i.ncols(), 32),
                (Interception::Analog(a), s) if s != "lbvq" => assert_eq!(a.ncols(), 128),
                (o, s) => panic!("{s}: {o:?}"),
            }
        }
    }
}
