//! Black-box model-inversion attacker. It only sees the victim through the
//! [`Oracle`] trait: images in, intercepted transmissions out.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::channel::NOISELESS;
use crate::codec::{decoder_layers, task_loss};
use crate::data::{batch_indices, ImageShape, LabeledImageSet};
use crate::error::{validation, Error, Result};
use crate::metrics::{mi_leakage, per_image_mse, MiConfig};
use crate::nn::{loss, Adam, LayerSpec, Sequential};
use crate::privacy::ShuffleKey;
use crate::rng::{self, rng_for, tag};
use crate::system::{Interception, Tap, Transceiver};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    AnalogFeatures,
    CodebookIndices,
}

/// Query access to a deployed transmitter.
pub trait Oracle {
    fn input_kind(&self) -> InputKind;
    /// Transmissions for `images` as seen by the eavesdropper.
    fn query(&self, images: &Array2<f32>, seed: u64) -> Result<Interception>;
}

/// Oracle over a trained transceiver at a fixed test SNR. With
/// `key_override` an encryption victim is queried under that key instead of
/// its own secret one.
pub struct TransceiverOracle<'a> {
    tx: &'a Transceiver<f32>,
    pub snr_db: f64,
    pub tap: Tap,
    pub key_override: Option<ShuffleKey>,
}

impl<'a> TransceiverOracle<'a> {
    pub fn new(tx: &'a Transceiver<f32>, snr_db: f64, tap: Tap) -> Self {
        Self { tx, snr_db, tap, key_override: None }
    }

    pub fn without_key(mut self, guess_seed: u64) -> Self {
        self.key_override = Some(ShuffleKey::from_seed(guess_seed, self.tx.spec.encoder.d));
        self
    }
}

impl Oracle for TransceiverOracle<'_> {
    fn input_kind(&self) -> InputKind {
        if self.tx.codebook().is_some() && self.tx.quantizing {
            InputKind::CodebookIndices
        } else {
            InputKind::AnalogFeatures
        }
    }

    fn query(&self, images: &Array2<f32>, seed: u64) -> Result<Interception> {
        let snr = if self.tap == Tap::PreChannel { NOISELESS } else { self.snr_db };
        self.tx.intercept(images, snr, seed, self.tap, self.key_override.as_ref())
    }
}

fn kind_of(i: &Interception) -> InputKind {
    match i {
        Interception::Analog(_) => InputKind::AnalogFeatures,
        Interception::Indices(..) => InputKind::CodebookIndices,
    }
}

pub struct AttackPairs {
    pub intercepted: Interception,
    pub originals: Array2<f32>,
}

impl AttackPairs {
    pub fn len(&self) -> usize {
        self.originals.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Queries the oracle on `n` images drawn from `images` by `seed`.
pub fn collect_attack_pairs(oracle: &dyn Oracle, images: &Array2<f32>, n: usize, seed: u64) -> Result<AttackPairs> {
    if n == 0 {
        return validation("attack pair count must be positive");
    }
    if n > images.nrows() {
        return validation(format!("{n} attack pairs requested from {} images", images.nrows()));
    }
    let mut idx = rng::permutation(&mut rng_for(seed, &[tag("attack-pairs")]), images.nrows());
    idx.truncate(n);
    let originals = images.select(Axis(0), &idx);
    let mut parts = Vec::new();
    for (b, start) in (0..n).step_by(256).enumerate() {
        let end = (start + 256).min(n);
        let batch = originals.slice(ndarray::s![start..end, ..]).to_owned();
        parts.push(oracle.query(&batch, rng::derive_seed(seed, &[tag("query"), b as u64]))?);
    }
    let intercepted = match &parts[0] {
        Interception::Analog(_) => {
            let views: Vec<_> = parts.iter().map(|p| match p {
                Interception::Analog(a) => Ok(a.view()),
                _ => validation("oracle changed transmission kind"),
            }).collect::<Result<_>>()?;
            Interception::Analog(ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Format(e.to_string()))?)
        }
        Interception::Indices(_, k) => {
            let views: Vec<_> = parts.iter().map(|p| match p {
                Interception::Indices(i, _) => Ok(i.view()),
                _ => validation("oracle changed transmission kind"),
            }).collect::<Result<_>>()?;
            Interception::Indices(ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Format(e.to_string()))?, *k)
        }
    };
    Ok(AttackPairs { intercepted, originals })
}

/// Frozen conv feature extractor for the perceptual loss, trained once on
/// the task labels of a corpus.
pub struct PerceptualNet {
    pub shape: ImageShape,
    features: Sequential<f32>,
}

impl PerceptualNet {
    fn layers(shape: ImageShape) -> Vec<LayerSpec> {
        let (h, w, c) = (shape.height, shape.width, shape.channels);
        vec![
            LayerSpec::conv(h, w, c, 16, 3, 2, 1),
            LayerSpec::Relu,
            LayerSpec::conv(h / 2, w / 2, 16, 32, 3, 2, 1),
            LayerSpec::Relu,
        ]
    }

    pub fn train(set: &LabeledImageSet, epochs: usize, seed: u64) -> Result<Self> {
        let shape = set.shape;
        let task = set.task()?;
        let mut rng = rng_for(seed, &[tag("perceptual-init")]);
        let mut features = Sequential::new(shape.len(), &Self::layers(shape), &mut rng)?;
        let outputs = match task {
            crate::data::TaskKind::Multiclass { classes } => classes,
            crate::data::TaskKind::BinaryAttribute => 1,
        };
        let mut head = Sequential::new(features.output_dim(), &[LayerSpec::Linear { input: features.output_dim(), output: outputs }], &mut rng)?;
        let mut opt = Adam::new(1e-3);
        for epoch in 0..epochs {
            for idx in batch_indices(set.len(), 128, rng::derive_seed(seed, &[tag("perceptual-batches"), epoch as u64]))? {
                let (x, y) = set.gather(&idx)?;
                let logits = head.forward(features.forward(x));
                let (l, g) = task_loss(task, &logits, &y)?;
                if !l.is_finite() {
                    return Err(Error::Divergence { step: epoch, detail: "perceptual network loss is not finite".into() });
                }
                let g = head.backward(g);
                features.backward(g);
                let mut params = features.params_mut();
                params.extend(head.params_mut());
                opt.step(params);
            }
        }
        Ok(Self { shape, features })
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.features.specs()
    }

    pub fn embed(&self, x: &Array2<f32>) -> Array2<f32> {
        self.features.infer(x.clone())
    }

    /// Per-image mean squared feature distance.
    pub fn distance(&self, a: &Array2<f32>, b: &Array2<f32>) -> Vec<f64> {
        let (fa, fb) = (self.embed(a), self.embed(b));
        fa.rows()
            .into_iter()
            .zip(fb.rows())
            .map(|(x, y)| x.iter().zip(y.iter()).map(|(&p, &q)| (p as f64 - q as f64).powi(2)).sum::<f64>() / x.len() as f64)
            .collect()
    }

    /// Batch-mean feature MSE and its gradient w.r.t. `pred`.
    fn loss_and_grad(&mut self, pred: &Array2<f32>, target_features: &Array2<f32>) -> (f32, Array2<f32>) {
        let f = self.features.forward(pred.clone());
        let (l, g) = loss::mse(&f, target_features);
        let gx = self.features.backward(g);
        self.features.zero_grad();
        (l, gx)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackerSpec {
    pub input_kind: InputKind,
    pub input_dim: usize,
    pub image: ImageShape,
    /// Transposed-conv stage widths (the encoder's widths reversed).
    pub decoder_widths: Vec<usize>,
    pub mse_weight: f64,
    pub perceptual_weight: f64,
    pub batch_size: usize,
    pub lr: f64,
    /// Share of the pairs held out to pick the best epoch by pixel MSE.
    pub validation_fraction: f64,
}

impl AttackerSpec {
    /// Decoder mirroring an encoder with the given widths.
    pub fn mirror(input_kind: InputKind, input_dim: usize, image: ImageShape, encoder_widths: &[usize]) -> Self {
        Self {
            input_kind,
            input_dim,
            image,
            decoder_widths: encoder_widths.iter().rev().copied().collect(),
            mse_weight: 1.0,
            perceptual_weight: 1.0,
            batch_size: 128,
            lr: 1e-3,
            validation_fraction: 0.1,
        }
    }
}

pub struct Attacker {
    pub spec: AttackerSpec,
    pub decoder: Sequential<f32>,
    /// Mean training loss per epoch.
    pub curve: Vec<f64>,
    /// Held-out pixel MSE per epoch; empty without a validation split.
    pub validation: Vec<f64>,
    /// Epoch whose weights were kept (1-based, 0 for the untrained net).
    pub best_epoch: usize,
}

/// Trains the inversion network on `pairs` to minimize
/// `mse_weight·MSE + perceptual_weight·perceptual distance`.
pub fn train_attacker(
    pairs: &AttackPairs,
    spec: &AttackerSpec,
    perceptual: Option<&mut PerceptualNet>,
    epochs: usize,
    seed: u64,
) -> Result<Attacker> {
    if pairs.is_empty() {
        return validation("no attack pairs");
    }
    if kind_of(&pairs.intercepted) != spec.input_kind || pairs.intercepted.input_dim() != spec.input_dim {
        return validation("intercepted transmissions do not match the attacker's input kind");
    }
    if spec.perceptual_weight > 0.0 && perceptual.is_none() {
        return validation("perceptual weight set without a perceptual network");
    }
    let mut perceptual = perceptual;
    let layers = decoder_layers(spec.input_dim, spec.image, &spec.decoder_widths)?;
    let mut decoder = Sequential::new(spec.input_dim, &layers, &mut rng_for(seed, &[tag("attacker-init")]))?;
    let mut opt = Adam::new(spec.lr);
    if !(0.0..0.5).contains(&spec.validation_fraction) {
        return validation(format!("validation fraction {} outside [0, 0.5)", spec.validation_fraction));
    }
    let n_val = (pairs.len() as f64 * spec.validation_fraction).round() as usize;
    let n_train = pairs.len() - n_val;
    if n_train == 0 {
        return validation("no attack pairs left for training");
    }
    let all = pairs.intercepted.to_input();
    let inputs = all.slice(ndarray::s![..n_train, ..]).to_owned();
    let val_x = all.slice(ndarray::s![n_train.., ..]).to_owned();
    let val_y = pairs.originals.slice(ndarray::s![n_train.., ..]).to_owned();
    let val_mse = |d: &Sequential<f32>| -> f64 {
        let mut sum = 0.0;
        for start in (0..n_val).step_by(256) {
            let end = (start + 256).min(n_val);
            let pred = d.infer(val_x.slice(ndarray::s![start..end, ..]).to_owned());
            let diff = pred - val_y.slice(ndarray::s![start..end, ..]);
            sum += diff.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
        }
        sum / (n_val * val_y.ncols()).max(1) as f64
    };
    let mut curve = Vec::with_capacity(epochs);
    let mut val_curve = Vec::new();
    let mut best = (n_val > 0).then(|| (val_mse(&decoder), 0usize, decoder.tensors()));
    let mut step = 0usize;
    for epoch in 0..epochs {
        let mut total = 0.0;
        for idx in batch_indices(n_train, spec.batch_size, rng::derive_seed(seed, &[tag("attacker-batches"), epoch as u64]))? {
            let x = inputs.select(Axis(0), &idx);
            let target = pairs.originals.select(Axis(0), &idx);
            let pred = decoder.forward(x);
            let (m, gm) = loss::mse(&pred, &target);
            let mut l = spec.mse_weight as f32 * m;
            let mut g = gm.mapv(|v| v * spec.mse_weight as f32);
            if spec.perceptual_weight > 0.0 {
                let net = perceptual.as_deref_mut().expect("checked above");
                let tf = net.embed(&target);
                let (p, gp) = net.loss_and_grad(&pred, &tf);
                l += spec.perceptual_weight as f32 * p;
                g.scaled_add(spec.perceptual_weight as f32, &gp);
            }
            if !l.is_finite() {
                return Err(Error::Divergence { step, detail: format!("attacker loss {l} at epoch {epoch}") });
            }
            total += l as f64 * idx.len() as f64;
            decoder.backward(g);
            opt.step(decoder.params_mut());
            step += 1;
        }
        curve.push(total / n_train as f64);
        if let Some((best_mse, best_epoch, tensors)) = best.as_mut() {
            let v = val_mse(&decoder);
            val_curve.push(v);
            if v < *best_mse {
                *best_mse = v;
                *best_epoch = epoch + 1;
                *tensors = decoder.tensors();
            }
        }
    }
    let best_epoch = match best {
        Some((_, e, tensors)) => {
            decoder.load_tensors(&tensors)?;
            e
        }
        None => epochs,
    };
    Ok(Attacker { spec: spec.clone(), decoder, curve, validation: val_curve, best_epoch })
}

/// Loss of an untrained attacker on the first batch, for checking that the
/// loss weights combine as documented.
pub fn initial_loss(pairs: &AttackPairs, spec: &AttackerSpec, perceptual: Option<&mut PerceptualNet>, seed: u64) -> Result<f64> {
    let layers = decoder_layers(spec.input_dim, spec.image, &spec.decoder_widths)?;
    let decoder = Sequential::<f32>::new(spec.input_dim, &layers, &mut rng_for(seed, &[tag("attacker-init")]))?;
    let n = spec.batch_size.min(pairs.len());
    let x = pairs.intercepted.rows(0..n).to_input();
    let target = pairs.originals.slice(ndarray::s![0..n, ..]).to_owned();
    let pred = decoder.infer(x);
    let (m, _) = loss::mse(&pred, &target);
    let mut l = spec.mse_weight * m as f64;
    if spec.perceptual_weight > 0.0 {
        let net = perceptual.ok_or_else(|| Error::Validation("perceptual network missing".into()))?;
        l += spec.perceptual_weight * net.distance(&pred, &target).iter().sum::<f64>() / n as f64;
    }
    Ok(l)
}

pub struct AttackResult {
    pub reconstructions: Array2<f32>,
    pub mse: Vec<f64>,
    pub perceptual: Vec<f64>,
    pub mi_leakage: Option<f64>,
}

impl AttackResult {
    pub fn mean_mse(&self) -> f64 {
        self.mse.iter().sum::<f64>() / self.mse.len().max(1) as f64
    }
}

/// Reconstructions for intercepted transmissions.
pub fn reconstruct(attacker: &Attacker, intercepted: &Interception) -> Result<Array2<f32>> {
    if kind_of(intercepted) != attacker.spec.input_kind || intercepted.input_dim() != attacker.spec.input_dim {
        return validation("intercepted transmissions do not match the attacker's input kind");
    }
    let x = intercepted.to_input();
    let mut parts = Vec::new();
    for start in (0..x.nrows()).step_by(256) {
        let end = (start + 256).min(x.nrows());
        parts.push(attacker.decoder.infer(x.slice(ndarray::s![start..end, ..]).to_owned()));
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Format(e.to_string()))
}

/// Runs the attacker on held-out pairs and scores it: per-image MSE and
/// perceptual distance, and MI leakage when `mi` is given.
pub fn attack(
    attacker: &Attacker,
    pairs: &AttackPairs,
    perceptual: Option<&PerceptualNet>,
    mi: Option<(&MiConfig, u64)>,
) -> Result<AttackResult> {
    let reconstructions = reconstruct(attacker, &pairs.intercepted)?;
    let mse = per_image_mse(&pairs.originals, &reconstructions)?;
    let perceptual = perceptual.map(|p| p.distance(&reconstructions, &pairs.originals)).unwrap_or_default();
    let mi_leakage = match mi {
        Some((cfg, seed)) => Some(mi_leakage(&pairs.originals, &reconstructions, attacker.spec.image, cfg, seed)?),
        None => None,
    };
    Ok(AttackResult { reconstructions, mse, perceptual, mi_leakage })
}

/// MSE of predicting every pixel by its mean over `images`.
pub fn constant_predictor_mse(images: &Array2<f32>) -> f64 {
    let mean = images.mean_axis(Axis(0)).expect("non-empty");
    images
        .rows()
        .into_iter()
        .map(|r| r.iter().zip(mean.iter()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>())
        .sum::<f64>()
        / images.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{write_corpus, SynthKind, SynthSpec};
    use crate::data::{load_dataset, Split};
    use crate::privacy::MechanismConfig;
    use crate::system::{train, SystemSpec, TrainConfig};

    struct NoiseOracle;

    impl Oracle for NoiseOracle {
        fn input_kind(&self) -> InputKind {
            InputKind::AnalogFeatures
        }
        fn query(&self, images: &Array2<f32>, seed: u64) -> Result<Interception> {
            use rand::Rng;
            let mut rng = rng::rng_from(seed);
            Ok(Interception::Analog(Array2::from_shape_fn((images.nrows(), 16), |_| rng.random::<f32>() - 0.5)))
        }
    }

    fn corpus() -> (tempfile::TempDir, LabeledImageSet) {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &SynthSpec { kind: SynthKind::Objects, name: "obj".into(), train: 200, test: 10, seed: 3 }).unwrap();
        let set = load_dataset("obj", dir.path(), Split::Train).unwrap();
        (dir, set)
    }

    #[test]
    fn pair_collection_contract() {
        let (_d, set) = corpus();
        let a = collect_attack_pairs(&NoiseOracle, &set.images, 50, 1).unwrap();
        let b = collect_attack_pairs(&NoiseOracle, &set.images, 50, 1).unwrap();
        assert_eq!(a.len(), 50);
        assert_eq!(a.intercepted, b.intercepted);
        assert_eq!(a.originals, b.originals);
        assert!(collect_attack_pairs(&NoiseOracle, &set.images, 0, 1).is_err());
        assert!(collect_attack_pairs(&NoiseOracle, &set.images, 201, 1).is_err());
    }

    #[test]
    fn zero_perceptual_weight_is_pure_mse() {
        let (_d, set) = corpus();
        let pairs = collect_attack_pairs(&NoiseOracle, &set.images, 64, 2).unwrap();
        let mut spec = AttackerSpec::mirror(InputKind::AnalogFeatures, 16, set.shape, &[32, 64, 128, 128]);
        spec.perceptual_weight = 0.0;
        let mut net = PerceptualNet::train(&set, 1, 0).unwrap();
        let with_net = initial_loss(&pairs, &spec, Some(&mut net), 4).unwrap();
        let pure = initial_loss(&pairs, &AttackerSpec { mse_weight: 1.0, ..spec.clone() }, None, 4).unwrap();
        assert!((with_net - pure).abs() < 1e-6);
        let trained = train_attacker(&pairs, &spec, None, 1, 4).unwrap();
        assert!((trained.curve[0] - pure).abs() < 0.05);
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let (_d, set) = corpus();
        let pairs = collect_attack_pairs(&NoiseOracle, &set.images, 32, 2).unwrap();
        let spec = AttackerSpec::mirror(InputKind::CodebookIndices, 512, set.shape, &[32, 64, 128, 128]);
        assert!(train_attacker(&pairs, &spec, None, 1, 0).is_err());
    }

    #[test]
    fn encryption_oracle_without_key_differs_from_keyed_view() {
        let (_d, set) = corpus();
        let spec = SystemSpec::for_scheme(
            set.shape,
            set.task().unwrap(),
            128,
            MechanismConfig::Encryption { key_hex: "0f0e0d0c0b0a09080706050403020100".into() },
        )
        .unwrap();
        let tx = train::<f32>(spec, &set, &TrainConfig { epochs: 1, batch_size: 64, ..Default::default() }, |_| {}).unwrap();
        let keyed = TransceiverOracle::new(&tx, NOISELESS, Tap::PreChannel);
        let guess = TransceiverOracle::new(&tx, NOISELESS, Tap::PreChannel).without_key(99);
        let x = set.images.slice(ndarray::s![0..4, ..]).to_owned();
        let (Interception::Analog(a), Interception::Analog(b)) = (keyed.query(&x, 1).unwrap(), guess.query(&x, 1).unwrap()) else {
            panic!("analog expected")
        };
        assert_eq!(a.ncols(), 128);
        assert_ne!(a, b);
        let mut sa: Vec<f32> = a.row(0).to_vec();
        let mut sb: Vec<f32> = b.row(0).to_vec();
        sa.sort_by(f32::total_cmp);
        sb.sort_by(f32::total_cmp);
        assert_eq!(sa, sb);
    }

    #[test]
    fn noise_inputs_fall_back_to_constant_predictor() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &SynthSpec { kind: SynthKind::Objects, name: "obj".into(), train: 2000, test: 500, seed: 5 }).unwrap();
        let train_set = load_dataset("obj", dir.path(), Split::Train).unwrap();
        let test_set = load_dataset("obj", dir.path(), Split::Test).unwrap();
        let pairs = collect_attack_pairs(&NoiseOracle, &train_set.images, 2000, 1).unwrap();
        let mut spec = AttackerSpec::mirror(InputKind::AnalogFeatures, 16, train_set.shape, &[32, 64, 128, 128]);
        spec.perceptual_weight = 0.0;
        let attacker = train_attacker(&pairs, &spec, None, 8, 2).unwrap();
        assert_eq!(attacker.validation.len(), 8);
        let test_pairs = collect_attack_pairs(&NoiseOracle, &test_set.images, 500, 3).unwrap();
        let r = attack(&attacker, &test_pairs, None, None).unwrap();
        let c = constant_predictor_mse(&test_set.images);
        assert!(r.mean_mse() <= 1.05 * c, "attacker {} vs constant {c}", r.mean_mse());
    }
}
