//! Train, evaluate and attack one (scheme, seed) run. Everything a run
//! produces lives under `<output>/<label>/<seed>/`:
//!
//! ```text
//! bundle        trained model (see tosc_core::codec::ModelBundle)
//! train.log     run header, per-epoch loss components, evaluation lines
//! metrics.csv   one row per test SNR
//! timing.csv    wall-clock profile, kept out of metrics.csv
//! attack.json   attacker settings, learning curves, perceptual network
//! grids/        originals over reconstructions, one PNG per attacked SNR
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tosc_core::adversary::{
    attack, collect_attack_pairs, train_attacker, AttackerSpec, Oracle, PerceptualNet, TransceiverOracle,
};
use tosc_core::codec::ModelBundle;
use tosc_core::data::synth::{write_corpus, SynthSpec};
use tosc_core::data::{attribute_view, load_dataset, CorpusMeta, LabeledImageSet, Preprocess, Split};
use tosc_core::metrics::{hardware_descriptor, profile, psnr_from_mse, MetricsRecord, TimingRecord};
use tosc_core::rng::{derive_seed, tag};
use tosc_core::system::{SystemSpec, Transceiver};
use tosc_core::Error;

use crate::config::{ExperimentConfig, Scheme};
use crate::error::{BenchError, Result};

pub const BUNDLE: &str = "bundle";
pub const TRAIN_LOG: &str = "train.log";
pub const METRICS: &str = "metrics.csv";
pub const TIMING: &str = "timing.csv";
pub const ATTACK: &str = "attack.json";
pub const GRIDS: &str = "grids";

const SYNTH_TRAIN: usize = 10_000;
const SYNTH_TEST: usize = 2000;

pub struct Corpus {
    pub train: LabeledImageSet,
    pub test: LabeledImageSet,
    pub preprocess: String,
}

fn preprocess_name(p: Preprocess) -> String {
    match p {
        Preprocess::None => "none",
        Preprocess::CenterCropResize => "center_crop_resize",
    }
    .to_string()
}

/// Loads the configured corpus from the data root, or generates its
/// procedural stand-in there when the corpus is absent and the config
/// names one.
pub fn load_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    let root = cfg.data_root();
    let ds = &cfg.dataset;
    let meta_path = root.join(&ds.name).join("corpus.json");
    let (name, subset, preprocess) = if meta_path.is_file() {
        let meta: CorpusMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?)
            .map_err(|e| Error::Integrity { path: meta_path.clone(), reason: e.to_string() })?;
        (ds.name.clone(), true, preprocess_name(meta.preprocess))
    } else if let Some(kind) = ds.synthetic {
        let train = ds.train_images.unwrap_or(SYNTH_TRAIN);
        let test = ds.test_images.unwrap_or(SYNTH_TEST);
        let name = format!("{}-synthetic-{train}-{test}-{}", ds.name, ds.synthetic_seed);
        let marker = root.join(&name).join("complete");
        if !marker.is_file() {
            fs::create_dir_all(&root)?;
            write_corpus(&root, &SynthSpec { kind, name: name.clone(), train, test, seed: ds.synthetic_seed })?;
            fs::write(&marker, "")?;
        }
        (name, false, "synthetic".to_string())
    } else {
        return Err(Error::NotFound(format!("corpus {:?} under {} (and no synthetic fallback configured)", ds.name, root.display())).into());
    };
    let mut train = load_dataset(&name, &root, Split::Train)?;
    let mut test = load_dataset(&name, &root, Split::Test)?;
    if subset {
        if let Some(n) = ds.train_images.filter(|&n| n < train.len()) {
            train = train.subset(n, derive_seed(ds.subset_seed, &[tag("train-subset")]));
        }
        if let Some(n) = ds.test_images.filter(|&n| n < test.len()) {
            test = test.subset(n, derive_seed(ds.subset_seed, &[tag("test-subset")]));
        }
    }
    if let Some(a) = &ds.attribute {
        train = attribute_view(&train, a)?;
        test = attribute_view(&test, a)?;
    }
    Ok(Corpus { train, test, preprocess })
}

fn header(cfg: &ExperimentConfig, seed: u64, what: &str) -> String {
    let mut h = format!("# tosc {what} scheme={} label={} seed={seed} config_hash={}\n", cfg.scheme.as_str(), cfg.label, cfg.hash());
    if let Some(p) = &cfg.preset {
        h.push_str(&format!("# preset {p}\n"));
    }
    for d in cfg.deviations() {
        h.push_str(&format!("# deviation {d}\n"));
    }
    h
}

fn append(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub bundle: PathBuf,
    pub epochs: usize,
    pub final_loss: f64,
}

/// Trains the configured scheme at `snr_train_db` and writes the bundle and
/// `train.log`.
pub fn run_train(cfg: &ExperimentConfig, seed: u64) -> Result<TrainSummary> {
    cfg.validate().map_err(|(k, m)| BenchError::config(format!("{k}: {m}")))?;
    let dir = cfg.run_dir(seed);
    fs::create_dir_all(&dir)?;
    let corpus = load_corpus(cfg)?;
    let spec = SystemSpec::for_scheme(corpus.train.shape, corpus.train.task()?, cfg.d, cfg.mechanism())?;
    let log = dir.join(TRAIN_LOG);
    fs::write(&log, header(cfg, seed, "train"))?;
    append(&log, "epoch\tsteps\ttask\tadversarial\trate\tvq\ttotal\tsim_mse\treseeded\tseconds\n")?;
    let tcfg = cfg.train_config(seed);
    let mut tx = Transceiver::<f32>::new(spec, tcfg.lr, seed)?;
    let mut final_loss = f64::NAN;
    for epoch in 0..tcfg.epochs {
        let e = match tx.train_epoch(&corpus.train, &tcfg, epoch) {
            Ok(e) => e,
            Err(source) => {
                append(&log, &format!("# failed: {source}\n"))?;
                return Err(BenchError::Run { scheme: cfg.label.clone(), snr_db: cfg.snr_train_db, source });
            }
        };
        let l = &e.loss;
        append(
            &log,
            &format!(
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{:.3}\n",
                e.epoch + 1,
                e.steps,
                l.task,
                l.adversarial,
                l.rate,
                l.vq,
                l.total,
                l.sim_mse,
                e.reseeded,
                e.seconds
            ),
        )?;
        final_loss = l.total;
    }
    let training = json!({
        "config_hash": cfg.hash(),
        "seed": seed,
        "label": cfg.label,
        "dataset": cfg.dataset_id(),
        "preprocess": corpus.preprocess,
        "train": tcfg,
        "train_images": corpus.train.len(),
        "final_loss": final_loss,
    });
    let bundle = dir.join(BUNDLE);
    tx.to_bundle(training)?.save(&bundle)?;
    Ok(TrainSummary { bundle, epochs: tcfg.epochs, final_loss })
}

fn load_bundle(cfg: &ExperimentConfig, seed: u64) -> Result<(ModelBundle, Transceiver<f32>)> {
    let path = cfg.run_dir(seed).join(BUNDLE);
    let bundle = ModelBundle::load(&path)?;
    let scheme = bundle.metadata["scheme"].as_str().unwrap_or_default().to_string();
    if scheme != cfg.scheme.as_str() {
        return Err(BenchError::config(format!(
            "bundle {} holds a {scheme} model but the config asks for {}",
            path.display(),
            cfg.scheme.as_str()
        )));
    }
    let tx = Transceiver::from_bundle(&bundle)?;
    Ok((bundle, tx))
}

fn base_record(cfg: &ExperimentConfig, seed: u64, preprocess: &str, tx: &Transceiver<f32>) -> MetricsRecord {
    let cost = tx.cost();
    let mut r = MetricsRecord {
        scheme: cfg.label.clone(),
        dataset: cfg.dataset_id(),
        preprocess: preprocess.to_string(),
        seed,
        snr_train_db: cfg.snr_train_db,
        flops: cost.flops,
        params: cost.params,
        config_hash: cfg.hash(),
        ..Default::default()
    };
    match cfg.scheme {
        Scheme::Dp => {
            r.epsilon = Some(cfg.dp.epsilon);
            r.clip_bound = Some(cfg.dp.clip_bound);
        }
        Scheme::Ibal => {
            r.lambda_adv = Some(cfg.ibal.lambda_adv);
            r.lambda_ib = Some(cfg.ibal.lambda_ib);
        }
        Scheme::Lbvq => {
            r.codebook_size = Some(cfg.lbvq.codebook_size);
            r.seg_dim = Some(cfg.lbvq.seg_dim);
        }
        Scheme::Baseline | Scheme::Encryption => {}
    }
    r
}

pub fn write_metrics(path: &Path, rows: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn read_timing(path: &Path) -> Result<Vec<TimingRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Evaluates the trained bundle at every test SNR, writing `metrics.csv`
/// (attack columns empty) and `timing.csv`.
pub fn run_eval(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<MetricsRecord>> {
    let dir = cfg.run_dir(seed);
    let (bundle, tx) = load_bundle(cfg, seed)?;
    let corpus = load_corpus(cfg)?;
    let log = dir.join(TRAIN_LOG);
    append(&log, &header(cfg, seed, "eval"))?;
    let base = base_record(cfg, seed, &corpus.preprocess, &tx);
    let mut rows = Vec::with_capacity(cfg.snr_test_db.len());
    for &snr in &cfg.snr_test_db {
        let ev = tx
            .evaluate(&corpus.test, snr, derive_seed(seed, &[tag("eval"), snr.to_bits()]))
            .map_err(|source| BenchError::Run { scheme: cfg.label.clone(), snr_db: snr, source })?;
        append(&log, &format!("# eval snr_db={snr} accuracy={:.6} n={} effective_snr_db={:.3}\n", ev.accuracy, ev.n, ev.effective_snr_db))?;
        rows.push(MetricsRecord { snr_db: snr, accuracy: ev.accuracy, effective_snr_db: ev.effective_snr_db, ..base.clone() });
    }
    write_metrics(&dir.join(METRICS), &rows)?;
    let sample = corpus.train.images.slice(s![..corpus.train.len().min(cfg.batch_size), ..]).to_owned();
    let p = profile(&bundle, &sample, cfg.batch_size, corpus.train.len())?;
    let timing = TimingRecord {
        scheme: cfg.label.clone(),
        seed,
        epoch_seconds: p.epoch_seconds,
        inference_seconds: p.inference_seconds,
        hardware: hardware_descriptor(),
        config_hash: cfg.hash(),
    };
    let mut w = csv::Writer::from_path(dir.join(TIMING))?;
    w.serialize(&timing)?;
    w.flush()?;
    Ok(rows)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackCell {
    pub snr_db: f64,
    pub attacker: AttackerSpec,
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub curve: Vec<f64>,
    pub validation: Vec<f64>,
    pub best_epoch: usize,
    pub mse: f64,
    pub perceptual: Option<f64>,
    pub mi_leakage: f64,
    pub grid: String,
}

/// Attacks the trained run at each configured SNR: the attacker queries the
/// system on training images (without the key for encrypted victims),
/// learns an inversion network, and is scored on intercepted transmissions
/// of held-out test images. Fills the attack columns of `metrics.csv`.
pub fn run_attack(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<MetricsRecord>> {
    let dir = cfg.run_dir(seed);
    let metrics_path = dir.join(METRICS);
    if !metrics_path.is_file() {
        return Err(Error::NotFound(format!("{} (run eval before attack)", metrics_path.display())).into());
    }
    let mut rows = read_metrics(&metrics_path)?;
    let (_, tx) = load_bundle(cfg, seed)?;
    let corpus = load_corpus(cfg)?;
    let a = &cfg.attack;
    let mut perceptual = if a.perceptual_weight > 0.0 {
        Some(PerceptualNet::train(&corpus.train, a.perceptual_epochs, derive_seed(seed, &[tag("perceptual")]))?)
    } else {
        None
    };
    fs::create_dir_all(dir.join(GRIDS))?;
    let hash = cfg.hash();
    let mut cells = Vec::new();
    for snr in cfg.attack_snrs() {
        let ctx = |source: Error| BenchError::Run { scheme: cfg.label.clone(), snr_db: snr, source };
        let mut oracle = TransceiverOracle::new(&tx, snr, a.tap);
        if cfg.scheme == Scheme::Encryption {
            oracle = oracle.without_key(a.guess_seed);
        }
        let n = a.pairs.min(corpus.train.len());
        let pairs = collect_attack_pairs(&oracle, &corpus.train.images, n, derive_seed(seed, &[tag("attack-pairs"), snr.to_bits()])).map_err(ctx)?;
        let mut spec = AttackerSpec::mirror(oracle.input_kind(), pairs.intercepted.input_dim(), corpus.train.shape, &tx.spec.encoder.widths);
        spec.mse_weight = a.mse_weight;
        spec.perceptual_weight = a.perceptual_weight;
        spec.batch_size = a.batch_size;
        spec.lr = a.lr;
        spec.validation_fraction = a.validation_fraction;
        let attacker = train_attacker(&pairs, &spec, perceptual.as_mut(), a.epochs, derive_seed(seed, &[tag("attacker"), snr.to_bits()])).map_err(ctx)?;
        let victim = TransceiverOracle::new(&tx, snr, a.tap);
        let m = a.test_pairs.min(corpus.test.len());
        let test_pairs = collect_attack_pairs(&victim, &corpus.test.images, m, derive_seed(seed, &[tag("victim-pairs"), snr.to_bits()])).map_err(ctx)?;
        let result = attack(&attacker, &test_pairs, perceptual.as_ref(), Some((&cfg.mi, derive_seed(seed, &[tag("mi"), snr.to_bits()])))).map_err(ctx)?;
        let mse = result.mean_mse();
        let mi = result.mi_leakage.unwrap_or(f64::NAN);
        let grid_name = format!("{}_snr{}.png", cfg.label, snr);
        let k = a.grid_images.min(m);
        write_grid(
            &dir.join(GRIDS).join(&grid_name),
            &test_pairs.originals.slice(s![..k, ..]).to_owned(),
            &result.reconstructions.slice(s![..k, ..]).to_owned(),
            corpus.train.shape,
            &[("config_hash", hash.as_str()), ("seed", &seed.to_string()), ("scheme", &cfg.label), ("snr_db", &snr.to_string())],
        )?;
        for r in rows.iter_mut().filter(|r| r.snr_db == snr) {
            r.attacker_mse = Some(mse);
            r.attacker_psnr_db = Some(psnr_from_mse(mse));
            r.mi_leakage = Some(mi);
        }
        let perceptual_mean = (!result.perceptual.is_empty()).then(|| result.perceptual.iter().sum::<f64>() / result.perceptual.len() as f64);
        cells.push(AttackCell {
            snr_db: snr,
            attacker: spec,
            train_pairs: n,
            test_pairs: m,
            curve: attacker.curve.clone(),
            validation: attacker.validation.clone(),
            best_epoch: attacker.best_epoch,
            mse,
            perceptual: perceptual_mean,
            mi_leakage: mi,
            grid: grid_name,
        });
    }
    write_metrics(&metrics_path, &rows)?;
    let report = json!({
        "config_hash": hash,
        "seed": seed,
        "tap": a.tap,
        "encryption_guess_seed": (cfg.scheme == Scheme::Encryption).then_some(a.guess_seed),
        "perceptual_network": perceptual.as_ref().map(|p| json!({"layers": p.layer_specs(), "epochs": a.perceptual_epochs})),
        "mi": cfg.mi,
        "cells": cells,
    });
    fs::write(dir.join(ATTACK), serde_json::to_string_pretty(&report).expect("attack report serializes") + "\n")?;
    Ok(rows)
}

/// Train, eval and attack in sequence.
pub fn run_all(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<MetricsRecord>> {
    run_train(cfg, seed)?;
    run_eval(cfg, seed)?;
    run_attack(cfg, seed)
}

/// Two-row PNG: originals on top, reconstructions below, 2 px gutters.
pub fn write_grid(
    path: &Path,
    originals: &Array2<f32>,
    recons: &Array2<f32>,
    shape: tosc_core::data::ImageShape,
    text: &[(&str, &str)],
) -> Result<()> {
    const GAP: usize = 2;
    let (h, w, c) = (shape.height, shape.width, shape.channels);
    let n = originals.nrows();
    let gw = n * w + (n + 1) * GAP;
    let gh = 2 * h + 3 * GAP;
    let mut px = vec![255u8; gw * gh * 3];
    for (row, set) in [originals, recons].into_iter().enumerate() {
        for (i, img) in set.rows().into_iter().enumerate() {
            let (x0, y0) = (GAP + i * (w + GAP), GAP + row * (h + GAP));
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..3 {
                        let v = img[(y * w + x) * c + ch.min(c - 1)];
                        px[((y0 + y) * gw + x0 + x) * 3 + ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                    }
                }
            }
        }
    }
    let file = std::io::BufWriter::new(fs::File::create(path)?);
    let mut enc = png::Encoder::new(file, gw as u32, gh as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    for (k, v) in text {
        enc.add_text_chunk(k.to_string(), v.to_string()).map_err(|e| Error::Format(e.to_string()))?;
    }
    let mut writer = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
    writer.write_image_data(&px).map_err(|e| Error::Format(e.to_string()))?;
    writer.finish().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}
