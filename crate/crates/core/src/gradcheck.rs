//! Central finite-difference checks of every trainable operation's
//! analytic gradient, in f64 on small random inputs.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::channel::{power_normalize_rows, power_normalize_rows_backward, NOISELESS};
use crate::data::{ImageShape, TaskKind};
use crate::nn::{loss, LayerSpec, Sequential};
use crate::privacy::{
    clip_l1, clip_l1_backward, shuffle_decrypt, shuffle_encrypt, vq_loss, vq_quantize, Codebook, DpConfig, IbalConfig,
    LbvqConfig, Mechanism, MechanismConfig, ShuffleKey,
};
use crate::rng::{rng_for, tag, StdRng};
use crate::system::{SystemSpec, Transceiver};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, 1e-6)`.
    pub max_rel_error: f64,
    pub checked: usize,
}

const H: f64 = 1e-6;

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn randn(rng: &mut StdRng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.sample(StandardNormal))
}

/// Compares `analytic` with central differences of `f` at `x`.
fn compare(name: &str, x: &Array2<f64>, analytic: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> GradCheck {
    let mut worst = 0.0f64;
    let mut xp = x.clone();
    for (i, &a) in analytic.indexed_iter() {
        let orig = xp[i];
        xp[i] = orig + H;
        let up = f(&xp);
        xp[i] = orig - H;
        let down = f(&xp);
        xp[i] = orig;
        worst = worst.max(rel(a, (up - down) / (2.0 * H)));
    }
    GradCheck { name: name.into(), max_rel_error: worst, checked: analytic.len() }
}

fn weighted(y: &Array2<f64>, w: &Array2<f64>) -> f64 {
    (y * w).sum()
}

fn layer_checks(rng: &mut StdRng, out: &mut Vec<GradCheck>) {
    let cases: Vec<(&str, usize, Vec<LayerSpec>)> = vec![
        ("linear", 5, vec![LayerSpec::Linear { input: 5, output: 4 }]),
        ("conv", 6 * 6 * 2, vec![LayerSpec::conv(6, 6, 2, 3, 3, 2, 1)]),
        ("conv_stride1", 4 * 4 * 2, vec![LayerSpec::conv(4, 4, 2, 2, 3, 1, 1)]),
        ("conv_transpose", 3 * 3 * 2, vec![LayerSpec::conv_transpose(3, 3, 2, 3, 4, 2, 1)]),
        ("relu", 7, vec![LayerSpec::Linear { input: 7, output: 6 }, LayerSpec::Relu]),
        ("sigmoid", 7, vec![LayerSpec::Linear { input: 7, output: 6 }, LayerSpec::Sigmoid]),
    ];
    for (name, input, specs) in cases {
        let mut net = Sequential::<f64>::new(input, &specs, rng).expect("valid test layers");
        let x = randn(rng, 3, input);
        let w = randn(rng, 3, net.output_dim());
        let y = net.forward(x.clone());
        let gx = net.backward(w.clone());
        out.push(compare(&format!("{name}/input"), &x, &gx, |xv| weighted(&net.infer(xv.clone()), &w)));
        let tensors = net.tensors();
        let grads: Vec<Array2<f64>> = net.params().iter().map(|p| p.grad.clone()).collect();
        drop(y);
        for (k, (t, g)) in tensors.iter().zip(&grads).enumerate() {
            let probe = |tv: &Array2<f64>| {
                let mut ts = tensors.clone();
                ts[k] = tv.clone();
                let mut n2 = Sequential::<f64>::new(input, &specs, &mut rng_for(0, &[])).expect("valid");
                n2.load_tensors(&ts).expect("same shapes");
                weighted(&n2.infer(x.clone()), &w)
            };
            out.push(compare(&format!("{name}/param{k}"), t, g, probe));
        }
    }
}

fn loss_checks(rng: &mut StdRng, out: &mut Vec<GradCheck>) {
    let logits = randn(rng, 4, 10);
    let labels = [3, 0, 9, 5];
    let (_, g) = loss::softmax_cross_entropy(&logits, &labels).expect("labels in range");
    out.push(compare("softmax_cross_entropy", &logits, &g, |l| loss::softmax_cross_entropy(l, &labels).expect("ok").0));

    let logit1 = randn(rng, 5, 1);
    let bits = [1, 0, 0, 1, 1];
    let (_, g) = loss::bce_with_logits(&logit1, &bits).expect("binary labels");
    out.push(compare("bce_with_logits", &logit1, &g, |l| loss::bce_with_logits(l, &bits).expect("ok").0));

    let p = randn(rng, 3, 4);
    let t = randn(rng, 3, 4);
    let (_, g) = loss::mse(&p, &t);
    out.push(compare("mse", &p, &g, |pv| loss::mse(pv, &t).0));

    let mu = randn(rng, 3, 4);
    let lv = randn(rng, 3, 4) * 0.5;
    let (_, gm, gl) = loss::gaussian_kl(&mu, &lv);
    out.push(compare("gaussian_kl/mu", &mu, &gm, |m| loss::gaussian_kl(m, &lv).0));
    out.push(compare("gaussian_kl/logvar", &lv, &gl, |l| loss::gaussian_kl(&mu, l).0));
}

fn feature_path_checks(rng: &mut StdRng, out: &mut Vec<GradCheck>) {
    let x = randn(rng, 3, 8);
    let w = randn(rng, 3, 8);
    let (_, norms) = power_normalize_rows(&x).expect("non-zero rows");
    let g = power_normalize_rows_backward(&x, &norms, &w);
    out.push(compare("power_normalize", &x, &g, |xv| weighted(&power_normalize_rows(xv).expect("ok").0, &w)));

    for (name, bound) in [("clip_l1/active", 1.0), ("clip_l1/inactive", 100.0)] {
        let g = clip_l1_backward(&x, bound, &w);
        out.push(compare(name, &x, &g, |xv| weighted(&clip_l1(xv, bound), &w)));
    }

    let key = ShuffleKey::from_seed(11, 8);
    let g = shuffle_decrypt(&w, &key).expect("length 8");
    out.push(compare("shuffle_encrypt", &x, &g, |xv| weighted(&shuffle_encrypt(xv, &key).expect("ok"), &w)));
    let g = shuffle_encrypt(&w, &key).expect("length 8");
    out.push(compare("shuffle_decrypt", &x, &g, |xv| weighted(&shuffle_decrypt(xv, &key).expect("ok"), &w)));

    // VQ terms with the assignment held fixed
    let cw = randn(rng, 16, 4);
    let cb = Codebook::new(cw.clone(), 0.25);
    let feats = randn(rng, 2, 8);
    let (idx, q) = vq_quantize(&feats, &cb).expect("divisible");
    let l = vq_loss(&feats, &q, &idx, &cb);
    out.push(compare("vq_commitment/features", &feats, &l.grad_features, |f| 0.25 * loss::mse(f, &q).0));
    out.push(compare("vq_codebook/codewords", &cw, &l.grad_codebook, |c| {
        let cb2 = Codebook::new(c.clone(), 0.25);
        loss::mse(&feats, &cb2.lookup(&idx)).0
    }));
}

fn pipeline_checks(out: &mut Vec<GradCheck>) {
    let shape = ImageShape::new(16, 16, 3);
    let task = TaskKind::Multiclass { classes: 3 };
    let mechs = [
        ("baseline", MechanismConfig::None),
        ("dp", MechanismConfig::Dp(DpConfig { epsilon: 5.0, clip_bound: 1.0 })),
        ("encryption", MechanismConfig::Encryption { key_hex: "00112233445566778899aabbccddeeff".into() }),
        ("ibal", MechanismConfig::Ibal(IbalConfig { lambda_adv: 0.0, lambda_ib: 0.05, sim_adversary: None })),
    ];
    let mut rng = rng_for(3, &[tag("pipeline-data")]);
    let x = Array2::from_shape_fn((3, shape.len()), |_| rng.random::<f64>());
    let labels = [0, 2, 1];
    for (name, mech) in mechs {
        let mut spec = SystemSpec::for_scheme(shape, task, 8, mech).expect("valid scheme");
        spec.encoder.widths = vec![3, 4];
        spec.head.hidden = vec![5];
        if spec.sim_adversary.is_some() {
            spec.sim_adversary = Some(crate::codec::decoder_layers(8, shape, &[2, 2]).expect("valid"));
        }
        let mut tx = Transceiver::<f64>::new(spec, 1e-3, 1).expect("valid spec");
        let loss_at = |tx: &mut Transceiver<f64>| {
            let v = tx.compute_gradients(&x, &labels, 10.0, &mut rng_for(9, &[])).expect("finite").total;
            tx.zero_grad();
            v
        };
        tx.compute_gradients(&x, &labels, 10.0, &mut rng_for(9, &[])).expect("finite");
        let analytic: Vec<Array2<f64>> = tx.trainable().iter().map(|p| p.grad.clone()).collect();
        tx.zero_grad();
        let mut worst = 0.0f64;
        let mut checked = 0;
        for (k, g) in analytic.iter().enumerate() {
            let step = (g.len() / 6).max(1);
            for flat in (0..g.len()).step_by(step) {
                let i = (flat / g.ncols(), flat % g.ncols());
                let orig = tx.trainable()[k].value[i];
                tx.trainable()[k].value[i] = orig + H;
                let up = loss_at(&mut tx);
                tx.trainable()[k].value[i] = orig - H;
                let down = loss_at(&mut tx);
                tx.trainable()[k].value[i] = orig;
                worst = worst.max(rel(g[i], (up - down) / (2.0 * H)));
                checked += 1;
            }
        }
        out.push(GradCheck { name: format!("pipeline/{name}"), max_rel_error: worst, checked });
    }
}

/// Straight-through estimator: the LBVQ pipeline must hand the encoder the
/// task gradient at the quantized block as if the quantizer were the
/// identity. Reference gradients are computed by hand on a noiseless link.
fn straight_through_check(out: &mut Vec<GradCheck>) {
    let shape = ImageShape::new(16, 16, 3);
    let task = TaskKind::Multiclass { classes: 3 };
    let cfg = LbvqConfig { codebook_size: 16, seg_dim: 4, commitment_beta: 0.0, warmup_epochs: 0 };
    let mut spec = SystemSpec::for_scheme(shape, task, 8, MechanismConfig::Lbvq(cfg)).expect("valid scheme");
    spec.encoder.widths = vec![3, 4];
    spec.encoder.refine_stages = vec![];
    spec.head.hidden = vec![5];
    let mut rng = rng_for(5, &[tag("st")]);
    let x = Array2::from_shape_fn((3, shape.len()), |_| rng.random::<f64>());
    let labels = [2, 0, 1];
    let mut tx = Transceiver::<f64>::new(spec, 1e-3, 2).expect("valid spec");
    tx.mechanism = Mechanism::Lbvq(Codebook::new(randn(&mut rng, 16, 4) * 0.7, 0.0));
    tx.quantizing = true;
    tx.compute_gradients(&x, &labels, NOISELESS, &mut rng_for(1, &[])).expect("finite");
    let pipeline: Vec<Array2<f64>> = tx.encoder.params().iter().map(|p| p.grad.clone()).collect();
    tx.zero_grad();

    let mu = tx.encoder.forward(x).expect("shape");
    let (a, norms) = power_normalize_rows(&mu).expect("non-zero");
    let Mechanism::Lbvq(cb) = &tx.mechanism else { unreachable!() };
    let (_, q) = vq_quantize(&a, cb).expect("divisible");
    let logits = tx.head.forward(q).expect("width");
    let (_, g) = loss::softmax_cross_entropy(&logits, &labels).expect("ok");
    let g_q = tx.head.backward(g);
    tx.encoder.backward(power_normalize_rows_backward(&mu, &norms, &g_q));
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (p, r) in pipeline.iter().zip(tx.encoder.params()) {
        for (&u, &v) in p.iter().zip(r.grad.iter()) {
            worst = worst.max(rel(u, v));
            checked += 1;
        }
    }
    out.push(GradCheck { name: "vq_straight_through".into(), max_rel_error: worst, checked });
}

pub fn run_suite(seed: u64) -> Vec<GradCheck> {
    let mut rng = rng_for(seed, &[tag("gradcheck")]);
    let mut out = Vec::new();
    layer_checks(&mut rng, &mut out);
    loss_checks(&mut rng, &mut out);
    feature_path_checks(&mut rng, &mut out);
    straight_through_check(&mut out);
    pipeline_checks(&mut out);
    out
}
