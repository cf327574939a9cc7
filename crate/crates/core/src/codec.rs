//! The JSCC encoder that maps images to d-dimensional feature blocks, the
//! receiver-side task heads, and the model bundle archive format.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel;
use crate::data::{ImageShape, TaskKind};
use crate::error::{validation, Error, Result};
use crate::nn::{lit, loss, Cost, LayerSpec, Param, Real, Sequential};

/// Convolutional encoder description: stride-2 3×3 blocks with the given
/// widths, optional stride-1 refinement blocks after selected stages, and a
/// linear projection to `d` features.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub d: usize,
    pub input: ImageShape,
    pub widths: Vec<usize>,
    /// Stage indices followed by an extra stride-1 3×3 conv of the same width.
    #[serde(default)]
    pub refine_stages: Vec<usize>,
    /// Adds a learned per-dimension log-variance for a Gaussian feature posterior.
    #[serde(default)]
    pub variational: bool,
    pub output_norm: bool,
}

impl EncoderSpec {
    pub fn new(input: ImageShape, d: usize) -> Self {
        Self { d, input, widths: vec![32, 64, 128, 128], refine_stages: vec![], variational: false, output_norm: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d % 2 != 0 {
            return validation(format!("feature dimension d = {} must be even and positive", self.d));
        }
        let f = 1usize << self.widths.len();
        if self.widths.is_empty() || self.input.height % f != 0 || self.input.width % f != 0 {
            return validation(format!(
                "{}×{} input is not divisible by the encoder's total stride {f}",
                self.input.height, self.input.width
            ));
        }
        if let Some(s) = self.refine_stages.iter().find(|&&s| s >= self.widths.len()) {
            return validation(format!("refine stage {s} does not exist"));
        }
        Ok(())
    }

    fn backbone(&self) -> (Vec<LayerSpec>, usize) {
        let (mut h, mut w, mut c) = (self.input.height, self.input.width, self.input.channels);
        let mut layers = Vec::new();
        for (stage, &width) in self.widths.iter().enumerate() {
            layers.push(LayerSpec::conv(h, w, c, width, 3, 2, 1));
            layers.push(LayerSpec::Relu);
            h /= 2;
            w /= 2;
            c = width;
            if self.refine_stages.contains(&stage) {
                layers.push(LayerSpec::conv(h, w, c, c, 3, 1, 1));
                layers.push(LayerSpec::Relu);
            }
        }
        (layers, h * w * c)
    }
}

pub struct Encoder<S: Real> {
    pub spec: EncoderSpec,
    backbone: Sequential<S>,
    proj: Sequential<S>,
    /// `1 × d` log-variance, present for variational encoders.
    pub logvar: Option<Param<S>>,
}

impl<S: Real> Encoder<S> {
    pub fn new<R: Rng + ?Sized>(spec: EncoderSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let (layers, flat) = spec.backbone();
        let backbone = Sequential::new(spec.input.len(), &layers, rng)?;
        let proj = Sequential::new(flat, &[LayerSpec::Linear { input: flat, output: spec.d }], rng)?;
        let logvar = spec.variational.then(|| Param::new(Array2::from_elem((1, spec.d), lit(-2.0))));
        Ok(Self { spec, backbone, proj, logvar })
    }

    fn check(&self, x: &Array2<S>) -> Result<()> {
        if x.ncols() != self.spec.input.len() {
            return validation(format!(
                "image has {} values, encoder expects {}×{}×{}",
                x.ncols(),
                self.spec.input.height,
                self.spec.input.width,
                self.spec.input.channels
            ));
        }
        Ok(())
    }

    /// Posterior mean (pre-normalization features), caching for backward.
    pub fn forward(&mut self, x: Array2<S>) -> Result<Array2<S>> {
        self.check(&x)?;
        let h = self.backbone.forward(x);
        Ok(self.proj.forward(h))
    }

    pub fn infer(&self, x: Array2<S>) -> Result<Array2<S>> {
        self.check(&x)?;
        Ok(self.proj.infer(self.backbone.infer(x)))
    }

    /// Backpropagates the gradient w.r.t. the posterior mean.
    pub fn backward(&mut self, g: Array2<S>) -> Array2<S> {
        let g = self.proj.backward(g);
        self.backbone.backward(g)
    }

    /// Feature block for a batch of images; rows are power normalized when
    /// `output_norm` is set.
    pub fn encode(&self, images: &Array2<S>) -> Result<Array2<S>> {
        let z = self.infer(images.clone())?;
        if self.spec.output_norm {
            Ok(channel::power_normalize_rows(&z)?.0)
        } else {
            Ok(z)
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<S>> {
        let mut p = self.backbone.params_mut();
        p.extend(self.proj.params_mut());
        if let Some(lv) = self.logvar.as_mut() {
            p.push(lv);
        }
        p
    }

    pub fn params(&self) -> Vec<&Param<S>> {
        let mut p = self.backbone.params();
        p.extend(self.proj.params());
        if let Some(lv) = self.logvar.as_ref() {
            p.push(lv);
        }
        p
    }

    pub fn cost(&self) -> Cost {
        let extra = self.logvar.as_ref().map_or(0, |p| p.len() as u64);
        self.backbone.cost() + self.proj.cost() + Cost { flops: 0, params: extra }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub task: TaskKind,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
}

impl HeadSpec {
    pub fn new(task: TaskKind, input_dim: usize) -> Self {
        Self { task, input_dim, hidden: vec![256] }
    }

    pub fn outputs(&self) -> usize {
        match self.task {
            TaskKind::Multiclass { classes } => classes,
            TaskKind::BinaryAttribute => 1,
        }
    }

    fn layers(&self) -> Vec<LayerSpec> {
        let mut layers = Vec::new();
        let mut dim = self.input_dim;
        for &h in &self.hidden {
            layers.push(LayerSpec::Linear { input: dim, output: h });
            layers.push(LayerSpec::Relu);
            dim = h;
        }
        layers.push(LayerSpec::Linear { input: dim, output: self.outputs() });
        layers
    }
}

/// Receiver-side task inference network.
pub struct TaskHead<S: Real> {
    pub spec: HeadSpec,
    pub net: Sequential<S>,
}

impl<S: Real> TaskHead<S> {
    pub fn new<R: Rng + ?Sized>(spec: HeadSpec, rng: &mut R) -> Result<Self> {
        let net = Sequential::new(spec.input_dim, &spec.layers(), rng)?;
        Ok(Self { spec, net })
    }

    fn check(&self, x: &Array2<S>) -> Result<()> {
        if x.ncols() != self.spec.input_dim {
            return validation(format!("received block has {} features, head expects {}", x.ncols(), self.spec.input_dim));
        }
        Ok(())
    }

    pub fn forward(&mut self, x: Array2<S>) -> Result<Array2<S>> {
        self.check(&x)?;
        Ok(self.net.forward(x))
    }

    /// Logits of the head's arity for each received row.
    pub fn infer_task(&self, received: &Array2<S>) -> Result<Array2<S>> {
        self.check(received)?;
        Ok(self.net.infer(received.clone()))
    }

    pub fn backward(&mut self, g: Array2<S>) -> Array2<S> {
        self.net.backward(g)
    }
}

/// Cross-entropy for the head's task: softmax CE for multiclass heads,
/// logistic loss for binary attribute heads.
pub fn task_loss<S: Real>(task: TaskKind, logits: &Array2<S>, labels: &[usize]) -> Result<(S, Array2<S>)> {
    match task {
        TaskKind::Multiclass { .. } => loss::softmax_cross_entropy(logits, labels),
        TaskKind::BinaryAttribute => loss::bce_with_logits(logits, labels),
    }
}

/// Predicted labels: argmax for multiclass, `logit > 0` for binary heads.
pub fn predictions<S: Real>(task: TaskKind, logits: &Array2<S>) -> Vec<usize> {
    match task {
        TaskKind::Multiclass { .. } => logits
            .axis_iter(Axis(0))
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, S::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect(),
        TaskKind::BinaryAttribute => logits.column(0).iter().map(|&v| (v > S::zero()) as usize).collect(),
    }
}

/// Layers of an upsampling decoder from `input_dim` features to an image of
/// `shape`: a linear map onto a coarse grid with `widths[0]` channels, then
/// one 4×4 stride-2 transposed conv per entry of `widths` (the last one
/// producing the image channels) and a sigmoid.
pub fn decoder_layers(input_dim: usize, shape: ImageShape, widths: &[usize]) -> Result<Vec<LayerSpec>> {
    let f = 1usize << widths.len();
    if widths.is_empty() || shape.height % f != 0 || shape.width % f != 0 {
        return validation(format!(
            "{}×{} output is not reachable with {} upsampling stages",
            shape.height,
            shape.width,
            widths.len()
        ));
    }
    let (mut h, mut w) = (shape.height / f, shape.width / f);
    let mut layers = vec![LayerSpec::Linear { input: input_dim, output: h * w * widths[0] }, LayerSpec::Relu];
    for (i, &c) in widths.iter().enumerate() {
        let last = i + 1 == widths.len();
        let out_c = if last { shape.channels } else { widths[i + 1] };
        layers.push(LayerSpec::conv_transpose(h, w, c, out_c, 4, 2, 1));
        layers.push(if last { LayerSpec::Sigmoid } else { LayerSpec::Relu });
        h *= 2;
        w *= 2;
    }
    Ok(layers)
}

const MAGIC: &[u8; 8] = b"TOSCBNDL";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Trained parameters plus JSON metadata, stored as a single archive:
/// 8-byte magic, u32 version, u64 header length, UTF-8 JSON header, then
/// every tensor as little-endian `f32` in header order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Array2<f32>)>,
}

impl ModelBundle {
    pub fn tensor(&self, name: &str) -> Option<&Array2<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors whose names start with `prefix`, in stored order.
    pub fn group<S: Real>(&self, prefix: &str) -> Vec<Array2<S>> {
        self.tensors
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.mapv(|v| lit(v as f64)))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            metadata: self.metadata.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry { name: name.clone(), rows: t.nrows(), cols: t.ncols() })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(json.len() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("model bundle: {m}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
        let mut offset = 20 + hlen;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n = e.rows * e.cols;
            let raw = bytes.get(offset..offset + 4 * n).ok_or_else(|| bad("truncated tensor data"))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.push((e.name, Array2::from_shape_vec((e.rows, e.cols), data).map_err(|e| bad(&e.to_string()))?));
            offset += 4 * n;
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { metadata: header.metadata, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        fs::File::open(path)
            .map_err(|_| Error::NotFound(format!("model bundle {}", path.display())))?
            .read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}
