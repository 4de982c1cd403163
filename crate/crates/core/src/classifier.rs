//! The pair classifier: a small strided conv backbone, a 1×1 class layer
//! producing per-class activation maps, GAP scoring and the three pair loss
//! terms.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::coattention::{self, AffinityParams, BoundCoAttn, CoAttnOutput, DomainPair, GateParams};
use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::labels::LabelVector;
use crate::tensor::{read_u32, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"COATTN1";

const KERNEL: usize = 3;
const STRIDE: usize = 2;
const PAD: usize = 1;
/// Subtracted from every pixel before the first convolution.
pub const INPUT_MEAN: f64 = 0.5;

/// Architecture knobs. The default backbone is 3→16→32→32.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub channels: Vec<usize>,
    pub classes: usize,
    pub domains: Vec<String>,
}

impl ModelConfig {
    pub fn new(classes: usize, domains: Vec<String>) -> Self {
        ModelConfig {
            channels: vec![16, 32, 32],
            classes,
            domains,
        }
    }

    pub fn feature_channels(&self) -> usize {
        *self.channels.last().expect("at least one conv block")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub kernel: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub blocks: Vec<ConvBlock>,
}

impl BackboneParams {
    pub fn out_channels(&self) -> usize {
        self.blocks.last().map_or(3, |b| b.kernel.shape()[0])
    }

    /// Spatial reduction factor of the stride-2 chain.
    pub fn downsample(&self) -> usize {
        STRIDE.pow(self.blocks.len() as u32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassLayerParams {
    /// `[K, C, 1, 1]`
    pub phi: Tensor,
    /// `[K]`
    pub bias: Tensor,
}

impl ClassLayerParams {
    pub fn classes(&self) -> usize {
        self.phi.shape()[0]
    }
}

/// Every trainable tensor of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub backbone: BackboneParams,
    pub class_layer: ClassLayerParams,
    pub gate: GateParams,
    pub affinity: AffinityParams,
}

fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        if cfg.classes == 0 || cfg.channels.is_empty() {
            return Err(Error::Config("model needs classes and conv blocks".into()));
        }
        let mut blocks = Vec::new();
        let mut cin = 3;
        for &cout in &cfg.channels {
            let bound = glorot(cin * KERNEL * KERNEL, cout * KERNEL * KERNEL);
            blocks.push(ConvBlock {
                kernel: Tensor::uniform(&[cout, cin, KERNEL, KERNEL], bound, rng),
                bias: Tensor::zeros(&[cout]),
            });
            cin = cout;
        }
        let c = cin;
        let k = cfg.classes;
        let class_layer = ClassLayerParams {
            phi: Tensor::uniform(&[k, c, 1, 1], glorot(c, k), rng),
            bias: Tensor::zeros(&[k]),
        };
        let gate = GateParams::new(Tensor::uniform(&[1, c], glorot(c, 1), rng))?;
        let affinity = AffinityParams::init(&cfg.domains, c, rng)?;
        Ok(ModelParams {
            backbone: BackboneParams { blocks },
            class_layer,
            gate,
            affinity,
        })
    }

    pub fn classes(&self) -> usize {
        self.class_layer.classes()
    }

    /// Parameters in canonical order, with their checkpoint names.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.backbone.blocks.iter().enumerate() {
            out.push((format!("backbone.{i}.kernel"), &b.kernel));
            out.push((format!("backbone.{i}.bias"), &b.bias));
        }
        out.push(("phi.kernel".into(), &self.class_layer.phi));
        out.push(("phi.bias".into(), &self.class_layer.bias));
        out.push(("gate.wb".into(), &self.gate.wb));
        for (k, w) in self.affinity.iter() {
            out.push((format!("affinity.{k}"), w));
        }
        out
    }

    /// Same order as [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in &mut self.backbone.blocks {
            out.push(&mut b.kernel);
            out.push(&mut b.bias);
        }
        out.push(&mut self.class_layer.phi);
        out.push(&mut self.class_layer.bias);
        out.push(&mut self.gate.wb);
        for (_, w) in self.affinity.iter_mut() {
            out.push(w);
        }
        out
    }

    pub fn bind(&self, g: &mut Graph) -> BoundModel {
        let backbone = self
            .backbone
            .blocks
            .iter()
            .map(|b| (g.leaf(b.kernel.clone()), g.leaf(b.bias.clone())))
            .collect();
        let phi = g.leaf(self.class_layer.phi.clone());
        let phi_bias = g.leaf(self.class_layer.bias.clone());
        let coattn = BoundCoAttn::bind(g, &self.affinity, &self.gate);
        BoundModel {
            backbone,
            phi,
            phi_bias,
            coattn,
        }
    }

    /// Rebuilds parameters from named tensors, ignoring names it does not own.
    pub fn from_named(tensors: &[(String, Tensor)]) -> Result<Self> {
        let find = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        let mut blocks = Vec::new();
        while tensors.iter().any(|(n, _)| *n == format!("backbone.{}.kernel", blocks.len())) {
            let i = blocks.len();
            blocks.push(ConvBlock {
                kernel: find(&format!("backbone.{i}.kernel"))?,
                bias: find(&format!("backbone.{i}.bias"))?,
            });
        }
        if blocks.is_empty() {
            return Err(Error::Checkpoint("checkpoint has no backbone".into()));
        }
        let mut matrices = std::collections::BTreeMap::new();
        for (name, t) in tensors {
            if let Some(key) = name.strip_prefix("affinity.") {
                let pair = DomainPair::parse(key)
                    .ok_or_else(|| Error::Checkpoint(format!("bad affinity key {key}")))?;
                matrices.insert(pair, t.clone());
            }
        }
        if matrices.is_empty() {
            return Err(Error::Checkpoint("checkpoint has no affinity matrices".into()));
        }
        let params = ModelParams {
            backbone: BackboneParams { blocks },
            class_layer: ClassLayerParams {
                phi: find("phi.kernel")?,
                bias: find("phi.bias")?,
            },
            gate: GateParams::new(find("gate.wb")?).map_err(|e| Error::Checkpoint(e.to_string()))?,
            affinity: AffinityParams::from_matrices(matrices)
                .map_err(|e| Error::Checkpoint(e.to_string()))?,
        };
        params.validate()?;
        Ok(params)
    }

    fn validate(&self) -> Result<()> {
        let mut cin = 3;
        for (i, b) in self.backbone.blocks.iter().enumerate() {
            let s = b.kernel.shape();
            if s.len() != 4 || s[1] != cin || s[2] != KERNEL || s[3] != KERNEL || b.bias.shape() != [s[0]] {
                return Err(Error::Checkpoint(format!("backbone block {i} has bad shapes")));
            }
            cin = s[0];
        }
        let k = self.class_layer.phi.shape();
        if k.len() != 4 || k[1] != cin || k[2] != 1 || k[3] != 1 || self.class_layer.bias.shape() != [k[0]] {
            return Err(Error::Checkpoint("class layer shape mismatch".into()));
        }
        if self.gate.channels() != cin {
            return Err(Error::Checkpoint("gate channel mismatch".into()));
        }
        for (key, w) in self.affinity.iter() {
            if w.shape() != [cin, cin] {
                return Err(Error::Checkpoint(format!("affinity {key} shape mismatch")));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let named: Vec<(String, Tensor)> = self
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        write_checkpoint(path, &named)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_named(&read_checkpoint(path)?)
    }
}

/// Model parameters registered as graph leaves.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub backbone: Vec<(Var, Var)>,
    pub phi: Var,
    pub phi_bias: Var,
    pub coattn: BoundCoAttn,
}

impl BoundModel {
    /// Same order as [`ModelParams::named`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for &(k, b) in &self.backbone {
            out.push(k);
            out.push(b);
        }
        out.push(self.phi);
        out.push(self.phi_bias);
        out.push(self.coattn.gate);
        out.extend(self.coattn.affinity.values().copied());
        out
    }

    pub fn grads(&self, g: &Graph) -> Result<Vec<Tensor>> {
        self.vars().into_iter().map(|v| g.grad(v)).collect()
    }
}

/// Centres pixels on [`INPUT_MEAN`], then three stride-2 conv blocks with
/// ReLU: `[3, H0, W0] -> [C, H0/8, W0/8]`.
pub fn embed(g: &mut Graph, image: Var, model: &BoundModel) -> Result<Var> {
    let (c, h, w) = g.value(image).dims3()?;
    let factor = STRIDE.pow(model.backbone.len() as u32);
    if c != 3 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Dimension(format!(
            "image {:?} must be 3 channels with sides divisible by {factor}",
            g.value(image).shape()
        )));
    }
    let shift = g.leaf(Tensor::full(&[3], -INPUT_MEAN));
    let mut x = g.add_channel_bias(image, shift)?;
    for &(k, b) in &model.backbone {
        let y = g.conv2d(x, k, STRIDE, PAD)?;
        let y = g.add_channel_bias(y, b)?;
        x = g.relu(y);
    }
    Ok(x)
}

/// `S = φ(F)`: 1×1 convolution to `K` class maps plus bias.
pub fn class_maps(g: &mut Graph, features: Var, model: &BoundModel) -> Result<Var> {
    let s = g.conv2d(features, model.phi, 1, 0)?;
    g.add_channel_bias(s, model.phi_bias)
}

/// Mean sigmoid cross entropy of a score vector against a label vector.
pub fn sigmoid_ce(g: &mut Graph, scores: Var, target: &LabelVector) -> Result<Var> {
    g.sigmoid_ce(scores, &target.as_f64())
}

fn ce_of_maps(g: &mut Graph, maps: Var, target: &LabelVector) -> Result<(Var, Var)> {
    let scores = g.gap(maps)?;
    Ok((scores, sigmoid_ce(g, scores, target)?))
}

pub fn loss_basic(g: &mut Graph, s_m: Var, s_n: Var, l_m: &LabelVector, l_n: &LabelVector) -> Result<Var> {
    let (_, a) = ce_of_maps(g, s_m, l_m)?;
    let (_, b) = ce_of_maps(g, s_n, l_n)?;
    g.add(a, b)
}

pub fn loss_coatt(g: &mut Graph, s_m: Var, s_n: Var, l_m: &LabelVector, l_n: &LabelVector) -> Result<Var> {
    let common = l_m.intersect(l_n)?;
    let (_, a) = ce_of_maps(g, s_m, &common)?;
    let (_, b) = ce_of_maps(g, s_n, &common)?;
    g.add(a, b)
}

pub fn loss_contrast(g: &mut Graph, s_m: Var, s_n: Var, l_m: &LabelVector, l_n: &LabelVector) -> Result<Var> {
    let (_, a) = ce_of_maps(g, s_m, &l_m.subtract(l_n)?)?;
    let (_, b) = ce_of_maps(g, s_n, &l_n.subtract(l_m)?)?;
    g.add(a, b)
}

/// Which loss terms contribute to the optimized total.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossTerms {
    pub basic: bool,
    pub coatt: bool,
    pub contrast: bool,
}

impl LossTerms {
    pub const FULL: LossTerms = LossTerms {
        basic: true,
        coatt: true,
        contrast: true,
    };
    pub const BASIC: LossTerms = LossTerms {
        basic: true,
        coatt: false,
        contrast: false,
    };
    pub const BASIC_COATT: LossTerms = LossTerms {
        basic: true,
        coatt: true,
        contrast: false,
    };
    pub const NONE: LossTerms = LossTerms {
        basic: false,
        coatt: false,
        contrast: false,
    };

    pub fn any(self) -> bool {
        self.basic || self.coatt || self.contrast
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "basic" => Some(Self::BASIC),
            "basic+coatt" => Some(Self::BASIC_COATT),
            "full" => Some(Self::FULL),
            _ => None,
        }
    }
}

/// Scalar loss values and the six GAP score vectors of one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairLossBreakdown {
    pub basic: f64,
    pub coatt: f64,
    pub contrast: f64,
    pub total: f64,
    pub s_m: Tensor,
    pub s_n: Tensor,
    pub s_coatt_m: Tensor,
    pub s_coatt_n: Tensor,
    pub s_contrast_m: Tensor,
    pub s_contrast_n: Tensor,
}

/// Graph handles produced by [`loss_total`].
#[derive(Clone, Debug)]
pub struct PairForward {
    pub model: BoundModel,
    pub image_m: Var,
    pub image_n: Var,
    pub coattn: CoAttnOutput,
    /// `None` when no loss term is enabled.
    pub total: Option<Var>,
    pub breakdown: PairLossBreakdown,
}

/// Full pair forward pass: embeddings, co-attention, class maps for the six
/// feature tensors, GAP, the three loss terms and their unweighted sum over
/// the enabled terms.
pub fn loss_total(
    g: &mut Graph,
    params: &ModelParams,
    m: &ImageSample,
    n: &ImageSample,
    terms: LossTerms,
) -> Result<PairForward> {
    let model = params.bind(g);
    let image_m = g.leaf(m.pixels.clone());
    let image_n = g.leaf(n.pixels.clone());
    let fm = embed(g, image_m, &model)?;
    let fn_ = embed(g, image_n, &model)?;
    let co = coattention::forward_pair(g, fm, fn_, (&m.domain, &n.domain), &model.coattn)?;

    let s_m = class_maps(g, fm, &model)?;
    let s_n = class_maps(g, fn_, &model)?;
    let s_co_m = class_maps(g, co.coatt_m, &model)?;
    let s_co_n = class_maps(g, co.coatt_n, &model)?;
    let s_ct_m = class_maps(g, co.contrast_m, &model)?;
    let s_ct_n = class_maps(g, co.contrast_n, &model)?;

    let basic = loss_basic(g, s_m, s_n, &m.labels, &n.labels)?;
    let coatt = loss_coatt(g, s_co_m, s_co_n, &m.labels, &n.labels)?;
    let contrast = loss_contrast(g, s_ct_m, s_ct_n, &m.labels, &n.labels)?;

    let mut total = None;
    for (on, v) in [(terms.basic, basic), (terms.coatt, coatt), (terms.contrast, contrast)] {
        if on {
            total = Some(match total {
                None => v,
                Some(t) => g.add(t, v)?,
            });
        }
    }

    let scalar = |g: &Graph, v: Var| g.value(v).data()[0];
    let scores = |g: &Graph, v: Var| crate::autodiff::gap(g.value(v));
    let breakdown = PairLossBreakdown {
        basic: scalar(g, basic),
        coatt: scalar(g, coatt),
        contrast: scalar(g, contrast),
        total: total.map_or(0.0, |t| scalar(g, t)),
        s_m: scores(g, s_m)?,
        s_n: scores(g, s_n)?,
        s_coatt_m: scores(g, s_co_m)?,
        s_coatt_n: scores(g, s_co_n)?,
        s_contrast_m: scores(g, s_ct_m)?,
        s_contrast_n: scores(g, s_ct_n)?,
    };
    Ok(PairForward {
        model,
        image_m,
        image_n,
        coattn: co,
        total,
        breakdown,
    })
}

/// Class activation maps `φ(embed(image))` of a single image, `[K, H, W]`.
pub fn single_maps(params: &ModelParams, image: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let model = params.bind(&mut g);
    let x = g.leaf(image.clone());
    let f = embed(&mut g, x, &model)?;
    let s = class_maps(&mut g, f, &model)?;
    Ok(g.value(s).clone())
}

/// Image-level scores `GAP(φ(embed(image)))`.
pub fn single_scores(params: &ModelParams, image: &Tensor) -> Result<Tensor> {
    crate::autodiff::gap(&single_maps(params, image)?)
}

/// Writes `COATTN1` followed by `(u32 name length, name, tensor)` records.
pub fn write_checkpoint(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        for (name, t) in tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            t.write_to(&mut w)?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let Some(mut rest) = bytes.strip_prefix(CHECKPOINT_MAGIC.as_slice()) else {
        return Err(Error::Checkpoint("bad magic; not a COATTN1 checkpoint".into()));
    };
    let mut out = Vec::new();
    while !rest.is_empty() {
        let len = read_u32(&mut rest)? as usize;
        if len > rest.len() {
            return Err(Error::Checkpoint("truncated tensor name".into()));
        }
        let (name, tail) = rest.split_at(len);
        let name = String::from_utf8(name.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        rest = tail;
        let t = Tensor::read_from(&mut rest)?;
        out.push((name, t));
    }
    Ok(out)
}
