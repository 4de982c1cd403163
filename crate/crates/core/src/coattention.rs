//! Cross-image co-attention: affinity between two feature maps, attention
//! summaries that carry one image's features into the other's layout, the
//! class-agnostic gate, and its contrastive complement.
//!
//! All functions record onto a caller-supplied [`Graph`] so the whole pair
//! computation is differentiable end to end.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Unordered pair of domain tags; `(a, b)` and `(b, a)` are the same key.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DomainPair {
    lo: String,
    hi: String,
}

impl DomainPair {
    pub fn new(a: &str, b: &str) -> Self {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        DomainPair {
            lo: lo.to_owned(),
            hi: hi.to_owned(),
        }
    }

    /// Parses the `a|b` form used in checkpoints.
    pub fn parse(s: &str) -> Option<Self> {
        let (a, b) = s.split_once('|')?;
        (!a.is_empty() && !b.is_empty()).then(|| DomainPair::new(a, b))
    }
}

impl fmt::Display for DomainPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}|{}", self.lo, self.hi)
    }
}

/// One `C×C` affinity matrix per unordered domain pair.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityParams {
    matrices: BTreeMap<DomainPair, Tensor>,
}

impl AffinityParams {
    /// Identity plus uniform noise of magnitude 0.01 for every unordered pair
    /// drawn from `domains` (including each domain with itself).
    pub fn init<R: Rng + ?Sized>(domains: &[String], channels: usize, rng: &mut R) -> Result<Self> {
        if domains.is_empty() {
            return Err(Error::Config("at least one domain is required".into()));
        }
        let mut matrices = BTreeMap::new();
        for (i, a) in domains.iter().enumerate() {
            for b in &domains[i..] {
                let key = DomainPair::new(a, b);
                if matrices.contains_key(&key) {
                    continue;
                }
                let mut w = Tensor::uniform(&[channels, channels], 0.01, rng);
                for c in 0..channels {
                    w.data_mut()[c * channels + c] += 1.0;
                }
                matrices.insert(key, w);
            }
        }
        Ok(AffinityParams { matrices })
    }

    pub fn from_matrices(matrices: BTreeMap<DomainPair, Tensor>) -> Result<Self> {
        let mut c = None;
        for (key, w) in &matrices {
            let (r, cols) = w.dims2()?;
            if r != cols || c.is_some_and(|c| c != r) {
                return Err(Error::Dimension(format!(
                    "affinity matrix {key} has shape {:?}",
                    w.shape()
                )));
            }
            c = Some(r);
        }
        Ok(AffinityParams { matrices })
    }

    pub fn get(&self, a: &str, b: &str) -> Result<&Tensor> {
        self.matrices
            .get(&DomainPair::new(a, b))
            .ok_or_else(|| Error::Config(format!("no affinity matrix for domain pair ({a}, {b})")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&DomainPair, &Tensor)> {
        self.matrices.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&DomainPair, &mut Tensor)> {
        self.matrices.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }
}

/// The `1×C` weight of the class-agnostic gate.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    pub wb: Tensor,
}

impl GateParams {
    pub fn new(wb: Tensor) -> Result<Self> {
        match wb.shape() {
            [1, _] => Ok(GateParams { wb }),
            s => Err(Error::Dimension(format!("gate weight must be 1xC, got {s:?}"))),
        }
    }

    pub fn channels(&self) -> usize {
        self.wb.shape()[1]
    }
}

/// Affinity and gate parameters registered as leaves on one graph.
#[derive(Clone, Debug)]
pub struct BoundCoAttn {
    pub affinity: BTreeMap<DomainPair, Var>,
    pub gate: Var,
}

impl BoundCoAttn {
    pub fn bind(g: &mut Graph, affinity: &AffinityParams, gate: &GateParams) -> Self {
        BoundCoAttn {
            affinity: affinity
                .iter()
                .map(|(k, w)| (k.clone(), g.leaf(w.clone())))
                .collect(),
            gate: g.leaf(gate.wb.clone()),
        }
    }

    pub fn affinity_for(&self, a: &str, b: &str) -> Result<Var> {
        self.affinity
            .get(&DomainPair::new(a, b))
            .copied()
            .ok_or_else(|| Error::Config(format!("no affinity matrix for domain pair ({a}, {b})")))
    }
}

/// Graph handles for every tensor the pair computation produces.
#[derive(Clone, Copy, Debug)]
pub struct CoAttnOutput {
    pub affinity: Var,
    /// Columns weight positions of `F_m` for each position of `F_n`.
    pub attn_m: Var,
    /// Columns weight positions of `F_n` for each position of `F_m`.
    pub attn_n: Var,
    /// Features of `F_n` summarized at each position of `F_m`, `[C, H, W]`.
    pub coatt_m: Var,
    /// Features of `F_m` summarized at each position of `F_n`, `[C, H, W]`.
    pub coatt_n: Var,
    pub gate_m: Var,
    pub gate_n: Var,
    /// `F_m` masked by `1 - gate_m`.
    pub contrast_m: Var,
    /// `F_n` masked by `1 - gate_n`.
    pub contrast_n: Var,
}

/// `P = F_mᵀ · W_P · F_n` over flattened `[C, HW]` features.
pub fn affinity(g: &mut Graph, fm_flat: Var, fn_flat: Var, wp: Var) -> Result<Var> {
    g.affinity(fm_flat, wp, fn_flat)
}

/// Column-wise softmax of `P` and of `Pᵀ`.
pub fn coattention_maps(g: &mut Graph, p: Var) -> Result<(Var, Var)> {
    let (r, c) = g.value(p).dims2()?;
    if r != c {
        return Err(Error::Dimension(format!(
            "affinity must be square, got {r}x{c}"
        )));
    }
    let am = g.softmax_columns(p)?;
    let pt = g.transpose(p)?;
    let an = g.softmax_columns(pt)?;
    Ok((am, an))
}

/// `F_n · A_n` and `F_m · A_m`, reshaped to `[C, H, W]`.
pub fn attention_summaries(
    g: &mut Graph,
    fm_flat: Var,
    fn_flat: Var,
    am: Var,
    an: Var,
    spatial: (usize, usize),
) -> Result<(Var, Var)> {
    let (c, _) = g.value(fm_flat).dims2()?;
    let shape = [c, spatial.0, spatial.1];
    let m = g.matmul(fn_flat, an)?;
    let n = g.matmul(fm_flat, am)?;
    Ok((g.reshape(m, &shape)?, g.reshape(n, &shape)?))
}

/// `σ(W_B · F)` evaluated per position, i.e. a 1×1 convolution to one channel.
pub fn class_agnostic_gate(g: &mut Graph, f_co: Var, wb: Var) -> Result<Var> {
    let (c, h, w) = g.value(f_co).dims3()?;
    let wbc = g.value(wb).shape().get(1).copied();
    if wbc != Some(c) {
        return Err(Error::Dimension(format!(
            "gate weight {:?} does not match {c} feature channels",
            g.value(wb).shape()
        )));
    }
    let flat = g.reshape(f_co, &[c, h * w])?;
    let logits = g.matmul(wb, flat)?;
    let logits = g.reshape(logits, &[h, w])?;
    Ok(g.sigmoid(logits))
}

/// `1 - B`.
pub fn contrastive_attention(g: &mut Graph, gate: Var) -> Result<Var> {
    g.one_minus(gate)
}

/// `F ⊗ A`, with the attention copied across channels.
pub fn contrastive_features(g: &mut Graph, f: Var, attn: Var) -> Result<Var> {
    g.mul_broadcast(f, attn)
}

/// Runs the full co-attention computation for an image pair.
pub fn forward_pair(
    g: &mut Graph,
    fm: Var,
    fn_: Var,
    domains: (&str, &str),
    params: &BoundCoAttn,
) -> Result<CoAttnOutput> {
    let (c, h, w) = g.value(fm).dims3()?;
    if g.value(fn_).shape() != [c, h, w] {
        return Err(Error::Dimension(format!(
            "paired features differ in shape: {:?} vs {:?}",
            g.value(fm).shape(),
            g.value(fn_).shape()
        )));
    }
    let wp = params.affinity_for(domains.0, domains.1)?;
    let fm_flat = g.reshape(fm, &[c, h * w])?;
    let fn_flat = g.reshape(fn_, &[c, h * w])?;

    let p = affinity(g, fm_flat, fn_flat, wp)?;
    let (attn_m, attn_n) = coattention_maps(g, p)?;
    let (coatt_m, coatt_n) = attention_summaries(g, fm_flat, fn_flat, attn_m, attn_n, (h, w))?;

    let gate_m = class_agnostic_gate(g, coatt_m, params.gate)?;
    let gate_n = class_agnostic_gate(g, coatt_n, params.gate)?;
    let inv_m = contrastive_attention(g, gate_m)?;
    let inv_n = contrastive_attention(g, gate_n)?;
    let contrast_m = contrastive_features(g, fm, inv_m)?;
    let contrast_n = contrastive_features(g, fn_, inv_n)?;

    Ok(CoAttnOutput {
        affinity: p,
        attn_m,
        attn_n,
        coatt_m,
        coatt_n,
        gate_m,
        gate_n,
        contrast_m,
        contrast_n,
    })
}
