//! Localization maps from a trained model, single-round or averaged over
//! co-attention with related images, and their conversion to pseudo masks.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::autodiff::Graph;
use crate::classifier::{class_maps, embed, ModelParams};
use crate::coattention::forward_pair;
use crate::data::{related_images, ImageSample, BACKGROUND};
use crate::error::{Error, Result};
use crate::labels::LabelVector;
use crate::netpbm::{self, Raster};
use crate::seeding::{derive_rng, hash_str};
use crate::tensor::Tensor;

const RELATED_STREAM: u64 = 0x4E1A;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Single,
    Multi,
}

impl FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "single" => Ok(Strategy::Single),
            "multi" => Ok(Strategy::Multi),
            _ => Err(format!("unknown strategy `{s}` (expected single or multi)")),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Single => "single",
            Strategy::Multi => "multi",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferConfig {
    pub strategy: Strategy,
    /// Related images per labeled class for the multi-round strategy.
    pub related: usize,
    /// Background threshold on normalized maps.
    pub theta: f64,
    pub seed: u64,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            strategy: Strategy::Multi,
            related: 3,
            theta: 0.2,
            seed: 0,
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.theta) {
            return Err(Error::Contract(format!("theta must be in [0, 1), got {}", self.theta)));
        }
        Ok(())
    }
}

/// Per-class maps `[K, h, w]` at feature resolution, in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationMap {
    pub maps: Tensor,
    pub strategy: Strategy,
    /// Related image ids used for each 1-based class; empty under `Single` or
    /// when a class fell back to its single-round channel.
    pub related: Vec<(usize, Vec<String>)>,
}

/// ReLU, then divide each channel by its maximum when that is positive.
pub fn normalize_maps(raw: &Tensor) -> Result<Tensor> {
    let (k, h, w) = raw.dims3()?;
    let hw = h * w;
    let mut out = raw.data().iter().map(|&v| v.max(0.0)).collect::<Vec<_>>();
    for c in 0..k {
        let ch = &mut out[c * hw..(c + 1) * hw];
        let max = ch.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            ch.iter_mut().for_each(|v| *v /= max);
        }
    }
    Tensor::new(vec![k, h, w], out)
}

fn zero_unlabeled(maps: &mut Tensor, labels: &LabelVector) -> Result<()> {
    let (k, h, w) = maps.dims3()?;
    if labels.num_classes() != k {
        return Err(Error::Dimension(format!("{} labels for {k} maps", labels.num_classes())));
    }
    let hw = h * w;
    for (c, &on) in labels.bits().iter().enumerate() {
        if !on {
            maps.data_mut()[c * hw..(c + 1) * hw].fill(0.0);
        }
    }
    Ok(())
}

/// `φ(embed(image))`, normalized; unlabeled channels are zeroed when labels
/// are given.
pub fn infer_single(params: &ModelParams, image: &Tensor, labels: Option<&LabelVector>) -> Result<LocalizationMap> {
    let mut g = Graph::new();
    let model = params.bind(&mut g);
    let x = g.leaf(image.clone());
    let f = embed(&mut g, x, &model)?;
    let s = class_maps(&mut g, f, &model)?;
    let mut maps = normalize_maps(g.value(s))?;
    if let Some(l) = labels {
        zero_unlabeled(&mut maps, l)?;
    }
    Ok(LocalizationMap {
        maps,
        strategy: Strategy::Single,
        related: Vec::new(),
    })
}

/// For each labeled class `k`, channel `k` is the mean over `R` related images
/// of channel `k` of `φ` applied to the query's co-attentive feature against
/// that image. Raw maps are averaged and normalized once. Classes without
/// related images keep the single-round channel; with `R = 0` the result,
/// strategy tag included, is exactly the single-round one.
pub fn infer_multi(
    params: &ModelParams,
    query: &ImageSample,
    reference: &[ImageSample],
    cfg: &InferConfig,
) -> Result<LocalizationMap> {
    if query.labels.is_zero() {
        return Err(Error::Contract(format!(
            "multi-round inference needs image labels; {} has none",
            query.id
        )));
    }
    if cfg.related == 0 {
        return infer_single(params, &query.pixels, Some(&query.labels));
    }
    let mut g = Graph::new();
    let model = params.bind(&mut g);
    let xq = g.leaf(query.pixels.clone());
    let fq = embed(&mut g, xq, &model)?;
    let single = class_maps(&mut g, fq, &model)?;
    let mut raw = g.value(single).clone();
    let (_, h, w) = raw.dims3()?;
    let hw = h * w;
    let mut used = Vec::new();
    for class in query.labels.classes() {
        let mut rng = derive_rng(cfg.seed, &[RELATED_STREAM, hash_str(&query.id), class as u64]);
        let related = related_images(reference, query, class, cfg.related, &mut rng)?;
        if related.is_empty() {
            continue;
        }
        let mut acc = vec![0.0; hw];
        for r in &related {
            let xr = g.leaf(r.pixels.clone());
            let fr = embed(&mut g, xr, &model)?;
            let co = forward_pair(&mut g, fq, fr, (&query.domain, &r.domain), &model.coattn)?;
            let s = class_maps(&mut g, co.coatt_m, &model)?;
            let ch = &g.value(s).data()[(class - 1) * hw..class * hw];
            acc.iter_mut().zip(ch).for_each(|(a, v)| *a += v);
        }
        let n = related.len() as f64;
        raw.data_mut()[(class - 1) * hw..class * hw]
            .iter_mut()
            .zip(&acc)
            .for_each(|(dst, a)| *dst = a / n);
        used.push((class, related.iter().map(|r| r.id.clone()).collect()));
    }
    let mut maps = normalize_maps(&raw)?;
    zero_unlabeled(&mut maps, &query.labels)?;
    Ok(LocalizationMap {
        maps,
        strategy: Strategy::Multi,
        related: used,
    })
}

/// Dispatches on `cfg.strategy`; single-round maps use the image labels.
pub fn localize(params: &ModelParams, image: &ImageSample, reference: &[ImageSample], cfg: &InferConfig) -> Result<LocalizationMap> {
    match cfg.strategy {
        Strategy::Single => infer_single(params, &image.pixels, Some(&image.labels)),
        Strategy::Multi => infer_multi(params, image, reference, cfg),
    }
}

/// Bilinear resize of each channel (half-pixel centres, edge clamped).
pub fn upsample_bilinear(maps: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (k, h, w) = maps.dims3()?;
    if h == 0 || w == 0 {
        return Err(Error::Dimension("cannot upsample an empty map".into()));
    }
    let axis = |dst: usize, src: usize, out: usize| {
        let x = ((dst as f64 + 0.5) * src as f64 / out as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let i0 = x.floor() as usize;
        let i1 = (i0 + 1).min(src - 1);
        (i0, i1, x - i0 as f64)
    };
    let ys: Vec<_> = (0..height).map(|y| axis(y, h, height)).collect();
    let xs: Vec<_> = (0..width).map(|x| axis(x, w, width)).collect();
    let d = maps.data();
    let mut out = Vec::with_capacity(k * height * width);
    for c in 0..k {
        let m = &d[c * h * w..(c + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = m[y0 * w + x0] * (1.0 - fx) + m[y0 * w + x1] * fx;
                let bot = m[y1 * w + x0] * (1.0 - fx) + m[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(vec![k, height, width], out)
}

/// Upsamples to `height × width`; each pixel takes the labeled class with the
/// highest map (lowest index on ties) if that value exceeds `theta`, else
/// background.
pub fn to_pseudo_mask(map: &LocalizationMap, labels: &LabelVector, theta: f64, height: usize, width: usize) -> Result<Vec<u8>> {
    if !(0.0..1.0).contains(&theta) {
        return Err(Error::Contract(format!("theta must be in [0, 1), got {theta}")));
    }
    let up = upsample_bilinear(&map.maps, height, width)?;
    let (k, _, _) = up.dims3()?;
    if labels.num_classes() != k {
        return Err(Error::Dimension(format!("{} labels for {k} maps", labels.num_classes())));
    }
    let hw = height * width;
    let classes = labels.classes();
    let d = up.data();
    Ok((0..hw)
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for &c in &classes {
                let v = d[(c - 1) * hw + p];
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((c, v));
                }
            }
            match best {
                Some((c, v)) if v > theta => c as u8,
                _ => BACKGROUND,
            }
        })
        .collect())
}

/// Pseudo masks for every sample, in order.
pub fn pseudo_masks(params: &ModelParams, data: &[ImageSample], reference: &[ImageSample], cfg: &InferConfig) -> Result<Vec<Vec<u8>>> {
    cfg.validate()?;
    data.iter()
        .map(|s| {
            let map = localize(params, s, reference, cfg)?;
            to_pseudo_mask(&map, &s.labels, cfg.theta, s.height(), s.width())
        })
        .collect()
}

/// Writes `<id>_class<k>.pgm` for each labeled class, upsampled to
/// `height × width` and scaled to 0–255.
pub fn write_maps(dir: &Path, id: &str, map: &LocalizationMap, labels: &LabelVector, height: usize, width: usize) -> Result<()> {
    let up = upsample_bilinear(&map.maps, height, width)?;
    let hw = height * width;
    for c in labels.classes() {
        let data = up.data()[(c - 1) * hw..c * hw]
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        netpbm::write(
            &dir.join(format!("{id}_class{c}.pgm")),
            &Raster {
                width,
                height,
                channels: 1,
                data,
            },
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::ModelConfig;
    use crate::data::{generate, DatasetSpec};
    use proptest::prelude::{any, prop, prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ModelParams, Vec<ImageSample>) {
        let spec = DatasetSpec {
            classes: 3,
            size: 16,
            train: 10,
            test: 2,
            ..DatasetSpec::default()
        };
        let data = generate(&spec).unwrap().train;
        let cfg = ModelConfig {
            channels: vec![4, 6, 6],
            classes: 3,
            domains: data.domains(),
        };
        let params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        (params, data.samples)
    }

    fn map_of(maps: Tensor) -> LocalizationMap {
        LocalizationMap {
            maps,
            strategy: Strategy::Single,
            related: Vec::new(),
        }
    }

    #[test]
    fn single_is_deterministic_normalized_and_masked() {
        let (params, data) = setup();
        let s = &data[0];
        let a = infer_single(&params, &s.pixels, Some(&s.labels)).unwrap();
        let b = infer_single(&params, &s.pixels, Some(&s.labels)).unwrap();
        assert_eq!(a, b);
        let (k, h, w) = a.maps.dims3().unwrap();
        for c in 0..k {
            let ch = &a.maps.data()[c * h * w..(c + 1) * h * w];
            assert!(ch.iter().all(|v| (0.0..=1.0).contains(v)));
            if !s.labels.bits()[c] {
                assert!(ch.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn zero_related_falls_back_to_single() {
        let (params, data) = setup();
        let cfg = InferConfig {
            related: 0,
            ..InferConfig::default()
        };
        for s in &data {
            let multi = infer_multi(&params, s, &data, &cfg).unwrap();
            let single = infer_single(&params, &s.pixels, Some(&s.labels)).unwrap();
            assert_eq!(multi, single);
            assert!(multi.related.is_empty());
        }
    }

    #[test]
    fn one_related_is_that_reference_map() {
        let (params, data) = setup();
        let q = &data[0];
        let class = q.labels.classes()[0];
        let cfg = InferConfig {
            related: 1,
            ..InferConfig::default()
        };
        let multi = infer_multi(&params, q, &data, &cfg).unwrap();
        let (_, ids) = multi.related.iter().find(|(c, _)| *c == class).unwrap();
        let r = data.iter().find(|s| s.id == ids[0]).unwrap();

        let mut g = Graph::new();
        let model = params.bind(&mut g);
        let xq = g.leaf(q.pixels.clone());
        let xr = g.leaf(r.pixels.clone());
        let fq = embed(&mut g, xq, &model).unwrap();
        let fr = embed(&mut g, xr, &model).unwrap();
        let co = forward_pair(&mut g, fq, fr, (&q.domain, &r.domain), &model.coattn).unwrap();
        let s = class_maps(&mut g, co.coatt_m, &model).unwrap();
        let expected = normalize_maps(g.value(s)).unwrap();
        let (_, h, w) = expected.dims3().unwrap();
        let hw = h * w;
        let range = (class - 1) * hw..class * hw;
        assert_eq!(multi.maps.data()[range.clone()], expected.data()[range]);
    }

    #[test]
    fn multi_is_deterministic_and_needs_labels() {
        let (params, data) = setup();
        let cfg = InferConfig::default();
        let a = infer_multi(&params, &data[1], &data, &cfg).unwrap();
        let b = infer_multi(&params, &data[1], &data, &cfg).unwrap();
        assert_eq!(a, b);
        let mut unlabeled = data[1].clone();
        unlabeled.labels = LabelVector::empty(3);
        assert!(matches!(infer_multi(&params, &unlabeled, &data, &cfg), Err(Error::Contract(_))));
    }

    #[test]
    fn mask_examples() {
        let labels = LabelVector::from_classes(2, &[1, 2]).unwrap();
        let dim = map_of(Tensor::full(&[2, 2, 2], 0.1));
        assert!(to_pseudo_mask(&dim, &labels, 0.2, 4, 4).unwrap().iter().all(|&v| v == 0));

        let one = LabelVector::from_classes(2, &[2]).unwrap();
        let mut t = Tensor::zeros(&[2, 2, 2]);
        t.data_mut()[4] = 1.0; // class 2, top-left
        let mask = to_pseudo_mask(&map_of(t), &one, 0.0, 2, 2).unwrap();
        assert_eq!(mask, vec![2, 0, 0, 0]);

        // ties resolve to the lower class
        let tie = map_of(Tensor::full(&[2, 1, 1], 0.5));
        assert_eq!(to_pseudo_mask(&tie, &labels, 0.2, 1, 1).unwrap(), vec![1]);
        assert!(to_pseudo_mask(&tie, &labels, 1.0, 1, 1).is_err());
    }

    #[test]
    fn bilinear_reference_points() {
        let t = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let up = upsample_bilinear(&t, 4, 4).unwrap();
        let d = up.data();
        // corners clamp to the source corners, centre samples interpolate
        assert_eq!(d[0], 0.0);
        assert_eq!(d[15], 3.0);
        assert!((d[5] - 0.75).abs() < 1e-15);
        assert!((d[1] - 0.25).abs() < 1e-15);
        let same = upsample_bilinear(&t, 2, 2).unwrap();
        assert_eq!(same, t);
    }

    fn loop_oracle(up: &Tensor, labels: &LabelVector, theta: f64) -> Vec<u8> {
        let (k, h, w) = up.dims3().unwrap();
        let mut out = vec![0u8; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for c in 0..k {
                    if labels.bits()[c] && up.data()[(c * h + y) * w + x] > best {
                        best = up.data()[(c * h + y) * w + x];
                        arg = c + 1;
                    }
                }
                out[y * w + x] = if arg > 0 && best > theta { arg as u8 } else { 0 };
            }
        }
        out
    }

    proptest! {
        #[test]
        fn mask_matches_loop_oracle(
            vals in prop::collection::vec(0.0f64..1.0, 3 * 4 * 4),
            bits in prop::collection::vec(any::<bool>(), 3),
            theta in 0.0f64..0.99,
        ) {
            let maps = Tensor::new(vec![3, 4, 4], vals).unwrap();
            let labels = LabelVector::from_bits(bits);
            let mask = to_pseudo_mask(&map_of(maps.clone()), &labels, theta, 8, 8).unwrap();
            let up = upsample_bilinear(&maps, 8, 8).unwrap();
            prop_assert_eq!(&mask, &loop_oracle(&up, &labels, theta));
            prop_assert!(mask.iter().all(|&v| v == 0 || labels.has(v as usize)));
        }

        #[test]
        fn argmax_invariant_to_common_scale(
            vals in prop::collection::vec(0.0f64..1.0, 2 * 3 * 3),
            scale in 0.01f64..100.0,
        ) {
            let labels = LabelVector::from_classes(2, &[1, 2]).unwrap();
            let maps = Tensor::new(vec![2, 3, 3], vals).unwrap();
            let scaled = Tensor::from_fn(&[2, 3, 3], |i| maps.data()[i] * scale);
            let a = to_pseudo_mask(&map_of(maps), &labels, 0.0, 3, 3).unwrap();
            let b = to_pseudo_mask(&map_of(scaled), &labels, 0.0, 3, 3).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn normalized_channels_peak_at_one(vals in prop::collection::vec(-1.0f64..1.0, 2 * 3 * 3)) {
            let raw = Tensor::new(vec![2, 3, 3], vals).unwrap();
            let n = normalize_maps(&raw).unwrap();
            for c in 0..2 {
                let src = &raw.data()[c * 9..(c + 1) * 9];
                let ch = &n.data()[c * 9..(c + 1) * 9];
                prop_assert!(ch.iter().all(|v| (0.0..=1.0).contains(v)));
                if src.iter().any(|&v| v > 0.0) {
                    prop_assert_eq!(ch.iter().copied().fold(0.0, f64::max), 1.0);
                }
            }
        }
    }
}
