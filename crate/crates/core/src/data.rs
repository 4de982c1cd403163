//! Synthetic multi-label shape images with pixel ground truth, their on-disk
//! layout, and the pair / related-image samplers used by training and
//! inference.
//!
//! On disk a dataset directory holds `manifest.jsonl`, `classes.json`,
//! `images/<id>.ppm` and `masks/<id>.pgm`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelVector;
use crate::netpbm::{self, Raster};
use crate::seeding::derive_rng;
use crate::tensor::Tensor;

pub const BACKGROUND: u8 = 0;
pub const IGNORE: u8 = 255;
pub const DEFAULT_DOMAIN: &str = "main";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Disk,
    Square,
    Triangle,
    Bar,
    Ring,
    Cross,
    Diamond,
    Frame,
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Disk => "disk",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Bar => "bar",
            Shape::Ring => "ring",
            Shape::Cross => "cross",
            Shape::Diamond => "diamond",
            Shape::Frame => "frame",
        }
    }

    /// Membership of an offset `(dx, dy)` from the centre, for radius `r`.
    fn contains(self, dx: f64, dy: f64, r: f64, vertical: bool) -> bool {
        let (ax, ay) = (dx.abs(), dy.abs());
        match self {
            Shape::Disk => dx * dx + dy * dy <= r * r,
            Shape::Square => ax <= 0.8 * r && ay <= 0.8 * r,
            Shape::Triangle => dy >= -r && dy <= 0.8 * r && ax <= 0.5 * (dy + r),
            Shape::Bar => {
                let (long, short) = if vertical { (ay, ax) } else { (ax, ay) };
                long <= r && short <= 0.35 * r
            }
            Shape::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= (0.55 * r).powi(2)
            }
            Shape::Cross => (ax <= 0.3 * r && ay <= r) || (ay <= 0.3 * r && ax <= r),
            Shape::Diamond => ax + ay <= r,
            Shape::Frame => {
                let outer = ax <= 0.85 * r && ay <= 0.85 * r;
                let inner = ax <= 0.45 * r && ay <= 0.45 * r;
                outer && !inner
            }
        }
    }
}

/// Shape and base colour of each class, in class-index order.
pub const CLASS_TABLE: [(Shape, [f64; 3]); 8] = [
    (Shape::Disk, [0.85, 0.2, 0.2]),
    (Shape::Square, [0.2, 0.75, 0.25]),
    (Shape::Triangle, [0.25, 0.35, 0.9]),
    (Shape::Bar, [0.9, 0.8, 0.2]),
    (Shape::Ring, [0.8, 0.3, 0.85]),
    (Shape::Cross, [0.2, 0.8, 0.85]),
    (Shape::Diamond, [0.95, 0.55, 0.15]),
    (Shape::Frame, [0.9, 0.9, 0.9]),
];

/// Parameters of the synthetic generator.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub classes: usize,
    pub size: usize,
    pub train: usize,
    pub test: usize,
    pub seed: u64,
    /// Inclusive bounds on distinct classes (one instance each) per image.
    pub min_instances: usize,
    pub max_instances: usize,
    /// Extra single-label training images tagged with `extra_domain`.
    pub extra_single: usize,
    pub extra_domain: String,
    /// Object size range as fractions of the image side.
    pub radius_min: f64,
    pub radius_max: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            classes: 5,
            size: 32,
            train: 500,
            test: 100,
            seed: 0,
            min_instances: 1,
            max_instances: 3,
            extra_single: 0,
            extra_domain: "single".into(),
            radius_min: 0.14,
            radius_max: 0.23,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > CLASS_TABLE.len() {
            return Err(Error::Config(format!(
                "classes must be in 2..={}, got {}",
                CLASS_TABLE.len(),
                self.classes
            )));
        }
        if self.size == 0 || self.size % 8 != 0 {
            return Err(Error::Config(format!(
                "image size must be a positive multiple of 8, got {}",
                self.size
            )));
        }
        if self.size < 16 {
            return Err(Error::Config("image size must be at least 16".into()));
        }
        if !(self.radius_min > 0.0 && self.radius_min < self.radius_max && self.radius_max <= 0.5) {
            return Err(Error::Config(format!(
                "object radius fractions must satisfy 0 < min < max <= 0.5; got {}..{}",
                self.radius_min, self.radius_max
            )));
        }
        if self.min_instances == 0
            || self.min_instances > self.max_instances
            || self.max_instances > self.classes.min(3)
        {
            return Err(Error::Config(format!(
                "instances per image must satisfy 1 <= min <= max <= min(3, classes); got {}..={}",
                self.min_instances, self.max_instances
            )));
        }
        Ok(())
    }

    /// Probability of drawing `n` distinct classes for one image. Two-label
    /// images get double weight.
    pub fn instance_weights(&self) -> Vec<(usize, f64)> {
        let raw: Vec<(usize, f64)> = (self.min_instances..=self.max_instances)
            .map(|n| (n, if n == 2 { 2.0 } else { 1.0 }))
            .collect();
        let total: f64 = raw.iter().map(|(_, w)| w).sum();
        raw.into_iter().map(|(n, w)| (n, w / total)).collect()
    }

    /// Expected fraction of multi-label images containing any given class.
    pub fn class_marginal(&self) -> f64 {
        let mean: f64 = self.instance_weights().iter().map(|&(n, p)| n as f64 * p).sum();
        mean / self.classes as f64
    }

    pub fn class_names(&self) -> Vec<String> {
        CLASS_TABLE[..self.classes]
            .iter()
            .map(|(s, _)| s.name().to_string())
            .collect()
    }
}

/// One image with its image-level labels and optional pixel mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    /// `[3, H, W]` in `[0, 1]`.
    pub pixels: Tensor,
    pub labels: LabelVector,
    /// Row-major `H × W` class indices, 0 background, 255 ignore.
    pub mask: Option<Vec<u8>>,
    pub domain: String,
}

impl ImageSample {
    pub fn unmasked(id: &str, pixels: Tensor, labels: LabelVector, domain: &str) -> Self {
        ImageSample {
            id: id.to_string(),
            pixels,
            labels,
            mask: None,
            domain: domain.to_string(),
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    /// Whether the label vector equals the set of classes present in the mask.
    pub fn labels_match_mask(&self) -> bool {
        let Some(mask) = &self.mask else {
            return true;
        };
        labels_from_mask(mask, self.labels.num_classes()).is_some_and(|l| l == self.labels)
    }
}

/// Label vector of the classes present in a mask; `None` if the mask holds an
/// index outside `0..=k` other than the ignore value.
pub fn labels_from_mask(mask: &[u8], k: usize) -> Option<LabelVector> {
    let mut bits = vec![false; k];
    for &v in mask {
        match v {
            BACKGROUND | IGNORE => {}
            c if (c as usize) <= k => bits[c as usize - 1] = true,
            _ => return None,
        }
    }
    Some(LabelVector::from_bits(bits))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub samples: Vec<ImageSample>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ImageSample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// Distinct domain tags in first-appearance order.
    pub fn domains(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in &self.samples {
            if !out.contains(&s.domain) {
                out.push(s.domain.clone());
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedData {
    pub train: Dataset,
    pub test: Dataset,
}

/// Generates the train and test splits. Each split draws from its own seeded
/// stream, so changing one split's size leaves the other untouched.
pub fn generate(spec: &DatasetSpec) -> Result<GeneratedData> {
    spec.validate()?;
    let classes = spec.class_names();
    let mut rng = derive_rng(spec.seed, &[1]);
    let mut train: Vec<ImageSample> = (0..spec.train)
        .map(|i| render_sample(spec, &format!("train_{i:05}"), None, DEFAULT_DOMAIN, &mut rng))
        .collect();
    let mut rng = derive_rng(spec.seed, &[3]);
    for i in 0..spec.extra_single {
        let k = rng.gen_range(1..=spec.classes);
        train.push(render_sample(
            spec,
            &format!("{}_{i:05}", spec.extra_domain),
            Some(k),
            &spec.extra_domain,
            &mut rng,
        ));
    }
    let mut rng = derive_rng(spec.seed, &[2]);
    let test = (0..spec.test)
        .map(|i| render_sample(spec, &format!("test_{i:05}"), None, DEFAULT_DOMAIN, &mut rng))
        .collect();
    Ok(GeneratedData {
        train: Dataset {
            classes: classes.clone(),
            samples: train,
        },
        test: Dataset {
            classes,
            samples: test,
        },
    })
}

fn draw_classes<R: Rng + ?Sized>(spec: &DatasetSpec, rng: &mut R) -> Vec<usize> {
    let weights = spec.instance_weights();
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut count = weights.last().unwrap().0;
    for &(n, p) in &weights {
        acc += p;
        if u < acc {
            count = n;
            break;
        }
    }
    let mut picked: Vec<usize> = index::sample(rng, spec.classes, count)
        .into_iter()
        .map(|i| i + 1)
        .collect();
    picked.sort_unstable();
    picked
}

fn render_sample<R: Rng + ?Sized>(
    spec: &DatasetSpec,
    id: &str,
    single_class: Option<usize>,
    domain: &str,
    rng: &mut R,
) -> ImageSample {
    let s = spec.size;
    loop {
        let classes = match single_class {
            Some(k) => vec![k],
            None => draw_classes(spec, rng),
        };
        let Some(mask) = place_objects(spec, &classes, rng) else {
            continue;
        };

        // low-amplitude textured background around a per-image grey level
        let base: f64 = rng.gen_range(0.3..0.55);
        let mut rgb = vec![0u8; 3 * s * s];
        let tint: [f64; 3] = [rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)];
        let jitter: Vec<[f64; 3]> = classes
            .iter()
            .map(|_| [rng.gen_range(-0.08..0.08), rng.gen_range(-0.08..0.08), rng.gen_range(-0.08..0.08)])
            .collect();
        for p in 0..s * s {
            let cls = mask[p] as usize;
            for ch in 0..3 {
                let noise: f64 = rng.gen_range(-0.08..0.08);
                let v = if cls == 0 {
                    base + tint[ch] + noise
                } else {
                    let slot = classes.iter().position(|&c| c == cls).unwrap();
                    CLASS_TABLE[cls - 1].1[ch] + jitter[slot][ch] + 0.5 * noise
                };
                rgb[ch * s * s + p] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        let pixels = Tensor::from_fn(&[3, s, s], |i| rgb[i] as f64 / 255.0);
        let labels = labels_from_mask(&mask, spec.classes).expect("generator writes valid indices");
        return ImageSample {
            id: id.to_string(),
            pixels,
            labels,
            mask: Some(mask),
            domain: domain.to_string(),
        };
    }
}

/// Rejection-samples non-overlapping placements (with a one-pixel gap).
/// Returns `None` when an object cannot be placed.
fn place_objects<R: Rng + ?Sized>(spec: &DatasetSpec, classes: &[usize], rng: &mut R) -> Option<Vec<u8>> {
    let s = spec.size;
    let mut mask = vec![BACKGROUND; s * s];
    let r_lo = s as f64 * spec.radius_min;
    let r_hi = s as f64 * spec.radius_max;
    for &cls in classes {
        let shape = CLASS_TABLE[cls - 1].0;
        let mut placed = false;
        for _ in 0..200 {
            let r: f64 = rng.gen_range(r_lo..r_hi);
            let cx: f64 = rng.gen_range(r..s as f64 - r);
            let cy: f64 = rng.gen_range(r..s as f64 - r);
            let vertical: bool = rng.gen();
            let pixels: Vec<usize> = (0..s * s)
                .filter(|&p| {
                    let (x, y) = ((p % s) as f64 + 0.5, (p / s) as f64 + 0.5);
                    shape.contains(x - cx, y - cy, r, vertical)
                })
                .collect();
            if pixels.is_empty() {
                continue;
            }
            let clashes = pixels.iter().any(|&p| {
                let (x, y) = ((p % s) as isize, (p / s) as isize);
                (-1..=1).any(|dy| {
                    (-1..=1).any(|dx| {
                        let (nx, ny) = (x + dx, y + dy);
                        nx >= 0
                            && ny >= 0
                            && (nx as usize) < s
                            && (ny as usize) < s
                            && mask[ny as usize * s + nx as usize] != BACKGROUND
                    })
                })
            });
            if clashes {
                continue;
            }
            for p in pixels {
                mask[p] = cls as u8;
            }
            placed = true;
            break;
        }
        if !placed {
            return None;
        }
    }
    Some(mask)
}

const PAIR_ATTEMPTS: usize = 100_000;

/// Uniformly samples an ordered pair of distinct samples sharing a class.
pub fn sample_pair<'a, R: Rng + ?Sized>(
    data: &'a [ImageSample],
    rng: &mut R,
) -> Result<(&'a ImageSample, &'a ImageSample)> {
    if !has_valid_pair(data) {
        return Err(Error::Sampling(
            "no two samples share a class; cannot form a training pair".into(),
        ));
    }
    for _ in 0..PAIR_ATTEMPTS {
        let i = rng.gen_range(0..data.len());
        let j = rng.gen_range(0..data.len());
        if i != j && data[i].labels.has_common(&data[j].labels)? {
            return Ok((&data[i], &data[j]));
        }
    }
    Err(Error::Sampling(format!(
        "no valid pair found in {PAIR_ATTEMPTS} attempts"
    )))
}

fn has_valid_pair(data: &[ImageSample]) -> bool {
    let Some(k) = data.first().map(|s| s.labels.num_classes()) else {
        return false;
    };
    (0..k).any(|c| data.iter().filter(|s| s.labels.bits()[c]).count() >= 2)
}

/// Up to `count` distinct samples (other than `query`) labeled with 1-based
/// class `class`, chosen uniformly at random.
pub fn related_images<'a, R: Rng + ?Sized>(
    data: &'a [ImageSample],
    query: &ImageSample,
    class: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<&'a ImageSample>> {
    if !query.labels.has(class) {
        return Err(Error::Contract(format!(
            "class {class} is not labeled on {}",
            query.id
        )));
    }
    let eligible: Vec<&ImageSample> = data
        .iter()
        .filter(|s| s.id != query.id && s.labels.has(class))
        .collect();
    let n = count.min(eligible.len());
    Ok(index::sample(rng, eligible.len(), n)
        .into_iter()
        .map(|i| eligible[i])
        .collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRecord {
    id: String,
    image: String,
    mask: Option<String>,
    labels: Vec<usize>,
    domain: String,
}

fn to_raster_rgb(t: &Tensor) -> Raster {
    let (_, h, w) = t.dims3().expect("image tensors are rank 3");
    let hw = h * w;
    let mut data = Vec::with_capacity(3 * hw);
    for p in 0..hw {
        for ch in 0..3 {
            data.push((t.data()[ch * hw + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Raster {
        width: w,
        height: h,
        channels: 3,
        data,
    }
}

fn from_raster_rgb(r: &Raster) -> Tensor {
    let hw = r.width * r.height;
    Tensor::from_fn(&[3, r.height, r.width], |i| {
        let (ch, p) = (i / hw, i % hw);
        r.data[p * 3 + ch] as f64 / 255.0
    })
}

pub fn write_mask(path: &Path, mask: &[u8], width: usize, height: usize) -> Result<()> {
    netpbm::write(
        path,
        &Raster {
            width,
            height,
            channels: 1,
            data: mask.to_vec(),
        },
    )
}

pub fn read_mask(path: &Path) -> Result<Raster> {
    let r = netpbm::read(path)?;
    if r.channels != 1 {
        return Err(Error::parse(path, 0, "mask must be a PGM (P5) file"));
    }
    Ok(r)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn write_dataset(data: &Dataset, dir: &Path) -> Result<()> {
    create_dir(&dir.join("images"))?;
    create_dir(&dir.join("masks"))?;

    let classes: BTreeMap<String, &String> = data
        .classes
        .iter()
        .enumerate()
        .map(|(i, n)| ((i + 1).to_string(), n))
        .collect();
    let classes_path = dir.join("classes.json");
    let mut json = serde_json::to_string_pretty(&classes).expect("string map serializes");
    json.push('\n');
    std::fs::write(&classes_path, json).map_err(|e| Error::io(&classes_path, e))?;

    let mut manifest = Vec::new();
    for s in &data.samples {
        let image = format!("images/{}.ppm", s.id);
        netpbm::write(&dir.join(&image), &to_raster_rgb(&s.pixels))?;
        let mask = match &s.mask {
            Some(m) => {
                let rel = format!("masks/{}.pgm", s.id);
                write_mask(&dir.join(&rel), m, s.width(), s.height())?;
                Some(rel)
            }
            None => None,
        };
        let rec = ManifestRecord {
            id: s.id.clone(),
            image,
            mask,
            labels: s.labels.classes(),
            domain: s.domain.clone(),
        };
        serde_json::to_writer(&mut manifest, &rec).expect("record serializes");
        manifest.push(b'\n');
    }
    let path = dir.join("manifest.jsonl");
    let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(&manifest).map_err(|e| Error::io(&path, e))
}

pub fn read_classes(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let map: BTreeMap<String, String> =
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))?;
    let mut classes = vec![None; map.len()];
    for (k, name) in map {
        let idx: usize = k
            .parse()
            .ok()
            .filter(|&i| i >= 1 && i <= classes.len())
            .ok_or_else(|| Error::parse(path, 0, format!("class key {k:?} is not in 1..=K")))?;
        classes[idx - 1] = Some(name);
    }
    classes
        .into_iter()
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::parse(path, 0, "class indices are not contiguous"))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let classes = read_classes(&dir.join("classes.json"))?;
    let k = classes.len();
    let path = dir.join("manifest.jsonl");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |m: String| Error::parse(&path, lineno, m);
        let rec: ManifestRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let labels = LabelVector::from_classes(k, &rec.labels).map_err(|e| err(e.to_string()))?;
        let raster = netpbm::read(&dir.join(&rec.image)).map_err(|e| err(e.to_string()))?;
        if raster.channels != 3 {
            return Err(err(format!("{} is not a PPM image", rec.image)));
        }
        let mask = match &rec.mask {
            Some(rel) => {
                let m = read_mask(&dir.join(rel)).map_err(|e| err(e.to_string()))?;
                if (m.width, m.height) != (raster.width, raster.height) {
                    return Err(err(format!("mask {rel} size differs from image")));
                }
                Some(m.data)
            }
            None => None,
        };
        let sample = ImageSample {
            id: rec.id,
            pixels: from_raster_rgb(&raster),
            labels,
            mask,
            domain: rec.domain,
        };
        if !sample.labels_match_mask() {
            return Err(err(format!("labels of {} disagree with its mask", sample.id)));
        }
        samples.push(sample);
    }
    Ok(Dataset { classes, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_spec(seed: u64) -> DatasetSpec {
        DatasetSpec {
            train: 20,
            test: 5,
            seed,
            ..DatasetSpec::default()
        }
    }

    fn labeled(id: &str, k: usize, classes: &[usize]) -> ImageSample {
        ImageSample::unmasked(
            id,
            Tensor::zeros(&[3, 8, 8]),
            LabelVector::from_classes(k, classes).unwrap(),
            DEFAULT_DOMAIN,
        )
    }

    #[test]
    fn generation_is_deterministic_and_consistent() {
        let a = generate(&small_spec(3)).unwrap();
        let b = generate(&small_spec(3)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate(&small_spec(4)).unwrap());
        for s in a.train.samples.iter().chain(&a.test.samples) {
            assert!(s.labels_match_mask());
            assert!(!s.labels.is_zero() && s.labels.count() <= 3);
            assert!(s.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(s.pixels.shape(), &[3, 32, 32]);
        }
    }

    #[test]
    fn rejects_bad_size() {
        let spec = DatasetSpec {
            size: 36,
            ..DatasetSpec::default()
        };
        assert!(matches!(generate(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn class_frequencies_match_marginals() {
        let spec = DatasetSpec {
            train: 1000,
            test: 0,
            seed: 9,
            ..DatasetSpec::default()
        };
        let data = generate(&spec).unwrap();
        let expect = spec.class_marginal();
        assert!((expect - 0.4).abs() < 1e-12);
        for c in 1..=spec.classes {
            let freq = data.train.samples.iter().filter(|s| s.labels.has(c)).count() as f64 / 1000.0;
            assert!((freq - expect).abs() <= 0.1 * expect, "class {c}: {freq}");
        }
    }

    #[test]
    fn extra_single_label_domain() {
        let spec = DatasetSpec {
            extra_single: 4,
            ..small_spec(5)
        };
        let data = generate(&spec).unwrap();
        let extra: Vec<_> = data.train.samples.iter().filter(|s| s.domain == "single").collect();
        assert_eq!(extra.len(), 4);
        assert!(extra.iter().all(|s| s.labels.count() == 1));
        assert_eq!(data.train.domains(), vec!["main".to_string(), "single".to_string()]);
    }

    #[test]
    fn pair_sampling_contracts() {
        let k = 3;
        let two = vec![labeled("a", k, &[1, 2]), labeled("b", k, &[1]), labeled("c", k, &[3])];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let (m, n) = sample_pair(&two, &mut rng).unwrap();
            let ids = [m.id.as_str(), n.id.as_str()];
            assert!(ids == ["a", "b"] || ids == ["b", "a"]);
        }
        let disjoint = vec![labeled("a", k, &[1]), labeled("b", k, &[2]), labeled("c", k, &[3])];
        assert!(matches!(sample_pair(&disjoint, &mut rng), Err(Error::Sampling(_))));
        assert!(matches!(sample_pair(&[], &mut rng), Err(Error::Sampling(_))));
    }

    #[test]
    fn pair_distribution_is_uniform() {
        let k = 3;
        let data = vec![
            labeled("a", k, &[1]),
            labeled("b", k, &[1, 2]),
            labeled("c", k, &[2]),
            labeled("d", k, &[3]),
            labeled("e", k, &[1, 3]),
        ];
        // valid ordered pairs, by brute force
        let mut valid = Vec::new();
        for (i, x) in data.iter().enumerate() {
            for (j, y) in data.iter().enumerate() {
                if i != j && x.labels.has_common(&y.labels).unwrap() {
                    valid.push((x.id.clone(), y.id.clone()));
                }
            }
        }
        assert_eq!(valid.len(), 10);
        let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draws = 10_000;
        for _ in 0..draws {
            let (m, n) = sample_pair(&data, &mut rng).unwrap();
            assert!(m.labels.has_common(&n.labels).unwrap());
            *counts.entry((m.id.clone(), n.id.clone())).or_default() += 1;
        }
        assert_eq!(counts.len(), valid.len());
        let expect = draws as f64 / valid.len() as f64;
        let chi2: f64 = counts.values().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
        // chi-square critical value, 9 degrees of freedom, p = 0.001
        assert!(chi2 < 27.88, "chi2 = {chi2}");
    }

    #[test]
    fn related_image_selection() {
        let k = 3;
        let data = vec![
            labeled("q", k, &[1, 2]),
            labeled("a", k, &[1]),
            labeled("b", k, &[1, 3]),
            labeled("c", k, &[3]),
        ];
        let q = &data[0];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(related_images(&data, q, 2, 3, &mut rng).unwrap().is_empty());
        let all = related_images(&data, q, 1, 10, &mut rng).unwrap();
        let mut ids: Vec<_> = all.iter().map(|s| s.id.as_str()).collect();
        ids.sort();
        assert_eq!(ids, ["a", "b"]);
        assert!(matches!(related_images(&data, q, 3, 1, &mut rng), Err(Error::Contract(_))));

        let pick = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            related_images(&data, q, 1, 1, &mut r).unwrap()[0].id.clone()
        };
        assert_eq!(pick(5), pick(5));
    }

    #[test]
    fn dataset_round_trip_is_lossless_and_byte_stable() {
        let data = generate(&small_spec(6)).unwrap().train;
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        write_dataset(&data, &a).unwrap();
        let back = read_dataset(&a).unwrap();
        assert_eq!(back, data);
        write_dataset(&back, &b).unwrap();
        for entry in ["manifest.jsonl", "classes.json", "images/train_00003.ppm", "masks/train_00003.pgm"] {
            assert_eq!(std::fs::read(a.join(entry)).unwrap(), std::fs::read(b.join(entry)).unwrap());
        }
    }

    #[test]
    fn manifest_unknown_fields_and_errors() {
        let data = generate(&small_spec(7)).unwrap().test;
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&data, dir.path()).unwrap();
        let manifest = dir.path().join("manifest.jsonl");
        let text = std::fs::read_to_string(&manifest).unwrap();

        let extended = text.replacen("{\"id\"", "{\"source\":\"web\",\"id\"", 1);
        std::fs::write(&manifest, &extended).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), data);

        let mut lines: Vec<&str> = text.lines().collect();
        lines[2] = "{\"id\": 5}";
        std::fs::write(&manifest, lines.join("\n")).unwrap();
        match read_dataset(dir.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }

        std::fs::write(&manifest, &text).unwrap();
        let img = dir.path().join("images/test_00001.ppm");
        let bytes = std::fs::read(&img).unwrap();
        std::fs::write(&img, &bytes[..bytes.len() / 2]).unwrap();
        match read_dataset(dir.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
