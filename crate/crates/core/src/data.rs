//! Synthetic cardiac-style phantoms, partial-annotation simulation and the
//! on-disk dataset (16-bit grayscale image PNGs, 8-bit indexed label PNGs,
//! JSON manifest with paths relative to the manifest).

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::files;
use crate::label_model::{ClassSet, ClassSpace, PartialLabelMap, SENTINEL};
use crate::network::hex;
use crate::plane::Plane;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

const LV: u8 = 1;
const MYO: u8 = 2;
const RV: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intensity {
    pub mean: f64,
    /// Spread of the per-image structure intensity.
    pub std: f64,
}

/// Geometry and appearance of the phantoms. Lengths are in pixels of a
/// 64x64 image and scale with the actual size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    pub center_jitter: f64,
    pub lv_radius: (f64, f64),
    pub myo_thickness: (f64, f64),
    pub rv_radius: (f64, f64),
    /// How far the RV disk center sits beyond the outer annulus radius, as a fraction of its radius.
    pub rv_shift: (f64, f64),
    /// Spread of the RV direction around the image's left side, in radians.
    pub rv_angle_jitter: f64,
    /// Background, LV, MYO, RV.
    pub intensity: [Intensity; 4],
    pub noise_std: f64,
    pub val_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            center_jitter: 6.0,
            lv_radius: (6.0, 10.0),
            myo_thickness: (3.0, 5.0),
            rv_radius: (9.0, 13.0),
            rv_shift: (0.1, 0.5),
            rv_angle_jitter: PI / 4.0,
            intensity: [
                Intensity { mean: 0.15, std: 0.03 },
                Intensity { mean: 0.85, std: 0.05 },
                Intensity { mean: 0.45, std: 0.05 },
                Intensity { mean: 0.70, std: 0.05 },
            ],
            noise_std: 0.06,
            val_count: 0,
            test_count: 0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let ordered = |(a, b): (f64, f64)| a.is_finite() && b.is_finite() && 0.0 <= a && a <= b;
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config("phantoms need at least 8x8 pixels".into()));
        }
        for (name, r) in [
            ("lv_radius", self.lv_radius),
            ("myo_thickness", self.myo_thickness),
            ("rv_radius", self.rv_radius),
            ("rv_shift", self.rv_shift),
        ] {
            if !ordered(r) {
                return Err(Error::Config(format!("{name} must be an ordered nonnegative range")));
            }
        }
        if self.lv_radius.0 <= 0.0 || self.myo_thickness.0 <= 0.0 || self.rv_radius.0 <= 0.0 {
            return Err(Error::Config("radii and thickness must be positive".into()));
        }
        if !(self.noise_std >= 0.0 && self.center_jitter >= 0.0) {
            return Err(Error::Config("noise and jitter must be nonnegative".into()));
        }
        Ok(())
    }

    fn scale(&self) -> f64 {
        self.height.min(self.width) as f64 / 64.0
    }
}

/// The sampled shape parameters of one phantom.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub center: (f64, f64),
    pub lv_radius: f64,
    pub outer_radius: f64,
    pub rv_center: (f64, f64),
    pub rv_radius: f64,
}

/// One rendered phantom: intensities in `[0, 1]` and a full label map.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub geometry: Geometry,
    pub image: Plane,
    pub labels: Vec<u8>,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn label_at(g: &Geometry, y: f64, x: f64) -> u8 {
    let d = ((y - g.center.0).powi(2) + (x - g.center.1).powi(2)).sqrt();
    if d < g.lv_radius {
        return LV;
    }
    if d < g.outer_radius {
        return MYO;
    }
    let drv = ((y - g.rv_center.0).powi(2) + (x - g.rv_center.1).powi(2)).sqrt();
    // one pixel of clearance keeps the crescent off the annulus
    if drv < g.rv_radius && d >= g.outer_radius + 1.0 {
        return RV;
    }
    0
}

fn sample_geometry<R: Rng + ?Sized>(spec: &PhantomSpec, rng: &mut R) -> Option<Geometry> {
    let s = spec.scale();
    let (h, w) = (spec.height as f64, spec.width as f64);
    let j = spec.center_jitter * s;
    let center = (h / 2.0 + uniform(rng, (-j, j)), w / 2.0 + uniform(rng, (-j, j)));
    let lv_radius = uniform(rng, spec.lv_radius) * s;
    let outer_radius = lv_radius + uniform(rng, spec.myo_thickness) * s;
    let rv_radius = uniform(rng, spec.rv_radius) * s;
    let angle = PI + uniform(rng, (-spec.rv_angle_jitter, spec.rv_angle_jitter));
    let dist = outer_radius + uniform(rng, spec.rv_shift) * rv_radius;
    let rv_center = (center.0 + dist * angle.sin(), center.1 + dist * angle.cos());
    let inside = |(cy, cx): (f64, f64), r: f64| cy - r >= 1.0 && cx - r >= 1.0 && cy + r <= h - 1.0 && cx + r <= w - 1.0;
    if !inside(center, outer_radius) || !inside(rv_center, rv_radius) {
        return None;
    }
    Some(Geometry {
        center,
        lv_radius,
        outer_radius,
        rv_center,
        rv_radius,
    })
}

fn rasterize(spec: &PhantomSpec, g: &Geometry) -> Vec<u8> {
    let mut labels = Vec::with_capacity(spec.height * spec.width);
    for r in 0..spec.height {
        for c in 0..spec.width {
            labels.push(label_at(g, r as f64 + 0.5, c as f64 + 0.5));
        }
    }
    labels
}

const MIN_STRUCTURE_PIXELS: usize = 8;
const MAX_ATTEMPTS: usize = 100;

/// Renders one phantom, rejection-sampling the geometry.
pub fn render_phantom<R: Rng + ?Sized>(spec: &PhantomSpec, rng: &mut R) -> Result<Phantom> {
    for _ in 0..MAX_ATTEMPTS {
        let Some(geometry) = sample_geometry(spec, rng) else {
            continue;
        };
        let labels = rasterize(spec, &geometry);
        let mut counts = [0usize; 4];
        for &l in &labels {
            counts[l as usize] += 1;
        }
        if counts[1..].iter().any(|&n| n < MIN_STRUCTURE_PIXELS) {
            continue;
        }
        let mut level = [0.0; 4];
        for (lv, int) in level.iter_mut().zip(&spec.intensity) {
            *lv = int.mean + if int.std > 0.0 { Normal::new(0.0, int.std).unwrap().sample(rng) } else { 0.0 };
        }
        let noise = (spec.noise_std > 0.0).then(|| Normal::new(0.0, spec.noise_std).unwrap());
        let data = labels
            .iter()
            .map(|&l| {
                let n = noise.map_or(0.0, |d| d.sample(rng));
                (level[l as usize] + n).clamp(0.0, 1.0)
            })
            .collect();
        return Ok(Phantom {
            geometry,
            image: Plane::new(spec.height, spec.width, data)?,
            labels,
        });
    }
    Err(Error::Config(format!(
        "phantom geometry unsatisfiable after {MAX_ATTEMPTS} attempts at {}x{}",
        spec.height, spec.width
    )))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub image_path: String,
    pub label_path: String,
    pub annotated_classes: ClassSet,
    pub split: Split,
    pub image_sha256: String,
    pub label_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub class_space: ClassSpace,
    pub records: Vec<Record>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let manifest: DatasetManifest = files::read_json(path)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Record {
                record: path.display().to_string(),
                reason: format!("unsupported manifest version {}", manifest.version),
            });
        }
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        files::write_json(path, self)
    }

    pub fn count(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == split).count()
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// 16-bit grayscale PNG of intensities in `[0, 1]`.
pub fn encode_image_png(image: &Plane) -> Result<Vec<u8>> {
    let mut raw = Vec::with_capacity(image.len() * 2);
    for &v in image.data() {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        raw.extend_from_slice(&q.to_be_bytes());
    }
    encode_png(image.width(), image.height(), png::ColorType::Grayscale, png::BitDepth::Sixteen, None, &raw)
}

/// 8-bit indexed PNG; index 255 is the unlabeled sentinel.
pub fn encode_label_png(width: usize, height: usize, labels: &[u8]) -> Result<Vec<u8>> {
    let mut palette = vec![0u8; 256 * 3];
    let colors: [[u8; 3]; 4] = [[0, 0, 0], [220, 50, 47], [38, 139, 210], [133, 153, 0]];
    for i in 0..255 {
        let c = colors.get(i).copied().unwrap_or([(i * 37 % 256) as u8, (i * 91 % 256) as u8, (i * 53 % 256) as u8]);
        palette[3 * i..3 * i + 3].copy_from_slice(&c);
    }
    palette[3 * 255..].copy_from_slice(&[128, 128, 128]);
    encode_png(width, height, png::ColorType::Indexed, png::BitDepth::Eight, Some(palette), labels)
}

fn encode_png(
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    palette: Option<Vec<u8>>,
    raw: &[u8],
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let err = |source| Error::PngEncode {
        path: PathBuf::from("<memory>"),
        source,
    };
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(depth);
        if let Some(p) = palette {
            enc.set_palette(p);
        }
        let mut writer = enc.write_header().map_err(err)?;
        writer.write_image_data(raw).map_err(err)?;
        writer.finish().map_err(err)?;
    }
    Ok(out)
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<(png::OutputInfo, Vec<u8>)> {
    let err = |source| Error::PngDecode {
        path: path.to_path_buf(),
        source,
    };
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(err)?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(err)?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}

pub fn decode_image_png(bytes: &[u8], path: &Path) -> Result<Plane> {
    let (info, buf) = decode_png(bytes, path)?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(Error::Record {
            record: path.display().to_string(),
            reason: "image is not 16-bit grayscale".into(),
        });
    }
    let data = buf
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
        .collect();
    Plane::new(info.height as usize, info.width as usize, data)
}

pub fn decode_label_png(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let (info, buf) = decode_png(bytes, path)?;
    if info.color_type != png::ColorType::Indexed || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Record {
            record: path.display().to_string(),
            reason: "label map is not 8-bit indexed".into(),
        });
    }
    Ok((info.height as usize, info.width as usize, buf))
}

fn write_file(root: &Path, rel: &str, bytes: &[u8]) -> Result<()> {
    files::write_atomic(&root.join(rel), bytes)
}

/// Writes `count` fully labeled phantoms under `dir` and returns the manifest
/// (also saved as `dir/manifest.json`). The last `test_count` records are the
/// test split, the `val_count` before them validation, the rest training.
pub fn generate_phantoms(spec: &PhantomSpec, count: usize, dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::Config("phantom count must be at least 1".into()));
    }
    if spec.val_count + spec.test_count > count {
        return Err(Error::Config(format!(
            "{} val + {} test records exceed the count {count}",
            spec.val_count, spec.test_count
        )));
    }
    let space = ClassSpace::cardiac();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let train = count - spec.val_count - spec.test_count;
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let phantom = render_phantom(spec, &mut rng)?;
        let split = if i < train {
            Split::Train
        } else if i < train + spec.val_count {
            Split::Val
        } else {
            Split::Test
        };
        let image_path = format!("images/{i:05}.png");
        let label_path = format!("labels/{i:05}.png");
        let image_bytes = encode_image_png(&phantom.image)?;
        let label_bytes = encode_label_png(spec.width, spec.height, &phantom.labels)?;
        write_file(dir, &image_path, &image_bytes)?;
        write_file(dir, &label_path, &label_bytes)?;
        records.push(Record {
            image_path,
            label_path,
            annotated_classes: space.all(),
            split,
            image_sha256: sha256_hex(&image_bytes),
            label_sha256: sha256_hex(&label_bytes),
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        class_space: space,
        records,
    };
    manifest.save(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// How training records lose their annotations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartialPolicy {
    /// Record `i` keeps foreground class `1 + i mod (m - 1)`.
    OneLabelRoundRobin,
    /// Each record keeps one uniformly drawn foreground class.
    OneLabelRandom,
    /// A seeded random `full_fraction` of records stays fully labeled; the
    /// others keep one foreground class, round-robin in record order.
    FullPart { full_fraction: f64 },
}

impl FromStr for PartialPolicy {
    type Err = Error;

    /// `round-robin`, `random`, or `full:<fraction>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "round-robin" | "one_label_round_robin" => Ok(PartialPolicy::OneLabelRoundRobin),
            "random" | "one_label_random" => Ok(PartialPolicy::OneLabelRandom),
            other => {
                let frac = other
                    .strip_prefix("full:")
                    .and_then(|f| f.parse::<f64>().ok())
                    .ok_or_else(|| Error::Config(format!("unknown partial policy {other:?}")))?;
                let p = PartialPolicy::FullPart { full_fraction: frac };
                p.validate()?;
                Ok(p)
            }
        }
    }
}

impl PartialPolicy {
    pub fn validate(&self) -> Result<()> {
        if let PartialPolicy::FullPart { full_fraction } = self {
            if !(0.0..=1.0).contains(full_fraction) {
                return Err(Error::Config(format!("full fraction {full_fraction} is outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Class kept by each record (indexed by record), `None` = stays as is.
fn kept_classes(train: &[usize], n: usize, m: usize, policy: PartialPolicy, rng: &mut ChaCha8Rng) -> Vec<Option<usize>> {
    let mut keep = vec![None; n];
    match policy {
        PartialPolicy::OneLabelRoundRobin => {
            for (n, &i) in train.iter().enumerate() {
                keep[i] = Some(1 + n % (m - 1));
            }
        }
        PartialPolicy::OneLabelRandom => {
            for &i in train {
                keep[i] = Some(rng.random_range(1..m));
            }
        }
        PartialPolicy::FullPart { full_fraction } => {
            let n_full = (full_fraction * train.len() as f64).round() as usize;
            let mut order = train.to_vec();
            order.shuffle(rng);
            let full: ClassSet = order[..n_full].iter().copied().collect();
            let mut n = 0;
            for &i in train {
                if !full.contains(i) {
                    keep[i] = Some(1 + n % (m - 1));
                    n += 1;
                }
            }
        }
    }
    keep
}

/// In-memory counterpart of [`simulate_partial`] for a fully annotated dataset.
pub fn partial_dataset(dataset: &Dataset, policy: PartialPolicy, seed: u64) -> Result<Dataset> {
    policy.validate()?;
    let m = dataset.class_space().m();
    let train = dataset.ids(Split::Train);
    for &i in &train {
        if !dataset.sample(i).labels.is_fully_annotated(m) {
            return Err(Error::Record {
                record: dataset.sample(i).name.clone(),
                reason: "partial simulation needs fully annotated records".into(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = kept_classes(&train, dataset.len(), m, policy, &mut rng);
    let mut samples = dataset.samples().to_vec();
    for (s, k) in samples.iter_mut().zip(keep) {
        if let Some(class) = k {
            let (h, w) = s.image.shape();
            s.labels = PartialLabelMap::from_class_mask(h, w, &s.labels.class_mask(class), class)?;
        }
    }
    Dataset::from_samples(dataset.class_space().clone(), samples)
}

/// Rewrites the training labels of the dataset at `src_dir` into `dst_dir`
/// according to `policy`. Images (and untouched label files) are copied
/// byte for byte; validation and test records keep their full labels.
pub fn simulate_partial(
    manifest: &DatasetManifest,
    src_dir: &Path,
    policy: PartialPolicy,
    seed: u64,
    dst_dir: &Path,
) -> Result<DatasetManifest> {
    policy.validate()?;
    let space = &manifest.class_space;
    let m = space.m();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train: Vec<usize> = (0..manifest.records.len())
        .filter(|&i| manifest.records[i].split == Split::Train)
        .collect();
    for &i in &train {
        if manifest.records[i].annotated_classes != space.all() {
            return Err(Error::Record {
                record: manifest.records[i].label_path.clone(),
                reason: "partial simulation needs fully annotated records".into(),
            });
        }
    }
    let keep = kept_classes(&train, manifest.records.len(), m, policy, &mut rng);
    let same_dir = src_dir == dst_dir;
    let mut records = Vec::with_capacity(manifest.records.len());
    for (i, rec) in manifest.records.iter().enumerate() {
        let image_bytes = read_checked(src_dir, &rec.image_path, &rec.image_sha256)?;
        if !same_dir {
            write_file(dst_dir, &rec.image_path, &image_bytes)?;
        }
        let mut out = rec.clone();
        match keep[i] {
            None => {
                if !same_dir {
                    let label_bytes = read_checked(src_dir, &rec.label_path, &rec.label_sha256)?;
                    write_file(dst_dir, &rec.label_path, &label_bytes)?;
                }
            }
            Some(class) => {
                let path = src_dir.join(&rec.label_path);
                let label_bytes = read_checked(src_dir, &rec.label_path, &rec.label_sha256)?;
                let (h, w, labels) = decode_label_png(&label_bytes, &path)?;
                let kept: Vec<u8> = labels
                    .iter()
                    .map(|&l| if l as usize == class { l } else { SENTINEL })
                    .collect();
                let bytes = encode_label_png(w, h, &kept)?;
                write_file(dst_dir, &rec.label_path, &bytes)?;
                out.annotated_classes = ClassSet::single(class);
                out.label_sha256 = sha256_hex(&bytes);
            }
        }
        records.push(out);
    }
    let out = DatasetManifest {
        version: MANIFEST_VERSION,
        class_space: manifest.class_space.clone(),
        records,
    };
    out.save(&dst_dir.join(MANIFEST_FILE))?;
    Ok(out)
}

fn read_checked(root: &Path, rel: &str, sha: &str) -> Result<Vec<u8>> {
    let path = root.join(rel);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if sha256_hex(&bytes) != sha {
        return Err(Error::Record {
            record: rel.to_string(),
            reason: "checksum mismatch".into(),
        });
    }
    Ok(bytes)
}

/// A loaded record: normalized image and partial labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub name: String,
    pub image: Plane,
    pub labels: PartialLabelMap,
    pub split: Split,
}

/// Indexed in-memory dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    class_space: ClassSpace,
    samples: Vec<Sample>,
    pools: Vec<Vec<usize>>,
}

impl Dataset {
    /// `samples[i].id` must equal `i`.
    pub fn from_samples(class_space: ClassSpace, samples: Vec<Sample>) -> Result<Self> {
        let m = class_space.m();
        let mut shape = None;
        for (i, s) in samples.iter().enumerate() {
            let record = || s.name.clone();
            if s.id != i {
                return Err(Error::Record {
                    record: record(),
                    reason: format!("id {} at position {i}", s.id),
                });
            }
            if s.image.shape() != (s.labels.height(), s.labels.width()) {
                return Err(Error::Record {
                    record: record(),
                    reason: "image and label shapes differ".into(),
                });
            }
            if *shape.get_or_insert(s.image.shape()) != s.image.shape() {
                return Err(Error::Record {
                    record: record(),
                    reason: "shape differs from the first record".into(),
                });
            }
            if let Some(c) = s.labels.annotated().max().filter(|&c| c >= m) {
                return Err(Error::Record {
                    record: record(),
                    reason: format!("annotated class {c} outside {m} classes"),
                });
            }
        }
        let mut pools = vec![Vec::new(); m];
        for s in samples.iter().filter(|s| s.split == Split::Train) {
            for c in s.labels.annotated().iter() {
                pools[c].push(s.id);
            }
        }
        Ok(Self {
            class_space,
            samples,
            pools,
        })
    }

    pub fn class_space(&self) -> &ClassSpace {
        &self.class_space
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample(&self, id: usize) -> &Sample {
        &self.samples[id]
    }

    /// Training samples annotated with `class`, in id order.
    pub fn pool(&self, class: usize) -> &[usize] {
        &self.pools[class]
    }

    pub fn ids(&self, split: Split) -> Vec<usize> {
        self.samples.iter().filter(|s| s.split == split).map(|s| s.id).collect()
    }

    pub fn shape(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| s.image.shape())
    }
}

/// Loads and verifies every record of a manifest.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::with_capacity(manifest.records.len());
    for (id, rec) in manifest.records.iter().enumerate() {
        let image_bytes = read_checked(root, &rec.image_path, &rec.image_sha256)?;
        let label_bytes = read_checked(root, &rec.label_path, &rec.label_sha256)?;
        let image = decode_image_png(&image_bytes, &root.join(&rec.image_path))?;
        let (h, w, labels) = decode_label_png(&label_bytes, &root.join(&rec.label_path))?;
        if (h, w) != image.shape() {
            return Err(Error::Record {
                record: rec.label_path.clone(),
                reason: format!("label map is {h}x{w}, image {}x{}", image.height(), image.width()),
            });
        }
        let labels = PartialLabelMap::new(h, w, labels, rec.annotated_classes.clone()).map_err(|e| Error::Record {
            record: rec.label_path.clone(),
            reason: e.to_string(),
        })?;
        samples.push(Sample {
            id,
            name: rec.image_path.clone(),
            image: image.standardized(),
            labels,
            split: rec.split,
        });
    }
    Dataset::from_samples(manifest.class_space, samples)
}

/// In-memory phantoms with full labels, standardized like loaded images.
pub fn phantom_dataset(spec: &PhantomSpec, count: usize) -> Result<Dataset> {
    spec.validate()?;
    let space = ClassSpace::cardiac();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let train = count.saturating_sub(spec.val_count + spec.test_count);
    let mut samples = Vec::with_capacity(count);
    for id in 0..count {
        let p = render_phantom(spec, &mut rng)?;
        let split = if id < train {
            Split::Train
        } else if id < train + spec.val_count {
            Split::Val
        } else {
            Split::Test
        };
        samples.push(Sample {
            id,
            name: format!("phantom-{id:05}"),
            image: p.image.standardized(),
            labels: PartialLabelMap::full(spec.height, spec.width, p.labels, space.m())?,
            split,
        });
    }
    Dataset::from_samples(space, samples)
}
