//! PrimNet/DualNet backbone: input layout, parameters, checkpoints and the
//! two forward branches.
//!
//! The input stacks the target image followed by one (image, mask) channel
//! pair per conditional slot, in the configured class order. The output has
//! `2m` logits that become per-channel probabilities.

pub mod assemble;
pub mod ops;
pub mod unet;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::files;
use crate::losses::PairwisePrediction;
use crate::pairing::{ConditionalSet, DualSample};
use crate::plane::Plane;

pub use assemble::{assemble_segmentation, class_probability, BackgroundRule, Segmentation};
pub use ops::Real;
pub use unet::{Cache, ParamSpec, UNet};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Number of label classes; the output has `2m` channels.
    pub m: usize,
    /// Class of each conditional slot, in input order.
    pub conditional_classes: Vec<usize>,
    pub depth: usize,
    pub base_filters: usize,
    pub height: usize,
    pub width: usize,
}

impl BackboneConfig {
    /// 64x64, depth 3, 16 base filters, one slot per foreground class.
    pub fn toy(m: usize) -> Self {
        Self {
            m,
            conditional_classes: (1..m).collect(),
            depth: 3,
            base_filters: 16,
            height: 64,
            width: 64,
        }
    }

    pub fn in_channels(&self) -> usize {
        1 + 2 * self.conditional_classes.len()
    }

    pub fn out_channels(&self) -> usize {
        2 * self.m
    }

    /// Background keeps its own channel pair only when it is conditioned on.
    pub fn background_rule(&self) -> BackgroundRule {
        if self.conditional_classes.contains(&0) {
            BackgroundRule::Channel
        } else {
            BackgroundRule::Complement
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.m)));
        }
        if self.depth == 0 || self.base_filters == 0 {
            return Err(Error::Config("depth and base_filters must be positive".into()));
        }
        let mult = 1 << (self.depth - 1);
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(mult) || !self.width.is_multiple_of(mult) {
            return Err(Error::Config(format!(
                "input {}x{} must be a nonzero multiple of {mult} for depth {}",
                self.height, self.width, self.depth
            )));
        }
        let mut seen = vec![false; self.m];
        for &c in &self.conditional_classes {
            if c >= self.m {
                return Err(Error::ClassOutOfRange { class: c, m: self.m });
            }
            if std::mem::replace(&mut seen[c], true) {
                return Err(Error::Config(format!("conditional class {c} listed twice")));
            }
        }
        Ok(())
    }

    /// Short hex digest identifying the parameter layout.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&json)[..8])
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamsMeta {
    pub config_hash: String,
    pub stage: u8,
    pub step: usize,
}

/// Flat parameter vector of one network plus its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub values: Vec<f64>,
    pub meta: ParamsMeta,
}

impl ModelParams {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &ModelParams) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Named views in layout order.
    pub fn named<'a>(&'a self, net: &'a Network) -> impl Iterator<Item = (&'a str, &'a [f64])> + 'a {
        net.unet
            .specs()
            .iter()
            .map(move |s| (s.name.as_str(), &self.values[s.offset..s.offset + s.len]))
    }
}

const MAGIC: &[u8; 8] = b"PSEGPAR1";

/// JSON sidecar written next to every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: BackboneConfig,
    pub config_hash: String,
    pub stage: u8,
    pub step: usize,
    pub seed: u64,
    pub conditional_class_list: Vec<usize>,
    pub cond_input: bool,
    pub n_params: usize,
}

/// Writes `path` (raw little-endian f64 values) and `path.json` atomically.
pub fn save_checkpoint(path: &Path, params: &ModelParams, meta: &CheckpointMeta) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + 8 * params.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in &params.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    files::write_atomic(path, &bytes)?;
    files::write_json(&sidecar(path), meta)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, CheckpointMeta)> {
    let meta: CheckpointMeta = files::read_json(&sidecar(path))?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |reason: &str| Error::Record {
        record: path.display().to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a parameter file"));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() != 16 + 8 * n || n != meta.n_params {
        return Err(corrupt("parameter count does not match"));
    }
    let values = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if meta.config.hash() != meta.config_hash {
        return Err(corrupt("config hash does not match its config"));
    }
    Ok((
        ModelParams {
            values,
            meta: ParamsMeta {
                config_hash: meta.config_hash.clone(),
                stage: meta.stage,
                step: meta.step,
            },
        },
        meta,
    ))
}

fn sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// A configured backbone. Parameters live outside so PrimNet and DualNet
/// can share one `Network`.
#[derive(Debug, Clone)]
pub struct Network {
    cfg: BackboneConfig,
    unet: UNet,
}

impl Network {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let unet = UNet::new(cfg.in_channels(), cfg.out_channels(), cfg.depth, cfg.base_filters);
        Ok(Self { cfg, unet })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn unet(&self) -> &UNet {
        &self.unet
    }

    pub fn n_params(&self) -> usize {
        self.unet.n_params()
    }

    pub fn init_params(&self, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; self.n_params()];
        for (spec, std) in self.unet.init_std() {
            if std > 0.0 {
                let normal = Normal::new(0.0, std).expect("finite std");
                for v in &mut values[spec.offset..spec.offset + spec.len] {
                    *v = normal.sample(&mut rng);
                }
            }
        }
        ModelParams {
            values,
            meta: ParamsMeta {
                config_hash: self.cfg.hash(),
                stage: 0,
                step: 0,
            },
        }
    }

    fn check_params(&self, params: &ModelParams) -> Result<()> {
        if params.meta.config_hash != self.cfg.hash() || params.len() != self.n_params() {
            return Err(Error::Config(format!(
                "parameters for config {} ({} values) do not fit config {} ({} values)",
                params.meta.config_hash,
                params.len(),
                self.cfg.hash(),
                self.n_params()
            )));
        }
        Ok(())
    }

    /// Channel index of slot `slot`'s mask in the input.
    pub fn mask_channel(slot: usize) -> usize {
        2 + 2 * slot
    }

    /// Stacks the target image and conditional pairs into the input tensor.
    pub fn build_input(&self, image: &Plane, cond: &ConditionalSet) -> Result<Vec<f64>> {
        let (h, w) = (self.cfg.height, self.cfg.width);
        if image.shape() != (h, w) {
            return Err(Error::ShapeMismatch(format!(
                "target image is {}x{}, network expects {h}x{w}",
                image.height(),
                image.width()
            )));
        }
        if cond.classes() != self.cfg.conditional_classes {
            return Err(Error::ShapeMismatch(format!(
                "conditional slots {:?} do not match configured classes {:?}",
                cond.classes(),
                self.cfg.conditional_classes
            )));
        }
        let mut x = Vec::with_capacity(self.cfg.in_channels() * h * w);
        x.extend_from_slice(image.data());
        for (slot, pair) in cond.slots().iter().enumerate() {
            if pair.image.shape() != (h, w) {
                return Err(Error::ShapeMismatch(format!(
                    "conditional slot {slot} (class {}) is {}x{}, network expects {h}x{w}",
                    pair.class_id,
                    pair.image.height(),
                    pair.image.width()
                )));
            }
            x.extend_from_slice(pair.image.data());
            x.extend_from_slice(pair.mask.data());
        }
        Ok(x)
    }

    /// Raw logits and cache for backpropagation.
    pub fn forward_raw<T: Real>(&self, params: &[T], input: &[f64]) -> (Vec<T>, Cache<T>) {
        let x: Vec<T> = input.iter().map(|&v| T::of(v)).collect();
        self.unet.forward(params, &x, self.cfg.height, self.cfg.width)
    }

    pub fn prediction<T: Real>(&self, logits: &[T]) -> PairwisePrediction {
        let z: Vec<f64> = logits.iter().map(|v| v.f64()).collect();
        PairwisePrediction::from_logits(self.cfg.m, self.cfg.height, self.cfg.width, &z)
            .expect("logit count matches the configuration")
    }

    /// PrimNet: segments the target image given its conditional set.
    pub fn forward_prim(&self, params: &ModelParams, image: &Plane, cond: &ConditionalSet) -> Result<PairwisePrediction> {
        self.check_params(params)?;
        let x = self.build_input(image, cond)?;
        let (logits, _) = self.forward_raw(&params.values, &x);
        Ok(self.prediction(&logits))
    }

    /// DualNet: segments the swapped-in conditional image of a dual sample.
    pub fn forward_dual(&self, params: &ModelParams, dual: &DualSample) -> Result<PairwisePrediction> {
        self.forward_prim(params, &dual.dual.image, &dual.dual.cond)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_channel_layout_and_parameter_count() {
        let cfg = BackboneConfig::toy(4);
        assert_eq!(cfg.in_channels(), 7);
        assert_eq!(cfg.out_channels(), 8);
        let net = Network::new(cfg).unwrap();
        // enc 7->16->16, 16->32->32, 32->64->64; dec up 64->32, 64->32->32, up 32->16, 32->16->16; head 16->8
        let conv = |i: usize, o: usize, k: usize| o * i * k * k + o;
        let expected = conv(7, 16, 3)
            + conv(16, 16, 3)
            + conv(16, 32, 3)
            + conv(32, 32, 3)
            + conv(32, 64, 3)
            + conv(64, 64, 3)
            + (32 * 4 * 64 + 32)
            + conv(64, 32, 3)
            + conv(32, 32, 3)
            + (16 * 4 * 32 + 16)
            + conv(32, 16, 3)
            + conv(16, 16, 3)
            + conv(16, 8, 1);
        assert_eq!(net.n_params(), expected);
        assert_eq!(net.n_params(), 117_736);
    }

    #[test]
    fn config_validation() {
        let mut cfg = BackboneConfig::toy(4);
        cfg.height = 62;
        assert!(cfg.validate().is_err());
        let mut cfg = BackboneConfig::toy(4);
        cfg.conditional_classes = vec![1, 1];
        assert!(cfg.validate().is_err());
        let mut cfg = BackboneConfig::toy(4);
        cfg.conditional_classes = vec![4];
        assert!(cfg.validate().unwrap_err().is_config());
    }

    #[test]
    fn init_is_seeded() {
        let net = Network::new(BackboneConfig::toy(4)).unwrap();
        assert_eq!(net.init_params(3), net.init_params(3));
        assert_ne!(net.init_params(3).values, net.init_params(4).values);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = BackboneConfig::toy(3);
        cfg.base_filters = 2;
        let net = Network::new(cfg.clone()).unwrap();
        let params = net.init_params(9);
        let meta = CheckpointMeta {
            config_hash: cfg.hash(),
            conditional_class_list: cfg.conditional_classes.clone(),
            config: cfg,
            stage: 1,
            step: 0,
            seed: 9,
            cond_input: true,
            n_params: params.len(),
        };
        let path = dir.path().join("p.bin");
        save_checkpoint(&path, &params, &meta).unwrap();
        let (back, back_meta) = load_checkpoint(&path).unwrap();
        assert_eq!(back.values, params.values);
        assert_eq!(back_meta, meta);
    }
}
