//! Dice evaluation, prediction export and the ablation / supervision-mix runners.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    encode_label_png, load_dataset, partial_dataset, sha256_hex, Dataset, DatasetManifest, PartialPolicy, Split,
    MANIFEST_FILE, MANIFEST_VERSION,
};
use crate::error::{Error, Result};
use crate::files;
use crate::label_model::SENTINEL;
use crate::losses::ObjectiveTerms;
use crate::network::{assemble_segmentation, load_checkpoint, BackboneConfig, ModelParams, Network};
use crate::pairing::{sample_conditional_set, PairingConfig};
use crate::plane::Plane;
use crate::trainer::{eval_stream, TrainConfig, TrainState, Trainer};

pub const DEFAULT_EVAL_SEED: u64 = 20_240_917;

/// `2|A and B| / (|A| + |B|)`, and 1 when both masks are empty.
pub fn dice(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "dice of masks with {} and {} pixels",
            pred.len(),
            gt.len()
        )));
    }
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        a += p as usize;
        b += g as usize;
        inter += (p && g) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDice {
    pub id: usize,
    pub name: String,
    /// One entry per foreground class.
    pub dice: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: BTreeMap<String, ClassStats>,
    /// Unweighted mean of the foreground per-class means.
    pub mean_dice: f64,
    pub n_samples: usize,
    pub checkpoint: Option<String>,
    pub seed: u64,
    pub config_hash: String,
    pub split: Split,
    /// Dice is computed per 2D sample.
    pub dice_unit: String,
    pub classes: Vec<String>,
    pub samples: Vec<SampleDice>,
}

impl EvalReport {
    pub fn csv(&self) -> String {
        let mut s = String::from("id,name");
        for c in &self.classes {
            write!(s, ",{c}").unwrap();
        }
        s.push('\n');
        for r in &self.samples {
            write!(s, "{},{}", r.id, r.name).unwrap();
            for d in &r.dice {
                write!(s, ",{d}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    /// Writes `report.json` and `per_sample.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        files::write_json(&dir.join("report.json"), self)?;
        files::write_atomic(&dir.join("per_sample.csv"), self.csv().as_bytes())
    }
}

fn mean_std(v: &[f64]) -> ClassStats {
    if v.is_empty() {
        return ClassStats { mean: 0.0, std: 0.0 };
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
    ClassStats { mean, std: var.sqrt() }
}

/// PrimNet with its conditioning mode, ready for inference.
pub struct Predictor<'a> {
    pub net: &'a Network,
    pub params: &'a ModelParams,
    pub cond_input: bool,
    pub pairing: PairingConfig,
    pub seed: u64,
}

impl Predictor<'_> {
    /// Hard label map of dataset sample `id`, conditioned on training-split pairs.
    pub fn segment(&self, dataset: &Dataset, id: usize) -> Result<Vec<u8>> {
        let s = dataset.sample(id);
        let mut rng = eval_stream(self.seed, id);
        let cond = sample_conditional_set(Some(id), dataset, &mut rng, &self.pairing)?;
        let cond = if self.cond_input { cond } else { cond.zeroed() };
        let pred = self.net.forward_prim(self.params, &s.image, &cond)?;
        Ok(assemble_segmentation(&pred, self.net.config().background_rule()).labels)
    }
}

fn pairing_for(cfg: &BackboneConfig) -> PairingConfig {
    PairingConfig {
        conditional_classes: cfg.conditional_classes.clone(),
        exclude_target: true,
    }
}

/// Dice of every sample of `split` against its full labels.
pub fn evaluate_params(
    net: &Network,
    params: &ModelParams,
    cond_input: bool,
    dataset: &Dataset,
    split: Split,
    seed: u64,
) -> Result<EvalReport> {
    let space = dataset.class_space();
    let m = space.m();
    let predictor = Predictor {
        net,
        params,
        cond_input,
        pairing: pairing_for(net.config()),
        seed,
    };
    let mut samples = Vec::new();
    for id in dataset.ids(split) {
        let s = dataset.sample(id);
        if !s.labels.is_fully_annotated(m) {
            return Err(Error::Record {
                record: s.name.clone(),
                reason: "evaluation needs fully annotated labels".into(),
            });
        }
        let labels = predictor.segment(dataset, id)?;
        let mut row = Vec::with_capacity(m - 1);
        for class in 1..m {
            let p: Vec<bool> = labels.iter().map(|&l| l as usize == class).collect();
            row.push(dice(&p, &s.labels.class_mask(class))?);
        }
        samples.push(SampleDice {
            id,
            name: s.name.clone(),
            dice: row,
        });
    }
    let classes: Vec<String> = (1..m).map(|c| space.name(c).to_string()).collect();
    let mut per_class = BTreeMap::new();
    let mut means = Vec::new();
    for (j, name) in classes.iter().enumerate() {
        let col: Vec<f64> = samples.iter().map(|r| r.dice[j]).collect();
        let st = mean_std(&col);
        means.push(st.mean);
        per_class.insert(name.clone(), st);
    }
    Ok(EvalReport {
        per_class,
        mean_dice: means.iter().sum::<f64>() / means.len() as f64,
        n_samples: samples.len(),
        checkpoint: None,
        seed,
        config_hash: net.config().hash(),
        split,
        dice_unit: "per-sample (2D slice)".into(),
        classes,
        samples,
    })
}

/// Evaluates a saved checkpoint on a dataset manifest.
pub fn evaluate(checkpoint: &Path, manifest: &Path, split: Split, seed: u64) -> Result<EvalReport> {
    let (params, meta) = load_checkpoint(checkpoint)?;
    let dataset = load_dataset(manifest)?;
    if dataset.class_space().m() != meta.config.m {
        return Err(Error::Config(format!(
            "checkpoint has {} classes, dataset {}",
            meta.config.m,
            dataset.class_space().m()
        )));
    }
    let net = Network::new(meta.config.clone())?;
    let mut report = evaluate_params(&net, &params, meta.cond_input, &dataset, split, seed)?;
    report.checkpoint = Some(checkpoint.display().to_string());
    Ok(report)
}

/// RGB overlay of a label map on its image.
pub fn overlay_png(image: &Plane, labels: &[u8]) -> Result<Vec<u8>> {
    let colors: [[f64; 3]; 4] = [[0.0; 3], [220.0, 50.0, 47.0], [38.0, 139.0, 210.0], [133.0, 153.0, 0.0]];
    let lo = image.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = image.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut raw = Vec::with_capacity(image.len() * 3);
    for (&v, &l) in image.data().iter().zip(labels) {
        let g = (v - lo) / span * 255.0;
        let c = colors.get(l as usize).filter(|_| l != 0 && l != SENTINEL);
        for ch in 0..3 {
            let out = match c {
                Some(c) => 0.5 * g + 0.5 * c[ch],
                None => g,
            };
            raw.push(out.round().clamp(0.0, 255.0) as u8);
        }
    }
    let mut out = Vec::new();
    let err = |source| Error::PngEncode {
        path: PathBuf::from("<overlay>"),
        source,
    };
    {
        let mut enc = png::Encoder::new(&mut out, image.width() as u32, image.height() as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(err)?;
        w.write_image_data(&raw).map_err(err)?;
        w.finish().map_err(err)?;
    }
    Ok(out)
}

/// Writes a copy of the dataset at `manifest` into `out_dir` whose `split`
/// labels are the checkpoint's predictions (fully annotated). Other records
/// are copied unchanged so conditional sets stay the same.
pub fn predict(
    checkpoint: &Path,
    manifest: &Path,
    split: Split,
    seed: u64,
    out_dir: &Path,
    overlays: bool,
) -> Result<DatasetManifest> {
    let (params, meta) = load_checkpoint(checkpoint)?;
    let net = Network::new(meta.config.clone())?;
    let dataset = load_dataset(manifest)?;
    let src = DatasetManifest::load(manifest)?;
    let root = manifest.parent().unwrap_or(Path::new("."));
    let predictor = Predictor {
        net: &net,
        params: &params,
        cond_input: meta.cond_input,
        pairing: pairing_for(&meta.config),
        seed,
    };
    let (h, w) = (meta.config.height, meta.config.width);
    let mut records = Vec::with_capacity(src.records.len());
    for (id, rec) in src.records.iter().enumerate() {
        let image = std::fs::read(root.join(&rec.image_path)).map_err(|e| Error::io(root.join(&rec.image_path), e))?;
        files::write_atomic(&out_dir.join(&rec.image_path), &image)?;
        let mut out = rec.clone();
        if rec.split == split {
            let labels = predictor.segment(&dataset, id)?;
            let bytes = encode_label_png(w, h, &labels)?;
            files::write_atomic(&out_dir.join(&rec.label_path), &bytes)?;
            out.label_sha256 = sha256_hex(&bytes);
            out.annotated_classes = src.class_space.all();
            if overlays {
                let png = overlay_png(&dataset.sample(id).image, &labels)?;
                files::write_atomic(&out_dir.join("overlays").join(format!("{id:05}.png")), &png)?;
            }
        } else {
            let label = std::fs::read(root.join(&rec.label_path)).map_err(|e| Error::io(root.join(&rec.label_path), e))?;
            files::write_atomic(&out_dir.join(&rec.label_path), &label)?;
        }
        records.push(out);
    }
    let out = DatasetManifest {
        version: MANIFEST_VERSION,
        class_space: src.class_space,
        records,
    };
    out.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(out)
}

/// One row of the ablation table: which parts of the method are on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub cond_input: bool,
    pub compatible_ce: bool,
    pub pairwise: bool,
    pub dual: bool,
}

impl AblationRow {
    pub fn new(name: &str, cond_input: bool, compatible_ce: bool, pairwise: bool, dual: bool) -> Self {
        Self {
            name: name.into(),
            cond_input,
            compatible_ce,
            pairwise,
            dual,
        }
    }

    /// Rows from the plain baseline up to the full method.
    pub fn standard() -> Vec<AblationRow> {
        vec![
            Self::new("baseline", false, false, false, false),
            Self::new("cond", true, false, false, false),
            Self::new("cond+cce", true, true, false, false),
            Self::new("cond+cce+p", true, true, true, false),
            Self::new("full", true, true, true, true),
        ]
    }

    /// Parses `cond,cce,p,dual` style toggles (`none` for the baseline).
    pub fn parse(spec: &str) -> Result<AblationRow> {
        let mut row = Self::new(spec, false, false, false, false);
        for t in spec.split(['+', ',']).map(str::trim).filter(|t| !t.is_empty()) {
            match t {
                "none" | "baseline" => {}
                "cond" | "cond_input" => row.cond_input = true,
                "cce" | "L_cce" => row.compatible_ce = true,
                "p" | "L_p" => row.pairwise = true,
                "dual" | "L_dual" => row.dual = true,
                "full" => {
                    row.cond_input = true;
                    row.compatible_ce = true;
                    row.pairwise = true;
                    row.dual = true;
                }
                other => return Err(Error::Config(format!("unknown ablation toggle {other:?}"))),
            }
        }
        Ok(row)
    }

    pub fn config(&self, base: &TrainConfig) -> Result<TrainConfig> {
        if (self.pairwise || self.dual) && !self.cond_input {
            return Err(Error::Config(format!(
                "row {:?}: the pairwise and dual terms need conditional input",
                self.name
            )));
        }
        let mut cfg = base.clone();
        cfg.cond_input = self.cond_input;
        cfg.terms = ObjectiveTerms {
            compatible_ce: self.compatible_ce,
            pairwise: self.pairwise,
        };
        if !self.dual {
            cfg.lambda_dual = 0.0;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub row: AblationRow,
    pub report: EvalReport,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub results: Vec<AblationResult>,
}

impl AblationTable {
    pub fn get(&self, name: &str) -> Option<&AblationResult> {
        self.results.iter().find(|r| r.row.name == name)
    }

    pub fn markdown(&self) -> String {
        let mut s = String::new();
        let classes = self.results.first().map(|r| r.report.classes.clone()).unwrap_or_default();
        write!(s, "| row | cond | L_cce | L_p | L_dual |").unwrap();
        for c in &classes {
            write!(s, " {c} |").unwrap();
        }
        s.push_str(" avg |\n|---|---|---|---|---|");
        for _ in &classes {
            s.push_str("---|");
        }
        s.push_str("---|\n");
        let mark = |b: bool| if b { "x" } else { " " };
        for r in &self.results {
            write!(
                s,
                "| {} | {} | {} | {} | {} |",
                r.row.name,
                mark(r.row.cond_input),
                mark(r.row.compatible_ce),
                mark(r.row.pairwise),
                mark(r.row.dual)
            )
            .unwrap();
            for c in &classes {
                write!(s, " {:.4} |", r.report.per_class[c].mean).unwrap();
            }
            writeln!(s, " {:.4} |", r.report.mean_dice).unwrap();
        }
        s
    }
}

/// Trains and evaluates every row. All rows run both stages; rows without
/// the dual term continue at the stage-2 rate with `lambda_dual = 0`.
/// Rows whose configurations differ only in `lambda_dual` share stage 1.
pub fn run_ablation(
    dataset: &Dataset,
    base: &TrainConfig,
    rows: &[AblationRow],
    eval_seed: u64,
    out_dir: Option<&Path>,
) -> Result<AblationTable> {
    let configs: Vec<TrainConfig> = rows.iter().map(|r| r.config(base)).collect::<Result<_>>()?;
    let mut cache: Vec<(TrainConfig, TrainState, f64)> = Vec::new();
    let mut results = Vec::new();
    for (row, cfg) in rows.iter().zip(configs) {
        let t0 = std::time::Instant::now();
        let trainer = Trainer::new(cfg.clone(), dataset)?;
        let key = TrainConfig { lambda_dual: 0.0, ..cfg.clone() };
        let (stage1, reused_secs) = match cache.iter().find(|(c, _, _)| *c == key) {
            Some((_, s, secs)) => (s.clone(), *secs),
            None => {
                let s = trainer.train_stage1(trainer.init_state())?;
                let secs = t0.elapsed().as_secs_f64();
                cache.push((key, s.clone(), secs));
                (s, 0.0)
            }
        };
        let stage1_steps = stage1.step;
        let state = trainer.train_stage2(stage1)?;
        let mut report = evaluate_params(trainer.network(), &state.theta_p, cfg.cond_input, dataset, Split::Test, eval_seed)?;
        report.checkpoint = Some(format!("{}@step{}", row.name, state.step));
        let seconds = t0.elapsed().as_secs_f64() + reused_secs;
        log::info!("ablation row {}: mean dice {:.4} ({seconds:.0}s)", row.name, report.mean_dice);
        if let Some(dir) = out_dir {
            let rd = dir.join(&row.name);
            report.write(&rd)?;
            files::write_json(&rd.join("config.json"), &cfg)?;
            files::write_atomic(&rd.join("history.csv"), crate::trainer::history_csv(&state.history).as_bytes())?;
        }
        results.push(AblationResult {
            row: row.clone(),
            report,
            stage1_steps,
            stage2_steps: state.step - stage1_steps,
            seconds,
        });
    }
    let table = AblationTable { results };
    if let Some(dir) = out_dir {
        files::write_json(&dir.join("ablation.json"), &table)?;
        files::write_atomic(&dir.join("ablation.md"), table.markdown().as_bytes())?;
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisionPoint {
    pub full_fraction: f64,
    pub report: EvalReport,
}

/// Full method trained at several fully:partially annotated mixes of a fully labeled dataset.
pub fn supervision_study(
    dataset: &Dataset,
    base: &TrainConfig,
    fractions: &[f64],
    partial_seed: u64,
    eval_seed: u64,
    out_dir: Option<&Path>,
) -> Result<Vec<SupervisionPoint>> {
    let mut points = Vec::new();
    for &f in fractions {
        let partial = partial_dataset(dataset, PartialPolicy::FullPart { full_fraction: f }, partial_seed)?;
        let trainer = Trainer::new(base.clone(), &partial)?;
        let mut state = trainer.train_stage1(trainer.init_state())?;
        if base.stage2_max_steps > 0 {
            state = trainer.train_stage2(state)?;
        }
        let report = evaluate_params(trainer.network(), &state.theta_p, base.cond_input, &partial, Split::Test, eval_seed)?;
        log::info!("full fraction {f}: mean dice {:.4}", report.mean_dice);
        if let Some(dir) = out_dir {
            report.write(&dir.join(format!("full_{f}")))?;
        }
        points.push(SupervisionPoint {
            full_fraction: f,
            report,
        });
    }
    if let Some(dir) = out_dir {
        files::write_json(&dir.join("supervision_study.json"), &points)?;
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_examples() {
        let a = [true, true, true, true, false, false];
        let b = [true, true, false, false, true, true];
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let c = [false, false, false, false, true, true];
        assert_eq!(dice(&a, &c).unwrap(), 0.0);
        assert_eq!(dice(&[false; 3], &[false; 3]).unwrap(), 1.0);
        assert!(dice(&a, &[true]).is_err());
    }

    #[test]
    fn ablation_rows() {
        let base = TrainConfig::default();
        assert!(AblationRow::parse("p").unwrap().config(&base).unwrap_err().is_config());
        assert!(AblationRow::parse("dual").unwrap().config(&base).is_err());
        let full = AblationRow::parse("full").unwrap();
        assert!(full.cond_input && full.compatible_ce && full.pairwise && full.dual);
        let b = AblationRow::parse("none").unwrap().config(&base).unwrap();
        assert!(!b.cond_input && !b.terms.compatible_ce && !b.terms.pairwise);
        assert!(AblationRow::parse("cond+bogus").is_err());
    }
}
