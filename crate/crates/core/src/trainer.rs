//! Two-stage training.
//!
//! Stage 1 fits PrimNet alone. Stage 2 keeps a frozen copy (DualNet) synced
//! from PrimNet, feeds PrimNet's prediction of a swapped class back in as a
//! conditional prior for DualNet, and updates PrimNet on the primal loss plus
//! `lambda` times the dual loss. The dual loss reaches PrimNet only through
//! that injected pseudo-label.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::files;
use crate::losses::{objective_logit_grad, LossConfig, ObjectiveTerms, PairwisePrediction};
use crate::network::{save_checkpoint, BackboneConfig, CheckpointMeta, ModelParams, Network, Real};
use crate::pairing::{
    build_pairwise_target, make_dual_sample, sample_conditional_set, ConditionalLabels, ConditionalSample,
    PairingConfig, Swap,
};

pub const SEED_ENV: &str = "PARTIALSEG_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, cfg: &AdamConfig) {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
}

mod inf_f64 {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            Repr::Text(if *v > 0.0 { "inf" } else { "-inf" }.into()).serialize(s)
        } else {
            Repr::Num(*v).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub backbone: BackboneConfig,
    pub pairing: PairingConfig,
    pub loss: LossConfig,
    pub terms: ObjectiveTerms,
    /// When off, the conditional input channels are zeroed.
    pub cond_input: bool,
    pub lambda_dual: f64,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub stage1_epochs: usize,
    pub stage2_max_steps: usize,
    pub sync_every: usize,
    #[serde(with = "inf_f64")]
    pub converge_eps: f64,
    pub clip_norm: Option<f64>,
    pub swap: Swap,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::toy(4),
            pairing: PairingConfig::foreground(4),
            loss: LossConfig::default(),
            terms: ObjectiveTerms::FULL,
            cond_input: true,
            lambda_dual: 0.2,
            lr_stage1: 1e-2,
            lr_stage2: 1e-4,
            adam: AdamConfig::default(),
            batch_size: 4,
            stage1_epochs: 40,
            stage2_max_steps: 200,
            sync_every: 1,
            converge_eps: 1e-5,
            clip_norm: Some(5.0),
            swap: Swap::Random,
            precision: Precision::F32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.loss.validate()?;
        self.pairing.validate(self.backbone.m)?;
        if self.pairing.conditional_classes != self.backbone.conditional_classes {
            return Err(Error::Config(format!(
                "pairing classes {:?} differ from the backbone's conditional slots {:?}",
                self.pairing.conditional_classes, self.backbone.conditional_classes
            )));
        }
        if !(self.lambda_dual >= 0.0 && self.lambda_dual.is_finite()) {
            return Err(Error::Config(format!("lambda_dual must be >= 0, got {}", self.lambda_dual)));
        }
        for (name, lr) in [("lr_stage1", self.lr_stage1), ("lr_stage2", self.lr_stage2)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if self.converge_eps.is_nan() || self.converge_eps <= 0.0 {
            return Err(Error::Config(format!("converge_eps must be positive, got {}", self.converge_eps)));
        }
        if self.batch_size == 0 || self.sync_every == 0 {
            return Err(Error::Config("batch_size and sync_every must be positive".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        if self.terms.pairwise && !self.cond_input {
            return Err(Error::Config("the pairwise term needs conditional input".into()));
        }
        Ok(())
    }

    /// Applies `PARTIALSEG_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    /// Whether stage 2 is meaningful for this configuration.
    pub fn check_dual(&self) -> Result<()> {
        if !self.cond_input {
            return Err(Error::Config("the dual term needs conditional input".into()));
        }
        Ok(())
    }
}

/// Losses of one optimizer step (means over the batch).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: usize,
    pub stage: u8,
    pub l_cce: f64,
    pub l_p: f64,
    pub l_prim: f64,
    pub l_dual: f64,
    pub total: f64,
}

pub fn history_csv(history: &[HistoryRecord]) -> String {
    let mut s = String::from("step,L_cce,L_p,L_prim,L_dual,total\n");
    for r in history {
        writeln!(s, "{},{},{},{},{},{}", r.step, r.l_cce, r.l_p, r.l_prim, r.l_dual, r.total).unwrap();
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub theta_p: ModelParams,
    /// Present in stage 2 only.
    pub theta_d: Option<ModelParams>,
    pub optimizer: Adam,
    pub step: usize,
    pub stage: u8,
    pub history: Vec<HistoryRecord>,
    pub converged: bool,
    /// `max |theta_P - theta_D|` after the last stage-2 update.
    pub drift: Option<f64>,
    /// Indices into `history` where `theta_D` was synced.
    pub syncs: Vec<usize>,
}

impl TrainState {
    pub fn new(net: &Network, seed: u64) -> Self {
        let theta_p = net.init_params(seed);
        Self {
            optimizer: Adam::new(theta_p.len()),
            theta_p,
            theta_d: None,
            step: 0,
            stage: 1,
            history: Vec::new(),
            converged: false,
            drift: None,
            syncs: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Purpose {
    Shuffle = 1,
    Batch = 2,
    Cond = 3,
    Swap = 4,
    Eval = 5,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for `(seed, stage, counter, purpose, element)`.
fn stream(seed: u64, stage: u8, counter: usize, purpose: Purpose, element: usize) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for part in [stage as u64, counter as u64, purpose as u64, element as u64] {
        h = splitmix(h ^ part);
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Generator for the conditional set of test sample `id` at evaluation seed `seed`.
pub fn eval_stream(seed: u64, id: usize) -> ChaCha8Rng {
    stream(seed, 0, id, Purpose::Eval, 0)
}

/// Value of the objective `L_prim + lambda L_dual`, with the parts reported separately.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Objective {
    pub l_cce: f64,
    pub l_p: f64,
    pub l_prim: f64,
    pub l_dual: f64,
    pub total: f64,
}

impl Objective {
    pub fn combine(l_prim: f64, l_dual: f64, lambda: f64) -> Self {
        Self {
            l_prim,
            l_dual,
            total: l_prim + lambda * l_dual,
            ..Self::default()
        }
    }
}

/// One batch element with its conditional set already drawn.
#[derive(Debug, Clone)]
pub struct BatchElement {
    pub sample: ConditionalSample,
    pub swap: Swap,
    /// Seed of the generator used when `swap` is random.
    pub swap_seed: u64,
}

/// Network plus resolved configuration; owns no parameters.
pub struct Trainer<'a> {
    net: Network,
    cfg: TrainConfig,
    dataset: &'a Dataset,
    run: Option<RunDir>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, dataset: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        if cfg.backbone.m != dataset.class_space().m() {
            return Err(Error::Config(format!(
                "backbone has {} classes, dataset {}",
                cfg.backbone.m,
                dataset.class_space().m()
            )));
        }
        if let Some(shape) = dataset.shape() {
            if shape != (cfg.backbone.height, cfg.backbone.width) {
                return Err(Error::Config(format!(
                    "dataset images are {}x{}, backbone expects {}x{}",
                    shape.0, shape.1, cfg.backbone.height, cfg.backbone.width
                )));
            }
        }
        let net = Network::new(cfg.backbone.clone())?;
        Ok(Self {
            net,
            cfg,
            dataset,
            run: None,
        })
    }

    /// Writes config, history and checkpoints under `dir`.
    pub fn with_run_dir(mut self, dir: &Path) -> Result<Self> {
        let run = RunDir::create(dir)?;
        run.write_config(&self.cfg)?;
        self.run = Some(run);
        Ok(self)
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn init_state(&self) -> TrainState {
        TrainState::new(&self.net, self.cfg.seed)
    }

    fn train_ids(&self) -> Result<Vec<usize>> {
        let ids = self.dataset.ids(Split::Train);
        if ids.is_empty() {
            return Err(Error::Config("dataset has no training samples".into()));
        }
        Ok(ids)
    }

    /// Draws a conditional set for every id of a batch.
    pub fn make_batch(&self, ids: &[usize], stage: u8, step: usize) -> Result<Vec<BatchElement>> {
        ids.iter()
            .enumerate()
            .map(|(e, &id)| {
                let mut rng = stream(self.cfg.seed, stage, step, Purpose::Cond, e);
                let cond = sample_conditional_set(Some(id), self.dataset, &mut rng, &self.cfg.pairing)?;
                let s = self.dataset.sample(id);
                let swap_seed = stream(self.cfg.seed, stage, step, Purpose::Swap, e).next_u64();
                Ok(BatchElement {
                    sample: ConditionalSample {
                        target_id: Some(id),
                        image: s.image.clone(),
                        labels: s.labels.clone(),
                        cond: if self.cfg.cond_input { cond } else { cond.zeroed() },
                    },
                    swap: self.cfg.swap,
                    swap_seed,
                })
            })
            .collect()
    }

    /// Runs stage 1 from `state` (normally freshly initialized).
    pub fn train_stage1(&self, mut state: TrainState) -> Result<TrainState> {
        let ids = self.train_ids()?;
        let n = self.cfg.batch_size;
        state.stage = 1;
        state.theta_d = None;
        for epoch in 0..self.cfg.stage1_epochs {
            let mut order = ids.clone();
            order.shuffle(&mut stream(self.cfg.seed, 1, epoch, Purpose::Shuffle, 0));
            for chunk in order.chunks(n) {
                let batch = self.make_batch(chunk, 1, state.step)?;
                self.update(&mut state, &batch, self.cfg.lr_stage1, None, 0.0, 1)?;
            }
            let last = state.history.last().copied();
            if let Some(r) = last {
                log::info!("stage 1 epoch {} step {} loss {:.5}", epoch + 1, r.step, r.total);
            }
            if let Some(run) = &self.run {
                run.checkpoint(&self.net, &self.cfg, &state)?;
                run.write_history(&state.history)?;
            }
        }
        state.theta_p.meta.stage = 1;
        state.theta_p.meta.step = state.step;
        Ok(state)
    }

    fn stage2_batch_ids(&self, ids: &[usize], step: usize) -> Vec<usize> {
        let mut rng = stream(self.cfg.seed, 2, step, Purpose::Batch, 0);
        let k = self.cfg.batch_size.min(ids.len());
        let mut picked: Vec<usize> = ids.choose_multiple(&mut rng, k).copied().collect();
        picked.sort_unstable();
        picked
    }

    /// Algorithm-1 stage 2: sync, primal + dual update, drift test.
    pub fn train_stage2(&self, state: TrainState) -> Result<TrainState> {
        self.train_stage2_observed(state, |_, _, _| {})
    }

    /// [`Trainer::train_stage2`], calling `observe(state, theta_d, synced)` before every update.
    pub fn train_stage2_observed(
        &self,
        mut state: TrainState,
        mut observe: impl FnMut(&TrainState, &ModelParams, bool),
    ) -> Result<TrainState> {
        if self.cfg.lambda_dual > 0.0 {
            self.cfg.check_dual()?;
        }
        let ids = self.train_ids()?;
        state.stage = 2;
        state.converged = false;
        state.optimizer = Adam::new(state.theta_p.len());
        let mut theta_d = state.theta_d.take().unwrap_or_else(|| state.theta_p.clone());
        for k in 0..self.cfg.stage2_max_steps {
            let synced = k % self.cfg.sync_every == 0;
            if synced {
                theta_d.values.clone_from(&state.theta_p.values);
                state.syncs.push(state.history.len());
            }
            observe(&state, &theta_d, synced);
            let batch_ids = self.stage2_batch_ids(&ids, state.step);
            let batch = self.make_batch(&batch_ids, 2, state.step)?;
            self.update(
                &mut state,
                &batch,
                self.cfg.lr_stage2,
                Some(&theta_d),
                self.cfg.lambda_dual,
                2,
            )?;
            let drift = state.theta_p.max_abs_diff(&theta_d);
            state.drift = Some(drift);
            if drift < self.cfg.converge_eps {
                state.converged = true;
                break;
            }
        }
        theta_d.meta.stage = 2;
        theta_d.meta.step = state.step;
        state.theta_d = Some(theta_d);
        state.theta_p.meta.stage = 2;
        state.theta_p.meta.step = state.step;
        if let Some(run) = &self.run {
            run.checkpoint(&self.net, &self.cfg, &state)?;
            run.write_history(&state.history)?;
        }
        log::info!(
            "stage 2 done at step {} (drift {:?}, converged {})",
            state.step,
            state.drift,
            state.converged
        );
        Ok(state)
    }

    /// Stage-1 updates (primal loss only) drawn exactly like stage-2 steps.
    pub fn continue_primal(&self, mut state: TrainState, steps: usize) -> Result<TrainState> {
        let ids = self.train_ids()?;
        state.stage = 2;
        state.optimizer = Adam::new(state.theta_p.len());
        for _ in 0..steps {
            let batch_ids = self.stage2_batch_ids(&ids, state.step);
            let batch = self.make_batch(&batch_ids, 2, state.step)?;
            self.update(&mut state, &batch, self.cfg.lr_stage2, None, 0.0, 2)?;
        }
        Ok(state)
    }

    fn update(
        &self,
        state: &mut TrainState,
        batch: &[BatchElement],
        lr: f64,
        theta_d: Option<&ModelParams>,
        lambda: f64,
        stage: u8,
    ) -> Result<()> {
        let dual = if lambda > 0.0 { theta_d.map(|p| p.values.as_slice()) } else { None };
        let (obj, mut grad) = match self.cfg.precision {
            Precision::F32 => batch_objective::<f32>(&self.net, &self.cfg, &state.theta_p.values, dual, lambda, batch, true)?,
            Precision::F64 => batch_objective::<f64>(&self.net, &self.cfg, &state.theta_p.values, dual, lambda, batch, true)?,
        };
        if !obj.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                stage,
                step: state.step,
                seed: self.cfg.seed,
                batch: batch.iter().filter_map(|b| b.sample.target_id).collect(),
            });
        }
        if let Some(c) = self.cfg.clip_norm {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > c {
                let s = c / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        state.optimizer.step(&mut state.theta_p.values, &grad, lr, &self.cfg.adam);
        state.history.push(HistoryRecord {
            step: state.step,
            stage,
            l_cce: obj.l_cce,
            l_p: obj.l_p,
            l_prim: obj.l_prim,
            l_dual: obj.l_dual,
            total: obj.total,
        });
        state.step += 1;
        Ok(())
    }

    /// Objective of a batch at the given parameters, without updating anything.
    pub fn evaluate_objective(
        &self,
        batch: &[BatchElement],
        theta_p: &ModelParams,
        theta_d: Option<&ModelParams>,
    ) -> Result<Objective> {
        let d = theta_d.map(|p| p.values.as_slice());
        Ok(batch_objective::<f64>(&self.net, &self.cfg, &theta_p.values, d, self.cfg.lambda_dual, batch, false)?.0)
    }
}

/// Mean objective over a batch and its gradient with respect to `theta_p`.
///
/// With `theta_d` given, each element also builds its dual sample from
/// PrimNet's prediction and adds `lambda` times the dual loss.
pub fn batch_objective<T: Real>(
    net: &Network,
    cfg: &TrainConfig,
    theta_p: &[f64],
    theta_d: Option<&[f64]>,
    lambda: f64,
    batch: &[BatchElement],
    want_grad: bool,
) -> Result<(Objective, Vec<f64>)> {
    let p: Vec<T> = theta_p.iter().map(|&v| T::of(v)).collect();
    let d: Option<Vec<T>> = theta_d.map(|v| v.iter().map(|&x| T::of(x)).collect());
    let mut grad_t = vec![T::zero(); if want_grad { p.len() } else { 0 }];
    let scale = 1.0 / batch.len() as f64;
    let mut acc = Objective::default();
    for el in batch {
        let o = element_objective(net, cfg, &p, d.as_deref(), lambda, el, scale, want_grad.then_some(&mut grad_t[..]))?;
        acc.l_cce += o.l_cce * scale;
        acc.l_p += o.l_p * scale;
        acc.l_prim += o.l_prim * scale;
        acc.l_dual += o.l_dual * scale;
    }
    acc.total = acc.l_prim + lambda * acc.l_dual;
    Ok((acc, grad_t.iter().map(|g| g.f64()).collect()))
}

#[allow(clippy::too_many_arguments)]
fn element_objective<T: Real>(
    net: &Network,
    cfg: &TrainConfig,
    theta_p: &[T],
    theta_d: Option<&[T]>,
    lambda: f64,
    el: &BatchElement,
    scale: f64,
    grads: Option<&mut [T]>,
) -> Result<Objective> {
    let bcfg = net.config();
    let (m, k) = (bcfg.m, bcfg.height * bcfg.width);
    let rule = bcfg.background_rule();
    let sample = &el.sample;

    let x = net.build_input(&sample.image, &sample.cond)?;
    let (logits, cache) = net.forward_raw(theta_p, &x);
    let pred = net.prediction(&logits);
    let cond_labels = ConditionalLabels::from_set(&sample.cond, m, k)?;
    let target = build_pairwise_target(&sample.labels, &cond_labels)?;
    let (prim, mut d_logits) = objective_logit_grad(&pred, &target, &cond_labels, &cfg.loss, cfg.terms, rule)?;
    let mut out = Objective {
        l_cce: prim.cce,
        l_p: prim.pairwise,
        l_prim: prim.total,
        l_dual: 0.0,
        total: prim.total,
    };

    if let Some(theta_d) = theta_d {
        let mut rng = ChaCha8Rng::seed_from_u64(el.swap_seed);
        let dual = make_dual_sample(sample, &pred, el.swap, &mut rng)?;
        let xd = net.build_input(&dual.dual.image, &dual.dual.cond)?;
        let (logits_d, cache_d) = net.forward_raw(theta_d, &xd);
        let pred_d = net.prediction(&logits_d);
        let cond_d = ConditionalLabels::from_set(&dual.dual.cond, m, k)?;
        let target_d = build_pairwise_target(&dual.dual.labels, &cond_d)?;
        let (dv, d_logits_d) = objective_logit_grad(&pred_d, &target_d, &cond_d, &cfg.loss, cfg.terms, rule)?;
        out.l_dual = dv.total;
        out.total = prim.total + lambda * dv.total;
        if grads.is_some() {
            let dl: Vec<T> = d_logits_d.iter().map(|&g| T::of(lambda * g)).collect();
            let dx = net
                .unet()
                .backward(theta_d, &cache_d, &dl, None, true)
                .expect("input gradient requested");
            let ch = Network::mask_channel(dual.swap_slot);
            let d_pseudo = &dx[ch * k..(ch + 1) * k];
            chain_pseudo_label(&pred, dual.swap_class, d_pseudo, &mut d_logits);
        }
    }

    if let Some(g) = grads {
        let dl: Vec<T> = d_logits.iter().map(|&v| T::of(v * scale)).collect();
        net.unet().backward(theta_p, &cache, &dl, Some(g), false);
    }
    Ok(out)
}

/// Adds the gradient reaching the pseudo-label `min(inter_r + extra_r, 1)` to the primal logit gradient.
fn chain_pseudo_label<T: Real>(pred: &PairwisePrediction, class: usize, d_pseudo: &[T], d_logits: &mut [f64]) {
    let k = pred.pixels();
    let (ci, ce) = (2 * class, 2 * class + 1);
    for (i, g) in d_pseudo.iter().enumerate() {
        let (pi, pe) = (pred.get(ci, i), pred.get(ce, i));
        if pi + pe < 1.0 {
            let g = g.f64();
            d_logits[ci * k + i] += g * pi * (1.0 - pi);
            d_logits[ce * k + i] += g * pe * (1.0 - pe);
        }
    }
}

/// Run directory: `config.json`, `history.csv`, `checkpoints/step_N.bin` (+ `.json`).
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        let ck = root.join("checkpoints");
        std::fs::create_dir_all(&ck).map_err(|e| Error::io(&ck, e))?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write_config(&self, cfg: &TrainConfig) -> Result<()> {
        files::write_json(&self.root.join("config.json"), cfg)
    }

    pub fn write_history(&self, history: &[HistoryRecord]) -> Result<()> {
        files::write_atomic(&self.root.join("history.csv"), history_csv(history).as_bytes())
    }

    pub fn checkpoint_path(&self, step: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("step_{step}.bin"))
    }

    pub fn checkpoint(&self, net: &Network, cfg: &TrainConfig, state: &TrainState) -> Result<PathBuf> {
        let path = self.checkpoint_path(state.step);
        save_checkpoint(&path, &state.theta_p, &checkpoint_meta(net, cfg, state.stage, state.step))?;
        files::write_atomic(&self.root.join("latest"), format!("step_{}.bin\n", state.step).as_bytes())?;
        Ok(path)
    }

    /// Checkpoint named by the `latest` pointer.
    pub fn latest(&self) -> Result<PathBuf> {
        let p = self.root.join("latest");
        let name = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(self.root.join("checkpoints").join(name.trim()))
    }
}

pub fn checkpoint_meta(net: &Network, cfg: &TrainConfig, stage: u8, step: usize) -> CheckpointMeta {
    let b = net.config();
    CheckpointMeta {
        config: b.clone(),
        config_hash: b.hash(),
        stage,
        step,
        seed: cfg.seed,
        conditional_class_list: b.conditional_classes.clone(),
        cond_input: cfg.cond_input,
        n_params: net.n_params(),
    }
}
