//! Alternating consistency/enhancement adapter training with warm-up
//! transitions, Adam, checkpoints and an NDJSON log.
//!
//! Batches are drawn from a generator reseeded per iteration from
//! `(seed, i)`, so a run resumed from a checkpoint replays exactly the
//! batches the uninterrupted run would have seen.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::backbone::{generate_var, infer_sequence, latent_flow, sliding_windows, AdapterPath, Model, ModelConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{
    consistency_loss, enhancement_loss, loss_terms, transition_loss, Direction, FrameBatch, LossContext,
    LossWeights, TermSet, TransitionSchedule,
};
use crate::lora::{FreezeMask, Space, Stage};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Separate C and D adapter sets, trained in alternation.
    DualLora,
    /// One adapter set trained on the sum of both objectives every step.
    JointSingle,
    /// One adapter set trained on the alternating schedule.
    IterativeSingle,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::DualLora => "dual_lora",
            TrainMode::JointSingle => "joint_single",
            TrainMode::IterativeSingle => "iterative_single",
        }
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dual_lora" => Ok(TrainMode::DualLora),
            "joint_single" => Ok(TrainMode::JointSingle),
            "iterative_single" => Ok(TrainMode::IterativeSingle),
            other => Err(Error::Config(format!("unknown training mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub n_cons: usize,
    pub n_enh: usize,
    /// Total iterations N.
    pub n_total: usize,
    /// Warm-up steps after each stage boundary.
    pub s_t: usize,
    pub lr: f64,
    /// Sequences per step.
    pub batch: usize,
    /// Frames per sequence.
    pub seq_len: usize,
    pub weights_cons: LossWeights,
    pub weights_enh: LossWeights,
    pub mode: TrainMode,
    pub adam: AdamConfig,
    /// Checkpoint period in iterations; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub seed: u64,
    pub perceptual_seed: u64,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            n_cons: 200,
            n_enh: 200,
            n_total: 800,
            s_t: 20,
            lr: 5e-5,
            batch: 2,
            seq_len: 3,
            weights_cons: LossWeights { csd: 0.0, ..LossWeights::default() },
            weights_enh: LossWeights::default(),
            mode: TrainMode::DualLora,
            adam: AdamConfig::default(),
            checkpoint_every: 100,
            seed: 0,
            perceptual_seed: 7,
        }
    }
}

impl StageConfig {
    pub fn n_cycle(&self) -> usize {
        self.n_cons + self.n_enh
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_cycle() == 0 {
            return bad("n_cons + n_enh must be positive".into());
        }
        if self.n_cons > 0 && self.n_enh > 0 && self.s_t > self.n_cons.min(self.n_enh) {
            return bad(format!("s_t = {} exceeds min(n_cons, n_enh)", self.s_t));
        }
        if self.batch == 0 || self.seq_len == 0 {
            return bad("batch and seq_len must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad("Adam needs β₁, β₂ in [0, 1) and ε > 0".into());
        }
        self.weights_cons.validate()?;
        self.weights_enh.validate()
    }

    /// Stage of the objective at iteration `i`; in joint mode this only
    /// selects the data split.
    pub fn stage_at(&self, i: usize) -> Result<Stage> {
        Ok(stage_of(i, self)?.stage)
    }
}

/// Where iteration `i` sits in the alternating schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StagePos {
    pub stage: Stage,
    /// Steps since the current stage began.
    pub s: usize,
    /// Present during the warm-up after a boundary.
    pub transition: Option<TransitionSchedule>,
    /// Weight of the current stage's loss.
    pub w: f64,
}

pub fn stage_of(i: usize, cfg: &StageConfig) -> Result<StagePos> {
    if i == 0 {
        return Err(Error::Contract("iterations are numbered from 1".into()));
    }
    let cycle = cfg.n_cycle();
    if cycle == 0 {
        return Err(Error::Config("empty stage cycle".into()));
    }
    let pos = (i - 1) % cycle;
    let (stage, s) = if pos < cfg.n_cons {
        (Stage::Consistency, pos)
    } else {
        (Stage::Enhancement, pos - cfg.n_cons)
    };
    let after_boundary = cfg.n_cons > 0 && cfg.n_enh > 0 && i - 1 > s;
    if after_boundary && s < cfg.s_t {
        let direction = match stage {
            Stage::Enhancement => Direction::ConsToEnh,
            Stage::Consistency => Direction::EnhToCons,
        };
        let w = s as f64 / cfg.s_t as f64;
        Ok(StagePos { stage, s, transition: Some(TransitionSchedule { s_t: cfg.s_t, direction }), w })
    } else {
        Ok(StagePos { stage, s, transition: None, w: 1.0 })
    }
}

/// Per-parameter Adam state.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments<F> {
    pub m: Tensor<F>,
    pub v: Tensor<F>,
    /// Updates applied so far.
    pub t: u64,
}

impl<F: Real> AdamMoments<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        AdamMoments { m: Tensor::zeros(shape), v: Tensor::zeros(shape), t: 0 }
    }
}

/// One bias-corrected Adam step, in place.
pub fn adam_update<F: Real>(
    param: &mut Tensor<F>,
    grad: &Tensor<F>,
    mom: &mut AdamMoments<F>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != mom.m.shape() || param.shape() != mom.v.shape() {
        return Err(Error::Shape(format!("adam: param {:?}, grad {:?}", param.shape(), grad.shape())));
    }
    mom.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(mom.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(mom.t as i32);
    let (m, v) = (mom.m.data_mut(), mom.v.data_mut());
    for (k, p) in param.data_mut().iter_mut().enumerate() {
        let g = grad.data()[k].as_f64();
        let mk = cfg.beta1 * m[k].as_f64() + (1.0 - cfg.beta1) * g;
        let vk = cfg.beta2 * v[k].as_f64() + (1.0 - cfg.beta2) * g * g;
        m[k] = F::lit(mk);
        v[k] = F::lit(vk);
        let step = lr * (mk / c1) / ((vk / c2).sqrt() + cfg.eps);
        *p = F::lit(p.as_f64() - step);
    }
    Ok(())
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub i: usize,
    pub stage: Stage,
    pub w: f64,
    #[serde(rename = "L_pix")]
    pub l_pix: f64,
    #[serde(rename = "L_lpips")]
    pub l_lpips: f64,
    #[serde(rename = "L_opt")]
    pub l_opt: f64,
    #[serde(rename = "L_csd")]
    pub l_csd: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
}

/// Which parameter groups train in a given stage under `mode`.
pub fn mask_for(mode: TrainMode, stage: Stage) -> FreezeMask {
    match mode {
        TrainMode::DualLora => FreezeMask::for_stage(stage),
        TrainMode::JointSingle => FreezeMask { c_lora: true, d_lora: false, cfr: true, backbone: false },
        TrainMode::IterativeSingle => {
            FreezeMask { c_lora: true, d_lora: false, cfr: stage == Stage::Consistency, backbone: false }
        }
    }
}

/// Whether the parameter stored under `name` (a [`Model::to_map`] key) is
/// trainable under `mask`.
pub fn is_trainable(name: &str, mask: &FreezeMask) -> bool {
    if name.starts_with("unet.") {
        mask.backbone
    } else if name.starts_with("cfr.") {
        mask.cfr
    } else if let Some(rest) = name.strip_prefix("lora.") {
        match rest.split('.').next() {
            Some(t) if t == Space::C.tag() => mask.c_lora,
            Some(t) if t == Space::D.tag() => mask.d_lora,
            _ => false,
        }
    } else {
        false
    }
}

/// Identifies a dataset in checkpoint headers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetTag {
    pub stage: Stage,
    pub master_seed: u64,
    pub items: usize,
}

impl DatasetTag {
    pub fn of<F>(d: &Dataset<F>) -> Self {
        DatasetTag { stage: d.stage, master_seed: d.master_seed, items: d.items.len() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub stage: StageConfig,
    /// Completed iterations.
    pub iteration: usize,
    pub prev_mask: FreezeMask,
    pub adam_steps: BTreeMap<String, u64>,
    pub data: Vec<DatasetTag>,
}

/// Model plus optimizer state. The binary layout is
/// `b"DLCKPT01" | header_len: u64 LE | header JSON | count: u32 LE` followed
/// by `count` entries of `name_len: u32 LE | name | DLT1 record`, in key order.
/// Adam moments are stored as `adam.m.<param>` and `adam.v.<param>`.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<F> {
    pub header: CheckpointHeader,
    pub model: Model<F>,
    pub moments: BTreeMap<String, AdamMoments<F>>,
}

const CKPT_MAGIC: &[u8; 8] = b"DLCKPT01";

impl<F: Real> Checkpoint<F> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = self.header.clone();
        header.adam_steps = self.moments.iter().map(|(k, m)| (k.clone(), m.t)).collect();
        let json = serde_json::to_vec(&header)?;
        let mut tensors = self.model.to_map();
        for (k, m) in &self.moments {
            tensors.insert(format!("adam.m.{k}"), m.m.clone());
            tensors.insert(format!("adam.v.{k}"), m.v.clone());
        }
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in &tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            t.write_to(&mut out)?;
        }
        Ok(out)
    }

    pub fn from_reader(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let mut n8 = [0u8; 8];
        r.read_exact(&mut n8)?;
        let mut json = vec![0u8; u64::from_le_bytes(n8) as usize];
        r.read_exact(&mut json)?;
        let header: CheckpointHeader = serde_json::from_slice(&json)?;
        let mut n4 = [0u8; 4];
        r.read_exact(&mut n4)?;
        let count = u32::from_le_bytes(n4);
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            r.read_exact(&mut n4)?;
            let mut name = vec![0u8; u32::from_le_bytes(n4) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Format(format!("tensor name: {e}")))?;
            tensors.insert(name, Tensor::<F>::read_from(r)?);
        }
        let mut params = BTreeMap::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (k, t) in tensors {
            if let Some(p) = k.strip_prefix("adam.m.") {
                m.insert(p.to_string(), t);
            } else if let Some(p) = k.strip_prefix("adam.v.") {
                v.insert(p.to_string(), t);
            } else {
                params.insert(k, t);
            }
        }
        let model = Model::from_map(header.model.clone(), &params)?;
        let mut moments = BTreeMap::new();
        for (k, mt) in m {
            let vt = v.remove(&k).ok_or_else(|| Error::Format(format!("adam.v.{k} missing")))?;
            let t = header.adam_steps.get(&k).copied().unwrap_or(0);
            if !params.contains_key(&k) || mt.shape() != params[&k].shape() || vt.shape() != mt.shape() {
                return Err(Error::Format(format!("optimizer state for {k} does not match the model")));
            }
            moments.insert(k, AdamMoments { m: mt, v: vt, t });
        }
        if let Some(k) = v.keys().next() {
            return Err(Error::Format(format!("adam.m.{k} missing")));
        }
        Ok(Checkpoint { header, model, moments })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_reader(&mut BufReader::new(File::open(path)?))
    }
}

/// A batch of sliding windows sampled for one step.
#[derive(Clone, Debug)]
pub struct WindowBatch<F> {
    pub prev: Tensor<F>,
    pub cur: Tensor<F>,
    pub gt: Tensor<F>,
    /// Latent flow from each `prev` to its `cur`.
    pub flow: Tensor<F>,
    /// Adjacent output frames within the batch.
    pub pairs: Vec<(usize, usize)>,
}

struct Split<F> {
    data: Dataset<F>,
    /// Per item: latent flows of its sliding windows, `(T, 2, h, w)`.
    flows: Vec<Tensor<F>>,
}

impl<F: Real> Split<F> {
    fn new(data: Dataset<F>, cfg: &ModelConfig) -> Result<Self> {
        let flows = data
            .items
            .iter()
            .map(|it| {
                let (p, c) = sliding_windows(&it.lq.frames)?;
                latent_flow(&p, &c, cfg)
            })
            .collect::<Result<_>>()?;
        Ok(Split { data, flows })
    }
}

pub struct Trainer<F: Real> {
    pub config: StageConfig,
    pub model: Model<F>,
    /// Completed iterations.
    pub iteration: usize,
    moments: BTreeMap<String, AdamMoments<F>>,
    prev_mask: FreezeMask,
    splits: [Split<F>; 2],
    ctx: LossContext<F>,
}

fn split_index(stage: Stage) -> usize {
    match stage {
        Stage::Consistency => 0,
        Stage::Enhancement => 1,
    }
}

impl<F: Real> Trainer<F> {
    /// Fresh trainer; the model is initialized from `config.seed`.
    pub fn new(model_config: ModelConfig, config: StageConfig, cons: Dataset<F>, enh: Dataset<F>) -> Result<Self> {
        let dual = config.mode == TrainMode::DualLora;
        let model = Model::init(model_config, config.seed, dual)?;
        Self::assemble(config, model, 0, BTreeMap::new(), FreezeMask::frozen(), cons, enh)
    }

    pub fn from_checkpoint(ckpt: Checkpoint<F>, cons: Dataset<F>, enh: Dataset<F>) -> Result<Self> {
        let tags = vec![DatasetTag::of(&cons), DatasetTag::of(&enh)];
        if ckpt.header.data != tags {
            return Err(Error::Config(format!(
                "checkpoint was trained on {:?}, got {:?}",
                ckpt.header.data, tags
            )));
        }
        let h = ckpt.header;
        Self::assemble(h.stage, ckpt.model, h.iteration, ckpt.moments, h.prev_mask, cons, enh)
    }

    fn assemble(
        config: StageConfig,
        model: Model<F>,
        iteration: usize,
        moments: BTreeMap<String, AdamMoments<F>>,
        prev_mask: FreezeMask,
        cons: Dataset<F>,
        enh: Dataset<F>,
    ) -> Result<Self> {
        config.validate()?;
        for (d, stage, used) in [(&cons, Stage::Consistency, config.n_cons > 0), (&enh, Stage::Enhancement, config.n_enh > 0)] {
            if d.stage != stage {
                return Err(Error::Config(format!("expected a {} dataset, got {}", stage.name(), d.stage.name())));
            }
            if used && d.items.is_empty() {
                return Err(Error::Config(format!("{} dataset is empty", stage.name())));
            }
            if let Some(it) = d.items.iter().find(|it| it.lq.len() < config.seq_len) {
                return Err(Error::Config(format!("sequence {} is shorter than seq_len {}", it.id, config.seq_len)));
            }
        }
        let ctx = LossContext::new(config.perceptual_seed, model.config.flow);
        let splits = [Split::new(cons, &model.config)?, Split::new(enh, &model.config)?];
        Ok(Trainer { config, model, iteration, moments, prev_mask, splits, ctx })
    }

    pub fn checkpoint(&self) -> Checkpoint<F> {
        Checkpoint {
            header: CheckpointHeader {
                model: self.model.config.clone(),
                stage: self.config.clone(),
                iteration: self.iteration,
                prev_mask: self.prev_mask,
                adam_steps: BTreeMap::new(),
                data: self.splits.iter().map(|s| DatasetTag::of(&s.data)).collect(),
            },
            model: self.model.clone(),
            moments: self.moments.clone(),
        }
    }

    pub fn moments(&self) -> &BTreeMap<String, AdamMoments<F>> {
        &self.moments
    }

    /// The windows iteration `i` trains on, drawn from `stage`'s split.
    pub fn sample_batch(&self, i: usize, stage: Stage) -> Result<WindowBatch<F>> {
        let split = &self.splits[split_index(stage)];
        let items = &split.data.items;
        if items.is_empty() {
            return Err(Error::Config(format!("{} dataset is empty", stage.name())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(i as u64);
        let l = self.config.seq_len;
        let (mut prev, mut cur, mut gt, mut flow, mut pairs) = (vec![], vec![], vec![], vec![], vec![]);
        for b in 0..self.config.batch {
            let idx = rng.random_range(0..items.len());
            let it = &items[idx];
            let t0 = rng.random_range(0..=it.lq.len() - l);
            for j in 0..l {
                let t = t0 + j;
                prev.push(it.lq.frames.slice_outer(t.saturating_sub(1))?);
                cur.push(it.lq.frames.slice_outer(t)?);
                gt.push(it.gt.frames.slice_outer(t)?);
                flow.push(split.flows[idx].slice_outer(t)?);
                if j + 1 < l {
                    pairs.push((b * l + j, b * l + j + 1));
                }
            }
        }
        Ok(WindowBatch {
            prev: Tensor::stack_outer(&prev)?,
            cur: Tensor::stack_outer(&cur)?,
            gt: Tensor::stack_outer(&gt)?,
            flow: Tensor::stack_outer(&flow)?,
            pairs,
        })
    }

    /// Runs iteration `self.iteration + 1`.
    pub fn step(&mut self) -> Result<LogRecord> {
        let i = self.iteration + 1;
        let cfg = &self.config;
        let pos = stage_of(i, cfg)?;
        let mask = mask_for(cfg.mode, pos.stage);
        let wb = self.sample_batch(i, pos.stage)?;

        let mut g = Graph::new();
        let mv = self.model.bind(&mut g, &mask);
        let (pv, cv) = (g.constant(wb.prev), g.constant(wb.cur));
        let out = generate_var(&mut g, pv, cv, &wb.flow, &mv, &self.model.config, AdapterPath::Folded)?;
        let gtv = g.constant(wb.gt);
        let batch = FrameBatch { pred: out.frames, gt: gtv, pairs: wb.pairs };

        let (use_cons, use_enh) = match (cfg.mode, pos.stage, pos.transition) {
            (TrainMode::JointSingle, _, _) => (true, true),
            (_, _, Some(_)) => (true, true),
            (_, Stage::Consistency, None) => (true, false),
            (_, Stage::Enhancement, None) => (false, true),
        };
        let mut weights = Vec::new();
        if use_cons {
            weights.push(cfg.weights_cons);
        }
        if use_enh {
            weights.push(cfg.weights_enh);
        }
        let terms = loss_terms(&mut g, &self.ctx, &batch, TermSet::needed(&weights, use_enh))?;
        let l_cons = if use_cons { Some(consistency_loss(&mut g, &terms, &cfg.weights_cons)?) } else { None };
        let l_enh = if use_enh { Some(enhancement_loss(&mut g, &terms, &cfg.weights_enh)?) } else { None };
        let (loss, w) = match (cfg.mode, pos.transition, l_cons, l_enh) {
            (TrainMode::JointSingle, _, Some(a), Some(b)) => (g.add(a, b)?, 1.0),
            (_, Some(sched), Some(a), Some(b)) => (transition_loss(&mut g, a, b, pos.s, &sched)?, pos.w),
            (_, None, Some(a), None) | (_, None, None, Some(a)) => (a, 1.0),
            _ => unreachable!("objective selection covers every stage"),
        };
        let val = |v| g.value(v).item().as_f64();
        let record = LogRecord {
            i,
            stage: pos.stage,
            w,
            l_pix: val(terms.pix),
            l_lpips: val(terms.lpips),
            l_opt: val(terms.opt),
            l_csd: val(terms.csd),
            l_total: val(loss),
        };
        if !record.l_total.is_finite() {
            let diag = serde_json::to_string(&record).unwrap_or_default();
            return Err(Error::NonFinite(format!("training loss at iteration {i}: {diag}")));
        }

        let grads = g.backward(loss)?;
        let named = mv.named();
        let (lr, adam, prev_mask) = (cfg.lr, cfg.adam, self.prev_mask);
        let moments = &mut self.moments;
        let mut failure = None;
        self.model.for_each_param_mut(|name, p| {
            if failure.is_some() || !is_trainable(name, &mask) {
                return;
            }
            let fresh = !is_trainable(name, &prev_mask);
            let mom = moments.entry(name.to_string()).or_insert_with(|| AdamMoments::zeros(p.shape()));
            if fresh {
                *mom = AdamMoments::zeros(p.shape());
            }
            let zero;
            let grad = match named.get(name).and_then(|&v| grads.get(v)) {
                Some(t) => t,
                None => {
                    zero = Tensor::zeros(p.shape());
                    &zero
                }
            };
            if let Err(e) = adam_update(p, grad, mom, lr, &adam) {
                failure = Some(e);
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        self.prev_mask = mask;
        self.iteration = i;
        Ok(record)
    }

    /// Trains until `stop` iterations have completed (capped at
    /// `n_total`). With `out`, appends to `out/train_log.ndjson` and writes
    /// checkpoints periodically, after the last step of every stage, and at
    /// the end; the log is first truncated to the current iteration.
    pub fn run_until(&mut self, stop: usize, out: Option<&Path>) -> Result<Vec<LogRecord>> {
        let stop = stop.min(self.config.n_total);
        let mut log = match out {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                Some(open_log(&dir.join(LOG_FILE), self.iteration)?)
            }
            None => None,
        };
        let mut records = Vec::new();
        while self.iteration < stop {
            let rec = self.step()?;
            let i = rec.i;
            if let (Some(w), Some(dir)) = (log.as_mut(), out) {
                serde_json::to_writer(&mut *w, &rec)?;
                w.write_all(b"\n")?;
                w.flush()?;
                let periodic = self.config.checkpoint_every > 0 && i % self.config.checkpoint_every == 0;
                let boundary = i < self.config.n_total && self.config.stage_at(i + 1)? != rec.stage;
                let last = i == self.config.n_total;
                if periodic || boundary || last {
                    let ckpt = self.checkpoint();
                    ckpt.save(&checkpoint_path(dir, i))?;
                    if last {
                        ckpt.save(&dir.join(FINAL_CHECKPOINT))?;
                    }
                }
            }
            records.push(rec);
        }
        Ok(records)
    }

    pub fn run(&mut self, out: Option<&Path>) -> Result<Vec<LogRecord>> {
        self.run_until(self.config.n_total, out)
    }
}

pub const LOG_FILE: &str = "train_log.ndjson";
pub const FINAL_CHECKPOINT: &str = "final.dlck";

pub fn checkpoint_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("checkpoint_{i:06}.dlck"))
}

/// Latest numbered checkpoint in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let n = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("checkpoint_")?.strip_suffix(".dlck")?.parse::<usize>().ok());
        if let Some(n) = n {
            if best.as_ref().is_none_or(|(b, _)| n > *b) {
                best = Some((n, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

fn open_log(path: &Path, keep_upto: usize) -> Result<BufWriter<File>> {
    let mut kept = Vec::new();
    if keep_upto > 0 && path.exists() {
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            let rec: LogRecord = serde_json::from_str(&line)?;
            if rec.i <= keep_upto {
                kept.push(line);
            }
        }
    }
    let mut f = OpenOptions::new().create(true).write(true).truncate(true).open(path)?;
    for line in kept {
        writeln!(f, "{line}")?;
    }
    Ok(BufWriter::new(f))
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    BufReader::new(File::open(path)?)
        .lines()
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

/// Mean over items of the pixel MSE between restored and ground-truth frames.
pub fn validation_pixel_loss<F: Real>(model: &Model<F>, data: &Dataset<F>) -> Result<f64> {
    if data.items.is_empty() {
        return Err(Error::Input("empty validation set".into()));
    }
    let mut total = 0.0;
    for it in &data.items {
        let out = infer_sequence(model, &it.lq, AdapterPath::Folded)?;
        let n = out.frames.numel() as f64;
        let se: f64 = out
            .frames
            .data()
            .iter()
            .zip(it.gt.frames.data())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
            .sum();
        total += se / n;
    }
    Ok(total / data.items.len() as f64)
}
