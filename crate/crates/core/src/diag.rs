//! Self-test suite: finite-difference gradient checks over every operator
//! and the composed modules, plus exact identity and merge invariants.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::gradcheck::{grad_check_with, GradCheckOptions};
use crate::autodiff::{Graph, OpKind, Var};
use crate::backbone::{denoise_var, infer_sequence, AdapterPath, Model, ModelConfig, ModelVars, UNetConfig, LAYERS};
use crate::cfr::{retrieve_fuse_var, CfrConfig, CfrParams, CfrVars, Window};
use crate::codec::LatentConfig;
use crate::data::{SequenceMeta, VideoSequence};
use crate::error::Result;
use crate::flow::{estimate_flow_var, warp_var, FlowConfig};
use crate::losses::{flow_loss, pixel_loss, DetailCritic, LaplacianCritic, PerceptualExtractor};
use crate::lora::{conv_with_branches, AdapterVars, LoraConfig, Space};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiagOptions {
    /// Largest accepted relative gradient error.
    pub tolerance: f64,
    /// Deliberately corrupt the backward pass of one operator.
    pub fault: Option<OpKind>,
}

impl Default for DiagOptions {
    fn default() -> Self {
        DiagOptions { tolerance: 1e-4, fault: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckGroup {
    Op,
    Module,
    Invariant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagEntry {
    pub name: String,
    pub group: CheckGroup,
    /// Worst relative gradient error, for gradient checks.
    pub max_rel_err: Option<f64>,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagReport {
    pub tolerance: f64,
    pub fault: Option<String>,
    pub entries: Vec<DiagEntry>,
}

impl DiagReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn failures(&self) -> Vec<&DiagEntry> {
        self.entries.iter().filter(|e| !e.passed).collect()
    }

    /// One line per check.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let err = e.max_rel_err.map(|v| format!("{v:.3e}")).unwrap_or_else(|| "-".into());
            let status = if e.passed { "ok  " } else { "FAIL" };
            let _ = writeln!(out, "{status} {:<9} {:<22} max_rel_err={err} {}", format!("{:?}", e.group).to_lowercase(), e.name, e.detail);
        }
        let _ = writeln!(out, "{} of {} checks passed", self.entries.len() - self.failures().len(), self.entries.len());
        out
    }
}

type CheckFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

struct GradCase {
    name: &'static str,
    group: CheckGroup,
    inputs: Vec<Tensor<f64>>,
    probes: Option<usize>,
    f: CheckFn,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Uniform magnitudes in [0.2, 1] with random signs: clear of the kink at 0.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.2..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `Σ y ⊙ r` for a fixed random `r`, turning any output into a scalar with
/// a non-uniform upstream gradient.
fn readout(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = g.constant(uniform(&mut rng, g.shape(y), -1.0, 1.0));
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<GradCase> {
    let mut cases = Vec::new();
    let mut push = |name, inputs, f: CheckFn| cases.push(GradCase { name, group: CheckGroup::Op, inputs, probes: None, f });
    let a = uniform(rng, &[2, 3], -1.0, 1.0);
    let b = uniform(rng, &[2, 3], -1.0, 1.0);
    push("add", vec![a.clone(), b.clone()], Box::new(|g, v| {
        let y = g.add(v[0], v[1])?;
        readout(g, y, 1)
    }));
    push("sub", vec![a.clone(), b.clone()], Box::new(|g, v| {
        let y = g.sub(v[0], v[1])?;
        readout(g, y, 2)
    }));
    push("mul", vec![a.clone(), b.clone()], Box::new(|g, v| {
        let y = g.mul(v[0], v[1])?;
        readout(g, y, 3)
    }));
    push("scale", vec![a.clone()], Box::new(|g, v| {
        let y = g.scale(v[0], 1.7);
        readout(g, y, 4)
    }));
    let kinked = away_from_zero(rng, &[3, 4]);
    push("relu", vec![kinked.clone()], Box::new(|g, v| {
        let y = g.relu(v[0]);
        readout(g, y, 5)
    }));
    push("abs", vec![kinked.clone()], Box::new(|g, v| {
        let y = g.abs(v[0]);
        readout(g, y, 6)
    }));
    push("square", vec![a.clone()], Box::new(|g, v| {
        let y = g.square(v[0]);
        readout(g, y, 7)
    }));
    push("sqrt", vec![uniform(rng, &[2, 3], 0.5, 2.0)], Box::new(|g, v| {
        let y = g.sqrt(v[0]);
        readout(g, y, 8)
    }));
    push("sum", vec![a.clone()], Box::new(|g, v| Ok(g.sum(v[0]))));
    push("mean", vec![a.clone()], Box::new(|g, v| Ok(g.mean(v[0]))));
    push("matmul", vec![uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[4, 2], -1.0, 1.0)], Box::new(|g, v| {
        let y = g.matmul(v[0], v[1])?;
        readout(g, y, 9)
    }));
    push(
        "matmul_batched",
        vec![uniform(rng, &[2, 3, 4], -1.0, 1.0), uniform(rng, &[2, 4, 2], -1.0, 1.0)],
        Box::new(|g, v| {
            let y = g.matmul(v[0], v[1])?;
            readout(g, y, 10)
        }),
    );
    push(
        "conv2d",
        vec![uniform(rng, &[1, 2, 5, 5], -1.0, 1.0), uniform(rng, &[3, 2, 3, 3], -0.5, 0.5), uniform(rng, &[3], -0.5, 0.5)],
        Box::new(|g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]))?;
            readout(g, y, 11)
        }),
    );
    push(
        "conv2d_1x1",
        vec![uniform(rng, &[2, 3, 3, 3], -1.0, 1.0), uniform(rng, &[2, 3, 1, 1], -0.5, 0.5)],
        Box::new(|g, v| {
            let y = g.conv2d(v[0], v[1], None)?;
            readout(g, y, 12)
        }),
    );
    push("space_to_depth", vec![uniform(rng, &[1, 2, 4, 4], -1.0, 1.0)], Box::new(|g, v| {
        let y = g.space_to_depth(v[0], 2)?;
        readout(g, y, 13)
    }));
    push("depth_to_space", vec![uniform(rng, &[1, 8, 2, 2], -1.0, 1.0)], Box::new(|g, v| {
        let y = g.depth_to_space(v[0], 2)?;
        readout(g, y, 14)
    }));
    // sample points with fractional parts in [0.2, 0.8], clear of the grid
    let coords = Tensor::from_fn(&[1, 2, 3, 3], |_| rng.random_range(0..3) as f64 + rng.random_range(0.2..0.8));
    push("bilinear_sample", vec![uniform(rng, &[1, 2, 4, 4], -1.0, 1.0), coords], Box::new(|g, v| {
        let y = g.bilinear_sample(v[0], v[1])?;
        readout(g, y, 15)
    }));
    // well-separated values so no probe reorders the selection
    let mut spread: Vec<f64> = (0..15).map(|i| i as f64 * 0.3).collect();
    for i in (1..spread.len()).rev() {
        spread.swap(i, rng.random_range(0..=i));
    }
    push("topk", vec![Tensor::new(vec![3, 5], spread).expect("3×5")], Box::new(|g, v| {
        let (y, _) = g.topk(v[0], 2)?;
        readout(g, y, 16)
    }));
    push("gather", vec![a.clone()], Box::new(|g, v| {
        let idx: Arc<[usize]> = Arc::from(vec![5, 0, 0, 3, 2, 5, 1, 4]);
        let y = g.gather(v[0], idx, &[2, 4])?;
        readout(g, y, 17)
    }));
    push("inner_product", vec![uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[3, 4], -1.0, 1.0)], Box::new(|g, v| {
        let y = g.inner_product(v[0], v[1])?;
        readout(g, y, 18)
    }));
    push("l1_norm", vec![kinked], Box::new(|g, v| Ok(g.l1_norm(v[0]))));
    push("l2_norm", vec![a.clone()], Box::new(|g, v| Ok(g.l2_norm(v[0]))));
    push("softmax", vec![uniform(rng, &[3, 4], -2.0, 2.0)], Box::new(|g, v| {
        let y = g.softmax(v[0])?;
        readout(g, y, 19)
    }));
    push("reshape", vec![uniform(rng, &[2, 6], -1.0, 1.0)], Box::new(|g, v| {
        let y = g.reshape(v[0], &[3, 4])?;
        readout(g, y, 20)
    }));
    cases
}

fn module_cases(rng: &mut ChaCha8Rng) -> Vec<GradCase> {
    let mut cases = Vec::new();
    let mut push = |name, inputs, probes, f: CheckFn| cases.push(GradCase { name, group: CheckGroup::Module, inputs, probes, f });

    // CFR fusion on a 3×3 grid; gates forced open by a negative threshold bias
    let mut p = CfrParams::<f64>::init(3, 2, rng);
    p.w_v = uniform(rng, &[3, 3, 1, 1], -1.0, 1.0);
    p.mlp2_b.data_mut()[0] = -1.0;
    let mut inputs = vec![uniform(rng, &[1, 3, 3, 3], -1.0, 1.0), uniform(rng, &[1, 3, 3, 3], -1.0, 1.0)];
    inputs.extend(p.tensors().iter().map(|t| (*t).clone()));
    let cfr_cfg = CfrConfig { k: 2, d: 2, window: Window::Local { radius: 1 } };
    push("cfr_fusion", inputs, None, Box::new(move |g, v| {
        let pv = CfrVars::from_array([v[2], v[3], v[4], v[5], v[6], v[7], v[8]]);
        let y = retrieve_fuse_var(g, v[0], v[1], &pv, &cfr_cfg)?;
        readout(g, y, 21)
    }));

    // UNet forward through weights and one adapter
    let ucfg = UNetConfig { base_width: 4, latent_channels: 12 };
    let mcfg = ModelConfig { unet: ucfg, cfr: CfrConfig { k: 2, d: 4, ..Default::default() }, ..Default::default() };
    let mut m = Model::<f64>::init(mcfg, 1, false).expect("valid config");
    m.unet.weights.insert("out".into(), uniform(rng, &[12, 4, 3, 3], -0.3, 0.3));
    let ad = m.c_set.get("out").expect("out adapter").clone();
    let mut inputs = vec![uniform(rng, &[1, 12, 8, 8], -1.0, 1.0)];
    inputs.extend(LAYERS.iter().map(|id| m.unet.weights[*id].clone()));
    inputs.push(ad.a.clone());
    inputs.push(uniform(rng, ad.b.shape(), -0.3, 0.3));
    let biases = m.unet.biases.clone();
    let scale = ad.scale;
    push("unet_forward", inputs, Some(24), Box::new(move |g, v| {
        let mut weights = BTreeMap::new();
        let mut bs = BTreeMap::new();
        for (i, id) in LAYERS.iter().enumerate() {
            weights.insert(id.to_string(), v[1 + i]);
            bs.insert(id.to_string(), g.constant(biases[*id].clone()));
        }
        let adapter = AdapterVars { target: "out".into(), space: Space::C, a: v[7], b: v[8], scale };
        let cfr = CfrParams::<f64>::zeros(12, 4).bind(g, false);
        let mv = ModelVars { weights, biases: bs, cfr, adapters: vec![adapter] };
        let y = denoise_var(g, v[0], &mv, &ucfg, AdapterPath::Folded)?;
        readout(g, y, 22)
    }));

    let flow = Tensor::from_fn(&[1, 2, 4, 4], |_| rng.random_range(-1..=1) as f64 + rng.random_range(0.2..0.8));
    push("warp", vec![uniform(rng, &[1, 2, 4, 4], 0.0, 1.0), flow], None, Box::new(|g, v| {
        let y = warp_var(g, v[0], v[1])?;
        readout(g, y, 23)
    }));

    let soft = FlowConfig { radius: 1, softmax_temp: 0.1 };
    let frames = || uniform(&mut ChaCha8Rng::seed_from_u64(0), &[1, 3, 5, 5], 0.0, 1.0);
    push("soft_argmax_flow", vec![frames(), uniform(rng, &[1, 3, 5, 5], 0.0, 1.0)], None, Box::new(move |g, v| {
        let y = estimate_flow_var(g, v[0], v[1], &soft)?;
        readout(g, y, 24)
    }));

    push("latent_codec", vec![uniform(rng, &[1, 3, 4, 4], 0.0, 1.0)], None, Box::new(|g, v| {
        let c = LatentConfig::default();
        let z = c.encode_var(g, v[0])?;
        let z = g.scale(z, 1.3);
        let y = c.decode_var(g, z)?;
        readout(g, y, 25)
    }));

    let lcfg = LoraConfig { rank: 2, ..Default::default() };
    push(
        "lora_branch_conv",
        vec![
            uniform(rng, &[1, 3, 4, 4], -1.0, 1.0),
            uniform(rng, &[2, 3, 3, 3], -0.5, 0.5),
            uniform(rng, &[2, 27], -0.5, 0.5),
            uniform(rng, &[2, 2], -0.5, 0.5),
        ],
        None,
        Box::new(move |g, v| {
            let ad = AdapterVars { target: "l".into(), space: Space::D, a: v[2], b: v[3], scale: lcfg.scale() };
            let y = conv_with_branches(g, v[0], v[1], None, &[&ad])?;
            readout(g, y, 26)
        }),
    );

    let pred = uniform(rng, &[2, 3, 8, 8], 0.0, 1.0);
    let gt = uniform(rng, &[2, 3, 8, 8], 0.0, 1.0);
    push("pixel_loss", vec![pred.clone(), gt.clone()], None, Box::new(|g, v| pixel_loss(g, v[0], v[1])));
    let extractor = PerceptualExtractor::<f64>::new(7);
    push("perceptual_loss", vec![pred.clone(), gt.clone()], Some(40), Box::new(move |g, v| extractor.loss(g, v[0], v[1])));
    let gt_pair = [uniform(rng, &[1, 3, 6, 6], 0.0, 1.0), uniform(rng, &[1, 3, 6, 6], 0.0, 1.0)];
    push(
        "flow_loss",
        vec![uniform(rng, &[1, 3, 6, 6], 0.0, 1.0), uniform(rng, &[1, 3, 6, 6], 0.0, 1.0)],
        None,
        Box::new(move |g, v| {
            let (a, b) = (g.constant(gt_pair[0].clone()), g.constant(gt_pair[1].clone()));
            flow_loss(g, v[0], v[1], a, b, &FlowConfig { radius: 1, softmax_temp: 0.05 })
        }),
    );
    push("detail_loss", vec![uniform(rng, &[1, 3, 5, 5], 0.0, 1.0), uniform(rng, &[1, 3, 5, 5], 0.0, 1.0)], None, Box::new(|g, v| {
        LaplacianCritic.loss(g, v[0], v[1])
    }));
    cases
}

fn run_case(case: GradCase, opts: &DiagOptions) -> DiagEntry {
    let gc = GradCheckOptions { max_probes: case.probes, ..Default::default() };
    match grad_check_with(&case.f, &case.inputs, &gc, opts.fault) {
        Ok(rep) => {
            let worst = rep.max_rel_err();
            let detail = if rep.valid { String::new() } else { "non-deterministic function".into() };
            DiagEntry {
                name: case.name.into(),
                group: case.group,
                max_rel_err: Some(worst),
                passed: rep.passed(opts.tolerance),
                detail,
            }
        }
        Err(e) => DiagEntry { name: case.name.into(), group: case.group, max_rel_err: None, passed: false, detail: e.to_string() },
    }
}

fn invariant(name: &str, check: impl FnOnce() -> Result<(bool, String)>) -> DiagEntry {
    let (passed, detail) = check().unwrap_or_else(|e| (false, e.to_string()));
    DiagEntry { name: name.into(), group: CheckGroup::Invariant, max_rel_err: None, passed, detail }
}

fn sequence(frames: Tensor<f32>) -> VideoSequence<f32> {
    VideoSequence { frames, gt_flow: None, meta: SequenceMeta { scene_id: "diag".into(), seed: 0 } }
}

fn invariants(rng: &mut ChaCha8Rng) -> Vec<DiagEntry> {
    let frames: Tensor<f32> = Tensor::from_fn(&[3, 3, 16, 16], |_| rng.random_range(0.0..1.0));
    let identity = invariant("identity_chain", || {
        let m = Model::<f32>::identity(ModelConfig::default())?;
        let out = infer_sequence(&m, &sequence(frames.clone()), AdapterPath::Folded)?;
        Ok((out.frames == frames, String::new()))
    });
    let mut trained = Model::<f32>::init(ModelConfig::default(), 3, true).expect("default config");
    for a in trained.c_set.adapters.iter_mut().chain(trained.d_set.adapters.iter_mut()) {
        a.b = Tensor::from_fn(a.b.shape(), |_| rng.random_range(-0.05..0.05));
    }
    let merge = invariant("merge_equivalence", || {
        let seq = sequence(frames.clone());
        let branch = infer_sequence(&trained, &seq, AdapterPath::Branch)?;
        let merged = infer_sequence(&trained.merged()?, &seq, AdapterPath::Folded)?;
        let d = branch.frames.max_abs_diff(&merged.frames);
        Ok((d <= 1e-5, format!("max |Δ| = {d:.2e}")))
    });
    let codec = invariant("codec_round_trip", || {
        let c = LatentConfig::default();
        let back = c.decode(&c.encode(&frames)?)?;
        Ok((back == frames, String::new()))
    });
    vec![identity, merge, codec]
}

/// Runs every check. With `opts.fault` set, checks that route gradients
/// through the named operator are expected to fail.
pub fn run_diagnostics(opts: &DiagOptions) -> DiagReport {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6469_6167);
    let mut entries: Vec<DiagEntry> = op_cases(&mut rng).into_iter().map(|c| run_case(c, opts)).collect();
    entries.extend(module_cases(&mut rng).into_iter().map(|c| run_case(c, opts)));
    entries.extend(invariants(&mut rng));
    DiagReport { tolerance: opts.tolerance, fault: opts.fault.map(|k| k.name().to_string()), entries }
}
