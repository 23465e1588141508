//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints one PASS/FAIL line; the process exits non-zero if any fails.
//!
//! `ACCEPTANCE_ONLY=2,5` restricts the run to the listed criteria.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use dloral_core::autodiff::{Graph, OpKind};
use dloral_core::backbone::{denoise, infer_sequence, AdapterPath, Model, ModelConfig};
use dloral_core::cfr::{retrieve_fuse, CfrConfig, CfrParams, Window};
use dloral_core::data::{make_dataset, DataConfig, Dataset, SequenceMeta, VideoSequence};
use dloral_core::diag::{run_diagnostics, CheckGroup, DiagOptions};
use dloral_core::flow::{estimate_flow, FlowConfig};
use dloral_core::losses::{transition_loss, Direction, TransitionSchedule};
use dloral_core::lora::Stage;
use dloral_core::metrics::{psnr, sharpness, ssim, temporal_profile, warping_error, FlowSource, ProfileAxis};
use dloral_core::tensor::{Real, Tensor};
use dloral_core::trainer::{
    read_log, stage_of, validation_pixel_loss, StageConfig, TrainMode, Trainer, FINAL_CHECKPOINT, LOG_FILE,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn uniform<F: Real>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<F> {
    Tensor::from_fn(shape, |_| F::lit(rng.random_range(lo..hi)))
}

fn sequence<F: Real>(frames: Tensor<F>) -> VideoSequence<F> {
    VideoSequence { frames, gt_flow: None, meta: SequenceMeta { scene_id: "acceptance".into(), seed: 0 } }
}

// ---------------------------------------------------------------- 1

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let report = run_diagnostics(&DiagOptions { tolerance: 1e-4, fault: None });
    let elapsed = start.elapsed();
    let mut missing = Vec::new();
    let find = |name: &str| report.entries.iter().find(|e| e.name == name);
    for op in OpKind::ALL {
        match find(op.name()) {
            Some(e) if e.group == CheckGroup::Op && e.max_rel_err.is_some_and(|r| r < 1e-4) => {}
            _ => missing.push(op.name().to_string()),
        }
    }
    let modules = [
        "cfr_fusion",
        "unet_forward",
        "warp",
        "soft_argmax_flow",
        "pixel_loss",
        "perceptual_loss",
        "flow_loss",
        "detail_loss",
    ];
    for m in modules {
        match find(m) {
            Some(e) if e.max_rel_err.is_some_and(|r| r < 1e-4) => {}
            _ => missing.push(m.to_string()),
        }
    }
    let worst = report.entries.iter().filter_map(|e| e.max_rel_err).fold(0.0, f64::max);
    let ok = report.passed() && missing.is_empty() && elapsed < Duration::from_secs(60);
    outcome(
        ok,
        format!(
            "{} ops + {} modules, worst rel err {worst:.2e} (< 1e-4), {:.1}s (< 60s){}",
            OpKind::ALL.len(),
            modules.len(),
            elapsed.as_secs_f64(),
            if missing.is_empty() { String::new() } else { format!(", failing: {}", missing.join(" ")) }
        ),
    )
}

// ---------------------------------------------------------------- 2

fn random_adapters(seed: u64) -> Model<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Model::<f32>::init(ModelConfig::default(), seed, true).unwrap();
    for a in m.c_set.adapters.iter_mut().chain(m.d_set.adapters.iter_mut()) {
        a.b = uniform(&mut rng, a.b.shape(), -0.05, 0.05);
    }
    m
}

fn merge_equivalence() -> Outcome {
    let model = random_adapters(21);
    let merged = model.merged().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let z: Tensor<f32> = uniform(&mut rng, &[1, 12, 16, 16], 0.0, 1.0);
        let branch = denoise(&model, &z, AdapterPath::Branch).unwrap();
        let folded = denoise(&merged, &z, AdapterPath::Folded).unwrap();
        worst = worst.max(branch.max_abs_diff(&folded));
    }
    let frames: Tensor<f32> = uniform(&mut rng, &[4, 3, 32, 32], 0.0, 1.0);
    let seq = sequence(frames);
    let a = infer_sequence(&model, &seq, AdapterPath::Branch).unwrap();
    let b = infer_sequence(&merged, &seq, AdapterPath::Folded).unwrap();
    let e2e = a.frames.max_abs_diff(&b.frames);
    outcome(
        worst <= 1e-6 && e2e <= 1e-5,
        format!("denoiser max |Δ| {worst:.2e} over 100 inputs (≤ 1e-6, f32); infer_sequence max |Δ| {e2e:.2e} (≤ 1e-5)"),
    )
}

// ---------------------------------------------------------------- 3

fn identity_chain() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let f32_frames: Tensor<f32> = uniform(&mut rng, &[5, 3, 32, 32], 0.0, 1.0);
    let f64_frames: Tensor<f64> = uniform(&mut rng, &[3, 3, 16, 24], 0.0, 1.0);
    let a = infer_sequence(&Model::identity(ModelConfig::default()).unwrap(), &sequence(f32_frames.clone()), AdapterPath::Folded)
        .unwrap();
    let b = infer_sequence(&Model::identity(ModelConfig::default()).unwrap(), &sequence(f64_frames.clone()), AdapterPath::Branch)
        .unwrap();
    let ok = a.frames == f32_frames && b.frames == f64_frames;
    outcome(ok, format!("bit-exact: f32 {}, f64 {}", a.frames == f32_frames, b.frames == f64_frames))
}

// ---------------------------------------------------------------- 4

/// Dense gated attention over every position, with the threshold MLP
/// evaluated by hand.
fn dense_gated_attention(a: &Tensor<f64>, b: &Tensor<f64>, p: &CfrParams<f64>) -> Tensor<f64> {
    let (_, c, h, w) = a.dims4().unwrap();
    let d = p.w_q.shape()[0];
    let plane = h * w;
    let project = |wt: &Tensor<f64>, src: &Tensor<f64>, rows: usize, pos: usize| -> Vec<f64> {
        (0..rows).map(|o| (0..c).map(|i| wt.data()[o * c + i] * src.data()[i * plane + pos]).sum()).collect()
    };
    let mut out = a.clone();
    for pp in 0..plane {
        let q = project(&p.w_q, a, d, pp);
        let hidden: Vec<f64> = (0..d)
            .map(|o| {
                let s: f64 = (0..d).map(|i| p.mlp1_w.data()[o * d + i] * q[i]).sum();
                (s + p.mlp1_b.data()[o]).max(0.0)
            })
            .collect();
        let tau: f64 = (0..d).map(|i| p.mlp2_w.data()[i] * hidden[i]).sum::<f64>() + p.mlp2_b.data()[0];
        for qq in 0..plane {
            let k = project(&p.w_k, b, d, qq);
            let sim = q.iter().zip(&k).map(|(x, y)| x * y).sum::<f64>() / (d as f64).sqrt();
            let gate = (sim - tau).max(0.0);
            let v = project(&p.w_v, b, c, qq);
            for ch in 0..c {
                out.data_mut()[ch * plane + pp] += gate * v[ch];
            }
        }
    }
    out
}

fn cfr_oracle() -> Outcome {
    let mut eye = CfrParams::<f64>::zeros(1, 1);
    eye.w_q.data_mut()[0] = 1.0;
    eye.w_k.data_mut()[0] = 1.0;
    eye.w_v.data_mut()[0] = 1.0;
    let z_cur = Tensor::from_f64(&[1, 1, 1, 2], &[1.0, 2.0]).unwrap();
    let z_prev = Tensor::from_f64(&[1, 1, 1, 2], &[0.5, 1.5]).unwrap();
    let hand = retrieve_fuse(&z_cur, &z_prev, &eye, &CfrConfig { k: 1, d: 1, window: Window::Global }).unwrap();
    let hand_ok = hand.data() == [3.25, 6.5];

    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let (c, d) = (4, 3);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let p = CfrParams {
            w_q: uniform(&mut rng, &[d, c, 1, 1], -0.8, 0.8),
            w_k: uniform(&mut rng, &[d, c, 1, 1], -0.8, 0.8),
            w_v: uniform(&mut rng, &[c, c, 1, 1], -0.8, 0.8),
            mlp1_w: uniform(&mut rng, &[d, d, 1, 1], -0.8, 0.8),
            mlp1_b: uniform(&mut rng, &[d], -0.2, 0.2),
            mlp2_w: uniform(&mut rng, &[1, d, 1, 1], -0.8, 0.8),
            mlp2_b: uniform(&mut rng, &[1], -0.5, 0.0),
        };
        let a = uniform(&mut rng, &[1, c, 4, 4], -1.0, 1.0);
        let b = uniform(&mut rng, &[1, c, 4, 4], -1.0, 1.0);
        let got = retrieve_fuse(&a, &b, &p, &CfrConfig { k: 16, d, window: Window::Global }).unwrap();
        worst = worst.max(got.max_abs_diff(&dense_gated_attention(&a, &b, &p)));
    }
    outcome(
        hand_ok && worst < 1e-6,
        format!("1×2 example {:?} (want [3.25, 6.5]); dense 4×4, k = 16: max |Δ| {worst:.2e} (< 1e-6)", hand.data()),
    )
}

// ---------------------------------------------------------------- 5

fn tiny_data(n: usize, stage: Stage, seed: u64) -> Dataset<f64> {
    let cfg = DataConfig { height: 16, width: 16, length: 4, ..DataConfig::default() };
    make_dataset(n, stage, seed, &cfg).unwrap()
}

fn tiny_model_config() -> ModelConfig {
    let mut m = ModelConfig::default();
    m.unet.base_width = 8;
    m.cfr.d = 4;
    m.lora.rank = 2;
    m.lora.alpha = 2.0;
    m
}

/// Parameters a stage may touch, by checkpoint key prefix.
fn trainable_prefixes(stage: Stage) -> &'static [&'static str] {
    match stage {
        Stage::Consistency => &["lora.C.", "cfr."],
        Stage::Enhancement => &["lora.D."],
    }
}

fn scheduler() -> Outcome {
    let cfg = StageConfig { n_cons: 5, n_enh: 5, n_total: 30, s_t: 2, lr: 1e-3, ..StageConfig::default() };
    let mut seq_ok = true;
    for i in 1..=30usize {
        let want = if (i - 1) % 10 < 5 { Stage::Consistency } else { Stage::Enhancement };
        seq_ok &= stage_of(i, &cfg).unwrap().stage == want;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let mut ends_ok = true;
    for _ in 0..50 {
        let (lc, le): (f64, f64) = (rng.random_range(0.0..10.0), rng.random_range(0.0..10.0));
        for (direction, at0, at_st) in [(Direction::ConsToEnh, lc, le), (Direction::EnhToCons, le, lc)] {
            let sched = TransitionSchedule { s_t: cfg.s_t, direction };
            let mut g = Graph::<f64>::new();
            let (a, b) = (g.constant(Tensor::scalar(lc)), g.constant(Tensor::scalar(le)));
            let l0 = transition_loss(&mut g, a, b, 0, &sched).unwrap();
            let ls = transition_loss(&mut g, a, b, cfg.s_t, &sched).unwrap();
            ends_ok &= g.value(l0).item() == at0 && g.value(ls).item() == at_st;
        }
    }
    // The first step of each stage after a boundary starts from the
    // previous objective (w = 0) and reaches the new one after s_t steps.
    for i in [6usize, 11, 16, 21, 26] {
        let pos = stage_of(i, &cfg).unwrap();
        ends_ok &= pos.s == 0 && pos.transition.is_some() && pos.w == 0.0;
        let done = stage_of(i + cfg.s_t, &cfg).unwrap();
        ends_ok &= done.transition.is_none() && done.w == 1.0;
    }

    let mut trainer = Trainer::new(
        tiny_model_config(),
        StageConfig { mode: TrainMode::DualLora, batch: 1, ..cfg.clone() },
        tiny_data(2, Stage::Consistency, 52),
        tiny_data(2, Stage::Enhancement, 53),
    )
    .unwrap();
    let mut freeze_ok = true;
    let mut moved_ok = true;
    let mut before = trainer.model.to_map();
    for _ in 0..cfg.n_total {
        let rec = trainer.step().unwrap();
        let after = trainer.model.to_map();
        let allowed = trainable_prefixes(rec.stage);
        let mut moved = false;
        for (name, t) in &after {
            let changed = before[name].data().iter().zip(t.data()).any(|(x, y)| x.to_bits() != y.to_bits());
            if allowed.iter().any(|p| name.starts_with(p)) {
                moved |= changed;
            } else if changed {
                freeze_ok = false;
            }
        }
        moved_ok &= moved;
        before = after;
    }
    outcome(
        seq_ok && ends_ok && freeze_ok && moved_ok,
        format!(
            "stage sequence {}, transition endpoints {}, frozen params untouched {}, trainable params updated {}",
            seq_ok, ends_ok, freeze_ok, moved_ok
        ),
    )
}

// ---------------------------------------------------------------- 6

/// Smooth colour pattern sampled at `(x + ox, y + oy)`.
fn pattern(h: usize, w: usize, ox: f64, oy: f64) -> Tensor<f64> {
    let waves = [([0.11, 0.05], 0.3), ([-0.04, 0.13], 1.1), ([0.08, -0.09], 2.0), ([0.02, 0.07], 0.7)];
    Tensor::from_fn(&[1, 3, h, w], |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        let (x, y) = (x as f64 + ox, y as f64 + oy);
        let mut v = 0.5;
        for (k, (f, ph)) in waves.iter().enumerate() {
            v += 0.1 * (std::f64::consts::TAU * (f[0] * x + f[1] * y) + ph + c as f64 * (k as f64 + 0.5)).sin();
        }
        v
    })
}

fn flow_oracles() -> Outcome {
    let cfg = FlowConfig::default();
    let (h, w) = (32, 32);
    let a = pattern(h, w, 0.0, 0.0);
    let mut worst_mean = 0.0f64;
    let mut worst_all = 0.0f64;
    let mut worst_warp = 0.0f64;
    for dy in -3i32..=3 {
        for dx in -3i32..=3 {
            let (dx, dy) = (dx as f64, dy as f64);
            // b[p] = a[p + s], so the flow that warps a onto b is s everywhere.
            let b = pattern(h, w, dx, dy);
            let est = estimate_flow(&a, &b, &cfg).unwrap();
            let plane = h * w;
            // Pixels whose match p + s lies outside the frame have no
            // correct answer; they count only in the full-frame figure.
            let (mut sum, mut n, mut sum_all) = (0.0, 0usize, 0.0);
            for i in 0..plane {
                let (ex, ey) = (est.data()[i] - dx, est.data()[plane + i] - dy);
                let e = (ex * ex + ey * ey).sqrt();
                sum_all += e;
                let (y, x) = ((i / w) as f64 + dy, (i % w) as f64 + dx);
                if y >= 0.0 && x >= 0.0 && y < h as f64 && x < w as f64 {
                    sum += e;
                    n += 1;
                }
            }
            worst_mean = worst_mean.max(sum / n as f64);
            worst_all = worst_all.max(sum_all / plane as f64);

            let frames = Tensor::stack_outer(&[a.clone(), b.clone(), pattern(h, w, 2.0 * dx, 2.0 * dy)]).unwrap();
            let flows = Tensor::from_fn(&[2, 2, h, w], |i| if (i / plane) % 2 == 0 { dx } else { dy });
            worst_warp = worst_warp.max(warping_error(&frames, FlowSource::Given(&flows)).unwrap());
        }
    }
    let zoz = Tensor::stack_outer(&[
        Tensor::<f64>::zeros(&[1, 3, 8, 8]),
        Tensor::full(&[1, 3, 8, 8], 1.0),
        Tensor::zeros(&[1, 3, 8, 8]),
    ])
    .unwrap();
    let zero_flow = Tensor::zeros(&[2, 2, 8, 8]);
    let e_zoz = warping_error(&zoz, FlowSource::Given(&zero_flow)).unwrap();
    outcome(
        worst_mean < 0.5 && worst_warp < 1e-6 && e_zoz == 1.0,
        format!(
            "worst mean endpoint error over ±3 px shifts {worst_mean:.3} px where the match is in frame (< 0.5), {worst_all:.3} px full frame; E_warp with exact flow {worst_warp:.2e} (< 1e-6); zeros/ones/zeros {e_zoz}"
        ),
    )
}

// ---------------------------------------------------------------- 7, 8

struct DeskData {
    cons: Dataset<f32>,
    enh: Dataset<f32>,
    val: Dataset<f32>,
}

fn desk_data() -> DeskData {
    let dc = DataConfig::default();
    let cons = make_dataset::<f32>(16, Stage::Consistency, 1, &dc).unwrap();
    let enh = make_dataset::<f32>(16, Stage::Enhancement, 2, &dc).unwrap();
    let mut val = make_dataset::<f32>(2, Stage::Consistency, 3, &dc).unwrap();
    val.items.extend(make_dataset::<f32>(2, Stage::Enhancement, 4, &dc).unwrap().items);
    DeskData { cons, enh, val }
}

/// Desk-scale preset: rank-8 adapters, a learning rate suited to a
/// 32-channel backbone trained from scratch, and a light flow term.
fn desk_configs(mode: TrainMode) -> (ModelConfig, StageConfig) {
    let mut model = ModelConfig::default();
    model.lora.rank = 8;
    model.lora.alpha = 8.0;
    let mut stage = StageConfig { lr: 5e-3, n_total: 800, mode, ..StageConfig::default() };
    stage.weights_cons.opt = 0.01;
    stage.weights_enh.opt = 0.01;
    (model, stage)
}

struct DeskRun {
    v0: f64,
    v_end: f64,
    e_out: f64,
    e_lq: f64,
    elapsed: Duration,
}

fn desk_run(data: &DeskData, mode: TrainMode, out: &Path) -> DeskRun {
    let (mc, sc) = desk_configs(mode);
    let mut t = Trainer::new(mc, sc, data.cons.clone(), data.enh.clone()).unwrap();
    let v0 = validation_pixel_loss(&t.model, &data.val).unwrap();
    let start = Instant::now();
    t.run(Some(out)).unwrap();
    let elapsed = start.elapsed();
    let v_end = validation_pixel_loss(&t.model, &data.val).unwrap();
    let (mut e_out, mut e_lq) = (0.0, 0.0);
    for it in &data.val.items {
        let flow = it.gt.gt_flow.as_ref().unwrap();
        let hq = infer_sequence(&t.model, &it.lq, AdapterPath::Folded).unwrap();
        e_out += warping_error(&hq.frames, FlowSource::Given(flow)).unwrap();
        e_lq += warping_error(&it.lq.frames, FlowSource::Given(flow)).unwrap();
    }
    let n = data.val.items.len() as f64;
    DeskRun { v0, v_end, e_out: e_out / n, e_lq: e_lq / n, elapsed }
}

fn same_log_keys(a: &Path, b: &Path) -> bool {
    let (la, lb) = (read_log(&a.join(LOG_FILE)).unwrap(), read_log(&b.join(LOG_FILE)).unwrap());
    let keys = |l: &[dloral_core::trainer::LogRecord]| l.iter().map(|r| (r.i, r.stage)).collect::<Vec<_>>();
    la.len() == lb.len() && keys(&la) == keys(&lb)
}

fn desk_training(root: &Path, dual_out: &Path) -> Outcome {
    let data = desk_data();
    let dual = desk_run(&data, TrainMode::DualLora, dual_out);
    let drop = 1.0 - dual.v_end / dual.v0;
    let mut ablations = BTreeMap::new();
    for mode in [TrainMode::JointSingle, TrainMode::IterativeSingle] {
        let dir = root.join(mode.name());
        let r = desk_run(&data, mode, &dir);
        let complete = dir.join(FINAL_CHECKPOINT).is_file() && same_log_keys(dual_out, &dir);
        ablations.insert(mode.name(), (complete, r));
    }
    let budget = Duration::from_secs(15 * 60);
    let ok = drop >= 0.40 && dual.e_out < dual.e_lq && dual.elapsed < budget && ablations.values().all(|(c, _)| *c);
    let abl: Vec<String> = ablations
        .iter()
        .map(|(name, (c, r))| {
            format!("{name} complete {c} (val drop {:.0}%, E_warp {:.4}, {:.0}s)", 100.0 * (1.0 - r.v_end / r.v0), r.e_out, r.elapsed.as_secs_f64())
        })
        .collect();
    outcome(
        ok,
        format!(
            "dual_lora N=800: val pixel loss {:.5} -> {:.5} ({:.1}% drop, need ≥ 40%); E_warp out {:.4} vs LQ {:.4}; {:.0}s (< 900s); {}",
            dual.v0,
            dual.v_end,
            100.0 * drop,
            dual.e_out,
            dual.e_lq,
            dual.elapsed.as_secs_f64(),
            abl.join("; ")
        ),
    )
}

fn determinism(root: &Path, first: &Path) -> Outcome {
    if !first.join(FINAL_CHECKPOINT).is_file() {
        let data = desk_data();
        desk_run(&data, TrainMode::DualLora, first);
    }
    let second = root.join("dual_lora_repeat");
    let data = desk_data();
    desk_run(&data, TrainMode::DualLora, &second);
    let logs = fs::read(first.join(LOG_FILE)).unwrap() == fs::read(second.join(LOG_FILE)).unwrap();
    let ckpt = fs::read(first.join(FINAL_CHECKPOINT)).unwrap() == fs::read(second.join(FINAL_CHECKPOINT)).unwrap();
    outcome(logs && ckpt, format!("identical logs {logs}, bit-identical final checkpoints {ckpt}"))
}

// ---------------------------------------------------------------- 9

fn metric_closed_forms() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    let x: Tensor<f64> = uniform(&mut rng, &[2, 3, 24, 24], 0.0, 0.9);
    let y = x.map(|v| v + 0.1);
    let p = psnr(&y, &x).unwrap();
    let s = ssim(&x, &x).unwrap();
    let sharp = sharpness(&Tensor::<f64>::full(&[2, 3, 16, 16], 0.37)).unwrap();
    let frame: Tensor<f64> = uniform(&mut rng, &[1, 3, 12, 20], 0.0, 1.0);
    let stat = Tensor::stack_outer(&vec![frame; 6]).unwrap();
    let mut rows_ok = true;
    let row = temporal_profile(&stat, ProfileAxis::Row, 5).unwrap();
    let (_, c, t, w) = row.dims4().unwrap();
    for ch in 0..c {
        for f in 0..t {
            for x in 0..w {
                rows_ok &= row.data()[(ch * t + f) * w + x] == row.data()[ch * t * w + x];
            }
        }
    }
    // Column profiles put time along the width.
    let col = temporal_profile(&stat, ProfileAxis::Column, 7).unwrap();
    let (_, c, h, t) = col.dims4().unwrap();
    for ch in 0..c {
        for y in 0..h {
            for f in 0..t {
                rows_ok &= col.data()[(ch * h + y) * t + f] == col.data()[(ch * h + y) * t];
            }
        }
    }
    outcome(
        (p - 20.0).abs() <= 1e-6 && s == 1.0 && sharp == 0.0 && rows_ok,
        format!("psnr {p:.9} dB (20 ± 1e-6), ssim(x,x) {s}, sharpness(const) {sharp}, static profile rows identical {rows_ok}"),
    )
}

fn main() -> ExitCode {
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = tmp.path().to_path_buf();
    let dual_out = root.join("dual_lora");
    let criteria: Vec<(usize, &str, Box<dyn Fn() -> Outcome>)> = vec![
        (1, "gradient suite", Box::new(gradient_suite)),
        (2, "LoRA merge equivalence", Box::new(merge_equivalence)),
        (3, "identity chain", Box::new(identity_chain)),
        (4, "CFR oracle", Box::new(cfr_oracle)),
        (5, "scheduler correctness", Box::new(scheduler)),
        (6, "flow and warping-error oracles", Box::new(flow_oracles)),
        (7, "desk-scale training trend", Box::new(|| desk_training(&root, &dual_out))),
        (8, "determinism", Box::new(|| determinism(&root, &dual_out))),
        (9, "metric closed forms", Box::new(metric_closed_forms)),
    ];
    let mut failed = 0;
    for (n, name, run) in &criteria {
        if only.as_ref().is_some_and(|o| !o.contains(n)) {
            continue;
        }
        let res = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        if !res.passed {
            failed += 1;
        }
        println!("{} [{n}] {name}: {}", if res.passed { "PASS" } else { "FAIL" }, res.detail);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        println!("all acceptance criteria passed");
        ExitCode::SUCCESS
    }
}
