use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use dloral_core::autodiff::OpKind;
use dloral_core::backbone::{infer_sequence, AdapterPath, Model};
use dloral_core::data::{make_dataset, read_frames_png, write_frames_png, write_image_png, Dataset, SequenceMeta, VideoSequence};
use dloral_core::diag::{run_diagnostics, DiagOptions};
use dloral_core::lora::Stage;
use dloral_core::metrics::{evaluate_sequence, temporal_profile, MetricReport, ProfileAxis};
use dloral_core::tensor::Tensor;
use dloral_core::trainer::{latest_checkpoint, Checkpoint, Trainer, FINAL_CHECKPOINT};

use crate::config::RunConfig;
use crate::{NumericalError, StageSel, UsageError};

type F = f32;

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> anyhow::Result<&'a Path> {
    match v {
        Some(p) => Ok(p),
        None => bail!(UsageError(format!("--{flag} is required"))),
    }
}

fn split_dir(root: &Path, stage: Stage) -> PathBuf {
    root.join(stage.name())
}

pub fn gen_data(cfg: &RunConfig, sel: StageSel) -> anyhow::Result<()> {
    let out = required(&cfg.out, "out")?;
    let stages: &[Stage] = match sel {
        StageSel::Consistency => &[Stage::Consistency],
        StageSel::Enhancement => &[Stage::Enhancement],
        StageSel::Both => &[Stage::Consistency, Stage::Enhancement],
    };
    let dc = cfg.data_config();
    for &stage in stages {
        let ds = make_dataset::<F>(cfg.n_sequences, stage, cfg.seed, &dc)?;
        let dir = split_dir(out, stage);
        ds.save(&dir)?;
        println!("{}: {} sequences -> {}", stage.name(), ds.items.len(), dir.display());
    }
    cfg.echo(out)
}

fn load_split(root: &Path, stage: Stage, used: bool, cfg: &RunConfig) -> anyhow::Result<Dataset<F>> {
    let dir = split_dir(root, stage);
    if !dir.join("manifest.json").exists() {
        if used {
            bail!(UsageError(format!("no {} split under {}", stage.name(), root.display())));
        }
        return Ok(Dataset { stage, master_seed: cfg.seed, config: cfg.data_config(), items: Vec::new() });
    }
    Ok(Dataset::load(&dir).with_context(|| format!("loading {}", dir.display()))?)
}

pub fn train(cfg: &RunConfig, resume: bool) -> anyhow::Result<()> {
    let data = required(&cfg.data, "data")?;
    let out = required(&cfg.out, "out")?;
    let stage_cfg = cfg.stage_config();
    let model_cfg = cfg.model_config();
    let cons = load_split(data, Stage::Consistency, stage_cfg.n_cons > 0, cfg)?;
    let enh = load_split(data, Stage::Enhancement, stage_cfg.n_enh > 0, cfg)?;

    let latest = latest_checkpoint(out)?;
    let mut trainer = match (resume, latest) {
        (true, Some(path)) => {
            let ckpt = Checkpoint::<F>::load(&path)?;
            if ckpt.header.stage != stage_cfg || ckpt.header.model != model_cfg {
                bail!(UsageError(format!("{} was written with a different config", path.display())));
            }
            println!("resuming from {} (iteration {})", path.display(), ckpt.header.iteration);
            Trainer::from_checkpoint(ckpt, cons, enh)?
        }
        (false, Some(_)) => {
            bail!(UsageError(format!("{} already holds checkpoints; pass --resume or pick another --out", out.display())))
        }
        (_, None) => Trainer::new(model_cfg, stage_cfg, cons, enh)?,
    };
    cfg.echo(out)?;
    let records = trainer.run(Some(out))?;
    if let Some(last) = records.last() {
        println!(
            "iteration {} ({}): L_total = {:.6e}, checkpoint {}",
            last.i,
            last.stage.name(),
            last.l_total,
            out.join(FINAL_CHECKPOINT).display()
        );
    }
    Ok(())
}

/// Frames at `path`: a DLT1 file, the first of `names` inside a directory,
/// PNGs in the directory, or PNGs in its `frames/` subdirectory. A
/// `flow.dlt` next to directory frames is returned as well.
fn resolve_frames(path: &Path, names: &[&str]) -> anyhow::Result<Option<(Tensor<F>, Option<Tensor<F>>)>> {
    if path.is_file() {
        return Ok(Some((Tensor::load(path)?, None)));
    }
    if !path.is_dir() {
        return Ok(None);
    }
    let flow_path = path.join("flow.dlt");
    let flow = if flow_path.is_file() { Some(Tensor::load(&flow_path)?) } else { None };
    for n in names {
        let p = path.join(n);
        if p.is_file() {
            return Ok(Some((Tensor::load(&p)?, flow)));
        }
    }
    for d in [path.to_path_buf(), path.join("frames")] {
        if has_png(&d)? {
            return Ok(Some((read_frames_png(&d)?, flow)));
        }
    }
    Ok(None)
}

fn has_png(dir: &Path) -> anyhow::Result<bool> {
    if !dir.is_dir() {
        return Ok(false);
    }
    for e in fs::read_dir(dir)? {
        if e?.path().extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
            return Ok(true);
        }
    }
    Ok(false)
}

type Named = Vec<(String, Tensor<F>, Option<Tensor<F>>)>;

/// One sequence at `path`, or else every resolvable subdirectory in name
/// order.
fn collect_sequences(path: &Path, names: &[&str]) -> anyhow::Result<(Named, bool)> {
    let stem = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if let Some((t, f)) = resolve_frames(path, names)? {
        return Ok((vec![(stem(path), t, f)], true));
    }
    if !path.is_dir() {
        bail!(UsageError(format!("{} does not exist", path.display())));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(path)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    dirs.sort();
    let mut out = Vec::new();
    for d in dirs {
        if let Some((t, f)) = resolve_frames(&d, names)? {
            out.push((stem(&d), t, f));
        }
    }
    if out.is_empty() {
        bail!(dloral_core::error::Error::Input(format!("no frame sequences under {}", path.display())));
    }
    Ok((out, false))
}

fn check_finite(t: &Tensor<F>, what: &str) -> anyhow::Result<()> {
    if t.data().iter().any(|v| !v.is_finite()) {
        bail!(NumericalError(format!("{what} contains non-finite values")));
    }
    Ok(())
}

fn write_output(dir: &Path, frames: &Tensor<F>) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    frames.save(&dir.join("frames.dlt"))?;
    write_frames_png(&dir.join("frames"), frames)?;
    Ok(())
}

pub fn infer(cfg: &RunConfig, no_merge: bool) -> anyhow::Result<()> {
    let ckpt_path = required(&cfg.checkpoint, "checkpoint")?;
    let input = required(&cfg.input, "input")?;
    let out = required(&cfg.out, "out")?;
    let ckpt = Checkpoint::<F>::load(ckpt_path)?;
    let (model, path) = if no_merge {
        (ckpt.model, AdapterPath::Branch)
    } else {
        (ckpt.model.merged()?, AdapterPath::Folded)
    };
    let run = |id: &str, frames: Tensor<F>| -> anyhow::Result<Tensor<F>> {
        let seq = VideoSequence { frames, gt_flow: None, meta: SequenceMeta { scene_id: id.to_string(), seed: 0 } };
        seq.validate()?;
        let hq = infer_sequence(&model, &seq, path)?.frames;
        check_finite(&hq, id)?;
        Ok(hq)
    };
    if input.join("manifest.json").is_file() {
        let ds = Dataset::<F>::load(input)?;
        for it in ds.items {
            let hq = run(&it.id, it.lq.frames)?;
            write_output(&out.join(&it.id), &hq)?;
        }
    } else {
        let Some((frames, _)) = resolve_frames(input, &["lq.dlt", "frames.dlt"])? else {
            bail!(UsageError(format!("no input frames at {}", input.display())));
        };
        let n = frames.shape()[0];
        let hq = run("input", frames)?;
        write_output(out, &hq)?;
        println!("{n} frames -> {}", out.display());
    }
    cfg.echo(out)
}

pub fn parse_profile(s: &str) -> anyhow::Result<(ProfileAxis, usize)> {
    let bad = || UsageError(format!("expected row=N or col=N, got {s:?}"));
    let (axis, idx) = s.split_once('=').ok_or_else(bad)?;
    let axis = match axis {
        "row" => ProfileAxis::Row,
        "col" | "column" => ProfileAxis::Column,
        _ => bail!(bad()),
    };
    Ok((axis, idx.parse().map_err(|_| bad())?))
}

pub fn eval(cfg: &RunConfig, profiles: &[(ProfileAxis, usize)]) -> anyhow::Result<()> {
    let pred_path = required(&cfg.pred, "pred")?;
    let out = required(&cfg.out, "out")?;
    let flow_cfg = cfg.model_config().flow;
    let (preds, single) = collect_sequences(pred_path, &["frames.dlt", "lq.dlt"])?;
    let gts = match &cfg.gt {
        Some(g) => Some(collect_sequences(g, &["gt.dlt", "frames.dlt"])?),
        None => None,
    };
    let mut rows = Vec::with_capacity(preds.len());
    for (id, pred, _) in &preds {
        check_finite(pred, id)?;
        let gt = match &gts {
            None => None,
            Some((g, g_single)) if single && *g_single => Some(&g[0]),
            Some((g, _)) => match g.iter().find(|(gid, ..)| gid == id) {
                Some(m) => Some(m),
                None => bail!(dloral_core::error::Error::Input(format!("no reference for sequence {id}"))),
            },
        };
        let reference = gt.map(|(_, t, f)| (t, f.as_ref()));
        rows.push(evaluate_sequence(id, pred, reference, &flow_cfg)?);
        for &(axis, idx) in profiles {
            let tag = match axis {
                ProfileAxis::Row => format!("row{idx:03}"),
                ProfileAxis::Column => format!("col{idx:03}"),
            };
            let dir = out.join("profiles");
            fs::create_dir_all(&dir)?;
            write_image_png(&dir.join(format!("{id}_{tag}.png")), &temporal_profile(pred, axis, idx)?)?;
            if let Some((_, g, _)) = gt {
                write_image_png(&dir.join(format!("{id}_{tag}_gt.png")), &temporal_profile(g, axis, idx)?)?;
            }
        }
    }
    let report = MetricReport::new(rows, serde_json::to_value(cfg)?)?;
    report.write(out)?;
    print!("{}", report.to_csv());
    cfg.echo(out)
}

pub fn diag(cfg: &RunConfig, fault: Option<&str>, tolerance: f64) -> anyhow::Result<()> {
    let fault = match fault {
        Some(name) => Some(name.parse::<OpKind>().map_err(|e| UsageError(e.to_string()))?),
        None => None,
    };
    let report = run_diagnostics(&DiagOptions { tolerance, fault });
    let text = report.to_text();
    print!("{text}");
    if let Some(out) = &cfg.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("diag_report.txt"), &text)?;
        fs::write(out.join("diag_report.json"), serde_json::to_string_pretty(&report)?)?;
        cfg.echo(out)?;
    }
    if !report.passed() {
        let names: Vec<_> = report.failures().iter().map(|e| e.name.as_str()).collect();
        bail!(NumericalError(format!("diagnostics failed: {}", names.join(", "))));
    }
    Ok(())
}

pub fn merge(cfg: &RunConfig) -> anyhow::Result<()> {
    let input = required(&cfg.checkpoint, "checkpoint")?;
    let out = required(&cfg.out, "out")?;
    let mut ckpt = Checkpoint::<F>::load(input)?;
    let merged: Model<F> = ckpt.model.merged()?;
    ckpt.model = merged;
    ckpt.moments.clear();
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    ckpt.save(out)?;
    cfg.echo_to(&out.with_extension("config.json"))?;
    println!("merged checkpoint -> {}", out.display());
    Ok(())
}
