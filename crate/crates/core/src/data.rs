//! Synthetic videos with exact global motion, the per-sequence degradation
//! pipeline, and dataset storage.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::flow::constant_flow;
use crate::lora::Stage;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub scene_id: String,
    pub seed: u64,
}

/// Frames `(T, 3, H, W)` in [0, 1], optional ground-truth flow
/// `(T−1, 2, H, W)` with `warp(frame_t, flow_t) = frame_{t+1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSequence<F> {
    pub frames: Tensor<F>,
    pub gt_flow: Option<Tensor<F>>,
    pub meta: SequenceMeta,
}

impl<F: Real> VideoSequence<F> {
    pub fn len(&self) -> usize {
        self.frames.shape().first().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let (t, _, h, w) = self.frames.dims4()?;
        if t == 0 {
            return Err(Error::Input("empty video sequence".into()));
        }
        if let Some(f) = &self.gt_flow {
            if f.shape() != [t - 1, 2, h, w] {
                return shape_err(format!("gt_flow {:?} for {t} frames of {h}×{w}", f.shape()));
            }
        }
        Ok(())
    }

    /// Frames `start..start + len` with the matching flow entries.
    pub fn clip(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.len() {
            return Err(Error::Input(format!("clip {start}+{len} of {} frames", self.len())));
        }
        let frames: Vec<Tensor<F>> = (start..start + len).map(|i| self.frames.slice_outer(i)).collect::<Result<_>>()?;
        let gt_flow = match &self.gt_flow {
            Some(f) if len > 1 => {
                let parts: Vec<Tensor<F>> = (start..start + len - 1).map(|i| f.slice_outer(i)).collect::<Result<_>>()?;
                Some(Tensor::stack_outer(&parts)?)
            }
            Some(_) => Some(Tensor::zeros(&[0, 2, self.frames.shape()[2], self.frames.shape()[3]])),
            None => None,
        };
        Ok(VideoSequence { frames: Tensor::stack_outer(&frames)?, gt_flow, meta: self.meta.clone() })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    TranslatingTexture,
    TranslatingStill,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub kind: SceneKind,
    pub height: usize,
    pub width: usize,
    pub length: usize,
    /// Displacement `(dx, dy)` from each frame to the next, `length − 1` entries.
    pub shifts: Vec<[f64; 2]>,
    pub texture_seed: u64,
    /// Number of sinusoid components in the texture.
    pub components: usize,
    /// Largest spatial frequency in cycles per pixel.
    pub max_freq: f64,
    /// Largest allowed |dx| or |dy|.
    pub max_shift: f64,
}

/// Smooth, band-limited colour texture: a sum of plane waves whose phases
/// differ per channel.
struct Texture {
    waves: Vec<([f64; 2], f64, [f64; 3])>,
}

impl Texture {
    fn new(seed: u64, components: usize, max_freq: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let amp = 0.45 / components.max(1) as f64;
        let waves = (0..components)
            .map(|_| {
                let f = rng.random_range(0.3 * max_freq..=max_freq);
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                let a = amp * rng.random_range(0.6..=1.0);
                let ph = [0, 1, 2].map(|_| rng.random_range(0.0..std::f64::consts::TAU));
                ([f * theta.cos(), f * theta.sin()], a, ph)
            })
            .collect();
        Texture { waves }
    }

    fn at(&self, c: usize, x: f64, y: f64) -> f64 {
        let mut v = 0.5;
        for (k, a, ph) in &self.waves {
            v += a * (std::f64::consts::TAU * (k[0] * x + k[1] * y) + ph[c]).sin();
        }
        v
    }
}

/// Renders the scene. Frame `t` samples the texture at `p + o_t`, where
/// `o_t` is the sum of the first `t` shifts, so `frame_{t+1}[p] = frame_t[p + s_t]`.
pub fn synth_sequence<F: Real>(spec: &SceneSpec) -> Result<VideoSequence<F>> {
    if spec.length == 0 || spec.shifts.len() + 1 != spec.length {
        return Err(Error::Config(format!("{} shifts for {} frames", spec.shifts.len(), spec.length)));
    }
    if let Some(s) = spec.shifts.iter().find(|s| s[0].abs() > spec.max_shift || s[1].abs() > spec.max_shift) {
        return Err(Error::Config(format!("shift {s:?} exceeds {}", spec.max_shift)));
    }
    let tex = Texture::new(spec.texture_seed, spec.components, spec.max_freq);
    let (h, w) = (spec.height, spec.width);
    let mut origin = [0.0f64; 2];
    let mut frames = Vec::with_capacity(spec.length);
    for t in 0..spec.length {
        if t > 0 {
            origin = [origin[0] + spec.shifts[t - 1][0], origin[1] + spec.shifts[t - 1][1]];
        }
        let o = origin;
        frames.push(Tensor::from_fn(&[1, 3, h, w], |i| {
            let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
            F::lit(tex.at(c, x as f64 + o[0], y as f64 + o[1]))
        }));
    }
    let flows: Vec<Tensor<F>> = spec.shifts.iter().map(|s| constant_flow(1, h, w, s[0], s[1])).collect();
    let gt_flow = if flows.is_empty() { Tensor::zeros(&[0, 2, h, w]) } else { Tensor::stack_outer(&flows)? };
    Ok(VideoSequence {
        frames: Tensor::stack_outer(&frames)?,
        gt_flow: Some(gt_flow),
        meta: SequenceMeta { scene_id: format!("{:?}-{}", spec.kind, spec.texture_seed), seed: spec.texture_seed },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationParams {
    pub blur_sigma: f64,
    pub down_factor: usize,
    pub noise_sigma: f64,
    /// 1..=100; 100 disables quantization.
    pub compression_q: u32,
    pub seed: u64,
}

impl DegradationParams {
    pub fn identity() -> Self {
        DegradationParams { blur_sigma: 0.0, down_factor: 1, noise_sigma: 0.0, compression_q: 100, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.blur_sigma >= 0.0 && self.noise_sigma >= 0.0) || self.down_factor == 0 {
            return Err(Error::Config(format!("invalid degradation {self:?}")));
        }
        if !(1..=100).contains(&self.compression_q) {
            return Err(Error::Config(format!("compression_q {} outside 1..=100", self.compression_q)));
        }
        Ok(())
    }
}

/// Ranges from which each sequence draws its degradation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationRanges {
    pub blur_sigma: [f64; 2],
    /// Candidate downsampling factors.
    pub down_factors: Vec<usize>,
    pub noise_sigma: [f64; 2],
    pub compression_q: [u32; 2],
}

impl Default for DegradationRanges {
    fn default() -> Self {
        DegradationRanges {
            blur_sigma: [0.0, 0.6],
            down_factors: vec![1],
            noise_sigma: [0.06, 0.1],
            compression_q: [85, 100],
        }
    }
}

impl DegradationRanges {
    pub fn sample(&self, rng: &mut impl Rng) -> DegradationParams {
        fn uniform(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
            if r[1] > r[0] {
                rng.random_range(r[0]..=r[1])
            } else {
                r[0]
            }
        }
        let blur_sigma = uniform(rng, self.blur_sigma);
        let down_factor = match self.down_factors.len() {
            0 => 1,
            n => self.down_factors[rng.random_range(0..n)],
        };
        let noise_sigma = uniform(rng, self.noise_sigma);
        let [q0, q1] = self.compression_q;
        let compression_q = if q1 > q0 { rng.random_range(q0..=q1) } else { q0 };
        DegradationParams { blur_sigma, down_factor, noise_sigma, compression_q, seed: rng.random() }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur of each `h × w` plane with replicated borders.
pub fn gaussian_blur(planes: &mut [f64], h: usize, w: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for plane in planes.chunks_mut(h * w) {
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| kv * plane[y * w + (x as isize + j as isize - r).clamp(0, w as isize - 1) as usize])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| kv * tmp[(y as isize + j as isize - r).clamp(0, h as isize - 1) as usize * w + x])
                    .sum();
            }
        }
    }
}

fn box_down(planes: &[f64], h: usize, w: usize, f: usize) -> Vec<f64> {
    let (ho, wo) = (h / f, w / f);
    let mut out = Vec::with_capacity(planes.len() / (f * f));
    for plane in planes.chunks(h * w) {
        for y in 0..ho {
            for x in 0..wo {
                let mut s = 0.0;
                for dy in 0..f {
                    for dx in 0..f {
                        s += plane[(y * f + dy) * w + x * f + dx];
                    }
                }
                out.push(s / (f * f) as f64);
            }
        }
    }
    out
}

fn bilinear_up(planes: &[f64], h: usize, w: usize, f: usize) -> Vec<f64> {
    let (ho, wo) = (h * f, w * f);
    let coord = |o: usize, n: usize| {
        let s = ((o as f64 + 0.5) / f as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(n - 1), s - i0 as f64)
    };
    let mut out = Vec::with_capacity(planes.len() * f * f);
    for plane in planes.chunks(h * w) {
        for y in 0..ho {
            let (y0, y1, ty) = coord(y, h);
            for x in 0..wo {
                let (x0, x1, tx) = coord(x, w);
                let top = plane[y0 * w + x0] * (1.0 - tx) + plane[y0 * w + x1] * tx;
                let bot = plane[y1 * w + x0] * (1.0 - tx) + plane[y1 * w + x1] * tx;
                out.push(top * (1.0 - ty) + bot * ty);
            }
        }
    }
    out
}

fn dct_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for k in 0..n {
        let a = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for i in 0..n {
            m[k * n + i] = a * (std::f64::consts::PI * (i as f64 + 0.5) * k as f64 / n as f64).cos();
        }
    }
    m
}

/// Uniform quantization of orthonormal 8×8 block-DCT coefficients with
/// step `(100 − q) / 400`. Edge blocks use the remaining size.
pub fn block_dct_quantize(planes: &mut [f64], h: usize, w: usize, q: u32) {
    if q >= 100 {
        return;
    }
    let step = (100 - q) as f64 / 400.0;
    for plane in planes.chunks_mut(h * w) {
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                let (bh, bw) = ((h - by).min(8), (w - bx).min(8));
                let (mh, mw) = (dct_matrix(bh), dct_matrix(bw));
                let block: Vec<f64> = (0..bh * bw).map(|i| plane[(by + i / bw) * w + bx + i % bw]).collect();
                // C = Mh · X · Mwᵀ
                let mut tmp = vec![0.0; bh * bw];
                for k in 0..bh {
                    for j in 0..bw {
                        tmp[k * bw + j] = (0..bh).map(|i| mh[k * bh + i] * block[i * bw + j]).sum();
                    }
                }
                let mut coef = vec![0.0; bh * bw];
                for k in 0..bh {
                    for l in 0..bw {
                        let c: f64 = (0..bw).map(|j| tmp[k * bw + j] * mw[l * bw + j]).sum();
                        coef[k * bw + l] = (c / step).round() * step;
                    }
                }
                // X = Mhᵀ · C · Mw
                for i in 0..bh {
                    for l in 0..bw {
                        tmp[i * bw + l] = (0..bh).map(|k| mh[k * bh + i] * coef[k * bw + l]).sum();
                    }
                }
                for i in 0..bh {
                    for j in 0..bw {
                        plane[(by + i) * w + bx + j] = (0..bw).map(|l| tmp[i * bw + l] * mw[l * bw + j]).sum();
                    }
                }
            }
        }
    }
}

/// Applies one parameter set to every frame: blur, box-downsample, add
/// Gaussian noise (fresh draws per frame from one stream seeded by
/// `params.seed`), block-DCT quantize, bilinear upsample, clamp to [0, 1].
pub fn degrade<F: Real>(seq: &VideoSequence<F>, params: &DegradationParams) -> Result<VideoSequence<F>> {
    params.validate()?;
    let (t, c, h, w) = seq.frames.dims4()?;
    let f = params.down_factor;
    if h % f != 0 || w % f != 0 {
        return shape_err(format!("frames {h}×{w} not divisible by down factor {f}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let noise = Normal::new(0.0, params.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut out = Vec::with_capacity(seq.frames.numel());
    for i in 0..t {
        let frame = seq.frames.slice_outer(i)?;
        let mut planes: Vec<f64> = frame.data().iter().map(|v| v.as_f64()).collect();
        gaussian_blur(&mut planes, h, w, params.blur_sigma);
        let (mut lh, mut lw) = (h, w);
        if f > 1 {
            planes = box_down(&planes, h, w, f);
            lh /= f;
            lw /= f;
        }
        if params.noise_sigma > 0.0 {
            for v in planes.iter_mut() {
                *v += noise.sample(&mut rng);
            }
        }
        block_dct_quantize(&mut planes, lh, lw, params.compression_q);
        if f > 1 {
            planes = bilinear_up(&planes, lh, lw, f);
        }
        debug_assert_eq!(planes.len(), c * h * w);
        out.extend(planes.into_iter().map(|v| F::lit(v.clamp(0.0, 1.0))));
    }
    Ok(VideoSequence {
        frames: Tensor::new(vec![t, c, h, w], out)?,
        gt_flow: seq.gt_flow.clone(),
        meta: seq.meta.clone(),
    })
}

/// Scene and degradation settings for dataset construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub length: usize,
    /// Largest per-frame |dx|, |dy| (integer pixels).
    pub max_shift: i32,
    pub degradation: DegradationRanges,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { height: 32, width: 32, length: 8, max_shift: 3, degradation: DegradationRanges::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetItem<F> {
    pub id: String,
    pub scene: SceneSpec,
    pub params: DegradationParams,
    pub gt: VideoSequence<F>,
    pub lq: VideoSequence<F>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub id: String,
    pub scene: SceneSpec,
    pub params: DegradationParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: Stage,
    pub master_seed: u64,
    pub config: DataConfig,
    pub items: Vec<ManifestItem>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<F> {
    pub stage: Stage,
    pub master_seed: u64,
    pub config: DataConfig,
    pub items: Vec<DatasetItem<F>>,
}

fn stage_salt(stage: Stage) -> u64 {
    match stage {
        Stage::Consistency => 0x636f_6e73,
        Stage::Enhancement => 0x656e_6861,
    }
}

/// Builds `n` items. Consistency scenes move by a fresh random shift every
/// frame; enhancement scenes are richer stills translated by one constant
/// shift.
pub fn make_dataset<F: Real>(n: usize, stage: Stage, master_seed: u64, cfg: &DataConfig) -> Result<Dataset<F>> {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed ^ stage_salt(stage));
    let m = cfg.max_shift;
    let mut items = Vec::with_capacity(n);
    for idx in 0..n {
        let texture_seed: u64 = rng.random();
        let shift = |rng: &mut ChaCha8Rng| [rng.random_range(-m..=m) as f64, rng.random_range(-m..=m) as f64];
        let (kind, shifts, components, max_freq) = match stage {
            Stage::Consistency => {
                let s = (1..cfg.length).map(|_| shift(&mut rng)).collect();
                (SceneKind::TranslatingTexture, s, 4, 0.15)
            }
            Stage::Enhancement => {
                let s = shift(&mut rng);
                (SceneKind::TranslatingStill, vec![s; cfg.length.saturating_sub(1)], 8, 0.3)
            }
        };
        let scene = SceneSpec {
            kind,
            height: cfg.height,
            width: cfg.width,
            length: cfg.length,
            shifts,
            texture_seed,
            components,
            max_freq,
            max_shift: m as f64,
        };
        let params = cfg.degradation.sample(&mut rng);
        let gt = synth_sequence(&scene)?;
        let lq = degrade(&gt, &params)?;
        items.push(DatasetItem { id: format!("{}_{idx:03}", stage.name()), scene, params, gt, lq });
    }
    Ok(Dataset { stage, master_seed, config: cfg.clone(), items })
}

impl<F: Real> Dataset<F> {
    pub fn manifest(&self) -> Manifest {
        Manifest {
            stage: self.stage,
            master_seed: self.master_seed,
            config: self.config.clone(),
            items: self
                .items
                .iter()
                .map(|it| ManifestItem { id: it.id.clone(), scene: it.scene.clone(), params: it.params.clone() })
                .collect(),
        }
    }

    /// Writes `manifest.json` and, per item, `gt.dlt`, `lq.dlt`, `flow.dlt`
    /// and PNG frames under `gt/` and `lq/`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for it in &self.items {
            let d = dir.join(&it.id);
            fs::create_dir_all(&d)?;
            it.gt.frames.save(&d.join("gt.dlt"))?;
            it.lq.frames.save(&d.join("lq.dlt"))?;
            if let Some(f) = &it.gt.gt_flow {
                f.save(&d.join("flow.dlt"))?;
            }
            write_frames_png(&d.join("gt"), &it.gt.frames)?;
            write_frames_png(&d.join("lq"), &it.lq.frames)?;
        }
        let json = serde_json::to_string_pretty(&self.manifest())?;
        fs::write(dir.join("manifest.json"), json)?;
        Ok(())
    }

    /// Reads a dataset written by [`Dataset::save`] from its DLT1 tensors.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let mut items = Vec::with_capacity(manifest.items.len());
        for m in manifest.items {
            let d = dir.join(&m.id);
            let meta = SequenceMeta { scene_id: m.id.clone(), seed: m.scene.texture_seed };
            let flow_path = d.join("flow.dlt");
            let gt_flow = if flow_path.exists() { Some(Tensor::load(&flow_path)?) } else { None };
            let gt = VideoSequence { frames: Tensor::load(&d.join("gt.dlt"))?, gt_flow: gt_flow.clone(), meta: meta.clone() };
            let lq = VideoSequence { frames: Tensor::load(&d.join("lq.dlt"))?, gt_flow, meta };
            gt.validate()?;
            lq.validate()?;
            items.push(DatasetItem { id: m.id, scene: m.scene, params: m.params, gt, lq });
        }
        Ok(Dataset { stage: manifest.stage, master_seed: manifest.master_seed, config: manifest.config, items })
    }
}

/// Writes one `(1, 3, H, W)` image as 8-bit RGB PNG.
pub fn write_image_png<F: Real>(path: &Path, image: &Tensor<F>) -> Result<()> {
    let (n, c, h, w) = image.dims4()?;
    if n != 1 || c != 3 {
        return shape_err(format!("PNG images need shape (1, 3, H, W), got {:?}", image.shape()));
    }
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| {
            let v = image.data()[(ch * h + y as usize) * w + x as usize].as_f64();
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    });
    img.save(path)?;
    Ok(())
}

/// Writes frames `(T, 3, H, W)` as `frame_000.png`, ... (8-bit RGB).
pub fn write_frames_png<F: Real>(dir: &Path, frames: &Tensor<F>) -> Result<()> {
    let (t, c, _, _) = frames.dims4()?;
    if c != 3 {
        return shape_err(format!("PNG frames need 3 channels, got {c}"));
    }
    fs::create_dir_all(dir)?;
    for i in 0..t {
        write_image_png(&dir.join(format!("frame_{i:03}.png")), &frames.slice_outer(i)?)?;
    }
    Ok(())
}

/// Reads every `*.png` in `dir`, in file-name order, as `(T, 3, H, W)`.
pub fn read_frames_png<F: Real>(dir: &Path) -> Result<Tensor<F>> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Input(format!("no PNG frames in {}", dir.display())));
    }
    let mut frames = Vec::with_capacity(paths.len());
    for p in &paths {
        let img = image::open(p)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        frames.push(Tensor::from_fn(&[1, 3, h, w], |i| {
            let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
            F::lit(img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0)
        }));
    }
    if frames.iter().any(|f| f.shape() != frames[0].shape()) {
        return Err(Error::Input(format!("frames in {} differ in size", dir.display())));
    }
    Tensor::stack_outer(&frames)
}
