//! Restoration quality and temporal consistency metrics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::flow::{estimate_flow, interior_mean_abs_diff, warp, FlowConfig};
use crate::tensor::{Real, Tensor};

pub const PSNR_CAP: f64 = 99.0;
/// Pixels excluded on every side when measuring warping error.
pub const WARP_BORDER: usize = 3;

fn same_shape<F: Real>(a: &Tensor<F>, b: &Tensor<F>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(format!("{what}: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

/// `10·log10(1 / MSE)` for values in [0, 1], capped at [`PSNR_CAP`].
pub fn psnr<F: Real>(pred: &Tensor<F>, gt: &Tensor<F>) -> Result<f64> {
    same_shape(pred, gt, "psnr")?;
    if pred.numel() == 0 {
        return Err(Error::Input("psnr of empty tensors".into()));
    }
    let se: f64 = pred.data().iter().zip(gt.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
    let mse = se / pred.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Luma planes `(N, H, W)` of an RGB stack `(N, 3, H, W)`.
fn luma<F: Real>(x: &Tensor<F>) -> Result<(usize, usize, usize, Vec<f64>)> {
    let (n, c, h, w) = x.dims4()?;
    if c != 3 {
        return shape_err(format!("expected RGB frames, got {c} channels"));
    }
    let hw = h * w;
    let mut out = vec![0.0; n * hw];
    for i in 0..n {
        let base = i * 3 * hw;
        for p in 0..hw {
            let d = x.data();
            out[i * hw + p] =
                0.299 * d[base + p].as_f64() + 0.587 * d[base + hw + p].as_f64() + 0.114 * d[base + 2 * hw + p].as_f64();
        }
    }
    Ok((n, h, w, out))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean structural similarity on luma over all valid 11×11 Gaussian
/// windows (σ = 1.5) of every frame.
pub fn ssim<F: Real>(pred: &Tensor<F>, gt: &Tensor<F>) -> Result<f64> {
    same_shape(pred, gt, "ssim")?;
    let (n, h, w, a) = luma(pred)?;
    let (_, _, _, b) = luma(gt)?;
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return Err(Error::Config(format!("ssim needs frames of at least {k}×{k}, got {h}×{w}")));
    }
    let g = gaussian_window(k, SSIM_SIGMA);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut total = 0.0;
    for i in 0..n {
        let (pa, pb) = (&a[i * h * w..(i + 1) * h * w], &b[i * h * w..(i + 1) * h * w]);
        for y in 0..oh {
            for x in 0..ow {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..k {
                    for dx in 0..k {
                        let wt = g[dy] * g[dx];
                        let idx = (y + dy) * w + x + dx;
                        let (va, vb) = (pa[idx], pb[idx]);
                        ma += wt * va;
                        mb += wt * vb;
                        saa += wt * (va * va);
                        sbb += wt * (vb * vb);
                        sab += wt * (va * vb);
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
    }
    Ok(total / (n * oh * ow) as f64)
}

/// Where the flow between consecutive frames comes from.
#[derive(Clone, Copy, Debug)]
pub enum FlowSource<'a, F> {
    /// Known flows `(T−1, 2, H, W)` with `warp(I_t, flow_t) ≈ I_{t+1}`.
    Given(&'a Tensor<F>),
    /// Estimated between consecutive frames of this sequence (the evaluated
    /// frames themselves, or a reference).
    Estimated(&'a Tensor<F>, FlowConfig),
}

/// `mean_t mean|I_{t+1} − warp(I_t, flow_t)|` over the interior, excluding
/// a [`WARP_BORDER`]-pixel border.
pub fn warping_error<F: Real>(frames: &Tensor<F>, source: FlowSource<'_, F>) -> Result<f64> {
    let (t, _, h, w) = frames.dims4()?;
    if t < 2 {
        return Err(Error::Input(format!("warping error needs at least 2 frames, got {t}")));
    }
    let flows: Vec<Tensor<F>> = match source {
        FlowSource::Given(f) => {
            if f.shape() != [t - 1, 2, h, w] {
                return shape_err(format!("flows {:?} for {t} frames of {h}×{w}", f.shape()));
            }
            (0..t - 1).map(|i| f.slice_outer(i)).collect::<Result<_>>()?
        }
        FlowSource::Estimated(reference, cfg) => {
            same_shape(frames, reference, "warping_error reference")?;
            (0..t - 1)
                .map(|i| estimate_flow(&reference.slice_outer(i)?, &reference.slice_outer(i + 1)?, &cfg))
                .collect::<Result<_>>()?
        }
    };
    let mut total = 0.0;
    for (i, flow) in flows.iter().enumerate() {
        let warped = warp(&frames.slice_outer(i)?, flow)?;
        total += interior_mean_abs_diff(&frames.slice_outer(i + 1)?, &warped, WARP_BORDER)?;
    }
    Ok(total / (t - 1) as f64)
}

/// Mean absolute 3×3 Laplacian response (replicated borders) over all
/// channels, averaged over frames.
pub fn sharpness<F: Real>(frames: &Tensor<F>) -> Result<f64> {
    let (t, c, h, w) = frames.dims4()?;
    if t == 0 || h == 0 || w == 0 {
        return Err(Error::Input("sharpness of an empty stack".into()));
    }
    let d = frames.data();
    let mut total = 0.0;
    for plane in 0..t * c {
        let p = &d[plane * h * w..(plane + 1) * h * w];
        let at = |y: isize, x: isize| {
            let y = y.clamp(0, h as isize - 1) as usize;
            let x = x.clamp(0, w as isize - 1) as usize;
            p[y * w + x].as_f64()
        };
        for y in 0..h as isize {
            for x in 0..w as isize {
                let lap = at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1) - 4.0 * at(y, x);
                total += lap.abs();
            }
        }
    }
    Ok(total / (t * c * h * w) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileAxis {
    Row,
    Column,
}

/// One pixel line from every frame stacked into an image: `(1, 3, T, W)`
/// for a row, `(1, 3, H, T)` for a column.
pub fn temporal_profile<F: Real>(frames: &Tensor<F>, axis: ProfileAxis, index: usize) -> Result<Tensor<F>> {
    let (t, c, h, w) = frames.dims4()?;
    let limit = match axis {
        ProfileAxis::Row => h,
        ProfileAxis::Column => w,
    };
    if index >= limit {
        return Err(Error::Input(format!("profile index {index} out of range 0..{limit}")));
    }
    let d = frames.data();
    let px = |f: usize, ch: usize, y: usize, x: usize| d[((f * c + ch) * h + y) * w + x];
    Ok(match axis {
        ProfileAxis::Row => Tensor::from_fn(&[1, c, t, w], |i| {
            let (ch, f, x) = (i / (t * w), (i / w) % t, i % w);
            px(f, ch, index, x)
        }),
        ProfileAxis::Column => Tensor::from_fn(&[1, c, h, t], |i| {
            let (ch, y, f) = (i / (h * t), (i / t) % h, i % t);
            px(f, ch, y, index)
        }),
    })
}

/// Metrics of one sequence; full-reference values are absent without GT.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub id: String,
    pub frames: usize,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub e_warp: f64,
    pub sharpness: f64,
}

/// Evaluates `pred` frames. With a reference, warping error uses its
/// known flow when available and flow estimated from the reference
/// otherwise; without one, flow estimated from the prediction.
pub fn evaluate_sequence<F: Real>(
    id: &str,
    pred: &Tensor<F>,
    gt: Option<(&Tensor<F>, Option<&Tensor<F>>)>,
    flow: &FlowConfig,
) -> Result<SequenceMetrics> {
    let (t, ..) = pred.dims4()?;
    let (psnr_v, ssim_v, e_warp) = match gt {
        Some((g, g_flow)) => {
            if g.shape() != pred.shape() {
                return Err(Error::Input(format!(
                    "{id}: prediction {:?} and reference {:?} differ",
                    pred.shape(),
                    g.shape()
                )));
            }
            let src = match g_flow {
                Some(f) => FlowSource::Given(f),
                None => FlowSource::Estimated(g, *flow),
            };
            (Some(psnr(pred, g)?), Some(ssim(pred, g)?), warping_error(pred, src)?)
        }
        None => (None, None, warping_error(pred, FlowSource::Estimated(pred, *flow))?),
    };
    Ok(SequenceMetrics { id: id.to_string(), frames: t, psnr: psnr_v, ssim: ssim_v, e_warp, sharpness: sharpness(pred)? })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sequences: Vec<SequenceMetrics>,
    /// Means over sequences.
    pub aggregate: SequenceMetrics,
    pub count: usize,
    pub config: serde_json::Value,
}

fn mean_opt(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = v.collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

impl MetricReport {
    pub fn new(sequences: Vec<SequenceMetrics>, config: serde_json::Value) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Input("no sequences to report".into()));
        }
        let n = sequences.len() as f64;
        let aggregate = SequenceMetrics {
            id: "mean".into(),
            frames: sequences.iter().map(|s| s.frames).sum(),
            psnr: mean_opt(sequences.iter().map(|s| s.psnr)),
            ssim: mean_opt(sequences.iter().map(|s| s.ssim)),
            e_warp: sequences.iter().map(|s| s.e_warp).sum::<f64>() / n,
            sharpness: sequences.iter().map(|s| s.sharpness).sum::<f64>() / n,
        };
        Ok(MetricReport { count: sequences.len(), sequences, aggregate, config })
    }

    fn full_reference(&self) -> bool {
        self.aggregate.psnr.is_some()
    }

    /// One row per sequence plus a final `mean` row. Full-reference columns
    /// appear only when every sequence had a reference.
    pub fn to_csv(&self) -> String {
        let fr = self.full_reference();
        let mut out = String::from(if fr { "id,frames,psnr,ssim,e_warp,sharpness\n" } else { "id,frames,e_warp,sharpness\n" });
        for s in self.sequences.iter().chain(std::iter::once(&self.aggregate)) {
            if fr {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    s.id,
                    s.frames,
                    s.psnr.unwrap_or(f64::NAN),
                    s.ssim.unwrap_or(f64::NAN),
                    s.e_warp,
                    s.sharpness
                );
            } else {
                let _ = writeln!(out, "{},{},{},{}", s.id, s.frames, s.e_warp, s.sharpness);
            }
        }
        out
    }

    /// Writes `metrics.csv` and `metrics.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.csv"), self.to_csv())?;
        fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gaussian_blur;
    use crate::flow::constant_flow;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random(seed: u64, shape: &[usize]) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn psnr_closed_forms() {
        let a = Tensor::<f64>::full(&[1, 3, 8, 8], 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        let b = a.map(|x| x + 0.1);
        assert!((psnr(&b, &a).unwrap() - 20.0).abs() < 1e-6);
        let c = a.map(|x| x + 0.01);
        assert!((psnr(&c, &a).unwrap() - 40.0).abs() < 1e-6);
        assert!(psnr(&a, &Tensor::zeros(&[1, 3, 8, 7])).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let gt = random(1, &[2, 3, 16, 16]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let unit: Vec<f64> = (0..gt.numel()).map(|_| Normal::new(0.0, 1.0).unwrap().sample(&mut rng)).collect();
        let vals: Vec<f64> = [0.01, 0.05, 0.1]
            .iter()
            .map(|s| {
                let noisy = Tensor::from_fn(gt.shape(), |i| gt.data()[i] + s * unit[i]);
                psnr(&noisy, &gt).unwrap()
            })
            .collect();
        assert!(vals[0] > vals[1] && vals[1] > vals[2], "{vals:?}");
    }

    fn checkerboard(size: usize, cell: usize) -> Tensor<f64> {
        Tensor::from_fn(&[1, 3, size, size], |i| {
            let (y, x) = ((i / size) % size, i % size);
            ((y / cell + x / cell) % 2) as f64
        })
    }

    /// Direct evaluation with an explicit 2D window and per-window loops.
    fn ssim_reference(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
        let k = 11;
        let c = 5.0;
        let mut win = vec![0.0; k * k];
        for y in 0..k {
            for x in 0..k {
                win[y * k + x] = (-((y as f64 - c).powi(2) + (x as f64 - c).powi(2)) / 4.5).exp();
            }
        }
        let s: f64 = win.iter().sum();
        win.iter_mut().for_each(|v| *v /= s);
        let mut acc = Vec::new();
        for y in 0..=h - k {
            for x in 0..=w - k {
                let pick = |img: &[f64]| -> Vec<f64> { (0..k * k).map(|j| img[(y + j / k) * w + x + j % k]).collect() };
                let (pa, pb) = (pick(a), pick(b));
                let wmean = |v: &[f64]| v.iter().zip(&win).map(|(p, q)| p * q).sum::<f64>();
                let (ma, mb) = (wmean(&pa), wmean(&pb));
                let da: Vec<f64> = pa.iter().map(|v| v - ma).collect();
                let db: Vec<f64> = pb.iter().map(|v| v - mb).collect();
                let cov = da.iter().zip(&db).zip(&win).map(|((p, q), r)| p * q * r).sum::<f64>();
                let va = da.iter().zip(&win).map(|(p, r)| p * p * r).sum::<f64>();
                let vb = db.iter().zip(&win).map(|(p, r)| p * p * r).sum::<f64>();
                let (c1, c2) = (1e-4, 9e-4);
                acc.push((2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)));
            }
        }
        acc.iter().sum::<f64>() / acc.len() as f64
    }

    #[test]
    fn ssim_examples() {
        let x = random(3, &[2, 3, 16, 16]);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let y = random(4, &[2, 3, 16, 16]);
        assert_eq!(ssim(&x, &y).unwrap(), ssim(&y, &x).unwrap());
        let board = checkerboard(16, 2);
        let inv = board.map(|v| 1.0 - v);
        let v = ssim(&inv, &board).unwrap();
        assert!(v < 0.1, "{v}");
        assert!(ssim(&Tensor::<f64>::zeros(&[1, 3, 10, 16]), &Tensor::zeros(&[1, 3, 10, 16])).is_err());
    }

    #[test]
    fn ssim_matches_direct_evaluation() {
        let a = random(5, &[1, 3, 14, 13]);
        let b = a.map(|v| (0.7 * v + 0.1).min(1.0));
        let luma_of = |t: &Tensor<f64>| luma(t).unwrap().3;
        let want = ssim_reference(&luma_of(&a), &luma_of(&b), 14, 13);
        assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn warping_error_examples() {
        let static_seq = Tensor::stack_outer(&vec![random(6, &[1, 3, 12, 12]); 3]).unwrap();
        let zero = Tensor::zeros(&[2, 2, 12, 12]);
        assert_eq!(warping_error(&static_seq, FlowSource::Given(&zero)).unwrap(), 0.0);

        let z = Tensor::<f64>::zeros(&[1, 3, 12, 12]);
        let o = Tensor::full(&[1, 3, 12, 12], 1.0);
        let zoz = Tensor::stack_outer(&[z.clone(), o, z]).unwrap();
        assert_eq!(warping_error(&zoz, FlowSource::Given(&zero)).unwrap(), 1.0);
        assert!(warping_error(&zoz.slice_outer(0).unwrap(), FlowSource::Given(&zero)).is_err());
    }

    #[test]
    fn warping_error_with_exact_translation_flow() {
        let base = random(7, &[1, 3, 40, 40]);
        let (dx, dy) = (2isize, -1isize);
        let frames: Vec<Tensor<f64>> = (0..4isize)
            .map(|t| {
                Tensor::from_fn(&[1, 3, 24, 24], |i| {
                    let (c, y, x) = (i / 576, ((i / 24) % 24) as isize, (i % 24) as isize);
                    // frame t+1 at p equals frame t at p + (dx, dy)
                    base.data()[(c * 40 + (y + 8 + dy * t) as usize) * 40 + (x + 8 + dx * t) as usize]
                })
            })
            .collect();
        let seq = Tensor::stack_outer(&frames).unwrap();
        let flows = Tensor::stack_outer(&vec![constant_flow(1, 24, 24, dx as f64, dy as f64); 3]).unwrap();
        let e = warping_error(&seq, FlowSource::Given(&flows)).unwrap();
        assert!(e < 1e-6, "{e}");
        let est = warping_error(&seq, FlowSource::Estimated(&seq, FlowConfig::default())).unwrap();
        assert!(est < 0.05, "{est}");
    }

    #[test]
    fn sharpness_examples() {
        assert_eq!(sharpness(&Tensor::<f64>::full(&[2, 3, 8, 8], 0.4)).unwrap(), 0.0);
        let board = checkerboard(16, 2);
        let mut planes = board.data().to_vec();
        for p in planes.chunks_mut(256) {
            gaussian_blur(p, 16, 16, 1.0);
        }
        let blurred = Tensor::new(vec![1, 3, 16, 16], planes).unwrap();
        assert!(sharpness(&board).unwrap() > sharpness(&blurred).unwrap());
        let x = random(8, &[1, 3, 8, 8]);
        let doubled = x.map(|v| 2.0 * v);
        assert!((sharpness(&doubled).unwrap() - 2.0 * sharpness(&x).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn profile_examples() {
        let still = Tensor::stack_outer(&vec![random(9, &[1, 3, 6, 8]); 5]).unwrap();
        let p = temporal_profile(&still, ProfileAxis::Row, 2).unwrap();
        assert_eq!(p.shape(), &[1, 3, 5, 8]);
        for c in 0..3 {
            let row0 = &p.data()[c * 40..c * 40 + 8];
            for t in 1..5 {
                assert_eq!(&p.data()[c * 40 + t * 8..c * 40 + t * 8 + 8], row0);
            }
        }
        assert_eq!(temporal_profile(&still, ProfileAxis::Column, 7).unwrap().shape(), &[1, 3, 6, 5]);
        assert!(temporal_profile(&still, ProfileAxis::Row, 6).is_err());

        // a one-pixel bar moving right by one column per frame
        let bar: Vec<Tensor<f64>> = (0..4)
            .map(|t| Tensor::from_fn(&[1, 3, 4, 8], |i| if i % 8 == t + 1 { 1.0 } else { 0.0 }))
            .collect();
        let prof = temporal_profile(&Tensor::stack_outer(&bar).unwrap(), ProfileAxis::Row, 0).unwrap();
        for t in 0..4 {
            let row = &prof.data()[t * 8..t * 8 + 8];
            assert_eq!(row.iter().position(|&v| v == 1.0), Some(t + 1));
        }
    }

    #[test]
    fn report_formats() {
        let gt = random(10, &[3, 3, 12, 12]);
        let pred = gt.map(|v| (v + 0.05).min(1.0));
        let fc = FlowConfig::default();
        let full = evaluate_sequence("a", &pred, Some((&gt, None)), &fc).unwrap();
        let same = evaluate_sequence("b", &gt, Some((&gt, None)), &fc).unwrap();
        assert_eq!(same.psnr, Some(99.0));
        assert!((same.ssim.unwrap() - 1.0).abs() < 1e-12);
        let rep = MetricReport::new(vec![full.clone(), same], serde_json::json!({"k": 1})).unwrap();
        assert_eq!(rep.count, 2);
        let csv = rep.to_csv();
        assert!(csv.starts_with("id,frames,psnr,ssim,e_warp,sharpness\n"));
        assert_eq!(csv.lines().count(), 4);
        assert!((rep.aggregate.psnr.unwrap() - (full.psnr.unwrap() + 99.0) / 2.0).abs() < 1e-12);

        let nr = evaluate_sequence("c", &pred, None, &fc).unwrap();
        assert!(nr.psnr.is_none() && nr.ssim.is_none());
        let rep = MetricReport::new(vec![nr], serde_json::Value::Null).unwrap();
        assert!(rep.to_csv().starts_with("id,frames,e_warp,sharpness\n"));
        let dir = tempfile::tempdir().unwrap();
        rep.write(dir.path()).unwrap();
        let back: MetricReport =
            serde_json::from_str(&fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
        assert_eq!(back, rep);
        assert!(evaluate_sequence("d", &pred, Some((&gt.slice_outer(0).unwrap(), None)), &fc).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn metrics_are_pure(seed in 0u64..1000) {
            let a = random(seed, &[2, 3, 12, 12]);
            let b = random(seed + 1, &[2, 3, 12, 12]);
            prop_assert_eq!(psnr(&a, &b).unwrap().to_bits(), psnr(&a, &b).unwrap().to_bits());
            prop_assert_eq!(ssim(&a, &b).unwrap().to_bits(), ssim(&b, &a).unwrap().to_bits());
            let s = ssim(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
            let zero = Tensor::zeros(&[1, 2, 12, 12]);
            let same = Tensor::stack_outer(&[a.slice_outer(0).unwrap(), a.slice_outer(0).unwrap()]).unwrap();
            prop_assert_eq!(warping_error(&same, FlowSource::Given(&zero)).unwrap(), 0.0);
        }
    }
}
