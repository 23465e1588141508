//! Optical flow: differentiable backward warping and a correlation
//! soft-argmax estimator.
//!
//! Flow convention: channel 0 is the horizontal and channel 1 the vertical
//! displacement, in pixels of the field's own grid. Warping samples
//! `warp(src, flow)[p] = src[p + flow[p]]`, and `estimate_flow(a, b)` returns
//! the field for which `warp(a, flow) ≈ b`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    /// Search radius in pixels; the window is (2r+1)².
    pub radius: usize,
    /// Soft-argmax temperature applied to the negated patch cost.
    pub softmax_temp: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig { radius: 3, softmax_temp: 0.002 }
    }
}

fn check_flow_shape(src: &[usize], flow: &[usize]) -> Result<()> {
    match (src, flow) {
        ([n, _, h, w], [fn_, 2, fh, fw]) if n == fn_ && h == fh && w == fw => Ok(()),
        _ => shape_err(format!("flow {flow:?} does not match source {src:?}")),
    }
}

/// Absolute sampling grid (x, y) for an N×2×H×W field.
pub fn base_grid<F: Real>(n: usize, h: usize, w: usize) -> Tensor<F> {
    let plane = h * w;
    Tensor::from_fn(&[n, 2, h, w], |i| {
        let p = i % plane;
        let ch = (i / plane) % 2;
        if ch == 0 {
            F::lit((p % w) as f64)
        } else {
            F::lit((p / w) as f64)
        }
    })
}

/// Backward warp on a tape; differentiable w.r.t. both source and flow.
/// Samples outside the frame clamp to the border.
pub fn warp_var<F: Real>(g: &mut Graph<F>, source: Var, flow: Var) -> Result<Var> {
    check_flow_shape(g.shape(source), g.shape(flow))?;
    let (n, _, h, w) = g.value(flow).dims4()?;
    let grid = g.constant(base_grid(n, h, w));
    let coords = g.add(grid, flow)?;
    g.bilinear_sample(source, coords)
}

pub fn warp<F: Real>(source: &Tensor<F>, flow: &Tensor<F>) -> Result<Tensor<F>> {
    let mut g = Graph::new();
    let s = g.constant(source.clone());
    let f = g.constant(flow.clone());
    let out = warp_var(&mut g, s, f)?;
    Ok(g.value(out).clone())
}

fn displacements(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dx, dy))).collect()
}

/// Correlation soft-argmax flow from `a` to `b` on a tape.
///
/// For every pixel and every displacement `d` in the (2r+1)² window the
/// matching cost is the mean squared difference between the 3×3 patch of `b`
/// at `p` and the patch of `a` at `p + d` (borders clamp). The flow is the
/// expectation of `d` under `softmax(−cost / temp)`.
pub fn estimate_flow_var<F: Real>(g: &mut Graph<F>, a: Var, b: Var, cfg: &FlowConfig) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return shape_err(format!("estimate_flow: {:?} vs {:?}", g.shape(a), g.shape(b)));
    }
    if cfg.radius == 0 {
        return Err(crate::error::Error::Config("flow radius must be ≥ 1".into()));
    }
    let (n, c, h, w) = g.value(a).dims4()?;
    let disp = displacements(cfg.radius);
    let nd = disp.len();
    let plane = h * w;

    let mut shifted = Vec::with_capacity(n * nd * c * plane);
    let mut repeated = Vec::with_capacity(n * nd * c * plane);
    for b_i in 0..n {
        for &(dx, dy) in &disp {
            for ch in 0..c {
                let base = (b_i * c + ch) * plane;
                for y in 0..h {
                    let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    for x in 0..w {
                        let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        shifted.push(base + sy * w + sx);
                        repeated.push(base + y * w + x);
                    }
                }
            }
        }
    }
    let vol = [n * nd, c, h, w];
    let a_shift = g.gather(a, Arc::from(shifted), &vol)?;
    let b_rep = g.gather(b, Arc::from(repeated), &vol)?;
    let diff = g.sub(a_shift, b_rep)?;
    let sq = g.square(diff);
    let box_w = g.constant(Tensor::full(&[1, c, 3, 3], F::lit(1.0 / (9 * c) as f64)));
    let cost = g.conv2d(sq, box_w, None)?;
    let logits = g.scale(cost, -1.0 / cfg.softmax_temp);

    let mut to_rows = Vec::with_capacity(n * plane * nd);
    for b_i in 0..n {
        for p in 0..plane {
            for j in 0..nd {
                to_rows.push((b_i * nd + j) * plane + p);
            }
        }
    }
    let rows = g.gather(logits, Arc::from(to_rows), &[n * plane, nd])?;
    let probs = g.softmax(rows)?;
    let table: Vec<f64> = disp.iter().flat_map(|&(dx, dy)| [dx as f64, dy as f64]).collect();
    let table = g.constant(Tensor::from_f64(&[nd, 2], &table)?);
    let vec_rows = g.matmul(probs, table)?;

    let mut to_field = Vec::with_capacity(n * 2 * plane);
    for b_i in 0..n {
        for ch in 0..2 {
            for p in 0..plane {
                to_field.push((b_i * plane + p) * 2 + ch);
            }
        }
    }
    g.gather(vec_rows, Arc::from(to_field), &[n, 2, h, w])
}

pub fn estimate_flow<F: Real>(a: &Tensor<F>, b: &Tensor<F>, cfg: &FlowConfig) -> Result<Tensor<F>> {
    let mut g = Graph::new();
    let va = g.constant(a.clone());
    let vb = g.constant(b.clone());
    let out = estimate_flow_var(&mut g, va, vb, cfg)?;
    Ok(g.value(out).clone())
}

/// Average-pools a field by `factor` and divides the vectors by `factor`,
/// mapping pixel-grid flow onto a grid `factor` times coarser.
pub fn rescale_flow<F: Real>(flow: &Tensor<F>, factor: usize) -> Result<Tensor<F>> {
    let (n, two, h, w) = flow.dims4()?;
    if two != 2 || factor == 0 || h % factor != 0 || w % factor != 0 {
        return shape_err(format!("rescale_flow({factor}) on {:?}", flow.shape()));
    }
    let (ho, wo) = (h / factor, w / factor);
    let norm = F::lit((factor * factor * factor) as f64);
    let src = flow.data();
    let mut out = Vec::with_capacity(n * 2 * ho * wo);
    for plane in 0..n * 2 {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        for y in 0..ho {
            for x in 0..wo {
                let mut acc = F::zero();
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc = acc + s[(y * factor + dy) * w + x * factor + dx];
                    }
                }
                out.push(acc / norm);
            }
        }
    }
    Tensor::new(vec![n, 2, ho, wo], out)
}

/// A constant field of `(dx, dy)` with the given batch and grid.
pub fn constant_flow<F: Real>(n: usize, h: usize, w: usize, dx: f64, dy: f64) -> Tensor<F> {
    let plane = h * w;
    Tensor::from_fn(&[n, 2, h, w], |i| if (i / plane) % 2 == 0 { F::lit(dx) } else { F::lit(dy) })
}

/// Mean absolute difference between two fields over pixels at least
/// `border` away from the frame edge, per vector component.
pub fn interior_mean_abs_diff<F: Real>(a: &Tensor<F>, b: &Tensor<F>, border: usize) -> Result<f64> {
    let (n, c, h, w) = a.dims4()?;
    if a.shape() != b.shape() {
        return shape_err("interior_mean_abs_diff on different shapes");
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for plane in 0..n * c {
        for y in border..h.saturating_sub(border) {
            for x in border..w.saturating_sub(border) {
                let i = plane * h * w + y * w + x;
                acc += (a.data()[i].as_f64() - b.data()[i].as_f64()).abs();
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { acc / count as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{grad_check, GradCheckOptions};
    use rand::{Rng, SeedableRng};

    fn noise_image(seed: u64, c: usize, h: usize, w: usize) -> Tensor<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[1, c, h, w], |_| rng.random_range(0.0..1.0))
    }

    /// `out[y][x] = img[y + dy][x + dx]`, clamped.
    fn shift(img: &Tensor<f64>, dx: isize, dy: isize) -> Tensor<f64> {
        let (_, c, h, w) = img.dims4().unwrap();
        Tensor::from_fn(&[1, c, h, w], |i| {
            let ch = i / (h * w);
            let y = ((i / w) % h) as isize;
            let x = (i % w) as isize;
            let sy = (y + dy).clamp(0, h as isize - 1) as usize;
            let sx = (x + dx).clamp(0, w as isize - 1) as usize;
            img.data()[(ch * h + sy) * w + sx]
        })
    }

    #[test]
    fn zero_flow_is_identity() {
        let src = noise_image(1, 3, 6, 7);
        let out = warp(&src, &Tensor::zeros(&[1, 2, 6, 7])).unwrap();
        assert_eq!(out, src);
    }

    #[test]
    fn integer_translation_is_recovered() {
        // 8×8 ramp, translated by (2, 1): t[y][x] = ramp[y − 1][x − 2].
        let ramp = Tensor::<f64>::from_fn(&[1, 1, 8, 8], |i| i as f64);
        let translated = shift(&ramp, -2, -1);
        let out = warp(&translated, &constant_flow(1, 8, 8, 2.0, 1.0)).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                assert_eq!(out.data()[y * 8 + x], ramp.data()[y * 8 + x]);
            }
        }
    }

    #[test]
    fn warp_rejects_mismatched_flow() {
        let src = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        assert!(warp(&src, &Tensor::zeros(&[1, 2, 4, 5])).is_err());
    }

    #[test]
    fn warp_gradient_wrt_flow() {
        let src = noise_image(2, 2, 5, 5);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let flow = Tensor::from_fn(&[1, 2, 5, 5], |_| rng.random_range(0.1..0.9));
        let rep = grad_check(
            |g, v| {
                let w = warp_var(g, v[0], v[1])?;
                let sq = g.square(w);
                Ok(g.sum(sq))
            },
            &[src, flow],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.passed(1e-4), "{rep:?}");
    }

    /// Brute-force integer displacement minimising the patch SSD at each pixel.
    fn brute_force_flow(a: &Tensor<f64>, b: &Tensor<f64>, r: isize) -> Tensor<f64> {
        let (_, c, h, w) = a.dims4().unwrap();
        let at = |t: &Tensor<f64>, ch: usize, y: isize, x: isize| {
            let y = y.clamp(0, h as isize - 1) as usize;
            let x = x.clamp(0, w as isize - 1) as usize;
            t.data()[(ch * h + y) * w + x]
        };
        let mut out = Tensor::zeros(&[1, 2, h, w]);
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut best = (f64::INFINITY, 0, 0);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let mut ssd = 0.0;
                        for ch in 0..c {
                            for py in -1..=1 {
                                for px in -1..=1 {
                                    let d = at(a, ch, y + py + dy, x + px + dx) - at(b, ch, y + py, x + px);
                                    ssd += d * d;
                                }
                            }
                        }
                        if ssd < best.0 {
                            best = (ssd, dx, dy);
                        }
                    }
                }
                let p = y as usize * w + x as usize;
                out.data_mut()[p] = best.1 as f64;
                out.data_mut()[h * w + p] = best.2 as f64;
            }
        }
        out
    }

    #[test]
    fn identical_frames_give_near_zero_flow() {
        let a = noise_image(4, 3, 16, 16);
        let f = estimate_flow(&a, &a, &FlowConfig::default()).unwrap();
        let mean = f.data().iter().map(|v| v.abs()).sum::<f64>() / f.numel() as f64;
        assert!(mean < 0.05, "{mean}");
    }

    #[test]
    fn constant_images_give_zero_flow() {
        let a = Tensor::<f64>::full(&[1, 3, 8, 8], 0.4);
        let f = estimate_flow(&a, &a, &FlowConfig::default()).unwrap();
        assert!(f.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn recovers_translations_like_brute_force() {
        let a = noise_image(5, 3, 32, 32);
        for &(dx, dy) in &[(1isize, 0isize), (3, -2), (-3, 3)] {
            // b[p] = a[p + d]  ⇒  flow(a → b) = d.
            let b = shift(&a, dx, dy);
            let est = estimate_flow(&a, &b, &FlowConfig::default()).unwrap();
            let oracle = brute_force_flow(&a, &b, 3);
            let truth = constant_flow(1, 32, 32, dx as f64, dy as f64);
            assert_eq!(interior_mean_abs_diff(&oracle, &truth, 4).unwrap(), 0.0);
            let err = interior_mean_abs_diff(&est, &truth, 4).unwrap();
            assert!(err < 0.5, "shift ({dx},{dy}) error {err}");
        }
    }

    #[test]
    fn antisymmetric_on_translations() {
        let a = noise_image(6, 3, 32, 32);
        let b = shift(&a, 2, -1);
        let ab = estimate_flow(&a, &b, &FlowConfig::default()).unwrap();
        let ba = estimate_flow(&b, &a, &FlowConfig::default()).unwrap();
        let neg = ba.map(|v| -v);
        assert!(interior_mean_abs_diff(&ab, &neg, 4).unwrap() < 0.5);
    }

    #[test]
    fn estimator_gradient() {
        let a = noise_image(7, 1, 6, 6);
        let b = shift(&a, 1, 0);
        let cfg = FlowConfig { radius: 1, softmax_temp: 0.1 };
        let rep = grad_check(
            |g, v| {
                let f = estimate_flow_var(g, v[0], v[1], &cfg)?;
                let sq = g.square(f);
                Ok(g.sum(sq))
            },
            &[a, b],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.passed(1e-4), "{rep:?}");
    }

    #[test]
    fn rescale_examples() {
        let c = constant_flow::<f64>(1, 4, 4, 2.0, 2.0);
        let r = rescale_flow(&c, 2).unwrap();
        assert_eq!(r.shape(), &[1, 2, 2, 2]);
        assert!(r.data().iter().all(|&v| v == 1.0));
        let z = rescale_flow(&Tensor::<f64>::zeros(&[1, 2, 4, 4]), 2).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        // checkerboard {0, 2}: pooled to 1, divided to 0.5
        let cb = Tensor::<f64>::from_fn(&[1, 2, 4, 4], |i| {
            let (y, x) = ((i / 4) % 4, i % 4);
            if (x + y) % 2 == 0 { 0.0 } else { 2.0 }
        });
        let r = rescale_flow(&cb, 2).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.5));
        assert!(rescale_flow(&cb, 3).is_err());
    }
}
