//! Training objectives and the warm-up interpolation between them.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::cfr::normal_tensor;
use crate::error::{shape_err, Error, Result};
use crate::flow::{estimate_flow_var, FlowConfig};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub pix: f64,
    pub lpips: f64,
    pub opt: f64,
    pub csd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { pix: 1.0, lpips: 0.5, opt: 0.25, csd: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [("pix", self.pix), ("lpips", self.lpips), ("opt", self.opt), ("csd", self.csd)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weight {n} = {v} must be finite and ≥ 0")));
            }
        }
        Ok(())
    }
}

fn check_same<F: Real>(g: &Graph<F>, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return shape_err(format!("{what}: {:?} vs {:?}", g.shape(a), g.shape(b)));
    }
    Ok(())
}

/// Mean squared error.
pub fn pixel_loss<F: Real>(g: &mut Graph<F>, pred: Var, gt: Var) -> Result<Var> {
    check_same(g, pred, gt, "pixel_loss")?;
    let d = g.sub(pred, gt)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Frozen random convolutional features standing in for a learned
/// perceptual metric: 3→8 conv, s2d, 32→16 conv, s2d, 64→16 conv, each
/// followed by ReLU. Inputs need sides divisible by 4.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualExtractor<F> {
    pub seed: u64,
    layers: [Tensor<F>; 3],
}

impl<F: Real> PerceptualExtractor<F> {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = |co: usize, ci: usize| normal_tensor(&mut rng, &[co, ci, 3, 3], (2.0 / (ci * 9) as f64).sqrt());
        let l1 = layer(8, 3);
        let l2 = layer(16, 32);
        let l3 = layer(16, 64);
        PerceptualExtractor { seed, layers: [l1, l2, l3] }
    }

    pub fn features(&self, g: &mut Graph<F>, x: Var) -> Result<[Var; 3]> {
        let w: Vec<Var> = self.layers.iter().map(|t| g.constant(t.clone())).collect();
        let f1 = g.conv2d(x, w[0], None)?;
        let f1 = g.relu(f1);
        let d = g.space_to_depth(f1, 2)?;
        let f2 = g.conv2d(d, w[1], None)?;
        let f2 = g.relu(f2);
        let d = g.space_to_depth(f2, 2)?;
        let f3 = g.conv2d(d, w[2], None)?;
        let f3 = g.relu(f3);
        Ok([f1, f2, f3])
    }

    /// Sum over layers of the mean squared feature difference.
    pub fn loss(&self, g: &mut Graph<F>, pred: Var, gt: Var) -> Result<Var> {
        check_same(g, pred, gt, "perceptual_loss")?;
        let fp = self.features(g, pred)?;
        let fg = self.features(g, gt)?;
        let mut total: Option<Var> = None;
        for (a, b) in fp.into_iter().zip(fg) {
            let l = pixel_loss(g, a, b)?;
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
        Ok(total.expect("three layers"))
    }
}

/// Rows `idx` of a batch `(N, ...)` as a new batch.
pub fn select_frames<F: Real>(g: &mut Graph<F>, x: Var, idx: &[usize]) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let inner: usize = shape[1..].iter().product();
    if let Some(&bad) = idx.iter().find(|&&i| i >= shape[0]) {
        return shape_err(format!("frame index {bad} out of {}", shape[0]));
    }
    let map: Vec<usize> = idx.iter().flat_map(|&i| i * inner..(i + 1) * inner).collect();
    let mut out = shape;
    out[0] = idx.len();
    g.gather(x, Arc::from(map), &out)
}

/// Mean over pixels of `‖F(pred_a, pred_b) − F(gt_a, gt_b)‖₁`, the flow
/// vectors compared per pixel.
pub fn flow_loss<F: Real>(
    g: &mut Graph<F>,
    pred_a: Var,
    pred_b: Var,
    gt_a: Var,
    gt_b: Var,
    cfg: &FlowConfig,
) -> Result<Var> {
    check_same(g, pred_a, gt_a, "flow_loss")?;
    let fp = estimate_flow_var(g, pred_a, pred_b, cfg)?;
    let fg = estimate_flow_var(g, gt_a, gt_b, cfg)?;
    let d = g.sub(fp, fg)?;
    let l1 = g.l1_norm(d);
    let (n, _, h, w) = g.value(fp).dims4()?;
    Ok(g.scale(l1, 1.0 / (n * h * w) as f64))
}

/// A scalar, differentiable judgement of predicted detail.
pub trait DetailCritic<F: Real>: Send + Sync {
    fn name(&self) -> &str;
    fn loss(&self, g: &mut Graph<F>, pred: Var, gt: Var) -> Result<Var>;
}

/// Mean absolute difference of 3×3 Laplacian response magnitudes.
#[derive(Clone, Copy, Debug, Default)]
pub struct LaplacianCritic;

pub(crate) fn laplacian_weight<F: Real>(c: usize) -> Tensor<F> {
    const K: [f64; 9] = [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0];
    let mut w = Tensor::zeros(&[c, c, 3, 3]);
    for ch in 0..c {
        for (j, &k) in K.iter().enumerate() {
            w.data_mut()[(ch * c + ch) * 9 + j] = F::lit(k);
        }
    }
    w
}

impl<F: Real> DetailCritic<F> for LaplacianCritic {
    fn name(&self) -> &str {
        "laplacian"
    }

    fn loss(&self, g: &mut Graph<F>, pred: Var, gt: Var) -> Result<Var> {
        check_same(g, pred, gt, "detail_prior_loss")?;
        let c = g.shape(pred)[1];
        let k = g.constant(laplacian_weight(c));
        let lp = g.conv2d(pred, k, None)?;
        let lp = g.abs(lp);
        let lg = g.conv2d(gt, k, None)?;
        let lg = g.abs(lg);
        let d = g.sub(lp, lg)?;
        let d = g.abs(d);
        Ok(g.mean(d))
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroCritic;

impl<F: Real> DetailCritic<F> for ZeroCritic {
    fn name(&self) -> &str {
        "zero"
    }

    fn loss(&self, g: &mut Graph<F>, _pred: Var, _gt: Var) -> Result<Var> {
        Ok(g.constant(Tensor::scalar(F::zero())))
    }
}

/// Everything the composite losses need besides the frames.
pub struct LossContext<F: Real> {
    pub extractor: PerceptualExtractor<F>,
    pub critic: Box<dyn DetailCritic<F>>,
    pub flow: FlowConfig,
}

impl<F: Real> LossContext<F> {
    pub fn new(perceptual_seed: u64, flow: FlowConfig) -> Self {
        LossContext { extractor: PerceptualExtractor::new(perceptual_seed), critic: Box::new(LaplacianCritic), flow }
    }
}

/// Predicted and target frames `(N, 3, H, W)` plus the index pairs
/// `(n, n+1)` of temporally adjacent frames within the batch.
#[derive(Clone, Debug)]
pub struct FrameBatch {
    pub pred: Var,
    pub gt: Var,
    pub pairs: Vec<(usize, usize)>,
}

/// Unweighted loss components. Terms not requested are constant zero.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub pix: Var,
    pub lpips: Var,
    pub opt: Var,
    pub csd: Var,
}

/// Which components to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TermSet {
    pub pix: bool,
    pub lpips: bool,
    pub opt: bool,
    pub csd: bool,
}

impl TermSet {
    pub fn all() -> Self {
        TermSet { pix: true, lpips: true, opt: true, csd: true }
    }

    /// Components with a non-zero weight in any of `weights`; the detail
    /// term only when `with_csd`.
    pub fn needed(weights: &[LossWeights], with_csd: bool) -> Self {
        TermSet {
            pix: weights.iter().any(|w| w.pix != 0.0),
            lpips: weights.iter().any(|w| w.lpips != 0.0),
            opt: weights.iter().any(|w| w.opt != 0.0),
            csd: with_csd && weights.iter().any(|w| w.csd != 0.0),
        }
    }
}

pub fn loss_terms<F: Real>(g: &mut Graph<F>, ctx: &LossContext<F>, batch: &FrameBatch, which: TermSet) -> Result<LossTerms> {
    check_same(g, batch.pred, batch.gt, "loss_terms")?;
    let zero = g.constant(Tensor::scalar(F::zero()));
    let pix = if which.pix { pixel_loss(g, batch.pred, batch.gt)? } else { zero };
    let lpips = if which.lpips { ctx.extractor.loss(g, batch.pred, batch.gt)? } else { zero };
    let opt = if which.opt && !batch.pairs.is_empty() {
        let (a, b): (Vec<usize>, Vec<usize>) = batch.pairs.iter().copied().unzip();
        let pa = select_frames(g, batch.pred, &a)?;
        let pb = select_frames(g, batch.pred, &b)?;
        let ga = select_frames(g, batch.gt, &a)?;
        let gb = select_frames(g, batch.gt, &b)?;
        flow_loss(g, pa, pb, ga, gb, &ctx.flow)?
    } else {
        zero
    };
    let csd = if which.csd { ctx.critic.loss(g, batch.pred, batch.gt)? } else { zero };
    Ok(LossTerms { pix, lpips, opt, csd })
}

/// `λ_pix·L_pix + λ_lpips·L_lpips + λ_opt·L_opt`.
pub fn consistency_loss<F: Real>(g: &mut Graph<F>, t: &LossTerms, w: &LossWeights) -> Result<Var> {
    let a = g.scale(t.pix, w.pix);
    let b = g.scale(t.lpips, w.lpips);
    let c = g.scale(t.opt, w.opt);
    let ab = g.add(a, b)?;
    g.add(ab, c)
}

/// Consistency loss plus `λ_csd·L_csd`.
pub fn enhancement_loss<F: Real>(g: &mut Graph<F>, t: &LossTerms, w: &LossWeights) -> Result<Var> {
    let base = consistency_loss(g, t, w)?;
    let d = g.scale(t.csd, w.csd);
    g.add(base, d)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ConsToEnh,
    EnhToCons,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionSchedule {
    pub s_t: usize,
    pub direction: Direction,
}

/// Interpolation weight `s / s_t` of the incoming objective.
pub fn transition_weight(s: usize, schedule: &TransitionSchedule) -> Result<f64> {
    if schedule.s_t == 0 || s > schedule.s_t {
        return Err(Error::Contract(format!("transition step {s} outside 0..={}", schedule.s_t)));
    }
    Ok(s as f64 / schedule.s_t as f64)
}

/// `(1 − s/s_t)·L_cons + (s/s_t)·L_enh`, with the roles of the two losses
/// swapped for the enhancement→consistency direction.
pub fn transition_loss<F: Real>(
    g: &mut Graph<F>,
    l_cons: Var,
    l_enh: Var,
    s: usize,
    schedule: &TransitionSchedule,
) -> Result<Var> {
    let w = transition_weight(s, schedule)?;
    let (from, to) = match schedule.direction {
        Direction::ConsToEnh => (l_cons, l_enh),
        Direction::EnhToCons => (l_enh, l_cons),
    };
    blend(g, from, to, w)
}

/// `(1 − w)·from + w·to`.
pub fn blend<F: Real>(g: &mut Graph<F>, from: Var, to: Var, w: f64) -> Result<Var> {
    let a = g.scale(from, 1.0 - w);
    let b = g.scale(to, w);
    g.add(a, b)
}
