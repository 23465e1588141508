//! Cross-frame retrieval: top-k, threshold-gated attention from the current
//! latent into the flow-aligned previous latent.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    /// Square neighbourhood of the given radius around each query.
    Local { radius: usize },
    /// Every position of the same frame.
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CfrConfig {
    pub k: usize,
    /// Query/key embedding channels.
    pub d: usize,
    pub window: Window,
}

impl Default for CfrConfig {
    fn default() -> Self {
        CfrConfig { k: 4, d: 16, window: Window::Local { radius: 2 } }
    }
}

/// Projection and threshold-MLP weights. Values keep the latent channel
/// count so the fused contribution adds onto the current latent.
#[derive(Clone, Debug, PartialEq)]
pub struct CfrParams<F> {
    /// (d, C, 1, 1)
    pub w_q: Tensor<F>,
    /// (d, C, 1, 1)
    pub w_k: Tensor<F>,
    /// (C, C, 1, 1)
    pub w_v: Tensor<F>,
    /// (d, d, 1, 1) and (d)
    pub mlp1_w: Tensor<F>,
    pub mlp1_b: Tensor<F>,
    /// (1, d, 1, 1) and (1)
    pub mlp2_w: Tensor<F>,
    pub mlp2_b: Tensor<F>,
}

const NAMES: [&str; 7] = ["w_q", "w_k", "w_v", "mlp1_w", "mlp1_b", "mlp2_w", "mlp2_b"];

pub(crate) fn normal_tensor<F: Real>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<F> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| F::lit(dist.sample(rng)))
}

impl<F: Real> CfrParams<F> {
    pub fn zeros(channels: usize, d: usize) -> Self {
        CfrParams {
            w_q: Tensor::zeros(&[d, channels, 1, 1]),
            w_k: Tensor::zeros(&[d, channels, 1, 1]),
            w_v: Tensor::zeros(&[channels, channels, 1, 1]),
            mlp1_w: Tensor::zeros(&[d, d, 1, 1]),
            mlp1_b: Tensor::zeros(&[d]),
            mlp2_w: Tensor::zeros(&[1, d, 1, 1]),
            mlp2_b: Tensor::zeros(&[1]),
        }
    }

    /// Random query/key/MLP weights and zero value weights, so an untrained
    /// module contributes nothing.
    pub fn init(channels: usize, d: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(channels, d);
        p.w_q = normal_tensor(rng, &[d, channels, 1, 1], 1.0 / (channels as f64).sqrt());
        p.w_k = normal_tensor(rng, &[d, channels, 1, 1], 1.0 / (channels as f64).sqrt());
        p.mlp1_w = normal_tensor(rng, &[d, d, 1, 1], (2.0 / d as f64).sqrt());
        p.mlp2_w = normal_tensor(rng, &[1, d, 1, 1], 1.0 / (d as f64).sqrt());
        p
    }

    pub fn channels(&self) -> usize {
        self.w_v.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub(crate) fn tensors(&self) -> [&Tensor<F>; 7] {
        [&self.w_q, &self.w_k, &self.w_v, &self.mlp1_w, &self.mlp1_b, &self.mlp2_w, &self.mlp2_b]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<F>; 7] {
        [
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.mlp1_w,
            &mut self.mlp1_b,
            &mut self.mlp2_w,
            &mut self.mlp2_b,
        ]
    }

    /// Flattens into `prefix.name` entries.
    pub fn to_map(&self, prefix: &str) -> BTreeMap<String, Tensor<F>> {
        NAMES
            .iter()
            .zip(self.tensors())
            .map(|(n, t)| (format!("{prefix}.{n}"), t.clone()))
            .collect()
    }

    pub fn from_map(map: &BTreeMap<String, Tensor<F>>, prefix: &str) -> Result<Self> {
        let get = |n: &str| {
            map.get(&format!("{prefix}.{n}"))
                .cloned()
                .ok_or_else(|| Error::Format(format!("missing parameter {prefix}.{n}")))
        };
        let p = CfrParams {
            w_q: get("w_q")?,
            w_k: get("w_k")?,
            w_v: get("w_v")?,
            mlp1_w: get("mlp1_w")?,
            mlp1_b: get("mlp1_b")?,
            mlp2_w: get("mlp2_w")?,
            mlp2_b: get("mlp2_b")?,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let (c, d) = (self.channels(), self.d());
        let expect: [&[usize]; 7] =
            [&[d, c, 1, 1], &[d, c, 1, 1], &[c, c, 1, 1], &[d, d, 1, 1], &[d], &[1, d, 1, 1], &[1]];
        for ((name, t), e) in NAMES.iter().zip(self.tensors()).zip(expect) {
            if t.shape() != e {
                return shape_err(format!("cfr {name}: {:?}, expected {e:?}", t.shape()));
            }
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> CfrVars {
        let v: Vec<Var> = self.tensors().iter().map(|t| g.leaf((*t).clone(), trainable)).collect();
        CfrVars {
            w_q: v[0],
            w_k: v[1],
            w_v: v[2],
            mlp1_w: v[3],
            mlp1_b: v[4],
            mlp2_w: v[5],
            mlp2_b: v[6],
        }
    }

    /// Visits every tensor with its field name.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<F>)) {
        for (n, t) in NAMES.iter().zip(self.tensors_mut()) {
            f(n, t);
        }
    }
}

/// [`CfrParams`] bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct CfrVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub mlp1_w: Var,
    pub mlp1_b: Var,
    pub mlp2_w: Var,
    pub mlp2_b: Var,
}

impl CfrVars {
    pub fn all(&self) -> [Var; 7] {
        [self.w_q, self.w_k, self.w_v, self.mlp1_w, self.mlp1_b, self.mlp2_w, self.mlp2_b]
    }

    /// Inverse of [`CfrVars::all`].
    pub fn from_array(v: [Var; 7]) -> Self {
        CfrVars { w_q: v[0], w_k: v[1], w_v: v[2], mlp1_w: v[3], mlp1_b: v[4], mlp2_w: v[5], mlp2_b: v[6] }
    }

    /// `(prefix.name, var)` pairs using the [`CfrParams::to_map`] keys.
    pub fn named(&self, prefix: &str) -> Vec<(String, Var)> {
        NAMES.iter().zip(self.all()).map(|(n, v)| (format!("{prefix}.{n}"), v)).collect()
    }
}

/// Q from the current latent, K and V from the aligned previous latent.
pub fn project_qkv<F: Real>(
    g: &mut Graph<F>,
    z_cur: Var,
    z_prev_warped: Var,
    p: &CfrVars,
) -> Result<(Var, Var, Var)> {
    if g.shape(z_cur) != g.shape(z_prev_warped) {
        return shape_err(format!(
            "cfr: current latent {:?} vs previous {:?}",
            g.shape(z_cur),
            g.shape(z_prev_warped)
        ));
    }
    let q = g.conv2d(z_cur, p.w_q, None)?;
    let k = g.conv2d(z_prev_warped, p.w_k, None)?;
    let v = g.conv2d(z_prev_warped, p.w_v, None)?;
    Ok((q, k, v))
}

/// Per-position threshold τ (N, 1, H, W) from the query embedding.
pub fn predict_threshold<F: Real>(g: &mut Graph<F>, q: Var, p: &CfrVars) -> Result<Var> {
    let h = g.conv2d(q, p.mlp1_w, Some(p.mlp1_b))?;
    let h = g.relu(h);
    g.conv2d(h, p.mlp2_w, Some(p.mlp2_b))
}

/// Candidate table: for each query position, `slots` entries holding a
/// position within the same frame, or `None` outside the frame.
struct Candidates {
    slots: usize,
    table: Vec<Option<usize>>,
    min_valid: usize,
}

fn candidates(h: usize, w: usize, window: Window) -> Candidates {
    let plane = h * w;
    match window {
        Window::Global => Candidates {
            slots: plane,
            table: (0..plane).flat_map(|_| (0..plane).map(Some)).collect(),
            min_valid: plane,
        },
        Window::Local { radius } => {
            let r = radius as isize;
            let side = 2 * radius + 1;
            let mut table = Vec::with_capacity(plane * side * side);
            let mut min_valid = usize::MAX;
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let mut valid = 0;
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (qy, qx) = (y + dy, x + dx);
                            if qy >= 0 && qx >= 0 && qy < h as isize && qx < w as isize {
                                table.push(Some(qy as usize * w + qx as usize));
                                valid += 1;
                            } else {
                                table.push(None);
                            }
                        }
                    }
                    min_valid = min_valid.min(valid);
                }
            }
            Candidates { slots: side * side, table, min_valid }
        }
    }
}

/// `z̄[p] = z_cur[p] + Σ_{q ∈ topk(p)} relu(⟨Q[p], K[q]⟩/√d − τ[p]) · V[q]`.
pub fn retrieve_fuse_var<F: Real>(
    g: &mut Graph<F>,
    z_cur: Var,
    z_prev_warped: Var,
    p: &CfrVars,
    cfg: &CfrConfig,
) -> Result<Var> {
    let (q, kk, v) = project_qkv(g, z_cur, z_prev_warped, p)?;
    let (n, c, h, w) = g.value(z_cur).dims4()?;
    let d = g.shape(q)[1];
    if g.shape(v)[1] != c {
        return shape_err(format!("cfr values carry {} channels, latent has {c}", g.shape(v)[1]));
    }
    let cand = candidates(h, w, cfg.window);
    if cfg.k > cand.min_valid {
        return Err(Error::Config(format!(
            "cfr k = {} exceeds the {} candidates available at the frame corner",
            cfg.k, cand.min_valid
        )));
    }
    if cfg.k == 0 {
        return Ok(z_cur);
    }
    let tau = predict_threshold(g, q, p)?;
    let plane = h * w;
    let pos = n * plane;
    let s = cand.slots;
    let k = cfg.k;

    // (P, S, d) query copies and candidate keys; invalid slots point at the
    // query itself and are masked below.
    let mut q_idx = Vec::with_capacity(pos * s * d);
    let mut k_idx = Vec::with_capacity(pos * s * d);
    let mut mask = Vec::with_capacity(pos * s);
    for b in 0..n {
        for pp in 0..plane {
            for slot in 0..s {
                let cq = cand.table[pp * s + slot];
                mask.push(if cq.is_some() { 0.0 } else { -1e30 });
                let qq = cq.unwrap_or(pp);
                for ch in 0..d {
                    q_idx.push((b * d + ch) * plane + pp);
                    k_idx.push((b * d + ch) * plane + qq);
                }
            }
        }
    }
    let q_rep = g.gather(q, Arc::from(q_idx), &[pos, s, d])?;
    let k_cand = g.gather(kk, Arc::from(k_idx), &[pos, s, d])?;
    let sims = g.inner_product(q_rep, k_cand)?;
    let sims = g.scale(sims, 1.0 / (d as f64).sqrt());
    let sims = g.add_const(sims, Tensor::from_f64(&[pos, s], &mask)?)?;
    let (top, sel) = g.topk(sims, k)?;

    let tau_idx: Vec<usize> = (0..pos).flat_map(|i| std::iter::repeat_n(i, k)).collect();
    let tau_rep = g.gather(tau, Arc::from(tau_idx), &[pos, k])?;
    let gates = g.sub(top, tau_rep)?;
    let gates = g.relu(gates);
    let gates = g.reshape(gates, &[pos, 1, k])?;

    let mut v_idx = Vec::with_capacity(pos * k * c);
    for i in 0..pos {
        let (b, pp) = (i / plane, i % plane);
        for j in 0..k {
            let qq = cand.table[pp * s + sel[i * k + j]].unwrap_or(pp);
            for ch in 0..c {
                v_idx.push((b * c + ch) * plane + qq);
            }
        }
    }
    let v_sel = g.gather(v, Arc::from(v_idx), &[pos, k, c])?;
    let contrib = g.matmul(gates, v_sel)?;

    let back: Vec<usize> = (0..n * c * plane)
        .map(|i| {
            let (b, ch, pp) = (i / (c * plane), (i / plane) % c, i % plane);
            (b * plane + pp) * c + ch
        })
        .collect();
    let contrib = g.gather(contrib, Arc::from(back), &[n, c, h, w])?;
    g.add(z_cur, contrib)
}

/// Tensor-level fusion with frozen parameters.
pub fn retrieve_fuse<F: Real>(
    z_cur: &Tensor<F>,
    z_prev_warped: &Tensor<F>,
    params: &CfrParams<F>,
    cfg: &CfrConfig,
) -> Result<Tensor<F>> {
    let mut g = Graph::new();
    let a = g.constant(z_cur.clone());
    let b = g.constant(z_prev_warped.clone());
    let p = params.bind(&mut g, false);
    let out = retrieve_fuse_var(&mut g, a, b, &p, cfg)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{grad_check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_params(c: usize) -> CfrParams<f64> {
        let mut p = CfrParams::zeros(c, c);
        for i in 0..c {
            p.w_q.data_mut()[i * c + i] = 1.0;
            p.w_k.data_mut()[i * c + i] = 1.0;
            p.w_v.data_mut()[i * c + i] = 1.0;
        }
        p
    }

    fn run_qkv(p: &CfrParams<f64>, a: &Tensor<f64>, b: &Tensor<f64>) -> [Tensor<f64>; 3] {
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let pv = p.bind(&mut g, false);
        let (q, k, v) = project_qkv(&mut g, va, vb, &pv).unwrap();
        [g.value(q).clone(), g.value(k).clone(), g.value(v).clone()]
    }

    #[test]
    fn identity_projection_example() {
        let a = Tensor::from_f64(&[1, 1, 1, 2], &[1.0, 2.0]).unwrap();
        let b = Tensor::from_f64(&[1, 1, 1, 2], &[0.5, 1.5]).unwrap();
        let [q, k, v] = run_qkv(&identity_params(1), &a, &b);
        assert_eq!(q.data(), &[1.0, 2.0]);
        assert_eq!(k.data(), &[0.5, 1.5]);
        assert_eq!(v.data(), &[0.5, 1.5]);
        let [q, k, v] = run_qkv(&CfrParams::zeros(1, 1), &a, &b);
        assert!(q.data().iter().chain(k.data()).chain(v.data()).all(|&x| x == 0.0));
    }

    #[test]
    fn zero_mlp_gives_zero_threshold() {
        let mut g = Graph::<f64>::new();
        let p = CfrParams::zeros(12, 16).bind(&mut g, false);
        let q = g.constant(Tensor::full(&[2, 16, 3, 5], 0.7));
        let tau = predict_threshold(&mut g, q, &p).unwrap();
        assert_eq!(g.shape(tau), &[2, 1, 3, 5]);
        assert!(g.value(tau).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn hand_computed_fusion_example() {
        let a = Tensor::from_f64(&[1, 1, 1, 2], &[1.0, 2.0]).unwrap();
        let b = Tensor::from_f64(&[1, 1, 1, 2], &[0.5, 1.5]).unwrap();
        let cfg = CfrConfig { k: 1, d: 1, window: Window::Global };
        let out = retrieve_fuse(&a, &b, &identity_params(1), &cfg).unwrap();
        assert_eq!(out.data(), &[3.25, 6.5]);
    }

    #[test]
    fn large_threshold_gates_everything_off() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = CfrParams::<f64>::init(12, 8, &mut rng);
        p.w_v = normal_tensor(&mut rng, &[12, 12, 1, 1], 1.0);
        p.mlp2_b.data_mut()[0] = 1e6;
        let a = normal_tensor(&mut rng, &[1, 12, 4, 4], 1.0);
        let b = normal_tensor(&mut rng, &[1, 12, 4, 4], 1.0);
        let out = retrieve_fuse(&a, &b, &p, &CfrConfig { k: 4, d: 8, ..Default::default() }).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn k_zero_and_oversized_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = CfrParams::<f64>::init(3, 4, &mut rng);
        let a = normal_tensor(&mut rng, &[1, 3, 4, 4], 1.0);
        let cfg = CfrConfig { k: 0, d: 4, ..Default::default() };
        assert_eq!(retrieve_fuse(&a, &a, &p, &cfg).unwrap(), a);
        // a corner of a radius-2 window sees 3×3 positions
        let cfg = CfrConfig { k: 10, d: 4, ..Default::default() };
        assert!(matches!(retrieve_fuse(&a, &a, &p, &cfg), Err(Error::Config(_))));
        let cfg = CfrConfig { k: 9, d: 4, ..Default::default() };
        assert!(retrieve_fuse(&a, &a, &p, &cfg).is_ok());
    }

    /// Dense reference: every candidate in the window contributes its gate.
    fn dense_reference(
        a: &Tensor<f64>,
        b: &Tensor<f64>,
        p: &CfrParams<f64>,
        radius: Option<usize>,
        tau: f64,
    ) -> Tensor<f64> {
        let (_, c, h, w) = a.dims4().unwrap();
        let d = p.d();
        let proj = |wt: &Tensor<f64>, src: &Tensor<f64>, out_c: usize, pos: usize| -> Vec<f64> {
            (0..out_c)
                .map(|o| (0..c).map(|i| wt.data()[o * c + i] * src.data()[i * h * w + pos]).sum())
                .collect()
        };
        let mut out = a.clone();
        for pp in 0..h * w {
            let qv = proj(&p.w_q, a, d, pp);
            for qq in 0..h * w {
                if let Some(r) = radius {
                    let dy = (pp / w).abs_diff(qq / w);
                    let dx = (pp % w).abs_diff(qq % w);
                    if dy > r || dx > r {
                        continue;
                    }
                }
                let kv = proj(&p.w_k, b, d, qq);
                let sim: f64 = qv.iter().zip(&kv).map(|(x, y)| x * y).sum::<f64>() / (d as f64).sqrt();
                let gate = (sim - tau).max(0.0);
                let vv = proj(&p.w_v, b, c, qq);
                for ch in 0..c {
                    out.data_mut()[ch * h * w + pp] += gate * vv[ch];
                }
            }
        }
        out
    }

    #[test]
    fn matches_dense_gated_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..5 {
            let mut p = CfrParams::<f64>::zeros(4, 3);
            p.w_q = normal_tensor(&mut rng, &[3, 4, 1, 1], 0.5);
            p.w_k = normal_tensor(&mut rng, &[3, 4, 1, 1], 0.5);
            p.w_v = normal_tensor(&mut rng, &[4, 4, 1, 1], 0.5);
            p.mlp2_b.data_mut()[0] = -50.0;
            let a = normal_tensor(&mut rng, &[1, 4, 4, 4], 1.0);
            let b = normal_tensor(&mut rng, &[1, 4, 4, 4], 1.0);
            let global = CfrConfig { k: 16, d: 3, window: Window::Global };
            let out = retrieve_fuse(&a, &b, &p, &global).unwrap();
            let want = dense_reference(&a, &b, &p, None, -50.0);
            assert!(out.max_abs_diff(&want) < 1e-6, "trial {trial}");
            // radius 1 on 4×4: corner windows hold 4 positions
            let local = CfrConfig { k: 4, d: 3, window: Window::Local { radius: 1 } };
            let out = retrieve_fuse(&a, &b, &p, &local).unwrap();
            let want = dense_reference(&a, &b, &p, Some(1), -50.0);
            // only corners are exact with k = 4; compare those
            for &pos in &[0usize, 3, 12, 15] {
                for ch in 0..4 {
                    let i = ch * 16 + pos;
                    assert!((out.data()[i] - want.data()[i]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn non_selected_values_do_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = CfrParams::<f64>::init(4, 4, &mut rng);
        p.w_v = normal_tensor(&mut rng, &[4, 4, 1, 1], 1.0);
        p.mlp2_b.data_mut()[0] = -5.0;
        // keys ignore channel 0, so editing it moves V but not the selection
        for o in 0..4 {
            p.w_k.data_mut()[o * 4] = 0.0;
        }
        let a = normal_tensor(&mut rng, &[1, 4, 1, 4], 1.0);
        let b = normal_tensor(&mut rng, &[1, 4, 1, 4], 1.0);
        let cfg = CfrConfig { k: 1, d: 4, window: Window::Global };
        let base = retrieve_fuse(&a, &b, &p, &cfg).unwrap();

        let mut g = Graph::new();
        let sims = {
            let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
            let pv = p.bind(&mut g, false);
            let (q, k, _) = project_qkv(&mut g, va, vb, &pv).unwrap();
            let (qv, kv) = (g.value(q), g.value(k));
            (0..4)
                .map(|j| (0..4).map(|ch| qv.data()[ch * 4] * kv.data()[ch * 4 + j]).sum::<f64>())
                .collect::<Vec<_>>()
        };
        let best = (0..4).fold(0, |m, j| if sims[j] > sims[m] { j } else { m });
        for other in (0..4).filter(|&j| j != best) {
            let mut b2 = b.clone();
            b2.data_mut()[other] += 10.0;
            let out = retrieve_fuse(&a, &b2, &p, &cfg).unwrap();
            for ch in 0..4 {
                assert_eq!(out.data()[ch * 4], base.data()[ch * 4]);
            }
        }
    }

    #[test]
    fn fusion_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = CfrParams::<f64>::init(3, 2, &mut rng);
        p.w_v = normal_tensor(&mut rng, &[3, 3, 1, 1], 1.0);
        p.mlp2_b.data_mut()[0] = -1.0;
        let a = normal_tensor(&mut rng, &[1, 3, 3, 3], 1.0);
        let b = normal_tensor(&mut rng, &[1, 3, 3, 3], 1.0);
        let cfg = CfrConfig { k: 2, d: 2, window: Window::Local { radius: 1 } };
        let mut inputs = vec![a, b];
        inputs.extend(p.tensors().iter().map(|t| (*t).clone()));
        let rep = grad_check(
            |g, v| {
                let pv = CfrVars {
                    w_q: v[2],
                    w_k: v[3],
                    w_v: v[4],
                    mlp1_w: v[5],
                    mlp1_b: v[6],
                    mlp2_w: v[7],
                    mlp2_b: v[8],
                };
                let out = retrieve_fuse_var(g, v[0], v[1], &pv, &cfg)?;
                let sq = g.square(out);
                Ok(g.sum(sq))
            },
            &inputs,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.passed(1e-4), "{rep:?}");
    }

    #[test]
    fn map_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = CfrParams::<f32>::init(12, 16, &mut rng);
        let back = CfrParams::from_map(&p.to_map("cfr"), "cfr").unwrap();
        assert_eq!(back, p);
    }
}
