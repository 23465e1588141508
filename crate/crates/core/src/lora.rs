//! Low-rank weight adapters in two spaces over one shared backbone.
//!
//! An adapter adds `scale · B·A` to a layer weight viewed as a
//! `d_out × d_in` matrix (for a conv weight `(Co, Ci, K, K)`, `d_in = Ci·K·K`).

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::cfr::normal_tensor;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// Which adapter space a set belongs to. Sets are always summed C first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Space {
    C,
    D,
}

impl Space {
    pub fn tag(self) -> &'static str {
        match self {
            Space::C => "C",
            Space::D => "D",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Consistency,
    Enhancement,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Consistency => "consistency",
            Stage::Enhancement => "enhancement",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Standard deviation of the initial `A` entries.
    pub init_std: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig { rank: 4, alpha: 4.0, init_std: 0.02 }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<F> {
    pub target: String,
    /// (r, d_in)
    pub a: Tensor<F>,
    /// (d_out, r)
    pub b: Tensor<F>,
    pub scale: f64,
}

impl<F: Real> LoraAdapter<F> {
    pub fn new(target: &str, a: Tensor<F>, b: Tensor<F>, scale: f64) -> Result<Self> {
        let ad = LoraAdapter { target: target.to_string(), a, b, scale };
        ad.validate()?;
        Ok(ad)
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        match (self.a.shape(), self.b.shape()) {
            ([r, din], [dout, r2]) if r == r2 && *r >= 1 && r <= din.min(dout) => Ok(()),
            (a, b) => shape_err(format!("adapter {}: A {a:?}, B {b:?}", self.target)),
        }
    }

    /// `scale · B·A` as a `d_out × d_in` matrix.
    pub fn delta(&self) -> Tensor<F> {
        let (r, din, dout) = (self.rank(), self.d_in(), self.d_out());
        let mut out = vec![F::zero(); dout * din];
        crate::autodiff::kernels::gemm_nn(dout, r, din, self.b.data(), self.a.data(), &mut out);
        let s = F::lit(self.scale);
        Tensor::new(vec![dout, din], out.into_iter().map(|v| v * s).collect()).expect("delta shape")
    }

    fn check_base(&self, base: &[usize]) -> Result<()> {
        let dout = base.first().copied().unwrap_or(0);
        let din: usize = base.iter().skip(1).product();
        if dout != self.d_out() || din != self.d_in() || base.len() < 2 {
            return shape_err(format!(
                "adapter {} ({}×{}) does not fit weight {base:?}",
                self.target,
                self.d_out(),
                self.d_in()
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet<F> {
    pub space: Space,
    pub adapters: Vec<LoraAdapter<F>>,
    pub trainable: bool,
}

impl<F: Real> AdapterSet<F> {
    pub fn empty(space: Space) -> Self {
        AdapterSet { space, adapters: Vec::new(), trainable: false }
    }

    /// One adapter per `(layer id, d_out, d_in)`, with Gaussian `A` and zero `B`.
    pub fn init(space: Space, layers: &[(String, usize, usize)], cfg: &LoraConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut adapters = Vec::with_capacity(layers.len());
        for (id, dout, din) in layers {
            let r = cfg.rank;
            if r == 0 || r > (*din).min(*dout) {
                return Err(Error::Config(format!("lora rank {r} invalid for layer {id} ({dout}×{din})")));
            }
            let a = normal_tensor(rng, &[r, *din], cfg.init_std);
            adapters.push(LoraAdapter::new(id, a, Tensor::zeros(&[*dout, r]), cfg.scale())?);
        }
        let set = AdapterSet { space, adapters, trainable: false };
        set.check_unique()?;
        Ok(set)
    }

    pub fn check_unique(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for a in &self.adapters {
            if !seen.insert(a.target.as_str()) {
                return Err(Error::Config(format!(
                    "duplicate {} adapter for layer {}",
                    self.space.tag(),
                    a.target
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, target: &str) -> Option<&LoraAdapter<F>> {
        self.adapters.iter().find(|a| a.target == target)
    }

    pub fn targets(&self) -> Vec<&str> {
        self.adapters.iter().map(|a| a.target.as_str()).collect()
    }

    /// Flattens into `lora.<space>.<target>.A|B` entries.
    pub fn to_map(&self) -> BTreeMap<String, Tensor<F>> {
        let mut m = BTreeMap::new();
        for a in &self.adapters {
            m.insert(format!("lora.{}.{}.A", self.space.tag(), a.target), a.a.clone());
            m.insert(format!("lora.{}.{}.B", self.space.tag(), a.target), a.b.clone());
        }
        m
    }

    /// Rebuilds a set for `targets` from a flattened map.
    pub fn from_map(map: &BTreeMap<String, Tensor<F>>, space: Space, targets: &[&str], scale: f64) -> Result<Self> {
        let mut adapters = Vec::with_capacity(targets.len());
        for t in targets {
            let get = |which: &str| {
                let key = format!("lora.{}.{t}.{which}", space.tag());
                map.get(&key).cloned().ok_or_else(|| Error::Format(format!("missing parameter {key}")))
            };
            adapters.push(LoraAdapter::new(t, get("A")?, get("B")?, scale)?);
        }
        Ok(AdapterSet { space, adapters, trainable: false })
    }

    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> Vec<AdapterVars> {
        self.adapters
            .iter()
            .map(|a| AdapterVars {
                target: a.target.clone(),
                a: g.leaf(a.a.clone(), trainable),
                b: g.leaf(a.b.clone(), trainable),
                scale: a.scale,
                space: self.space,
            })
            .collect()
    }
}

fn ordered<'a, F>(sets: &[&'a AdapterSet<F>]) -> Vec<&'a AdapterSet<F>> {
    let mut v = sets.to_vec();
    v.sort_by_key(|s| s.space);
    v
}

/// `W_base + Σ scale·B·A` over every set's adapter for `target`; the base is
/// not modified.
pub fn effective_weight<F: Real>(base: &Tensor<F>, target: &str, sets: &[&AdapterSet<F>]) -> Result<Tensor<F>> {
    let mut out = base.clone();
    for set in ordered(sets) {
        set.check_unique()?;
        if let Some(ad) = set.get(target) {
            ad.check_base(base.shape())?;
            for (w, d) in out.data_mut().iter_mut().zip(ad.delta().data()) {
                *w = *w + *d;
            }
        }
    }
    Ok(out)
}

/// Adapter tensors bound to a tape.
#[derive(Clone, Debug)]
pub struct AdapterVars {
    pub target: String,
    pub space: Space,
    pub a: Var,
    pub b: Var,
    pub scale: f64,
}

/// Tape version of [`effective_weight`] for the adapters given (all must
/// target this layer), applied in the order given.
pub fn effective_weight_var<F: Real>(g: &mut Graph<F>, base: Var, adapters: &[&AdapterVars]) -> Result<Var> {
    let shape = g.shape(base).to_vec();
    let mut w = base;
    for ad in adapters {
        let (dout, din) = (g.shape(ad.b)[0], g.shape(ad.a)[1]);
        if shape.first() != Some(&dout) || shape.iter().skip(1).product::<usize>() != din {
            return shape_err(format!("adapter {} ({dout}×{din}) does not fit weight {shape:?}", ad.target));
        }
        let ba = g.matmul(ad.b, ad.a)?;
        let ba = g.scale(ba, ad.scale);
        let ba = g.reshape(ba, &shape)?;
        w = g.add(w, ba)?;
    }
    Ok(w)
}

/// Convolution through the unmerged adapter branches:
/// `conv(x, W) + Σ scale · conv1×1(conv(x, A), B)`.
pub fn conv_with_branches<F: Real>(
    g: &mut Graph<F>,
    x: Var,
    w: Var,
    bias: Option<Var>,
    adapters: &[&AdapterVars],
) -> Result<Var> {
    let ws = g.shape(w).to_vec();
    let (co, ci, k) = match ws[..] {
        [co, ci, k, _] => (co, ci, k),
        _ => return shape_err(format!("conv weight {ws:?}")),
    };
    let mut out = g.conv2d(x, w, bias)?;
    for ad in adapters {
        let r = g.shape(ad.a)[0];
        if g.shape(ad.a)[1] != ci * k * k || g.shape(ad.b) != [co, r] {
            return shape_err(format!("adapter {} does not fit weight {ws:?}", ad.target));
        }
        let a4 = g.reshape(ad.a, &[r, ci, k, k])?;
        let b4 = g.reshape(ad.b, &[co, r, 1, 1])?;
        let low = g.conv2d(x, a4, None)?;
        let up = g.conv2d(low, b4, None)?;
        let up = g.scale(up, ad.scale);
        out = g.add(out, up)?;
    }
    Ok(out)
}

/// Folds every set into a copy of `base` (a map from layer id to weight).
/// Errors on duplicate adapters within a set or adapters for unknown layers.
pub fn merge<F: Real>(
    base: &BTreeMap<String, Tensor<F>>,
    sets: &[&AdapterSet<F>],
) -> Result<BTreeMap<String, Tensor<F>>> {
    for set in sets {
        set.check_unique()?;
        for t in set.targets() {
            if !base.contains_key(t) {
                return Err(Error::Config(format!("adapter targets unknown layer {t}")));
            }
        }
    }
    base.iter()
        .map(|(id, w)| Ok((id.clone(), effective_weight(w, id, sets)?)))
        .collect()
}

/// Which parameter groups receive updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeMask {
    pub c_lora: bool,
    pub d_lora: bool,
    pub cfr: bool,
    pub backbone: bool,
}

impl FreezeMask {
    pub fn frozen() -> Self {
        FreezeMask { c_lora: false, d_lora: false, cfr: false, backbone: false }
    }

    pub fn for_stage(stage: Stage) -> Self {
        match stage {
            Stage::Consistency => FreezeMask { c_lora: true, d_lora: false, cfr: true, backbone: false },
            Stage::Enhancement => FreezeMask { c_lora: false, d_lora: true, cfr: false, backbone: false },
        }
    }

    pub fn lora(&self, space: Space) -> bool {
        match space {
            Space::C => self.c_lora,
            Space::D => self.d_lora,
        }
    }
}

/// Sets the trainable flags of the two sets for `stage` and returns the
/// full mask (CFR follows the consistency set; the backbone never trains).
pub fn set_trainable<F>(stage: Stage, sets: &mut [&mut AdapterSet<F>]) -> FreezeMask {
    let mask = FreezeMask::for_stage(stage);
    for s in sets.iter_mut() {
        s.trainable = mask.lora(s.space);
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{grad_check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    fn example_set() -> AdapterSet<f64> {
        let ad = LoraAdapter::new("l", t(&[1, 2], &[1.0, 1.0]), t(&[2, 1], &[2.0, 0.0]), 1.0).unwrap();
        AdapterSet { space: Space::C, adapters: vec![ad], trainable: false }
    }

    #[test]
    fn hand_computed_effective_weight() {
        let base = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let set = example_set();
        let w = effective_weight(&base, "l", &[&set]).unwrap();
        assert_eq!(w.data(), &[3.0, 2.0, 0.0, 1.0]);
        let x = [1.0, 1.0];
        let wx: Vec<f64> = (0..2).map(|i| w.data()[2 * i] * x[0] + w.data()[2 * i + 1] * x[1]).collect();
        assert_eq!(wx, vec![5.0, 1.0]);
        // base path plus branch: Wx + B(Ax)
        let ax = x[0] + x[1];
        assert_eq!(vec![1.0 + 2.0 * ax, 1.0 + 0.0 * ax], wx);
        assert_eq!(base.data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn empty_or_zero_b_leaves_base() {
        let base = t(&[2, 2], &[0.3, -1.0, 2.0, 0.5]);
        assert_eq!(effective_weight(&base, "l", &[]).unwrap(), base);
        let mut set = example_set();
        set.adapters[0].b = Tensor::zeros(&[2, 1]);
        assert_eq!(effective_weight(&base, "l", &[&set]).unwrap(), base);
    }

    #[test]
    fn incompatible_adapter_is_a_shape_error() {
        let base = Tensor::<f64>::zeros(&[3, 2]);
        assert!(matches!(effective_weight(&base, "l", &[&example_set()]), Err(Error::Shape(_))));
        assert!(LoraAdapter::new("x", Tensor::<f64>::zeros(&[3, 2]), Tensor::zeros(&[2, 3]), 1.0).is_err());
    }

    fn random_sets(rng: &mut ChaCha8Rng) -> (BTreeMap<String, Tensor<f64>>, AdapterSet<f64>, AdapterSet<f64>) {
        let layers = vec![("p".to_string(), 4, 3 * 9), ("q".to_string(), 5, 4)];
        let mut base = BTreeMap::new();
        base.insert("p".to_string(), normal_tensor(rng, &[4, 3, 3, 3], 1.0));
        base.insert("q".to_string(), normal_tensor(rng, &[5, 4, 1, 1], 1.0));
        let cfg = LoraConfig { rank: 2, alpha: 3.0, init_std: 0.5 };
        let mut c = AdapterSet::init(Space::C, &layers, &cfg, rng).unwrap();
        let mut d = AdapterSet::init(Space::D, &layers, &cfg, rng).unwrap();
        for a in c.adapters.iter_mut().chain(d.adapters.iter_mut()) {
            a.b = normal_tensor(rng, a.b.shape(), 0.5);
        }
        (base, c, d)
    }

    #[test]
    fn merge_matches_branch_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (base, c, d) = random_sets(&mut rng);
        let merged = merge(&base, &[&c, &d]).unwrap();
        for _ in 0..10 {
            let x = normal_tensor::<f64>(&mut rng, &[2, 3, 5, 4], 1.0);
            let mut g = Graph::new();
            let xv = g.constant(x);
            let wv = g.constant(base["p"].clone());
            let (cv, dv) = (c.bind(&mut g, false), d.bind(&mut g, false));
            let ads: Vec<&AdapterVars> = cv.iter().chain(&dv).filter(|a| a.target == "p").collect();
            let branch = conv_with_branches(&mut g, xv, wv, None, &ads).unwrap();
            let mv = g.constant(merged["p"].clone());
            let folded = g.conv2d(xv, mv, None).unwrap();
            assert!(g.value(branch).max_abs_diff(g.value(folded)) < 1e-12);
        }
    }

    #[test]
    fn merge_is_order_independent_and_identity_when_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (base, c, d) = random_sets(&mut rng);
        assert_eq!(merge(&base, &[]).unwrap(), base);
        let cd = merge(&base, &[&c, &d]).unwrap();
        let dc = merge(&base, &[&d, &c]).unwrap();
        for (k, v) in &cd {
            assert_eq!(v.max_abs_diff(&dc[k]), 0.0);
        }
    }

    #[test]
    fn duplicate_adapter_is_a_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (base, mut c, _) = random_sets(&mut rng);
        let dup = c.adapters[0].clone();
        c.adapters.push(dup);
        assert!(matches!(merge(&base, &[&c]), Err(Error::Config(_))));
    }

    #[test]
    fn tape_effective_weight_matches_and_differentiates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (base, c, d) = random_sets(&mut rng);
        let mut g = Graph::new();
        let wv = g.constant(base["q"].clone());
        let (cv, dv) = (c.bind(&mut g, false), d.bind(&mut g, false));
        let ads: Vec<&AdapterVars> = cv.iter().chain(&dv).filter(|a| a.target == "q").collect();
        let w = effective_weight_var(&mut g, wv, &ads).unwrap();
        let want = effective_weight(&base["q"], "q", &[&c, &d]).unwrap();
        assert!(g.value(w).max_abs_diff(&want) < 1e-12);

        let x = normal_tensor::<f64>(&mut rng, &[1, 4, 3, 3], 1.0);
        let ad = &c.adapters[1];
        let rep = grad_check(
            |g, v| {
                let av = AdapterVars { target: "q".into(), space: Space::C, a: v[2], b: v[3], scale: 1.5 };
                let w = effective_weight_var(g, v[1], &[&av])?;
                let y = g.conv2d(v[0], w, None)?;
                let sq = g.square(y);
                Ok(g.sum(sq))
            },
            &[x, base["q"].clone(), ad.a.clone(), ad.b.clone()],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.passed(1e-4), "{rep:?}");
    }

    #[test]
    fn delta_rank_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for r in 1..=4 {
            let a = normal_tensor::<f64>(&mut rng, &[r, 9], 1.0);
            let b = normal_tensor::<f64>(&mut rng, &[7, r], 1.0);
            let delta = LoraAdapter::new("l", a, b, 0.7).unwrap().delta();
            let m = nalgebra::DMatrix::from_row_slice(7, 9, delta.data());
            let sv = m.singular_values();
            let top = sv.max();
            let significant = sv.iter().filter(|&&s| s > 1e-10 * top).count();
            assert_eq!(significant, r);
        }
    }

    #[test]
    fn stage_masks() {
        let mut c = AdapterSet::<f32>::empty(Space::C);
        let mut d = AdapterSet::<f32>::empty(Space::D);
        let m = set_trainable(Stage::Consistency, &mut [&mut c, &mut d]);
        assert!(m.c_lora && m.cfr && !m.d_lora && !m.backbone);
        assert!(c.trainable && !d.trainable);
        let m = set_trainable(Stage::Enhancement, &mut [&mut c, &mut d]);
        assert!(!m.c_lora && !m.cfr && m.d_lora && !m.backbone);
        assert!(!c.trainable && d.trainable);
    }

    #[test]
    fn map_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (_, c, _) = random_sets(&mut rng);
        let back = AdapterSet::from_map(&c.to_map(), Space::C, &["p", "q"], c.adapters[0].scale).unwrap();
        assert_eq!(back, c);
    }
}
