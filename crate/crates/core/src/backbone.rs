//! Toy residual UNet and the one-step generator built around it.
//!
//! Layout at base width `c0` on a latent of `C` channels (sides divisible by 4):
//!
//! ```text
//! enc1 = relu(conv3(z))                       c0   @ 1
//! enc2 = relu(conv3(s2d(enc1)))               c0   @ 1/2
//! mid  = relu(conv3(s2d(enc2)))               c0   @ 1/4
//! dec1 = relu(d2s(conv3(mid)) + enc2)         c0   @ 1/2
//! dec2 = relu(d2s(conv3(dec1)) + enc1)        c0   @ 1
//! ε    = conv3(dec2)                          C    @ 1
//! ```

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::cfr::{normal_tensor, retrieve_fuse_var, CfrConfig, CfrParams, CfrVars};
use crate::codec::LatentConfig;
use crate::data::VideoSequence;
use crate::error::{shape_err, Error, Result};
use crate::flow::{estimate_flow, rescale_flow, warp_var, FlowConfig};
use crate::lora::{
    conv_with_branches, effective_weight_var, merge, AdapterSet, AdapterVars, FreezeMask, LoraConfig, Space,
};
use crate::tensor::{Real, Tensor};

pub const LAYERS: [&str; 6] = ["enc1", "enc2", "mid", "dec1", "dec2", "out"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub base_width: usize,
    pub latent_channels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig { base_width: 32, latent_channels: 12 }
    }
}

impl UNetConfig {
    /// Weight shape `(Co, Ci, 3, 3)` of every layer, in forward order.
    pub fn layer_shapes(&self) -> Vec<(&'static str, [usize; 4])> {
        let (c0, c) = (self.base_width, self.latent_channels);
        vec![
            ("enc1", [c0, c, 3, 3]),
            ("enc2", [c0, 4 * c0, 3, 3]),
            ("mid", [c0, 4 * c0, 3, 3]),
            ("dec1", [4 * c0, c0, 3, 3]),
            ("dec2", [4 * c0, c0, 3, 3]),
            ("out", [c, c0, 3, 3]),
        ]
    }

    /// `(layer id, d_out, d_in)` for adapter construction.
    pub fn adapter_targets(&self) -> Vec<(String, usize, usize)> {
        self.layer_shapes()
            .into_iter()
            .map(|(id, [co, ci, k, _])| (id.to_string(), co, ci * k * k))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNetParams<F> {
    pub weights: BTreeMap<String, Tensor<F>>,
    pub biases: BTreeMap<String, Tensor<F>>,
}

impl<F: Real> UNetParams<F> {
    pub fn zeros(cfg: &UNetConfig) -> Self {
        let mut p = UNetParams { weights: BTreeMap::new(), biases: BTreeMap::new() };
        for (id, shape) in cfg.layer_shapes() {
            p.weights.insert(id.to_string(), Tensor::zeros(&shape));
            p.biases.insert(id.to_string(), Tensor::zeros(&[shape[0]]));
        }
        p
    }

    /// He-normal weights, zero biases, and a zero output layer so the
    /// untrained network predicts ε ≡ 0.
    pub fn init(cfg: &UNetConfig, rng: &mut impl rand::Rng) -> Self {
        let mut p = Self::zeros(cfg);
        for (id, shape) in cfg.layer_shapes() {
            if id == "out" {
                continue;
            }
            let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
            p.weights.insert(id.to_string(), normal_tensor(rng, &shape, (2.0 / fan_in).sqrt()));
        }
        p
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelConfig {
    pub latent: LatentConfig,
    pub flow: FlowConfig,
    pub cfr: CfrConfig,
    pub unet: UNetConfig,
    pub lora: LoraConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.unet.latent_channels != self.latent.latent_channels() {
            return Err(Error::Config(format!(
                "unet expects {} latent channels, codec produces {}",
                self.unet.latent_channels,
                self.latent.latent_channels()
            )));
        }
        if self.unet.base_width == 0 || self.cfr.d == 0 {
            return Err(Error::Config("base width and cfr d must be positive".into()));
        }
        Ok(())
    }
}

/// How adapters enter the forward pass. Both compute the same function.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdapterPath {
    /// Fold `scale·B·A` into each weight before the convolution.
    Folded,
    /// Run each adapter as a separate low-rank convolution branch.
    Branch,
}

/// Complete generator state: frozen backbone, CFR, and both adapter sets.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub unet: UNetParams<F>,
    pub cfr: CfrParams<F>,
    pub c_set: AdapterSet<F>,
    pub d_set: AdapterSet<F>,
}

impl<F: Real> Model<F> {
    /// Initializes from `seed`. With `dual` false the D set is left empty.
    pub fn init(config: ModelConfig, seed: u64, dual: bool) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unet = UNetParams::init(&config.unet, &mut rng);
        let cfr = CfrParams::init(config.unet.latent_channels, config.cfr.d, &mut rng);
        let targets = config.unet.adapter_targets();
        let c_set = AdapterSet::init(Space::C, &targets, &config.lora, &mut rng)?;
        let d_set = if dual {
            AdapterSet::init(Space::D, &targets, &config.lora, &mut rng)?
        } else {
            AdapterSet::empty(Space::D)
        };
        Ok(Model { config, unet, cfr, c_set, d_set })
    }

    /// All-zero backbone and CFR, no adapters: ε ≡ 0 and every gate is off.
    pub fn identity(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut cfr = CfrParams::zeros(config.unet.latent_channels, config.cfr.d);
        cfr.mlp2_b.data_mut()[0] = F::lit(1.0);
        Ok(Model {
            unet: UNetParams::zeros(&config.unet),
            cfr,
            c_set: AdapterSet::empty(Space::C),
            d_set: AdapterSet::empty(Space::D),
            config,
        })
    }

    /// A standalone model with both adapter sets folded into the backbone.
    pub fn merged(&self) -> Result<Self> {
        let weights = merge(&self.unet.weights, &[&self.c_set, &self.d_set])?;
        Ok(Model {
            config: self.config.clone(),
            unet: UNetParams { weights, biases: self.unet.biases.clone() },
            cfr: self.cfr.clone(),
            c_set: AdapterSet::empty(Space::C),
            d_set: AdapterSet::empty(Space::D),
        })
    }

    /// Flattens every tensor under `unet.`, `cfr.` and `lora.` keys.
    pub fn to_map(&self) -> BTreeMap<String, Tensor<F>> {
        let mut m = BTreeMap::new();
        for (id, w) in &self.unet.weights {
            m.insert(format!("unet.{id}.w"), w.clone());
        }
        for (id, b) in &self.unet.biases {
            m.insert(format!("unet.{id}.b"), b.clone());
        }
        m.extend(self.cfr.to_map("cfr"));
        m.extend(self.c_set.to_map());
        m.extend(self.d_set.to_map());
        m
    }

    /// Visits every parameter with its [`Model::to_map`] key.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<F>)) {
        for (id, w) in self.unet.weights.iter_mut() {
            f(&format!("unet.{id}.w"), w);
        }
        for (id, b) in self.unet.biases.iter_mut() {
            f(&format!("unet.{id}.b"), b);
        }
        self.cfr.for_each_mut(|n, t| f(&format!("cfr.{n}"), t));
        for set in [&mut self.c_set, &mut self.d_set] {
            let tag = set.space.tag();
            for a in set.adapters.iter_mut() {
                f(&format!("lora.{tag}.{}.A", a.target), &mut a.a);
                f(&format!("lora.{tag}.{}.B", a.target), &mut a.b);
            }
        }
    }

    pub fn from_map(config: ModelConfig, map: &BTreeMap<String, Tensor<F>>) -> Result<Self> {
        config.validate()?;
        let mut unet = UNetParams { weights: BTreeMap::new(), biases: BTreeMap::new() };
        for (id, shape) in config.unet.layer_shapes() {
            let get = |key: String| map.get(&key).cloned().ok_or_else(|| Error::Format(format!("missing {key}")));
            let w = get(format!("unet.{id}.w"))?;
            let b = get(format!("unet.{id}.b"))?;
            if w.shape() != shape || b.shape() != [shape[0]] {
                return shape_err(format!("layer {id}: {:?} / {:?}, expected {shape:?}", w.shape(), b.shape()));
            }
            unet.weights.insert(id.to_string(), w);
            unet.biases.insert(id.to_string(), b);
        }
        let cfr = CfrParams::from_map(map, "cfr")?;
        if cfr.channels() != config.unet.latent_channels || cfr.d() != config.cfr.d {
            return shape_err("cfr parameters do not match the configuration");
        }
        let set = |space: Space| {
            let present: Vec<&str> = LAYERS
                .iter()
                .copied()
                .filter(|id| map.contains_key(&format!("lora.{}.{id}.A", space.tag())))
                .collect();
            AdapterSet::from_map(map, space, &present, config.lora.scale())
        };
        let c_set = set(Space::C)?;
        let d_set = set(Space::D)?;
        Ok(Model { config, unet, cfr, c_set, d_set })
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        let map: BTreeMap<String, Tensor<G>> = self.to_map().iter().map(|(k, v)| (k.clone(), v.cast())).collect();
        let mut m = Model::from_map(self.config.clone(), &map).expect("cast preserves structure");
        m.c_set.trainable = self.c_set.trainable;
        m.d_set.trainable = self.d_set.trainable;
        m
    }

    /// Puts every parameter on the tape; only groups enabled in `mask`
    /// require gradients.
    pub fn bind(&self, g: &mut Graph<F>, mask: &FreezeMask) -> ModelVars {
        let mut weights = BTreeMap::new();
        let mut biases = BTreeMap::new();
        for id in LAYERS {
            weights.insert(id.to_string(), g.leaf(self.unet.weights[id].clone(), mask.backbone));
            biases.insert(id.to_string(), g.leaf(self.unet.biases[id].clone(), mask.backbone));
        }
        let cfr = self.cfr.bind(g, mask.cfr);
        let mut adapters = self.c_set.bind(g, mask.c_lora);
        adapters.extend(self.d_set.bind(g, mask.d_lora));
        ModelVars { weights, biases, cfr, adapters }
    }
}

/// [`Model`] bound to a tape.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub weights: BTreeMap<String, Var>,
    pub biases: BTreeMap<String, Var>,
    pub cfr: CfrVars,
    /// C-space adapters first.
    pub adapters: Vec<AdapterVars>,
}

impl ModelVars {
    /// Every bound variable under its [`Model::to_map`] key.
    pub fn named(&self) -> BTreeMap<String, Var> {
        let mut m = BTreeMap::new();
        for (id, &v) in &self.weights {
            m.insert(format!("unet.{id}.w"), v);
        }
        for (id, &v) in &self.biases {
            m.insert(format!("unet.{id}.b"), v);
        }
        m.extend(self.cfr.named("cfr"));
        for a in &self.adapters {
            m.insert(format!("lora.{}.{}.A", a.space.tag(), a.target), a.a);
            m.insert(format!("lora.{}.{}.B", a.space.tag(), a.target), a.b);
        }
        m
    }

    fn layer<F: Real>(&self, g: &mut Graph<F>, id: &str, x: Var, path: AdapterPath) -> Result<Var> {
        let ads: Vec<&AdapterVars> = self.adapters.iter().filter(|a| a.target == id).collect();
        let (w, b) = (self.weights[id], self.biases[id]);
        match path {
            AdapterPath::Folded => {
                let w = effective_weight_var(g, w, &ads)?;
                g.conv2d(x, w, Some(b))
            }
            AdapterPath::Branch => conv_with_branches(g, x, w, Some(b), &ads),
        }
    }
}

/// ε prediction for a latent batch (single forward pass, no noise or
/// timestep input).
pub fn denoise_var<F: Real>(
    g: &mut Graph<F>,
    z: Var,
    mv: &ModelVars,
    cfg: &UNetConfig,
    path: AdapterPath,
) -> Result<Var> {
    let (_, c, h, w) = g.value(z).dims4()?;
    if c != cfg.latent_channels || h % 4 != 0 || w % 4 != 0 {
        return shape_err(format!(
            "denoise: latent {:?} needs {} channels and sides divisible by 4",
            g.shape(z),
            cfg.latent_channels
        ));
    }
    let e1 = mv.layer(g, "enc1", z, path)?;
    let e1 = g.relu(e1);
    let d = g.space_to_depth(e1, 2)?;
    let e2 = mv.layer(g, "enc2", d, path)?;
    let e2 = g.relu(e2);
    let d = g.space_to_depth(e2, 2)?;
    let m = mv.layer(g, "mid", d, path)?;
    let m = g.relu(m);
    let u = mv.layer(g, "dec1", m, path)?;
    let u = g.depth_to_space(u, 2)?;
    let u = g.add(u, e2)?;
    let d1 = g.relu(u);
    let u = mv.layer(g, "dec2", d1, path)?;
    let u = g.depth_to_space(u, 2)?;
    let u = g.add(u, e1)?;
    let d2 = g.relu(u);
    mv.layer(g, "out", d2, path)
}

pub fn denoise<F: Real>(model: &Model<F>, z: &Tensor<F>, path: AdapterPath) -> Result<Tensor<F>> {
    let mut g = Graph::new();
    let mv = model.bind(&mut g, &FreezeMask::frozen());
    let zv = g.constant(z.clone());
    let out = denoise_var(&mut g, zv, &mv, &model.config.unet, path)?;
    Ok(g.value(out).clone())
}

/// Intermediate values of one generator pass.
#[derive(Clone, Copy, Debug)]
pub struct GenerateVars {
    /// Fused latent z̄.
    pub fused: Var,
    pub eps: Var,
    /// z̄ − ε.
    pub latent: Var,
    /// Decoded, clamped frames.
    pub frames: Var,
}

/// Flow from each `prev` frame to its `cur` frame at latent resolution.
/// Bit-identical frame pairs get exactly zero flow.
pub fn latent_flow<F: Real>(prev: &Tensor<F>, cur: &Tensor<F>, cfg: &ModelConfig) -> Result<Tensor<F>> {
    if prev.shape() != cur.shape() {
        return shape_err(format!("generate: {:?} vs {:?}", prev.shape(), cur.shape()));
    }
    let (n, _, h, w) = prev.dims4()?;
    let mut parts = Vec::with_capacity(n);
    for i in 0..n {
        let (a, b) = (prev.slice_outer(i)?, cur.slice_outer(i)?);
        let f = if a == b {
            Tensor::zeros(&[1, 2, h, w])
        } else {
            estimate_flow(&a, &b, &cfg.flow)?
        };
        parts.push(rescale_flow(&f, cfg.latent.factor)?);
    }
    Tensor::stack_outer(&parts)
}

/// One-step generation for a batch of `(prev, cur)` frame pairs:
/// encode both, align the previous latent, fuse, subtract ε, decode, clamp.
/// `flow` is the latent-resolution flow from [`latent_flow`].
pub fn generate_var<F: Real>(
    g: &mut Graph<F>,
    prev: Var,
    cur: Var,
    flow: &Tensor<F>,
    mv: &ModelVars,
    cfg: &ModelConfig,
    path: AdapterPath,
) -> Result<GenerateVars> {
    if g.shape(prev) != g.shape(cur) {
        return shape_err(format!("generate: {:?} vs {:?}", g.shape(prev), g.shape(cur)));
    }
    let z_prev = cfg.latent.encode_var(g, prev)?;
    let z_cur = cfg.latent.encode_var(g, cur)?;
    let fv = g.constant(flow.clone());
    let aligned = warp_var(g, z_prev, fv)?;
    let fused = retrieve_fuse_var(g, z_cur, aligned, &mv.cfr, &cfg.cfr)?;
    let eps = denoise_var(g, fused, mv, &cfg.unet, path)?;
    let latent = g.sub(fused, eps)?;
    let decoded = cfg.latent.decode_var(g, latent)?;
    let frames = g.clamp01(decoded)?;
    Ok(GenerateVars { fused, eps, latent, frames })
}

/// Frozen-parameter generation, returning the full set of intermediates.
pub fn generate_parts<F: Real>(
    model: &Model<F>,
    prev: &Tensor<F>,
    cur: &Tensor<F>,
    path: AdapterPath,
) -> Result<[Tensor<F>; 4]> {
    let flow = latent_flow(prev, cur, &model.config)?;
    let mut g = Graph::new();
    let mv = model.bind(&mut g, &FreezeMask::frozen());
    let (p, c) = (g.constant(prev.clone()), g.constant(cur.clone()));
    let out = generate_var(&mut g, p, c, &flow, &mv, &model.config, path)?;
    Ok([out.fused, out.eps, out.latent, out.frames].map(|v| g.value(v).clone()))
}

pub fn generate<F: Real>(model: &Model<F>, prev: &Tensor<F>, cur: &Tensor<F>, path: AdapterPath) -> Result<Tensor<F>> {
    let [_, _, _, frames] = generate_parts(model, prev, cur, path)?;
    Ok(frames)
}

/// `(prev, cur)` window batches for a `(T, C, H, W)` frame stack; the first
/// frame is paired with itself.
pub fn sliding_windows<F: Real>(frames: &Tensor<F>) -> Result<(Tensor<F>, Tensor<F>)> {
    let t = frames.shape().first().copied().unwrap_or(0);
    if t == 0 || frames.rank() != 4 {
        return Err(Error::Input(format!("need a non-empty (T, C, H, W) stack, got {:?}", frames.shape())));
    }
    let prev: Vec<Tensor<F>> = (0..t).map(|i| frames.slice_outer(i.saturating_sub(1))).collect::<Result<_>>()?;
    Ok((Tensor::stack_outer(&prev)?, frames.clone()))
}

/// `HQ_n = generate(LQ_{n−1}, LQ_n)`, with the first frame self-replicated.
pub fn infer_sequence<F: Real>(model: &Model<F>, seq: &VideoSequence<F>, path: AdapterPath) -> Result<VideoSequence<F>> {
    let (prev, cur) = sliding_windows(&seq.frames)?;
    let frames = generate(model, &prev, &cur, path)?;
    Ok(VideoSequence { frames, gt_flow: seq.gt_flow.clone(), meta: seq.meta.clone() })
}
