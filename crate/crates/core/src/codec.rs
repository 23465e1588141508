//! Frozen, lossless pixel ↔ latent transform.
//!
//! Encoding is a space-to-depth rearrangement by `factor`: an N×3×H×W frame
//! becomes an N×(3·f²)×(H/f)×(W/f) latent holding exactly the same values.
//! Decoding is the inverse permutation, so `decode(encode(x)) == x` bit-exactly.

use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentConfig {
    pub factor: usize,
    pub pixel_channels: usize,
}

impl Default for LatentConfig {
    fn default() -> Self {
        LatentConfig { factor: 2, pixel_channels: 3 }
    }
}

impl LatentConfig {
    pub fn latent_channels(&self) -> usize {
        self.pixel_channels * self.factor * self.factor
    }

    fn check_frame(&self, shape: &[usize]) -> Result<()> {
        match shape {
            [_, c, h, w] if *c == self.pixel_channels && h % self.factor == 0 && w % self.factor == 0 => {
                Ok(())
            }
            _ => shape_err(format!(
                "encode: frame {shape:?} needs {} channels and sides divisible by {}",
                self.pixel_channels, self.factor
            )),
        }
    }

    fn check_latent(&self, shape: &[usize]) -> Result<()> {
        match shape {
            [_, c, _, _] if *c == self.latent_channels() => Ok(()),
            _ => shape_err(format!(
                "decode: latent {shape:?} needs {} channels",
                self.latent_channels()
            )),
        }
    }

    pub fn encode<F: Real>(&self, frames: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_frame(frames.shape())?;
        let (n, c, h, w) = frames.dims4()?;
        let f = self.factor;
        let map = kernels::space_to_depth_map(n, c, h, w, f);
        let src = frames.data();
        Tensor::new(vec![n, c * f * f, h / f, w / f], map.iter().map(|&i| src[i]).collect())
    }

    pub fn decode<F: Real>(&self, latent: &Tensor<F>) -> Result<Tensor<F>> {
        self.check_latent(latent.shape())?;
        let (n, _, h, w) = latent.dims4()?;
        let f = self.factor;
        let c = self.pixel_channels;
        let map = kernels::space_to_depth_map(n, c, h * f, w * f, f);
        let mut out = vec![F::zero(); latent.numel()];
        for (i, &j) in map.iter().enumerate() {
            out[j] = latent.data()[i];
        }
        Tensor::new(vec![n, c, h * f, w * f], out)
    }

    /// Encoding recorded on a tape.
    pub fn encode_var<F: Real>(&self, g: &mut Graph<F>, frames: Var) -> Result<Var> {
        self.check_frame(g.shape(frames))?;
        g.space_to_depth(frames, self.factor)
    }

    /// Decoding recorded on a tape.
    pub fn decode_var<F: Real>(&self, g: &mut Graph<F>, latent: Var) -> Result<Var> {
        self.check_latent(g.shape(latent))?;
        g.depth_to_space(latent, self.factor)
    }
}
