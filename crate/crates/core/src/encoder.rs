//! Small trainable CNN producing the feature cube and its annotation set.

use crate::autodiff::{ConvAlgo, ConvSpec, Var};
use crate::error::{shape_err, Result};
use crate::params::{Binder, Init, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub height: usize,
    pub width: usize,
    /// Output channels per 3×3 block. Every block but the last is followed
    /// by 2×2 max pooling.
    pub channels: Vec<usize>,
    pub algo: ConvAlgo,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { height: 32, width: 32, channels: vec![16, 32, 32], algo: ConvAlgo::Im2col }
    }
}

impl EncoderConfig {
    /// Extents `(H, W, C)` of the produced cube.
    pub fn cube_shape(&self) -> (usize, usize, usize) {
        let pools = self.channels.len().saturating_sub(1) as u32;
        (self.height >> pools, self.width >> pools, *self.channels.last().unwrap_or(&3))
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    kernels: Vec<ParamId>,
    biases: Vec<ParamId>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, config: EncoderConfig) -> Result<Self> {
        let mut kernels = Vec::new();
        let mut biases = Vec::new();
        let mut cin = 3;
        for (i, &co) in config.channels.iter().enumerate() {
            kernels.push(store.add(&format!("enc.conv{i}.k"), &[3, 3, cin, co], Init::He { fan_in: 9 * cin })?);
            biases.push(store.add(&format!("enc.conv{i}.b"), &[co], Init::Zeros)?);
            cin = co;
        }
        Ok(Self { config, kernels, biases })
    }

    /// Maps a `[H, W, 3]` image in `[0, 1]` to `(cube [H', W', C], annotations [H'·W', C])`.
    /// Annotation row `i·W' + j` is cube site `(i, j)`.
    pub fn encode<'t>(&self, b: &Binder<'t, '_>, image: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let want = [self.config.height, self.config.width, 3];
        if image.shape() != want {
            return shape_err(format!("encoder expects image {want:?}, got {:?}", image.shape()));
        }
        let spec = ConvSpec { algo: self.config.algo, ..ConvSpec::same3x3() };
        let mut x = image;
        let last = self.kernels.len() - 1;
        for (i, (&k, &bias)) in self.kernels.iter().zip(&self.biases).enumerate() {
            x = x.conv2d(b.var(k), spec)?.add(b.var(bias))?.relu();
            if i < last {
                x = x.max_pool2()?;
            }
        }
        let (h, w, c) = self.config.cube_shape();
        let annotations = x.reshape(&[h * w, c])?;
        Ok((x, annotations))
    }
}
