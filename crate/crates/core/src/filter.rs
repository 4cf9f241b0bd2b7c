//! Differentiable Gaussian attention filter.
//!
//! Axis convention: `F_X` rows span the width axis and `F_Y` rows the height
//! axis; `g_X` is rescaled by the width and `g_Y` by the height. Bank
//! positions are 1-based pixel indices `m = 1..W`.

use crate::autodiff::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Backward, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::Linear;
use crate::params::{Binder, Init, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FilterMode {
    /// `V̂ = γ·F_Y·U·F_Xᵀ`, an `N×N×C` patch.
    #[default]
    Patch,
    /// Bank-kernel convolution followed by 2×2 max pooling.
    ConvPool,
    /// Filter disabled: `V̂ = U`.
    Off,
}

impl std::str::FromStr for FilterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "patch" => Ok(Self::Patch),
            "convpool" => Ok(Self::ConvPool),
            "none" | "off" => Ok(Self::Off),
            _ => Err(Error::Config(format!("attn.mode must be patch, convpool or none, got `{s}`"))),
        }
    }
}

impl std::fmt::Display for FilterMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Patch => "patch",
            Self::ConvPool => "convpool",
            Self::Off => "none",
        })
    }
}

/// Filter geometry, each a one-element tensor.
#[derive(Clone, Copy, Debug)]
pub struct FilterParams<'t> {
    pub gx: Var<'t>,
    pub gy: Var<'t>,
    pub delta: Var<'t>,
    pub sigma2: Var<'t>,
    pub gamma: Var<'t>,
}

/// Maps the raw emission `(ĝ_X, ĝ_Y, log σ², log δ̂, log γ)` to geometry
/// for an `h × w` cube and an `n × n` grid. `n = 1` uses `δ = δ̂`.
pub fn geometry<'t>(raw: Var<'t>, h: usize, w: usize, n: usize) -> Result<FilterParams<'t>> {
    if raw.shape() != [5] || n == 0 {
        return shape_err(format!("filter emission must have 5 entries with N >= 1, got {:?}", raw.shape()));
    }
    let stride = if n > 1 { (h.max(w) as f64 - 1.0) / (n as f64 - 1.0) } else { 1.0 };
    Ok(FilterParams {
        gx: raw.narrow(0, 1)?.add_scalar(1.0).scale((w as f64 + 1.0) / 2.0),
        gy: raw.narrow(1, 1)?.add_scalar(1.0).scale((h as f64 + 1.0) / 2.0),
        sigma2: raw.narrow(2, 1)?.exp(),
        delta: raw.narrow(3, 1)?.exp().scale(stride),
        gamma: raw.narrow(4, 1)?.exp(),
    })
}

/// `μ^i = g + (i − N/2 − 0.5)·δ` for `i = 1..N`.
pub fn grid_means<'t>(g: Var<'t>, delta: Var<'t>, n: usize) -> Result<Var<'t>> {
    let offsets: Vec<f64> = (1..=n).map(|i| i as f64 - n as f64 / 2.0 - 0.5).collect();
    g.tape().constant(Tensor::vector(offsets)).mul(delta)?.add(g)
}

/// Row-normalized bank `[N, extent]`: `F[i, m] ∝ exp(−(m − μ_i)²/2σ²)`.
///
/// Rows are normalized with max subtraction, so the normalizer is at least 1
/// and far off-image centers cannot underflow to NaN.
pub fn bank<'t>(mu: Var<'t>, sigma2: Var<'t>, extent: usize) -> Result<Var<'t>> {
    let tape = mu.tape();
    let n = mu.numel();
    let positions = tape.constant(Tensor::vector((1..=extent).map(|m| m as f64).collect()));
    let mu_cols = mu.reshape(&[n, 1])?.matmul(tape.constant(Tensor::ones(&[1, extent])))?;
    positions
        .sub(mu_cols)?
        .square()
        .div(sigma2.scale(2.0))?
        .neg()
        .softmax()
}

struct Patch;

fn patch_dims(fy: &Tensor, fx: &Tensor, u: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (&[n, h], &[nx, w], &[uh, uw, c]) = (fy.shape(), fx.shape(), u.shape()) else {
        return shape_err(format!("patch wants [N,H], [N,W], [H,W,C]; got {:?}, {:?}, {:?}", fy.shape(), fx.shape(), u.shape()));
    };
    if n != nx || h != uh || w != uw {
        return shape_err(format!("patch banks {:?}/{:?} do not match cube {:?}", fy.shape(), fx.shape(), u.shape()));
    }
    Ok((n, h, w, c))
}

/// `T[j, m, c] = Σ_n F_Y[j, n]·U[n, m, c]`.
fn rows_pass(fy: &[f64], u: &[f64], n: usize, h: usize, wc: usize) -> Vec<f64> {
    let mut t = vec![0.0; n * wc];
    gemm_acc(fy, u, &mut t, n, h, wc);
    t
}

impl Backward for Patch {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (fy, fx, u, gamma) = (inputs[0], inputs[1], inputs[2], inputs[3].item());
        let (n, h, w, c) = patch_dims(fy, fx, u).expect("checked in forward");
        let t = rows_pass(fy.data(), u.data(), n, h, w * c);
        let g = grad.data();
        let (fxd, fyd, ud) = (fx.data(), fy.data(), u.data());
        let mut dt = vec![0.0; n * w * c];
        let mut dfx = vec![0.0; n * w];
        let mut dgamma = 0.0;
        for j in 0..n {
            for i in 0..n {
                let go = &g[(j * n + i) * c..(j * n + i + 1) * c];
                for m in 0..w {
                    let f = fxd[i * w + m];
                    let tr = &t[(j * w + m) * c..(j * w + m + 1) * c];
                    let dtr = &mut dt[(j * w + m) * c..(j * w + m + 1) * c];
                    let mut acc = 0.0;
                    for k in 0..c {
                        dtr[k] += gamma * f * go[k];
                        acc += go[k] * tr[k];
                    }
                    dfx[i * w + m] += gamma * acc;
                    dgamma += f * acc;
                }
            }
        }
        // dF_Y = dT·Uᵀ and dU = F_Yᵀ·dT over the flattened (m, c) axis.
        let mut dfy = vec![0.0; n * h];
        gemm_nt_acc(&dt, ud, &mut dfy, n, h, w * c);
        let mut du = vec![0.0; h * w * c];
        gemm_tn_acc(fyd, &dt, &mut du, n, h, w * c);
        vec![
            Some(Tensor::new(fy.shape(), dfy).expect("shape")),
            Some(Tensor::new(fx.shape(), dfx).expect("shape")),
            Some(Tensor::new(u.shape(), du).expect("shape")),
            Some(Tensor::new(inputs[3].shape(), vec![dgamma]).expect("shape")),
        ]
    }
}

/// `V̂[j, i, c] = γ·Σ_n Σ_m F_Y[j, n]·F_X[i, m]·U[n, m, c]`, shape `[N, N, C]`
/// (row `j` from `F_Y`, column `i` from `F_X`).
pub fn apply_patch<'t>(u: Var<'t>, fy: Var<'t>, fx: Var<'t>, gamma: Var<'t>) -> Result<Var<'t>> {
    let value = {
        let (fyv, fxv, uv, gv) = (fy.value_ref(), fx.value_ref(), u.value_ref(), gamma.value_ref());
        let (n, h, w, c) = patch_dims(&fyv, &fxv, &uv)?;
        if gv.numel() != 1 {
            return shape_err("patch gain must be a single value");
        }
        let gamma = gv.item();
        let t = rows_pass(fyv.data(), uv.data(), n, h, w * c);
        let mut out = vec![0.0; n * n * c];
        for j in 0..n {
            for i in 0..n {
                let o = &mut out[(j * n + i) * c..(j * n + i + 1) * c];
                for m in 0..w {
                    let f = gamma * fxv.data()[i * w + m];
                    for (ok, tk) in o.iter_mut().zip(&t[(j * w + m) * c..(j * w + m + 1) * c]) {
                        *ok += f * tk;
                    }
                }
            }
        }
        Tensor::new(&[n, n, c], out)?
    };
    Ok(u.tape().record(value, &[fy, fx, u, gamma], Patch))
}

struct ClampConv {
    axis: usize,
}

/// Index of tap `k` for output `p` on an axis of length `len` with kernel
/// length `klen`, clamped to the edge.
fn clamp_tap(p: usize, k: usize, klen: usize, len: usize) -> usize {
    let src = p as isize + k as isize - ((klen as isize - 1) / 2);
    src.clamp(0, len as isize - 1) as usize
}

fn clamp_conv_apply(x: &Tensor, k: &[f64], axis: usize, mut visit: impl FnMut(usize, usize, f64)) {
    let s = x.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let len = s[axis];
    for y in 0..h {
        for xx in 0..w {
            let p = if axis == 0 { y } else { xx };
            for (t, &kv) in k.iter().enumerate() {
                let q = clamp_tap(p, t, k.len(), len);
                let (sy, sx) = if axis == 0 { (q, xx) } else { (y, q) };
                for ch in 0..c {
                    visit((y * w + xx) * c + ch, (sy * w + sx) * c + ch, kv);
                }
            }
        }
    }
}

impl Backward for ClampConv {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (x, k) = (inputs[0], inputs[1]);
        let s = x.shape();
        let (h, w, c) = (s[0], s[1], s[2]);
        let len = s[self.axis];
        let mut dx = vec![0.0; x.numel()];
        clamp_conv_apply(x, k.data(), self.axis, |o, i, kv| dx[i] += kv * grad.data()[o]);
        let mut dk = vec![0.0; k.numel()];
        for y in 0..h {
            for xx in 0..w {
                let p = if self.axis == 0 { y } else { xx };
                for (t, dkt) in dk.iter_mut().enumerate() {
                    let q = clamp_tap(p, t, k.numel(), len);
                    let (sy, sx) = if self.axis == 0 { (q, xx) } else { (y, q) };
                    let (o, i) = ((y * w + xx) * c, (sy * w + sx) * c);
                    *dkt += (0..c).map(|ch| grad.data()[o + ch] * x.data()[i + ch]).sum::<f64>();
                }
            }
        }
        vec![
            Some(Tensor::new(x.shape(), dx).expect("shape")),
            Some(Tensor::new(k.shape(), dk).expect("shape")),
        ]
    }
}

/// 1-D cross-correlation of `[H, W, C]` along `axis` (0 = height, 1 = width)
/// with a kernel as long as that axis, centered at tap `(K − 1)/2`, clamping
/// reads to the edge so constant inputs stay constant.
pub fn clamp_conv1d<'t>(x: Var<'t>, kernel: Var<'t>, axis: usize) -> Result<Var<'t>> {
    let value = {
        let xv = x.value_ref();
        let kv = kernel.value_ref();
        if xv.rank() != 3 || axis > 1 || kv.rank() != 1 {
            return shape_err(format!("clamp_conv1d wants [H,W,C] and [K], got {:?}, {:?}", xv.shape(), kv.shape()));
        }
        let mut out = vec![0.0; xv.numel()];
        clamp_conv_apply(&xv, kv.data(), axis, |o, i, k| out[o] += k * xv.data()[i]);
        Tensor::new(xv.shape(), out)?
    };
    Ok(x.tape().record(value, &[x, kernel], ClampConv { axis }))
}

/// Convolve-and-pool: the mean over all `N²` bank pairs of the separable
/// response `U ∗ F_X[i] ∗ F_Y[j]`, which by linearity is one separable pass
/// with the mean bank rows, then 2×2 max pooling.
pub fn apply_convolve_pool<'t>(u: Var<'t>, fy: Var<'t>, fx: Var<'t>) -> Result<Var<'t>> {
    let us = u.shape();
    if us.len() != 3 || fx.shape().get(1) != Some(&us[1]) || fy.shape().get(1) != Some(&us[0]) {
        return shape_err(format!("convpool banks {:?}/{:?} do not match cube {us:?}", fy.shape(), fx.shape()));
    }
    let horizontal = clamp_conv1d(u, fx.mean_axis0()?, 1)?;
    clamp_conv1d(horizontal, fy.mean_axis0()?, 0)?.max_pool2()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterConfig {
    pub n: usize,
    pub mode: FilterMode,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { n: 4, mode: FilterMode::Patch }
    }
}

impl FilterConfig {
    /// Extents of `V̂` for an input cube `(H, W, C)`.
    pub fn output_shape(&self, cube: (usize, usize, usize)) -> (usize, usize, usize) {
        match self.mode {
            FilterMode::Patch => (self.n, self.n, cube.2),
            FilterMode::ConvPool => (cube.0 / 2, cube.1 / 2, cube.2),
            FilterMode::Off => cube,
        }
    }
}

/// Banks and output of one filter application.
#[derive(Clone, Copy, Debug)]
pub struct FilterOut<'t> {
    pub params: FilterParams<'t>,
    pub fx: Var<'t>,
    pub fy: Var<'t>,
    pub vhat: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct AttentionFilter {
    pub config: FilterConfig,
    pub emit: Linear,
    pub cube: (usize, usize, usize),
}

impl AttentionFilter {
    pub fn new(store: &mut ParamStore, config: FilterConfig, cube: (usize, usize, usize), state: usize) -> Result<Self> {
        let (h, w, _) = cube;
        if config.n == 0 || h < config.n || w < config.n {
            return Err(Error::Config(format!("attention grid N={} does not fit a {h}x{w} cube", config.n)));
        }
        let emit = Linear::with_init(store, "attn.emit", state, 5, Init::Uniform(0.05), Some(Init::Zeros))?;
        Ok(Self { config, emit, cube })
    }

    pub fn output_shape(&self) -> (usize, usize, usize) {
        self.config.output_shape(self.cube)
    }

    /// Emits the geometry from `state`, builds both banks and filters `u`.
    pub fn apply<'t>(&self, b: &Binder<'t, '_>, state: Var<'t>, u: Var<'t>) -> Result<FilterOut<'t>> {
        let (h, w, _) = self.cube;
        let n = self.config.n;
        let params = geometry(self.emit.forward(b, state)?, h, w, n)?;
        let fx = bank(grid_means(params.gx, params.delta, n)?, params.sigma2, w)?;
        let fy = bank(grid_means(params.gy, params.delta, n)?, params.sigma2, h)?;
        let vhat = match self.config.mode {
            FilterMode::Patch => apply_patch(u, fy, fx, params.gamma)?,
            FilterMode::ConvPool => apply_convolve_pool(u, fy, fx)?,
            FilterMode::Off => u,
        };
        Ok(FilterOut { params, fx, fy, vhat })
    }
}
