//! Recurrent spatial transformation: θ from the loop state, the affine grid
//! `P_θ·B`, and kernel sampling of the feature cube.
//!
//! Normalized coordinates span `[-1, 1]` with the corner sites at the ends,
//! so a cube of width `W` maps `x` to pixel `(x + 1)/2·(W − 1)`.

use std::f64::consts::PI;

use crate::autodiff::{Backward, Var};
use crate::error::{shape_err, Result};
use crate::nn::{GruCell, Linear};
use crate::params::{Binder, Init, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const IDENTITY_THETA: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum KernelKind {
    #[default]
    Bilinear,
    /// Isotropic Gaussian density with a learnable log σ per axis.
    Gaussian,
}

/// Sampling kernel handed to [`sample`].
#[derive(Clone, Copy, Debug)]
pub enum Kernel<'t> {
    Bilinear,
    /// `[log σ_x, log σ_y]`.
    Gaussian(Var<'t>),
}

/// Canonical target grid `B` as `[H·W, 3]` rows `(x_j, y_i, 1)`.
pub fn canonical_grid(out_h: usize, out_w: usize) -> Tensor {
    let lin = |k: usize, n: usize| if n == 1 { 0.0 } else { -1.0 + 2.0 * k as f64 / (n - 1) as f64 };
    let mut data = Vec::with_capacity(out_h * out_w * 3);
    for i in 0..out_h {
        for j in 0..out_w {
            data.extend([lin(j, out_w), lin(i, out_h), 1.0]);
        }
    }
    Tensor::new(&[out_h * out_w, 3], data).expect("grid shape")
}

/// Source coordinates `[out_h, out_w, 2]`, last axis `(x, y)`.
pub fn build_grid<'t>(theta: Var<'t>, out_h: usize, out_w: usize) -> Result<Var<'t>> {
    if theta.shape() != [6] {
        return shape_err(format!("theta must have 6 entries, got {:?}", theta.shape()));
    }
    let b = theta.tape().constant(canonical_grid(out_h, out_w));
    let pt = theta.reshape(&[2, 3])?.transpose()?;
    b.matmul(pt)?.reshape(&[out_h, out_w, 2])
}

fn to_pixel(x: f64, extent: usize) -> f64 {
    (x + 1.0) * 0.5 * (extent as f64 - 1.0)
}

fn gauss(d: f64, sigma: f64) -> f64 {
    (-d * d / (2.0 * sigma * sigma)).exp() / ((2.0 * PI).sqrt() * sigma)
}

struct Sample {
    gaussian: bool,
}

struct Dims {
    h: usize,
    w: usize,
    c: usize,
    sites: usize,
}

fn dims(cube: &Tensor, grid: &Tensor) -> Result<Dims> {
    let &[h, w, c] = cube.shape() else {
        return shape_err(format!("sample wants a [H,W,C] cube, got {:?}", cube.shape()));
    };
    let gs = grid.shape();
    if gs.len() != 3 || gs[2] != 2 {
        return shape_err(format!("sample wants a [H,W,2] grid, got {gs:?}"));
    }
    Ok(Dims { h, w, c, sites: gs[0] * gs[1] })
}

fn bilinear_taps(p: f64) -> (isize, f64) {
    let p0 = p.floor();
    (p0 as isize, p - p0)
}

impl Backward for Sample {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (cube, grid) = (inputs[0], inputs[1]);
        let d = dims(cube, grid).expect("checked in forward");
        let (h, w, c) = (d.h, d.w, d.c);
        let v = cube.data();
        let mut dv = vec![0.0; v.len()];
        let mut dg = vec![0.0; grid.numel()];
        let mut dsig = [0.0; 2];
        let dot = |n: usize, m: usize, g: &[f64]| -> f64 {
            v[(n * w + m) * c..(n * w + m + 1) * c].iter().zip(g).map(|(a, b)| a * b).sum()
        };
        let (sx, sy) = ((w as f64 - 1.0) * 0.5, (h as f64 - 1.0) * 0.5);
        for s in 0..d.sites {
            let g = &grad.data()[s * c..(s + 1) * c];
            let (px, py) = (to_pixel(grid.data()[2 * s], w), to_pixel(grid.data()[2 * s + 1], h));
            let (mut dpx, mut dpy) = (0.0, 0.0);
            if self.gaussian {
                let ls = inputs[2].data();
                let (sgx, sgy) = (ls[0].exp(), ls[1].exp());
                let kx: Vec<f64> = (0..w).map(|m| gauss(px - m as f64, sgx)).collect();
                let ky: Vec<f64> = (0..h).map(|n| gauss(py - n as f64, sgy)).collect();
                for n in 0..h {
                    let dyn_ = py - n as f64;
                    for m in 0..w {
                        let wgt = ky[n] * kx[m];
                        if wgt == 0.0 {
                            continue;
                        }
                        let base = (n * w + m) * c;
                        for (dvk, gk) in dv[base..base + c].iter_mut().zip(g) {
                            *dvk += wgt * gk;
                        }
                        let e = dot(n, m, g);
                        let dx = px - m as f64;
                        dpx += -dx / (sgx * sgx) * wgt * e;
                        dpy += -dyn_ / (sgy * sgy) * wgt * e;
                        dsig[0] += (dx * dx / (sgx * sgx) - 1.0) * wgt * e;
                        dsig[1] += (dyn_ * dyn_ / (sgy * sgy) - 1.0) * wgt * e;
                    }
                }
            } else {
                let (x0, fx) = bilinear_taps(px);
                let (y0, fy) = bilinear_taps(py);
                for (dy, wy, sy_) in [(0, 1.0 - fy, -1.0), (1, fy, 1.0)] {
                    let n = y0 + dy;
                    if n < 0 || n >= h as isize {
                        continue;
                    }
                    for (dx, wx, sx_) in [(0, 1.0 - fx, -1.0), (1, fx, 1.0)] {
                        let m = x0 + dx;
                        if m < 0 || m >= w as isize {
                            continue;
                        }
                        let (n, m) = (n as usize, m as usize);
                        let base = (n * w + m) * c;
                        for (dvk, gk) in dv[base..base + c].iter_mut().zip(g) {
                            *dvk += wy * wx * gk;
                        }
                        let e = dot(n, m, g);
                        dpx += wy * sx_ * e;
                        dpy += wx * sy_ * e;
                    }
                }
            }
            dg[2 * s] = dpx * sx;
            dg[2 * s + 1] = dpy * sy;
        }
        let mut out = vec![
            Some(Tensor::new(cube.shape(), dv).expect("shape")),
            Some(Tensor::new(grid.shape(), dg).expect("shape")),
        ];
        if self.gaussian {
            out.push(Some(Tensor::vector(dsig.to_vec())));
        }
        out
    }
}

/// Warps `cube [H, W, C]` onto `grid [H_U, W_U, 2]`:
/// `U[i, c] = Σ_n Σ_m V[n, m, c]·k(x_i − m)·k(y_i − n)` with pixel-space
/// coordinates and zero padding outside the cube. Gradients reach the cube,
/// the grid and (for the Gaussian kernel) log σ.
///
/// The bilinear kernel is `k(d) = max(0, 1 − |d|)`; at integer coordinates
/// its coordinate derivative is taken from the right.
pub fn sample<'t>(cube: Var<'t>, grid: Var<'t>, kernel: Kernel<'t>) -> Result<Var<'t>> {
    let value = {
        let cv = cube.value_ref();
        let gv = grid.value_ref();
        let d = dims(&cv, &gv)?;
        let (h, w, c) = (d.h, d.w, d.c);
        let v = cv.data();
        let mut out = vec![0.0; d.sites * c];
        let sigmas = match kernel {
            Kernel::Bilinear => None,
            Kernel::Gaussian(ls) => {
                let ls = ls.value_ref();
                if ls.shape() != [2] {
                    return shape_err(format!("gaussian kernel wants [2] log sigmas, got {:?}", ls.shape()));
                }
                Some((ls.data()[0].exp(), ls.data()[1].exp()))
            }
        };
        for s in 0..d.sites {
            let (px, py) = (to_pixel(gv.data()[2 * s], w), to_pixel(gv.data()[2 * s + 1], h));
            let o = &mut out[s * c..(s + 1) * c];
            let mut tap = |n: usize, m: usize, wgt: f64| {
                for (ok, vk) in o.iter_mut().zip(&v[(n * w + m) * c..(n * w + m + 1) * c]) {
                    *ok += wgt * vk;
                }
            };
            match sigmas {
                Some((sgx, sgy)) => {
                    let kx: Vec<f64> = (0..w).map(|m| gauss(px - m as f64, sgx)).collect();
                    for n in 0..h {
                        let ky = gauss(py - n as f64, sgy);
                        for (m, &k) in kx.iter().enumerate() {
                            tap(n, m, ky * k);
                        }
                    }
                }
                None => {
                    let (x0, fx) = bilinear_taps(px);
                    let (y0, fy) = bilinear_taps(py);
                    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                            let (n, m) = (y0 + dy, x0 + dx);
                            if n >= 0 && m >= 0 && (n as usize) < h && (m as usize) < w && wy * wx != 0.0 {
                                tap(n as usize, m as usize, wy * wx);
                            }
                        }
                    }
                }
            }
        }
        let gs = gv.shape();
        Tensor::new(&[gs[0], gs[1], c], out)?
    };
    Ok(match kernel {
        Kernel::Bilinear => cube.tape().record(value, &[cube, grid], Sample { gaussian: false }),
        Kernel::Gaussian(ls) => cube.tape().record(value, &[cube, grid, ls], Sample { gaussian: true }),
    })
}

/// Scales each site of `cube [H, W, C]` by `sigmoid(logits)`, shared over channels.
pub fn learned_mask<'t>(cube: Var<'t>, logits: Var<'t>) -> Result<Var<'t>> {
    let shape = cube.shape();
    if shape.len() != 3 || logits.numel() != shape[0] * shape[1] {
        return shape_err(format!("mask of {} logits for cube {shape:?}", logits.numel()));
    }
    cube.mul_leading(logits.reshape(&shape[..2])?.sigmoid())
}

#[derive(Clone, Debug, PartialEq)]
pub struct StlConfig {
    pub kernel: KernelKind,
    pub hidden: usize,
    pub mask: bool,
}

impl Default for StlConfig {
    fn default() -> Self {
        Self { kernel: KernelKind::Bilinear, hidden: 32, mask: true }
    }
}

/// Everything the θ cell emits for one loop iteration.
#[derive(Clone, Copy, Debug)]
pub struct ThetaOut<'t> {
    pub theta: Var<'t>,
    pub mask_logits: Option<Var<'t>>,
    /// Advanced GRU state.
    pub state: Var<'t>,
}

/// GRU over `[pool(V_t), h_t, pool(V̂_t)]` with a linear θ head (zero
/// weights, identity bias) and an optional mask head.
#[derive(Clone, Debug)]
pub struct SpatialTransformer {
    pub config: StlConfig,
    pub gru: GruCell,
    pub theta_head: Linear,
    pub mask_head: Option<Linear>,
    pub log_sigma: Option<ParamId>,
    pub cube: (usize, usize, usize),
    pub feedback: usize,
    pub vhat_channels: usize,
}

impl SpatialTransformer {
    /// `cube` is the `(H, W, C)` of the warped input, `feedback` the decoder
    /// hidden size and `vhat_channels` the channels of the attended cube.
    pub fn new(
        store: &mut ParamStore,
        config: StlConfig,
        cube: (usize, usize, usize),
        feedback: usize,
        vhat_channels: usize,
    ) -> Result<Self> {
        let hs = config.hidden;
        let gru = GruCell::new(store, "stl.gru", cube.2 + feedback + vhat_channels, hs)?;
        let theta_head = Linear::with_init(store, "stl.theta", hs, 6, Init::Zeros, Some(Init::Values(IDENTITY_THETA.to_vec())))?;
        let mask_head = if config.mask {
            Some(Linear::with_init(store, "stl.mask", hs, cube.0 * cube.1, Init::Zeros, Some(Init::Zeros))?)
        } else {
            None
        };
        let log_sigma = match config.kernel {
            KernelKind::Gaussian => Some(store.add("stl.log_sigma", &[2], Init::Const(0.5f64.ln()))?),
            KernelKind::Bilinear => None,
        };
        Ok(Self { config, gru, theta_head, mask_head, log_sigma, cube, feedback, vhat_channels })
    }

    /// Advances the θ cell. `state` is the previous GRU state (zeros per image).
    pub fn compute_theta<'t>(
        &self,
        b: &Binder<'t, '_>,
        state: Var<'t>,
        v_summary: Var<'t>,
        h_feedback: Var<'t>,
        vhat_summary: Var<'t>,
    ) -> Result<ThetaOut<'t>> {
        let (c, f, vc) = (self.cube.2, self.feedback, self.vhat_channels);
        if v_summary.shape() != [c] || h_feedback.shape() != [f] || vhat_summary.shape() != [vc] {
            return shape_err(format!(
                "theta cell wants [{c}], [{f}], [{vc}]; got {:?}, {:?}, {:?}",
                v_summary.shape(),
                h_feedback.shape(),
                vhat_summary.shape()
            ));
        }
        let x = Var::concat(&[v_summary, h_feedback, vhat_summary])?;
        let state = self.gru.step(b, x, state)?;
        let theta = self.theta_head.forward(b, state)?;
        let mask_logits = match &self.mask_head {
            Some(head) => Some(head.forward(b, state)?),
            None => None,
        };
        Ok(ThetaOut { theta, mask_logits, state })
    }

    /// `U = mask ⊙ sample(V, P_θ·B)` at the input extents.
    pub fn warp<'t>(&self, b: &Binder<'t, '_>, cube: Var<'t>, out: &ThetaOut<'t>) -> Result<Var<'t>> {
        let (h, w, _) = self.cube;
        let grid = build_grid(out.theta, h, w)?;
        let kernel = match self.log_sigma {
            Some(id) => Kernel::Gaussian(b.var(id)),
            None => Kernel::Bilinear,
        };
        let u = sample(cube, grid, kernel)?;
        match out.mask_logits {
            Some(logits) => learned_mask(u, logits),
            None => Ok(u),
        }
    }

    pub fn initial_state<'t>(&self, b: &Binder<'t, '_>) -> Var<'t> {
        b.tape().constant(Tensor::zeros(&[self.config.hidden]))
    }
}

/// Global average pool of `[H, W, C]` to `[C]`.
pub fn channel_mean<'t>(cube: Var<'t>) -> Result<Var<'t>> {
    let s = cube.shape();
    if s.len() != 3 {
        return shape_err(format!("channel_mean wants [H,W,C], got {s:?}"));
    }
    cube.reshape(&[s[0] * s[1], s[2]])?.mean_axis0()
}
