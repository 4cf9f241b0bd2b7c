//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ric_core::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// A θ whose grid stays inside `[-1, 1]`: small rotation/scale plus shift.
pub fn random_theta(rng: &mut ChaCha8Rng) -> [f64; 6] {
    let a = rng.random_range(0.5..0.8);
    let e = rng.random_range(0.5..0.8);
    let b = rng.random_range(-0.1..0.1);
    let d = rng.random_range(-0.1..0.1);
    let c = rng.random_range(-0.1..0.1);
    let f = rng.random_range(-0.1..0.1);
    [a, b, c, d, e, f]
}

/// Direct sum `Σ_n Σ_m V[n,m,c]·k(px − m)·k(py − n)` over the whole cube.
pub fn warp_bruteforce(cube: &Tensor, grid: &Tensor, k: impl Fn(f64, usize) -> f64) -> Tensor {
    let (h, w, c) = (cube.shape()[0], cube.shape()[1], cube.shape()[2]);
    let (hu, wu) = (grid.shape()[0], grid.shape()[1]);
    let mut out = Tensor::zeros(&[hu, wu, c]);
    for i in 0..hu {
        for j in 0..wu {
            let px = (grid.at(&[i, j, 0]) + 1.0) / 2.0 * (w as f64 - 1.0);
            let py = (grid.at(&[i, j, 1]) + 1.0) / 2.0 * (h as f64 - 1.0);
            for ch in 0..c {
                let mut acc = 0.0;
                for n in 0..h {
                    for m in 0..w {
                        acc += cube.at(&[n, m, ch]) * k(px - m as f64, 0) * k(py - n as f64, 1);
                    }
                }
                out.set(&[i, j, ch], acc);
            }
        }
    }
    out
}

pub fn bilinear_k(d: f64, _axis: usize) -> f64 {
    (1.0 - d.abs()).max(0.0)
}

pub fn gaussian_k(sigmas: [f64; 2]) -> impl Fn(f64, usize) -> f64 {
    move |d, axis| {
        let s = sigmas[axis];
        (-d * d / (2.0 * s * s)).exp() / ((2.0 * std::f64::consts::PI).sqrt() * s)
    }
}

/// Triple loop `γ·Σ_n Σ_m F_Y[j,n]·F_X[i,m]·U[n,m,c]`.
pub fn patch_bruteforce(u: &Tensor, fy: &Tensor, fx: &Tensor, gamma: f64) -> Tensor {
    let (h, w, c) = (u.shape()[0], u.shape()[1], u.shape()[2]);
    let n = fy.shape()[0];
    let mut out = Tensor::zeros(&[n, n, c]);
    for j in 0..n {
        for i in 0..n {
            for ch in 0..c {
                let mut acc = 0.0;
                for r in 0..h {
                    for m in 0..w {
                        acc += fy.at(&[j, r]) * fx.at(&[i, m]) * u.at(&[r, m, ch]);
                    }
                }
                out.set(&[j, i, ch], gamma * acc);
            }
        }
    }
    out
}

/// Stacks every `(F_Y[j], F_X[i])` separable response with edge clamping,
/// averages the `N²` stack, then max-pools 2×2.
pub fn convpool_bruteforce(u: &Tensor, fy: &Tensor, fx: &Tensor) -> Tensor {
    let (h, w, c) = (u.shape()[0], u.shape()[1], u.shape()[2]);
    let n = fy.shape()[0];
    let (oy, ox) = ((h as isize - 1) / 2, (w as isize - 1) / 2);
    let clamp = |v: isize, len: usize| v.clamp(0, len as isize - 1) as usize;
    let mut avg = Tensor::zeros(&[h, w, c]);
    for j in 0..n {
        for i in 0..n {
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        let mut acc = 0.0;
                        for a in 0..h {
                            for b in 0..w {
                                let sy = clamp(y as isize + a as isize - oy, h);
                                let sx = clamp(x as isize + b as isize - ox, w);
                                acc += fy.at(&[j, a]) * fx.at(&[i, b]) * u.at(&[sy, sx, ch]);
                            }
                        }
                        let prev = avg.at(&[y, x, ch]);
                        avg.set(&[y, x, ch], prev + acc / (n * n) as f64);
                    }
                }
            }
        }
    }
    let mut out = Tensor::zeros(&[h / 2, w / 2, c]);
    for y in 0..h / 2 {
        for x in 0..w / 2 {
            for ch in 0..c {
                let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|&(dy, dx)| avg.at(&[2 * y + dy, 2 * x + dx, ch]))
                    .fold(f64::NEG_INFINITY, f64::max);
                out.set(&[y, x, ch], m);
            }
        }
    }
    out
}

/// Row-normalized Gaussian bank evaluated pointwise.
pub fn bank_bruteforce(mu: &[f64], sigma2: f64, extent: usize) -> Tensor {
    let mut out = Tensor::zeros(&[mu.len(), extent]);
    for (i, &m0) in mu.iter().enumerate() {
        let raw: Vec<f64> = (1..=extent).map(|m| (-(m as f64 - m0).powi(2) / (2.0 * sigma2)).exp()).collect();
        let z: f64 = raw.iter().sum();
        for (m, r) in raw.iter().enumerate() {
            out.set(&[i, m], r / z);
        }
    }
    out
}

/// Closed-form-free KL estimate `E_q[log q − log p]` by sampling.
pub fn kl_monte_carlo(rng: &mut ChaCha8Rng, mq: &[f64], sq: &[f64], mp: &[f64], sp: &[f64], samples: usize) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    let log_n = |x: f64, m: f64, s: f64| -0.5 * ((x - m) / s).powi(2) - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
    let mut total = 0.0;
    for _ in 0..samples {
        for d in 0..mq.len() {
            let e: f64 = StandardNormal.sample(rng);
            let x = mq[d] + sq[d] * e;
            total += log_n(x, mq[d], sq[d]) - log_n(x, mp[d], sp[d]);
        }
    }
    total / samples as f64
}

use ric_core::autodiff::Tape;
use ric_core::decoder::DecoderConfig;
use ric_core::encoder::EncoderConfig;
use ric_core::filter::{FilterConfig, FilterMode};
use ric_core::losses::VaeConfig;
use ric_core::model::ModelConfig;
use ric_core::params::{Binder, ParamGrads, ParamStore};
use ric_core::stl::{KernelKind, StlConfig};

/// Miniature model: 8×8 image, 4×4×2 cube, everything a few units wide.
pub fn tiny_config(kernel: KernelKind, mode: FilterMode, loops: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig { height: 8, width: 8, channels: vec![2, 2], ..EncoderConfig::default() },
        stl: StlConfig { kernel, hidden: 3, mask: true },
        filter: FilterConfig { n: 2, mode },
        text_dim: 3,
        decoder: DecoderConfig { hidden: 4, attn_dim: 3, k: 1 },
        vae: VaeConfig { latent: 2, hidden: 3 },
        loops,
    }
}

/// Moves every parameter off its initial value so zero-initialised heads
/// do not hide terms from the check.
pub fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for x in store.get_mut(id).data_mut() {
            *x += rng.random_range(-scale..scale);
        }
    }
}

/// Central differences of `loss` w.r.t. up to `per_param` random entries of
/// every parameter, compared with `analytic`. The error is relative to the
/// largest analytic entry checked, which keeps round-off on near-zero
/// entries from dominating.
pub fn fd_params(
    store: &ParamStore,
    analytic: &ParamGrads,
    per_param: usize,
    rng: &mut ChaCha8Rng,
    loss: impl Fn(&ParamStore) -> f64,
) -> f64 {
    let h = 1e-5;
    let mut probe = store.clone();
    let (mut worst, mut scale) = (0.0f64, 0.0f64);
    for id in store.ids() {
        let a = analytic.dense(store, id);
        let n = a.numel();
        for _ in 0..per_param.min(n) {
            let i = rng.random_range(0..n);
            let orig = probe.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + h;
            let up = loss(&probe);
            probe.get_mut(id).data_mut()[i] = orig - h;
            let down = loss(&probe);
            probe.get_mut(id).data_mut()[i] = orig;
            let num = (up - down) / (2.0 * h);
            worst = worst.max((a.data()[i] - num).abs());
            scale = scale.max(a.data()[i].abs());
        }
    }
    worst / (scale + 1e-8)
}

/// Loss value and parameter gradients of `f` built on a fresh tape.
pub fn value_and_grads(store: &ParamStore, f: impl LossFn) -> (f64, ParamGrads) {
    let tape = Tape::new();
    let b = Binder::new(&tape, store);
    let loss = f(&b);
    let v = loss.item();
    (v, b.grads(tape.backward(loss).unwrap()))
}

/// Loss value only, with parameters bound as constants.
pub fn value(store: &ParamStore, f: impl LossFn) -> f64 {
    let tape = Tape::new();
    let b = Binder::frozen(&tape, store);
    f(&b).item()
}

/// A loss built on whatever binder it is given.
pub trait LossFn: for<'t, 's> Fn(&Binder<'t, 's>) -> ric_core::autodiff::Var<'t> {}
impl<F: for<'t, 's> Fn(&Binder<'t, 's>) -> ric_core::autodiff::Var<'t>> LossFn for F {}

/// Pins a closure to the higher-ranked loss signature.
pub fn loss_fn<F: for<'t, 's> Fn(&Binder<'t, 's>) -> ric_core::autodiff::Var<'t>>(f: F) -> F {
    f
}
