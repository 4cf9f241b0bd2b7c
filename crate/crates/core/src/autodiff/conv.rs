//! 2-D convolution and max pooling on channel-last `[H, W, C]` tensors.
//!
//! "Convolution" here is cross-correlation: the kernel is not flipped,
//! `out[y, x, o] = Σ_{a,b,c} in[y·s + a − p, x·s + b − p, c] · k[a, b, c, o]`
//! with zero padding `p` and stride `s`.

use super::ops::{gemm_acc, gemm_nt_acc, gemm_tn_acc};
use super::{Backward, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ConvAlgo {
    /// Nested loops over output sites and taps.
    Direct,
    /// Patch matrix times reshaped kernel.
    #[default]
    Im2col,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub algo: ConvAlgo,
}

impl ConvSpec {
    pub fn same3x3() -> Self {
        Self { stride: 1, pad: 1, algo: ConvAlgo::Im2col }
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    co: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn new(input: &[usize], kernel: &[usize], spec: ConvSpec) -> Result<Self> {
        let (&[h, w, c], &[kh, kw, kc, co]) = (input, kernel) else {
            return shape_err(format!("conv2d wants [H,W,C] and [kh,kw,C,C'], got {input:?}, {kernel:?}"));
        };
        if kc != c {
            return shape_err(format!("conv2d channel mismatch: input {c}, kernel {kc}"));
        }
        if spec.stride == 0 {
            return shape_err("conv2d stride must be positive");
        }
        let (ph, pw) = (h + 2 * spec.pad, w + 2 * spec.pad);
        if kh > ph || kw > pw {
            return shape_err(format!("kernel {kh}x{kw} exceeds padded input {ph}x{pw}"));
        }
        if (ph - kh) % spec.stride != 0 || (pw - kw) % spec.stride != 0 {
            return shape_err(format!(
                "non-integral conv output extent for input {h}x{w}, kernel {kh}x{kw}, stride {}, pad {}",
                spec.stride, spec.pad
            ));
        }
        Ok(Self {
            h,
            w,
            c,
            kh,
            kw,
            co,
            ho: (ph - kh) / spec.stride + 1,
            wo: (pw - kw) / spec.stride + 1,
            stride: spec.stride,
            pad: spec.pad,
        })
    }

    /// Source coordinate for output index `o` and tap `t`, if inside the input.
    #[inline]
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let p = (o * self.stride + t) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < extent).then_some(p as usize)
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.c
    }

    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let k = self.patch_len();
        let mut cols = vec![0.0; self.ho * self.wo * k];
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let row = &mut cols[(oy * self.wo + ox) * k..][..k];
                for a in 0..self.kh {
                    let Some(y) = self.src(oy, a, self.h) else { continue };
                    for b in 0..self.kw {
                        let Some(x) = self.src(ox, b, self.w) else { continue };
                        let src = &input[(y * self.w + x) * self.c..][..self.c];
                        row[(a * self.kw + b) * self.c..][..self.c].copy_from_slice(src);
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let k = self.patch_len();
        let mut out = vec![0.0; self.h * self.w * self.c];
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let row = &cols[(oy * self.wo + ox) * k..][..k];
                for a in 0..self.kh {
                    let Some(y) = self.src(oy, a, self.h) else { continue };
                    for b in 0..self.kw {
                        let Some(x) = self.src(ox, b, self.w) else { continue };
                        let dst = &mut out[(y * self.w + x) * self.c..][..self.c];
                        for (d, s) in dst.iter_mut().zip(&row[(a * self.kw + b) * self.c..][..self.c]) {
                            *d += s;
                        }
                    }
                }
            }
        }
        out
    }

    fn forward_direct(&self, input: &[f64], kernel: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.ho * self.wo * self.co];
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let o = &mut out[(oy * self.wo + ox) * self.co..][..self.co];
                for a in 0..self.kh {
                    let Some(y) = self.src(oy, a, self.h) else { continue };
                    for b in 0..self.kw {
                        let Some(x) = self.src(ox, b, self.w) else { continue };
                        for c in 0..self.c {
                            let v = input[(y * self.w + x) * self.c + c];
                            let krow = &kernel[((a * self.kw + b) * self.c + c) * self.co..][..self.co];
                            for (ov, kv) in o.iter_mut().zip(krow) {
                                *ov += v * kv;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn backward_direct(&self, input: &[f64], kernel: &[f64], grad: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut gi = vec![0.0; input.len()];
        let mut gk = vec![0.0; kernel.len()];
        for oy in 0..self.ho {
            for ox in 0..self.wo {
                let g = &grad[(oy * self.wo + ox) * self.co..][..self.co];
                for a in 0..self.kh {
                    let Some(y) = self.src(oy, a, self.h) else { continue };
                    for b in 0..self.kw {
                        let Some(x) = self.src(ox, b, self.w) else { continue };
                        for c in 0..self.c {
                            let idx = (y * self.w + x) * self.c + c;
                            let kbase = ((a * self.kw + b) * self.c + c) * self.co;
                            let mut acc = 0.0;
                            for o in 0..self.co {
                                acc += g[o] * kernel[kbase + o];
                                gk[kbase + o] += g[o] * input[idx];
                            }
                            gi[idx] += acc;
                        }
                    }
                }
            }
        }
        (gi, gk)
    }
}

struct Conv2d {
    geo: Geometry,
    algo: ConvAlgo,
}

impl Backward for Conv2d {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (input, kernel) = (inputs[0], inputs[1]);
        let g = &self.geo;
        let (gi, gk) = match self.algo {
            ConvAlgo::Direct => g.backward_direct(input.data(), kernel.data(), grad.data()),
            ConvAlgo::Im2col => {
                let (m, k, n) = (g.ho * g.wo, g.patch_len(), g.co);
                let cols = g.im2col(input.data());
                let mut gk = vec![0.0; k * n];
                gemm_tn_acc(&cols, grad.data(), &mut gk, m, k, n);
                let mut gcols = vec![0.0; m * k];
                gemm_nt_acc(grad.data(), kernel.data(), &mut gcols, m, k, n);
                (g.col2im(&gcols), gk)
            }
        };
        vec![
            Some(Tensor::new(input.shape(), gi).expect("shape")),
            Some(Tensor::new(kernel.shape(), gk).expect("shape")),
        ]
    }
}

struct MaxPool2 {
    argmax: Vec<usize>,
}

impl Backward for MaxPool2 {
    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let mut g = Tensor::zeros(inputs[0].shape());
        for (&src, &gv) in self.argmax.iter().zip(grad.data()) {
            g.data_mut()[src] += gv;
        }
        vec![Some(g)]
    }
}

impl<'t> Var<'t> {
    /// Cross-correlation of `[H, W, C]` with `[kh, kw, C, C']`.
    pub fn conv2d(self, kernel: Var<'t>, spec: ConvSpec) -> Result<Var<'t>> {
        let (value, geo) = {
            let x = self.value_ref();
            let k = kernel.value_ref();
            let geo = Geometry::new(x.shape(), k.shape(), spec)?;
            let out = match spec.algo {
                ConvAlgo::Direct => geo.forward_direct(x.data(), k.data()),
                ConvAlgo::Im2col => {
                    let cols = geo.im2col(x.data());
                    let mut out = vec![0.0; geo.ho * geo.wo * geo.co];
                    gemm_acc(&cols, k.data(), &mut out, geo.ho * geo.wo, geo.patch_len(), geo.co);
                    out
                }
            };
            (Tensor::new(&[geo.ho, geo.wo, geo.co], out)?, geo)
        };
        Ok(self.tape.record(value, &[self, kernel], Conv2d { geo, algo: spec.algo }))
    }

    /// 2×2 max pooling with stride 2 over `[H, W, C]`; odd trailing rows or
    /// columns are dropped.
    pub fn max_pool2(self) -> Result<Var<'t>> {
        let (value, argmax) = {
            let x = self.value_ref();
            let &[h, w, c] = x.shape() else {
                return shape_err(format!("max_pool2 wants [H,W,C], got {:?}", x.shape()));
            };
            let (ho, wo) = (h / 2, w / 2);
            if ho == 0 || wo == 0 {
                return shape_err(format!("max_pool2 input {h}x{w} too small"));
            }
            let d = x.data();
            let mut out = vec![0.0; ho * wo * c];
            let mut arg = vec![0usize; ho * wo * c];
            for oy in 0..ho {
                for ox in 0..wo {
                    for ch in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut bi = 0;
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let i = ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                            if d[i] > best {
                                best = d[i];
                                bi = i;
                            }
                        }
                        out[(oy * wo + ox) * c + ch] = best;
                        arg[(oy * wo + ox) * c + ch] = bi;
                    }
                }
            }
            (Tensor::new(&[ho, wo, c], out)?, arg)
        };
        Ok(self.tape.record(value, &[self], MaxPool2 { argmax }))
    }
}
