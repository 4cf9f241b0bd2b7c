//! Small layers shared by the encoder, decoder and latent chains.

use crate::autodiff::Var;
use crate::error::{shape_err, Result};
use crate::params::{Binder, Init, ParamId, ParamStore};

/// `y = x·W + b` with `W: [in, out]`; `x` is `[in]` or `[n, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        Self::with_init(store, name, input, output, Init::Glorot { fan_in: input, fan_out: output }, Some(Init::Zeros))
    }

    pub fn with_init(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        weight: Init,
        bias: Option<Init>,
    ) -> Result<Self> {
        let weight = store.add(&format!("{name}.w"), &[input, output], weight)?;
        let bias = match bias {
            Some(init) => Some(store.add(&format!("{name}.b"), &[output], init)?),
            None => None,
        };
        Ok(Self { weight, bias, input, output })
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(b.var(self.weight))?;
        match self.bias {
            Some(bias) => y.add(b.var(bias)),
            None => Ok(y),
        }
    }
}

/// LSTM with forget gates. Gate layout in the fused weight: input, forget,
/// output, candidate.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize) -> Result<Self> {
        let weight = store.add(
            &format!("{name}.w"),
            &[input + hidden, 4 * hidden],
            Init::Glorot { fan_in: input + hidden, fan_out: hidden },
        )?;
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].fill(1.0);
        let bias = store.add(&format!("{name}.b"), &[4 * hidden], Init::Values(bias))?;
        Ok(Self { weight, bias, input, hidden })
    }

    /// One step: `(h, c) -> (h', c')`.
    pub fn step<'t>(&self, b: &Binder<'t, '_>, x: Var<'t>, h: Var<'t>, c: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        if x.shape() != [self.input] || h.shape() != [self.hidden] {
            return shape_err(format!(
                "lstm expects input [{}] and state [{}], got {:?} / {:?}",
                self.input,
                self.hidden,
                x.shape(),
                h.shape()
            ));
        }
        let n = self.hidden;
        let gates = Var::concat(&[x, h])?.matmul(b.var(self.weight))?.add(b.var(self.bias))?;
        let i = gates.narrow(0, n)?.sigmoid();
        let f = gates.narrow(n, n)?.sigmoid();
        let o = gates.narrow(2 * n, n)?.sigmoid();
        let g = gates.narrow(3 * n, n)?.tanh();
        let c2 = f.mul(c)?.add(i.mul(g)?)?;
        let h2 = o.mul(c2.tanh())?;
        Ok((h2, c2))
    }
}

/// Gated recurrent unit. Gate layout: update, reset, candidate.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub bx: ParamId,
    pub bh: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize) -> Result<Self> {
        let wx = store.add(&format!("{name}.wx"), &[input, 3 * hidden], Init::Glorot { fan_in: input, fan_out: hidden })?;
        let wh = store.add(&format!("{name}.wh"), &[hidden, 3 * hidden], Init::Glorot { fan_in: hidden, fan_out: hidden })?;
        let bx = store.add(&format!("{name}.bx"), &[3 * hidden], Init::Zeros)?;
        let bh = store.add(&format!("{name}.bh"), &[3 * hidden], Init::Zeros)?;
        Ok(Self { wx, wh, bx, bh, input, hidden })
    }

    pub fn step<'t>(&self, b: &Binder<'t, '_>, x: Var<'t>, h: Var<'t>) -> Result<Var<'t>> {
        if x.shape() != [self.input] || h.shape() != [self.hidden] {
            return shape_err(format!(
                "gru expects input [{}] and state [{}], got {:?} / {:?}",
                self.input,
                self.hidden,
                x.shape(),
                h.shape()
            ));
        }
        let n = self.hidden;
        let gx = x.matmul(b.var(self.wx))?.add(b.var(self.bx))?;
        let gh = h.matmul(b.var(self.wh))?.add(b.var(self.bh))?;
        let z = gx.narrow(0, n)?.add(gh.narrow(0, n)?)?.sigmoid();
        let r = gx.narrow(n, n)?.add(gh.narrow(n, n)?)?.sigmoid();
        let cand = gx.narrow(2 * n, n)?.add(r.mul(gh.narrow(2 * n, n)?)?)?.tanh();
        // h' = (1 - z)·cand + z·h
        cand.add(z.mul(h.sub(cand)?)?)
    }
}
