//! Training objectives: the hinge word loss, diagonal-Gaussian KL, Bernoulli
//! reconstruction, and the latent chains of the variational branch.

use crate::autodiff::Var;
use crate::error::{shape_err, Error, Result};
use crate::nn::{Linear, LstmCell};
use crate::params::{Binder, Init, ParamStore};
use crate::tensor::Tensor;

/// Mean hinge `Σ_{j∈Ω} Σ_{i≠j} max(0, 1 − (r_j − r_i)) / (|Ω|·(|V| − 1))`.
/// An empty `omega` gives 0.
pub fn discriminative<'t>(scores: Var<'t>, omega: &[usize]) -> Result<Var<'t>> {
    let tape = scores.tape();
    let &[v] = scores.shape().as_slice() else {
        return shape_err(format!("word scores must be a vector, got {:?}", scores.shape()));
    };
    if omega.is_empty() {
        return Ok(tape.scalar(0.0));
    }
    if let Some(&bad) = omega.iter().find(|&&j| j >= v) {
        return shape_err(format!("caption word {bad} outside {v} scores"));
    }
    let k = omega.len();
    let rj = scores.reshape(&[v, 1])?.gather_rows(omega)?.matmul(tape.constant(Tensor::ones(&[1, v])))?;
    let mut mask = Tensor::ones(&[k, v]);
    for (row, &j) in omega.iter().enumerate() {
        mask.set(&[row, j], 0.0);
    }
    let margins = scores.sub(rj)?.add_scalar(1.0).relu().mul(tape.constant(mask))?;
    Ok(margins.sum().scale(1.0 / (k * (v - 1).max(1)) as f64))
}

/// `ls + λ·ld`.
pub fn combined<'t>(ls: Var<'t>, ld: Var<'t>, lambda: f64) -> Result<Var<'t>> {
    ls.add(ld.scale(lambda))
}

/// Diagonal-Gaussian `KL(N(μ_q, σ_q²) ‖ N(μ_p, σ_p²))` summed over entries.
pub fn kl_diag<'t>(mq: Var<'t>, sq: Var<'t>, mp: Var<'t>, sp: Var<'t>) -> Result<Var<'t>> {
    for s in [sq, sp] {
        if s.value_ref().data().iter().any(|&x| !(x > 0.0)) {
            return Err(Error::Domain("KL needs strictly positive sigmas".into()));
        }
    }
    let ratio = sp.log()?.sub(sq.log()?)?;
    let num = sq.square().add(mq.sub(mp)?.square())?;
    let quad = num.div(sp.square().scale(2.0))?;
    Ok(ratio.add(quad)?.add_scalar(-0.5).sum())
}

/// Pixelwise Bernoulli log-likelihood `Σ x·l − softplus(l)` of `image`
/// (values in `[0, 1]`) under logits `l`.
pub fn bernoulli_loglik<'t>(image: &Tensor, logits: Var<'t>) -> Result<Var<'t>> {
    if image.data().iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(Error::Input("reconstruction targets must lie in [0, 1]".into()));
    }
    if image.numel() != logits.numel() {
        return shape_err(format!("{} pixels vs {} logits", image.numel(), logits.numel()));
    }
    let flat = logits.flatten()?;
    let x = logits.tape().constant(image.reshape(&[image.numel()])?);
    Ok(flat.mul(x)?.sub(flat.softplus())?.sum())
}

/// `loglik + β·(recon − kl)`, the bound to maximize.
pub fn variational_objective<'t>(loglik: Var<'t>, recon: Var<'t>, kl: Var<'t>, beta: f64) -> Result<Var<'t>> {
    loglik.add(recon.sub(kl)?.scale(beta))
}

/// One diagonal Gaussian draw `z = μ + σ⊙ε`.
#[derive(Clone, Copy, Debug)]
pub struct LatentCode<'t> {
    pub z: Var<'t>,
    pub mu: Var<'t>,
    pub sigma: Var<'t>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeConfig {
    pub latent: usize,
    pub hidden: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self { latent: 8, hidden: 32 }
    }
}

/// One latent chain: a first-step head on some conditioning vector, then
/// `μ = tanh(W_μ h)`, `σ = exp(tanh(W_σ h))` and `h_t = LSTM([z_t, h_{t−1}, w])`.
#[derive(Clone, Debug)]
pub struct LatentChain {
    pub first_mu: Linear,
    pub first_sigma: Linear,
    pub w_mu: Linear,
    pub w_sigma: Linear,
    pub lstm: LstmCell,
    pub config: VaeConfig,
    pub word: usize,
}

impl LatentChain {
    pub fn new(store: &mut ParamStore, name: &str, config: VaeConfig, first_input: usize, word: usize) -> Result<Self> {
        let (z, h) = (config.latent, config.hidden);
        let plain = |fi: usize, fo: usize| Init::Glorot { fan_in: fi, fan_out: fo };
        Ok(Self {
            first_mu: Linear::new(store, &format!("{name}.first_mu"), first_input, z)?,
            first_sigma: Linear::new(store, &format!("{name}.first_sigma"), first_input, z)?,
            w_mu: Linear::with_init(store, &format!("{name}.w_mu"), h, z, plain(h, z), None)?,
            w_sigma: Linear::with_init(store, &format!("{name}.w_sigma"), h, z, plain(h, z), None)?,
            lstm: LstmCell::new(store, &format!("{name}.lstm"), z + h + word, h)?,
            config,
            word,
        })
    }

    /// `μ = linear(x)`, `σ = exp(tanh(linear(x)))`.
    pub fn first<'t>(&self, b: &Binder<'t, '_>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        Ok((self.first_mu.forward(b, x)?, self.first_sigma.forward(b, x)?.tanh().exp()))
    }

    /// `μ = tanh(W_μ h)`, `σ = exp(tanh(W_σ h))`.
    pub fn step_params<'t>(&self, b: &Binder<'t, '_>, h: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        Ok((self.w_mu.forward(b, h)?.tanh(), self.w_sigma.forward(b, h)?.tanh().exp()))
    }

    /// Advances the chain state on `[z, h_prev, w]`.
    pub fn advance<'t>(&self, b: &Binder<'t, '_>, z: Var<'t>, h: Var<'t>, c: Var<'t>, w: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        self.lstm.step(b, Var::concat(&[z, h, w])?, h, c)
    }

    pub fn zero_state<'t>(&self, b: &Binder<'t, '_>) -> (Var<'t>, Var<'t>) {
        let z = b.tape().constant(Tensor::zeros(&[self.config.hidden]));
        (z, z)
    }
}

/// `z = μ + σ⊙ε`.
pub fn reparameterize<'t>(mu: Var<'t>, sigma: Var<'t>, eps: &Tensor) -> Result<LatentCode<'t>> {
    let e = mu.tape().constant(eps.clone());
    Ok(LatentCode { z: mu.add(sigma.mul(e)?)?, mu, sigma })
}

/// Posterior chain driven by the attended cube, prior chain by the caption
/// only, and the image decoder.
#[derive(Clone, Debug)]
pub struct VariationalBranch {
    pub posterior: LatentChain,
    pub prior: LatentChain,
    pub recon: Linear,
    pub pixels: usize,
}

/// Terms of the bound for one item.
#[derive(Clone, Copy, Debug)]
pub struct VariationalTerms<'t> {
    pub recon: Var<'t>,
    pub kl: Var<'t>,
}

impl VariationalBranch {
    pub fn new(store: &mut ParamStore, config: VaeConfig, vhat_len: usize, word: usize, pixels: usize) -> Result<Self> {
        let posterior = LatentChain::new(store, "vae.q", config.clone(), vhat_len, word)?;
        let prior = LatentChain::new(store, "vae.p", config.clone(), word, word)?;
        let recon = Linear::new(store, "vae.recon", config.hidden + word, pixels)?;
        Ok(Self { posterior, prior, recon, pixels })
    }

    /// Runs both chains over `T = eps.len()` steps. The posterior's first
    /// code comes from `vhat_1`; the prior consumes the posterior's draws.
    pub fn terms<'t>(&self, b: &Binder<'t, '_>, vhat_1: Var<'t>, w_mean: Var<'t>, eps: &[Tensor], image: &Tensor) -> Result<VariationalTerms<'t>> {
        let tape = b.tape();
        let (mut hq, mut cq) = self.posterior.zero_state(b);
        let (mut hp, mut cp) = self.prior.zero_state(b);
        let mut kl = tape.scalar(0.0);
        for (t, e) in eps.iter().enumerate() {
            let (mq, sq) = if t == 0 { self.posterior.first(b, vhat_1.flatten()?)? } else { self.posterior.step_params(b, hq)? };
            let (mp, sp) = if t == 0 { self.prior.first(b, w_mean)? } else { self.prior.step_params(b, hp)? };
            let code = reparameterize(mq, sq, e)?;
            kl = kl.add(kl_diag(mq, sq, mp, sp)?)?;
            (hq, cq) = self.posterior.advance(b, code.z, hq, cq, w_mean)?;
            (hp, cp) = self.prior.advance(b, code.z, hp, cp, w_mean)?;
        }
        let logits = self.recon.forward(b, Var::concat(&[hq, w_mean])?)?;
        Ok(VariationalTerms { recon: bernoulli_loglik(image, logits)?, kl })
    }
}
