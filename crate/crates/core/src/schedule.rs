//! Noise schedule, forward corruption, posterior statistics, and the
//! deterministic few-step sampler.
//!
//! All schedule arrays are kept in `f64` regardless of the model dtype; the
//! per-timestep coefficients are cast when applied to tensors. Schedule
//! objects are immutable after construction and all operations are pure.

use crate::error::{Error, Result};
use candle_core::Tensor;

/// Tables derived from a `beta` noise schedule.
///
/// For `t` in `[0, T)`: `alpha_t = 1 - beta_t`, `alpha_bar_t` is the running
/// product of alphas, and `posterior_var_t = (1 - alpha_bar_{t-1}) /
/// (1 - alpha_bar_t) * beta_t` (zero at `t = 0`).
#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_vars: Vec<f64>,
}

/// Target of a reverse-process step: either another schedule index or the
/// clean sample (`alpha_bar = 1`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrevStep {
    At(usize),
    Clean,
}

/// Descending timestep indices visited by the sampler.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestepPlan {
    steps: Vec<usize>,
}

/// Builds the linear schedule: `T` betas interpolated inclusively from
/// `beta_start` to `beta_end`.
pub fn build_linear_schedule(t: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if t < 2 {
        return Err(Error::InvalidSchedule(format!("T must be at least 2, got {t}")));
    }
    if !(beta_start > 0.0 && beta_start < 1.0 && beta_end > 0.0 && beta_end < 1.0) {
        return Err(Error::InvalidSchedule(format!(
            "beta bounds must lie in (0, 1), got [{beta_start}, {beta_end}]"
        )));
    }
    if beta_start > beta_end {
        return Err(Error::InvalidSchedule(format!(
            "beta_start {beta_start} exceeds beta_end {beta_end}"
        )));
    }
    let betas = (0..t)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64)
        .collect();
    DiffusionSchedule::from_betas(betas)
}

impl DiffusionSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.iter().any(|&b| !(0.0..1.0).contains(&b) || b <= 0.0) {
            return Err(Error::InvalidSchedule("betas must lie in (0, 1)".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0f64;
        for &a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        let mut posterior_vars = Vec::with_capacity(betas.len());
        for t in 0..betas.len() {
            let prev = if t == 0 { 1.0 } else { alpha_bars[t - 1] };
            posterior_vars.push((1.0 - prev) / (1.0 - alpha_bars[t]) * betas[t]);
        }
        Ok(Self { betas, alphas, alpha_bars, posterior_vars })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn posterior_vars(&self) -> &[f64] {
        &self.posterior_vars
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::TimestepOutOfRange { t, len: self.len() });
        }
        Ok(())
    }

    fn check_shapes(&self, a: &Tensor, b: &Tensor) -> Result<()> {
        if a.dims() != b.dims() {
            return Err(Error::shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
        }
        Ok(())
    }

    /// Forward corruption: `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
    pub fn q_sample(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        self.check_shapes(x0, eps)?;
        let ab = self.alpha_bars[t];
        let out = (x0.affine(ab.sqrt(), 0.0)? + eps.affine((1.0 - ab).sqrt(), 0.0)?)?;
        Ok(out)
    }

    /// Per-sample variant of [`q_sample`](Self::q_sample): `x0` and `eps` are
    /// `[B, ...]` and `ts` holds one timestep per batch element.
    pub fn q_sample_batch(&self, x0: &Tensor, ts: &[usize], eps: &Tensor) -> Result<Tensor> {
        self.check_shapes(x0, eps)?;
        if x0.dim(0)? != ts.len() {
            return Err(Error::shape(format!(
                "batch size {} vs {} timesteps",
                x0.dim(0)?,
                ts.len()
            )));
        }
        for &t in ts {
            self.check_t(t)?;
        }
        let sa = self.coeff_tensor(x0, ts, |ab| ab.sqrt())?;
        let sb = self.coeff_tensor(x0, ts, |ab| (1.0 - ab).sqrt())?;
        Ok(x0.broadcast_mul(&sa)?.add(&eps.broadcast_mul(&sb)?)?)
    }

    /// Per-sample coefficient tensor of shape `[B, 1, 1, ...]` matching the
    /// rank of `like`, filled with `f(alpha_bar_t)`.
    fn coeff_tensor(&self, like: &Tensor, ts: &[usize], f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let vals: Vec<f32> = ts.iter().map(|&t| f(self.alpha_bars[t]) as f32).collect();
        let mut shape = vec![ts.len()];
        shape.extend(std::iter::repeat(1).take(like.rank() - 1));
        let t = Tensor::from_vec(vals, shape.as_slice(), like.device())?;
        Ok(t.to_dtype(like.dtype())?)
    }

    /// Inverts the forward process given a noise estimate:
    /// `(x_t - sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_bar_t)`.
    pub fn predict_x0_from_eps(&self, x_t: &Tensor, t: usize, eps_hat: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        self.check_shapes(x_t, eps_hat)?;
        let ab = self.alpha_bars[t];
        let num = (x_t - eps_hat.affine((1.0 - ab).sqrt(), 0.0)?)?;
        Ok(num.affine(1.0 / ab.sqrt(), 0.0)?)
    }

    /// Deterministic reverse update (`eta = 0`):
    /// `sqrt(alpha_bar_prev) x0_hat + sqrt(1 - alpha_bar_prev) eps_hat`,
    /// with `alpha_bar_prev = 1` at the terminal step.
    pub fn ddim_step(
        &self,
        x_t: &Tensor,
        t: usize,
        t_prev: PrevStep,
        eps_hat: &Tensor,
    ) -> Result<Tensor> {
        self.check_t(t)?;
        if let PrevStep::At(p) = t_prev {
            if p >= t {
                return Err(Error::InvalidSchedule(format!(
                    "t_prev {p} must be strictly less than t {t}"
                )));
            }
        }
        let x0_hat = self.predict_x0_from_eps(x_t, t, eps_hat)?;
        match t_prev {
            PrevStep::Clean => Ok(x0_hat),
            PrevStep::At(p) => {
                let ab = self.alpha_bars[p];
                let out =
                    (x0_hat.affine(ab.sqrt(), 0.0)? + eps_hat.affine((1.0 - ab).sqrt(), 0.0)?)?;
                Ok(out)
            }
        }
    }
}

/// Uniform-stride descending plan: index `i` (from the end) maps to
/// `floor((i + 1) * T / num_steps) - 1`.
pub fn make_timestep_plan(t: usize, num_steps: usize) -> Result<TimestepPlan> {
    if num_steps == 0 || num_steps > t {
        return Err(Error::InvalidSchedule(format!(
            "num_steps must lie in [1, {t}], got {num_steps}"
        )));
    }
    let steps: Vec<usize> = (0..num_steps).rev().map(|i| (i + 1) * t / num_steps - 1).collect();
    TimestepPlan::new(steps, t)
}

impl TimestepPlan {
    pub fn new(steps: Vec<usize>, t: usize) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::InvalidSchedule("empty timestep plan".into()));
        }
        if steps[0] >= t {
            return Err(Error::InvalidSchedule(format!(
                "first timestep {} not below T={t}",
                steps[0]
            )));
        }
        if steps.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::InvalidSchedule("timesteps must be strictly decreasing".into()));
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    /// Yields `(t, prev)` pairs ending with `(last, Clean)`.
    pub fn transitions(&self) -> impl Iterator<Item = (usize, PrevStep)> + '_ {
        self.steps.iter().enumerate().map(move |(i, &t)| {
            let prev = match self.steps.get(i + 1) {
                Some(&p) => PrevStep::At(p),
                None => PrevStep::Clean,
            };
            (t, prev)
        })
    }
}
