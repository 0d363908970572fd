//! Noise schedules and the per-view forward/reverse diffusion math.
//!
//! All views of a [`MultiViewState`] share one timestep. Every operation acts
//! on each view independently given the predicted noise, so view order only
//! matters through the noise predictor.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Linear β schedule plus its derived α, ᾱ and posterior σ sequences.
///
/// Index `t` runs over `1..=T`; `ᾱ_0` is defined as 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "ScheduleRepr", into = "ScheduleRepr")]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ScheduleRepr {
    betas: Vec<f64>,
}

impl From<ScheduleRepr> for NoiseSchedule {
    fn from(r: ScheduleRepr) -> Self {
        NoiseSchedule::derive(r.betas)
    }
}

impl From<NoiseSchedule> for ScheduleRepr {
    fn from(s: NoiseSchedule) -> Self {
        ScheduleRepr { betas: s.betas }
    }
}

impl NoiseSchedule {
    fn derive(betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for &a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let sigmas = (0..betas.len())
            .map(|i| {
                if i == 0 {
                    betas[0].sqrt()
                } else {
                    (betas[i] * (1.0 - alpha_bars[i - 1]) / (1.0 - alpha_bars[i])).sqrt()
                }
            })
            .collect();
        Self { betas, alphas, alpha_bars, sigmas }
    }

    /// Schedule from explicit betas; each must lie strictly inside `(0, 1)`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::invalid("noise schedule needs at least one step"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::invalid(format!("beta {b} outside (0, 1)")));
        }
        let sched = Self::derive(betas);
        if sched.alpha_bars.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::invalid("cumulative alpha underflows; schedule too long or too strong"));
        }
        Ok(sched)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Posterior standard deviation; `σ_1 = √β_1`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!("timestep {t} outside [1, {}]", self.steps())));
        }
        Ok(())
    }
}

/// β interpolated linearly from `beta_min` at `t = 1` to `beta_max` at `t = T`.
pub fn build_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::invalid("noise schedule needs T >= 1"));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::invalid(format!(
            "need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}"
        )));
    }
    let betas = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_betas(betas)
}

/// Default endpoints 1e-4 and 0.02 at `T = 1000`, rescaled by `1000 / T` so
/// that short schedules still end close to pure noise.
pub fn default_beta_range(steps: usize) -> (f64, f64) {
    let scale = 1000.0 / steps as f64;
    (1e-4 * scale, (0.02 * scale).min(0.999))
}

/// The `N` views at one shared timestep, stacked as `(N, C, H, W)`.
#[derive(Debug, Clone)]
pub struct MultiViewState {
    pub views: Tensor,
    pub t: usize,
    pub poses: Vec<CameraPose>,
}

impl MultiViewState {
    pub fn new(views: Tensor, t: usize, poses: Vec<CameraPose>) -> Result<Self> {
        let dims = views.dims();
        if dims.len() != 4 || dims[0] == 0 {
            return Err(Error::shape("(N >= 1, C, H, W)", dims));
        }
        if poses.len() != dims[0] {
            return Err(Error::invalid(format!("{} poses for {} views", poses.len(), dims[0])));
        }
        Ok(Self { views, t, poses })
    }

    pub fn num_views(&self) -> usize {
        self.views.dims()[0]
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(a.dims(), b.dims()));
    }
    Ok(())
}

/// `x_t = √ᾱ_t x_0 + √(1-ᾱ_t) ε`, per view.
pub fn forward_diffuse(x0: &MultiViewState, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<MultiViewState> {
    sched.check_t(t)?;
    check_same_shape(&x0.views, eps)?;
    let ab = sched.alpha_bar(t);
    let views = (x0.views.affine(ab.sqrt(), 0.0)? + eps.affine((1.0 - ab).sqrt(), 0.0)?)?;
    Ok(MultiViewState { views, t, poses: x0.poses.clone() })
}

/// Learnable mean `(x_t - β_t / √(1-ᾱ_t) ε̂) / √α_t` for one or more views.
pub fn posterior_mean(x_t: &Tensor, eps_hat: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_t(t)?;
    check_same_shape(x_t, eps_hat)?;
    let coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
    let inv_sqrt_alpha = 1.0 / sched.alpha(t).sqrt();
    Ok((x_t - eps_hat.affine(coef, 0.0)?)?.affine(inv_sqrt_alpha, 0.0)?)
}

/// One ancestral step `x_{t-1} ~ N(μ_θ, σ_t² I)` using the schedule's σ_t.
pub fn reverse_step(
    state: &MultiViewState,
    eps_hat: &Tensor,
    sched: &NoiseSchedule,
    rng: &mut SeededRng,
) -> Result<MultiViewState> {
    sched.check_t(state.t)?;
    reverse_step_with_sigma(state, eps_hat, sched, sched.sigma(state.t), rng)
}

/// [`reverse_step`] with an explicit σ; `sigma = 0` returns the posterior mean unchanged.
pub fn reverse_step_with_sigma(
    state: &MultiViewState,
    eps_hat: &Tensor,
    sched: &NoiseSchedule,
    sigma: f64,
    rng: &mut SeededRng,
) -> Result<MultiViewState> {
    let mean = posterior_mean(&state.views, eps_hat, state.t, sched)?;
    let views = if sigma == 0.0 {
        mean
    } else {
        let z = rng.normal_tensor(mean.dims(), mean.dtype())?;
        (mean + z.affine(sigma, 0.0)?)?
    };
    Ok(MultiViewState { views, t: state.t - 1, poses: state.poses.clone() })
}

/// `x̂_0 = (x_t - √(1-ᾱ_t) ε̂) / √ᾱ_t`.
pub fn predict_x0(x_t: &Tensor, eps_hat: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    let ab = sched.alpha_bar(t);
    Ok((x_t - eps_hat.affine((1.0 - ab).sqrt(), 0.0)?)?.affine(1.0 / ab.sqrt(), 0.0)?)
}

/// DDIM update from `state.t` to `t_prev`; `eta = 0` is deterministic and never touches `rng`.
pub fn ddim_step(
    state: &MultiViewState,
    eps_hat: &Tensor,
    t_prev: usize,
    eta: f64,
    sched: &NoiseSchedule,
    rng: &mut SeededRng,
) -> Result<MultiViewState> {
    let t = state.t;
    sched.check_t(t)?;
    if t_prev >= t {
        return Err(Error::invalid(format!("DDIM needs t_prev < t, got {t_prev} >= {t}")));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::invalid(format!("eta must be in [0, 1], got {eta}")));
    }
    check_same_shape(&state.views, eps_hat)?;
    let ab = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t_prev);
    let x0 = predict_x0(&state.views, eps_hat, t, sched)?;
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt();
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let mut views = (x0.affine(ab_prev.sqrt(), 0.0)? + eps_hat.affine(dir, 0.0)?)?;
    if sigma > 0.0 {
        let z = rng.normal_tensor(views.dims(), views.dtype())?;
        views = (views + z.affine(sigma, 0.0)?)?;
    }
    Ok(MultiViewState { views, t: t_prev, poses: state.poses.clone() })
}

/// Descending DDIM timesteps: `steps` distinct values in `[1, T]`, ending at the smallest.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::invalid(format!("need 1 <= steps <= T, got {steps} of {total}")));
    }
    let mut ts: Vec<usize> = (1..=steps)
        .map(|i| ((i as f64 * total as f64) / steps as f64).round() as usize)
        .collect();
    ts.dedup();
    ts.reverse();
    Ok(ts)
}

/// Whether views receive independent noise draws or one draw shared by all views.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseSharing {
    #[default]
    Independent,
    Shared,
}

impl std::str::FromStr for NoiseSharing {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(Self::Independent),
            "shared" => Ok(Self::Shared),
            other => Err(Error::Config(format!("unknown noise sharing `{other}`"))),
        }
    }
}

impl std::fmt::Display for NoiseSharing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Independent => "independent",
            Self::Shared => "shared",
        })
    }
}

/// Standard normal noise for `(N, C, H, W)` views.
pub fn sample_noise(shape: &[usize], sharing: NoiseSharing, dtype: DType, rng: &mut SeededRng) -> Result<Tensor> {
    match sharing {
        NoiseSharing::Independent => rng.normal_tensor(shape, dtype),
        NoiseSharing::Shared => {
            let one = rng.normal_tensor(&shape[1..], dtype)?.unsqueeze(0)?;
            Ok(one.broadcast_as(shape)?.contiguous()?)
        }
    }
}

/// Representation the diffusion process runs in.
///
/// `Haar2x` is an exactly invertible 2x2 Haar split: the low band is the 2x
/// average pool, the three detail bands hold the rest, giving `4C` channels at
/// half resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentMode {
    #[default]
    Pixel,
    Haar2x,
}

impl std::str::FromStr for LatentMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pixel" => Ok(Self::Pixel),
            "haar2x" => Ok(Self::Haar2x),
            other => Err(Error::Config(format!("unknown latent mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for LatentMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Pixel => "pixel",
            Self::Haar2x => "haar2x",
        })
    }
}

impl LatentMode {
    /// `(channels, height, width)` of the representation for a `C x H x W` image.
    pub fn latent_dims(&self, c: usize, h: usize, w: usize) -> (usize, usize, usize) {
        match self {
            Self::Pixel => (c, h, w),
            Self::Haar2x => (4 * c, h / 2, w / 2),
        }
    }

    /// Image batch `(N, C, H, W)` to latent batch.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Self::Pixel => Ok(x.clone()),
            Self::Haar2x => {
                let (n, c, h, w) = x.dims4()?;
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::shape("even H and W", (h, w)));
                }
                let x = x.reshape((n, c, h / 2, 2, w / 2, 2))?;
                let p = |dy: usize, dx: usize| -> Result<Tensor> {
                    Ok(x.narrow(3, dy, 1)?.narrow(5, dx, 1)?.squeeze(5)?.squeeze(3)?)
                };
                let (p00, p01, p10, p11) = (p(0, 0)?, p(0, 1)?, p(1, 0)?, p(1, 1)?);
                let q = 0.25;
                let a = (((&p00 + &p01)? + &p10)? + &p11)?.affine(q, 0.0)?;
                let hd = (((&p00 - &p01)? + &p10)? - &p11)?.affine(q, 0.0)?;
                let vd = (((&p00 + &p01)? - &p10)? - &p11)?.affine(q, 0.0)?;
                let dd = (((&p00 - &p01)? - &p10)? + &p11)?.affine(q, 0.0)?;
                Ok(Tensor::cat(&[a, hd, vd, dd], 1)?)
            }
        }
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        match self {
            Self::Pixel => Ok(z.clone()),
            Self::Haar2x => {
                let (n, c4, h, w) = z.dims4()?;
                if c4 % 4 != 0 {
                    return Err(Error::shape("channels divisible by 4", c4));
                }
                let c = c4 / 4;
                let a = z.narrow(1, 0, c)?;
                let hd = z.narrow(1, c, c)?;
                let vd = z.narrow(1, 2 * c, c)?;
                let dd = z.narrow(1, 3 * c, c)?;
                let p00 = (((&a + &hd)? + &vd)? + &dd)?;
                let p01 = (((&a - &hd)? + &vd)? - &dd)?;
                let p10 = (((&a + &hd)? - &vd)? - &dd)?;
                let p11 = (((&a - &hd)? - &vd)? + &dd)?;
                let top = Tensor::stack(&[p00, p01], 4)?; // (n, c, h, w, 2)
                let bottom = Tensor::stack(&[p10, p11], 4)?;
                let blocks = Tensor::stack(&[top, bottom], 3)?; // (n, c, h, 2, w, 2)
                Ok(blocks.reshape((n, c, 2 * h, 2 * w))?)
            }
        }
    }
}
