//! Noisy proposal construction for boundary-denoising training.
//!
//! Half of the noisy proposals are jittered copies of ground-truth spans
//! (positives, regressed back to their source span); the other half are
//! jittered copies of the fixed reference span `(0.25, 0.75)` (negatives,
//! classified as background only). Noise scale is set in decibels relative
//! to the anchor span's width. In diffusion mode the anchor is additionally
//! shrunk by `sqrt(ᾱ_t)` and the noise scaled by `sqrt(1 − ᾱ_t)` for a
//! per-sample timestep `t`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::span::{clamp_and_order, Span};

/// Role of a proposal inside the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    Learned,
    DenoisePos,
    DenoiseNeg,
}

impl Group {
    pub fn is_denoise(self) -> bool {
        !matches!(self, Group::Learned)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub enabled: bool,
    pub n_denoise: usize,
    /// Noise-to-signal ratio range in dB, sampled uniformly per draw.
    pub db_range: [f64; 2],
    /// 0 selects plain denoising; otherwise the number of diffusion steps.
    pub diffusion_steps: usize,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            enabled: true,
            n_denoise: 30,
            db_range: [-10.0, 0.0],
            diffusion_steps: 0,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.n_denoise.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "n_denoise must be even, got {}",
                self.n_denoise
            )));
        }
        if self.enabled && self.n_denoise == 0 {
            return Err(Error::InvalidArgument("denoising enabled with n_denoise = 0".into()));
        }
        let [lo, hi] = self.db_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::InvalidArgument(format!("bad dB range [{lo}, {hi}]")));
        }
        if self.diffusion_steps > BASE_STEPS {
            return Err(Error::InvalidArgument(format!(
                "diffusion_steps must be <= {BASE_STEPS}"
            )));
        }
        Ok(())
    }
}

/// Width of the negative reference span `(0.25, 0.75)`.
pub const NEGATIVE_ANCHOR: (f64, f64) = (0.25, 0.75);

/// `σ = width · 10^(dB/20)`.
pub fn db_to_sigma(db: f64, span_width: f64) -> Result<f64> {
    if !(span_width > 0.0) {
        return Err(Error::InvalidArgument(format!("span width must be positive, got {span_width}")));
    }
    Ok(span_width * 10f64.powf(db / 20.0))
}

const BASE_STEPS: usize = 1000;
const BETA_START: f64 = 1e-4;
const BETA_END: f64 = 0.02;

/// Cumulative signal fractions ᾱ_1 > ᾱ_2 > … > ᾱ_T.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    alphas_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(alphas_bar: Vec<f64>) -> Result<Self> {
        if alphas_bar.is_empty() {
            return Err(Error::InvalidArgument("empty diffusion schedule".into()));
        }
        if alphas_bar.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::InvalidArgument("ᾱ values must lie in (0, 1]".into()));
        }
        if alphas_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidArgument("ᾱ must be strictly decreasing".into()));
        }
        Ok(DiffusionSchedule { alphas_bar })
    }

    /// The standard linear-β schedule (1e-4 → 0.02 over 1000 steps),
    /// subsampled at `T` evenly strided steps starting from the first one.
    pub fn ddpm(steps: usize) -> Result<Self> {
        if steps == 0 || steps > BASE_STEPS {
            return Err(Error::InvalidArgument(format!("steps must be in 1..={BASE_STEPS}")));
        }
        let mut base = Vec::with_capacity(BASE_STEPS);
        let mut acc = 1.0;
        for i in 0..BASE_STEPS {
            let beta = BETA_START + (BETA_END - BETA_START) * i as f64 / (BASE_STEPS - 1) as f64;
            acc *= 1.0 - beta;
            base.push(acc);
        }
        let stride = BASE_STEPS / steps;
        DiffusionSchedule::new((0..steps).map(|t| base[t * stride]).collect())
    }

    pub fn steps(&self) -> usize {
        self.alphas_bar.len()
    }

    /// ᾱ_t for `1 <= t <= T`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.alphas_bar.len() {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside 1..={}",
                self.alphas_bar.len()
            )));
        }
        Ok(self.alphas_bar[t - 1])
    }

    pub fn alphas_bar(&self) -> &[f64] {
        &self.alphas_bar
    }
}

/// `clamp_and_order(sqrt(ᾱ)·ψ + sqrt(1 − ᾱ)·ε)` for a given ᾱ.
pub fn diffusion_mix(anchor: (f64, f64), alpha_bar: f64, noise: (f64, f64)) -> Result<Span> {
    let a = alpha_bar.sqrt();
    let b = (1.0 - alpha_bar).max(0.0).sqrt();
    clamp_and_order(a * anchor.0 + b * noise.0, a * anchor.1 + b * noise.1)
}

/// Forward-diffuses a ground-truth span to timestep `t`.
pub fn diffusion_noising(gt: &Span, t: usize, sched: &DiffusionSchedule, noise: (f64, f64)) -> Result<Span> {
    let ab = sched.alpha_bar(t)?;
    diffusion_mix((gt.start(), gt.end()), ab, noise)
}

/// Output of [`make_noisy_proposals`].
#[derive(Clone, Debug, PartialEq)]
pub struct NoisyProposals {
    pub spans: Vec<Span>,
    pub groups: Vec<Group>,
    /// Ground-truth index for positives, `None` (background) for negatives.
    pub targets: Vec<Option<usize>>,
    /// Pre-clamp noise vectors as drawn (before any diffusion scaling).
    pub noise: Vec<(f64, f64)>,
    /// Noise standard deviation used for each draw.
    pub sigmas: Vec<f64>,
    /// Diffusion timestep shared by the whole set (0 in plain mode).
    pub timestep: usize,
}

/// Draws `n_denoise` noisy proposals around `gt`.
///
/// Positives cycle over the ground-truth spans; negatives jitter the
/// reference span. Zero-width results after clamping are kept.
pub fn make_noisy_proposals<R: Rng>(
    gt: &[Span],
    cfg: &NoiseConfig,
    sched: Option<&DiffusionSchedule>,
    rng: &mut R,
) -> Result<NoisyProposals> {
    if !cfg.enabled {
        return Err(Error::Contract("noisy proposals requested with denoising disabled".into()));
    }
    if gt.is_empty() {
        return Err(Error::InvalidArgument("need at least one ground-truth span".into()));
    }
    cfg.validate()?;
    let half = cfg.n_denoise / 2;
    let timestep = match (cfg.diffusion_steps, sched) {
        (0, _) => 0,
        (steps, Some(s)) if s.steps() == steps => rng.gen_range(1..=steps),
        (_, _) => {
            return Err(Error::Contract("diffusion mode needs a schedule with matching step count".into()));
        }
    };
    let alpha_bar = match sched {
        Some(s) if timestep > 0 => s.alpha_bar(timestep)?,
        _ => 1.0,
    };

    let mut out = NoisyProposals {
        spans: Vec::with_capacity(cfg.n_denoise),
        groups: Vec::with_capacity(cfg.n_denoise),
        targets: Vec::with_capacity(cfg.n_denoise),
        noise: Vec::with_capacity(cfg.n_denoise),
        sigmas: Vec::with_capacity(cfg.n_denoise),
        timestep,
    };
    let [lo, hi] = cfg.db_range;
    for i in 0..cfg.n_denoise {
        let positive = i < half;
        let (anchor, target, group) = if positive {
            let n = i % gt.len();
            ((gt[n].start(), gt[n].end()), Some(n), Group::DenoisePos)
        } else {
            (NEGATIVE_ANCHOR, None, Group::DenoiseNeg)
        };
        let width = anchor.1 - anchor.0;
        let db = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        // zero-width ground truth still gets a finite noise scale
        let sigma = db_to_sigma(db, width.max(1e-6))?;
        let e1: f64 = rng.sample(StandardNormal);
        let e2: f64 = rng.sample(StandardNormal);
        let eps = (sigma * e1, sigma * e2);
        let span = if timestep > 0 {
            // diffuse the anchor, keeping the noise centred on it
            let a = alpha_bar.sqrt();
            let b = (1.0 - alpha_bar).max(0.0).sqrt();
            clamp_and_order(a * anchor.0 + b * eps.0, a * anchor.1 + b * eps.1)?
        } else {
            clamp_and_order(anchor.0 + eps.0, anchor.1 + eps.1)?
        };
        out.spans.push(span);
        out.groups.push(group);
        out.targets.push(target);
        out.noise.push(eps);
        out.sigmas.push(sigma);
    }
    Ok(out)
}
