//! Gaussian diffusion operations over EEG epochs.
//!
//! Forward process: `y_t ~ N(sqrt(gamma_t) y_0, (1 - gamma_t) I)` with
//! `gamma_t` the running product of per-step retention factors. The reverse
//! process is driven by a noise predictor `f(x_delta, y_t, gamma)` whose
//! conditioning input is a real epoch perturbed as `x_delta = x + delta * Z`,
//! `Z` standard normal. Each refinement step is
//!
//! ```text
//! y_{t-1} = (y_t - (1 - alpha_t) / sqrt(1 - gamma_t) * f(x_delta, y_t, gamma_t))
//!           / sqrt(alpha_t) + sqrt(1 - alpha_t) * eps_t
//! ```
//!
//! with the additive noise dropped at `t = 1` so the final output is the
//! posterior mean.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::EegEpoch;
use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, ScheduleConfig};

/// Anything that predicts the injected noise from `(x_delta, y_t, gamma)`.
///
/// Implemented by the trained U-Net and by rigged oracles in tests.
pub trait NoisePredictor: Sync {
    fn predict(&self, x_delta: &Array2<f64>, y_t: &Array2<f64>, gamma: f64) -> Result<Array2<f64>>;
}

/// Sampler settings serialized alongside checkpoints and experiment configs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DiffusionConfig {
    pub t: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Reverse-process steps at generation time; `<= t` (the schedule is
    /// re-gridded when smaller).
    pub inference_steps: usize,
    /// Scale of the standard-normal perturbation applied to the conditioning
    /// epoch.
    pub delta: f64,
    /// Norm exponent of the training objective, 1 or 2.
    pub loss_p: u8,
    pub seed: u64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            t: 500,
            beta_start: 1e-4,
            beta_end: 0.02,
            inference_steps: 100,
            delta: 0.01,
            loss_p: 2,
            seed: 0,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.validate()?;
        ScheduleConfig {
            t: self.t,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
        }
        .build()
    }

    pub fn validate(&self) -> Result<()> {
        if self.loss_p != 1 && self.loss_p != 2 {
            return Err(Error::config(format!("loss_p must be 1 or 2, got {}", self.loss_p)));
        }
        if self.delta < 0.0 {
            return Err(Error::config("delta must be non-negative"));
        }
        if self.inference_steps == 0 || self.inference_steps > self.t {
            return Err(Error::config(format!(
                "inference_steps must lie in 1..={}, got {}",
                self.t, self.inference_steps
            )));
        }
        Ok(())
    }
}

/// One condition/target pair for the diffusion model.
///
/// With self-pairing the source and target are the same real epoch; diversity
/// enters through the delta perturbation and the reverse-process noise.
#[derive(Debug, Clone)]
pub struct ConditionPair {
    pub source: EegEpoch,
    pub target: EegEpoch,
    pub label: u8,
    pub delta: f64,
}

impl ConditionPair {
    pub fn new(source: EegEpoch, target: EegEpoch, label: u8, delta: f64) -> Result<Self> {
        if source.shape() != target.shape() {
            return Err(Error::shape("condition source/target shapes differ"));
        }
        if delta < 0.0 {
            return Err(Error::config("delta must be non-negative"));
        }
        Ok(ConditionPair {
            source,
            target,
            label,
            delta,
        })
    }
}

/// Everything the denoising objective consumes for one sample:
/// the perturbed condition, the noisy target, its noise level and the
/// injected noise.
#[derive(Debug, Clone)]
pub struct DiffusionTrainingItem {
    pub x_delta: EegEpoch,
    pub y_tilde: EegEpoch,
    pub gamma: f64,
    pub epsilon: EegEpoch,
}

impl DiffusionTrainingItem {
    /// Builds one training item from a condition pair: samples `(gamma, t)`,
    /// draws fresh noise, and constructs `y_tilde` via the forward marginal.
    pub fn sample<R: Rng + ?Sized>(
        pair: &ConditionPair,
        schedule: &NoiseSchedule,
        rng: &mut R,
    ) -> Result<Self> {
        let (gamma, _t) = schedule.sample_gamma(rng);
        let epsilon = standard_normal_like(&pair.target, rng);
        let y_tilde = forward_marginal(&pair.target, gamma, &epsilon)?;
        let x_delta = augment_condition(&pair.source, pair.delta, rng)?;
        Ok(DiffusionTrainingItem {
            x_delta,
            y_tilde,
            gamma,
            epsilon,
        })
    }
}

/// An epoch of i.i.d. standard-normal samples with the shape of `like`.
pub fn standard_normal_like<R: Rng + ?Sized>(like: &EegEpoch, rng: &mut R) -> EegEpoch {
    EegEpoch {
        data: standard_normal_grid(like.shape(), rng),
    }
}

pub(crate) fn standard_normal_grid<R: Rng + ?Sized>(
    (c, l): (usize, usize),
    rng: &mut R,
) -> Array2<f64> {
    Array2::from_shape_simple_fn((c, l), || rng.sample(StandardNormal))
}

/// `sqrt(gamma) * y0 + sqrt(1 - gamma) * epsilon`, elementwise.
pub fn forward_marginal(y0: &EegEpoch, gamma: f64, epsilon: &EegEpoch) -> Result<EegEpoch> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::config(format!("gamma {gamma} outside [0, 1]")));
    }
    if y0.shape() != epsilon.shape() {
        return Err(Error::shape("y0 and epsilon shapes differ"));
    }
    let a = gamma.sqrt();
    let b = (1.0 - gamma).sqrt();
    let data = &y0.data * a + &epsilon.data * b;
    Ok(EegEpoch { data })
}

/// Mean and variance of the closed-form posterior `q(y_{t-1} | y_0, y_t)`.
///
/// `mu = sqrt(gamma_{t-1}) (1 - alpha_t) / (1 - gamma_t) * y0
///     + sqrt(alpha_t) (1 - gamma_{t-1}) / (1 - gamma_t) * yt`,
/// `sigma^2 = (1 - gamma_{t-1}) (1 - alpha_t) / (1 - gamma_t)`,
/// with `gamma_0 = 1` so the `t = 1` posterior collapses onto `y0`.
pub fn posterior_params(
    y0: &EegEpoch,
    yt: &EegEpoch,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<(EegEpoch, f64)> {
    if t == 0 || t > schedule.t_max() {
        return Err(Error::config(format!(
            "t {t} outside 1..={}",
            schedule.t_max()
        )));
    }
    if y0.shape() != yt.shape() {
        return Err(Error::shape("y0 and yt shapes differ"));
    }
    let alpha_t = schedule.alpha(t);
    let gamma_t = schedule.gamma(t);
    let gamma_prev = schedule.gamma(t - 1);
    let denom = 1.0 - gamma_t;
    if denom == 0.0 {
        return Err(Error::Schedule("1 - gamma_t is zero".into()));
    }
    let c0 = gamma_prev.sqrt() * (1.0 - alpha_t) / denom;
    let ct = alpha_t.sqrt() * (1.0 - gamma_prev) / denom;
    let mu = EegEpoch {
        data: &y0.data * c0 + &yt.data * ct,
    };
    let sigma2 = (1.0 - gamma_prev) * (1.0 - alpha_t) / denom;
    Ok((mu, sigma2))
}

/// Scalar version of [`posterior_params`], used by the Monte-Carlo oracles.
pub fn posterior_params_scalar(
    y0: f64,
    yt: f64,
    alpha_t: f64,
    gamma_prev: f64,
) -> (f64, f64) {
    let gamma_t = gamma_prev * alpha_t;
    let denom = 1.0 - gamma_t;
    let mu = gamma_prev.sqrt() * (1.0 - alpha_t) / denom * y0
        + alpha_t.sqrt() * (1.0 - gamma_prev) / denom * yt;
    let sigma2 = (1.0 - gamma_prev) * (1.0 - alpha_t) / denom;
    (mu, sigma2)
}

/// The augmentation module: `x_delta = x + delta * Z`, `Z` standard normal.
pub fn augment_condition<R: Rng + ?Sized>(
    x: &EegEpoch,
    delta: f64,
    rng: &mut R,
) -> Result<EegEpoch> {
    if delta < 0.0 {
        return Err(Error::config(format!("delta {delta} must be non-negative")));
    }
    if delta == 0.0 {
        return Ok(x.clone());
    }
    let noise = standard_normal_grid(x.shape(), rng);
    Ok(EegEpoch {
        data: &x.data + &(noise * delta),
    })
}

/// Inverts the forward marginal: `(y_t - sqrt(1 - gamma_t) eps_hat) / sqrt(gamma_t)`.
pub fn estimate_y0(yt: &EegEpoch, eps_hat: &EegEpoch, gamma_t: f64) -> Result<EegEpoch> {
    if !(gamma_t > 0.0 && gamma_t <= 1.0) {
        return Err(Error::config(format!("gamma_t {gamma_t} outside (0, 1]")));
    }
    if yt.shape() != eps_hat.shape() {
        return Err(Error::shape("yt and eps_hat shapes differ"));
    }
    let b = (1.0 - gamma_t).sqrt();
    let inv = 1.0 / gamma_t.sqrt();
    Ok(EegEpoch {
        data: (&yt.data - &(&eps_hat.data * b)) * inv,
    })
}

/// Mean `|f(x_delta, y_tilde, gamma) - epsilon|^p` over all elements.
pub fn training_loss(
    model: &dyn NoisePredictor,
    item: &DiffusionTrainingItem,
    p: u8,
) -> Result<f64> {
    if p != 1 && p != 2 {
        return Err(Error::config(format!("p must be 1 or 2, got {p}")));
    }
    let pred = model.predict(&item.x_delta.data, &item.y_tilde.data, item.gamma)?;
    if pred.dim() != item.epsilon.data.dim() {
        return Err(Error::shape("prediction shape differs from epsilon"));
    }
    if !pred.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let n = pred.len() as f64;
    let loss = pred
        .iter()
        .zip(item.epsilon.data.iter())
        .map(|(a, b)| {
            let r = a - b;
            if p == 2 {
                r * r
            } else {
                r.abs()
            }
        })
        .sum::<f64>()
        / n;
    Ok(loss)
}

/// One reverse refinement step `y_t -> y_{t-1}`.
///
/// The additive `sqrt(1 - alpha_t) eps_t` term is omitted at `t = 1` so the
/// returned sample is the posterior mean.
pub fn refinement_step<R: Rng + ?Sized>(
    model: &dyn NoisePredictor,
    x_delta: &EegEpoch,
    yt: &EegEpoch,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<EegEpoch> {
    if t == 0 || t > schedule.t_max() {
        return Err(Error::config(format!(
            "t {t} outside 1..={}",
            schedule.t_max()
        )));
    }
    if x_delta.shape() != yt.shape() {
        return Err(Error::shape("x_delta and yt shapes differ"));
    }
    let data = refine_grid(model, &x_delta.data, &yt.data, t, schedule, rng)?;
    Ok(EegEpoch { data })
}

/// The deterministic part of a refinement step:
/// `(y_t - (1 - alpha_t) / sqrt(1 - gamma_t) * eps_hat) / sqrt(alpha_t)`.
pub fn refinement_mean(
    yt: &Array2<f64>,
    eps_hat: &Array2<f64>,
    alpha_t: f64,
    gamma_t: f64,
) -> Array2<f64> {
    let coeff = (1.0 - alpha_t) / (1.0 - gamma_t).sqrt();
    (yt - &(eps_hat * coeff)) / alpha_t.sqrt()
}

fn refine_grid<R: Rng + ?Sized>(
    model: &dyn NoisePredictor,
    x_delta: &Array2<f64>,
    yt: &Array2<f64>,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let alpha_t = schedule.alpha(t);
    let gamma_t = schedule.gamma(t);
    let eps_hat = model.predict(x_delta, yt, gamma_t)?;
    if eps_hat.dim() != yt.dim() {
        return Err(Error::shape("model output shape differs from yt"));
    }
    if !eps_hat.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let mut next = refinement_mean(yt, &eps_hat, alpha_t, gamma_t);
    if t > 1 {
        let sigma = (1.0 - alpha_t).sqrt();
        let noise = standard_normal_grid((yt.nrows(), yt.ncols()), rng);
        next = next + noise * sigma;
    }
    Ok(next)
}

/// Runs the full reverse process conditioned on `x`, producing one synthetic
/// epoch of the same shape.
///
/// The chain starts from `y ~ N(0, I)`; `x_delta` is drawn once per call and
/// held fixed across all refinement steps. With `steps < T` the schedule is
/// re-gridded first.
pub fn generate<R: Rng + ?Sized>(
    model: &dyn NoisePredictor,
    x: &EegEpoch,
    delta: f64,
    schedule: &NoiseSchedule,
    steps: usize,
    rng: &mut R,
) -> Result<EegEpoch> {
    if steps == 0 {
        return Err(Error::config("steps must be at least 1"));
    }
    let grid;
    let sched = if steps == schedule.t_max() {
        schedule
    } else {
        grid = schedule.regrid(steps)?;
        &grid
    };
    let x_delta = augment_condition(x, delta, rng)?;
    let mut y = standard_normal_grid(x.shape(), rng);
    for t in (1..=sched.t_max()).rev() {
        y = refine_grid(model, &x_delta.data, &y, t, sched, rng)?;
    }
    EegEpoch::new(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use approx::assert_relative_eq;
    use ndarray::arr2;

    /// Predictor returning a fixed grid.
    struct ConstPredictor(Array2<f64>);

    impl NoisePredictor for ConstPredictor {
        fn predict(&self, _x: &Array2<f64>, _y: &Array2<f64>, _g: f64) -> Result<Array2<f64>> {
            Ok(self.0.clone())
        }
    }

    /// Predictor returning the exact noise implied by a fixed target:
    /// `eps = (y_t - sqrt(gamma) y*) / sqrt(1 - gamma)`.
    struct OraclePredictor {
        target: Array2<f64>,
    }

    impl NoisePredictor for OraclePredictor {
        fn predict(&self, _x: &Array2<f64>, y: &Array2<f64>, gamma: f64) -> Result<Array2<f64>> {
            Ok((y - &(&self.target * gamma.sqrt())) / (1.0 - gamma).sqrt())
        }
    }

    fn epoch(values: &[[f64; 2]; 2]) -> EegEpoch {
        EegEpoch::new(arr2(values)).unwrap()
    }

    #[test]
    fn forward_marginal_endpoints() {
        let y0 = epoch(&[[1.0, -2.0], [0.5, 3.0]]);
        let eps = epoch(&[[0.3, 0.7], [-1.1, 0.0]]);
        let clean = forward_marginal(&y0, 1.0, &eps).unwrap();
        assert_eq!(clean.data, y0.data);
        let pure = forward_marginal(&y0, 0.0, &eps).unwrap();
        assert_eq!(pure.data, eps.data);
    }

    #[test]
    fn forward_marginal_scalar_oracle() {
        // sqrt(0.25) * 2 + sqrt(0.75) * 1 = 1.8660254...
        let y0 = EegEpoch::new(arr2(&[[2.0]])).unwrap();
        let eps = EegEpoch::new(arr2(&[[1.0]])).unwrap();
        let out = forward_marginal(&y0, 0.25, &eps).unwrap();
        assert_relative_eq!(out.data[[0, 0]], 1.8660254037844386, max_relative = 1e-12);
    }

    #[test]
    fn forward_marginal_rejects_mismatch() {
        let y0 = EegEpoch::zeros(2, 3);
        let eps = EegEpoch::zeros(2, 4);
        assert!(forward_marginal(&y0, 0.5, &eps).is_err());
        let eps = EegEpoch::zeros(2, 3);
        assert!(forward_marginal(&y0, 1.5, &eps).is_err());
    }

    #[test]
    fn posterior_collapses_at_t1() {
        let s = NoiseSchedule::linear(4, 0.1, 0.4, 1.0).unwrap();
        let y0 = epoch(&[[1.0, 2.0], [3.0, -4.0]]);
        let yt = epoch(&[[0.0, 0.0], [0.0, 0.0]]);
        let (mu, sigma2) = posterior_params(&y0, &yt, 1, &s).unwrap();
        for (m, y) in mu.data.iter().zip(y0.data.iter()) {
            assert_relative_eq!(*m, *y, max_relative = 1e-12);
        }
        assert_eq!(sigma2, 0.0);
    }

    #[test]
    fn posterior_scalar_oracle() {
        // gamma_prev = 0.9, alpha_t = 0.8 -> mu = 0.99707..., sigma2 = 1/14.
        let (mu, sigma2) = posterior_params_scalar(1.0, 1.0, 0.8, 0.9);
        assert_relative_eq!(mu, 0.9970692096789084, max_relative = 1e-12);
        assert_relative_eq!(sigma2, 0.07142857142857142, max_relative = 1e-9);
    }

    #[test]
    fn augment_identity_at_zero_delta() {
        let x = epoch(&[[1.0, -2.0], [0.25, 9.0]]);
        let mut rng = stream(1, 0);
        let out = augment_condition(&x, 0.0, &mut rng).unwrap();
        assert_eq!(out.data, x.data);
        assert!(augment_condition(&x, -0.1, &mut rng).is_err());
    }

    #[test]
    fn augment_moments() {
        let x = EegEpoch::zeros(1, 1);
        let delta = 0.05;
        let n = 1_000_000usize;
        let mut rng = stream(2, 0);
        let (mut sum, mut sumsq) = (0.0f64, 0.0f64);
        for _ in 0..n {
            let v = augment_condition(&x, delta, &mut rng).unwrap().data[[0, 0]];
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!(mean.abs() < 2e-4, "mean {mean}");
        assert_relative_eq!(var, delta * delta, max_relative = 0.01);
    }

    #[test]
    fn estimate_y0_scalar_oracle() {
        let yt = EegEpoch::new(arr2(&[[1.0]])).unwrap();
        let eps = EegEpoch::new(arr2(&[[0.5]])).unwrap();
        let out = estimate_y0(&yt, &eps, 0.64).unwrap();
        assert_relative_eq!(out.data[[0, 0]], 0.875, max_relative = 1e-12);
        let same = estimate_y0(&yt, &eps, 1.0).unwrap();
        assert_eq!(same.data, yt.data);
        assert!(estimate_y0(&yt, &eps, 0.0).is_err());
    }

    #[test]
    fn round_trip_recovers_target() {
        let mut rng = stream(6, 0);
        let y0 = standard_normal_like(&EegEpoch::zeros(4, 8), &mut rng);
        for gamma in [0.01, 0.1, 0.5, 0.9, 1.0] {
            let eps = standard_normal_like(&y0, &mut rng);
            let yt = forward_marginal(&y0, gamma, &eps).unwrap();
            let back = estimate_y0(&yt, &eps, gamma).unwrap();
            for (a, b) in back.data.iter().zip(y0.data.iter()) {
                assert_relative_eq!(*a, *b, max_relative = 1e-5);
            }
        }
    }

    #[test]
    fn training_loss_perfect_and_constant() {
        let mut rng = stream(7, 0);
        let y0 = standard_normal_like(&EegEpoch::zeros(2, 4), &mut rng);
        let pair = ConditionPair::new(y0.clone(), y0, 0, 0.0).unwrap();
        let s = NoiseSchedule::linear(4, 0.1, 0.4, 1.0).unwrap();
        let item = DiffusionTrainingItem::sample(&pair, &s, &mut rng).unwrap();

        let perfect = ConstPredictor(item.epsilon.data.clone());
        assert_eq!(training_loss(&perfect, &item, 2).unwrap(), 0.0);

        // Residual 0.5 everywhere: p=2 -> 0.25, p=1 -> 0.5.
        let off = ConstPredictor(&item.epsilon.data + 0.5);
        assert_relative_eq!(training_loss(&off, &item, 2).unwrap(), 0.25, max_relative = 1e-12);
        assert_relative_eq!(training_loss(&off, &item, 1).unwrap(), 0.5, max_relative = 1e-12);

        let bad = ConstPredictor(&item.epsilon.data * f64::NAN);
        assert!(matches!(training_loss(&bad, &item, 2), Err(Error::NonFinite)));
    }

    #[test]
    fn training_loss_non_negative() {
        let s = NoiseSchedule::linear(8, 0.05, 0.3, 1.0).unwrap();
        for seed in 0..100 {
            let mut rng = stream(seed, 1);
            let y0 = standard_normal_like(&EegEpoch::zeros(2, 4), &mut rng);
            let pair = ConditionPair::new(y0.clone(), y0, 0, 0.01).unwrap();
            let item = DiffusionTrainingItem::sample(&pair, &s, &mut rng).unwrap();
            let model = ConstPredictor(standard_normal_like(&item.epsilon, &mut rng).data);
            assert!(training_loss(&model, &item, 2).unwrap() >= 0.0);
        }
    }

    #[test]
    fn refinement_mean_scalar_oracle() {
        // yt=1, eps_hat=1, alpha=0.75, gamma=0.5 -> 0.74645...
        let mean = refinement_mean(&arr2(&[[1.0]]), &arr2(&[[1.0]]), 0.75, 0.5);
        let expect = (1.0 - 0.25 / 0.5f64.sqrt()) / 0.75f64.sqrt();
        assert_relative_eq!(mean[[0, 0]], expect, max_relative = 1e-12);
        assert_relative_eq!(mean[[0, 0]], 0.74645, max_relative = 1e-5);
    }

    #[test]
    fn refinement_step_adds_noise_except_at_t1() {
        // Two-step schedule with alpha_2 = 0.75 and gamma_2 = 0.5.
        let s = NoiseSchedule::from_alpha(vec![2.0 / 3.0, 0.75], 1.0).unwrap();
        assert_relative_eq!(s.gamma(2), 0.5, max_relative = 1e-12);
        let model = ConstPredictor(arr2(&[[1.0]]));
        let x = EegEpoch::new(arr2(&[[0.0]])).unwrap();
        let yt = EegEpoch::new(arr2(&[[1.0]])).unwrap();

        // t = 2: output = mean + sqrt(1 - alpha) * eps with eps from the rng.
        let out = refinement_step(&model, &x, &yt, 2, &s, &mut stream(8, 0)).unwrap();
        let mean = refinement_mean(&yt.data, &arr2(&[[1.0]]), 0.75, 0.5);
        let eps: f64 = stream(8, 0).sample(StandardNormal);
        assert_relative_eq!(
            out.data[[0, 0]],
            mean[[0, 0]] + 0.25f64.sqrt() * eps,
            max_relative = 1e-12
        );

        // t = 1: the additive noise term is omitted entirely.
        let out1 = refinement_step(&model, &x, &yt, 1, &s, &mut stream(9, 0)).unwrap();
        let mean1 = refinement_mean(&yt.data, &arr2(&[[1.0]]), 2.0 / 3.0, s.gamma(1));
        assert_eq!(out1.data[[0, 0]], mean1[[0, 0]]);
    }

    #[test]
    fn refinement_is_deterministic_under_seed() {
        let s = NoiseSchedule::linear(16, 0.05, 0.3, 1.0).unwrap();
        let mut rng = stream(9, 0);
        let y0 = standard_normal_like(&EegEpoch::zeros(3, 5), &mut rng);
        let x = standard_normal_like(&y0, &mut rng);
        let model = ConstPredictor(Array2::zeros((3, 5)));
        let a = refinement_step(&model, &x, &y0, 7, &s, &mut stream(42, 1)).unwrap();
        let b = refinement_step(&model, &x, &y0, 7, &s, &mut stream(42, 1)).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn oracle_sampler_converges_to_target() {
        let s = crate::schedule::ScheduleConfig::default().build().unwrap();
        let mut rng = stream(10, 0);
        let target = standard_normal_like(&EegEpoch::zeros(4, 16), &mut rng);
        let model = OraclePredictor {
            target: target.data.clone(),
        };
        let out = generate(&model, &target, 0.0, &s, 100, &mut stream(10, 1)).unwrap();
        let num = (&out.data - &target.data).mapv(|v| v * v).sum().sqrt();
        let den = target.data.mapv(|v| v * v).sum().sqrt();
        assert!(num / den <= 1e-3, "relative error {}", num / den);
    }

    #[test]
    fn generate_is_deterministic_and_shaped() {
        let s = NoiseSchedule::linear(32, 0.02, 0.3, 1.0).unwrap();
        let mut rng = stream(11, 0);
        let x = standard_normal_like(&EegEpoch::zeros(4, 8), &mut rng);
        let model = ConstPredictor(Array2::zeros((4, 8)));
        let a = generate(&model, &x, 0.05, &s, 32, &mut stream(3, 3)).unwrap();
        let b = generate(&model, &x, 0.05, &s, 32, &mut stream(3, 3)).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.shape(), (4, 8));
        assert!(generate(&model, &x, 0.05, &s, 0, &mut stream(3, 3)).is_err());
    }
}
