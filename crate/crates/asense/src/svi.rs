//! Per-instance stochastic variational inference.
//!
//! Fits a diagonal Gaussian q(z | y) to one measurement set by Adam on
//! (mu, log-variance), minimizing a Monte-Carlo estimate of
//! E_{z~q}[log q(z) - log p(y|z) - log p(z)] with reparameterized samples.
//! The likelihood term runs each sample through the frozen decoder and the
//! measurement map; the evidence normalizer is constant in z and dropped.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::basis::{self, MeasurementModel, MeasurementSet};
use crate::models::{GaussianPosterior, NetworkBundle, LOG_VAR_MAX, LOG_VAR_MIN};
use crate::nn::{self, AdamConfig, AdamState, ParamStore};
use crate::tensor::Tensor;
use crate::util::seeded_rng;
use crate::{Error, Result};

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Clone, Debug)]
pub enum SviInit {
    /// Start at the parameters of N(0, I): mu = 0, log-variance = 0.
    StandardNormal,
    /// Start from an existing posterior (the previous step's, inside an
    /// active episode).
    WarmStart(GaussianPosterior),
}

#[derive(Clone, Debug)]
pub struct SviConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub samples_per_iter: usize,
    pub init: SviInit,
    pub rng_seed: u64,
}

impl Default for SviConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            learning_rate: 0.01,
            samples_per_iter: 1,
            init: SviInit::StandardNormal,
            rng_seed: 0,
        }
    }
}

impl SviConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("svi iterations must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "svi learning_rate {} must be > 0",
                self.learning_rate
            )));
        }
        if self.samples_per_iter == 0 {
            return Err(Error::Config("svi samples_per_iter must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SviResult {
    pub posterior: GaussianPosterior,
    /// Loss estimate at each iteration, before that iteration's update.
    pub trace: Vec<f64>,
    /// How many log-variance entries hit the [-20, 20] clamp across the fit.
    pub clamp_events: usize,
}

struct LossGrad {
    loss: f64,
    grad_mean: Vec<f64>,
    grad_log_var: Vec<f64>,
}

/// One Monte-Carlo evaluation of the objective and its gradients at
/// (mean, log_var). Gradients of the log q term cancel analytically: the mu
/// path vanishes and the log-variance path is exactly -1/2 per dimension.
fn loss_and_grads<R: Rng>(
    mean: &[f64],
    log_var: &[f64],
    m: &MeasurementSet,
    bundle: &NetworkBundle,
    model: &MeasurementModel,
    samples: usize,
    rng: &mut R,
) -> Result<LossGrad> {
    let d = mean.len();
    if !m.is_empty() && model.noise_sigma == 0.0 {
        return Err(Error::DegenerateLikelihood);
    }
    let mut loss_acc = 0.0;
    let mut gm = vec![0.0; d];
    let mut glv = vec![0.0; d];
    for _ in 0..samples {
        let eps: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let sigma: Vec<f64> = log_var.iter().map(|lv| (0.5 * lv).exp()).collect();
        let z: Vec<f64> = (0..d).map(|i| mean[i] + sigma[i] * eps[i]).collect();

        // log q(z) at the reparameterized point: (z - mu)/sigma == eps.
        let log_q: f64 = -0.5
            * (d as f64 * LN_2PI
                + log_var.iter().sum::<f64>()
                + eps.iter().map(|e| e * e).sum::<f64>());
        // log p(z) under the standard normal prior.
        let log_p: f64 =
            -0.5 * (d as f64 * LN_2PI + z.iter().map(|v| v * v).sum::<f64>());

        let mut sample_loss = log_q - log_p;
        // d(-log p)/dz = z; log q contributes no z-gradient here.
        let mut gz: Vec<f64> = z.clone();

        if !m.is_empty() {
            let acts = nn::forward(
                &bundle.decoder,
                &bundle.decoder_params,
                &Tensor::from_raw(vec![d], z.clone()),
            )?;
            let decoded = acts.last().unwrap();
            let var = model.noise_sigma * model.noise_sigma;
            let mut residuals = Vec::with_capacity(m.len());
            let mut neg_log_lik = 0.5 * m.len() as f64 * (LN_2PI + var.ln());
            for (j, y) in m.iter() {
                let predicted = patch_coefficient(decoded.data(), &model.filter, j);
                let r = predicted - y;
                neg_log_lik += 0.5 * r * r / var;
                residuals.push(r / var);
            }
            sample_loss += neg_log_lik;
            // Adjoint of the measurement map scatters residuals back to
            // pixels, then the decoder backward carries them to z.
            let image_grad = basis::scatter_adjoint(m.indices(), &residuals, &model.filter);
            let grad_t = Tensor::from_raw(decoded.shape().to_vec(), image_grad);
            let zg = nn::backward_input(&bundle.decoder, &bundle.decoder_params, &acts, &grad_t)?;
            for (g, add) in gz.iter_mut().zip(zg.data()) {
                *g += add;
            }
        }

        loss_acc += sample_loss;
        for i in 0..d {
            gm[i] += gz[i];
            glv[i] += gz[i] * 0.5 * sigma[i] * eps[i] - 0.5;
        }
    }
    let inv = 1.0 / samples as f64;
    for g in gm.iter_mut().chain(glv.iter_mut()) {
        *g *= inv;
    }
    Ok(LossGrad {
        loss: loss_acc * inv,
        grad_mean: gm,
        grad_log_var: glv,
    })
}

/// Coefficient of one pattern computed directly on a decoded pixel buffer.
fn patch_coefficient(pixels: &[f64], filter: &basis::ConvHadamardFilter, j: basis::PatternIndex) -> f64 {
    let slice = filter.slice(j.r());
    let mut acc = 0.0;
    for u in 0..4 {
        let row = (4 * j.y() + u) * 28 + 4 * j.x();
        for v in 0..4 {
            acc += slice[u * 4 + v] * pixels[row + v];
        }
    }
    acc
}

/// Monte-Carlo estimate of the SVI objective at a fixed posterior, one
/// sample. Empty measurement sets are legal (the objective reduces to an
/// estimate of KL(q || prior)).
pub fn svi_loss<R: Rng>(
    q: &GaussianPosterior,
    m: &MeasurementSet,
    bundle: &NetworkBundle,
    model: &MeasurementModel,
    rng: &mut R,
) -> Result<f64> {
    Ok(loss_and_grads(q.mean(), q.log_var(), m, bundle, model, 1, rng)?.loss)
}

/// Fit q(z | y) by Adam for a fixed iteration budget. Deterministic per
/// seed; aborts with the iteration index on a non-finite loss.
pub fn svi_fit(
    m: &MeasurementSet,
    bundle: &NetworkBundle,
    model: &MeasurementModel,
    config: &SviConfig,
) -> Result<SviResult> {
    config.validate()?;
    let d = bundle.latent_dim;
    let (mut mean, mut log_var) = match &config.init {
        SviInit::StandardNormal => (vec![0.0; d], vec![0.0; d]),
        SviInit::WarmStart(q) => (q.mean().to_vec(), q.log_var().to_vec()),
    };
    let mut params = ParamStore::new();
    params.insert("mu", Tensor::from_raw(vec![d], mean.clone()))?;
    params.insert("log_var", Tensor::from_raw(vec![d], log_var.clone()))?;
    let mut state = AdamState::new(
        &params,
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
    );
    let mut rng = seeded_rng(config.rng_seed, "svi", 0);
    let mut trace = Vec::with_capacity(config.iterations);
    let mut clamp_events = 0usize;

    for iter in 0..config.iterations {
        let lg = loss_and_grads(
            &mean,
            &log_var,
            m,
            bundle,
            model,
            config.samples_per_iter,
            &mut rng,
        )?;
        if !lg.loss.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite SVI loss at iteration {iter}"
            )));
        }
        trace.push(lg.loss);
        let mut grads = ParamStore::new();
        grads.insert("mu", Tensor::from_raw(vec![d], lg.grad_mean))?;
        grads.insert("log_var", Tensor::from_raw(vec![d], lg.grad_log_var))?;
        nn::adam_step(&mut params, &grads, &mut state)?;
        mean = params.get("mu").unwrap().data().to_vec();
        log_var = params.get("log_var").unwrap().data().to_vec();
        for lv in log_var.iter_mut() {
            if *lv < LOG_VAR_MIN || *lv > LOG_VAR_MAX {
                *lv = lv.clamp(LOG_VAR_MIN, LOG_VAR_MAX);
                clamp_events += 1;
            }
        }
        params.get_mut("log_var").unwrap().data_mut().copy_from_slice(&log_var);
    }

    Ok(SviResult {
        posterior: GaussianPosterior::new(mean, log_var)?,
        trace,
        clamp_events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{ConvHadamardFilter, PatternIndex, Source};
    use crate::models::{init_bundle, ChannelProfile};

    fn bundle() -> NetworkBundle {
        let filter = ConvHadamardFilter::standard();
        init_bundle(ChannelProfile::SMALL, filter.fingerprint(), 0)
    }

    fn model(sigma: f64) -> MeasurementModel {
        MeasurementModel::new(ConvHadamardFilter::standard(), sigma).unwrap()
    }

    fn empty_set(sigma: f64) -> MeasurementSet {
        MeasurementSet::empty(ConvHadamardFilter::standard().fingerprint(), sigma, Source::Actual)
    }

    #[test]
    fn empty_set_prior_loss_has_zero_mean() {
        let b = bundle();
        let mdl = model(0.05);
        let m = empty_set(0.05);
        let q = GaussianPosterior::standard(16);
        let mut rng = seeded_rng(0, "svi-test", 0);
        let n = 10_000;
        let mean: f64 = (0..n)
            .map(|_| svi_loss(&q, &m, &b, &mdl, &mut rng).unwrap())
            .sum::<f64>()
            / n as f64;
        // q == prior pointwise, so each sample's log q - log p is exactly 0.
        assert!(mean.abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn shifted_gaussian_recovers_analytic_kl() {
        let b = bundle();
        let mdl = model(0.05);
        let m = empty_set(0.05);
        let mu = vec![0.7; 16];
        let q = GaussianPosterior::new(mu.clone(), vec![0.0; 16]).unwrap();
        let analytic: f64 = 0.5 * mu.iter().map(|v| v * v).sum::<f64>();
        let mut rng = seeded_rng(1, "svi-test", 0);
        let n = 10_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| svi_loss(&q, &m, &b, &mdl, &mut rng).unwrap())
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!(
            (mean - analytic).abs() < 3.0 * se,
            "mean {mean}, analytic {analytic}, se {se}"
        );
    }

    #[test]
    fn zero_sigma_with_measurements_is_degenerate() {
        let b = bundle();
        let mdl = model(0.0);
        let mut m = empty_set(0.0);
        m.push(PatternIndex::new(0).unwrap(), 0.5).unwrap();
        let q = GaussianPosterior::standard(16);
        let mut rng = seeded_rng(2, "svi-test", 0);
        let err = svi_loss(&q, &m, &b, &mdl, &mut rng).unwrap_err();
        assert!(matches!(err, Error::DegenerateLikelihood));
        let cfg = SviConfig::default();
        assert!(matches!(
            svi_fit(&m, &b, &mdl, &cfg),
            Err(Error::DegenerateLikelihood)
        ));
    }

    #[test]
    fn empty_fit_stays_near_prior() {
        let b = bundle();
        let mdl = model(0.05);
        let m = empty_set(0.05);
        let cfg = SviConfig {
            rng_seed: 3,
            ..SviConfig::default()
        };
        let fit = svi_fit(&m, &b, &mdl, &cfg).unwrap();
        assert_eq!(fit.trace.len(), cfg.iterations);
        for d in 0..16 {
            assert!(fit.posterior.mean()[d].abs() < 0.05, "mu {d}");
            assert!((fit.posterior.variance(d) - 1.0).abs() < 0.1, "var {d}");
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let b = bundle();
        let mdl = model(0.05);
        let mut m = empty_set(0.05);
        m.push(PatternIndex::new(3).unwrap(), 0.4).unwrap();
        m.push(PatternIndex::new(77).unwrap(), -0.2).unwrap();
        let cfg = SviConfig {
            iterations: 20,
            rng_seed: 4,
            ..SviConfig::default()
        };
        let a = svi_fit(&m, &b, &mdl, &cfg).unwrap();
        let c = svi_fit(&m, &b, &mdl, &cfg).unwrap();
        assert_eq!(a.posterior, c.posterior);
        assert_eq!(a.trace, c.trace);
    }

    #[test]
    fn gradients_match_finite_differences() {
        // Validate the hand-derived analytic gradients on the full
        // objective (likelihood through decoder included) by averaging the
        // same fixed noise draws.
        let b = bundle();
        let mdl = model(0.3);
        let mut m = empty_set(0.3);
        m.push(PatternIndex::new(10).unwrap(), 0.6).unwrap();
        m.push(PatternIndex::new(400).unwrap(), -0.3).unwrap();

        let mean = vec![0.2; 16];
        let log_var = vec![-0.4; 16];
        // Use a large common-random-number sample so the MC estimate is
        // smooth in the parameters.
        let samples = 256;
        let eval = |mu: &[f64], lv: &[f64], seed: u64| -> (f64, Vec<f64>, Vec<f64>) {
            let mut rng = seeded_rng(seed, "fd", 0);
            let lg = loss_and_grads(mu, lv, &m, &b, &mdl, samples, &mut rng).unwrap();
            (lg.loss, lg.grad_mean, lg.grad_log_var)
        };
        let (_, gm, glv) = eval(&mean, &log_var, 7);
        let h = 1e-4;
        for d in [0usize, 5, 15] {
            let mut mp = mean.clone();
            mp[d] += h;
            let mut mm = mean.clone();
            mm[d] -= h;
            let fd = (eval(&mp, &log_var, 7).0 - eval(&mm, &log_var, 7).0) / (2.0 * h);
            assert!(
                (fd - gm[d]).abs() < 1e-3 * gm[d].abs().max(1.0),
                "mu[{d}]: fd {fd} analytic {}",
                gm[d]
            );
            let mut lp = log_var.clone();
            lp[d] += h;
            let mut lm = log_var.clone();
            lm[d] -= h;
            let fd = (eval(&mean, &lp, 7).0 - eval(&mean, &lm, 7).0) / (2.0 * h);
            assert!(
                (fd - glv[d]).abs() < 1e-3 * glv[d].abs().max(1.0),
                "lv[{d}]: fd {fd} analytic {}",
                glv[d]
            );
        }
    }
}
