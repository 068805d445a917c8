//! Training loops for the full VAE and the partial encoder.
//!
//! The VAE maximizes a β-weighted evidence lower bound: per-pixel Bernoulli
//! cross-entropy reconstruction plus β times the KL divergence of the
//! encoder posterior from N(0, I), one reparameterized latent sample per
//! image. The partial encoder trains against the frozen decoder on
//! simulated measurements that are randomly masked per minibatch, both in
//! how many patterns survive and which — so measurement sets of every size,
//! including empty, are in-distribution.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::basis::{self, ConvHadamardFilter, PatternIndex, PATTERN_COUNT};
use crate::data::{CsvValue, Dataset, Image, IMAGE_SIDE};
use crate::models::{
    self, apply_mask, measurement_feature, ChannelProfile, MaskVector, NetworkBundle, LATENT_DIM,
    LOG_VAR_MAX, LOG_VAR_MIN,
};
use crate::nn::{self, AdamConfig, AdamState, NetSpec, ParamStore};
use crate::basis::{MeasurementSet, Source};
use crate::tensor::Tensor;
use crate::util::seeded_rng;
use crate::{Error, Result};

/// Reconstruction likelihood family. The Bernoulli form treats each pixel in
/// [0, 1] as a soft target for the sigmoid output; the Gaussian form is a
/// plain unit-variance squared error.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Likelihood {
    Bernoulli,
    Gaussian,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub rng_seed: u64,
    /// Separate stream for mask sampling; derived from `rng_seed` when None.
    pub mask_seed: Option<u64>,
    pub profile: ChannelProfile,
    /// Noise added to the simulated training measurements of the partial
    /// encoder.
    pub noise_sigma: f64,
    pub likelihood: Likelihood,
}

impl TrainConfig {
    pub fn desk(epochs: usize, seed: u64) -> Self {
        Self {
            beta: 0.1,
            learning_rate: 1e-3,
            batch_size: 128,
            epochs,
            rng_seed: seed,
            mask_seed: None,
            profile: ChannelProfile::SMALL,
            noise_sigma: 0.05,
            likelihood: Likelihood::Bernoulli,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!("beta {} must be > 0", self.beta)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning_rate {} must be >= 0",
                self.learning_rate
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!(
                "noise_sigma {} must be >= 0",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

// ── Masks ────────────────────────────────────────────────────────────

/// One random measurement mask: the count k is uniform over 0..=784 and the
/// k indices are drawn without replacement.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSample {
    indices: Vec<PatternIndex>,
}

impl MaskSample {
    pub fn count(&self) -> usize {
        self.indices.len()
    }

    pub fn indices(&self) -> &[PatternIndex] {
        &self.indices
    }

    pub fn to_mask(&self) -> MaskVector {
        MaskVector::from_indices(&self.indices)
    }
}

pub fn sample_mask<R: Rng>(rng: &mut R) -> MaskSample {
    let k = rng.gen_range(0..=PATTERN_COUNT);
    let mut pool: Vec<u16> = (0..PATTERN_COUNT as u16).collect();
    // Partial Fisher-Yates: the first k slots end up a uniform subset.
    for i in 0..k {
        let j = rng.gen_range(i..PATTERN_COUNT);
        pool.swap(i, j);
    }
    let mut indices: Vec<PatternIndex> = pool[..k]
        .iter()
        .map(|&j| PatternIndex::new(j as usize).expect("pool is in range"))
        .collect();
    indices.sort();
    MaskSample { indices }
}

/// The per-minibatch mask sequence used by [`train_partial`], exposed so
/// mask reproducibility is testable on its own.
pub fn mask_stream(mask_seed: u64, count: usize) -> Vec<MaskSample> {
    let mut rng = seeded_rng(mask_seed, "masks", 0);
    (0..count).map(|_| sample_mask(&mut rng)).collect()
}

// ── Reports ──────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_kl: f64,
    pub mean_recon: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainingReport {
    pub epochs: Vec<EpochStats>,
}

impl TrainingReport {
    pub const CSV_HEADER: [&'static str; 5] =
        ["epoch", "mean_loss", "mean_kl", "mean_recon", "wall_seconds"];

    pub fn csv_rows(&self) -> Vec<Vec<CsvValue>> {
        self.epochs
            .iter()
            .map(|e| {
                vec![
                    CsvValue::Int(e.epoch as i64),
                    CsvValue::Float(e.mean_loss),
                    CsvValue::Float(e.mean_kl),
                    CsvValue::Float(e.mean_recon),
                    CsvValue::Float(e.wall_seconds),
                ]
            })
            .collect()
    }
}

// ── Loss plumbing ────────────────────────────────────────────────────

/// Reparameterize: z = mu + exp(log_var/2) * eps, elementwise.
pub fn reparameterize(mean: &[f64], log_var: &[f64], eps: &[f64]) -> Vec<f64> {
    mean.iter()
        .zip(log_var)
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect()
}

/// Summed Bernoulli cross-entropy of a prediction in (0, 1) against targets
/// in [0, 1]. Non-negative for any such pair.
pub fn bernoulli_cross_entropy(prediction: &[f64], target: &[f64]) -> f64 {
    prediction
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let p = p.clamp(1e-12, 1.0 - 1e-12);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum()
}

struct SamplePass {
    recon: f64,
    kl: f64,
    head_grad: Vec<f64>,
    decoder_grads: Option<ParamStore>,
}

/// Shared head: given (mu, log_var) and a noise draw, decode and return the
/// loss pieces plus the gradient flowing back into the 2D head output.
#[allow(clippy::too_many_arguments)]
fn head_pass(
    decoder: &NetSpec,
    decoder_params: &ParamStore,
    head: &Tensor,
    target: &Image,
    eps: &[f64],
    beta: f64,
    likelihood: Likelihood,
    want_decoder_grads: bool,
) -> Result<SamplePass> {
    let d = LATENT_DIM;
    let mean = &head.data()[..d];
    let log_var_raw = &head.data()[d..];
    // Clamp only for the sampling path; KL uses the raw value, whose
    // gradient already pushes extreme log-variances back.
    let log_var_c: Vec<f64> = log_var_raw
        .iter()
        .map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX))
        .collect();
    let z = reparameterize(mean, &log_var_c, eps);

    let dec_acts = nn::forward(decoder, decoder_params, &Tensor::from_raw(vec![d], z))?;
    let output = dec_acts.last().unwrap();

    let (recon, grad, grad_is_presigmoid) = match likelihood {
        Likelihood::Bernoulli => {
            let recon = bernoulli_cross_entropy(output.data(), target.data());
            // d(recon)/d(pre-sigmoid) = prediction - target: fold the
            // sigmoid into the loss for stability.
            let g: Vec<f64> = output
                .data()
                .iter()
                .zip(target.data())
                .map(|(p, t)| p - t)
                .collect();
            (recon, g, true)
        }
        Likelihood::Gaussian => {
            let recon: f64 = output
                .data()
                .iter()
                .zip(target.data())
                .map(|(p, t)| 0.5 * (p - t) * (p - t))
                .sum();
            let g: Vec<f64> = output
                .data()
                .iter()
                .zip(target.data())
                .map(|(p, t)| p - t)
                .collect();
            (recon, g, false)
        }
    };

    let kl = models::kl_to_standard(mean, log_var_raw);
    if kl < -1e-9 {
        return Err(Error::Numerical(format!("negative KL term {kl}")));
    }

    // Backward through the decoder. For the Bernoulli loss the gradient is
    // with respect to the pre-sigmoid activation, so stop one layer early.
    let (layers, acts_upto) = if grad_is_presigmoid {
        debug_assert!(matches!(decoder.layers.last(), Some(nn::Layer::Sigmoid)));
        (
            NetSpec::new(decoder.layers[..decoder.layers.len() - 1].to_vec()),
            &dec_acts[..dec_acts.len() - 1],
        )
    } else {
        (decoder.clone(), &dec_acts[..])
    };
    let grad_t = Tensor::from_raw(acts_upto.last().unwrap().shape().to_vec(), grad);
    let (dec_grads, z_grad) = if want_decoder_grads {
        let (g, zg) = nn::backward(&layers, decoder_params, acts_upto, &grad_t)?;
        (Some(g), zg)
    } else {
        (
            None,
            nn::backward_input(&layers, decoder_params, acts_upto, &grad_t)?,
        )
    };

    // Head gradient: reconstruction path through z, plus the KL terms.
    let mut head_grad = vec![0.0; 2 * d];
    for i in 0..d {
        let gz = z_grad.data()[i];
        head_grad[i] = gz + beta * mean[i];
        let clamped = log_var_raw[i] != log_var_c[i];
        let sigma = (0.5 * log_var_c[i]).exp();
        let reparam = if clamped { 0.0 } else { gz * 0.5 * sigma * eps[i] };
        head_grad[d + i] = reparam + beta * 0.5 * log_var_raw[i].exp_m1();
    }

    Ok(SamplePass {
        recon,
        kl,
        head_grad,
        decoder_grads: dec_grads,
    })
}

pub struct ElboOutput {
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub encoder_grads: ParamStore,
    pub decoder_grads: ParamStore,
}

/// Batch-mean ELBO loss (reconstruction + β·KL) and its gradients for both
/// encoder and decoder. One reparameterized sample per image.
pub fn elbo_loss<R: Rng>(
    bundle: &NetworkBundle,
    batch: &[&Image],
    config: &TrainConfig,
    rng: &mut R,
) -> Result<ElboOutput> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mut enc_grads = bundle.encoder_params.zeros_like();
    let mut dec_grads = bundle.decoder_params.zeros_like();
    let (mut loss_sum, mut recon_sum, mut kl_sum) = (0.0, 0.0, 0.0);
    for (bi, image) in batch.iter().enumerate() {
        let eps: Vec<f64> = (0..LATENT_DIM)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let input = Tensor::from_raw(vec![1, IMAGE_SIDE, IMAGE_SIDE], image.data().to_vec());
        let enc_acts = nn::forward(&bundle.encoder, &bundle.encoder_params, &input)?;
        let pass = head_pass(
            &bundle.decoder,
            &bundle.decoder_params,
            enc_acts.last().unwrap(),
            image,
            &eps,
            config.beta,
            config.likelihood,
            true,
        )?;
        let loss = pass.recon + config.beta * pass.kl;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite ELBO loss at batch index {bi}"
            )));
        }
        loss_sum += loss;
        recon_sum += pass.recon;
        kl_sum += pass.kl;
        dec_grads.add_scaled(&pass.decoder_grads.unwrap(), 1.0)?;
        let head_grad = Tensor::from_raw(vec![2 * LATENT_DIM], pass.head_grad);
        let (eg, _) = nn::backward(&bundle.encoder, &bundle.encoder_params, &enc_acts, &head_grad)?;
        enc_grads.add_scaled(&eg, 1.0)?;
    }
    let n = batch.len() as f64;
    enc_grads.scale(1.0 / n);
    dec_grads.scale(1.0 / n);
    Ok(ElboOutput {
        loss: loss_sum / n,
        recon: recon_sum / n,
        kl: kl_sum / n,
        encoder_grads: enc_grads,
        decoder_grads: dec_grads,
    })
}

pub struct PartialOutput {
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub partial_grads: ParamStore,
    /// Always zero: the decoder is frozen during partial training.
    pub decoder_grads: ParamStore,
}

/// Batch-mean partial-encoder loss: simulate noisy measurements of each
/// image, zero-fill by the mask, and reconstruct the original image through
/// the frozen decoder.
pub fn partial_loss<R: Rng>(
    bundle: &NetworkBundle,
    batch: &[&Image],
    mask: &MaskSample,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<PartialOutput> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let filter = ConvHadamardFilter::standard();
    let mask_vec = mask.to_mask();
    let mut partial_grads = bundle.partial_params.zeros_like();
    let (mut loss_sum, mut recon_sum, mut kl_sum) = (0.0, 0.0, 0.0);
    for (bi, image) in batch.iter().enumerate() {
        // Simulated measurement of every pattern, with training noise; the
        // mask stage then zeroes everything not in this batch's subset.
        let mut coeffs = basis::transform_all(image, &filter);
        if config.noise_sigma > 0.0 {
            for c in &mut coeffs {
                *c += config.noise_sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let mut feature = Tensor::from_raw(vec![16, 7, 7], coeffs);
        apply_mask(&mut feature, &mask_vec);

        let eps: Vec<f64> = (0..LATENT_DIM)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let acts = nn::forward(&bundle.partial, &bundle.partial_params, &feature)?;
        let pass = head_pass(
            &bundle.decoder,
            &bundle.decoder_params,
            acts.last().unwrap(),
            image,
            &eps,
            config.beta,
            config.likelihood,
            false,
        )?;
        let loss = pass.recon + config.beta * pass.kl;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite partial loss at batch index {bi}"
            )));
        }
        loss_sum += loss;
        recon_sum += pass.recon;
        kl_sum += pass.kl;
        let head_grad = Tensor::from_raw(vec![2 * LATENT_DIM], pass.head_grad);
        let (pg, _) = nn::backward(&bundle.partial, &bundle.partial_params, &acts, &head_grad)?;
        partial_grads.add_scaled(&pg, 1.0)?;
    }
    let n = batch.len() as f64;
    partial_grads.scale(1.0 / n);
    Ok(PartialOutput {
        loss: loss_sum / n,
        recon: recon_sum / n,
        kl: kl_sum / n,
        partial_grads,
        decoder_grads: bundle.decoder_params.zeros_like(),
    })
}

// ── Trainers ─────────────────────────────────────────────────────────

fn epoch_order(rng: &mut ChaCha12Rng, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Train encoder and decoder jointly on the β-ELBO. Returns the trained
/// bundle and a per-epoch report.
pub fn train_vae(config: &TrainConfig, dataset: &Dataset) -> Result<(NetworkBundle, TrainingReport)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    let filter = ConvHadamardFilter::standard();
    let mut bundle = models::init_bundle(config.profile, filter.fingerprint(), config.rng_seed);
    let adam = AdamConfig {
        learning_rate: config.learning_rate,
        ..AdamConfig::default()
    };
    let mut enc_state = AdamState::new(&bundle.encoder_params, adam);
    let mut dec_state = AdamState::new(&bundle.decoder_params, adam);
    let mut rng = seeded_rng(config.rng_seed, "train-vae", 0);
    let mut report = TrainingReport::default();

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let order = epoch_order(&mut rng, dataset.len());
        let (mut loss_acc, mut recon_acc, mut kl_acc, mut seen) = (0.0, 0.0, 0.0, 0usize);
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Image> = chunk.iter().map(|&i| &dataset.images[i]).collect();
            let out = elbo_loss(&bundle, &batch, config, &mut rng).map_err(|e| {
                Error::Numerical(format!("epoch {epoch}, batch {batch_idx}: {e}"))
            })?;
            nn::adam_step(&mut bundle.encoder_params, &out.encoder_grads, &mut enc_state)?;
            nn::adam_step(&mut bundle.decoder_params, &out.decoder_grads, &mut dec_state)?;
            loss_acc += out.loss * batch.len() as f64;
            recon_acc += out.recon * batch.len() as f64;
            kl_acc += out.kl * batch.len() as f64;
            seen += batch.len();
        }
        report.epochs.push(EpochStats {
            epoch,
            mean_loss: loss_acc / seen as f64,
            mean_kl: kl_acc / seen as f64,
            mean_recon: recon_acc / seen as f64,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok((bundle, report))
}

/// Train the partial encoder against the frozen decoder. Encoder and
/// decoder parameters are returned bit-identical to the input bundle.
pub fn train_partial(
    config: &TrainConfig,
    dataset: &Dataset,
    bundle: &NetworkBundle,
) -> Result<(NetworkBundle, TrainingReport)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    let mut bundle = bundle.clone();
    let adam = AdamConfig {
        learning_rate: config.learning_rate,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(&bundle.partial_params, adam);
    let mut rng = seeded_rng(config.rng_seed, "train-partial", 0);
    let mask_seed = config.mask_seed.unwrap_or(config.rng_seed);
    let mut mask_rng = seeded_rng(mask_seed, "masks", 0);
    let mut report = TrainingReport::default();

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let order = epoch_order(&mut rng, dataset.len());
        let (mut loss_acc, mut recon_acc, mut kl_acc, mut seen) = (0.0, 0.0, 0.0, 0usize);
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Image> = chunk.iter().map(|&i| &dataset.images[i]).collect();
            let mask = sample_mask(&mut mask_rng);
            let out = partial_loss(&bundle, &batch, &mask, config, &mut rng).map_err(|e| {
                Error::Numerical(format!("epoch {epoch}, batch {batch_idx}: {e}"))
            })?;
            nn::adam_step(&mut bundle.partial_params, &out.partial_grads, &mut state)?;
            loss_acc += out.loss * batch.len() as f64;
            recon_acc += out.recon * batch.len() as f64;
            kl_acc += out.kl * batch.len() as f64;
            seen += batch.len();
        }
        report.epochs.push(EpochStats {
            epoch,
            mean_loss: loss_acc / seen as f64,
            mean_kl: kl_acc / seen as f64,
            mean_recon: recon_acc / seen as f64,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok((bundle, report))
}

/// Simulate a full measurement of an image under the training noise model
/// and keep only the masked-in subset. Used by tests and calibration.
pub fn masked_measurement<R: Rng>(
    image: &Image,
    mask: &MaskSample,
    filter: &ConvHadamardFilter,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<MeasurementSet> {
    let mut set = MeasurementSet::empty(filter.fingerprint(), noise_sigma, Source::Simulated);
    for &j in mask.indices() {
        let mut v = basis::coefficient(image, filter, j);
        if noise_sigma > 0.0 {
            v += noise_sigma * rng.sample::<f64, _>(StandardNormal);
        }
        set.push(j, v)?;
    }
    let _ = measurement_feature(&set);
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, Split};
    use crate::models::init_bundle;

    fn tiny_bundle(seed: u64) -> NetworkBundle {
        let filter = ConvHadamardFilter::standard();
        init_bundle(ChannelProfile::SMALL, filter.fingerprint(), seed)
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(models::kl_to_standard(&[0.0], &[0.0]), 0.0);
        assert!((models::kl_to_standard(&[1.0], &[0.0]) - 0.5).abs() < 1e-12);
        // Never negative, even for near-zero log-variance.
        for lv in [-1e-9, 1e-9, -0.3, 0.3] {
            assert!(models::kl_to_standard(&[0.0], &[lv]) >= 0.0, "lv={lv}");
        }
    }

    #[test]
    fn cross_entropy_closed_form() {
        let half = vec![0.5; 784];
        let target = vec![0.37; 784];
        let expected = 784.0 * std::f64::consts::LN_2;
        assert!((bernoulli_cross_entropy(&half, &target) - expected).abs() < 1e-9);
        assert!(bernoulli_cross_entropy(&half, &half) >= 0.0);
    }

    #[test]
    fn reparameterize_degenerates_to_mean() {
        let mean = [0.4, -1.2, 3.0];
        let eps = [0.7, -0.3, 2.0];
        let z = reparameterize(&mean, &[f64::NEG_INFINITY; 3], &eps);
        assert_eq!(z, mean.to_vec());
    }

    #[test]
    fn mask_statistics_and_determinism() {
        let mut rng = seeded_rng(1, "mask-test", 0);
        let n = 100_000;
        let mut total = 0usize;
        for _ in 0..n {
            let m = sample_mask(&mut rng);
            total += m.count();
            debug_assert!(m.indices().windows(2).all(|w| w[0] < w[1]));
        }
        let mean = total as f64 / n as f64;
        // Uniform over 0..=784 has mean 392, sd 226.6; 3-sigma band for the
        // mean of 1e5 draws is roughly +/- 2.15.
        assert!((380.0..=404.0).contains(&mean), "mean mask count {mean}");

        let a = mask_stream(9, 5);
        let b = mask_stream(9, 5);
        assert_eq!(a, b);
        let c = mask_stream(10, 5);
        assert_ne!(a, c);
        for m in &a {
            let mut seen = std::collections::HashSet::new();
            assert!(m.indices().iter().all(|j| seen.insert(j.flat())));
        }
    }

    #[test]
    fn elbo_and_partial_are_finite_and_nonnegative() {
        let bundle = tiny_bundle(3);
        let ds = synth_dataset(4, 1, Split::Train);
        let batch: Vec<&Image> = ds.images.iter().collect();
        let config = TrainConfig::desk(1, 0);
        let mut rng = seeded_rng(0, "t", 0);
        let out = elbo_loss(&bundle, &batch, &config, &mut rng).unwrap();
        assert!(out.loss.is_finite());
        assert!(out.recon >= 0.0);
        assert!(out.kl >= 0.0);

        let mask = sample_mask(&mut rng);
        let pout = partial_loss(&bundle, &batch, &mask, &config, &mut rng).unwrap();
        assert!(pout.loss.is_finite());
        assert!(pout.kl >= 0.0);

        // Empty mask: reconstruction decodes prior-like samples, still finite.
        let empty = MaskSample { indices: vec![] };
        let eout = partial_loss(&bundle, &batch, &empty, &config, &mut rng).unwrap();
        assert!(eout.loss.is_finite());
    }

    #[test]
    fn partial_decoder_grads_are_exactly_zero() {
        let bundle = tiny_bundle(4);
        let ds = synth_dataset(2, 2, Split::Train);
        let batch: Vec<&Image> = ds.images.iter().collect();
        let config = TrainConfig::desk(1, 0);
        let mut rng = seeded_rng(1, "t", 0);
        let mask = sample_mask(&mut rng);
        let out = partial_loss(&bundle, &batch, &mask, &config, &mut rng).unwrap();
        for (_, t) in out.decoder_grads.iter() {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let ds = synth_dataset(8, 3, Split::Train);
        let mut config = TrainConfig::desk(2, 5);
        config.batch_size = 4;
        config.learning_rate = 0.0;
        let (bundle, _) = train_vae(&config, &ds).unwrap();
        let fresh = tiny_bundle(5);
        assert_eq!(bundle.encoder_params, fresh.encoder_params);
        assert_eq!(bundle.decoder_params, fresh.decoder_params);
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let ds = synth_dataset(12, 3, Split::Train);
        let mut config = TrainConfig::desk(1, 7);
        config.batch_size = 6;
        let (a, _) = train_vae(&config, &ds).unwrap();
        let (b, _) = train_vae(&config, &ds).unwrap();
        assert_eq!(a.encoder_params, b.encoder_params);
        assert_eq!(a.decoder_params, b.decoder_params);

        let (pa, _) = train_partial(&config, &ds, &a).unwrap();
        let (pb, _) = train_partial(&config, &ds, &b).unwrap();
        assert_eq!(pa.partial_params, pb.partial_params);
        // Frozen nets bit-identical to their input.
        assert_eq!(pa.encoder_params, a.encoder_params);
        assert_eq!(pa.decoder_params, a.decoder_params);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::desk(0, 0);
        assert!(c.validate().is_err());
        c.epochs = 1;
        c.beta = 0.0;
        assert!(c.validate().is_err());
        c.beta = 0.1;
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }
}
