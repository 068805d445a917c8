//! The three networks and their persistence.
//!
//! * full encoder: image -> (mu, log-variance) of a diagonal Gaussian over
//!   the 16-dimensional latent space;
//! * decoder: latent -> image, sigmoid output;
//! * partial encoder: a zero-filled 7x7x16 measurement feature -> the same
//!   posterior head, trained on randomly masked simulated measurements.
//!
//! A [`NetworkBundle`] carries all three plus the fingerprint of the basis
//! the partial encoder was trained against; feeding it measurements taken
//! under any other basis is an error.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::basis::{MeasurementSet, PatternIndex, GRID_SIDE, PATTERN_COUNT, RESOLUTION_COUNT};
use crate::data::{Image, IMAGE_SIDE};
use crate::nn::{self, Layer, NetSpec, ParamStore};
use crate::tensor::Tensor;
use crate::util::seeded_rng;
use crate::{Error, Result};

pub const LATENT_DIM: usize = 16;
pub const LOG_VAR_MIN: f64 = -20.0;
pub const LOG_VAR_MAX: f64 = 20.0;

// ── Diagonal Gaussian posterior ──────────────────────────────────────

/// Mean and log-variance per latent dimension. Log-variances are clamped to
/// [-20, 20] on construction.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior {
    mean: Vec<f64>,
    log_var: Vec<f64>,
}

impl GaussianPosterior {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mean.len() != log_var.len() {
            return Err(Error::Shape {
                context: "posterior".into(),
                expected: vec![mean.len()],
                got: vec![log_var.len()],
            });
        }
        if !mean.iter().chain(log_var.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("posterior parameters".into()));
        }
        Ok(Self {
            mean,
            log_var: log_var
                .into_iter()
                .map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX))
                .collect(),
        })
    }

    /// N(0, I) in `dim` dimensions.
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }

    pub fn variance(&self, d: usize) -> f64 {
        self.log_var[d].exp()
    }

    /// Log-density of the diagonal Gaussian at z.
    pub fn log_density(&self, z: &[f64]) -> f64 {
        debug_assert_eq!(z.len(), self.dim());
        let mut acc = -(self.dim() as f64) * 0.5 * (2.0 * std::f64::consts::PI).ln();
        for d in 0..self.dim() {
            let lv = self.log_var[d];
            let diff = z[d] - self.mean[d];
            acc -= 0.5 * (lv + diff * diff * (-lv).exp());
        }
        acc
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.dim())
            .map(|d| {
                self.mean[d] + (0.5 * self.log_var[d]).exp() * rng.sample::<f64, _>(StandardNormal)
            })
            .collect()
    }

    /// KL(self || N(0, I)); the expm1 form keeps the value non-negative
    /// under rounding.
    pub fn kl_to_standard(&self) -> f64 {
        kl_to_standard(&self.mean, &self.log_var)
    }
}

pub fn kl_to_standard(mean: &[f64], log_var: &[f64]) -> f64 {
    mean.iter()
        .zip(log_var)
        .map(|(m, lv)| 0.5 * (m * m + (lv.exp_m1() - lv)))
        .sum()
}

// ── Masks ────────────────────────────────────────────────────────────

/// Which of the 784 patterns count as measured.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskVector {
    measured: Vec<bool>,
}

impl MaskVector {
    pub fn none() -> Self {
        Self {
            measured: vec![false; PATTERN_COUNT],
        }
    }

    pub fn from_indices(indices: &[PatternIndex]) -> Self {
        let mut measured = vec![false; PATTERN_COUNT];
        for &j in indices {
            measured[j.flat()] = true;
        }
        Self { measured }
    }

    pub fn is_measured(&self, j: PatternIndex) -> bool {
        self.measured[j.flat()]
    }

    pub fn count(&self) -> usize {
        self.measured.iter().filter(|&&m| m).count()
    }
}

// ── Architectures ────────────────────────────────────────────────────

/// Channel widths of the two convolutional stages. `PAPER` matches the
/// published architecture; `SMALL` is the desk-scale default.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelProfile {
    pub c1: usize,
    pub c2: usize,
}

impl ChannelProfile {
    pub const SMALL: Self = Self { c1: 8, c2: 16 };
    pub const PAPER: Self = Self { c1: 32, c2: 64 };
}

/// Image 28x28 -> 14x14xc1 -> 7x7xc2 -> dense 2D head.
pub fn encoder_spec(p: ChannelProfile) -> NetSpec {
    NetSpec::new(vec![
        Layer::Conv2d {
            in_ch: 1,
            out_ch: p.c1,
            kernel: 3,
            stride: 2,
            padding: 1,
        },
        Layer::ScaleShift { features: p.c1 },
        Layer::Relu,
        Layer::Conv2d {
            in_ch: p.c1,
            out_ch: p.c2,
            kernel: 3,
            stride: 2,
            padding: 1,
        },
        Layer::ScaleShift { features: p.c2 },
        Layer::Relu,
        Layer::Flatten,
        Layer::Dense {
            input: GRID_SIDE * GRID_SIDE * p.c2,
            output: 2 * LATENT_DIM,
        },
    ])
}

/// Measurement feature 16x7x7 -> 4x4xc2 -> dense 2D head. The Hadamard
/// stage itself lives in [`crate::basis`]; the trunk starts after the mask.
pub fn partial_encoder_spec(p: ChannelProfile) -> NetSpec {
    NetSpec::new(vec![
        Layer::Conv2d {
            in_ch: RESOLUTION_COUNT,
            out_ch: p.c2,
            kernel: 3,
            stride: 2,
            padding: 1,
        },
        Layer::ScaleShift { features: p.c2 },
        Layer::Relu,
        Layer::Flatten,
        Layer::Dense {
            input: 16 * p.c2,
            output: 2 * LATENT_DIM,
        },
    ])
}

/// Latent 16 -> project/reshape 7x7xc2 -> 14x14xc2 -> 28x28xc1 -> 28x28x1
/// with a sigmoid output.
pub fn decoder_spec(p: ChannelProfile) -> NetSpec {
    NetSpec::new(vec![
        Layer::Dense {
            input: LATENT_DIM,
            output: GRID_SIDE * GRID_SIDE * p.c2,
        },
        Layer::Reshape {
            shape: vec![p.c2, GRID_SIDE, GRID_SIDE],
        },
        Layer::ConvTranspose2d {
            in_ch: p.c2,
            out_ch: p.c2,
            kernel: 4,
            stride: 2,
            padding: 1,
        },
        Layer::Relu,
        Layer::ConvTranspose2d {
            in_ch: p.c2,
            out_ch: p.c1,
            kernel: 4,
            stride: 2,
            padding: 1,
        },
        Layer::Relu,
        Layer::ConvTranspose2d {
            in_ch: p.c1,
            out_ch: 1,
            kernel: 3,
            stride: 1,
            padding: 1,
        },
        Layer::Sigmoid,
    ])
}

// ── The bundle ───────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct NetworkBundle {
    pub encoder: NetSpec,
    pub encoder_params: ParamStore,
    pub decoder: NetSpec,
    pub decoder_params: ParamStore,
    pub partial: NetSpec,
    pub partial_params: ParamStore,
    pub latent_dim: usize,
    pub profile: ChannelProfile,
    pub basis_fingerprint: String,
}

/// Fresh bundle with seeded He initialization, bound to the given basis.
pub fn init_bundle(profile: ChannelProfile, basis_fingerprint: &str, seed: u64) -> NetworkBundle {
    let encoder = encoder_spec(profile);
    let decoder = decoder_spec(profile);
    let partial = partial_encoder_spec(profile);
    let encoder_params = nn::init_params(&encoder, &mut seeded_rng(seed, "init/encoder", 0));
    let decoder_params = nn::init_params(&decoder, &mut seeded_rng(seed, "init/decoder", 0));
    let partial_params = nn::init_params(&partial, &mut seeded_rng(seed, "init/partial", 0));
    NetworkBundle {
        encoder,
        encoder_params,
        decoder,
        decoder_params,
        partial,
        partial_params,
        latent_dim: LATENT_DIM,
        profile,
        basis_fingerprint: basis_fingerprint.to_string(),
    }
}

impl NetworkBundle {
    /// Split a 2D-long head output into (mean, log-variance).
    fn split_head(&self, head: &Tensor) -> Result<GaussianPosterior> {
        let d = self.latent_dim;
        if head.len() != 2 * d {
            return Err(Error::Shape {
                context: "posterior head".into(),
                expected: vec![2 * d],
                got: vec![head.len()],
            });
        }
        if !head.all_finite() {
            return Err(Error::NonFinite(
                "posterior head (untrained or diverged parameters)".into(),
            ));
        }
        GaussianPosterior::new(head.data()[..d].to_vec(), head.data()[d..].to_vec())
    }

    /// Full-encoder posterior for an image.
    pub fn encode(&self, image: &Image) -> Result<GaussianPosterior> {
        let input = Tensor::from_raw(vec![1, IMAGE_SIDE, IMAGE_SIDE], image.data().to_vec());
        let acts = nn::forward(&self.encoder, &self.encoder_params, &input)?;
        self.split_head(acts.last().unwrap())
    }

    /// Decode a latent vector to an image. Sigmoid output keeps pixels in
    /// [0, 1].
    pub fn decode(&self, z: &[f64]) -> Result<Image> {
        if z.len() != self.latent_dim {
            return Err(Error::Shape {
                context: "latent vector".into(),
                expected: vec![self.latent_dim],
                got: vec![z.len()],
            });
        }
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("latent vector".into()));
        }
        let acts = nn::forward(
            &self.decoder,
            &self.decoder_params,
            &Tensor::from_raw(vec![self.latent_dim], z.to_vec()),
        )?;
        let out = acts.last().unwrap();
        if !out.all_finite() {
            return Err(Error::NonFinite("decoder output".into()));
        }
        Image::new_clamped(out.data().to_vec())
    }

    /// Partial-encoder posterior for a measurement set. The set is expanded
    /// to the 7x7x16 feature with unmeasured entries zero, then run through
    /// the trunk.
    pub fn partial_encode(&self, m: &MeasurementSet) -> Result<GaussianPosterior> {
        if m.basis_fingerprint() != self.basis_fingerprint {
            return Err(Error::FingerprintMismatch {
                bundle: short(&self.basis_fingerprint),
                set: short(m.basis_fingerprint()),
            });
        }
        let feature = measurement_feature(m);
        self.partial_posterior_from_feature(&feature)
    }

    /// Run the partial trunk on an already-built feature tensor.
    pub fn partial_posterior_from_feature(&self, feature: &Tensor) -> Result<GaussianPosterior> {
        let acts = nn::forward(&self.partial, &self.partial_params, feature)?;
        self.split_head(acts.last().unwrap())
    }
}

fn short(fingerprint: &str) -> String {
    fingerprint.chars().take(12).collect()
}

/// Zero-filled 16x7x7 feature holding the measured coefficients at their
/// (r, y, x) positions.
pub fn measurement_feature(m: &MeasurementSet) -> Tensor {
    let mut data = vec![0.0; PATTERN_COUNT];
    for (j, v) in m.iter() {
        data[j.flat()] = v;
    }
    Tensor::from_raw(vec![RESOLUTION_COUNT, GRID_SIDE, GRID_SIDE], data)
}

/// The mask stage: zero out every coefficient not marked measured.
pub fn apply_mask(feature: &mut Tensor, mask: &MaskVector) {
    let data = feature.data_mut();
    for j in PatternIndex::all() {
        if !mask.is_measured(j) {
            data[j.flat()] = 0.0;
        }
    }
}

// ── Checkpoints ──────────────────────────────────────────────────────
//
// Versioned container: magic line "ASIV1", key=value metadata lines, a "---"
// separator, then the little-endian f64 parameter blobs in declared order
// (encoder, decoder, partial). Round trips are bit-exact.

const MAGIC: &[u8] = b"ASIV1\n";

pub fn save_checkpoint(bundle: &NetworkBundle, path: &Path) -> Result<()> {
    let mut header = String::new();
    header.push_str(&format!("latent_dim={}\n", bundle.latent_dim));
    header.push_str(&format!(
        "channels={},{}\n",
        bundle.profile.c1, bundle.profile.c2
    ));
    header.push_str(&format!("basis_fingerprint={}\n", bundle.basis_fingerprint));
    header.push_str(&format!("encoder={}\n", bundle.encoder.tokens()));
    header.push_str(&format!("decoder={}\n", bundle.decoder.tokens()));
    header.push_str(&format!("partial={}\n", bundle.partial.tokens()));
    let total = bundle.encoder_params.value_count()
        + bundle.decoder_params.value_count()
        + bundle.partial_params.value_count();
    header.push_str(&format!("value_count={total}\n"));
    header.push_str("---\n");

    let mut bytes = Vec::with_capacity(MAGIC.len() + header.len() + total * 8);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(header.as_bytes());
    for store in [
        &bundle.encoder_params,
        &bundle.decoder_params,
        &bundle.partial_params,
    ] {
        for (_, tensor) in store.iter() {
            for v in tensor.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<NetworkBundle> {
    let bytes =
        fs::read(path).map_err(|e| Error::MissingData(format!("{}: {e}", path.display())))?;
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("bad magic; not an ASIV1 checkpoint".into()));
    }
    let sep = b"---\n";
    let body_at = find(&bytes, sep)
        .ok_or_else(|| Error::Checkpoint("missing header separator".into()))?;
    let header = std::str::from_utf8(&bytes[MAGIC.len()..body_at])
        .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;

    let mut latent_dim = None;
    let mut channels = None;
    let mut fingerprint = None;
    let mut encoder = None;
    let mut decoder = None;
    let mut partial = None;
    let mut value_count = None;
    for line in header.lines() {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("malformed header line {line:?}")))?;
        match key {
            "latent_dim" => latent_dim = Some(parse_usize(value, key)?),
            "channels" => {
                let (a, b) = value
                    .split_once(',')
                    .ok_or_else(|| Error::Checkpoint("malformed channels".into()))?;
                channels = Some(ChannelProfile {
                    c1: parse_usize(a, key)?,
                    c2: parse_usize(b, key)?,
                });
            }
            "basis_fingerprint" => fingerprint = Some(value.to_string()),
            "encoder" => encoder = Some(NetSpec::parse_tokens(value)?),
            "decoder" => decoder = Some(NetSpec::parse_tokens(value)?),
            "partial" => partial = Some(NetSpec::parse_tokens(value)?),
            "value_count" => value_count = Some(parse_usize(value, key)?),
            _ => {} // forward compatibility
        }
    }
    let latent_dim = latent_dim.ok_or_else(|| missing("latent_dim"))?;
    let profile = channels.ok_or_else(|| missing("channels"))?;
    let basis_fingerprint = fingerprint.ok_or_else(|| missing("basis_fingerprint"))?;
    let encoder = encoder.ok_or_else(|| missing("encoder"))?;
    let decoder = decoder.ok_or_else(|| missing("decoder"))?;
    let partial = partial.ok_or_else(|| missing("partial"))?;
    let value_count = value_count.ok_or_else(|| missing("value_count"))?;

    let blob = &bytes[body_at + sep.len()..];
    if blob.len() != value_count * 8 {
        return Err(Error::Checkpoint(format!(
            "truncated parameter blob: {} bytes, expected {}",
            blob.len(),
            value_count * 8
        )));
    }
    let mut offset = 0usize;
    let mut read_store = |spec: &NetSpec| -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for (name, shape) in spec.param_specs() {
            let n: usize = shape.iter().product();
            if offset + n * 8 > blob.len() {
                return Err(Error::Checkpoint("truncated parameter blob".into()));
            }
            let data: Vec<f64> = blob[offset..offset + n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            offset += n * 8;
            if !data.iter().all(|v| v.is_finite()) {
                return Err(Error::Checkpoint(format!(
                    "non-finite values in parameter {name}"
                )));
            }
            store.insert(&name, Tensor::from_raw(shape, data))?;
        }
        Ok(store)
    };
    let encoder_params = read_store(&encoder)?;
    let decoder_params = read_store(&decoder)?;
    let partial_params = read_store(&partial)?;
    if offset != blob.len() {
        return Err(Error::Checkpoint(format!(
            "parameter blob has {} trailing bytes",
            blob.len() - offset
        )));
    }
    Ok(NetworkBundle {
        encoder,
        encoder_params,
        decoder,
        decoder_params,
        partial,
        partial_params,
        latent_dim,
        profile,
        basis_fingerprint,
    })
}

/// SHA-256 of a checkpoint file, for run manifests.
pub fn checkpoint_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

fn parse_usize(s: &str, key: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| Error::Checkpoint(format!("malformed {key} value {s:?}")))
}

fn missing(key: &str) -> Error {
    Error::Checkpoint(format!("missing required header field {key:?}"))
}

fn find(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack
        .windows(needle.len())
        .position(|w| w == needle)
}
