//! The convolutional Hadamard measurement basis.
//!
//! Rows of the order-16 Sylvester matrix, scaled to unit norm, become 4x4
//! filter taps applied at stride 4 over the 28x28 image. Every coefficient
//! therefore carries a patch position (x, y) in the 7x7 grid and a
//! resolution index r in 0..16; the flat pattern index is fixed as
//! `j = r*49 + y*7 + x`. With the 1/4 scaling the transform is orthonormal,
//! so the transpose map inverts it exactly once all 784 coefficients are
//! known.

use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::data::{Image, IMAGE_PIXELS, IMAGE_SIDE};
use crate::{Error, Result};

pub const PATTERN_COUNT: usize = 784;
pub const GRID_SIDE: usize = 7;
pub const PATCH_SIDE: usize = 4;
pub const RESOLUTION_COUNT: usize = 16;

// ── Hadamard matrix ──────────────────────────────────────────────────

/// Sylvester-construction Hadamard matrix: entries ±1, H·Hᵀ = N·I, first
/// row and column all +1.
#[derive(Clone, Debug, PartialEq)]
pub struct HadamardMatrix {
    order: usize,
    data: Vec<f64>,
}

impl HadamardMatrix {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.order + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.order..(row + 1) * self.order]
    }
}

pub fn build_hadamard(order: usize) -> Result<HadamardMatrix> {
    if order == 0 || !order.is_power_of_two() {
        return Err(Error::Config(format!(
            "Hadamard order {order} is not a power of two"
        )));
    }
    let mut data = vec![1.0];
    let mut n = 1;
    while n < order {
        // [[H, H], [H, -H]]
        let mut next = vec![0.0; 4 * n * n];
        for r in 0..n {
            for c in 0..n {
                let v = data[r * n + c];
                next[r * 2 * n + c] = v;
                next[r * 2 * n + c + n] = v;
                next[(r + n) * 2 * n + c] = v;
                next[(r + n) * 2 * n + c + n] = -v;
            }
        }
        data = next;
        n *= 2;
    }
    Ok(HadamardMatrix { order, data })
}

// ── Convolutional rearrangement ──────────────────────────────────────

/// The 4x4x16 filter: slice r is row r of H16 reshaped row-major, scaled by
/// 1/4 so every slice has unit norm.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvHadamardFilter {
    taps: Vec<f64>, // [r][u][v], 16*4*4
    fingerprint: String,
}

pub fn to_conv_filter(h: &HadamardMatrix) -> Result<ConvHadamardFilter> {
    if h.order() != RESOLUTION_COUNT {
        return Err(Error::Config(format!(
            "conv filter needs order {RESOLUTION_COUNT}, got {}",
            h.order()
        )));
    }
    let mut taps = Vec::with_capacity(RESOLUTION_COUNT * PATCH_SIDE * PATCH_SIDE);
    for r in 0..RESOLUTION_COUNT {
        taps.extend(h.row(r).iter().map(|v| v / PATCH_SIDE as f64));
    }
    let mut hasher = Sha256::new();
    for t in &taps {
        hasher.update(t.to_le_bytes());
    }
    let fingerprint = hex_string(&hasher.finalize());
    Ok(ConvHadamardFilter { taps, fingerprint })
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl ConvHadamardFilter {
    /// The filter for the order-16 Sylvester matrix; the basis everything in
    /// this crate measures with.
    pub fn standard() -> Self {
        to_conv_filter(&build_hadamard(RESOLUTION_COUNT).expect("16 is a power of two"))
            .expect("order is 16")
    }

    pub fn tap(&self, r: usize, u: usize, v: usize) -> f64 {
        self.taps[(r * PATCH_SIDE + u) * PATCH_SIDE + v]
    }

    /// The 16 taps of resolution slice r, row-major 4x4.
    pub fn slice(&self, r: usize) -> &[f64] {
        &self.taps[r * PATCH_SIDE * PATCH_SIDE..(r + 1) * PATCH_SIDE * PATCH_SIDE]
    }

    /// SHA-256 over the tap values; stored in trained bundles so a model is
    /// never applied to measurements from a different basis.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }
}

// ── Pattern indexing ─────────────────────────────────────────────────

/// One basis element: flat index j in 0..784 with derived coordinates
/// (x, y) in the 7x7 patch grid and resolution r in 0..16. The bijection is
/// fixed as `j = r*49 + y*7 + x`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PatternIndex(u16);

impl PatternIndex {
    pub fn new(flat: usize) -> Result<Self> {
        if flat >= PATTERN_COUNT {
            return Err(Error::Config(format!(
                "pattern index {flat} out of range 0..{PATTERN_COUNT}"
            )));
        }
        Ok(Self(flat as u16))
    }

    pub fn from_parts(x: usize, y: usize, r: usize) -> Result<Self> {
        if x >= GRID_SIDE || y >= GRID_SIDE || r >= RESOLUTION_COUNT {
            return Err(Error::Config(format!(
                "pattern coordinates (x={x}, y={y}, r={r}) out of range"
            )));
        }
        Ok(Self((r * GRID_SIDE * GRID_SIDE + y * GRID_SIDE + x) as u16))
    }

    pub fn flat(self) -> usize {
        self.0 as usize
    }

    pub fn x(self) -> usize {
        self.0 as usize % GRID_SIDE
    }

    pub fn y(self) -> usize {
        (self.0 as usize / GRID_SIDE) % GRID_SIDE
    }

    pub fn r(self) -> usize {
        self.0 as usize / (GRID_SIDE * GRID_SIDE)
    }

    pub fn all() -> impl Iterator<Item = PatternIndex> {
        (0..PATTERN_COUNT as u16).map(PatternIndex)
    }
}

// ── Measurement sets ─────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Actual,
    Simulated,
}

/// Ordered, distinct pattern indices with their measured values, plus the
/// noise level and basis used to take them.
#[derive(Clone, Debug)]
pub struct MeasurementSet {
    indices: Vec<PatternIndex>,
    values: Vec<f64>,
    member: Vec<bool>,
    noise_sigma: f64,
    source: Source,
    basis_fingerprint: String,
}

impl MeasurementSet {
    pub fn empty(basis_fingerprint: &str, noise_sigma: f64, source: Source) -> Self {
        Self {
            indices: Vec::new(),
            values: Vec::new(),
            member: vec![false; PATTERN_COUNT],
            noise_sigma,
            source,
            basis_fingerprint: basis_fingerprint.to_string(),
        }
    }

    pub fn push(&mut self, index: PatternIndex, value: f64) -> Result<()> {
        if self.member[index.flat()] {
            return Err(Error::DuplicateIndex(index.flat()));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "measurement value at pattern {}",
                index.flat()
            )));
        }
        self.member[index.flat()] = true;
        self.indices.push(index);
        self.values.push(value);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, index: PatternIndex) -> bool {
        self.member[index.flat()]
    }

    pub fn indices(&self) -> &[PatternIndex] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (PatternIndex, f64)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    pub fn source(&self) -> Source {
        self.source
    }

    pub fn basis_fingerprint(&self) -> &str {
        &self.basis_fingerprint
    }
}

/// The measurement process: a basis plus isotropic Gaussian noise level.
#[derive(Clone, Debug)]
pub struct MeasurementModel {
    pub filter: ConvHadamardFilter,
    pub noise_sigma: f64,
}

impl MeasurementModel {
    pub fn new(filter: ConvHadamardFilter, noise_sigma: f64) -> Result<Self> {
        if !(noise_sigma >= 0.0) {
            return Err(Error::Config(format!(
                "noise sigma {noise_sigma} must be >= 0"
            )));
        }
        Ok(Self {
            filter,
            noise_sigma,
        })
    }
}

// ── The measurement map and its transpose ────────────────────────────

/// Noiseless coefficient for one pattern: the inner product of filter slice
/// r with the 4x4 patch whose top-left pixel is (row 4y, col 4x).
pub fn coefficient(image: &Image, filter: &ConvHadamardFilter, index: PatternIndex) -> f64 {
    let (x, y, r) = (index.x(), index.y(), index.r());
    let slice = filter.slice(r);
    let mut acc = 0.0;
    for u in 0..PATCH_SIDE {
        let row = 4 * y + u;
        for v in 0..PATCH_SIDE {
            acc += slice[u * PATCH_SIDE + v] * image.get(row, 4 * x + v);
        }
    }
    acc
}

/// All 784 noiseless coefficients, indexed by flat pattern index.
pub fn transform_all(image: &Image, filter: &ConvHadamardFilter) -> Vec<f64> {
    let mut out = vec![0.0; PATTERN_COUNT];
    for y in 0..GRID_SIDE {
        for x in 0..GRID_SIDE {
            // Gather the patch once, then hit it with all 16 slices.
            let mut patch = [0.0f64; PATCH_SIDE * PATCH_SIDE];
            for u in 0..PATCH_SIDE {
                for v in 0..PATCH_SIDE {
                    patch[u * PATCH_SIDE + v] = image.get(4 * y + u, 4 * x + v);
                }
            }
            for r in 0..RESOLUTION_COUNT {
                let slice = filter.slice(r);
                let mut acc = 0.0;
                for t in 0..PATCH_SIDE * PATCH_SIDE {
                    acc += slice[t] * patch[t];
                }
                out[r * GRID_SIDE * GRID_SIDE + y * GRID_SIDE + x] = acc;
            }
        }
    }
    out
}

/// Measure the listed patterns on an image: coefficient plus Gaussian noise
/// of the model's sigma (skipped when sigma is zero).
pub fn measure<R: Rng>(
    image: &Image,
    indices: &[PatternIndex],
    model: &MeasurementModel,
    source: Source,
    rng: &mut R,
) -> Result<MeasurementSet> {
    let mut set = MeasurementSet::empty(model.filter.fingerprint(), model.noise_sigma, source);
    for &index in indices {
        let mut value = coefficient(image, &model.filter, index);
        if model.noise_sigma > 0.0 {
            value += model.noise_sigma * rng.sample::<f64, _>(StandardNormal);
        }
        set.push(index, value)?;
    }
    Ok(set)
}

/// Transpose map applied to raw (index, value) pairs, without clipping:
/// each coefficient scatters its slice back into its patch.
pub fn scatter_adjoint(
    indices: &[PatternIndex],
    values: &[f64],
    filter: &ConvHadamardFilter,
) -> Vec<f64> {
    debug_assert_eq!(indices.len(), values.len());
    let mut pixels = vec![0.0; IMAGE_PIXELS];
    for (&index, &value) in indices.iter().zip(values) {
        let (x, y, r) = (index.x(), index.y(), index.r());
        let slice = filter.slice(r);
        for u in 0..PATCH_SIDE {
            let row = 4 * y + u;
            for v in 0..PATCH_SIDE {
                pixels[row * IMAGE_SIDE + 4 * x + v] += value * slice[u * PATCH_SIDE + v];
            }
        }
    }
    pixels
}

/// Reconstruct by the transpose map, treating unmeasured coefficients as
/// zero. Orthonormality makes this the exact inverse once all 784 noiseless
/// coefficients are present. Output pixels are clipped to [0, 1].
pub fn inverse_reconstruct(set: &MeasurementSet, filter: &ConvHadamardFilter) -> Image {
    let pixels = scatter_adjoint(set.indices(), set.values(), filter);
    Image::new_clamped(pixels).expect("adjoint of finite values is finite")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::seeded_rng;
    use rand::Rng;

    fn random_image(seed: u64) -> Image {
        let mut rng = seeded_rng(seed, "basis-test", 0);
        Image::new((0..IMAGE_PIXELS).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    fn constant_image(c: f64) -> Image {
        Image::new(vec![c; IMAGE_PIXELS]).unwrap()
    }

    /// Row j of the explicit 784x784 orthonormal measurement matrix.
    fn dense_row(filter: &ConvHadamardFilter, j: PatternIndex) -> Vec<f64> {
        let mut row = vec![0.0; IMAGE_PIXELS];
        let slice = filter.slice(j.r());
        for u in 0..PATCH_SIDE {
            for v in 0..PATCH_SIDE {
                row[(4 * j.y() + u) * IMAGE_SIDE + 4 * j.x() + v] = slice[u * PATCH_SIDE + v];
            }
        }
        row
    }

    #[test]
    fn sylvester_base_case() {
        let h = build_hadamard(2).unwrap();
        assert_eq!(h.row(0), &[1.0, 1.0]);
        assert_eq!(h.row(1), &[1.0, -1.0]);
        assert!(build_hadamard(12).is_err());
        assert!(build_hadamard(0).is_err());
    }

    #[test]
    fn order16_orthogonality() {
        let h = build_hadamard(16).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                let dot: f64 = (0..16).map(|k| h.get(i, k) * h.get(j, k)).sum();
                let expected = if i == j { 16.0 } else { 0.0 };
                assert_eq!(dot, expected, "rows {i},{j}");
            }
        }
        for r in 1..16 {
            assert_eq!(h.row(r).iter().sum::<f64>(), 0.0, "row {r} sum");
        }
    }

    #[test]
    fn conv_filter_slices() {
        let filter = ConvHadamardFilter::standard();
        assert!(filter.slice(0).iter().all(|&v| v == 0.25), "DC patch");
        for r in 0..16 {
            let norm: f64 = filter.slice(r).iter().map(|v| v * v).sum();
            assert!((norm - 1.0).abs() < 1e-15, "slice {r} norm {norm}");
        }
        let dot: f64 = filter
            .slice(3)
            .iter()
            .zip(filter.slice(7))
            .map(|(a, b)| a * b)
            .sum();
        assert_eq!(dot, 0.0);
        let h8 = build_hadamard(8).unwrap();
        assert!(to_conv_filter(&h8).is_err());
    }

    #[test]
    fn constant_image_coefficients() {
        let filter = ConvHadamardFilter::standard();
        let img = constant_image(0.3);
        for j in [
            PatternIndex::from_parts(2, 5, 3).unwrap(),
            PatternIndex::from_parts(0, 0, 15).unwrap(),
        ] {
            assert!(coefficient(&img, &filter, j).abs() < 1e-15);
        }
        for j in [
            PatternIndex::from_parts(1, 1, 0).unwrap(),
            PatternIndex::from_parts(6, 6, 0).unwrap(),
        ] {
            // 16 entries of 1/4 each: DC coefficient is 4c.
            assert!((coefficient(&img, &filter, j) - 4.0 * 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_dense_matrix_oracle_and_inverts() {
        let filter = ConvHadamardFilter::standard();
        let img = random_image(11);
        let coeffs = transform_all(&img, &filter);
        for j in PatternIndex::all() {
            let row = dense_row(&filter, j);
            let oracle: f64 = row.iter().zip(img.data()).map(|(a, b)| a * b).sum();
            assert!((coeffs[j.flat()] - oracle).abs() < 1e-12, "pattern {}", j.flat());
        }
        // Full noiseless round trip.
        let model = MeasurementModel::new(filter.clone(), 0.0).unwrap();
        let all: Vec<PatternIndex> = PatternIndex::all().collect();
        let mut rng = seeded_rng(0, "noiseless", 0);
        let set = measure(&img, &all, &model, Source::Simulated, &mut rng).unwrap();
        let back = inverse_reconstruct(&set, &filter);
        let mse: f64 = back
            .data()
            .iter()
            .zip(img.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / IMAGE_PIXELS as f64;
        assert!(mse < 1e-20, "round-trip mse {mse}");
    }

    #[test]
    fn empty_and_dc_reconstructions() {
        let filter = ConvHadamardFilter::standard();
        let empty = MeasurementSet::empty(filter.fingerprint(), 0.0, Source::Simulated);
        assert_eq!(inverse_reconstruct(&empty, &filter), Image::zeros());

        // The 49 DC patterns capture a constant image completely.
        let img = constant_image(0.4);
        let model = MeasurementModel::new(filter.clone(), 0.0).unwrap();
        let dc: Vec<PatternIndex> = (0..GRID_SIDE * GRID_SIDE)
            .map(PatternIndex::new)
            .collect::<Result<_>>()
            .unwrap();
        let mut rng = seeded_rng(0, "dc", 0);
        let set = measure(&img, &dc, &model, Source::Simulated, &mut rng).unwrap();
        let back = inverse_reconstruct(&set, &filter);
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn parseval_and_linearity() {
        let filter = ConvHadamardFilter::standard();
        for seed in 0..5 {
            let img = random_image(seed);
            let coeffs = transform_all(&img, &filter);
            let energy_c: f64 = coeffs.iter().map(|v| v * v).sum();
            let energy_p: f64 = img.data().iter().map(|v| v * v).sum();
            assert!(
                (energy_c - energy_p).abs() <= 1e-8 * energy_p,
                "Parseval: {energy_c} vs {energy_p}"
            );
        }
        let (a, b) = (0.7, -0.4);
        let (x1, x2) = (random_image(21), random_image(22));
        let mix = Image::new_clamped(
            x1.data()
                .iter()
                .zip(x2.data())
                .map(|(p, q)| (a * p + b * q).clamp(0.0, 1.0))
                .collect(),
        )
        .unwrap();
        // Linearity checked on the raw pixel combination (pre-clamp), using
        // scatter over explicit values.
        let raw: Vec<f64> = x1
            .data()
            .iter()
            .zip(x2.data())
            .map(|(p, q)| a * p + b * q)
            .collect();
        let c1 = transform_all(&x1, &filter);
        let c2 = transform_all(&x2, &filter);
        for j in PatternIndex::all().take(100) {
            let row = dense_row(&filter, j);
            let direct: f64 = row.iter().zip(&raw).map(|(r, v)| r * v).sum();
            let combined = a * c1[j.flat()] + b * c2[j.flat()];
            assert!((direct - combined).abs() < 1e-12);
        }
        let _ = mix;
    }

    #[test]
    fn duplicate_indices_rejected() {
        let filter = ConvHadamardFilter::standard();
        let model = MeasurementModel::new(filter, 0.0).unwrap();
        let j = PatternIndex::new(5).unwrap();
        let mut rng = seeded_rng(0, "dup", 0);
        let err = measure(
            &constant_image(0.5),
            &[j, j],
            &model,
            Source::Actual,
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, Error::DuplicateIndex(5)));
    }

    #[test]
    fn noise_sample_variance_tracks_sigma() {
        let filter = ConvHadamardFilter::standard();
        let sigma = 0.05;
        let model = MeasurementModel::new(filter.clone(), sigma).unwrap();
        let img = random_image(3);
        let j = PatternIndex::new(100).unwrap();
        let clean = coefficient(&img, &filter, j);
        let mut rng = seeded_rng(9, "noise-stats", 0);
        let n = 10_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| {
                measure(&img, &[j], &model, Source::Actual, &mut rng).unwrap().values()[0] - clean
            })
            .collect();
        let mean: f64 = draws.iter().sum::<f64>() / n as f64;
        let var: f64 = draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1) as f64;
        // Sample variance of n Gaussian draws: sd ~ sigma^2 * sqrt(2/n).
        let band = 3.0 * sigma * sigma * (2.0 / n as f64).sqrt();
        assert!(
            (var - sigma * sigma).abs() < band,
            "sample var {var}, sigma^2 {}",
            sigma * sigma
        );
    }

    #[test]
    fn pattern_index_bijection() {
        for j in PatternIndex::all() {
            let back = PatternIndex::from_parts(j.x(), j.y(), j.r()).unwrap();
            assert_eq!(back, j);
            assert_eq!(j.flat(), j.r() * 49 + j.y() * 7 + j.x());
        }
        assert!(PatternIndex::new(784).is_err());
        assert!(PatternIndex::from_parts(7, 0, 0).is_err());
    }
}
