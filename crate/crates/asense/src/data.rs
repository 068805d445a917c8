//! Dataset ingestion (Fashion-MNIST IDX files), a synthetic shape corpus for
//! fast runs, and CSV emission.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::util::seeded_rng;
use crate::{Error, Result};

pub const IMAGE_SIDE: usize = 28;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// A 28x28 grayscale image with pixels in [0, 1], row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != IMAGE_PIXELS {
            return Err(Error::Shape {
                context: "image".into(),
                expected: vec![IMAGE_SIDE, IMAGE_SIDE],
                got: vec![pixels.len()],
            });
        }
        if !pixels.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::NonFinite("image pixels outside [0, 1]".into()));
        }
        Ok(Self { pixels })
    }

    /// Clip finite values into the pixel range. Reconstructions from partial
    /// or noisy measurements land slightly outside [0, 1]; physically the
    /// scene never does.
    pub fn new_clamped(pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != IMAGE_PIXELS {
            return Err(Error::Shape {
                context: "image".into(),
                expected: vec![IMAGE_SIDE, IMAGE_SIDE],
                got: vec![pixels.len()],
            });
        }
        if !pixels.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("image pixels".into()));
        }
        Ok(Self {
            pixels: pixels.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        })
    }

    pub fn zeros() -> Self {
        Self {
            pixels: vec![0.0; IMAGE_PIXELS],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * IMAGE_SIDE + col]
    }

    pub fn data(&self) -> &[f64] {
        &self.pixels
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<u8>,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Vec<Image>, labels: Vec<u8>, split: Split) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Idx(format!(
                "image/label count mismatch: {} vs {}",
                images.len(),
                labels.len()
            )));
        }
        Ok(Self {
            images,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Index of the first image of each label 0..=9, in label order. Labels
    /// absent from the dataset are skipped.
    pub fn class_suite(&self) -> Vec<usize> {
        let mut found = [None; 10];
        for (i, &l) in self.labels.iter().enumerate() {
            let slot = l as usize;
            if slot < 10 && found[slot].is_none() {
                found[slot] = Some(i);
            }
        }
        found.iter().flatten().copied().collect()
    }
}

// ── IDX loading ──────────────────────────────────────────────────────

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    let chunk: [u8; 4] = bytes
        .get(at..at + 4)
        .and_then(|s| s.try_into().ok())
        .ok_or_else(|| Error::Idx(format!("truncated {what} header")))?;
    Ok(u32::from_be_bytes(chunk))
}

/// Parse a Fashion-MNIST style IDX image/label file pair.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let img_bytes = fs::read(images_path)
        .map_err(|e| Error::MissingData(format!("{}: {e}", images_path.display())))?;
    let lbl_bytes = fs::read(labels_path)
        .map_err(|e| Error::MissingData(format!("{}: {e}", labels_path.display())))?;

    let magic = be_u32(&img_bytes, 0, "image")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Idx(format!(
            "image file magic {magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x}"
        )));
    }
    let count = be_u32(&img_bytes, 4, "image")? as usize;
    let rows = be_u32(&img_bytes, 8, "image")? as usize;
    let cols = be_u32(&img_bytes, 12, "image")? as usize;
    if rows != IMAGE_SIDE || cols != IMAGE_SIDE {
        return Err(Error::Idx(format!(
            "image dimensions {rows}x{cols}, expected {IMAGE_SIDE}x{IMAGE_SIDE}"
        )));
    }
    let payload = &img_bytes[16..];
    if payload.len() != count * IMAGE_PIXELS {
        return Err(Error::Idx(format!(
            "image payload {} bytes, expected {} for {count} images",
            payload.len(),
            count * IMAGE_PIXELS
        )));
    }

    let lmagic = be_u32(&lbl_bytes, 0, "label")?;
    if lmagic != IDX_LABEL_MAGIC {
        return Err(Error::Idx(format!(
            "label file magic {lmagic:#010x}, expected {IDX_LABEL_MAGIC:#010x}"
        )));
    }
    let lcount = be_u32(&lbl_bytes, 4, "label")? as usize;
    if lcount != count {
        return Err(Error::Idx(format!(
            "label count {lcount} does not match image count {count}"
        )));
    }
    let lpayload = &lbl_bytes[8..];
    if lpayload.len() != count {
        return Err(Error::Idx(format!(
            "label payload {} bytes, expected {count}",
            lpayload.len()
        )));
    }

    let images = payload
        .chunks_exact(IMAGE_PIXELS)
        .map(|chunk| {
            Image::new(chunk.iter().map(|&b| f64::from(b) / 255.0).collect())
                .expect("u8/255 is always in range")
        })
        .collect();
    Dataset::new(images, lpayload.to_vec(), split)
}

/// Write a two-image dataset back out as an IDX pair (test fixtures).
pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let mut img = Vec::with_capacity(16 + ds.len() * IMAGE_PIXELS);
    img.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    img.extend_from_slice(&(IMAGE_SIDE as u32).to_be_bytes());
    img.extend_from_slice(&(IMAGE_SIDE as u32).to_be_bytes());
    for image in &ds.images {
        img.extend(image.data().iter().map(|v| (v * 255.0).round() as u8));
    }
    fs::write(images_path, img)?;

    let mut lbl = Vec::with_capacity(8 + ds.len());
    lbl.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lbl.extend_from_slice(&ds.labels);
    fs::write(labels_path, lbl)?;
    Ok(())
}

// ── Synthetic corpus ─────────────────────────────────────────────────

/// Procedurally generated 28x28 shapes in ten families (label = family),
/// deterministic per seed. Shapes get a light blur so a sigmoid decoder has
/// something smooth to match.
pub fn synth_dataset(count: usize, rng_seed: u64, split: Split) -> Dataset {
    let tag = match split {
        Split::Train => "synth/train",
        Split::Test => "synth/test",
    };
    let mut rng = seeded_rng(rng_seed, tag, 0);
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = (i % 10) as u8;
        images.push(synth_image(class, &mut rng));
        labels.push(class);
    }
    Dataset {
        images,
        labels,
        split,
    }
}

fn synth_image(class: u8, rng: &mut ChaCha12Rng) -> Image {
    let mut px = vec![0.0f64; IMAGE_PIXELS];
    let a: f64 = rng.gen_range(0.6..1.0);
    let n = IMAGE_SIDE as i32;
    let set = |px: &mut Vec<f64>, r: i32, c: i32, v: f64| {
        if (0..n).contains(&r) && (0..n).contains(&c) {
            px[(r * n + c) as usize] = v;
        }
    };
    match class {
        0 => {
            // filled rectangle
            let (r0, c0) = (rng.gen_range(3..11), rng.gen_range(3..11));
            let (h, w) = (rng.gen_range(9..15), rng.gen_range(9..15));
            for r in r0..(r0 + h).min(n - 2) {
                for c in c0..(c0 + w).min(n - 2) {
                    set(&mut px, r, c, a);
                }
            }
        }
        1 => {
            // hollow rectangle
            let (r0, c0) = (rng.gen_range(3..9), rng.gen_range(3..9));
            let (h, w) = (rng.gen_range(11..17), rng.gen_range(11..17));
            let b = rng.gen_range(2..4);
            for r in r0..(r0 + h).min(n - 2) {
                for c in c0..(c0 + w).min(n - 2) {
                    let inner = r >= r0 + b && r < r0 + h - b && c >= c0 + b && c < c0 + w - b;
                    if !inner {
                        set(&mut px, r, c, a);
                    }
                }
            }
        }
        2 | 3 => {
            // horizontal / vertical bars
            let bars = rng.gen_range(2..4);
            let thick = rng.gen_range(3..5);
            let gap = rng.gen_range(2..5);
            let start = rng.gen_range(2..6);
            let span0 = rng.gen_range(2..5);
            let span1 = rng.gen_range(23..26);
            for b in 0..bars {
                let lo = start + b * (thick + gap);
                for t in lo..lo + thick {
                    for s in span0..span1 {
                        if class == 2 {
                            set(&mut px, t, s, a);
                        } else {
                            set(&mut px, s, t, a);
                        }
                    }
                }
            }
        }
        4 | 5 => {
            // disc / ring
            let (cr, cc) = (rng.gen_range(10..18), rng.gen_range(10..18));
            let radius: f64 = rng.gen_range(5.0..8.5);
            let thick: f64 = rng.gen_range(2.0..3.5);
            for r in 0..n {
                for c in 0..n {
                    let d = (((r - cr) * (r - cr) + (c - cc) * (c - cc)) as f64).sqrt();
                    let hit = if class == 4 {
                        d <= radius
                    } else {
                        d <= radius && d >= radius - thick
                    };
                    if hit {
                        set(&mut px, r, c, a);
                    }
                }
            }
        }
        6 => {
            // cross
            let (cr, cc) = (rng.gen_range(11..17), rng.gen_range(11..17));
            let arm = rng.gen_range(8..12);
            let width = rng.gen_range(3..5);
            for t in -(width / 2)..=(width / 2) {
                for s in -arm..=arm {
                    set(&mut px, cr + t, cc + s, a);
                    set(&mut px, cr + s, cc + t, a);
                }
            }
        }
        7 => {
            // diagonal stripe
            let width = rng.gen_range(5..9);
            let offset = rng.gen_range(-6..7);
            let flip = rng.gen_bool(0.5);
            for r in 0..n {
                for c in 0..n {
                    let d = if flip { r + c - n + 1 } else { r - c };
                    if (d - offset).abs() < width / 2 + 1 {
                        set(&mut px, r, c, a);
                    }
                }
            }
        }
        8 => {
            // two discs
            for _ in 0..2 {
                let (cr, cc) = (rng.gen_range(6..22), rng.gen_range(6..22));
                let radius: f64 = rng.gen_range(3.0..5.5);
                for r in 0..n {
                    for c in 0..n {
                        let d = (((r - cr) * (r - cr) + (c - cc) * (c - cc)) as f64).sqrt();
                        if d <= radius {
                            set(&mut px, r, c, a);
                        }
                    }
                }
            }
        }
        _ => {
            // checker blocks
            let cell = rng.gen_range(5..9);
            let phase = rng.gen_range(0..2);
            for r in 0..n {
                for c in 0..n {
                    if ((r / cell) + (c / cell)) % 2 == phase {
                        set(&mut px, r, c, a);
                    }
                }
            }
        }
    }
    blur3(&mut px);
    Image::new(px).expect("synthetic pixels stay in range")
}

/// Separable [1/4, 1/2, 1/4] blur; a convex combination, so the range holds.
fn blur3(px: &mut Vec<f64>) {
    let n = IMAGE_SIDE;
    let at = |p: &[f64], r: isize, c: isize| -> f64 {
        let r = r.clamp(0, n as isize - 1) as usize;
        let c = c.clamp(0, n as isize - 1) as usize;
        p[r * n + c]
    };
    let mut tmp = vec![0.0; px.len()];
    for r in 0..n as isize {
        for c in 0..n as isize {
            tmp[r as usize * n + c as usize] =
                0.25 * at(px, r, c - 1) + 0.5 * at(px, r, c) + 0.25 * at(px, r, c + 1);
        }
    }
    for r in 0..n as isize {
        for c in 0..n as isize {
            px[r as usize * n + c as usize] =
                0.25 * at(&tmp, r - 1, c) + 0.5 * at(&tmp, r, c) + 0.25 * at(&tmp, r + 1, c);
        }
    }
}

// ── CSV emission ─────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub enum CsvValue {
    Int(i64),
    Float(f64),
    Str(String),
}

/// Plain decimal with nine significant digits, e.g. `1/3 -> "0.333333333"`.
pub fn fmt_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let mag = x.abs().log10().floor() as i32;
    let prec = (8 - mag).clamp(0, 30) as usize;
    format!("{x:.prec$}")
}

fn csv_field(value: &CsvValue) -> String {
    let raw = match value {
        CsvValue::Int(v) => v.to_string(),
        CsvValue::Float(v) => fmt_sig9(*v),
        CsvValue::Str(s) => s.clone(),
    };
    if raw.contains(',') || raw.contains('"') || raw.contains('\n') {
        format!("\"{}\"", raw.replace('"', "\"\""))
    } else {
        raw
    }
}

pub fn csv_to_string(header: &[&str], rows: &[Vec<CsvValue>]) -> String {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        let fields: Vec<String> = row.iter().map(csv_field).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// Write rows under a header; every value formatted to nine significant
/// digits.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<CsvValue>]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(csv_to_string(header, rows).as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_fixture_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("imgs");
        let lbl_path = dir.path().join("lbls");
        let mut a = vec![0.0; IMAGE_PIXELS];
        a[0] = 0.0;
        a[1] = 1.0;
        let ds = Dataset::new(
            vec![Image::new(a).unwrap(), Image::zeros()],
            vec![3, 7],
            Split::Train,
        )
        .unwrap();
        write_idx(&ds, &img_path, &lbl_path).unwrap();
        let back = load_idx(&img_path, &lbl_path, Split::Train).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.images[0].data()[0], 0.0);
        assert_eq!(back.images[0].data()[1], 1.0);
        assert_eq!(back.labels, vec![3, 7]);
        assert_eq!(back.images, ds.images);
    }

    #[test]
    fn idx_magic_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("imgs");
        let lbl_path = dir.path().join("lbls");
        let ds = Dataset::new(vec![Image::zeros()], vec![0], Split::Train).unwrap();
        write_idx(&ds, &img_path, &lbl_path).unwrap();
        // Pass the images file where labels are expected: wrong magic.
        let err = load_idx(&img_path, &img_path, Split::Train).unwrap_err();
        assert!(matches!(err, Error::Idx(_)), "got {err:?}");
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn idx_truncation_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("imgs");
        let lbl_path = dir.path().join("lbls");
        let ds = Dataset::new(vec![Image::zeros(); 3], vec![0, 1, 2], Split::Train).unwrap();
        write_idx(&ds, &img_path, &lbl_path).unwrap();
        let bytes = fs::read(&img_path).unwrap();
        fs::write(&img_path, &bytes[..bytes.len() - 10]).unwrap();
        let err = load_idx(&img_path, &lbl_path, Split::Train).unwrap_err();
        assert!(err.to_string().contains("payload"), "got {err}");
    }

    #[test]
    fn synth_is_deterministic_and_in_range() {
        let a = synth_dataset(1000, 42, Split::Train);
        let b = synth_dataset(1000, 42, Split::Train);
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.len(), 1000);
        for img in &a.images {
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(a.labels.iter().all(|&l| l <= 9));
        // Different seed, different pixels.
        let c = synth_dataset(1000, 43, Split::Train);
        assert_ne!(a.images, c.images);
        // Full ten-class suite available.
        assert_eq!(a.class_suite().len(), 10);
    }

    #[test]
    fn csv_formatting_contract() {
        assert_eq!(fmt_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_sig9(0.0), "0");
        assert_eq!(fmt_sig9(-0.25), "-0.250000000");

        let rows = vec![vec![
            CsvValue::Int(2),
            CsvValue::Float(1.0 / 3.0),
            CsvValue::Str("qp".into()),
        ]];
        let text = csv_to_string(&["a", "b", "c"], &rows);
        assert_eq!(text, "a,b,c\n2,0.333333333,qp\n");

        let empty = csv_to_string(&["x", "y"], &[]);
        assert_eq!(empty, "x,y\n");
    }

    #[test]
    fn csv_round_trip_to_formatting_precision() {
        let values = [1.0 / 3.0, 12.3456789, 5e-4, 1234.5];
        let rows: Vec<Vec<CsvValue>> = values.iter().map(|&v| vec![CsvValue::Float(v)]).collect();
        let text = csv_to_string(&["v"], &rows);
        for (line, &v) in text.lines().skip(1).zip(&values) {
            let parsed: f64 = line.parse().unwrap();
            assert!((parsed - v).abs() <= 1e-8 * v.abs().max(1.0));
        }
    }
}
