//! Image files (binary PPM), manifests, the synthetic corpus generator, and
//! train/test augmentation.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CgdError, Result};
use crate::tensor::Tensor;

/// 8-bit interleaved RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    /// Channel-major `3 x H x W` tensor with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        let mut data = vec![0.0; 3 * w * h];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * w * h + i] = px[c] as f64 / 255.0;
            }
        }
        Tensor::new(&[3, h, w], data).expect("image dims are positive")
    }

    /// Quantizes a `3 x H x W` tensor (clamped to `[0, 1]`).
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(CgdError::Shape(format!("image tensor must be 3 x H x W, got {s:?}")));
        }
        let (h, w) = (s[1], s[2]);
        let mut pixels = vec![0u8; 3 * h * w];
        for i in 0..h * w {
            for c in 0..3 {
                let v = t.data()[c * h * w + i].clamp(0.0, 1.0);
                pixels[3 * i + c] = (v * 255.0).round() as u8;
            }
        }
        Ok(Self {
            width: w,
            height: h,
            pixels,
        })
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Parses a binary (P6) PPM with maxval 255.
    pub fn decode_ppm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let (_, magic) = next_token(bytes, &mut pos)?;
        if magic != "P6" {
            return Err(CgdError::Data(format!("not a binary PPM: magic `{magic}` at byte 0")));
        }
        let mut field = |name: &str| -> Result<usize> {
            let (at, tok) = next_token(bytes, &mut pos)?;
            tok.parse::<usize>()
                .ok()
                .filter(|&v| v > 0)
                .ok_or_else(|| CgdError::Data(format!("bad PPM {name} `{tok}` at byte {at}")))
        };
        let width = field("width")?;
        let height = field("height")?;
        let maxval = field("maxval")?;
        if maxval != 255 {
            return Err(CgdError::Data(format!("unsupported PPM maxval {maxval}, expected 255")));
        }
        // exactly one whitespace byte separates the header from the payload
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(CgdError::Data(format!("PPM header not terminated at byte {pos}")));
        }
        pos += 1;
        let need = width * height * 3;
        if bytes.len() - pos < need {
            return Err(CgdError::Data(format!(
                "truncated PPM payload: need {need} bytes from byte {pos}, file has {}",
                bytes.len() - pos
            )));
        }
        Ok(Self {
            width,
            height,
            pixels: bytes[pos..pos + need].to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode_ppm())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| CgdError::Data(format!("cannot read image {}: {e}", path.display())))?;
        Self::decode_ppm(&bytes)
            .map_err(|e| CgdError::Data(format!("{}: {e}", path.display())))
    }
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Result<(usize, String)> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(CgdError::Data(format!("truncated PPM header at byte {start}")));
    }
    Ok((start, String::from_utf8_lossy(&bytes[start..*pos]).into_owned()))
}

/// Loads a PPM as a `3 x H x W` tensor in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    Ok(Image::load(path)?.to_tensor())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = CgdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(CgdError::Data(format!("unknown split `{s}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    pub label: usize,
    pub split: Split,
}

/// CSV listing of `path,label,split` rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    pub base_dir: PathBuf,
}

pub const MANIFEST_HEADER: &str = "path,label,split";

impl Manifest {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == MANIFEST_HEADER => {}
            other => {
                return Err(CgdError::Data(format!(
                    "manifest header must be `{MANIFEST_HEADER}`, got {other:?}"
                )))
            }
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(CgdError::Data(format!(
                    "manifest line {}: expected 3 fields, got {}",
                    i + 2,
                    fields.len()
                )));
            }
            let label = fields[1].trim().parse::<usize>().map_err(|_| {
                CgdError::Data(format!("manifest line {}: bad label `{}`", i + 2, fields[1]))
            })?;
            rows.push(ManifestRow {
                path: PathBuf::from(fields[0].trim()),
                label,
                split: fields[2].trim().parse()?,
            });
        }
        let m = Self {
            rows,
            base_dir: base_dir.to_path_buf(),
        };
        m.check_labels()?;
        Ok(m)
    }

    fn check_labels(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(CgdError::Data("manifest has no rows".into()));
        }
        let m = self.num_classes();
        let mut seen = vec![false; m];
        for r in &self.rows {
            seen[r.label] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(CgdError::Data(format!(
                "manifest labels are not contiguous: class {missing} of 0..{m} missing"
            )));
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CgdError::Data(format!("cannot read manifest {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::parse(&text, &base)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(MANIFEST_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{},{},{}\n", r.path.display(), r.label, r.split));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.rows.iter().map(|r| r.label + 1).max().unwrap_or(0)
    }

    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        if row.path.is_absolute() {
            row.path.clone()
        } else {
            self.base_dir.join(&row.path)
        }
    }

    /// Decodes every image of `split` (or all rows when `None`), in manifest order.
    pub fn load_split(&self, split: Option<Split>) -> Result<LabeledImages> {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for r in self.rows.iter().filter(|r| split.is_none_or(|s| r.split == s)) {
            images.push(load_image(&self.resolve(r))?);
            labels.push(r.label);
        }
        if images.is_empty() {
            return Err(CgdError::Data(format!("manifest has no rows for split {split:?}")));
        }
        Ok(LabeledImages { images, labels })
    }
}

/// Decoded images with class labels.
#[derive(Clone, Debug)]
pub struct LabeledImages {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Inference-mode batch: every image resized to `size`.
    pub fn test_batch(&self, size: usize) -> Result<Tensor> {
        stack(self.images.iter().map(|im| resize_nearest(im, size, size)).collect())
    }
}

/// Stacks `3 x S x S` tensors into `N x 3 x S x S`.
pub fn stack(items: Vec<Tensor>) -> Result<Tensor> {
    let first = items
        .first()
        .ok_or_else(|| CgdError::InvalidArgument("cannot stack zero images".into()))?
        .shape()
        .to_vec();
    let mut data = Vec::with_capacity(items.len() * first.iter().product::<usize>());
    for t in &items {
        if t.shape() != first.as_slice() {
            return Err(CgdError::Shape(format!(
                "cannot stack {:?} with {first:?}",
                t.shape()
            )));
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![items.len()];
    shape.extend(first);
    Tensor::new(&shape, data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub instances_per_class: usize,
    pub image_size: usize,
    /// Scales shift, brightness and noise; 0 makes all instances of a class identical.
    pub intra_class_jitter: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            instances_per_class: 16,
            image_size: 32,
            intra_class_jitter: 0.2,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(CgdError::Config("synthetic data needs at least 2 classes".into()));
        }
        if self.instances_per_class < 4 {
            return Err(CgdError::Config(
                "synthetic data needs at least 4 instances per class".into(),
            ));
        }
        if self.image_size == 0 {
            return Err(CgdError::Config("synthetic image size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.intra_class_jitter) {
            return Err(CgdError::Config(format!(
                "jitter must lie in [0, 1], got {}",
                self.intra_class_jitter
            )));
        }
        Ok(())
    }

    /// Instances per class assigned to the test split (the last quarter).
    pub fn test_per_class(&self) -> usize {
        self.instances_per_class / 4
    }
}

/// In-memory synthetic corpus; see [`SyntheticCorpus::write_to`].
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
}

struct ClassPattern {
    color: [f64; 3],
    phase: [f64; 3],
    freq: (f64, f64),
    amplitude: f64,
}

/// Generates class-textured images: each class is a colored sinusoidal
/// grating with its own frequency; instances are shifted, brightness-scaled
/// and noised copies.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s = spec.image_size;
    let j = spec.intra_class_jitter;
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let patterns: Vec<ClassPattern> = (0..spec.num_classes)
        .map(|_| {
            let gray = rng.random_range(0.4..0.6);
            ClassPattern {
                color: [0; 3].map(|_| gray + rng.random_range(-0.08..0.08)),
                phase: [0; 3].map(|_| rng.random_range(0.0..2.0 * PI)),
                freq: (
                    rng.random_range(1..=4) as f64 * if rng.random_bool(0.5) { 1.0 } else { -1.0 },
                    rng.random_range(0..=4) as f64,
                ),
                amplitude: rng.random_range(0.15..0.3),
            }
        })
        .collect();
    let test_from = spec.instances_per_class - spec.test_per_class();
    let mut corpus = SyntheticCorpus {
        images: Vec::new(),
        labels: Vec::new(),
        splits: Vec::new(),
    };
    for (class, p) in patterns.iter().enumerate() {
        for inst in 0..spec.instances_per_class {
            let max_shift = j * s as f64;
            let dx = rng.random_range(-1.0..=1.0) * max_shift;
            let dy = rng.random_range(-1.0..=1.0) * max_shift;
            let brightness = 1.0 + j * rng.random_range(-1.0..=1.0);
            let cast = [0; 3].map(|_| j * rng.random_range(-0.15..=0.15));
            let clutter_freq = (rng.random_range(-5..=5) as f64, rng.random_range(-5..=5) as f64);
            let clutter_phase = rng.random_range(0.0..2.0 * PI);
            let clutter_amp = j * rng.random_range(0.5..=1.5);
            let mut data = vec![0.0; 3 * s * s];
            for c in 0..3 {
                for y in 0..s {
                    for x in 0..s {
                        let (fx, fy) = (x as f64 / s as f64, y as f64 / s as f64);
                        let arg = 2.0 * PI * (p.freq.0 * (fx + dx / s as f64) + p.freq.1 * (fy + dy / s as f64)) + p.phase[c];
                        let clutter = clutter_amp * (2.0 * PI * (clutter_freq.0 * fx + clutter_freq.1 * fy) + clutter_phase).sin();
                        let base = p.color[c] + cast[c] + p.amplitude * arg.sin() + clutter;
                        let n: f64 = noise.sample(&mut rng);
                        data[(c * s + y) * s + x] = base * brightness + 0.25 * j * n;
                    }
                }
            }
            let t = Tensor::new(&[3, s, s], data)?;
            corpus.images.push(Image::from_tensor(&t)?);
            corpus.labels.push(class);
            corpus
                .splits
                .push(if inst >= test_from { Split::Test } else { Split::Train });
        }
    }
    Ok(corpus)
}

impl SyntheticCorpus {
    /// Writes `images/cXXX_iXXX.ppm` files and `manifest.csv` under `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<Manifest> {
        let img_dir = dir.join("images");
        fs::create_dir_all(&img_dir)?;
        let mut rows = Vec::with_capacity(self.images.len());
        let mut per_class = vec![0usize; self.labels.iter().max().map_or(0, |m| m + 1)];
        for ((img, &label), &split) in self.images.iter().zip(&self.labels).zip(&self.splits) {
            let rel = PathBuf::from("images").join(format!("c{label:03}_i{:03}.ppm", per_class[label]));
            per_class[label] += 1;
            img.save(&dir.join(&rel))?;
            rows.push(ManifestRow {
                path: rel,
                label,
                split,
            });
        }
        let manifest = Manifest {
            rows,
            base_dir: dir.to_path_buf(),
        };
        manifest.write(&dir.join("manifest.csv"))?;
        Ok(manifest)
    }

    /// Images of one split as tensors, in corpus order.
    pub fn split(&self, which: Split) -> LabeledImages {
        let mut out = LabeledImages {
            images: Vec::new(),
            labels: Vec::new(),
        };
        for ((img, &l), &s) in self.images.iter().zip(&self.labels).zip(&self.splits) {
            if s == which {
                out.images.push(img.to_tensor());
                out.labels.push(l);
            }
        }
        out
    }
}

/// Nearest-neighbour resize of a `3 x H x W` tensor.
pub fn resize_nearest(img: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    if h == out_h && w == out_w {
        return img.clone();
    }
    let src_y: Vec<usize> = (0..out_h).map(|y| ((2 * y + 1) * h / (2 * out_h)).min(h - 1)).collect();
    let src_x: Vec<usize> = (0..out_w).map(|x| ((2 * x + 1) * w / (2 * out_w)).min(w - 1)).collect();
    let mut data = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        for &sy in &src_y {
            for &sx in &src_x {
                data.push(img.data()[(ch * h + sy) * w + sx]);
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], data).expect("positive output extents")
}

/// Crops a `size x size` window at `(top, left)`.
pub fn crop(img: &Tensor, top: usize, left: usize, size: usize) -> Tensor {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    assert!(top + size <= h && left + size <= w, "crop window out of bounds");
    let mut data = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in top..top + size {
            let row = (ch * h + y) * w;
            data.extend_from_slice(&img.data()[row + left..row + left + size]);
        }
    }
    Tensor::new(&[c, size, size], data).expect("positive crop")
}

/// Mirrors a `3 x H x W` tensor left-right.
pub fn hflip(img: &Tensor) -> Tensor {
    let s = img.shape();
    let w = s[2];
    let mut data = img.data().to_vec();
    for row in data.chunks_exact_mut(w) {
        row.reverse();
    }
    Tensor::new(s, data).expect("same shape")
}

/// Padding added before the random crop in training mode.
pub const CROP_MARGIN: usize = 4;

/// Train: resize to `size + 4`, random `size` crop, flip with probability
/// 0.5. Test: plain resize to `size`.
pub fn augment<R: Rng>(img: &Tensor, rng: &mut R, train_mode: bool, size: usize) -> Tensor {
    if !train_mode {
        return resize_nearest(img, size, size);
    }
    let big = size + CROP_MARGIN;
    let resized = resize_nearest(img, big, big);
    let top = rng.random_range(0..=CROP_MARGIN);
    let left = rng.random_range(0..=CROP_MARGIN);
    let cropped = crop(&resized, top, left, size);
    if rng.random_bool(0.5) {
        hflip(&cropped)
    } else {
        cropped
    }
}
