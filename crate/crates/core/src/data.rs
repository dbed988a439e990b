//! Synthetic segmentation data and its on-disk format.
//!
//! Images are stored as `.mcaf` float grids: magic `MCAF`, u32 rank, u32
//! extents, then little-endian f32 values. Single-channel images use rank 2
//! `[H, W]`; multi-channel images use rank 3 `[C, H, W]`. Masks are 8-bit
//! binary PGM (`P5`) files holding raw label values.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NOISE_SIGMA: f64 = 0.05;
const MAX_PLACEMENT_TRIES: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// `[C, H, W]` values in `[0, 1]`.
    pub image: Vec<f32>,
    /// `[H, W]` labels.
    pub mask: Vec<u8>,
}

impl SegSample {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let hw = self.height * self.width;
        if self.image.len() != self.channels * hw || self.mask.len() != hw {
            return Err(Error::Data(format!(
                "sample buffers ({} image, {} mask values) do not match {}×{}×{}",
                self.image.len(),
                self.mask.len(),
                self.channels,
                self.height,
                self.width
            )));
        }
        if let Some(&l) = self.mask.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Data(format!("label {l} out of range for {num_classes} classes")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Task {
    BinaryLesion,
    /// `k` organs plus background.
    MultiOrgan(usize),
}

impl Task {
    /// Distinct label values the masks can hold.
    pub fn label_count(&self) -> usize {
        match self {
            Task::BinaryLesion => 2,
            Task::MultiOrgan(k) => k + 1,
        }
    }

    /// Output channels a model needs for this task.
    pub fn model_classes(&self) -> usize {
        match self {
            Task::BinaryLesion => 1,
            Task::MultiOrgan(k) => k + 1,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Task::BinaryLesion => write!(f, "binary_lesion"),
            Task::MultiOrgan(k) => write!(f, "multi_organ:{k}"),
        }
    }
}

impl From<Task> for String {
    fn from(t: Task) -> String {
        t.to_string()
    }
}

impl TryFrom<String> for Task {
    type Error = Error;

    fn try_from(s: String) -> Result<Task> {
        s.parse()
    }
}

impl FromStr for Task {
    type Err = Error;

    /// `binary_lesion` or `multi_organ:K`.
    fn from_str(s: &str) -> Result<Task> {
        match s.split_once(':') {
            None if s == "binary_lesion" => Ok(Task::BinaryLesion),
            Some(("multi_organ", k)) => k
                .parse()
                .map(Task::MultiOrgan)
                .map_err(|_| Error::Config(format!("organ count {k:?} is not an integer"))),
            _ => Err(Error::Config(format!("unknown task {s:?}, expected binary_lesion or multi_organ:K"))),
        }
    }
}

/// Star-shaped region: an ellipse whose radius is modulated by a sinusoid.
struct Blob {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
    wobble: f64,
    lobes: f64,
    phase: f64,
}

impl Blob {
    fn random(rng: &mut ChaCha8Rng, h: usize, w: usize, r_lo: f64, r_hi: f64) -> Blob {
        let m = h.min(w) as f64;
        Blob {
            cy: rng.gen_range(0.0..h as f64),
            cx: rng.gen_range(0.0..w as f64),
            ry: m * rng.gen_range(r_lo..r_hi),
            rx: m * rng.gen_range(r_lo..r_hi),
            angle: rng.gen_range(0.0..std::f64::consts::PI),
            wobble: rng.gen_range(0.0..0.25),
            lobes: rng.gen_range(2..6) as f64,
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
        }
    }

    fn contains(&self, y: usize, x: usize) -> bool {
        let (dy, dx) = (y as f64 + 0.5 - self.cy, x as f64 + 0.5 - self.cx);
        let (s, c) = self.angle.sin_cos();
        let (u, v) = (dx * c + dy * s, -dx * s + dy * c);
        let r = ((u / self.rx).powi(2) + (v / self.ry).powi(2)).sqrt();
        let phi = v.atan2(u);
        r <= 1.0 + self.wobble * (self.lobes * phi + self.phase).sin()
    }

    fn rasterize(&self, h: usize, w: usize) -> Vec<bool> {
        (0..h * w).map(|i| self.contains(i / w, i % w)).collect()
    }
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(img: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(j, k)| k * img[y * w + clamp(x as isize + j as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(j, k)| k * tmp[clamp(y as isize + j as isize - radius, h) * w + x])
                .sum();
        }
    }
    out
}

fn lesion_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<u8> {
    let blobs = rng.gen_range(1..=3);
    let mut mask = vec![0u8; h * w];
    for _ in 0..blobs {
        let b = Blob::random(rng, h, w, 0.04, 0.40);
        for (m, inside) in mask.iter_mut().zip(b.rasterize(h, w)) {
            if inside {
                *m = 1;
            }
        }
    }
    mask
}

/// Places `k` blobs that neither overlap nor touch.
fn organ_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, k: usize) -> Option<Vec<u8>> {
    let mut mask = vec![0u8; h * w];
    for label in 1..=k as u8 {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let region = Blob::random(rng, h, w, 0.05, 0.16).rasterize(h, w);
            if !region.iter().any(|&r| r) {
                continue;
            }
            let clash = (0..h * w).any(|i| {
                region[i] && {
                    let (y, x) = (i / w, i % w);
                    let ys = y.saturating_sub(1)..=(y + 1).min(h - 1);
                    ys.into_iter().any(|yy| (x.saturating_sub(1)..=(x + 1).min(w - 1)).any(|xx| mask[yy * w + xx] != 0))
                }
            });
            if !clash {
                region.iter().zip(mask.iter_mut()).filter(|(r, _)| **r).for_each(|(_, m)| *m = label);
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(mask)
}

fn render(rng: &mut ChaCha8Rng, mask: &[u8], levels: &[f64], channels: usize, h: usize, w: usize) -> Vec<f32> {
    let clean: Vec<f64> = mask.iter().map(|&l| levels[l as usize]).collect();
    let sigma = rng.gen_range(0.5..=2.5);
    let blurred = gaussian_blur(&clean, h, w, sigma);
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let mut image = Vec::with_capacity(channels * h * w);
    for _ in 0..channels {
        image.extend(blurred.iter().map(|&v| (v + noise.sample(rng)).clamp(0.0, 1.0) as f32));
    }
    image
}

/// Deterministic synthetic samples. Lesion masks hold 1–3 irregular blobs
/// with radii between 4% and 40% of the shorter side and low contrast;
/// organ masks hold `k` separated blobs labelled `1..=k`. Masks are the
/// crisp regions, images are blurred and noisy.
pub fn synth_generate(seed: u64, count: usize, h: usize, w: usize, channels: usize, task: Task) -> Result<Vec<SegSample>> {
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        return Err(Error::Config(format!("synthetic size {h}×{w} must be a positive multiple of 32")));
    }
    if channels == 0 {
        return Err(Error::Config("synthetic images need at least one channel".into()));
    }
    if let Task::MultiOrgan(k) = task {
        if !(1..=8).contains(&k) {
            return Err(Error::Config(format!("organ count {k} must be between 1 and 8")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for index in 0..count {
        let mut attempt = 0;
        let mask = loop {
            attempt += 1;
            if attempt > MAX_PLACEMENT_TRIES {
                return Err(Error::Generation {
                    seed,
                    detail: format!("could not place regions for sample {index} of {task}"),
                });
            }
            let m = match task {
                Task::BinaryLesion => Some(lesion_mask(&mut rng, h, w)),
                Task::MultiOrgan(k) => organ_mask(&mut rng, h, w, k),
            };
            if let Some(m) = m {
                if m.iter().any(|&l| l != 0) && m.contains(&0) {
                    break m;
                }
            }
        };
        let levels = match task {
            Task::BinaryLesion => {
                let bg = rng.gen_range(0.4..0.6);
                let contrast = rng.gen_range(0.05..=0.4);
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                vec![bg, bg + sign * contrast]
            }
            Task::MultiOrgan(k) => {
                let bg = rng.gen_range(0.05..0.15);
                let mut v = vec![bg];
                v.extend((1..=k).map(|l| 0.3 + 0.65 * (l - 1) as f64 / (k.max(2) - 1) as f64 + rng.gen_range(-0.02..0.02)));
                v
            }
        };
        let image = render(&mut rng, &mask, &levels, channels, h, w);
        out.push(SegSample { channels, height: h, width: w, image, mask });
    }
    Ok(out)
}

/// First 80% of samples for training, last 20% (by index) for validation.
pub fn split_validation<T>(samples: &[T]) -> (&[T], &[T]) {
    let n_val = samples.len() / 5;
    samples.split_at(samples.len() - n_val)
}

/// Stacks images into a `[N, C, H, W]` tensor.
pub fn batch_images(samples: &[&SegSample]) -> Result<Tensor> {
    let first = samples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let (c, h, w) = (first.channels, first.height, first.width);
    let mut data = Vec::with_capacity(samples.len() * c * h * w);
    for s in samples {
        if (s.channels, s.height, s.width) != (c, h, w) {
            return Err(Error::Data("samples in a batch must share their shape".into()));
        }
        data.extend(s.image.iter().map(|&v| v as f64));
    }
    Tensor::from_vec(&[samples.len(), c, h, w], data)
}

pub fn write_mcaf(path: &Path, dims: &[usize], values: &[f32]) -> Result<()> {
    if dims.iter().product::<usize>() != values.len() {
        return Err(Error::Data(format!("{} values do not fill extents {dims:?}", values.len())));
    }
    let mut buf = Vec::with_capacity(8 + 4 * dims.len() + 4 * values.len());
    buf.extend_from_slice(b"MCAF");
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_mcaf(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let bytes = fs::read(path)?;
    let bad = |why: &str| Error::Data(format!("{}: {why}", path.display()));
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(i..i + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| bad("truncated header"))
    };
    if bytes.get(..4) != Some(b"MCAF") {
        return Err(bad("missing MCAF magic"));
    }
    let rank = word(4)? as usize;
    if !(1..=4).contains(&rank) {
        return Err(bad("unsupported rank"));
    }
    let dims = (0..rank).map(|i| word(8 + 4 * i).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let start = 8 + 4 * rank;
    let n: usize = dims.iter().product();
    if bytes.len() != start + 4 * n {
        return Err(bad("payload size does not match extents"));
    }
    let values = bytes[start..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok((dims, values))
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::Data(format!("{} pixels for a {width}×{height} PGM", pixels.len())));
    }
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(pixels)?;
    Ok(())
}

/// Reads a binary PGM with maxval ≤ 255, returning (width, height, pixels).
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let bad = |why: &str| Error::Data(format!("{}: {why}", path.display()));
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("malformed header number"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    let pixels = bytes.get(pos + 1..).ok_or_else(|| bad("missing pixel data"))?;
    if pixels.len() != w * h {
        return Err(bad("pixel data does not match extents"));
    }
    Ok((w, h, pixels.to_vec()))
}

pub fn read_image(path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let (dims, values) = read_mcaf(path)?;
    match dims[..] {
        [h, w] => Ok((1, h, w, values)),
        [c, h, w] => Ok((c, h, w, values)),
        _ => Err(Error::Data(format!("{}: images must have rank 2 or 3, got {dims:?}", path.display()))),
    }
}

fn stem(i: usize) -> String {
    format!("sample_{i:05}")
}

pub fn save_dataset(dir: &Path, samples: &[SegSample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, s) in samples.iter().enumerate() {
        let dims = if s.channels == 1 { vec![s.height, s.width] } else { vec![s.channels, s.height, s.width] };
        write_mcaf(&dir.join(format!("{}.mcaf", stem(i))), &dims, &s.image)?;
        write_pgm(&dir.join(format!("{}.pgm", stem(i))), s.width, s.height, &s.mask)?;
    }
    Ok(())
}

/// Loads every `*.mcaf` image in `dir` (sorted by name) with its
/// same-named `.pgm` mask.
pub fn load_dataset(dir: &Path) -> Result<Vec<SegSample>> {
    let mut images: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "mcaf"))
        .collect();
    images.sort();
    if images.is_empty() {
        return Err(Error::Data(format!("no .mcaf images in {}", dir.display())));
    }
    images
        .iter()
        .map(|img| {
            let (channels, height, width, image) = read_image(img)?;
            let mask_path = img.with_extension("pgm");
            let (mw, mh, mask) = read_pgm(&mask_path)?;
            if (mw, mh) != (width, height) {
                return Err(Error::Data(format!(
                    "{} is {mw}×{mh} but its image is {width}×{height}",
                    mask_path.display()
                )));
            }
            Ok(SegSample { channels, height, width, image, mask })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = synth_generate(1, 2, 64, 64, 1, Task::BinaryLesion).unwrap();
        let b = synth_generate(1, 2, 64, 64, 1, Task::BinaryLesion).unwrap();
        assert_eq!(a, b);
        let bits = |s: &[SegSample]| s.iter().flat_map(|x| x.image.iter().map(|v| v.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(a, synth_generate(2, 2, 64, 64, 1, Task::BinaryLesion).unwrap());
    }

    #[test]
    fn masks_have_both_classes_and_images_in_range() {
        for task in [Task::BinaryLesion, Task::MultiOrgan(3), Task::MultiOrgan(8)] {
            for s in synth_generate(11, 12, 64, 96, 3, task).unwrap() {
                assert!(s.mask.contains(&0) && s.mask.iter().any(|&l| l != 0));
                assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
                s.validate(task.label_count()).unwrap();
            }
        }
    }

    #[test]
    fn organ_labels_are_bounded() {
        for s in synth_generate(5, 6, 64, 64, 1, Task::MultiOrgan(3)).unwrap() {
            assert!(s.mask.iter().all(|&l| l <= 3));
        }
    }

    #[test]
    fn lesion_sizes_vary() {
        let s = synth_generate(3, 40, 64, 64, 1, Task::BinaryLesion).unwrap();
        let areas: Vec<usize> = s.iter().map(|x| x.mask.iter().filter(|&&l| l == 1).count()).collect();
        let (lo, hi) = (areas.iter().min().unwrap(), areas.iter().max().unwrap());
        assert!(hi / lo.max(&1) >= 5, "{areas:?}");
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(matches!(synth_generate(1, 1, 60, 64, 1, Task::BinaryLesion), Err(Error::Config(_))));
        assert!(matches!(synth_generate(1, 1, 64, 64, 1, Task::MultiOrgan(9)), Err(Error::Config(_))));
    }

    #[test]
    fn blur_preserves_constants_and_mass() {
        let c = gaussian_blur(&[0.3; 64], 8, 8, 1.5);
        assert!(c.iter().all(|v| (v - 0.3).abs() < 1e-12));
        let mut impulse = vec![0.0; 31 * 31];
        impulse[15 * 31 + 15] = 1.0;
        let b = gaussian_blur(&impulse, 31, 31, 2.0);
        assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn task_parsing() {
        assert_eq!("binary_lesion".parse::<Task>().unwrap(), Task::BinaryLesion);
        assert_eq!("multi_organ:4".parse::<Task>().unwrap(), Task::MultiOrgan(4));
        assert_eq!(Task::MultiOrgan(4).to_string(), "multi_organ:4");
        assert!("organs".parse::<Task>().is_err());
    }

    #[test]
    fn validation_split_is_the_tail() {
        let v: Vec<usize> = (0..10).collect();
        let (train, val) = split_validation(&v);
        assert_eq!(train, &[0, 1, 2, 3, 4, 5, 6, 7]);
        assert_eq!(val, &[8, 9]);
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for channels in [1, 3] {
            let samples = synth_generate(9, 3, 32, 64, channels, Task::MultiOrgan(2)).unwrap();
            let sub = dir.path().join(format!("c{channels}"));
            save_dataset(&sub, &samples).unwrap();
            assert_eq!(load_dataset(&sub).unwrap(), samples);
        }
        let header = fs::read(dir.path().join("c1/sample_00000.mcaf")).unwrap();
        assert_eq!(header.len(), 16 + 4 * 32 * 64);
        assert_eq!(&header[..4], b"MCAF");
    }

    #[test]
    fn pgm_with_comment() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        fs::write(&p, b"P5\n# note\n3 2\n255\n\x00\x01\x02\x03\x04\x05").unwrap();
        assert_eq!(read_pgm(&p).unwrap(), (3, 2, vec![0, 1, 2, 3, 4, 5]));
        fs::write(&p, b"P2\n1 1\n255\n0").unwrap();
        assert!(read_pgm(&p).is_err());
    }

    #[test]
    fn mcaf_rejects_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.mcaf");
        write_mcaf(&p, &[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, bytes).unwrap();
        assert!(matches!(read_mcaf(&p), Err(Error::Data(_))));
    }
}
