//! CIFAR-10 binary batches, the synthetic saliency set, and batch assembly.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdaf_core::Tensor;

use crate::error::{HarnessError, Result};

pub const IMAGE_SIDE: usize = 32;
pub const IMAGE_LEN: usize = 3 * IMAGE_SIDE * IMAGE_SIDE;
pub const RECORD_LEN: usize = IMAGE_LEN + 1;
pub const PATCH_SIDE: usize = 8;
pub const SYNTHETIC_CLASSES: usize = 4;
pub const SHAPE_NAMES: [&str; SYNTHETIC_CLASSES] = ["solid_square", "hollow_square", "diagonal_cross", "disk"];

/// Top-left corner of the class patch, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Patch {
    pub row: usize,
    pub col: usize,
}

/// Raw 8-bit images (channel-planar, 3×32×32 each) with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
    pub patches: Option<Vec<Patch>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.pixels[i * IMAGE_LEN..(i + 1) * IMAGE_LEN]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            pixels: indices.iter().flat_map(|&i| self.image(i).iter().copied()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            patches: self.patches.as_ref().map(|p| indices.iter().map(|&i| p[i]).collect()),
        }
    }

    pub fn class_histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    /// CIFAR-10 record layout: label byte followed by the planar image.
    pub fn to_records(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * RECORD_LEN);
        for i in 0..self.len() {
            out.push(self.labels[i]);
            out.extend_from_slice(self.image(i));
        }
        out
    }

    pub fn patches_csv(&self) -> Option<String> {
        let patches = self.patches.as_ref()?;
        let mut s = String::from("index,label,row,col\n");
        for (i, p) in patches.iter().enumerate() {
            let _ = writeln!(s, "{i},{},{},{}", self.labels[i], p.row, p.col);
        }
        Some(s)
    }
}

/// Parses concatenated 3073-byte records.
pub fn parse_records(bytes: &[u8], num_classes: usize) -> Result<Dataset> {
    if bytes.len() % RECORD_LEN != 0 {
        return Err(HarnessError::Data(format!(
            "{} bytes is not a whole number of {RECORD_LEN}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / RECORD_LEN;
    let mut pixels = Vec::with_capacity(n * IMAGE_LEN);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(RECORD_LEN).enumerate() {
        if rec[0] as usize >= num_classes {
            return Err(HarnessError::Data(format!(
                "record {i}: label {} exceeds {}",
                rec[0],
                num_classes - 1
            )));
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok(Dataset {
        pixels,
        labels,
        patches: None,
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| HarnessError::io(path, e))
}

pub fn read_record_file(path: &Path, num_classes: usize) -> Result<Dataset> {
    parse_records(&read(path)?, num_classes).map_err(|e| match e {
        HarnessError::Data(msg) => HarnessError::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn concat(parts: Vec<Dataset>) -> Dataset {
    let mut out = Dataset {
        pixels: Vec::new(),
        labels: Vec::new(),
        patches: None,
    };
    for p in parts {
        out.pixels.extend(p.pixels);
        out.labels.extend(p.labels);
    }
    out
}

/// `data_batch_1..5.bin` and `test_batch.bin` from the standard binary release.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = (1..=5)
        .map(|i| read_record_file(&dir.join(format!("data_batch_{i}.bin")), 10))
        .collect::<Result<Vec<_>>>()?;
    let test = read_record_file(&dir.join("test_batch.bin"), 10)?;
    Ok((concat(train), test))
}

fn shape_mask(class: usize) -> [[bool; PATCH_SIDE]; PATCH_SIDE] {
    let mut m = [[false; PATCH_SIDE]; PATCH_SIDE];
    for (r, row) in m.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            let (rf, cf) = (r as f64 - 3.5, c as f64 - 3.5);
            *v = match class {
                0 => (1..=6).contains(&r) && (1..=6).contains(&c),
                1 => (1..=6).contains(&r) && (1..=6).contains(&c) && !((2..=5).contains(&r) && (2..=5).contains(&c)),
                2 => r == c || r + c == PATCH_SIDE - 1,
                _ => rf * rf + cf * cf <= 10.0,
            };
        }
    }
    m
}

/// 8-bit patch for one class. Foreground and background levels are chosen so
/// the patch mean equals the noise mean (0.5), leaving no brightness cue.
pub fn shape_patch(class: usize) -> [[u8; PATCH_SIDE]; PATCH_SIDE] {
    let mask = shape_mask(class);
    let on = mask.iter().flatten().filter(|&&b| b).count() as f64;
    let off = (PATCH_SIDE * PATCH_SIDE) as f64 - on;
    let (d_on, d_off) = if on <= off { (0.5, 0.5 * on / off) } else { (0.5 * off / on, 0.5) };
    let level = |v: f64| (v * 255.0 + 0.5).floor() as u8;
    let mut out = [[0u8; PATCH_SIDE]; PATCH_SIDE];
    for r in 0..PATCH_SIDE {
        for c in 0..PATCH_SIDE {
            out[r][c] = level(if mask[r][c] { 0.5 + d_on } else { 0.5 - d_off });
        }
    }
    out
}

/// Uniform-noise images with one class-determining 8×8 shape at a uniformly
/// random pixel position; labels cycle through the classes.
pub fn gen_synthetic_saliency(seed: u64, n_samples: usize, num_classes: usize) -> Result<Dataset> {
    if num_classes != SYNTHETIC_CLASSES {
        return Err(HarnessError::Data(format!(
            "synthetic set has {SYNTHETIC_CLASSES} classes, asked for {num_classes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patches: Vec<_> = (0..num_classes).map(shape_patch).collect();
    let plane = IMAGE_SIDE * IMAGE_SIDE;
    let mut pixels = vec![0u8; n_samples * IMAGE_LEN];
    let mut labels = Vec::with_capacity(n_samples);
    let mut positions = Vec::with_capacity(n_samples);
    for (i, img) in pixels.chunks_exact_mut(IMAGE_LEN).enumerate() {
        let label = i % num_classes;
        rng.fill(img);
        let row = rng.random_range(0..=IMAGE_SIDE - PATCH_SIDE);
        let col = rng.random_range(0..=IMAGE_SIDE - PATCH_SIDE);
        for ch in 0..3 {
            for r in 0..PATCH_SIDE {
                let start = ch * plane + (row + r) * IMAGE_SIDE + col;
                img[start..start + PATCH_SIDE].copy_from_slice(&patches[label][r]);
            }
        }
        labels.push(label as u8);
        positions.push(Patch { row, col });
    }
    Ok(Dataset {
        pixels,
        labels,
        patches: Some(positions),
    })
}

/// Train and test sets from independent streams of one seed.
pub fn synthetic_split(seed: u64, n_train: usize, n_test: usize) -> Result<(Dataset, Dataset)> {
    let train = gen_synthetic_saliency(seed, n_train, SYNTHETIC_CLASSES)?;
    let test = gen_synthetic_saliency(seed ^ 0x7e57_5e7, n_test, SYNTHETIC_CLASSES)?;
    Ok((train, test))
}

fn parse_patches_csv(text: &str, n: usize) -> Result<Vec<Patch>> {
    let mut out = Vec::with_capacity(n);
    for (i, line) in text.lines().skip(1).enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| HarnessError::Data(format!("patches line {}: bad field '{s}'", i + 2)))
        };
        if f.len() != 4 || num(f[0])? != i {
            return Err(HarnessError::Data(format!("patches line {}: malformed", i + 2)));
        }
        out.push(Patch {
            row: num(f[2])?,
            col: num(f[3])?,
        });
    }
    if out.len() != n {
        return Err(HarnessError::Data(format!("{} patch rows for {n} images", out.len())));
    }
    Ok(out)
}

/// Writes `train.bin`/`test.bin` records plus `*_patches.csv` metadata.
pub fn write_synthetic(dir: &Path, train: &Dataset, test: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    for (name, ds) in [("train", train), ("test", test)] {
        let bin = dir.join(format!("{name}.bin"));
        std::fs::write(&bin, ds.to_records()).map_err(|e| HarnessError::io(&bin, e))?;
        let csv = dir.join(format!("{name}_patches.csv"));
        let text = ds.patches_csv().ok_or_else(|| HarnessError::Data("missing patch metadata".into()))?;
        std::fs::write(&csv, text).map_err(|e| HarnessError::io(&csv, e))?;
    }
    Ok(())
}

pub fn load_synthetic(dir: &Path) -> Result<(Dataset, Dataset)> {
    let load = |name: &str| -> Result<Dataset> {
        let mut ds = read_record_file(&dir.join(format!("{name}.bin")), SYNTHETIC_CLASSES)?;
        let csv = dir.join(format!("{name}_patches.csv"));
        let text = std::fs::read_to_string(&csv).map_err(|e| HarnessError::io(&csv, e))?;
        ds.patches = Some(parse_patches_csv(&text, ds.len())?);
        Ok(ds)
    };
    Ok((load("train")?, load("test")?))
}

/// Per-channel standardization applied to scaled pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

/// Horizontal flip plus pad-4 random crop, drawn per sample from `rng`.
pub struct Augment<'a> {
    pub rng: &'a mut ChaCha8Rng,
}

pub const CROP_PAD: usize = 4;

/// Stacks the selected images into an `(n, 3, 32, 32)` tensor.
pub fn assemble_batch(
    ds: &Dataset,
    indices: &[usize],
    norm: &Normalization,
    mut augment: Option<Augment<'_>>,
) -> (Tensor<f32>, Vec<usize>) {
    let side = IMAGE_SIDE;
    let plane = side * side;
    let mut data = vec![0f32; indices.len() * IMAGE_LEN];
    for (slot, &i) in indices.iter().enumerate() {
        let src = ds.image(i);
        let dst = &mut data[slot * IMAGE_LEN..(slot + 1) * IMAGE_LEN];
        let (flip, dy, dx) = match augment.as_mut() {
            Some(a) => (
                a.rng.random_bool(0.5),
                a.rng.random_range(0..=2 * CROP_PAD) as isize - CROP_PAD as isize,
                a.rng.random_range(0..=2 * CROP_PAD) as isize - CROP_PAD as isize,
            ),
            None => (false, 0, 0),
        };
        for ch in 0..3 {
            let (m, s) = (norm.mean[ch], norm.std[ch]);
            for r in 0..side {
                for c in 0..side {
                    let sr = r as isize + dy;
                    let sc0 = if flip { side - 1 - c } else { c } as isize + dx;
                    // padded region is zero after standardization
                    let v = if sr < 0 || sc0 < 0 || sr >= side as isize || sc0 >= side as isize {
                        0.0
                    } else {
                        let p = src[ch * plane + sr as usize * side + sc0 as usize];
                        (p as f32 / 255.0 - m) / s
                    };
                    dst[ch * plane + r * side + c] = v;
                }
            }
        }
    }
    let labels = indices.iter().map(|&i| ds.labels[i] as usize).collect();
    let t = Tensor::new([indices.len(), 3, side, side], data).expect("sized above");
    (t, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_parsing() {
        let mut bytes = vec![0u8; 2 * RECORD_LEN];
        bytes[0] = 7;
        bytes[1] = 255;
        bytes[RECORD_LEN] = 2;
        let ds = parse_records(&bytes, 10).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, vec![7, 2]);
        let norm = Normalization {
            mean: [0.0; 3],
            std: [1.0; 3],
        };
        let (t, labels) = assemble_batch(&ds, &[0], &norm, None);
        assert_eq!(t.data()[0], 1.0);
        assert_eq!(labels, vec![7]);
        assert!(parse_records(&bytes[..RECORD_LEN + 5], 10).is_err());
        bytes[0] = 10;
        assert!(parse_records(&bytes, 10).is_err());
    }

    #[test]
    fn patches_are_mean_balanced() {
        for class in 0..SYNTHETIC_CLASSES {
            let p = shape_patch(class);
            let mean = p.iter().flatten().map(|&v| v as f64).sum::<f64>() / 64.0 / 255.0;
            assert!((mean - 0.5).abs() < 0.01, "class {class}: {mean}");
        }
        let distinct: std::collections::BTreeSet<_> = (0..4).map(shape_patch).collect();
        assert_eq!(distinct.len(), 4);
    }

    #[test]
    fn synthetic_roundtrips_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let (train, test) = synthetic_split(3, 40, 12).unwrap();
        write_synthetic(dir.path(), &train, &test).unwrap();
        let (a, b) = load_synthetic(dir.path()).unwrap();
        assert_eq!(a, train);
        assert_eq!(b, test);
    }

    #[test]
    fn augmentation_is_seeded() {
        let ds = gen_synthetic_saliency(1, 8, 4).unwrap();
        let norm = Normalization {
            mean: [0.5; 3],
            std: [0.25; 3],
        };
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            assemble_batch(&ds, &[0, 1, 2, 3], &norm, Some(Augment { rng: &mut rng })).0
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }
}
