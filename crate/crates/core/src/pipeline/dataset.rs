//! Synthetic glyph dataset and the on-disk image-folder loader.
//!
//! Each canvas carries exactly one class-identifying glyph at a sampled
//! location plus class-independent clutter. Glyphs are 4x4-cell binary
//! patterns with identical ink mass (8 cells), grouped so several classes
//! share the same per-quadrant ink signature: once the peripheral
//! downsampling has reduced a glyph to a couple of pixels, only that
//! signature survives, which caps peripheral-only accuracy well below what
//! full-resolution fixations can reach. That gap is the whole point of the
//! benchmark.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{bilinear_resize, Real, Tensor};
use crate::pipeline::config::{Placement, RunConfig};
use crate::pipeline::pnm;

/// 4x4 ink patterns, 8 ink cells each, as row strings.
///
/// Classes 0-3 share the quadrant signature (2,2,2,2), classes 4-6 share
/// (3,1,1,3), classes 7-9 share (1,3,3,1); within a group every pair differs
/// in at least 6 cells.
const GLYPHS: [[&str; 4]; 10] = [
    ["1100", "0011", "1100", "0011"],
    ["0011", "1100", "0011", "1100"],
    ["1001", "1001", "0110", "0110"],
    ["0110", "0110", "1001", "1001"],
    ["1110", "1000", "1001", "0011"],
    ["0100", "1101", "0011", "0110"],
    ["1000", "1110", "0011", "1001"],
    ["0001", "0111", "0100", "1101"],
    ["0111", "0001", "1101", "0100"],
    ["0010", "1011", "1000", "1110"],
];

pub const MAX_CLASSES: usize = GLYPHS.len();

#[derive(Clone)]
pub struct Sample<T: Real> {
    pub image: Tensor<T>,
    pub label: usize,
}

#[derive(Clone)]
pub struct Dataset<T: Real> {
    pub samples: Vec<Sample<T>>,
    pub classes: usize,
}

impl<T: Real> Dataset<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

pub(crate) fn glyph_cells(class: usize) -> Vec<(usize, usize)> {
    let mut cells = Vec::with_capacity(8);
    for (r, row) in GLYPHS[class].iter().enumerate() {
        for (c, ch) in row.bytes().enumerate() {
            if ch == b'1' {
                cells.push((r, c));
            }
        }
    }
    cells
}

/// Stable seed derivation: one master seed fans out into independent streams.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn render_sample<T: Real>(
    cfg: &RunConfig,
    class: usize,
    rng: &mut ChaCha8Rng,
) -> Sample<T> {
    let side = cfg.canvas_side;
    let glyph = cfg.glyph_side;
    let cell = glyph / 4;
    let margin = 8.min((side - glyph) / 2);
    let span = side - glyph - 2 * margin;

    let (top, left) = match cfg.placement {
        Placement::Uniform => (
            margin + rng.random_range(0..=span),
            margin + rng.random_range(0..=span),
        ),
        Placement::CenterBiased => {
            let draw = |rng: &mut ChaCha8Rng| {
                let u1: f64 = rng.random::<f64>().max(1e-12);
                let u2: f64 = rng.random::<f64>();
                let n = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                let center = (side - glyph) as f64 / 2.0;
                let pos = center + n * side as f64 / 8.0;
                pos.round().clamp(margin as f64, (margin + span) as f64) as usize
            };
            (draw(rng), draw(rng))
        }
    };

    let mut image = Tensor::<T>::zeros(&[cfg.in_channels, side, side]);
    // class-independent clutter: dim rectangles that avoid the glyph box
    let clutter_count = (cfg.clutter_density * (side * side) as f64).round() as usize;
    let ink_box = (
        top.saturating_sub(2),
        left.saturating_sub(2),
        (top + glyph + 2).min(side),
        (left + glyph + 2).min(side),
    );
    for _ in 0..clutter_count {
        for _attempt in 0..20 {
            let h = rng.random_range(2..=6usize);
            let w = rng.random_range(2..=6usize);
            let y = rng.random_range(0..side - h);
            let x = rng.random_range(0..side - w);
            let overlaps =
                y < ink_box.2 && y + h > ink_box.0 && x < ink_box.3 && x + w > ink_box.1;
            if overlaps {
                continue;
            }
            let intensity = T::fromf(0.15 + 0.2 * rng.random::<f64>());
            for dy in 0..h {
                for dx in 0..w {
                    for ch in 0..cfg.in_channels {
                        let cur = image.at(&[ch, y + dy, x + dx]);
                        image.set(&[ch, y + dy, x + dx], cur.max(intensity));
                    }
                }
            }
            break;
        }
    }
    // the glyph itself: full-intensity ink
    for (r, c) in glyph_cells(class) {
        for dy in 0..cell {
            for dx in 0..cell {
                for ch in 0..cfg.in_channels {
                    image.set(&[ch, top + r * cell + dy, left + c * cell + dx], T::one());
                }
            }
        }
    }
    Sample { image, label: class }
}

fn generate_split<T: Real>(cfg: &RunConfig, per_class: usize, seed: u64) -> Dataset<T> {
    let mut samples = Vec::with_capacity(cfg.classes * per_class);
    for class in 0..cfg.classes {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, class as u64));
        for _ in 0..per_class {
            samples.push(render_sample(cfg, class, &mut rng));
        }
    }
    Dataset {
        samples,
        classes: cfg.classes,
    }
}

/// Seeded train/test splits; the two splits draw from disjoint seed streams.
pub fn generate_glyph_dataset<T: Real>(cfg: &RunConfig) -> Result<(Dataset<T>, Dataset<T>)> {
    if cfg.classes > MAX_CLASSES {
        return Err(Error::Config(format!(
            "at most {MAX_CLASSES} glyph classes available, requested {}",
            cfg.classes
        )));
    }
    cfg.validate()?;
    let train = generate_split(cfg, cfg.train_per_class, derive_seed(cfg.data_seed, 0x7261_494e));
    let test = generate_split(cfg, cfg.test_per_class, derive_seed(cfg.data_seed, 0x7465_5354));
    Ok((train, test))
}

/// Loads a directory-per-class dataset of binary pixmaps (P5 or P6), resizing
/// each image to the configured canvas. Class indices follow the sorted
/// directory names.
pub fn load_image_folder<T: Real>(root: &Path, cfg: &RunConfig) -> Result<Dataset<T>> {
    let mut class_dirs: Vec<_> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    class_dirs.sort();
    if class_dirs.len() < 2 {
        return Err(Error::Config(format!(
            "{}: need at least two class directories",
            root.display()
        )));
    }
    let mut samples = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("ppm") | Some("pgm") | Some("pnm")
                )
            })
            .collect();
        files.sort();
        for file in files {
            let raw = pnm::read_pnm::<T>(&file)?;
            samples.push(Sample {
                image: fit_to_canvas(&raw, cfg)?,
                label,
            });
        }
    }
    if samples.is_empty() {
        return Err(Error::Config(format!("{}: no pixmap files found", root.display())));
    }
    Ok(Dataset {
        samples,
        classes: class_dirs.len(),
    })
}

fn fit_to_canvas<T: Real>(raw: &Tensor<T>, cfg: &RunConfig) -> Result<Tensor<T>> {
    let (c, h, w) = (raw.dim(0), raw.dim(1), raw.dim(2));
    if c != cfg.in_channels {
        return Err(Error::Config(format!(
            "image has {c} channels but the model expects {}",
            cfg.in_channels
        )));
    }
    let side = cfg.canvas_side;
    if (h, w) == (side, side) {
        return Ok(raw.clone());
    }
    let mut out = Tensor::zeros(&[c, side, side]);
    for ch in 0..c {
        let plane = Tensor::new(
            vec![h, w],
            raw.data()[ch * h * w..(ch + 1) * h * w].to_vec(),
        )
        .expect("plane shape");
        let resized = bilinear_resize(&plane, side, side)?;
        for y in 0..side {
            for x in 0..side {
                out.set(&[ch, y, x], resized.at(&[y, x]));
            }
        }
    }
    Ok(out)
}
