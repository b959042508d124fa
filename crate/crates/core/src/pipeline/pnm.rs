//! Binary portable pixmap I/O (P5 grayscale, P6 color).
//!
//! Chosen for dataset and figure output because the format is bit-exact and
//! trivially diffable in golden-file tests.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

fn to_byte(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes a
/// `H x W` field with values in [0, 1] as a binary P5 graymap.
pub fn write_pgm<T: Real>(path: &Path, field: &Tensor<T>) -> Result<()> {
    if field.rank() != 2 {
        return Err(Error::InvalidArgument {
            op: "write_pgm",
            detail: format!("expected 2-D field, got {:?}", field.shape()),
        });
    }
    let (h, w) = (field.dim(0), field.dim(1));
    let mut out = Vec::with_capacity(32 + h * w);
    write!(out, "P5\n{w} {h}\n255\n")?;
    out.extend(field.iter_f64().map(to_byte));
    fs::write(path, out)?;
    Ok(())
}

/// Writes a `3 x H x W` image with values in [0, 1] as a binary P6 pixmap.
pub fn write_ppm<T: Real>(path: &Path, image: &Tensor<T>) -> Result<()> {
    if image.rank() != 3 || image.dim(0) != 3 {
        return Err(Error::InvalidArgument {
            op: "write_ppm",
            detail: format!("expected 3 x H x W image, got {:?}", image.shape()),
        });
    }
    let (h, w) = (image.dim(1), image.dim(2));
    let mut out = Vec::with_capacity(32 + 3 * h * w);
    write!(out, "P6\n{w} {h}\n255\n")?;
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push(to_byte(image.at(&[c, y, x]).tof()));
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a binary P5 or P6 file into a `C x H x W` tensor scaled to [0, 1].
pub fn read_pnm<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path)?;
    let corrupt = |msg: &str| Error::CorruptCheckpoint(format!("{}: {msg}", path.display()));
    let mut pos = 0usize;
    let mut next_token = |bytes: &[u8]| -> Result<String> {
        // skip whitespace and '#' comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::InvalidArgument {
                op: "read_pnm",
                detail: "truncated header".into(),
            });
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = next_token(&bytes)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        _ => {
            return Err(Error::InvalidArgument {
                op: "read_pnm",
                detail: format!("unsupported magic '{magic}'"),
            })
        }
    };
    let w: usize = next_token(&bytes)?.parse().map_err(|_| corrupt("bad width"))?;
    let h: usize = next_token(&bytes)?.parse().map_err(|_| corrupt("bad height"))?;
    let maxval: usize = next_token(&bytes)?.parse().map_err(|_| corrupt("bad maxval"))?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::InvalidArgument {
            op: "read_pnm",
            detail: format!("unsupported maxval {maxval}"),
        });
    }
    pos += 1; // single whitespace after maxval
    let need = w * h * channels;
    if bytes.len() < pos + need {
        return Err(Error::InvalidArgument {
            op: "read_pnm",
            detail: "pixel payload truncated".into(),
        });
    }
    let scale = 1.0 / maxval as f64;
    let mut t = Tensor::zeros(&[channels, h, w]);
    for y in 0..h {
        for x in 0..w {
            for c in 0..channels {
                let b = bytes[pos + (y * w + x) * channels + c];
                t.set(&[c, y, x], T::fromf(b as f64 * scale));
            }
        }
    }
    Ok(t)
}
