//! Portable image I/O: a flat binary container of 64-bit floats with a
//! 32-byte header, plus import of 8/16-bit binary or ASCII portable graymaps.
//!
//! Header layout (little endian): magic `CRFIMG1\0` (8 bytes), version u32,
//! height u32, width u32, channels u32, 8 reserved zero bytes. Data follows
//! channel-major, row-major within a channel.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mcgsm::Image;
use ndarray::Array2;

const MAGIC: &[u8; 8] = b"CRFIMG1\0";
const VERSION: u32 = 1;

pub fn write_image(path: &Path, channels: &[Image]) -> Result<()> {
    if channels.is_empty() {
        bail!("cannot write an image with no channels");
    }
    let (h, w) = channels[0].dim();
    for ch in channels {
        if ch.dim() != (h, w) {
            bail!("channel dimensions disagree");
        }
    }
    let mut buf = Vec::with_capacity(32 + 8 * h * w * channels.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.extend_from_slice(&(channels.len() as u32).to_le_bytes());
    buf.extend_from_slice(&[0u8; 8]);
    for ch in channels {
        for v in ch.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<Vec<Image>> {
    let mut f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut header = [0u8; 32];
    f.read_exact(&mut header)
        .with_context(|| format!("reading header of {}", path.display()))?;
    if &header[..8] != MAGIC {
        bail!("{}: not an image container (bad magic)", path.display());
    }
    let version = u32::from_le_bytes(header[8..12].try_into().unwrap());
    if version != VERSION {
        bail!("{}: unsupported container version {version}", path.display());
    }
    let h = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(header[16..20].try_into().unwrap()) as usize;
    let n_ch = u32::from_le_bytes(header[20..24].try_into().unwrap()) as usize;
    let mut data = Vec::new();
    f.read_to_end(&mut data)?;
    if data.len() != 8 * h * w * n_ch {
        bail!(
            "{}: payload is {} bytes, expected {}",
            path.display(),
            data.len(),
            8 * h * w * n_ch
        );
    }
    let mut channels = Vec::with_capacity(n_ch);
    for c in 0..n_ch {
        let base = c * h * w * 8;
        let mut img = Array2::zeros((h, w));
        for (i, v) in img.iter_mut().enumerate() {
            let off = base + i * 8;
            *v = f64::from_le_bytes(data[off..off + 8].try_into().unwrap());
        }
        channels.push(img);
    }
    Ok(channels)
}

/// Read a single-channel image (first channel of the container).
pub fn read_single(path: &Path) -> Result<Image> {
    Ok(read_image(path)?.remove(0))
}

/// Parse a P2/P5 portable graymap with 8- or 16-bit samples.
pub fn read_pgm(path: &Path) -> Result<Image> {
    let data = fs::read(path).with_context(|| format!("opening {}", path.display()))?;
    let mut pos = 0usize;

    let mut token = |data: &[u8]| -> Result<String> {
        // Skip whitespace and comments.
        loop {
            while pos < data.len() && data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < data.len() && data[pos] == b'#' {
                while pos < data.len() && data[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            bail!("unexpected end of PGM header");
        }
        Ok(String::from_utf8_lossy(&data[start..pos]).into_owned())
    };

    let magic = token(&data)?;
    if magic != "P5" && magic != "P2" {
        bail!("{}: not a PGM file (magic {magic})", path.display());
    }
    let w: usize = token(&data)?.parse().context("PGM width")?;
    let h: usize = token(&data)?.parse().context("PGM height")?;
    let maxval: u32 = token(&data)?.parse().context("PGM maxval")?;
    if maxval == 0 || maxval > 65535 {
        bail!("{}: unsupported maxval {maxval}", path.display());
    }

    let mut img = Array2::zeros((h, w));
    if magic == "P2" {
        for v in img.iter_mut() {
            *v = token(&data)?.parse::<f64>().context("PGM sample")?;
        }
    } else {
        pos += 1; // single whitespace after maxval
        let two_bytes = maxval > 255;
        let need = h * w * if two_bytes { 2 } else { 1 };
        if data.len() < pos + need {
            bail!("{}: truncated PGM payload", path.display());
        }
        for v in img.iter_mut() {
            *v = if two_bytes {
                let hi = data[pos] as u16;
                let lo = data[pos + 1] as u16;
                pos += 2;
                ((hi << 8) | lo) as f64
            } else {
                let b = data[pos] as f64;
                pos += 1;
                b
            };
        }
    }
    Ok(img)
}

/// Load a corpus: either one image file or every `.img`/`.pgm` in a
/// directory, sorted by name. PGM intensities are log-transformed at import
/// (ln(1 + v)); the flat container is taken as-is.
pub fn load_corpus(path: &Path) -> Result<Vec<Image>> {
    let mut files: Vec<PathBuf> = if path.is_dir() {
        fs::read_dir(path)
            .with_context(|| format!("reading directory {}", path.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("img") | Some("pgm")
                )
            })
            .collect()
    } else {
        vec![path.to_path_buf()]
    };
    files.sort();
    if files.is_empty() {
        bail!("no .img or .pgm files under {}", path.display());
    }
    files
        .iter()
        .map(|p| match p.extension().and_then(|e| e.to_str()) {
            Some("pgm") => Ok(read_pgm(p)?.mapv(|v| (1.0 + v).ln())),
            _ => read_single(p),
        })
        .collect()
}
