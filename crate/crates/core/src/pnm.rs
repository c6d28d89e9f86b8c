//! Netpbm images (PGM P2/P5, PPM P3/P6) and image-directory datasets.

use std::path::{Path, PathBuf};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A decoded image with raw integer samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub maxval: u32,
    /// Row-major, interleaved channels.
    pub samples: Vec<u32>,
}

fn parse_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Option<&str> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        (self.pos > start).then(|| std::str::from_utf8(&self.bytes[start..self.pos]).ok())?
    }

    fn number(&mut self) -> Option<u32> {
        self.token()?.parse().ok()
    }
}

impl Pnm {
    pub fn parse(bytes: &[u8], path: &Path) -> Result<Pnm> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.token().ok_or_else(|| parse_err(path, "empty file"))?.to_string();
        let (channels, binary) = match magic.as_str() {
            "P2" => (1, false),
            "P5" => (1, true),
            "P3" => (3, false),
            "P6" => (3, true),
            other => return Err(parse_err(path, format!("unsupported magic {other:?}"))),
        };
        let width = cur.number().ok_or_else(|| parse_err(path, "bad width"))? as usize;
        let height = cur.number().ok_or_else(|| parse_err(path, "bad height"))? as usize;
        let maxval = cur.number().ok_or_else(|| parse_err(path, "bad maxval"))?;
        if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
            return Err(parse_err(path, "invalid dimensions or maxval"));
        }
        let count = width * height * channels;
        let samples = if binary {
            // exactly one whitespace byte separates the header from the raster
            let start = cur.pos + 1;
            let width_bytes = if maxval < 256 { 1 } else { 2 };
            let raster = bytes
                .get(start..start + count * width_bytes)
                .ok_or_else(|| parse_err(path, "truncated raster"))?;
            if width_bytes == 1 {
                raster.iter().map(|&b| b as u32).collect()
            } else {
                raster
                    .chunks_exact(2)
                    .map(|c| u16::from_be_bytes([c[0], c[1]]) as u32)
                    .collect()
            }
        } else {
            (0..count)
                .map(|_| cur.number().ok_or_else(|| parse_err(path, "truncated or invalid sample")))
                .collect::<Result<Vec<_>>>()?
        };
        if samples.iter().any(|&s| s > maxval) {
            return Err(parse_err(path, "sample exceeds maxval"));
        }
        Ok(Pnm {
            width,
            height,
            channels,
            maxval,
            samples,
        })
    }

    pub fn read(path: &Path) -> Result<Pnm> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Pnm::parse(&bytes, path)
    }

    /// `[channels×size×size]` tensor in `[-1, 1]`, nearest-neighbor resized
    /// and converted to `channels` (channel mean for color→gray, replication
    /// for gray→color).
    pub fn to_tensor(&self, size: usize, channels: usize) -> Tensor {
        let scale = |s: u32| s as f32 / self.maxval as f32 * 2.0 - 1.0;
        Tensor::from_fn([channels, size, size], |i| {
            let (c, rest) = (i / (size * size), i % (size * size));
            let sy = (rest / size) * self.height / size;
            let sx = (rest % size) * self.width / size;
            let px = (sy * self.width + sx) * self.channels;
            if self.channels == channels {
                scale(self.samples[px + c])
            } else if self.channels == 1 {
                scale(self.samples[px])
            } else {
                let sum: f32 = (0..self.channels).map(|k| scale(self.samples[px + k])).sum();
                sum / self.channels as f32
            }
        })
    }
}

/// Writes a `[H×W]` map as an 8-bit binary PGM, scaled so the maximum maps
/// to 255 (all-zero maps stay black).
pub fn write_pgm_heatmap(map: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = map.dims2()?;
    let max = map.data().iter().copied().fold(0.0f32, f32::max);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for v in map.data() {
        let s = if max > 0.0 { (v.max(0.0) / max * 255.0).round() } else { 0.0 };
        out.push(s as u8);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Whether `labels.csv` is consulted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Labels {
    /// Never opened.
    Ignore,
    /// Used when present.
    Optional,
    /// Missing file or entries are configuration errors.
    Required,
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
        Some(ref e) if e == "pgm" || e == "ppm" || e == "pnm"
    )
}

fn read_labels(path: &Path) -> Result<std::collections::HashMap<String, usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = std::collections::HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (name, label) = line
            .split_once(',')
            .ok_or_else(|| parse_err(path, format!("line {}: expected filename,label", lineno + 1)))?;
        match label.trim().parse::<usize>() {
            Ok(l) => {
                map.insert(name.trim().to_string(), l);
            }
            Err(_) if lineno == 0 => {} // header row
            Err(_) => return Err(parse_err(path, format!("line {}: bad label {label:?}", lineno + 1))),
        }
    }
    Ok(map)
}

/// Loads every `.pgm`/`.ppm`/`.pnm` file in `dir`, in filename order.
pub fn load_image_dir(dir: &Path, image_size: usize, channels: usize, labels: Labels) -> Result<Dataset> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("no PGM/PPM images in {}", dir.display())));
    }
    let images = files
        .iter()
        .map(|p| Ok(Pnm::read(p)?.to_tensor(image_size, channels)))
        .collect::<Result<Vec<_>>>()?;
    let label_path = dir.join("labels.csv");
    let label_map = match labels {
        Labels::Ignore => None,
        Labels::Optional if !label_path.exists() => None,
        Labels::Required if !label_path.exists() => {
            return Err(Error::Config(format!("{} is required but missing", label_path.display())))
        }
        _ => Some(read_labels(&label_path)?),
    };
    let labels = match label_map {
        None => None,
        Some(map) => {
            let mut out = Vec::with_capacity(files.len());
            for f in &files {
                let name = f.file_name().and_then(|n| n.to_str()).unwrap_or_default();
                match map.get(name) {
                    Some(&l) => out.push(l),
                    None => return Err(Error::Config(format!("no label for {name} in labels.csv"))),
                }
            }
            Some(out)
        }
    };
    let num_classes = labels.as_ref().and_then(|l| l.iter().max()).map_or(0, |m| m + 1);
    Ok(Dataset {
        images,
        labels,
        num_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ascii_and_binary_agree() {
        let p = Path::new("mem");
        let a = Pnm::parse(b"P2\n# c\n2 2\n255\n0 85\n170 255\n", p).unwrap();
        let mut raw = b"P5 2 2 255\n".to_vec();
        raw.extend_from_slice(&[0, 85, 170, 255]);
        let b = Pnm::parse(&raw, p).unwrap();
        assert_eq!(a, b);
        let t = a.to_tensor(2, 1);
        let expect = [-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0];
        for (v, e) in t.data().iter().zip(expect) {
            assert!((v - e).abs() < 1e-6);
        }
    }

    #[test]
    fn color_and_sixteen_bit() {
        let p = Path::new("mem");
        let c = Pnm::parse(b"P3 1 1 255 255 0 255", p).unwrap();
        assert_eq!(c.channels, 3);
        let gray = c.to_tensor(1, 1);
        assert!((gray.data()[0] - 1.0 / 3.0).abs() < 1e-6);
        let mut raw = b"P5 1 1 65535\n".to_vec();
        raw.extend_from_slice(&[0xff, 0xff]);
        assert_eq!(Pnm::parse(&raw, p).unwrap().to_tensor(1, 1).data(), &[1.0]);
    }

    #[test]
    fn nearest_neighbor_upscale() {
        let img = Pnm::parse(b"P2 2 1 2 0 2", Path::new("mem")).unwrap();
        assert_eq!(img.to_tensor(4, 1).data()[..4], [-1.0, -1.0, 1.0, 1.0]);
    }

    #[test]
    fn parse_errors_name_the_file() {
        let err = Pnm::parse(b"P7 1 1", Path::new("bad.pgm")).unwrap_err();
        assert!(err.to_string().contains("bad.pgm"));
        assert!(Pnm::parse(b"P2 2 2 255 1 2 3", Path::new("x")).is_err());
        assert!(Pnm::parse(b"P2 1 1 10 11", Path::new("x")).is_err());
    }
}
