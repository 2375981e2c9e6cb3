//! ENVI flat-binary raster reader/writer.
//!
//! Header: plain text `key = value` lines, case-insensitive keys, an optional
//! leading `ENVI` magic line. Data: raw interleaved binary per the header.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::cube::HsiCube;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interleave {
    /// Band-sequential: whole band planes back to back.
    Bsq,
    /// Band-interleaved-by-line: one line of each band, per line.
    Bil,
    /// Band-interleaved-by-pixel: all bands of a pixel together.
    Bip,
}

impl Interleave {
    fn parse(s: &str) -> Option<Interleave> {
        match s.to_ascii_lowercase().as_str() {
            "bsq" => Some(Interleave::Bsq),
            "bil" => Some(Interleave::Bil),
            "bip" => Some(Interleave::Bip),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Interleave::Bsq => "bsq",
            Interleave::Bil => "bil",
            Interleave::Bip => "bip",
        }
    }
}

/// ENVI data type codes supported by this toolkit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataType {
    /// Code 2: 16-bit signed integer.
    I16,
    /// Code 4: 32-bit IEEE float.
    F32,
    /// Code 12: 16-bit unsigned integer.
    U16,
}

impl DataType {
    fn from_code(code: u32) -> Option<DataType> {
        match code {
            2 => Some(DataType::I16),
            4 => Some(DataType::F32),
            12 => Some(DataType::U16),
            _ => None,
        }
    }

    pub fn code(self) -> u32 {
        match self {
            DataType::I16 => 2,
            DataType::F32 => 4,
            DataType::U16 => 12,
        }
    }

    fn bytes(self) -> usize {
        match self {
            DataType::I16 | DataType::U16 => 2,
            DataType::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnviHeader {
    pub samples: usize,
    pub lines: usize,
    pub bands: usize,
    pub interleave: Interleave,
    pub data_type: DataType,
    /// 0 = little-endian, 1 = big-endian.
    pub byte_order: u8,
    pub header_offset: usize,
}

const MANDATORY_KEYS: [&str; 6] = [
    "samples",
    "lines",
    "bands",
    "interleave",
    "data type",
    "byte order",
];

impl EnviHeader {
    pub fn parse(path: &Path) -> Result<EnviHeader> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries: Vec<(String, String, usize)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.eq_ignore_ascii_case("envi") {
                continue;
            }
            let Some(eq) = line.find('=') else {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    message: format!("expected `key = value`, got {:?}", line),
                });
            };
            let key = line[..eq].trim().to_ascii_lowercase();
            let value = line[eq + 1..].trim().to_string();
            if MANDATORY_KEYS.contains(&key.as_str()) || key == "header offset" {
                if entries.iter().any(|(k, _, _)| *k == key) {
                    return Err(Error::Format {
                        path: path.to_path_buf(),
                        line: lineno + 1,
                        message: format!("duplicate key {:?}", key),
                    });
                }
                entries.push((key, value, lineno + 1));
            }
            // Other keys (wavelengths, descriptions, ...) are tolerated and ignored.
        }

        let lookup = |key: &str| entries.iter().find(|(k, _, _)| k == key);
        let require = |key: &str| {
            lookup(key).ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                line: 0,
                message: format!("missing mandatory key {:?}", key),
            })
        };
        let parse_count = |key: &str| -> Result<usize> {
            let (_, value, line) = require(key)?;
            let n: usize = value.parse().map_err(|_| Error::Format {
                path: path.to_path_buf(),
                line: *line,
                message: format!("{:?} must be a positive integer, got {:?}", key, value),
            })?;
            if n == 0 {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    line: *line,
                    message: format!("{:?} must be >= 1", key),
                });
            }
            Ok(n)
        };

        let samples = parse_count("samples")?;
        let lines = parse_count("lines")?;
        let bands = parse_count("bands")?;

        let (_, inter_value, _) = require("interleave")?;
        let interleave = Interleave::parse(inter_value).ok_or_else(|| Error::Unsupported {
            what: format!("interleave {:?}", inter_value),
        })?;

        let (_, dt_value, dt_line) = require("data type")?;
        let code: u32 = dt_value.parse().map_err(|_| Error::Format {
            path: path.to_path_buf(),
            line: *dt_line,
            message: format!("\"data type\" must be an integer code, got {:?}", dt_value),
        })?;
        let data_type = DataType::from_code(code).ok_or_else(|| Error::Unsupported {
            what: format!("data type code {}", code),
        })?;

        let (_, bo_value, bo_line) = require("byte order")?;
        let byte_order: u8 = match bo_value.trim() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    line: *bo_line,
                    message: format!("\"byte order\" must be 0 or 1, got {:?}", other),
                })
            }
        };

        let header_offset = match lookup("header offset") {
            Some((_, value, line)) => value.parse().map_err(|_| Error::Format {
                path: path.to_path_buf(),
                line: *line,
                message: format!("\"header offset\" must be an integer, got {:?}", value),
            })?,
            None => 0,
        };

        Ok(EnviHeader {
            samples,
            lines,
            bands,
            interleave,
            data_type,
            byte_order,
            header_offset,
        })
    }

    fn element_count(&self) -> usize {
        self.samples * self.lines * self.bands
    }
}

/// Load a cube from an ENVI header/data pair. Integer samples are widened to
/// f64 without scaling.
pub fn load_envi(header_path: &Path, data_path: &Path) -> Result<HsiCube> {
    let header = EnviHeader::parse(header_path)?;
    load_envi_with_header(&header, data_path)
}

pub fn load_envi_with_header(header: &EnviHeader, data_path: &Path) -> Result<HsiCube> {
    let bytes = fs::read(data_path).map_err(|e| Error::io(data_path, e))?;
    let bpe = header.data_type.bytes();
    let needed = header.header_offset as u64 + (header.element_count() * bpe) as u64;
    if (bytes.len() as u64) < needed {
        return Err(Error::Truncated {
            path: data_path.to_path_buf(),
            expected: needed,
            actual: bytes.len() as u64,
        });
    }
    let payload = &bytes[header.header_offset..header.header_offset + header.element_count() * bpe];
    let big_endian = header.byte_order == 1;
    let read_at = |elem: usize| -> f64 {
        let off = elem * bpe;
        match header.data_type {
            DataType::F32 => {
                let raw: [u8; 4] = payload[off..off + 4].try_into().unwrap();
                let v = if big_endian {
                    f32::from_be_bytes(raw)
                } else {
                    f32::from_le_bytes(raw)
                };
                v as f64
            }
            DataType::I16 => {
                let raw: [u8; 2] = payload[off..off + 2].try_into().unwrap();
                let v = if big_endian {
                    i16::from_be_bytes(raw)
                } else {
                    i16::from_le_bytes(raw)
                };
                v as f64
            }
            DataType::U16 => {
                let raw: [u8; 2] = payload[off..off + 2].try_into().unwrap();
                let v = if big_endian {
                    u16::from_be_bytes(raw)
                } else {
                    u16::from_le_bytes(raw)
                };
                v as f64
            }
        }
    };

    let (h, w, b) = (header.lines, header.samples, header.bands);
    // Fill band-major storage from the file's interleave order.
    let mut values = vec![0.0; h * w * b];
    for band in 0..b {
        for row in 0..h {
            for col in 0..w {
                let elem = match header.interleave {
                    Interleave::Bsq => (band * h + row) * w + col,
                    Interleave::Bil => (row * b + band) * w + col,
                    Interleave::Bip => (row * w + col) * b + band,
                };
                values[(band * h + row) * w + col] = read_at(elem);
            }
        }
    }
    HsiCube::new(h, w, b, values)
}

/// Write a cube as 32-bit little-endian ENVI with the requested interleave.
/// The header is written alongside, `key = value` per line.
pub fn save_envi(
    cube: &HsiCube,
    header_path: &Path,
    data_path: &Path,
    interleave: Interleave,
) -> Result<()> {
    let header_text = format!(
        "ENVI\nsamples = {}\nlines = {}\nbands = {}\ninterleave = {}\ndata type = 4\nbyte order = 0\nheader offset = 0\n",
        cube.width(),
        cube.height(),
        cube.bands(),
        interleave.name(),
    );
    fs::write(header_path, header_text).map_err(|e| Error::io(header_path, e))?;

    let (h, w, b) = (cube.height(), cube.width(), cube.bands());
    let mut out = Vec::with_capacity(h * w * b * 4);
    let mut push = |v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
    match interleave {
        Interleave::Bsq => {
            for band in 0..b {
                for row in 0..h {
                    for col in 0..w {
                        push(cube.get(row, col, band));
                    }
                }
            }
        }
        Interleave::Bil => {
            for row in 0..h {
                for band in 0..b {
                    for col in 0..w {
                        push(cube.get(row, col, band));
                    }
                }
            }
        }
        Interleave::Bip => {
            for row in 0..h {
                for col in 0..w {
                    for band in 0..b {
                        push(cube.get(row, col, band));
                    }
                }
            }
        }
    }
    let mut file = fs::File::create(data_path).map_err(|e| Error::io(data_path, e))?;
    file.write_all(&out).map_err(|e| Error::io(data_path, e))?;
    Ok(())
}
