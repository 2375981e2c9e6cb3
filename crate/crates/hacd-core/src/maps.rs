//! Per-pixel score maps and binary change masks, plus their file formats
//! (16-bit PGM for inspection, CSV for exact interchange).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Real-valued anomaly score per pixel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    height: usize,
    width: usize,
    scores: Vec<f64>,
}

impl ScoreMap {
    pub fn new(height: usize, width: usize, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != height * width {
            return Err(Error::shape(
                format!("{} scores ({}x{})", height * width, height, width),
                format!("{} scores", scores.len()),
            ));
        }
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig {
                message: "score map contains non-finite values".into(),
            });
        }
        Ok(ScoreMap {
            height,
            width,
            scores,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.scores[row * self.width + col]
    }

    /// Min-max scaling into [0, 1]; a constant map becomes all zeros.
    pub fn normalized(&self) -> ScoreMap {
        let lo = self.scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self
            .scores
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let scores = if hi > lo {
            self.scores.iter().map(|v| (v - lo) / (hi - lo)).collect()
        } else {
            vec![0.0; self.scores.len()]
        };
        ScoreMap {
            height: self.height,
            width: self.width,
            scores,
        }
    }
}

/// Binary ground-truth mask: 1 marks an anomalous change.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChangeMask {
    height: usize,
    width: usize,
    labels: Vec<bool>,
}

impl ChangeMask {
    pub fn new(height: usize, width: usize, labels: Vec<bool>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape(
                format!("{} labels ({}x{})", height * width, height, width),
                format!("{} labels", labels.len()),
            ));
        }
        Ok(ChangeMask {
            height,
            width,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.labels[row * self.width + col]
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }
}

/// Export format for score maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapFormat {
    /// Binary 16-bit PGM after min-max normalization to [0, 65535].
    Pgm16,
    /// Comma-separated raw scores, one row per image row.
    Csv,
}

pub fn export_map(map: &ScoreMap, path: &Path, format: MapFormat) -> Result<()> {
    match format {
        MapFormat::Pgm16 => export_pgm16(map, path),
        MapFormat::Csv => export_csv(map, path),
    }
}

fn export_pgm16(map: &ScoreMap, path: &Path) -> Result<()> {
    let normalized = map.normalized();
    let mut out = Vec::with_capacity(32 + 2 * normalized.scores.len());
    out.extend_from_slice(format!("P5\n{} {}\n65535\n", map.width, map.height).as_bytes());
    for &v in &normalized.scores {
        let q = (v * 65535.0).round().clamp(0.0, 65535.0) as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

fn export_csv(map: &ScoreMap, path: &Path) -> Result<()> {
    let mut text = String::new();
    for r in 0..map.height {
        let row = &map.scores[r * map.width..(r + 1) * map.width];
        let line: Vec<String> = row.iter().map(|v| format!("{}", v)).collect();
        text.push_str(&line.join(","));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Read a CSV written by [`export_map`] (or any rectangular CSV of reals).
pub fn import_map_csv(path: &Path) -> Result<ScoreMap> {
    let (height, width, values) = read_csv_grid(path)?;
    ScoreMap::new(height, width, values)
}

/// Write a mask as CSV of 0/1 values.
pub fn export_mask_csv(mask: &ChangeMask, path: &Path) -> Result<()> {
    let mut text = String::new();
    for r in 0..mask.height() {
        let row: Vec<&str> = (0..mask.width())
            .map(|c| if mask.get(r, c) { "1" } else { "0" })
            .collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Read a mask CSV; values above 0.5 count as positive.
pub fn import_mask_csv(path: &Path) -> Result<ChangeMask> {
    let (height, width, values) = read_csv_grid(path)?;
    ChangeMask::new(height, width, values.iter().map(|&v| v > 0.5).collect())
}

fn read_csv_grid(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut width = 0;
    let mut height = 0;
    let mut values = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|cell| {
                cell.trim().parse::<f64>().map_err(|_| Error::Format {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    message: format!("not a number: {:?}", cell.trim()),
                })
            })
            .collect::<Result<_>>()?;
        if height == 0 {
            width = row.len();
        } else if row.len() != width {
            return Err(Error::Format {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!("ragged row: {} cells, expected {}", row.len(), width),
            });
        }
        values.extend(row);
        height += 1;
    }
    if height == 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            line: 0,
            message: "empty CSV".into(),
        });
    }
    Ok((height, width, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn temp_dir(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("hacd_maps_{}_{}", std::process::id(), name));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn pgm_min_max_endpoints() {
        let dir = temp_dir("pgm");
        let map = ScoreMap::new(1, 2, vec![0.0, 1.0]).unwrap();
        let path = dir.join("m.pgm");
        export_map(&map, &path, MapFormat::Pgm16).unwrap();
        let bytes = fs::read(&path).unwrap();
        let header = b"P5\n2 1\n65535\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0u8, 0, 0xFF, 0xFF]);
    }

    #[test]
    fn constant_map_normalizes_to_zero() {
        let dir = temp_dir("const");
        let map = ScoreMap::new(2, 2, vec![3.0; 4]).unwrap();
        let path = dir.join("m.pgm");
        export_map(&map, &path, MapFormat::Pgm16).unwrap();
        let bytes = fs::read(&path).unwrap();
        let header_len = b"P5\n2 2\n65535\n".len();
        assert!(bytes[header_len..].iter().all(|&b| b == 0));
    }

    #[test]
    fn csv_round_trips_exactly() {
        let dir = temp_dir("csv");
        let scores: Vec<f64> = (0..9).map(|i| (i as f64) * 0.3 - 1.0).collect();
        let map = ScoreMap::new(3, 3, scores).unwrap();
        let path = dir.join("m.csv");
        export_map(&map, &path, MapFormat::Csv).unwrap();
        let back = import_map_csv(&path).unwrap();
        assert_eq!(back.height(), 3);
        assert_eq!(back.width(), 3);
        for (a, b) in back.scores().iter().zip(map.scores()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn mask_csv_round_trips() {
        let dir = temp_dir("mask");
        let mask = ChangeMask::new(2, 3, vec![true, false, false, true, true, false]).unwrap();
        let path = dir.join("mask.csv");
        export_mask_csv(&mask, &path).unwrap();
        let back = import_mask_csv(&path).unwrap();
        assert_eq!(back, mask);
    }

    #[test]
    fn ragged_csv_is_rejected() {
        let dir = temp_dir("ragged");
        let path = dir.join("bad.csv");
        fs::write(&path, "1,2,3\n4,5\n").unwrap();
        assert!(matches!(import_map_csv(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn normalize_constant_and_simple() {
        let map = ScoreMap::new(1, 2, vec![2.0, 4.0]).unwrap();
        assert_eq!(map.normalized().scores(), &[0.0, 1.0]);
        let flat = ScoreMap::new(1, 2, vec![7.0, 7.0]).unwrap();
        assert_eq!(flat.normalized().scores(), &[0.0, 0.0]);
    }
}
