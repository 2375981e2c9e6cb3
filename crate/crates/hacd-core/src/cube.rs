//! Hyperspectral cube type and the pixel-level operations on it:
//! radiometric alignment and non-overlapping patch extraction.

use crate::error::{Error, Result};

/// A height x width x bands grid of radiance values.
///
/// Storage is band-major: all values of band 0 first (row-major within the
/// band), then band 1, and so on. Cubes are immutable after construction;
/// every operation returns a new cube.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    height: usize,
    width: usize,
    bands: usize,
    values: Vec<f64>,
    nodata_flag: Option<f64>,
}

impl HsiCube {
    pub fn new(height: usize, width: usize, bands: usize, values: Vec<f64>) -> Result<Self> {
        Self::with_nodata(height, width, bands, values, None)
    }

    pub fn with_nodata(
        height: usize,
        width: usize,
        bands: usize,
        values: Vec<f64>,
        nodata_flag: Option<f64>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::InvalidConfig {
                message: format!(
                    "cube extents must be >= 1, got {}x{}x{}",
                    height, width, bands
                ),
            });
        }
        if values.len() != height * width * bands {
            return Err(Error::shape(
                format!(
                    "{} values ({}x{}x{})",
                    height * width * bands,
                    height,
                    width,
                    bands
                ),
                format!("{} values", values.len()),
            ));
        }
        for &v in &values {
            let is_nodata = nodata_flag.map_or(false, |nd| v == nd);
            if !v.is_finite() && !is_nodata {
                return Err(Error::InvalidConfig {
                    message: "cube contains non-finite values".to_string(),
                });
            }
        }
        Ok(HsiCube {
            height,
            width,
            bands,
            values,
            nodata_flag,
        })
    }

    /// Cube filled with a constant.
    pub fn constant(height: usize, width: usize, bands: usize, value: f64) -> Result<Self> {
        Self::new(height, width, bands, vec![value; height * width * bands])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn nodata_flag(&self) -> Option<f64> {
        self.nodata_flag
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    /// Raw band-major value slice.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    fn index(&self, row: usize, col: usize, band: usize) -> usize {
        (band * self.height + row) * self.width + col
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, band: usize) -> f64 {
        debug_assert!(row < self.height && col < self.width && band < self.bands);
        self.values[self.index(row, col, band)]
    }

    /// Spectrum at one pixel, length `bands`.
    pub fn spectrum(&self, row: usize, col: usize) -> Vec<f64> {
        (0..self.bands).map(|b| self.get(row, col, b)).collect()
    }

    pub fn same_dims(&self, other: &HsiCube) -> bool {
        self.height == other.height && self.width == other.width && self.bands == other.bands
    }

    fn dims_string(&self) -> String {
        format!("{}x{}x{}", self.height, self.width, self.bands)
    }

    /// Per-band mean and population standard deviation (two-pass).
    pub fn band_stats(&self, band: usize) -> (f64, f64) {
        let plane = &self.values[band * self.pixel_count()..(band + 1) * self.pixel_count()];
        let n = plane.len() as f64;
        let mean = plane.iter().sum::<f64>() / n;
        let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    }
}

/// Grid of non-overlapping m x m patch origins covering floor(H/m) x floor(W/m) cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    patch_size: usize,
    rows: usize,
    cols: usize,
    origins: Vec<(usize, usize)>,
}

impl PatchGrid {
    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// (row, col) of the top-left corner of each patch, row-major order.
    pub fn origins(&self) -> &[(usize, usize)] {
        &self.origins
    }

    /// Copy one patch out of `cube` in band-major (band, row, col) order,
    /// `bands * m * m` values.
    pub fn block(&self, cube: &HsiCube, index: usize) -> Vec<f64> {
        let (r0, c0) = self.origins[index];
        let m = self.patch_size;
        let mut out = Vec::with_capacity(cube.bands() * m * m);
        for b in 0..cube.bands() {
            for r in 0..m {
                for c in 0..m {
                    out.push(cube.get(r0 + r, c0 + c, b));
                }
            }
        }
        out
    }
}

/// Segment a cube into non-overlapping m x m patches; residual border pixels
/// (H mod m, W mod m) are excluded.
pub fn extract_patches(cube: &HsiCube, m: usize) -> Result<PatchGrid> {
    if m == 0 || m > cube.height().min(cube.width()) {
        return Err(Error::PatchTooLarge {
            m,
            height: cube.height(),
            width: cube.width(),
        });
    }
    let rows = cube.height() / m;
    let cols = cube.width() / m;
    let mut origins = Vec::with_capacity(rows * cols);
    for pr in 0..rows {
        for pc in 0..cols {
            origins.push((pr * m, pc * m));
        }
    }
    Ok(PatchGrid {
        patch_size: m,
        rows,
        cols,
        origins,
    })
}

/// Map each band of `target` onto the per-band mean and standard deviation of
/// `reference`: out = (t - mu_t) * (sigma_r / sigma_t) + mu_r.
pub fn radiometric_align(reference: &HsiCube, target: &HsiCube) -> Result<HsiCube> {
    if !reference.same_dims(target) {
        return Err(Error::shape(reference.dims_string(), target.dims_string()));
    }
    let px = reference.pixel_count();
    let mut out = Vec::with_capacity(target.values().len());
    for b in 0..reference.bands() {
        let (mu_r, sd_r) = reference.band_stats(b);
        let (mu_t, sd_t) = target.band_stats(b);
        if sd_t == 0.0 {
            return Err(Error::DegenerateBand { band: b });
        }
        let gain = sd_r / sd_t;
        let plane = &target.values()[b * px..(b + 1) * px];
        out.extend(plane.iter().map(|&v| (v - mu_t) * gain + mu_r));
    }
    HsiCube::with_nodata(
        target.height(),
        target.width(),
        target.bands(),
        out,
        target.nodata_flag(),
    )
}
