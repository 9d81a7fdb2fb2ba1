//! RGB image patches as dense float buffers with values in `[0, 1]`.
//!
//! Layout is row-major, channel-interleaved (x fastest, then y, RGB per
//! pixel). Coordinates follow image convention: `x` is the column, `y` the
//! row, origin at the top-left pixel center.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PixelError {
    #[error("buffer of {len} values cannot hold a {width}x{height} RGB image")]
    BadLength {
        width: usize,
        height: usize,
        len: usize,
    },
    #[error("image dimensions must be nonzero, got {width}x{height}")]
    EmptyImage { width: usize, height: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RgbPatch {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl RgbPatch {
    pub fn new(width: usize, height: usize) -> Result<Self, PixelError> {
        if width == 0 || height == 0 {
            return Err(PixelError::EmptyImage { width, height });
        }
        Ok(RgbPatch {
            width,
            height,
            data: vec![0.0; width * height * 3],
        })
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self, PixelError> {
        if width == 0 || height == 0 {
            return Err(PixelError::EmptyImage { width, height });
        }
        if data.len() != width * height * 3 {
            return Err(PixelError::BadLength {
                width,
                height,
                len: data.len(),
            });
        }
        Ok(RgbPatch {
            width,
            height,
            data,
        })
    }

    pub fn from_f32(width: usize, height: usize, data: &[f32]) -> Result<Self, PixelError> {
        Self::from_data(width, height, data.iter().map(|&v| v as f64).collect())
    }

    /// Uniform fill with one color.
    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Result<Self, PixelError> {
        let mut p = Self::new(width, height)?;
        for i in 0..width * height {
            p.data[i * 3..i * 3 + 3].copy_from_slice(&rgb);
        }
        Ok(p)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn mean_rgb(&self) -> [f64; 3] {
        let n = (self.width * self.height) as f64;
        let mut acc = [0.0; 3];
        for px in self.data.chunks_exact(3) {
            acc[0] += px[0];
            acc[1] += px[1];
            acc[2] += px[2];
        }
        [acc[0] / n, acc[1] / n, acc[2] / n]
    }

    /// Bilinear sample at float coordinates with clamp-to-edge behavior.
    /// Integer coordinates hit pixel centers exactly.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> [f64; 3] {
        let xc = x.clamp(0.0, (self.width - 1) as f64);
        let yc = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = xc.floor() as usize;
        let y0 = yc.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = xc - x0 as f64;
        let fy = yc - y0 as f64;
        let p00 = self.get(x0, y0);
        let p10 = self.get(x1, y0);
        let p01 = self.get(x0, y1);
        let p11 = self.get(x1, y1);
        let mut out = [0.0; 3];
        for c in 0..3 {
            let top = p00[c] * (1.0 - fx) + p10[c] * fx;
            let bot = p01[c] * (1.0 - fx) + p11[c] * fx;
            out[c] = top * (1.0 - fy) + bot * fy;
        }
        out
    }

    /// Bilinear resize of a source rectangle to `(out_w, out_h)`. Source
    /// coordinates map as `src = (dst + 0.5) * scale - 0.5` (half-pixel
    /// centers), so a full-image resize to the same size is the identity.
    pub fn resize_region_bilinear(
        &self,
        left: f64,
        top: f64,
        src_w: f64,
        src_h: f64,
        out_w: usize,
        out_h: usize,
    ) -> Result<RgbPatch, PixelError> {
        let mut out = RgbPatch::new(out_w, out_h)?;
        let sx = src_w / out_w as f64;
        let sy = src_h / out_h as f64;
        for oy in 0..out_h {
            let src_y = top + (oy as f64 + 0.5) * sy - 0.5;
            for ox in 0..out_w {
                let src_x = left + (ox as f64 + 0.5) * sx - 0.5;
                out.set(ox, oy, self.sample_bilinear(src_x, src_y));
            }
        }
        Ok(out)
    }

    pub fn resize_bilinear(&self, out_w: usize, out_h: usize) -> Result<RgbPatch, PixelError> {
        self.resize_region_bilinear(
            0.0,
            0.0,
            self.width as f64,
            self.height as f64,
            out_w,
            out_h,
        )
    }
}
