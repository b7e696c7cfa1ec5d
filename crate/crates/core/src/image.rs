use crate::error::{Error, Result};
use handcue_tensor::Tensor;

/// Planar (channel-major) image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "image {width}x{height}x{channels} needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, value: &[f32]) -> Self {
        let mut img = Self::zeros(width, height, value.len());
        for (c, &v) in value.iter().enumerate() {
            img.plane_mut(c).fill(v);
        }
        img
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Bilinear sample at continuous coordinates where pixel `(i, j)` has
    /// its center at `(j + 0.5, i + 0.5)`. Outside the image reads as 0.
    pub fn bilinear(&self, c: usize, x: f64, y: f64) -> f32 {
        let fx = x - 0.5;
        let fy = y - 0.5;
        let x0 = fx.floor();
        let y0 = fy.floor();
        let ax = (fx - x0) as f32;
        let ay = (fy - y0) as f32;
        let (x0, y0) = (x0 as i64, y0 as i64);
        let at = |xx: i64, yy: i64| -> f32 {
            if xx < 0 || yy < 0 || xx >= self.width as i64 || yy >= self.height as i64 {
                0.0
            } else {
                self.get(c, yy as usize, xx as usize)
            }
        };
        let top = at(x0, y0) * (1.0 - ax) + at(x0 + 1, y0) * ax;
        let bottom = at(x0, y0 + 1) * (1.0 - ax) + at(x0 + 1, y0 + 1) * ax;
        top * (1.0 - ay) + bottom * ay
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// `factor x factor` box average.
    pub fn downsample(&self, factor: usize) -> Result<Image> {
        if factor == 0 || self.width < factor || self.height < factor {
            return Err(Error::Invalid(format!(
                "cannot downsample {}x{} by {factor}",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let mut out = Image::zeros(w, h, self.channels);
        let norm = 1.0 / (factor * factor) as f32;
        for c in 0..self.channels {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0f32;
                    for dy in 0..factor {
                        let row = &self.plane(c)[(y * factor + dy) * self.width + x * factor..][..factor];
                        acc += row.iter().sum::<f32>();
                    }
                    out.set(c, y, x, acc * norm);
                }
            }
        }
        Ok(out)
    }

    /// Nearest-neighbour enlargement to exactly `width x height`.
    pub fn upsample_to(&self, factor: usize, width: usize, height: usize) -> Image {
        let mut out = Image::zeros(width, height, self.channels);
        for c in 0..self.channels {
            for y in 0..height {
                let sy = (y / factor).min(self.height - 1);
                for x in 0..width {
                    let sx = (x / factor).min(self.width - 1);
                    out.set(c, y, x, self.get(c, sy, sx));
                }
            }
        }
        out
    }

    /// `[1, C, H, W]` network input.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.channels, self.height, self.width], self.data.clone())
            .expect("image buffer matches its shape")
    }

    pub fn from_rgb8(width: usize, height: usize, rgb: &[u8]) -> Result<Image> {
        if rgb.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "rgb buffer of {} bytes for {width}x{height}",
                rgb.len()
            )));
        }
        let mut img = Image::zeros(width, height, 3);
        let n = width * height;
        for (i, px) in rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                img.data[c * n + i] = px[c] as f32 / 255.0;
            }
        }
        Ok(img)
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        let n = self.width * self.height;
        let mut out = Vec::with_capacity(n * 3);
        for i in 0..n {
            for c in 0..3 {
                let v = self.data[c.min(self.channels - 1) * n + i];
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out
    }

    pub fn save_png(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .ok_or_else(|| Error::Shape("png buffer".into()))?;
        buf.save(path)?;
        Ok(())
    }
}

/// Single-channel depth map in sensor units; non-positive means invalid.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl DepthMap {
    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Depth at the pixel containing `(u, v)`, falling back to the median
    /// of valid readings in the surrounding 5x5 window.
    pub fn sample(&self, u: f64, v: f64) -> Option<f64> {
        let (x, y) = (u.floor() as i64, v.floor() as i64);
        let valid = |d: f32| d.is_finite() && d > 0.0;
        let inside = |x: i64, y: i64| x >= 0 && y >= 0 && x < self.width as i64 && y < self.height as i64;
        if inside(x, y) {
            let d = self.get(x as usize, y as usize);
            if valid(d) {
                return Some(d as f64);
            }
        }
        let mut window: Vec<f32> = Vec::with_capacity(25);
        for yy in y - 2..=y + 2 {
            for xx in x - 2..=x + 2 {
                if inside(xx, yy) {
                    let d = self.get(xx as usize, yy as usize);
                    if valid(d) {
                        window.push(d);
                    }
                }
            }
        }
        if window.is_empty() {
            return None;
        }
        window.sort_by(|a, b| a.total_cmp(b));
        let m = window.len();
        Some(if m % 2 == 1 {
            window[m / 2] as f64
        } else {
            (window[m / 2 - 1] as f64 + window[m / 2] as f64) / 2.0
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_at_pixel_centers_is_exact() {
        let img = Image::new(3, 2, 1, vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        assert_eq!(img.bilinear(0, 1.5, 1.5), 0.4);
        assert!((img.bilinear(0, 1.0, 0.5) - 0.05).abs() < 1e-7);
        assert_eq!(img.bilinear(0, -3.0, 0.5), 0.0);
    }

    #[test]
    fn depth_median_fallback() {
        let mut d = DepthMap::filled(7, 7, 0.0);
        d.set(1, 1, 5.0);
        d.set(2, 2, 7.0);
        d.set(4, 4, 9.0);
        assert_eq!(d.sample(3.5, 3.5), Some(7.0));
        d.set(3, 3, 2.0);
        assert_eq!(d.sample(3.5, 3.5), Some(2.0));
        assert_eq!(DepthMap::filled(7, 7, 0.0).sample(3.0, 3.0), None);
    }

    #[test]
    fn rgb8_round_trip() {
        let rgb: Vec<u8> = (0..12).map(|v| (v * 20) as u8).collect();
        let img = Image::from_rgb8(2, 2, &rgb).unwrap();
        assert_eq!(img.to_rgb8(), rgb);
    }
}
