//! Panorama container, bilinear sampling with longitude wrap, analytic
//! intensity gradients and the blur score used for keyframe selection.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::geometry::PixelCoord;

/// Single-channel floating image with the panorama's wrap/clamp rules.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width);
        Self { height, width, data }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    fn corners(&self, u: f64, v: f64) -> (f64, f64, [f64; 4]) {
        let hmax = (self.height - 1) as f64;
        let uc = u.clamp(0.0, hmax);
        // Truncation is floor for the non-negative values below.
        let r0 = uc as usize;
        let fu = uc - r0 as f64;
        let r1 = (r0 + 1).min(self.height - 1);
        let w = self.width as f64;
        let vw = if (0.0..w).contains(&v) { v } else { v.rem_euclid(w) };
        let c0 = vw as usize;
        let fv = vw - c0 as f64;
        let c0 = c0 % self.width;
        let c1 = (c0 + 1) % self.width;
        (
            fu,
            fv,
            [self.at(r0, c0), self.at(r0, c1), self.at(r1, c0), self.at(r1, c1)],
        )
    }

    /// Bilinear value; rows clamp, columns wrap.
    #[inline]
    pub fn sample(&self, u: f64, v: f64) -> f64 {
        let (fu, fv, [a, b, c, d]) = self.corners(u, v);
        let top = a + (b - a) * fv;
        let bottom = c + (d - c) * fv;
        top + (bottom - top) * fu
    }

    /// Bilinear value with its partial derivatives along `u` and `v`.
    #[inline]
    pub fn sample_with_gradient(&self, u: f64, v: f64) -> (f64, f64, f64) {
        let (fu, fv, [a, b, c, d]) = self.corners(u, v);
        let top = a + (b - a) * fv;
        let bottom = c + (d - c) * fv;
        let value = top + (bottom - top) * fu;
        // Clamped rows have a flat vertical profile.
        let du = if u < 0.0 || u > (self.height - 1) as f64 {
            0.0
        } else {
            bottom - top
        };
        let dv = (b - a) + ((d - c) - (b - a)) * fu;
        (value, du, dv)
    }

    /// Half-resolution copy whose pixel `k` is centred on source pixel `2k`,
    /// filtered with a separable [1, 2, 1] / 4 kernel.
    pub fn downsample(&self) -> GrayImage {
        let h = (self.height / 2).max(2);
        let w = (self.width / 2).max(2);
        let mut data = vec![0.0; h * w];
        let hm = self.height - 1;
        for r in 0..h {
            let sr = (2 * r).min(hm);
            let rows = [sr.saturating_sub(1), sr, (sr + 1).min(hm)];
            for c in 0..w {
                let sc = 2 * c;
                let cols = [
                    (sc + self.width - 1) % self.width,
                    sc % self.width,
                    (sc + 1) % self.width,
                ];
                let mut acc = 0.0;
                for (i, &rr) in rows.iter().enumerate() {
                    let wr = if i == 1 { 0.5 } else { 0.25 };
                    for (j, &cc) in cols.iter().enumerate() {
                        let wc = if j == 1 { 0.5 } else { 0.25 };
                        acc += wr * wc * self.at(rr, cc);
                    }
                }
                data[r * w + c] = acc;
            }
        }
        GrayImage::new(h, w, data)
    }
}

/// Equirectangular RGB image: width spans 360° of longitude, height 180° of
/// latitude.
#[derive(Clone, Debug)]
pub struct Panorama {
    height: usize,
    width: usize,
    rgb: Vec<[u8; 3]>,
    gray: OnceLock<GrayImage>,
    pub timestamp: f64,
}

impl PartialEq for Panorama {
    fn eq(&self, other: &Self) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.rgb == other.rgb
            && self.timestamp == other.timestamp
    }
}

pub fn gray_of(rgb: [u8; 3]) -> f64 {
    (0.299 * rgb[0] as f64 + 0.587 * rgb[1] as f64 + 0.114 * rgb[2] as f64) / 255.0
}

impl Panorama {
    pub fn new(height: usize, width: usize, rgb: Vec<[u8; 3]>, timestamp: f64) -> Result<Self> {
        if height < 2 || width < 2 {
            return Err(Error::InvalidParameter(format!(
                "panorama must be at least 2x2, got {height}x{width}"
            )));
        }
        if rgb.len() != height * width {
            return Err(Error::InvalidParameter(format!(
                "{} pixels for a {height}x{width} image",
                rgb.len()
            )));
        }
        Ok(Self {
            height,
            width,
            rgb,
            gray: OnceLock::new(),
            timestamp,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        timestamp: f64,
        mut f: impl FnMut(usize, usize) -> [u8; 3],
    ) -> Result<Self> {
        let mut rgb = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                rgb.push(f(r, c));
            }
        }
        Self::new(height, width, rgb, timestamp)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[[u8; 3]] {
        &self.rgb
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        self.rgb[row * self.width + col]
    }

    /// Grayscale plane in [0, 1], derived on first use.
    pub fn gray(&self) -> &GrayImage {
        self.gray
            .get_or_init(|| GrayImage::new(self.height, self.width, self.rgb.iter().map(|&p| gray_of(p)).collect()))
    }

    fn check(&self, px: &PixelCoord) -> Result<()> {
        if !(px.u >= 0.0 && px.u < self.height as f64) || !px.v.is_finite() {
            return Err(Error::PixelOutOfBounds {
                u: px.u,
                v: px.v,
                height: self.height,
                width: self.width,
            });
        }
        Ok(())
    }

    /// Bilinear RGB in [0, 255] without bounds checking (rows clamp).
    #[inline]
    pub fn sample_rgb(&self, u: f64, v: f64) -> [f64; 3] {
        let hmax = (self.height - 1) as f64;
        let uc = u.clamp(0.0, hmax);
        let r0 = uc.floor();
        let fu = uc - r0;
        let r0 = r0 as usize;
        let r1 = (r0 + 1).min(self.height - 1);
        let vw = v.rem_euclid(self.width as f64);
        let c0f = vw.floor();
        let fv = vw - c0f;
        let c0 = (c0f as usize) % self.width;
        let c1 = (c0 + 1) % self.width;
        let p = |r: usize, c: usize| self.rgb[r * self.width + c];
        let (a, b, c, d) = (p(r0, c0), p(r0, c1), p(r1, c0), p(r1, c1));
        let mut out = [0.0; 3];
        for k in 0..3 {
            let top = a[k] as f64 + (b[k] as f64 - a[k] as f64) * fv;
            let bottom = c[k] as f64 + (d[k] as f64 - c[k] as f64) * fv;
            out[k] = top + (bottom - top) * fu;
        }
        out
    }
}

pub fn sample_color(image: &Panorama, pixel: &PixelCoord) -> Result<[f64; 3]> {
    image.check(pixel)?;
    Ok(image.sample_rgb(pixel.u, pixel.v))
}

pub fn sample_gray_with_gradient(image: &Panorama, pixel: &PixelCoord) -> Result<(f64, f64, f64)> {
    image.check(pixel)?;
    Ok(image.gray().sample_with_gradient(pixel.u, pixel.v))
}

const BLUR_EPS: f64 = 1e-12;

/// `1 / (ε + Var(∇² gray))` over interior pixels; higher means blurrier.
pub fn blurriness(image: &Panorama) -> f64 {
    blurriness_gray(image.gray())
}

pub fn blurriness_gray(g: &GrayImage) -> f64 {
    if g.height < 3 || g.width < 3 {
        return 1.0 / BLUR_EPS;
    }
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    let mut n = 0usize;
    for r in 1..g.height - 1 {
        for c in 1..g.width - 1 {
            let lap = g.at(r - 1, c) + g.at(r + 1, c) + g.at(r, c - 1) + g.at(r, c + 1) - 4.0 * g.at(r, c);
            sum += lap;
            sum2 += lap * lap;
            n += 1;
        }
    }
    let mean = sum / n as f64;
    let var = (sum2 / n as f64 - mean * mean).max(0.0);
    1.0 / (BLUR_EPS + var)
}

/// Parses `<t_seconds>.png|jpg` file names.
pub fn timestamp_from_filename(path: &Path) -> Option<f64> {
    path.file_stem()?.to_str()?.parse().ok()
}

/// Reads an image index: one `t path` per line, paths relative to the index.
pub fn parse_image_index(text: &str, base: &Path) -> Result<Vec<(f64, PathBuf)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.splitn(2, char::is_whitespace);
        let t = it.next().unwrap_or_default();
        let p = it.next().map(str::trim).unwrap_or_default();
        let t: f64 = t
            .parse()
            .map_err(|_| Error::parse("image index", format!("line {}", n + 1), format!("bad timestamp `{t}`")))?;
        if p.is_empty() {
            return Err(Error::parse("image index", format!("line {}", n + 1), "missing path"));
        }
        out.push((t, base.join(p)));
    }
    Ok(out)
}

#[cfg(feature = "image-io")]
mod io {
    use super::*;

    pub fn load_image(path: impl AsRef<Path>) -> Result<Panorama> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| Error::ImageDecode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let pixels = rgb.pixels().map(|p| p.0).collect();
        let t = timestamp_from_filename(path).unwrap_or(0.0);
        Panorama::new(h as usize, w as usize, pixels, t)
    }

    /// Writes an 8-bit RGB PNG.
    pub fn save_image(image: &Panorama, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let buf: Vec<u8> = image.pixels().iter().flatten().copied().collect();
        image::save_buffer_with_format(
            path,
            &buf,
            image.width() as u32,
            image.height() as u32,
            image::ExtendedColorType::Rgb8,
            image::ImageFormat::Png,
        )
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::ImageDecode {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })
    }

    pub fn load_image_index(index: impl AsRef<Path>) -> Result<Vec<Panorama>> {
        let index = index.as_ref();
        let text = std::fs::read_to_string(index).map_err(|e| Error::io(index, e))?;
        let base = index.parent().unwrap_or(Path::new("."));
        parse_image_index(&text, base)?
            .into_iter()
            .map(|(t, p)| {
                let mut img = load_image(&p)?;
                img.timestamp = t;
                Ok(img)
            })
            .collect()
    }
}

#[cfg(feature = "image-io")]
pub use io::{load_image, load_image_index, save_image};
