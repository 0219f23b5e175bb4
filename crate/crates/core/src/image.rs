//! Raster images and binary PPM (P6) IO.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `height × width × channels` image, values in `[0, 1]`, row-major HWC.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl RasterImage {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 || data.len() != height * width * channels {
            return Err(Error::InvalidArgument(format!(
                "image {height}x{width}x{channels} with {} values",
                data.len()
            )));
        }
        Ok(RasterImage {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, color: &[f32]) -> Self {
        let mut data = Vec::with_capacity(height * width * color.len());
        for _ in 0..height * width {
            data.extend_from_slice(color);
        }
        RasterImage {
            height,
            width,
            channels: color.len(),
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, color: &[f32]) {
        let i = (y * self.width + x) * self.channels;
        self.data[i..i + self.channels].copy_from_slice(color);
    }

    /// Fill the half-open pixel rectangle `[x0,x1) × [y0,y1)`, clipped to the image.
    pub fn fill_rect(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, color: &[f32]) {
        for y in y0..y1.min(self.height) {
            for x in x0..x1.min(self.width) {
                self.set_pixel(y, x, color);
            }
        }
    }

    pub fn mean(&self) -> f32 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() as f32 / self.data.len() as f32
    }

    /// Channel-first `[channels, height, width]` copy.
    pub fn to_chw(&self) -> Vec<f32> {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut out = vec![0.0; h * w * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[(ch * h + y) * w + x] = self.data[(y * w + x) * c + ch];
                }
            }
        }
        out
    }

    pub fn from_chw(channels: usize, height: usize, width: usize, chw: &[f32]) -> Result<Self> {
        let mut data = vec![0.0; chw.len()];
        if chw.len() != channels * height * width {
            return Err(Error::InvalidArgument("chw buffer size".into()));
        }
        for ch in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data[(y * width + x) * channels + ch] = chw[(ch * height + y) * width + x];
                }
            }
        }
        RasterImage::new(height, width, channels, data)
    }

    /// Axis-aligned sub-image `[x0,x1) × [y0,y1)`; bounds must lie inside.
    pub fn sub_image(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 || x1 > self.width || y1 > self.height {
            return Err(Error::InvalidArgument(format!(
                "sub-image [{x0},{x1})x[{y0},{y1}) of {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity((x1 - x0) * (y1 - y0) * self.channels);
        for y in y0..y1 {
            let start = (y * self.width + x0) * self.channels;
            data.extend_from_slice(&self.data[start..start + (x1 - x0) * self.channels]);
        }
        RasterImage::new(y1 - y0, x1 - x0, self.channels, data)
    }

    /// Bilinear resize with pixel-center alignment.
    pub fn resize(&self, new_h: usize, new_w: usize) -> Self {
        let c = self.channels;
        let mut data = vec![0.0; new_h * new_w * c];
        let sy = self.height as f32 / new_h as f32;
        let sx = self.width as f32 / new_w as f32;
        for y in 0..new_h {
            let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f32;
            for x in 0..new_w {
                let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f32;
                for ch in 0..c {
                    let p = |yy: usize, xx: usize| self.data[(yy * self.width + xx) * c + ch];
                    let top = p(y0, x0) * (1.0 - tx) + p(y0, x1) * tx;
                    let bot = p(y1, x0) * (1.0 - tx) + p(y1, x1) * tx;
                    data[(y * new_w + x) * c + ch] = top * (1.0 - ty) + bot * ty;
                }
            }
        }
        RasterImage {
            height: new_h,
            width: new_w,
            channels: c,
            data,
        }
    }

    pub fn write_ppm<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut buf = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for y in 0..self.height {
            for x in 0..self.width {
                let px = self.pixel(y, x);
                for ch in 0..3 {
                    let v = px[ch.min(self.channels - 1)];
                    buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        w.write_all(&buf)
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_ppm(std::io::BufWriter::new(f))
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm<R: BufRead>(mut r: R) -> Result<Self> {
        let bad = |m: &str| Error::InvalidArgument(format!("ppm: {m}"));
        let mut fields = Vec::new();
        let mut token = Vec::new();
        while fields.len() < 4 {
            let mut byte = [0u8; 1];
            r.read_exact(&mut byte).map_err(|e| Error::io("<ppm>", e))?;
            match byte[0] {
                b'#' => {
                    let mut skip = String::new();
                    r.read_line(&mut skip).map_err(|e| Error::io("<ppm>", e))?;
                }
                b if b.is_ascii_whitespace() => {
                    if !token.is_empty() {
                        fields.push(
                            String::from_utf8(std::mem::take(&mut token))
                                .map_err(|_| bad("header"))?,
                        );
                    }
                }
                b => token.push(b),
            }
        }
        if fields[0] != "P6" {
            return Err(bad("expected P6 magic"));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("header number"));
        let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval != 255 {
            return Err(bad("only 8-bit maxval 255 is supported"));
        }
        let mut bytes = vec![0u8; w * h * 3];
        r.read_exact(&mut bytes)
            .map_err(|e| Error::io("<ppm>", e))?;
        let data = bytes.iter().map(|&b| b as f32 / 255.0).collect();
        RasterImage::new(h, w, 3, data)
    }

    pub fn load_ppm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_ppm(std::io::BufReader::new(f))
    }
}

/// Stack same-size images into a `[B, C, H, W]` tensor.
pub fn batch_tensor(images: &[&RasterImage]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
    let (c, h, w) = (first.channels(), first.height(), first.width());
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if (img.channels(), img.height(), img.width()) != (c, h, w) {
            return Err(Error::InvalidArgument(format!(
                "batch mixes {}x{}x{} with {h}x{w}x{c}",
                img.height(),
                img.width(),
                img.channels()
            )));
        }
        data.extend(img.to_chw());
    }
    Tensor::new(vec![images.len(), c, h, w], data)
}
