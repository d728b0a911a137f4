//! RGB images, PPM files and letterboxing.

use std::io::Write;
use std::path::Path;

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Padding value of letterboxed and augmented canvases.
pub const PAD_VALUE: f64 = 114.0 / 255.0;

/// Three-channel image, channel-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let plane = width * height;
        let mut data = Vec::with_capacity(3 * plane);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, plane));
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn put_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.set(c, y, x, v);
        }
    }

    /// As a `1×3×H×W` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 3, self.height, self.width], self.data.clone()).expect("image layout")
    }

    /// Bilinear resize with pixel-center alignment.
    pub fn resize(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let axis = |i: usize, s: f64, n: usize| {
            let f = ((i as f64 + 0.5) * s - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = f.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, f - i0 as f64)
        };
        let xs: Vec<_> = (0..width).map(|x| axis(x, sx, self.width)).collect();
        let mut out = Image::filled(width, height, [0.0; 3]);
        for y in 0..height {
            let (y0, y1, fy) = axis(y, sy, self.height);
            for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                for c in 0..3 {
                    let top = self.get(c, y0, x0) * (1.0 - fx) + self.get(c, y0, x1) * fx;
                    let bot = self.get(c, y1, x0) * (1.0 - fx) + self.get(c, y1, x1) * fx;
                    out.set(c, y, x, top * (1.0 - fy) + bot * fy);
                }
            }
        }
        out
    }

    /// Copies `src` with its top-left corner at `(x, y)`, cropping whatever
    /// falls outside.
    pub fn blit(&mut self, src: &Image, x: i64, y: i64) {
        for sy in 0..src.height {
            let ty = y + sy as i64;
            if ty < 0 || ty >= self.height as i64 {
                continue;
            }
            for sx in 0..src.width {
                let tx = x + sx as i64;
                if tx < 0 || tx >= self.width as i64 {
                    continue;
                }
                self.put_pixel(ty as usize, tx as usize, src.pixel(sy, sx));
            }
        }
    }

    pub fn read_ppm(path: &Path) -> Result<Image> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        parse_ppm(&bytes).map_err(|reason| Error::BadImage {
            path: path.to_path_buf(),
            reason,
        })
    }

    /// Binary PPM with maxval 255; values are rounded to the nearest level.
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(20 + 3 * self.width * self.height);
        write!(buf, "P6\n{} {}\n255\n", self.width, self.height).expect("write to Vec");
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    buf.push((self.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

fn parse_ppm(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
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
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    if magic != "P6" {
        return Err(format!("expected P6 magic, found `{magic}`"));
    }
    let mut num = |what: &str| -> std::result::Result<usize, String> {
        let t = token()?;
        t.parse().map_err(|_| format!("bad {what} `{t}`"))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if width == 0 || height == 0 {
        return Err(format!("empty image {width}x{height}"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    // exactly one whitespace byte separates the header from the raster
    let body = pos + 1;
    let need = 3 * width * height;
    if bytes.len() < body + need {
        return Err(format!(
            "raster has {} bytes, expected {need}",
            bytes.len().saturating_sub(body)
        ));
    }
    let mut img = Image::filled(width, height, [0.0; 3]);
    let scale = maxval as f64;
    for (i, px) in bytes[body..body + need].chunks_exact(3).enumerate() {
        let (y, x) = (i / width, i % width);
        for c in 0..3 {
            img.set(c, y, x, px[c] as f64 / scale);
        }
    }
    Ok(img)
}

/// Record of a letterbox: original size, uniform scale and padding offsets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Letterbox {
    pub orig_width: usize,
    pub orig_height: usize,
    pub scale: f64,
    pub pad_x: f64,
    pub pad_y: f64,
}

impl Letterbox {
    pub fn identity(width: usize, height: usize) -> Self {
        Self {
            orig_width: width,
            orig_height: height,
            scale: 1.0,
            pad_x: 0.0,
            pad_y: 0.0,
        }
    }

    pub fn apply(&self, b: &BBox) -> BBox {
        BBox::new(
            b.x * self.scale + self.pad_x,
            b.y * self.scale + self.pad_y,
            b.w * self.scale,
            b.h * self.scale,
        )
    }

    pub fn invert(&self, b: &BBox) -> BBox {
        BBox::new(
            (b.x - self.pad_x) / self.scale,
            (b.y - self.pad_y) / self.scale,
            b.w / self.scale,
            b.h / self.scale,
        )
    }
}

/// Aspect-preserving resize into a `target × target` canvas, padding evenly
/// with [`PAD_VALUE`].
pub fn letterbox_image(image: &Image, target: usize) -> (Image, Letterbox) {
    let scale = (target as f64 / image.width as f64).min(target as f64 / image.height as f64);
    let nw = ((image.width as f64 * scale).round() as usize).clamp(1, target);
    let nh = ((image.height as f64 * scale).round() as usize).clamp(1, target);
    let pad_x = (target - nw) / 2;
    let pad_y = (target - nh) / 2;
    let mut canvas = Image::filled(target, target, [PAD_VALUE; 3]);
    canvas.blit(&image.resize(nw, nh), pad_x as i64, pad_y as i64);
    let lb = Letterbox {
        orig_width: image.width,
        orig_height: image.height,
        scale,
        pad_x: pad_x as f64,
        pad_y: pad_y as f64,
    };
    (canvas, lb)
}
