//! 8-bit images and masks.
//!
//! Everything image-shaped in the pipeline stays `u8` end to end; floats
//! appear only inside model tensors. That keeps every file byte-stable
//! across re-runs.

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("png: {0}")]
    Png(#[from] image::ImageError),
    #[error("expected {want} channels, file has {got}")]
    Channels { want: usize, got: usize },
    #[error("mask is empty (no set pixels)")]
    EmptyMask,
    #[error("{0}")]
    Geometry(String),
}

pub type Result<T> = std::result::Result<T, ImageError>;

/// Row-major 8-bit image; `c` is 1 (mask) or 3 (RGB).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    w: usize,
    h: usize,
    c: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(w: usize, h: usize, c: usize) -> Image {
        assert!(c == 1 || c == 3, "images are RGB or single-channel");
        Image {
            w,
            h,
            c,
            data: vec![0; w * h * c],
        }
    }

    pub fn rgb_filled(w: usize, h: usize, color: [u8; 3]) -> Image {
        let mut img = Image::new(w, h, 3);
        for p in 0..w * h {
            img.data[p * 3..p * 3 + 3].copy_from_slice(&color);
        }
        img
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn px(&self, x: usize, y: usize) -> &[u8] {
        &self.data[(y * self.w + x) * self.c..(y * self.w + x + 1) * self.c]
    }

    pub fn set_px(&mut self, x: usize, y: usize, v: &[u8]) {
        self.data[(y * self.w + x) * self.c..(y * self.w + x + 1) * self.c].copy_from_slice(v);
    }

    pub fn map_px(&self, f: impl Fn(&[u8]) -> Vec<u8>) -> Image {
        let mut out = self.clone();
        for p in 0..self.w * self.h {
            let v = f(&self.data[p * self.c..(p + 1) * self.c]);
            out.data[p * self.c..(p + 1) * self.c].copy_from_slice(&v);
        }
        out
    }

    /// Mask predicate: a pixel is set when its first channel is 255.
    pub fn mask_at(&self, x: usize, y: usize) -> bool {
        self.px(x, y)[0] == 255
    }

    pub fn mask_area(&self) -> usize {
        debug_assert_eq!(self.c, 1);
        self.data.iter().filter(|&&v| v == 255).count()
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0 || v == 255)
    }

    /// Tight bounding box (x0, y0, w, h) of set mask pixels.
    pub fn mask_bbox(&self) -> Result<(usize, usize, usize, usize)> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
        for y in 0..self.h {
            for x in 0..self.w {
                if self.mask_at(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        if x0 == usize::MAX {
            return Err(ImageError::EmptyMask);
        }
        Ok((x0, y0, x1 - x0 + 1, y1 - y0 + 1))
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Image {
        assert!(x0 + w <= self.w && y0 + h <= self.h, "crop out of bounds");
        let mut out = Image::new(w, h, self.c);
        for y in 0..h {
            let src = ((y0 + y) * self.w + x0) * self.c;
            let dst = y * w * self.c;
            out.data[dst..dst + w * self.c].copy_from_slice(&self.data[src..src + w * self.c]);
        }
        out
    }

    /// Nearest-neighbor resize; deterministic.
    pub fn resize_nearest(&self, nw: usize, nh: usize) -> Image {
        let mut out = Image::new(nw, nh, self.c);
        for y in 0..nh {
            let sy = (y * self.h) / nh;
            for x in 0..nw {
                let sx = (x * self.w) / nw;
                let v = self.px(sx, sy).to_vec();
                out.set_px(x, y, &v);
            }
        }
        out
    }

    /// `[H, W, C]` tensor scaled to [0, 1].
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .data
            .iter()
            .map(|&v| T::from_f64(v as f64 / 255.0))
            .collect();
        Tensor::new(vec![self.h, self.w, self.c], data).expect("sized from image")
    }

    /// Clamps to [0, 1] and quantizes; inverse of `to_tensor` up to
    /// quantization.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Image {
        let s = t.shape();
        assert_eq!(s.len(), 3, "expected [H, W, C]");
        let (h, w, c) = (s[0], s[1], s[2]);
        let data = t
            .data()
            .iter()
            .map(|&v| {
                let v = v.to_f64().clamp(0.0, 1.0);
                (v * 255.0).round() as u8
            })
            .collect();
        Image { w, h, c, data }
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        if let Some(parent) = path.as_ref().parent() {
            std::fs::create_dir_all(parent)?;
        }
        match self.c {
            1 => {
                let buf = image::GrayImage::from_raw(self.w as u32, self.h as u32, self.data.clone())
                    .expect("sized buffer");
                buf.save_with_format(path, image::ImageFormat::Png)?;
            }
            _ => {
                let buf = image::RgbImage::from_raw(self.w as u32, self.h as u32, self.data.clone())
                    .expect("sized buffer");
                buf.save_with_format(path, image::ImageFormat::Png)?;
            }
        }
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
        let img = image::open(path)?;
        match img {
            image::DynamicImage::ImageLuma8(g) => Ok(Image {
                w: g.width() as usize,
                h: g.height() as usize,
                c: 1,
                data: g.into_raw(),
            }),
            other => {
                let rgb = other.to_rgb8();
                Ok(Image {
                    w: rgb.width() as usize,
                    h: rgb.height() as usize,
                    c: 3,
                    data: rgb.into_raw(),
                })
            }
        }
    }
}
