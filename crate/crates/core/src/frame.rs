//! Grayscale frames, backward flow fields and binary masks, plus their
//! on-disk forms (8-bit PGM, raw little-endian f32 flow, PBM).

use crate::error::{Error, Result};
use e2v_tensor::Tensor;
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, GrayImage, ImageEncoder, Luma};
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

/// Intensities in [0, 1], row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Frame {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height);
        Self { width, height, data }
    }

    pub fn filled(width: usize, height: usize, v: f32) -> Self {
        Self::new(width, height, vec![v; width * height])
    }

    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    /// `(1, 1, H, W)`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(&[1, 1, self.height, self.width], self.data.clone())
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Self {
        let (n, c, h, w) = t.dims4();
        assert!(n == 1 && c == 1, "expected a single-channel image tensor");
        Self::new(w, h, t.data().to_vec())
    }

    pub fn quantized(&self) -> Self {
        Self::new(
            self.width,
            self.height,
            self.data.iter().map(|&v| to_u8(v) as f32 / 255.0).collect(),
        )
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        write_pnm(path, &bytes, self.width, self.height, PnmSubtype::Graymap(SampleEncoding::Binary))
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let img = read_gray(path)?;
        let (w, h) = img.dimensions();
        Ok(Self::new(
            w as usize,
            h as usize,
            img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect(),
        ))
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_pnm(path: &Path, bytes: &[u8], w: usize, h: usize, subtype: PnmSubtype) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    PnmEncoder::new(BufWriter::new(f))
        .with_subtype(subtype)
        .write_image(bytes, w as u32, h as u32, ExtendedColorType::L8)
        .map_err(|e| Error::format(path, e.to_string()))
}

fn read_gray(path: &Path) -> Result<GrayImage> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(img.into_luma8())
}

/// Backward flow `F_{k->k-1}`: the point shown at `x` in frame k was at
/// `x + F(x)` in frame k-1. Interleaved `(dx, dy)` per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct Flow {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Flow {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; 2 * width * height],
        }
    }

    pub fn at(&self, x: usize, y: usize) -> (f32, f32) {
        let i = 2 * (y * self.width + x);
        (self.data[i], self.data[i + 1])
    }

    pub fn set(&mut self, x: usize, y: usize, d: (f32, f32)) {
        let i = 2 * (y * self.width + x);
        self.data[i] = d.0;
        self.data[i + 1] = d.1;
    }

    /// `(1, 2, H, W)` with channel 0 = dx.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; 2 * plane];
        for i in 0..plane {
            out[i] = self.data[2 * i];
            out[plane + i] = self.data[2 * i + 1];
        }
        Tensor::from_vec(&[1, 2, self.height, self.width], out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// The file carries no header, so the size comes from the caller.
    pub fn read(path: &Path, width: usize, height: usize) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() != 8 * width * height {
            return Err(Error::format(
                path,
                format!("expected {} bytes for a {width}x{height} flow, found {}", 8 * width * height, bytes.len()),
            ));
        }
        let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        Ok(Self { width, height, data })
    }
}

/// Binary map, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn at(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Nearest-neighbour resample with half-pixel centres.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Self {
        let pick = |o: usize, n_out: usize, n_in: usize| {
            (((o as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize).min(n_in - 1)
        };
        let mut out = Self::empty(width, height);
        for y in 0..height {
            let sy = pick(y, height, self.height);
            for x in 0..width {
                out.data[y * width + x] = self.at(pick(x, width, self.width), sy);
            }
        }
        out
    }

    /// Set pixels are written as PBM ink (bit 1). The encoder takes 0 = black.
    pub fn write_pbm(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&b| u8::from(!b)).collect();
        write_pnm(path, &bytes, self.width, self.height, PnmSubtype::Bitmap(SampleEncoding::Binary))
    }

    pub fn read_pbm(path: &Path) -> Result<Self> {
        let img = read_gray(path)?;
        let (w, h) = img.dimensions();
        let data = img.pixels().map(|&Luma([v])| v < 128).collect();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            data,
        })
    }
}
