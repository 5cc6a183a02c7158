//! Dense row-major multi-channel grids shared by images, depth maps,
//! feature maps and probability volumes.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    rows: usize,
    cols: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn zeros(rows: usize, cols: usize, channels: usize) -> Self {
        Self::filled(rows, cols, channels, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, channels: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            channels,
            data: vec![value; rows * cols * channels],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols}x{channels} raster",
                data.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            channels,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.rows, self.cols, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        (row * self.cols + col) * self.channels
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let i = self.index(row, col);
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let i = self.index(row, col);
        let c = self.channels;
        &mut self.data[i..i + c]
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[self.index(row, col) + channel]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: f64) {
        let i = self.index(row, col) + channel;
        self.data[i] = value;
    }

    /// Averages non-overlapping `factor`x`factor` blocks.
    pub fn downsample_mean(&self, factor: usize) -> Result<Raster> {
        if factor == 0 || !self.rows.is_multiple_of(factor) || !self.cols.is_multiple_of(factor) {
            return Err(Error::InvalidArgument(format!(
                "{}x{} raster is not divisible by {factor}",
                self.rows, self.cols
            )));
        }
        let (rows, cols) = (self.rows / factor, self.cols / factor);
        let norm = 1.0 / (factor * factor) as f64;
        let mut out = Raster::zeros(rows, cols, self.channels);
        for r in 0..rows {
            for c in 0..cols {
                let dst = out.index(r, c);
                for dr in 0..factor {
                    for dc in 0..factor {
                        let src = self.index(r * factor + dr, c * factor + dc);
                        for ch in 0..self.channels {
                            out.data[dst + ch] += self.data[src + ch];
                        }
                    }
                }
                for ch in 0..self.channels {
                    out.data[dst + ch] *= norm;
                }
            }
        }
        Ok(out)
    }

    /// Extracts one channel as a single-channel raster.
    pub fn channel(&self, channel: usize) -> Raster {
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| px[channel])
            .collect();
        Raster {
            rows: self.rows,
            cols: self.cols,
            channels: 1,
            data,
        }
    }

    /// Rounds every value through `f32`, matching what the binary raster
    /// format stores.
    pub fn quantized_f32(&self) -> Raster {
        Raster {
            data: self.data.iter().map(|&x| x as f32 as f64).collect(),
            ..self.clone()
        }
    }
}
