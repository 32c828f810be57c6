//! Single-channel intensity grids and the square zero-padded input convention.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("pixel grid must have nonzero dimensions (got {height}x{width})")]
    EmptyGrid { height: usize, width: usize },
    #[error("pixel data length {len} does not match {height}x{width}")]
    SizeMismatch {
        height: usize,
        width: usize,
        len: usize,
    },
    #[error("pixel value {value} at index {index} outside [0,1]")]
    PixelOutOfRange { index: usize, value: f64 },
    #[error("labeled image must be square (got {height}x{width})")]
    NotSquare { height: usize, width: usize },
}

/// Row-major grid of intensities in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGrid {
    data: Vec<f64>,
    height: usize,
    width: usize,
}

impl PixelGrid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if height == 0 || width == 0 {
            return Err(ImageError::EmptyGrid { height, width });
        }
        if data.len() != height * width {
            return Err(ImageError::SizeMismatch {
                height,
                width,
                len: data.len(),
            });
        }
        for (index, &value) in data.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(ImageError::PixelOutOfRange { index, value });
            }
        }
        Ok(Self {
            data,
            height,
            width,
        })
    }

    /// Construction path for operations that guarantee the range invariant
    /// themselves (flips, bilinear resampling, clamped filters).
    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert!(height > 0 && width > 0);
        debug_assert_eq!(data.len(), height * width);
        debug_assert!(data.iter().all(|v| (0.0..=1.0).contains(v)));
        Self {
            data,
            height,
            width,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self, ImageError> {
        Self::new(height, width, vec![0.0; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_square(&self) -> bool {
        self.height == self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Bilinear sample at fractional coordinates; taps outside the grid read 0.
    pub fn sample_bilinear(&self, row: f64, col: f64) -> f64 {
        let r0 = row.floor();
        let c0 = col.floor();
        let fr = row - r0;
        let fc = col - c0;
        let tap = |r: f64, c: f64| -> f64 {
            if r < 0.0 || c < 0.0 {
                return 0.0;
            }
            let (r, c) = (r as usize, c as usize);
            if r >= self.height || c >= self.width {
                0.0
            } else {
                self.get(r, c)
            }
        };
        let top = tap(r0, c0) * (1.0 - fc) + tap(r0, c0 + 1.0) * fc;
        let bottom = tap(r0 + 1.0, c0) * (1.0 - fc) + tap(r0 + 1.0, c0 + 1.0) * fc;
        top * (1.0 - fr) + bottom * fr
    }

    /// Bilinear resize to `size`x`size`.
    pub fn resize_bilinear(&self, size: usize) -> Result<Self, ImageError> {
        if size == 0 {
            return Err(ImageError::EmptyGrid {
                height: size,
                width: size,
            });
        }
        if self.height == size && self.width == size {
            return Ok(self.clone());
        }
        let sr = self.height as f64 / size as f64;
        let sc = self.width as f64 / size as f64;
        let mut data = Vec::with_capacity(size * size);
        for r in 0..size {
            // Map output pixel centers onto input pixel centers, clamped so
            // edge samples never tap the zero fill.
            let src_r = ((r as f64 + 0.5) * sr - 0.5).clamp(0.0, (self.height - 1) as f64);
            for c in 0..size {
                let src_c = ((c as f64 + 0.5) * sc - 0.5).clamp(0.0, (self.width - 1) as f64);
                data.push(self.sample_bilinear(src_r, src_c));
            }
        }
        Ok(Self::from_raw(size, size, data))
    }
}

/// Centers the grid inside a `max(h,w)` square, filling new pixels with 0.
/// Odd remainders place the extra row/column at the bottom/right.
pub fn pad_to_square(grid: &PixelGrid) -> PixelGrid {
    let side = grid.height().max(grid.width());
    if grid.height() == side && grid.width() == side {
        return grid.clone();
    }
    let top = (side - grid.height()) / 2;
    let left = (side - grid.width()) / 2;
    let mut data = vec![0.0; side * side];
    for r in 0..grid.height() {
        for c in 0..grid.width() {
            data[(r + top) * side + (c + left)] = grid.get(r, c);
        }
    }
    PixelGrid::from_raw(side, side, data)
}

/// A square intensity grid with its class label and unique per-image id.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pixels: PixelGrid,
    class_id: String,
    source_id: String,
}

impl LabeledImage {
    pub fn new(
        pixels: PixelGrid,
        class_id: impl Into<String>,
        source_id: impl Into<String>,
    ) -> Result<Self, ImageError> {
        if !pixels.is_square() {
            return Err(ImageError::NotSquare {
                height: pixels.height(),
                width: pixels.width(),
            });
        }
        Ok(Self {
            pixels,
            class_id: class_id.into(),
            source_id: source_id.into(),
        })
    }

    pub fn pixels(&self) -> &PixelGrid {
        &self.pixels
    }

    pub fn resolution(&self) -> usize {
        self.pixels.height()
    }

    pub fn class_id(&self) -> &str {
        &self.class_id
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    /// Same label and id, different pixel content (augmentation output).
    pub fn with_pixels(&self, pixels: PixelGrid) -> Self {
        Self {
            pixels,
            class_id: self.class_id.clone(),
            source_id: self.source_id.clone(),
        }
    }
}
