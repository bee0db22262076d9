use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Batch of 8-bit RGB images stored `N × H × W × 3` (components interleaved).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBatch {
    n: usize,
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

pub const COMPONENTS: usize = 3;

impl ImageBatch {
    pub fn new(n: usize, height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if n == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidInput(format!(
                "image batch extents must be positive, got {n}x{height}x{width}"
            )));
        }
        if pixels.len() != n * height * width * COMPONENTS {
            return Err(Error::shape(
                "image-batch",
                &[n, height, width, COMPONENTS],
                &[pixels.len()],
            ));
        }
        Ok(Self {
            n,
            height,
            width,
            pixels,
        })
    }

    /// Builds a batch from wider integers, rejecting values outside `0..=255`.
    pub fn from_values(n: usize, height: usize, width: usize, values: &[i32]) -> Result<Self> {
        let pixels = values
            .iter()
            .map(|&v| {
                u8::try_from(v).map_err(|_| Error::InvalidInput(format!("pixel value {v} outside 0..=255")))
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::new(n, height, width, pixels)
    }

    /// Concatenates single images (each `H × W × 3`).
    pub fn stack(height: usize, width: usize, images: &[&[u8]]) -> Result<Self> {
        let pixels = images.concat();
        Self::new(images.len(), height, width, pixels)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * COMPONENTS
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let len = self.image_len();
        &self.pixels[i * len..(i + 1) * len]
    }

    pub fn pixel(&self, i: usize, y: usize, x: usize, c: usize) -> u8 {
        self.pixels[((i * self.height + y) * self.width + x) * COMPONENTS + c]
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let parts: Vec<&[u8]> = indices.iter().map(|&i| self.image(i)).collect();
        Self::stack(self.height, self.width, &parts).expect("selection of a valid batch")
    }

    /// `(N, 3, H, W)` component indices in NCHW order.
    pub fn nchw_indices(&self) -> Vec<usize> {
        let plane = self.height * self.width;
        let mut out = vec![0usize; self.pixels.len()];
        for i in 0..self.n {
            for c in 0..COMPONENTS {
                let dst = &mut out[(i * COMPONENTS + c) * plane..(i * COMPONENTS + c + 1) * plane];
                for (p, slot) in dst.iter_mut().enumerate() {
                    *slot = self.pixels[(i * plane + p) * COMPONENTS + c] as usize;
                }
            }
        }
        out
    }

    /// NCHW float tensor with components rescaled to `[0, 1]`.
    pub fn to_unit_tensor(&self) -> Tensor {
        let data = self.nchw_indices().into_iter().map(|p| p as f32 / 255.0).collect();
        Tensor::new(&[self.n, COMPONENTS, self.height, self.width], data).expect("consistent extents")
    }
}
