//! Row-major RGB pixel buffer shared by the HDR and LDR stages.

/// RGB image, row-major, f64 per channel. Linear radiance or tone-mapped
/// values depending on the producing stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl ImageBuf {
    pub fn new(width: usize, height: usize) -> Self {
        ImageBuf {
            width,
            height,
            data: vec![[0.0; 3]; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, value: [f64; 3]) -> Self {
        ImageBuf {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: [f64; 3]) {
        self.data[y * self.width + x] = value;
    }

    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }

    /// Mean over all pixels and channels.
    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        let sum: f64 = self.data.iter().map(|p| p[0] + p[1] + p[2]).sum();
        sum / (3.0 * self.data.len() as f64)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageBuf {
        ImageBuf {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|p| [f(p[0]), f(p[1]), f(p[2])])
                .collect(),
        }
    }

    pub fn same_dims(&self, other: &ImageBuf) -> bool {
        self.width == other.width && self.height == other.height
    }
}
