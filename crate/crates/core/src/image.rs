/// Planar-free RGB image buffer with f64 channels, row-major, `[r, g, b]`
/// triplets per pixel. Values are linear and nominally in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageF {
    pub width: u32,
    pub height: u32,
    pub data: Vec<[f64; 3]>,
}

impl ImageF {
    pub fn zeros(width: u32, height: u32) -> Self {
        ImageF {
            width,
            height,
            data: vec![[0.0; 3]; width as usize * height as usize],
        }
    }

    /// Buffer initialized to `fill`; NaN fills make partial renders
    /// self-checking (reading an unfilled pixel poisons the result).
    pub fn filled(width: u32, height: u32, fill: f64) -> Self {
        ImageF {
            width,
            height,
            data: vec![[fill; 3]; width as usize * height as usize],
        }
    }

    #[inline]
    pub fn idx(&self, x: u32, y: u32) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y as usize * self.width as usize + x as usize
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> [f64; 3] {
        self.data[self.idx(x, y)]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: [f64; 3]) {
        let i = self.idx(x, y);
        self.data[i] = v;
    }

    pub fn same_dims(&self, other: &ImageF) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn pixel_count(&self) -> usize {
        self.data.len()
    }

    /// Mean squared error over all pixels and channels.
    pub fn mse(&self, other: &ImageF) -> f64 {
        assert!(self.same_dims(other));
        let mut acc = 0.0;
        for (a, b) in self.data.iter().zip(&other.data) {
            for c in 0..3 {
                let d = a[c] - b[c];
                acc += d * d;
            }
        }
        acc / (self.data.len() * 3) as f64
    }
}
