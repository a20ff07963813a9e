/// Channel-major feature map, laid out `(channel, batch, y, x)`.
///
/// Keeping channels outermost makes every channel one contiguous
/// `batch * h * w` plane, which is the column space of the im2col GEMMs.
#[derive(Debug, Clone, PartialEq)]
pub struct Fmap {
    pub c: usize,
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Fmap {
    pub fn zeros(c: usize, b: usize, h: usize, w: usize) -> Self {
        Fmap {
            c,
            b,
            h,
            w,
            data: vec![0.0; c * b * h * w],
        }
    }

    pub fn from_vec(c: usize, b: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * b * h * w, "fmap buffer length");
        Fmap { c, b, h, w, data }
    }

    /// Columns of the im2col matrix: `batch * h * w`.
    pub fn plane(&self) -> usize {
        self.b * self.h * self.w
    }

    #[inline]
    pub fn idx(&self, c: usize, b: usize, y: usize, x: usize) -> usize {
        ((c * self.b + b) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, c: usize, b: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(c, b, y, x)]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn same_shape(&self, other: &Fmap) -> bool {
        (self.c, self.b, self.h, self.w) == (other.c, other.b, other.h, other.w)
    }

    pub fn zeros_like(&self) -> Self {
        Fmap::zeros(self.c, self.b, self.h, self.w)
    }

    pub fn add_assign(&mut self, other: &Fmap) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Copy of batch item `b` as a single-item map.
    pub fn select_batch(&self, b: usize) -> Fmap {
        let mut out = Fmap::zeros(self.c, 1, self.h, self.w);
        let hw = self.h * self.w;
        for c in 0..self.c {
            let src = &self.data[(c * self.b + b) * hw..(c * self.b + b + 1) * hw];
            out.data[c * hw..(c + 1) * hw].copy_from_slice(src);
        }
        out
    }
}
