/// Dense `f32` activation tensor in NCHW layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data length mismatch");
        Self { n, c, h, w, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, n: usize) -> &[f32] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f32] {
        let len = self.sample_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// Channel-wise concatenation `[a, b]`.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w), "concat shape mismatch");
        let mut out = Tensor::zeros(a.n, a.c + b.c, a.h, a.w);
        let (la, lb) = (a.sample_len(), b.sample_len());
        for n in 0..a.n {
            let dst = out.sample_mut(n);
            dst[..la].copy_from_slice(a.sample(n));
            dst[la..la + lb].copy_from_slice(b.sample(n));
        }
        out
    }

    /// Inverse of [`Tensor::concat_channels`]: splits off the first `c_first` channels.
    pub fn split_channels(&self, c_first: usize) -> (Tensor, Tensor) {
        assert!(c_first <= self.c);
        let mut a = Tensor::zeros(self.n, c_first, self.h, self.w);
        let mut b = Tensor::zeros(self.n, self.c - c_first, self.h, self.w);
        let la = a.sample_len();
        for n in 0..self.n {
            let src = self.sample(n);
            a.sample_mut(n).copy_from_slice(&src[..la]);
            b.sample_mut(n).copy_from_slice(&src[la..]);
        }
        (a, b)
    }

    /// Zero-pads the bottom and right edges up to `(h, w)`.
    pub fn pad_to(&self, h: usize, w: usize) -> Tensor {
        assert!(h >= self.h && w >= self.w);
        if h == self.h && w == self.w {
            return self.clone();
        }
        let mut out = Tensor::zeros(self.n, self.c, h, w);
        for nc in 0..self.n * self.c {
            for y in 0..self.h {
                let src = nc * self.plane() + y * self.w;
                let dst = nc * h * w + y * w;
                out.data[dst..dst + self.w].copy_from_slice(&self.data[src..src + self.w]);
            }
        }
        out
    }

    /// Keeps the top-left `(h, w)` window.
    pub fn crop_to(&self, h: usize, w: usize) -> Tensor {
        assert!(h <= self.h && w <= self.w);
        if h == self.h && w == self.w {
            return self.clone();
        }
        let mut out = Tensor::zeros(self.n, self.c, h, w);
        for nc in 0..self.n * self.c {
            for y in 0..h {
                let src = nc * self.plane() + y * self.w;
                let dst = nc * h * w + y * w;
                out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}
