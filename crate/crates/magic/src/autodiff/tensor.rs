use crate::error::{MagicError, Result};
use crate::real::Real;

/// Dense numeric array in (batch, channels, height, width) layout, with an
/// optional same-shape gradient.
///
/// Storage is row-interleaved: the memory order is `[batch][row][channel][x]`,
/// which makes one image row (all channels) a contiguous slice. That is the
/// natural unit of a line-based pipeline, and it lets the whole-frame and
/// streaming paths share identical per-row kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![T::ZERO; n], grad: None }
    }

    pub fn filled(shape: [usize; 4], v: T) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![v; n], grad: None }
    }

    pub fn from_data(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(MagicError::Config(format!(
                "tensor data length {} does not match shape {:?} (= {} elements)",
                data.len(),
                shape,
                n
            )));
        }
        Ok(Tensor { shape, data, grad: None })
    }

    /// Single-image constructor: shape (1, c, h, w) from data given in
    /// channel-major (c, h, w) order.
    pub fn from_chw(c: usize, h: usize, w: usize, chw: &[T]) -> Result<Self> {
        if chw.len() != c * h * w {
            return Err(MagicError::Config(format!(
                "expected {} elements for {}x{}x{}, got {}",
                c * h * w,
                c,
                h,
                w,
                chw.len()
            )));
        }
        let mut t = Tensor::zeros([1, c, h, w]);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    t.set(0, ch, y, x, chw[(ch * h + y) * w + x]);
                }
            }
        }
        Ok(t)
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }
    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }
    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }
    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }
    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Flat index of (n, c, y, x) in the row-interleaved layout.
    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cs, hs, ws] = self.shape;
        ((n * hs + y) * cs + c) * ws + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    /// One image row (all channels, channel-major within the row).
    #[inline]
    pub fn row(&self, n: usize, y: usize) -> &[T] {
        let [_, cs, _, ws] = self.shape;
        let start = (n * self.shape[2] + y) * cs * ws;
        &self.data[start..start + cs * ws]
    }

    #[inline]
    pub fn row_mut(&mut self, n: usize, y: usize) -> &mut [T] {
        let [_, cs, _, ws] = self.shape;
        let start = (n * self.shape[2] + y) * cs * ws;
        &mut self.data[start..start + cs * ws]
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Gradient accumulation target, allocated as zeros on first use.
    pub fn grad_mut(&mut self) -> &mut [T] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![T::ZERO; n])
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Elementwise conversion between scalar types (f32 <-> f64).
    pub fn convert<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            grad: None,
        }
    }

    pub fn iter_values(&self) -> impl Iterator<Item = T> + '_ {
        self.data.iter().copied()
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::ZERO, T::max)
    }

    pub fn mean_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape);
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .sum();
        s / self.data.len() as f64
    }
}

/// Per-element box constraint, applied by projection after optimizer steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxConstraint {
    pub lo: f64,
    pub hi: f64,
}

/// A named, optionally constrained, trainable tensor.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
    pub constraint: Option<BoxConstraint>,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, tensor: Tensor<T>) -> Self {
        Parameter { name: name.into(), tensor, trainable: true, constraint: None }
    }

    pub fn with_constraint(mut self, lo: f64, hi: f64) -> Self {
        self.constraint = Some(BoxConstraint { lo, hi });
        self
    }

    /// Project every element into the box constraint, if any.
    pub fn apply_constraint(&mut self) {
        if let Some(c) = self.constraint {
            let lo = T::from_f64(c.lo);
            let hi = T::from_f64(c.hi);
            for v in self.tensor.data_mut() {
                *v = (*v).max(lo).min(hi);
            }
        }
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_indexing_round_trip() {
        let mut t = Tensor::<f32>::zeros([2, 3, 4, 5]);
        t.set(1, 2, 3, 4, 7.0);
        assert_eq!(t.at(1, 2, 3, 4), 7.0);
        assert_eq!(t.numel(), 2 * 3 * 4 * 5);
    }

    #[test]
    fn from_data_rejects_bad_length() {
        assert!(Tensor::<f32>::from_data([1, 1, 2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn row_is_channel_major() {
        let mut t = Tensor::<f32>::zeros([1, 2, 2, 3]);
        t.set(0, 0, 1, 0, 1.0);
        t.set(0, 1, 1, 2, 2.0);
        let row = t.row(0, 1);
        assert_eq!(row, &[1.0, 0.0, 0.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn constraint_projection_clamps() {
        let mut p = Parameter::new("w", Tensor::<f32>::filled([1, 2, 1, 1], 1.5))
            .with_constraint(-0.99, 0.99);
        p.apply_constraint();
        assert!(p.tensor.data().iter().all(|&v| v <= 0.99));
    }
}
