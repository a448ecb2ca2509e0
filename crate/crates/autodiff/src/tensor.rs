//! Dense row-major tensors and the broadcasting kernels shared by the ops.

use crate::element::Element;

/// Owned, contiguous, row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<E>) -> Self {
        let shape = shape.into();
        assert_eq!(
            numel(&shape),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, E::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, E::one())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: E) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self { shape, data: vec![value; n] }
    }

    pub fn scalar(value: E) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Self {
        Self::new(shape, data.iter().map(|&x| E::lit(x)).collect())
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> E) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape)).map(&mut f).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Same data, new shape. Panics if the element count differs.
    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        assert_eq!(numel(&shape), self.data.len(), "reshape {:?} -> {shape:?}", self.shape);
        self.shape = shape;
        self
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.rank(), 4, "expected NCHW tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn item(&self) -> E {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> E {
        self.data[flat_index(&self.shape, index)]
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|x| F::lit(x.as_f64())).collect() }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> E {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> E {
        self.data.iter().fold(E::zero(), |m, x| m.max(x.abs()))
    }

    /// In-place `self += other` for equal shapes.
    pub fn add_assign(&mut self, other: &Tensor<E>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn flat_index(shape: &[usize], index: &[usize]) -> usize {
    assert_eq!(shape.len(), index.len(), "index rank mismatch");
    let mut off = 0;
    for (&d, &i) in shape.iter().zip(index) {
        assert!(i < d, "index {index:?} out of bounds for {shape:?}");
        off = off * d + i;
    }
    off
}

/// Numpy-style broadcast of two shapes, or `None` when incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out` (right-aligned), zero along broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let r = out.len();
    let own = strides(shape);
    let mut s = vec![0; r];
    for i in 0..shape.len() {
        let j = r - shape.len() + i;
        if shape[i] != 1 {
            s[j] = own[i];
        }
    }
    s
}

/// Calls `f(offset_a, offset_b, offset_out, len, step_a, step_b)` once per innermost row.
fn for_each_row(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize, usize, usize, usize),
) {
    let r = out.len();
    if r == 0 {
        f(0, 0, 0, 1, 0, 0);
        return;
    }
    let inner = out[r - 1];
    let rows = numel(&out[..r - 1]);
    if inner == 0 {
        return;
    }
    let mut idx = vec![0usize; r - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    for row in 0..rows {
        f(oa, ob, row * inner, inner, sa[r - 1], sb[r - 1]);
        // odometer increment over the outer axes
        for ax in (0..r - 1).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

/// Elementwise `f(a, b)` with broadcasting.
pub fn zip_broadcast<E: Element>(a: &Tensor<E>, b: &Tensor<E>, f: impl Fn(E, E) -> E) -> Tensor<E> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Tensor { shape: a.shape.clone(), data };
    }
    let out = broadcast_shape(&a.shape, &b.shape)
        .unwrap_or_else(|| panic!("cannot broadcast {:?} with {:?}", a.shape, b.shape));
    let sa = broadcast_strides(&a.shape, &out);
    let sb = broadcast_strides(&b.shape, &out);
    let mut data = vec![E::zero(); numel(&out)];
    for_each_row(&out, &sa, &sb, |oa, ob, oo, len, da, db| {
        let dst = &mut data[oo..oo + len];
        for (i, d) in dst.iter_mut().enumerate() {
            *d = f(a.data[oa + i * da], b.data[ob + i * db]);
        }
    });
    Tensor { shape: out, data }
}

/// Sums `t` down to `shape`, undoing a broadcast.
pub fn reduce_to_shape<E: Element>(t: &Tensor<E>, shape: &[usize]) -> Tensor<E> {
    if t.shape == shape {
        return t.clone();
    }
    let out = &t.shape;
    let st = broadcast_strides(shape, out);
    let dense = strides(out);
    let mut acc = vec![E::zero(); numel(shape)];
    for_each_row(out, &st, &dense, |o_target, o_src, _, len, d_target, d_src| {
        if d_target == 0 {
            let mut s = E::zero();
            for i in 0..len {
                s += t.data[o_src + i * d_src];
            }
            acc[o_target] += s;
        } else {
            for i in 0..len {
                acc[o_target + i * d_target] += t.data[o_src + i * d_src];
            }
        }
    });
    Tensor { shape: shape.to_vec(), data: acc }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes_follow_numpy_rules() {
        assert_eq!(broadcast_shape(&[2, 3, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[1], &[5]), Some(vec![5]));
        assert_eq!(broadcast_shape(&[], &[2, 2]), Some(vec![2, 2]));
        assert_eq!(broadcast_shape(&[2, 3], &[4, 3, 2]), None);
    }

    #[test]
    fn zip_broadcast_matches_explicit_indexing() {
        let a = Tensor::<f64>::from_fn([2, 3, 4], |i| i as f64);
        let b = Tensor::<f64>::from_fn([3, 1], |i| 100.0 * i as f64);
        let c = zip_broadcast(&a, &b, |x, y| x + y);
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(c.at(&[i, j, k]), a.at(&[i, j, k]) + b.at(&[j, 0]));
                }
            }
        }
    }

    #[test]
    fn reduce_to_shape_is_adjoint_of_broadcast() {
        let g = Tensor::<f64>::from_fn([2, 3, 4], |i| (i as f64).sin());
        let r = reduce_to_shape(&g, &[1, 3, 1]);
        for j in 0..3 {
            let mut s = 0.0;
            for i in 0..2 {
                for k in 0..4 {
                    s += g.at(&[i, j, k]);
                }
            }
            assert!((r.at(&[0, j, 0]) - s).abs() < 1e-12);
        }
        let total = reduce_to_shape(&g, &[]);
        assert!((total.item() - g.sum()).abs() < 1e-12);
    }
}
