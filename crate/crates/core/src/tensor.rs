//! Dense row-major tensors and the numeric kernels the autodiff tape is
//! built from.

use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: &[usize], data: Vec<S>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "tensor data length {} does not match shape {:?}", data.len(), shape);
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![S::zero(); n] }
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: S) -> Self {
        Tensor { shape: Vec::new(), data: vec![value] }
    }

    pub fn vector(data: Vec<S>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = S::one();
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.data.len(), "cannot reshape {:?} into {:?}", self.shape, shape);
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| f(*v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Self {
        assert_eq!(self.shape, other.shape, "elementwise shape mismatch");
        Tensor { shape: self.shape.clone(), data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect() }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "accumulate shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scaled_add_assign(&mut self, alpha: S, other: &Self) {
        assert_eq!(self.shape, other.shape, "accumulate shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * *b;
        }
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> S {
        assert_eq!(self.data.len(), other.data.len());
        self.data.iter().zip(&other.data).map(|(a, b)| *a * *b).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected a matrix, got shape {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| T::from_f64_lossy(v.to_f64_lossy())).collect() }
    }

    pub fn transpose2(&self) -> Self {
        let (m, n) = self.dims2();
        let mut out = Self::zeros(&[n, m]);
        const B: usize = 16;
        for i0 in (0..m).step_by(B) {
            for j0 in (0..n).step_by(B) {
                for i in i0..(i0 + B).min(m) {
                    for j in j0..(j0 + B).min(n) {
                        out.data[j * m + i] = self.data[i * n + j];
                    }
                }
            }
        }
        out
    }

    pub fn matmul(&self, other: &Self) -> Self {
        let (m, k) = self.dims2();
        let (k2, n) = other.dims2();
        assert_eq!(k, k2, "matmul inner dimension mismatch {:?} x {:?}", self.shape, other.shape);
        let mut out = Self::zeros(&[m, n]);
        S::gemm(m, k, n, S::one(), &self.data, k as isize, 1, &other.data, n as isize, 1, S::zero(), &mut out.data, n as isize, 1);
        out
    }
}

/// Matrix operand view with optional transposition, for [`gemm_into`].
#[derive(Clone, Copy)]
pub struct MatRef<'a, S> {
    pub data: &'a [S],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, S: Scalar> MatRef<'a, S> {
    pub fn of(t: &'a Tensor<S>) -> Self {
        let (rows, cols) = t.dims2();
        MatRef { data: &t.data, rows, cols, transposed: false }
    }

    pub fn raw(data: &'a [S], rows: usize, cols: usize) -> Self {
        MatRef { data, rows, cols, transposed: false }
    }

    pub fn t(self) -> Self {
        MatRef { transposed: !self.transposed, ..self }
    }

    fn logical(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = beta * out + alpha * op(a) * op(b)`, `out` row-major `m x n`.
pub fn gemm_into<S: Scalar>(alpha: S, a: MatRef<'_, S>, b: MatRef<'_, S>, beta: S, out: &mut [S]) {
    let (m, k) = a.logical();
    let (k2, n) = b.logical();
    assert_eq!(k, k2, "gemm inner dimension mismatch");
    assert_eq!(out.len(), m * n, "gemm output size mismatch");
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    S::gemm(m, k, n, alpha, a.data, rsa, csa, b.data, rsb, csb, beta, out, n as isize, 1);
}

/// Convolution geometry for same-padded stride-1 square kernels.
#[derive(Clone, Copy, Debug)]
pub struct ConvShape {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl ConvShape {
    fn pad(&self) -> isize {
        (self.kernel / 2) as isize
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }
}

/// Unfold one `[C, H, W]` image into `[C*k*k, H*W]` patch columns (zero padding).
fn im2col<S: Scalar>(cs: &ConvShape, image: &[S], cols: &mut [S]) {
    let (h, w, k, pad) = (cs.height as isize, cs.width as isize, cs.kernel as isize, cs.pad());
    let plane = cs.plane();
    let mut row = 0;
    for c in 0..cs.in_ch {
        let src = &image[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for y in 0..h {
                    let sy = y + ky - pad;
                    let drow = &mut dst[(y * w) as usize..((y + 1) * w) as usize];
                    if sy < 0 || sy >= h {
                        drow.fill(S::zero());
                        continue;
                    }
                    let srow = &src[(sy * w) as usize..((sy + 1) * w) as usize];
                    for x in 0..w {
                        let sx = x + kx - pad;
                        drow[x as usize] = if sx < 0 || sx >= w { S::zero() } else { srow[sx as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add patch columns back onto the image.
fn col2im<S: Scalar>(cs: &ConvShape, cols: &[S], image: &mut [S]) {
    let (h, w, k, pad) = (cs.height as isize, cs.width as isize, cs.kernel as isize, cs.pad());
    let plane = cs.plane();
    let mut row = 0;
    for c in 0..cs.in_ch {
        let dst = &mut image[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let src = &cols[row * plane..(row + 1) * plane];
                for y in 0..h {
                    let sy = y + ky - pad;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x + kx - pad;
                        if sx >= 0 && sx < w {
                            dst[(sy * w + sx) as usize] += src[(y * w + x) as usize];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `[B, C, H, W] * [O, C, k, k] + [O] -> [B, O, H, W]`.
pub fn conv2d_forward<S: Scalar>(cs: &ConvShape, x: &[S], weight: &[S], bias: &[S]) -> Vec<S> {
    let plane = cs.plane();
    let mut out = vec![S::zero(); cs.batch * cs.out_ch * plane];
    let mut cols = vec![S::zero(); cs.col_rows() * plane];
    for b in 0..cs.batch {
        im2col(cs, &x[b * cs.in_ch * plane..(b + 1) * cs.in_ch * plane], &mut cols);
        let o = &mut out[b * cs.out_ch * plane..(b + 1) * cs.out_ch * plane];
        for (oc, chunk) in o.chunks_mut(plane).enumerate() {
            chunk.fill(bias[oc]);
        }
        gemm_into(S::one(), MatRef::raw(weight, cs.out_ch, cs.col_rows()), MatRef::raw(&cols, cs.col_rows(), plane), S::one(), o);
    }
    out
}

/// Accumulates input, weight and bias gradients of [`conv2d_forward`].
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<S: Scalar>(
    cs: &ConvShape,
    x: &[S],
    weight: &[S],
    grad_out: &[S],
    mut grad_x: Option<&mut [S]>,
    mut grad_w: Option<&mut [S]>,
    mut grad_b: Option<&mut [S]>,
) {
    let plane = cs.plane();
    let mut cols = vec![S::zero(); cs.col_rows() * plane];
    for b in 0..cs.batch {
        let g = &grad_out[b * cs.out_ch * plane..(b + 1) * cs.out_ch * plane];
        if let Some(gb) = grad_b.as_deref_mut() {
            for (oc, chunk) in g.chunks(plane).enumerate() {
                gb[oc] += chunk.iter().copied().sum();
            }
        }
        if let Some(gw) = grad_w.as_deref_mut() {
            im2col(cs, &x[b * cs.in_ch * plane..(b + 1) * cs.in_ch * plane], &mut cols);
            gemm_into(S::one(), MatRef::raw(g, cs.out_ch, plane), MatRef::raw(&cols, cs.col_rows(), plane).t(), S::one(), gw);
        }
        if let Some(gx) = grad_x.as_deref_mut() {
            gemm_into(S::one(), MatRef::raw(weight, cs.out_ch, cs.col_rows()).t(), MatRef::raw(g, cs.out_ch, plane), S::zero(), &mut cols);
            col2im(cs, &cols, &mut gx[b * cs.in_ch * plane..(b + 1) * cs.in_ch * plane]);
        }
    }
}

/// 2x2 max pooling over `[B, C, H, W]`; returns values and flat argmax indices.
pub fn maxpool2_forward<S: Scalar>(shape: &[usize], x: &[S]) -> (Vec<S>, Vec<u32>) {
    let (bc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    assert!(h % 2 == 0 && w % 2 == 0, "max pooling needs even spatial dims, got {h}x{w}");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(bc * oh * ow);
    let mut arg = Vec::with_capacity(bc * oh * ow);
    for p in 0..bc {
        let base = p * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

/// Nearest-neighbour x2 upsampling over `[B, C, H, W]`.
pub fn upsample2_forward<S: Scalar>(shape: &[usize], x: &[S]) -> Vec<S> {
    let (bc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![S::zero(); bc * oh * ow];
    for p in 0..bc {
        for y in 0..oh {
            for xx in 0..ow {
                out[p * oh * ow + y * ow + xx] = x[p * h * w + (y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<S: Scalar>(in_shape: &[usize], grad_out: &[S], grad_x: &mut [S]) {
    let (bc, h, w) = (in_shape[0] * in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (2 * h, 2 * w);
    for p in 0..bc {
        for y in 0..oh {
            for xx in 0..ow {
                grad_x[p * h * w + (y / 2) * w + xx / 2] += grad_out[p * oh * ow + y * ow + xx];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(cs: &ConvShape, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let (h, wd, k) = (cs.height as isize, cs.width as isize, cs.kernel as isize);
        let pad = k / 2;
        let mut out = vec![0.0; cs.batch * cs.out_ch * cs.plane()];
        for bi in 0..cs.batch {
            for o in 0..cs.out_ch {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = b[o];
                        for c in 0..cs.in_ch {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let (sy, sx) = (y + ky - pad, xx + kx - pad);
                                    if sy >= 0 && sy < h && sx >= 0 && sx < wd {
                                        let xv = x[((bi * cs.in_ch + c) as isize * h * wd + sy * wd + sx) as usize];
                                        let wv = w[((o * cs.in_ch + c) as isize * k * k + ky * k + kx) as usize];
                                        acc += xv * wv;
                                    }
                                }
                            }
                        }
                        out[((bi * cs.out_ch + o) as isize * h * wd + y * wd + xx) as usize] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_summation() {
        let cs = ConvShape { batch: 2, in_ch: 3, out_ch: 4, height: 5, width: 6, kernel: 3 };
        let x: Vec<f64> = (0..2 * 3 * 30).map(|i| ((i * 37 % 17) as f64 - 8.0) / 7.0).collect();
        let w: Vec<f64> = (0..4 * 3 * 9).map(|i| ((i * 13 % 11) as f64 - 5.0) / 5.0).collect();
        let b = vec![0.1, -0.2, 0.3, 0.0];
        let got = conv2d_forward(&cs, &x, &w, &b);
        let want = naive_conv(&cs, &x, &w, &b);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let cs = ConvShape { batch: 1, in_ch: 2, out_ch: 1, height: 4, width: 3, kernel: 3 };
        let x: Vec<f64> = (0..24).map(|i| (i as f64).sin()).collect();
        let c: Vec<f64> = (0..18 * 12).map(|i| (i as f64 * 0.7).cos()).collect();
        let mut cols = vec![0.0; 18 * 12];
        im2col(&cs, &x, &mut cols);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; 24];
        col2im(&cs, &c, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn pool_and_upsample_shapes() {
        let x: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let (p, arg) = maxpool2_forward(&[1, 1, 4, 4], &x);
        assert_eq!(p, vec![5.0, 7.0, 13.0, 15.0]);
        assert_eq!(arg, vec![5, 7, 13, 15]);
        let u = upsample2_forward(&[1, 1, 2, 2], &p);
        assert_eq!(u.len(), 16);
        assert_eq!(&u[..4], &[5.0, 5.0, 7.0, 7.0]);
        let mut g = vec![0.0; 4];
        upsample2_backward(&[1, 1, 2, 2], &[1.0; 16], &mut g);
        assert_eq!(g, vec![4.0; 4]);
    }

    #[test]
    fn gemm_into_transposes() {
        let a = Tensor::<f64>::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut out = vec![0.0; 4];
        gemm_into(1.0, MatRef::of(&a), MatRef::of(&a).t(), 0.0, &mut out);
        assert_eq!(out, vec![14.0, 32.0, 32.0, 77.0]);
        assert_eq!(a.transpose2().matmul(&a).data()[0], 17.0);
    }
}
