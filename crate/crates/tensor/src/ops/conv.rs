//! Convolution, transposed convolution, pooling and nearest upsampling on
//! `[N, C, H, W]` tensors. Convolution is cross-correlation (no kernel flip).

use crate::error::{invalid, mismatch, Result};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

pub fn conv2d_output_size(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || size + 2 * pad < kernel {
        return None;
    }
    Some((size + 2 * pad - kernel) / stride + 1)
}

pub fn conv_transpose2d_output_size(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || size == 0 {
        return None;
    }
    ((size - 1) * stride + kernel).checked_sub(2 * pad).filter(|&s| s > 0)
}

/// Sliding-window geometry of a convolution over one `[C, H, W]` image.
#[derive(Debug, Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Input coordinate for output index `o` and kernel offset `k` along one
    /// axis, `None` when it lands in the padding.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        (o * self.stride + k).checked_sub(self.pad).filter(|&i| i < extent)
    }

    fn im2col<T: Scalar>(&self, img: &[T], cols: &mut [T]) {
        let n = self.col_cols();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((c * self.kh + ki) * self.kw + kj) * n;
                    for oy in 0..self.oh {
                        let dst = &mut cols[row + oy * self.ow..row + (oy + 1) * self.ow];
                        match self.src(oy, ki, self.h) {
                            None => dst.iter_mut().for_each(|v| *v = T::zero()),
                            Some(iy) => {
                                let line = &img[(c * self.h + iy) * self.w..(c * self.h + iy + 1) * self.w];
                                for (ox, d) in dst.iter_mut().enumerate() {
                                    *d = self.src(ox, kj, self.w).map_or(T::zero(), |ix| line[ix]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Geometry::im2col`]: scatter-adds columns into the image.
    fn col2im<T: Scalar>(&self, cols: &[T], img: &mut [T]) {
        let n = self.col_cols();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((c * self.kh + ki) * self.kw + kj) * n;
                    for oy in 0..self.oh {
                        let Some(iy) = self.src(oy, ki, self.h) else { continue };
                        let src = &cols[row + oy * self.ow..row + (oy + 1) * self.ow];
                        let line = &mut img[(c * self.h + iy) * self.w..(c * self.h + iy + 1) * self.w];
                        for (ox, &v) in src.iter().enumerate() {
                            if let Some(ix) = self.src(ox, kj, self.w) {
                                line[ix] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn add_channel_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias.iter().cycle()) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad<T: Scalar>(g: &[T], channels: usize, plane: usize, db: &mut [T]) {
    for (i, chunk) in g.chunks(plane).enumerate() {
        db[i % channels] += chunk.iter().copied().sum::<T>();
    }
}

impl<T: Scalar> Tape<T> {
    fn conv_operands(&self, op: &'static str, x: Var, w: Var, b: Option<Var>, transposed: bool) -> Result<(usize, usize)> {
        self.check_rank(op, x, 4)?;
        self.check_rank(op, w, 4)?;
        let (xs, ws) = (self.shape(x), self.shape(w));
        // conv: w = [Cout, Cin, kh, kw]; transposed: w = [Cin, Cout, kh, kw]
        let (w_in, w_out) = if transposed { (ws[0], ws[1]) } else { (ws[1], ws[0]) };
        if xs[1] != w_in {
            return Err(mismatch(op, xs, ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [w_out] {
                return Err(mismatch(op, ws, self.shape(b)));
            }
        }
        Ok((w_in, w_out))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (cin, cout) = self.conv_operands("conv2d", x, w, b, false)?;
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let size_err = || invalid("conv2d", format!("kernel {ws:?} with stride {stride}, pad {pad} does not fit input {xs:?}"));
        let oh = conv2d_output_size(xs[2], ws[2], stride, pad).ok_or_else(size_err)?;
        let ow = conv2d_output_size(xs[3], ws[3], stride, pad).ok_or_else(size_err)?;
        let geo = Geometry { c: cin, h: xs[2], w: xs[3], kh: ws[2], kw: ws[3], stride, pad, oh, ow };
        let n = xs[0];
        let (rows, cols_n) = (geo.col_rows(), geo.col_cols());
        let in_plane = cin * xs[2] * xs[3];
        let out_plane = cout * cols_n;
        let mut out = vec![T::zero(); n * out_plane];
        let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * cols_n] };
        let (xd, wd) = (self.data(x), self.data(w));
        for i in 0..n {
            let img = &xd[i * in_plane..(i + 1) * in_plane];
            let src: &[T] = if geo.is_pointwise() {
                img
            } else {
                geo.im2col(img, &mut cols);
                &cols
            };
            gemm(T::one(), wd, MatRef::new(cout, rows), src, MatRef::new(rows, cols_n), T::zero(), &mut out[i * out_plane..(i + 1) * out_plane]);
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.data(b), cols_n);
        }
        let out = Tensor::from_vec(vec![n, cout, oh, ow], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, &inputs))
    }

    /// Transposed convolution: the adjoint of [`Tape::conv2d`] with the same
    /// stride and padding. `w` has shape `[Cin, Cout, kh, kw]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.conv_transpose2d_padded(x, w, b, stride, pad, 0)
    }

    /// [`Tape::conv_transpose2d`] with `output_padding` extra rows and columns
    /// at the far edge, selecting among the input sizes that a strided
    /// convolution maps onto the same output size.
    pub fn conv_transpose2d_padded(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, output_padding: usize) -> Result<Var> {
        let (cin, cout) = self.conv_operands("conv_transpose2d", x, w, b, true)?;
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if output_padding >= stride.max(1) {
            return Err(invalid("conv_transpose2d", format!("output padding {output_padding} must be below stride {stride}")));
        }
        let size_err = || invalid("conv_transpose2d", format!("kernel {ws:?} with stride {stride}, pad {pad} gives empty output for {xs:?}"));
        let size = |n: usize, k: usize| conv_transpose2d_output_size(n, k + output_padding, stride, pad).ok_or_else(size_err);
        let (oh, ow) = (size(xs[2], ws[2])?, size(xs[3], ws[3])?);
        let geo = Geometry { c: cout, h: oh, w: ow, kh: ws[2], kw: ws[3], stride, pad, oh: xs[2], ow: xs[3] };
        let n = xs[0];
        let (rows, cols_n) = (geo.col_rows(), geo.col_cols());
        let in_plane = cin * cols_n;
        let out_plane = cout * oh * ow;
        let mut out = vec![T::zero(); n * out_plane];
        let mut cols = vec![T::zero(); rows * cols_n];
        let (xd, wd) = (self.data(x), self.data(w));
        for i in 0..n {
            gemm(T::one(), wd, MatRef::new(cin, rows).t(), &xd[i * in_plane..(i + 1) * in_plane], MatRef::new(cin, cols_n), T::zero(), &mut cols);
            geo.col2im(&cols, &mut out[i * out_plane..(i + 1) * out_plane]);
        }
        if let Some(b) = b {
            add_channel_bias(&mut out, self.data(b), oh * ow);
        }
        let out = Tensor::from_vec(vec![n, cout, oh, ow], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(out, Op::ConvTranspose2d { x, w, b, stride, pad }, &inputs))
    }

    /// Mean over `window x window` cells, no padding.
    pub fn avg_pool2d(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        self.check_rank("avg_pool2d", x, 4)?;
        let xs = self.shape(x).to_vec();
        if window == 0 || stride == 0 || window > xs[2] || window > xs[3] {
            return Err(invalid("avg_pool2d", format!("window {window} does not fit input {xs:?}")));
        }
        let (h, w) = (xs[2], xs[3]);
        let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
        let inv = T::one() / T::from_usize(window * window).unwrap();
        let src = self.data(x);
        let mut out = Vec::with_capacity(xs[0] * xs[1] * oh * ow);
        for plane in src.chunks(h * w) {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = T::zero();
                    for dy in 0..window {
                        let row = (oy * stride + dy) * w + ox * stride;
                        s += plane[row..row + window].iter().copied().sum::<T>();
                    }
                    out.push(s * inv);
                }
            }
        }
        let out = Tensor::from_vec(vec![xs[0], xs[1], oh, ow], out)?;
        Ok(self.push(out, Op::AvgPool2d { x, window, stride }, &[x]))
    }

    /// Nearest-neighbour spatial expansion by an integer `factor`.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        self.check_rank("upsample_nearest", x, 4)?;
        if factor == 0 {
            return Err(invalid("upsample_nearest", "factor must be positive"));
        }
        let xs = self.shape(x).to_vec();
        let (h, w) = (xs[2], xs[3]);
        let (oh, ow) = (h * factor, w * factor);
        let src = self.data(x);
        let mut out = Vec::with_capacity(src.len() * factor * factor);
        for plane in src.chunks(h * w) {
            for oy in 0..oh {
                let line = &plane[(oy / factor) * w..(oy / factor + 1) * w];
                for ox in 0..ow {
                    out.push(line[ox / factor]);
                }
            }
        }
        let out = Tensor::from_vec(vec![xs[0], xs[1], oh, ow], out)?;
        Ok(self.push(out, Op::UpsampleNearest { x, factor }, &[x]))
    }
}

pub(crate) fn conv2d_backward<T: Scalar>(tape: &Tape<T>, out: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let Op::Conv2d { x, w, b, stride, pad } = tape.nodes[out].op else { unreachable!() };
    let (xs, ws) = (tape.shape(x), tape.shape(w));
    let os = tape.nodes[out].value.shape();
    let (cin, cout) = (xs[1], ws[0]);
    let geo = Geometry { c: cin, h: xs[2], w: xs[3], kh: ws[2], kw: ws[3], stride, pad, oh: os[2], ow: os[3] };
    let n = xs[0];
    let (rows, cols_n) = (geo.col_rows(), geo.col_cols());
    let in_plane = cin * xs[2] * xs[3];
    let out_plane = cout * cols_n;
    let (xd, wd) = (tape.data(x), tape.data(w));
    let pointwise = geo.is_pointwise();

    if tape.requires_grad(w) {
        let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); rows * cols_n] };
        tape.accumulate(grads, w, |dw| {
            for i in 0..n {
                let img = &xd[i * in_plane..(i + 1) * in_plane];
                let src: &[T] = if pointwise {
                    img
                } else {
                    geo.im2col(img, &mut cols);
                    &cols
                };
                gemm(T::one(), &g[i * out_plane..], MatRef::new(cout, cols_n), src, MatRef::new(rows, cols_n).t(), T::one(), dw);
            }
        });
    }
    if tape.requires_grad(x) {
        let mut dcols = vec![T::zero(); rows * cols_n];
        tape.accumulate(grads, x, |dx| {
            for i in 0..n {
                let dimg = &mut dx[i * in_plane..(i + 1) * in_plane];
                if pointwise {
                    gemm(T::one(), wd, MatRef::new(cout, rows).t(), &g[i * out_plane..], MatRef::new(cout, cols_n), T::one(), dimg);
                } else {
                    gemm(T::one(), wd, MatRef::new(cout, rows).t(), &g[i * out_plane..], MatRef::new(cout, cols_n), T::zero(), &mut dcols);
                    geo.col2im(&dcols, dimg);
                }
            }
        });
    }
    if let Some(b) = b {
        tape.accumulate(grads, b, |db| bias_grad(g, cout, cols_n, db));
    }
}

pub(crate) fn conv_transpose2d_backward<T: Scalar>(tape: &Tape<T>, out: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let Op::ConvTranspose2d { x, w, b, stride, pad } = tape.nodes[out].op else { unreachable!() };
    let (xs, ws) = (tape.shape(x), tape.shape(w));
    let os = tape.nodes[out].value.shape();
    let (cin, cout) = (xs[1], ws[1]);
    let geo = Geometry { c: cout, h: os[2], w: os[3], kh: ws[2], kw: ws[3], stride, pad, oh: xs[2], ow: xs[3] };
    let n = xs[0];
    let (rows, cols_n) = (geo.col_rows(), geo.col_cols());
    let in_plane = cin * cols_n;
    let out_plane = cout * os[2] * os[3];
    let (xd, wd) = (tape.data(x), tape.data(w));
    let needs = (tape.requires_grad(x), tape.requires_grad(w));
    if needs.0 || needs.1 {
        let mut dcols_all = vec![T::zero(); n * rows * cols_n];
        for (i, dcols) in dcols_all.chunks_mut(rows * cols_n).enumerate() {
            geo.im2col(&g[i * out_plane..(i + 1) * out_plane], dcols);
        }
        tape.accumulate(grads, x, |dx| {
            for i in 0..n {
                gemm(T::one(), wd, MatRef::new(cin, rows), &dcols_all[i * rows * cols_n..], MatRef::new(rows, cols_n), T::one(), &mut dx[i * in_plane..(i + 1) * in_plane]);
            }
        });
        tape.accumulate(grads, w, |dw| {
            for i in 0..n {
                gemm(T::one(), &xd[i * in_plane..], MatRef::new(cin, cols_n), &dcols_all[i * rows * cols_n..], MatRef::new(rows, cols_n).t(), T::one(), dw);
            }
        });
    }
    if let Some(b) = b {
        tape.accumulate(grads, b, |db| bias_grad(g, cout, os[2] * os[3], db));
    }
}

pub(crate) fn avg_pool2d_backward<T: Scalar>(tape: &Tape<T>, out: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let Op::AvgPool2d { x, window, stride } = tape.nodes[out].op else { unreachable!() };
    let xs = tape.shape(x);
    let os = tape.nodes[out].value.shape();
    let (h, w, oh, ow) = (xs[2], xs[3], os[2], os[3]);
    let inv = T::one() / T::from_usize(window * window).unwrap();
    tape.accumulate(grads, x, |dx| {
        for (plane, gp) in dx.chunks_mut(h * w).zip(g.chunks(oh * ow)) {
            for oy in 0..oh {
                for ox in 0..ow {
                    let v = gp[oy * ow + ox] * inv;
                    for dy in 0..window {
                        let row = (oy * stride + dy) * w + ox * stride;
                        plane[row..row + window].iter_mut().for_each(|d| *d += v);
                    }
                }
            }
        }
    });
}

pub(crate) fn upsample_nearest_backward<T: Scalar>(tape: &Tape<T>, out: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let Op::UpsampleNearest { x, factor } = tape.nodes[out].op else { unreachable!() };
    let xs = tape.shape(x);
    let (h, w) = (xs[2], xs[3]);
    let (oh, ow) = (h * factor, w * factor);
    tape.accumulate(grads, x, |dx| {
        for (plane, gp) in dx.chunks_mut(h * w).zip(g.chunks(oh * ow)) {
            for oy in 0..oh {
                for ox in 0..ow {
                    plane[(oy / factor) * w + ox / factor] += gp[oy * ow + ox];
                }
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn pointwise_kernel_scales() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.constant(t(&[1, 1, 1, 1], &[2.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn ones_kernel_sums() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones([1, 1, 3, 3]));
        let w = tape.constant(Tensor::ones([1, 1, 3, 3]));
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);
    }

    #[test]
    fn channel_mismatch_names_shapes() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([1, 2, 4, 4]));
        let w = tape.constant(Tensor::zeros([1, 3, 3, 3]));
        let err = tape.conv2d(x, w, None, 1, 0).unwrap_err().to_string();
        assert!(err.contains("[1, 2, 4, 4]") && err.contains("[1, 3, 3, 3]"), "{err}");
        let big = tape.constant(Tensor::zeros([1, 2, 5, 5]));
        assert!(tape.conv2d(x, big, None, 1, 0).is_err());
    }

    #[test]
    fn transpose_broadcasts_single_pixel() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 1, 1], &[3.0]));
        let w = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.conv_transpose2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 6.0, 9.0, 12.0]);

        let x2 = tape.constant(Tensor::ones([1, 1, 2, 2]));
        let y2 = tape.conv_transpose2d(x2, w, None, 2, 0).unwrap();
        assert_eq!(tape.shape(y2), &[1, 1, 4, 4]);
    }

    #[test]
    fn pooling_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.avg_pool2d(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5]);
        let c = tape.constant(Tensor::full([2, 3, 4, 4], 1.75));
        let p = tape.avg_pool2d(c, 2, 2).unwrap();
        assert!(tape.value(p).data().iter().all(|&v| (v - 1.75).abs() < 1e-15));
        assert!(tape.avg_pool2d(x, 3, 1).is_err());
    }

    #[test]
    fn nearest_upsample_repeats() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 1, 2], &[1.0, 2.0]));
        let y = tape.upsample_nearest(x, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }
}
