use crate::error::{invalid, mismatch, Result};
use crate::scalar::Scalar;
use crate::tape::{add_into, Op, Tape, Var};
use crate::tensor::Tensor;

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `src` (with `src_shape`) into permuted order: output axis `i` is
/// input axis `axes[i]`.
fn permute_data<T: Scalar>(src: &[T], src_shape: &[usize], axes: &[usize]) -> Vec<T> {
    let in_strides = strides(src_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| src_shape[a]).collect();
    let gather: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    let inner = rank - 1;
    loop {
        // innermost axis as a tight loop
        let st = gather[inner];
        for j in 0..out_shape[inner] {
            out.push(src[offset + j * st]);
        }
        // advance the outer odometer
        let mut ax = inner;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            offset += gather[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= gather[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

impl<T: Scalar> Tape<T> {
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn flatten_from(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(invalid("flatten", format!("axis {axis} out of range for {s:?}")));
        }
        let mut shape = s[..axis].to_vec();
        shape.push(s[axis..].iter().product());
        self.reshape(a, &shape)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(invalid("permute", format!("axes {axes:?} are not a permutation for {shape:?}")));
        }
        let data = permute_data(self.data(a), &shape, axes);
        let out_shape: Vec<usize> = axes.iter().map(|&x| shape[x]).collect();
        let out = Tensor::from_vec(out_shape, data)?;
        Ok(self.push(out, Op::Permute { input: a, axes: axes.to_vec() }, &[a]))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(invalid("transpose", "rank < 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(a, &axes)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, inner) = outer_inner(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.data(v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::from_vec(shape, data)?;
        Ok(self.push(out, Op::Concat { inputs: inputs.to_vec(), axis }, inputs))
    }

    /// The `len` slices starting at `start` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(invalid("narrow", format!("range {start}..{} on axis {axis} of {s:?}", start + len)));
        }
        let (outer, inner) = outer_inner(&s, axis);
        let src = self.data(a);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let out = Tensor::from_vec(shape, data)?;
        Ok(self.push(out, Op::Narrow { input: a, axis, start }, &[a]))
    }

    /// Tiles a tensor whose leading extent is 1 to leading extent `times`.
    pub fn repeat_leading(&mut self, a: Var, times: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.first() != Some(&1) || times == 0 {
            return Err(invalid("repeat_leading", format!("needs leading extent 1, got {s:?}")));
        }
        let src = self.data(a);
        let mut data = Vec::with_capacity(src.len() * times);
        for _ in 0..times {
            data.extend_from_slice(src);
        }
        let mut shape = s;
        shape[0] = times;
        let out = Tensor::from_vec(shape, data)?;
        Ok(self.push(out, Op::RepeatLeading { input: a, times }, &[a]))
    }
}

pub(crate) fn permute_backward<T: Scalar>(
    tape: &Tape<T>,
    input: Var,
    axes: &[usize],
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let in_shape = tape.shape(input);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let mut inverse = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inverse[a] = i;
    }
    let back = permute_data(g, &out_shape, &inverse);
    tape.accumulate(grads, input, |d| add_into(d, &back));
}

pub(crate) fn concat_backward<T: Scalar>(
    tape: &Tape<T>,
    inputs: &[Var],
    axis: usize,
    out: usize,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let out_shape = tape.nodes[out].value.shape();
    let (outer, inner) = outer_inner(out_shape, axis);
    let row = out_shape[axis] * inner;
    let mut offset = 0;
    for &v in inputs {
        let len = tape.shape(v)[axis] * inner;
        tape.accumulate(grads, v, |d| {
            for o in 0..outer {
                add_into(&mut d[o * len..(o + 1) * len], &g[o * row + offset..o * row + offset + len]);
            }
        });
        offset += len;
    }
}

pub(crate) fn narrow_backward<T: Scalar>(
    tape: &Tape<T>,
    input: Var,
    axis: usize,
    start: usize,
    out: usize,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let in_shape = tape.shape(input);
    let len = tape.nodes[out].value.shape()[axis];
    let (outer, inner) = outer_inner(in_shape, axis);
    let full = in_shape[axis];
    tape.accumulate(grads, input, |d| {
        for o in 0..outer {
            let base = (o * full + start) * inner;
            add_into(&mut d[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_matches_index_formula() {
        let shape = [2usize, 3, 4];
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let out = permute_data(&data, &shape, &[2, 0, 1]);
        // out[k][i][j] = in[i][j][k]
        for k in 0..4 {
            for i in 0..2 {
                for j in 0..3 {
                    assert_eq!(out[k * 6 + i * 3 + j], data[i * 12 + j * 4 + k]);
                }
            }
        }
    }

    #[test]
    fn reshape_round_trip() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_vec([2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = tape.reshape(x, &[3, 2]).unwrap();
        let z = tape.reshape(y, &[2, 3]).unwrap();
        assert_eq!(tape.value(x), tape.value(z));
        assert!(tape.reshape(x, &[4]).is_err());
    }

    #[test]
    fn concat_and_narrow_invert() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_vec([2, 1, 2], vec![1.0, 2.0, 5.0, 6.0]).unwrap());
        let b = tape.constant(Tensor::from_vec([2, 2, 2], vec![3.0, 4.0, 3.5, 4.5, 7.0, 8.0, 7.5, 8.5]).unwrap());
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 3, 2]);
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 3.5, 4.5, 5.0, 6.0, 7.0, 8.0, 7.5, 8.5]);
        let back = tape.narrow(c, 1, 1, 2).unwrap();
        assert_eq!(tape.value(back), tape.value(b));
        let bad = tape.constant(Tensor::zeros([3, 1, 2]));
        assert!(tape.concat(&[a, bad], 1).is_err());
    }
}
