use crate::error::{invalid, mismatch, Result};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

/// How the batch axes of a matmul pair up.
struct BatchPlan {
    batch: usize,
    a_step: usize,
    b_step: usize,
    m: usize,
    p: usize,
    q: usize,
    out_shape: Vec<usize>,
}

fn plan(a: &[usize], b: &[usize]) -> Result<BatchPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch("matmul", a, b));
    }
    let (m, p) = (a[a.len() - 2], a[a.len() - 1]);
    let (p2, q) = (b[b.len() - 2], b[b.len() - 1]);
    if p != p2 {
        return Err(mismatch("matmul", a, b));
    }
    let (la, lb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    let (lead, a_step, b_step) = if la == lb {
        (la.to_vec(), m * p, p * q)
    } else if lb.is_empty() {
        (la.to_vec(), m * p, 0)
    } else if la.is_empty() {
        (lb.to_vec(), 0, p * q)
    } else {
        return Err(mismatch("matmul", a, b));
    };
    let batch = lead.iter().product();
    let mut out_shape = lead;
    out_shape.extend([m, q]);
    Ok(BatchPlan { batch, a_step, b_step, m, p, q, out_shape })
}

impl<T: Scalar> Tape<T> {
    /// Batched matrix product over the last two axes. Leading axes must be
    /// equal, or one operand must be a plain matrix shared by every batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let pl = plan(self.shape(a), self.shape(b))?;
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![T::zero(); pl.batch * pl.m * pl.q];
        for i in 0..pl.batch {
            gemm(
                T::one(),
                &ad[i * pl.a_step..],
                MatRef::new(pl.m, pl.p),
                &bd[i * pl.b_step..],
                MatRef::new(pl.p, pl.q),
                T::zero(),
                &mut out[i * pl.m * pl.q..(i + 1) * pl.m * pl.q],
            );
        }
        let out = Tensor::from_vec(pl.out_shape, out)?;
        Ok(self.push(out, Op::MatMul { a, b }, &[a, b]))
    }

    /// `x · wᵀ + b` over the last axis of `x`, with `w` of shape `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let k = *xs.last().ok_or_else(|| invalid("linear", "scalar input"))?;
        if ws.len() != 2 || ws[1] != k {
            return Err(mismatch("linear", &xs, &ws));
        }
        let m = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [m] {
                return Err(mismatch("linear", &ws, self.shape(b)));
            }
        }
        let rows = self.value(x).numel() / k;
        let mut out = vec![T::zero(); rows * m];
        if let Some(b) = b {
            let bd = self.data(b);
            for r in 0..rows {
                out[r * m..(r + 1) * m].copy_from_slice(bd);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(T::one(), self.data(x), MatRef::new(rows, k), self.data(w), MatRef::new(m, k).t(), beta, &mut out);
        let mut shape = xs;
        *shape.last_mut().unwrap() = m;
        let out = Tensor::from_vec(shape, out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(out, Op::Linear { x, w, b }, &inputs))
    }
}

pub(crate) fn matmul_backward<T: Scalar>(tape: &Tape<T>, a: Var, b: Var, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let pl = plan(tape.shape(a), tape.shape(b)).expect("validated in forward");
    let (ad, bd) = (tape.data(a), tape.data(b));
    let mq = pl.m * pl.q;
    tape.accumulate(grads, a, |d| {
        for i in 0..pl.batch {
            // dA += dC · Bᵀ
            let off = i * pl.a_step;
            gemm(
                T::one(),
                &g[i * mq..],
                MatRef::new(pl.m, pl.q),
                &bd[i * pl.b_step..],
                MatRef::new(pl.p, pl.q).t(),
                T::one(),
                &mut d[off..off + pl.m * pl.p],
            );
        }
    });
    tape.accumulate(grads, b, |d| {
        for i in 0..pl.batch {
            // dB += Aᵀ · dC
            let off = i * pl.b_step;
            gemm(
                T::one(),
                &ad[i * pl.a_step..],
                MatRef::new(pl.m, pl.p).t(),
                &g[i * mq..],
                MatRef::new(pl.m, pl.q),
                T::one(),
                &mut d[off..off + pl.p * pl.q],
            );
        }
    });
}

pub(crate) fn linear_backward<T: Scalar>(
    tape: &Tape<T>,
    x: Var,
    w: Var,
    b: Option<Var>,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let ws = tape.shape(w);
    let (m, k) = (ws[0], ws[1]);
    let rows = tape.value(x).numel() / k;
    let (xd, wd) = (tape.data(x), tape.data(w));
    tape.accumulate(grads, x, |d| {
        gemm(T::one(), g, MatRef::new(rows, m), wd, MatRef::new(m, k), T::one(), d);
    });
    tape.accumulate(grads, w, |d| {
        gemm(T::one(), g, MatRef::new(rows, m).t(), xd, MatRef::new(rows, k), T::one(), d);
    });
    if let Some(b) = b {
        tape.accumulate(grads, b, |d| {
            for r in 0..rows {
                for (d, &g) in d.iter_mut().zip(&g[r * m..(r + 1) * m]) {
                    *d += g;
                }
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn two_by_two_product() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn identity_and_zero() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3, 2], &[1.0, -2.0, 3.0, 0.5, 7.0, 1.0, 2.0, 2.0, 0.0, 1.0, -1.0, 4.0]));
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let c = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(c), tape.value(a));
        let z = tape.constant(Tensor::zeros([3, 3]));
        let zc = tape.matmul(z, a).unwrap();
        assert!(tape.value(zc).data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.shape(zc), &[2, 3, 2]);
    }

    #[test]
    fn inner_mismatch_rejected() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(crate::TensorError::ShapeMismatch { .. })));
        assert!(tape.linear(a, b, None).is_ok());
        let w = tape.constant(Tensor::zeros([4, 2]));
        assert!(tape.linear(a, w, None).is_err());
    }

    #[test]
    fn linear_matches_definition() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.0, 2.0]));
        let w = tape.constant(t(&[2, 3], &[0.5, 1.0, -1.0, 2.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2], &[0.25, -0.5]));
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5 + 2.0 - 3.0 + 0.25, 2.0 + 3.0 - 0.5, -0.5 - 2.0 + 0.25, -2.0 + 2.0 - 0.5]);
    }
}
