use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// tanh approximation of GELU.
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::lit(SQRT_2_OVER_PI);
    let inner = c * (x + T::lit(GELU_CUBIC) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_derivative<T: Scalar>(x: T) -> T {
    let c = T::lit(SQRT_2_OVER_PI);
    let a = T::lit(GELU_CUBIC);
    let inner = c * (x + a * x * x * x);
    let th = inner.tanh();
    let sech2 = T::one() - th * th;
    T::lit(0.5) * (T::one() + th) + T::lit(0.5) * x * sech2 * c * (T::one() + T::lit(3.0) * a * x * x)
}

impl<T: Scalar> Tape<T> {
    fn zip_map(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, rec: Op<T>) -> Result<Var> {
        self.check_same_shape(op, a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, rec, &[a, b]))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, rec: Op<T>) -> Var {
        let out = self.value(a).map(f);
        self.push(out, rec, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu_scalar, Op::Gelu(a))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).numel()).unwrap();
        let s: T = self.data(a).iter().copied().sum();
        self.push(Tensor::scalar(s / n), Op::Mean(a), &[a])
    }

    /// Sum of `terms`, all of equal shape.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms.split_first().ok_or_else(|| invalid("add_all", "no terms"))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Mean of squared differences over all elements, accumulated in `f64`.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.check_same_shape("mse_loss", pred, target)?;
        let (p, t) = (self.data(pred), self.data(target));
        let s: f64 = p.iter().zip(t).map(|(&p, &t)| (p - t).to_f64().unwrap().powi(2)).sum();
        let mean = T::lit(s / p.len() as f64);
        Ok(self.push(Tensor::scalar(mean), Op::MseLoss { pred, target }, &[pred, target]))
    }
}

pub(crate) fn relu_backward<T: Scalar>(tape: &Tape<T>, a: Var, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let x = tape.data(a);
    tape.accumulate(grads, a, |d| {
        for ((d, &g), &x) in d.iter_mut().zip(g).zip(x) {
            if x > T::zero() {
                *d += g;
            }
        }
    });
}

pub(crate) fn gelu_backward<T: Scalar>(tape: &Tape<T>, a: Var, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let x = tape.data(a);
    tape.accumulate(grads, a, |d| {
        for ((d, &g), &x) in d.iter_mut().zip(g).zip(x) {
            *d += g * gelu_derivative(x);
        }
    });
}
