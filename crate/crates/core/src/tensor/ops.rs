//! Elementwise arithmetic, reductions and shape manipulation.

use super::{Backward, Tensor};
use crate::error::{Error, Result};

/// Backward rule given as a closure.
pub(crate) struct FnBackward<F> {
    pub name: &'static str,
    pub f: F,
}

impl<F> Backward for FnBackward<F>
where
    F: Fn(&[Tensor], &Tensor, &[bool]) -> Result<Vec<Option<Tensor>>> + Send + Sync,
{
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, inputs: &[Tensor], grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        (self.f)(inputs, grad, needs)
    }
}

pub(crate) fn backward_fn<F>(name: &'static str, f: F) -> FnBackward<F>
where
    F: Fn(&[Tensor], &Tensor, &[bool]) -> Result<Vec<Option<Tensor>>> + Send + Sync,
{
    FnBackward { name, f }
}

/// The elementwise operations available through [`Tensor::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Sigmoid,
    Relu,
    Square,
}

fn broadcast_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if b.is_scalar() {
        Ok(a.shape().to_vec())
    } else if a.is_scalar() {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::Shape(format!(
            "{op}: shapes {:?} and {:?} are neither equal nor scalar-broadcastable",
            a.shape(),
            b.shape()
        )))
    }
}

fn zip_broadcast(a: &[f64], b: &[f64], n: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    match (a.len(), b.len()) {
        (x, y) if x == y => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        (1, _) => b.iter().map(|&y| f(a[0], y)).collect(),
        (_, 1) => a.iter().map(|&x| f(x, b[0])).collect(),
        _ => unreachable!("shapes validated; n = {n}"),
    }
}

/// Reduces a broadcast gradient back to `shape` (identity unless `shape`
/// was the scalar side of a broadcast).
fn sum_to(g: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if g.shape() == shape {
        Ok(g.clone())
    } else {
        g.sum().reshape(shape)
    }
}

fn map_unary(
    x: &Tensor,
    f: impl Fn(f64) -> f64,
    op: impl Backward + 'static,
) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    Tensor::from_op(data, x.shape().to_vec(), &[x], op)
}

impl Tensor {
    /// Dispatches one of the listed elementwise operations. Binary kinds
    /// require `other`.
    pub fn elementwise(&self, op: ElementwiseOp, other: Option<&Tensor>) -> Result<Tensor> {
        let rhs = || {
            other.ok_or_else(|| Error::Shape(format!("{op:?} needs a second operand")))
        };
        Ok(match op {
            ElementwiseOp::Add => self.add(rhs()?)?,
            ElementwiseOp::Sub => self.sub(rhs()?)?,
            ElementwiseOp::Mul => self.mul(rhs()?)?,
            ElementwiseOp::Div => self.div(rhs()?)?,
            ElementwiseOp::Neg => self.neg(),
            ElementwiseOp::Exp => self.exp(),
            ElementwiseOp::Log => self.log()?,
            ElementwiseOp::Sigmoid => self.sigmoid(),
            ElementwiseOp::Relu => self.relu(),
            ElementwiseOp::Square => self.square(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let shape = broadcast_shape(self, other, "add")?;
        let data = zip_broadcast(&self.data(), &other.data(), shape.len(), |a, b| a + b);
        Ok(Tensor::from_op(
            data,
            shape,
            &[self, other],
            backward_fn("add", |inp, g, needs| {
                Ok(vec![
                    needs[0].then(|| sum_to(g, inp[0].shape())).transpose()?,
                    needs[1].then(|| sum_to(g, inp[1].shape())).transpose()?,
                ])
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let shape = broadcast_shape(self, other, "sub")?;
        let data = zip_broadcast(&self.data(), &other.data(), shape.len(), |a, b| a - b);
        Ok(Tensor::from_op(
            data,
            shape,
            &[self, other],
            backward_fn("sub", |inp, g, needs| {
                Ok(vec![
                    needs[0].then(|| sum_to(g, inp[0].shape())).transpose()?,
                    needs[1].then(|| sum_to(&g.neg(), inp[1].shape())).transpose()?,
                ])
            }),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let shape = broadcast_shape(self, other, "mul")?;
        let data = zip_broadcast(&self.data(), &other.data(), shape.len(), |a, b| a * b);
        Ok(Tensor::from_op(
            data,
            shape,
            &[self, other],
            backward_fn("mul", |inp, g, needs| {
                Ok(vec![
                    needs[0].then(|| sum_to(&g.mul(&inp[1])?, inp[0].shape())).transpose()?,
                    needs[1].then(|| sum_to(&g.mul(&inp[0])?, inp[1].shape())).transpose()?,
                ])
            }),
        ))
    }

    /// Elementwise quotient. A zero anywhere in the divisor is an error.
    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        let shape = broadcast_shape(self, other, "div")?;
        if let Some(i) = other.data().iter().position(|&v| v == 0.0) {
            return Err(Error::Domain(format!("div: divisor is zero at flat index {i}")));
        }
        let data = zip_broadcast(&self.data(), &other.data(), shape.len(), |a, b| a / b);
        Ok(Tensor::from_op(
            data,
            shape,
            &[self, other],
            backward_fn("div", |inp, g, needs| {
                let (a, b) = (&inp[0], &inp[1]);
                Ok(vec![
                    needs[0].then(|| sum_to(&g.div(b)?, a.shape())).transpose()?,
                    needs[1]
                        .then(|| sum_to(&g.mul(a)?.div(&b.square())?.neg(), b.shape()))
                        .transpose()?,
                ])
            }),
        ))
    }

    pub fn neg(&self) -> Tensor {
        map_unary(self, |v| -v, backward_fn("neg", |_, g, _| Ok(vec![Some(g.neg())])))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        map_unary(
            self,
            |v| v * factor,
            backward_fn("scale", move |_, g, _| Ok(vec![Some(g.scale(factor))])),
        )
    }

    pub fn add_scalar(&self, offset: f64) -> Tensor {
        map_unary(
            self,
            |v| v + offset,
            backward_fn("add_scalar", |_, g, _| Ok(vec![Some(g.clone())])),
        )
    }

    pub fn exp(&self) -> Tensor {
        map_unary(
            self,
            f64::exp,
            backward_fn("exp", |inp, g, _| Ok(vec![Some(g.mul(&inp[0].exp())?)])),
        )
    }

    /// Natural logarithm; non-positive inputs are an error.
    pub fn log(&self) -> Result<Tensor> {
        if let Some(i) = self.data().iter().position(|&v| !(v > 0.0)) {
            return Err(Error::Domain(format!(
                "log: non-positive input {} at flat index {i}",
                self.data()[i]
            )));
        }
        Ok(map_unary(
            self,
            f64::ln,
            backward_fn("log", |inp, g, _| Ok(vec![Some(g.div(&inp[0])?)])),
        ))
    }

    /// Square root; negative inputs are an error. The derivative at zero is
    /// unbounded, so callers keep arguments strictly positive.
    pub fn sqrt(&self) -> Result<Tensor> {
        if let Some(i) = self.data().iter().position(|&v| !(v >= 0.0)) {
            return Err(Error::Domain(format!(
                "sqrt: negative input {} at flat index {i}",
                self.data()[i]
            )));
        }
        Ok(map_unary(
            self,
            f64::sqrt,
            backward_fn("sqrt", |inp, g, _| {
                Ok(vec![Some(g.div(&inp[0].sqrt()?.scale(2.0))?)])
            }),
        ))
    }

    pub fn sigmoid(&self) -> Tensor {
        map_unary(
            self,
            sigmoid,
            backward_fn("sigmoid", |inp, g, _| {
                let s = inp[0].sigmoid();
                let ds = s.mul(&s.neg().add_scalar(1.0))?;
                Ok(vec![Some(g.mul(&ds)?)])
            }),
        )
    }

    pub fn tanh(&self) -> Tensor {
        map_unary(
            self,
            f64::tanh,
            backward_fn("tanh", |inp, g, _| {
                let t = inp[0].tanh();
                Ok(vec![Some(g.mul(&t.square().neg().add_scalar(1.0))?)])
            }),
        )
    }

    pub fn sin(&self) -> Tensor {
        map_unary(
            self,
            f64::sin,
            backward_fn("sin", |inp, g, _| Ok(vec![Some(g.mul(&inp[0].cos())?)])),
        )
    }

    pub fn cos(&self) -> Tensor {
        map_unary(
            self,
            f64::cos,
            backward_fn("cos", |inp, g, _| Ok(vec![Some(g.mul(&inp[0].sin())?.neg())])),
        )
    }

    /// `log(1 + exp(x))`, evaluated without overflow.
    pub fn softplus(&self) -> Tensor {
        map_unary(
            self,
            softplus,
            backward_fn("softplus", |inp, g, _| Ok(vec![Some(g.mul(&inp[0].sigmoid())?)])),
        )
    }

    pub fn relu(&self) -> Tensor {
        self.leaky_relu(0.0)
    }

    /// `max(x, 0) + slope * min(x, 0)`. The derivative at 0 is taken as the
    /// negative-side slope.
    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        map_unary(
            self,
            move |v| if v > 0.0 { v } else { slope * v },
            backward_fn("leaky_relu", move |inp, g, _| {
                let mask: Vec<f64> = inp[0]
                    .data()
                    .iter()
                    .map(|&v| if v > 0.0 { 1.0 } else { slope })
                    .collect();
                let mask = Tensor::from_parts(mask, inp[0].shape().to_vec(), false, None);
                Ok(vec![Some(g.mul(&mask)?)])
            }),
        )
    }

    pub fn square(&self) -> Tensor {
        map_unary(
            self,
            |v| v * v,
            backward_fn("square", |inp, g, _| Ok(vec![Some(g.mul(&inp[0])?.scale(2.0))])),
        )
    }

    /// Sum of all elements as a scalar of shape `[]`.
    pub fn sum(&self) -> Tensor {
        let total: f64 = self.data().iter().sum();
        Tensor::from_op(
            vec![total],
            Vec::new(),
            &[self],
            backward_fn("sum", |inp, g, _| Ok(vec![Some(g.expand(inp[0].shape())?)])),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Broadcasts a single-element tensor to `shape`.
    pub fn expand(&self, shape: &[usize]) -> Result<Tensor> {
        if !self.is_scalar() {
            return Err(Error::Shape(format!("expand of non-scalar shape {:?}", self.shape())));
        }
        let n = shape.iter().product();
        let v = self.data()[0];
        let own = self.shape().to_vec();
        Ok(Tensor::from_op(
            vec![v; n],
            shape.to_vec(),
            &[self],
            backward_fn("expand", move |_, g, _| Ok(vec![Some(g.sum().reshape(&own)?)])),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {shape:?} changes element count",
                self.shape()
            )));
        }
        let own = self.shape().to_vec();
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            &[self],
            backward_fn("reshape", move |_, g, _| Ok(vec![Some(g.reshape(&own)?)])),
        ))
    }

    /// Flattened view as a 1-D tensor.
    pub fn flatten(&self) -> Tensor {
        self.reshape(&[self.numel()]).expect("same element count")
    }

    /// Contiguous range `[start, start + len)` of the flattened tensor.
    pub fn slice(&self, start: usize, len: usize) -> Result<Tensor> {
        let n = self.numel();
        if len == 0 || start + len > n {
            return Err(Error::Shape(format!(
                "slice [{start}, {}) out of range for {n} elements",
                start + len
            )));
        }
        let data = self.data()[start..start + len].to_vec();
        let own = self.shape().to_vec();
        Ok(Tensor::from_op(
            data,
            vec![len],
            &[self],
            backward_fn("slice", move |_, g, _| Ok(vec![Some(g.pad_into(start, &own)?)])),
        ))
    }

    /// Adjoint of [`Tensor::slice`]: places this 1-D tensor at `start` in a
    /// zero tensor of `shape`.
    fn pad_into(&self, start: usize, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let len = self.numel();
        if start + len > n {
            return Err(Error::Shape("pad_into out of range".into()));
        }
        let mut data = vec![0.0; n];
        data[start..start + len].copy_from_slice(&self.data());
        Ok(Tensor::from_op(
            data,
            shape.to_vec(),
            &[self],
            backward_fn("pad_into", move |_, g, _| Ok(vec![Some(g.slice(start, len)?)])),
        ))
    }

    /// Concatenates the flattened contents of `parts` into one 1-D tensor.
    pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero tensors".into()));
        }
        let mut data = Vec::new();
        let mut offsets = Vec::with_capacity(parts.len());
        for p in parts {
            offsets.push((data.len(), p.numel(), p.shape().to_vec()));
            data.extend_from_slice(&p.data());
        }
        let n = data.len();
        Ok(Tensor::from_op(
            data,
            vec![n],
            parts,
            backward_fn("concat", move |_, g, needs| {
                offsets
                    .iter()
                    .zip(needs)
                    .map(|((start, len, shape), &need)| {
                        need.then(|| g.slice(*start, *len)?.reshape(shape)).transpose()
                    })
                    .collect()
            }),
        ))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_gradients;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(v.to_vec(), &[v.len()]).unwrap()
    }

    #[test]
    fn mul_values() {
        let y = t(&[1.0, 2.0, 3.0]).mul(&t(&[4.0, 5.0, 6.0])).unwrap();
        assert_eq!(y.to_vec(), vec![4.0, 10.0, 18.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        assert_eq!(t(&[0.0]).sigmoid().to_vec(), vec![0.5]);
    }

    #[test]
    fn mul_gradient_is_other_operand() {
        let a = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let b = t(&[3.0, 4.0]);
        a.mul(&b).unwrap().sum().backward(false).unwrap();
        assert_eq!(a.grad().unwrap().to_vec(), vec![3.0, 4.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let err = t(&[1.0, 2.0]).add(&t(&[1.0, 2.0, 3.0])).unwrap_err().to_string();
        assert!(err.contains("[2]") && err.contains("[3]"), "{err}");
    }

    #[test]
    fn scalar_broadcast_both_sides() {
        let s = Tensor::param(vec![2.0], &[1]).unwrap();
        let v = t(&[1.0, 2.0, 3.0]);
        let y = s.mul(&v).unwrap();
        assert_eq!(y.shape(), &[3]);
        y.sum().backward(false).unwrap();
        assert_eq!(s.grad().unwrap().to_vec(), vec![6.0]);
        assert_eq!(v.sub(&Tensor::scalar(1.0)).unwrap().to_vec(), vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn invalid_domains_error() {
        assert!(t(&[1.0, 0.0]).log().is_err());
        assert!(t(&[-1.0]).log().is_err());
        assert!(t(&[1.0]).div(&t(&[0.0])).is_err());
        assert!(t(&[-1.0]).sqrt().is_err());
    }

    #[test]
    fn elementwise_dispatch() {
        let a = t(&[1.0, 2.0]);
        let b = t(&[3.0, 5.0]);
        assert_eq!(a.elementwise(ElementwiseOp::Sub, Some(&b)).unwrap().to_vec(), vec![-2.0, -3.0]);
        assert!(a.elementwise(ElementwiseOp::Div, None).is_err());
        assert_eq!(a.elementwise(ElementwiseOp::Square, None).unwrap().to_vec(), vec![1.0, 4.0]);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(1000.0) - 1000.0).abs() < 1e-12);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
        assert!((sigmoid(-800.0)).is_finite());
    }

    #[test]
    fn slice_and_concat_round_trip_gradients() {
        let a = Tensor::param(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let b = Tensor::param(vec![4.0, 5.0], &[1, 2]).unwrap();
        let c = Tensor::concat(&[&a, &b]).unwrap();
        let w = t(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        c.slice(1, 4).unwrap().mul(&w.slice(0, 4).unwrap()).unwrap().sum().backward(false).unwrap();
        assert_eq!(a.grad().unwrap().to_vec(), vec![0.0, 1.0, 2.0]);
        assert_eq!(b.grad().unwrap().to_vec(), vec![3.0, 4.0]);
        assert_eq!(b.grad().unwrap().shape(), &[1, 2]);
    }

    #[test]
    fn unary_ops_match_finite_differences() {
        let ops: Vec<(&str, Box<dyn Fn(&Tensor) -> Result<Tensor>>)> = vec![
            ("exp", Box::new(|x: &Tensor| Ok(x.exp()))),
            ("sigmoid", Box::new(|x: &Tensor| Ok(x.sigmoid()))),
            ("tanh", Box::new(|x: &Tensor| Ok(x.tanh()))),
            ("sin", Box::new(|x: &Tensor| Ok(x.sin()))),
            ("cos", Box::new(|x: &Tensor| Ok(x.cos()))),
            ("softplus", Box::new(|x: &Tensor| Ok(x.softplus()))),
            ("square", Box::new(|x: &Tensor| Ok(x.square()))),
            ("log", Box::new(|x: &Tensor| x.square().add_scalar(0.5).log())),
            ("sqrt", Box::new(|x: &Tensor| x.square().add_scalar(0.5).sqrt())),
            ("leaky", Box::new(|x: &Tensor| Ok(x.leaky_relu(0.2)))),
        ];
        let x0 = vec![-1.3, -0.4, 0.35, 1.7];
        for (name, op) in ops {
            let report = check_gradients(&[x0.clone()], &[&[4]], |xs| {
                let w = t(&[0.3, -1.1, 0.7, 2.0]);
                Ok(op(&xs[0])?.mul(&w)?.sum())
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-6, "{name}: {report:?}");
        }
    }
}
