//! Objectives and the regularized Taylor model.
//!
//! At an expansion point `x` with value `f`, gradient `g` and (for second
//! order) Hessian `B`, the order-`q` Taylor model of `f(x + s)` is
//!
//! ```text
//! T(s) = f + g's            (q = 1)
//! T(s) = f + g's + s'Bs/2   (q = 2)
//! ```
//!
//! and the step is computed from the regularized model
//! `T(s) + lambda / (q + 1) * |s|^(q + 1)`.

use serde::{Deserialize, Serialize};

use crate::error::check_dim;
use crate::linalg::{dot, norm2, SymBand};
use crate::{Error, Result, Scalar};

/// Order of the Taylor model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Order {
    /// Gradient model with quadratic regularization (AR1).
    First,
    /// Quadratic model with cubic regularization (AR2 / ARC).
    Second,
}

impl Order {
    pub fn q(self) -> u32 {
        match self {
            Order::First => 1,
            Order::Second => 2,
        }
    }

    pub fn from_q(q: u32) -> Result<Self> {
        match q {
            1 => Ok(Order::First),
            2 => Ok(Order::Second),
            _ => Err(Error::invalid(format!("model order q must be 1 or 2, got {q}"))),
        }
    }
}

/// A smooth function with first and second derivatives at one level.
pub trait Objective<T: Scalar>: Send + Sync {
    fn dim(&self) -> usize;

    fn value(&self, x: &[T]) -> Result<T>;

    fn gradient(&self, x: &[T]) -> Result<Vec<T>>;

    /// Symmetric Hessian. Only needed for second-order models.
    fn hessian(&self, _x: &[T]) -> Result<SymBand<T>> {
        Err(Error::invalid("objective does not provide a Hessian"))
    }

    /// `f(x + s) - f(x)` computed without forming the two values, when the
    /// objective can do so to working precision. `None` means the caller
    /// subtracts values.
    fn value_change(&self, _x: &[T], _s: &[T]) -> Option<Result<T>> {
        None
    }
}

impl<T: Scalar, O: Objective<T> + ?Sized> Objective<T> for &O {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn value(&self, x: &[T]) -> Result<T> {
        (**self).value(x)
    }
    fn gradient(&self, x: &[T]) -> Result<Vec<T>> {
        (**self).gradient(x)
    }
    fn hessian(&self, x: &[T]) -> Result<SymBand<T>> {
        (**self).hessian(x)
    }
    fn value_change(&self, x: &[T], s: &[T]) -> Option<Result<T>> {
        (**self).value_change(x, s)
    }
}

impl<T: Scalar, O: Objective<T> + ?Sized> Objective<T> for Box<O> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn value(&self, x: &[T]) -> Result<T> {
        (**self).value(x)
    }
    fn gradient(&self, x: &[T]) -> Result<Vec<T>> {
        (**self).gradient(x)
    }
    fn hessian(&self, x: &[T]) -> Result<SymBand<T>> {
        (**self).hessian(x)
    }
    fn value_change(&self, x: &[T], s: &[T]) -> Option<Result<T>> {
        (**self).value_change(x, s)
    }
}

type ValueFn<T> = Box<dyn Fn(&[T]) -> T + Send + Sync>;
type GradFn<T> = Box<dyn Fn(&[T]) -> Vec<T> + Send + Sync>;
type HessFn<T> = Box<dyn Fn(&[T]) -> SymBand<T> + Send + Sync>;

/// Closure-backed [`Objective`].
pub struct ObjectiveOracle<T> {
    dim: usize,
    value: ValueFn<T>,
    grad: GradFn<T>,
    hess: Option<HessFn<T>>,
}

impl<T: Scalar> ObjectiveOracle<T> {
    pub fn new(
        dim: usize,
        value: impl Fn(&[T]) -> T + Send + Sync + 'static,
        grad: impl Fn(&[T]) -> Vec<T> + Send + Sync + 'static,
    ) -> Self {
        ObjectiveOracle { dim, value: Box::new(value), grad: Box::new(grad), hess: None }
    }

    pub fn with_hessian(mut self, hess: impl Fn(&[T]) -> SymBand<T> + Send + Sync + 'static) -> Self {
        self.hess = Some(Box::new(hess));
        self
    }
}

impl<T: Scalar> Objective<T> for ObjectiveOracle<T> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, x: &[T]) -> Result<T> {
        check_dim(self.dim, x.len())?;
        let v = (self.value)(x);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::ObjectiveOverflow(format!("non-finite value {v}")))
        }
    }

    fn gradient(&self, x: &[T]) -> Result<Vec<T>> {
        check_dim(self.dim, x.len())?;
        Ok((self.grad)(x))
    }

    fn hessian(&self, x: &[T]) -> Result<SymBand<T>> {
        check_dim(self.dim, x.len())?;
        match &self.hess {
            Some(h) => Ok(h(x)),
            None => Err(Error::invalid("objective does not provide a Hessian")),
        }
    }
}

/// Order-`q` Taylor model at an expansion point, with its regularization weight.
#[derive(Debug, Clone)]
pub struct RegularizedModel<T> {
    base_f: T,
    g: Vec<T>,
    hess: Option<SymBand<T>>,
    lambda: T,
    order: Order,
}

impl<T: Scalar> RegularizedModel<T> {
    pub fn first_order(base_f: T, g: Vec<T>, lambda: T) -> Result<Self> {
        Self::validate_lambda(lambda)?;
        Ok(RegularizedModel { base_f, g, hess: None, lambda, order: Order::First })
    }

    pub fn second_order(base_f: T, g: Vec<T>, hess: SymBand<T>, lambda: T) -> Result<Self> {
        Self::validate_lambda(lambda)?;
        check_dim(g.len(), hess.dim())?;
        Ok(RegularizedModel { base_f, g, hess: Some(hess), lambda, order: Order::Second })
    }

    /// Builds the model of `obj` at `x`.
    pub fn of_objective(obj: &dyn Objective<T>, x: &[T], lambda: T, order: Order) -> Result<Self> {
        let f = obj.value(x)?;
        let g = obj.gradient(x)?;
        match order {
            Order::First => Self::first_order(f, g, lambda),
            Order::Second => Self::second_order(f, g, obj.hessian(x)?, lambda),
        }
    }

    fn validate_lambda(lambda: T) -> Result<()> {
        if lambda > T::zero() && lambda.is_finite() {
            Ok(())
        } else {
            Err(Error::invalid(format!("regularization weight must be positive, got {lambda}")))
        }
    }

    pub fn base_value(&self) -> T {
        self.base_f
    }

    pub fn gradient(&self) -> &[T] {
        &self.g
    }

    pub fn hessian(&self) -> Option<&SymBand<T>> {
        self.hess.as_ref()
    }

    pub fn lambda(&self) -> T {
        self.lambda
    }

    pub fn order(&self) -> Order {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    /// Taylor model value, without the regularization term.
    pub fn taylor_value(&self, s: &[T]) -> Result<T> {
        check_dim(self.g.len(), s.len())?;
        let mut v = self.base_f + dot(&self.g, s);
        if let Some(b) = &self.hess {
            v += T::lit(0.5) * b.quad_form(s);
        }
        Ok(v)
    }

    /// `taylor_value(s) + lambda / (q + 1) * |s|^(q + 1)`
    pub fn regularized_value(&self, s: &[T]) -> Result<T> {
        let t = self.taylor_value(s)?;
        let q1 = self.order.q() + 1;
        Ok(t + self.lambda / T::lit(q1 as f64) * norm2(s).powi(q1 as i32))
    }

    /// `g (+ B s) + lambda |s|^(q - 1) s`
    pub fn regularized_grad(&self, s: &[T]) -> Result<Vec<T>> {
        check_dim(self.g.len(), s.len())?;
        let mut out = match &self.hess {
            Some(b) => {
                let bs = b.matvec(s);
                self.g.iter().zip(bs).map(|(&g, b)| g + b).collect()
            }
            None => self.g.clone(),
        };
        let w = self.lambda * norm2(s).powi(self.order.q() as i32 - 1);
        for (o, &si) in out.iter_mut().zip(s) {
            *o += w * si;
        }
        Ok(out)
    }

    /// Decrease of the Taylor model from `0` to `s`.
    pub fn model_decrease(&self, s: &[T]) -> Result<T> {
        Ok(self.base_f - self.taylor_value(s)?)
    }
}
