//! Scalar differentiation engine.
//!
//! Two mechanisms live here:
//!
//! * [`Dual`] numbers for forward-mode derivatives. `Dual<Dual<f64>>` gives
//!   second derivatives by nesting, and `Dual<Var>` gives mixed
//!   input/parameter derivatives.
//! * A reverse-mode [`Tape`] of scalar operations, used by
//!   [`param_gradient`] to differentiate with respect to a parameter vector.
//!
//! Code that should be differentiable is written once against the [`Scalar`]
//! trait and then evaluated at whichever number type is needed.

use std::cell::RefCell;
use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("non-finite derivative value {value} at x = {at}")]
    NonFinite { value: f64, at: f64 },
    #[error("non-finite function value {0}")]
    NonFiniteValue(f64),
    #[error("non-finite gradient entry {value} at parameter index {index}")]
    NonFiniteGradient { index: usize, value: f64 },
}

/// Number type that differentiable code is generic over.
pub trait Scalar:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn constant(x: f64) -> Self;
    /// Primal value, dropping all derivative information.
    fn value(&self) -> f64;
    fn tanh(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn sqrt(self) -> Self;
    fn powi(self, n: i32) -> Self;

    fn zero() -> Self {
        Self::constant(0.0)
    }

    fn one() -> Self {
        Self::constant(1.0)
    }

    fn scale(self, k: f64) -> Self {
        self * Self::constant(k)
    }
}

impl Scalar for f64 {
    #[inline]
    fn constant(x: f64) -> Self {
        x
    }
    #[inline]
    fn value(&self) -> f64 {
        *self
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
}

/// Truncated first-order Taylor number `re + eps·ε` with `ε² = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual<T> {
    pub re: T,
    pub eps: T,
}

impl<T: Scalar> Dual<T> {
    pub fn new(re: T, eps: T) -> Self {
        Dual { re, eps }
    }

    /// Independent variable: unit tangent.
    pub fn variable(x: T) -> Self {
        Dual {
            re: x,
            eps: T::one(),
        }
    }

    pub fn constant_of(x: T) -> Self {
        Dual {
            re: x,
            eps: T::zero(),
        }
    }
}

impl<T: Scalar> Add for Dual<T> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        Dual::new(self.re + rhs.re, self.eps + rhs.eps)
    }
}

impl<T: Scalar> Sub for Dual<T> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        Dual::new(self.re - rhs.re, self.eps - rhs.eps)
    }
}

impl<T: Scalar> Mul for Dual<T> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        Dual::new(self.re * rhs.re, self.re * rhs.eps + self.eps * rhs.re)
    }
}

impl<T: Scalar> Div for Dual<T> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        let re = self.re / rhs.re;
        Dual::new(re, (self.eps - re * rhs.eps) / rhs.re)
    }
}

impl<T: Scalar> Neg for Dual<T> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Dual::new(-self.re, -self.eps)
    }
}

impl<T: Scalar> Scalar for Dual<T> {
    fn constant(x: f64) -> Self {
        Dual::new(T::constant(x), T::zero())
    }
    fn value(&self) -> f64 {
        self.re.value()
    }
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        Dual::new(t, self.eps * (T::one() - t * t))
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual::new(e, self.eps * e)
    }
    fn ln(self) -> Self {
        Dual::new(self.re.ln(), self.eps / self.re)
    }
    fn sin(self) -> Self {
        Dual::new(self.re.sin(), self.eps * self.re.cos())
    }
    fn cos(self) -> Self {
        Dual::new(self.re.cos(), -(self.eps * self.re.sin()))
    }
    fn sqrt(self) -> Self {
        let r = self.re.sqrt();
        Dual::new(r, self.eps / r.scale(2.0))
    }
    fn powi(self, n: i32) -> Self {
        if n == 0 {
            return Dual::constant(1.0);
        }
        Dual::new(
            self.re.powi(n),
            self.eps * self.re.powi(n - 1).scale(n as f64),
        )
    }
}

/// A scalar function that can be evaluated at any [`Scalar`] type.
///
/// Closures cannot be generic over their argument type, so differentiable
/// one-dimensional functions implement this trait instead.
pub trait ScalarFn {
    fn eval<T: Scalar>(&self, x: T) -> T;
}

/// Derivative of `f` evaluated at a scalar of any type.
pub fn derivative<T: Scalar, F: ScalarFn + ?Sized>(f: &F, x: T) -> T {
    f.eval(Dual::variable(x)).eps
}

/// `x ↦ f'(x)` as a [`ScalarFn`], so it can be differentiated again.
pub struct Derivative<'a, F: ?Sized>(pub &'a F);

impl<F: ScalarFn + ?Sized> ScalarFn for Derivative<'_, F> {
    fn eval<T: Scalar>(&self, x: T) -> T {
        derivative(self.0, x)
    }
}

fn finite(value: f64, at: f64) -> Result<f64, AutodiffError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(AutodiffError::NonFinite { value, at })
    }
}

/// `df/dx` at `x`.
pub fn derive1<F: ScalarFn + ?Sized>(f: &F, x: f64) -> Result<f64, AutodiffError> {
    finite(derivative(f, x), x)
}

/// `d²f/dx²` at `x`, by differentiating [`Derivative`] once more.
pub fn derive2<F: ScalarFn + ?Sized>(f: &F, x: f64) -> Result<f64, AutodiffError> {
    derive1(&Derivative(f), x)
}

/// Value, first and second derivative from a single nested evaluation.
///
/// The second derivative is bit-identical to [`derive2`]: both evaluate `f`
/// at the same `Dual<Dual<f64>>` seed.
pub fn jet2<F: ScalarFn + ?Sized>(f: &F, x: f64) -> Result<[f64; 3], AutodiffError> {
    let seed = Dual::new(Dual::variable(x), Dual::new(1.0, 0.0));
    let out = f.eval(seed);
    let v = out.re.re;
    if !v.is_finite() {
        return Err(AutodiffError::NonFiniteValue(v));
    }
    Ok([v, finite(out.re.eps, x)?, finite(out.eps.eps, x)?])
}

const NO_PARENT: u32 = u32::MAX;

#[derive(Debug, Clone, Copy)]
struct Node {
    parents: [u32; 2],
    partials: [f64; 2],
}

/// Record of one reverse-mode evaluation.
///
/// A tape lives for exactly one function evaluation and is never shared
/// between threads (`RefCell` makes it `!Sync`).
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Tape {
            nodes: RefCell::new(Vec::with_capacity(n)),
        }
    }

    /// New independent input.
    pub fn var(&self, value: f64) -> Var<'_> {
        let index = self.push(Node {
            parents: [NO_PARENT; 2],
            partials: [0.0; 2],
        });
        Var {
            tape: Some(self),
            index,
            value,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> u32 {
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len() as u32;
        nodes.push(node);
        index
    }

    /// Adjoints of every recorded node with respect to `output`.
    pub fn adjoints(&self, output: Var<'_>) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        let mut adj = vec![0.0; nodes.len()];
        if output.tape.is_none() {
            return adj;
        }
        adj[output.index as usize] = 1.0;
        for k in (0..=output.index as usize).rev() {
            let a = adj[k];
            if a == 0.0 {
                continue;
            }
            let node = nodes[k];
            for (p, d) in node.parents.iter().zip(node.partials) {
                if *p != NO_PARENT {
                    adj[*p as usize] += a * d;
                }
            }
        }
        adj
    }
}

/// Scalar recorded on a [`Tape`]. Constants carry no tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: Option<&'t Tape>,
    index: u32,
    value: f64,
}

impl Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.tape {
            Some(_) => write!(f, "Var(#{}: {})", self.index, self.value),
            None => write!(f, "Var(const {})", self.value),
        }
    }
}

impl<'t> Var<'t> {
    fn unary(self, value: f64, partial: f64) -> Self {
        match self.tape {
            None => Var::constant(value),
            Some(tape) => {
                let index = tape.push(Node {
                    parents: [self.index, NO_PARENT],
                    partials: [partial, 0.0],
                });
                Var {
                    tape: Some(tape),
                    index,
                    value,
                }
            }
        }
    }

    fn binary(self, rhs: Self, value: f64, d_lhs: f64, d_rhs: f64) -> Self {
        let tape = match (self.tape, rhs.tape) {
            (None, None) => return Var::constant(value),
            (Some(t), _) | (None, Some(t)) => t,
        };
        let lhs_index = if self.tape.is_some() {
            self.index
        } else {
            NO_PARENT
        };
        let rhs_index = if rhs.tape.is_some() {
            rhs.index
        } else {
            NO_PARENT
        };
        let index = tape.push(Node {
            parents: [lhs_index, rhs_index],
            partials: [d_lhs, d_rhs],
        });
        Var {
            tape: Some(tape),
            index,
            value,
        }
    }
}

impl Add for Var<'_> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        self.binary(rhs, self.value + rhs.value, 1.0, 1.0)
    }
}

impl Sub for Var<'_> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        self.binary(rhs, self.value - rhs.value, 1.0, -1.0)
    }
}

impl Mul for Var<'_> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        self.binary(rhs, self.value * rhs.value, rhs.value, self.value)
    }
}

impl Div for Var<'_> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let q = self.value / rhs.value;
        self.binary(rhs, q, 1.0 / rhs.value, -q / rhs.value)
    }
}

impl Neg for Var<'_> {
    type Output = Self;
    fn neg(self) -> Self {
        self.unary(-self.value, -1.0)
    }
}

impl Scalar for Var<'_> {
    fn constant(x: f64) -> Self {
        Var {
            tape: None,
            index: 0,
            value: x,
        }
    }
    fn value(&self) -> f64 {
        self.value
    }
    fn tanh(self) -> Self {
        let t = self.value.tanh();
        self.unary(t, 1.0 - t * t)
    }
    fn exp(self) -> Self {
        let e = self.value.exp();
        self.unary(e, e)
    }
    fn ln(self) -> Self {
        self.unary(self.value.ln(), 1.0 / self.value)
    }
    fn sin(self) -> Self {
        self.unary(self.value.sin(), self.value.cos())
    }
    fn cos(self) -> Self {
        self.unary(self.value.cos(), -self.value.sin())
    }
    fn sqrt(self) -> Self {
        let r = self.value.sqrt();
        self.unary(r, 0.5 / r)
    }
    fn powi(self, n: i32) -> Self {
        if n == 0 {
            return Var::constant(1.0);
        }
        self.unary(self.value.powi(n), n as f64 * self.value.powi(n - 1))
    }
}

/// Loss value and its gradient with respect to a parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    pub loss_value: f64,
    pub gradient: Vec<f64>,
}

/// Value and gradient of `f` at `params` by reverse accumulation.
///
/// `f` sees the parameters as tape variables; anything it builds from them is
/// recorded on a tape that is dropped when this call returns.
pub fn param_gradient<F>(f: F, params: &[f64]) -> Result<ParamGradient, AutodiffError>
where
    F: for<'t> Fn(&[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::with_capacity(params.len() * 4);
    let vars: Vec<Var<'_>> = params.iter().map(|&p| tape.var(p)).collect();
    let out = f(&vars);
    if !out.value.is_finite() {
        return Err(AutodiffError::NonFiniteValue(out.value));
    }
    let adj = tape.adjoints(out);
    let gradient = adj[..params.len()].to_vec();
    if let Some((index, &value)) = gradient.iter().enumerate().find(|(_, g)| !g.is_finite()) {
        return Err(AutodiffError::NonFiniteGradient { index, value });
    }
    Ok(ParamGradient {
        loss_value: out.value,
        gradient,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Square;
    impl ScalarFn for Square {
        fn eval<T: Scalar>(&self, x: T) -> T {
            x * x
        }
    }

    struct Const(f64);
    impl ScalarFn for Const {
        fn eval<T: Scalar>(&self, _x: T) -> T {
            T::constant(self.0)
        }
    }

    struct Sine;
    impl ScalarFn for Sine {
        fn eval<T: Scalar>(&self, x: T) -> T {
            x.sin()
        }
    }

    struct Log;
    impl ScalarFn for Log {
        fn eval<T: Scalar>(&self, x: T) -> T {
            x.ln()
        }
    }

    #[test]
    fn square_and_constant() {
        assert_eq!(derive1(&Square, 3.0).unwrap(), 6.0);
        assert_eq!(derive1(&Const(7.5), -2.0).unwrap(), 0.0);
        for x in [-3.0, 0.0, 1.25, 10.0] {
            assert_eq!(derive2(&Square, x).unwrap(), 2.0);
        }
        assert_eq!(derive2(&Sine, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn non_finite_derivative_is_an_error() {
        assert!(matches!(
            derive1(&Log, 0.0),
            Err(AutodiffError::NonFinite { .. })
        ));
    }

    #[test]
    fn jet2_matches_derive2_bitwise() {
        for x in [0.3, 1.7, -2.2] {
            let [_, d1, d2] = jet2(&Sine, x).unwrap();
            assert_eq!(d1.to_bits(), derive1(&Sine, x).unwrap().to_bits());
            assert_eq!(d2.to_bits(), derive2(&Sine, x).unwrap().to_bits());
        }
    }

    #[test]
    fn zero_tangent_dual_behaves_like_real() {
        let a = Dual::constant_of(1.3);
        let b = Dual::constant_of(0.4);
        let r = ((a * b).tanh() / (a + b.exp())).sqrt();
        let plain = ((1.3f64 * 0.4).tanh() / (1.3 + 0.4f64.exp())).sqrt();
        assert_eq!(r.re, plain);
        assert_eq!(r.eps, 0.0);
    }

    #[test]
    fn quadratic_param_gradient() {
        let g = param_gradient(|p| p[0] * p[0] + p[1] * p[1], &[1.0, 2.0]).unwrap();
        assert_eq!(g.loss_value, 5.0);
        assert_eq!(g.gradient, vec![2.0, 4.0]);
    }

    #[test]
    fn independent_param_gradient_is_zero() {
        let g = param_gradient(|_p| Var::constant(3.0), &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(g.loss_value, 3.0);
        assert_eq!(g.gradient, vec![0.0; 3]);
    }

    #[test]
    fn non_finite_gradient_reports_index() {
        let err = param_gradient(|p| p[0] + p[1].sqrt(), &[1.0, 0.0]).unwrap_err();
        assert!(matches!(
            err,
            AutodiffError::NonFiniteGradient { index: 1, .. }
        ));
    }

    #[test]
    fn shared_subexpressions_accumulate() {
        // f = (a*b) * (a*b) with the product reused
        let g = param_gradient(
            |p| {
                let ab = p[0] * p[1];
                ab * ab
            },
            &[2.0, 3.0],
        )
        .unwrap();
        assert_eq!(g.loss_value, 36.0);
        assert_eq!(g.gradient, vec![36.0, 24.0]);
    }

    #[test]
    fn forward_over_reverse_mixed_partial() {
        // d/dp of d/dx (p * x^3) = 3 x^2
        let x = 1.5;
        let g = param_gradient(
            |p| {
                let xd = Dual::variable(Var::constant(x));
                let pd = Dual::constant_of(p[0]);
                (pd * xd * xd * xd).eps
            },
            &[0.7],
        )
        .unwrap();
        assert!((g.gradient[0] - 3.0 * x * x).abs() < 1e-14);
    }
}
