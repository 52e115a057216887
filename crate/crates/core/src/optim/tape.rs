//! Scalar reverse-mode tape.
//!
//! Hot kernels (compositing, BRDF, caches) carry hand-written vector-Jacobian
//! products; the tape glues scalar pieces together (loss composition, small
//! regularizers) and checks every intermediate for finiteness.

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::error::{Error, Result};
use crate::math::{sigmoid, softplus};

#[derive(Clone, Copy, Debug)]
struct Node {
    op: &'static str,
    value: f64,
    parents: [(usize, f64); 2],
    arity: u8,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&self, op: &'static str, value: f64, parents: &[(usize, f64)]) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        let mut p = [(0, 0.0); 2];
        p[..parents.len()].copy_from_slice(parents);
        nodes.push(Node { op, value, parents: p, arity: parents.len() as u8 });
        nodes.len() - 1
    }

    /// A leaf (parameter or constant input).
    pub fn var(&self, value: f64) -> Var<'_> {
        Var { tape: self, idx: self.push("input", value, &[]) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Gradients of `output` with respect to every node, indexed like the
    /// nodes. Fails on the first non-finite forward value, naming its op.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if let Some((i, n)) = nodes.iter().enumerate().find(|(_, n)| !n.value.is_finite()) {
            return Err(Error::numeric(n.op, format!("node {i} evaluated to {}", n.value)));
        }
        let mut adj = vec![0.0; nodes.len()];
        adj[output.idx] = 1.0;
        for i in (0..=output.idx).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let n = &nodes[i];
            for &(p, local) in &n.parents[..n.arity as usize] {
                adj[p] += a * local;
            }
        }
        Ok(Gradients { adj })
    }
}

#[derive(Clone, Debug)]
pub struct Gradients {
    adj: Vec<f64>,
}

impl Gradients {
    pub fn wrt(&self, v: Var<'_>) -> f64 {
        self.adj[v.idx]
    }
}

impl<'t> Var<'t> {
    pub fn value(self) -> f64 {
        self.tape.nodes.borrow()[self.idx].value
    }

    fn unary(self, op: &'static str, value: f64, local: f64) -> Var<'t> {
        Var { tape: self.tape, idx: self.tape.push(op, value, &[(self.idx, local)]) }
    }

    fn binary(self, o: Var<'t>, op: &'static str, value: f64, la: f64, lb: f64) -> Var<'t> {
        Var { tape: self.tape, idx: self.tape.push(op, value, &[(self.idx, la), (o.idx, lb)]) }
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        self.unary("scale", self.value() * k, k)
    }

    pub fn square(self) -> Var<'t> {
        let x = self.value();
        self.unary("square", x * x, 2.0 * x)
    }

    pub fn abs(self) -> Var<'t> {
        let x = self.value();
        self.unary("abs", x.abs(), if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
    }

    pub fn exp(self) -> Var<'t> {
        let e = self.value().exp();
        self.unary("exp", e, e)
    }

    pub fn ln(self) -> Var<'t> {
        let x = self.value();
        self.unary("ln", x.ln(), 1.0 / x)
    }

    pub fn sqrt(self) -> Var<'t> {
        let s = self.value().sqrt();
        self.unary("sqrt", s, 0.5 / s)
    }

    pub fn softplus(self) -> Var<'t> {
        let x = self.value();
        self.unary("softplus", softplus(x), sigmoid(x))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let s = sigmoid(self.value());
        self.unary("sigmoid", s, s * (1.0 - s))
    }

    /// Sum of many vars as one node chain.
    pub fn sum(tape: &'t Tape, vars: &[Var<'t>]) -> Var<'t> {
        vars.iter().fold(tape.var(0.0), |acc, &v| acc + v)
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, "add", self.value() + o.value(), 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, o: Var<'t>) -> Var<'t> {
        self.binary(o, "sub", self.value() - o.value(), 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, o: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), o.value());
        self.binary(o, "mul", a * b, b, a)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, o: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), o.value());
        self.binary(o, "div", a / b, 1.0 / b, -a / (b * b))
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let tape = Tape::new();
        let th = tape.var(3.0);
        let f = th.square();
        assert_eq!(tape.backward(f).unwrap().wrt(th), 6.0);
        let tape = Tape::new();
        let th = tape.var(3.0);
        let f = th * th;
        assert_eq!(tape.backward(f).unwrap().wrt(th), 6.0);
    }

    #[test]
    fn softplus_at_zero() {
        let tape = Tape::new();
        let th = tape.var(0.0);
        let f = th.softplus();
        assert_eq!(tape.backward(f).unwrap().wrt(th), 0.5);
    }

    #[test]
    fn composite_matches_finite_differences() {
        let f = |x: f64, y: f64| ((x * y).exp() + (x / y).abs()).ln() - y.sigmoid_ref().sqrt();
        trait S {
            fn sigmoid_ref(self) -> f64;
        }
        impl S for f64 {
            fn sigmoid_ref(self) -> f64 {
                sigmoid(self)
            }
        }
        let (x0, y0) = (0.3, -1.2);
        let tape = Tape::new();
        let (x, y) = (tape.var(x0), tape.var(y0));
        let out = ((x * y).exp() + (x / y).abs()).ln() - y.sigmoid().sqrt();
        assert!((out.value() - f(x0, y0)).abs() < 1e-14);
        let g = tape.backward(out).unwrap();
        let h = 1e-6;
        let fx = (f(x0 + h, y0) - f(x0 - h, y0)) / (2.0 * h);
        let fy = (f(x0, y0 + h) - f(x0, y0 - h)) / (2.0 * h);
        assert!((g.wrt(x) - fx).abs() < 1e-8);
        assert!((g.wrt(y) - fy).abs() < 1e-8);
    }

    #[test]
    fn untouched_inputs_get_zero() {
        let tape = Tape::new();
        let (a, b) = (tape.var(2.0), tape.var(5.0));
        let f = a.square();
        assert_eq!(tape.backward(f).unwrap().wrt(b), 0.0);
    }

    #[test]
    fn non_finite_is_flagged_with_op() {
        let tape = Tape::new();
        let z = tape.var(0.0);
        let f = z.ln() + tape.var(1.0);
        match tape.backward(f) {
            Err(Error::Numeric { op, .. }) => assert_eq!(op, "ln"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }
}
