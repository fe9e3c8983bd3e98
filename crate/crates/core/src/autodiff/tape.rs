use std::cell::RefCell;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The primitive operations the tape knows how to differentiate.
///
/// Every variant has a local-gradient rule in [`Tape::backward`] and a
/// finite-difference check in the tests below.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    /// `[m,k]·[k] -> [m]` or `[m,k]·[k,n] -> [m,n]`.
    MatMul,
    Add,
    Sub,
    /// Elementwise product.
    Mul,
    Scale(f64),
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Sum,
    Mean,
    /// Concatenation of flattened inputs into one vector.
    Concat,
    /// Contiguous window of a flattened input.
    Slice { start: usize, len: usize },
    Clamp { lo: f64, hi: f64 },
}

#[derive(Debug)]
enum Record {
    Leaf,
    Constant,
    Op { kind: OpKind, inputs: Vec<Var> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    record: Record,
    requires_grad: bool,
}

/// Reverse-mode tape. Recording is single-threaded; build one tape per
/// sample when working in parallel.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar output with respect to every `requires_grad` leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient data for a leaf; panics if `var` is not a differentiable leaf.
    pub fn wrt(&self, var: Var) -> &[f64] {
        self.get(var).expect("no gradient recorded for this variable").data()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, record: Record, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, record, requires_grad });
        Var(nodes.len() - 1)
    }

    /// Registers an input. It is differentiable iff `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        self.push(tensor, Record::Leaf, rg)
    }

    /// Registers a differentiable input.
    pub fn param(&self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&self, tensor: Tensor) -> Var {
        self.push(tensor.with_requires_grad(false), Record::Constant, false)
    }

    pub fn value(&self, var: Var) -> Tensor {
        self.nodes.borrow()[var.0].value.clone()
    }

    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes.borrow()[var.0].value.item()
    }

    pub fn to_vec(&self, var: Var) -> Vec<f64> {
        self.nodes.borrow()[var.0].value.to_vec()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes.borrow()[var.0].requires_grad
    }

    /// Applies a primitive. The result is recorded as an operation when any
    /// input requires a gradient, otherwise as a constant.
    pub fn apply(&self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let (value, requires_grad) = {
            let nodes = self.nodes.borrow();
            let mut vals = Vec::with_capacity(inputs.len());
            for v in inputs {
                let node = nodes
                    .get(v.0)
                    .ok_or_else(|| Error::contract(format!("variable {} is not on this tape", v.0)))?;
                vals.push(&node.value);
            }
            let out = compute(&kind, &vals)?;
            (out, inputs.iter().any(|v| nodes[v.0].requires_grad))
        };
        if requires_grad {
            Ok(self.push(value, Record::Op { kind, inputs: inputs.to_vec() }, true))
        } else {
            Ok(self.push(value, Record::Constant, false))
        }
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }
    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Sub, &[a, b])
    }
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }
    pub fn scale(&self, a: Var, factor: f64) -> Result<Var> {
        self.apply(OpKind::Scale(factor), &[a])
    }
    pub fn tanh(&self, a: Var) -> Result<Var> {
        self.apply(OpKind::Tanh, &[a])
    }
    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sigmoid, &[a])
    }
    pub fn softplus(&self, a: Var) -> Result<Var> {
        self.apply(OpKind::Softplus, &[a])
    }
    pub fn exp(&self, a: Var) -> Result<Var> {
        self.apply(OpKind::Exp, &[a])
    }
    pub fn log(&self, a: Var) -> Result<Var> {
        self.apply(OpKind::Log, &[a])
    }
    pub fn sum(&self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sum, &[a])
    }
    pub fn mean(&self, a: Var) -> Result<Var> {
        self.apply(OpKind::Mean, &[a])
    }
    pub fn concat(&self, parts: &[Var]) -> Result<Var> {
        self.apply(OpKind::Concat, parts)
    }
    pub fn slice(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.apply(OpKind::Slice { start, len }, &[a])
    }
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.apply(OpKind::Clamp { lo, hi }, &[a])
    }

    /// `W·x + b`.
    pub fn affine(&self, weight: Var, x: Var, bias: Var) -> Result<Var> {
        let wx = self.matmul(weight, x)?;
        self.add(wx, bias)
    }

    /// `Σ c_i a_i` for a constant coefficient vector `c`.
    pub fn dot_const(&self, coeffs: &[f64], a: Var) -> Result<Var> {
        let c = self.constant(Tensor::vector(coeffs.to_vec())?);
        let prod = self.mul(c, a)?;
        self.sum(prod)
    }

    /// Recomputes every operation from the stored leaves and constants.
    /// Used to check that recorded values are reproducible.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let nodes = self.nodes.borrow();
        let mut out: Vec<Tensor> = Vec::with_capacity(nodes.len());
        for node in nodes.iter() {
            let v = match &node.record {
                Record::Leaf | Record::Constant => node.value.clone(),
                Record::Op { kind, inputs } => {
                    let vals: Vec<&Tensor> = inputs.iter().map(|v| &out[v.0]).collect();
                    compute(kind, &vals)?
                }
            };
            out.push(v);
        }
        Ok(out)
    }

    /// Reverse sweep from a one-element output. Leaves used several times get
    /// the sum of their contributions; unreachable leaves get zeros.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out_node = nodes
            .get(output.0)
            .ok_or_else(|| Error::contract("output is not on this tape"))?;
        if !out_node.value.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out_node.value.shape()
            )));
        }

        let mut adj: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        if out_node.requires_grad {
            adj[output.0] = Some(vec![1.0]);
        }

        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &nodes[i];
            let Record::Op { kind, inputs } = &node.record else {
                adj[i] = Some(g);
                continue;
            };
            let needs = |v: &Var| nodes[v.0].requires_grad;
            match kind {
                OpKind::MatMul => {
                    let (a, b) = (&nodes[inputs[0].0].value, &nodes[inputs[1].0].value);
                    let (m, k) = (a.rows(), a.cols());
                    let n = if b.shape().len() == 2 { b.cols() } else { 1 };
                    if needs(&inputs[0]) {
                        let mut ga = vec![0.0; m * k];
                        let bd = b.data();
                        for r in 0..m {
                            for c in 0..n {
                                let gv = g[r * n + c];
                                if gv == 0.0 {
                                    continue;
                                }
                                let row = &mut ga[r * k..(r + 1) * k];
                                for (j, gj) in row.iter_mut().enumerate() {
                                    *gj += gv * bd[j * n + c];
                                }
                            }
                        }
                        accumulate(&mut adj, inputs[0], ga);
                    }
                    if needs(&inputs[1]) {
                        let mut gb = vec![0.0; k * n];
                        let ad = a.data();
                        for r in 0..m {
                            let arow = &ad[r * k..(r + 1) * k];
                            for c in 0..n {
                                let gv = g[r * n + c];
                                if gv == 0.0 {
                                    continue;
                                }
                                for j in 0..k {
                                    gb[j * n + c] += arow[j] * gv;
                                }
                            }
                        }
                        accumulate(&mut adj, inputs[1], gb);
                    }
                }
                OpKind::Add => {
                    for v in inputs {
                        if needs(v) {
                            accumulate(&mut adj, *v, g.clone());
                        }
                    }
                }
                OpKind::Sub => {
                    if needs(&inputs[0]) {
                        accumulate(&mut adj, inputs[0], g.clone());
                    }
                    if needs(&inputs[1]) {
                        accumulate(&mut adj, inputs[1], g.iter().map(|x| -x).collect());
                    }
                }
                OpKind::Mul => {
                    let (a, b) = (nodes[inputs[0].0].value.data(), nodes[inputs[1].0].value.data());
                    if needs(&inputs[0]) {
                        accumulate(&mut adj, inputs[0], g.iter().zip(b).map(|(g, b)| g * b).collect());
                    }
                    if needs(&inputs[1]) {
                        accumulate(&mut adj, inputs[1], g.iter().zip(a).map(|(g, a)| g * a).collect());
                    }
                }
                OpKind::Scale(f) => {
                    accumulate(&mut adj, inputs[0], g.iter().map(|x| x * f).collect());
                }
                OpKind::Tanh => {
                    let y = node.value.data();
                    accumulate(&mut adj, inputs[0], g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect());
                }
                OpKind::Sigmoid => {
                    let y = node.value.data();
                    accumulate(&mut adj, inputs[0], g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect());
                }
                OpKind::Softplus => {
                    let x = nodes[inputs[0].0].value.data();
                    accumulate(&mut adj, inputs[0], g.iter().zip(x).map(|(g, x)| g * sigmoid(*x)).collect());
                }
                OpKind::Exp => {
                    let y = node.value.data();
                    accumulate(&mut adj, inputs[0], g.iter().zip(y).map(|(g, y)| g * y).collect());
                }
                OpKind::Log => {
                    let x = nodes[inputs[0].0].value.data();
                    accumulate(&mut adj, inputs[0], g.iter().zip(x).map(|(g, x)| g / x).collect());
                }
                OpKind::Sum => {
                    let n = nodes[inputs[0].0].value.numel();
                    accumulate(&mut adj, inputs[0], vec![g[0]; n]);
                }
                OpKind::Mean => {
                    let n = nodes[inputs[0].0].value.numel();
                    accumulate(&mut adj, inputs[0], vec![g[0] / n as f64; n]);
                }
                OpKind::Concat => {
                    let mut offset = 0;
                    for v in inputs {
                        let n = nodes[v.0].value.numel();
                        if needs(v) {
                            accumulate(&mut adj, *v, g[offset..offset + n].to_vec());
                        }
                        offset += n;
                    }
                }
                OpKind::Slice { start, len } => {
                    let n = nodes[inputs[0].0].value.numel();
                    let mut full = vec![0.0; n];
                    full[*start..start + len].copy_from_slice(&g);
                    accumulate(&mut adj, inputs[0], full);
                }
                OpKind::Clamp { lo, hi } => {
                    let x = nodes[inputs[0].0].value.data();
                    let local = g
                        .iter()
                        .zip(x)
                        .map(|(g, x)| if *x >= *lo && *x <= *hi { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut adj, inputs[0], local);
                }
            }
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        for (i, node) in nodes.iter().enumerate() {
            if matches!(node.record, Record::Leaf) && node.requires_grad {
                let shape = node.value.shape().to_vec();
                let g = match adj.get_mut(i).and_then(|a| a.take()) {
                    Some(g) => g,
                    None => vec![0.0; node.value.numel()],
                };
                grads[i] = Some(Tensor::from_parts(shape, g));
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], var: Var, g: Vec<f64>) {
    match &mut adj[var.0] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(&g) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
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
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn same_shape(kind: &OpKind, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!(
            "{:?}: shape mismatch {:?} vs {:?}",
            kind,
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn arity(kind: &OpKind, inputs: &[&Tensor], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::contract(format!("{:?} takes {} inputs, got {}", kind, n, inputs.len())));
    }
    Ok(())
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> (Vec<usize>, Vec<f64>) {
    (x.shape().to_vec(), x.data().iter().map(|v| f(*v)).collect())
}

fn compute(kind: &OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
    let (shape, data) = match kind {
        OpKind::MatMul => {
            arity(kind, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape().len() != 2 || b.shape().is_empty() || b.shape()[0] != a.cols() {
                return Err(Error::contract(format!(
                    "matmul: cannot multiply {:?} by {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            let (m, k) = (a.rows(), a.cols());
            let n = if b.shape().len() == 2 { b.cols() } else { 1 };
            let (ad, bd) = (a.data(), b.data());
            let mut out = vec![0.0; m * n];
            for r in 0..m {
                let arow = &ad[r * k..(r + 1) * k];
                for c in 0..n {
                    let mut acc = 0.0;
                    for j in 0..k {
                        acc += arow[j] * bd[j * n + c];
                    }
                    out[r * n + c] = acc;
                }
            }
            let shape = if b.shape().len() == 2 { vec![m, n] } else { vec![m] };
            (shape, out)
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            arity(kind, inputs, 2)?;
            same_shape(kind, inputs[0], inputs[1])?;
            let (a, b) = (inputs[0].data(), inputs[1].data());
            let data = match kind {
                OpKind::Add => a.iter().zip(b).map(|(x, y)| x + y).collect(),
                OpKind::Sub => a.iter().zip(b).map(|(x, y)| x - y).collect(),
                _ => a.iter().zip(b).map(|(x, y)| x * y).collect(),
            };
            (inputs[0].shape().to_vec(), data)
        }
        OpKind::Scale(f) => {
            arity(kind, inputs, 1)?;
            if !f.is_finite() {
                return Err(Error::NumericDomain(format!("scale factor {}", f)));
            }
            map(inputs[0], |x| x * f)
        }
        OpKind::Tanh => {
            arity(kind, inputs, 1)?;
            map(inputs[0], f64::tanh)
        }
        OpKind::Sigmoid => {
            arity(kind, inputs, 1)?;
            map(inputs[0], sigmoid)
        }
        OpKind::Softplus => {
            arity(kind, inputs, 1)?;
            map(inputs[0], softplus)
        }
        OpKind::Exp => {
            arity(kind, inputs, 1)?;
            map(inputs[0], f64::exp)
        }
        OpKind::Log => {
            arity(kind, inputs, 1)?;
            if let Some(v) = inputs[0].data().iter().find(|v| **v <= 0.0) {
                return Err(Error::NumericDomain(format!("log of non-positive value {}", v)));
            }
            map(inputs[0], f64::ln)
        }
        OpKind::Sum => {
            arity(kind, inputs, 1)?;
            (vec![], vec![inputs[0].data().iter().sum()])
        }
        OpKind::Mean => {
            arity(kind, inputs, 1)?;
            let x = inputs[0];
            if x.numel() == 0 {
                return Err(Error::contract("mean of empty tensor"));
            }
            (vec![], vec![x.data().iter().sum::<f64>() / x.numel() as f64])
        }
        OpKind::Concat => {
            if inputs.is_empty() {
                return Err(Error::contract("concat of zero inputs"));
            }
            let data: Vec<f64> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
            (vec![data.len()], data)
        }
        OpKind::Slice { start, len } => {
            arity(kind, inputs, 1)?;
            let x = inputs[0];
            if start + len > x.numel() {
                return Err(Error::contract(format!(
                    "slice {}..{} out of bounds for {} elements",
                    start,
                    start + len,
                    x.numel()
                )));
            }
            (vec![*len], x.data()[*start..start + len].to_vec())
        }
        OpKind::Clamp { lo, hi } => {
            arity(kind, inputs, 1)?;
            if lo > hi {
                return Err(Error::contract(format!("clamp bounds {} > {}", lo, hi)));
            }
            map(inputs[0], |x| x.clamp(*lo, *hi))
        }
    };
    if let Some(v) = data.iter().find(|v| !v.is_finite()) {
        return Err(Error::NumericDomain(format!("{:?} produced non-finite value {}", kind, v)));
    }
    Ok(Tensor::from_parts(shape, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vec_t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec()).unwrap()
    }

    #[test]
    fn trivial_forward_values() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::scalar(0.0).unwrap());
        assert_eq!(tape.scalar(tape.tanh(z).unwrap()), 0.0);
        assert_eq!(tape.scalar(tape.sigmoid(z).unwrap()), 0.5);

        let eye = tape.constant(Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
        let v = tape.constant(vec_t(&[0.3, -2.0, 7.5]));
        assert_eq!(tape.to_vec(tape.matmul(eye, v).unwrap()), vec![0.3, -2.0, 7.5]);
    }

    #[test]
    fn square_and_tanh_derivatives() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0).unwrap());
        let y = tape.mul(x, x).unwrap();
        assert_eq!(tape.backward(y).unwrap().wrt(x), &[6.0]);

        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.0).unwrap());
        let y = tape.tanh(x).unwrap();
        assert_eq!(tape.backward(y).unwrap().wrt(x), &[1.0]);
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let tape = Tape::new();
        let a = tape.constant(vec_t(&[1.0, 2.0]));
        let b = tape.constant(vec_t(&[1.0, 2.0, 3.0]));
        assert!(matches!(tape.add(a, b), Err(Error::Contract(_))));
        let m = tape.constant(Tensor::matrix(2, 2, vec![1.0; 4]).unwrap());
        assert!(matches!(tape.matmul(m, b), Err(Error::Contract(_))));
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let tape = Tape::new();
        let a = tape.param(vec_t(&[1.0, 2.0]));
        let b = tape.tanh(a).unwrap();
        assert!(matches!(tape.backward(b), Err(Error::Contract(_))));
    }

    #[test]
    fn log_of_negative_is_domain_error() {
        let tape = Tape::new();
        let a = tape.param(vec_t(&[-1.0]));
        assert!(matches!(tape.log(a), Err(Error::NumericDomain(_))));
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let tape = Tape::new();
        let x = tape.param(vec_t(&[1.0, 2.0]));
        let unused = tape.param(vec_t(&[5.0, 6.0, 7.0]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(unused), &[0.0, 0.0, 0.0]);
        assert_eq!(g.wrt(x), &[1.0, 1.0]);
    }

    #[test]
    fn constant_inputs_are_not_recorded_as_ops() {
        let tape = Tape::new();
        let a = tape.constant(vec_t(&[1.0]));
        let b = tape.exp(a).unwrap();
        assert!(!tape.requires_grad(b));
    }

    #[test]
    fn reused_leaf_accumulates() {
        // f = x*x + 3x at x = 2: f' = 2x + 3 = 7
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let lin = tape.scale(x, 3.0).unwrap();
        let f = tape.add(sq, lin).unwrap();
        assert_eq!(tape.backward(f).unwrap().wrt(x), &[7.0]);
    }

    /// Central differences of `f` around `x0`, coordinate `i`.
    fn central_diff(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], i: usize, h: f64) -> f64 {
        let mut xp = x0.to_vec();
        let mut xm = x0.to_vec();
        xp[i] += h;
        xm[i] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    }

    fn assert_close(ad: f64, fd: f64) {
        let err = (ad - fd).abs();
        let rel = err / ad.abs().max(fd.abs());
        assert!(err <= 1e-6 || rel <= 1e-4, "ad {} vs fd {} (rel {})", ad, fd, rel);
    }

    /// Every primitive, checked against central differences on a random
    /// point. Inputs: `x` a 6-vector, `a` a 2x3 matrix, `b` a 3x2 matrix.
    #[test]
    fn each_primitive_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(0.2..1.5)).collect() };
        let x0 = draw(6);
        let a0 = draw(6);
        let b0 = draw(6);
        let w: Vec<f64> = x0.iter().map(|v| 1.3 - v).collect();

        type Build = fn(&Tape, Var, Var, Var, &[f64]) -> Var;
        let cases: Vec<(&str, Build)> = vec![
            ("matmul_vec", |t, x, a, _, w| {
                let v = t.slice(x, 1, 3).unwrap();
                let y = t.matmul(a, v).unwrap();
                let y = t.tanh(y).unwrap();
                t.dot_const(&w[..2], y).unwrap()
            }),
            ("matmul_mat", |t, _, a, b, _| {
                let p = t.matmul(a, b).unwrap();
                let q = t.tanh(p).unwrap();
                t.sum(q).unwrap()
            }),
            ("add", |t, x, _, _, w| {
                let c = t.constant(Tensor::vector(w.to_vec()).unwrap());
                let y = t.add(x, c).unwrap();
                let y = t.mul(y, y).unwrap();
                t.sum(y).unwrap()
            }),
            ("sub", |t, x, _, _, w| {
                let c = t.constant(Tensor::vector(w.to_vec()).unwrap());
                let y = t.sub(c, x).unwrap();
                let y = t.mul(y, x).unwrap();
                t.sum(y).unwrap()
            }),
            ("mul", |t, x, _, _, w| {
                let y = t.mul(x, x).unwrap();
                t.dot_const(w, y).unwrap()
            }),
            ("scale", |t, x, _, _, w| {
                let y = t.scale(x, -2.5).unwrap();
                let y = t.tanh(y).unwrap();
                t.dot_const(w, y).unwrap()
            }),
            ("tanh", |t, x, _, _, w| {
                let y = t.tanh(x).unwrap();
                t.dot_const(w, y).unwrap()
            }),
            ("sigmoid", |t, x, _, _, w| {
                let y = t.sigmoid(x).unwrap();
                t.dot_const(w, y).unwrap()
            }),
            ("softplus", |t, x, _, _, w| {
                let y = t.softplus(x).unwrap();
                t.dot_const(w, y).unwrap()
            }),
            ("exp", |t, x, _, _, w| {
                let y = t.exp(x).unwrap();
                t.dot_const(w, y).unwrap()
            }),
            ("log", |t, x, _, _, w| {
                let y = t.log(x).unwrap();
                t.dot_const(w, y).unwrap()
            }),
            ("sum", |t, _, a, _, _| {
                let y = t.exp(a).unwrap();
                let s = t.sum(y).unwrap();
                t.mul(s, s).unwrap()
            }),
            ("mean", |t, x, _, _, _| {
                let y = t.mul(x, x).unwrap();
                t.mean(y).unwrap()
            }),
            ("concat_slice", |t, x, _, _, w| {
                let head = t.slice(x, 0, 2).unwrap();
                let th = t.tanh(x).unwrap();
                let c = t.concat(&[th, head]).unwrap();
                let body = t.slice(c, 0, 6).unwrap();
                let body = t.mul(body, body).unwrap();
                let tail = t.slice(c, 6, 2).unwrap();
                let tail = t.exp(tail).unwrap();
                let tail = t.sum(tail).unwrap();
                let d = t.dot_const(w, body).unwrap();
                t.add(d, tail).unwrap()
            }),
            ("clamp", |t, x, _, _, w| {
                // interior on [0.2, 1.5) except coordinates above 1.0
                let y = t.clamp(x, 0.0, 1.0).unwrap();
                let y = t.mul(y, y).unwrap();
                t.dot_const(w, y).unwrap()
            }),
        ];

        let mat = |d: &[f64], r, c| Tensor::matrix(r, c, d.to_vec()).unwrap();
        for (name, build) in cases {
            let tape = Tape::new();
            let (x, a, b) = (tape.param(vec_t(&x0)), tape.param(mat(&a0, 2, 3)), tape.param(mat(&b0, 3, 2)));
            let out = build(&tape, x, a, b, &w);
            let grads = tape.backward(out).unwrap();

            let all: Vec<f64> = x0.iter().chain(&a0).chain(&b0).copied().collect();
            let ad: Vec<f64> =
                grads.wrt(x).iter().chain(grads.wrt(a)).chain(grads.wrt(b)).copied().collect();
            let f = |p: &[f64]| {
                let t = Tape::new();
                let x = t.param(vec_t(&p[0..6]));
                let a = t.param(mat(&p[6..12], 2, 3));
                let b = t.param(mat(&p[12..18], 3, 2));
                let out = build(&t, x, a, b, &w);
                t.scalar(out)
            };
            for i in 0..all.len() {
                // clamp kink: skip coordinates sitting within h of a bound
                if name == "clamp" && i < 6 && (all[i] - 1.0).abs() < 1e-4 {
                    continue;
                }
                let fd = central_diff(&f, &all, i, 1e-5);
                let err = (ad[i] - fd).abs();
                let rel = err / ad[i].abs().max(fd.abs()).max(1e-300);
                assert!(err <= 1e-6 || rel <= 1e-4, "{}[{}]: ad {} vs fd {}", name, i, ad[i], fd);
            }
        }
    }

    #[test]
    fn two_layer_network_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (din, dh, dout) = (4, 7, 3);
        let n_params = dh * din + dh + dout * dh + dout;
        let theta: Vec<f64> = (0..n_params).map(|_| rng.random_range(-0.8..0.8)).collect();
        let input: Vec<f64> = (0..din).map(|_| rng.random_range(-1.0..1.0)).collect();
        let target: Vec<f64> = (0..dout).map(|_| rng.random_range(-1.0..1.0)).collect();

        let build = |tape: &Tape, p: Var| -> Var {
            let mut off = 0;
            let mut take = |n: usize| {
                let v = tape.slice(p, off, n).unwrap();
                off += n;
                v
            };
            let w1 = take(dh * din);
            let b1 = take(dh);
            let w2 = take(dout * dh);
            let b2 = take(dout);
            let x = tape.constant(vec_t(&input));
            let h = tape.add(mat_vec(tape, w1, dh, din, x), b1).unwrap();
            let h = tape.tanh(h).unwrap();
            let y = tape.add(mat_vec(tape, w2, dout, dh, h), b2).unwrap();
            let tgt = tape.constant(vec_t(&target));
            let d = tape.sub(y, tgt).unwrap();
            let sq = tape.mul(d, d).unwrap();
            tape.sum(sq).unwrap()
        };

        let tape = Tape::new();
        let p = tape.param(vec_t(&theta));
        let loss = build(&tape, p);
        let g = tape.backward(loss).unwrap().wrt(p).to_vec();

        let f = |x: &[f64]| {
            let t = Tape::new();
            let pv = t.param(vec_t(x));
            let l = build(&t, pv);
            t.scalar(l)
        };
        for _ in 0..10 {
            let i = rng.random_range(0..n_params);
            assert_close(g[i], central_diff(&f, &theta, i, 1e-5));
        }
    }

    /// Matrix-vector product where the matrix is a flat slice of a parameter
    /// vector: each output row is a dot product of a row slice with `x`.
    fn mat_vec(tape: &Tape, w_flat: Var, rows: usize, cols: usize, x: Var) -> Var {
        let mut outs = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = tape.slice(w_flat, r * cols, cols).unwrap();
            let prod = tape.mul(row, x).unwrap();
            outs.push(tape.sum(prod).unwrap());
        }
        tape.concat(&outs).unwrap()
    }

    #[test]
    fn linearity_of_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (a, b) = (1.7, -0.4);
        let f = |t: &Tape, x: Var| {
            let y = t.tanh(x).unwrap();
            t.sum(y).unwrap()
        };
        let g = |t: &Tape, x: Var| {
            let y = t.mul(x, x).unwrap();
            let y = t.exp(y).unwrap();
            t.mean(y).unwrap()
        };
        let grad_of = |which: u8| {
            let t = Tape::new();
            let x = t.param(vec_t(&x0));
            let out = match which {
                0 => f(&t, x),
                1 => g(&t, x),
                _ => {
                    let fa = t.scale(f(&t, x), a).unwrap();
                    let gb = t.scale(g(&t, x), b).unwrap();
                    t.add(fa, gb).unwrap()
                }
            };
            t.backward(out).unwrap().wrt(x).to_vec()
        };
        let (gf, gg, gc) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..x0.len() {
            assert!((gc[i] - (a * gf[i] + b * gg[i])).abs() <= 1e-12);
        }
    }

    #[test]
    fn replay_reproduces_recorded_values() {
        let tape = Tape::new();
        let w = tape.param(Tensor::matrix(2, 3, vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]).unwrap());
        let x = tape.constant(vec_t(&[1.0, 2.0, 3.0]));
        let h = tape.matmul(w, x).unwrap();
        let h = tape.softplus(h).unwrap();
        let _ = tape.mean(h).unwrap();
        let replayed = tape.replay().unwrap();
        for (i, r) in replayed.iter().enumerate() {
            assert_eq!(r.data(), tape.value(Var(i)).data());
        }
    }

    #[test]
    fn gradients_are_deterministic() {
        let run = || {
            let tape = Tape::new();
            let w = tape.param(Tensor::matrix(2, 2, vec![0.3, -0.7, 1.1, 0.2]).unwrap());
            let x = tape.constant(vec_t(&[0.5, -1.5]));
            let y = tape.matmul(w, x).unwrap();
            let y = tape.sigmoid(y).unwrap();
            let s = tape.sum(y).unwrap();
            tape.backward(s).unwrap().wrt(w).to_vec()
        };
        assert_eq!(run(), run());
    }
}
