//! Named trainable parameters and the visitor used by optimizers and checkpoints.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::rng::StreamRng;
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self { name: name.into(), value }
    }

    /// Registers the parameter on `tape` (once per tape) and returns its node.
    pub fn bind(&self, tape: &mut Tape<T>) -> Var {
        tape.param(&self.name, &self.value)
    }
}

/// Anything that owns parameters.
pub trait Module<T: Scalar> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.value.numel());
        n
    }

    fn named_values(&self) -> BTreeMap<String, Tensor<T>> {
        let mut out = BTreeMap::new();
        self.visit(&mut |p| {
            out.insert(p.name.clone(), p.value.clone());
        });
        out
    }
}

impl<T: Scalar, M: Module<T>> Module<T> for Vec<M> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        for m in self {
            m.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for m in self {
            m.visit_mut(f);
        }
    }
}

pub(crate) fn uniform<T: Scalar>(shape: &[usize], bound: f64, rng: &mut StreamRng) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::of(rng.random_range(-bound..=bound)))
}

pub(crate) fn normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut StreamRng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape.to_vec(), |_| T::of(dist.sample(rng)))
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual dense-layer default.
pub(crate) fn fan_in_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut StreamRng) -> Tensor<T> {
    uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

/// Dense layer `x W + b`.
#[derive(Clone, Debug)]
pub struct Dense<T> {
    pub w: Param<T>,
    pub b: Option<Param<T>>,
}

impl<T: Scalar> Dense<T> {
    pub fn new(name: &str, din: usize, dout: usize, bias: bool, rng: &mut StreamRng) -> Self {
        let w = Param::new(format!("{name}.w"), fan_in_uniform(&[din, dout], din, rng));
        let b = bias.then(|| Param::new(format!("{name}.b"), fan_in_uniform(&[dout], din, rng)));
        Self { w, b }
    }

    pub fn din(&self) -> usize {
        self.w.value.shape()[0]
    }

    pub fn dout(&self) -> usize {
        self.w.value.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> crate::Result<Var> {
        let w = self.w.bind(tape);
        let b = self.b.as_ref().map(|b| b.bind(tape));
        tape.linear(x, w, b)
    }
}

impl<T: Scalar> Module<T> for Dense<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.w);
        if let Some(b) = &self.b {
            f(b);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.w);
        if let Some(b) = &mut self.b {
            f(b);
        }
    }
}

/// Compares tape gradients of every parameter of `module` against central
/// differences. Tensors larger than `max_coords` are probed at evenly spaced
/// coordinates.
pub fn check_module_gradients<M, F>(module: &M, max_coords: usize, eps: f64, mut loss: F) -> crate::Result<crate::tensor::GradCheck>
where
    M: Module<f64> + Clone,
    F: FnMut(&M, &mut Tape<f64>) -> crate::Result<Var>,
{
    let mut tape = Tape::new();
    let l = loss(module, &mut tape)?;
    tape.backward(l)?;
    let grads = tape.param_grads();
    let mut layout = Vec::new();
    module.visit(&mut |p| layout.push((p.name.clone(), p.value.numel())));
    let mut report = crate::tensor::GradCheck::default();
    for (name, numel) in layout {
        let coords: Vec<usize> = if numel <= max_coords {
            (0..numel).collect()
        } else {
            (0..max_coords).map(|k| k * numel / max_coords + (numel / max_coords) / 2).collect()
        };
        for coord in coords {
            let mut probe = |delta: f64| -> crate::Result<f64> {
                let mut m = module.clone();
                m.visit_mut(&mut |p| {
                    if p.name == name {
                        p.value.data_mut()[coord] += delta;
                    }
                });
                let mut tape = Tape::new();
                let l = loss(&m, &mut tape)?;
                Ok(tape.value(l).item())
            };
            let numeric = (probe(eps)? - probe(-eps)?) / (2.0 * eps);
            let analytic = grads.get(&name).map_or(0.0, |g| g.data()[coord]);
            report.record(&name, coord, analytic, numeric);
        }
    }
    Ok(report)
}
