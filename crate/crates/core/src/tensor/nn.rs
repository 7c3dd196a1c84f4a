//! Trainable parameters and the two layers everything else is built from.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::tape::{Tape, TensorRef};
use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::StreamRng;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// Train/eval switch for layers with mode-dependent behaviour.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A named trainable tensor with accumulated gradient and Adam state.
#[derive(Clone, Debug)]
pub struct Param {
    id: u64,
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub(crate) moment1: Vec<f64>,
    pub(crate) moment2: Vec<f64>,
    pub(crate) step: u64,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let n = value.len();
        Self {
            id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed),
            name: name.into(),
            value,
            grad: None,
            moment1: vec![0.0; n],
            moment2: vec![0.0; n],
            step: 0,
        }
    }

    /// Uniform init in `±sqrt(6/(fan_in+fan_out))`.
    pub fn glorot(
        name: impl Into<String>,
        rng: &mut StreamRng,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.uniform(-a, a)).collect();
        Self::new(name, Tensor::new(vec![fan_in, fan_out], data).expect("shape"))
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        Self::new(name, Tensor::zeros(shape))
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Add a gradient contribution (creating the buffer on first use).
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.value.len());
        match &mut self.grad {
            Some(buf) => {
                for (b, &v) in buf.data_mut().iter_mut().zip(g) {
                    *b += v;
                }
            }
            None => {
                let mut t = Tensor::zeros(self.value.shape().to_vec());
                t.data_mut().copy_from_slice(g);
                self.grad = Some(t);
            }
        }
    }

    /// Drop the gradient buffer; the next accumulation starts fresh.
    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Install an all-zero gradient buffer.
    pub fn zero_grad(&mut self) {
        self.grad = Some(Tensor::zeros(self.value.shape().to_vec()));
    }
}

/// Binds parameters onto a tape, one leaf per parameter, and harvests
/// gradients back after `backward`.
#[derive(Default)]
pub struct Binder {
    bound: HashMap<u64, TensorRef>,
    trainable: bool,
}

impl Binder {
    /// Binder for training: parameters receive gradients.
    pub fn train() -> Self {
        Self {
            bound: HashMap::new(),
            trainable: true,
        }
    }

    /// Binder for inference: parameters enter the tape as constants.
    pub fn eval() -> Self {
        Self {
            bound: HashMap::new(),
            trainable: false,
        }
    }

    /// Tape leaf for this parameter, reused across calls within one tape.
    pub fn bind(&mut self, tape: &mut Tape, p: &Param) -> TensorRef {
        *self
            .bound
            .entry(p.id)
            .or_insert_with(|| tape.leaf(p.value.clone(), self.trainable))
    }

    /// Pull gradients off the tape into `param.grad` (after `backward`).
    pub fn harvest(&self, tape: &Tape, params: impl IntoIterator<Item = impl AsMut<Param>>) {
        for mut p in params {
            let p = p.as_mut();
            if let Some(&r) = self.bound.get(&p.id) {
                if let Some(g) = tape.grad(r) {
                    p.accumulate_grad(g);
                }
            }
        }
    }

    /// Harvest a single parameter.
    pub fn harvest_one(&self, tape: &Tape, p: &mut Param) {
        if let Some(&r) = self.bound.get(&p.id) {
            if let Some(g) = tape.grad(r) {
                p.accumulate_grad(g);
            }
        }
    }

    /// The tape gradient of a parameter, if it was bound and received one.
    pub fn grad_of<'t>(&self, tape: &'t Tape, p: &Param) -> Option<&'t [f64]> {
        self.bound.get(&p.id).and_then(|&r| tape.grad(r))
    }
}

impl AsMut<Param> for Param {
    fn as_mut(&mut self) -> &mut Param {
        self
    }
}

/// Affine map `x @ w + b` with trainable weight and bias.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
}

impl Linear {
    pub fn new(name: &str, rng: &mut StreamRng, fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: Param::glorot(format!("{name}.w"), rng, fan_in, fan_out),
            b: Param::zeros(format!("{name}.b"), vec![fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.w.value.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.w.value.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, x: TensorRef) -> Result<TensorRef> {
        let w = binder.bind(tape, &self.w);
        let b = binder.bind(tape, &self.b);
        let y = tape.matmul(x, w)?;
        tape.add_rowvec(y, b)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.w);
        f(&self.b);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

/// Per-column batch normalization with running statistics.
///
/// Train mode normalizes with batch statistics and folds them into the
/// running averages; eval mode normalizes with the running averages.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Tensor::full(vec![channels], 1.0)),
            beta: Param::zeros(format!("{name}.beta"), vec![channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.9,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape,
        binder: &mut Binder,
        x: TensorRef,
        mode: Mode,
    ) -> Result<TensorRef> {
        let (n, c) = (tape.value(x).rows(), tape.value(x).cols());
        if c != self.channels() {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                left: vec![n, c],
                right: vec![self.channels()],
            });
        }
        let (mean_ref, var_ref) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(Error::DegenerateBatch { rows: n });
                }
                let mu = tape.col_mean(x)?;
                let centered = tape.sub_rowvec(x, mu)?;
                let sq = tape.square(centered);
                let var = tape.col_mean(sq)?;
                // fold the detached batch statistics into the running averages
                let mu_v = tape.value(mu).data().to_vec();
                let var_v = tape.value(var).data().to_vec();
                let m = self.momentum;
                for j in 0..c {
                    self.running_mean[j] = m * self.running_mean[j] + (1.0 - m) * mu_v[j];
                    self.running_var[j] = m * self.running_var[j] + (1.0 - m) * var_v[j];
                }
                (mu, var)
            }
            Mode::Eval => {
                let mu = tape.constant(Tensor::new(vec![c], self.running_mean.clone())?);
                let var = tape.constant(Tensor::new(vec![c], self.running_var.clone())?);
                (mu, var)
            }
        };
        let centered = tape.sub_rowvec(x, mean_ref)?;
        let inv_sd = tape.rsqrt_eps(var_ref, self.eps);
        let normed = tape.mul_rowvec(centered, inv_sd)?;
        let gamma = binder.bind(tape, &self.gamma);
        let beta = binder.bind(tape, &self.beta);
        let scaled = tape.mul_rowvec(normed, gamma)?;
        tape.add_rowvec(scaled, beta)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.gamma);
        f(&self.beta);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}
