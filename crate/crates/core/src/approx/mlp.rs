//! Fully connected networks with hand-written reverse mode.
//!
//! Parameters live in one flat buffer so optimizers, checkpoints and the
//! gradient checker can treat a network as a plain vector. Layer `l` owns a
//! `sizes[l+1] x sizes[l]` row-major weight block followed by its bias.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scalar::{matmul, Layout, Scalar};
use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HiddenActivation {
    Tanh,
    Elu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Identity,
    Tanh,
    Sigmoid,
}

#[derive(Clone, Copy)]
enum Act {
    Identity,
    Tanh,
    Elu,
    Sigmoid,
}

impl Act {
    #[inline]
    fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Act::Identity => z,
            Act::Tanh => z.tanh(),
            Act::Elu => {
                if z > T::zero() {
                    z
                } else {
                    z.exp_m1()
                }
            }
            Act::Sigmoid => T::one() / (T::one() + (-z).exp()),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn grad_from_output<T: Scalar>(self, y: T) -> T {
        match self {
            Act::Identity => T::one(),
            Act::Tanh => T::one() - y * y,
            Act::Elu => {
                if y > T::zero() {
                    T::one()
                } else {
                    y + T::one()
                }
            }
            Act::Sigmoid => y * (T::one() - y),
        }
    }
}

impl From<HiddenActivation> for Act {
    fn from(h: HiddenActivation) -> Self {
        match h {
            HiddenActivation::Tanh => Act::Tanh,
            HiddenActivation::Elu => Act::Elu,
        }
    }
}

impl From<OutputActivation> for Act {
    fn from(o: OutputActivation) -> Self {
        match o {
            OutputActivation::Identity => Act::Identity,
            OutputActivation::Tanh => Act::Tanh,
            OutputActivation::Sigmoid => Act::Sigmoid,
        }
    }
}

/// Multilayer perceptron over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    sizes: Vec<usize>,
    params: Vec<T>,
    hidden: HiddenActivation,
    output: OutputActivation,
}

/// Activations recorded by a batched forward pass, consumed by
/// [`Mlp::backward_tape`].
#[derive(Debug, Clone)]
pub struct Tape<T> {
    batch: usize,
    /// `acts[0]` is the input, `acts[l]` the post-activation of layer `l`.
    acts: Vec<Vec<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn input(&self) -> &[T] {
        &self.acts[0]
    }

    pub fn output(&self) -> &[T] {
        self.acts.last().expect("tape has at least the input")
    }
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl<T: Scalar> Mlp<T> {
    /// Network with fan-in uniform init in `±sqrt(1/fan_in)` for weights and biases.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: HiddenActivation,
        output: OutputActivation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut mlp = Self::zeros(sizes, hidden, output)?;
        let mut offset = 0;
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (1.0 / fan_in as f64).sqrt();
            for p in &mut mlp.params[offset..offset + fan_in * fan_out + fan_out] {
                *p = T::of(rng.gen_range(-bound..bound));
            }
            offset += fan_in * fan_out + fan_out;
        }
        Ok(mlp)
    }

    pub fn zeros(
        sizes: &[usize],
        hidden: HiddenActivation,
        output: OutputActivation,
    ) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Layout(format!(
                "need at least input and output sizes, got {sizes:?}"
            )));
        }
        if sizes.contains(&0) {
            return Err(Error::Layout(format!("zero-width layer in {sizes:?}")));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params: vec![T::zero(); param_count(sizes)],
            hidden,
            output,
        })
    }

    pub fn from_params(
        sizes: &[usize],
        hidden: HiddenActivation,
        output: OutputActivation,
        params: Vec<T>,
    ) -> Result<Self> {
        let mut mlp = Self::zeros(sizes, hidden, output)?;
        check_dim("mlp parameters", mlp.params.len(), params.len())?;
        mlp.params = params;
        Ok(mlp)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("validated non-empty")
    }

    pub fn hidden_activation(&self) -> HiddenActivation {
        self.hidden
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    fn offsets(&self, layer: usize) -> (usize, usize) {
        let start = param_count(&self.sizes[..=layer]);
        (start, start + self.sizes[layer] * self.sizes[layer + 1])
    }

    /// Row-major `fan_out x fan_in` weight block of `layer`.
    pub fn weights(&self, layer: usize) -> &[T] {
        let (w, b) = self.offsets(layer);
        &self.params[w..b]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [T] {
        let (w, b) = self.offsets(layer);
        &mut self.params[w..b]
    }

    pub fn biases(&self, layer: usize) -> &[T] {
        let (_, b) = self.offsets(layer);
        &self.params[b..b + self.sizes[layer + 1]]
    }

    pub fn biases_mut(&mut self, layer: usize) -> &mut [T] {
        let (_, b) = self.offsets(layer);
        let n = self.sizes[layer + 1];
        &mut self.params[b..b + n]
    }

    fn act(&self, layer: usize) -> Act {
        if layer + 1 == self.num_layers() {
            self.output.into()
        } else {
            self.hidden.into()
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    /// Single-sample forward pass.
    pub fn forward(&self, input: &[T]) -> Result<Vec<T>> {
        self.forward_batch(input, 1)
    }

    /// Forward pass over `batch` row-major samples.
    pub fn forward_batch(&self, input: &[T], batch: usize) -> Result<Vec<T>> {
        check_dim("mlp input", batch * self.input_dim(), input.len())?;
        let mut cur = input.to_vec();
        for l in 0..self.num_layers() {
            cur = self.layer_forward(l, &cur, batch);
        }
        Ok(cur)
    }

    /// Forward pass that keeps every activation for a later backward pass.
    pub fn forward_tape(&self, input: &[T], batch: usize) -> Result<Tape<T>> {
        check_dim("mlp input", batch * self.input_dim(), input.len())?;
        let mut acts = Vec::with_capacity(self.sizes.len());
        acts.push(input.to_vec());
        for l in 0..self.num_layers() {
            let next = self.layer_forward(l, acts.last().expect("non-empty"), batch);
            acts.push(next);
        }
        Ok(Tape { batch, acts })
    }

    fn layer_forward(&self, l: usize, x: &[T], batch: usize) -> Vec<T> {
        let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
        let bias = self.biases(l);
        let mut out = Vec::with_capacity(batch * fan_out);
        for _ in 0..batch {
            out.extend_from_slice(bias);
        }
        matmul(
            batch,
            fan_in,
            fan_out,
            x,
            Layout::Plain,
            self.weights(l),
            Layout::Transposed,
            T::one(),
            &mut out,
        );
        let act = self.act(l);
        if !matches!(act, Act::Identity) {
            for v in &mut out {
                *v = act.apply(*v);
            }
        }
        out
    }

    /// Reverse pass over a recorded tape.
    ///
    /// Parameter gradients are accumulated into `param_grads` when given (so
    /// several passes can share one buffer). Returns the gradient with respect
    /// to the input when `want_input_grad` is set.
    pub fn backward_tape(
        &self,
        tape: &Tape<T>,
        upstream: &[T],
        param_grads: Option<&mut [T]>,
        want_input_grad: bool,
    ) -> Result<Option<Vec<T>>> {
        let batch = tape.batch;
        check_dim(
            "mlp upstream gradient",
            batch * self.output_dim(),
            upstream.len(),
        )?;
        check_dim("mlp tape depth", self.sizes.len(), tape.acts.len())?;
        if let Some(g) = param_grads.as_deref() {
            check_dim("mlp parameter gradient", self.params.len(), g.len())?;
        }
        let mut param_grads = param_grads;

        let last = self.num_layers() - 1;
        let out_act = self.act(last);
        let mut delta: Vec<T> = upstream
            .iter()
            .zip(tape.output())
            .map(|(&u, &y)| u * out_act.grad_from_output(y))
            .collect();

        for l in (0..self.num_layers()).rev() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let x = &tape.acts[l];
            if let Some(g) = param_grads.as_deref_mut() {
                let (w_off, b_off) = self.offsets(l);
                matmul(
                    fan_out,
                    batch,
                    fan_in,
                    &delta,
                    Layout::Transposed,
                    x,
                    Layout::Plain,
                    T::one(),
                    &mut g[w_off..b_off],
                );
                let gb = &mut g[b_off..b_off + fan_out];
                for row in delta.chunks_exact(fan_out) {
                    for (acc, &d) in gb.iter_mut().zip(row) {
                        *acc += d;
                    }
                }
            }
            if l == 0 && !want_input_grad {
                return Ok(None);
            }
            let mut dx = vec![T::zero(); batch * fan_in];
            matmul(
                batch,
                fan_out,
                fan_in,
                &delta,
                Layout::Plain,
                self.weights(l),
                Layout::Plain,
                T::zero(),
                &mut dx,
            );
            if l == 0 {
                return Ok(Some(dx));
            }
            let act = self.act(l - 1);
            for (d, &y) in dx.iter_mut().zip(x) {
                *d *= act.grad_from_output(y);
            }
            delta = dx;
        }
        unreachable!("loop returns at layer 0")
    }

    /// Single-sample reverse pass: `(parameter gradient, input gradient)`.
    pub fn backward(&self, input: &[T], upstream: &[T]) -> Result<(Vec<T>, Vec<T>)> {
        let tape = self.forward_tape(input, 1)?;
        let mut grads = vec![T::zero(); self.params.len()];
        let dx = self
            .backward_tape(&tape, upstream, Some(&mut grads), true)?
            .expect("input gradient requested");
        Ok((grads, dx))
    }
}
