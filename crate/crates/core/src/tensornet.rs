//! Dense feed-forward networks with exact reverse-mode gradients and Adam.
//!
//! Layers compute `a = act(x Wᵀ + b)` on row-major batches. A forward pass
//! returns a [`Tape`] holding each layer's input and pre-activation; the tape
//! is moved into the matching [`DenseNet::backward`] call.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::Uniform;

use crate::error::{Error, Result};
use crate::store::Cursor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    fn tag(self) -> u32 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
        }
    }

    fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out × in`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
        Self {
            weights: Array2::from_shape_fn((out_dim, in_dim), |_| rng.sample(dist)),
            bias: Array1::zeros(out_dim),
            activation,
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            weights: Array2::eye(dim),
            bias: Array1::zeros(dim),
            activation: Activation::Identity,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    layers: Vec<Dense>,
}

/// Per-layer activations recorded by one forward pass.
#[derive(Debug)]
pub struct Tape {
    inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
    shapes: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub layers: Vec<DenseGrad>,
}

impl NetGrads {
    /// Flattened in the same order as [`DenseNet::params`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.layers {
            out.extend(g.weights.iter());
            out.extend(g.bias.iter());
        }
        out
    }
}

impl DenseNet {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("a network needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(Error::Dimension {
                    expected: l.out_dim(),
                    got: l.bias.len(),
                });
            }
            if i > 0 && layers[i - 1].out_dim() != l.in_dim() {
                return Err(Error::Dimension {
                    expected: layers[i - 1].out_dim(),
                    got: l.in_dim(),
                });
            }
            if l.weights
                .iter()
                .chain(l.bias.iter())
                .any(|v| !v.is_finite())
            {
                return Err(Error::invalid(format!(
                    "layer {i} has non-finite parameters"
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Relu hidden layers of the given widths followed by an identity output layer.
    pub fn mlp<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = input_dim;
        for &w in hidden {
            layers.push(Dense::glorot(prev, w, Activation::Relu, rng));
            prev = w;
        }
        layers.push(Dense::glorot(prev, output_dim, Activation::Identity, rng));
        Self { layers }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// All parameters, layer by layer: weights row-major, then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Dimension {
                expected: self.param_count(),
                got: flat.len(),
            });
        }
        let mut pos = 0;
        for l in &mut self.layers {
            for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *w = flat[pos];
                pos += 1;
            }
        }
        Ok(())
    }

    fn check_input(&self, batch: &ArrayView2<f64>) -> Result<()> {
        if batch.ncols() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: batch.ncols(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, batch: ArrayView2<f64>) -> Result<(Array2<f64>, Tape)> {
        self.check_input(&batch)?;
        let mut tape = Tape {
            inputs: Vec::with_capacity(self.layers.len()),
            pre_activations: Vec::with_capacity(self.layers.len()),
            shapes: Vec::with_capacity(self.layers.len()),
        };
        let mut x = batch.to_owned();
        for l in &self.layers {
            let z = x.dot(&l.weights.t()) + &l.bias;
            let a = match l.activation {
                Activation::Identity => z.clone(),
                Activation::Relu => z.mapv(|v| v.max(0.0)),
            };
            tape.shapes.push(l.weights.dim());
            tape.inputs.push(x);
            tape.pre_activations.push(z);
            x = a;
        }
        Ok((x, tape))
    }

    /// Forward pass without recording a tape.
    pub fn predict(&self, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&batch)?;
        let mut x = batch.to_owned();
        for l in &self.layers {
            let mut z = x.dot(&l.weights.t()) + &l.bias;
            if l.activation == Activation::Relu {
                z.mapv_inplace(|v| v.max(0.0));
            }
            x = z;
        }
        Ok(x)
    }

    /// Gradients of `sum(output ⊙ output_grad)` with respect to every
    /// parameter and to the input batch.
    pub fn backward(
        &self,
        tape: Tape,
        output_grad: ArrayView2<f64>,
    ) -> Result<(NetGrads, Array2<f64>)> {
        if tape.shapes.len() != self.layers.len()
            || tape
                .shapes
                .iter()
                .zip(&self.layers)
                .any(|(s, l)| *s != l.weights.dim())
        {
            return Err(Error::invalid("tape was recorded by a different network"));
        }
        let batch = tape.inputs[0].nrows();
        if output_grad.dim() != (batch, self.output_dim()) {
            return Err(Error::Dimension {
                expected: batch * self.output_dim(),
                got: output_grad.len(),
            });
        }

        let mut grads = Vec::with_capacity(self.layers.len());
        let mut upstream = output_grad.to_owned();
        for ((l, x), z) in self
            .layers
            .iter()
            .zip(tape.inputs)
            .zip(tape.pre_activations)
            .rev()
        {
            if l.activation == Activation::Relu {
                ndarray::Zip::from(&mut upstream)
                    .and(&z)
                    .for_each(|g, &zv| {
                        if zv <= 0.0 {
                            *g = 0.0;
                        }
                    });
            }
            let dw = upstream.t().dot(&x);
            let db = upstream.sum_axis(Axis(0));
            let dx = upstream.dot(&l.weights);
            grads.push(DenseGrad {
                weights: dw,
                bias: db,
            });
            upstream = dx;
        }
        grads.reverse();
        Ok((NetGrads { layers: grads }, upstream))
    }
}

/// Linear warmup followed by cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    /// Total steps of the run; `0` disables the cosine decay.
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn constant(base_lr: f64) -> Self {
        Self {
            base_lr,
            warmup_steps: 0,
            total_steps: 0,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if self.total_steps <= self.warmup_steps {
            return self.base_lr;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Adam with bias-corrected moments over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: LrSchedule,
    m: Vec<f64>,
    v: Vec<f64>,
    step: usize,
}

impl Adam {
    pub fn new(param_count: usize, schedule: LrSchedule) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Learning rate the next call to [`Adam::step`] will use.
    pub fn current_lr(&self) -> f64 {
        self.schedule.lr(self.step)
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Dimension {
                expected: self.m.len(),
                got: params.len().min(grads.len()),
            });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                step: self.step,
                detail: format!("non-finite gradient at parameter {i}"),
            });
        }
        let lr = self.schedule.lr(self.step);
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

pub const NET_MAGIC: &[u8; 4] = b"FFN1";

/// `"FFN1"`, layer count, then `(in, out, activation)` per layer, then every
/// layer's weights (row-major) and bias as little-endian f64.
pub fn encode_net(net: &DenseNet) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + net.layers.len() * 12 + net.param_count() * 8);
    out.extend_from_slice(NET_MAGIC);
    out.extend_from_slice(&(net.layers.len() as u32).to_le_bytes());
    for l in &net.layers {
        out.extend_from_slice(&(l.in_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(l.out_dim() as u32).to_le_bytes());
        out.extend_from_slice(&l.activation.tag().to_le_bytes());
    }
    for p in net.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

/// Decodes one network from the front of `bytes`, returning it and the
/// number of bytes consumed.
pub fn decode_net(bytes: &[u8]) -> Result<(DenseNet, usize)> {
    let mut cur = Cursor::new(bytes);
    decode_net_from(&mut cur).map(|net| (net, cur.offset() as usize))
}

pub(crate) fn decode_net_from(cur: &mut Cursor) -> Result<DenseNet> {
    let start = cur.offset();
    if cur.take(4, "magic")? != NET_MAGIC {
        return Err(Error::format(start, "bad magic, expected \"FFN1\""));
    }
    let count = cur.u32("layer count")? as u64;
    if count == 0 {
        return Err(Error::format(cur.offset() - 4, "network has no layers"));
    }
    cur.ensure(count, 12, "layer headers")?;
    let mut shapes = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let in_dim = cur.u32("layer input dim")? as usize;
        let out_dim = cur.u32("layer output dim")? as usize;
        let tag_at = cur.offset();
        let act = cur.u32("activation tag")?;
        let act = Activation::from_tag(act)
            .ok_or_else(|| Error::format(tag_at, format!("unknown activation tag {act}")))?;
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::format(tag_at - 8, "zero layer dimension"));
        }
        shapes.push((in_dim, out_dim, act));
    }
    let total: u64 = shapes
        .iter()
        .map(|&(i, o, _)| (i as u64 * o as u64) + o as u64)
        .sum();
    cur.ensure(total, 8, "parameters")?;
    let params_at = cur.offset();
    let mut layers = Vec::with_capacity(shapes.len());
    for (in_dim, out_dim, activation) in shapes {
        let w = (0..in_dim * out_dim)
            .map(|_| cur.f64("weights"))
            .collect::<Result<Vec<_>>>()?;
        let b = (0..out_dim)
            .map(|_| cur.f64("bias"))
            .collect::<Result<Vec<_>>>()?;
        layers.push(Dense {
            weights: Array2::from_shape_vec((out_dim, in_dim), w).expect("shape checked"),
            bias: Array1::from(b),
            activation,
        });
    }
    DenseNet::new(layers).map_err(|e| Error::format(params_at, e.to_string()))
}
