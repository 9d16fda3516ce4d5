//! Small dense networks with hand-written reverse mode.
//!
//! Parameters live in one flat vector. For each layer the weight matrix
//! comes first (row-major, `out x in`), then the bias.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn grad(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    /// Layer widths including input and output, e.g. `[8, 64, 64, 2]`.
    pub sizes: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
}

impl MlpSpec {
    pub fn new(sizes: Vec<usize>, hidden: Activation, output: Activation) -> Self {
        assert!(sizes.len() >= 2 && sizes.iter().all(|&s| s > 0), "bad layer sizes {sizes:?}");
        Self { sizes, hidden, output }
    }

    pub fn input_width(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    /// Offset of layer `l`'s weight block in the flat vector.
    pub fn weight_offset(&self, l: usize) -> usize {
        self.sizes.windows(2).take(l).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn bias_offset(&self, l: usize) -> usize {
        self.weight_offset(l) + self.sizes[l] * self.sizes[l + 1]
    }

    pub fn param_count(&self) -> usize {
        self.weight_offset(self.layers())
    }

    fn activation(&self, l: usize) -> Activation {
        if l + 1 == self.layers() {
            self.output
        } else {
            self.hidden
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: Vec<f64>,
}

/// Intermediate values of one forward pass, kept for backward.
#[derive(Debug, Clone)]
pub struct Tape {
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.acts.last().unwrap()
    }

    /// Output layer values before its activation.
    pub fn pre_output(&self) -> &[f64] {
        self.pre.last().unwrap()
    }
}

impl Mlp {
    pub fn zeros(spec: MlpSpec) -> Self {
        let n = spec.param_count();
        Self { spec, params: vec![0.0; n] }
    }

    /// Uniform fan-in initialization, `U(-1/sqrt(in), 1/sqrt(in))`, with the
    /// last layer's weights scaled down to `final_scale`.
    pub fn init<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R, final_scale: f64) -> Self {
        let mut net = Self::zeros(spec);
        for l in 0..net.spec.layers() {
            let fan_in = net.spec.sizes[l];
            let bound = if l + 1 == net.spec.layers() { final_scale } else { 1.0 / (fan_in as f64).sqrt() };
            let start = net.spec.weight_offset(l);
            let end = net.spec.weight_offset(l + 1);
            for p in &mut net.params[start..end] {
                *p = rng.random_range(-bound..=bound);
            }
        }
        net
    }

    pub fn from_params(spec: MlpSpec, params: Vec<f64>) -> Result<Self, NnError> {
        if params.len() != spec.param_count() {
            return Err(NnError::Shape { expected: spec.param_count(), got: params.len() });
        }
        Ok(Self { spec, params })
    }

    pub fn weight(&self, l: usize, row: usize, col: usize) -> f64 {
        self.params[self.spec.weight_offset(l) + row * self.spec.sizes[l] + col]
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        self.check_input(x)?;
        let mut a = x.to_vec();
        for l in 0..self.spec.layers() {
            a = self.layer(l, &a).1;
        }
        Ok(a)
    }

    pub fn forward_tape(&self, x: &[f64]) -> Result<Tape, NnError> {
        self.check_input(x)?;
        let mut acts = vec![x.to_vec()];
        let mut pre = Vec::with_capacity(self.spec.layers());
        for l in 0..self.spec.layers() {
            let (z, a) = self.layer(l, acts.last().unwrap());
            pre.push(z);
            acts.push(a);
        }
        Ok(Tape { acts, pre })
    }

    fn check_input(&self, x: &[f64]) -> Result<(), NnError> {
        if x.len() != self.spec.input_width() {
            return Err(NnError::Shape { expected: self.spec.input_width(), got: x.len() });
        }
        Ok(())
    }

    fn layer(&self, l: usize, input: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (n_in, n_out) = (self.spec.sizes[l], self.spec.sizes[l + 1]);
        let w = &self.params[self.spec.weight_offset(l)..self.spec.bias_offset(l)];
        let b = &self.params[self.spec.bias_offset(l)..self.spec.bias_offset(l) + n_out];
        let act = self.spec.activation(l);
        let mut z = Vec::with_capacity(n_out);
        let mut a = Vec::with_capacity(n_out);
        for o in 0..n_out {
            let row = &w[o * n_in..(o + 1) * n_in];
            let v = row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + b[o];
            z.push(v);
            a.push(act.apply(v));
        }
        (z, a)
    }

    /// Accumulates `d(sum_j grad_out_j * y_j)/dparams` into `param_grad` and
    /// returns the gradient with respect to the input.
    pub fn backward(&self, tape: &Tape, grad_out: &[f64], param_grad: &mut [f64]) -> Vec<f64> {
        assert_eq!(param_grad.len(), self.params.len());
        self.backprop(tape, grad_out, None, Some(param_grad))
    }

    /// Like [`Mlp::backward`], with `grad_pre` added to the gradient at the
    /// output layer's pre-activation.
    pub fn backward_with_pre(&self, tape: &Tape, grad_out: &[f64], grad_pre: &[f64], param_grad: &mut [f64]) -> Vec<f64> {
        assert_eq!(param_grad.len(), self.params.len());
        assert_eq!(grad_pre.len(), self.spec.output_width());
        self.backprop(tape, grad_out, Some(grad_pre), Some(param_grad))
    }

    /// Gradient with respect to the input only.
    pub fn input_grad(&self, tape: &Tape, grad_out: &[f64]) -> Vec<f64> {
        self.backprop(tape, grad_out, None, None)
    }

    fn backprop(
        &self,
        tape: &Tape,
        grad_out: &[f64],
        grad_pre: Option<&[f64]>,
        mut param_grad: Option<&mut [f64]>,
    ) -> Vec<f64> {
        assert_eq!(grad_out.len(), self.spec.output_width());
        let mut delta: Vec<f64> = grad_out.to_vec();
        for l in (0..self.spec.layers()).rev() {
            let (n_in, n_out) = (self.spec.sizes[l], self.spec.sizes[l + 1]);
            let act = self.spec.activation(l);
            for o in 0..n_out {
                delta[o] *= act.grad(tape.pre[l][o], tape.acts[l + 1][o]);
            }
            if let (Some(g), true) = (grad_pre, l + 1 == self.spec.layers()) {
                for (d, g) in delta.iter_mut().zip(g) {
                    *d += g;
                }
            }
            let input = &tape.acts[l];
            let w_off = self.spec.weight_offset(l);
            let b_off = self.spec.bias_offset(l);
            let mut next = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let w_row = &self.params[w_off + o * n_in..w_off + (o + 1) * n_in];
                for i in 0..n_in {
                    next[i] += d * w_row[i];
                }
                if let Some(pg) = param_grad.as_deref_mut() {
                    let g_row = &mut pg[w_off + o * n_in..w_off + (o + 1) * n_in];
                    for i in 0..n_in {
                        g_row[i] += d * input[i];
                    }
                    pg[b_off + o] += d;
                }
            }
            delta = next;
        }
        delta
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let text = serde_json::to_string(&Checkpoint { format: CHECKPOINT_FORMAT.into(), net: self.clone() })
            .map_err(|e| NnError::Format(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let text = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| NnError::Format(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(NnError::Format(format!("unknown format {:?}", ck.format)));
        }
        Self::from_params(ck.net.spec, ck.net.params)
    }
}

const CHECKPOINT_FORMAT: &str = "netslice-mlp/1";

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    net: Mlp,
}

/// `target <- tau * online + (1 - tau) * target`.
pub fn soft_update(target: &mut Mlp, online: &Mlp, tau: f64) {
    assert_eq!(target.spec, online.spec, "soft update across different layouts");
    if tau == 1.0 {
        target.params.copy_from_slice(&online.params);
        return;
    }
    for (t, o) in target.params.iter_mut().zip(&online.params) {
        *t = tau * o + (1.0 - tau) * *t;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Gradients with a larger L2 norm are rescaled to this norm.
    pub max_grad_norm: Option<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, params: usize) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, max_grad_norm: None, m: vec![0.0; params], v: vec![0.0; params], t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Descends along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        let scale = match self.max_grad_norm {
            Some(max) => {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i] * scale;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }

    pub fn reset(&mut self) {
        self.m.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
        self.t = 0;
    }
}

/// Relative error between an analytic gradient and central finite
/// differences of `sum_j c_j * y_j`, over both parameters and inputs.
pub fn gradient_check(net: &Mlp, x: &[f64], c: &[f64], h: f64) -> f64 {
    let tape = net.forward_tape(x).unwrap();
    let mut pg = vec![0.0; net.params.len()];
    let ig = net.backward(&tape, c, &mut pg);
    let loss = |n: &Mlp, x: &[f64]| n.forward(x).unwrap().iter().zip(c).map(|(y, c)| y * c).sum::<f64>();
    let mut probe = net.clone();
    let mut num_p = Vec::with_capacity(pg.len());
    for i in 0..pg.len() {
        let orig = probe.params[i];
        probe.params[i] = orig + h;
        let up = loss(&probe, x);
        probe.params[i] = orig - h;
        let down = loss(&probe, x);
        probe.params[i] = orig;
        num_p.push((up - down) / (2.0 * h));
    }
    let mut xs = x.to_vec();
    let mut num_i = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let up = loss(net, &xs);
        xs[i] = orig - h;
        let down = loss(net, &xs);
        xs[i] = orig;
        num_i.push((up - down) / (2.0 * h));
    }
    let analytic = pg.iter().chain(&ig);
    let numeric = num_p.iter().chain(&num_i);
    let (mut diff, mut a2, mut n2) = (0.0, 0.0, 0.0);
    for (a, n) in analytic.zip(numeric) {
        diff += (a - n) * (a - n);
        a2 += a * a;
        n2 += n * n;
    }
    diff.sqrt() / a2.sqrt().max(n2.sqrt()).max(1e-12)
}
