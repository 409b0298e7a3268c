//! Small trainable building blocks shared by the discriminator and the
//! classifier's feature extractor, plus the Adam optimiser.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{
    avgpool2, avgpool2_backward, conv3x3, conv3x3_backward, leaky_relu, leaky_relu_grad, Tensor3,
};

pub(crate) fn init_normal(rng: &mut ChaCha8Rng, n: usize, std: f32) -> Vec<f32> {
    let dist = Normal::new(0.0f32, std).expect("finite std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

pub(crate) fn he_std(fan_in: usize) -> f32 {
    (2.0 / (fan_in as f32 * (1.0 + crate::tensor::LEAKY_SLOPE * crate::tensor::LEAKY_SLOPE))).sqrt()
}

/// Conv 3×3 → LeakyReLU → optional 2× average pool.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub in_channels: usize,
    pub out_channels: usize,
    pub pool: bool,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvBlock {
    pub fn new(rng: &mut ChaCha8Rng, in_channels: usize, out_channels: usize, pool: bool) -> Self {
        Self {
            in_channels,
            out_channels,
            pool,
            weight: init_normal(rng, out_channels * in_channels * 9, he_std(in_channels * 9)),
            bias: vec![0.0; out_channels],
        }
    }
}

/// A sequential stack of [`ConvBlock`]s over a fixed input shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvStack {
    pub input_shape: [usize; 3],
    pub blocks: Vec<ConvBlock>,
}

/// Intermediate values recorded by [`ConvStack::forward_tape`].
#[derive(Clone, Debug)]
pub struct ConvTape {
    pub inputs: Vec<Tensor3>,
    pub pre: Vec<Tensor3>,
    /// Post-activation output of each block, before pooling.
    pub activations: Vec<Tensor3>,
    pub output: Tensor3,
}

#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub weight: Vec<Vec<f32>>,
    pub bias: Vec<Vec<f32>>,
}

impl ConvGrads {
    pub fn zeros_like(stack: &ConvStack) -> Self {
        Self {
            weight: stack.blocks.iter().map(|b| vec![0.0; b.weight.len()]).collect(),
            bias: stack.blocks.iter().map(|b| vec![0.0; b.bias.len()]).collect(),
        }
    }

    pub fn flatten(self) -> Vec<Vec<f32>> {
        self.weight
            .into_iter()
            .zip(self.bias)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }
}

impl ConvStack {
    pub fn new(rng: &mut ChaCha8Rng, input_shape: [usize; 3], layout: &[(usize, bool)]) -> Self {
        let mut in_ch = input_shape[0];
        let blocks = layout
            .iter()
            .map(|&(out, pool)| {
                let b = ConvBlock::new(rng, in_ch, out, pool);
                in_ch = out;
                b
            })
            .collect();
        Self {
            input_shape,
            blocks,
        }
    }

    pub fn output_shape(&self) -> [usize; 3] {
        let [_, mut h, mut w] = self.input_shape;
        let mut c = self.input_shape[0];
        for b in &self.blocks {
            c = b.out_channels;
            if b.pool {
                h /= 2;
                w /= 2;
            }
        }
        [c, h, w]
    }

    /// Spatial size of block `index`'s activation (before its pooling).
    pub fn activation_shape(&self, index: usize) -> [usize; 3] {
        let [_, mut h, mut w] = self.input_shape;
        for b in &self.blocks[..index] {
            if b.pool {
                h /= 2;
                w /= 2;
            }
        }
        [self.blocks[index].out_channels, h, w]
    }

    fn block_forward(block: &ConvBlock, x: &Tensor3) -> (Tensor3, Tensor3) {
        let pre = conv3x3(x, &block.weight, &block.bias);
        let mut act = pre.clone();
        act.map_inplace(leaky_relu);
        (pre, act)
    }

    pub fn forward(&self, x: &Tensor3) -> Tensor3 {
        let mut h = x.clone();
        for b in &self.blocks {
            let (_, act) = Self::block_forward(b, &h);
            h = if b.pool { avgpool2(&act) } else { act };
        }
        h
    }

    /// Runs the blocks after `start` given block `start`'s activation
    /// (pre-pooling) and returns the stack output.
    pub fn forward_from(&self, start: usize, activation: &Tensor3) -> Tensor3 {
        let mut h = if self.blocks[start].pool {
            avgpool2(activation)
        } else {
            activation.clone()
        };
        for b in &self.blocks[start + 1..] {
            let (_, act) = Self::block_forward(b, &h);
            h = if b.pool { avgpool2(&act) } else { act };
        }
        h
    }

    pub fn forward_tape(&self, x: &Tensor3) -> ConvTape {
        let mut inputs = Vec::with_capacity(self.blocks.len());
        let mut pre = Vec::with_capacity(self.blocks.len());
        let mut activations = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for b in &self.blocks {
            let (p, act) = Self::block_forward(b, &h);
            let next = if b.pool { avgpool2(&act) } else { act.clone() };
            inputs.push(std::mem::replace(&mut h, next));
            pre.push(p);
            activations.push(act);
        }
        ConvTape {
            inputs,
            pre,
            activations,
            output: h,
        }
    }

    /// Backpropagates `grad_output` (w.r.t. the stack output). Returns the
    /// gradient w.r.t. block `stop`'s activation when `stop` is given,
    /// otherwise w.r.t. the stack input (an empty tensor when `input_grad`
    /// is false). Parameter gradients of the blocks traversed are
    /// accumulated into `grads` when provided.
    pub fn backward(
        &self,
        tape: &ConvTape,
        grad_output: &Tensor3,
        mut grads: Option<&mut ConvGrads>,
        stop: Option<usize>,
        input_grad: bool,
    ) -> Tensor3 {
        let mut g = grad_output.clone();
        for i in (0..self.blocks.len()).rev() {
            let b = &self.blocks[i];
            if b.pool {
                g = avgpool2_backward(&g);
            }
            if stop == Some(i) {
                return g;
            }
            let mut g_pre = g;
            for (gv, p) in g_pre.data_mut().iter_mut().zip(tape.pre[i].data()) {
                *gv *= leaky_relu_grad(*p);
            }
            let params = grads
                .as_deref_mut()
                .map(|gr| (gr.weight[i].as_mut_slice(), gr.bias[i].as_mut_slice()));
            let want_input = i > 0 || input_grad;
            g = match conv3x3_backward(&tape.inputs[i], &b.weight, &g_pre, params, want_input) {
                Some(gi) => gi,
                None => return Tensor3::zeros(0, 0, 0),
            };
        }
        g
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f32]> {
        self.blocks
            .iter_mut()
            .flat_map(|b| [b.weight.as_mut_slice(), b.bias.as_mut_slice()])
            .collect()
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32, beta1: f32, beta2: f32) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update; `grads[i]` is scaled by `scale` before use.
    pub fn update(&mut self, params: Vec<&mut [f32]>, grads: &[Vec<f32>], scale: f32) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                let gi = g[i] * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                p[i] -= self.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
            }
        }
    }
}

pub(crate) fn shuffled_indices(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
