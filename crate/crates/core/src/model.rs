//! The two-convolution keyword-spotting network:
//! `conv1 -> relu -> maxpool -> channel mask -> conv2 -> relu -> dense -> softmax`.

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::grouping::{ChannelMask, GroupPartition};
use crate::nn;
use crate::prox::binary_project_where;
use crate::tensor::Tensor;

pub const CONV1_W: usize = 0;
pub const CONV1_B: usize = 1;
pub const CONV2_W: usize = 2;
pub const CONV2_B: usize = 3;
pub const DENSE_W: usize = 4;
pub const DENSE_B: usize = 5;
pub const NUM_PARAMS: usize = 6;

pub const PARAM_NAMES: [&str; NUM_PARAMS] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "dense.weight",
    "dense.bias",
];

/// First convolution: `m x r` kernel over the single-channel spectrogram,
/// `filters` feature maps, strides `(s, u)` in time and frequency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv1Config {
    pub m: usize,
    pub r: usize,
    pub filters: usize,
    pub s: usize,
    pub u: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2Config {
    pub m: usize,
    pub r: usize,
    pub channels: usize,
    pub filters: usize,
    pub s: usize,
    pub u: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub t: usize,
    pub f: usize,
    pub conv1: Conv1Config,
    pub pool: (usize, usize),
    pub conv2: Conv2Config,
    pub num_classes: usize,
    pub seed: u64,
}

/// Spatial sizes of every stage for a config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerDims {
    pub conv1: (usize, usize),
    pub pool: (usize, usize),
    pub conv2: (usize, usize),
    pub dense_in: usize,
}

impl ModelConfig {
    /// CPU-sized network used by tests and the default CLI runs.
    pub fn toy() -> Self {
        Self {
            t: 32,
            f: 16,
            conv1: Conv1Config { m: 4, r: 4, filters: 16, s: 1, u: 1 },
            pool: (2, 2),
            conv2: Conv2Config { m: 3, r: 3, channels: 16, filters: 24, s: 1, u: 1 },
            num_classes: 4,
            seed: 0,
        }
    }

    /// The full-size layout: 98x40 spectrogram, 8x20 first kernel with 64
    /// filters, 64 channels into the second convolution, 12 classes.
    pub fn full_size() -> Self {
        Self {
            t: 98,
            f: 40,
            conv1: Conv1Config { m: 8, r: 20, filters: 64, s: 1, u: 1 },
            pool: (2, 2),
            conv2: Conv2Config { m: 4, r: 10, channels: 64, filters: 64, s: 1, u: 1 },
            num_classes: 12,
            seed: 0,
        }
    }

    pub fn dims(&self) -> Result<LayerDims> {
        let c1 = &self.conv1;
        let c2 = &self.conv2;
        let all_positive = [
            self.t, self.f, c1.m, c1.r, c1.filters, c1.s, c1.u, self.pool.0, self.pool.1, c2.m,
            c2.r, c2.channels, c2.filters, c2.s, c2.u,
        ]
        .iter()
        .all(|&d| d > 0);
        if !all_positive {
            return Err(Error::Config("all model dimensions must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        if c1.filters != c2.channels {
            return Err(Error::Config(format!(
                "conv1 has {} filters but conv2 expects {} channels",
                c1.filters, c2.channels
            )));
        }
        if c1.m > self.t || c1.r > self.f {
            return Err(Error::Config("conv1 kernel larger than the input".into()));
        }
        let conv1 = nn::conv_output_dims(self.t, self.f, c1.m, c1.r, c1.s, c1.u);
        let pool = (conv1.0 / self.pool.0, conv1.1 / self.pool.1);
        if pool.0 == 0 || pool.1 == 0 {
            return Err(Error::Config(format!("pool {:?} larger than conv1 output {conv1:?}", self.pool)));
        }
        if c2.m > pool.0 || c2.r > pool.1 {
            return Err(Error::Config(format!("conv2 kernel larger than pooled maps {pool:?}")));
        }
        let conv2 = nn::conv_output_dims(pool.0, pool.1, c2.m, c2.r, c2.s, c2.u);
        if conv2.0 == 0 || conv2.1 == 0 || conv1.0 == 0 || conv1.1 == 0 {
            return Err(Error::Config("strides leave an empty feature map".into()));
        }
        Ok(LayerDims {
            conv1,
            pool,
            conv2,
            dense_in: conv2.0 * conv2.1 * c2.filters,
        })
    }

    pub fn param_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let dims = self.dims()?;
        let c1 = &self.conv1;
        let c2 = &self.conv2;
        Ok(vec![
            vec![c1.m, c1.r, 1, c1.filters],
            vec![c1.filters],
            vec![c2.m, c2.r, c2.channels, c2.filters],
            vec![c2.filters],
            vec![dims.dense_in, self.num_classes],
            vec![self.num_classes],
        ])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Tensor>,
    mask: Option<ChannelMask>,
}

/// Intermediate activations of one forward pass.
struct Cache {
    input: Tensor,
    a1: Tensor,
    arg1: Vec<usize>,
    m1: Tensor,
    a2: Tensor,
}

impl Model {
    /// Glorot-uniform weights drawn from `config.seed`, zero biases, no mask.
    pub fn build(config: ModelConfig) -> Result<Self> {
        let shapes = config.param_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = shapes
            .iter()
            .enumerate()
            .map(|(i, shape)| {
                if i % 2 == 1 {
                    return Tensor::zeros(shape);
                }
                let (fan_in, fan_out) = if shape.len() == 4 {
                    let area = shape[0] * shape[1];
                    (area * shape[2], area * shape[3])
                } else {
                    (shape[0], shape[1])
                };
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
                let n = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| dist.sample(&mut rng)).collect())
                    .expect("shape from config")
            })
            .collect();
        Ok(Self {
            config,
            params,
            mask: None,
        })
    }

    /// Reassembles a model from stored parts, checking shapes.
    pub fn from_parts(config: ModelConfig, params: Vec<Tensor>, mask: Option<ChannelMask>) -> Result<Self> {
        let shapes = config.param_shapes()?;
        if params.len() != shapes.len() {
            return Err(Error::TensorCount {
                expected: shapes.len(),
                found: params.len(),
            });
        }
        for (i, (p, s)) in params.iter().zip(&shapes).enumerate() {
            if p.shape() != s.as_slice() {
                return dim_err(format!(
                    "{} has shape {:?}, config needs {s:?}",
                    PARAM_NAMES[i],
                    p.shape()
                ));
            }
        }
        if let Some(m) = &mask {
            if m.len() != config.conv2.channels {
                return dim_err(format!(
                    "mask over {} channels for a model with {}",
                    m.len(),
                    config.conv2.channels
                ));
            }
        }
        Ok(Self { config, params, mask })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn mask(&self) -> Option<&ChannelMask> {
        self.mask.as_ref()
    }

    /// Replaces all parameters; masked coordinates are re-zeroed.
    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        let mut next = Self::from_parts(self.config.clone(), params, self.mask.clone())?;
        next.enforce_mask()?;
        *self = next;
        Ok(())
    }

    /// Channel groups `W2[:, :, g, :]` of the second convolution kernel.
    pub fn channel_partition(&self) -> GroupPartition {
        GroupPartition::along_axis(self.params[CONV2_W].shape(), 2).expect("rank-4 kernel")
    }

    /// Filter groups `W1[:, :, :, g]` of the first convolution kernel.
    pub fn filter_partition(&self) -> GroupPartition {
        GroupPartition::along_axis(self.params[CONV1_W].shape(), 3).expect("rank-4 kernel")
    }

    /// One partition slot per parameter; only the second conv kernel is grouped.
    pub fn partitions(&self) -> Vec<Option<GroupPartition>> {
        let mut parts = vec![None; NUM_PARAMS];
        parts[CONV2_W] = Some(self.channel_partition());
        parts
    }

    /// Per-coordinate keep flags implied by the mask: conv1 filters, conv1
    /// biases and conv2 channel slices of pruned channels. `None` where the
    /// mask does not reach.
    pub fn coordinate_keep(&self) -> Result<Vec<Option<Vec<bool>>>> {
        let mut keep = vec![None; NUM_PARAMS];
        if let Some(mask) = &self.mask {
            keep[CONV1_W] = Some(mask.coordinate_keep(&self.filter_partition())?);
            keep[CONV1_B] = Some(mask.bits().to_vec());
            keep[CONV2_W] = Some(mask.coordinate_keep(&self.channel_partition())?);
        }
        Ok(keep)
    }

    /// Freezes `mask` into the model and zeros the pruned channels.
    pub fn apply_mask(&mut self, mask: ChannelMask) -> Result<()> {
        if mask.len() != self.config.conv2.channels {
            return dim_err(format!(
                "mask over {} channels for a model with {}",
                mask.len(),
                self.config.conv2.channels
            ));
        }
        if mask.zeros() == mask.len() {
            return Err(Error::Degenerate("mask prunes every channel".into()));
        }
        self.mask = Some(mask);
        self.enforce_mask()
    }

    /// Re-zeros every masked coordinate.
    pub fn enforce_mask(&mut self) -> Result<()> {
        let keep = self.coordinate_keep()?;
        crate::optim::zero_masked(&mut self.params, &keep)
    }

    /// Mask keeping exactly the channels whose conv2 slice is nonzero.
    pub fn mask_from_weights(&self) -> ChannelMask {
        mask_from_conv2(&self.params[CONV2_W], 0.0).expect("own kernel")
    }

    /// Replaces the three weight tensors by their (masked) binary projections.
    pub fn binarize(&self) -> Result<Model> {
        let keep = self.coordinate_keep()?;
        let mut out = self.clone();
        for i in [CONV1_W, CONV2_W, DENSE_W] {
            let k = keep[i].clone().unwrap_or_else(|| vec![true; self.params[i].len()]);
            out.params[i] = binary_project_where(&self.params[i], &k)?.reconstruct();
        }
        Ok(out)
    }

    fn check_input(&self, input: &Tensor) -> Result<Tensor> {
        let (t, f) = (self.config.t, self.config.f);
        if input.len() != t * f || (input.rank() != 2 && input.rank() != 3) || input.shape()[..2] != [t, f] {
            return dim_err(format!("input {:?} does not match model input {t}x{f}", input.shape()));
        }
        input.clone().reshape(&[t, f, 1])
    }

    fn forward_cached(&self, params: &[Tensor], input: &Tensor) -> Result<(Tensor, Cache)> {
        let c1 = &self.config.conv1;
        let c2 = &self.config.conv2;
        let input = self.check_input(input)?;
        let mut z1 = nn::conv2d_forward(&input, &params[CONV1_W], c1.s, c1.u)?;
        nn::add_channel_bias(&mut z1, &params[CONV1_B])?;
        let a1 = nn::relu_forward(&z1);
        let (mut m1, arg1) = nn::maxpool_forward(&a1, self.config.pool.0, self.config.pool.1)?;
        if let Some(mask) = &self.mask {
            apply_channel_mask(&mut m1, mask);
        }
        let mut z2 = nn::conv2d_forward(&m1, &params[CONV2_W], c2.s, c2.u)?;
        nn::add_channel_bias(&mut z2, &params[CONV2_B])?;
        let a2 = nn::relu_forward(&z2);
        let logits = nn::dense_forward(&a2, &params[DENSE_W], &params[DENSE_B])?;
        Ok((logits, Cache { input, a1, arg1, m1, a2 }))
    }

    fn backward(&self, params: &[Tensor], cache: &Cache, grad_logits: &Tensor) -> Result<Vec<Tensor>> {
        let c1 = &self.config.conv1;
        let c2 = &self.config.conv2;
        let (g_a2, g_dw, g_db) = nn::dense_backward(&cache.a2, &params[DENSE_W], &params[DENSE_B], grad_logits)?;
        let g_z2 = nn::relu_backward(&cache.a2, &g_a2)?;
        let g_b2 = nn::channel_bias_grad(&g_z2);
        let (mut g_m1, g_w2) = nn::conv2d_backward(&cache.m1, &params[CONV2_W], &g_z2, c2.s, c2.u)?;
        if let Some(mask) = &self.mask {
            apply_channel_mask(&mut g_m1, mask);
        }
        let g_a1 = nn::maxpool_backward(cache.a1.shape(), &cache.arg1, &g_m1)?;
        let g_z1 = nn::relu_backward(&cache.a1, &g_a1)?;
        let g_b1 = nn::channel_bias_grad(&g_z1);
        let (_, g_w1) = nn::conv2d_backward(&cache.input, &params[CONV1_W], &g_z1, c1.s, c1.u)?;
        Ok(vec![g_w1, g_b1, g_w2, g_b2, g_dw, g_db])
    }

    fn check_params(&self, params: &[Tensor]) -> Result<()> {
        if params.len() != NUM_PARAMS {
            return Err(Error::TensorCount { expected: NUM_PARAMS, found: params.len() });
        }
        for (p, own) in params.iter().zip(&self.params) {
            p.check_same_shape(own, "parameter")?;
        }
        Ok(())
    }

    /// Logits for one `t x f` input.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.forward_with(&self.params, input)
    }

    /// Logits using `params` in place of the model's own weights.
    pub fn forward_with(&self, params: &[Tensor], input: &Tensor) -> Result<Tensor> {
        self.check_params(params)?;
        Ok(self.forward_cached(params, input)?.0)
    }

    /// Logits for a batch, shape `(batch, K)`.
    pub fn forward_batch(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        if inputs.is_empty() {
            return dim_err("empty batch");
        }
        let mut out = Vec::with_capacity(inputs.len() * self.config.num_classes);
        for x in inputs {
            out.extend_from_slice(self.forward(x)?.data());
        }
        Tensor::new(&[inputs.len(), self.config.num_classes], out)
    }

    pub fn predict(&self, input: &Tensor) -> Result<usize> {
        Ok(self.forward(input)?.argmax())
    }

    /// Mean cross-entropy over the batch and its gradient for every parameter,
    /// evaluated at `params`. Per-example gradients are summed in batch order.
    pub fn loss_and_grads_with(
        &self,
        params: &[Tensor],
        inputs: &[&Tensor],
        labels: &[usize],
    ) -> Result<(f64, Vec<Tensor>)> {
        self.check_params(params)?;
        if inputs.is_empty() || inputs.len() != labels.len() {
            return dim_err(format!("{} inputs with {} labels", inputs.len(), labels.len()));
        }
        let mut total = 0.0;
        let mut grads: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        for (x, &label) in inputs.iter().zip(labels) {
            let (logits, cache) = self.forward_cached(params, x)?;
            let (loss, g_logits) = nn::softmax_cross_entropy(&logits, label)?;
            total += loss;
            for (acc, g) in grads.iter_mut().zip(self.backward(params, &cache, &g_logits)?) {
                acc.axpy(1.0, &g)?;
            }
        }
        let scale = 1.0 / inputs.len() as f64;
        for g in &mut grads {
            g.scale(scale);
        }
        Ok((total * scale, grads))
    }

    pub fn loss_and_grads(&self, inputs: &[&Tensor], labels: &[usize]) -> Result<(f64, Vec<Tensor>)> {
        self.loss_and_grads_with(&self.params, inputs, labels)
    }

    /// Mean cross-entropy at `params` without gradients.
    pub fn loss_with(&self, params: &[Tensor], inputs: &[&Tensor], labels: &[usize]) -> Result<f64> {
        self.check_params(params)?;
        if inputs.is_empty() || inputs.len() != labels.len() {
            return dim_err(format!("{} inputs with {} labels", inputs.len(), labels.len()));
        }
        let mut total = 0.0;
        for (x, &label) in inputs.iter().zip(labels) {
            let logits = self.forward_cached(params, x)?.0;
            total += nn::softmax_cross_entropy(&logits, label)?.0;
        }
        Ok(total / inputs.len() as f64)
    }

    /// Largest relative gap between backprop and central differences on one
    /// example, over up to `samples_per_tensor` coordinates of each tensor.
    pub fn gradient_check(
        &self,
        input: &Tensor,
        label: usize,
        eps: f64,
        samples_per_tensor: usize,
        seed: u64,
    ) -> Result<f64> {
        let (_, grads) = self.loss_and_grads(&[input], &[label])?;
        nn::finite_difference_check(
            &self.params,
            &grads,
            |p| self.loss_with(p, &[input], &[label]),
            eps,
            samples_per_tensor,
            seed,
        )
    }
}

/// Keeps every channel whose slice of a conv2-shaped tensor has norm above `zero_tol`.
pub fn mask_from_conv2(kernel: &Tensor, zero_tol: f64) -> Result<ChannelMask> {
    if kernel.rank() != 4 {
        return dim_err(format!("expected a rank-4 kernel, got {:?}", kernel.shape()));
    }
    let part = GroupPartition::along_axis(kernel.shape(), 2)?;
    ChannelMask::from_group_norms(kernel, &part, zero_tol)
}

fn apply_channel_mask(x: &mut Tensor, mask: &ChannelMask) {
    let c = mask.len();
    for chunk in x.data_mut().chunks_mut(c) {
        for (v, &keep) in chunk.iter_mut().zip(mask.bits()) {
            if !keep {
                *v = 0.0;
            }
        }
    }
}
