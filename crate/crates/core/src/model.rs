//! A small CNN of `L` conv blocks plus a linear head, with style hooks after
//! each block's activation.
//!
//! Block `l` is `[avg_pool] -> conv (same padding) -> relu`; the pool is
//! skipped for the first block. The head is global average pooling followed
//! by a linear layer. Parameters live in one flat vector ordered
//! `[block_1 kernel, block_1 bias, ..., block_L bias, head weight, head bias]`.

use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::gradcheck::Probe;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::style::StylePlan;
use crate::tensor::{numel, Dims, Tensor4};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Output channels of each block.
    pub channels: Vec<usize>,
    /// Odd square kernel size shared by all blocks.
    pub kernel: usize,
    /// Average-pool window applied before every block except the first.
    pub pool: usize,
    pub classes: usize,
    /// Hooked blocks, 0-based, ascending.
    pub hooks: Vec<usize>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            in_channels: 3,
            height: 16,
            width: 16,
            channels: vec![8, 16, 32],
            kernel: 3,
            pool: 2,
            classes: 5,
            hooks: vec![0, 1, 2],
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad(format!("block channels must be non-empty and positive, got {:?}", self.channels));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return bad(format!("kernel size must be odd, got {}", self.kernel));
        }
        if self.classes < 2 || self.in_channels == 0 {
            return bad("need at least 2 classes and 1 input channel".into());
        }
        if self.pool == 0 {
            return bad("pool window must be at least 1".into());
        }
        let shrink = self.pool.pow(self.channels.len() as u32 - 1);
        if self.height / shrink == 0 || self.width / shrink == 0 {
            return bad(format!(
                "{}x{} input is too small for {} pooled blocks",
                self.height,
                self.width,
                self.channels.len()
            ));
        }
        if self.hooks.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("hooks must be strictly ascending, got {:?}", self.hooks));
        }
        if let Some(h) = self.hooks.iter().find(|&&h| h >= self.channels.len()) {
            return bad(format!("hook on block {} but the model has {} blocks", h + 1, self.channels.len()));
        }
        Ok(())
    }

    pub fn hook_channels(&self) -> Vec<usize> {
        self.hooks.iter().map(|&h| self.channels[h]).collect()
    }

    pub fn input_dims(&self, batch: usize) -> Dims {
        [batch, self.in_channels, self.height, self.width]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub offset: usize,
    pub dims: [usize; 4],
}

impl ParamBlock {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + numel(self.dims)
    }
}

/// Index map of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub total: usize,
    pub blocks: Vec<ParamBlock>,
}

impl ParamLayout {
    fn new(spec: &ModelSpec) -> Self {
        let mut blocks = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, dims: [usize; 4]| {
            blocks.push(ParamBlock { name, offset, dims });
            offset += numel(dims);
        };
        let mut c_in = spec.in_channels;
        for (l, &c) in spec.channels.iter().enumerate() {
            push(format!("block{}.kernel", l + 1), [c, c_in, spec.kernel, spec.kernel]);
            push(format!("block{}.bias", l + 1), [1, c, 1, 1]);
            c_in = c;
        }
        push("head.weight".into(), [spec.classes, c_in, 1, 1]);
        push("head.bias".into(), [1, spec.classes, 1, 1]);
        Self { total: offset, blocks }
    }
}

/// The flat parameter vector of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub values: Vec<f64>,
}

impl ModelParams {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Little-endian `f64` bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() % 8 != 0 {
            return Err(Error::Format(format!("{} bytes is not a whole number of doubles", bytes.len())));
        }
        Ok(Self { values: bytes.chunks_exact(8).map(|w| f64::from_le_bytes(w.try_into().unwrap())).collect() })
    }

    pub fn distance(&self, other: &ModelParams) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }
}

pub struct ForwardOutput {
    pub logits: Var,
    /// Block outputs after the activation and before any style layer.
    pub blocks: Vec<Var>,
    /// One node per parameter tensor, in layout order.
    pub params: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    layout: ParamLayout,
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let layout = ParamLayout::new(&spec);
        Ok(Self { spec, layout })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    /// Parameter range of block `l` (0-based; `L` is the head), kernel and bias together.
    pub fn block_range(&self, l: usize) -> Range<usize> {
        let a = &self.layout.blocks[2 * l];
        let b = &self.layout.blocks[2 * l + 1];
        a.offset..b.range().end
    }

    /// Uniform fan-in scaled init: conv kernels in `+-sqrt(6 / fan_in)`, head
    /// weights in `+-sqrt(3 / fan_in)`, biases zero.
    pub fn init_params(&self, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; self.layout.total];
        let last = self.layout.blocks.len() - 2;
        for (i, b) in self.layout.blocks.iter().enumerate() {
            if b.name.ends_with(".bias") {
                continue;
            }
            let fan_in = (b.dims[1] * b.dims[2] * b.dims[3]) as f64;
            let a = if i == last { (3.0 / fan_in).sqrt() } else { (6.0 / fan_in).sqrt() };
            let t = Tensor4::uniform(b.dims, -a, a, &mut rng);
            values[b.range()].copy_from_slice(t.data());
        }
        ModelParams { values }
    }

    pub fn unflatten(&self, params: &ModelParams) -> Result<Vec<Tensor4>> {
        self.check_len(params)?;
        self.layout.blocks.iter().map(|b| Tensor4::from_vec(b.dims, params.values[b.range()].to_vec())).collect()
    }

    pub fn flatten(&self, tensors: &[Tensor4]) -> Result<ModelParams> {
        if tensors.len() != self.layout.blocks.len() {
            return Err(Error::Input(format!("{} tensors for {} parameter blocks", tensors.len(), self.layout.blocks.len())));
        }
        let mut values = Vec::with_capacity(self.layout.total);
        for (t, b) in tensors.iter().zip(&self.layout.blocks) {
            if t.dims() != b.dims {
                return Err(Error::Shape(format!("{} expects {:?}, got {:?}", b.name, b.dims, t.dims())));
            }
            values.extend_from_slice(t.data());
        }
        Ok(ModelParams { values })
    }

    fn check_len(&self, params: &ModelParams) -> Result<()> {
        if params.len() != self.layout.total {
            return Err(Error::Shape(format!("{} parameters for a model of {}", params.len(), self.layout.total)));
        }
        Ok(())
    }

    /// Builds the forward pass on `g`. Parameters become leaves when
    /// `trainable`, constants otherwise.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &ModelParams,
        x: &Tensor4,
        plan: &StylePlan,
        trainable: bool,
    ) -> Result<ForwardOutput> {
        if plan.actions.len() != self.spec.hooks.len() {
            return Err(Error::Input(format!(
                "style plan has {} actions for {} hooks",
                plan.actions.len(),
                self.spec.hooks.len()
            )));
        }
        let [_, c, h, w] = x.dims();
        if [c, h, w] != [self.spec.in_channels, self.spec.height, self.spec.width] {
            return Err(Error::Shape(format!("input {:?} does not match the model input", x.dims())));
        }
        let tensors = self.unflatten(params)?;
        let pvars: Vec<Var> = tensors.into_iter().map(|t| if trainable { g.leaf(t) } else { g.constant(t) }).collect();
        let pad = self.spec.kernel / 2;
        let mut cur = g.constant(x.clone());
        let mut blocks = Vec::with_capacity(self.spec.channels.len());
        for l in 0..self.spec.channels.len() {
            if l > 0 && self.spec.pool > 1 {
                cur = g.avg_pool2d(cur, self.spec.pool)?;
            }
            cur = g.conv2d(cur, pvars[2 * l], pvars[2 * l + 1], 1, pad)?;
            cur = g.relu(cur)?;
            blocks.push(cur);
            if let Some(hook) = self.spec.hooks.iter().position(|&k| k == l) {
                cur = plan.apply(g, hook, cur)?;
            }
        }
        let pooled = g.global_avg_pool(cur)?;
        let n = pvars.len();
        let logits = g.linear(pooled, pvars[n - 2], pvars[n - 1])?;
        Ok(ForwardOutput { logits, blocks, params: pvars })
    }

    /// Mean cross-entropy and its gradient with respect to the flat parameters.
    pub fn loss_and_grad(
        &self,
        params: &ModelParams,
        x: &Tensor4,
        labels: &[usize],
        plan: &StylePlan,
    ) -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, params, x, plan, true)?;
        let loss = g.softmax_cross_entropy(out.logits, labels)?;
        g.backward(loss)?;
        let mut grad = Vec::with_capacity(self.layout.total);
        for (v, b) in out.params.iter().zip(&self.layout.blocks) {
            match g.grad(*v) {
                Some(gr) => grad.extend_from_slice(gr),
                None => grad.extend(std::iter::repeat_n(0.0, numel(b.dims))),
            }
        }
        Ok((g.value(loss).data()[0], grad))
    }

    /// Loss value and ReLU branch signature, for finite-difference checks.
    pub fn loss_probe(&self, params: &ModelParams, x: &Tensor4, labels: &[usize], plan: &StylePlan) -> Result<Probe> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, params, x, plan, false)?;
        let loss = g.softmax_cross_entropy(out.logits, labels)?;
        Ok(Probe { value: g.value(loss).data()[0], signature: g.kink_signature() })
    }

    /// Plain (style-free) logits, `(B, classes, 1, 1)`.
    pub fn logits(&self, params: &ModelParams, x: &Tensor4) -> Result<Tensor4> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, params, x, &StylePlan::identity(self.spec.hooks.len()), false)?;
        Ok(g.value(out.logits).clone())
    }

    /// Plain outputs of every block.
    pub fn activations(&self, params: &ModelParams, x: &Tensor4) -> Result<Vec<Tensor4>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, params, x, &StylePlan::identity(self.spec.hooks.len()), false)?;
        Ok(out.blocks.iter().map(|&v| g.value(v).clone()).collect())
    }

    pub fn predict(&self, params: &ModelParams, x: &Tensor4) -> Result<Vec<usize>> {
        let logits = self.logits(params, x)?;
        let k = self.spec.classes;
        Ok(logits
            .data()
            .chunks(k)
            .map(|row| {
                row.iter().enumerate().fold(0, |best, (j, v)| if *v > row[best] { j } else { best })
            })
            .collect())
    }

    /// Writes `<stem>.bin` (little-endian doubles) and `<stem>.json` (index map).
    pub fn save_checkpoint(&self, params: &ModelParams, stem: &Path) -> Result<()> {
        self.check_len(params)?;
        std::fs::write(stem.with_extension("bin"), params.to_bytes())?;
        let json = serde_json::to_string_pretty(&self.layout).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(stem.with_extension("json"), json)?;
        Ok(())
    }

    pub fn load_checkpoint(&self, stem: &Path) -> Result<ModelParams> {
        let json = std::fs::read_to_string(stem.with_extension("json"))?;
        let layout: ParamLayout = serde_json::from_str(&json).map_err(|e| Error::Format(e.to_string()))?;
        if layout != self.layout {
            return Err(Error::Format("checkpoint index map does not match the model".into()));
        }
        let params = ModelParams::from_bytes(&std::fs::read(stem.with_extension("bin"))?)?;
        self.check_len(&params).map_err(|_| Error::Format("checkpoint length does not match its index map".into()))?;
        Ok(params)
    }
}
