//! Residual 1-D convolutional encoder for multivariate time series.
//!
//! Three residual blocks (widths 64/128/128), each with conv→bn→relu stages
//! of kernel sizes 8/5/3 and a 1×1-conv + batch-norm shortcut whenever the
//! channel count changes; the residual sum feeds the block's final relu. The
//! embedding is the global average pool of the last feature map, and an
//! optional linear head provides logits for cross-entropy training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{channel_stats, Tape, TapeBinding, Var};
use crate::tensor::{Parameter, Parameterized, Tensor};

/// Momentum of the running batch-norm statistics: running ← 0.9·running + 0.1·batch.
pub const BN_MOMENTUM: f64 = 0.1;

/// Forward-pass mode. Train mode normalizes with batch statistics and may
/// update the running statistics; eval mode uses the stored running values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train { update_stats: bool },
    Eval,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub block_widths: [usize; 3],
    pub kernel_sizes: [usize; 3],
    pub embedding_size: usize,
}

impl BackboneConfig {
    pub fn new(in_channels: usize) -> Self {
        BackboneConfig {
            in_channels,
            block_widths: [64, 128, 128],
            kernel_sizes: [8, 5, 3],
            embedding_size: 128,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        if self.embedding_size != self.block_widths[2] {
            return Err(Error::Config(format!(
                "embedding_size {} must equal the last block width {}",
                self.embedding_size, self.block_widths[2]
            )));
        }
        if self.block_widths.iter().any(|&w| w == 0) || self.kernel_sizes.iter().any(|&k| k == 0) {
            return Err(Error::Config(
                "block widths and kernel sizes must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Conv1dLayer {
    weight: Parameter,
    bias: Parameter,
}

impl Conv1dLayer {
    fn init(name: &str, c_out: usize, c_in: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        // Kaiming-uniform with relu gain: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
        let bound = (6.0 / (c_in * k) as f64).sqrt();
        let data: Vec<f64> = (0..c_out * c_in * k)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Conv1dLayer {
            weight: Parameter::new(
                format!("{name}.weight"),
                Tensor::new(&[c_out, c_in, k], data).expect("init shape is consistent"),
            ),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[c_out])),
        }
    }

    fn forward(&self, tape: &mut Tape, binding: &TapeBinding, x: Var) -> Result<Var> {
        let w = binding.var(&self.weight.name)?;
        let b = binding.var(&self.bias.name)?;
        tape.conv1d(x, w, b)
    }
}

#[derive(Debug, Clone)]
struct BatchNorm1dLayer {
    gamma: Parameter,
    beta: Parameter,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

impl BatchNorm1dLayer {
    fn init(name: &str, channels: usize) -> Self {
        BatchNorm1dLayer {
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: Parameter::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    fn forward(
        &mut self,
        tape: &mut Tape,
        binding: &TapeBinding,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let g = binding.var(&self.gamma.name)?;
        let b = binding.var(&self.beta.name)?;
        match mode {
            Mode::Train { update_stats } => {
                let (mean, var) = channel_stats(tape.value(x))?;
                if update_stats {
                    for (r, m) in self.running_mean.iter_mut().zip(&mean) {
                        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
                    }
                    for (r, v) in self.running_var.iter_mut().zip(&var) {
                        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                    }
                }
                tape.batchnorm1d(x, g, b, &mean, &var, true)
            }
            Mode::Eval => tape.batchnorm1d(x, g, b, &self.running_mean, &self.running_var, false),
        }
    }
}

#[derive(Debug, Clone)]
struct ConvStage {
    conv: Conv1dLayer,
    bn: BatchNorm1dLayer,
}

#[derive(Debug, Clone)]
struct ResidualBlock {
    stages: Vec<ConvStage>,
    shortcut: Option<(Conv1dLayer, BatchNorm1dLayer)>,
}

impl ResidualBlock {
    fn init(
        block_name: &str,
        c_in: usize,
        c_out: usize,
        kernels: &[usize; 3],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut stages = Vec::with_capacity(3);
        let mut ch = c_in;
        for (i, &k) in kernels.iter().enumerate() {
            let conv = Conv1dLayer::init(&format!("{block_name}.conv{}", i + 1), c_out, ch, k, rng);
            let bn = BatchNorm1dLayer::init(&format!("{block_name}.bn{}", i + 1), c_out);
            stages.push(ConvStage { conv, bn });
            ch = c_out;
        }
        let shortcut = if c_in != c_out {
            let conv =
                Conv1dLayer::init(&format!("{block_name}.shortcut.conv"), c_out, c_in, 1, rng);
            let bn = BatchNorm1dLayer::init(&format!("{block_name}.shortcut.bn"), c_out);
            Some((conv, bn))
        } else {
            None
        };
        ResidualBlock { stages, shortcut }
    }

    fn forward(
        &mut self,
        tape: &mut Tape,
        binding: &TapeBinding,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let mut h = x;
        let last = self.stages.len() - 1;
        for (i, stage) in self.stages.iter_mut().enumerate() {
            h = stage.conv.forward(tape, binding, h)?;
            h = stage.bn.forward(tape, binding, h, mode)?;
            if i < last {
                h = tape.relu(h)?;
            }
        }
        let short = match &mut self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(tape, binding, x)?;
                bn.forward(tape, binding, s, mode)?
            }
            None => x,
        };
        let sum = tape.add(h, short)?;
        tape.relu(sum)
    }

    fn collect<'a>(&'a self, out: &mut Vec<&'a Parameter>) {
        for s in &self.stages {
            out.push(&s.conv.weight);
            out.push(&s.conv.bias);
            out.push(&s.bn.gamma);
            out.push(&s.bn.beta);
        }
        if let Some((conv, bn)) = &self.shortcut {
            out.push(&conv.weight);
            out.push(&conv.bias);
            out.push(&bn.gamma);
            out.push(&bn.beta);
        }
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter>) {
        for s in &mut self.stages {
            out.push(&mut s.conv.weight);
            out.push(&mut s.conv.bias);
            out.push(&mut s.bn.gamma);
            out.push(&mut s.bn.beta);
        }
        if let Some((conv, bn)) = &mut self.shortcut {
            out.push(&mut conv.weight);
            out.push(&mut conv.bias);
            out.push(&mut bn.gamma);
            out.push(&mut bn.beta);
        }
    }
}

#[derive(Debug, Clone)]
struct LinearLayer {
    weight: Parameter,
    bias: Parameter,
}

/// The residual encoder plus optional classification head.
#[derive(Debug, Clone)]
pub struct Model {
    config: BackboneConfig,
    blocks: Vec<ResidualBlock>,
    head: Option<LinearLayer>,
}

/// Build a seeded model. Conv and head weights are Kaiming-uniform in the
/// fan-in sense, biases start at zero, batch norm at gamma=1/beta=0; the same
/// seed reproduces the parameter set bit for bit.
pub fn build_model(
    config: &BackboneConfig,
    seed: u64,
    with_linear_head: bool,
    num_classes: usize,
) -> Result<Model> {
    config.validate()?;
    if with_linear_head && num_classes < 2 {
        return Err(Error::Config(format!(
            "a classification head needs at least 2 classes, got {num_classes}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks = Vec::with_capacity(3);
    let mut c_in = config.in_channels;
    for (i, &width) in config.block_widths.iter().enumerate() {
        blocks.push(ResidualBlock::init(
            &format!("block{}", i + 1),
            c_in,
            width,
            &config.kernel_sizes,
            &mut rng,
        ));
        c_in = width;
    }

    let head = if with_linear_head {
        let e = config.embedding_size;
        let bound = (6.0 / e as f64).sqrt();
        let data: Vec<f64> = (0..num_classes * e)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Some(LinearLayer {
            weight: Parameter::new(
                "head.weight",
                Tensor::new(&[num_classes, e], data).expect("init shape is consistent"),
            ),
            bias: Parameter::new("head.bias", Tensor::zeros(&[num_classes])),
        })
    } else {
        None
    };

    Ok(Model {
        config: config.clone(),
        blocks,
        head,
    })
}

impl Model {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn has_head(&self) -> bool {
        self.head.is_some()
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.head.as_ref().map(|h| h.weight.value.shape()[0])
    }

    /// Embed a batch already recorded on `tape`: `[N, M, T] -> [N, E]`.
    pub fn forward_embed(
        &mut self,
        tape: &mut Tape,
        binding: &TapeBinding,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let shape = tape.value(x).shape();
        if shape.len() != 3 {
            return Err(Error::shape(format!(
                "expected [N, M, T] input, got {:?}",
                shape
            )));
        }
        if shape[1] != self.config.in_channels {
            return Err(Error::shape(format!(
                "input has {} channels, model expects {}",
                shape[1], self.config.in_channels
            )));
        }
        let mut h = x;
        for block in &mut self.blocks {
            h = block.forward(tape, binding, h, mode)?;
        }
        tape.global_avg_pool(h)
    }

    /// Classification logits via the linear head: `[N, M, T] -> [N, C]`.
    pub fn forward_logits(
        &mut self,
        tape: &mut Tape,
        binding: &TapeBinding,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let emb = self.forward_embed(tape, binding, x, mode)?;
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::Config("model was built without a linear head".into()))?;
        let w = binding.var(&head.weight.name)?;
        let b = binding.var(&head.bias.name)?;
        tape.linear(emb, w, b)
    }

    /// Convenience: run a throwaway tape and return the embedding values.
    pub fn embed(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let binding = tape.bind(self.parameters());
        let xv = tape.leaf(x.clone());
        let out = self.forward_embed(&mut tape, &binding, xv, mode)?;
        Ok(tape.value(out).clone())
    }

    /// Convenience: run a throwaway tape and return the logits.
    pub fn logits(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let binding = tape.bind(self.parameters());
        let xv = tape.leaf(x.clone());
        let out = self.forward_logits(&mut tape, &binding, xv, mode)?;
        Ok(tape.value(out).clone())
    }
}

impl Parameterized for Model {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut ps = Vec::new();
        for b in &self.blocks {
            b.collect(&mut ps);
        }
        if let Some(h) = &self.head {
            ps.push(&h.weight);
            ps.push(&h.bias);
        }
        ps.sort_by(|a, b| a.name.cmp(&b.name));
        ps
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut ps = Vec::new();
        for b in &mut self.blocks {
            b.collect_mut(&mut ps);
        }
        if let Some(h) = &mut self.head {
            ps.push(&mut h.weight);
            ps.push(&mut h.bias);
        }
        ps.sort_by(|a, b| a.name.cmp(&b.name));
        ps
    }
}

// ---- checkpointing ----
//
// Values are stored as raw f64 bit patterns so a save/load cycle is exact.

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    bits: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct StatsRecord {
    name: String,
    mean_bits: Vec<u64>,
    var_bits: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config: BackboneConfig,
    num_classes: Option<usize>,
    params: Vec<ParamRecord>,
    running_stats: Vec<StatsRecord>,
}

fn to_bits(vals: &[f64]) -> Vec<u64> {
    vals.iter().map(|v| v.to_bits()).collect()
}

fn from_bits(bits: &[u64]) -> Vec<f64> {
    bits.iter().map(|&b| f64::from_bits(b)).collect()
}

impl Model {
    fn bn_layers_mut(&mut self) -> Vec<(String, &mut BatchNorm1dLayer)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (j, s) in b.stages.iter_mut().enumerate() {
                out.push((format!("block{}.bn{}", i + 1, j + 1), &mut s.bn));
            }
            if let Some((_, bn)) = &mut b.shortcut {
                out.push((format!("block{}.shortcut.bn", i + 1), bn));
            }
        }
        out
    }

    pub fn save(&mut self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let params = self
            .parameters()
            .into_iter()
            .map(|p| ParamRecord {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                bits: to_bits(p.value.data()),
            })
            .collect();
        let running_stats = self
            .bn_layers_mut()
            .into_iter()
            .map(|(name, bn)| StatsRecord {
                name,
                mean_bits: to_bits(&bn.running_mean),
                var_bits: to_bits(&bn.running_var),
            })
            .collect();
        let ckpt = Checkpoint {
            config: self.config.clone(),
            num_classes: self.num_classes(),
            params,
            running_stats,
        };
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), &ckpt)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Model> {
        let file = std::fs::File::open(path)?;
        let ckpt: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        let mut model = build_model(
            &ckpt.config,
            0,
            ckpt.num_classes.is_some(),
            ckpt.num_classes.unwrap_or(0),
        )?;

        let mut by_name: std::collections::BTreeMap<&str, &ParamRecord> =
            ckpt.params.iter().map(|r| (r.name.as_str(), r)).collect();
        for p in model.parameters_mut() {
            let rec = by_name.remove(p.name.as_str()).ok_or_else(|| {
                Error::Config(format!("checkpoint is missing parameter {:?}", p.name))
            })?;
            if rec.shape != p.value.shape() {
                return Err(Error::Config(format!(
                    "checkpoint parameter {:?} has shape {:?}, model expects {:?}",
                    p.name,
                    rec.shape,
                    p.value.shape()
                )));
            }
            p.value.data_mut().copy_from_slice(&from_bits(&rec.bits));
        }
        if let Some((name, _)) = by_name.into_iter().next() {
            return Err(Error::Config(format!(
                "checkpoint has extra parameter {name:?}"
            )));
        }

        let mut stats: std::collections::BTreeMap<&str, &StatsRecord> = ckpt
            .running_stats
            .iter()
            .map(|r| (r.name.as_str(), r))
            .collect();
        for (name, bn) in model.bn_layers_mut() {
            let rec = stats.remove(name.as_str()).ok_or_else(|| {
                Error::Config(format!("checkpoint is missing running stats for {name:?}"))
            })?;
            bn.running_mean = from_bits(&rec.mean_bits);
            bn.running_var = from_bits(&rec.var_bits);
        }
        Ok(model)
    }
}
