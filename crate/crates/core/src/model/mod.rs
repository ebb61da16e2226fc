//! The multi-exit CAM-headed convolutional classifier.
//!
//! Backbone: one stage per entry in `stage_widths`, each a stride-2 3x3
//! conv + norm + relu followed by residual 3x3 blocks. Exits attach to the
//! configured stages; each exit head is a 1x1 convolution to `num_classes`
//! channels, so the head's pre-pool activation IS the per-class activation
//! map and the exit logits are its spatial means. The embedding is the
//! spatially pooled output of the stage before the final stage.

mod checkpoint;
mod train;

pub use checkpoint::{load, load_bytes, save, save_bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{train, EpochStats, TrainConfig, TrainLog};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{ops, Tape, Tensor};

const NORM_MOMENTUM: f32 = 0.9;
const NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: usize,
    /// 1-based stage indices carrying exits; the final stage must be present.
    pub exit_stages: Vec<usize>,
    pub input_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            num_classes: 2,
            stage_widths: vec![8, 16, 32, 64],
            blocks_per_stage: 1,
            exit_stages: vec![1, 2, 3, 4],
            input_size: 32,
        }
    }
}

impl ModelConfig {
    pub fn num_stages(&self) -> usize {
        self.stage_widths.len()
    }

    /// Embedding dimension: width of the stage preceding the final stage.
    pub fn embedding_dim(&self) -> usize {
        self.stage_widths[self.stage_widths.len() - 2]
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::invalid("model_config", msg));
        if self.in_channels == 0 {
            return fail("in_channels must be positive".into());
        }
        if self.num_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.stage_widths.len() < 2 {
            return fail(format!(
                "need at least 2 stages for an embedding, got {:?}",
                self.stage_widths
            ));
        }
        if self.stage_widths.iter().any(|&w| w == 0) {
            return fail(format!("zero stage width in {:?}", self.stage_widths));
        }
        if self.exit_stages.is_empty() {
            return fail("exit_stages must be non-empty".into());
        }
        if !self.exit_stages.windows(2).all(|p| p[0] < p[1]) {
            return fail(format!(
                "exit_stages must be strictly increasing, got {:?}",
                self.exit_stages
            ));
        }
        let n = self.num_stages();
        if self.exit_stages.iter().any(|&s| s == 0 || s > n) {
            return fail(format!(
                "exit stage out of range 1..={n}: {:?}",
                self.exit_stages
            ));
        }
        if *self.exit_stages.last().unwrap() != n {
            return fail(format!(
                "final stage {n} must carry an exit, got {:?}",
                self.exit_stages
            ));
        }
        // every stage halves the spatial extent; sizes must keep shrinking
        let mut size = self.input_size;
        for stage in 1..=n {
            let next = size.div_ceil(2);
            if next >= size {
                return fail(format!(
                    "input_size {} too small for {n} stages (stuck at stage {stage})",
                    self.input_size
                ));
            }
            size = next;
        }
        Ok(())
    }

    /// Spatial extent of each stage's output for this input size.
    pub fn stage_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(self.num_stages());
        let mut s = self.input_size;
        for _ in 0..self.num_stages() {
            s = s.div_ceil(2);
            sizes.push(s);
        }
        sizes
    }
}

struct Norm {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
}

impl Norm {
    fn new(channels: usize) -> Norm {
        Norm {
            gamma: Tensor::param(&[channels], vec![1.0; channels]).expect("norm shape"),
            beta: Tensor::param(&[channels], vec![0.0; channels]).expect("norm shape"),
            running_mean: Tensor::new(&[channels], vec![0.0; channels]).expect("norm shape"),
            running_var: Tensor::new(&[channels], vec![1.0; channels]).expect("norm shape"),
        }
    }

    fn apply(&self, tape: Option<&Tape>, x: &Tensor, training: bool) -> Result<Tensor> {
        ops::batch_stats_norm(
            tape,
            x,
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
            training,
            NORM_MOMENTUM,
            NORM_EPS,
        )
    }
}

struct ConvNorm {
    weight: Tensor,
    bias: Tensor,
    norm: Norm,
}

impl ConvNorm {
    fn new(in_ch: usize, out_ch: usize, k: usize, rng: &mut SplitMix64) -> ConvNorm {
        ConvNorm {
            weight: he_init(&[out_ch, in_ch, k, k], rng),
            bias: Tensor::param(&[out_ch], vec![0.0; out_ch]).expect("bias shape"),
            norm: Norm::new(out_ch),
        }
    }

    fn apply(&self, tape: Option<&Tape>, x: &Tensor, stride: usize, training: bool) -> Result<Tensor> {
        let c = ops::conv2d(tape, x, &self.weight, &self.bias, stride, 1)?;
        self.norm.apply(tape, &c, training)
    }
}

struct Block {
    conv1: ConvNorm,
    conv2: ConvNorm,
}

struct Stage {
    entry: ConvNorm,
    blocks: Vec<Block>,
}

struct ExitHead {
    stage: usize,
    weight: Tensor,
    bias: Tensor,
}

pub struct Model {
    config: ModelConfig,
    stages: Vec<Stage>,
    exits: Vec<ExitHead>,
}

fn he_init(shape: &[usize], rng: &mut SplitMix64) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let std = (2.0 / fan_in as f64).sqrt();
    let data: Vec<f32> = (0..shape.iter().product::<usize>())
        .map(|_| (rng.normal() * std) as f32)
        .collect();
    Tensor::param(shape, data).expect("init shape")
}

/// Per-exit raw activation maps and logits for one input, plus the
/// penultimate embedding.
pub struct ExitOutput {
    /// 1-based stage index this exit taps.
    pub stage: usize,
    /// (1, C, H_e, W_e) pre-pool class maps.
    pub activation_map: Tensor,
    /// (1, C), the spatial mean of the activation map.
    pub logits: Tensor,
}

pub struct ExitOutputs {
    pub exits: Vec<ExitOutput>,
    /// (1, d) pooled penultimate-stage features.
    pub embedding: Tensor,
}

impl ExitOutputs {
    pub fn final_exit(&self) -> &ExitOutput {
        self.exits.last().expect("config guarantees a final exit")
    }
}

/// Batched equivalent of [`ExitOutputs`] used by training.
pub struct BatchOutputs {
    pub exit_stages: Vec<usize>,
    pub exit_maps: Vec<Tensor>,
    pub exit_logits: Vec<Tensor>,
    pub embedding: Tensor,
}

impl Model {
    /// Deterministic He-initialized model.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = SplitMix64::new(seed);
        let mut stages = Vec::with_capacity(config.num_stages());
        let mut in_ch = config.in_channels;
        for &width in &config.stage_widths {
            let entry = ConvNorm::new(in_ch, width, 3, &mut rng);
            let blocks = (0..config.blocks_per_stage)
                .map(|_| Block {
                    conv1: ConvNorm::new(width, width, 3, &mut rng),
                    conv2: ConvNorm::new(width, width, 3, &mut rng),
                })
                .collect();
            stages.push(Stage { entry, blocks });
            in_ch = width;
        }
        let exits = config
            .exit_stages
            .iter()
            .map(|&stage| {
                let width = config.stage_widths[stage - 1];
                ExitHead {
                    stage,
                    weight: he_init(&[config.num_classes, width, 1, 1], &mut rng),
                    bias: Tensor::param(&[config.num_classes], vec![0.0; config.num_classes])
                        .expect("bias shape"),
                }
            })
            .collect();
        Ok(Model {
            config,
            stages,
            exits,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let want = [
            x.shape()[0],
            self.config.in_channels,
            self.config.input_size,
            self.config.input_size,
        ];
        if x.rank() != 4 || x.shape()[1..] != want[1..] {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: x.shape().to_vec(),
                rhs: want.to_vec(),
            });
        }
        Ok(())
    }

    /// Forward over a batch. `training` selects batch statistics (and
    /// updates the running buffers) versus running statistics.
    pub fn forward_batch(
        &self,
        x: &Tensor,
        tape: Option<&Tape>,
        training: bool,
    ) -> Result<BatchOutputs> {
        self.check_input(x)?;
        let n_stages = self.config.num_stages();
        let mut exit_maps = Vec::new();
        let mut exit_logits = Vec::new();
        let mut exit_stages = Vec::new();
        let mut embedding = None;

        let mut h = x.clone();
        for (i, stage) in self.stages.iter().enumerate() {
            h = ops::relu(tape, &stage.entry.apply(tape, &h, 2, training)?)?;
            for block in &stage.blocks {
                let r = ops::relu(tape, &block.conv1.apply(tape, &h, 1, training)?)?;
                let r = block.conv2.apply(tape, &r, 1, training)?;
                h = ops::relu(tape, &ops::add(tape, &h, &r)?)?;
            }
            if i == n_stages - 2 {
                embedding = Some(ops::global_avg_pool(tape, &h)?);
            }
            if let Some(head) = self.exits.iter().find(|e| e.stage == i + 1) {
                let map = ops::conv2d(tape, &h, &head.weight, &head.bias, 1, 0)?;
                let logits = ops::global_avg_pool(tape, &map)?;
                exit_stages.push(head.stage);
                exit_maps.push(map);
                exit_logits.push(logits);
            }
        }
        Ok(BatchOutputs {
            exit_stages,
            exit_maps,
            exit_logits,
            embedding: embedding.expect("config guarantees >= 2 stages"),
        })
    }

    /// Inference on a single input (batch 1, running statistics, no tape).
    pub fn forward(&self, x: &Tensor) -> Result<ExitOutputs> {
        if x.rank() != 4 || x.shape()[0] != 1 {
            return Err(Error::invalid(
                "forward",
                format!("expected a single (1,C,H,W) input, got {:?}", x.shape()),
            ));
        }
        let out = self.forward_batch(x, None, false)?;
        let exits = out
            .exit_stages
            .into_iter()
            .zip(out.exit_maps)
            .zip(out.exit_logits)
            .map(|((stage, activation_map), logits)| ExitOutput {
                stage,
                activation_map,
                logits,
            })
            .collect();
        Ok(ExitOutputs {
            exits,
            embedding: out.embedding,
        })
    }

    /// All trainable parameters in a fixed order.
    pub fn params(&self) -> Vec<Tensor> {
        self.named_tensors()
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(_, t)| t)
            .collect()
    }

    /// Every tensor that belongs in a checkpoint, with stable names.
    /// Running statistics are included (they do not require gradients).
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let mut push_norm = |prefix: String, norm: &Norm, out: &mut Vec<(String, Tensor)>| {
            out.push((format!("{prefix}.gamma"), norm.gamma.clone()));
            out.push((format!("{prefix}.beta"), norm.beta.clone()));
            out.push((format!("{prefix}.running_mean"), norm.running_mean.clone()));
            out.push((format!("{prefix}.running_var"), norm.running_var.clone()));
        };
        for (i, stage) in self.stages.iter().enumerate() {
            let s = i + 1;
            out.push((format!("stage{s}.entry.weight"), stage.entry.weight.clone()));
            out.push((format!("stage{s}.entry.bias"), stage.entry.bias.clone()));
            push_norm(format!("stage{s}.entry.norm"), &stage.entry.norm, &mut out);
            for (b, block) in stage.blocks.iter().enumerate() {
                out.push((format!("stage{s}.block{b}.conv1.weight"), block.conv1.weight.clone()));
                out.push((format!("stage{s}.block{b}.conv1.bias"), block.conv1.bias.clone()));
                push_norm(format!("stage{s}.block{b}.norm1"), &block.conv1.norm, &mut out);
                out.push((format!("stage{s}.block{b}.conv2.weight"), block.conv2.weight.clone()));
                out.push((format!("stage{s}.block{b}.conv2.bias"), block.conv2.bias.clone()));
                push_norm(format!("stage{s}.block{b}.norm2"), &block.conv2.norm, &mut out);
            }
        }
        for exit in &self.exits {
            out.push((format!("exit{}.weight", exit.stage), exit.weight.clone()));
            out.push((format!("exit{}.bias", exit.stage), exit.bias.clone()));
        }
        out
    }
}

/// Class with the largest final-exit logit; ties break to the lowest index.
pub fn predicted_class(outputs: &ExitOutputs) -> usize {
    let logits = outputs.final_exit().logits.to_vec();
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Weighted sum of per-exit cross-entropies. Weights must be non-negative
/// with a positive sum; they are normalized to sum to one before use.
pub fn multi_exit_loss(
    tape: Option<&Tape>,
    exit_logits: &[Tensor],
    labels: &[usize],
    weights: &[f32],
) -> Result<Tensor> {
    if exit_logits.is_empty() {
        return Err(Error::invalid("multi_exit_loss", "no exits"));
    }
    if weights.len() != exit_logits.len() {
        return Err(Error::invalid(
            "multi_exit_loss",
            format!(
                "{} weights for {} exits",
                weights.len(),
                exit_logits.len()
            ),
        ));
    }
    if weights.iter().any(|&w| w < 0.0) {
        return Err(Error::invalid("multi_exit_loss", "negative exit weight"));
    }
    let total: f32 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("multi_exit_loss", "exit weights sum to zero"));
    }
    let mut loss: Option<Tensor> = None;
    for (logits, &w) in exit_logits.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        let ce = ops::cross_entropy(tape, logits, labels)?;
        let term = ops::scale(tape, &ce, w / total)?;
        loss = Some(match loss {
            Some(acc) => ops::add(tape, &acc, &term)?,
            None => term,
        });
    }
    Ok(loss.expect("positive total guarantees at least one term"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probe_input(config: &ModelConfig, seed: u64) -> Tensor {
        let mut rng = SplitMix64::new(seed);
        let n = config.in_channels * config.input_size * config.input_size;
        Tensor::new(
            &[1, config.in_channels, config.input_size, config.input_size],
            (0..n).map(|_| rng.next_f32()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn same_seed_same_initial_weights() {
        let a = Model::build(ModelConfig::default(), 9).unwrap();
        let b = Model::build(ModelConfig::default(), 9).unwrap();
        for ((na, ta), (nb, tb)) in a.named_tensors().into_iter().zip(b.named_tensors()) {
            assert_eq!(na, nb);
            assert_eq!(ta.to_vec(), tb.to_vec(), "{na}");
        }
    }

    #[test]
    fn different_seed_different_weights() {
        let a = Model::build(ModelConfig::default(), 9).unwrap();
        let b = Model::build(ModelConfig::default(), 10).unwrap();
        assert_ne!(
            a.named_tensors()[0].1.to_vec(),
            b.named_tensors()[0].1.to_vec()
        );
    }

    #[test]
    fn exit_map_sizes_halve_per_stage() {
        let config = ModelConfig::default();
        assert_eq!(config.stage_sizes(), vec![16, 8, 4, 2]);
        let model = Model::build(config.clone(), 1).unwrap();
        let out = model.forward(&probe_input(&config, 2)).unwrap();
        let sizes: Vec<usize> = out.exits.iter().map(|e| e.activation_map.shape()[2]).collect();
        assert_eq!(sizes, vec![16, 8, 4, 2]);
        // strictly decreasing with exit depth
        assert!(sizes.windows(2).all(|p| p[0] > p[1]));
        assert_eq!(out.embedding.shape(), &[1, 32]);
    }

    #[test]
    fn single_exit_config_produces_one_exit() {
        let config = ModelConfig {
            exit_stages: vec![4],
            ..ModelConfig::default()
        };
        let model = Model::build(config.clone(), 1).unwrap();
        let out = model.forward(&probe_input(&config, 2)).unwrap();
        assert_eq!(out.exits.len(), 1);
        assert_eq!(out.exits[0].stage, 4);
    }

    #[test]
    fn logits_equal_spatial_mean_of_maps() {
        let config = ModelConfig::default();
        let model = Model::build(config.clone(), 3).unwrap();
        let out = model.forward(&probe_input(&config, 4)).unwrap();
        for exit in &out.exits {
            let independent = ops::global_avg_pool(None, &exit.activation_map).unwrap();
            for (a, b) in exit.logits.to_vec().iter().zip(independent.to_vec()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn forward_is_pure() {
        let config = ModelConfig::default();
        let model = Model::build(config.clone(), 5).unwrap();
        let x = probe_input(&config, 6);
        let a = model.forward(&x).unwrap();
        let b = model.forward(&x).unwrap();
        assert_eq!(a.embedding.to_vec(), b.embedding.to_vec());
        for (ea, eb) in a.exits.iter().zip(&b.exits) {
            assert_eq!(ea.logits.to_vec(), eb.logits.to_vec());
        }
    }

    #[test]
    fn zero_final_head_weight_makes_logits_the_bias() {
        let config = ModelConfig::default();
        let model = Model::build(config.clone(), 7).unwrap();
        let final_head = model.exits.last().unwrap();
        final_head
            .weight
            .set_data(vec![0.0; final_head.weight.numel()])
            .unwrap();
        final_head.bias.set_data(vec![0.25, -0.5]).unwrap();
        let out = model.forward(&probe_input(&config, 8)).unwrap();
        let logits = out.final_exit().logits.to_vec();
        assert!((logits[0] - 0.25).abs() < 1e-6);
        assert!((logits[1] + 0.5).abs() < 1e-6);
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let model = Model::build(ModelConfig::default(), 1).unwrap();
        let bad = Tensor::zeros(&[1, 1, 16, 16]).unwrap();
        assert!(model.forward(&bad).is_err());
    }

    #[test]
    fn predicted_class_argmax_and_tie_rule() {
        let config = ModelConfig::default();
        let model = Model::build(config.clone(), 1).unwrap();
        let mut out = model.forward(&probe_input(&config, 2)).unwrap();
        let last = out.exits.last_mut().unwrap();
        last.logits = Tensor::new(&[1, 2], vec![0.1, 0.9]).unwrap();
        assert_eq!(predicted_class(&out), 1);
        out.exits.last_mut().unwrap().logits = Tensor::new(&[1, 2], vec![0.5, 0.5]).unwrap();
        assert_eq!(predicted_class(&out), 0);
    }

    #[test]
    fn predicted_class_shift_invariant() {
        let config = ModelConfig::default();
        let model = Model::build(config.clone(), 11).unwrap();
        let mut out = model.forward(&probe_input(&config, 12)).unwrap();
        let p = predicted_class(&out);
        let shifted: Vec<f32> = out
            .final_exit()
            .logits
            .to_vec()
            .iter()
            .map(|v| v + 3.7)
            .collect();
        out.exits.last_mut().unwrap().logits = Tensor::new(&[1, 2], shifted).unwrap();
        assert_eq!(predicted_class(&out), p);
    }

    #[test]
    fn multi_exit_loss_degenerate_single_exit() {
        let logits = Tensor::new(&[1, 2], vec![0.3, -0.2]).unwrap();
        let plain = ops::cross_entropy(None, &logits, &[1]).unwrap();
        let multi = multi_exit_loss(None, &[logits], &[1], &[1.0]).unwrap();
        assert_eq!(plain.item().unwrap(), multi.item().unwrap());
    }

    #[test]
    fn multi_exit_loss_uniform_logits_is_ln_c() {
        let c = 4usize;
        let logits: Vec<Tensor> = (0..3)
            .map(|_| Tensor::new(&[1, c], vec![0.0; c]).unwrap())
            .collect();
        let loss = multi_exit_loss(None, &logits, &[2], &[1.0, 1.0, 1.0]).unwrap();
        assert!((loss.item().unwrap() - (c as f32).ln()).abs() < 1e-6);
    }

    #[test]
    fn multi_exit_loss_one_hot_weights_select_one_exit() {
        let a = Tensor::new(&[1, 2], vec![0.9, -0.3]).unwrap();
        let b = Tensor::new(&[1, 2], vec![-2.0, 2.0]).unwrap();
        let only_a = ops::cross_entropy(None, &a, &[0]).unwrap();
        let masked = multi_exit_loss(None, &[a, b], &[0], &[1.0, 0.0]).unwrap();
        assert_eq!(only_a.item().unwrap(), masked.item().unwrap());
    }

    #[test]
    fn multi_exit_loss_rejects_zero_and_negative_weights() {
        let logits = Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap();
        assert!(multi_exit_loss(None, &[logits.clone()], &[0], &[0.0]).is_err());
        assert!(multi_exit_loss(None, &[logits.clone()], &[0], &[-1.0]).is_err());
        assert!(multi_exit_loss(None, &[logits], &[0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn config_validation_rules() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad_exit = ModelConfig {
            exit_stages: vec![1, 2],
            ..ModelConfig::default()
        };
        assert!(bad_exit.validate().is_err(), "final stage missing");
        let not_increasing = ModelConfig {
            exit_stages: vec![2, 2, 4],
            ..ModelConfig::default()
        };
        assert!(not_increasing.validate().is_err());
        let one_stage = ModelConfig {
            stage_widths: vec![8],
            exit_stages: vec![1],
            ..ModelConfig::default()
        };
        assert!(one_stage.validate().is_err());
        let tiny_input = ModelConfig {
            input_size: 4,
            ..ModelConfig::default()
        };
        assert!(tiny_input.validate().is_err());
        let one_class = ModelConfig {
            num_classes: 1,
            ..ModelConfig::default()
        };
        assert!(one_class.validate().is_err());
    }

    #[test]
    fn one_hot_exit_weight_zeroes_grads_after_tap_point() {
        // weights one-hot on exit 1: everything after stage 1 gets zero grads
        let config = ModelConfig {
            stage_widths: vec![4, 8],
            exit_stages: vec![1, 2],
            input_size: 8,
            ..ModelConfig::default()
        };
        let model = Model::build(config.clone(), 13).unwrap();
        let x = probe_input(&config, 14);
        let tape = Tape::new();
        let out = model.forward_batch(&x, Some(&tape), true).unwrap();
        let loss = multi_exit_loss(Some(&tape), &out.exit_logits, &[0], &[1.0, 0.0]).unwrap();
        tape.backward(&loss).unwrap();
        for (name, t) in model.named_tensors() {
            if !t.requires_grad() {
                continue;
            }
            let g = t.grad().expect("all leaves get grads");
            if name.starts_with("stage2") || name.starts_with("exit2") {
                assert!(g.iter().all(|&v| v == 0.0), "{name} should have zero grad");
            }
        }
    }
}
