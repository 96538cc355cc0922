//! The two-branch pair-verification network.
//!
//! The non-local branch runs the five-stage conv stack over the 6-channel
//! (parent RGB then child RGB) pair input, applying the non-local weighted
//! operation on the pooled maps after stages 3 (8x8) and 5 (2x2). The local
//! branch pushes each image through a frozen backbone, concatenates global
//! average and max pooling into one vector per image, and applies the local
//! weighted operation to the (parent, child) vector pair. The fusion head
//! concatenates [non-local | f_x | f_y], projects (the 1x1-conv equivalent
//! on flat vectors), and classifies through two fully-connected layers and
//! a 2-way softmax.
//!
//! Stage widths at scale 1 are 16/64/128/256/512; `WidthScale` shrinks them
//! proportionally for desk-scale runs (the flattened width after stage 5 at
//! scale 1 on 64x64 input is 512*2*2 = 2048). The backbone stands in for a
//! pretrained feature extractor: it is initialized from a fixed seed shared
//! by every run, and its parameters never receive updates.

use std::path::PathBuf;

use crate::cft::NamedTensors;
use crate::error::{CfilError, Result};
use crate::rng::SeededRng;
use crate::shape::Shape;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use crate::weighted::{
    local_apply_on_tape, nonlocal_apply_on_tape, DistanceKernel, SignMode,
};

/// Seed of the frozen stand-in backbone. Fixed (not the run seed) so every
/// run shares the same frozen features, the way runs would share one set of
/// pretrained weights.
pub const BACKBONE_SEED: u64 = 1_000_003;

/// Gain on the backbone's final conv. The local weighted operation compares
/// pooled features through exp(psi(.)); near-zero features flatten that
/// softmax into a uniform average, so the frozen extractor is built to emit
/// features large enough to keep the kernel in its discriminative regime.
pub const BACKBONE_OUTPUT_GAIN: f64 = 2.0;

/// Stage widths of the non-local column at scale 1.
pub const NONLOCAL_BASE_WIDTHS: [usize; 5] = [16, 64, 128, 256, 512];

/// Stages (0-based) after whose pooling the non-local op is inserted.
pub const NONLOCAL_INSERTIONS: [usize; 2] = [2, 4];

/// Base widths of the fusion head at scale 1: projection, then first FC;
/// the final layer always has 2 outputs.
pub const HEAD_BASE_WIDTHS: [usize; 2] = [256, 64];

/// Rational width multiplier, e.g. 1/4 for desk-scale models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WidthScale {
    pub num: u32,
    pub den: u32,
}

impl WidthScale {
    pub const ONE: WidthScale = WidthScale { num: 1, den: 1 };

    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(CfilError::Config(format!(
                "width scale must be a positive rational, got {num}/{den}"
            )));
        }
        Ok(WidthScale { num, den })
    }

    /// `"1"`, `"1/2"`, `"3/4"`, ...
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('/').collect();
        let bad = || CfilError::Config(format!("bad width scale '{s}' (expected e.g. '1' or '1/4')"));
        match parts.as_slice() {
            [n] => WidthScale::new(n.trim().parse().map_err(|_| bad())?, 1),
            [n, d] => WidthScale::new(
                n.trim().parse().map_err(|_| bad())?,
                d.trim().parse().map_err(|_| bad())?,
            ),
            _ => Err(bad()),
        }
    }

    /// Scaled width, floored at 1.
    pub fn apply(&self, base: usize) -> usize {
        ((base * self.num as usize) / self.den as usize).max(1)
    }
}

impl std::fmt::Display for WidthScale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

/// Which frozen feature extractor backs the local branch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackboneConfig {
    /// Three conv/pool stages (3 -> 32 -> 64 -> out_channels) seeded from
    /// [`BACKBONE_SEED`].
    TinyConv { out_channels: usize },
    /// Weights loaded from a named-tensor container on disk.
    External { path: PathBuf },
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig::TinyConv { out_channels: 128 }
    }
}

impl BackboneConfig {
    pub fn to_header_value(&self) -> String {
        match self {
            BackboneConfig::TinyConv { out_channels } => format!("tiny-conv:{out_channels}"),
            BackboneConfig::External { path } => format!("external:{}", path.display()),
        }
    }

    pub fn from_header_value(s: &str) -> Result<Self> {
        if let Some(ch) = s.strip_prefix("tiny-conv:") {
            let out_channels = ch
                .parse()
                .map_err(|_| CfilError::Config(format!("bad backbone spec '{s}'")))?;
            Ok(BackboneConfig::TinyConv { out_channels })
        } else if let Some(path) = s.strip_prefix("external:") {
            Ok(BackboneConfig::External { path: PathBuf::from(path) })
        } else {
            Err(CfilError::Config(format!("bad backbone spec '{s}'")))
        }
    }
}

/// Frozen backbone structure: per-stage (in channels, out channels, kernel).
/// Each stage is conv (stride 1, same padding), relu, 2x2/2 max pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneHandle {
    pub config: BackboneConfig,
    pub stages: Vec<(usize, usize, usize)>,
    pub out_channels: usize,
    pub out_side: usize,
}

/// Non-local column description after width scaling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NonLocalBranchSpec {
    pub stage_widths: [usize; 5],
    pub width_scale: WidthScale,
    /// Flattened output width for the configured input side.
    pub feature_width: usize,
}

/// Local column description: frozen backbone plus dual global pooling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalBranchSpec {
    pub backbone: BackboneHandle,
    /// Per-image vector width, 2 * backbone out channels (avg || max).
    pub feature_width: usize,
}

/// Fusion head widths: projection, one hidden FC, 2-way output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionHead {
    pub input_width: usize,
    pub proj_width: usize,
    pub fc1_width: usize,
}

pub const CLASS_COUNT: usize = 2;
/// Class index scored as "kin" (the positive class).
pub const POSITIVE_CLASS: usize = 1;

/// Ordered, named parameter store. Trainable entries gradient-descend;
/// frozen entries (the backbone) never change after construction. Iteration
/// order is construction order: non-local convs stage 0..5 (weight then
/// bias), fusion projection, fc1, fc2 — and it is part of the checkpoint
/// contract.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T: Scalar> {
    trainable: Vec<(String, Tensor<T>)>,
    frozen: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn trainable(&self) -> &[(String, Tensor<T>)] {
        &self.trainable
    }

    pub fn frozen(&self) -> &[(String, Tensor<T>)] {
        &self.frozen
    }

    pub fn trainable_values_mut(&mut self, index: usize) -> &mut [T] {
        self.trainable[index].1.values_mut()
    }

    pub fn set_trainable(&mut self, index: usize, tensor: Tensor<T>) {
        debug_assert_eq!(self.trainable[index].1.shape(), tensor.shape());
        self.trainable[index].1 = tensor;
    }
}

/// Everything needed to rebuild a model deterministically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub width_scale: WidthScale,
    pub sign_mode: SignMode,
    pub backbone: BackboneConfig,
    pub input_side: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width_scale: WidthScale::ONE,
            sign_mode: SignMode::AsAlgorithm,
            backbone: BackboneConfig::default(),
            input_side: 64,
            seed: 42,
        }
    }
}

/// Parameter leaves bound onto one tape for a forward/backward pass.
pub struct BoundModel {
    pub trainable: Vec<Var>,
    pub frozen: Vec<Var>,
}

/// The assembled model.
#[derive(Debug, Clone)]
pub struct CfilModel<T: Scalar> {
    pub config: ModelConfig,
    pub nonlocal_spec: NonLocalBranchSpec,
    pub local_spec: LocalBranchSpec,
    pub head: FusionHead,
    pub params: ModelParams<T>,
    pub kernel: DistanceKernel,
}

/// Recover the stage structure from an ordered frozen tensor list
/// (backbone.conv{i}.weight / .bias), validating kernel and channel chains.
fn backbone_stages_from_tensors<T: Scalar>(
    tensors: &[(String, Tensor<T>)],
) -> Result<Vec<(usize, usize, usize)>> {
    let mut stages: Vec<(usize, usize, usize)> = Vec::new();
    let mut i = 0;
    loop {
        let wname = format!("backbone.conv{i}.weight");
        let bname = format!("backbone.conv{i}.bias");
        let Some((_, wt)) = tensors.iter().find(|(n, _)| n == &wname) else {
            break;
        };
        let (_, bt) = tensors
            .iter()
            .find(|(n, _)| n == &bname)
            .ok_or_else(|| CfilError::Incompatible(format!("backbone missing {bname}")))?;
        let d = wt.shape().dims();
        if d.len() != 4 || d[2] != d[3] || d[2] % 2 == 0 {
            return Err(CfilError::Incompatible(format!(
                "backbone tensor {wname} has shape {}, expected KxCxkxk with odd k",
                wt.shape()
            )));
        }
        if bt.shape().dims() != [d[0]] {
            return Err(CfilError::Incompatible(format!(
                "backbone bias {bname} has shape {}, expected {}",
                bt.shape(),
                d[0]
            )));
        }
        let expected_in = if i == 0 { 3 } else { stages[i - 1].1 };
        if d[1] != expected_in {
            return Err(CfilError::Incompatible(format!(
                "backbone {wname} takes {} channels, expected {expected_in}",
                d[1]
            )));
        }
        stages.push((d[1], d[0], d[2]));
        i += 1;
    }
    if stages.is_empty() {
        return Err(CfilError::Incompatible(
            "backbone tensors contain no backbone.conv0.weight".into(),
        ));
    }
    Ok(stages)
}

fn backbone_handle(
    config: &BackboneConfig,
    stages: Vec<(usize, usize, usize)>,
    input_side: usize,
) -> Result<BackboneHandle> {
    let halvings = stages.len() as u32;
    if input_side % (1 << halvings) != 0 {
        return Err(CfilError::Config(format!(
            "input side {input_side} not divisible by 2^{halvings} backbone poolings"
        )));
    }
    let out_side = input_side >> halvings;
    let out_channels = stages.last().unwrap().1;
    Ok(BackboneHandle {
        config: config.clone(),
        stages,
        out_channels,
        out_side,
    })
}

fn build_backbone<T: Scalar>(
    config: &BackboneConfig,
    input_side: usize,
) -> Result<(BackboneHandle, Vec<(String, Tensor<T>)>)> {
    let mut tensors = Vec::new();
    let stages: Vec<(usize, usize, usize)> = match config {
        BackboneConfig::TinyConv { out_channels } => {
            if *out_channels == 0 {
                return Err(CfilError::Config("backbone out_channels must be >= 1".into()));
            }
            let stages = vec![(3usize, 32usize, 3usize), (32, 64, 3), (64, *out_channels, 3)];
            let mut rng = SeededRng::new(BACKBONE_SEED).derive("backbone", 0);
            let last = stages.len() - 1;
            for (i, &(c_in, c_out, k)) in stages.iter().enumerate() {
                let fan_in = c_in * k * k;
                let mut weight =
                    Tensor::he_uniform(Shape::of(&[c_out, c_in, k, k]), fan_in, &mut rng);
                let mut bias = Tensor::fan_in_uniform(Shape::of(&[c_out]), fan_in, &mut rng);
                if i == last {
                    let gain = T::of_f64(BACKBONE_OUTPUT_GAIN);
                    for v in weight.values_mut().iter_mut().chain(bias.values_mut()) {
                        *v = *v * gain;
                    }
                }
                tensors.push((format!("backbone.conv{i}.weight"), weight));
                tensors.push((format!("backbone.conv{i}.bias"), bias));
            }
            stages
        }
        BackboneConfig::External { path } => {
            let container = NamedTensors::load(path)?;
            for (name, t) in container.entries() {
                if name.starts_with("backbone.conv") {
                    tensors.push((name.clone(), Tensor::map_from_f64(&t.map_to_f64())));
                }
            }
            backbone_stages_from_tensors(&tensors).map_err(|e| {
                CfilError::Incompatible(format!("external backbone {}: {e}", path.display()))
            })?
        }
    };
    let handle = backbone_handle(config, stages, input_side)?;
    Ok((handle, tensors))
}

impl<T: Scalar> CfilModel<T> {
    /// Build the model; trainable parameters draw fan-in-scaled uniform
    /// values from the run seed, the backbone from its fixed seed.
    pub fn new(config: ModelConfig) -> Result<Self> {
        Self::check_input_side(&config)?;
        let (backbone, frozen) = build_backbone::<T>(&config.backbone, config.input_side)?;
        Self::assemble(config, backbone, frozen)
    }

    /// Rebuild a model around an existing frozen tensor set (checkpoint
    /// restore); the backbone structure is recovered from the tensors, so
    /// no external weight file is touched.
    pub fn from_frozen_tensors(
        config: ModelConfig,
        frozen: Vec<(String, Tensor<T>)>,
    ) -> Result<Self> {
        Self::check_input_side(&config)?;
        let stages = backbone_stages_from_tensors(&frozen)?;
        let backbone = backbone_handle(&config.backbone, stages, config.input_side)?;
        Self::assemble(config, backbone, frozen)
    }

    fn check_input_side(config: &ModelConfig) -> Result<()> {
        if config.input_side < 32 || config.input_side % 32 != 0 {
            return Err(CfilError::Config(format!(
                "input side must be a positive multiple of 32, got {}",
                config.input_side
            )));
        }
        Ok(())
    }

    fn assemble(
        config: ModelConfig,
        backbone: BackboneHandle,
        frozen: Vec<(String, Tensor<T>)>,
    ) -> Result<Self> {
        let ws = config.width_scale;
        let stage_widths = [
            ws.apply(NONLOCAL_BASE_WIDTHS[0]),
            ws.apply(NONLOCAL_BASE_WIDTHS[1]),
            ws.apply(NONLOCAL_BASE_WIDTHS[2]),
            ws.apply(NONLOCAL_BASE_WIDTHS[3]),
            ws.apply(NONLOCAL_BASE_WIDTHS[4]),
        ];
        let final_side = config.input_side / 32;
        let nonlocal_spec = NonLocalBranchSpec {
            stage_widths,
            width_scale: ws,
            feature_width: stage_widths[4] * final_side * final_side,
        };

        let local_spec = LocalBranchSpec {
            feature_width: 2 * backbone.out_channels,
            backbone,
        };

        let head = FusionHead {
            input_width: nonlocal_spec.feature_width + 2 * local_spec.feature_width,
            proj_width: ws.apply(HEAD_BASE_WIDTHS[0]),
            fc1_width: ws.apply(HEAD_BASE_WIDTHS[1]),
        };

        let mut rng = SeededRng::new(config.seed).derive("init", 0);
        let mut trainable = Vec::new();
        let push_conv = |name: &str, c_out: usize, c_in: usize, rng: &mut SeededRng,
                             trainable: &mut Vec<(String, Tensor<T>)>| {
            let fan_in = c_in * 9;
            trainable.push((
                format!("{name}.weight"),
                Tensor::he_uniform(Shape::of(&[c_out, c_in, 3, 3]), fan_in, rng),
            ));
            trainable.push((
                format!("{name}.bias"),
                Tensor::fan_in_uniform(Shape::of(&[c_out]), fan_in, rng),
            ));
        };
        let mut c_in = 2 * 3;
        for (i, &c_out) in stage_widths.iter().enumerate() {
            push_conv(&format!("nl.conv{i}"), c_out, c_in, &mut rng, &mut trainable);
            c_in = c_out;
        }
        let push_linear = |name: &str, d_in: usize, d_out: usize, rng: &mut SeededRng,
                               trainable: &mut Vec<(String, Tensor<T>)>| {
            trainable.push((
                format!("{name}.weight"),
                Tensor::he_uniform(Shape::of(&[d_in, d_out]), d_in, rng),
            ));
            trainable.push((
                format!("{name}.bias"),
                Tensor::fan_in_uniform(Shape::of(&[d_out]), d_in, rng),
            ));
        };
        push_linear("fusion.proj", head.input_width, head.proj_width, &mut rng, &mut trainable);
        push_linear("fusion.fc1", head.proj_width, head.fc1_width, &mut rng, &mut trainable);
        push_linear("fusion.fc2", head.fc1_width, CLASS_COUNT, &mut rng, &mut trainable);

        Ok(CfilModel {
            kernel: DistanceKernel::new(config.sign_mode),
            config,
            nonlocal_spec,
            local_spec,
            head,
            params: ModelParams { trainable, frozen },
        })
    }

    /// Zero the final layer so the classifier starts exactly symmetric:
    /// every probability row is (0.5, 0.5) and the initial loss is ln 2.
    pub fn zero_head(&mut self) {
        let count = self.params.trainable.len();
        for (_, t) in &mut self.params.trainable[count - 2..] {
            for v in t.values_mut() {
                *v = T::zero();
            }
        }
    }

    /// Record all parameters as leaves on a tape (trainable ones with
    /// gradients enabled).
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundModel {
        BoundModel {
            trainable: self
                .params
                .trainable
                .iter()
                .map(|(_, t)| tape.leaf(t.clone().with_requires_grad()))
                .collect(),
            frozen: self
                .params
                .frozen
                .iter()
                .map(|(_, t)| tape.leaf(t.clone()))
                .collect(),
        }
    }

    fn nl_stage_vars(&self, bound: &BoundModel, stage: usize) -> (Var, Var) {
        (bound.trainable[stage * 2], bound.trainable[stage * 2 + 1])
    }

    fn head_vars(&self, bound: &BoundModel) -> [(Var, Var); 3] {
        let base = NONLOCAL_BASE_WIDTHS.len() * 2;
        [
            (bound.trainable[base], bound.trainable[base + 1]),
            (bound.trainable[base + 2], bound.trainable[base + 3]),
            (bound.trainable[base + 4], bound.trainable[base + 5]),
        ]
    }

    /// Non-local branch over the 6-channel pair batch: five conv/pool
    /// stages with the non-local op after stages 3 and 5, flattened.
    pub fn forward_nonlocal(&self, tape: &mut Tape<T>, bound: &BoundModel, pair: Var) -> Result<Var> {
        let dims = tape.value(pair).shape().dims().to_vec();
        if dims.len() != 4 || dims[1] != 6 {
            return Err(CfilError::Input(format!(
                "pair input must be Nx6xHxW (parent RGB then child RGB), got {}",
                tape.value(pair).shape()
            )));
        }
        let batch = dims[0];
        // Center pixel values from [0, 1] to [-1, 1] before the first conv.
        let two = T::of_f64(2.0);
        let mut x = tape.affine(pair, two, -T::one())?;
        for stage in 0..self.nonlocal_spec.stage_widths.len() {
            let (w, b) = self.nl_stage_vars(bound, stage);
            x = tape.conv2d(x, w, b, 1, 1)?;
            x = tape.relu(x)?;
            x = tape.maxpool2d(x, 2, 2)?;
            if NONLOCAL_INSERTIONS.contains(&stage) {
                let mut updated = Vec::with_capacity(batch);
                for i in 0..batch {
                    let xi = tape.batch_select(x, i)?;
                    updated.push(nonlocal_apply_on_tape(tape, xi, self.kernel)?);
                }
                x = tape.batch_stack(&updated)?;
            }
        }
        let d = tape.value(x).shape().dims().to_vec();
        tape.reshape(x, Shape::of(&[batch, d[1] * d[2] * d[3]]))
    }

    fn backbone_forward(&self, tape: &mut Tape<T>, bound: &BoundModel, images: Var) -> Result<Var> {
        let dims = tape.value(images).shape().dims().to_vec();
        if dims.len() != 4 || dims[1] != self.local_spec.backbone.stages[0].0 {
            return Err(CfilError::Input(format!(
                "backbone input must be Nx{}xHxW, got {}",
                self.local_spec.backbone.stages[0].0,
                tape.value(images).shape()
            )));
        }
        let two = T::of_f64(2.0);
        let mut x = tape.affine(images, two, -T::one())?;
        for (i, &(_, _, k)) in self.local_spec.backbone.stages.iter().enumerate() {
            let w = bound.frozen[i * 2];
            let b = bound.frozen[i * 2 + 1];
            x = tape.conv2d(x, w, b, 1, (k - 1) / 2)?;
            x = tape.relu(x)?;
            x = tape.maxpool2d(x, 2, 2)?;
        }
        Ok(x)
    }

    fn pooled_vector(&self, tape: &mut Tape<T>, map: Var) -> Result<Var> {
        let avg = tape.global_avg_pool(map)?;
        let max = tape.global_max_pool(map)?;
        tape.concat(&[avg, max], 1)
    }

    /// Local branch: frozen backbone, dual global pooling, then the local
    /// weighted operation on each (parent, child) vector pair. Returns the
    /// updated (f_x, f_y) batches.
    pub fn forward_local(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundModel,
        parent: Var,
        child: Var,
    ) -> Result<(Var, Var)> {
        let np = tape.value(parent).shape().dims()[0];
        let nc = tape.value(child).shape().dims()[0];
        if np != nc {
            return Err(CfilError::Input(format!(
                "parent batch {np} vs child batch {nc}"
            )));
        }
        let pmap = self.backbone_forward(tape, bound, parent)?;
        let cmap = self.backbone_forward(tape, bound, child)?;
        let pvec = self.pooled_vector(tape, pmap)?;
        let cvec = self.pooled_vector(tape, cmap)?;
        let mut fxs = Vec::with_capacity(np);
        let mut fys = Vec::with_capacity(np);
        for i in 0..np {
            let px = tape.batch_select(pvec, i)?;
            let cx = tape.batch_select(cvec, i)?;
            let (fx, fy) = local_apply_on_tape(tape, px, cx, self.kernel)?;
            fxs.push(fx);
            fys.push(fy);
        }
        Ok((tape.batch_stack(&fxs)?, tape.batch_stack(&fys)?))
    }

    /// Concatenate branch features, project, classify; rows are softmax
    /// probabilities over (not-kin, kin).
    pub fn fuse_and_classify(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundModel,
        nl: Var,
        fx: Var,
        fy: Var,
    ) -> Result<Var> {
        let width = tape.value(nl).shape().dims()[1]
            + tape.value(fx).shape().dims()[1]
            + tape.value(fy).shape().dims()[1];
        if width != self.head.input_width {
            return Err(CfilError::Config(format!(
                "fusion head configured for width {}, got {} = {} + {} + {}",
                self.head.input_width,
                width,
                tape.value(nl).shape().dims()[1],
                tape.value(fx).shape().dims()[1],
                tape.value(fy).shape().dims()[1],
            )));
        }
        let cat = tape.concat(&[nl, fx, fy], 1)?;
        let [(pw, pb), (w1, b1), (w2, b2)] = self.head_vars(bound);
        let h = tape.linear(cat, pw, pb)?;
        let h = tape.relu(h)?;
        let h = tape.linear(h, w1, b1)?;
        let h = tape.relu(h)?;
        let logits = tape.linear(h, w2, b2)?;
        tape.softmax_rows(logits)
    }

    /// Full forward: parent/child image batches to probability rows.
    /// Channel order of the pair input is parent-first, a fixed contract.
    pub fn forward_probs(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundModel,
        parent: Var,
        child: Var,
    ) -> Result<Var> {
        let pair = tape.concat(&[parent, child], 1)?;
        let nl = self.forward_nonlocal(tape, bound, pair)?;
        let (fx, fy) = self.forward_local(tape, bound, parent, child)?;
        self.fuse_and_classify(tape, bound, nl, fx, fy)
    }

    /// Positive-class probability per pair, no gradients.
    pub fn score_batch(&self, parent: &Tensor<T>, child: &Tensor<T>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let pv = tape.leaf(parent.clone());
        let cv = tape.leaf(child.clone());
        let probs = self.forward_probs(&mut tape, &bound, pv, cv)?;
        let t = tape.value(probs);
        let n = t.shape().dims()[0];
        Ok((0..n)
            .map(|i| t.values()[i * CLASS_COUNT + POSITIVE_CLASS].as_f64())
            .collect())
    }
}

fn check_binary_labels(labels: &[usize]) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(CfilError::Input(format!(
            "labels must be binary (0 or 1), got {bad}"
        )));
    }
    Ok(())
}

/// Mean cross-entropy over probability rows: (1/N) sum -ln P_i(r_i), with
/// P clamped at 1e-12 before the log.
pub fn loss_on_tape<T: Scalar>(tape: &mut Tape<T>, probs: Var, labels: &[usize]) -> Result<Var> {
    let dims = tape.value(probs).shape().dims().to_vec();
    if dims.len() != 2 || dims[1] != CLASS_COUNT {
        return Err(CfilError::Input(format!(
            "loss expects Nx{CLASS_COUNT} probabilities, got {}",
            tape.value(probs).shape()
        )));
    }
    check_binary_labels(labels)?;
    tape.nll_from_probs(probs, labels)
}

/// Eager loss over probability rows.
pub fn loss<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.leaf(probs.clone());
    let l = loss_on_tape(&mut tape, p, labels)?;
    Ok(tape.value(l).values()[0].as_f64())
}

/// Closed-form per-sample gradient of the cross-entropy loss with respect
/// to the logits: P(l) for l != r_i and P(l) - 1 for l = r_i (before the
/// 1/N mean). Used as an analytic oracle against the tape backward.
pub fn loss_logit_grad_closed_form<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[usize],
) -> Result<Tensor<T>> {
    let dims = probs.shape().dims();
    if dims.len() != 2 || dims[1] != CLASS_COUNT {
        return Err(CfilError::Input(format!(
            "expected Nx{CLASS_COUNT} probabilities, got {}",
            probs.shape()
        )));
    }
    let n = dims[0];
    if labels.len() != n {
        return Err(CfilError::Input(format!(
            "{} labels for {} rows",
            labels.len(),
            n
        )));
    }
    check_binary_labels(labels)?;
    let mut out = probs.values().to_vec();
    for (i, &l) in labels.iter().enumerate() {
        out[i * CLASS_COUNT + l] = out[i * CLASS_COUNT + l] - T::one();
    }
    Tensor::new(probs.shape().clone(), out)
}

/// Assemble an NxCxHxW batch from per-pair image tensors.
pub fn batch_from_images<T: Scalar>(images: &[&Tensor<f32>]) -> Result<Tensor<T>> {
    if images.is_empty() {
        return Err(CfilError::Input("empty image batch".into()));
    }
    let shape = images[0].shape().clone();
    let mut dims = vec![images.len()];
    dims.extend_from_slice(shape.dims());
    let mut values = Vec::with_capacity(shape.len() * images.len());
    for img in images {
        if img.shape() != &shape {
            return Err(CfilError::Dimension {
                op: "batch_from_images",
                lhs: shape.to_string(),
                rhs: img.shape().to_string(),
            });
        }
        values.extend(img.values().iter().map(|&v| T::of_f64(v as f64)));
    }
    Tensor::new(Shape::new(dims)?, values)
}
