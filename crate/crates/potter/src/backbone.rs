//! Hierarchical backbone: patch embedding, four stages with downsampling
//! between them, the optional high-resolution stream, and output heads.
//!
//! Stage i produces a `[D_i, H/2^(i+1), W/2^(i+1)]` map. The HR stream keeps
//! a `[D_1, H/4, W/4]` state and folds in each later stage through a patch
//! split (linear projection + sub-pixel rearrangement).

use serde::{Deserialize, Serialize};

use crate::mixers::{
    self, AttentionWires, BlockWires, ConvWires, DenseWires, LnWires, MixerWires, PoolAttnWires,
};
use crate::params::{BoundParams, ParamSet};
use crate::rng::Rng;
use crate::tape::{Tape, VarId};
use crate::tensor::{Real, Tensor};
use crate::{Error, Result};

pub const LN_EPS: Real = 1e-5;

/// Which token mixer the blocks use. Not part of the config file; the
/// poolattn default is overridden by ablation and profiling entry points.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixerKind {
    PoolAttn,
    Pooling,
    Attention,
}

impl MixerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MixerKind::PoolAttn => "poolattn",
            MixerKind::Pooling => "pooling",
            MixerKind::Attention => "attention",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmbedKind {
    /// Non-overlapping p x p patchify: one linear map per patch.
    #[default]
    Patchify,
    /// Overlapping 7x7 stride-4 convolution.
    Conv7x7,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MergeKind {
    /// Concatenate each 2x2 neighborhood and apply a linear map.
    #[default]
    ConcatLinear,
    /// 3x3 stride-2 convolution.
    Conv3x3,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HeadConfig {
    /// Global spatial mean over the final stage, then a linear classifier.
    Classify { classes: usize },
    /// Raw feature map: the HR output when enabled, else the stage-4 map.
    FeatureMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub patch_size: usize,
    pub dims: [usize; 4],
    pub depths: [usize; 4],
    pub hr_depths: [usize; 3],
    pub hr_enabled: bool,
    pub head: HeadConfig,
    pub factorizations: [[usize; 2]; 4],
    #[serde(default)]
    pub embed_kind: EmbedKind,
    #[serde(default)]
    pub merge_kind: MergeKind,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_h == 0 || self.input_h % 32 != 0 || self.input_w == 0 || self.input_w % 32 != 0 {
            return Err(Error::Config(format!(
                "input {}x{} must be a positive multiple of 32",
                self.input_h, self.input_w
            )));
        }
        if self.patch_size != 4 {
            return Err(Error::Config(format!(
                "patch_size {} unsupported: the stage ladder fixes it at 4",
                self.patch_size
            )));
        }
        for (i, &d) in self.dims.iter().enumerate() {
            if d == 0 {
                return Err(Error::Config(format!("stage {} dim must be positive", i + 1)));
            }
            let [dh, dw] = self.factorizations[i];
            if dh * dw != d {
                return Err(Error::Config(format!(
                    "factorization {dh}x{dw} does not match stage {} dim {d}",
                    i + 1
                )));
            }
        }
        if let HeadConfig::Classify { classes } = self.head {
            if classes == 0 {
                return Err(Error::Config("classifier needs at least one class".into()));
            }
        }
        Ok(())
    }

    /// Patch grid of stage i (1-based): (H, W) / 2^(i+1).
    pub fn stage_grid(&self, stage: usize) -> (usize, usize) {
        let div = 1 << (stage + 1);
        (self.input_h / div, self.input_w / div)
    }

    pub fn default_factorizations(dims: &[usize; 4]) -> [[usize; 2]; 4] {
        let mut out = [[0usize; 2]; 4];
        for (i, &d) in dims.iter().enumerate() {
            let (dh, dw) = mixers::closest_square_factors(d);
            out[i] = [dh, dw];
        }
        out
    }

    /// Desk-scale configuration used by the gradient and training suites.
    pub fn micro() -> Self {
        let dims = [4, 8, 12, 16];
        ModelConfig {
            input_h: 32,
            input_w: 32,
            patch_size: 4,
            dims,
            depths: [1, 1, 1, 1],
            hr_depths: [1, 1, 1],
            hr_enabled: false,
            head: HeadConfig::Classify { classes: 4 },
            factorizations: Self::default_factorizations(&dims),
            embed_kind: EmbedKind::Patchify,
            merge_kind: MergeKind::ConcatLinear,
        }
    }

    /// S12 classification preset: dims [64,128,320,512], depths [2,2,6,2],
    /// 224x224 input, 1000 classes, overlapping embedding and conv merges.
    pub fn cls_s12() -> Self {
        let dims = [64, 128, 320, 512];
        ModelConfig {
            input_h: 224,
            input_w: 224,
            patch_size: 4,
            dims,
            depths: [2, 2, 6, 2],
            hr_depths: [2, 2, 2],
            hr_enabled: false,
            head: HeadConfig::Classify { classes: 1000 },
            factorizations: Self::default_factorizations(&dims),
            embed_kind: EmbedKind::Conv7x7,
            merge_kind: MergeKind::Conv3x3,
        }
    }

    /// Mesh-recovery backbone preset: 256x256, HR stream on, feature output.
    pub fn potter_hmr() -> Self {
        let dims = [64, 128, 320, 512];
        ModelConfig {
            input_h: 256,
            input_w: 256,
            patch_size: 4,
            dims,
            depths: [2, 2, 6, 2],
            hr_depths: [12, 12, 12],
            hr_enabled: true,
            head: HeadConfig::FeatureMap,
            factorizations: Self::default_factorizations(&dims),
            embed_kind: EmbedKind::Conv7x7,
            merge_kind: MergeKind::Conv3x3,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "micro" => Ok(Self::micro()),
            "cls_s12" => Ok(Self::cls_s12()),
            "potter_hmr" => Ok(Self::potter_hmr()),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected micro, cls_s12, or potter_hmr)"
            ))),
        }
    }
}

// ---------------------------------------------------------------------------
// Parameter schema

/// Expected (name, shape) pairs for a model, in canonical order. This is
/// the single source of truth for initialization and weight validation.
pub fn parameter_schema(config: &ModelConfig, mixer: MixerKind) -> Vec<(String, Vec<usize>)> {
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    let d1 = config.dims[0];
    match config.embed_kind {
        EmbedKind::Patchify => {
            let p = config.patch_size;
            out.push(("embed.w".into(), vec![3 * p * p, d1]));
        }
        EmbedKind::Conv7x7 => out.push(("embed.w".into(), vec![d1, 3, 7, 7])),
    }
    out.push(("embed.b".into(), vec![d1]));

    let mut push_block = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str, d: usize| {
        for ln in ["ln1", "ln2"] {
            out.push((format!("{prefix}.{ln}.gamma"), vec![d]));
            out.push((format!("{prefix}.{ln}.beta"), vec![d]));
        }
        match mixer {
            MixerKind::PoolAttn => {
                for proj in ["proj1", "proj2", "proj3"] {
                    out.push((format!("{prefix}.poolattn.{proj}.w"), vec![d, 3, 3]));
                    out.push((format!("{prefix}.poolattn.{proj}.b"), vec![d]));
                }
            }
            MixerKind::Pooling => {}
            MixerKind::Attention => {
                for m in ["q", "k", "v", "o"] {
                    out.push((format!("{prefix}.attn.{m}.w"), vec![d, d]));
                    out.push((format!("{prefix}.attn.{m}.b"), vec![d]));
                }
            }
        }
        out.push((format!("{prefix}.mlp1.w"), vec![d, 4 * d]));
        out.push((format!("{prefix}.mlp1.b"), vec![4 * d]));
        out.push((format!("{prefix}.mlp2.w"), vec![4 * d, d]));
        out.push((format!("{prefix}.mlp2.b"), vec![d]));
    };

    for stage in 1..=4usize {
        if stage > 1 {
            let (din, dout) = (config.dims[stage - 2], config.dims[stage - 1]);
            match config.merge_kind {
                MergeKind::ConcatLinear => out.push((format!("merge{stage}.w"), vec![4 * din, dout])),
                MergeKind::Conv3x3 => out.push((format!("merge{stage}.w"), vec![dout, din, 3, 3])),
            }
            out.push((format!("merge{stage}.b"), vec![dout]));
        }
        let d = config.dims[stage - 1];
        for block in 0..config.depths[stage - 1] {
            push_block(&mut out, &format!("stage{stage}.block{block}"), d);
        }
    }

    if config.hr_enabled {
        for stage in 2..=4usize {
            let s = 1usize << (stage - 1);
            let din = config.dims[stage - 1];
            out.push((format!("hr.split{stage}.w"), vec![din, s * s * d1]));
            out.push((format!("hr.split{stage}.b"), vec![s * s * d1]));
            for block in 0..config.hr_depths[stage - 2] {
                push_block(&mut out, &format!("hr.stage{stage}.block{block}"), d1);
            }
        }
    }

    if let HeadConfig::Classify { classes } = config.head {
        out.push(("head.w".into(), vec![config.dims[3], classes]));
        out.push(("head.b".into(), vec![classes]));
    }
    out
}

/// Truncated-normal weights (sigma 0.02, clipped at two sigma), zero biases,
/// unit gamma / zero beta for the norms.
pub fn init_params(config: &ModelConfig, mixer: MixerKind, seed: u64) -> Result<ParamSet> {
    config.validate()?;
    let mut rng = Rng::new(seed);
    let mut params = ParamSet::new();
    for (name, shape) in parameter_schema(config, mixer) {
        let t = if name.ends_with(".gamma") {
            Tensor::ones(&shape)
        } else if name.ends_with(".beta") || name.ends_with(".b") {
            Tensor::zeros(&shape)
        } else {
            let data = (0..crate::tensor::numel_of(&shape)).map(|_| rng.trunc_normal(0.02)).collect();
            Tensor::new(&shape, data)?
        };
        params.insert(name, t)?;
    }
    Ok(params)
}

/// Check a loaded parameter set against the schema, reporting every
/// missing, unexpected, or mis-shaped tensor at once.
pub fn validate_params(config: &ModelConfig, mixer: MixerKind, params: &ParamSet) -> Result<()> {
    let schema = parameter_schema(config, mixer);
    let mut problems = Vec::new();
    for (name, shape) in &schema {
        match params.get(name) {
            None => problems.push(format!("missing parameter {name:?}")),
            Some(t) if t.shape() != shape.as_slice() => problems.push(format!(
                "parameter {name:?} has shape {:?}, expected {:?}",
                t.shape(),
                shape
            )),
            Some(_) => {}
        }
    }
    let expected: std::collections::BTreeSet<&str> = schema.iter().map(|(n, _)| n.as_str()).collect();
    for name in params.names() {
        if !expected.contains(name) {
            problems.push(format!("unexpected parameter {name:?}"));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(problems.join("; ")))
    }
}

// ---------------------------------------------------------------------------
// Layers

/// Linear map over channels of a channel-first map: [Din,h,w] -> [Dout,h,w].
fn linear_cf(tape: &mut Tape, x: VarId, wires: DenseWires) -> Result<VarId> {
    let (_, h, w) = tape.value(x).dhw()?;
    let tok = tape.permute(x, &[1, 2, 0])?;
    let out = tape.linear(tok, wires.w, wires.b)?;
    let dout = tape.shape(out)[2];
    debug_assert_eq!(tape.shape(out), [h, w, dout]);
    tape.permute(out, &[2, 0, 1])
}

/// Non-overlapping p x p patchify: each patch's 3p^2 values map linearly to
/// D1 channels. `weights.w` is `[3p^2, D1]`.
pub fn patch_embed(tape: &mut Tape, image: VarId, p: usize, weights: DenseWires) -> Result<VarId> {
    let (c, h, w) = tape.value(image).dhw()?;
    if c != 3 {
        return Err(Error::Shape(format!("patch_embed expects a [3,H,W] image, got {c} channels")));
    }
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Shape(format!("patch size {p} does not divide {h}x{w}")));
    }
    let folded = tape.space_to_depth(image, p)?;
    linear_cf(tape, folded, weights)
}

/// Concatenate each 2x2 neighborhood (4 D_i channels) and apply a linear map
/// to D_(i+1). Output position (i, j) depends only on its 2x2 source block.
pub fn patch_merge(tape: &mut Tape, x: VarId, weights: DenseWires) -> Result<VarId> {
    let (_, h, w) = tape.value(x).dhw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("patch_merge needs even extents, got {h}x{w}")));
    }
    let folded = tape.space_to_depth(x, 2)?;
    linear_cf(tape, folded, weights)
}

/// Linear projection D_i -> s^2 D_1 per position, then sub-pixel
/// rearrangement to a [D_1, s h, s w] map.
pub fn patch_split(tape: &mut Tape, x: VarId, s: usize, weights: DenseWires) -> Result<VarId> {
    if !matches!(s, 2 | 4 | 8) {
        return Err(Error::Shape(format!("patch_split factor {s} not in {{2, 4, 8}}")));
    }
    let projected = linear_cf(tape, x, weights)?;
    tape.depth_to_space(projected, s)
}

/// Global spatial mean then a linear classifier: logits = W . mean + b.
pub fn classify_head(tape: &mut Tape, x: VarId, weights: DenseWires) -> Result<VarId> {
    let (d, _, _) = tape.value(x).dhw()?;
    let pooled_h = tape.axis_mean(x, 1)?;
    let pooled = tape.axis_mean(pooled_h, 2)?;
    let flat = tape.reshape(pooled, &[d])?;
    tape.linear(flat, weights.w, weights.b)
}

// ---------------------------------------------------------------------------
// Streams

fn dense_wires(bound: &BoundParams, name: &str) -> DenseWires {
    DenseWires { w: bound.id(&format!("{name}.w")), b: bound.id(&format!("{name}.b")) }
}

fn conv_wires(bound: &BoundParams, name: &str) -> ConvWires {
    ConvWires { w: bound.id(&format!("{name}.w")), b: bound.id(&format!("{name}.b")) }
}

fn ln_wires(bound: &BoundParams, name: &str) -> LnWires {
    LnWires { gamma: bound.id(&format!("{name}.gamma")), beta: bound.id(&format!("{name}.beta")) }
}

fn block_wires(
    bound: &BoundParams,
    prefix: &str,
    mixer: MixerKind,
    factorization: [usize; 2],
) -> BlockWires {
    let mixer = match mixer {
        MixerKind::PoolAttn => MixerWires::PoolAttn(PoolAttnWires {
            proj1: conv_wires(bound, &format!("{prefix}.poolattn.proj1")),
            proj2: conv_wires(bound, &format!("{prefix}.poolattn.proj2")),
            proj3: conv_wires(bound, &format!("{prefix}.poolattn.proj3")),
            dh: factorization[0],
            dw: factorization[1],
        }),
        MixerKind::Pooling => MixerWires::Pooling,
        MixerKind::Attention => MixerWires::Attention(AttentionWires {
            q: dense_wires(bound, &format!("{prefix}.attn.q")),
            k: dense_wires(bound, &format!("{prefix}.attn.k")),
            v: dense_wires(bound, &format!("{prefix}.attn.v")),
            o: dense_wires(bound, &format!("{prefix}.attn.o")),
        }),
    };
    BlockWires {
        ln1: ln_wires(bound, &format!("{prefix}.ln1")),
        mixer,
        ln2: ln_wires(bound, &format!("{prefix}.ln2")),
        mlp1: dense_wires(bound, &format!("{prefix}.mlp1")),
        mlp2: dense_wires(bound, &format!("{prefix}.mlp2")),
    }
}

/// Embed the image and run the four stages, returning every stage output.
pub fn basic_stream(
    tape: &mut Tape,
    config: &ModelConfig,
    mixer: MixerKind,
    bound: &BoundParams,
    image: VarId,
) -> Result<[VarId; 4]> {
    let mut x = match config.embed_kind {
        EmbedKind::Patchify => patch_embed(tape, image, config.patch_size, dense_wires(bound, "embed"))?,
        EmbedKind::Conv7x7 => {
            tape.conv2d(image, bound.id("embed.w"), bound.id("embed.b"), 4, 3)?
        }
    };
    let mut outputs = [x; 4];
    for stage in 1..=4usize {
        if stage > 1 {
            x = match config.merge_kind {
                MergeKind::ConcatLinear => {
                    patch_merge(tape, x, dense_wires(bound, &format!("merge{stage}")))?
                }
                MergeKind::Conv3x3 => tape.conv2d(
                    x,
                    bound.id(&format!("merge{stage}.w")),
                    bound.id(&format!("merge{stage}.b")),
                    2,
                    1,
                )?,
            };
        }
        for block in 0..config.depths[stage - 1] {
            let wires = block_wires(
                bound,
                &format!("stage{stage}.block{block}"),
                mixer,
                config.factorizations[stage - 1],
            );
            x = mixers::transformer_block(tape, x, &wires)?;
        }
        outputs[stage - 1] = x;
    }
    Ok(outputs)
}

/// High-resolution stream: start from the stage-1 output, and for each later
/// stage add its split map to the state, then run that stage's HR blocks at
/// dimension D_1. The state stays [D_1, H/4, W/4] throughout.
pub fn hr_stream(
    tape: &mut Tape,
    config: &ModelConfig,
    mixer: MixerKind,
    bound: &BoundParams,
    stage_outputs: &[VarId; 4],
) -> Result<VarId> {
    if !config.hr_enabled {
        return Err(Error::Config("hr_stream called with hr_enabled = false".into()));
    }
    let mut hr = stage_outputs[0];
    for stage in 2..=4usize {
        let s = 1usize << (stage - 1);
        let split = patch_split(
            tape,
            stage_outputs[stage - 1],
            s,
            dense_wires(bound, &format!("hr.split{stage}")),
        )?;
        hr = tape.add(split, hr)?;
        for block in 0..config.hr_depths[stage - 2] {
            let wires = block_wires(
                bound,
                &format!("hr.stage{stage}.block{block}"),
                mixer,
                config.factorizations[0],
            );
            hr = mixers::transformer_block(tape, hr, &wires)?;
        }
    }
    Ok(hr)
}

/// All outputs of one forward pass.
pub struct ForwardPass {
    pub stages: [VarId; 4],
    pub hr: Option<VarId>,
    /// Logits for a classify head, else the feature-map output.
    pub output: VarId,
}

pub fn forward(
    tape: &mut Tape,
    config: &ModelConfig,
    mixer: MixerKind,
    bound: &BoundParams,
    image: VarId,
) -> Result<ForwardPass> {
    let shape = tape.value(image).shape().to_vec();
    if shape != [3, config.input_h, config.input_w] {
        return Err(Error::Shape(format!(
            "input {:?} does not match configured [3, {}, {}]",
            shape, config.input_h, config.input_w
        )));
    }
    let stages = basic_stream(tape, config, mixer, bound, image)?;
    let hr = if config.hr_enabled {
        Some(hr_stream(tape, config, mixer, bound, &stages)?)
    } else {
        None
    };
    let output = match config.head {
        HeadConfig::Classify { .. } => classify_head(tape, stages[3], dense_wires(bound, "head"))?,
        HeadConfig::FeatureMap => hr.unwrap_or(stages[3]),
    };
    Ok(ForwardPass { stages, hr, output })
}

/// A config, mixer choice, and parameter set, ready to run.
pub struct Model {
    pub config: ModelConfig,
    pub mixer: MixerKind,
    pub params: ParamSet,
}

impl Model {
    pub fn init(config: ModelConfig, mixer: MixerKind, seed: u64) -> Result<Model> {
        let params = init_params(&config, mixer, seed)?;
        Ok(Model { config, mixer, params })
    }

    pub fn from_params(config: ModelConfig, mixer: MixerKind, params: ParamSet) -> Result<Model> {
        config.validate()?;
        validate_params(&config, mixer, &params)?;
        Ok(Model { config, mixer, params })
    }

    /// Forward one image on a fresh tape and return the output value.
    pub fn run(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let input = tape.constant(image.clone());
        let pass = forward(&mut tape, &self.config, self.mixer, &bound, input)?;
        Ok(tape.value(pass.output).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_embed_shapes() {
        // H=W=32, p=4, D1=16 -> [16, 8, 8]
        let mut tape = Tape::new();
        let img = tape.constant(Tensor::zeros(&[3, 32, 32]));
        let w = tape.constant(Tensor::zeros(&[48, 16]));
        let b = tape.constant(Tensor::zeros(&[16]));
        let y = patch_embed(&mut tape, img, 4, DenseWires { w, b }).unwrap();
        assert_eq!(tape.shape(y), [16, 8, 8]);
        // zero image, zero bias -> zero features
        assert_eq!(tape.value(y), &Tensor::zeros(&[16, 8, 8]));
    }

    #[test]
    fn patch_embed_grid_at_224() {
        let mut tape = Tape::new();
        let img = tape.constant(Tensor::zeros(&[3, 224, 224]));
        let w = tape.constant(Tensor::zeros(&[48, 8]));
        let b = tape.constant(Tensor::zeros(&[8]));
        let y = patch_embed(&mut tape, img, 4, DenseWires { w, b }).unwrap();
        let (_, h, w_) = tape.value(y).dhw().unwrap();
        assert_eq!(h * w_, 3136);
    }

    #[test]
    fn patch_embed_rejects_indivisible() {
        let mut tape = Tape::new();
        let img = tape.constant(Tensor::zeros(&[3, 30, 32]));
        let w = tape.constant(Tensor::zeros(&[48, 16]));
        let b = tape.constant(Tensor::zeros(&[16]));
        assert!(patch_embed(&mut tape, img, 4, DenseWires { w, b }).is_err());
    }

    #[test]
    fn patch_merge_selector_example() {
        // [1,2,2] input [[1,2],[3,4]], weights selecting the first
        // concatenated channel -> [[1]] at [1,1,1].
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let mut w = Tensor::zeros(&[4, 1]);
        w.data_mut()[0] = 1.0;
        let w = tape.constant(w);
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = patch_merge(&mut tape, x, DenseWires { w, b }).unwrap();
        assert_eq!(tape.value(y), &Tensor::new(&[1, 1, 1], vec![1.0]).unwrap());
    }

    #[test]
    fn patch_merge_shape_and_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[64, 56, 56]));
        let w = tape.constant(Tensor::zeros(&[256, 128]));
        let b = tape.constant(Tensor::zeros(&[128]));
        let y = patch_merge(&mut tape, x, DenseWires { w, b }).unwrap();
        assert_eq!(tape.shape(y), [128, 28, 28]);
        assert_eq!(tape.value(y), &Tensor::zeros(&[128, 28, 28]));

        let odd = tape.constant(Tensor::zeros(&[4, 3, 4]));
        assert!(patch_merge(&mut tape, odd, DenseWires { w, b }).is_err());
    }

    #[test]
    fn patch_merge_is_local_to_source_block() {
        let mut rng = Rng::new(41);
        let base: Vec<Real> = (0..2 * 4 * 4).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let w_data: Vec<Real> = (0..8 * 3).map(|_| rng.uniform_in(-1.0, 1.0)).collect();

        let run = |data: Vec<Real>| {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(&[2, 4, 4], data).unwrap());
            let w = tape.constant(Tensor::new(&[8, 3], w_data.clone()).unwrap());
            let b = tape.constant(Tensor::zeros(&[3]));
            let y = patch_merge(&mut tape, x, DenseWires { w, b }).unwrap();
            tape.value(y).clone()
        };
        let before = run(base.clone());
        // poke (3, 3): only merged cell (1, 1) may change
        let mut poked = base;
        poked[3 * 4 + 3] += 1.0;
        let after = run(poked);
        for c in 0..3 {
            for i in 0..2 {
                for j in 0..2 {
                    let same = before.at(&[c, i, j]) == after.at(&[c, i, j]);
                    assert_eq!(same, !(i == 1 && j == 1), "cell ({i},{j}) channel {c}");
                }
            }
        }
    }

    #[test]
    fn patch_split_subpixel_example() {
        // s=2, D_i=4, D1=1, identity weights on channels [1,2,3,4] at one
        // position -> [[1,2],[3,4]].
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let mut w = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            w.data_mut()[i * 4 + i] = 1.0;
        }
        let w = tape.constant(w);
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = patch_split(&mut tape, x, 2, DenseWires { w, b }).unwrap();
        assert_eq!(tape.value(y), &Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    }

    #[test]
    fn patch_split_shape_and_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[512, 7, 7]));
        let w = tape.constant(Tensor::zeros(&[512, 64 * 64]));
        let b = tape.constant(Tensor::zeros(&[64 * 64]));
        let y = patch_split(&mut tape, x, 8, DenseWires { w, b }).unwrap();
        assert_eq!(tape.shape(y), [64, 56, 56]);
        assert_eq!(tape.value(y), &Tensor::zeros(&[64, 56, 56]));

        assert!(patch_split(&mut tape, x, 3, DenseWires { w, b }).is_err());
    }

    #[test]
    fn classify_head_examples() {
        let mut tape = Tape::new();
        // zero W -> logits == b
        let x = tape.constant(Tensor::full(&[4, 2, 2], 1.5));
        let w = tape.constant(Tensor::zeros(&[4, 3]));
        let b = tape.constant(Tensor::new(&[3], vec![0.1, -0.2, 0.3]).unwrap());
        let y = classify_head(&mut tape, x, DenseWires { w, b }).unwrap();
        assert_eq!(tape.value(y), &Tensor::new(&[3], vec![0.1, -0.2, 0.3]).unwrap());

        // identity-like W maps channel means straight through
        let mut data = Tensor::zeros(&[2, 2, 2]);
        data.data_mut().copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 10.0, 10.0, 10.0, 10.0]);
        let x2 = tape.constant(data);
        let mut wid = Tensor::zeros(&[2, 2]);
        wid.data_mut()[0] = 1.0;
        wid.data_mut()[3] = 1.0;
        let w2 = tape.constant(wid);
        let b2 = tape.constant(Tensor::zeros(&[2]));
        let y2 = classify_head(&mut tape, x2, DenseWires { w: w2, b: b2 }).unwrap();
        assert_eq!(tape.value(y2), &Tensor::new(&[2], vec![2.5, 10.0]).unwrap());
    }

    #[test]
    fn basic_stream_shape_ladder() {
        // H=W=64, dims [8,16,32,64], depths [1,1,1,1]
        let dims = [8, 16, 32, 64];
        let config = ModelConfig {
            input_h: 64,
            input_w: 64,
            patch_size: 4,
            dims,
            depths: [1, 1, 1, 1],
            hr_depths: [1, 1, 1],
            hr_enabled: true,
            head: HeadConfig::FeatureMap,
            factorizations: ModelConfig::default_factorizations(&dims),
            embed_kind: EmbedKind::Patchify,
            merge_kind: MergeKind::ConcatLinear,
        };
        let model = Model::init(config.clone(), MixerKind::PoolAttn, 7).unwrap();
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let img = tape.constant(Tensor::zeros(&[3, 64, 64]));
        let pass = forward(&mut tape, &config, MixerKind::PoolAttn, &bound, img).unwrap();
        assert_eq!(tape.shape(pass.stages[0]), [8, 16, 16]);
        assert_eq!(tape.shape(pass.stages[1]), [16, 8, 8]);
        assert_eq!(tape.shape(pass.stages[2]), [32, 4, 4]);
        assert_eq!(tape.shape(pass.stages[3]), [64, 2, 2]);
        // HR output keeps the stage-1 grid regardless of later dims.
        assert_eq!(tape.shape(pass.hr.unwrap()), [8, 16, 16]);
    }

    #[test]
    fn depth_zero_is_embed_and_merge_only() {
        let dims = [4, 8, 12, 16];
        let config = ModelConfig {
            depths: [0, 0, 0, 0],
            hr_enabled: false,
            head: HeadConfig::FeatureMap,
            ..ModelConfig::micro()
        };
        let config = ModelConfig { dims, factorizations: ModelConfig::default_factorizations(&dims), ..config };
        let model = Model::init(config.clone(), MixerKind::PoolAttn, 1).unwrap();
        let out = model.run(&Tensor::zeros(&[3, 32, 32])).unwrap();
        assert_eq!(out.shape(), [16, 1, 1]);
    }

    #[test]
    fn hr_disabled_output_is_stage4_map() {
        let config = ModelConfig { head: HeadConfig::FeatureMap, ..ModelConfig::micro() };
        let model = Model::init(config, MixerKind::PoolAttn, 3).unwrap();
        let out = model.run(&Tensor::zeros(&[3, 32, 32])).unwrap();
        assert_eq!(out.shape(), [16, 1, 1]);
    }

    #[test]
    fn hr_identity_when_later_stages_contribute_zero() {
        // Zero split weights and zero HR block weights (with unit gamma the
        // blocks still add zero branches), so the HR output equals X_out1.
        let config = ModelConfig { hr_enabled: true, head: HeadConfig::FeatureMap, ..ModelConfig::micro() };
        let mut model = Model::init(config.clone(), MixerKind::PoolAttn, 5).unwrap();
        let zero_names: Vec<String> = model
            .params
            .names()
            .filter(|n| n.starts_with("hr."))
            .map(String::from)
            .collect();
        for (i, name) in model.params.names().map(String::from).enumerate().collect::<Vec<_>>() {
            if zero_names.contains(&name) && !name.ends_with(".gamma") {
                let shape = model.params.tensor_at(i).shape().to_vec();
                *model.params.tensor_at_mut(i) = Tensor::zeros(&shape);
            }
        }
        let img = Tensor::new(
            &[3, 32, 32],
            (0..3 * 32 * 32).map(|i| ((i * 31 % 17) as Real) / 17.0).collect(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let input = tape.constant(img);
        let pass = forward(&mut tape, &config, MixerKind::PoolAttn, &bound, input).unwrap();
        assert_eq!(tape.value(pass.hr.unwrap()), tape.value(pass.stages[0]));
    }

    #[test]
    fn validate_params_reports_all_problems() {
        let config = ModelConfig::micro();
        let mut params = init_params(&config, MixerKind::PoolAttn, 0).unwrap();
        params.insert("bogus.w", Tensor::zeros(&[1])).unwrap();
        let err = validate_params(&config, MixerKind::PoolAttn, &params).unwrap_err().to_string();
        assert!(err.contains("unexpected parameter"));

        let mut missing = ParamSet::new();
        missing.insert("embed.w", Tensor::zeros(&[48, 4])).unwrap();
        let err = validate_params(&config, MixerKind::PoolAttn, &missing).unwrap_err().to_string();
        assert!(err.contains("missing parameter"));
    }

    #[test]
    fn config_validation_errors() {
        let mut c = ModelConfig::micro();
        c.input_h = 33;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::micro();
        c.factorizations[0] = [3, 2];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::micro();
        c.patch_size = 8;
        assert!(c.validate().is_err());
        assert!(ModelConfig::micro().validate().is_ok());
        assert!(ModelConfig::cls_s12().validate().is_ok());
        assert!(ModelConfig::potter_hmr().validate().is_ok());
    }
}
