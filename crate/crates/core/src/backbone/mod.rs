//! Small residual convolutional feature extractor with exact reverse-mode
//! gradients, an embedding head, and a detachable softmax head for the
//! collapse-avoiding pre-training stage.
//!
//! Blocks are conv-ReLU-conv with a skip add and no normalization layers, so
//! every gradient is finite-difference checkable and a block with zeroed
//! kernels computes exactly its skip path.

mod checkpoint;
mod layers;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use tensor::Tensor;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::{Batch, LabelVocab};
use crate::image::LabeledImage;
use crate::triplet::{
    self, MarginSpec, Metric, MinedTriplet, Reduction, TripletError,
};
use layers::*;
use tensor::FeatureMap;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("image resolution {image} does not match model resolution {model}")]
    ResolutionMismatch { model: usize, image: usize },
    #[error("model has no softmax head")]
    HeadAbsent,
    #[error("class {0} not present in the label vocabulary")]
    LabelNotInVocab(String),
    #[error("gradient set has {got} tensors, model has {expected}")]
    GradientShapeMismatch { got: usize, expected: usize },
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("non-finite parameter after update in {0}")]
    NonFiniteParameter(String),
    #[error(transparent)]
    Mining(#[from] TripletError),
    #[error("checkpoint i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint magic (expected TFCK)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint does not match its config block: {0}")]
    ConfigMismatch(String),
}

/// Architecture description: a stem conv + max-pool, residual stages, global
/// average pooling, and a fully connected embedding head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub input_resolution: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub embedding_dim: usize,
    /// Softmax head width; `None` builds a model without the head.
    pub num_classes: Option<usize>,
}

impl BackboneConfig {
    /// Desk-scale default: trains in minutes on a CPU.
    pub fn toy() -> Self {
        Self {
            input_resolution: 64,
            stage_channels: vec![16, 32, 64],
            blocks_per_stage: vec![2, 2, 2],
            embedding_dim: 128,
            num_classes: None,
        }
    }

    /// Smallest config that still exercises every layer type; used by the
    /// gradient-check suite.
    pub fn tiny() -> Self {
        Self {
            input_resolution: 16,
            stage_channels: vec![4, 8],
            blocks_per_stage: vec![1, 1],
            embedding_dim: 8,
            num_classes: None,
        }
    }

    /// Full-scale layout mirroring the ResNet-50 stage widths and block
    /// counts at basic-block granularity, with a 2048-wide embedding.
    pub fn resnet50_like() -> Self {
        Self {
            input_resolution: 256,
            stage_channels: vec![64, 128, 256, 512],
            blocks_per_stage: vec![3, 4, 6, 3],
            embedding_dim: 2048,
            num_classes: None,
        }
    }

    pub fn with_classes(mut self, num_classes: usize) -> Self {
        self.num_classes = Some(num_classes);
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.stage_channels.is_empty() || self.stage_channels.len() != self.blocks_per_stage.len()
        {
            return Err(ModelError::InvalidConfig(format!(
                "stage_channels ({}) and blocks_per_stage ({}) must be equal-length and nonempty",
                self.stage_channels.len(),
                self.blocks_per_stage.len()
            )));
        }
        if self.embedding_dim < 2 {
            return Err(ModelError::InvalidConfig(format!(
                "embedding_dim must be >= 2 (got {})",
                self.embedding_dim
            )));
        }
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(ModelError::InvalidConfig("zero-width stage".into()));
        }
        if self.blocks_per_stage.iter().any(|&b| b == 0) {
            return Err(ModelError::InvalidConfig("stage with zero blocks".into()));
        }
        if let Some(n) = self.num_classes {
            if n < 2 {
                return Err(ModelError::InvalidConfig(format!(
                    "softmax head needs >= 2 classes (got {n})"
                )));
            }
        }
        // The stem conv + pool quarter the resolution and every later stage
        // halves it again; require at least one real pixel at the end.
        if self.input_resolution < 8 {
            return Err(ModelError::InvalidConfig(format!(
                "input resolution must be >= 8 (got {})",
                self.input_resolution
            )));
        }
        let mut size = conv_out_size(self.input_resolution, 7, 2, 3);
        size = conv_out_size(size, 3, 2, 1);
        for _ in 1..self.stage_channels.len() {
            size = conv_out_size(size, 3, 2, 1);
        }
        if size < 2 {
            return Err(ModelError::InvalidConfig(format!(
                "input resolution {} collapses below 2x2 over {} stages",
                self.input_resolution,
                self.stage_channels.len()
            )));
        }
        Ok(())
    }
}

/// Fixed-order parameter naming; the checkpoint format and gradient layout
/// both follow it.
fn param_layout(config: &BackboneConfig) -> Vec<(String, Vec<usize>)> {
    let mut layout = Vec::new();
    let c0 = config.stage_channels[0];
    layout.push(("stem.kernel".into(), vec![c0, 1, 7, 7]));
    layout.push(("stem.bias".into(), vec![c0]));
    let mut in_c = c0;
    for (s, (&out_c, &blocks)) in config
        .stage_channels
        .iter()
        .zip(&config.blocks_per_stage)
        .enumerate()
    {
        for b in 0..blocks {
            let block_in = if b == 0 { in_c } else { out_c };
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            layout.push((format!("s{s}.b{b}.conv1.kernel"), vec![out_c, block_in, 3, 3]));
            layout.push((format!("s{s}.b{b}.conv1.bias"), vec![out_c]));
            layout.push((format!("s{s}.b{b}.conv2.kernel"), vec![out_c, out_c, 3, 3]));
            layout.push((format!("s{s}.b{b}.conv2.bias"), vec![out_c]));
            if stride != 1 || block_in != out_c {
                layout.push((format!("s{s}.b{b}.proj.kernel"), vec![out_c, block_in, 1, 1]));
            }
        }
        in_c = out_c;
    }
    layout.push(("fc.weight".into(), vec![config.embedding_dim, in_c]));
    layout.push(("fc.bias".into(), vec![config.embedding_dim]));
    if let Some(n) = config.num_classes {
        layout.push(("head.weight".into(), vec![n, config.embedding_dim]));
        layout.push(("head.bias".into(), vec![n]));
    }
    layout
}

/// Indices into the parameter vector for one residual block.
#[derive(Debug, Clone, Copy)]
struct BlockPlan {
    conv1_k: usize,
    conv1_b: usize,
    conv2_k: usize,
    conv2_b: usize,
    proj_k: Option<usize>,
    stride: usize,
}

#[derive(Debug, Clone)]
struct Plan {
    stem_k: usize,
    stem_b: usize,
    blocks: Vec<BlockPlan>,
    fc_w: usize,
    fc_b: usize,
    head: Option<(usize, usize)>,
}

fn build_plan(config: &BackboneConfig) -> Plan {
    let mut idx = 2; // stem kernel, stem bias
    let mut blocks = Vec::new();
    for (s, &nblocks) in config.blocks_per_stage.iter().enumerate() {
        for b in 0..nblocks {
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            let in_c = if b == 0 {
                if s == 0 {
                    config.stage_channels[0]
                } else {
                    config.stage_channels[s - 1]
                }
            } else {
                config.stage_channels[s]
            };
            let needs_proj = stride != 1 || in_c != config.stage_channels[s];
            let plan = BlockPlan {
                conv1_k: idx,
                conv1_b: idx + 1,
                conv2_k: idx + 2,
                conv2_b: idx + 3,
                proj_k: needs_proj.then_some(idx + 4),
                stride,
            };
            idx += if needs_proj { 5 } else { 4 };
            blocks.push(plan);
        }
    }
    let fc_w = idx;
    let head = config.num_classes.map(|_| (idx + 2, idx + 3));
    Plan {
        stem_k: 0,
        stem_b: 1,
        blocks,
        fc_w,
        fc_b: fc_w + 1,
        head,
    }
}

/// Parameterized feature extractor. Parameters are kept on the f32 grid so
/// checkpoint round trips are bit-exact.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneModel {
    config: BackboneConfig,
    params: Vec<Tensor>,
}

impl BackboneModel {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        param_layout(&self.config)
            .into_iter()
            .map(|(name, _)| name)
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn has_head(&self) -> bool {
        self.config.num_classes.is_some()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    pub(crate) fn from_parts(config: BackboneConfig, params: Vec<Tensor>) -> Self {
        Self { config, params }
    }

    /// Test-and-oracle hook: mutate one parameter value (off-grid values are
    /// allowed; finite-difference probes need them).
    pub fn set_param_value(&mut self, tensor_idx: usize, value_idx: usize, value: f64) {
        self.params[tensor_idx].data_mut()[value_idx] = value;
    }
}

/// One extracted feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Vec<f64>,
    pub source_id: String,
}

/// Per-parameter gradients, shape-congruent with the model parameters.
#[derive(Debug, Clone)]
pub struct GradientSet {
    tensors: Vec<Tensor>,
}

impl GradientSet {
    pub fn zeros_like(model: &BackboneModel) -> Self {
        Self {
            tensors: model
                .params
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
        }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            t.scale(factor);
        }
    }
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// Kaiming fan-in scaled kernels, zero biases. Deterministic per seed;
/// parameters land on the f32 grid.
///
/// Without normalization layers, stacked skip-adds compound the branch
/// variance, so the second conv of each block and the softmax head start at
/// a tenth of the Kaiming scale to keep activations and logits bounded.
pub fn init_model(config: &BackboneConfig, seed: u64) -> Result<BackboneModel, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    for (name, shape) in param_layout(config) {
        let mut t = Tensor::zeros(&shape);
        if name.ends_with(".bias") {
            params.push(t);
            continue;
        }
        let fan_in: usize = shape[1..].iter().product();
        let mut std = (2.0 / fan_in as f64).sqrt();
        if name.contains(".conv2.") || name == "head.weight" {
            std *= 0.1;
        }
        for v in t.data_mut() {
            *v = std * standard_normal(&mut rng);
        }
        t.quantize_to_f32_grid();
        params.push(t);
    }
    Ok(BackboneModel::from_parts(config.clone(), params))
}

/// Box-Muller draw from N(0,1).
fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

struct BlockTrace {
    input: FeatureMap,
    conv1_pre: FeatureMap,
    conv1_act: FeatureMap,
}

struct Trace {
    input: FeatureMap,
    stem_pre: FeatureMap,
    pool_argmax: Vec<usize>,
    stem_act_shape: (usize, usize, usize),
    blocks: Vec<BlockTrace>,
    gap_in: FeatureMap,
    gap_out: Vec<f64>,
    embedding: Vec<f64>,
}

/// out = skip(x) + conv2(relu(conv1(x))); with zeroed conv kernels and
/// biases the block computes exactly its skip path (identity or projection).
fn block_forward(x: FeatureMap, p: &[Tensor], bp: &BlockPlan) -> (FeatureMap, BlockTrace) {
    let conv1_pre = conv2d_forward(&x, &p[bp.conv1_k], Some(&p[bp.conv1_b]), bp.stride, 1);
    let conv1_act = relu_forward(&conv1_pre);
    let conv2_out = conv2d_forward(&conv1_act, &p[bp.conv2_k], Some(&p[bp.conv2_b]), 1, 1);
    let mut out = match bp.proj_k {
        Some(k) => conv2d_forward(&x, &p[k], None, bp.stride, 0),
        None => x.clone(),
    };
    debug_assert!(out.same_shape(&conv2_out));
    for (o, u) in out.data.iter_mut().zip(&conv2_out.data) {
        *o += u;
    }
    (
        out,
        BlockTrace {
            input: x,
            conv1_pre,
            conv1_act,
        },
    )
}

fn image_to_map(image: &LabeledImage) -> FeatureMap {
    let g = image.pixels();
    FeatureMap {
        channels: 1,
        height: g.height(),
        width: g.width(),
        data: g.data().to_vec(),
    }
}

fn forward_trace(model: &BackboneModel, image: &LabeledImage) -> Result<Trace, ModelError> {
    if image.resolution() != model.config.input_resolution {
        return Err(ModelError::ResolutionMismatch {
            model: model.config.input_resolution,
            image: image.resolution(),
        });
    }
    let plan = build_plan(&model.config);
    let p = &model.params;
    let input = image_to_map(image);

    let stem_pre = conv2d_forward(&input, &p[plan.stem_k], Some(&p[plan.stem_b]), 2, 3);
    let stem_act = relu_forward(&stem_pre);
    let (mut x, pool_argmax) = maxpool3_forward(&stem_act);
    let stem_act_shape = (stem_act.channels, stem_act.height, stem_act.width);

    let mut blocks = Vec::with_capacity(plan.blocks.len());
    for bp in &plan.blocks {
        let (out, trace) = block_forward(x, p, bp);
        blocks.push(trace);
        x = out;
    }

    let gap_out = gap_forward(&x);
    let embedding = linear_forward(&p[plan.fc_w], &p[plan.fc_b], &gap_out);
    Ok(Trace {
        input,
        stem_pre,
        pool_argmax,
        stem_act_shape,
        blocks,
        gap_in: x,
        gap_out,
        embedding,
    })
}

/// Embedding head output: stem + residual stages + global average pool +
/// fully connected layer.
pub fn forward_embed(model: &BackboneModel, image: &LabeledImage) -> Result<Embedding, ModelError> {
    let trace = forward_trace(model, image)?;
    Ok(Embedding {
        values: trace.embedding,
        source_id: image.source_id().to_string(),
    })
}

/// Pre-softmax class scores from the detachable head.
pub fn forward_logits(model: &BackboneModel, image: &LabeledImage) -> Result<Vec<f64>, ModelError> {
    let plan = build_plan(&model.config);
    let (head_w, head_b) = plan.head.ok_or(ModelError::HeadAbsent)?;
    let trace = forward_trace(model, image)?;
    Ok(linear_forward(
        &model.params[head_w],
        &model.params[head_b],
        &trace.embedding,
    ))
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

/// Loss selector for [`backward`].
pub enum LossSpec<'a> {
    /// Mean cross-entropy over the batch through the softmax head.
    SoftmaxCe { vocab: &'a LabelVocab },
    /// Batch-hard triplet objective on the embedding head over in-batch L2
    /// distances.
    Triplet {
        margin: MarginSpec,
        reduction: Reduction,
    },
}

/// Backpropagates the model below the embedding given d(loss)/d(embedding).
fn backprop_trace(
    model: &BackboneModel,
    plan: &Plan,
    trace: &Trace,
    grad_embedding: &[f64],
    grads: &mut GradientSet,
) {
    let p = &model.params;
    let g = &mut grads.tensors;

    // fc
    let grad_gap_out = {
        let (w, rest) = g.split_at_mut(plan.fc_b);
        linear_backward(
            &p[plan.fc_w],
            &trace.gap_out,
            grad_embedding,
            &mut w[plan.fc_w],
            &mut rest[0],
        )
    };
    let shape = (
        trace.gap_in.channels,
        trace.gap_in.height,
        trace.gap_in.width,
    );
    let mut grad_x = gap_backward(&grad_gap_out, shape);

    for (bp, bt) in plan.blocks.iter().zip(&trace.blocks).rev() {
        // out = skip(input) + conv2(relu(conv1(input)))
        let grad_out = grad_x;
        // conv2 path
        let grad_conv1_act = {
            let (left, right) = g.split_at_mut(bp.conv2_b);
            conv2d_backward(
                &bt.conv1_act,
                &p[bp.conv2_k],
                &grad_out,
                1,
                1,
                &mut left[bp.conv2_k],
                Some(&mut right[0]),
            )
        };
        let grad_conv1_pre = relu_backward(&bt.conv1_pre, &grad_conv1_act);
        let mut grad_input = {
            let (left, right) = g.split_at_mut(bp.conv1_b);
            conv2d_backward(
                &bt.input,
                &p[bp.conv1_k],
                &grad_conv1_pre,
                bp.stride,
                1,
                &mut left[bp.conv1_k],
                Some(&mut right[0]),
            )
        };
        // skip path
        match bp.proj_k {
            Some(k) => {
                let grad_skip_in = conv2d_backward(
                    &bt.input,
                    &p[k],
                    &grad_out,
                    bp.stride,
                    0,
                    &mut g[k],
                    None,
                );
                for (a, b) in grad_input.data.iter_mut().zip(&grad_skip_in.data) {
                    *a += b;
                }
            }
            None => {
                for (a, b) in grad_input.data.iter_mut().zip(&grad_out.data) {
                    *a += b;
                }
            }
        }
        grad_x = grad_input;
    }

    let grad_stem_act = maxpool3_backward(&trace.pool_argmax, trace.stem_act_shape, &grad_x);
    let grad_stem_pre = relu_backward(&trace.stem_pre, &grad_stem_act);
    let (left, right) = g.split_at_mut(plan.stem_b);
    conv2d_backward(
        &trace.input,
        &p[plan.stem_k],
        &grad_stem_pre,
        2,
        3,
        &mut left[plan.stem_k],
        Some(&mut right[0]),
    );
}

/// Numerically stable log(sum(exp(logits))).
fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln()
}

/// Loss value and exact parameter gradients for one batch.
///
/// The mining result is treated as a fixed index selection: gradients flow
/// through the selected distances only (subgradient convention at ties).
pub fn backward(
    model: &BackboneModel,
    batch: &Batch,
    loss: &LossSpec,
) -> Result<(f64, GradientSet), ModelError> {
    backward_detailed(model, batch, loss).map(|(loss, grads, _)| (loss, grads))
}

/// [`backward`] plus the mined triplets (for triplet losses), so training
/// loops can log hardness statistics without a second forward pass.
pub fn backward_detailed(
    model: &BackboneModel,
    batch: &Batch,
    loss: &LossSpec,
) -> Result<(f64, GradientSet, Option<Vec<MinedTriplet>>), ModelError> {
    let plan = build_plan(&model.config);
    let traces: Vec<Trace> = batch
        .images()
        .par_iter()
        .map(|img| forward_trace(model, img))
        .collect::<Result<_, _>>()?;

    // d(loss)/d(embedding) per image, plus any head gradients.
    let mut grad_embeddings = vec![vec![0.0; model.config.embedding_dim]; traces.len()];
    let mut head_grads: Option<(Tensor, Tensor)> = None;
    let mut mined: Option<Vec<MinedTriplet>> = None;
    let loss_value = match loss {
        LossSpec::SoftmaxCe { vocab } => {
            let (head_w_idx, head_b_idx) = plan.head.ok_or(ModelError::HeadAbsent)?;
            let head_w = &model.params[head_w_idx];
            let head_b = &model.params[head_b_idx];
            let mut gw = Tensor::zeros(head_w.shape());
            let mut gb = Tensor::zeros(head_b.shape());
            let scale = 1.0 / traces.len() as f64;
            let mut total = 0.0;
            for (i, (trace, image)) in traces.iter().zip(batch.images()).enumerate() {
                let target = vocab
                    .index_of(image.class_id())
                    .ok_or_else(|| ModelError::LabelNotInVocab(image.class_id().to_string()))?;
                let logits = linear_forward(head_w, head_b, &trace.embedding);
                let lse = log_sum_exp(&logits);
                total += (lse - logits[target]) * scale;
                let mut grad_logits: Vec<f64> =
                    logits.iter().map(|&l| (l - lse).exp() * scale).collect();
                grad_logits[target] -= scale;
                grad_embeddings[i] =
                    linear_backward(head_w, &trace.embedding, &grad_logits, &mut gw, &mut gb);
            }
            head_grads = Some((gw, gb));
            total
        }
        LossSpec::Triplet { margin, reduction } => {
            let vectors: Vec<&[f64]> = traces.iter().map(|t| t.embedding.as_slice()).collect();
            let dm = triplet::pairwise_distances_raw(&vectors, Metric::EuclideanL2)?;
            let labels = batch.labels();
            let triplets = triplet::mine_batch_hard(&dm, &labels)?;
            let loss_value = triplet::triplet_loss(&triplets, *margin, *reduction);
            let scale = match reduction {
                Reduction::Sum => 1.0,
                Reduction::Mean => 1.0 / triplets.len().max(1) as f64,
            };
            accumulate_triplet_embedding_grads(
                &triplets,
                &vectors,
                *margin,
                scale,
                &mut grad_embeddings,
            );
            mined = Some(triplets);
            loss_value
        }
    };

    // Backprop every image's trace with its embedding gradient, in index
    // order for a reproducible reduction.
    let per_image: Vec<GradientSet> = traces
        .par_iter()
        .zip(grad_embeddings.par_iter())
        .map(|(trace, grad_emb)| {
            let mut grads = GradientSet::zeros_like(model);
            backprop_trace(model, &plan, trace, grad_emb, &mut grads);
            grads
        })
        .collect();
    let mut grads = GradientSet::zeros_like(model);
    for g in &per_image {
        grads.add_assign(g);
    }
    if let Some((gw, gb)) = head_grads {
        let (head_w_idx, head_b_idx) = plan.head.expect("head checked above");
        grads.tensors[head_w_idx].add_assign(&gw);
        grads.tensors[head_b_idx].add_assign(&gb);
    }
    Ok((loss_value, grads, mined))
}

/// Chain rule from d(loss)/d(distance) into embedding gradients, using the
/// L2 unit direction; a zero distance contributes a zero subgradient.
fn accumulate_triplet_embedding_grads(
    triplets: &[MinedTriplet],
    vectors: &[&[f64]],
    margin: MarginSpec,
    scale: f64,
    grad_embeddings: &mut [Vec<f64>],
) {
    for t in triplets {
        let w = triplet::triplet_distance_grad(t, margin) * scale;
        if w == 0.0 {
            continue;
        }
        add_distance_grad(grad_embeddings, vectors, t.anchor_idx, t.positive_idx, t.d_ap, w);
        add_distance_grad(grad_embeddings, vectors, t.anchor_idx, t.negative_idx, t.d_an, -w);
    }
}

fn add_distance_grad(
    grad_embeddings: &mut [Vec<f64>],
    vectors: &[&[f64]],
    i: usize,
    j: usize,
    distance: f64,
    weight: f64,
) {
    if distance == 0.0 {
        return;
    }
    let coeff = weight / distance;
    for d in 0..vectors[i].len() {
        let diff = vectors[i][d] - vectors[j][d];
        grad_embeddings[i][d] += coeff * diff;
        grad_embeddings[j][d] -= coeff * diff;
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Classical momentum buffers, one per parameter tensor.
#[derive(Debug, Clone)]
pub struct SgdState {
    velocity: Vec<Tensor>,
}

impl SgdState {
    pub fn new(model: &BackboneModel) -> Self {
        Self {
            velocity: model
                .params
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
        }
    }
}

/// v = momentum * v + g; p -= lr * v. Parameters stay on the f32 grid.
pub fn sgd_step(
    model: &mut BackboneModel,
    grads: &GradientSet,
    lr: f64,
    momentum: f64,
    state: &mut SgdState,
) -> Result<(), ModelError> {
    if grads.tensors.len() != model.params.len() {
        return Err(ModelError::GradientShapeMismatch {
            got: grads.tensors.len(),
            expected: model.params.len(),
        });
    }
    let names = model.param_names();
    for (idx, g) in grads.tensors.iter().enumerate() {
        if g.shape() != model.params[idx].shape() {
            return Err(ModelError::GradientShapeMismatch {
                got: grads.tensors.len(),
                expected: model.params.len(),
            });
        }
        if !g.is_finite() {
            return Err(ModelError::NonFiniteGradient(names[idx].clone()));
        }
    }
    for (idx, (param, g)) in model
        .params
        .iter_mut()
        .zip(&grads.tensors)
        .enumerate()
    {
        let v = &mut state.velocity[idx];
        for ((pv, vv), gv) in param
            .data_mut()
            .iter_mut()
            .zip(v.data_mut())
            .zip(g.data())
        {
            *vv = momentum * *vv + gv;
            *pv -= lr * *vv;
        }
        param.quantize_to_f32_grid();
        if !param.is_finite() {
            return Err(ModelError::NonFiniteParameter(names[idx].clone()));
        }
    }
    Ok(())
}
