//! Residual network definitions: a residual MLP classifier and a tiny ViT,
//! both exposing an ordered list of droppable residual blocks.
//!
//! Every block maps `(batch, ..., width)` to the same shape and its output is
//! added to its input; stochastic depth gates that addition per sample.
//! Blocks are pre-norm: the layernorm lives inside the residual branch, so a
//! dropped block contributes nothing at all.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::EngineRng;
use crate::sdepth::{apply_efficient, apply_naive, DropPattern, SdImpl};
use crate::tensor::{Element, Tensor};

/// Weight-initialization spread for linear weights, class token, and
/// positional embeddings (truncated normal, clipped at two deviations).
pub const INIT_STD: f64 = 0.02;

/// Architecture shape, stored in checkpoints so they are self-describing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ArchDescriptor {
    /// `input_dim -> width` embedding, `depth` FFN residual blocks
    /// (`linear -> gelu -> linear`, hidden size = `hidden`), layernorm +
    /// linear head.
    ///
    /// Parameter count: `input_dim*W + W` (stem)
    /// `+ depth * (2W + W*hidden + hidden + hidden*W + W)` (blocks)
    /// `+ 2W + W*C + C` (head).
    ResidualMlp { input_dim: usize, width: usize, depth: usize, hidden: usize, num_classes: usize },
    /// Patch-embed stem with class token and learned positional embedding;
    /// each of the `depth_blocks` transformer blocks contributes TWO
    /// droppable residual blocks (attention, then FFN), so `L = 2 *
    /// depth_blocks`.
    TinyVit {
        image_size: usize,
        patch_size: usize,
        width: usize,
        depth_blocks: usize,
        heads: usize,
        hidden: usize,
        num_classes: usize,
    },
}

impl ArchDescriptor {
    /// Number of droppable residual blocks.
    pub fn depth(&self) -> usize {
        match self {
            ArchDescriptor::ResidualMlp { depth, .. } => *depth,
            ArchDescriptor::TinyVit { depth_blocks, .. } => 2 * depth_blocks,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            ArchDescriptor::ResidualMlp { num_classes, .. } => *num_classes,
            ArchDescriptor::TinyVit { num_classes, .. } => *num_classes,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    MlpFfn,
    SelfAttention,
}

/// Pre-norm FFN residual branch: `linear(gelu(linear(ln(x))))`.
#[derive(Clone, Debug)]
pub struct FfnParams<E> {
    pub ln_gamma: Tensor<E>,
    pub ln_beta: Tensor<E>,
    pub w1: Tensor<E>,
    pub b1: Tensor<E>,
    pub w2: Tensor<E>,
    pub b2: Tensor<E>,
}

/// Pre-norm multi-head self-attention residual branch.
#[derive(Clone, Debug)]
pub struct AttnParams<E> {
    pub ln_gamma: Tensor<E>,
    pub ln_beta: Tensor<E>,
    pub w_qkv: Tensor<E>,
    pub b_qkv: Tensor<E>,
    pub w_out: Tensor<E>,
    pub b_out: Tensor<E>,
    pub heads: usize,
}

/// One droppable residual block: position `l` in the model's block list.
#[derive(Clone, Debug)]
pub enum ResidualBlock<E> {
    Ffn(FfnParams<E>),
    Attn(AttnParams<E>),
}

impl<E: Element> ResidualBlock<E> {
    pub fn kind(&self) -> BlockKind {
        match self {
            ResidualBlock::Ffn(_) => BlockKind::MlpFfn,
            ResidualBlock::Attn(_) => BlockKind::SelfAttention,
        }
    }

    /// Matmul FLOPs (2 per multiply-accumulate) this block spends on one
    /// batch row carrying `tokens` tokens. Normalization and activations are
    /// excluded; this is the quantity that scales with the kept sub-batch.
    pub fn flops_per_row(&self, tokens: usize) -> u64 {
        match self {
            ResidualBlock::Ffn(p) => {
                let w = p.w1.shape()[0] as u64;
                let h = p.w1.shape()[1] as u64;
                2 * (tokens as u64) * 2 * w * h
            }
            ResidualBlock::Attn(p) => {
                let w = p.w_qkv.shape()[0] as u64;
                let t = tokens as u64;
                // qkv + output projections, plus the two attention matmuls
                let macs = t * (3 * w * w) + t * w * w + 2 * t * t * w;
                2 * macs
            }
        }
    }
}

/// Input embedding.
#[derive(Clone, Debug)]
pub enum Stem<E> {
    /// `x (B, D) -> x W + b : (B, W)`.
    Linear { w: Tensor<E>, b: Tensor<E> },
    /// Patchify + linear embed + class token + positional embedding.
    Patch {
        w: Tensor<E>,
        b: Tensor<E>,
        cls: Tensor<E>,
        pos: Tensor<E>,
        patch_size: usize,
        image_size: usize,
    },
}

/// Layernorm + linear classifier. For the ViT the class token is read out;
/// the residual MLP carries a single feature vector per sample.
#[derive(Clone, Debug)]
pub struct Head<E> {
    pub ln_gamma: Tensor<E>,
    pub ln_beta: Tensor<E>,
    pub w: Tensor<E>,
    pub b: Tensor<E>,
}

/// The parameter set theta and its ordered droppable residual blocks.
#[derive(Clone, Debug)]
pub struct Model<E> {
    pub arch: ArchDescriptor,
    pub stem: Stem<E>,
    pub blocks: Vec<ResidualBlock<E>>,
    pub head: Head<E>,
}

/// Which part of the model a parameter belongs to (LayerDecay grouping).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Stem,
    Block(usize),
    Head,
}

impl<E: Element> Model<E> {
    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes()
    }

    /// All parameters in canonical order: stem, blocks by index, head.
    /// The optimizer, checkpoints, and tape registration all follow this
    /// single order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<E>)> {
        let mut out: Vec<(String, &Tensor<E>)> = Vec::new();
        match &self.stem {
            Stem::Linear { w, b } => {
                out.push(("stem.w".into(), w));
                out.push(("stem.b".into(), b));
            }
            Stem::Patch { w, b, cls, pos, .. } => {
                out.push(("stem.w".into(), w));
                out.push(("stem.b".into(), b));
                out.push(("stem.cls".into(), cls));
                out.push(("stem.pos".into(), pos));
            }
        }
        for (l, block) in self.blocks.iter().enumerate() {
            match block {
                ResidualBlock::Ffn(p) => {
                    out.push((format!("block{l}.ln_g"), &p.ln_gamma));
                    out.push((format!("block{l}.ln_b"), &p.ln_beta));
                    out.push((format!("block{l}.w1"), &p.w1));
                    out.push((format!("block{l}.b1"), &p.b1));
                    out.push((format!("block{l}.w2"), &p.w2));
                    out.push((format!("block{l}.b2"), &p.b2));
                }
                ResidualBlock::Attn(p) => {
                    out.push((format!("block{l}.ln_g"), &p.ln_gamma));
                    out.push((format!("block{l}.ln_b"), &p.ln_beta));
                    out.push((format!("block{l}.w_qkv"), &p.w_qkv));
                    out.push((format!("block{l}.b_qkv"), &p.b_qkv));
                    out.push((format!("block{l}.w_out"), &p.w_out));
                    out.push((format!("block{l}.b_out"), &p.b_out));
                }
            }
        }
        out.push(("head.ln_g".into(), &self.head.ln_gamma));
        out.push(("head.ln_b".into(), &self.head.ln_beta));
        out.push(("head.w".into(), &self.head.w));
        out.push(("head.b".into(), &self.head.b));
        out
    }

    /// Mutable view of the parameters, in the same canonical order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<E>> {
        let mut out: Vec<&mut Tensor<E>> = Vec::new();
        match &mut self.stem {
            Stem::Linear { w, b } => {
                out.push(w);
                out.push(b);
            }
            Stem::Patch { w, b, cls, pos, .. } => {
                out.push(w);
                out.push(b);
                out.push(cls);
                out.push(pos);
            }
        }
        for block in self.blocks.iter_mut() {
            match block {
                ResidualBlock::Ffn(p) => {
                    out.push(&mut p.ln_gamma);
                    out.push(&mut p.ln_beta);
                    out.push(&mut p.w1);
                    out.push(&mut p.b1);
                    out.push(&mut p.w2);
                    out.push(&mut p.b2);
                }
                ResidualBlock::Attn(p) => {
                    out.push(&mut p.ln_gamma);
                    out.push(&mut p.ln_beta);
                    out.push(&mut p.w_qkv);
                    out.push(&mut p.b_qkv);
                    out.push(&mut p.w_out);
                    out.push(&mut p.b_out);
                }
            }
        }
        out.push(&mut self.head.ln_gamma);
        out.push(&mut self.head.ln_beta);
        out.push(&mut self.head.w);
        out.push(&mut self.head.b);
        out
    }

    /// Group of every parameter, parallel to [`Model::named_params`].
    pub fn param_groups(&self) -> Vec<ParamGroup> {
        self.named_params()
            .iter()
            .map(|(name, _)| {
                if let Some(rest) = name.strip_prefix("block") {
                    let idx: usize = rest.split('.').next().unwrap().parse().expect("block index");
                    ParamGroup::Block(idx)
                } else if name.starts_with("stem") {
                    ParamGroup::Stem
                } else {
                    ParamGroup::Head
                }
            })
            .collect()
    }

    pub fn num_scalar_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Register every parameter on a tape (canonical order) and build the
    /// forward-pass handle structure over the registered vars.
    pub fn register(&self, tape: &mut Tape<E>, trainable: bool) -> Registered {
        let flat: Vec<Var> =
            self.named_params().iter().map(|(_, t)| tape.input((*t).clone(), trainable)).collect();
        let vars = self.bind_vars(&flat);
        Registered { vars, flat }
    }

    /// Build forward-pass handles over an externally registered flat var
    /// list (canonical parameter order). Used by gradient checking, where
    /// the checker owns the leaves.
    pub fn bind_vars(&self, flat: &[Var]) -> ModelVars {
        let mut cursor = 0usize;
        let mut take = || {
            let v = flat[cursor];
            cursor += 1;
            v
        };
        let stem = match &self.stem {
            Stem::Linear { .. } => StemVars::Linear { w: take(), b: take() },
            Stem::Patch { patch_size, image_size, .. } => StemVars::Patch {
                w: take(),
                b: take(),
                cls: take(),
                pos: take(),
                patch_size: *patch_size,
                image_size: *image_size,
            },
        };
        let blocks: Vec<BlockVars> = self
            .blocks
            .iter()
            .map(|block| match block {
                ResidualBlock::Ffn(_) => BlockVars::Ffn {
                    ln_g: take(),
                    ln_b: take(),
                    w1: take(),
                    b1: take(),
                    w2: take(),
                    b2: take(),
                },
                ResidualBlock::Attn(p) => BlockVars::Attn {
                    ln_g: take(),
                    ln_b: take(),
                    w_qkv: take(),
                    b_qkv: take(),
                    w_out: take(),
                    b_out: take(),
                    heads: p.heads,
                },
            })
            .collect();
        let head = HeadVars {
            ln_g: take(),
            ln_b: take(),
            w: take(),
            b: take(),
            token_readout: matches!(self.stem, Stem::Patch { .. }),
        };
        assert_eq!(cursor, flat.len(), "parameter registry mismatch");
        ModelVars { stem, blocks, head }
    }

    /// Inference logits: full model, no stochastic depth, no scaling.
    pub fn infer(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let mut tape = Tape::new();
        let reg = self.register(&mut tape, false);
        let xv = tape.constant(x.clone());
        let logits = forward(&mut tape, &reg.vars, xv, None, SdImpl::Efficient, None)?;
        Ok(tape.value(logits).clone())
    }
}

/// Registered parameters: forward-pass handles plus the flat var list in
/// canonical parameter order.
pub struct Registered {
    pub vars: ModelVars,
    pub flat: Vec<Var>,
}

#[derive(Clone, Copy, Debug)]
pub enum StemVars {
    Linear { w: Var, b: Var },
    Patch { w: Var, b: Var, cls: Var, pos: Var, patch_size: usize, image_size: usize },
}

#[derive(Clone, Copy, Debug)]
pub enum BlockVars {
    Ffn { ln_g: Var, ln_b: Var, w1: Var, b1: Var, w2: Var, b2: Var },
    Attn { ln_g: Var, ln_b: Var, w_qkv: Var, b_qkv: Var, w_out: Var, b_out: Var, heads: usize },
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub ln_g: Var,
    pub ln_b: Var,
    pub w: Var,
    pub b: Var,
    /// Read the class token (ViT) instead of the whole feature vector.
    pub token_readout: bool,
}

/// Forward-pass handles for a registered model.
pub struct ModelVars {
    pub stem: StemVars,
    pub blocks: Vec<BlockVars>,
    pub head: HeadVars,
}

/// Per-layer instrumentation: how many batch rows each block was actually
/// computed on.
#[derive(Clone, Debug, Default)]
pub struct SdStats {
    pub rows_per_layer: Vec<usize>,
}

// ---- builders ------------------------------------------------------------

/// Residual MLP: `input_dim -> width` stem, `depth` FFN blocks with hidden
/// size equal to `width`, layernorm + linear head. Deterministic init from
/// `seed`.
pub fn build_residual_mlp<E: Element>(
    width: usize,
    depth: usize,
    num_classes: usize,
    input_dim: usize,
    seed: u64,
) -> Result<Model<E>> {
    if width == 0 || depth == 0 || num_classes == 0 || input_dim == 0 {
        return Err(Error::invalid(
            "build_residual_mlp",
            format!(
                "zero dimension in (width={width}, depth={depth}, classes={num_classes}, input_dim={input_dim})"
            ),
        ));
    }
    let hidden = width;
    let arch = ArchDescriptor::ResidualMlp { input_dim, width, depth, hidden, num_classes };
    let mut rng = EngineRng::seed_from_u64(seed);
    Ok(init_model(arch, &mut rng))
}

/// Tiny ViT on single-channel images: patch-embed stem, class token, learned
/// positional embedding, and `2 * depth_blocks` residual blocks alternating
/// attention and FFN (hidden size `4 * width`).
pub fn build_tiny_vit<E: Element>(
    image_size: usize,
    patch_size: usize,
    width: usize,
    depth_blocks: usize,
    heads: usize,
    num_classes: usize,
    seed: u64,
) -> Result<Model<E>> {
    if image_size == 0 || patch_size == 0 || width == 0 || depth_blocks == 0 || heads == 0 {
        return Err(Error::invalid("build_tiny_vit", "zero dimension"));
    }
    if image_size % patch_size != 0 {
        return Err(Error::invalid(
            "build_tiny_vit",
            format!("image size {image_size} not divisible by patch size {patch_size}"),
        ));
    }
    if width % heads != 0 {
        return Err(Error::invalid(
            "build_tiny_vit",
            format!("width {width} not divisible by heads {heads}"),
        ));
    }
    let arch = ArchDescriptor::TinyVit {
        image_size,
        patch_size,
        width,
        depth_blocks,
        heads,
        hidden: 4 * width,
        num_classes,
    };
    let mut rng = EngineRng::seed_from_u64(seed);
    Ok(init_model(arch, &mut rng))
}

/// Zero-initialized model with the given shape (checkpoint loading target).
pub fn zeros_from_arch<E: Element>(arch: &ArchDescriptor) -> Model<E> {
    let mut rng = EngineRng::seed_from_u64(0);
    let mut model = init_model(arch.clone(), &mut rng);
    for p in model.params_mut() {
        for v in p.data_mut() {
            *v = E::ZERO;
        }
    }
    model
}

fn trunc_normal_tensor<E: Element>(shape: &[usize], rng: &mut EngineRng) -> Tensor<E> {
    let n: usize = shape.iter().product();
    let data: Vec<E> = (0..n).map(|_| E::from_f64(rng.trunc_normal(INIT_STD))).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

fn init_model<E: Element>(arch: ArchDescriptor, rng: &mut EngineRng) -> Model<E> {
    // Draw order matches the canonical parameter order so `seed` pins every
    // value: weights are truncated-normal, biases zero, layernorm scale one.
    match arch {
        ArchDescriptor::ResidualMlp { input_dim, width, depth, hidden, num_classes } => {
            let stem = Stem::Linear {
                w: trunc_normal_tensor(&[input_dim, width], rng),
                b: Tensor::zeros(&[width]),
            };
            let blocks =
                (0..depth).map(|_| ResidualBlock::Ffn(init_ffn(width, hidden, rng))).collect();
            let head = init_head(width, num_classes, rng);
            Model {
                arch: ArchDescriptor::ResidualMlp { input_dim, width, depth, hidden, num_classes },
                stem,
                blocks,
                head,
            }
        }
        ArchDescriptor::TinyVit {
            image_size,
            patch_size,
            width,
            depth_blocks,
            heads,
            hidden,
            num_classes,
        } => {
            let grid = image_size / patch_size;
            let tokens = grid * grid + 1;
            let stem = Stem::Patch {
                w: trunc_normal_tensor(&[patch_size * patch_size, width], rng),
                b: Tensor::zeros(&[width]),
                cls: trunc_normal_tensor(&[1, 1, width], rng),
                pos: trunc_normal_tensor(&[1, tokens, width], rng),
                patch_size,
                image_size,
            };
            let mut blocks = Vec::with_capacity(2 * depth_blocks);
            for _ in 0..depth_blocks {
                blocks.push(ResidualBlock::Attn(init_attn(width, heads, rng)));
                blocks.push(ResidualBlock::Ffn(init_ffn(width, hidden, rng)));
            }
            let head = init_head(width, num_classes, rng);
            Model {
                arch: ArchDescriptor::TinyVit {
                    image_size,
                    patch_size,
                    width,
                    depth_blocks,
                    heads,
                    hidden,
                    num_classes,
                },
                stem,
                blocks,
                head,
            }
        }
    }
}

fn init_ffn<E: Element>(width: usize, hidden: usize, rng: &mut EngineRng) -> FfnParams<E> {
    FfnParams {
        ln_gamma: Tensor::full(&[width], E::ONE),
        ln_beta: Tensor::zeros(&[width]),
        w1: trunc_normal_tensor(&[width, hidden], rng),
        b1: Tensor::zeros(&[hidden]),
        w2: trunc_normal_tensor(&[hidden, width], rng),
        b2: Tensor::zeros(&[width]),
    }
}

fn init_attn<E: Element>(width: usize, heads: usize, rng: &mut EngineRng) -> AttnParams<E> {
    AttnParams {
        ln_gamma: Tensor::full(&[width], E::ONE),
        ln_beta: Tensor::zeros(&[width]),
        w_qkv: trunc_normal_tensor(&[width, 3 * width], rng),
        b_qkv: Tensor::zeros(&[3 * width]),
        w_out: trunc_normal_tensor(&[width, width], rng),
        b_out: Tensor::zeros(&[width]),
        heads,
    }
}

fn init_head<E: Element>(width: usize, num_classes: usize, rng: &mut EngineRng) -> Head<E> {
    Head {
        ln_gamma: Tensor::full(&[width], E::ONE),
        ln_beta: Tensor::zeros(&[width]),
        w: trunc_normal_tensor(&[width, num_classes], rng),
        b: Tensor::zeros(&[num_classes]),
    }
}

// ---- forward ----------------------------------------------------------------

/// Broadcast-add a 1-D bias over the last axis.
fn add_bias<E: Element>(tape: &mut Tape<E>, x: Var, b: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let bb = tape.broadcast_to(b, &shape)?;
    tape.add(x, bb)
}

/// One residual branch (without the skip connection).
pub fn block_branch<E: Element>(tape: &mut Tape<E>, block: &BlockVars, x: Var) -> Result<Var> {
    match *block {
        BlockVars::Ffn { ln_g, ln_b, w1, b1, w2, b2 } => {
            let h = tape.layer_norm(x, ln_g, ln_b)?;
            let h = tape.matmul(h, w1)?;
            let h = add_bias(tape, h, b1)?;
            let h = tape.gelu(h);
            let h = tape.matmul(h, w2)?;
            add_bias(tape, h, b2)
        }
        BlockVars::Attn { ln_g, ln_b, w_qkv, b_qkv, w_out, b_out, heads } => {
            let shape = tape.shape(x).to_vec();
            let (batch, tokens, width) = (shape[0], shape[1], shape[2]);
            let dh = width / heads;
            let h = tape.layer_norm(x, ln_g, ln_b)?;
            let qkv = tape.matmul(h, w_qkv)?;
            let qkv = add_bias(tape, qkv, b_qkv)?;
            let split = |tape: &mut Tape<E>, start: usize| -> Result<Var> {
                let part = tape.narrow(qkv, 2, start, width)?;
                let part = tape.reshape(part, &[batch, tokens, heads, dh])?;
                tape.permute(part, &[0, 2, 1, 3]) // (B, heads, T, dh)
            };
            let q = split(tape, 0)?;
            let k = split(tape, width)?;
            let v = split(tape, 2 * width)?;
            let kt = tape.permute(k, &[0, 1, 3, 2])?; // (B, heads, dh, T)
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, E::from_f64(1.0 / (dh as f64).sqrt()));
            let attn = tape.softmax(scores)?;
            let ctx = tape.matmul(attn, v)?; // (B, heads, T, dh)
            let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = tape.reshape(ctx, &[batch, tokens, width])?;
            let out = tape.matmul(ctx, w_out)?;
            add_bias(tape, out, b_out)
        }
    }
}

fn stem_forward<E: Element>(tape: &mut Tape<E>, stem: &StemVars, x: Var) -> Result<Var> {
    match *stem {
        StemVars::Linear { w, b } => {
            let h = tape.matmul(x, w)?;
            add_bias(tape, h, b)
        }
        StemVars::Patch { w, b, cls, pos, patch_size, image_size } => {
            let shape = tape.shape(x).to_vec();
            if shape.len() != 3 || shape[1] != image_size || shape[2] != image_size {
                return Err(Error::invalid(
                    "stem",
                    format!("expected (B, {image_size}, {image_size}) image batch, got {shape:?}"),
                ));
            }
            let batch = shape[0];
            let grid = image_size / patch_size;
            let patches = tape.reshape(x, &[batch, grid, patch_size, grid, patch_size])?;
            let patches = tape.permute(patches, &[0, 1, 3, 2, 4])?;
            let patches = tape.reshape(patches, &[batch, grid * grid, patch_size * patch_size])?;
            let emb = tape.matmul(patches, w)?;
            let emb = add_bias(tape, emb, b)?;
            let width = tape.shape(emb)[2];
            let cls_b = tape.broadcast_to(cls, &[batch, 1, width])?;
            let tokens = tape.concat(&[cls_b, emb], 1)?;
            let token_count = tape.shape(tokens)[1];
            let pos_b = tape.broadcast_to(pos, &[batch, token_count, width])?;
            tape.add(tokens, pos_b)
        }
    }
}

fn head_forward<E: Element>(tape: &mut Tape<E>, head: &HeadVars, x: Var) -> Result<Var> {
    let feats = if head.token_readout {
        let shape = tape.shape(x).to_vec();
        let tok0 = tape.narrow(x, 1, 0, 1)?;
        tape.reshape(tok0, &[shape[0], shape[2]])?
    } else {
        x
    };
    let h = tape.layer_norm(feats, head.ln_g, head.ln_b)?;
    let h = tape.matmul(h, head.w)?;
    add_bias(tape, h, head.b)
}

/// Full model forward.
///
/// With `pattern = None` every block is applied unscaled (inference mode).
/// With a pattern, blocks are gated per sample by the chosen implementation,
/// scaling kept residuals by `1 / (1 - tau_eff)` at training time.
pub fn forward<E: Element>(
    tape: &mut Tape<E>,
    vars: &ModelVars,
    x: Var,
    pattern: Option<&DropPattern>,
    implementation: SdImpl,
    mut stats: Option<&mut SdStats>,
) -> Result<Var> {
    if let Some(p) = pattern {
        if p.num_layers() != vars.blocks.len() {
            return Err(Error::invalid(
                "forward",
                format!("pattern has {} layers, model has {}", p.num_layers(), vars.blocks.len()),
            ));
        }
        if p.batch != tape.shape(x)[0] {
            return Err(Error::invalid(
                "forward",
                format!("pattern batch {} != input batch {}", p.batch, tape.shape(x)[0]),
            ));
        }
    }
    let mut h = stem_forward(tape, &vars.stem, x)?;
    for (l, block) in vars.blocks.iter().enumerate() {
        let rows;
        match pattern {
            None => {
                let r = block_branch(tape, block, h)?;
                rows = tape.shape(h)[0];
                h = tape.add(h, r)?;
            }
            Some(p) => {
                let layer = &p.layers[l];
                match implementation {
                    SdImpl::Efficient => {
                        rows = layer.kept.len();
                        h = apply_efficient(
                            tape,
                            h,
                            |tape, sub| block_branch(tape, block, sub),
                            &layer.kept,
                            layer.effective_rate,
                        )?;
                    }
                    SdImpl::Naive => {
                        rows = p.batch;
                        h = apply_naive(
                            tape,
                            h,
                            |tape, full| block_branch(tape, block, full),
                            &p.mask(l),
                            layer.train_scale(),
                        )?;
                    }
                }
            }
        }
        if let Some(s) = stats.as_deref_mut() {
            s.rows_per_layer.push(rows);
        }
    }
    head_forward(tape, &vars.head, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check;
    use crate::losses;
    use crate::sdepth::{sample_pattern, SdConfig};

    #[test]
    fn zero_depth_rejected() {
        assert!(build_residual_mlp::<f32>(8, 0, 3, 5, 0).is_err());
        assert!(build_residual_mlp::<f32>(0, 2, 3, 5, 0).is_err());
    }

    #[test]
    fn indivisible_patching_rejected() {
        assert!(build_tiny_vit::<f32>(10, 3, 8, 1, 2, 3, 0).is_err());
        assert!(build_tiny_vit::<f32>(8, 4, 8, 1, 2, 3, 0).is_ok());
    }

    #[test]
    fn mlp_param_count_matches_formula() {
        let (w, d, c, input) = (128usize, 8usize, 10usize, 50usize);
        let model = build_residual_mlp::<f32>(w, d, c, input, 0).unwrap();
        let hidden = w;
        let expect = (input * w + w)
            + d * (2 * w + w * hidden + hidden + hidden * w + w)
            + (2 * w + w * c + c);
        assert_eq!(model.num_scalar_params(), expect);
    }

    #[test]
    fn same_seed_same_init() {
        let a = build_residual_mlp::<f32>(16, 3, 4, 7, 42).unwrap();
        let b = build_residual_mlp::<f32>(16, 3, 4, 7, 42).unwrap();
        for ((_, ta), (_, tb)) in a.named_params().iter().zip(b.named_params().iter()) {
            assert_eq!(ta.data(), tb.data());
        }
        let c = build_residual_mlp::<f32>(16, 3, 4, 7, 43).unwrap();
        assert_ne!(a.named_params()[0].1.data(), c.named_params()[0].1.data());
    }

    #[test]
    fn vit_depth_is_two_per_transformer_block() {
        let model = build_tiny_vit::<f32>(8, 4, 8, 12, 2, 3, 0).unwrap();
        assert_eq!(model.depth(), 24);
        assert_eq!(model.blocks[0].kind(), BlockKind::SelfAttention);
        assert_eq!(model.blocks[1].kind(), BlockKind::MlpFfn);
    }

    #[test]
    fn single_patch_image_has_two_tokens() {
        // 16x16 image, patch 16 -> 1 patch + 1 class token.
        let model = build_tiny_vit::<f32>(16, 16, 8, 1, 2, 3, 0).unwrap();
        match &model.stem {
            Stem::Patch { pos, .. } => assert_eq!(pos.shape(), &[1, 2, 8]),
            _ => panic!("expected patch stem"),
        }
        let x = Tensor::full(&[2, 16, 16], 0.5f32);
        let logits = model.infer(&x).unwrap();
        assert_eq!(logits.shape(), &[2, 3]);
    }

    #[test]
    fn residual_identity_with_zeroed_blocks() {
        let mut model = build_residual_mlp::<f64>(12, 4, 5, 9, 1).unwrap();
        for block in model.blocks.iter_mut() {
            if let ResidualBlock::Ffn(p) = block {
                for t in [&mut p.w1, &mut p.b1, &mut p.w2, &mut p.b2] {
                    for v in t.data_mut() {
                        *v = 0.0;
                    }
                }
            }
        }
        let mut rng = EngineRng::seed_from_u64(5);
        let x = Tensor::new(vec![3, 9], (0..27).map(|_| rng.normal()).collect()).unwrap();
        let full = model.infer(&x).unwrap();

        // head(stem(x)) directly.
        let mut tape = Tape::new();
        let reg = model.register(&mut tape, false);
        let xv = tape.constant(x);
        let s = stem_forward(&mut tape, &reg.vars.stem, xv).unwrap();
        let hs = head_forward(&mut tape, &reg.vars.head, s).unwrap();
        assert_eq!(full.data(), tape.value(hs).data());
    }

    #[test]
    fn all_dropped_pattern_is_stem_head_only() {
        let model = build_residual_mlp::<f64>(12, 3, 5, 9, 2).unwrap();
        let mut rng = EngineRng::seed_from_u64(6);
        let x = Tensor::new(vec![4, 9], (0..36).map(|_| rng.normal()).collect()).unwrap();

        let empty = DropPattern {
            batch: 4,
            layers: (0..3)
                .map(|_| crate::sdepth::LayerPattern {
                    kept: vec![],
                    requested_rate: 1.0,
                    effective_rate: 1.0,
                })
                .collect(),
        };
        let mut tape = Tape::new();
        let reg = model.register(&mut tape, false);
        let xv = tape.constant(x.clone());
        let gated =
            forward(&mut tape, &reg.vars, xv, Some(&empty), SdImpl::Efficient, None).unwrap();
        let s = stem_forward(&mut tape, &reg.vars.stem, xv).unwrap();
        let hs = head_forward(&mut tape, &reg.vars.head, s).unwrap();
        assert_eq!(tape.value(gated).data(), tape.value(hs).data());
    }

    #[test]
    fn pattern_none_equals_all_kept_tau_zero() {
        let model = build_residual_mlp::<f32>(10, 3, 4, 6, 3).unwrap();
        let mut rng = EngineRng::seed_from_u64(7);
        let x = Tensor::new(vec![5, 6], (0..30).map(|_| rng.normal() as f32).collect()).unwrap();
        let pattern = DropPattern::all_kept(5, 3);

        let mut tape = Tape::new();
        let reg = model.register(&mut tape, false);
        let xv = tape.constant(x.clone());
        let a = forward(&mut tape, &reg.vars, xv, None, SdImpl::Efficient, None).unwrap();
        let b = forward(&mut tape, &reg.vars, xv, Some(&pattern), SdImpl::Efficient, None).unwrap();
        let c = forward(&mut tape, &reg.vars, xv, Some(&pattern), SdImpl::Naive, None).unwrap();
        assert_eq!(tape.value(a).data(), tape.value(b).data());
        assert_eq!(tape.value(a).data(), tape.value(c).data());
    }

    #[test]
    fn pattern_length_mismatch_rejected() {
        let model = build_residual_mlp::<f32>(10, 3, 4, 6, 3).unwrap();
        let pattern = DropPattern::all_kept(5, 2);
        let mut tape = Tape::new();
        let reg = model.register(&mut tape, false);
        let xv = tape.constant(Tensor::full(&[5, 6], 0.1f32));
        assert!(
            forward(&mut tape, &reg.vars, xv, Some(&pattern), SdImpl::Efficient, None).is_err()
        );
    }

    #[test]
    fn batch_permutation_equivariance() {
        let model = build_residual_mlp::<f32>(16, 4, 5, 8, 9).unwrap();
        let mut rng = EngineRng::seed_from_u64(8);
        let n = 6;
        let data: Vec<f32> = (0..n * 8).map(|_| rng.normal() as f32).collect();
        let x = Tensor::new(vec![n, 8], data.clone()).unwrap();
        let logits = model.infer(&x).unwrap();

        let perm = rng.permutation(n);
        let mut pdata = vec![0.0f32; n * 8];
        for (i, &src) in perm.iter().enumerate() {
            pdata[i * 8..(i + 1) * 8].copy_from_slice(&data[src * 8..(src + 1) * 8]);
        }
        let px = Tensor::new(vec![n, 8], pdata).unwrap();
        let plogits = model.infer(&px).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            assert_eq!(&plogits.data()[i * 5..(i + 1) * 5], &logits.data()[src * 5..(src + 1) * 5]);
        }
    }

    #[test]
    fn efficient_rows_per_layer_equal_b_keep() {
        let model = build_residual_mlp::<f32>(8, 5, 3, 4, 10).unwrap();
        let mut rng = EngineRng::seed_from_u64(9);
        let x = Tensor::full(&[16, 4], 0.3f32);
        let pattern = sample_pattern(16, 5, &SdConfig::uniform(0.25), &mut rng);

        let mut tape = Tape::new();
        let reg = model.register(&mut tape, false);
        let xv = tape.constant(x);
        let mut stats = SdStats::default();
        forward(&mut tape, &reg.vars, xv, Some(&pattern), SdImpl::Efficient, Some(&mut stats))
            .unwrap();
        assert_eq!(stats.rows_per_layer, vec![12; 5]);

        let mut stats = SdStats::default();
        forward(&mut tape, &reg.vars, xv, Some(&pattern), SdImpl::Naive, Some(&mut stats)).unwrap();
        assert_eq!(stats.rows_per_layer, vec![16; 5]);
    }

    /// Full tiny-ViT forward + CE loss against finite differences.
    #[test]
    fn tiny_vit_full_grad_check() {
        let model = build_tiny_vit::<f64>(4, 2, 8, 1, 2, 3, 11).unwrap();
        let mut rng = EngineRng::seed_from_u64(12);
        let x = Tensor::new(vec![2, 4, 4], (0..32).map(|_| rng.normal()).collect()).unwrap();
        let labels = vec![0u32, 2u32];
        let named = model.named_params();
        let params: Vec<Tensor<f64>> = named.iter().map(|(_, t)| (*t).clone()).collect();
        let template = model.clone();

        let report = grad_check(
            |tape, vars| {
                let reg_vars = template.bind_vars(vars);
                let xv = tape.constant(x.clone());
                let logits = forward(tape, &reg_vars, xv, None, SdImpl::Efficient, None)?;
                losses::label_loss(tape, logits, &labels, losses::LabelLossKind::Ce, 0.0)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.passed(1e-4), "rel err {}", report.max_rel_err);
    }
}
