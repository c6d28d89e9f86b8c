//! A small pre-norm Vision Transformer.
//!
//! Tokens are `[t×d]` matrices with `t = (image/patch)² + 1`; row 0 is the CLS
//! token. Each block computes `x + MSA(LN1(x))` followed by `x + FFN(LN2(x))`,
//! and the feature map returned by [`ViTModel::forward_features`] is taken
//! after the final layer norm.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::lora::{AdaptedLinear, LinearNames};
use crate::optim::Adam;
use crate::tensor::Tensor;

pub const LN_EPS: f32 = 1e-6;
pub const INIT_STD: f32 = 0.02;

/// Normal sample with standard deviation `std`, redrawn until it lies within
/// two standard deviations.
pub fn trunc_normal(rng: &mut impl Rng, std: f32) -> f32 {
    loop {
        let z: f32 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Classifier width; 0 means no head.
    pub num_classes: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig {
            image_size: 32,
            patch_size: 8,
            channels: 1,
            dim: 32,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            num_classes: 4,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("dim", self.dim),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Token count including CLS.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.mlp_ratio * self.dim
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    pub fn new(d: usize) -> Self {
        LayerNormParams {
            gamma: Tensor::ones([d]),
            beta: Tensor::zeros([d]),
        }
    }

    fn forward(&self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        let g = tape.param(&format!("{prefix}.gamma"), &self.gamma);
        let b = tape.param(&format!("{prefix}.beta"), &self.beta);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub wq: AdaptedLinear,
    pub wk: AdaptedLinear,
    pub wv: AdaptedLinear,
    pub wo: AdaptedLinear,
}

#[derive(Clone, Debug)]
pub struct Ffn {
    pub wf1: AdaptedLinear,
    pub wf2: AdaptedLinear,
}

#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNormParams,
    pub attn: Attention,
    pub ln2: LayerNormParams,
    pub ffn: Ffn,
    heads: usize,
}

/// Result of one block: output tokens and, when requested, the per-head
/// attention probabilities (`heads` vars of shape `[t×t]`).
pub struct BlockOutput {
    pub tokens: Var,
    pub attention: Option<Vec<Var>>,
}

impl Block {
    pub fn zeros(config: &ViTConfig) -> Self {
        let d = config.dim;
        let h = config.hidden();
        Block {
            ln1: LayerNormParams::new(d),
            attn: Attention {
                wq: AdaptedLinear::zeros(d, d),
                wk: AdaptedLinear::zeros(d, d),
                wv: AdaptedLinear::zeros(d, d),
                wo: AdaptedLinear::zeros(d, d),
            },
            ln2: LayerNormParams::new(d),
            ffn: Ffn {
                wf1: AdaptedLinear::zeros(h, d),
                wf2: AdaptedLinear::zeros(d, h),
            },
            heads: config.heads,
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Projection by its checkpoint-relative name (`attn.wq`, `ffn.wf2`, ...).
    pub fn linear(&self, name: &str) -> Option<&AdaptedLinear> {
        Some(match name {
            "attn.wq" => &self.attn.wq,
            "attn.wk" => &self.attn.wk,
            "attn.wv" => &self.attn.wv,
            "attn.wo" => &self.attn.wo,
            "ffn.wf1" => &self.ffn.wf1,
            "ffn.wf2" => &self.ffn.wf2,
            _ => return None,
        })
    }

    pub fn linear_mut(&mut self, name: &str) -> Option<&mut AdaptedLinear> {
        Some(match name {
            "attn.wq" => &mut self.attn.wq,
            "attn.wk" => &mut self.attn.wk,
            "attn.wv" => &mut self.attn.wv,
            "attn.wo" => &mut self.attn.wo,
            "ffn.wf1" => &mut self.ffn.wf1,
            "ffn.wf2" => &mut self.ffn.wf2,
            _ => return None,
        })
    }

    /// `prefix` is the block's checkpoint name, e.g. `block.1`.
    pub fn forward(&self, tape: &mut Tape, prefix: &str, x: Var, capture_attention: bool) -> Result<BlockOutput> {
        let shape = tape.shape(x).to_vec();
        let d = self.attn.wq.in_features();
        if shape.len() != 2 || shape[1] != d {
            return Err(Error::dim("block", &shape, &[d]));
        }
        let h = self.ln1.forward(tape, &format!("{prefix}.ln1"), x)?;
        let q = self.attn.wq.forward(tape, &LinearNames::matrix(&format!("{prefix}.attn.wq")), h)?;
        let k = self.attn.wk.forward(tape, &LinearNames::matrix(&format!("{prefix}.attn.wk")), h)?;
        let v = self.attn.wv.forward(tape, &LinearNames::matrix(&format!("{prefix}.attn.wv")), h)?;

        let dk = d / self.heads;
        let scale = 1.0 / (dk as f32).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut probs = Vec::new();
        for i in 0..self.heads {
            let qi = tape.slice(q, 1, i * dk, dk)?;
            let ki = tape.slice(k, 1, i * dk, dk)?;
            let vi = tape.slice(v, 1, i * dk, dk)?;
            let kt = tape.transpose(ki)?;
            let scores = tape.matmul(qi, kt)?;
            let scores = tape.scale(scores, scale);
            let p = tape.softmax_lastdim(scores)?;
            heads.push(tape.matmul(p, vi)?);
            if capture_attention {
                probs.push(p);
            }
        }
        let cat = tape.concat(&heads, 1)?;
        let msa = self.attn.wo.forward(tape, &LinearNames::matrix(&format!("{prefix}.attn.wo")), cat)?;
        let x = tape.add(x, msa)?;

        let h = self.ln2.forward(tape, &format!("{prefix}.ln2"), x)?;
        let f = self.ffn.wf1.forward(tape, &LinearNames::matrix(&format!("{prefix}.ffn.wf1")), h)?;
        let f = tape.gelu(f);
        let f = self.ffn.wf2.forward(tape, &LinearNames::matrix(&format!("{prefix}.ffn.wf2")), f)?;
        let tokens = tape.add(x, f)?;
        Ok(BlockOutput {
            tokens,
            attention: capture_attention.then_some(probs),
        })
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.ln1.gamma"), &self.ln1.gamma);
        f(&format!("{prefix}.ln1.beta"), &self.ln1.beta);
        for layer in BLOCK_LINEARS {
            visit_linear(self.linear(layer).expect("known"), &LinearNames::matrix(&format!("{prefix}.{layer}")), f);
            if layer == "attn.wo" {
                f(&format!("{prefix}.ln2.gamma"), &self.ln2.gamma);
                f(&format!("{prefix}.ln2.beta"), &self.ln2.beta);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.ln1.gamma"), &mut self.ln1.gamma);
        f(&format!("{prefix}.ln1.beta"), &mut self.ln1.beta);
        for layer in BLOCK_LINEARS {
            let names = LinearNames::matrix(&format!("{prefix}.{layer}"));
            visit_linear_mut(self.linear_mut(layer).expect("known"), &names, f);
            if layer == "attn.wo" {
                f(&format!("{prefix}.ln2.gamma"), &mut self.ln2.gamma);
                f(&format!("{prefix}.ln2.beta"), &mut self.ln2.beta);
            }
        }
    }
}

const BLOCK_LINEARS: [&str; 6] = ["attn.wq", "attn.wk", "attn.wv", "attn.wo", "ffn.wf1", "ffn.wf2"];

fn visit_linear(l: &AdaptedLinear, names: &LinearNames, f: &mut dyn FnMut(&str, &Tensor)) {
    f(&names.weight, &l.weight);
    f(&names.bias, &l.bias);
    if let Some(p) = &l.adapter {
        f(&names.lora_a, &p.a);
        f(&names.lora_b, &p.b);
    }
}

fn visit_linear_mut(l: &mut AdaptedLinear, names: &LinearNames, f: &mut dyn FnMut(&str, &mut Tensor)) {
    f(&names.weight, &mut l.weight);
    f(&names.bias, &mut l.bias);
    if let Some(p) = &mut l.adapter {
        f(&names.lora_a, &mut p.a);
        f(&names.lora_b, &mut p.b);
    }
}

/// Checkpoint name of the 0-based block `index`; names are 1-based.
pub fn block_name(index: usize) -> String {
    format!("block.{}", index + 1)
}

#[derive(Clone, Debug)]
pub struct ViTModel {
    pub config: ViTConfig,
    /// `[d × channels·patch²]`
    pub patch_embed: AdaptedLinear,
    /// `[1×d]`
    pub cls_token: Tensor,
    /// `[t×d]`
    pub pos_embed: Tensor,
    pub blocks: Vec<Block>,
    pub final_norm: LayerNormParams,
    pub head: Option<AdaptedLinear>,
}

/// Per-layer activations of an inference pass.
#[derive(Clone, Debug)]
pub struct Trace {
    /// Output tokens of every block, `[t×d]` each.
    pub block_outputs: Vec<Tensor>,
    /// Attention probabilities of every block, `[heads×t×t]` each.
    pub attentions: Vec<Tensor>,
    /// Tokens after the final norm.
    pub features: Tensor,
}

impl ViTModel {
    /// All-zero weights with unit layer-norm gains; the canvas for loading.
    pub fn zeros(config: &ViTConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        Ok(ViTModel {
            config: config.clone(),
            patch_embed: AdaptedLinear::zeros(d, config.patch_dim()),
            cls_token: Tensor::zeros([1, d]),
            pos_embed: Tensor::zeros([config.tokens(), d]),
            blocks: (0..config.depth).map(|_| Block::zeros(config)).collect(),
            final_norm: LayerNormParams::new(d),
            head: (config.num_classes > 0).then(|| AdaptedLinear::zeros(config.num_classes, d)),
        })
    }

    /// Weights from a normal(0, 0.02²) truncated at ±2σ, zero biases, unit
    /// layer-norm gains. Deterministic in `seed`.
    pub fn init_random(config: &ViTConfig, seed: u64) -> Result<Self> {
        let mut model = ViTModel::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.visit_mut(&mut |name, t| {
            if is_random_init(name) {
                t.data_mut().iter_mut().for_each(|v| *v = trunc_normal(&mut rng, INIT_STD));
            }
        });
        Ok(model)
    }

    /// Visits every parameter in canonical checkpoint order.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_linear(&self.patch_embed, &LinearNames::module("patch_embed"), f);
        f("cls_token", &self.cls_token);
        f("pos_embed", &self.pos_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&block_name(i), f);
        }
        f("final_norm.gamma", &self.final_norm.gamma);
        f("final_norm.beta", &self.final_norm.beta);
        if let Some(h) = &self.head {
            visit_linear(h, &LinearNames::module("head"), f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_linear_mut(&mut self.patch_embed, &LinearNames::module("patch_embed"), f);
        f("cls_token", &mut self.cls_token);
        f("pos_embed", &mut self.pos_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&block_name(i), f);
        }
        f("final_norm.gamma", &mut self.final_norm.gamma);
        f("final_norm.beta", &mut self.final_norm.beta);
        if let Some(h) = &mut self.head {
            visit_linear_mut(h, &LinearNames::module("head"), f);
        }
    }

    /// Snapshot of every named parameter.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n.to_string(), t.clone())));
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    pub fn has_adapters(&self) -> bool {
        self.blocks
            .iter()
            .any(|b| BLOCK_LINEARS.iter().any(|l| b.linear(l).is_some_and(|x| x.adapter.is_some())))
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.visit_mut(&mut |_, t| t.set_requires_grad(flag));
    }

    pub fn zero_grad(&mut self) {
        self.visit_mut(&mut |_, t| t.zero_grad());
    }

    /// Splits a `[channels×H×W]` image into flattened non-overlapping patches,
    /// `[num_patches × channels·patch²]`, patches in row-major grid order and
    /// each patch flattened channel-major.
    pub fn patchify(&self, image: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let expected = [c.channels, c.image_size, c.image_size];
        if image.shape() != expected {
            return Err(Error::dim("patchify", image.shape(), &expected));
        }
        let (g, p, s) = (c.grid(), c.patch_size, c.image_size);
        let src = image.data();
        let mut data = Vec::with_capacity(c.num_patches() * c.patch_dim());
        for gy in 0..g {
            for gx in 0..g {
                for ch in 0..c.channels {
                    for py in 0..p {
                        let row = ch * s * s + (gy * p + py) * s + gx * p;
                        data.extend_from_slice(&src[row..row + p]);
                    }
                }
            }
        }
        Tensor::new([c.num_patches(), c.patch_dim()], data)
    }

    /// Projected patches with CLS prepended and positions added: `[t×d]`.
    pub fn patch_embed(&self, tape: &mut Tape, image: &Tensor) -> Result<Var> {
        let patches = tape.constant(self.patchify(image)?);
        let proj = self
            .patch_embed
            .forward(tape, &LinearNames::module("patch_embed"), patches)?;
        let cls = tape.param("cls_token", &self.cls_token);
        let tokens = tape.concat(&[cls, proj], 0)?;
        let pos = tape.param("pos_embed", &self.pos_embed);
        tape.add(tokens, pos)
    }

    fn run(&self, tape: &mut Tape, image: &Tensor, capture: bool) -> Result<(Var, Vec<Var>, Vec<Vec<Var>>)> {
        let mut x = self.patch_embed(tape, image)?;
        let mut outs = Vec::with_capacity(self.blocks.len());
        let mut attn = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let o = b.forward(tape, &block_name(i), x, capture)?;
            x = o.tokens;
            outs.push(x);
            if let Some(a) = o.attention {
                attn.push(a);
            }
        }
        let g = tape.param("final_norm.gamma", &self.final_norm.gamma);
        let b = tape.param("final_norm.beta", &self.final_norm.beta);
        let feats = tape.layer_norm(x, g, b, LN_EPS)?;
        Ok((feats, outs, attn))
    }

    /// Token features `E` (`[t×d]`, after the final norm) recorded on `tape`.
    pub fn forward_features(&self, tape: &mut Tape, image: &Tensor) -> Result<Var> {
        Ok(self.run(tape, image, false)?.0)
    }

    /// Inference-only features.
    pub fn features(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let v = self.forward_features(&mut tape, image)?;
        Ok(tape.value(v).clone())
    }

    /// Final-norm CLS token, the probe feature.
    pub fn cls_feature(&self, image: &Tensor) -> Result<Vec<f32>> {
        Ok(self.features(image)?.row(0).to_vec())
    }

    pub fn forward_trace(&self, image: &Tensor) -> Result<Trace> {
        let mut tape = Tape::inference();
        let (feats, outs, attn) = self.run(&mut tape, image, true)?;
        let t = self.config.tokens();
        let attentions = attn
            .iter()
            .map(|heads| {
                let mut data = Vec::with_capacity(heads.len() * t * t);
                for h in heads {
                    data.extend_from_slice(tape.value(*h).data());
                }
                Tensor::new([heads.len(), t, t], data)
            })
            .collect::<Result<_>>()?;
        Ok(Trace {
            block_outputs: outs.iter().map(|v| tape.value(*v).clone()).collect(),
            attentions,
            features: tape.value(feats).clone(),
        })
    }

    /// Classifier logits `[n×classes]` for a batch of images.
    pub fn logits(&self, tape: &mut Tape, images: &[&Tensor]) -> Result<Var> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::Config("model has no classifier head".into()))?;
        let mut cls_rows = Vec::with_capacity(images.len());
        for img in images {
            let f = self.forward_features(tape, img)?;
            cls_rows.push(tape.slice(f, 0, 0, 1)?);
        }
        let feats = tape.concat(&cls_rows, 0)?;
        head.forward(tape, &LinearNames::module("head"), feats)
    }
}

fn is_random_init(name: &str) -> bool {
    if name == "cls_token" || name == "pos_embed" {
        return true;
    }
    if name.contains("norm") || name.contains(".ln") {
        return false;
    }
    !(name.ends_with(".b") || name.contains("lora"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 30,
            lr: 1e-3,
            batch_size: 16,
        }
    }
}

/// Per-epoch summary of supervised training.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f32,
    pub accuracy: f32,
}

/// Supervised cross-entropy training of a randomly initialized model on the
/// CLS-token logits, with Adam.
pub fn train_teacher(
    config: &ViTConfig,
    dataset: &Dataset,
    opts: &TrainOptions,
    seed: u64,
) -> Result<(ViTModel, Vec<EpochStats>)> {
    if dataset.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    if config.num_classes == 0 {
        return Err(Error::Config("teacher config needs num_classes > 0".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let labels = dataset.labels()?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= config.num_classes) {
        return Err(Error::Config(format!("label {bad} out of range for {} classes", config.num_classes)));
    }
    let mut model = ViTModel::init_random(config, seed)?;
    model.set_requires_grad(true);
    let mut opt = Adam::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7eac);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        let mut correct = 0usize;
        for batch in order.chunks(opts.batch_size) {
            let images: Vec<&Tensor> = batch.iter().map(|&i| &dataset.images[i]).collect();
            let targets: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let logits = model.logits(&mut tape, &images)?;
            correct += crate::eval::count_correct(tape.value(logits), &targets);
            let loss = tape.cross_entropy(logits, &targets)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Numeric(format!("teacher loss became {lv} in epoch {epoch}")));
            }
            total += lv as f64 * batch.len() as f64;
            let grads = tape.backward(loss)?;
            model.visit_mut(&mut |name, t| {
                if let Some(g) = grads.by_name(name) {
                    t.accumulate_grad(g);
                }
            });
            opt.step_model(&mut model, opts.lr, 1.0);
        }
        history.push(EpochStats {
            epoch,
            loss: (total / dataset.len() as f64) as f32,
            accuracy: correct as f32 / dataset.len() as f32,
        });
    }
    model.set_requires_grad(false);
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(depth: usize) -> ViTConfig {
        ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            dim: 8,
            depth,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 0,
        }
    }

    #[test]
    fn config_validation() {
        assert!(tiny(1).validate().is_ok());
        let bad = ViTConfig { patch_size: 3, ..tiny(1) };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = ViTConfig { heads: 3, ..tiny(1) };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        assert_eq!(tiny(1).tokens(), 5);
    }

    #[test]
    fn same_seed_same_model() {
        let a = ViTModel::init_random(&tiny(2), 11).unwrap().named_tensors();
        let b = ViTModel::init_random(&tiny(2), 11).unwrap().named_tensors();
        assert_eq!(a.len(), b.len());
        assert!(a.iter().zip(&b).all(|(x, y)| x.0 == y.0 && x.1.bit_eq(&y.1)));
    }

    #[test]
    fn init_statistics() {
        let cfg = ViTConfig {
            dim: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 4,
            ..tiny(2)
        };
        let model = ViTModel::init_random(&cfg, 3).unwrap();
        let mut vals = Vec::new();
        model.visit(&mut |n, t| {
            if is_random_init(n) {
                vals.extend_from_slice(t.data());
            } else if n.ends_with(".b") || n.ends_with("beta") {
                assert!(t.data().iter().all(|v| *v == 0.0), "{n}");
            }
        });
        assert!(vals.len() > 50_000);
        let n = vals.len() as f64;
        let mean = vals.iter().map(|v| *v as f64).sum::<f64>() / n;
        // variance of a normal truncated at ±2σ is ≈ 0.774σ²
        assert!(mean.abs() < 3.0 * 0.02 / n.sqrt(), "mean {mean}");
        assert!(vals.iter().all(|v| v.abs() <= 0.04));
    }

    #[test]
    fn depth_zero_still_produces_tokens() {
        let model = ViTModel::init_random(&tiny(0), 1).unwrap();
        let img = Tensor::from_fn([1, 8, 8], |i| (i as f32 * 0.1).cos());
        assert_eq!(model.features(&img).unwrap().shape(), &[5, 8]);
    }

    #[test]
    fn zero_image_embeds_to_cls_and_pos() {
        let model = ViTModel::init_random(&tiny(1), 2).unwrap();
        let mut tape = Tape::inference();
        let img = Tensor::zeros([1, 8, 8]);
        let e = model.patch_embed(&mut tape, &img).unwrap();
        let e = tape.value(e);
        let pos = &model.pos_embed;
        for j in 0..8 {
            assert_eq!(e.data()[j], model.cls_token.data()[j] + pos.data()[j]);
        }
        for i in 8..40 {
            assert_eq!(e.data()[i], pos.data()[i]);
        }
    }

    #[test]
    fn patch_projection_matches_hand_matmul() {
        let model = ViTModel::init_random(&tiny(1), 4).unwrap();
        let img = Tensor::from_fn([1, 8, 8], |i| ((i * 7) % 13) as f32 / 13.0);
        let mut tape = Tape::inference();
        let e = model.patch_embed(&mut tape, &img).unwrap();
        let e = tape.value(e).clone();
        // patch (gy=0, gx=1) covers rows 0..4, cols 4..8 -> token 2
        let mut patch = Vec::new();
        for y in 0..4 {
            for x in 4..8 {
                patch.push(img.data()[y * 8 + x] as f64);
            }
        }
        let w = &model.patch_embed.weight;
        for o in 0..8 {
            let dot: f64 = (0..16).map(|k| w.data()[o * 16 + k] as f64 * patch[k]).sum();
            let expect = dot + model.pos_embed.data()[2 * 8 + o] as f64;
            assert!((e.data()[2 * 8 + o] as f64 - expect).abs() < 1e-5);
        }
    }

    #[test]
    fn wrong_image_shape() {
        let model = ViTModel::init_random(&tiny(1), 2).unwrap();
        assert!(matches!(
            model.features(&Tensor::zeros([1, 4, 4])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn single_token_attention_is_one() {
        let cfg = tiny(1);
        let model = ViTModel::init_random(&cfg, 5).unwrap();
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::from_fn([1, 8], |i| i as f32));
        let out = model.blocks[0].forward(&mut tape, "block.1", x, true).unwrap();
        for p in out.attention.unwrap() {
            assert_eq!(tape.value(p).data(), &[1.0]);
        }
    }

    #[test]
    fn zero_block_is_identity() {
        let cfg = tiny(1);
        let block = Block::zeros(&cfg);
        let mut tape = Tape::inference();
        let xt = Tensor::from_fn([5, 8], |i| (i as f32 * 0.3).sin());
        let x = tape.constant(xt.clone());
        let out = block.forward(&mut tape, "block.1", x, false).unwrap();
        assert!(tape.value(out.tokens).bit_eq(&xt));
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let cfg = ViTConfig { depth: 3, ..tiny(3) };
        let model = ViTModel::init_random(&cfg, 8).unwrap();
        let img = Tensor::from_fn([1, 8, 8], |i| (i as f32 * 0.77).sin());
        let trace = model.forward_trace(&img).unwrap();
        assert_eq!(trace.attentions.len(), 3);
        for a in &trace.attentions {
            assert_eq!(a.shape(), &[2, 5, 5]);
            for row in a.data().chunks(5) {
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            }
        }
        assert!(trace.features.bit_eq(&model.features(&img).unwrap()));
    }

    #[test]
    fn teacher_rejects_empty_data_and_lr_zero_is_noop() {
        let cfg = ViTConfig { num_classes: 2, ..tiny(1) };
        let empty = Dataset {
            images: vec![],
            labels: Some(vec![]),
            num_classes: 2,
        };
        assert!(matches!(
            train_teacher(&cfg, &empty, &TrainOptions::default(), 0),
            Err(Error::Config(_))
        ));
        let ds = Dataset {
            images: vec![Tensor::from_fn([1, 8, 8], |i| i as f32 / 64.0), Tensor::zeros([1, 8, 8])],
            labels: Some(vec![0, 1]),
            num_classes: 2,
        };
        let opts = TrainOptions {
            epochs: 2,
            lr: 0.0,
            batch_size: 2,
        };
        let (trained, _) = train_teacher(&cfg, &ds, &opts, 9).unwrap();
        let init = ViTModel::init_random(&cfg, 9).unwrap();
        let a = trained.named_tensors();
        let b = init.named_tensors();
        assert!(a.iter().zip(&b).all(|(x, y)| x.1.bit_eq(&y.1)));
    }

    #[test]
    fn single_sample_overfits_monotonically() {
        let cfg = ViTConfig { num_classes: 3, ..tiny(2) };
        let ds = Dataset {
            images: vec![Tensor::from_fn([1, 8, 8], |i| ((i * 5) % 7) as f32 / 7.0 - 0.5)],
            labels: Some(vec![2]),
            num_classes: 3,
        };
        let opts = TrainOptions {
            epochs: 10,
            lr: 1e-3,
            batch_size: 1,
        };
        let (_, hist) = train_teacher(&cfg, &ds, &opts, 1).unwrap();
        for w in hist.windows(2) {
            assert!(w[1].loss < w[0].loss, "{hist:?}");
        }
    }
}
