//! Evaluation and diagnostics: linear probing, top-1 accuracy, layer-wise
//! cosine similarity, attention rollout and embedding export.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::tensor::Tensor;
use crate::vit::ViTModel;

/// Linear classifier on the final-norm CLS feature.
#[derive(Clone, Debug)]
pub struct ProbeHead {
    /// `[classes×d]`
    pub weight: Tensor,
    /// `[classes]`
    pub bias: Tensor,
}

impl ProbeHead {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        ProbeHead {
            weight: Tensor::zeros([classes, dim]),
            bias: Tensor::zeros([classes]),
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn logits(&self, feature: &[f32]) -> Vec<f32> {
        let d = self.dim();
        (0..self.classes())
            .map(|c| {
                let w = &self.weight.data()[c * d..(c + 1) * d];
                w.iter().zip(feature).map(|(a, b)| a * b).sum::<f32>() + self.bias.data()[c]
            })
            .collect()
    }

    pub fn predict(&self, feature: &[f32]) -> usize {
        argmax(&self.logits(feature))
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Number of rows of `[n×classes]` logits whose argmax equals the target.
pub fn count_correct(logits: &Tensor, targets: &[usize]) -> usize {
    let c = *logits.shape().last().expect("logits are 2-D");
    logits
        .data()
        .chunks_exact(c)
        .zip(targets)
        .filter(|(row, &y)| argmax(row) == y)
        .count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeOptions {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            epochs: 50,
            lr: 1e-2,
            batch_size: 32,
        }
    }
}

/// CLS features of every image, computed once with the backbone frozen.
pub fn cls_features(model: &ViTModel, images: &[Tensor]) -> Result<Vec<Vec<f32>>> {
    images.iter().map(|im| model.cls_feature(im)).collect()
}

/// Trains a softmax-regression head on precomputed features.
pub fn train_probe_on_features(
    features: &[Vec<f32>],
    labels: &[usize],
    classes: usize,
    opts: &ProbeOptions,
    seed: u64,
) -> Result<ProbeHead> {
    if features.is_empty() {
        return Err(Error::Config("cannot probe on an empty dataset".into()));
    }
    if features.len() != labels.len() {
        return Err(Error::Contract("features and labels differ in length".into()));
    }
    if classes == 0 || opts.batch_size == 0 {
        return Err(Error::Config("probe needs classes > 0 and batch size > 0".into()));
    }
    let d = features[0].len();
    let mut head = ProbeHead::zeros(classes, d);
    head.weight.set_requires_grad(true);
    head.bias.set_requires_grad(true);
    let mut opt = Adam::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..features.len()).collect();
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(opts.batch_size) {
            let x = Tensor::new(
                [batch.len(), d],
                batch.iter().flat_map(|&i| features[i].iter().copied()).collect(),
            )?;
            let targets: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let w = tape.leaf(&head.weight);
            let b = tape.leaf(&head.bias);
            let wt = tape.transpose(w)?;
            let z = tape.matmul(xv, wt)?;
            let z = tape.add_row(z, b)?;
            let loss = tape.cross_entropy(z, &targets)?;
            if !tape.value(loss).item().is_finite() {
                return Err(Error::Numeric("probe loss is not finite".into()));
            }
            let g = tape.backward(loss)?;
            opt.begin_step();
            let gw = g.get(w).expect("probe weight grad").to_vec();
            let gb = g.get(b).expect("probe bias grad").to_vec();
            opt.apply("weight", &mut head.weight, &gw, opts.lr);
            opt.apply("bias", &mut head.bias, &gb, opts.lr);
        }
    }
    head.weight.set_requires_grad(false);
    head.bias.set_requires_grad(false);
    Ok(head)
}

/// Linear probe on the frozen backbone's CLS features.
pub fn linear_probe(model: &ViTModel, dataset: &Dataset, opts: &ProbeOptions, seed: u64) -> Result<ProbeHead> {
    if dataset.is_empty() {
        return Err(Error::Config("cannot probe on an empty dataset".into()));
    }
    let labels = dataset.labels()?;
    let classes = dataset
        .num_classes
        .max(labels.iter().max().map_or(0, |m| m + 1));
    let feats = cls_features(model, dataset.images())?;
    train_probe_on_features(&feats, labels, classes, opts, seed)
}

pub fn accuracy_on_features(head: &ProbeHead, features: &[Vec<f32>], labels: &[usize]) -> Result<f32> {
    if features.is_empty() {
        return Err(Error::Config("accuracy of an empty evaluation set is undefined".into()));
    }
    let correct = features
        .iter()
        .zip(labels)
        .filter(|(f, &y)| head.predict(f) == y)
        .count();
    Ok(correct as f32 / features.len() as f32)
}

/// Fraction of samples whose argmax logit equals the label.
pub fn top1_accuracy(head: &ProbeHead, model: &ViTModel, dataset: &Dataset) -> Result<f32> {
    if dataset.is_empty() {
        return Err(Error::Config("accuracy of an empty evaluation set is undefined".into()));
    }
    if head.dim() != model.config.dim {
        return Err(Error::dim("top1_accuracy", head.weight.shape(), &[model.config.dim]));
    }
    let labels = dataset.labels()?;
    let feats = cls_features(model, dataset.images())?;
    accuracy_on_features(head, &feats, labels)
}

/// Cosine similarity in double precision; zero vectors score 0.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let denom = (na * nb).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        (dot / denom).clamp(-1.0, 1.0)
    }
}

/// Mean over rows of the row-wise cosine similarity of two `[t×d]` maps.
pub fn mean_token_cosine(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() || a.shape().len() != 2 {
        return Err(Error::dim("mean_token_cosine", a.shape(), b.shape()));
    }
    let t = a.shape()[0];
    Ok((0..t).map(|i| cosine(a.row(i), b.row(i))).sum::<f64>() / t as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSimilarity {
    /// 1-based student block.
    pub student_layer: usize,
    /// 1-based teacher block it was copied from.
    pub teacher_layer: usize,
    pub mean_cosine: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub layers: Vec<LayerSimilarity>,
}

impl SimilarityReport {
    pub fn mean(&self) -> f64 {
        if self.layers.is_empty() {
            return 0.0;
        }
        self.layers.iter().map(|l| l.mean_cosine).sum::<f64>() / self.layers.len() as f64
    }
}

/// Compares student block `l` with teacher block `l·r` (1-based), token by
/// token, averaging over tokens and then images.
pub fn cosine_layer_similarity(
    teacher: &ViTModel,
    student: &ViTModel,
    r: usize,
    images: &[Tensor],
) -> Result<SimilarityReport> {
    if r == 0 || student.blocks.len() != teacher.blocks.len() / r {
        return Err(Error::Contract(format!(
            "student depth {} does not match teacher depth {} / r={r}",
            student.blocks.len(),
            teacher.blocks.len()
        )));
    }
    if images.is_empty() {
        return Err(Error::Config("cosine similarity needs at least one image".into()));
    }
    let m = student.blocks.len();
    let mut sums = vec![0.0f64; m];
    for img in images {
        let tt = teacher.forward_trace(img)?;
        let st = student.forward_trace(img)?;
        for (l, sum) in sums.iter_mut().enumerate() {
            *sum += mean_token_cosine(&st.block_outputs[l], &tt.block_outputs[(l + 1) * r - 1])?;
        }
    }
    Ok(SimilarityReport {
        layers: sums
            .into_iter()
            .enumerate()
            .map(|(l, s)| LayerSimilarity {
                student_layer: l + 1,
                teacher_layer: (l + 1) * r,
                mean_cosine: s / images.len() as f64,
            })
            .collect(),
    })
}

/// Rolled-out attention of a model on one image.
#[derive(Clone, Debug)]
pub struct Rollout {
    /// Final `[t×t]` rollout.
    pub matrix: Tensor,
    /// Rollout after each layer.
    pub layers: Vec<Tensor>,
    /// CLS row over patch tokens, `[grid×grid]`.
    pub heatmap: Tensor,
}

/// Attention rollout over per-layer `[heads×t×t]` attention tensors.
///
/// Each layer fuses heads by elementwise max, zeroes every entry below the
/// `top_fraction` largest, mixes in the residual as `0.5·A + 0.5·I`,
/// row-normalizes and left-multiplies onto the running product.
pub fn rollout_from_attentions(attentions: &[Tensor], top_fraction: f32) -> Result<(Tensor, Vec<Tensor>)> {
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(Error::Config(format!("top fraction {top_fraction} must lie in (0, 1]")));
    }
    let t = match attentions.first() {
        Some(a) if a.shape().len() == 3 => a.shape()[1],
        Some(a) => return Err(Error::dim("rollout", a.shape(), &[])),
        None => return Err(Error::Config("rollout needs at least one layer".into())),
    };
    let mut joint = Tensor::identity(t);
    let mut layers = Vec::with_capacity(attentions.len());
    for att in attentions {
        let [h, t1, t2] = att.shape()[..] else {
            return Err(Error::dim("rollout", att.shape(), &[t, t]));
        };
        if t1 != t || t2 != t || h == 0 {
            return Err(Error::dim("rollout", att.shape(), &[t, t]));
        }
        let mut fused = vec![f32::NEG_INFINITY; t * t];
        for head in att.data().chunks_exact(t * t) {
            fused.iter_mut().zip(head).for_each(|(f, v)| *f = f.max(*v));
        }
        let keep = ((top_fraction as f64 * (t * t) as f64).ceil() as usize).clamp(1, t * t);
        let mut sorted = fused.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let threshold = sorted[keep - 1];
        let mut mixed = vec![0.0f64; t * t];
        for i in 0..t {
            for j in 0..t {
                let a = fused[i * t + j];
                let a = if a >= threshold { a as f64 } else { 0.0 };
                mixed[i * t + j] = 0.5 * a + if i == j { 0.5 } else { 0.0 };
            }
            let row = &mut mixed[i * t..(i + 1) * t];
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let prev = joint.data();
        let mut next = vec![0.0f32; t * t];
        for i in 0..t {
            for j in 0..t {
                let s: f64 = (0..t).map(|k| mixed[i * t + k] * prev[k * t + j] as f64).sum();
                next[i * t + j] = s as f32;
            }
        }
        joint = Tensor::new([t, t], next)?;
        layers.push(joint.clone());
    }
    Ok((joint, layers))
}

pub fn attention_rollout(model: &ViTModel, image: &Tensor, top_fraction: f32) -> Result<Rollout> {
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(Error::Config(format!("top fraction {top_fraction} must lie in (0, 1]")));
    }
    let trace = model.forward_trace(image)?;
    let t = model.config.tokens();
    let (matrix, layers) = if trace.attentions.is_empty() {
        (Tensor::identity(t), Vec::new())
    } else {
        rollout_from_attentions(&trace.attentions, top_fraction)?
    };
    let g = model.config.grid();
    let heatmap = Tensor::new([g, g], matrix.row(0)[1..].to_vec())?;
    Ok(Rollout {
        matrix,
        layers,
        heatmap,
    })
}

/// Writes one CSV row per image: the label (empty when unlabeled), then the
/// `d` CLS-feature values.
pub fn export_embeddings(model: &ViTModel, dataset: &Dataset, path: &Path) -> Result<()> {
    let feats = cls_features(model, dataset.images())?;
    let mut out = String::new();
    out.push_str("label");
    for j in 0..model.config.dim {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for (i, f) in feats.iter().enumerate() {
        if let Some(l) = &dataset.labels {
            out.push_str(&l[i].to_string());
        }
        for v in f {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
