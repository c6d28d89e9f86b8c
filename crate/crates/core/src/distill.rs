//! Label-free feature distillation into a shallow student.
//!
//! The student keeps every `r`-th teacher block (student block `l` is a copy of
//! teacher block `l·r`, both 1-based), gets low-rank adapters on its
//! projections, and is trained to match the teacher's final token features
//! under a mean L1 loss. Only the adapters move; afterwards they are merged
//! back so the student costs exactly as much as an unadapted model of its
//! depth.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::augment;
use crate::error::{Error, Result};
use crate::lora::{attach_enhanced, attach_qv_only, merge_adapters, ParamSet};
use crate::optim::Adam;
use crate::select::{select_subset, Selection};
use crate::tensor::Tensor;
use crate::vit::{ViTConfig, ViTModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Weight copy plus adapters on every projection.
    Wecolora,
    /// Weight copy, every student parameter trained.
    WecoKd,
    /// Weight copy plus query/value adapters only.
    QvLora,
    /// Random student, every parameter trained.
    ScratchKd,
}

impl Mode {
    pub fn uses_adapters(self) -> bool {
        matches!(self, Mode::Wecolora | Mode::QvLora)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Wecolora => "wecolora",
            Mode::WecoKd => "weco_kd",
            Mode::QvLora => "qv_lora",
            Mode::ScratchKd => "scratch_kd",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wecolora" => Ok(Mode::Wecolora),
            "weco_kd" => Ok(Mode::WecoKd),
            "qv_lora" => Ok(Mode::QvLora),
            "scratch_kd" => Ok(Mode::ScratchKd),
            other => Err(Error::Config(format!("unknown distillation mode {other:?}"))),
        }
    }
}

/// Learning rate used when none is given: 10⁻³ for `r ≤ 2`, 10⁻⁴ beyond.
pub fn default_lr(r: usize) -> f32 {
    if r <= 2 {
        1e-3
    } else {
        1e-4
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub r: usize,
    pub rank: usize,
    /// `None` resolves through [`default_lr`].
    pub lr: Option<f32>,
    pub epochs: usize,
    pub batch_size: usize,
    pub accum: usize,
    pub alpha: f64,
    pub selection: Selection,
    pub seed: u64,
    pub mode: Mode,
    pub augment: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            r: 2,
            rank: 4,
            lr: None,
            epochs: 10,
            batch_size: 16,
            accum: 8,
            alpha: 0.01,
            selection: Selection::Random,
            seed: 0,
            mode: Mode::Wecolora,
            augment: false,
        }
    }
}

impl DistillConfig {
    pub fn learning_rate(&self) -> f32 {
        self.lr.unwrap_or_else(|| default_lr(self.r))
    }

    /// Fills in the learning rate so the config prints fully resolved.
    pub fn resolved(mut self) -> Self {
        self.lr = Some(self.learning_rate());
        self
    }

    pub fn validate(&self, teacher_depth: usize, dataset_len: usize) -> Result<()> {
        if self.r == 0 || self.r > teacher_depth {
            return Err(Error::Config(format!(
                "reduction factor r={} needs 1 <= r <= teacher depth {teacher_depth}",
                self.r
            )));
        }
        if self.batch_size == 0 || self.accum == 0 {
            return Err(Error::Config("batch size and accumulation factor must be positive".into()));
        }
        if self.mode.uses_adapters() && self.rank == 0 {
            return Err(Error::Config("adapter rank must be positive".into()));
        }
        let lr = self.learning_rate();
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {lr}")));
        }
        crate::select::subset_size(dataset_len, self.alpha)?;
        Ok(())
    }
}

/// Seed of the randomly initialized `scratch_kd` student. Kept apart from
/// `seed` itself so a student and a teacher trained with the same seed do not
/// start from identical weights.
pub fn scratch_init_seed(seed: u64) -> u64 {
    seed ^ 0x5c7a_7c40_0000_0001
}

/// Builds the student: `⌊L/r⌋` blocks copied from teacher blocks `r, 2r, …`,
/// front end and final norm copied, and adapters or trainable flags set
/// according to `config.mode`.
pub fn build_student(teacher: &ViTModel, config: &DistillConfig) -> Result<(ViTModel, ParamSet)> {
    let depth = teacher.blocks.len();
    if config.r == 0 || config.r > depth {
        return Err(Error::Config(format!(
            "reduction factor r={} needs 1 <= r <= teacher depth {depth}",
            config.r
        )));
    }
    let student_cfg = ViTConfig {
        depth: depth / config.r,
        num_classes: 0,
        ..teacher.config.clone()
    };
    let mut student = if config.mode == Mode::ScratchKd {
        ViTModel::init_random(&student_cfg, scratch_init_seed(config.seed))?
    } else {
        let mut s = ViTModel::zeros(&student_cfg)?;
        s.patch_embed = teacher.patch_embed.clone();
        s.cls_token = teacher.cls_token.clone();
        s.pos_embed = teacher.pos_embed.clone();
        s.final_norm = teacher.final_norm.clone();
        for (l, block) in s.blocks.iter_mut().enumerate() {
            *block = teacher.blocks[(l + 1) * config.r - 1].clone();
        }
        s
    };
    if student.has_adapters() {
        return Err(Error::Contract("teacher must not carry unmerged adapters".into()));
    }
    let params = match config.mode {
        Mode::Wecolora => attach_enhanced(&mut student, config.rank, config.seed)?,
        Mode::QvLora => attach_qv_only(&mut student, config.rank, config.seed)?,
        Mode::WecoKd | Mode::ScratchKd => {
            student.set_requires_grad(true);
            ParamSet::from_model(&student)
        }
    };
    Ok((student, params))
}

/// Mean absolute difference between two `[t×d]` feature maps.
pub fn distill_loss(teacher_e: &Tensor, student_e: &Tensor) -> Result<f32> {
    if teacher_e.shape() != student_e.shape() {
        return Err(Error::Contract(format!(
            "feature shapes differ: teacher {:?}, student {:?}",
            teacher_e.shape(),
            student_e.shape()
        )));
    }
    let sum: f64 = teacher_e
        .data()
        .iter()
        .zip(student_e.data())
        .map(|(a, b)| (a - b).abs() as f64)
        .sum();
    Ok((sum / teacher_e.numel() as f64) as f32)
}

/// Optimizer and gradient-accumulation state of a distillation run.
#[derive(Clone, Debug)]
pub struct StepState {
    pub opt: Adam,
    pub lr: f32,
    pub accum: usize,
    pending: usize,
}

impl StepState {
    pub fn new(lr: f32, accum: usize) -> Self {
        StepState {
            opt: Adam::new(),
            lr,
            accum: accum.max(1),
            pending: 0,
        }
    }

    /// Micro-batches accumulated since the last update.
    pub fn pending(&self) -> usize {
        self.pending
    }

    /// Applies any partially accumulated gradient, averaged over the
    /// micro-batches actually seen.
    pub fn flush(&mut self, student: &mut ViTModel) {
        if self.pending > 0 {
            let scale = 1.0 / self.pending as f32;
            self.opt.step_model(student, self.lr, scale);
            self.pending = 0;
        }
    }
}

/// One micro-batch against precomputed teacher features. Returns the batch
/// loss (mean over images of the per-image mean L1).
pub fn step_with_targets(
    student: &mut ViTModel,
    params: &ParamSet,
    images: &[Tensor],
    targets: &[Tensor],
    state: &mut StepState,
) -> Result<f32> {
    if images.is_empty() {
        return Err(Error::Contract("empty distillation batch".into()));
    }
    if images.len() != targets.len() {
        return Err(Error::Contract("images and teacher targets differ in length".into()));
    }
    let mut tape = Tape::new();
    let mut total = None;
    for (img, target) in images.iter().zip(targets) {
        let e_s = student.forward_features(&mut tape, img)?;
        let e_t = tape.constant(target.clone());
        let l = tape.l1_mean_loss(e_t, e_s).map_err(|_| {
            Error::Contract(format!(
                "feature shapes differ: teacher {:?}, student {:?}",
                target.shape(),
                tape.shape(e_s)
            ))
        })?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    let loss = tape.scale(total.expect("non-empty batch"), 1.0 / images.len() as f32);
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("distillation loss became {value}")));
    }
    let grads = tape.backward(loss)?;
    student.visit_mut(&mut |name, t| {
        if params.is_trainable(name) {
            if let Some(g) = grads.by_name(name) {
                t.accumulate_grad(g);
            }
        }
    });
    state.pending += 1;
    if state.pending == state.accum {
        state.flush(student);
    }
    Ok(value)
}

/// One micro-batch: teacher features are computed without a tape, the
/// student's loss is back-propagated into its trainable tensors, and the
/// optimizer steps once every `accum` micro-batches.
pub fn distill_step(
    teacher: &ViTModel,
    student: &mut ViTModel,
    params: &ParamSet,
    batch: &[Tensor],
    state: &mut StepState,
) -> Result<f32> {
    if batch.is_empty() {
        return Err(Error::Contract("empty distillation batch".into()));
    }
    let targets = batch.iter().map(|im| teacher.features(im)).collect::<Result<Vec<_>>>()?;
    step_with_targets(student, params, batch, &targets, state)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f32,
    pub lr: f32,
}

/// A distillation run that can be inspected between construction, training
/// and the final merge.
pub struct DistillRun<'a> {
    teacher: &'a ViTModel,
    config: DistillConfig,
    student: ViTModel,
    params: ParamSet,
    subset: Vec<usize>,
    images: Vec<Tensor>,
    targets: Option<Vec<Tensor>>,
    state: StepState,
    log: Vec<StepRecord>,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl<'a> DistillRun<'a> {
    /// Builds the student and selects the subset. `images` is the label-free
    /// view of the distillation set.
    pub fn new(teacher: &'a ViTModel, images: &[Tensor], config: &DistillConfig) -> Result<Self> {
        config.validate(teacher.blocks.len(), images.len())?;
        let (student, params) = build_student(teacher, config)?;
        let features = match config.selection {
            Selection::Kmeanspp => Some(crate::eval::cls_features(teacher, images)?),
            Selection::Random => None,
        };
        let subset = select_subset(images.len(), config.alpha, config.selection, config.seed, features.as_deref())?;
        let chosen: Vec<Tensor> = subset.iter().map(|&i| images[i].clone()).collect();
        let targets = if config.augment {
            None
        } else {
            Some(chosen.iter().map(|im| teacher.features(im)).collect::<Result<Vec<_>>>()?)
        };
        Ok(DistillRun {
            teacher,
            config: config.clone().resolved(),
            student,
            params,
            subset,
            images: chosen,
            targets,
            state: StepState::new(config.learning_rate(), config.accum),
            log: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x00d1_5711)),
            epoch: 0,
        })
    }

    pub fn student(&self) -> &ViTModel {
        &self.student
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn subset(&self) -> &[usize] {
        &self.subset
    }

    pub fn log(&self) -> &[StepRecord] {
        &self.log
    }

    pub fn config(&self) -> &DistillConfig {
        &self.config
    }

    /// One pass over the shuffled subset; leftover accumulated gradient is
    /// applied at the end of the epoch.
    pub fn run_epoch(&mut self) -> Result<()> {
        let mut order: Vec<usize> = (0..self.images.len()).collect();
        order.shuffle(&mut self.rng);
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<Tensor> = if self.config.augment {
                chunk.iter().map(|&i| augment(&self.images[i], &mut self.rng)).collect()
            } else {
                chunk.iter().map(|&i| self.images[i].clone()).collect()
            };
            let targets: Vec<Tensor> = match &self.targets {
                Some(t) => chunk.iter().map(|&i| t[i].clone()).collect(),
                None => batch.iter().map(|im| self.teacher.features(im)).collect::<Result<_>>()?,
            };
            let loss = step_with_targets(&mut self.student, &self.params, &batch, &targets, &mut self.state)?;
            self.log.push(StepRecord {
                step: self.log.len(),
                epoch: self.epoch,
                loss,
                lr: self.state.lr,
            });
        }
        self.state.flush(&mut self.student);
        self.epoch += 1;
        Ok(())
    }

    pub fn train(&mut self) -> Result<()> {
        for _ in 0..self.config.epochs {
            self.run_epoch()?;
        }
        Ok(())
    }

    /// Merges adapters (adapter modes) and freezes the student.
    pub fn finish(mut self) -> Result<DistillOutcome> {
        if self.config.mode.uses_adapters() {
            merge_adapters(&mut self.student)?;
        }
        self.student.set_requires_grad(false);
        Ok(DistillOutcome {
            student: self.student,
            log: self.log,
            subset: self.subset,
            trainable: self.params.trainable,
        })
    }
}

#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub student: ViTModel,
    pub log: Vec<StepRecord>,
    pub subset: Vec<usize>,
    /// Names of the tensors that were trained.
    pub trainable: Vec<String>,
}

impl DistillOutcome {
    /// Mean logged loss per epoch.
    pub fn epoch_means(&self) -> Vec<f32> {
        epoch_means(&self.log)
    }
}

pub fn epoch_means(log: &[StepRecord]) -> Vec<f32> {
    let epochs = log.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
    (0..epochs)
        .map(|e| {
            let v: Vec<f32> = log.iter().filter(|r| r.epoch == e).map(|r| r.loss).collect();
            v.iter().sum::<f32>() / v.len().max(1) as f32
        })
        .collect()
}

/// Full pipeline: build, select, train, merge.
pub fn run_distillation(teacher: &ViTModel, images: &[Tensor], config: &DistillConfig) -> Result<DistillOutcome> {
    let mut run = DistillRun::new(teacher, images, config)?;
    run.train()?;
    run.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn teacher(depth: usize) -> ViTModel {
        let cfg = ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            dim: 8,
            depth,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 2,
        };
        ViTModel::init_random(&cfg, 17).unwrap()
    }

    fn images(n: usize) -> Vec<Tensor> {
        (0..n)
            .map(|k| Tensor::from_fn([1, 8, 8], |i| ((i * (k + 3)) as f32 * 0.13).sin()))
            .collect()
    }

    #[test]
    fn copy_mapping() {
        let t = teacher(12);
        for (r, expect) in [(2, vec![2, 4, 6, 8, 10, 12]), (5, vec![5, 10]), (1, (1..=12).collect())] {
            let cfg = DistillConfig {
                r,
                mode: Mode::WecoKd,
                ..DistillConfig::default()
            };
            let (s, _) = build_student(&t, &cfg).unwrap();
            assert_eq!(s.blocks.len(), expect.len());
            for (l, tl) in expect.iter().enumerate() {
                let a = s.blocks[l].attn.wq.weight.clone();
                assert!(a.bit_eq(&t.blocks[tl - 1].attn.wq.weight));
            }
            assert!(s.head.is_none());
        }
        let cfg = DistillConfig {
            r: 13,
            ..DistillConfig::default()
        };
        assert!(matches!(build_student(&t, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn loss_shapes_and_offsets() {
        let a = Tensor::from_fn([3, 4], |i| i as f32);
        let b = Tensor::from_fn([3, 4], |i| i as f32 + 1.0);
        assert_eq!(distill_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(distill_loss(&b, &a).unwrap(), 1.0);
        assert!(matches!(distill_loss(&a, &Tensor::zeros([4, 3])), Err(Error::Contract(_))));
    }

    #[test]
    fn empty_batch_is_rejected() {
        let t = teacher(2);
        let (mut s, p) = build_student(&t, &DistillConfig::default()).unwrap();
        let mut st = StepState::new(1e-3, 1);
        assert!(matches!(distill_step(&t, &mut s, &p, &[], &mut st), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_lr_step_changes_nothing() {
        let t = teacher(2);
        let (mut s, p) = build_student(&t, &DistillConfig::default()).unwrap();
        let before = s.named_tensors();
        let mut st = StepState::new(0.0, 1);
        distill_step(&t, &mut s, &p, &images(3), &mut st).unwrap();
        let after = s.named_tensors();
        assert!(before.iter().zip(&after).all(|(a, b)| a.0 == b.0 && a.1.bit_eq(&b.1)));
    }

    #[test]
    fn identity_pipeline_has_zero_loss() {
        let t = teacher(3);
        let cfg = DistillConfig {
            r: 1,
            lr: Some(0.0),
            epochs: 2,
            batch_size: 2,
            accum: 1,
            alpha: 1.0,
            ..DistillConfig::default()
        };
        let imgs = images(5);
        let out = run_distillation(&t, &imgs, &cfg).unwrap();
        assert_eq!(out.log.len(), 2 * 3);
        assert!(out.log.iter().all(|r| r.loss == 0.0));
        for im in &imgs {
            assert!(out.student.features(im).unwrap().bit_eq(&t.features(im).unwrap()));
        }
    }

    #[test]
    fn unknown_mode_and_config_fields() {
        assert!("nope".parse::<Mode>().is_err());
        assert_eq!("qv_lora".parse::<Mode>().unwrap(), Mode::QvLora);
        let parsed: std::result::Result<DistillConfig, _> = serde_json::from_str(r#"{"r": 2, "bogus": 1}"#);
        assert!(parsed.is_err());
        let parsed: DistillConfig = serde_json::from_str(r#"{"mode": "scratch_kd", "selection": "kmeanspp"}"#).unwrap();
        assert_eq!(parsed.mode, Mode::ScratchKd);
        assert_eq!(parsed.selection, Selection::Kmeanspp);
    }

    #[test]
    fn default_learning_rates() {
        assert_eq!(default_lr(2), 1e-3);
        assert_eq!(default_lr(3), 1e-4);
        let cfg = DistillConfig {
            r: 4,
            ..DistillConfig::default()
        };
        assert_eq!(cfg.resolved().lr, Some(1e-4));
    }
}
