//! Low-rank adapters on frozen linear layers.
//!
//! An [`AdaptedLinear`] computes `x·Wᵀ + b + (x·Aᵀ)·Bᵀ` on `[t×in]` token
//! matrices. The product `B·A` is only ever formed by [`AdaptedLinear::merge`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};
use crate::vit::{trunc_normal, ViTConfig, ViTModel, INIT_STD};

/// Trainable rank-`k` pair: `a` is `[k×in]`, `b` is `[out×k]`.
#[derive(Clone, Debug)]
pub struct LoraPair {
    pub a: Tensor,
    pub b: Tensor,
}

impl LoraPair {
    pub fn new(rank: usize, in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        let a = Tensor::from_fn([rank, in_features], |_| trunc_normal(rng, INIT_STD)).with_requires_grad(true);
        let b = Tensor::zeros([out_features, rank]).with_requires_grad(true);
        LoraPair { a, b }
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    /// The dense update `B·A`, shaped like the base weight.
    pub fn delta(&self) -> Tensor {
        let k = self.rank();
        let out = self.b.shape()[0];
        let inp = self.a.shape()[1];
        let data = kernels::matmul(self.b.data(), self.a.data(), out, k, inp);
        Tensor::new([out, inp], data).expect("delta shape")
    }
}

/// Parameter names of one linear layer inside a checkpoint.
#[derive(Clone, Debug)]
pub struct LinearNames {
    pub weight: String,
    pub bias: String,
    pub lora_a: String,
    pub lora_b: String,
}

impl LinearNames {
    /// `prefix`, `prefix.b`: the attention/FFN projections.
    pub fn matrix(prefix: &str) -> Self {
        LinearNames {
            weight: prefix.to_string(),
            bias: format!("{prefix}.b"),
            lora_a: format!("{prefix}.lora_a"),
            lora_b: format!("{prefix}.lora_b"),
        }
    }

    /// `prefix.w`, `prefix.b`: patch embedding and classifier head.
    pub fn module(prefix: &str) -> Self {
        LinearNames {
            weight: format!("{prefix}.w"),
            bias: format!("{prefix}.b"),
            lora_a: format!("{prefix}.lora_a"),
            lora_b: format!("{prefix}.lora_b"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdaptedLinear {
    pub weight: Tensor,
    pub bias: Tensor,
    pub adapter: Option<LoraPair>,
}

impl AdaptedLinear {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let (out, _) = weight.dims2()?;
        if bias.shape() != [out] {
            return Err(Error::dim("linear bias", weight.shape(), bias.shape()));
        }
        Ok(AdaptedLinear {
            weight,
            bias,
            adapter: None,
        })
    }

    pub fn zeros(out_features: usize, in_features: usize) -> Self {
        AdaptedLinear {
            weight: Tensor::zeros([out_features, in_features]),
            bias: Tensor::zeros([out_features]),
            adapter: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape, names: &LinearNames, x: Var) -> Result<Var> {
        let xs = tape.shape(x);
        if xs.len() != 2 || xs[1] != self.in_features() {
            return Err(Error::dim("linear", xs, self.weight.shape()));
        }
        let w = tape.param(&names.weight, &self.weight);
        let b = tape.param(&names.bias, &self.bias);
        let wt = tape.transpose(w)?;
        let y = tape.matmul(x, wt)?;
        let mut y = tape.add_row(y, b)?;
        if let Some(pair) = &self.adapter {
            let a = tape.param(&names.lora_a, &pair.a);
            let bb = tape.param(&names.lora_b, &pair.b);
            let at = tape.transpose(a)?;
            let bt = tape.transpose(bb)?;
            let low = tape.matmul(x, at)?;
            let up = tape.matmul(low, bt)?;
            y = tape.add(y, up)?;
        }
        Ok(y)
    }

    /// Inference-only forward of a `[t×in]` matrix.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, &LinearNames::matrix("linear"), xv)?;
        Ok(tape.value(y).clone())
    }

    /// Attaches a fresh rank-`rank` pair and freezes the base weight and bias.
    pub fn attach(&mut self, rank: usize, rng: &mut impl Rng) -> Result<()> {
        if self.adapter.is_some() {
            return Err(Error::Contract("layer already carries an adapter".into()));
        }
        let max = self.in_features().min(self.out_features());
        if rank == 0 || rank > max {
            return Err(Error::Config(format!(
                "adapter rank {rank} must lie in 1..={max} for a {}x{} layer",
                self.out_features(),
                self.in_features()
            )));
        }
        self.weight.set_requires_grad(false);
        self.bias.set_requires_grad(false);
        self.adapter = Some(LoraPair::new(rank, self.in_features(), self.out_features(), rng));
        Ok(())
    }

    /// Folds `B·A` into the base weight and drops the adapter.
    pub fn merge(&mut self) -> Result<()> {
        let pair = self
            .adapter
            .take()
            .ok_or_else(|| Error::Contract("no adapter to merge".into()))?;
        let delta = pair.delta();
        for (w, d) in self.weight.data_mut().iter_mut().zip(delta.data()) {
            *w += d;
        }
        Ok(())
    }
}

/// Which projections of each block receive adapters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Placement {
    /// Query, key, value, output and both FFN matrices.
    Enhanced,
    /// Query and value only.
    QueryValue,
}

impl Placement {
    pub fn layers(self) -> &'static [&'static str] {
        match self {
            Placement::Enhanced => &["attn.wq", "attn.wk", "attn.wv", "attn.wo", "ffn.wf1", "ffn.wf2"],
            Placement::QueryValue => &["attn.wq", "attn.wv"],
        }
    }
}

/// Frozen / trainable split of a model's named parameters.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamSet {
    pub frozen: Vec<String>,
    pub trainable: Vec<String>,
}

impl ParamSet {
    /// Partition by the models' current `requires_grad` flags.
    pub fn from_model(model: &ViTModel) -> Self {
        let mut set = ParamSet::default();
        model.visit(&mut |name, t| {
            if t.requires_grad() {
                set.trainable.push(name.to_string());
            } else {
                set.frozen.push(name.to_string());
            }
        });
        set
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.iter().any(|n| n == name)
    }

    pub fn trainable_count(&self, model: &ViTModel) -> usize {
        let mut n = 0;
        model.visit(&mut |name, t| {
            if self.is_trainable(name) {
                n += t.numel();
            }
        });
        n
    }
}

fn attach(model: &mut ViTModel, rank: usize, seed: u64, placement: Placement) -> Result<ParamSet> {
    if model.has_adapters() {
        return Err(Error::Contract("model already carries adapters".into()));
    }
    let d = model.config.dim;
    let hidden = model.config.hidden();
    let max = d.min(hidden);
    if rank == 0 || rank > max {
        return Err(Error::Config(format!("adapter rank {rank} must lie in 1..={max}")));
    }
    model.visit_mut(&mut |_, t| t.set_requires_grad(false));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for block in &mut model.blocks {
        for layer in placement.layers() {
            block.linear_mut(layer).expect("known layer").attach(rank, &mut rng)?;
        }
    }
    Ok(ParamSet::from_model(model))
}

/// Adapters on all six projection matrices of every block.
pub fn attach_enhanced(model: &mut ViTModel, rank: usize, seed: u64) -> Result<ParamSet> {
    attach(model, rank, seed, Placement::Enhanced)
}

/// Adapters on the query and value projections only.
pub fn attach_qv_only(model: &mut ViTModel, rank: usize, seed: u64) -> Result<ParamSet> {
    attach(model, rank, seed, Placement::QueryValue)
}

/// Folds every adapter into its base weight.
pub fn merge_adapters(model: &mut ViTModel) -> Result<()> {
    if !model.has_adapters() {
        return Err(Error::Contract("merge_adapters: no adapters attached".into()));
    }
    for block in &mut model.blocks {
        for layer in Placement::Enhanced.layers() {
            let lin = block.linear_mut(layer).expect("known layer");
            if lin.adapter.is_some() {
                lin.merge()?;
            }
        }
    }
    Ok(())
}

/// Trainable adapter parameters implied by a configuration, enumerated
/// layer by layer without allocating the model.
pub fn count_trainable(config: &ViTConfig, rank: usize, placement: Placement) -> usize {
    let d = config.dim;
    let hidden = config.hidden();
    let per_block: usize = placement
        .layers()
        .iter()
        .map(|layer| {
            let (out, inp) = match *layer {
                "ffn.wf1" => (hidden, d),
                "ffn.wf2" => (d, hidden),
                _ => (d, d),
            };
            rank * inp + out * rank
        })
        .sum();
    per_block * config.depth
}

/// Closed form `depth · k·d·(10 + 2m)` for enhanced placement.
pub fn enhanced_count_formula(dim: usize, mlp_ratio: usize, rank: usize, depth: usize) -> usize {
    depth * rank * dim * (10 + 2 * mlp_ratio)
}

/// Closed form `depth · 4kd` for query/value placement.
pub fn qv_count_formula(dim: usize, rank: usize, depth: usize) -> usize {
    depth * 4 * rank * dim
}
