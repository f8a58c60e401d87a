//! The multi-task embedding model: a shared featurizer, a normalization
//! chain producing the retrieval embedding, and one bias-free proxy head per
//! task.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::data::{LabeledDataset, RecordRef, ABSENT};
use crate::error::{Error, Result};
use crate::layers::{Linear, LinearVars, Param};
use crate::proxy::{proxy_logits, subsample_proxies, LogitMode, ProxyBank};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// The op chain between featurizer and heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// layer norm, then cosine logits with temperature
    LnNormSoftmax,
    /// group norm, plain softmax
    SmGn,
    /// group norm, ReLU
    SmGnR,
    /// group norm, ReLU, dropout
    SmGnRDp,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::LnNormSoftmax, Variant::SmGn, Variant::SmGnR, Variant::SmGnRDp];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::LnNormSoftmax => "ln_normsoftmax",
            Variant::SmGn => "sm_gn",
            Variant::SmGnR => "sm_gn_r",
            Variant::SmGnRDp => "sm_gn_r_dp",
        }
    }

    pub fn has_relu(self) -> bool {
        matches!(self, Variant::SmGnR | Variant::SmGnRDp)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub variant: Variant,
    /// Only used by [`Variant::LnNormSoftmax`].
    pub temperature: f64,
    pub groups: usize,
    pub dropout_p: f64,
    pub norm_eps: f64,
    pub proxy_init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: crate::data::DEFAULT_FEATURE_DIM,
            hidden_dims: vec![64, 64],
            embed_dim: 64,
            variant: Variant::SmGnRDp,
            temperature: 0.05,
            groups: 8,
            dropout_p: 0.5,
            norm_eps: 1e-5,
            proxy_init_std: 0.01,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.embed_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if self.groups == 0 || self.embed_dim % self.groups != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by groups {}",
                self.embed_dim, self.groups
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p {} outside [0, 1)", self.dropout_p)));
        }
        if !(self.norm_eps > 0.0) || !(self.proxy_init_std >= 0.0) {
            return Err(Error::Config("norm_eps must be positive and proxy_init_std non-negative".into()));
        }
        Ok(())
    }

    /// `key = value` lines in a fixed order.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let dims: Vec<String> = self.hidden_dims.iter().map(ToString::to_string).collect();
        vec![
            ("feature_dim".into(), self.feature_dim.to_string()),
            ("hidden_dims".into(), dims.join(",")),
            ("embed_dim".into(), self.embed_dim.to_string()),
            ("variant".into(), self.variant.to_string()),
            ("temperature".into(), self.temperature.to_string()),
            ("groups".into(), self.groups.to_string()),
            ("dropout_p".into(), self.dropout_p.to_string()),
            ("norm_eps".into(), self.norm_eps.to_string()),
            ("proxy_init_std".into(), self.proxy_init_std.to_string()),
            ("seed".into(), self.seed.to_string()),
        ]
    }

    /// Applies one `key = value` pair; returns `false` for keys this type
    /// does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "feature_dim" => self.feature_dim = parse(key, value)?,
            "hidden_dims" => {
                self.hidden_dims = if value.trim().is_empty() {
                    Vec::new()
                } else {
                    value.split(',').map(|v| parse(key, v.trim())).collect::<Result<_>>()?
                }
            }
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "variant" => self.variant = value.parse()?,
            "temperature" => self.temperature = parse(key, value)?,
            "groups" => self.groups = parse(key, value)?,
            "dropout_p" => self.dropout_p = parse(key, value)?,
            "norm_eps" => self.norm_eps = parse(key, value)?,
            "proxy_init_std" => self.proxy_init_std = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

pub(crate) fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    pub name: String,
    pub num_classes: usize,
    pub subsampled: bool,
    /// Classes per step when `subsampled`.
    pub num_samples: usize,
}

impl TaskSpec {
    pub fn full(name: impl Into<String>, num_classes: usize) -> Self {
        TaskSpec {
            name: name.into(),
            num_classes,
            subsampled: false,
            num_samples: num_classes,
        }
    }

    pub fn subsampled(name: impl Into<String>, num_classes: usize, num_samples: usize) -> Self {
        TaskSpec {
            name: name.into(),
            num_classes,
            subsampled: true,
            num_samples,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config(format!("task {} has no classes", self.name)));
        }
        if self.subsampled && (self.num_samples == 0 || self.num_samples > self.num_classes) {
            return Err(Error::Config(format!(
                "task {}: num_samples {} outside [1, {}]",
                self.name, self.num_samples, self.num_classes
            )));
        }
        Ok(())
    }
}

/// Features plus one label column per model task (`-1` = absent).
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub features: Tensor<T>,
    pub labels: Vec<Vec<i64>>,
}

impl<T: Scalar> Batch<T> {
    /// Gathers `refs` from `datasets`, mapping dataset label slots onto
    /// `tasks` by name.
    pub fn assemble(datasets: &[LabeledDataset], refs: &[RecordRef], tasks: &[TaskSpec]) -> Result<Self> {
        let f = datasets
            .first()
            .ok_or_else(|| Error::Config("no datasets".into()))?
            .feature_dim;
        let slots: Vec<Vec<Option<usize>>> = datasets
            .iter()
            .map(|d| tasks.iter().map(|t| d.task_index(&t.name)).collect())
            .collect();
        let mut data = Vec::with_capacity(refs.len() * f);
        let mut labels = vec![Vec::with_capacity(refs.len()); tasks.len()];
        for r in refs {
            let ds = &datasets[r.dataset];
            if ds.feature_dim != f {
                return Err(Error::dim("batch", &[f], &[ds.feature_dim]));
            }
            let rec = &ds.records[r.index];
            data.extend(rec.features.iter().map(|&v| T::of_f32(v)));
            for (t, slot) in slots[r.dataset].iter().enumerate() {
                labels[t].push(slot.map_or(ABSENT, |s| rec.labels[s]));
            }
        }
        Ok(Batch {
            features: Tensor::new(&[refs.len(), f], data)?,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct MultiTaskModel<T> {
    pub(crate) config: ModelConfig,
    pub(crate) tasks: Vec<TaskSpec>,
    /// Hidden layers (each followed by ReLU) and the embedding projection.
    pub(crate) featurizer: Vec<Linear<T>>,
    pub(crate) norm_gamma: Param<T>,
    pub(crate) norm_beta: Param<T>,
    pub(crate) heads: Vec<ProxyBank<T>>,
    pub(crate) rng: ChaCha8Rng,
}

/// Tape handles of one embedding forward pass.
#[derive(Debug, Clone)]
pub(crate) struct EmbedVars {
    pub layers: Vec<LinearVars>,
    pub gamma: Var,
    pub beta: Var,
    /// Normalized output before ReLU/dropout.
    pub pre_activation: Var,
    pub embedding: Var,
}

/// Tape handles of one task loss.
#[derive(Debug, Clone)]
pub(crate) struct TaskVars {
    pub task: usize,
    pub sampled: Vec<usize>,
    pub gathered: Var,
    pub loss: Var,
}

#[derive(Debug, Clone)]
pub(crate) struct ForwardVars {
    pub embed: EmbedVars,
    pub tasks: Vec<TaskVars>,
    pub total: Var,
}

impl<T: Scalar> MultiTaskModel<T> {
    /// Builds and initializes a model from `config.seed`.
    pub fn new(config: ModelConfig, tasks: Vec<TaskSpec>) -> Result<Self> {
        config.validate()?;
        if tasks.is_empty() {
            return Err(Error::Config("a model needs at least one task".into()));
        }
        for (i, t) in tasks.iter().enumerate() {
            t.validate()?;
            if tasks[..i].iter().any(|o| o.name == t.name) {
                return Err(Error::Config(format!("duplicate task {}", t.name)));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut featurizer = Vec::new();
        let mut width = config.feature_dim;
        for (i, &h) in config.hidden_dims.iter().enumerate() {
            featurizer.push(Linear::new(&format!("featurizer.{i}"), width, h, true));
            width = h;
        }
        featurizer.push(Linear::new("embedding", width, config.embed_dim, true));
        for layer in &mut featurizer {
            layer.init_weights(&mut rng);
        }
        let d = config.embed_dim;
        let heads = tasks
            .iter()
            .map(|t| {
                let mut bank = ProxyBank::zeros(t.name.clone(), t.num_classes, d);
                bank.init_normal(config.proxy_init_std, &mut rng);
                bank
            })
            .collect();
        Ok(MultiTaskModel {
            norm_gamma: Param::new("norm.gamma", Tensor::ones(&[d])),
            norm_beta: Param::new("norm.beta", Tensor::zeros(&[d])),
            config,
            tasks,
            featurizer,
            heads,
            rng,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn task_index(&self, name: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.name == name)
    }

    pub fn head(&self, name: &str) -> Option<&ProxyBank<T>> {
        self.task_index(name).map(|i| &self.heads[i])
    }

    pub fn heads(&self) -> &[ProxyBank<T>] {
        &self.heads
    }

    pub fn heads_mut(&mut self) -> &mut [ProxyBank<T>] {
        &mut self.heads
    }

    pub fn featurizer(&self) -> &[Linear<T>] {
        &self.featurizer
    }

    /// Every dense trainable parameter, featurizer first.
    pub fn dense_params(&self) -> impl Iterator<Item = &Param<T>> {
        self.featurizer
            .iter()
            .flat_map(Linear::params)
            .chain([&self.norm_gamma, &self.norm_beta])
    }

    pub(crate) fn dense_params_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.featurizer
            .iter_mut()
            .flat_map(Linear::params_mut)
            .chain([&mut self.norm_gamma, &mut self.norm_beta])
    }

    pub fn logit_mode(&self) -> LogitMode {
        match self.config.variant {
            Variant::LnNormSoftmax => LogitMode::NormSoftmax {
                temperature: self.config.temperature,
            },
            _ => LogitMode::Plain,
        }
    }

    pub(crate) fn embed_on_tape(
        &self,
        tape: &mut Tape<T>,
        features: Var,
        train: bool,
        rng: &mut ChaCha8Rng,
        first_weight: Option<Var>,
    ) -> Result<EmbedVars> {
        if tape.value(features).cols() != self.config.feature_dim {
            return Err(Error::dim(
                "embed_forward",
                tape.value(features).shape(),
                &[tape.value(features).rows(), self.config.feature_dim],
            ));
        }
        let mut h = features;
        let mut layers = Vec::with_capacity(self.featurizer.len());
        let last = self.featurizer.len() - 1;
        for (i, layer) in self.featurizer.iter().enumerate() {
            let (y, vars) = match (i, first_weight) {
                (0, Some(w)) => {
                    let mut y = tape.matmul_nt(h, w)?;
                    let mut bias = None;
                    if let Some(b) = &layer.bias {
                        let bv = b.record(tape)?;
                        y = tape.add_row_bias(y, bv)?;
                        bias = Some(bv);
                    }
                    (y, LinearVars { weight: w, bias })
                }
                _ => layer.forward(tape, h)?,
            };
            layers.push(vars);
            h = if i < last { tape.relu(y)? } else { y };
        }
        let gamma = self.norm_gamma.record(tape)?;
        let beta = self.norm_beta.record(tape)?;
        let eps = T::of(self.config.norm_eps);
        let normed = match self.config.variant {
            Variant::LnNormSoftmax => tape.layer_norm(h, eps, gamma, beta)?,
            _ => tape.group_norm(h, self.config.groups, eps, gamma, beta)?,
        };
        let mut out = normed;
        if self.config.variant.has_relu() {
            out = tape.relu(out)?;
        }
        if self.config.variant == Variant::SmGnRDp {
            out = tape.dropout(out, self.config.dropout_p, train, rng)?;
        }
        Ok(EmbedVars {
            layers,
            gamma,
            beta,
            pre_activation: normed,
            embedding: out,
        })
    }

    /// Retrieval embeddings for `features` (`N×F`), dropout disabled.
    pub fn embed(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let mut rng = self.rng.clone();
        self.embed_forward(features, false, &mut rng)
    }

    pub fn embed_forward(&self, features: &Tensor<T>, train: bool, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(features.clone())?;
        let vars = self.embed_on_tape(&mut tape, x, train, rng, None)?;
        Ok(tape.value(vars.embedding).clone())
    }

    /// Normalized embedding before ReLU and dropout.
    pub fn pre_activation(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(features.clone())?;
        let mut rng = self.rng.clone();
        let vars = self.embed_on_tape(&mut tape, x, false, &mut rng, None)?;
        Ok(tape.value(vars.pre_activation).clone())
    }

    /// Records the loss of task `task` over the labeled rows of `labels`.
    /// Returns `None` when no row carries a label for this task.
    pub(crate) fn task_loss_on_tape(
        &self,
        tape: &mut Tape<T>,
        embeddings: Var,
        task: usize,
        labels: &[i64],
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<TaskVars>> {
        let spec = &self.tasks[task];
        let m = spec.num_classes;
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (row, &l) in labels.iter().enumerate() {
            if l == ABSENT {
                continue;
            }
            if l < 0 || l as usize >= m {
                return Err(Error::Label { row, label: l, classes: m });
            }
            rows.push(row);
            targets.push(l as usize);
        }
        if rows.is_empty() {
            return Ok(None);
        }
        let (sampled, remapped) = if spec.subsampled {
            let s = subsample_proxies(&targets, spec.num_samples, m, rng)?;
            (s.sampled_proxy_idx, s.remapped_targets)
        } else {
            ((0..m).collect(), targets)
        };
        let selected = if rows.len() == tape.value(embeddings).rows() {
            embeddings
        } else {
            tape.select_rows(embeddings, &rows)?
        };
        let gathered = tape.param(self.heads[task].gather(&sampled)?)?;
        let logits = proxy_logits(tape, selected, gathered, self.logit_mode())?;
        let loss = tape.softmax_cross_entropy(logits, &remapped)?;
        Ok(Some(TaskVars {
            task,
            sampled,
            gathered,
            loss,
        }))
    }

    pub(crate) fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        batch: &Batch<T>,
        train: bool,
        rng: &mut ChaCha8Rng,
        first_weight: Option<Var>,
    ) -> Result<ForwardVars> {
        if batch.labels.len() != self.tasks.len() {
            return Err(Error::Config(format!(
                "batch has {} label columns for {} tasks",
                batch.labels.len(),
                self.tasks.len()
            )));
        }
        let x = tape.constant(batch.features.clone())?;
        let embed = self.embed_on_tape(tape, x, train, rng, first_weight)?;
        let mut tasks = Vec::new();
        for (t, labels) in batch.labels.iter().enumerate() {
            if let Some(tv) = self.task_loss_on_tape(tape, embed.embedding, t, labels, rng)? {
                tasks.push(tv);
            }
        }
        let mut total = tasks.first().ok_or(Error::EmptyBatch)?.loss;
        for tv in &tasks[1..] {
            total = tape.add(total, tv.loss)?;
        }
        Ok(ForwardVars { embed, tasks, total })
    }

    /// Loss of one task given fixed embeddings; `None` when the task has no
    /// labeled row.
    pub fn task_loss(
        &self,
        embeddings: &Tensor<T>,
        task: &str,
        labels: &[i64],
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<T>> {
        let t = self
            .task_index(task)
            .ok_or_else(|| Error::Config(format!("unknown task {task}")))?;
        let mut tape = Tape::new();
        let e = tape.constant(embeddings.clone())?;
        Ok(self
            .task_loss_on_tape(&mut tape, e, t, labels, rng)?
            .map(|tv| tape.value(tv.loss).item()))
    }

    /// Per-task losses (absent tasks omitted) and their unweighted sum.
    pub fn losses(&self, batch: &Batch<T>, train: bool, rng: &mut ChaCha8Rng) -> Result<(Vec<(String, T)>, T)> {
        let mut tape = Tape::new();
        let fw = self.forward_on_tape(&mut tape, batch, train, rng, None)?;
        let per = fw
            .tasks
            .iter()
            .map(|tv| (self.tasks[tv.task].name.clone(), tape.value(tv.loss).item()))
            .collect();
        Ok((per, tape.value(fw.total).item()))
    }

    /// Sum of all present task losses.
    pub fn total_loss(&self, batch: &Batch<T>, train: bool, rng: &mut ChaCha8Rng) -> Result<T> {
        self.losses(batch, train, rng).map(|(_, total)| total)
    }

    /// Runs forward and backward, leaving dense gradients accumulated in the
    /// parameters and returning the gathered proxy gradients per task.
    pub(crate) fn accumulate_gradients(
        &mut self,
        batch: &Batch<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<GradientPass<T>> {
        let mut tape = Tape::new();
        let fw = self.forward_on_tape(&mut tape, batch, true, rng, None)?;
        let losses: Vec<(String, f64)> = fw
            .tasks
            .iter()
            .map(|tv| (self.tasks[tv.task].name.clone(), tape.value(tv.loss).item().as_f64()))
            .collect();
        if losses.iter().any(|(_, l)| !l.is_finite()) {
            let detail: Vec<String> = losses.iter().map(|(t, l)| format!("{t}={l}")).collect();
            return Err(Error::NonFinite(format!("training loss ({})", detail.join(", "))));
        }
        tape.backward(fw.total)?;
        for (layer, vars) in self.featurizer.iter_mut().zip(&fw.embed.layers) {
            layer.accumulate_from(&tape, vars);
        }
        self.norm_gamma.accumulate_from(&tape, fw.embed.gamma);
        self.norm_beta.accumulate_from(&tape, fw.embed.beta);
        let proxy_grads = fw
            .tasks
            .into_iter()
            .map(|tv| {
                let grad = tape
                    .take_grad(tv.gathered)
                    .unwrap_or_else(|| Tensor::zeros(&[tv.sampled.len(), self.config.embed_dim]));
                ProxyGrad {
                    task: tv.task,
                    rows: tv.sampled,
                    grad,
                }
            })
            .collect();
        Ok(GradientPass { losses, proxy_grads })
    }

    pub(crate) fn zero_grad(&mut self) {
        for p in self.dense_params_mut() {
            p.zero_grad();
        }
    }

    /// Same architecture and weights in another scalar type.
    pub fn cast<U: Scalar>(&self) -> MultiTaskModel<U> {
        let cast_param = |p: &Param<T>| Param::new(p.name.clone(), p.value.cast());
        MultiTaskModel {
            config: self.config.clone(),
            tasks: self.tasks.clone(),
            featurizer: self
                .featurizer
                .iter()
                .map(|l| Linear {
                    weight: cast_param(&l.weight),
                    bias: l.bias.as_ref().map(cast_param),
                })
                .collect(),
            norm_gamma: cast_param(&self.norm_gamma),
            norm_beta: cast_param(&self.norm_beta),
            heads: self
                .heads
                .iter()
                .map(|h| ProxyBank::from_rows(h.task(), h.rows().cast()).expect("matrix"))
                .collect(),
            rng: self.rng.clone(),
        }
    }
}

#[derive(Debug)]
pub(crate) struct ProxyGrad<T> {
    pub task: usize,
    pub rows: Vec<usize>,
    pub grad: Tensor<T>,
}

#[derive(Debug)]
pub(crate) struct GradientPass<T> {
    pub losses: Vec<(String, f64)>,
    pub proxy_grads: Vec<ProxyGrad<T>>,
}
