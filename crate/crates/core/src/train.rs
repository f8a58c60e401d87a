//! Training loop: batch mixing, dense SGD on the shared network, and
//! sparse momentum-compensated updates on the proxy banks.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{mix_batches, size_proportional_batches, LabeledDataset, RecordRef};
use crate::error::{Error, Result};
use crate::model::{Batch, MultiTaskModel};
use crate::optim::{dense_sgd_step, lr_schedule, momentum_compensated_lr, SgdConfig, SgdState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How batches are drawn from several datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Balancing {
    /// Equal share per dataset in every batch.
    Uniform,
    /// Shuffled concatenation; shares follow dataset sizes.
    SizeProportional,
}

impl fmt::Display for Balancing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Balancing::Uniform => "uniform",
            Balancing::SizeProportional => "proportional",
        })
    }
}

impl FromStr for Balancing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Balancing::Uniform),
            "proportional" => Ok(Balancing::SizeProportional),
            _ => Err(Error::Config(format!("unknown balancing {s:?}"))),
        }
    }
}

/// How proxy rows are optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProxyUpdate {
    /// Plain SGD on sampled rows only, with lr scaled by `1 / (1 - momentum)`.
    Compensated,
    /// Full-bank momentum SGD with zero gradient on unsampled rows. Every
    /// bank is updated every step.
    DenseMomentum,
}

impl fmt::Display for ProxyUpdate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProxyUpdate::Compensated => "compensated",
            ProxyUpdate::DenseMomentum => "dense_momentum",
        })
    }
}

impl FromStr for ProxyUpdate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "compensated" => Ok(ProxyUpdate::Compensated),
            "dense_momentum" => Ok(ProxyUpdate::DenseMomentum),
            _ => Err(Error::Config(format!("unknown proxy update {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// `lr` is the base learning rate before the schedule.
    pub sgd: SgdConfig,
    pub gamma: f64,
    pub step_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Leading epochs during which the hidden featurizer layers stay fixed
    /// and only the embedding projection, normalization affine and proxies
    /// train.
    pub freeze_featurizer_epochs: usize,
    pub balancing: Balancing,
    pub proxy_update: ProxyUpdate,
    /// Overrides the natural epoch length, cycling the mixer as needed.
    pub iterations_per_epoch: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sgd: SgdConfig::default(),
            gamma: 0.1,
            step_epochs: 3,
            epochs: 9,
            batch_size: 60,
            freeze_featurizer_epochs: 0,
            balancing: Balancing::Uniform,
            proxy_update: ProxyUpdate::Compensated,
            iterations_per_epoch: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        if self.step_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("step_epochs and batch_size must be positive".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Config("gamma must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_schedule(self.sgd.lr, epoch, self.gamma, self.step_epochs)
    }

    /// Batches of one epoch over `sizes`.
    pub fn epoch_batches(&self, sizes: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<Vec<RecordRef>>> {
        let draw = |rng: &mut ChaCha8Rng| match self.balancing {
            Balancing::Uniform => mix_batches(sizes, self.batch_size, rng),
            Balancing::SizeProportional => size_proportional_batches(sizes, self.batch_size, rng),
        };
        let mut batches = draw(rng)?;
        if let Some(n) = self.iterations_per_epoch {
            while batches.len() < n {
                batches.extend(draw(rng)?);
            }
            batches.truncate(n);
        }
        Ok(batches)
    }
}

/// Losses of one step plus the learning rate used.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub losses: Vec<(String, f64)>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean loss per task over the steps where the task was present.
    pub task_losses: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    /// `epoch<TAB>task<TAB>loss` lines.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            for (task, loss) in &e.task_losses {
                out.push_str(&format!("{}\t{}\t{:.6}\n", e.epoch, task, loss));
            }
        }
        out
    }
}

/// Optimizer state owned by one training loop.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    dense: SgdState<T>,
    proxy_velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Trainer<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Trainer<T> {
    pub fn new() -> Self {
        Trainer {
            dense: SgdState::new(),
            proxy_velocity: Vec::new(),
        }
    }

    /// One forward/backward/update cycle at learning rate `lr`. Gradients
    /// are zeroed afterwards.
    pub fn train_step(
        &mut self,
        model: &mut MultiTaskModel<T>,
        batch: &Batch<T>,
        sgd: &SgdConfig,
        lr: f64,
        proxy_update: ProxyUpdate,
        freeze_featurizer: bool,
    ) -> Result<StepLog> {
        let step_cfg = SgdConfig { lr, ..*sgd };
        let mut rng = model.rng.clone();
        let pass = model.accumulate_gradients(batch, &mut rng);
        model.rng = rng;
        let pass = match pass {
            Ok(p) => p,
            Err(e) => {
                model.zero_grad();
                return Err(e);
            }
        };

        let result = self.apply(model, &pass.proxy_grads, &step_cfg, proxy_update, freeze_featurizer);
        model.zero_grad();
        result?;
        Ok(StepLog {
            losses: pass.losses,
            lr,
        })
    }

    fn apply(
        &mut self,
        model: &mut MultiTaskModel<T>,
        proxy_grads: &[crate::model::ProxyGrad<T>],
        cfg: &SgdConfig,
        proxy_update: ProxyUpdate,
        freeze_featurizer: bool,
    ) -> Result<()> {
        let hidden = model.featurizer.len() - 1;
        for (i, layer) in model.featurizer.iter_mut().enumerate() {
            if freeze_featurizer && i < hidden {
                continue;
            }
            for p in layer.params_mut() {
                self.dense.step(p, cfg)?;
            }
        }
        self.dense.step(&mut model.norm_gamma, cfg)?;
        self.dense.step(&mut model.norm_beta, cfg)?;

        match proxy_update {
            ProxyUpdate::Compensated => {
                let eff = momentum_compensated_lr(cfg.lr, cfg.momentum)?;
                for pg in proxy_grads {
                    model.heads[pg.task].scatter_update(&pg.rows, &pg.grad, eff, cfg.weight_decay)?;
                }
            }
            ProxyUpdate::DenseMomentum => {
                if self.proxy_velocity.len() != model.heads.len() {
                    self.proxy_velocity = vec![None; model.heads.len()];
                }
                for (t, head) in model.heads.iter_mut().enumerate() {
                    let (m, d) = (head.num_classes(), head.dim());
                    let mut dense = Tensor::zeros(&[m, d]);
                    for pg in proxy_grads.iter().filter(|pg| pg.task == t) {
                        for (i, &r) in pg.rows.iter().enumerate() {
                            dense.row_mut(r).copy_from_slice(pg.grad.row(i));
                        }
                    }
                    let v = self.proxy_velocity[t].get_or_insert_with(|| Tensor::zeros(&[m, d]));
                    let name = format!("proxies.{}", head.task());
                    dense_sgd_step(&name, head.rows_mut(), &dense, v, cfg)?;
                }
            }
        }
        Ok(())
    }
}

/// Trains `model` on `datasets` for `cfg.epochs` epochs.
pub fn train<T: Scalar>(
    model: &mut MultiTaskModel<T>,
    datasets: &[LabeledDataset],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    train_with(model, datasets, cfg, |_, _| {})
}

/// As [`train`], calling `on_epoch` after every epoch.
pub fn train_with<T: Scalar, F: FnMut(&MultiTaskModel<T>, &EpochLog)>(
    model: &mut MultiTaskModel<T>,
    datasets: &[LabeledDataset],
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainLog> {
    cfg.validate()?;
    if datasets.is_empty() {
        return Err(Error::Config("training needs at least one dataset".into()));
    }
    for ds in datasets {
        if ds.feature_dim != model.config.feature_dim {
            return Err(Error::Config(format!(
                "dataset {} has feature_dim {}, model expects {}",
                ds.name, ds.feature_dim, model.config.feature_dim
            )));
        }
        for spec in &model.tasks {
            if let Some(m) = ds.num_classes(&spec.name) {
                if m != spec.num_classes {
                    return Err(Error::Config(format!(
                        "dataset {} has {m} classes for {}, model expects {}",
                        ds.name, spec.name, spec.num_classes
                    )));
                }
            }
        }
    }
    let sizes: Vec<usize> = datasets.iter().map(LabeledDataset::len).collect();
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trainer = Trainer::new();
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let freeze = epoch < cfg.freeze_featurizer_epochs;
        let mut sums: Vec<(f64, usize)> = vec![(0.0, 0); model.tasks.len()];
        for refs in cfg.epoch_batches(&sizes, &mut data_rng)? {
            let batch = Batch::assemble(datasets, &refs, &model.tasks)?;
            let step = match trainer.train_step(model, &batch, &cfg.sgd, lr, cfg.proxy_update, freeze) {
                Err(Error::EmptyBatch) => continue,
                other => other?,
            };
            for (name, loss) in step.losses {
                let t = model.task_index(&name).expect("loss names a model task");
                sums[t].0 += loss;
                sums[t].1 += 1;
            }
        }
        let task_losses = model
            .tasks
            .iter()
            .zip(&sums)
            .filter(|(_, s)| s.1 > 0)
            .map(|(t, s)| (t.name.clone(), s.0 / s.1 as f64))
            .collect();
        let entry = EpochLog { epoch, lr, task_losses };
        on_epoch(model, &entry);
        log.epochs.push(entry);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_flashlight_like, GenSpec, FLASHLIGHT_CLASS};
    use crate::model::{ModelConfig, TaskSpec, Variant};

    fn small_data(classes: usize) -> LabeledDataset {
        gen_flashlight_like(&GenSpec {
            classes,
            samples_per_class: 30,
            feature_dim: 6,
            noise: 0.05,
            ..GenSpec::flashlight_default()
        })
        .unwrap()
    }

    fn small_model(classes: usize, samples: usize) -> MultiTaskModel<f32> {
        let cfg = ModelConfig {
            feature_dim: 6,
            hidden_dims: vec![8],
            embed_dim: 16,
            groups: 4,
            seed: 3,
            ..ModelConfig::default()
        };
        MultiTaskModel::new(cfg, vec![TaskSpec::subsampled(FLASHLIGHT_CLASS, classes, samples)]).unwrap()
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 20,
            seed: 9,
            ..TrainConfig::default()
        }
    }

    fn snapshot(m: &MultiTaskModel<f32>) -> Vec<Vec<f32>> {
        m.dense_params()
            .map(|p| p.value.data().to_vec())
            .chain(m.heads().iter().map(|h| h.rows().data().to_vec()))
            .collect()
    }

    #[test]
    fn zero_lr_leaves_parameters_bit_identical() {
        let data = [small_data(5)];
        let mut m = small_model(5, 5);
        let before = snapshot(&m);
        let mut c = cfg(2);
        c.sgd.lr = 0.0;
        train(&mut m, &data, &c).unwrap();
        assert_eq!(snapshot(&m), before);
    }

    #[test]
    fn compensated_step_only_touches_sampled_rows() {
        let data = [small_data(20)];
        let mut m = small_model(20, 6);
        let refs: Vec<RecordRef> = (0..4).map(|i| RecordRef { dataset: 0, index: i * 30 }).collect();
        let batch = Batch::assemble(&data, &refs, m.tasks()).unwrap();
        let before = m.heads()[0].rows().clone();
        let mut trainer = Trainer::new();
        trainer
            .train_step(&mut m, &batch, &SgdConfig::default(), 0.1, ProxyUpdate::Compensated, false)
            .unwrap();
        let touched = m.heads()[0].touched().to_vec();
        assert_eq!(touched.len(), 6);
        for r in 0..20 {
            let same = m.heads()[0].rows().row(r) == before.row(r);
            assert_eq!(same, !touched.contains(&r), "row {r}");
        }
    }

    #[test]
    fn nine_epoch_schedule() {
        let data = [small_data(3)];
        let mut m = small_model(3, 3);
        let mut c = cfg(9);
        c.sgd.lr = 0.08;
        let log = train(&mut m, &data, &c).unwrap();
        let lrs: Vec<f64> = log.epochs.iter().map(|e| e.lr).collect();
        let expected: Vec<f64> = (0..9).map(|e| 0.08 * 0.1f64.powi(e / 3)).collect();
        assert_eq!(lrs.len(), 9);
        for (a, b) in lrs.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15, "{lrs:?}");
        }
    }

    #[test]
    fn two_classes_converge_and_separate() {
        let data = [small_data(2)];
        let mut m = small_model(2, 2);
        m.config.variant = Variant::SmGn;
        let log = train(&mut m, &data, &cfg(6)).unwrap();
        let first = log.epochs[0].task_losses[0].1;
        let last = log.epochs.last().unwrap().task_losses[0].1;
        assert!(last < 0.2 * first, "{first} -> {last}");

        let x = data[0].feature_matrix::<f32>(&(0..data[0].len()).collect::<Vec<_>>()).unwrap();
        let e = m.embed(&x).unwrap();
        let center = |c: usize| -> Vec<f32> {
            let rows: Vec<usize> = (0..data[0].len()).filter(|&i| data[0].label(i, FLASHLIGHT_CLASS) == Some(c)).collect();
            (0..16).map(|d| rows.iter().map(|&i| e.row(i)[d]).sum::<f32>() / rows.len() as f32).collect()
        };
        let (c0, c1) = (center(0), center(1));
        let dot = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f32>();
        for i in 0..data[0].len() {
            let own = data[0].label(i, FLASHLIGHT_CLASS).unwrap();
            let (s0, s1) = (dot(e.row(i), &c0), dot(e.row(i), &c1));
            assert_eq!(if s0 > s1 { 0 } else { 1 }, own, "record {i}");
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = [small_data(6)];
        let run = || {
            let mut m = small_model(6, 6);
            let log = train(&mut m, &data, &cfg(2)).unwrap();
            let mut bytes = Vec::new();
            m.write_checkpoint(&mut bytes).unwrap();
            (bytes, log)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn frozen_epochs_keep_hidden_layers() {
        let data = [small_data(4)];
        let mut m = small_model(4, 4);
        let hidden = m.featurizer()[0].weight.value.clone();
        let last = m.featurizer()[1].weight.value.clone();
        let mut c = cfg(1);
        c.freeze_featurizer_epochs = 1;
        train(&mut m, &data, &c).unwrap();
        assert_eq!(m.featurizer()[0].weight.value, hidden);
        assert_ne!(m.featurizer()[1].weight.value, last);
    }

    #[test]
    fn dense_momentum_moves_rows_after_they_leave_the_sample() {
        let data = [small_data(20)];
        let mut m = small_model(20, 4);
        m.config.variant = Variant::SmGn;
        let mut trainer = Trainer::new();
        let step = |m: &mut MultiTaskModel<f32>, trainer: &mut Trainer<f32>, rows: &[usize]| {
            let refs: Vec<RecordRef> = rows.iter().map(|&c| RecordRef { dataset: 0, index: c * 30 }).collect();
            let batch = Batch::assemble(&data, &refs, m.tasks()).unwrap();
            trainer
                .train_step(m, &batch, &SgdConfig::default(), 0.1, ProxyUpdate::DenseMomentum, false)
                .unwrap();
        };
        step(&mut m, &mut trainer, &[0, 1, 2, 3]);
        let after_first = m.heads()[0].rows().clone();
        step(&mut m, &mut trainer, &[4, 5, 6, 7]);
        assert_ne!(m.heads()[0].rows().row(0), after_first.row(0));
    }
}
