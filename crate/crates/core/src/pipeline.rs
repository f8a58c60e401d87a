//! End-to-end helpers shared by the command-line stages and experiments:
//! dataset generation, model construction, training and held-out retrieval
//! evaluation driven by a [`RunConfig`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DatasetKind, RunConfig};
use crate::data::{split_query_corpus, LabeledDataset, QuerySplit, DOMAIN};
use crate::error::{Error, Result};
use crate::eval::{evaluate, embed_dataset, EvalReport, Mode};
use crate::model::{ModelConfig, MultiTaskModel};
use crate::scalar::Scalar;
use crate::train::{train, TrainLog};

/// Stream index of held-out evaluation samples.
pub const HELD_OUT_STREAM: u64 = 1;

pub fn training_set(cfg: &RunConfig, kind: DatasetKind) -> Result<LabeledDataset> {
    kind.generate(&cfg.gen[&kind])
}

/// Fresh samples around the training centers.
pub fn held_out_set(cfg: &RunConfig, kind: DatasetKind, samples_per_class: usize) -> Result<LabeledDataset> {
    let spec = cfg.gen[&kind].held_out(HELD_OUT_STREAM, samples_per_class);
    let mut ds = kind.generate(&spec)?;
    ds.name = format!("{kind}_eval");
    Ok(ds)
}

/// A model whose input width and heads match `datasets`.
pub fn build_model<T: Scalar>(cfg: &RunConfig, datasets: &[LabeledDataset]) -> Result<MultiTaskModel<T>> {
    let first = datasets
        .first()
        .ok_or_else(|| Error::Config("no datasets to build a model for".into()))?;
    let model_cfg = ModelConfig {
        feature_dim: first.feature_dim,
        ..cfg.model.clone()
    };
    MultiTaskModel::new(model_cfg, cfg.task_specs(datasets)?)
}

pub fn build_and_train<T: Scalar>(
    cfg: &RunConfig,
    datasets: &[LabeledDataset],
) -> Result<(MultiTaskModel<T>, TrainLog)> {
    let mut model = build_model(cfg, datasets)?;
    let log = train(&mut model, datasets, &cfg.train)?;
    Ok((model, log))
}

/// Query/corpus split of `dataset` under `task`, restricting queries to
/// `eval.query_domain` when the dataset carries domain tags.
pub fn eval_split(cfg: &RunConfig, dataset: &LabeledDataset, task: &str) -> Result<QuerySplit> {
    let domain = cfg
        .eval
        .query_domain
        .as_deref()
        .filter(|_| dataset.task_index(DOMAIN).is_some());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval.seed);
    let nq = cfg.eval.num_queries.min(dataset.len() / 2);
    split_query_corpus(dataset, task, nq, domain, &mut rng)
}

/// Retrieval report of `model` on `dataset` under `task`.
pub fn evaluate_on<T: Scalar>(
    cfg: &RunConfig,
    model: &MultiTaskModel<T>,
    dataset: &LabeledDataset,
    task: &str,
    mode: Mode,
) -> Result<EvalReport> {
    let split = eval_split(cfg, dataset, task)?;
    let set = embed_dataset(model, dataset)?;
    evaluate(&set, dataset, &split, task, &cfg.eval.metrics, mode)
}
