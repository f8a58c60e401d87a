//! Flat `key = value` run configuration shared by every CLI stage.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{
    gen_flashlight_like, gen_lens_like, gen_shopping_like, GenSpec, LabeledDataset, DOMAIN, FLASHLIGHT_CLASS,
    LENS_CATEGORY, STL_INSTANCE, STL_PRODUCT,
};
use crate::error::{Error, Result};
use crate::eval::Metric;
use crate::model::{parse, ModelConfig, TaskSpec};
use crate::train::TrainConfig;

/// Environment variable that overrides `seed`.
pub const SEED_ENV: &str = "UNEMBED_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DatasetKind {
    Flashlight,
    Lens,
    Shopping,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 3] = [DatasetKind::Flashlight, DatasetKind::Lens, DatasetKind::Shopping];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Flashlight => "flashlight",
            DatasetKind::Lens => "lens",
            DatasetKind::Shopping => "shopping",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.mtds", self.as_str())
    }

    pub fn eval_file_name(self) -> String {
        format!("{}_eval.mtds", self.as_str())
    }

    pub fn default_spec(self) -> GenSpec {
        match self {
            DatasetKind::Flashlight => GenSpec::flashlight_default(),
            DatasetKind::Lens => GenSpec::lens_default(),
            DatasetKind::Shopping => GenSpec::shopping_default(),
        }
    }

    pub fn generate(self, spec: &GenSpec) -> Result<LabeledDataset> {
        let mut ds = match self {
            DatasetKind::Flashlight => gen_flashlight_like(spec)?,
            DatasetKind::Lens => gen_lens_like(spec)?,
            DatasetKind::Shopping => gen_shopping_like(spec)?,
        };
        ds.name = self.as_str().to_string();
        Ok(ds)
    }

    /// The task retrieval is evaluated on for this dataset.
    pub fn eval_task(self) -> &'static str {
        match self {
            DatasetKind::Flashlight => FLASHLIGHT_CLASS,
            DatasetKind::Lens => LENS_CATEGORY,
            DatasetKind::Shopping => STL_INSTANCE,
        }
    }

    /// Parses a comma-separated list such as `flashlight,lens`.
    pub fn parse_list(s: &str) -> Result<Vec<DatasetKind>> {
        let mut out: Vec<DatasetKind> = s.split(',').map(|d| d.trim().parse()).collect::<Result<_>>()?;
        out.sort();
        out.dedup();
        Ok(out)
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DatasetKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown dataset {s:?}; expected flashlight, lens or shopping")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskSettings {
    pub subsampled: bool,
    pub num_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub num_queries: usize,
    /// Queries come only from this domain on datasets that carry domain
    /// tags.
    pub query_domain: Option<String>,
    pub metrics: Vec<Metric>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tasks: BTreeMap<String, TaskSettings>,
    pub gen: BTreeMap<DatasetKind, GenSpec>,
    /// Samples per class of the held-out evaluation files; 0 skips them.
    pub held_out_samples_per_class: usize,
    pub eval: EvalSettings,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let tasks = [
            (FLASHLIGHT_CLASS, true, 75),
            (STL_PRODUCT, false, 20),
            (STL_INSTANCE, true, 100),
            (LENS_CATEGORY, false, 40),
        ]
        .into_iter()
        .map(|(n, subsampled, num_samples)| (n.to_string(), TaskSettings { subsampled, num_samples }))
        .collect();
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            tasks,
            gen: DatasetKind::ALL.into_iter().map(|k| (k, k.default_spec())).collect(),
            held_out_samples_per_class: 0,
            eval: EvalSettings {
                num_queries: 300,
                query_domain: Some("camera".into()),
                metrics: Metric::parse_list("p1,avgp20,r1,r10").expect("default metrics parse"),
                seed: 7,
            },
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("run"),
        }
    }
}

fn set_gen(spec: &mut GenSpec, field: &str, key: &str, value: &str) -> Result<bool> {
    match field {
        "classes" => spec.classes = parse(key, value)?,
        "samples_per_class" => spec.samples_per_class = parse(key, value)?,
        "feature_dim" => spec.feature_dim = parse(key, value)?,
        "noise" => spec.noise = parse(key, value)?,
        "seed" => spec.seed = parse(key, value)?,
        "domains" => spec.domains = parse(key, value)?,
        "domain_shift" => spec.domain_shift = parse(key, value)?,
        "instances_per_product" => spec.instances_per_product = parse(key, value)?,
        "instance_noise" => spec.instance_noise = parse(key, value)?,
        "label_noise" => spec.label_noise = parse(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn gen_kv(spec: &GenSpec) -> Vec<(&'static str, String)> {
    vec![
        ("classes", spec.classes.to_string()),
        ("samples_per_class", spec.samples_per_class.to_string()),
        ("feature_dim", spec.feature_dim.to_string()),
        ("noise", spec.noise.to_string()),
        ("seed", spec.seed.to_string()),
        ("domains", spec.domains.to_string()),
        ("domain_shift", spec.domain_shift.to_string()),
        ("instances_per_product", spec.instances_per_product.to_string()),
        ("instance_noise", spec.instance_noise.to_string()),
        ("label_noise", spec.label_noise.to_string()),
    ]
}

impl RunConfig {
    /// Applies one assignment. Unknown keys are configuration errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let t = &mut self.train;
        match key {
            "seed" => {
                let s: u64 = parse(key, value)?;
                self.model.seed = s;
                t.seed = s;
            }
            "lr" => t.sgd.lr = parse(key, value)?,
            "momentum" => t.sgd.momentum = parse(key, value)?,
            "weight_decay" => t.sgd.weight_decay = parse(key, value)?,
            "gamma" => t.gamma = parse(key, value)?,
            "step_epochs" => t.step_epochs = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "freeze_featurizer_epochs" => t.freeze_featurizer_epochs = parse(key, value)?,
            "balancing" => t.balancing = value.parse()?,
            "proxy_update" => t.proxy_update = value.parse()?,
            "iterations_per_epoch" => {
                t.iterations_per_epoch = match value {
                    "auto" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "held_out_samples_per_class" => self.held_out_samples_per_class = parse(key, value)?,
            "eval.num_queries" => self.eval.num_queries = parse(key, value)?,
            "eval.query_domain" => {
                self.eval.query_domain = match value {
                    "none" | "" => None,
                    v => Some(v.to_string()),
                }
            }
            "eval.metrics" => self.eval.metrics = Metric::parse_list(value)?,
            "eval.seed" => self.eval.seed = parse(key, value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => {
                if self.model.set(key, value)? {
                    return Ok(());
                }
                let unknown = || Error::Config(format!("unknown config key {key:?}"));
                if let Some(rest) = key.strip_prefix("task.") {
                    let (name, field) = rest.rsplit_once('.').ok_or_else(unknown)?;
                    let entry = self.tasks.entry(name.to_string()).or_insert(TaskSettings {
                        subsampled: false,
                        num_samples: 1,
                    });
                    match field {
                        "subsampled" => entry.subsampled = parse(key, value)?,
                        "num_samples" => entry.num_samples = parse(key, value)?,
                        _ => return Err(unknown()),
                    }
                } else if let Some(rest) = key.strip_prefix("gen.") {
                    let (kind, field) = rest.split_once('.').ok_or_else(unknown)?;
                    let kind: DatasetKind = kind.parse()?;
                    let spec = self.gen.get_mut(&kind).expect("every kind has a spec");
                    if !set_gen(spec, field, key, value)? {
                        return Err(unknown());
                    }
                } else {
                    return Err(unknown());
                }
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k.trim(), v).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", n + 1)),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    /// Applies `UNEMBED_SEED` if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.set("seed", &v)
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not a valid seed")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        for spec in self.gen.values() {
            spec.validate()?;
        }
        if self.eval.metrics.is_empty() {
            return Err(Error::Config("eval.metrics is empty".into()));
        }
        Ok(())
    }

    /// Every effective setting, one `key = value` per line, in a form
    /// [`parse_str`](Self::parse_str) reads back to an equal config.
    pub fn to_text(&self) -> String {
        let mut kv: Vec<(String, String)> = Vec::new();
        for (k, v) in self.model.to_kv() {
            kv.push((k, v));
        }
        let t = &self.train;
        kv.extend([
            ("lr".into(), t.sgd.lr.to_string()),
            ("momentum".into(), t.sgd.momentum.to_string()),
            ("weight_decay".into(), t.sgd.weight_decay.to_string()),
            ("gamma".into(), t.gamma.to_string()),
            ("step_epochs".into(), t.step_epochs.to_string()),
            ("epochs".into(), t.epochs.to_string()),
            ("batch_size".into(), t.batch_size.to_string()),
            ("freeze_featurizer_epochs".into(), t.freeze_featurizer_epochs.to_string()),
            ("balancing".into(), t.balancing.to_string()),
            ("proxy_update".into(), t.proxy_update.to_string()),
            (
                "iterations_per_epoch".into(),
                t.iterations_per_epoch.map_or("auto".into(), |n| n.to_string()),
            ),
        ]);
        for (name, s) in &self.tasks {
            kv.push((format!("task.{name}.subsampled"), s.subsampled.to_string()));
            kv.push((format!("task.{name}.num_samples"), s.num_samples.to_string()));
        }
        for (kind, spec) in &self.gen {
            for (field, v) in gen_kv(spec) {
                kv.push((format!("gen.{kind}.{field}"), v));
            }
        }
        let metrics: Vec<String> = self.eval.metrics.iter().map(ToString::to_string).collect();
        kv.extend([
            ("held_out_samples_per_class".into(), self.held_out_samples_per_class.to_string()),
            ("eval.num_queries".into(), self.eval.num_queries.to_string()),
            (
                "eval.query_domain".into(),
                self.eval.query_domain.clone().unwrap_or_else(|| "none".into()),
            ),
            ("eval.metrics".into(), metrics.join(",")),
            ("eval.seed".into(), self.eval.seed.to_string()),
            ("data_dir".into(), self.data_dir.display().to_string()),
            ("out_dir".into(), self.out_dir.display().to_string()),
        ]);
        kv.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Task heads for `datasets`: every labeled task they carry, in
    /// first-seen order, with subsampling taken from `task.*` settings.
    pub fn task_specs(&self, datasets: &[LabeledDataset]) -> Result<Vec<TaskSpec>> {
        let mut specs: Vec<TaskSpec> = Vec::new();
        for ds in datasets {
            for info in ds.tasks.iter().filter(|t| t.name != DOMAIN) {
                if let Some(existing) = specs.iter().find(|s| s.name == info.name) {
                    if existing.num_classes != info.num_classes {
                        return Err(Error::Config(format!(
                            "task {} has {} classes in one dataset and {} in {}",
                            info.name, existing.num_classes, info.num_classes, ds.name
                        )));
                    }
                    continue;
                }
                let spec = match self.tasks.get(&info.name) {
                    Some(s) if s.subsampled => TaskSpec::subsampled(&info.name, info.num_classes, s.num_samples),
                    _ => TaskSpec::full(&info.name, info.num_classes),
                };
                spec.validate()?;
                specs.push(spec);
            }
        }
        Ok(specs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;
    use crate::train::Balancing;

    #[test]
    fn parses_overrides_and_comments() {
        let cfg = RunConfig::parse_str(
            "# run\nvariant = sm_gn\nepochs = 2 # short\n\nbalancing = proportional\n\
             task.flashlight_class.num_samples = 30\ngen.lens.domain_shift = 0.5\nseed = 9\n",
        )
        .unwrap();
        assert_eq!(cfg.model.variant, Variant::SmGn);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.balancing, Balancing::SizeProportional);
        assert_eq!(cfg.tasks[FLASHLIGHT_CLASS].num_samples, 30);
        assert_eq!(cfg.gen[&DatasetKind::Lens].domain_shift, 0.5);
        assert_eq!((cfg.model.seed, cfg.train.seed), (9, 9));
    }

    #[test]
    fn unknown_key_names_the_line() {
        let err = RunConfig::parse_str("epochs = 1\n\nlearning_rate = 0.1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3") && msg.contains("learning_rate"), "{msg}");
        assert_eq!(err.exit_code(), 1);
        assert!(RunConfig::parse_str("gen.flashlight.colour = 1").is_err());
        assert!(RunConfig::parse_str("task.x.rate = 1").is_err());
        assert!(RunConfig::parse_str("no equals sign").is_err());
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("lr", "0.0123").unwrap();
        cfg.set("iterations_per_epoch", "17").unwrap();
        cfg.set("eval.query_domain", "none").unwrap();
        cfg.set("hidden_dims", "32,16").unwrap();
        let back = RunConfig::parse_str(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(RunConfig::parse_str(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
    }

    #[test]
    fn task_specs_follow_settings() {
        let cfg = RunConfig::default();
        let fl = DatasetKind::Flashlight.generate(&cfg.gen[&DatasetKind::Flashlight]).unwrap();
        let sh = DatasetKind::Shopping.generate(&cfg.gen[&DatasetKind::Shopping]).unwrap();
        let specs = cfg.task_specs(&[fl, sh]).unwrap();
        let names: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, vec![FLASHLIGHT_CLASS, STL_PRODUCT, STL_INSTANCE]);
        assert!(specs[0].subsampled && !specs[1].subsampled && specs[2].subsampled);
    }

    #[test]
    fn dataset_list_parsing() {
        assert_eq!(
            DatasetKind::parse_list("shopping,flashlight").unwrap(),
            vec![DatasetKind::Flashlight, DatasetKind::Shopping]
        );
        assert!(DatasetKind::parse_list("flashlight,imagenet").is_err());
    }
}
