//! Synthetic multi-domain datasets, batch mixing, and query/corpus splits.
//!
//! Three generators stand in for the three training corpora: a broad
//! many-class set (`flashlight`), a multi-domain set whose samples carry a
//! per-domain offset (`lens`), and a two-level product/instance set
//! (`shopping`). Every record carries one label slot per dataset task, `-1`
//! meaning absent.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FLASHLIGHT_CLASS: &str = "flashlight_class";
pub const STL_PRODUCT: &str = "stl_product";
pub const STL_INSTANCE: &str = "stl_instance";
pub const LENS_CATEGORY: &str = "lens_category";
/// Metadata label slot holding the capture domain of lens-like records.
pub const DOMAIN: &str = "domain";

/// Label value for a task a record has no data for.
pub const ABSENT: i64 = -1;

const DATASET_MAGIC: &[u8; 4] = b"MTDS";
const DATASET_VERSION: u32 = 1;

/// Name of domain `i`; domain 0 is the camera domain queries are drawn from.
pub fn domain_name(i: usize) -> String {
    match i {
        0 => "camera".into(),
        1 => "catalog".into(),
        2 => "pin".into(),
        n => format!("domain{n}"),
    }
}

pub fn domain_index(name: &str) -> Option<usize> {
    match name {
        "camera" => Some(0),
        "catalog" => Some(1),
        "pin" => Some(2),
        other => other.strip_prefix("domain")?.parse().ok(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskInfo {
    pub name: String,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: u64,
    pub features: Vec<f32>,
    /// One entry per dataset task, in task order.
    pub labels: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    pub feature_dim: usize,
    pub tasks: Vec<TaskInfo>,
    pub records: Vec<Record>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn task_index(&self, task: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.name == task)
    }

    pub fn num_classes(&self, task: &str) -> Option<usize> {
        self.task_index(task).map(|i| self.tasks[i].num_classes)
    }

    /// Label of record `i` under `task`, `None` when absent or unknown.
    pub fn label(&self, i: usize, task: &str) -> Option<usize> {
        let t = self.task_index(task)?;
        let l = self.records[i].labels[t];
        (l >= 0).then_some(l as usize)
    }

    /// Checks id uniqueness, feature widths, and label ranges.
    pub fn validate(&self) -> Result<()> {
        let mut ids = std::collections::HashSet::with_capacity(self.records.len());
        for r in &self.records {
            if !ids.insert(r.id) {
                return Err(Error::Format(format!("{}: duplicate id {}", self.name, r.id)));
            }
            if r.features.len() != self.feature_dim {
                return Err(Error::Format(format!(
                    "{}: record {} has {} features, expected {}",
                    self.name,
                    r.id,
                    r.features.len(),
                    self.feature_dim
                )));
            }
            if r.labels.len() != self.tasks.len() {
                return Err(Error::Format(format!("{}: record {} label count", self.name, r.id)));
            }
            for (t, &l) in self.tasks.iter().zip(&r.labels) {
                if l != ABSENT && !(0..t.num_classes as i64).contains(&l) {
                    return Err(Error::Format(format!(
                        "{}: record {} label {l} outside [0, {}) for {}",
                        self.name, r.id, t.num_classes, t.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Features of the selected records as an `N×F` tensor.
    pub fn feature_matrix<T: Scalar>(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(indices.len() * self.feature_dim);
        for &i in indices {
            data.extend(self.records[i].features.iter().map(|&v| T::of_f32(v)));
        }
        Tensor::new(&[indices.len(), self.feature_dim], data)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&(self.feature_dim as u32).to_le_bytes())?;
        w.write_all(&(self.tasks.len() as u32).to_le_bytes())?;
        for t in &self.tasks {
            w.write_all(&(t.name.len() as u16).to_le_bytes())?;
            w.write_all(t.name.as_bytes())?;
            w.write_all(&(t.num_classes as u64).to_le_bytes())?;
        }
        w.write_all(&(self.records.len() as u64).to_le_bytes())?;
        for r in &self.records {
            w.write_all(&r.id.to_le_bytes())?;
            for &l in &r.labels {
                w.write_all(&l.to_le_bytes())?;
            }
            for &f in &r.features {
                w.write_all(&f.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(name: impl Into<String>, mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format(format!("bad dataset magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let feature_dim = read_u32(&mut r)? as usize;
        let task_count = read_u32(&mut r)? as usize;
        let mut tasks = Vec::with_capacity(task_count);
        for _ in 0..task_count {
            let len = read_u16(&mut r)? as usize;
            let mut buf = vec![0u8; len];
            read_exact(&mut r, &mut buf)?;
            let name = String::from_utf8(buf).map_err(|e| Error::Format(format!("task name: {e}")))?;
            let num_classes = read_u64(&mut r)? as usize;
            tasks.push(TaskInfo { name, num_classes });
        }
        let count = read_u64(&mut r)? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let id = read_u64(&mut r)?;
            let labels = (0..task_count).map(|_| read_u64(&mut r).map(|v| v as i64)).collect::<Result<_>>()?;
            let features = (0..feature_dim).map(|_| read_f32(&mut r)).collect::<Result<_>>()?;
            records.push(Record { id, features, labels });
        }
        let ds = LabeledDataset {
            name: name.into(),
            feature_dim,
            tasks,
            records,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    /// Loads an MTDS file; the dataset is named after the file stem.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::read_from(name, bytes.as_slice())
    }
}

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Format(format!("truncated input: {e}")))
}

pub(crate) fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f32<R: Read>(r: &mut R) -> Result<f32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(f32::from_le_bytes(b))
}

/// Parameters of one synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GenSpec {
    pub classes: usize,
    /// Per class, or per class and domain for lens-like data, or per
    /// instance for shopping-like data.
    pub samples_per_class: usize,
    pub feature_dim: usize,
    /// Standard deviation of the per-sample Gaussian noise.
    pub noise: f64,
    /// Drives class centers, domain offsets and instance centers.
    pub seed: u64,
    /// Selects an independent draw of samples around the same centers, so
    /// held-out sets share classes with training sets.
    pub sample_stream: u64,
    pub domains: usize,
    pub domain_shift: f64,
    pub instances_per_product: usize,
    pub instance_noise: f64,
    /// Probability of replacing a label by a uniformly random class.
    pub label_noise: f64,
}

impl GenSpec {
    pub fn flashlight_default() -> Self {
        GenSpec {
            classes: 150,
            samples_per_class: 40,
            feature_dim: DEFAULT_FEATURE_DIM,
            noise: DEFAULT_NOISE,
            seed: 11,
            sample_stream: 0,
            domains: 1,
            domain_shift: 0.0,
            instances_per_product: 1,
            instance_noise: 0.0,
            label_noise: 0.0,
        }
    }

    pub fn lens_default() -> Self {
        GenSpec {
            classes: 40,
            samples_per_class: 60,
            domains: 3,
            domain_shift: 1.5,
            seed: 12,
            ..Self::flashlight_default()
        }
    }

    pub fn shopping_default() -> Self {
        GenSpec {
            classes: 20,
            samples_per_class: 6,
            instances_per_product: 10,
            instance_noise: 0.25,
            seed: 13,
            ..Self::flashlight_default()
        }
    }

    /// Same centers, fresh samples.
    pub fn held_out(&self, stream: u64, samples_per_class: usize) -> Self {
        GenSpec {
            sample_stream: stream,
            samples_per_class,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.samples_per_class == 0 || self.feature_dim == 0 {
            return Err(Error::Config("generator counts must be at least 1".into()));
        }
        if !(self.noise > 0.0) {
            return Err(Error::Config("generator noise must be positive".into()));
        }
        if self.domains == 0 || self.instances_per_product == 0 {
            return Err(Error::Config("domains and instances_per_product must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::Config("label_noise outside [0, 1]".into()));
        }
        Ok(())
    }

    fn center_rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    fn sample_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1 + self.sample_stream);
        rng
    }

    fn id_base(&self, kind: u64) -> u64 {
        (kind << 48) | (self.sample_stream << 32)
    }
}

pub const DEFAULT_FEATURE_DIM: usize = 64;
pub const DEFAULT_NOISE: f64 = 0.25;

fn uniform_centers(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random::<f64>()).collect())
        .collect()
}

fn gaussian(dim: usize, std: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

fn noisy_sample(center: &[f64], offset: Option<&[f64]>, std: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    center
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let z: f64 = StandardNormal.sample(rng);
            (c + offset.map_or(0.0, |o| o[i]) + z * std) as f32
        })
        .collect()
}

fn corrupt(label: usize, classes: usize, p: f64, rng: &mut ChaCha8Rng) -> i64 {
    if p > 0.0 && rng.random::<f64>() < p {
        rng.random_range(0..classes) as i64
    } else {
        label as i64
    }
}

/// Many classes, one domain, one label per record.
pub fn gen_flashlight_like(spec: &GenSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let centers = uniform_centers(spec.classes, spec.feature_dim, &mut spec.center_rng());
    let mut rng = spec.sample_rng();
    let base = spec.id_base(1);
    let mut records = Vec::with_capacity(spec.classes * spec.samples_per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let features = noisy_sample(center, None, spec.noise, &mut rng);
            let label = corrupt(c, spec.classes, spec.label_noise, &mut rng);
            records.push(Record {
                id: base + records.len() as u64,
                features,
                labels: vec![label],
            });
        }
    }
    Ok(LabeledDataset {
        name: "flashlight".into(),
        feature_dim: spec.feature_dim,
        tasks: vec![TaskInfo {
            name: FLASHLIGHT_CLASS.into(),
            num_classes: spec.classes,
        }],
        records,
    })
}

/// Per-domain offsets of norm `domain_shift`, shared across classes.
pub fn domain_offsets(spec: &GenSpec) -> Vec<Vec<f64>> {
    let mut rng = spec.center_rng();
    let _ = uniform_centers(spec.classes, spec.feature_dim, &mut rng);
    (0..spec.domains)
        .map(|_| {
            let dir = gaussian(spec.feature_dim, 1.0, &mut rng);
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            dir.iter().map(|v| v / norm * spec.domain_shift).collect()
        })
        .collect()
}

/// Classes observed from several domains; every class has
/// `samples_per_class` records in every domain.
pub fn gen_lens_like(spec: &GenSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    if spec.domains < 2 {
        return Err(Error::Config("lens-like data needs at least 2 domains".into()));
    }
    let mut crng = spec.center_rng();
    let centers = uniform_centers(spec.classes, spec.feature_dim, &mut crng);
    let offsets = domain_offsets(spec);
    let mut rng = spec.sample_rng();
    let base = spec.id_base(2);
    let mut records = Vec::with_capacity(spec.classes * spec.domains * spec.samples_per_class);
    for (c, center) in centers.iter().enumerate() {
        for (d, offset) in offsets.iter().enumerate() {
            for _ in 0..spec.samples_per_class {
                let features = noisy_sample(center, Some(offset), spec.noise, &mut rng);
                let label = corrupt(c, spec.classes, spec.label_noise, &mut rng);
                records.push(Record {
                    id: base + records.len() as u64,
                    features,
                    labels: vec![label, d as i64],
                });
            }
        }
    }
    Ok(LabeledDataset {
        name: "lens".into(),
        feature_dim: spec.feature_dim,
        tasks: vec![
            TaskInfo {
                name: LENS_CATEGORY.into(),
                num_classes: spec.classes,
            },
            TaskInfo {
                name: DOMAIN.into(),
                num_classes: spec.domains,
            },
        ],
        records,
    })
}

/// Instance centers around product centers; each record carries both a
/// product label and an instance label.
pub fn gen_shopping_like(spec: &GenSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut crng = spec.center_rng();
    let products = uniform_centers(spec.classes, spec.feature_dim, &mut crng);
    let instances: Vec<Vec<f64>> = products
        .iter()
        .flat_map(|p| {
            (0..spec.instances_per_product)
                .map(|_| {
                    let off = gaussian(spec.feature_dim, spec.instance_noise, &mut crng);
                    p.iter().zip(off).map(|(a, b)| a + b).collect::<Vec<_>>()
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let mut rng = spec.sample_rng();
    let base = spec.id_base(3);
    let num_instances = instances.len();
    let mut records = Vec::with_capacity(num_instances * spec.samples_per_class);
    for (inst, center) in instances.iter().enumerate() {
        let product = inst / spec.instances_per_product;
        for _ in 0..spec.samples_per_class {
            let features = noisy_sample(center, None, spec.noise, &mut rng);
            let p = corrupt(product, spec.classes, spec.label_noise, &mut rng);
            let i = corrupt(inst, num_instances, spec.label_noise, &mut rng);
            records.push(Record {
                id: base + records.len() as u64,
                features,
                labels: vec![p, i],
            });
        }
    }
    Ok(LabeledDataset {
        name: "shopping".into(),
        feature_dim: spec.feature_dim,
        tasks: vec![
            TaskInfo {
                name: STL_PRODUCT.into(),
                num_classes: spec.classes,
            },
            TaskInfo {
                name: STL_INSTANCE.into(),
                num_classes: num_instances,
            },
        ],
        records,
    })
}

/// Reference to record `index` of dataset `dataset`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RecordRef {
    pub dataset: usize,
    pub index: usize,
}

/// Shuffled cyclic reader over one dataset.
#[derive(Debug, Clone)]
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Self {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(rng);
        Cycler { order, pos: 0 }
    }

    fn next<R: Rng + ?Sized>(&mut self, rng: &mut R) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// One epoch of uniformly mixed batches: each batch takes `batch_size / k`
/// records from each of the `k` datasets. The epoch ends when the largest
/// dataset has been read once; smaller datasets reshuffle and cycle. The
/// final batch takes the largest dataset's remainder `r` and `r` records
/// from every other dataset.
pub fn mix_batches<R: Rng + ?Sized>(sizes: &[usize], batch_size: usize, rng: &mut R) -> Result<Vec<Vec<RecordRef>>> {
    let k = sizes.len();
    if k == 0 || sizes.contains(&0) {
        return Err(Error::Config("mix_batches needs non-empty datasets".into()));
    }
    if batch_size == 0 || batch_size % k != 0 {
        return Err(Error::Config(format!(
            "batch size {batch_size} not divisible by {k} datasets"
        )));
    }
    let per = batch_size / k;
    let largest = sizes.iter().copied().max().unwrap_or(0);
    let mut cyclers: Vec<Cycler> = sizes.iter().map(|&n| Cycler::new(n, rng)).collect();
    let num_batches = largest.div_ceil(per);
    let mut batches = Vec::with_capacity(num_batches);
    for b in 0..num_batches {
        let take = per.min(largest - b * per);
        let mut batch = Vec::with_capacity(take * k);
        for (d, c) in cyclers.iter_mut().enumerate() {
            for _ in 0..take {
                batch.push(RecordRef {
                    dataset: d,
                    index: c.next(rng),
                });
            }
        }
        batches.push(batch);
    }
    Ok(batches)
}

/// One epoch over the concatenation of all datasets in shuffled order, so
/// each dataset's share of a batch is proportional to its size.
pub fn size_proportional_batches<R: Rng + ?Sized>(
    sizes: &[usize],
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Vec<RecordRef>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut pool: Vec<RecordRef> = sizes
        .iter()
        .enumerate()
        .flat_map(|(d, &n)| (0..n).map(move |index| RecordRef { dataset: d, index }))
        .collect();
    pool.shuffle(rng);
    Ok(pool.chunks(batch_size).map(<[_]>::to_vec).collect())
}

/// Indices of a disjoint query/corpus split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuerySplit {
    pub queries: Vec<usize>,
    pub corpus: Vec<usize>,
}

/// Draws `num_queries` labeled records as queries so that each query's class
/// keeps at least one member in the corpus. With `domain_filter`, queries
/// come only from that domain.
pub fn split_query_corpus<R: Rng + ?Sized>(
    dataset: &LabeledDataset,
    task: &str,
    num_queries: usize,
    domain_filter: Option<&str>,
    rng: &mut R,
) -> Result<QuerySplit> {
    if num_queries >= dataset.len() {
        return Err(Error::Split(format!(
            "{num_queries} queries requested from {} records",
            dataset.len()
        )));
    }
    if dataset.task_index(task).is_none() {
        return Err(Error::Split(format!("{} has no labels for {task}", dataset.name)));
    }
    let domain = match domain_filter {
        Some(name) => {
            let idx = domain_index(name).ok_or_else(|| Error::Split(format!("unknown domain {name}")))?;
            if dataset.task_index(DOMAIN).is_none() {
                return Err(Error::Split(format!("{} has no domain tags", dataset.name)));
            }
            Some(idx)
        }
        None => None,
    };
    let mut class_size: HashMap<usize, usize> = HashMap::new();
    for i in 0..dataset.len() {
        if let Some(c) = dataset.label(i, task) {
            *class_size.entry(c).or_default() += 1;
        }
    }
    let mut candidates: Vec<usize> = (0..dataset.len())
        .filter(|&i| dataset.label(i, task).is_some())
        .filter(|&i| domain.is_none_or(|d| dataset.label(i, DOMAIN) == Some(d)))
        .collect();
    candidates.shuffle(rng);

    let mut taken: HashMap<usize, usize> = HashMap::new();
    let mut is_query = vec![false; dataset.len()];
    let mut queries = Vec::with_capacity(num_queries);
    for i in candidates {
        if queries.len() == num_queries {
            break;
        }
        let c = dataset.label(i, task).expect("candidate is labeled");
        let t = taken.entry(c).or_default();
        if class_size[&c] - *t >= 2 {
            *t += 1;
            is_query[i] = true;
            queries.push(i);
        }
    }
    if queries.len() < num_queries {
        return Err(Error::Split(format!(
            "only {} of {num_queries} queries can keep a same-class corpus item",
            queries.len()
        )));
    }
    let corpus = (0..dataset.len()).filter(|&i| !is_query[i]).collect();
    Ok(QuerySplit { queries, corpus })
}
