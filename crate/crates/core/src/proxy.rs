//! Proxy banks, class subsampling, and sparse proxy updates.
//!
//! A proxy bank holds one learned vector per class for a task. It lives
//! outside the autodiff graph: each step gathers the rows of the sampled
//! classes into a tape leaf, and the gradient of that leaf is scattered back
//! onto the same rows.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ProxyBank<T> {
    task: String,
    rows: Tensor<T>,
    touched: Vec<usize>,
}

impl<T: Scalar> ProxyBank<T> {
    pub fn zeros(task: impl Into<String>, num_classes: usize, dim: usize) -> Self {
        ProxyBank {
            task: task.into(),
            rows: Tensor::zeros(&[num_classes, dim]),
            touched: Vec::new(),
        }
    }

    /// Gaussian rows with standard deviation `std`.
    pub fn init_normal<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        for v in self.rows.data_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v = T::of(z * std);
        }
    }

    pub fn from_rows(task: impl Into<String>, rows: Tensor<T>) -> Result<Self> {
        if rows.shape().len() != 2 {
            return Err(Error::dim("proxy_bank", rows.shape(), &[0, 0]));
        }
        Ok(ProxyBank {
            task: task.into(),
            rows,
            touched: Vec::new(),
        })
    }

    pub fn task(&self) -> &str {
        &self.task
    }

    pub fn num_classes(&self) -> usize {
        self.rows.rows()
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn rows(&self) -> &Tensor<T> {
        &self.rows
    }

    pub fn rows_mut(&mut self) -> &mut Tensor<T> {
        &mut self.rows
    }

    /// Rows updated by the most recent [`scatter_update`](Self::scatter_update).
    pub fn touched(&self) -> &[usize] {
        &self.touched
    }

    fn check_indices(&self, idx: &[usize]) -> Result<()> {
        let m = self.num_classes();
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Index { index: bad, len: m });
        }
        let mut seen = vec![false; m];
        for &i in idx {
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Precondition(format!(
                    "{}: duplicate proxy index {i}",
                    self.task
                )));
            }
        }
        Ok(())
    }

    /// Copies rows `idx` into an `S×D` tensor.
    pub fn gather(&self, idx: &[usize]) -> Result<Tensor<T>> {
        self.check_indices(idx)?;
        let mut data = Vec::with_capacity(idx.len() * self.dim());
        for &i in idx {
            data.extend_from_slice(self.rows.row(i));
        }
        Tensor::new(&[idx.len(), self.dim()], data)
    }

    /// `rows[idx[i]] ← rows[idx[i]] − lr·(grad[i] + wd·rows[idx[i]])`.
    /// Rows not in `idx` are left bit-identical. The whole update is rejected
    /// if any gradient entry is non-finite.
    pub fn scatter_update(
        &mut self,
        idx: &[usize],
        gathered_grad: &Tensor<T>,
        effective_lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        self.check_indices(idx)?;
        if gathered_grad.shape() != [idx.len(), self.dim()] {
            return Err(Error::dim(
                "scatter_update",
                gathered_grad.shape(),
                &[idx.len(), self.dim()],
            ));
        }
        if let Some(bad) = (0..idx.len()).find(|&i| !gathered_grad.row(i).iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite(format!(
                "proxy gradient for task {} row {}",
                self.task, idx[bad]
            )));
        }
        let (lr, wd) = (T::of(effective_lr), T::of(weight_decay));
        for (i, &r) in idx.iter().enumerate() {
            let g = gathered_grad.row(i);
            for (p, &gv) in self.rows.row_mut(r).iter_mut().zip(g) {
                *p -= lr * (gv + wd * *p);
            }
        }
        self.touched.clear();
        self.touched.extend_from_slice(idx);
        Ok(())
    }
}

/// Outcome of class subsampling for one batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubsampleResult {
    /// Distinct class ids; batch classes first in first-occurrence order,
    /// then sampled fillers in draw order.
    pub sampled_proxy_idx: Vec<usize>,
    /// For each batch row, the slot in `sampled_proxy_idx` holding its class.
    pub remapped_targets: Vec<usize>,
}

/// Picks `num_samples` distinct classes out of `num_classes`, always
/// including every class in `targets`, and remaps targets to slots.
///
/// The non-target classes are uniform without replacement. Rejection
/// sampling is used while fewer than half the classes are requested; above
/// that the complement is shuffled instead.
pub fn subsample_proxies<R: Rng + ?Sized>(
    targets: &[usize],
    num_samples: usize,
    num_classes: usize,
    rng: &mut R,
) -> Result<SubsampleResult> {
    if num_samples > num_classes {
        return Err(Error::Precondition(format!(
            "num_samples {num_samples} exceeds class count {num_classes}"
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= num_classes) {
        return Err(Error::Index { index: bad, len: num_classes });
    }
    let mut slot_of: HashMap<usize, usize> = HashMap::with_capacity(num_samples);
    let mut sampled = Vec::with_capacity(num_samples);
    let mut remapped = Vec::with_capacity(targets.len());
    for &t in targets {
        let slot = *slot_of.entry(t).or_insert_with(|| {
            sampled.push(t);
            sampled.len() - 1
        });
        remapped.push(slot);
    }
    if sampled.len() > num_samples {
        return Err(Error::Precondition(format!(
            "{} distinct targets exceed num_samples {num_samples}",
            sampled.len()
        )));
    }

    if 2 * num_samples > num_classes {
        let mut rest: Vec<usize> = (0..num_classes).filter(|c| !slot_of.contains_key(c)).collect();
        let need = num_samples - sampled.len();
        let (picked, _) = rest.partial_shuffle(rng, need);
        sampled.extend_from_slice(picked);
    } else {
        while sampled.len() < num_samples {
            let s = rng.random_range(0..num_classes);
            if let std::collections::hash_map::Entry::Vacant(e) = slot_of.entry(s) {
                e.insert(sampled.len());
                sampled.push(s);
            }
        }
    }
    Ok(SubsampleResult {
        sampled_proxy_idx: sampled,
        remapped_targets: remapped,
    })
}

/// How embeddings and proxies are turned into logits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LogitMode {
    /// Raw dot product, no bias.
    Plain,
    /// Cosine similarity divided by a temperature.
    NormSoftmax { temperature: f64 },
}

const NORM_EPS: f64 = 1e-12;

/// Logits `N×S` of embeddings `N×D` against gathered proxies `S×D`.
pub fn proxy_logits<T: Scalar>(tape: &mut Tape<T>, embeddings: Var, gathered: Var, mode: LogitMode) -> Result<Var> {
    match mode {
        LogitMode::Plain => tape.matmul_nt(embeddings, gathered),
        LogitMode::NormSoftmax { temperature } => {
            if !(temperature > 0.0) {
                return Err(Error::Config("temperature must be positive".into()));
            }
            let e = tape.l2_normalize(embeddings, T::of(NORM_EPS))?;
            let g = tape.l2_normalize(gathered, T::of(NORM_EPS))?;
            let cos = tape.matmul_nt(e, g)?;
            tape.scale(cos, T::of(1.0 / temperature))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn worked_example() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = subsample_proxies(&[2, 2, 5], 3, 8, &mut rng).unwrap();
        assert_eq!(&r.sampled_proxy_idx[..2], &[2, 5]);
        assert!(![2, 5].contains(&r.sampled_proxy_idx[2]));
        assert_eq!(r.remapped_targets, vec![0, 0, 1]);
    }

    #[test]
    fn saturated_sampling_is_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = subsample_proxies(&[0, 1, 2], 3, 3, &mut rng).unwrap();
        let mut s = r.sampled_proxy_idx.clone();
        s.sort();
        assert_eq!(s, vec![0, 1, 2]);
        for (i, &t) in [0, 1, 2].iter().enumerate() {
            assert_eq!(r.sampled_proxy_idx[r.remapped_targets[i]], t);
        }
    }

    #[test]
    fn precondition_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(
            subsample_proxies(&[0, 1, 2], 2, 8, &mut rng),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(
            subsample_proxies(&[0], 9, 8, &mut rng),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn gather_and_zero_lr_scatter_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut bank = ProxyBank::<f64>::zeros("t", 1, 4);
        bank.init_normal(1.0, &mut rng);
        assert_eq!(bank.gather(&[0]).unwrap().data(), bank.rows().data());

        let mut bank = ProxyBank::<f64>::zeros("t", 6, 3);
        bank.init_normal(1.0, &mut rng);
        let before = bank.clone();
        let idx = [4, 1, 2];
        let g = bank.gather(&idx).unwrap();
        for (i, &r) in idx.iter().enumerate() {
            assert_eq!(g.row(i), bank.rows().row(r));
        }
        bank.scatter_update(&idx, &Tensor::ones(&[3, 3]), 0.0, 0.0).unwrap();
        assert_eq!(bank.rows(), before.rows());
        assert!(matches!(bank.gather(&[6]), Err(Error::Index { index: 6, len: 6 })));
    }

    #[test]
    fn scatter_exact_and_dense_equivalent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut bank = ProxyBank::<f64>::zeros("t", 10, 4);
        bank.init_normal(1.0, &mut rng);
        let idx = [7, 0, 3];
        let grad = Tensor::<f64>::uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let (lr, wd) = (0.3, 0.01);

        let mut dense_grad = Tensor::<f64>::zeros(&[10, 4]);
        for (i, &r) in idx.iter().enumerate() {
            dense_grad.row_mut(r).copy_from_slice(grad.row(i));
        }
        let touched: Vec<bool> = (0..10).map(|r| idx.contains(&r)).collect();
        let mut dense = bank.rows().clone();
        for r in 0..10 {
            if !touched[r] {
                continue;
            }
            let g = dense_grad.row(r).to_vec();
            for (p, gv) in dense.row_mut(r).iter_mut().zip(g) {
                *p -= lr * (gv + wd * *p);
            }
        }
        let before = bank.clone();
        bank.scatter_update(&idx, &grad, lr, wd).unwrap();
        assert_eq!(bank.rows(), &dense);
        for r in (0..10).filter(|r| !touched[*r]) {
            assert_eq!(bank.rows().row(r), before.rows().row(r));
        }
        assert_eq!(bank.touched(), &idx);
    }

    #[test]
    fn non_finite_scatter_names_task_and_row() {
        let mut bank = ProxyBank::<f64>::zeros("lens_category", 5, 2);
        let mut g = Tensor::<f64>::zeros(&[2, 2]);
        g.data_mut()[3] = f64::INFINITY;
        let msg = bank.scatter_update(&[1, 4], &g, 0.1, 0.0).unwrap_err().to_string();
        assert!(msg.contains("lens_category") && msg.contains("row 4"), "{msg}");
        assert_eq!(bank.rows(), &Tensor::zeros(&[5, 2]));
    }

    #[test]
    fn norm_softmax_logit_is_inverse_temperature() {
        let mut tape = Tape::<f64>::new();
        let e = tape.constant(Tensor::new(&[1, 3], vec![0.0, 2.0, 0.0]).unwrap()).unwrap();
        let g = tape
            .constant(Tensor::new(&[3, 3], vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        let z = proxy_logits(&mut tape, e, g, LogitMode::NormSoftmax { temperature: 0.05 }).unwrap();
        let out = tape.value(z).data();
        assert!((out[0] - 20.0).abs() < 1e-12);
        assert_eq!(&out[1..], &[0.0, 0.0]);

        let zero = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let z = proxy_logits(&mut tape, zero, g, LogitMode::Plain).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
    }
}
