//! `MTCK` model checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! "MTCK" | version u32
//! config_len u32 | config text (`key = value` lines, UTF-8)
//! task_count u32 | per task: name_len u16, name, classes u64, subsampled u8, num_samples u64
//! tensor_count u32 | per tensor: name_len u16, name, ndim u32, dims u64*, values f32*
//! per task: proxy rows (classes × embed_dim f32)
//! rng: seed [u8; 32] | stream u64 | word_pos u128
//! ```
//!
//! Values are stored as f32 whatever the in-memory scalar type, so
//! load-then-save reproduces the file byte for byte.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::data::{read_exact, read_f32, read_u16, read_u32, read_u64};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, MultiTaskModel, TaskSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MTCK";
const VERSION: u32 = 1;

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u16).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u16(r)? as usize;
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(format!("checkpoint string: {e}")))
}

fn write_values<T: Scalar, W: Write>(w: &mut W, t: &Tensor<T>) -> std::io::Result<()> {
    for v in t.data() {
        w.write_all(&v.as_f32().to_le_bytes())?;
    }
    Ok(())
}

fn read_values<T: Scalar, R: Read>(r: &mut R, shape: &[usize]) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| read_f32(r).map(T::of_f32)).collect::<Result<_>>()?;
    Tensor::new(shape, data)
}

impl<T: Scalar> MultiTaskModel<T> {
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let config: String = self
            .config
            .to_kv()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        w.write_all(&(config.len() as u32).to_le_bytes())?;
        w.write_all(config.as_bytes())?;

        w.write_all(&(self.tasks.len() as u32).to_le_bytes())?;
        for t in &self.tasks {
            write_str(&mut w, &t.name)?;
            w.write_all(&(t.num_classes as u64).to_le_bytes())?;
            w.write_all(&[t.subsampled as u8])?;
            w.write_all(&(t.num_samples as u64).to_le_bytes())?;
        }

        let params: Vec<_> = self.dense_params().collect();
        w.write_all(&(params.len() as u32).to_le_bytes())?;
        for p in params {
            write_str(&mut w, &p.name)?;
            w.write_all(&(p.value.shape().len() as u32).to_le_bytes())?;
            for &d in p.value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            write_values(&mut w, &p.value)?;
        }
        for head in &self.heads {
            write_values(&mut w, head.rows())?;
        }

        w.write_all(&self.rng.get_seed())?;
        w.write_all(&self.rng.get_stream().to_le_bytes())?;
        w.write_all(&self.rng.get_word_pos().to_le_bytes())?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = read_u32(&mut r)? as usize;
        let mut text = vec![0u8; len];
        read_exact(&mut r, &mut text)?;
        let text = String::from_utf8(text).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let mut config = ModelConfig::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("checkpoint config line {line:?}")))?;
            if !config.set(k.trim(), v.trim())? {
                return Err(Error::Format(format!("unknown checkpoint config key {}", k.trim())));
            }
        }

        let task_count = read_u32(&mut r)? as usize;
        let mut tasks = Vec::with_capacity(task_count.min(1024));
        for _ in 0..task_count {
            let name = read_str(&mut r)?;
            let num_classes = read_u64(&mut r)? as usize;
            let mut flag = [0u8; 1];
            read_exact(&mut r, &mut flag)?;
            let num_samples = read_u64(&mut r)? as usize;
            tasks.push(TaskSpec {
                name,
                num_classes,
                subsampled: flag[0] != 0,
                num_samples,
            });
        }
        let mut model = MultiTaskModel::new(config, tasks)?;

        let count = read_u32(&mut r)? as usize;
        let expected = model.dense_params().count();
        if count != expected {
            return Err(Error::Format(format!(
                "checkpoint has {count} tensors, architecture needs {expected}"
            )));
        }
        for p in model.dense_params_mut() {
            let name = read_str(&mut r)?;
            if name != p.name {
                return Err(Error::Format(format!("expected tensor {}, found {name}", p.name)));
            }
            let ndim = read_u32(&mut r)? as usize;
            let shape = (0..ndim).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if shape != p.value.shape() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {shape:?}, expected {:?}",
                    p.value.shape()
                )));
            }
            p.value = read_values(&mut r, &shape)?;
        }
        for head in &mut model.heads {
            let shape = head.rows().shape().to_vec();
            *head.rows_mut() = read_values(&mut r, &shape)?;
        }

        let mut seed = [0u8; 32];
        read_exact(&mut r, &mut seed)?;
        let stream = read_u64(&mut r)?;
        let mut pos = [0u8; 16];
        read_exact(&mut r, &mut pos)?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(u128::from_le_bytes(pos));
        model.rng = rng;

        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| Error::Format(e.to_string()))? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf).expect("writing to a Vec cannot fail");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(bytes.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    fn model() -> MultiTaskModel<f32> {
        let cfg = ModelConfig {
            feature_dim: 5,
            hidden_dims: vec![7, 6],
            embed_dim: 8,
            groups: 4,
            variant: Variant::SmGnRDp,
            temperature: 0.07,
            seed: 11,
            ..ModelConfig::default()
        };
        MultiTaskModel::new(cfg, vec![TaskSpec::subsampled("a", 12, 5), TaskSpec::full("b", 3)]).unwrap()
    }

    fn bytes(m: &MultiTaskModel<f32>) -> Vec<u8> {
        let mut buf = Vec::new();
        m.write_checkpoint(&mut buf).unwrap();
        buf
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let m = model();
        let first = bytes(&m);
        let loaded = MultiTaskModel::<f32>::read_checkpoint(first.as_slice()).unwrap();
        assert_eq!(bytes(&loaded), first);
        assert_eq!(loaded.config(), m.config());
        assert_eq!(loaded.tasks(), m.tasks());
        let x = Tensor::new(&[2, 5], (0..10).map(|i| i as f32 * 0.1 - 0.4).collect()).unwrap();
        assert_eq!(loaded.embed(&x).unwrap(), m.embed(&x).unwrap());
    }

    #[test]
    fn f64_model_round_trips_through_f32_storage() {
        let m = model().cast::<f64>();
        let mut first = Vec::new();
        m.write_checkpoint(&mut first).unwrap();
        let loaded = MultiTaskModel::<f64>::read_checkpoint(first.as_slice()).unwrap();
        let mut second = Vec::new();
        loaded.write_checkpoint(&mut second).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn corrupt_files_rejected() {
        let good = bytes(&model());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(MultiTaskModel::<f32>::read_checkpoint(bad.as_slice()), Err(Error::Format(_))));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(MultiTaskModel::<f32>::read_checkpoint(bad.as_slice()), Err(Error::Format(_))));
        assert!(MultiTaskModel::<f32>::read_checkpoint(&good[..good.len() - 3]).is_err());
        let mut long = good.clone();
        long.push(0);
        assert!(MultiTaskModel::<f32>::read_checkpoint(long.as_slice()).is_err());
    }
}
