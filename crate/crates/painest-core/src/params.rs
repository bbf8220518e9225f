//! Named parameter sets and directory checkpoints. A checkpoint is a
//! directory of one BTEN file per tensor plus a `manifest.tsv` listing
//! name, dtype, shape, and trainability.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{read_bten, write_bten, Dtype, Tensor};

#[derive(Clone)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

impl Param {
    pub fn trainable(&self) -> bool {
        self.tensor.requires_grad()
    }
}

#[derive(Clone, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new(params: Vec<Param>) -> ParamSet {
        ParamSet { params }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.tensor.zero_grad();
        }
    }

    /// Deep copy of all values, for best-epoch snapshots.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| p.tensor.to_vec()).collect()
    }

    pub fn restore(&self, snap: &[Vec<f64>]) {
        assert_eq!(snap.len(), self.params.len(), "snapshot arity mismatch");
        for (p, s) in self.params.iter().zip(snap) {
            p.tensor.set_data(s);
        }
    }

    /// Round every value to f32 and back; used when training at 32-bit
    /// artifact precision so saved and in-memory weights agree exactly.
    pub fn round_to_f32(&self) {
        for p in &self.params {
            let rounded: Vec<f64> = p.tensor.data().iter().map(|&v| v as f32 as f64).collect();
            p.tensor.set_data(&rounded);
        }
    }

    pub fn save(&self, dir: &Path, dtype: Dtype) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = String::from("name\tdtype\tshape\ttrainable\n");
        for p in &self.params {
            let shape = p.tensor.shape();
            let shape_str = shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
            manifest.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                p.name,
                dtype,
                shape_str,
                if p.trainable() { 1 } else { 0 }
            ));
            write_bten(&dir.join(format!("{}.bten", p.name)), &p.tensor.to_vec(), &shape, dtype)?;
        }
        fs::write(dir.join("manifest.tsv"), manifest)?;
        Ok(())
    }

    /// Load values into this (already constructed) set. The architecture
    /// defines the expected names and shapes; anything missing, extra, or
    /// mis-shaped is rejected with the offending tensor named.
    pub fn load(&self, dir: &Path) -> Result<()> {
        let ck = |reason: String| Error::Checkpoint { path: dir.to_path_buf(), reason };
        let manifest_path = dir.join("manifest.tsv");
        let text = fs::read_to_string(&manifest_path)
            .map_err(|e| ck(format!("cannot read manifest.tsv: {e}")))?;
        let mut listed: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(ck(format!("manifest line {} has {} columns, expected 4", i + 1, cols.len())));
            }
            let shape = cols[2]
                .split(',')
                .map(|s| s.parse::<usize>().map_err(|_| ck(format!("bad shape `{}` for tensor {}", cols[2], cols[0]))))
                .collect::<Result<Vec<usize>>>()?;
            listed.insert(cols[0].to_string(), shape);
        }
        for p in &self.params {
            let expected = p.tensor.shape();
            let manifest_shape = listed
                .remove(&p.name)
                .ok_or_else(|| ck(format!("missing tensor {}", p.name)))?;
            if manifest_shape != expected {
                return Err(ck(format!(
                    "tensor {} has shape {manifest_shape:?}, architecture expects {expected:?}",
                    p.name
                )));
            }
            let (data, shape, _) = read_bten(&dir.join(format!("{}.bten", p.name)))?;
            if shape != expected {
                return Err(ck(format!(
                    "tensor {} file shape {shape:?} does not match architecture {expected:?}",
                    p.name
                )));
            }
            p.tensor.set_data(&data);
        }
        if let Some(extra) = listed.keys().next() {
            return Err(ck(format!("unexpected tensor {extra}")));
        }
        Ok(())
    }
}

/// Uniform(-limit, limit) leaf variable.
pub fn uniform_init(rng: &mut ChaCha8Rng, shape: &[usize], limit: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::var(data, shape).expect("static shape")
}

/// He-style uniform init for relu layers: limit = sqrt(6 / fan_in).
pub fn he_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    uniform_init(rng, shape, (6.0 / fan_in as f64).sqrt())
}

pub fn zeros_var(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::var(vec![0.0; n], shape).expect("static shape")
}

pub fn full_var(shape: &[usize], v: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::var(vec![v; n], shape).expect("static shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_rng, tag};

    fn sample_set() -> ParamSet {
        let mut rng = derive_rng(7, &[tag("test")]);
        let w = Param { name: "layer.w".into(), tensor: he_uniform(&mut rng, &[3, 2], 3) };
        let b = Param { name: "layer.b".into(), tensor: zeros_var(&[2]) };
        b.tensor.set_requires_grad(false);
        ParamSet::new(vec![w, b])
    }

    #[test]
    fn save_load_roundtrip_f64() {
        let dir = tempfile::tempdir().unwrap();
        let set = sample_set();
        let orig = set.snapshot();
        set.save(dir.path(), Dtype::F64).unwrap();
        let other = sample_set();
        other.load(dir.path()).unwrap();
        assert_eq!(other.snapshot(), orig);
    }

    #[test]
    fn load_rejects_shape_mismatch_naming_tensor() {
        let dir = tempfile::tempdir().unwrap();
        sample_set().save(dir.path(), Dtype::F64).unwrap();
        let mut rng = derive_rng(8, &[tag("test")]);
        let wrong = ParamSet::new(vec![
            Param { name: "layer.w".into(), tensor: he_uniform(&mut rng, &[2, 2], 2) },
            Param { name: "layer.b".into(), tensor: zeros_var(&[2]) },
        ]);
        let err = wrong.load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("layer.w"), "error should name the tensor: {err}");
    }

    #[test]
    fn load_rejects_missing_and_extra() {
        let dir = tempfile::tempdir().unwrap();
        sample_set().save(dir.path(), Dtype::F64).unwrap();
        let extra = ParamSet::new(vec![Param { name: "layer.w".into(), tensor: zeros_var(&[3, 2]) }]);
        let err = extra.load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("unexpected tensor layer.b"), "{err}");

        let more = ParamSet::new(vec![
            Param { name: "layer.w".into(), tensor: zeros_var(&[3, 2]) },
            Param { name: "layer.b".into(), tensor: zeros_var(&[2]) },
            Param { name: "layer.extra".into(), tensor: zeros_var(&[1]) },
        ]);
        let err = more.load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("missing tensor layer.extra"), "{err}");
    }

    #[test]
    fn f32_round_matches_f32_save() {
        let dir = tempfile::tempdir().unwrap();
        let set = sample_set();
        set.save(dir.path(), Dtype::F32).unwrap();
        set.round_to_f32();
        let other = sample_set();
        other.load(dir.path()).unwrap();
        assert_eq!(other.snapshot(), set.snapshot());
    }

    #[test]
    fn snapshot_restore() {
        let set = sample_set();
        let snap = set.snapshot();
        set.get("layer.w").unwrap().tensor.set_data(&[9.0; 6]);
        set.restore(&snap);
        assert_eq!(set.snapshot(), snap);
    }
}
