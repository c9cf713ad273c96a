use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DiffError, ParamGroup, Result, Tensor};

/// File layout: 8-byte magic, u64 little-endian manifest length, manifest
/// JSON, then each entry's f64 payload in manifest order (little-endian).
const MAGIC: &[u8; 8] = b"MACKPT01";

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct CheckpointMeta {
    /// Environment-step counter at save time (gradient steps for offline runs).
    pub step: u64,
    /// Master seed of the run that produced the parameters.
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    step: u64,
    seed: u64,
    entries: Vec<ManifestEntry>,
}

/// In-memory checkpoint: metadata plus `group/param`-keyed tensors.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    /// Copies stored values into matching parameters of `groups`, keyed by
    /// `group_name/param_name`. Every parameter of every group must be
    /// present with an identical shape.
    pub fn restore(&self, groups: &[&ParamGroup]) -> Result<()> {
        for g in groups {
            for (name, p) in g.iter() {
                let key = format!("{}/{}", g.name(), name);
                let src = self.tensors.get(&key).ok_or_else(|| {
                    DiffError::Checkpoint(format!("missing tensor {key}"))
                })?;
                let mut dst = p.borrow_mut();
                if dst.shape() != src.shape() {
                    return Err(DiffError::Checkpoint(format!(
                        "shape mismatch for {key}: stored {:?}, expected {:?}",
                        src.shape(),
                        dst.shape()
                    )));
                }
                dst.data_mut().copy_from_slice(src.data());
            }
        }
        Ok(())
    }
}

/// Serializes `groups` (flattened as `group/param`) with `meta`.
pub fn save_checkpoint(path: &Path, meta: CheckpointMeta, groups: &[&ParamGroup]) -> Result<()> {
    let mut entries = Vec::new();
    for g in groups {
        for (name, p) in g.iter() {
            entries.push(ManifestEntry {
                name: format!("{}/{}", g.name(), name),
                shape: p.borrow().shape().to_vec(),
            });
        }
    }
    let manifest = Manifest {
        step: meta.step,
        seed: meta.seed,
        entries,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)
        .map_err(|e| DiffError::Checkpoint(format!("manifest encode: {e}")))?;

    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&manifest_bytes)?;
    for g in groups {
        for (_, p) in g.iter() {
            for &v in p.borrow().data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(DiffError::Checkpoint(format!(
            "bad magic in {}",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    r.read_exact(&mut manifest_bytes)?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| DiffError::Checkpoint(format!("manifest decode: {e}")))?;

    let mut tensors = BTreeMap::new();
    for entry in manifest.entries {
        let n: usize = entry.shape.iter().product();
        let mut data = vec![0.0f64; n];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        tensors.insert(entry.name, Tensor::new(entry.shape, data)?);
    }
    Ok(Checkpoint {
        meta: CheckpointMeta {
            step: manifest.step,
            seed: manifest.seed,
        },
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g1 = ParamGroup::new("enc");
        g1.add("w", Tensor::uniform(vec![3, 4], 1.0, &mut rng));
        g1.add("b", Tensor::uniform(vec![4], 1.0, &mut rng));
        let mut g2 = ParamGroup::new("mix");
        g2.add("hyper", Tensor::uniform(vec![2, 2], 1.0, &mut rng));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let meta = CheckpointMeta { step: 1234, seed: 99 };
        save_checkpoint(&path, meta, &[&g1, &g2]).unwrap();

        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.meta, meta);

        // Restoring into zeroed clones reproduces the values bit for bit.
        let c1 = g1.deep_clone("enc");
        let c2 = g2.deep_clone("mix");
        for (_, p) in c1.iter().chain(c2.iter()) {
            p.borrow_mut().data_mut().fill(0.0);
        }
        ck.restore(&[&c1, &c2]).unwrap();
        for (orig, copy) in [(&g1, &c1), (&g2, &c2)] {
            for (name, p) in orig.iter() {
                let restored = copy.get(name).unwrap();
                assert_eq!(p.borrow().data(), restored.borrow().data());
            }
        }
    }

    #[test]
    fn restore_rejects_missing_tensor() {
        let mut g = ParamGroup::new("enc");
        g.add("w", Tensor::zeros(vec![2]));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, CheckpointMeta { step: 0, seed: 0 }, &[&g]).unwrap();

        let ck = load_checkpoint(&path).unwrap();
        let mut other = ParamGroup::new("enc");
        other.add("w", Tensor::zeros(vec![2]));
        other.add("extra", Tensor::zeros(vec![1]));
        assert!(matches!(
            ck.restore(&[&other]),
            Err(DiffError::Checkpoint(_))
        ));
    }

    #[test]
    fn save_is_deterministic_bytes() {
        let mut g = ParamGroup::new("enc");
        g.add("w", Tensor::new(vec![2], vec![0.125, -3.5]).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        let meta = CheckpointMeta { step: 5, seed: 6 };
        save_checkpoint(&p1, meta, &[&g]).unwrap();
        save_checkpoint(&p2, meta, &[&g]).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
