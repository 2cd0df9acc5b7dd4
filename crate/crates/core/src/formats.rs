//! Binary artifact files: magic, `u32` version, `u64` JSON length, JSON
//! metadata, then a little-endian payload. All writes are atomic.

use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Layout;
use crate::svdcodec::{BasisHeader, SvdBasis};
use crate::tipl::{TiplConfig, TiplModel};
use crate::trajectory::{TrajectoryMeta, WeightTrajectory};
use crate::Matrix;

pub const TRAJECTORY_MAGIC: &[u8; 6] = b"WTRJ1\n";
pub const BASIS_MAGIC: &[u8; 6] = b"WSVD1\n";
pub const CHECKPOINT_MAGIC: &[u8; 6] = b"TIPL1\n";
pub const FORMAT_VERSION: u32 = 1;

const PREAMBLE: usize = 6 + 4 + 8;

/// Writes `bytes` to a temporary file next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn encode_container<M: Serialize>(magic: &[u8; 6], meta: &M, payload: &[u8]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(meta)?;
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    Ok(out)
}

/// Cursor over a loaded file that reports short reads as truncation.
struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn truncated(&self, needed: u64) -> Error {
        Error::Truncated {
            path: self.path.to_path_buf(),
            expected: self.pos as u64 + needed,
            actual: self.bytes.len() as u64,
        }
    }

    fn malformed(&self, reason: impl Into<String>) -> Error {
        Error::Malformed {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: u64) -> Result<&'a [u8]> {
        if (self.remaining() as u64) < n {
            return Err(self.truncated(n));
        }
        let n = n as usize;
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn count(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.malformed(format!("count {v} out of range")))
    }

    /// Reads `n` reals, checking the whole block is present first.
    fn reals(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = (n as u64).checked_mul(8).ok_or_else(|| self.malformed("payload size overflows"))?;
        let raw = self.take(bytes)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(self.malformed(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Checks magic and version and parses the JSON header.
fn open_container<'a, M: DeserializeOwned>(
    path: &'a Path,
    bytes: &'a [u8],
    magic: &[u8; 6],
    kind: &'static str,
) -> Result<(M, Reader<'a>)> {
    if bytes.len() < magic.len() && magic.starts_with(bytes) {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: magic.len() as u64,
            actual: bytes.len() as u64,
        });
    }
    if bytes.len() < magic.len() || &bytes[..magic.len()] != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            kind,
        });
    }
    let mut r = Reader { path, bytes, pos: 6 };
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let len = r.u64()?;
    let json = r.take(len)?;
    let meta = serde_json::from_slice(json).map_err(|e| r.malformed(format!("metadata: {e}")))?;
    Ok((meta, r))
}

pub fn encode_trajectory(traj: &WeightTrajectory) -> Result<Vec<u8>> {
    traj.validate()?;
    let m = &traj.snapshots;
    let mut payload = Vec::with_capacity(16 + 8 * m.len());
    payload.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    payload.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for x in m.as_slice() {
        payload.extend_from_slice(&x.to_le_bytes());
    }
    encode_container(TRAJECTORY_MAGIC, &traj.meta, &payload)
}

pub fn save_trajectory(traj: &WeightTrajectory, path: &Path) -> Result<()> {
    write_atomic(path, &encode_trajectory(traj)?)
}

pub fn decode_trajectory(path: &Path, bytes: &[u8]) -> Result<WeightTrajectory> {
    let (meta, mut r): (TrajectoryMeta, _) = open_container(path, bytes, TRAJECTORY_MAGIC, "trajectory")?;
    let n = r.count()?;
    let dim = r.count()?;
    let total = n.checked_mul(dim).ok_or_else(|| r.malformed("snapshot count overflows"))?;
    let values = r.reals(total)?;
    r.finish()?;
    let snapshots = Matrix::from_vec(n, dim, values).map_err(|e| r.malformed(e.to_string()))?;
    WeightTrajectory::new(meta, snapshots).map_err(|e| r.malformed(e.to_string()))
}

pub fn load_trajectory(path: &Path) -> Result<WeightTrajectory> {
    decode_trajectory(path, &read_file(path)?)
}

/// Named tensors: count, then for each a name, its shape and row-major reals.
fn encode_tensors<'a>(tensors: impl IntoIterator<Item = (&'a str, Vec<usize>, &'a [f64])>) -> Vec<u8> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, shape, values) in tensors {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u64).to_le_bytes());
        for s in shape {
            out.extend_from_slice(&(s as u64).to_le_bytes());
        }
        for x in values {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

fn decode_tensors(r: &mut Reader<'_>) -> Result<Vec<NamedTensor>> {
    let count = r.count()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u64()?;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.malformed("tensor name is not UTF-8"))?;
        let ndim = r.count()?;
        let mut shape = Vec::new();
        for _ in 0..ndim {
            shape.push(r.count()?);
        }
        let size = shape
            .iter()
            .try_fold(1usize, |acc, &s| acc.checked_mul(s))
            .ok_or_else(|| r.malformed(format!("tensor {name} size overflows")))?;
        let values = r.reals(size)?;
        out.push(NamedTensor { name, shape, values });
    }
    r.finish()?;
    Ok(out)
}

fn expect_tensor(r: &Reader<'_>, t: Option<NamedTensor>, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
    match t {
        Some(t) if t.name == name && t.shape == shape => Ok(t.values),
        Some(t) => Err(r.malformed(format!(
            "expected tensor {name} {shape:?}, found {} {:?}",
            t.name, t.shape
        ))),
        None => Err(r.malformed(format!("missing tensor {name}"))),
    }
}

pub fn encode_basis(basis: &SvdBasis<f64>) -> Result<Vec<u8>> {
    basis.validate()?;
    let h = basis.header();
    let payload = encode_tensors([
        ("sigma", vec![h.d], basis.sigma.as_slice()),
        ("v", vec![h.weight_dim, h.d], basis.v.as_slice()),
        ("energy", vec![h.spectrum_len], basis.energy.as_slice()),
        ("code_mean", vec![h.d], basis.code_mean.as_slice()),
        ("code_std", vec![h.d], basis.code_std.as_slice()),
    ]);
    encode_container(BASIS_MAGIC, &h, &payload)
}

pub fn save_basis(basis: &SvdBasis<f64>, path: &Path) -> Result<()> {
    write_atomic(path, &encode_basis(basis)?)
}

pub fn decode_basis(path: &Path, bytes: &[u8]) -> Result<SvdBasis<f64>> {
    let (h, mut r): (BasisHeader, _) = open_container(path, bytes, BASIS_MAGIC, "basis")?;
    let mut tensors = decode_tensors(&mut r)?.into_iter();
    let sigma = expect_tensor(&r, tensors.next(), "sigma", &[h.d])?;
    let v = expect_tensor(&r, tensors.next(), "v", &[h.weight_dim, h.d])?;
    let energy = expect_tensor(&r, tensors.next(), "energy", &[h.spectrum_len])?;
    let code_mean = expect_tensor(&r, tensors.next(), "code_mean", &[h.d])?;
    let code_std = expect_tensor(&r, tensors.next(), "code_std", &[h.d])?;
    if tensors.next().is_some() {
        return Err(r.malformed("unexpected extra tensors"));
    }
    let basis = SvdBasis {
        sigma,
        v: Matrix::from_vec(h.weight_dim, h.d, v).map_err(|e| r.malformed(e.to_string()))?,
        energy,
        corpus_hash: h.corpus_hash,
        code_mean,
        code_std,
        layout: h.layout,
    };
    basis.validate().map_err(|e| r.malformed(e.to_string()))?;
    Ok(basis)
}

pub fn load_basis(path: &Path) -> Result<SvdBasis<f64>> {
    decode_basis(path, &read_file(path)?)
}

/// Checkpoint metadata: model configuration plus free-form provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: TiplConfig,
    pub layout: Layout,
    #[serde(default)]
    pub info: serde_json::Value,
}

pub fn encode_checkpoint(model: &TiplModel, info: &serde_json::Value) -> Result<Vec<u8>> {
    model.validate()?;
    let payload = encode_tensors(
        model
            .layout
            .slots
            .iter()
            .map(|s| (s.name.as_str(), s.shape.clone(), model.layout.slice(&model.params, s))),
    );
    let header = CheckpointHeader {
        config: model.config.clone(),
        layout: model.layout.clone(),
        info: info.clone(),
    };
    encode_container(CHECKPOINT_MAGIC, &header, &payload)
}

pub fn save_checkpoint(model: &TiplModel, info: &serde_json::Value, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model, info)?)
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<(TiplModel, serde_json::Value)> {
    let (h, mut r): (CheckpointHeader, _) = open_container(path, bytes, CHECKPOINT_MAGIC, "checkpoint")?;
    let tensors = decode_tensors(&mut r)?;
    if tensors.len() != h.layout.slots.len() {
        return Err(r.malformed(format!(
            "{} tensors for a layout of {}",
            tensors.len(),
            h.layout.slots.len()
        )));
    }
    let mut params = Vec::with_capacity(h.layout.total());
    for (t, slot) in tensors.into_iter().zip(&h.layout.slots) {
        params.extend(expect_tensor(&r, Some(t), &slot.name, &slot.shape)?);
    }
    let model = TiplModel {
        config: h.config,
        layout: h.layout,
        params,
    };
    model.validate().map_err(|e| r.malformed(e.to_string()))?;
    Ok((model, h.info))
}

pub fn load_checkpoint(path: &Path) -> Result<(TiplModel, serde_json::Value)> {
    decode_checkpoint(path, &read_file(path)?)
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    Ok(hex::encode(Sha256::digest(read_file(path)?)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{gen_trajectory, make_system, oracle_trajectory};
    use crate::ppo::{run_trial, PpoHyper, TrialConfig};
    use crate::svdcodec::fit_basis;
    use crate::tipl::init_model;

    fn sample_trajectory() -> WeightTrajectory {
        let cfg = TrialConfig {
            total_steps: 128,
            hyper: PpoHyper {
                rollout_steps: 128,
                minibatches: 4,
                epochs: 2,
                ..PpoHyper::default()
            },
            eval_every: 1,
            eval_snapshots: true,
            eval: crate::policy::ReturnEval {
                episodes: 1,
                ..Default::default()
            },
            ..TrialConfig::default()
        };
        run_trial(&cfg, 3).unwrap()
    }

    fn sample_basis() -> SvdBasis<f64> {
        let sys = make_system(6, 1, 0.1, 1.0, 0.5, 1e-3).unwrap();
        let states = gen_trajectory(&sys, &[1.0, -2.0, 0.5, 0.0, 3.0, 1.0], 30, 2).unwrap();
        let t = oracle_trajectory(&states, 0).unwrap();
        fit_basis(&t.snapshots, 4, t.meta.layout.clone()).unwrap()
    }

    fn tiny_model() -> TiplModel {
        let c = TiplConfig {
            d_token: 4,
            context_len: 5,
            embed_dim: 8,
            layers: 2,
            heads: 2,
            ..TiplConfig::default()
        };
        init_model(&c, 9).unwrap()
    }

    #[test]
    fn trajectory_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wtrj");
        let t = sample_trajectory();
        save_trajectory(&t, &path).unwrap();
        let back = load_trajectory(&path).unwrap();
        assert_eq!(back, t);
        let bits = |m: &Matrix| m.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.snapshots), bits(&t.snapshots));
        assert_eq!(encode_trajectory(&back).unwrap(), std::fs::read(&path).unwrap());
    }

    #[test]
    fn basis_and_checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let b = sample_basis();
        let bp = dir.path().join("b.wsvd");
        save_basis(&b, &bp).unwrap();
        assert_eq!(load_basis(&bp).unwrap(), b);

        let m = tiny_model();
        let info = serde_json::json!({"basis": "abc", "loss": [0.5, 0.25]});
        let cp = dir.path().join("m.tipl");
        save_checkpoint(&m, &info, &cp).unwrap();
        let (back, back_info) = load_checkpoint(&cp).unwrap();
        assert_eq!(back, m);
        assert_eq!(back_info, info);
    }

    fn corrupt_cases(bytes: &[u8], kind: &str, decode: impl Fn(&Path, &[u8]) -> Result<()>) {
        let p = Path::new("x.bin");
        let mut bad = bytes.to_vec();
        bad[..4].copy_from_slice(b"XXXX");
        let err = decode(p, &bad).unwrap_err();
        assert!(matches!(err, Error::BadMagic { .. }));
        assert_eq!(err.to_string(), format!("x.bin: not a {kind} file"));

        let mut bad = bytes.to_vec();
        bad[6..10].copy_from_slice(&999u32.to_le_bytes());
        assert!(matches!(
            decode(p, &bad).unwrap_err(),
            Error::UnsupportedVersion { found: 999, supported: 1, .. }
        ));

        for cut in [bytes.len() - 1, bytes.len() - 8, PREAMBLE + 3, 12] {
            match decode(p, &bytes[..cut]).unwrap_err() {
                Error::Truncated { expected, actual, .. } => {
                    assert_eq!(actual, cut as u64);
                    assert!(expected > actual);
                }
                e => panic!("cut at {cut}: {e}"),
            }
        }
        let mut long = bytes.to_vec();
        long.push(0);
        assert!(matches!(decode(p, &long).unwrap_err(), Error::Malformed { .. }));
        assert!(matches!(decode(p, b"").unwrap_err(), Error::Truncated { .. }));
        assert!(matches!(decode(p, b"WX").unwrap_err(), Error::BadMagic { .. }));
    }

    #[test]
    fn corrupted_files_raise_specific_errors() {
        let t = encode_trajectory(&sample_trajectory()).unwrap();
        corrupt_cases(&t, "trajectory", |p, b| decode_trajectory(p, b).map(|_| ()));
        let b = encode_basis(&sample_basis()).unwrap();
        corrupt_cases(&b, "basis", |p, b| decode_basis(p, b).map(|_| ()));
        let c = encode_checkpoint(&tiny_model(), &serde_json::Value::Null).unwrap();
        corrupt_cases(&c, "checkpoint", |p, b| decode_checkpoint(p, b).map(|_| ()));
    }

    #[test]
    fn truncated_payload_reports_byte_counts() {
        let t = sample_trajectory();
        let bytes = encode_trajectory(&t).unwrap();
        let cut = bytes.len() - 20;
        match decode_trajectory(Path::new("t"), &bytes[..cut]).unwrap_err() {
            Error::Truncated { expected, actual, .. } => {
                assert_eq!(expected, bytes.len() as u64);
                assert_eq!(actual, cut as u64);
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn cut_inside_magic_is_truncation() {
        let bytes = encode_trajectory(&sample_trajectory()).unwrap();
        for cut in [0, 3] {
            let err = decode_trajectory(Path::new("t"), &bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Truncated { expected: 6, .. }), "{err}");
        }
        let err = decode_trajectory(Path::new("t"), b"XX").unwrap_err();
        assert!(matches!(err, Error::BadMagic { .. }), "{err}");
    }

    #[test]
    fn wrong_kind_is_bad_magic() {
        let b = encode_basis(&sample_basis()).unwrap();
        assert!(matches!(
            decode_trajectory(Path::new("b"), &b).unwrap_err(),
            Error::BadMagic { kind: "trajectory", .. }
        ));
    }

    #[test]
    fn atomic_write_replaces_whole_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f");
        write_atomic(&p, b"first version").unwrap();
        write_atomic(&p, b"2").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"2");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
        assert!(load_trajectory(&dir.path().join("missing")).is_err());
    }
}
