//! Versioned binary model checkpoints.
//!
//! Layout: the 8-byte magic `LCAPCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a JSON header (model spec,
//! parameter names and shapes, optional normalizer statistics), then every
//! parameter value as little-endian `f64` in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::NormalizerStats;
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LCAPCKPT";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    params: Vec<(String, Vec<usize>)>,
    normalizer: Option<NormalizerStats>,
}

pub fn to_bytes(model: &Model, normalizer: Option<&NormalizerStats>) -> Vec<u8> {
    let params = model.parameters();
    let header = Header {
        spec: model.spec().clone(),
        params: params.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect(),
        normalizer: normalizer.cloned(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + json.len() + 8 * model.parameter_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in params {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Model, Option<NormalizerStats>)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..).ok_or_else(|| bad("truncated"))?;
    let json = body.get(..len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let mut values = body[len..].chunks_exact(8);
    if !values.remainder().is_empty() {
        return Err(bad("trailing bytes"));
    }
    let mut named = Vec::with_capacity(header.params.len());
    for (name, shape) in header.params {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = values
            .by_ref()
            .take(n)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if data.len() != n {
            return Err(bad("truncated parameter data"));
        }
        named.push((name, Tensor::new(shape, data)?));
    }
    if values.next().is_some() {
        return Err(bad("more parameter data than the header declares"));
    }
    let mut model = Model::build(&header.spec)?;
    model.set_parameters(named)?;
    Ok((model, header.normalizer))
}

pub fn save(path: &Path, model: &Model, normalizer: Option<&NormalizerStats>) -> Result<()> {
    fs::write(path, to_bytes(model, normalizer)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Model, Option<NormalizerStats>)> {
    from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{ModelRng, Routing};
    use crate::model::{Design, Mode};
    use crate::testing::random_tensor;
    use rand::SeedableRng;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ModelRng::seed_from_u64(5);
        for d in Design::ALL {
            let spec = ModelSpec {
                timesteps: 3,
                branch_width: 2,
                capsule_dim: 3,
                routing: Routing::Dynamic { iterations: 2 },
                ..ModelSpec::new(d, 2)
            };
            let mut m = Model::build(&spec).unwrap();
            // Perturb so the check does not just rebuild from the seed.
            for t in m.parameters_mut() {
                *t = t.map(|v| v + 0.123_456_789);
            }
            let stats = NormalizerStats {
                mu: vec![0.1, -3.0],
                sigma: vec![1.0 / 3.0, 0.0],
            };
            let p = dir.path().join(format!("{d}.ckpt"));
            save(&p, &m, Some(&stats)).unwrap();
            let (back, s) = load(&p).unwrap();
            assert_eq!(back, m);
            assert_eq!(s.unwrap(), stats);
            let x = random_tensor(&[2, 3, 2], 1.0, &mut rng);
            let a = m.forward(&x, Mode::Inference).unwrap();
            let b = back.forward(&x, Mode::Inference).unwrap();
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let m = Model::build(&ModelSpec {
            timesteps: 2,
            branch_width: 1,
            capsule_dim: 1,
            ..ModelSpec::new(Design::D, 1)
        })
        .unwrap();
        let bytes = to_bytes(&m, None);
        assert!(from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.extend_from_slice(&0f64.to_le_bytes());
        assert!(from_bytes(&extra).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(from_bytes(&wrong).is_err());
        let mut newer = bytes;
        newer[8] = 9;
        assert!(matches!(from_bytes(&newer), Err(Error::Checkpoint(_))));
    }
}
