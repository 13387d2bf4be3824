//! Binary checkpoint format.
//!
//! Little-endian layout:
//!
//! ```text
//! magic   b"TOUC"
//! version u32 (currently 1)
//! config  char_vocab_size u32, d_model u32, n_heads u32,
//!         layers a/b/c u32 x3, max_seq_len u32,
//!         boundary_prior f64, gumbel_temperature f64, prior_loss_weight f64
//! params  for each tensor in visit_params order:
//!         rank u32, dims u32 x rank, payload f32 x numel
//! ```
//!
//! Payloads are stored at f32; loading widens back to f64. A model whose
//! parameters are already f32-quantized therefore round-trips exactly, and
//! two consecutive round trips of any model produce bit-identical parameters
//! and hence bit-identical eval logits.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ToucanModel};
use crate::numerics::RngState;

const MAGIC: &[u8; 4] = b"TOUC";
const VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CheckpointTruncated {
                reading: what.to_string(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn save(model: &ToucanModel, path: &Path) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = &model.config;
    for v in [
        cfg.char_vocab_size,
        cfg.d_model,
        cfg.n_heads,
        cfg.layers.0,
        cfg.layers.1,
        cfg.layers.2,
        cfg.max_seq_len,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in [cfg.boundary_prior, cfg.gumbel_temperature, cfg.prior_loss_weight] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (_, t) in model.visit_params() {
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Load a checkpoint. The config stored in the file wins; if `expected`
/// differs, each differing field is reported in the returned warning list.
pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<(ToucanModel, Vec<String>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    // Magic is checked before anything is parsed or allocated.
    if bytes.len() < 4 || &bytes[0..4] != MAGIC {
        return Err(Error::CheckpointBadMagic);
    }
    let mut r = Reader {
        buf: &bytes,
        pos: 4,
    };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: VERSION,
        });
    }
    let char_vocab_size = r.u32("char_vocab_size")? as usize;
    let d_model = r.u32("d_model")? as usize;
    let n_heads = r.u32("n_heads")? as usize;
    let a = r.u32("layers.0")? as usize;
    let b = r.u32("layers.1")? as usize;
    let c = r.u32("layers.2")? as usize;
    let max_seq_len = r.u32("max_seq_len")? as usize;
    let boundary_prior = r.f64("boundary_prior")?;
    let gumbel_temperature = r.f64("gumbel_temperature")?;
    let prior_loss_weight = r.f64("prior_loss_weight")?;
    let config = ModelConfig {
        char_vocab_size,
        d_model,
        n_heads,
        layers: (a, b, c),
        boundary_prior,
        gumbel_temperature,
        prior_loss_weight,
        max_seq_len,
    };
    config.validate()?;

    let mut warnings = Vec::new();
    if let Some(exp) = expected {
        if *exp != config {
            warnings.push(format!(
                "checkpoint config overrides caller config: file {config:?} vs caller {exp:?}"
            ));
        }
    }

    let mut model = ToucanModel::new(config, &mut RngState::new(0))?;
    for (name, t) in model.visit_params_mut() {
        let rank = r.u32(&format!("{name} rank"))? as usize;
        let mut dims = Vec::with_capacity(rank);
        for i in 0..rank {
            dims.push(r.u32(&format!("{name} dim {i}"))? as usize);
        }
        if dims != t.shape() {
            return Err(Error::CheckpointShape {
                name,
                found: dims,
                expected: t.shape().to_vec(),
            });
        }
        let numel: usize = dims.iter().product();
        let payload = r.take(numel * 4, &format!("{name} payload"))?;
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            let b = &payload[i * 4..(i + 1) * 4];
            *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::InvalidArgument(format!(
            "checkpoint has {} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok((model, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::inference::eval_forward;

    fn small_model(seed: u64) -> ToucanModel {
        let mut rng = RngState::new(seed);
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 2,
            layers: (1, 2, 1),
            max_seq_len: 32,
            ..ModelConfig::default()
        };
        let mut m = ToucanModel::new(cfg, &mut rng).unwrap();
        m.randomize(0.05, &mut rng);
        m
    }

    #[test]
    fn round_trip_reproduces_logits_at_f32() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("m1.touc");
        let p2 = dir.path().join("m2.touc");
        let model = small_model(7);
        save(&model, &p1).unwrap();
        let (m1, warns) = load(&p1, None).unwrap();
        assert!(warns.is_empty());
        save(&m1, &p2).unwrap();
        let (m2, _) = load(&p2, None).unwrap();

        let ids: Vec<u8> = vec![0, 5, 12, 19, 26, 3, 3, 8];
        let l1 = eval_forward(&m1, &ids).unwrap().logits;
        let l2 = eval_forward(&m2, &ids).unwrap().logits;
        assert_eq!(l1.len(), l2.len());
        for (a, b) in l1.iter().zip(&l2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn corrupted_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.touc");
        fs::write(&p, b"NOPErest-of-garbage").unwrap();
        match load(&p, None) {
            Err(Error::CheckpointBadMagic) => {}
            other => panic!("expected bad magic, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_and_truncation_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let model = small_model(1);
        let p = dir.path().join("m.touc");
        save(&model, &p).unwrap();
        let bytes = fs::read(&p).unwrap();

        let mut bad_version = bytes.clone();
        bad_version[4..8].copy_from_slice(&99u32.to_le_bytes());
        let pv = dir.path().join("v.touc");
        fs::write(&pv, &bad_version).unwrap();
        assert!(matches!(
            load(&pv, None),
            Err(Error::CheckpointVersion { found: 99, .. })
        ));

        let pt = dir.path().join("t.touc");
        fs::write(&pt, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(load(&pt, None), Err(Error::CheckpointTruncated { .. })));
    }

    #[test]
    fn file_config_overrides_caller_with_warning() {
        let dir = tempfile::tempdir().unwrap();
        let model = small_model(2);
        let p = dir.path().join("m.touc");
        save(&model, &p).unwrap();
        let mut other = model.config.clone();
        other.boundary_prior = 0.05;
        let (loaded, warns) = load(&p, Some(&other)).unwrap();
        assert_eq!(loaded.config, model.config);
        assert_eq!(warns.len(), 1);
        assert!(warns[0].contains("overrides"));
    }
}
