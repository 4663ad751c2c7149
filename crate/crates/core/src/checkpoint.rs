//! Binary checkpoint container.
//!
//! Layout (little endian):
//!
//! ```text
//! magic "ADRCKPT\n" | version u32 | seed u64
//! vocab_size u64 | embed_dim u64 | hidden u64 | drug_classes u64 | flags u8
//! tensor_count u32 | { name_len u32, name, rows u64, cols u64, rows*cols f64 }*
//! vocab_len u64 | { len u32, utf8 }*
//! drug_len u64 | { len u32, utf8 }*
//! "END\n"
//! ```
//!
//! Flags: bit 0 gate biases, bit 1 trainable embeddings, bit 2 sum pooling.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{AdrTagger, ModelConfig, Pooling};
use crate::numerics::Matrix;
use crate::text::Vocabulary;

const MAGIC: &[u8; 8] = b"ADRCKPT\n";
const END: &[u8; 4] = b"END\n";
pub const FORMAT_VERSION: u32 = 1;

/// A model together with the vocabulary and drug catalog it was built on.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: AdrTagger,
    pub vocab: Vocabulary,
    pub drugs: Vec<String>,
}

impl Checkpoint {
    /// Errors unless the stored dimensions equal the expected ones.
    pub fn expect_dims(&self, embed_dim: usize, hidden: usize) -> Result<()> {
        let cfg = &self.model.config;
        if cfg.embed_dim != embed_dim || cfg.hidden != hidden {
            return Err(Error::Checkpoint(format!(
                "shape mismatch: checkpoint has embed {} hidden {}, expected embed {embed_dim} hidden {hidden}",
                cfg.embed_dim, cfg.hidden
            )));
        }
        Ok(())
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn strings(&mut self, items: &[String]) {
        self.u64(items.len() as u64);
        for s in items {
            self.str(s);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated file: needed {n} bytes at offset {}", self.pos))
        })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("size does not fit in memory".into()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }
    fn strings(&mut self) -> Result<Vec<String>> {
        let n = self.usize()?;
        if n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file: string table too long".into()));
        }
        (0..n).map(|_| self.str()).collect()
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let model = &ckpt.model;
    let cfg = &model.config;
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    w.u64(model.seed);
    w.u64(cfg.vocab_size as u64);
    w.u64(cfg.embed_dim as u64);
    w.u64(cfg.hidden as u64);
    w.u64(cfg.drug_classes as u64);
    let flags = u8::from(cfg.gate_biases)
        | (u8::from(cfg.train_embeddings) << 1)
        | (u8::from(cfg.pooling == Pooling::Sum) << 2);
    w.u8(flags);
    let tensors = model.tensors();
    w.u32(tensors.len() as u32);
    for (name, m) in tensors {
        w.str(&name);
        w.u64(m.rows() as u64);
        w.u64(m.cols() as u64);
        for v in m.as_slice() {
            w.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.strings(ckpt.vocab.tokens());
    w.strings(&ckpt.drugs);
    w.0.extend_from_slice(END);
    w.0
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let seed = r.u64()?;
    let vocab_size = r.usize()?;
    let embed_dim = r.usize()?;
    let hidden = r.usize()?;
    let drug_classes = r.usize()?;
    let flags = r.u8()?;
    let config = ModelConfig {
        vocab_size,
        embed_dim,
        hidden,
        drug_classes,
        gate_biases: flags & 1 != 0,
        train_embeddings: flags & 2 != 0,
        pooling: if flags & 4 != 0 { Pooling::Sum } else { Pooling::Mean },
    };
    let mut model = AdrTagger::zeros(config, seed).map_err(|e| Error::Checkpoint(e.to_string()))?;

    let count = r.u32()? as usize;
    let mut slots = model.tensors_mut();
    if count != slots.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, file has {count}",
            slots.len()
        )));
    }
    for (name, slot) in slots.iter_mut() {
        let got = r.str()?;
        if got != *name {
            return Err(Error::Checkpoint(format!("expected tensor {name}, found {got}")));
        }
        let (rows, cols) = (r.usize()?, r.usize()?);
        if (rows, cols) != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {name}: file {rows}x{cols}, model {}x{}",
                slot.rows(),
                slot.cols()
            )));
        }
        let raw = r.take(rows * cols * 8)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        **slot = Matrix::from_vec(rows, cols, values)?;
    }
    drop(slots);

    let tokens = r.strings()?;
    let vocab = Vocabulary::from_tokens(tokens.iter().skip(crate::text::SENTINELS.len()).cloned());
    if vocab.tokens() != tokens.as_slice() || vocab.len() != vocab_size {
        return Err(Error::Checkpoint("vocabulary table does not match the model".into()));
    }
    let drugs = r.strings()?;
    if drugs.len() != drug_classes {
        return Err(Error::Checkpoint(format!(
            "drug catalog has {} names, model expects {drug_classes}",
            drugs.len()
        )));
    }
    if r.take(END.len())? != END.as_slice() || r.pos != bytes.len() {
        return Err(Error::Checkpoint("missing end marker or trailing bytes".into()));
    }
    Ok(Checkpoint { model, vocab, drugs })
}

/// Writes via a temporary file and rename, so readers never see a partial file.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ckpt);
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Parameterized;

    fn sample(hidden: usize, seed: u64) -> Checkpoint {
        let vocab = Vocabulary::from_tokens(["pain", "sleepy", "ok"]);
        let mut cfg = ModelConfig::new(vocab.len(), 4, hidden, 2);
        cfg.pooling = Pooling::Sum;
        Checkpoint {
            model: AdrTagger::new(cfg, seed).unwrap(),
            vocab,
            drugs: vec!["effexor".into(), "paxil".into()],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ckpt = sample(3, 77);
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
        for ((_, a), (_, b)) in back.model.parameters().iter().zip(ckpt.model.parameters()) {
            let bits = |m: &Matrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
        assert_eq!(encode_checkpoint(&back), std::fs::read(&path).unwrap());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = encode_checkpoint(&sample(3, 1));
        for cut in [0, 7, 20, bytes.len() / 2, bytes.len() - 1] {
            let err = decode_checkpoint(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Checkpoint(_)), "cut {cut}: {err}");
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut bytes = encode_checkpoint(&sample(3, 1));
        bytes[8] = 9;
        let err = decode_checkpoint(&bytes).unwrap_err();
        assert!(err.to_string().contains("version 9"), "{err}");
    }

    #[test]
    fn dimension_expectation() {
        let ckpt = sample(5, 1);
        assert!(ckpt.expect_dims(4, 5).is_ok());
        let err = ckpt.expect_dims(4, 3).unwrap_err();
        assert!(err.to_string().contains("hidden 5"), "{err}");
    }
}
