//! Versioned little-endian checkpoint container.
//!
//! ```text
//! "SRCK" | version u32 | kind u8 | header: u32 count, u32 values
//! tensors: u32 count, { name u16+utf8 | ndim u8 | dims u32.. | f32 data }
//! records: u32 count, { key u16+utf8 | value u32+utf8 }
//! ```
//!
//! A `.meta` text sidecar next to the file holds `step`, `final_loss` and
//! `vocab_hash`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::ParamStore;
use crate::bslm::{BslmCheckpoint, Direction, SlmDims, SlmModel, TrainingMeta};
use crate::config::{Integration, Side};
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::nmt::{IntegrationConfig, NmtDims, NmtModel};
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 4] = b"SRCK";
const VERSION: u32 = 1;
const KIND_BSLM: u8 = 1;
const KIND_NMT: u8 = 2;
const HAS_FORWARD: u32 = 1;
const HAS_BACKWARD: u32 = 2;

/// Decoded container contents.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub kind: u8,
    pub header: Vec<u32>,
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub records: BTreeMap<String, String>,
}

fn put_u16(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u16::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} does not fit u16")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} does not fit u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind);
        put_u32(&mut out, self.header.len())?;
        for &h in &self.header {
            out.extend_from_slice(&h.to_le_bytes());
        }
        put_u32(&mut out, self.tensors.len())?;
        for (name, t) in &self.tensors {
            put_u16(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            out.push(u8::try_from(t.ndim()).map_err(|_| Error::Checkpoint("too many dimensions".into()))?);
            for &d in t.shape() {
                put_u32(&mut out, d)?;
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        put_u32(&mut out, self.records.len())?;
        for (k, v) in &self.records {
            put_u16(&mut out, k.len())?;
            out.extend_from_slice(k.as_bytes());
            put_u32(&mut out, v.len())?;
            out.extend_from_slice(v.as_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let kind = r.take(1)?[0];
        let header = (0..r.u32()?).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let mut tensors = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.string16()?;
            let ndim = r.take(1)?[0] as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
            tensors.push((name, t));
        }
        let mut records = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string16()?;
            let len = r.u32()? as usize;
            let v = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint(format!("record `{k}` is not UTF-8")))?;
            records.insert(k, v);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            kind,
            header,
            tensors,
            records,
        })
    }

    fn record(&self, key: &str) -> Result<&str> {
        self.records
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing record `{key}`")))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string16(&mut self) -> Result<String> {
        let b = self.take(2)?;
        let len = u16::from_le_bytes([b[0], b[1]]) as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }
}

fn export_store<T: Scalar>(store: &ParamStore<T>, out: &mut Vec<(String, Tensor<f32>)>) {
    for (_, p) in store.iter() {
        out.push((p.name.clone(), p.value.cast()));
    }
}

/// Overwrites every parameter of `store` with the tensor of the same name.
fn import_store<T: Scalar>(store: &mut ParamStore<T>, tensors: &BTreeMap<&str, &Tensor<f32>>) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let t = tensors
            .get(name.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        if t.shape() != store.get(id).shape() {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                t.shape(),
                store.get(id).shape()
            )));
        }
        *store.get_mut(id) = t.cast();
    }
    Ok(())
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

fn write_meta(path: &Path, meta: &TrainingMeta, vocab_hash: &str) -> Result<()> {
    let text = format!(
        "step={}\nfinal_loss={}\nvocab_hash={}\n",
        meta.steps, meta.final_loss, vocab_hash
    );
    fs::write(meta_path(path), text)?;
    Ok(())
}

fn meta_records(meta: &TrainingMeta, records: &mut BTreeMap<String, String>) {
    records.insert("steps".into(), meta.steps.to_string());
    records.insert("final_loss".into(), format!("{:?}", meta.final_loss));
}

fn read_meta(c: &Container) -> Result<TrainingMeta> {
    let parse_err = |k: &str| Error::Checkpoint(format!("record `{k}` is malformed"));
    Ok(TrainingMeta {
        steps: c.record("steps")?.parse().map_err(|_| parse_err("steps"))?,
        final_loss: c.record("final_loss")?.parse().map_err(|_| parse_err("final_loss"))?,
    })
}

fn header(c: &Container, kind: u8, len: usize) -> Result<&[u32]> {
    if c.kind != kind {
        return Err(Error::Checkpoint(format!("checkpoint kind {} where {kind} was expected", c.kind)));
    }
    if c.header.len() != len {
        return Err(Error::Checkpoint(format!("header has {} fields, expected {len}", c.header.len())));
    }
    Ok(&c.header)
}

impl<T: Scalar> BslmCheckpoint<T> {
    pub fn to_container(&self) -> Result<Container> {
        let d = self.dims();
        let mut tensors = Vec::new();
        export_store(&self.forward.store, &mut tensors);
        export_store(&self.backward.store, &mut tensors);
        let mut records = BTreeMap::new();
        records.insert("vocab".into(), self.vocab.to_text());
        meta_records(&self.meta, &mut records);
        Ok(Container {
            kind: KIND_BSLM,
            header: vec![
                d.layers as u32,
                d.d as u32,
                d.heads as u32,
                d.vocab as u32,
                HAS_FORWARD | HAS_BACKWARD,
                d.d_ff as u32,
            ],
            tensors,
            records,
        })
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let h = header(c, KIND_BSLM, 6)?;
        if h[4] != HAS_FORWARD | HAS_BACKWARD {
            return Err(Error::Checkpoint("checkpoint lacks one of the directional models".into()));
        }
        let dims = SlmDims {
            layers: h[0] as usize,
            d: h[1] as usize,
            heads: h[2] as usize,
            vocab: h[3] as usize,
            d_ff: h[5] as usize,
        };
        let vocab = Vocabulary::from_text(c.record("vocab")?)?;
        let tensors: BTreeMap<&str, &Tensor<f32>> = c.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut forward = SlmModel::new(Direction::Forward, dims, &mut rng)?;
        let mut backward = SlmModel::new(Direction::Backward, dims, &mut rng)?;
        import_store(&mut forward.store, &tensors)?;
        import_store(&mut backward.store, &tensors)?;
        BslmCheckpoint::new(forward, backward, vocab, read_meta(c)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_container()?.to_bytes()?)?;
        write_meta(path, &self.meta, &self.vocab_hash())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::from_bytes(&fs::read(path)?)?)
    }
}

/// A trained translation model with everything needed to run it.
#[derive(Clone, Debug)]
pub struct NmtCheckpoint<T> {
    pub model: NmtModel<T>,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    /// Vocabulary hashes of the language models used in training.
    pub src_lm_hash: Option<String>,
    pub tgt_lm_hash: Option<String>,
    /// Where those language models were loaded from, if known.
    pub src_lm_path: Option<String>,
    pub tgt_lm_path: Option<String>,
    pub meta: TrainingMeta,
}

fn integration_text(i: &IntegrationConfig) -> String {
    format!(
        "fusion={}\nkt={}\nkt_scale={:?}\nuni_directional={}\nfusion_side={}\nkt_side={}\n",
        i.fusion.as_str(),
        i.kt.as_str(),
        i.kt_scale,
        i.uni_directional,
        i.fusion_side.as_str(),
        i.kt_side.as_str()
    )
}

fn parse_integration(text: &str) -> Result<IntegrationConfig> {
    let mut i = IntegrationConfig::default();
    let bad = |k: &str| Error::Checkpoint(format!("integration record `{k}` is malformed"));
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| bad(line))?;
        match k {
            "fusion" => i.fusion = v.parse::<Integration>()?,
            "kt" => i.kt = v.parse::<Integration>()?,
            "kt_scale" => i.kt_scale = v.parse().map_err(|_| bad(k))?,
            "uni_directional" => i.uni_directional = v.parse().map_err(|_| bad(k))?,
            "fusion_side" => i.fusion_side = v.parse::<Side>()?,
            "kt_side" => i.kt_side = v.parse::<Side>()?,
            _ => return Err(bad(k)),
        }
    }
    Ok(i)
}

impl<T: Scalar> NmtCheckpoint<T> {
    pub fn to_container(&self) -> Result<Container> {
        let d = self.model.dims;
        let mut tensors = Vec::new();
        export_store(&self.model.store, &mut tensors);
        let mut records = BTreeMap::new();
        records.insert("src_vocab".into(), self.src_vocab.to_text());
        records.insert("tgt_vocab".into(), self.tgt_vocab.to_text());
        records.insert("integration".into(), integration_text(&self.model.integration));
        let optional = [
            ("src_lm_hash", &self.src_lm_hash),
            ("tgt_lm_hash", &self.tgt_lm_hash),
            ("src_lm_path", &self.src_lm_path),
            ("tgt_lm_path", &self.tgt_lm_path),
        ];
        for (k, v) in optional {
            if let Some(v) = v {
                records.insert(k.into(), v.clone());
            }
        }
        meta_records(&self.meta, &mut records);
        Ok(Container {
            kind: KIND_NMT,
            header: vec![
                d.layers as u32,
                d.lm_layers as u32,
                d.d as u32,
                d.heads as u32,
                d.src_vocab as u32,
                d.tgt_vocab as u32,
                d.d_ff as u32,
            ],
            tensors,
            records,
        })
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let h = header(c, KIND_NMT, 7)?;
        let dims = NmtDims {
            layers: h[0] as usize,
            lm_layers: h[1] as usize,
            d: h[2] as usize,
            heads: h[3] as usize,
            src_vocab: h[4] as usize,
            tgt_vocab: h[5] as usize,
            d_ff: h[6] as usize,
        };
        let integration = parse_integration(c.record("integration")?)?;
        let tensors: BTreeMap<&str, &Tensor<f32>> = c.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut model = NmtModel::new(dims, integration, &mut ChaCha8Rng::seed_from_u64(0))?;
        import_store(&mut model.store, &tensors)?;
        let src_vocab = Vocabulary::from_text(c.record("src_vocab")?)?;
        let tgt_vocab = Vocabulary::from_text(c.record("tgt_vocab")?)?;
        if src_vocab.len() != dims.src_vocab || tgt_vocab.len() != dims.tgt_vocab {
            return Err(Error::Checkpoint("vocabulary sizes disagree with the header".into()));
        }
        let opt = |k: &str| c.records.get(k).cloned();
        Ok(Self {
            model,
            src_vocab,
            tgt_vocab,
            src_lm_hash: opt("src_lm_hash"),
            tgt_lm_hash: opt("tgt_lm_hash"),
            src_lm_path: opt("src_lm_path"),
            tgt_lm_path: opt("tgt_lm_path"),
            meta: read_meta(c)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_container()?.to_bytes()?)?;
        write_meta(path, &self.meta, &self.tgt_vocab.hash())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::from_bytes(&fs::read(path)?)?)
    }

    /// Refuses language models whose vocabulary differs from the ones the
    /// model was trained with.
    pub fn check_language_models<U: Scalar>(
        &self,
        src: Option<&BslmCheckpoint<U>>,
        tgt: Option<&BslmCheckpoint<U>>,
    ) -> Result<()> {
        for (expected, lm) in [(&self.src_lm_hash, src), (&self.tgt_lm_hash, tgt)] {
            if let (Some(expected), Some(lm)) = (expected, lm) {
                let found = lm.vocab_hash();
                if &found != expected {
                    return Err(Error::VocabularyMismatch {
                        expected: expected.clone(),
                        found,
                    });
                }
            }
        }
        Ok(())
    }
}
