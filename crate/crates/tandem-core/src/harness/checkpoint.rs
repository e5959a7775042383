//! Binary checkpoint container.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! magic   b"TNDM"
//! version u32 (currently 1)
//! count   u32
//! tensor* name_len u32, name utf-8, rank u32, dims u32*, payload f32*
//! crc     u32  -- CRC-32 (IEEE) of everything between version and crc
//! ```
//!
//! Tensors are written sorted by name, so save -> load -> save is
//! byte-identical. Model/router configs ride along as reserved `meta.*`
//! scalar tensors and are stripped again on load.

use crate::deeptandem::DeepTandemConfig;
use crate::error::{Error, Result};
use crate::nncore::param::ParameterStore;
use crate::nncore::tensor::Tensor;
use crate::router::RouterConfig;
use crate::tandem::TandemConfig;
use crate::transformer::DecoderConfig;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"TNDM";
pub const FORMAT_VERSION: u32 = 1;

fn crc32_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut c = i as u32;
        let mut k = 0;
        while k < 8 {
            c = if c & 1 != 0 { 0xedb8_8320 ^ (c >> 1) } else { c >> 1 };
            k += 1;
        }
        table[i] = c;
        i += 1;
    }
    table
}

/// CRC-32 (IEEE 802.3, reflected).
pub fn crc32(data: &[u8]) -> u32 {
    static TABLE: std::sync::OnceLock<[u32; 256]> = std::sync::OnceLock::new();
    let table = TABLE.get_or_init(crc32_table);
    let mut c = 0xffff_ffffu32;
    for &b in data {
        c = table[((c ^ b as u32) & 0xff) as usize] ^ (c >> 8);
    }
    c ^ 0xffff_ffff
}

/// Serialize the store's tensors (sorted by name) to `path`.
pub fn save_checkpoint(store: &ParameterStore<f32>, path: &Path) -> Result<()> {
    let named = store.sorted_named();
    let mut body: Vec<u8> = Vec::new();
    body.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, tensor) in named {
        let nb = name.as_bytes();
        body.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        body.extend_from_slice(nb);
        body.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            body.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&body)?;
    w.write_all(&crc32(&body).to_le_bytes())?;
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Corrupt(format!(
                "truncated: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.data.len() - self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Load a checkpoint, verifying magic, version and CRC.
pub fn load_checkpoint(path: &Path) -> Result<ParameterStore<f32>> {
    let mut raw = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut raw)?;
    if raw.len() < 12 {
        return Err(Error::Corrupt("file shorter than header".into()));
    }
    if &raw[0..4] != MAGIC {
        return Err(Error::Corrupt("bad magic".into()));
    }
    let version = u32::from_le_bytes([raw[4], raw[5], raw[6], raw[7]]);
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            got: version,
            expected: FORMAT_VERSION,
        });
    }
    let body = &raw[8..raw.len() - 4];
    let stored_crc = u32::from_le_bytes([
        raw[raw.len() - 4],
        raw[raw.len() - 3],
        raw[raw.len() - 2],
        raw[raw.len() - 1],
    ]);
    let actual = crc32(body);
    if actual != stored_crc {
        return Err(Error::Corrupt(format!(
            "crc mismatch: stored {stored_crc:#010x}, computed {actual:#010x}"
        )));
    }

    let mut cur = Cursor { data: body, pos: 0 };
    let count = cur.u32()? as usize;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|e| Error::Corrupt(format!("bad tensor name: {e}")))?
            .to_string();
        let rank = cur.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let payload = cur.take(n * 4)?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        store.insert(name, Tensor::new(dims, data)?)?;
    }
    if cur.pos != body.len() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after last tensor",
            body.len() - cur.pos
        )));
    }
    Ok(store)
}

/// What a checkpoint file contains.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind {
    Standalone(DecoderConfig),
    Tandem(TandemConfig),
    Deep(DeepTandemConfig),
    Router { cfg: RouterConfig, in_dim: usize },
    RouterDataset,
}

fn push_scalar(store: &mut ParameterStore<f32>, name: &str, v: f64) -> Result<()> {
    store.insert(name, Tensor::scalar(v as f32))?;
    Ok(())
}

fn push_decoder(store: &mut ParameterStore<f32>, prefix: &str, cfg: &DecoderConfig) -> Result<()> {
    push_scalar(store, &format!("{prefix}.vocab_size"), cfg.vocab_size as f64)?;
    push_scalar(store, &format!("{prefix}.d_model"), cfg.d_model as f64)?;
    push_scalar(store, &format!("{prefix}.n_layers"), cfg.n_layers as f64)?;
    push_scalar(store, &format!("{prefix}.n_heads"), cfg.n_heads as f64)?;
    push_scalar(store, &format!("{prefix}.d_ff"), cfg.d_ff as f64)?;
    push_scalar(store, &format!("{prefix}.max_context"), cfg.max_context as f64)?;
    Ok(())
}

fn read_scalar(store: &ParameterStore<f32>, name: &str) -> Result<f64> {
    Ok(store.value(store.id(name)?).data()[0] as f64)
}

fn read_decoder(store: &ParameterStore<f32>, prefix: &str) -> Result<DecoderConfig> {
    Ok(DecoderConfig {
        vocab_size: read_scalar(store, &format!("{prefix}.vocab_size"))? as usize,
        d_model: read_scalar(store, &format!("{prefix}.d_model"))? as usize,
        n_layers: read_scalar(store, &format!("{prefix}.n_layers"))? as usize,
        n_heads: read_scalar(store, &format!("{prefix}.n_heads"))? as usize,
        d_ff: read_scalar(store, &format!("{prefix}.d_ff"))? as usize,
        max_context: read_scalar(store, &format!("{prefix}.max_context"))? as usize,
    })
}

/// Save a model with its architecture riding along as `meta.*` tensors.
pub fn save_model(path: &Path, kind: &ModelKind, store: &ParameterStore<f32>) -> Result<()> {
    let mut full = store.clone();
    match kind {
        ModelKind::Standalone(cfg) => {
            push_scalar(&mut full, "meta.kind", 1.0)?;
            push_decoder(&mut full, "meta.model", cfg)?;
        }
        ModelKind::Tandem(cfg) => {
            push_scalar(&mut full, "meta.kind", 2.0)?;
            push_decoder(&mut full, "meta.primary", &cfg.primary)?;
            push_decoder(&mut full, "meta.secondary", &cfg.secondary)?;
            push_scalar(&mut full, "meta.gamma", cfg.gamma as f64)?;
            push_scalar(&mut full, "meta.free_token", f64::from(cfg.free_token))?;
            let map: Vec<f32> = cfg.layer_map.iter().map(|&m| m as f32).collect();
            full.insert("meta.layer_map", Tensor::new(vec![map.len()], map)?)?;
        }
        ModelKind::Deep(cfg) => {
            push_scalar(&mut full, "meta.kind", 3.0)?;
            push_decoder(&mut full, "meta.large", &cfg.large)?;
            push_decoder(&mut full, "meta.small", &cfg.small)?;
            push_scalar(&mut full, "meta.gamma", cfg.gamma as f64)?;
            push_scalar(&mut full, "meta.begin_token", cfg.begin_token as f64)?;
        }
        ModelKind::Router { cfg, in_dim } => {
            push_scalar(&mut full, "meta.kind", 4.0)?;
            push_scalar(&mut full, "meta.router.k", cfg.k as f64)?;
            push_scalar(&mut full, "meta.router.hidden_dim", cfg.hidden_dim as f64)?;
            push_scalar(&mut full, "meta.router.tau", cfg.tau)?;
            push_scalar(&mut full, "meta.router.gamma_max", cfg.gamma_max as f64)?;
            push_scalar(
                &mut full,
                "meta.router.threshold_on_disagreement",
                f64::from(cfg.threshold_on_disagreement),
            )?;
            push_scalar(&mut full, "meta.router.in_dim", *in_dim as f64)?;
        }
        ModelKind::RouterDataset => {
            push_scalar(&mut full, "meta.kind", 5.0)?;
        }
    }
    save_checkpoint(&full, path)
}

/// Load a checkpoint written by [`save_model`]; strips the `meta.*` tensors
/// and reconstructs the architecture description.
pub fn load_model(path: &Path) -> Result<(ModelKind, ParameterStore<f32>)> {
    let full = load_checkpoint(path)?;
    let kind_code = read_scalar(&full, "meta.kind")? as u32;
    let kind = match kind_code {
        1 => ModelKind::Standalone(read_decoder(&full, "meta.model")?),
        2 => {
            let primary = read_decoder(&full, "meta.primary")?;
            let secondary = read_decoder(&full, "meta.secondary")?;
            let gamma = read_scalar(&full, "meta.gamma")? as usize;
            let free_token = read_scalar(&full, "meta.free_token")? != 0.0;
            let map_t = full.value(full.id("meta.layer_map")?);
            let layer_map = map_t.data().iter().map(|&m| m as usize).collect();
            ModelKind::Tandem(TandemConfig {
                primary,
                secondary,
                gamma,
                layer_map,
                free_token,
            })
        }
        3 => ModelKind::Deep(DeepTandemConfig {
            large: read_decoder(&full, "meta.large")?,
            small: read_decoder(&full, "meta.small")?,
            gamma: read_scalar(&full, "meta.gamma")? as usize,
            begin_token: read_scalar(&full, "meta.begin_token")? as usize,
        }),
        4 => ModelKind::Router {
            cfg: RouterConfig {
                k: read_scalar(&full, "meta.router.k")? as usize,
                hidden_dim: read_scalar(&full, "meta.router.hidden_dim")? as usize,
                tau: read_scalar(&full, "meta.router.tau")?,
                gamma_max: read_scalar(&full, "meta.router.gamma_max")? as usize,
                threshold_on_disagreement: read_scalar(&full, "meta.router.threshold_on_disagreement")?
                    != 0.0,
            },
            in_dim: read_scalar(&full, "meta.router.in_dim")? as usize,
        },
        5 => ModelKind::RouterDataset,
        other => {
            return Err(Error::Corrupt(format!("unknown model kind code {other}")));
        }
    };
    let mut store = ParameterStore::new();
    for (_, p) in full.iter() {
        if !p.name.starts_with("meta.") {
            store.insert(p.name.clone(), p.value.clone())?;
        }
    }
    Ok((kind, store))
}

/// Copy every `src_prefix.*` tensor of `src` into `dst` under `dst_prefix`,
/// overwriting existing values (shapes must match).
pub fn import_with_prefix(
    src: &ParameterStore<f32>,
    src_prefix: &str,
    dst: &mut ParameterStore<f32>,
    dst_prefix: &str,
) -> Result<usize> {
    let mut copied = 0;
    for (_, p) in src.iter() {
        if let Some(rest) = p.name.strip_prefix(src_prefix) {
            let target = format!("{dst_prefix}{rest}");
            let id = dst.id(&target)?;
            if dst.value(id).shape() != p.value.shape() {
                return Err(Error::shape(
                    format!("{:?}", dst.value(id).shape()),
                    format!("{:?}", p.value.shape()),
                    "import_with_prefix",
                ));
            }
            *dst.value_mut(id) = p.value.clone();
            copied += 1;
        }
    }
    if copied == 0 {
        return Err(Error::UnknownParameter(format!("no tensors under '{src_prefix}'")));
    }
    Ok(copied)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::rng::CounterRng;

    fn demo_store(seed: u64) -> ParameterStore<f32> {
        let mut store = ParameterStore::new();
        let mut rng = CounterRng::new(seed, 0);
        store.insert_normal("b.weight", vec![3, 4], 1.0, &mut rng).unwrap();
        store.insert_normal("a.bias", vec![4], 1.0, &mut rng).unwrap();
        store.insert_normal("c.emb", vec![5, 2], 1.0, &mut rng).unwrap();
        store
    }

    #[test]
    fn round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let store = demo_store(1);
        save_checkpoint(&store, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.len(), store.len());
        for (_, p) in store.iter() {
            let lid = loaded.id(&p.name).unwrap();
            let l = loaded.value(lid);
            assert_eq!(l.shape(), p.value.shape());
            for (a, b) in l.data().iter().zip(p.value.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        // and saving again produces identical bytes
        let path2 = dir.path().join("m2.ckpt");
        save_checkpoint(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn crc_catches_payload_flip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&demo_store(2), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Corrupt(_))));
    }

    #[test]
    fn version_bump_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&demo_store(3), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 2;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::VersionMismatch { got: 2, expected: 1 })
        ));
    }

    #[test]
    fn truncation_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&demo_store(4), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn crc32_known_vector() {
        // standard test vector: crc32("123456789") = 0xcbf43926
        assert_eq!(crc32(b"123456789"), 0xcbf4_3926);
    }

    #[test]
    fn model_kind_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let cfg = DecoderConfig {
            vocab_size: 11,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 12,
            max_context: 16,
        };
        let kind = ModelKind::Standalone(cfg.clone());
        let store = demo_store(5);
        save_model(&path, &kind, &store).unwrap();
        let (loaded_kind, loaded) = load_model(&path).unwrap();
        assert_eq!(loaded_kind, kind);
        assert_eq!(loaded.len(), store.len());
        assert!(loaded.id("meta.kind").is_err());
    }
}
