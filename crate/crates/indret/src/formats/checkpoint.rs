//! Model checkpoints: magic `IIRM`, format version, the model
//! configuration, then named parameter blobs (mask state as six named
//! scalars per block) and a CRC-32 trailer.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use indret_core::network::{Model, ModelConfig, BlockConfig};
use indret_core::Tensor;

use crate::error::{AppError, Result};
use crate::formats::ndt;

pub const MAGIC: &[u8; 4] = b"IIRM";
pub const VERSION: u16 = 1;

fn put_u16(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u16::try_from(v).map_err(|_| AppError::Persistence("value exceeds u16".into()))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn write_entry(buf: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    put_u16(buf, name.len())?;
    buf.extend_from_slice(name.as_bytes());
    ndt::write_tensor(buf, t)
}

const HAR_SCALARS: [&str; 6] = ["c0", "c1", "c2", "c3", "mu", "sigma"];

fn entries(model: &Model) -> Result<Vec<(String, Tensor)>> {
    let mut out = Vec::new();
    for (i, b) in model.blocks.iter().enumerate() {
        let p = format!("b{i}");
        out.push((format!("{p}.conv1.w"), b.conv1.w.clone()));
        out.push((format!("{p}.conv1.b"), b.conv1.b.clone()));
        out.push((format!("{p}.norm1.gamma"), b.norm1.gamma.clone()));
        out.push((format!("{p}.norm1.beta"), b.norm1.beta.clone()));
        out.push((format!("{p}.norm1.rmean"), vec_tensor(&b.norm1.running_mean)));
        out.push((format!("{p}.norm1.rvar"), vec_tensor(&b.norm1.running_var)));
        out.push((format!("{p}.conv2.w"), b.conv2.w.clone()));
        out.push((format!("{p}.conv2.b"), b.conv2.b.clone()));
        out.push((format!("{p}.norm2.gamma"), b.norm2.gamma.clone()));
        out.push((format!("{p}.norm2.beta"), b.norm2.beta.clone()));
        out.push((format!("{p}.norm2.rmean"), vec_tensor(&b.norm2.running_mean)));
        out.push((format!("{p}.norm2.rvar"), vec_tensor(&b.norm2.running_var)));
        if let Some(proj) = &b.proj {
            out.push((format!("{p}.proj.w"), proj.w.clone()));
            out.push((format!("{p}.proj.b"), proj.b.clone()));
        }
        for (s, name) in HAR_SCALARS.iter().enumerate() {
            out.push((
                format!("{p}.har.{name}"),
                Tensor::new(vec![1], vec![b.har.data()[s]]).expect("scalar tensor"),
            ));
        }
    }
    out.push(("head.w".into(), model.head_w.clone()));
    out.push(("head.b".into(), model.head_b.clone()));
    Ok(out)
}

fn vec_tensor(v: &[f64]) -> Tensor {
    Tensor::new(vec![v.len()], v.to_vec()).expect("non-empty stats vector")
}

pub fn save(path: &Path, model: &Model) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = &model.config;
    put_u16(&mut buf, cfg.input_channels)?;
    for &s in &cfg.input_spatial {
        put_u16(&mut buf, s)?;
    }
    put_u16(&mut buf, cfg.kernel)?;
    buf.push(cfg.har_enabled as u8);
    buf.extend_from_slice(&cfg.seed.to_le_bytes());
    put_u16(&mut buf, cfg.blocks.len())?;
    for b in &cfg.blocks {
        put_u16(&mut buf, b.channels)?;
        put_u16(&mut buf, b.stride)?;
    }
    let entries = entries(model)?;
    put_u16(&mut buf, entries.len())?;
    for (name, t) in &entries {
        write_entry(&mut buf, name, t)?;
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(AppError::Persistence("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<usize> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

pub fn load(path: &Path) -> Result<Model> {
    let raw = std::fs::read(path)?;
    if raw.len() < 8 {
        return Err(AppError::Persistence("truncated checkpoint".into()));
    }
    let (body, crc_bytes) = raw.split_at(raw.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(AppError::Persistence("checkpoint checksum mismatch".into()));
    }
    let mut c = Cursor { buf: body, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(AppError::Persistence("bad checkpoint magic".into()));
    }
    let version = c.u16()?;
    if version != VERSION as usize {
        return Err(AppError::Persistence(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let input_channels = c.u16()?;
    let mut input_spatial = [0usize; 4];
    for s in &mut input_spatial {
        *s = c.u16()?;
    }
    let kernel = c.u16()?;
    let har_enabled = c.take(1)?[0] != 0;
    let seed = c.u64()?;
    let block_count = c.u16()?;
    let mut blocks = Vec::with_capacity(block_count);
    for _ in 0..block_count {
        let channels = c.u16()?;
        let stride = c.u16()?;
        blocks.push(BlockConfig { channels, stride });
    }
    let config = ModelConfig {
        input_channels,
        input_spatial,
        blocks,
        kernel,
        har_enabled,
        seed,
    };
    let entry_count = c.u16()?;
    let mut by_name: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..entry_count {
        let name_len = c.u16()?;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|_| AppError::Persistence("entry name is not UTF-8".into()))?;
        let mut rest = &c.buf[c.pos..];
        let before = rest.len();
        let t = ndt::read_tensor(&mut rest)?;
        c.pos += before - rest.len();
        by_name.insert(name, t);
    }

    let mut model =
        Model::new(config).map_err(|e| AppError::Persistence(format!("stored config: {e}")))?;
    let want = entries(&model)?;
    if want.len() != by_name.len() {
        return Err(AppError::Persistence("unexpected checkpoint entry set".into()));
    }
    for (name, template) in &want {
        let stored = by_name
            .get(name)
            .ok_or_else(|| AppError::Persistence(format!("missing entry {name}")))?;
        if stored.shape() != template.shape() {
            return Err(AppError::Persistence(format!("shape mismatch for {name}")));
        }
    }
    for (i, b) in model.blocks.iter_mut().enumerate() {
        let p = format!("b{i}");
        b.conv1.w = by_name[&format!("{p}.conv1.w")].clone();
        b.conv1.b = by_name[&format!("{p}.conv1.b")].clone();
        b.norm1.gamma = by_name[&format!("{p}.norm1.gamma")].clone();
        b.norm1.beta = by_name[&format!("{p}.norm1.beta")].clone();
        b.norm1.running_mean = by_name[&format!("{p}.norm1.rmean")].data().to_vec();
        b.norm1.running_var = by_name[&format!("{p}.norm1.rvar")].data().to_vec();
        b.conv2.w = by_name[&format!("{p}.conv2.w")].clone();
        b.conv2.b = by_name[&format!("{p}.conv2.b")].clone();
        b.norm2.gamma = by_name[&format!("{p}.norm2.gamma")].clone();
        b.norm2.beta = by_name[&format!("{p}.norm2.beta")].clone();
        b.norm2.running_mean = by_name[&format!("{p}.norm2.rmean")].data().to_vec();
        b.norm2.running_var = by_name[&format!("{p}.norm2.rvar")].data().to_vec();
        if let Some(proj) = &mut b.proj {
            proj.w = by_name[&format!("{p}.proj.w")].clone();
            proj.b = by_name[&format!("{p}.proj.b")].clone();
        }
        let har = b.har.data_mut();
        for (s, name) in HAR_SCALARS.iter().enumerate() {
            har[s] = by_name[&format!("{p}.har.{name}")].data()[0];
        }
    }
    model.head_w = by_name["head.w"].clone();
    model.head_b = by_name["head.b"].clone();
    Ok(model)
}

/// Guards a checkpoint against the configuration a caller expects
/// (initialization seed aside).
pub fn check_compatible(model: &Model, expected: &ModelConfig) -> Result<()> {
    let got = &model.config;
    let same = got.input_channels == expected.input_channels
        && got.input_spatial == expected.input_spatial
        && got.blocks == expected.blocks
        && got.kernel == expected.kernel
        && got.har_enabled == expected.har_enabled;
    if !same {
        return Err(AppError::Validation(format!(
            "checkpoint configuration {:?} does not match expected {:?}",
            got, expected
        )));
    }
    Ok(())
}
