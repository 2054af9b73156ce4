//! Matching-tensor file: magic `MTF1`, grid spec, metric tags, the two
//! corpus ids, then the packed views as one binary tensor dump.

use std::io::{Read, Write};
use std::path::Path;

use indret_core::matchtensor::{MatchTensor, MetricKind, ViewTensor};

use crate::error::{AppError, Result};
use crate::formats::ndt;

pub const MAGIC: &[u8; 4] = b"MTF1";

fn write_str(w: &mut dyn Write, s: &str) -> Result<()> {
    let len = u16::try_from(s.len())
        .map_err(|_| AppError::Persistence("id longer than 65535 bytes".into()))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str(r: &mut dyn Read) -> Result<String> {
    let mut len = [0u8; 2];
    r.read_exact(&mut len)
        .map_err(|_| AppError::Persistence("truncated tensor file".into()))?;
    let mut buf = vec![0u8; u16::from_le_bytes(len) as usize];
    r.read_exact(&mut buf)
        .map_err(|_| AppError::Persistence("truncated tensor file".into()))?;
    String::from_utf8(buf).map_err(|_| AppError::Persistence("id is not UTF-8".into()))
}

pub fn save(path: &Path, t: &MatchTensor) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    let spatial = t.spatial_shape();
    for &e in spatial {
        let e = u16::try_from(e)
            .map_err(|_| AppError::Persistence("grid extent exceeds u16".into()))?;
        w.write_all(&e.to_le_bytes())?;
    }
    let count = u8::try_from(t.views.len())
        .map_err(|_| AppError::Persistence("too many metric views".into()))?;
    w.write_all(&[count])?;
    for v in &t.views {
        w.write_all(&[v.metric.tag()])?;
    }
    write_str(&mut w, &t.target_id)?;
    write_str(&mut w, &t.query_id)?;
    ndt::write_tensor(&mut w, &t.to_input_tensor())
}

pub fn load(path: &Path) -> Result<MatchTensor> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| AppError::Persistence("truncated tensor file".into()))?;
    if &magic != MAGIC {
        return Err(AppError::Persistence("bad matching-tensor magic".into()));
    }
    let mut spatial = [0usize; 4];
    for s in &mut spatial {
        let mut buf = [0u8; 2];
        r.read_exact(&mut buf)
            .map_err(|_| AppError::Persistence("truncated tensor file".into()))?;
        *s = u16::from_le_bytes(buf) as usize;
    }
    let mut count = [0u8; 1];
    r.read_exact(&mut count)
        .map_err(|_| AppError::Persistence("truncated tensor file".into()))?;
    let mut kinds = Vec::with_capacity(count[0] as usize);
    for _ in 0..count[0] {
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)
            .map_err(|_| AppError::Persistence("truncated tensor file".into()))?;
        kinds.push(
            MetricKind::from_tag(tag[0])
                .ok_or_else(|| AppError::Persistence(format!("unknown metric tag {}", tag[0])))?,
        );
    }
    let target_id = read_str(&mut r)?;
    let query_id = read_str(&mut r)?;
    let packed = ndt::read_tensor(&mut r)?;
    if packed.rank() != 5 || packed.shape()[0] != kinds.len() || packed.shape()[1..] != spatial {
        return Err(AppError::Persistence(
            "payload shape disagrees with header".into(),
        ));
    }
    let view_len: usize = spatial.iter().product();
    let views = kinds
        .into_iter()
        .enumerate()
        .map(|(i, metric)| {
            let data = packed.data()[i * view_len..(i + 1) * view_len].to_vec();
            ViewTensor {
                metric,
                values: indret_core::Tensor::new(spatial.to_vec(), data)
                    .expect("header shape validated above"),
            }
        })
        .collect();
    Ok(MatchTensor {
        views,
        target_id,
        query_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use indret_core::matchtensor::{build_multiview, Metric};
    use indret_core::patching::{decompose, GridSpec, Image};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_preserves_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let mut make = || {
            let px: Vec<f64> = (0..576).map(|_| rng.random_range(0.0..1.0)).collect();
            Image::new(24, 24, 1, px).unwrap()
        };
        let a = decompose(&make(), GridSpec::new(4, 4).unwrap(), 24).unwrap();
        let b = decompose(&make(), GridSpec::new(4, 4).unwrap(), 24).unwrap();
        let t = build_multiview(&a, &b, &Metric::default_set(), "tgt-7", "qry-3").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pair.mtf");
        save(&path, &t).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.target_id, "tgt-7");
        assert_eq!(back.query_id, "qry-3");
        assert_eq!(back.to_input_tensor(), t.to_input_tensor());
        assert_eq!(
            back.views.iter().map(|v| v.metric).collect::<Vec<_>>(),
            t.views.iter().map(|v| v.metric).collect::<Vec<_>>()
        );
    }

    #[test]
    fn corrupt_magic_is_persistence_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.mtf");
        std::fs::write(&path, b"ZZZZrubbish").unwrap();
        assert!(matches!(load(&path), Err(AppError::Persistence(_))));
    }
}
