//! Single-file checkpoints: one line of JSON header, then the parameter data
//! as little-endian f64 in header order.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{Result, Tensor, TensorError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub params: Vec<ParamEntry>,
    /// Free-form metadata (architecture, schedule, normalisation, run config).
    pub meta: serde_json::Value,
}

const FORMAT: &str = "crowdiff-ckpt-v1";

pub fn write_checkpoint<W: Write>(
    mut out: W,
    meta: serde_json::Value,
    params: &[(String, Tensor)],
) -> Result<()> {
    let header = CheckpointHeader {
        format: FORMAT.to_string(),
        params: params
            .iter()
            .map(|(n, t)| ParamEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        meta,
    };
    let line = serde_json::to_string(&header).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    out.write_all(line.as_bytes())?;
    out.write_all(b"\n")?;
    for (_, t) in params {
        let mut buf = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(mut input: R) -> Result<(CheckpointHeader, Vec<(String, Tensor)>)> {
    let mut line = String::new();
    input.read_line(&mut line)?;
    let header: CheckpointHeader =
        serde_json::from_str(line.trim_end()).map_err(|e| TensorError::Checkpoint(format!("bad header: {e}")))?;
    if header.format != FORMAT {
        return Err(TensorError::Checkpoint(format!("unknown format {:?}", header.format)));
    }
    let mut params = Vec::with_capacity(header.params.len());
    for p in &header.params {
        let n: usize = p.shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        input
            .read_exact(&mut bytes)
            .map_err(|_| TensorError::Checkpoint(format!("truncated data for {}", p.name)))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push((p.name.clone(), Tensor::new(p.shape.clone(), data)?));
    }
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(TensorError::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    Ok((header, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits() {
        let params = vec![
            ("a".to_string(), Tensor::from_slice(&[2, 2], &[1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap()),
            ("b.bias".to_string(), Tensor::scalar(std::f64::consts::PI)),
        ];
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, serde_json::json!({"k": 3}), &params).unwrap();
        let (h, back) = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(h.meta["k"], 3);
        assert_eq!(back.len(), 2);
        for ((n0, t0), (n1, t1)) in params.iter().zip(&back) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            for (a, b) in t0.data().iter().zip(t1.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let params = vec![("w".to_string(), Tensor::zeros(&[4]))];
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, serde_json::Value::Null, &params).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_checkpoint(&buf[..]).is_err());
    }
}
