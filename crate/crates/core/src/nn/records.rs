use std::io::Write;

use super::Tensor;
use crate::{Error, Result, Scalar};

/// Named tensor as persisted: header line `name rows cols`, then `rows*cols`
/// little-endian `f32` values.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamRecord<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

pub fn write_records<T: Scalar>(out: &mut impl Write, records: &[(String, &Tensor<T>)]) -> Result<()> {
    for (name, t) in records {
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::domain(format!("invalid record name {name:?}")));
        }
        writeln!(out, "{name} {} {}", t.rows(), t.cols())?;
        let mut bytes = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            bytes.extend_from_slice(&v.as_f32().to_le_bytes());
        }
        out.write_all(&bytes)?;
    }
    Ok(())
}

/// Reads exactly `count` records starting at `*pos`, advancing it.
pub fn read_records<T: Scalar>(bytes: &[u8], pos: &mut usize, count: usize) -> Result<Vec<ParamRecord<T>>> {
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let rest = &bytes[*pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Integrity(format!("record {k}: truncated header")))?;
        let header = std::str::from_utf8(&rest[..nl])
            .map_err(|_| Error::Integrity(format!("record {k}: header is not UTF-8")))?;
        let fields: Vec<&str> = header.split(' ').collect();
        let parsed = match fields[..] {
            [name, r, c] => r.parse::<usize>().ok().zip(c.parse::<usize>().ok()).map(|(r, c)| (name, r, c)),
            _ => None,
        };
        let (name, rows, cols) =
            parsed.ok_or_else(|| Error::Integrity(format!("record {k}: bad header {header:?}")))?;
        let n_bytes = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Integrity(format!("record {name}: size overflow")))?;
        let body = rest
            .get(nl + 1..nl + 1 + n_bytes)
            .ok_or_else(|| Error::Integrity(format!("record {name}: truncated payload")))?;
        let data = body
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        out.push(ParamRecord {
            name: name.to_string(),
            tensor: Tensor::from_vec(rows, cols, data)?,
        });
        *pos += nl + 1 + n_bytes;
    }
    Ok(out)
}
