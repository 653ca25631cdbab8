use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::{FeatureError, FeatureVector};

const MAGIC: &[u8; 4] = b"FMMX";
const VERSION: u32 = 1;

/// Row-major feature matrix with one id per row.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub schema_id: String,
    pub n_cols: usize,
    pub row_ids: Vec<String>,
    pub values: Vec<f64>,
}

fn err(msg: impl Into<String>) -> FeatureError {
    FeatureError::Matrix(msg.into())
}

impl FeatureMatrix {
    pub fn new(schema_id: impl Into<String>, n_cols: usize) -> Self {
        Self {
            schema_id: schema_id.into(),
            n_cols,
            row_ids: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn push(&mut self, id: impl Into<String>, v: &FeatureVector) -> Result<(), FeatureError> {
        if v.len() != self.n_cols {
            return Err(FeatureError::DimensionMismatch {
                expected: self.n_cols,
                got: v.len(),
            });
        }
        if v.schema_id != self.schema_id {
            return Err(err(format!(
                "schema `{}` does not match matrix schema `{}`",
                v.schema_id, self.schema_id
            )));
        }
        if !v.is_finite() {
            return Err(err("non-finite feature value"));
        }
        self.row_ids.push(id.into());
        self.values.extend_from_slice(&v.values);
        Ok(())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.n_cols.max(1)).take(self.n_rows())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.values.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.schema_id);
        out.extend_from_slice(&(self.n_rows() as u64).to_le_bytes());
        out.extend_from_slice(&(self.n_cols as u64).to_le_bytes());
        for id in &self.row_ids {
            put_str(&mut out, id);
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FeatureError> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| err("truncated header"))?;
        if &magic != MAGIC {
            return Err(err("bad magic"));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(err(format!("unsupported version {version}")));
        }
        let schema_id = read_str(&mut r)?;
        let n_rows = read_u64(&mut r)? as usize;
        let n_cols = read_u64(&mut r)? as usize;
        let row_ids = (0..n_rows).map(|_| read_str(&mut r)).collect::<Result<_, _>>()?;
        let count = n_rows.checked_mul(n_cols).ok_or_else(|| err("dimension overflow"))?;
        if r.len() != count * 8 {
            return Err(err(format!("expected {} value bytes, found {}", count * 8, r.len())));
        }
        let values = r
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self {
            schema_id,
            n_cols,
            row_ids,
            values,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), FeatureError> {
        fs::write(path, self.to_bytes()).map_err(|e| err(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, FeatureError> {
        let bytes = fs::read(path).map_err(|e| err(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// `id,f0,f1,...` with shortest round-trip float formatting.
    pub fn write_csv(&self, path: &Path) -> Result<(), FeatureError> {
        let io = |e: std::io::Error| err(format!("{}: {e}", path.display()));
        let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
        let header: Vec<String> = std::iter::once("id".to_string())
            .chain((0..self.n_cols).map(|j| format!("f{j}")))
            .collect();
        writeln!(w, "{}", header.join(",")).map_err(io)?;
        for (id, row) in self.row_ids.iter().zip(self.rows()) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{},{}", csv_escape(id), cells.join(",")).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn read_u32(r: &mut &[u8]) -> Result<u32, FeatureError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| err("truncated"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64, FeatureError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| err("truncated"))?;
    Ok(u64::from_le_bytes(b))
}

fn read_str(r: &mut &[u8]) -> Result<String, FeatureError> {
    let n = read_u32(r)? as usize;
    if r.len() < n {
        return Err(err("truncated string"));
    }
    let (s, rest) = r.split_at(n);
    *r = rest;
    String::from_utf8(s.to_vec()).map_err(|_| err("invalid utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_roundtrip_is_exact() {
        let mut m = FeatureMatrix::new("s", 3);
        m.push("a", &FeatureVector::new(vec![0.1 + 0.2, -1.0, 1e-300], "s")).unwrap();
        m.push("b,c", &FeatureVector::new(vec![3.0, 4.0, 5.0], "s")).unwrap();
        let back = FeatureMatrix::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.row(1), &[3.0, 4.0, 5.0]);
    }

    #[test]
    fn rejects_mismatches_and_corruption() {
        let mut m = FeatureMatrix::new("s", 2);
        assert!(m.push("a", &FeatureVector::new(vec![1.0], "s")).is_err());
        assert!(m.push("a", &FeatureVector::new(vec![1.0, 2.0], "t")).is_err());
        m.push("a", &FeatureVector::new(vec![1.0, 2.0], "s")).unwrap();
        let mut bytes = m.to_bytes();
        bytes.pop();
        assert!(FeatureMatrix::from_bytes(&bytes).is_err());
        bytes[0] = b'X';
        assert!(FeatureMatrix::from_bytes(&bytes).is_err());
    }

    #[test]
    fn csv_export() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let mut m = FeatureMatrix::new("s", 2);
        m.push("x,y", &FeatureVector::new(vec![0.5, 2.0], "s")).unwrap();
        m.write_csv(&p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "id,f0,f1\n\"x,y\",0.5,2\n");
    }
}
