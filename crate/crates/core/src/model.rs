//! Row-stochastic topic-word matrices and their on-disk formats.
//!
//! CSV: K lines of V comma-separated decimals, no header, each value printed
//! in shortest round-trip form. Binary: the 6 magic bytes `DPLDA1`, then K and
//! V as little-endian u64, then K·V little-endian f64 in row-major order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const BINARY_MAGIC: &[u8; 6] = b"DPLDA1";
const ROW_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct TopicModel {
    k: usize,
    v: usize,
    phi: Vec<f64>,
}

impl TopicModel {
    /// Validates dimensions, strict positivity and unit row sums.
    pub fn new(k: usize, v: usize, phi: Vec<f64>) -> Result<Self> {
        if k == 0 || v == 0 {
            return Err(Error::Dimension("model needs K >= 1 and V >= 1".into()));
        }
        if phi.len() != k * v {
            return Err(Error::Dimension(format!("expected {} entries, got {}", k * v, phi.len())));
        }
        for (row_idx, row) in phi.chunks_exact(v).enumerate() {
            if let Some(x) = row.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
                return Err(Error::Format {
                    what: "topic model",
                    detail: format!("row {row_idx} has non-positive entry {x}"),
                });
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::Format {
                    what: "topic model",
                    detail: format!("row {row_idx} sums to {s}"),
                });
            }
        }
        Ok(Self { k, v, phi })
    }

    /// Normalizes each row of nonnegative weights.
    pub fn from_weights(k: usize, v: usize, mut weights: Vec<f64>) -> Result<Self> {
        if weights.len() != k * v || v == 0 {
            return Err(Error::Dimension(format!("expected {} weights, got {}", k * v, weights.len())));
        }
        for row in weights.chunks_exact_mut(v) {
            let s: f64 = row.iter().sum();
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        Self::new(k, v, weights)
    }

    pub fn uniform(k: usize, v: usize) -> Self {
        Self {
            k,
            v,
            phi: vec![1.0 / v as f64; k * v],
        }
    }

    pub fn num_topics(&self) -> usize {
        self.k
    }

    pub fn vocab_size(&self) -> usize {
        self.v
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.phi[k * self.v..(k + 1) * self.v]
    }

    pub fn get(&self, k: usize, t: usize) -> f64 {
        self.phi[k * self.v + t]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.phi
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for row in self.phi.chunks_exact(self.v) {
            let line: Vec<String> = row.iter().map(|x| format!("{x:?}")).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        out.flush()
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut phi = Vec::new();
        let mut v = None;
        let mut k = 0;
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format {
                    what: "model csv",
                    detail: format!("line {}: {e}", i + 1),
                })?;
            match v {
                None => v = Some(row.len()),
                Some(n) if n != row.len() => {
                    return Err(Error::Format {
                        what: "model csv",
                        detail: format!("line {} has {} columns, expected {n}", i + 1, row.len()),
                    })
                }
                _ => {}
            }
            phi.extend(row);
            k += 1;
        }
        Self::new(k, v.unwrap_or(0), phi)
    }

    pub fn write_binary<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(BINARY_MAGIC)?;
        out.write_all(&(self.k as u64).to_le_bytes())?;
        out.write_all(&(self.v as u64).to_le_bytes())?;
        for x in &self.phi {
            out.write_all(&x.to_le_bytes())?;
        }
        out.flush()
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 6];
        input.read_exact(&mut magic)?;
        if &magic != BINARY_MAGIC {
            return Err(Error::Format {
                what: "model binary",
                detail: "bad magic bytes".into(),
            });
        }
        let mut word = [0u8; 8];
        input.read_exact(&mut word)?;
        let k = u64::from_le_bytes(word) as usize;
        input.read_exact(&mut word)?;
        let v = u64::from_le_bytes(word) as usize;
        let n = k.checked_mul(v).ok_or_else(|| Error::Dimension("K*V overflows".into()))?;
        let mut phi = Vec::with_capacity(n);
        for _ in 0..n {
            input.read_exact(&mut word)?;
            phi.push(f64::from_le_bytes(word));
        }
        Self::new(k, v, phi)
    }

    /// Saves by extension: `.bin` is binary, anything else CSV.
    pub fn save(&self, path: &Path) -> Result<()> {
        let out = BufWriter::new(File::create(path)?);
        if path.extension().is_some_and(|e| e == "bin") {
            self.write_binary(out)?;
        } else {
            self.write_csv(out)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let input = BufReader::new(File::open(path)?);
        if path.extension().is_some_and(|e| e == "bin") {
            Self::read_binary(input)
        } else {
            Self::read_csv(input)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_rows() {
        assert!(TopicModel::new(1, 2, vec![0.5, 0.6]).is_err());
        assert!(TopicModel::new(1, 2, vec![1.0, 0.0]).is_err());
        assert!(TopicModel::new(1, 2, vec![0.5]).is_err());
        assert!(TopicModel::new(1, 2, vec![0.5, 0.5]).is_ok());
    }

    #[test]
    fn binary_layout() {
        let m = TopicModel::new(1, 2, vec![0.25, 0.75]).unwrap();
        let mut buf = Vec::new();
        m.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[..6], b"DPLDA1");
        assert_eq!(u64::from_le_bytes(buf[6..14].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(buf[14..22].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(buf[22..30].try_into().unwrap()), 0.25);
        assert_eq!(buf.len(), 22 + 16);
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(TopicModel::read_binary(bad.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn csv_and_binary_round_trip_exactly(
            k in 1usize..4, v in 1usize..6,
            seed in proptest::collection::vec(0.001f64..10.0, 24),
        ) {
            let m = TopicModel::from_weights(k, v, seed[..k * v].to_vec()).unwrap();
            let mut csv = Vec::new();
            m.write_csv(&mut csv).unwrap();
            prop_assert_eq!(&TopicModel::read_csv(csv.as_slice()).unwrap(), &m);
            let mut bin = Vec::new();
            m.write_binary(&mut bin).unwrap();
            prop_assert_eq!(&TopicModel::read_binary(bin.as_slice()).unwrap(), &m);
        }
    }
}
