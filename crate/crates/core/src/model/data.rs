use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Aligned input, scheduling and output records. Each signal is stored
/// channel-by-time (`channels × N`), so column `t` is the sample at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSet {
    pub u: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub y: DMatrix<f64>,
    /// Noise-free output, when known (simulated data).
    pub yd: Option<DMatrix<f64>>,
}

impl DataSet {
    pub fn new(u: DMatrix<f64>, p: DMatrix<f64>, y: DMatrix<f64>, yd: Option<DMatrix<f64>>) -> Result<Self> {
        let n = u.ncols();
        if p.ncols() != n || y.ncols() != n || yd.as_ref().is_some_and(|v| v.ncols() != n || v.nrows() != y.nrows()) {
            return Err(Error::Dimension(format!(
                "signal lengths differ: u {}, p {}, y {}{}",
                n,
                p.ncols(),
                y.ncols(),
                yd.as_ref().map(|v| format!(", yd {}", v.ncols())).unwrap_or_default()
            )));
        }
        Ok(Self { u, p, y, yd })
    }

    pub fn len(&self) -> usize {
        self.u.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn nu(&self) -> usize {
        self.u.nrows()
    }

    pub fn np(&self) -> usize {
        self.p.nrows()
    }

    pub fn ny(&self) -> usize {
        self.y.nrows()
    }

    /// Samples `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        let w = end - start;
        Self {
            u: self.u.columns(start, w).into_owned(),
            p: self.p.columns(start, w).into_owned(),
            y: self.y.columns(start, w).into_owned(),
            yd: self.yd.as_ref().map(|v| v.columns(start, w).into_owned()),
        }
    }

    /// Writes a CSV with header `u1..unu, p1..pnp, y1..yny[, yd1..ydny]`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = Vec::new();
        header.extend((1..=self.nu()).map(|i| format!("u{i}")));
        header.extend((1..=self.np()).map(|i| format!("p{i}")));
        header.extend((1..=self.ny()).map(|i| format!("y{i}")));
        if self.yd.is_some() {
            header.extend((1..=self.ny()).map(|i| format!("yd{i}")));
        }
        w.write_record(&header)?;
        for t in 0..self.len() {
            let mut rec: Vec<String> = Vec::with_capacity(header.len());
            rec.extend(self.u.column(t).iter().map(|v| format!("{v:e}")));
            rec.extend(self.p.column(t).iter().map(|v| format!("{v:e}")));
            rec.extend(self.y.column(t).iter().map(|v| format!("{v:e}")));
            if let Some(yd) = &self.yd {
                rec.extend(yd.column(t).iter().map(|v| format!("{v:e}")));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        let mut idx: [Vec<(usize, usize)>; 4] = Default::default();
        for (col, h) in headers.iter().enumerate() {
            let h = h.trim();
            let (group, rest) = if let Some(rest) = h.strip_prefix("yd") {
                (3, rest)
            } else if let Some(rest) = h.strip_prefix('u') {
                (0, rest)
            } else if let Some(rest) = h.strip_prefix('p') {
                (1, rest)
            } else if let Some(rest) = h.strip_prefix('y') {
                (2, rest)
            } else {
                return Err(Error::Parse(format!("unknown CSV column '{h}'")));
            };
            let channel: usize = rest
                .parse()
                .map_err(|_| Error::Parse(format!("bad channel index in column '{h}'")))?;
            if channel == 0 {
                return Err(Error::Parse(format!("channel indices start at 1, got '{h}'")));
            }
            idx[group].push((channel - 1, col));
        }
        for g in &mut idx {
            g.sort_unstable();
            if g.iter().enumerate().any(|(k, &(ch, _))| ch != k) {
                return Err(Error::Parse("CSV channel columns must be numbered 1..n without gaps".into()));
            }
        }
        if idx[2].is_empty() {
            return Err(Error::Parse("CSV has no output columns".into()));
        }
        let mut cols: [Vec<f64>; 4] = Default::default();
        let mut n = 0usize;
        for rec in r.records() {
            let rec = rec?;
            for (g, ids) in idx.iter().enumerate() {
                for &(_, c) in ids {
                    let v: f64 = rec
                        .get(c)
                        .ok_or_else(|| Error::Parse(format!("row {} is short", n + 1)))?
                        .trim()
                        .parse()
                        .map_err(|_| Error::Parse(format!("non-numeric value at row {}", n + 1)))?;
                    cols[g].push(v);
                }
            }
            n += 1;
        }
        let build = |g: usize| DMatrix::from_column_slice(idx[g].len(), n, &cols[g]);
        let yd = (!idx[3].is_empty()).then(|| build(3));
        Self::new(build(0), build(1), build(2), yd)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_keeps_yd() {
        let d = DataSet::new(
            DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]),
            DMatrix::from_row_slice(2, 3, &[0.1, 0.2, 0.3, -0.1, -0.2, -0.3]),
            DMatrix::from_row_slice(1, 3, &[1.5, 2.5, 3.5e-20]),
            Some(DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0])),
        )
        .unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("u1,p1,p2,y1,yd1"));
        assert_eq!(DataSet::read_csv(buf.as_slice()).unwrap(), d);
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let r = DataSet::new(DMatrix::zeros(1, 3), DMatrix::zeros(1, 2), DMatrix::zeros(1, 3), None);
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn unknown_column_rejected() {
        let r = DataSet::read_csv("u1,z1,y1\n1,2,3\n".as_bytes());
        assert!(matches!(r, Err(Error::Parse(_))));
    }
}
