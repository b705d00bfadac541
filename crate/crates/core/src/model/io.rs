//! JSON model documents. Matrices are written row-major as arrays of rows, and
//! every affine matrix function as the list `[M₀, M₁, …, M_nψ]`.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{
    AffineMatrixFunction, BasisFunctionSet, BasisKind, GeneralNoise, InnovationNoise, LpvSsModel, ModelDims,
    NoiseModel,
};
use crate::error::{Error, Result};

pub(crate) type Rows = Vec<Vec<f64>>;

pub(crate) fn to_rows(m: &DMatrix<f64>) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Parses row-major nested arrays. `cols` disambiguates the empty-row case.
pub(crate) fn from_rows(rows: &Rows, expected: (usize, usize), what: &str) -> Result<DMatrix<f64>> {
    let (r, c) = expected;
    if rows.len() != r || rows.iter().any(|row| row.len() != c) {
        return Err(Error::Dimension(format!(
            "{what}: expected {r}x{c}, got {} rows of lengths {:?}",
            rows.len(),
            rows.iter().map(Vec::len).collect::<Vec<_>>()
        )));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn affine_to_doc(f: &AffineMatrixFunction) -> Vec<Rows> {
    f.coeffs().iter().map(to_rows).collect()
}

fn affine_from_doc(doc: &[Rows], shape: (usize, usize), npsi: usize, what: &str) -> Result<AffineMatrixFunction> {
    if doc.len() != npsi + 1 {
        return Err(Error::Dimension(format!(
            "{what}: expected {} coefficient matrices, got {}",
            npsi + 1,
            doc.len()
        )));
    }
    let coeffs = doc
        .iter()
        .enumerate()
        .map(|(i, m)| from_rows(m, shape, &format!("{what}[{i}]")))
        .collect::<Result<Vec<_>>>()?;
    AffineMatrixFunction::from_coeffs(coeffs)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BasisDoc {
    /// Shorthand: `"poly-linear"` on `[-1, 1]^nψ`.
    Named(String),
    Full(BasisFunctionSet),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NoiseDoc {
    None,
    General {
        #[serde(rename = "G")]
        g: Vec<Rows>,
        #[serde(rename = "H")]
        h: Vec<Rows>,
        #[serde(rename = "Q")]
        q: Rows,
        #[serde(rename = "S")]
        s: Rows,
        #[serde(rename = "R")]
        r: Rows,
    },
    Innovation {
        #[serde(rename = "K")]
        k: Vec<Rows>,
        #[serde(rename = "Xi")]
        xi: Rows,
    },
}

/// Serialized form of an [`LpvSsModel`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDocument {
    pub dims: ModelDims,
    pub basis: BasisDoc,
    #[serde(rename = "A")]
    pub a: Vec<Rows>,
    #[serde(rename = "B")]
    pub b: Vec<Rows>,
    #[serde(rename = "C")]
    pub c: Vec<Rows>,
    #[serde(rename = "D")]
    pub d: Vec<Rows>,
    pub noise: NoiseDoc,
}

impl From<&LpvSsModel> for ModelDocument {
    fn from(m: &LpvSsModel) -> Self {
        let default_basis = BasisFunctionSet::poly_linear(m.basis.np);
        let basis = if m.basis.kind == BasisKind::PolyLinear && m.basis == default_basis {
            BasisDoc::Named("poly-linear".into())
        } else {
            BasisDoc::Full(m.basis.clone())
        };
        let noise = match &m.noise {
            NoiseModel::NoiseFree => NoiseDoc::None,
            NoiseModel::General(g) => NoiseDoc::General {
                g: affine_to_doc(&g.g),
                h: affine_to_doc(&g.h),
                q: to_rows(&g.q),
                s: to_rows(&g.s),
                r: to_rows(&g.r),
            },
            NoiseModel::Innovation(inn) => NoiseDoc::Innovation {
                k: affine_to_doc(&inn.k),
                xi: to_rows(&inn.xi),
            },
        };
        Self {
            dims: m.dims(),
            basis,
            a: affine_to_doc(&m.a),
            b: affine_to_doc(&m.b),
            c: affine_to_doc(&m.c),
            d: affine_to_doc(&m.d),
            noise,
        }
    }
}

impl TryFrom<&ModelDocument> for LpvSsModel {
    type Error = Error;

    fn try_from(doc: &ModelDocument) -> Result<Self> {
        let ModelDims { nx, nu, ny, npsi } = doc.dims;
        let basis = match &doc.basis {
            BasisDoc::Named(name) if name == "poly-linear" => BasisFunctionSet::poly_linear(npsi),
            BasisDoc::Named(name) => return Err(Error::Parse(format!("unknown basis '{name}'"))),
            BasisDoc::Full(b) => b.clone(),
        };
        let noise = match &doc.noise {
            NoiseDoc::None => NoiseModel::NoiseFree,
            NoiseDoc::General { g, h, q, s, r } => NoiseModel::General(GeneralNoise {
                g: affine_from_doc(g, (nx, nx), npsi, "G")?,
                h: affine_from_doc(h, (ny, ny), npsi, "H")?,
                q: from_rows(q, (nx, nx), "Q")?,
                s: from_rows(s, (nx, ny), "S")?,
                r: from_rows(r, (ny, ny), "R")?,
            }),
            NoiseDoc::Innovation { k, xi } => NoiseModel::Innovation(InnovationNoise {
                k: affine_from_doc(k, (nx, ny), npsi, "K")?,
                xi: from_rows(xi, (ny, ny), "Xi")?,
            }),
        };
        LpvSsModel::new(
            affine_from_doc(&doc.a, (nx, nx), npsi, "A")?,
            affine_from_doc(&doc.b, (nx, nu), npsi, "B")?,
            affine_from_doc(&doc.c, (ny, nx), npsi, "C")?,
            affine_from_doc(&doc.d, (ny, nu), npsi, "D")?,
            noise,
            basis,
        )
    }
}

impl LpvSsModel {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ModelDocument::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(text)?;
        Self::try_from(&doc)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
