//! Basis-reduced Ho-Kalman realization.
//!
//! A selection picks `no` rows `(i, γ, α)` of the extended observability matrix and `nr` columns
//! `(α, β, j)` of the extended reachability matrix. The sub-Hankel blocks `H = O_ν R_ς`,
//! `H_k = O_ν A_k R_ς`, `O_ν B_k` and `C_k R_ς` are then read off a sub-Markov table.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{numerical_rank, pinv};
use crate::markov::{IndexWord, SubMarkovKey, SubMarkovTable};
use crate::model::{AffineMatrixFunction, BasisFunctionSet, LpvSsModel, NoiseModel};

/// Rank threshold relative to `σ₁` for exact (noise-free) tables.
pub const EXACT_RANK_TOL: f64 = 1e-8;
/// Default order-selection threshold for estimated tables.
pub const NOISY_RANK_TOL: f64 = 1e-3;

/// Row `(i, γ, α)`: output `i` of `C_γ A_α`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RowSel {
    pub i: usize,
    pub gamma: usize,
    pub alpha: IndexWord,
}

/// Column `(α, β, j)`: input `j` of `A_α B_β`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ColSel {
    pub alpha: IndexWord,
    pub beta: usize,
    pub j: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionBasis {
    /// Columns ς, length `nr`.
    pub sigma: Vec<ColSel>,
    /// Rows ν, length `no`.
    #[serde(rename = "nu")]
    pub nu_sel: Vec<RowSel>,
}

impl SelectionBasis {
    pub fn new(sigma: Vec<ColSel>, nu_sel: Vec<RowSel>) -> Result<Self> {
        let sel = Self { sigma, nu_sel };
        if sel.sigma.is_empty() || sel.nu_sel.is_empty() {
            return Err(Error::InvalidArgument("selection needs at least one row and one column".into()));
        }
        if sel.sigma.iter().collect::<BTreeSet<_>>().len() != sel.sigma.len()
            || sel.nu_sel.iter().collect::<BTreeSet<_>>().len() != sel.nu_sel.len()
        {
            return Err(Error::InvalidArgument("selection contains duplicate entries".into()));
        }
        Ok(sel)
    }

    pub fn no(&self) -> usize {
        self.nu_sel.len()
    }

    pub fn nr(&self) -> usize {
        self.sigma.len()
    }

    pub fn validate(&self, ny: usize, nu: usize, npsi: usize) -> Result<()> {
        let word_ok = |w: &IndexWord| w.chars().iter().all(|&c| c <= npsi);
        for r in &self.nu_sel {
            if r.i >= ny || r.gamma > npsi || !word_ok(&r.alpha) {
                return Err(Error::InvalidArgument(format!("row selection {r:?} out of range")));
            }
        }
        for c in &self.sigma {
            if c.j >= nu || c.beta > npsi || !word_ok(&c.alpha) {
                return Err(Error::InvalidArgument(format!("column selection {c:?} out of range")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: Self = serde_json::from_str(text)?;
        Self::new(raw.sigma, raw.nu_sel)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn key_of(gamma: usize, left: &IndexWord, mid: Option<usize>, right: &IndexWord, beta: usize) -> SubMarkovKey {
    let mut word = left.chars().to_vec();
    word.extend(mid);
    word.extend_from_slice(right.chars());
    SubMarkovKey::cab(gamma, &IndexWord(word), beta)
}

/// Every key the sub-Hankel family of `sel` reads, including the `D` keys.
pub fn required_keys(sel: &SelectionBasis, npsi: usize) -> BTreeSet<SubMarkovKey> {
    let eps = IndexWord::empty();
    let mut keys = BTreeSet::new();
    for k in 0..=npsi {
        keys.insert(SubMarkovKey::d(k));
    }
    for r in &sel.nu_sel {
        for c in &sel.sigma {
            keys.insert(key_of(r.gamma, &r.alpha, None, &c.alpha, c.beta));
            for k in 0..=npsi {
                keys.insert(key_of(r.gamma, &r.alpha, Some(k), &c.alpha, c.beta));
            }
        }
        for k in 0..=npsi {
            keys.insert(key_of(r.gamma, &r.alpha, None, &eps, k));
        }
    }
    for c in &sel.sigma {
        for k in 0..=npsi {
            keys.insert(key_of(k, &eps, None, &c.alpha, c.beta));
        }
    }
    keys
}

/// Scalar sub-Markov entries read by the sub-Hankel family: `H`, the `H_k`, `O_ν B_k` and `C_k R_ς`.
pub fn sub_hankel_entry_count(ny: usize, nu: usize, npsi: usize, no: usize, nr: usize) -> usize {
    let k = npsi + 1;
    no * nr + k * no * nr + k * no * nu + k * ny * nr
}

/// Entries of the full Hankel matrix whose rows and columns run over all words `α` with
/// `|α| < depth`.
pub fn full_hankel_entry_count(ny: usize, nu: usize, npsi: usize, depth: usize) -> usize {
    let k = npsi + 1;
    let words: usize = (0..depth).map(|d| k.pow(d as u32)).sum();
    (ny * k * words) * (nu * k * words)
}

#[derive(Debug, Clone)]
pub struct HankelBlocks {
    pub h: DMatrix<f64>,
    pub hk: Vec<DMatrix<f64>>,
    pub hb: Vec<DMatrix<f64>>,
    pub hc: Vec<DMatrix<f64>>,
    /// `D_k` copied from the table.
    pub d: Vec<DMatrix<f64>>,
}

impl HankelBlocks {
    pub fn npsi(&self) -> usize {
        self.hk.len() - 1
    }
}

pub fn assemble_hankel(table: &SubMarkovTable, sel: &SelectionBasis) -> Result<HankelBlocks> {
    let npsi = table.npsi;
    sel.validate(table.ny, table.nu, npsi)?;
    let required = required_keys(sel, npsi);
    let missing = table.missing(&required);
    if !missing.is_empty() {
        return Err(Error::MissingKeys(missing));
    }
    let get = |key: SubMarkovKey| table.get(&key).expect("checked above");
    let eps = IndexWord::empty();
    let (no, nr) = (sel.no(), sel.nr());
    let block = |mid: Option<usize>| {
        DMatrix::from_fn(no, nr, |r, c| {
            let (rs, cs) = (&sel.nu_sel[r], &sel.sigma[c]);
            get(key_of(rs.gamma, &rs.alpha, mid, &cs.alpha, cs.beta))[(rs.i, cs.j)]
        })
    };
    let h = block(None);
    let hk = (0..=npsi).map(|k| block(Some(k))).collect();
    let hb = (0..=npsi)
        .map(|k| {
            DMatrix::from_fn(no, table.nu, |r, j| {
                let rs = &sel.nu_sel[r];
                get(key_of(rs.gamma, &rs.alpha, None, &eps, k))[(rs.i, j)]
            })
        })
        .collect();
    let hc = (0..=npsi)
        .map(|k| {
            DMatrix::from_fn(table.ny, nr, |i, c| {
                let cs = &sel.sigma[c];
                get(key_of(k, &eps, None, &cs.alpha, cs.beta))[(i, cs.j)]
            })
        })
        .collect();
    let d = (0..=npsi).map(|k| get(SubMarkovKey::d(k)).clone()).collect();
    Ok(HankelBlocks { h, hk, hb, hc, d })
}

fn build_model(
    a: Vec<DMatrix<f64>>,
    b: Vec<DMatrix<f64>>,
    c: Vec<DMatrix<f64>>,
    blocks: &HankelBlocks,
    basis: &BasisFunctionSet,
) -> Result<LpvSsModel> {
    if basis.npsi() != blocks.npsi() {
        return Err(Error::Dimension(format!(
            "basis provides {} functions, table has nψ = {}",
            basis.npsi(),
            blocks.npsi()
        )));
    }
    LpvSsModel::new(
        AffineMatrixFunction::from_coeffs(a)?,
        AffineMatrixFunction::from_coeffs(b)?,
        AffineMatrixFunction::from_coeffs(c)?,
        AffineMatrixFunction::from_coeffs(blocks.d.clone())?,
        NoiseModel::NoiseFree,
        basis.clone(),
    )
}

/// Pseudo-inverse realization for a selection with `rank H = nr`; the state order is `nr`.
pub fn realize_exact(blocks: &HankelBlocks, basis: &BasisFunctionSet) -> Result<LpvSsModel> {
    let nr = blocks.h.ncols();
    let sv = blocks.h.clone().singular_values();
    let rank = numerical_rank(&sv, EXACT_RANK_TOL);
    if rank != nr {
        return Err(Error::RankHypothesis {
            measured: rank,
            required: nr,
        });
    }
    let hp = pinv(&blocks.h, EXACT_RANK_TOL);
    let a = blocks.hk.iter().map(|hk| &hp * hk).collect();
    let b = blocks.hb.iter().map(|hb| &hp * hb).collect();
    build_model(a, b, blocks.hc.clone(), blocks, basis)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Order {
    Fixed(usize),
    Auto,
}

impl std::str::FromStr for Order {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(Order::Auto);
        }
        s.parse()
            .map(Order::Fixed)
            .map_err(|_| Error::Parse(format!("order must be an integer or `auto`, got `{s}`")))
    }
}

/// Largest gap in `log σ` among orders `k` with `σ_{k+1}/σ₁ < tol`; the smaller order wins ties.
/// Falls back to the full numerical rank when no order qualifies.
/// Singular values below rounding level are floored before taking logs.
pub fn auto_order(sv: &DVector<f64>, tol: f64) -> usize {
    let s1 = sv[0];
    if s1 <= 0.0 {
        return 0;
    }
    let floor = s1 * f64::EPSILON * sv.len() as f64;
    let lg = |k: usize| sv[k].max(floor).ln();
    let mut best: Option<(usize, f64)> = None;
    for k in 1..sv.len() {
        if sv[k] / s1 >= tol {
            continue;
        }
        let gap = lg(k - 1) - lg(k);
        if best.map_or(true, |(_, g)| gap > g + 1e-9 * g.abs()) {
            best = Some((k, gap));
        }
    }
    match best {
        Some((k, _)) => k,
        None => numerical_rank(sv, 1e-14),
    }
}

/// SVD realization `Â_k = Ô† H_k R̂†`, `B̂_k = Ô† O_ν B_k`, `Ĉ_k = C_k R_ς R̂†` on the leading `order`
/// singular triplets. Returns the model with the full singular-value profile of `H`.
pub fn realize_svd(
    blocks: &HankelBlocks,
    basis: &BasisFunctionSet,
    order: Order,
    tol: f64,
) -> Result<(LpvSsModel, DVector<f64>)> {
    let svd = blocks.h.clone().svd(true, true);
    let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sv = DVector::from_iterator(idx.len(), idx.iter().map(|&i| svd.singular_values[i]));
    let u = svd.u.expect("requested U").select_columns(&idx);
    let v = svd.v_t.expect("requested Vᵀ").transpose().select_columns(&idx);

    let rank = numerical_rank(&sv, EXACT_RANK_TOL);
    let n = match order {
        Order::Fixed(0) => return Err(Error::InvalidArgument("order must be positive".into())),
        Order::Fixed(n) if n > sv.len() => {
            return Err(Error::InvalidArgument(format!(
                "order {n} exceeds min(no, nr) = {}",
                sv.len()
            )))
        }
        Order::Fixed(n) if n > rank => {
            log::warn!("order {n} exceeds the numerical rank {rank} of H; truncating");
            rank
        }
        Order::Fixed(n) => n,
        Order::Auto => auto_order(&sv, tol),
    };
    if n == 0 {
        return Err(Error::RankDeficient { deficiency: sv.len() });
    }
    let s_isqrt = DMatrix::from_diagonal(&sv.rows(0, n).map(|s| 1.0 / s.sqrt()));
    let o_pinv = &s_isqrt * u.columns(0, n).transpose();
    let r_pinv = v.columns(0, n) * &s_isqrt;
    let a = blocks.hk.iter().map(|hk| &o_pinv * hk * &r_pinv).collect();
    let b = blocks.hb.iter().map(|hb| &o_pinv * hb).collect();
    let c = blocks.hc.iter().map(|hc| hc * &r_pinv).collect();
    Ok((build_model(a, b, c, blocks, basis)?, sv))
}

/// Rank test used by the greedy selection.
const GREEDY_RANK_TOL: f64 = 1e-8;

fn qr_rank(m: &DMatrix<f64>) -> usize {
    if m.is_empty() {
        return 0;
    }
    let r = m.clone().col_piv_qr().r();
    let diag: Vec<f64> = (0..r.nrows().min(r.ncols())).map(|i| r[(i, i)].abs()).collect();
    let max = diag.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    diag.iter().filter(|&&d| d > GREEDY_RANK_TOL * max).count()
}

/// Candidate rows and columns with `|α| ≤ max_depth − 1`, in canonical order.
pub fn candidate_pool(ny: usize, nu: usize, npsi: usize, max_depth: usize) -> (Vec<RowSel>, Vec<ColSel>) {
    let mut rows = Vec::new();
    let mut cols = Vec::new();
    for len in 0..max_depth {
        for alpha in IndexWord::all_of_length(npsi, len) {
            for s in 0..=npsi {
                for i in 0..ny {
                    rows.push(RowSel {
                        i,
                        gamma: s,
                        alpha: alpha.clone(),
                    });
                }
                for j in 0..nu {
                    cols.push(ColSel {
                        alpha: alpha.clone(),
                        beta: s,
                        j,
                    });
                }
            }
        }
    }
    (rows, cols)
}

/// Greedy selection from the entries of the full depth-limited Hankel matrix.
///
/// Entries are visited by decreasing magnitude (ties by candidate order) and accepted when the
/// row and/or column they add raises the pivoted-QR rank, until the rank reaches `nx_guess`.
/// Rows and columns are then topped up to the targets by their largest entry over the current
/// selection.
pub fn greedy_selection(
    table: &SubMarkovTable,
    nx_guess: usize,
    no_target: usize,
    nr_target: usize,
    max_depth: usize,
) -> Result<SelectionBasis> {
    if nx_guess == 0 || max_depth == 0 {
        return Err(Error::InvalidArgument("nx_guess and max_depth must be positive".into()));
    }
    if no_target < nx_guess || nr_target < nx_guess {
        return Err(Error::InvalidArgument(format!(
            "targets no = {no_target}, nr = {nr_target} must be at least nx_guess = {nx_guess}"
        )));
    }
    let (rows, cols) = candidate_pool(table.ny, table.nu, table.npsi, max_depth);
    if no_target > rows.len() || nr_target > cols.len() {
        return Err(Error::InvalidArgument(format!(
            "targets no = {no_target}, nr = {nr_target} exceed the {} x {} candidate pool",
            rows.len(),
            cols.len()
        )));
    }
    let full = SelectionBasis {
        sigma: cols.clone(),
        nu_sel: rows.clone(),
    };
    let mut needed = BTreeSet::new();
    for r in &rows {
        for c in &cols {
            needed.insert(key_of(r.gamma, &r.alpha, None, &c.alpha, c.beta));
        }
    }
    let missing = table.missing(&needed);
    if !missing.is_empty() {
        return Err(Error::MissingKeys(missing));
    }
    let f = DMatrix::from_fn(rows.len(), cols.len(), |r, c| {
        let (rs, cs) = (&full.nu_sel[r], &full.sigma[c]);
        table.get(&key_of(rs.gamma, &rs.alpha, None, &cs.alpha, cs.beta)).unwrap()[(rs.i, cs.j)]
    });

    let mut order: Vec<(usize, usize)> = (0..rows.len()).flat_map(|r| (0..cols.len()).map(move |c| (r, c))).collect();
    order.sort_by(|&(r1, c1), &(r2, c2)| f[(r2, c2)].abs().total_cmp(&f[(r1, c1)].abs()).then((r1, c1).cmp(&(r2, c2))));

    let sub = |rs: &[usize], cs: &[usize]| f.select_rows(rs).select_columns(cs);
    let mut sr: Vec<usize> = Vec::new();
    let mut sc: Vec<usize> = Vec::new();
    let mut rank = 0;
    for &(r, c) in &order {
        if rank >= nx_guess {
            break;
        }
        let new_r = !sr.contains(&r);
        let new_c = !sc.contains(&c);
        if !new_r && !new_c {
            continue;
        }
        if (new_r && sr.len() >= no_target) || (new_c && sc.len() >= nr_target) {
            continue;
        }
        let mut tr = sr.clone();
        let mut tc = sc.clone();
        if new_r {
            tr.push(r);
        }
        if new_c {
            tc.push(c);
        }
        let k = qr_rank(&sub(&tr, &tc));
        if k > rank {
            rank = k;
            sr = tr;
            sc = tc;
        }
    }
    if rank < nx_guess {
        return Err(Error::SelectionRank {
            achieved: rank,
            requested: nx_guess,
        });
    }
    while sr.len() < no_target {
        let best = (0..rows.len())
            .filter(|r| !sr.contains(r))
            .max_by(|&a, &b| {
                let ma = sc.iter().map(|&c| f[(a, c)].abs()).fold(0.0, f64::max);
                let mb = sc.iter().map(|&c| f[(b, c)].abs()).fold(0.0, f64::max);
                ma.total_cmp(&mb).then(b.cmp(&a))
            })
            .expect("pool larger than target");
        sr.push(best);
    }
    while sc.len() < nr_target {
        let best = (0..cols.len())
            .filter(|c| !sc.contains(c))
            .max_by(|&a, &b| {
                let ma = sr.iter().map(|&r| f[(r, a)].abs()).fold(0.0, f64::max);
                let mb = sr.iter().map(|&r| f[(r, b)].abs()).fold(0.0, f64::max);
                ma.total_cmp(&mb).then(b.cmp(&a))
            })
            .expect("pool larger than target");
        sc.push(best);
    }
    SelectionBasis::new(
        sc.into_iter().map(|c| cols[c].clone()).collect(),
        sr.into_iter().map(|r| rows[r].clone()).collect(),
    )
}

/// Realizes a model straight from a table.
pub fn realize_table(
    table: &SubMarkovTable,
    sel: &SelectionBasis,
    basis: &BasisFunctionSet,
    order: Order,
    tol: f64,
) -> Result<(LpvSsModel, DVector<f64>)> {
    realize_svd(&assemble_hankel(table, sel)?, basis, order, tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markov::true_table;
    use crate::model::{apply_transform, random_stable_model, ModelDims, SimilarityTransform};
    use proptest::prelude::*;

    fn model(nx: usize, npsi: usize, seed: u64) -> LpvSsModel {
        random_stable_model(ModelDims { nx, nu: 2, ny: 2, npsi }, 0.8, seed).unwrap().noise_free()
    }

    /// Depth for which greedy selection is expected to reach rank `nx`.
    fn depth_for(nx: usize, npsi: usize) -> usize {
        if 2 * (npsi + 1) >= nx {
            1
        } else {
            2
        }
    }

    fn realize_via_greedy(m: &LpvSsModel, order: Order) -> LpvSsModel {
        let depth = depth_for(m.nx(), m.npsi());
        let table = true_table(m, 2 * depth + 1);
        let sel = greedy_selection(&table, m.nx(), m.nx(), m.nx(), depth).unwrap();
        realize_table(&table, &sel, &m.basis, order, EXACT_RANK_TOL).unwrap().0
    }

    #[test]
    fn two_state_hankel_has_rank_two() {
        let m = model(2, 1, 1);
        let table = true_table(&m, 3);
        let sel = greedy_selection(&table, 2, 4, 4, 1).unwrap();
        let blocks = assemble_hankel(&table, &sel).unwrap();
        let sv = blocks.h.clone().singular_values();
        let mut s: Vec<f64> = sv.iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        assert!(s[1] > 1e-6 * s[0]);
        assert!(s[2] < 1e-10 * s[0] && s[3] < 1e-10 * s[0]);
    }

    #[test]
    fn element_counts() {
        assert_eq!(sub_hankel_entry_count(2, 2, 5, 10, 10), 940);
        assert_eq!(full_hankel_entry_count(2, 2, 5, 2), 7056);
    }

    #[test]
    fn empty_selection_rejected() {
        assert!(SelectionBasis::new(vec![], vec![]).is_err());
        let r = RowSel {
            i: 0,
            gamma: 0,
            alpha: IndexWord::empty(),
        };
        let c = ColSel {
            alpha: IndexWord::empty(),
            beta: 0,
            j: 0,
        };
        assert!(SelectionBasis::new(vec![c.clone(), c], vec![r]).is_err());
    }

    #[test]
    fn missing_keys_are_listed_exhaustively() {
        let m = model(2, 1, 2);
        let full = true_table(&m, 3);
        let sel = greedy_selection(&full, 2, 2, 2, 1).unwrap();
        let mut partial = SubMarkovTable::new(2, 2, 1);
        for (k, v) in full.iter().filter(|(k, _)| k.len() < 3) {
            partial.insert(k.clone(), v.clone()).unwrap();
        }
        let expected: Vec<String> = required_keys(&sel, 1)
            .into_iter()
            .filter(|k| k.len() == 3)
            .map(|k| k.to_string())
            .collect();
        match assemble_hankel(&partial, &sel) {
            Err(Error::MissingKeys(got)) => assert_eq!(got, expected),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn required_keys_match_the_entry_count() {
        let table = true_table(&model(3, 5, 3), 3);
        let sel = greedy_selection(&table, 3, 10, 10, 1).unwrap();
        // With α = ε every entry of the family sits in its own key-position pair.
        let keys = required_keys(&sel, 5);
        assert!(keys.len() <= sub_hankel_entry_count(2, 2, 5, 10, 10));
        assert!(keys.iter().all(|k| k.len() <= 3));
    }

    #[test]
    fn scalar_lti_reduces_to_classical_ho_kalman() {
        let (a, b, c) = (0.7, 2.0, -1.5);
        let basis = BasisFunctionSet::poly_linear(0);
        let m = LpvSsModel::new(
            AffineMatrixFunction::constant(DMatrix::from_element(1, 1, a), 0),
            AffineMatrixFunction::constant(DMatrix::from_element(1, 1, b), 0),
            AffineMatrixFunction::constant(DMatrix::from_element(1, 1, c), 0),
            AffineMatrixFunction::zeros(1, 1, 0),
            NoiseModel::NoiseFree,
            basis.clone(),
        )
        .unwrap();
        let table = true_table(&m, 3);
        let sel = SelectionBasis::new(
            vec![ColSel {
                alpha: IndexWord::empty(),
                beta: 0,
                j: 0,
            }],
            vec![RowSel {
                i: 0,
                gamma: 0,
                alpha: IndexWord::empty(),
            }],
        )
        .unwrap();
        let r = realize_exact(&assemble_hankel(&table, &sel).unwrap(), &basis).unwrap();
        let (h1, h2) = (c * b, c * a * b);
        assert!((r.a.coeff(0)[(0, 0)] - h2 / h1).abs() < 1e-14);
    }

    #[test]
    fn duplicated_column_violates_rank_hypothesis() {
        let m = model(2, 1, 4);
        let table = true_table(&m, 3);
        let sel = greedy_selection(&table, 2, 2, 2, 1).unwrap();
        let mut blocks = assemble_hankel(&table, &sel).unwrap();
        let c0 = blocks.h.column(0).into_owned();
        blocks.h.set_column(1, &c0);
        match realize_exact(&blocks, &m.basis) {
            Err(Error::RankHypothesis { measured: 1, required: 2 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn exact_and_svd_paths_agree() {
        for seed in 0..5 {
            let m = model(3, 2, 10 + seed);
            let table = true_table(&m, 3);
            let sel = greedy_selection(&table, 3, 3, 3, 1).unwrap();
            let blocks = assemble_hankel(&table, &sel).unwrap();
            let ex = realize_exact(&blocks, &m.basis).unwrap();
            let (sv, _) = realize_svd(&blocks, &m.basis, Order::Fixed(3), EXACT_RANK_TOL).unwrap();
            assert!(true_table(&ex, 5).max_rel_error(&true_table(&sv, 5)) < 1e-8);
        }
    }

    #[test]
    fn auto_order_finds_four_states() {
        let m = model(4, 2, 20);
        let table = true_table(&m, 3);
        let sel = greedy_selection(&table, 4, 6, 6, 1).unwrap();
        let (r, sv) = realize_table(&table, &sel, &m.basis, Order::Auto, EXACT_RANK_TOL).unwrap();
        assert_eq!(r.nx(), 4);
        assert_eq!(sv.len(), 6);
        assert!(true_table(&r, 5).max_rel_error(&true_table(&m, 5)) < 1e-7);
    }

    #[test]
    fn auto_order_rules() {
        let sv = DVector::from_vec(vec![10.0, 5.0, 1e-5, 1e-6, 1e-9]);
        assert_eq!(auto_order(&sv, 1e-3), 2);
        // Equal gaps: the smaller order wins.
        let sv = DVector::from_vec(vec![1.0, 1e-4, 1e-8]);
        assert_eq!(auto_order(&sv, 1e-3), 1);
        // Nothing below the threshold: full rank.
        let sv = DVector::from_vec(vec![1.0, 0.5, 0.2]);
        assert_eq!(auto_order(&sv, 1e-3), 3);
    }

    #[test]
    fn fixed_order_errors_and_truncation() {
        let m = model(2, 1, 5);
        let table = true_table(&m, 3);
        let sel = greedy_selection(&table, 2, 4, 4, 1).unwrap();
        let blocks = assemble_hankel(&table, &sel).unwrap();
        assert!(realize_svd(&blocks, &m.basis, Order::Fixed(0), 1e-3).is_err());
        assert!(realize_svd(&blocks, &m.basis, Order::Fixed(5), 1e-3).is_err());
        let (r, _) = realize_svd(&blocks, &m.basis, Order::Fixed(4), 1e-3).unwrap();
        assert_eq!(r.nx(), 2);
    }

    #[test]
    fn transformed_source_gives_equivalent_realization() {
        let m = model(3, 2, 30);
        let t = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, -1.0, 0.1, 1.0, 0.5, 0.0, -0.4, 1.5]);
        let mt = apply_transform(&m, &SimilarityTransform::new(t).unwrap()).unwrap();
        let r1 = realize_via_greedy(&m, Order::Auto);
        let r2 = realize_via_greedy(&mt, Order::Auto);
        assert!(true_table(&r1, 5).max_rel_error(&true_table(&r2, 5)) < 1e-8);
    }

    #[test]
    fn greedy_reaches_full_rank_at_depth_two() {
        for npsi in [0, 1] {
            let m = model(4, npsi, 40 + npsi as u64);
            let table = true_table(&m, 5);
            let sel = greedy_selection(&table, 4, 4, 4, 2).unwrap();
            let blocks = assemble_hankel(&table, &sel).unwrap();
            let sv = blocks.h.clone().singular_values();
            assert_eq!(numerical_rank(&sv, EXACT_RANK_TOL), 4);
        }
    }

    #[test]
    fn greedy_preconditions() {
        let table = true_table(&model(4, 0, 50), 3);
        assert!(matches!(greedy_selection(&table, 4, 4, 3, 1), Err(Error::InvalidArgument(_))));
        // Depth 1 with nψ = 0 offers only two rows.
        assert!(matches!(greedy_selection(&table, 2, 3, 2, 1), Err(Error::InvalidArgument(_))));
        assert_eq!(greedy_selection(&table, 2, 2, 2, 1).unwrap().no(), 2);
    }

    #[test]
    fn greedy_reports_achieved_rank() {
        let table = true_table(&model(2, 1, 52), 3);
        match greedy_selection(&table, 3, 3, 3, 1) {
            Err(Error::SelectionRank { achieved: 2, requested: 3 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn greedy_is_deterministic_and_json_round_trips() {
        let table = true_table(&model(3, 2, 60), 3);
        let a = greedy_selection(&table, 3, 5, 5, 1).unwrap();
        let b = greedy_selection(&table, 3, 5, 5, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(SelectionBasis::from_json(&a.to_json().unwrap()).unwrap(), a);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn realization_round_trip(nx in 1usize..=4, npsi in 0usize..=3, seed in 0u64..1000) {
            let m = model(nx, npsi, seed);
            let r = realize_via_greedy(&m, Order::Auto);
            prop_assert_eq!(r.nx(), nx);
            prop_assert!(true_table(&r, 5).max_rel_error(&true_table(&m, 5)) < 1e-7);
        }
    }
}
