//! Index words, sub-Markov parameters and truncated impulse responses.
//!
//! A sub-Markov key is a character string `s₁ s₂ … sₙ` over `{0, …, nψ}`. For `n = 1` it names
//! `D_{s₁}`, otherwise `C_{s₁} A_{s₂} ⋯ A_{sₙ₋₁} B_{sₙ}`. In the expansion of the output it multiplies
//! `ψ⁽ˢ¹⁾_t ψ⁽ˢ²⁾_{t−1} ⋯ ψ⁽ˢⁿ⁾_{t−n+1} u_{t−n+1}`.
//!
//! Keys are ordered by length, then lexicographically. Together with the input column `j` as the
//! innermost index this is the row order of `ψ_t ⊗ ψ_{t−1} ⊗ ⋯ ⊗ u_{t−n+1}`.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::de::{self, Deserializer};
use serde::ser::{SerializeMap, Serializer};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BasisFunctionSet, LpvSsModel};

/// Default bound on `(1 + nψ)^{nh+1}` for key enumeration.
pub const DEFAULT_KEY_CAP: u128 = 1 << 24;

/// A string over `{0, …, nψ}`; `ε` is the empty word.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IndexWord(pub Vec<usize>);

impl IndexWord {
    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn chars(&self) -> &[usize] {
        &self.0
    }

    pub fn concat(&self, other: &IndexWord) -> IndexWord {
        let mut v = self.0.clone();
        v.extend_from_slice(&other.0);
        IndexWord(v)
    }

    /// All words of length exactly `len`, in lexicographic order.
    pub fn all_of_length(npsi: usize, len: usize) -> Vec<IndexWord> {
        let base = npsi + 1;
        let count = base.pow(len as u32);
        (0..count)
            .map(|mut code| {
                let mut chars = vec![0; len];
                for c in chars.iter_mut().rev() {
                    *c = code % base;
                    code /= base;
                }
                IndexWord(chars)
            })
            .collect()
    }
}

impl Ord for IndexWord {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.len().cmp(&other.0.len()).then_with(|| self.0.cmp(&other.0))
    }
}

impl PartialOrd for IndexWord {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn write_chars(f: &mut fmt::Formatter<'_>, chars: &[usize]) -> fmt::Result {
    let wide = chars.iter().any(|&c| c >= 10);
    for (k, c) in chars.iter().enumerate() {
        if wide && k > 0 {
            f.write_str(",")?;
        }
        write!(f, "{c}")?;
    }
    Ok(())
}

fn parse_chars(s: &str) -> Result<Vec<usize>> {
    let bad = || Error::Parse(format!("bad index word '{s}'"));
    if s.is_empty() {
        return Ok(Vec::new());
    }
    if s.contains(',') {
        s.split(',').map(|t| t.parse().map_err(|_| bad())).collect()
    } else {
        s.chars().map(|c| c.to_digit(10).map(|d| d as usize).ok_or_else(bad)).collect()
    }
}

impl fmt::Display for IndexWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("ε");
        }
        write_chars(f, &self.0)
    }
}

/// `C_γ A_α B_β` or `D_s`, stored as the character string `s₁ … sₙ`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SubMarkovKey {
    chars: Vec<usize>,
}

impl SubMarkovKey {
    pub fn d(s: usize) -> Self {
        Self { chars: vec![s] }
    }

    pub fn cab(gamma: usize, alpha: &IndexWord, beta: usize) -> Self {
        let mut chars = Vec::with_capacity(alpha.len() + 2);
        chars.push(gamma);
        chars.extend_from_slice(alpha.chars());
        chars.push(beta);
        Self { chars }
    }

    /// Builds a key from the full index sequence `s₁ … sₙ`, `n ≥ 1`.
    pub fn from_chars(chars: Vec<usize>) -> Result<Self> {
        if chars.is_empty() {
            return Err(Error::InvalidArgument("a sub-Markov key needs at least one index".into()));
        }
        Ok(Self { chars })
    }

    pub fn chars(&self) -> &[usize] {
        &self.chars
    }

    /// Number of scheduling factors, `n`.
    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_d(&self) -> bool {
        self.chars.len() == 1
    }

    pub fn gamma(&self) -> Option<usize> {
        (!self.is_d()).then(|| self.chars[0])
    }

    pub fn beta(&self) -> Option<usize> {
        (!self.is_d()).then(|| self.chars[self.chars.len() - 1])
    }

    pub fn alpha(&self) -> Option<IndexWord> {
        (!self.is_d()).then(|| IndexWord(self.chars[1..self.chars.len() - 1].to_vec()))
    }

    pub fn max_index(&self) -> usize {
        self.chars.iter().copied().max().unwrap_or(0)
    }
}

impl Ord for SubMarkovKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.chars.len().cmp(&other.chars.len()).then_with(|| self.chars.cmp(&other.chars))
    }
}

impl PartialOrd for SubMarkovKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// `"g|a₁a₂…|b"` for `C_γ A_α B_β` and `"D|s"` for `D_s`. Characters are comma separated when any
/// index exceeds 9.
impl fmt::Display for SubMarkovKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.chars.len();
        if n == 1 {
            return write!(f, "D|{}", self.chars[0]);
        }
        let wide = self.chars.iter().any(|&c| c >= 10);
        write!(f, "{}|", self.chars[0])?;
        if wide {
            let inner: Vec<String> = self.chars[1..n - 1].iter().map(usize::to_string).collect();
            f.write_str(&inner.join(","))?;
        } else {
            write_chars(f, &self.chars[1..n - 1])?;
        }
        write!(f, "|{}", self.chars[n - 1])
    }
}

impl FromStr for SubMarkovKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('|').collect();
        let bad = || Error::Parse(format!("bad sub-Markov key '{s}'"));
        match parts.as_slice() {
            ["D", idx] => Ok(Self::d(idx.parse().map_err(|_| bad())?)),
            [g, a, b] => Ok(Self::cab(
                g.parse().map_err(|_| bad())?,
                &IndexWord(parse_chars(a)?),
                b.parse().map_err(|_| bad())?,
            )),
            _ => Err(bad()),
        }
    }
}

/// `A_α = A_{[α]₁} ⋯ A_{[α]ₙ}`, with `A_ε = I`.
pub fn word_product(model: &LpvSsModel, alpha: &IndexWord) -> DMatrix<f64> {
    let nx = model.nx();
    alpha
        .chars()
        .iter()
        .fold(DMatrix::identity(nx, nx), |acc, &k| acc * model.a.coeff(k))
}

/// The deterministic sub-Markov parameter named by `key`.
pub fn true_sub_markov(model: &LpvSsModel, key: &SubMarkovKey) -> Result<DMatrix<f64>> {
    if key.max_index() > model.npsi() {
        return Err(Error::InvalidArgument(format!("key {key} exceeds nψ = {}", model.npsi())));
    }
    let c = key.chars();
    if key.is_d() {
        return Ok(model.d.coeff(c[0]).clone());
    }
    let n = c.len();
    let mut left = model.c.coeff(c[0]).clone();
    for &k in &c[1..n - 1] {
        left = left * model.a.coeff(k);
    }
    Ok(left * model.b.coeff(c[n - 1]))
}

/// Map from sub-Markov keys to `ny × nu` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct SubMarkovTable {
    pub ny: usize,
    pub nu: usize,
    pub npsi: usize,
    entries: BTreeMap<SubMarkovKey, DMatrix<f64>>,
}

impl SubMarkovTable {
    pub fn new(ny: usize, nu: usize, npsi: usize) -> Self {
        Self {
            ny,
            nu,
            npsi,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, key: SubMarkovKey, value: DMatrix<f64>) -> Result<()> {
        if value.shape() != (self.ny, self.nu) {
            return Err(Error::Dimension(format!(
                "entry {key} is {:?}, table holds {}x{}",
                value.shape(),
                self.ny,
                self.nu
            )));
        }
        if key.max_index() > self.npsi {
            return Err(Error::InvalidArgument(format!("key {key} exceeds nψ = {}", self.npsi)));
        }
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("entry {key} is not finite")));
        }
        self.entries.insert(key, value);
        Ok(())
    }

    pub fn get(&self, key: &SubMarkovKey) -> Option<&DMatrix<f64>> {
        self.entries.get(key)
    }

    pub fn contains(&self, key: &SubMarkovKey) -> bool {
        self.entries.contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in canonical key order.
    pub fn iter(&self) -> impl Iterator<Item = (&SubMarkovKey, &DMatrix<f64>)> {
        self.entries.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &SubMarkovKey> {
        self.entries.keys()
    }

    /// Longest key present.
    pub fn max_len(&self) -> usize {
        self.entries.keys().map(SubMarkovKey::len).max().unwrap_or(0)
    }

    /// Reports the keys of `required` that are absent.
    pub fn missing<'a>(&self, required: impl IntoIterator<Item = &'a SubMarkovKey>) -> Vec<String> {
        required
            .into_iter()
            .filter(|k| !self.contains(k))
            .map(ToString::to_string)
            .collect()
    }

    /// Largest entry-wise difference relative to the largest magnitude in `reference`, over the
    /// keys of `reference`. Missing keys count as infinite error.
    pub fn max_rel_error(&self, reference: &SubMarkovTable) -> f64 {
        let scale = reference.iter().map(|(_, m)| m.amax()).fold(0.0, f64::max).max(1e-300);
        reference
            .iter()
            .map(|(k, m)| self.get(k).map_or(f64::INFINITY, |v| (v - m).amax() / scale))
            .fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

struct Entries<'a>(&'a BTreeMap<SubMarkovKey, DMatrix<f64>>);

impl Serialize for Entries<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.0.len()))?;
        for (k, v) in self.0 {
            map.serialize_entry(&k.to_string(), &crate::model::to_rows(v))?;
        }
        map.end()
    }
}

#[derive(Serialize)]
struct TableOut<'a> {
    ny: usize,
    nu: usize,
    npsi: usize,
    entries: Entries<'a>,
}

#[derive(Deserialize)]
struct TableIn {
    ny: usize,
    nu: usize,
    npsi: usize,
    entries: BTreeMap<String, Vec<Vec<f64>>>,
}

impl Serialize for SubMarkovTable {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        TableOut {
            ny: self.ny,
            nu: self.nu,
            npsi: self.npsi,
            entries: Entries(&self.entries),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SubMarkovTable {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = TableIn::deserialize(d)?;
        let mut table = SubMarkovTable::new(raw.ny, raw.nu, raw.npsi);
        for (k, rows) in &raw.entries {
            let key: SubMarkovKey = k.parse().map_err(de::Error::custom)?;
            let m = crate::model::from_rows(rows, (raw.ny, raw.nu), k).map_err(de::Error::custom)?;
            table.insert(key, m).map_err(de::Error::custom)?;
        }
        Ok(table)
    }
}

/// All keys with at most `max_len` characters, in canonical order.
pub fn keys_up_to(npsi: usize, max_len: usize) -> Vec<SubMarkovKey> {
    (1..=max_len)
        .flat_map(|n| IndexWord::all_of_length(npsi, n))
        .map(|w| SubMarkovKey { chars: w.0 })
        .collect()
}

/// The keys of the truncated FIR model of depth `nh`, and the regressor dimension
/// `nf = Σ_{i=1}^{nh+1} (1+nψ)^i · nu`.
pub fn enumerate_keys(npsi: usize, nh: usize, nu: usize, cap: u128) -> Result<(Vec<SubMarkovKey>, usize)> {
    let base = npsi as u128 + 1;
    let mut count: u128 = 0;
    let mut power: u128 = 1;
    for _ in 0..=nh {
        power = power.checked_mul(base).unwrap_or(u128::MAX);
        if power > cap {
            return Err(Error::TooManyKeys { count: power, cap });
        }
        count += power;
    }
    let keys = keys_up_to(npsi, nh + 1);
    debug_assert_eq!(keys.len() as u128, count);
    Ok((keys, count as usize * nu))
}

/// Ground-truth table of `model` with every key of length at most `max_len`.
pub fn true_table(model: &LpvSsModel, max_len: usize) -> SubMarkovTable {
    let npsi = model.npsi();
    let mut table = SubMarkovTable::new(model.ny(), model.nu(), npsi);
    for s in 0..=npsi {
        table.entries.insert(SubMarkovKey::d(s), model.d.coeff(s).clone());
    }
    // Extend C_γ A_α prefixes one character at a time.
    let mut prefixes: Vec<(Vec<usize>, DMatrix<f64>)> =
        (0..=npsi).map(|g| (vec![g], model.c.coeff(g).clone())).collect();
    for len in 2..=max_len {
        for (chars, ca) in &prefixes {
            for b in 0..=npsi {
                let mut k = chars.clone();
                k.push(b);
                table.entries.insert(SubMarkovKey { chars: k }, ca * model.b.coeff(b));
            }
        }
        if len < max_len {
            prefixes = prefixes
                .iter()
                .flat_map(|(chars, ca)| {
                    (0..=npsi).map(move |a| {
                        let mut k = chars.clone();
                        k.push(a);
                        (k, ca * model.a.coeff(a))
                    })
                })
                .collect();
        }
    }
    table
}

/// Nested Kronecker regressors `z_n(t) = ψ_t ⊗ z_{n−1}(t−1)`, `z_1(t) = ψ_t ⊗ u_t`, stacked for
/// `n = 1 … nh+1`. Samples before the start of the record are zero.
pub(crate) struct KronRegressor {
    npsi1: usize,
    nu: usize,
    nh: usize,
    prev: Vec<Vec<f64>>,
}

impl KronRegressor {
    pub(crate) fn new(npsi: usize, nu: usize, nh: usize) -> Self {
        let npsi1 = npsi + 1;
        let prev = (1..=nh + 1).map(|n| vec![0.0; npsi1.pow(n as u32) * nu]).collect();
        Self { npsi1, nu, nh, prev }
    }

    pub(crate) fn nf(&self) -> usize {
        self.prev.iter().map(Vec::len).sum()
    }

    /// Advances one sample and writes the stacked regressor into `out` (length `nf`).
    pub(crate) fn step(&mut self, psi: &[f64], u: &[f64], out: &mut [f64]) {
        debug_assert_eq!(psi.len(), self.npsi1);
        debug_assert_eq!(u.len(), self.nu);
        let mut next: Vec<Vec<f64>> = Vec::with_capacity(self.nh + 1);
        let mut z1 = Vec::with_capacity(self.npsi1 * self.nu);
        for &p in psi {
            z1.extend(u.iter().map(|&v| p * v));
        }
        next.push(z1);
        for n in 1..=self.nh {
            let inner = &self.prev[n - 1];
            let mut z = Vec::with_capacity(self.npsi1 * inner.len());
            for &p in psi {
                z.extend(inner.iter().map(|&v| p * v));
            }
            next.push(z);
        }
        let mut offset = 0;
        for z in &next {
            out[offset..offset + z.len()].copy_from_slice(z);
            offset += z.len();
        }
        self.prev = next;
    }
}

/// Stacks the table entries of all keys up to length `nh + 1` into `θ̄` (`ny × nf`), column
/// `q·nu + j` holding input column `j` of the `q`-th key.
pub fn table_to_theta(table: &SubMarkovTable, nh: usize) -> Result<DMatrix<f64>> {
    let (keys, nf) = enumerate_keys(table.npsi, nh, table.nu, DEFAULT_KEY_CAP)?;
    let missing = table.missing(&keys);
    if !missing.is_empty() {
        return Err(Error::MissingKeys(missing));
    }
    let mut theta = DMatrix::zeros(table.ny, nf);
    for (q, key) in keys.iter().enumerate() {
        theta.columns_mut(q * table.nu, table.nu).copy_from(&table.entries[key]);
    }
    Ok(theta)
}

/// Inverse of [`table_to_theta`].
pub fn theta_to_table(theta: &DMatrix<f64>, npsi: usize, nu: usize, nh: usize) -> Result<SubMarkovTable> {
    let (keys, nf) = enumerate_keys(npsi, nh, nu, DEFAULT_KEY_CAP)?;
    if theta.ncols() != nf {
        return Err(Error::Dimension(format!("θ̄ has {} columns, expected {nf}", theta.ncols())));
    }
    let mut table = SubMarkovTable::new(theta.nrows(), nu, npsi);
    for (q, key) in keys.into_iter().enumerate() {
        table.insert(key, theta.columns(q * nu, nu).into_owned())?;
    }
    Ok(table)
}

/// Output of the truncated impulse response of depth `nh`, started from rest.
pub fn fir_predict(
    table: &SubMarkovTable,
    basis: &BasisFunctionSet,
    nh: usize,
    u: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if basis.npsi() != table.npsi {
        return Err(Error::Dimension(format!("basis has nψ = {}, table {}", basis.npsi(), table.npsi)));
    }
    if u.nrows() != table.nu || u.ncols() != p.ncols() {
        return Err(Error::Dimension(format!(
            "u is {:?} and p has {} samples; table expects nu = {}",
            u.shape(),
            p.ncols(),
            table.nu
        )));
    }
    let theta = table_to_theta(table, nh)?;
    let psi = basis.eval_trajectory(p)?;
    let mut reg = KronRegressor::new(table.npsi, table.nu, nh);
    let mut phi = nalgebra::DVector::zeros(reg.nf());
    let mut y = DMatrix::zeros(table.ny, u.ncols());
    for t in 0..u.ncols() {
        reg.step(psi.column(t).as_slice(), u.column(t).as_slice(), phi.as_mut_slice());
        y.set_column(t, &(&theta * &phi));
    }
    Ok(y)
}
