//! Embedding tables, base and popularity-aware initialization, magnitude
//! diagnostics and the binary table format.
//!
//! Table file layout (all integers little-endian):
//!
//! | offset | size | field                                  |
//! |--------|------|----------------------------------------|
//! | 0      | 4    | magic `PRSM`                           |
//! | 4      | 1    | version = 1                            |
//! | 5      | 1    | endianness flag, 0 = little            |
//! | 6      | 2    | reserved (zero)                        |
//! | 8      | 8    | rows (u64)                             |
//! | 16     | 8    | dim (u64)                              |
//! | 24     | 8·rows·dim | IEEE-754 f64 values, row-major   |

use std::fs;
use std::path::Path;

use rand::distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::linalg;
use crate::seeded_rng;
use crate::stats;

pub const TABLE_MAGIC: &[u8; 4] = b"PRSM";
pub const TABLE_VERSION: u8 = 1;
pub const TABLE_HEADER_LEN: usize = 24;

/// Dense `rows x dim` matrix of `f64`, one row per entity.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    rows: usize,
    dim: usize,
    values: Vec<f64>,
}

impl EmbeddingTable {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        EmbeddingTable {
            rows,
            dim,
            values: vec![0.0; rows * dim],
        }
    }

    pub fn from_values(rows: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "table shape {rows}x{dim} must be nonempty"
            )));
        }
        if values.len() != rows * dim {
            return Err(Error::InvalidArgument(format!(
                "{} values for a {rows}x{dim} table",
                values.len()
            )));
        }
        Ok(EmbeddingTable { rows, dim, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.dim..(r + 1) * self.dim]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.dim..(r + 1) * self.dim]
    }

    pub fn scale_row(&mut self, r: usize, c: f64) {
        self.row_mut(r).iter_mut().for_each(|v| *v *= c);
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Copy with every row scaled to unit length; errors on a zero row.
    pub fn normalized(&self, entity: &'static str) -> Result<EmbeddingTable> {
        let mut out = self.clone();
        for r in 0..self.rows {
            let n = linalg::norm(self.row(r));
            if n == 0.0 {
                return Err(Error::ZeroRow { entity, index: r });
            }
            out.scale_row(r, 1.0 / n);
        }
        Ok(out)
    }
}

/// Uniform Xavier initialization: entries i.i.d. on `[-b, b]` with
/// `b = sqrt(6 / (rows + dim))`.
pub fn init_xavier(rows: usize, dim: usize, seed: u64) -> Result<EmbeddingTable> {
    if rows == 0 || dim == 0 {
        return Err(Error::InvalidArgument(format!(
            "table shape {rows}x{dim} must be nonempty"
        )));
    }
    let bound = (6.0 / (rows + dim) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite positive bound");
    let mut rng = seeded_rng(seed, 0x1417);
    let values = (0..rows * dim).map(|_| dist.sample(&mut rng)).collect();
    EmbeddingTable::from_values(rows, dim, values)
}

/// Base of the logarithm in the PRISM magnitude.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LogBase {
    #[default]
    Natural,
    Two,
    Ten,
}

impl LogBase {
    pub fn log(self, x: f64) -> f64 {
        match self {
            LogBase::Natural => x.ln(),
            LogBase::Two => x.log2(),
            LogBase::Ten => x.log10(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "e" | "natural" | "ln" => Some(LogBase::Natural),
            "2" => Some(LogBase::Two),
            "10" => Some(LogBase::Ten),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LogBase::Natural => "e",
            LogBase::Two => "2",
            LogBase::Ten => "10",
        }
    }
}

/// Target magnitude `alpha * log(d + 2) + (1 - alpha)`.
pub fn prism_magnitude(degree: u32, alpha: f64, base: LogBase) -> f64 {
    alpha * base.log(degree as f64 + 2.0) + (1.0 - alpha)
}

/// Rescales each base row to unit length, then to its popularity-aware
/// magnitude. Row directions are preserved.
pub fn prism_init(
    base: &EmbeddingTable,
    degrees: &[u32],
    alpha: f64,
    log_base: LogBase,
) -> Result<EmbeddingTable> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    if degrees.len() != base.rows() {
        return Err(Error::InvalidArgument(format!(
            "{} degrees for a table with {} rows",
            degrees.len(),
            base.rows()
        )));
    }
    let mut out = base.clone();
    for (r, &d) in degrees.iter().enumerate() {
        let n = linalg::norm(base.row(r));
        if n == 0.0 {
            return Err(Error::ZeroRow {
                entity: "base",
                index: r,
            });
        }
        let target = prism_magnitude(d, alpha, log_base);
        for v in out.row_mut(r) {
            *v = target * (*v / n);
        }
    }
    Ok(out)
}

/// Which tables PRISM rescales.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ApplyTo {
    Items,
    Users,
    #[default]
    Both,
}

impl ApplyTo {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "items" => Some(ApplyTo::Items),
            "users" => Some(ApplyTo::Users),
            "both" => Some(ApplyTo::Both),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ApplyTo::Items => "items",
            ApplyTo::Users => "users",
            ApplyTo::Both => "both",
        }
    }

    pub fn items(self) -> bool {
        matches!(self, ApplyTo::Items | ApplyTo::Both)
    }

    pub fn users(self) -> bool {
        matches!(self, ApplyTo::Users | ApplyTo::Both)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitStrategy {
    XavierUniform,
    Prism { alpha: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitSpec {
    pub strategy: InitStrategy,
    pub apply_to: ApplyTo,
    pub log_base: LogBase,
}

impl Default for InitSpec {
    fn default() -> Self {
        InitSpec {
            strategy: InitStrategy::XavierUniform,
            apply_to: ApplyTo::Both,
            log_base: LogBase::Natural,
        }
    }
}

impl InitSpec {
    pub fn prism(alpha: f64) -> Self {
        InitSpec {
            strategy: InitStrategy::Prism { alpha },
            ..Default::default()
        }
    }

    /// Builds the user and item tables: Xavier base (independent streams per
    /// table), then PRISM on the selected tables using their own degrees.
    pub fn build(
        &self,
        user_degree: &[u32],
        item_degree: &[u32],
        dim: usize,
        seed: u64,
    ) -> Result<(EmbeddingTable, EmbeddingTable)> {
        let mut users = init_xavier(user_degree.len(), dim, seed.wrapping_mul(2).wrapping_add(1))?;
        let mut items = init_xavier(item_degree.len(), dim, seed.wrapping_mul(2).wrapping_add(2))?;
        if let InitStrategy::Prism { alpha } = self.strategy {
            if self.apply_to.users() {
                users = prism_init(&users, user_degree, alpha, self.log_base)?;
            }
            if self.apply_to.items() {
                items = prism_init(&items, item_degree, alpha, self.log_base)?;
            }
        }
        Ok((users, items))
    }
}

/// Per-row L2 norms.
pub fn magnitudes(table: &EmbeddingTable) -> Vec<f64> {
    (0..table.rows())
        .map(|r| linalg::norm(table.row(r)))
        .collect()
}

/// Magnitudes of one table against entity degrees.
#[derive(Clone, Debug, PartialEq)]
pub struct MagnitudeReport {
    pub magnitudes: Vec<f64>,
    /// Pearson over `(log(d + 2), ||row||)`; `None` when undefined.
    pub pearson_log: Option<f64>,
    /// Spearman over `(d, ||row||)`; `None` when undefined.
    pub spearman: Option<f64>,
}

impl MagnitudeReport {
    /// Whether both correlations could be computed.
    pub fn defined(&self) -> bool {
        self.pearson_log.is_some() && self.spearman.is_some()
    }
}

pub fn magnitude_popularity_correlation(
    table: &EmbeddingTable,
    degrees: &[u32],
) -> Result<MagnitudeReport> {
    if degrees.len() != table.rows() {
        return Err(Error::InvalidArgument(format!(
            "{} degrees for a table with {} rows",
            degrees.len(),
            table.rows()
        )));
    }
    let mags = magnitudes(table);
    let deg: Vec<f64> = degrees.iter().map(|&d| d as f64).collect();
    let log_deg: Vec<f64> = deg.iter().map(|d| (d + 2.0).ln()).collect();
    let enough = degrees.len() >= 3 && degrees.iter().any(|&d| d != degrees[0]);
    let (pearson_log, spearman) = if enough {
        (
            stats::pearson(&log_deg, &mags),
            stats::spearman(&deg, &mags),
        )
    } else {
        (None, None)
    };
    Ok(MagnitudeReport {
        magnitudes: mags,
        pearson_log,
        spearman,
    })
}

/// Serializes a table in the `PRSM` v1 format.
pub fn encode_table(table: &EmbeddingTable) -> Vec<u8> {
    let mut out = Vec::with_capacity(TABLE_HEADER_LEN + 8 * table.values.len());
    out.extend_from_slice(TABLE_MAGIC);
    out.push(TABLE_VERSION);
    out.push(0);
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&(table.rows as u64).to_le_bytes());
    out.extend_from_slice(&(table.dim as u64).to_le_bytes());
    for v in &table.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses one table from the front of `bytes`; returns it and the bytes consumed.
pub fn decode_table(bytes: &[u8]) -> Result<(EmbeddingTable, usize)> {
    if bytes.len() < TABLE_HEADER_LEN {
        return Err(Error::Format(format!(
            "header truncated: {} of {TABLE_HEADER_LEN} bytes",
            bytes.len()
        )));
    }
    if &bytes[0..4] != TABLE_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    if bytes[4] != TABLE_VERSION {
        return Err(Error::Format(format!("unsupported version {}", bytes[4])));
    }
    if bytes[5] != 0 {
        return Err(Error::Format(format!(
            "unsupported endianness flag {}",
            bytes[5]
        )));
    }
    let word = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let (rows, dim) = (word(8), word(16));
    let body = rows
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| Error::Format(format!("shape {rows}x{dim} overflows")))?;
    let total = TABLE_HEADER_LEN + body;
    if bytes.len() < total {
        return Err(Error::Format(format!(
            "length mismatch: {rows}x{dim} table needs {total} bytes, found {}",
            bytes.len()
        )));
    }
    let values = bytes[TABLE_HEADER_LEN..total]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let table = EmbeddingTable::from_values(rows as usize, dim as usize, values)
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok((table, total))
}

pub fn dump_table(table: &EmbeddingTable, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, &encode_table(table))
}

pub fn load_table(path: &Path) -> Result<EmbeddingTable> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (table, used) = decode_table(&bytes)?;
    if used != bytes.len() {
        return Err(Error::Format(format!(
            "length mismatch: {} trailing bytes",
            bytes.len() - used
        )));
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn xavier_bound_and_determinism() {
        let t = init_xavier(2, 2, 3).unwrap();
        let b = (6.0f64 / 4.0).sqrt();
        assert!((b - 1.224_744_871_391_589).abs() < 1e-15);
        assert!(t.values().iter().all(|v| v.abs() <= b));
        let again = init_xavier(2, 2, 3).unwrap();
        assert!(t
            .values()
            .iter()
            .zip(again.values())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(init_xavier(0, 3, 0).is_err());
    }

    #[test]
    fn xavier_mean_is_zero_within_three_se() {
        let t = init_xavier(3629, 64, 17).unwrap();
        let n = t.values().len() as f64;
        let b = (6.0 / (3629.0 + 64.0f64)).sqrt();
        let se = b / 3f64.sqrt() / n.sqrt();
        let mean = t.values().iter().sum::<f64>() / n;
        assert!(mean.abs() < 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn prism_examples() {
        let base = init_xavier(3, 4, 1).unwrap();
        let unit = prism_init(&base, &[0, 5, 100], 0.0, LogBase::Natural).unwrap();
        assert!(magnitudes(&unit).iter().all(|m| (m - 1.0).abs() < 1e-15));

        let full = prism_init(&base, &[0, 5, 8], 1.0, LogBase::Natural).unwrap();
        assert!((magnitudes(&full)[0] - std::f64::consts::LN_2).abs() < 1e-15);

        let half = prism_init(&base, &[0, 5, 8], 0.5, LogBase::Natural).unwrap();
        assert!((magnitudes(&half)[2] - 1.651_292_546_497_023).abs() < 1e-12);
    }

    #[test]
    fn prism_errors() {
        let zero = EmbeddingTable::zeros(2, 3);
        assert!(matches!(
            prism_init(&zero, &[1, 2], 1.0, LogBase::Natural),
            Err(Error::ZeroRow { index: 0, .. })
        ));
        let base = init_xavier(2, 3, 0).unwrap();
        assert!(prism_init(&base, &[1], 1.0, LogBase::Natural).is_err());
        assert!(prism_init(&base, &[1, 1], 1.5, LogBase::Natural).is_err());
    }

    #[test]
    fn prism_log_base_is_configurable() {
        let base = init_xavier(1, 3, 0).unwrap();
        let t = prism_init(&base, &[6], 1.0, LogBase::Two).unwrap();
        assert!((magnitudes(&t)[0] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn magnitude_basics() {
        let t = EmbeddingTable::from_values(2, 2, vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        assert_eq!(magnitudes(&t), vec![5.0, 0.0]);
        let degrees: Vec<u32> = (0..50).map(|k| k * k % 97).collect();
        let base = init_xavier(50, 8, 2).unwrap();
        let p = prism_init(&base, &degrees, 1.0, LogBase::Natural).unwrap();
        for (m, d) in magnitudes(&p).iter().zip(&degrees) {
            assert!((m - (*d as f64 + 2.0).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn correlation_of_prism_table_is_exact() {
        let degrees: Vec<u32> = (0..200).map(|k| k * k + 1).collect();
        let base = init_xavier(200, 16, 5).unwrap();
        let p = prism_init(&base, &degrees, 1.0, LogBase::Natural).unwrap();
        let rep = magnitude_popularity_correlation(&p, &degrees).unwrap();
        assert!((rep.pearson_log.unwrap() - 1.0).abs() < 1e-9);
        assert!((rep.spearman.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn correlation_of_random_table_is_weak() {
        let degrees: Vec<u32> = (0..600)
            .map(|k| (5000.0 / (k as f64 + 1.0)) as u32)
            .collect();
        let base = init_xavier(600, 64, 8).unwrap();
        let rep = magnitude_popularity_correlation(&base, &degrees).unwrap();
        assert!(rep.spearman.unwrap().abs() < 0.2);
    }

    #[test]
    fn correlation_constant_degrees_undefined() {
        let base = init_xavier(5, 4, 8).unwrap();
        let rep = magnitude_popularity_correlation(&base, &[3; 5]).unwrap();
        assert!(!rep.defined());
        assert_eq!(rep.spearman, None);
    }

    #[test]
    fn table_file_layout() {
        let t = init_xavier(3629, 64, 0).unwrap();
        let bytes = encode_table(&t);
        assert_eq!(bytes.len(), 24 + 3629 * 64 * 8);
        assert_eq!(&bytes[..8], b"PRSM\x01\x00\x00\x00");
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 3629);
    }

    #[test]
    fn truncated_table_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.prsm");
        let t = init_xavier(4, 3, 0).unwrap();
        dump_table(&t, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_table(&p), Err(Error::Format(m)) if m.contains("length")));
        std::fs::write(&p, &bytes[..10]).unwrap();
        assert!(matches!(load_table(&p), Err(Error::Format(m)) if m.contains("header")));
    }

    proptest! {
        #[test]
        fn table_round_trip_is_bitwise(rows in 1usize..6, dim in 1usize..6, seed in any::<u64>(), special in any::<u64>()) {
            let mut t = init_xavier(rows, dim, seed).unwrap();
            t.values_mut()[0] = f64::from_bits(special);
            let (back, used) = decode_table(&encode_table(&t)).unwrap();
            prop_assert_eq!(used, 24 + rows * dim * 8);
            prop_assert!(back.values().iter().zip(t.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }

        #[test]
        fn prism_preserves_direction_and_orders_by_degree(
            seed in any::<u64>(),
            degrees in proptest::collection::vec(0u32..10_000, 2..20),
            alpha in 0.01f64..=1.0,
        ) {
            let base = init_xavier(degrees.len(), 6, seed).unwrap();
            let p = prism_init(&base, &degrees, alpha, LogBase::Natural).unwrap();
            let mags = magnitudes(&p);
            for r in 0..degrees.len() {
                let cos = linalg::dot(base.row(r), p.row(r)) / (linalg::norm(base.row(r)) * mags[r]);
                prop_assert!((cos - 1.0).abs() < 1e-12);
                let expected = alpha * (degrees[r] as f64 + 2.0).ln() + 1.0 - alpha;
                prop_assert!((mags[r] - expected).abs() < 1e-12 * expected.max(1.0));
            }
            for a in 0..degrees.len() {
                for b in 0..degrees.len() {
                    if degrees[a] > degrees[b] {
                        prop_assert!(mags[a] > mags[b]);
                    }
                }
            }
        }
    }
}
