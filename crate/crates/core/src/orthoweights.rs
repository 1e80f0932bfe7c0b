//! Frozen classification heads.
//!
//! Two constructions are provided:
//!
//! * [`build_hadamard`]: a dense `2^T × K` matrix obtained by repeatedly
//!   doubling `M ↦ [[M, -M], [M, M]]` starting from the scalar `2^{-T/2}·s`
//!   and keeping the first `K` columns. Columns are mutually orthogonal, all
//!   have length `s`, and every entry has magnitude `2^{-T/2}·s`.
//! * [`build_max_mahalanobis`]: equal-norm centers with pairwise inner
//!   products `-s²/(K-1)`, stored as an upper-triangular factor of the target
//!   Gram matrix embedded in the top `K` rows of a `P × K` matrix.
//!
//! Matrices are stored column-major (one contiguous slice per class).

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gradcore::DenseTensor;

/// Largest supported recursion depth for the dense construction.
pub const MAX_DEPTH: u32 = 20;

const MAGIC: &[u8; 4] = b"ORTW";
const VERSION: u32 = 1;

/// Relative tolerance accepted for the final (rank-deficient) Cholesky pivot.
const PIVOT_TOL: f64 = 1e-10;

/// How a head was constructed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightKind {
    /// Recursive dense construction with depth `T`, so `P = 2^T`.
    DenseOrthogonal { depth: u32 },
    /// Upper-triangular Max-Mahalanobis centers.
    MaxMahalanobisUt,
}

impl WeightKind {
    fn code(self) -> u8 {
        match self {
            WeightKind::DenseOrthogonal { .. } => 0,
            WeightKind::MaxMahalanobisUt => 1,
        }
    }
}

/// A frozen `P × K` classifier weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierWeights {
    matrix: Vec<f64>,
    features: usize,
    classes: usize,
    scale: f64,
    kind: WeightKind,
}

impl ClassifierWeights {
    /// Wraps a raw column-major matrix without checking the geometric
    /// invariants; use [`verify`] to audit it.
    pub fn from_raw(kind: WeightKind, features: usize, classes: usize, scale: f64, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != features * classes {
            return Err(Error::ShapeMismatch(format!(
                "weight matrix has {} values, expected {features}×{classes}",
                matrix.len()
            )));
        }
        if features == 0 || classes == 0 {
            return Err(Error::InvalidParameter("empty weight matrix".into()));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidParameter(format!("scale must be positive, got {scale}")));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("weight matrix"));
        }
        Ok(Self {
            matrix,
            features,
            classes,
            scale,
            kind,
        })
    }

    pub fn kind(&self) -> WeightKind {
        self.kind
    }

    /// Feature dimension `P`.
    pub fn features(&self) -> usize {
        self.features
    }

    /// Class count `K`.
    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Common column length `s`.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Column-major entries.
    pub fn as_slice(&self) -> &[f64] {
        &self.matrix
    }

    pub fn column(&self, class: usize) -> &[f64] {
        &self.matrix[class * self.features..(class + 1) * self.features]
    }

    pub fn entry(&self, row: usize, class: usize) -> f64 {
        self.matrix[class * self.features + row]
    }

    /// Mutable access for fault injection in tests and tools.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.matrix
    }

    /// The matrix as a row-major `P × K` tensor, ready to right-multiply a
    /// feature batch.
    pub fn to_tensor(&self) -> DenseTensor {
        let mut data = vec![0.0; self.features * self.classes];
        for class in 0..self.classes {
            for (row, &v) in self.column(class).iter().enumerate() {
                data[row * self.classes + class] = v;
            }
        }
        DenseTensor::from_parts(vec![self.features, self.classes], data)
    }

    /// `WᵀW`, row-major `K × K`.
    pub fn gram(&self) -> Vec<f64> {
        let k = self.classes;
        let mut gram = vec![0.0; k * k];
        for i in 0..k {
            for j in i..k {
                let dot: f64 = self.column(i).iter().zip(self.column(j)).map(|(a, b)| a * b).sum();
                gram[i * k + j] = dot;
                gram[j * k + i] = dot;
            }
        }
        gram
    }

    /// Serializes to the binary `ORTW` format.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&[self.kind.code()])?;
        out.write_all(&(self.features as u64).to_le_bytes())?;
        out.write_all(&(self.classes as u64).to_le_bytes())?;
        out.write_all(&self.scale.to_le_bytes())?;
        for v in &self.matrix {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(33 + 8 * self.matrix.len());
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Hex SHA-256 of the binary serialization.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// Parses the binary `ORTW` format. The loaded matrix must pass
    /// [`verify`] at tolerance `1e-8`.
    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const HEADER: usize = 4 + 4 + 1 + 8 + 8 + 8;
        if bytes.len() < HEADER {
            return Err(Error::Truncated("weight file header".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::BadMagic {
                what: "weight file".into(),
                expected: "ORTW".into(),
                found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::InvalidParameter(format!(
                "unsupported weight file version {version}"
            )));
        }
        let code = bytes[8];
        let features = u64::from_le_bytes(bytes[9..17].try_into().unwrap()) as usize;
        let classes = u64::from_le_bytes(bytes[17..25].try_into().unwrap()) as usize;
        let scale = f64::from_le_bytes(bytes[25..33].try_into().unwrap());
        let kind = match code {
            0 => {
                if !features.is_power_of_two() {
                    return Err(Error::InvalidParameter(format!(
                        "dense orthogonal weights need a power-of-two feature dimension, got {features}"
                    )));
                }
                WeightKind::DenseOrthogonal {
                    depth: features.trailing_zeros(),
                }
            }
            1 => WeightKind::MaxMahalanobisUt,
            other => return Err(Error::InvalidParameter(format!("unknown weight kind {other}"))),
        };
        let count = features
            .checked_mul(classes)
            .ok_or_else(|| Error::InvalidParameter("weight matrix too large".into()))?;
        let body = &bytes[HEADER..];
        if body.len() < count * 8 {
            return Err(Error::Truncated("weight matrix".into()));
        }
        if body.len() > count * 8 {
            return Err(Error::InvalidParameter("trailing bytes after weight matrix".into()));
        }
        let matrix = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let weights = Self::from_raw(kind, features, classes, scale, matrix)?;
        let report = verify(&weights, 1e-8);
        if let Some(check) = report.checks.iter().find(|c| !c.passed) {
            return Err(Error::InvalidParameter(format!(
                "weight matrix fails check `{}` (residual {:e})",
                check.name, check.residual
            )));
        }
        Ok(weights)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// CSV with one row per feature coordinate and one column per class.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        let mut header = vec!["row".to_string()];
        header.extend((0..self.classes).map(|c| format!("class_{c}")));
        writer.write_record(&header)?;
        for row in 0..self.features {
            let mut record = vec![row.to_string()];
            record.extend((0..self.classes).map(|c| self.entry(row, c).to_string()));
            writer.write_record(&record)?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Magnitude shared by every entry of the depth-`T` dense construction.
pub fn entry_magnitude(depth: u32, scale: f64) -> f64 {
    scale * 2f64.powf(-(depth as f64) / 2.0)
}

/// Builds the first `classes` columns of the depth-`depth` recursive dense
/// orthogonal matrix with column length `scale`.
pub fn build_hadamard(depth: u32, classes: usize, scale: f64) -> Result<ClassifierWeights> {
    if depth == 0 || depth > MAX_DEPTH {
        return Err(Error::InvalidParameter(format!(
            "depth must be in 1..={MAX_DEPTH}, got {depth}"
        )));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidParameter(format!("scale must be positive, got {scale}")));
    }
    let features = 1usize << depth;
    if classes == 0 {
        return Err(Error::InvalidParameter("class count must be positive".into()));
    }
    if classes > features {
        return Err(Error::InsufficientColumns {
            classes,
            available: features,
        });
    }

    // `cols[j]` holds column j of the current block M^(t); only the columns
    // that feed the first `classes` columns of M^(T) are ever materialized.
    let mut size = 1usize;
    let mut cols: Vec<Vec<f64>> = vec![vec![entry_magnitude(depth, scale)]];
    for _ in 0..depth {
        let next_size = size * 2;
        let keep = classes.min(next_size);
        let mut next = Vec::with_capacity(keep);
        for j in 0..keep {
            let (src, right) = if j < size {
                (&cols[j], false)
            } else {
                (&cols[j - size], true)
            };
            let mut col = Vec::with_capacity(next_size);
            if right {
                col.extend(src.iter().map(|v| -v));
            } else {
                col.extend_from_slice(src);
            }
            col.extend_from_slice(src);
            next.push(col);
        }
        cols = next;
        size = next_size;
    }

    ClassifierWeights::from_raw(
        WeightKind::DenseOrthogonal { depth },
        features,
        classes,
        scale,
        cols.concat(),
    )
}

/// Builds `classes` Max-Mahalanobis centers of length `scale` in a
/// `features`-dimensional space as an upper-triangular Cholesky factor of the
/// target Gram matrix.
pub fn build_max_mahalanobis(features: usize, classes: usize, scale: f64) -> Result<ClassifierWeights> {
    if classes < 2 {
        return Err(Error::TooFewClasses);
    }
    if classes > features {
        return Err(Error::FeatureDimTooSmall { features, classes });
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidParameter(format!("scale must be positive, got {scale}")));
    }
    let k = classes;
    let s2 = scale * scale;
    let off = -s2 / (k as f64 - 1.0);
    let target = |i: usize, j: usize| if i == j { s2 } else { off };

    // Row-major lower factor L with G = L Lᵀ; column j of W is row j of L.
    let mut lower = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..=i {
            let partial: f64 = (0..j).map(|m| lower[i * k + m] * lower[j * k + m]).sum();
            if i == j {
                let pivot = target(i, i) - partial;
                if pivot > PIVOT_TOL * s2 {
                    lower[i * k + i] = pivot.sqrt();
                } else if i == k - 1 && pivot.abs() <= PIVOT_TOL * s2 {
                    lower[i * k + i] = 0.0;
                } else {
                    return Err(Error::GramFactorization { index: i, value: pivot });
                }
            } else {
                let diag = lower[j * k + j];
                lower[i * k + j] = (target(i, j) - partial) / diag;
            }
        }
    }

    let mut matrix = vec![0.0; features * k];
    for class in 0..k {
        for row in 0..=class {
            matrix[class * features + row] = lower[class * k + row];
        }
    }
    ClassifierWeights::from_raw(WeightKind::MaxMahalanobisUt, features, k, scale, matrix)
}

/// Minimum squared distance between two distinct class columns, by brute
/// force over all pairs.
pub fn min_pairwise_sqdist(weights: &ClassifierWeights) -> Result<f64> {
    let k = weights.classes();
    if k < 2 {
        return Err(Error::TooFewClasses);
    }
    let mut best = f64::INFINITY;
    for i in 0..k {
        for j in i + 1..k {
            let d: f64 = weights
                .column(i)
                .iter()
                .zip(weights.column(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            best = best.min(d);
        }
    }
    Ok(best)
}

/// Largest achievable minimum squared distance among `classes` centers of
/// length `scale`: `2Ks²/(K-1)`.
pub fn optimal_sqdist(classes: usize, scale: f64) -> Result<f64> {
    if classes < 2 {
        return Err(Error::TooFewClasses);
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidParameter(format!("scale must be positive, got {scale}")));
    }
    let k = classes as f64;
    Ok(2.0 * k * scale * scale / (k - 1.0))
}

/// One named verification check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    /// Measured worst-case residual, in the units described by `name`.
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerificationReport {
    pub checks: Vec<Check>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl std::fmt::Display for VerificationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{:<18} {}  residual {:.3e}",
                c.name,
                if c.passed { "PASS" } else { "FAIL" },
                c.residual
            )?;
        }
        Ok(())
    }
}

/// Audits the geometric invariants of a head. Residuals are relative:
/// column norms to `s`, Gram entries to `s²`, entry magnitudes to
/// `2^{-T/2}·s`, and support leakage to `s`.
pub fn verify(weights: &ClassifierWeights, tol: f64) -> VerificationReport {
    let s = weights.scale();
    let s2 = s * s;
    let k = weights.classes();
    let p = weights.features();
    let mut checks = Vec::new();

    let norm_residual = (0..k)
        .map(|c| {
            let norm = weights.column(c).iter().map(|v| v * v).sum::<f64>().sqrt();
            (norm - s).abs() / s
        })
        .fold(0.0, f64::max);
    checks.push(Check {
        name: "column_norms",
        passed: norm_residual <= tol,
        residual: norm_residual,
    });

    let off_target = match weights.kind() {
        WeightKind::DenseOrthogonal { .. } => 0.0,
        WeightKind::MaxMahalanobisUt if k > 1 => -s2 / (k as f64 - 1.0),
        WeightKind::MaxMahalanobisUt => 0.0,
    };
    let gram = weights.gram();
    let mut gram_residual: f64 = 0.0;
    for i in 0..k {
        for j in 0..k {
            let target = if i == j { s2 } else { off_target };
            gram_residual = gram_residual.max((gram[i * k + j] - target).abs() / s2);
        }
    }
    checks.push(Check {
        name: "gram",
        passed: gram_residual <= tol,
        residual: gram_residual,
    });

    match weights.kind() {
        WeightKind::DenseOrthogonal { depth } => {
            let magnitude = entry_magnitude(depth, s);
            let shape_ok = p == 1usize << depth;
            let residual = weights
                .as_slice()
                .iter()
                .map(|v| (v.abs() - magnitude).abs() / magnitude)
                .fold(0.0, f64::max);
            checks.push(Check {
                name: "entry_magnitude",
                passed: shape_ok && residual <= tol,
                residual: if shape_ok { residual } else { f64::INFINITY },
            });
        }
        WeightKind::MaxMahalanobisUt => {
            let mut leak: f64 = 0.0;
            for class in 0..k {
                for row in class + 1..p {
                    leak = leak.max(weights.entry(row, class).abs() / s);
                }
            }
            checks.push(Check {
                name: "support",
                passed: leak <= tol,
                residual: leak,
            });
        }
    }

    VerificationReport { checks }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(w: &ClassifierWeights) -> Vec<Vec<f64>> {
        (0..w.features())
            .map(|r| (0..w.classes()).map(|c| w.entry(r, c)).collect())
            .collect()
    }

    #[test]
    fn depth_one_matches_hand_expansion() {
        let w = build_hadamard(1, 2, 2f64.sqrt()).unwrap();
        let m = rows(&w);
        for (got, want) in m.iter().flatten().zip([1.0, -1.0, 1.0, 1.0]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn depth_two_matches_hand_expansion() {
        let w = build_hadamard(2, 4, 2.0).unwrap();
        let expected = [
            [1.0, -1.0, -1.0, 1.0],
            [1.0, 1.0, -1.0, -1.0],
            [1.0, -1.0, 1.0, -1.0],
            [1.0, 1.0, 1.0, 1.0],
        ];
        assert_eq!(rows(&w), expected.iter().map(|r| r.to_vec()).collect::<Vec<_>>());
    }

    #[test]
    fn depth_nine_ten_classes_by_direct_multiplication() {
        let w = build_hadamard(9, 10, 10.0).unwrap();
        assert_eq!(w.features(), 512);
        let magnitude = 10.0 / 512f64.sqrt();
        for v in w.as_slice() {
            assert!((v.abs() - magnitude).abs() < 1e-14);
        }
        for i in 0..10 {
            for j in 0..10 {
                let mut dot = 0.0;
                for r in 0..512 {
                    dot += w.entry(r, i) * w.entry(r, j);
                }
                let want = if i == j { 100.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-10 * 100.0, "({i},{j}) = {dot}");
            }
        }
    }

    #[test]
    fn hadamard_rejects_bad_arguments() {
        assert!(matches!(
            build_hadamard(2, 5, 1.0),
            Err(Error::InsufficientColumns { .. })
        ));
        assert!(matches!(build_hadamard(0, 1, 1.0), Err(Error::InvalidParameter(_))));
        assert!(matches!(build_hadamard(3, 2, 0.0), Err(Error::InvalidParameter(_))));
        assert!(matches!(build_hadamard(3, 2, -1.0), Err(Error::InvalidParameter(_))));
        assert!(matches!(build_hadamard(21, 2, 1.0), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn max_mahalanobis_two_classes_are_antipodal() {
        let w = build_max_mahalanobis(3, 2, 1.0).unwrap();
        assert_eq!(w.column(0), &[1.0, 0.0, 0.0]);
        assert_eq!(w.column(1), &[-1.0, 0.0, 0.0]);
        assert!((min_pairwise_sqdist(&w).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn max_mahalanobis_gram_brute_force() {
        let w = build_max_mahalanobis(16, 10, 10.0).unwrap();
        for i in 0..10 {
            for j in 0..10 {
                let dot: f64 = (0..16).map(|r| w.entry(r, i) * w.entry(r, j)).sum();
                let want = if i == j { 100.0 } else { -100.0 / 9.0 };
                assert!((dot - want).abs() < 1e-8 * 100.0, "({i},{j}) = {dot}");
            }
        }
        for row in 10..16 {
            for c in 0..10 {
                assert_eq!(w.entry(row, c), 0.0);
            }
        }
        let d = min_pairwise_sqdist(&w).unwrap();
        assert!((d - 2000.0 / 9.0).abs() / (2000.0 / 9.0) < 1e-6);
    }

    #[test]
    fn max_mahalanobis_needs_room() {
        assert!(matches!(
            build_max_mahalanobis(1, 2, 1.0),
            Err(Error::FeatureDimTooSmall {
                features: 1,
                classes: 2
            })
        ));
        assert!(matches!(build_max_mahalanobis(4, 1, 1.0), Err(Error::TooFewClasses)));
    }

    #[test]
    fn pairwise_distances() {
        let dense = build_hadamard(4, 10, 10.0).unwrap();
        assert!((min_pairwise_sqdist(&dense).unwrap() - 200.0).abs() < 1e-9);
        let coincident = ClassifierWeights::from_raw(WeightKind::MaxMahalanobisUt, 1, 2, 1.0, vec![1.0, 1.0]).unwrap();
        assert_eq!(min_pairwise_sqdist(&coincident).unwrap(), 0.0);
        let single = build_hadamard(2, 1, 1.0).unwrap();
        assert!(matches!(min_pairwise_sqdist(&single), Err(Error::TooFewClasses)));
    }

    #[test]
    fn optimum_values() {
        assert!((optimal_sqdist(10, 10.0).unwrap() - 2000.0 / 9.0).abs() < 1e-12);
        assert_eq!(optimal_sqdist(2, 1.0).unwrap(), 4.0);
        let big = optimal_sqdist(100_000, 10.0).unwrap();
        assert!((big - 200.0).abs() < 0.01);
        assert!(optimal_sqdist(1, 1.0).is_err());
    }

    #[test]
    fn verifier_passes_clean_and_flags_faults() {
        let w = build_hadamard(3, 8, 1.0).unwrap();
        let report = verify(&w, 1e-10);
        assert!(report.passed(), "{report}");
        assert!(report.check("gram").unwrap().residual < 1e-12);

        let mut bad = w.clone();
        bad.as_mut_slice()[5] += 1e-3;
        let report = verify(&bad, 1e-10);
        assert!(!report.check("entry_magnitude").unwrap().passed);

        let mut leaky = build_max_mahalanobis(12, 10, 10.0).unwrap();
        assert!(verify(&leaky, 1e-10).passed());
        let p = leaky.features();
        leaky.as_mut_slice()[3 * p + 10] = 0.5;
        assert!(!verify(&leaky, 1e-10).check("support").unwrap().passed);
    }

    #[test]
    fn binary_round_trip_and_corruption() {
        let w = build_hadamard(5, 10, 10.0).unwrap();
        let bytes = w.to_bytes();
        assert_eq!(&bytes[..4], b"ORTW");
        assert_eq!(bytes.len(), 33 + 8 * 32 * 10);
        let back = ClassifierWeights::from_bytes(&bytes).unwrap();
        assert_eq!(back, w);

        let mm = build_max_mahalanobis(16, 10, 10.0).unwrap();
        assert_eq!(ClassifierWeights::from_bytes(&mm.to_bytes()).unwrap(), mm);

        assert!(matches!(
            ClassifierWeights::from_bytes(&bytes[..40]),
            Err(Error::Truncated(_))
        ));
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(
            ClassifierWeights::from_bytes(&wrong),
            Err(Error::BadMagic { .. })
        ));
        let mut tampered = bytes;
        let last = tampered.len() - 1;
        tampered[last] ^= 0x40;
        assert!(ClassifierWeights::from_bytes(&tampered).is_err());
    }

    #[test]
    fn csv_export_shape() {
        let w = build_hadamard(2, 3, 2.0).unwrap();
        let mut buf = Vec::new();
        w.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "row,class_0,class_1,class_2");
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[1], "0,1,-1,-1");
    }

    #[test]
    fn to_tensor_is_row_major() {
        let w = build_max_mahalanobis(4, 3, 1.0).unwrap();
        let t = w.to_tensor();
        assert_eq!(t.shape(), &[4, 3]);
        for r in 0..4 {
            for c in 0..3 {
                assert_eq!(t.data()[r * 3 + c], w.entry(r, c));
            }
        }
    }
}
