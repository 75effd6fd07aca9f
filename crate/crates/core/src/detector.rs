//! OOD detector fitted on in-distribution validation features, with the
//! four scoring functions: MSP, energy, Mahalanobis and cosine.
//!
//! Every score is oriented so that a higher value means "more likely OOD".
//! For Mahalanobis this is the minimum class-conditional squared distance
//! itself (not its negation).

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DETECTOR_FORMAT: &str = "SRLOOD-DET-v1";

/// Default cutoff, relative to the largest eigenvalue, below which
/// covariance eigenvalues are treated as zero.
pub const DEFAULT_RTOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scorer {
    Msp,
    Energy,
    Maha,
    Cosine,
}

impl Scorer {
    pub const ALL: [Scorer; 4] = [Scorer::Msp, Scorer::Energy, Scorer::Maha, Scorer::Cosine];

    pub fn name(self) -> &'static str {
        match self {
            Scorer::Msp => "msp",
            Scorer::Energy => "energy",
            Scorer::Maha => "maha",
            Scorer::Cosine => "cosine",
        }
    }
}

impl fmt::Display for Scorer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scorer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scorer::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scorer '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Score {
    pub value: f64,
    pub scorer: Scorer,
}

/// Settings recorded alongside a fitted detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub rtol: f64,
    pub scorers: Vec<Scorer>,
    /// Which split the detector was fitted on ("val" or "train+val").
    pub fit_on: String,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            rtol: DEFAULT_RTOL,
            scorers: Scorer::ALL.to_vec(),
            fit_on: "val".into(),
        }
    }
}

/// Moore-Penrose pseudo-inverse of a symmetric positive semi-definite
/// matrix by eigendecomposition. Eigenvalues at or below `rtol · λ_max`
/// (including negative round-off) are dropped.
pub fn pseudo_inverse_psd(m: &DMatrix<f64>, rtol: f64) -> DMatrix<f64> {
    let n = m.nrows();
    let eig = SymmetricEigen::new(m.clone());
    let lambda_max = eig.eigenvalues.iter().copied().fold(0.0_f64, f64::max);
    let mut out = DMatrix::zeros(n, n);
    if lambda_max <= 0.0 {
        return out;
    }
    let cutoff = rtol * lambda_max;
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda <= cutoff {
            continue;
        }
        let v = eig.eigenvectors.column(k);
        out.ger(1.0 / lambda, &v, &v, 1.0);
    }
    (&out + out.transpose()) * 0.5
}

/// `1 − max softmax(logits)`.
pub fn score_msp(logits: &[f64]) -> Result<Score> {
    check_logits(logits)?;
    let p = ndiff::softmax(logits);
    let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(Score {
        value: 1.0 - max,
        scorer: Scorer::Msp,
    })
}

/// `−log Σ exp(logits)`, computed shift-stably.
pub fn score_energy(logits: &[f64]) -> Result<Score> {
    check_logits(logits)?;
    Ok(Score {
        value: -ndiff::log_sum_exp(logits),
        scorer: Scorer::Energy,
    })
}

fn check_logits(logits: &[f64]) -> Result<()> {
    if logits.len() < 2 {
        return Err(Error::Invalid(format!("need at least 2 logits, got {}", logits.len())));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    Ok(())
}

/// Fitted detector state.
#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    means: Vec<DVector<f64>>,
    covariance: DMatrix<f64>,
    cov_pinv: DMatrix<f64>,
    bank: Vec<DVector<f64>>,
    bank_labels: Vec<usize>,
    bank_norms: Vec<f64>,
    classifier: Option<DMatrix<f64>>,
    config: DetectorConfig,
}

impl Detector {
    /// Fits class means, the shared (1/N) covariance and its pseudo-inverse,
    /// and stores every feature in the cosine bank.
    ///
    /// `classifier`, when given, holds one weight row per class and enables
    /// MSP and energy scoring directly from features.
    pub fn fit(
        features: &[(Vec<f64>, usize)],
        num_classes: usize,
        classifier: Option<Vec<Vec<f64>>>,
        config: DetectorConfig,
    ) -> Result<Self> {
        let d = features
            .first()
            .map(|(h, _)| h.len())
            .ok_or(Error::Invalid("cannot fit a detector on zero features".into()))?;
        if d == 0 {
            return Err(Error::Invalid("zero-dimensional features".into()));
        }
        let mut sums = vec![DVector::<f64>::zeros(d); num_classes];
        let mut counts = vec![0usize; num_classes];
        for (h, y) in features {
            if h.len() != d {
                return Err(Error::DimMismatch {
                    expected: d,
                    got: h.len(),
                });
            }
            if *y >= num_classes {
                return Err(Error::Invalid(format!("label {y} >= class count {num_classes}")));
            }
            if h.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("detector feature".into()));
            }
            sums[*y] += DVector::from_column_slice(h);
            counts[*y] += 1;
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::EmptyClass(c));
        }
        let means: Vec<DVector<f64>> = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &n)| s / n as f64)
            .collect();

        let mut covariance = DMatrix::<f64>::zeros(d, d);
        let mut bank = Vec::with_capacity(features.len());
        let mut bank_labels = Vec::with_capacity(features.len());
        for (h, y) in features {
            let v = DVector::from_column_slice(h);
            let diff = &v - &means[*y];
            covariance.ger(1.0, &diff, &diff, 1.0);
            bank.push(v);
            bank_labels.push(*y);
        }
        covariance /= features.len() as f64;
        covariance = (&covariance + covariance.transpose()) * 0.5;
        let cov_pinv = pseudo_inverse_psd(&covariance, config.rtol);

        let classifier = classifier.map(|rows| rows_to_matrix(&rows, d)).transpose()?;
        if let Some(w) = &classifier {
            if w.nrows() != num_classes {
                return Err(Error::DimMismatch {
                    expected: num_classes,
                    got: w.nrows(),
                });
            }
        }
        let bank_norms = bank.iter().map(|v| v.norm()).collect();
        Ok(Self {
            means,
            covariance,
            cov_pinv,
            bank,
            bank_labels,
            bank_norms,
            classifier,
            config,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.cov_pinv.nrows()
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn cov_pinv(&self) -> &DMatrix<f64> {
        &self.cov_pinv
    }

    pub fn bank_len(&self) -> usize {
        self.bank.len()
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn has_classifier(&self) -> bool {
        self.classifier.is_some()
    }

    fn check_dim(&self, h: &[f64]) -> Result<()> {
        if h.len() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                got: h.len(),
            });
        }
        Ok(())
    }

    /// Minimum squared Mahalanobis distance to a class mean under Σ†.
    pub fn score_maha(&self, h: &[f64]) -> Result<Score> {
        self.check_dim(h)?;
        let v = DVector::from_column_slice(h);
        let value = self
            .means
            .iter()
            .map(|mu| {
                let diff = &v - mu;
                (&self.cov_pinv * &diff).dot(&diff)
            })
            .fold(f64::INFINITY, f64::min)
            .max(0.0);
        Ok(Score {
            value,
            scorer: Scorer::Maha,
        })
    }

    /// Negated maximum cosine similarity to the bank.
    pub fn score_cosine(&self, h: &[f64]) -> Result<Score> {
        self.check_dim(h)?;
        let v = DVector::from_column_slice(h);
        let norm = v.norm();
        if norm == 0.0 || self.bank_norms.contains(&0.0) {
            return Err(Error::ZeroVector);
        }
        let best = self
            .bank
            .iter()
            .zip(&self.bank_norms)
            .map(|(b, bn)| (v.dot(b) / (norm * bn)).clamp(-1.0, 1.0))
            .fold(f64::NEG_INFINITY, f64::max);
        Ok(Score {
            value: -best,
            scorer: Scorer::Cosine,
        })
    }

    /// Classifier logits `W h`, available when the detector carries weights.
    pub fn logits(&self, h: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(h)?;
        let w = self
            .classifier
            .as_ref()
            .ok_or_else(|| Error::Invalid("detector has no classifier weights".into()))?;
        Ok((w * DVector::from_column_slice(h)).iter().copied().collect())
    }

    pub fn score(&self, scorer: Scorer, h: &[f64]) -> Result<Score> {
        match scorer {
            Scorer::Maha => self.score_maha(h),
            Scorer::Cosine => self.score_cosine(h),
            Scorer::Msp => score_msp(&self.logits(h)?),
            Scorer::Energy => score_energy(&self.logits(h)?),
        }
    }

    /// Writes the versioned JSON form.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(&self.to_file())?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: DetectorFile = serde_json::from_str(&text)?;
        Self::from_file(file)
    }

    fn to_file(&self) -> DetectorFile {
        DetectorFile {
            format: DETECTOR_FORMAT.to_string(),
            c: self.num_classes(),
            d: self.dim(),
            means: self.means.iter().map(|m| m.iter().copied().collect()).collect(),
            covariance: matrix_to_rows(&self.covariance),
            cov_pinv: matrix_to_rows(&self.cov_pinv),
            bank: self
                .bank
                .iter()
                .zip(&self.bank_labels)
                .map(|(h, &label)| BankEntry {
                    label,
                    h: h.iter().copied().collect(),
                })
                .collect(),
            classifier: self.classifier.as_ref().map(matrix_to_rows),
            config: self.config.clone(),
        }
    }

    fn from_file(file: DetectorFile) -> Result<Self> {
        if file.format != DETECTOR_FORMAT {
            return Err(Error::Format {
                expected: DETECTOR_FORMAT.into(),
                found: file.format,
            });
        }
        let d = file.d;
        if file.means.len() != file.c || file.bank.is_empty() {
            return Err(Error::Invalid("detector file has inconsistent class count or empty bank".into()));
        }
        let means = file
            .means
            .iter()
            .map(|m| {
                if m.len() == d {
                    Ok(DVector::from_column_slice(m))
                } else {
                    Err(Error::DimMismatch {
                        expected: d,
                        got: m.len(),
                    })
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let mut bank = Vec::with_capacity(file.bank.len());
        let mut bank_labels = Vec::with_capacity(file.bank.len());
        for e in &file.bank {
            if e.h.len() != d {
                return Err(Error::DimMismatch {
                    expected: d,
                    got: e.h.len(),
                });
            }
            bank.push(DVector::from_column_slice(&e.h));
            bank_labels.push(e.label);
        }
        let bank_norms = bank.iter().map(|v| v.norm()).collect();
        Ok(Self {
            means,
            covariance: rows_to_matrix(&file.covariance, d)?,
            cov_pinv: rows_to_matrix(&file.cov_pinv, d)?,
            bank,
            bank_labels,
            bank_norms,
            classifier: file.classifier.map(|r| rows_to_matrix(&r, d)).transpose()?,
            config: file.config,
        })
    }
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn rows_to_matrix(rows: &[Vec<f64>], cols: usize) -> Result<DMatrix<f64>> {
    if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
        return Err(Error::DimMismatch {
            expected: cols,
            got: bad.len(),
        });
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

#[derive(Serialize, Deserialize)]
struct BankEntry {
    label: usize,
    h: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct DetectorFile {
    format: String,
    #[serde(rename = "C")]
    c: usize,
    d: usize,
    means: Vec<Vec<f64>>,
    covariance: Vec<Vec<f64>>,
    cov_pinv: Vec<Vec<f64>>,
    bank: Vec<BankEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    classifier: Option<Vec<Vec<f64>>>,
    #[serde(rename = "scorer-config")]
    config: DetectorConfig,
}
