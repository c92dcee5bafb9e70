//! Fitting the iteration-time law from measurement files.
//!
//! Mixed-mode measurements `(C, tau)` are fitted by ordinary least squares to
//! `tau = alpha + beta * C`; the solo decode speed is the mean of the measured
//! per-stream token rates.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::HardwareProfile;
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("all chunk sizes are equal; slope is unidentifiable")]
    DegenerateDesign,
    #[error("no samples")]
    EmptySamples,
    #[error("non-positive measurement at row {row}: {value}")]
    NonPositive { row: usize, value: f64 },
    #[error("reading {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixedSample<T: Scalar> {
    pub chunk_size: T,
    #[serde(rename = "iter_time_s")]
    pub iter_time: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoloSample<T: Scalar> {
    pub tokens_per_s: T,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MeasurementSet<T: Scalar> {
    pub mixed_samples: Vec<MixedSample<T>>,
    pub solo_samples: Vec<SoloSample<T>>,
}

impl<T: Scalar + serde::de::DeserializeOwned> MeasurementSet<T> {
    /// Reads `chunk_size,iter_time_s` and `tokens_per_s` CSV files.
    pub fn load(mixed: impl AsRef<Path>, solo: impl AsRef<Path>) -> Result<Self, CalibrationError> {
        Ok(Self {
            mixed_samples: read_csv(mixed.as_ref())?,
            solo_samples: read_csv(solo.as_ref())?,
        })
    }
}

fn read_csv<R: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<R>, CalibrationError> {
    let wrap = |source| CalibrationError::Csv {
        path: path.display().to_string(),
        source,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(wrap)?;
    rdr.deserialize().collect::<Result<Vec<R>, _>>().map_err(wrap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult<T: Scalar> {
    pub alpha: T,
    pub beta: T,
    pub gamma: T,
    pub r_squared: T,
    pub n_mixed: usize,
    pub n_solo: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit<T> {
    pub alpha: T,
    pub beta: T,
    pub r_squared: T,
}

/// OLS fit of `tau = alpha + beta * C`.
pub fn fit_mixed<T: Scalar>(samples: &[MixedSample<T>]) -> Result<LinearFit<T>, CalibrationError> {
    if samples.is_empty() {
        return Err(CalibrationError::EmptySamples);
    }
    for (row, s) in samples.iter().enumerate() {
        for v in [s.chunk_size, s.iter_time] {
            if !(v > T::zero()) {
                return Err(CalibrationError::NonPositive { row, value: v.as_f64() });
            }
        }
    }
    let n = T::from_usize_lossy(samples.len());
    let mean_c = samples.iter().map(|s| s.chunk_size).sum::<T>() / n;
    let mean_t = samples.iter().map(|s| s.iter_time).sum::<T>() / n;
    // Centered sums are order-independent up to rounding and well conditioned
    // for chunk sizes in the hundreds.
    let mut sxx = T::zero();
    let mut sxy = T::zero();
    let mut syy = T::zero();
    for s in samples {
        let dx = s.chunk_size - mean_c;
        let dy = s.iter_time - mean_t;
        sxx = sxx + dx * dx;
        sxy = sxy + dx * dy;
        syy = syy + dy * dy;
    }
    let scale = samples.iter().map(|s| s.chunk_size.abs()).fold(T::zero(), T::max);
    if sxx <= T::epsilon() * scale * scale * n {
        return Err(CalibrationError::DegenerateDesign);
    }
    let beta = sxy / sxx;
    let alpha = mean_t - beta * mean_c;
    let ss_res = samples
        .iter()
        .map(|s| {
            let r = s.iter_time - alpha - beta * s.chunk_size;
            r * r
        })
        .sum::<T>();
    let r_squared = if syy == T::zero() {
        T::one()
    } else {
        (T::one() - ss_res / syy).max(T::zero()).min(T::one())
    };
    if beta <= T::zero() {
        log::warn!("fitted slope beta = {beta} is not positive; data may not be in the linear regime");
    }
    Ok(LinearFit { alpha, beta, r_squared })
}

/// Solo token speed: arithmetic mean of measured rates.
pub fn fit_solo<T: Scalar>(samples: &[SoloSample<T>]) -> Result<T, CalibrationError> {
    if samples.is_empty() {
        return Err(CalibrationError::EmptySamples);
    }
    for (row, s) in samples.iter().enumerate() {
        if !(s.tokens_per_s > T::zero()) {
            return Err(CalibrationError::NonPositive {
                row,
                value: s.tokens_per_s.as_f64(),
            });
        }
    }
    let n = T::from_usize_lossy(samples.len());
    Ok(samples.iter().map(|s| s.tokens_per_s).sum::<T>() / n)
}

pub fn calibrate<T: Scalar>(set: &MeasurementSet<T>) -> Result<CalibrationResult<T>, CalibrationError> {
    let fit = fit_mixed(&set.mixed_samples)?;
    let gamma = fit_solo(&set.solo_samples)?;
    Ok(CalibrationResult {
        alpha: fit.alpha,
        beta: fit.beta,
        gamma,
        r_squared: fit.r_squared,
        n_mixed: set.mixed_samples.len(),
        n_solo: set.solo_samples.len(),
    })
}

/// Hardware profile with `a = beta` and `c = alpha + beta * b0`.
pub fn build_profile<T: Scalar>(
    result: &CalibrationResult<T>,
    batch_cap: usize,
    chunk_size: T,
    threshold: T,
) -> HardwareProfile<T> {
    HardwareProfile::from_affine(batch_cap, chunk_size, result.alpha, result.beta, threshold, result.gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::iteration_time;

    fn line(cs: &[f64], alpha: f64, beta: f64) -> Vec<MixedSample<f64>> {
        cs.iter()
            .map(|&c| MixedSample {
                chunk_size: c,
                iter_time: alpha + beta * c,
            })
            .collect()
    }

    #[test]
    fn noiseless_line_recovered() {
        let fit = fit_mixed(&line(&[64.0, 128.0, 256.0, 512.0], 0.0174, 6.2e-5)).unwrap();
        assert!((fit.alpha - 0.0174).abs() < 1e-14);
        assert!((fit.beta - 6.2e-5).abs() < 1e-17);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_design() {
        let samples = line(&[256.0, 256.0, 256.0], 0.01, 1e-4);
        assert!(matches!(fit_mixed(&samples), Err(CalibrationError::DegenerateDesign)));
    }

    #[test]
    fn solo_means() {
        let s = |v: f64| SoloSample { tokens_per_s: v };
        assert_eq!(fit_solo(&[s(45.45)]).unwrap(), 45.45);
        assert_eq!(fit_solo(&[s(40.0), s(50.0)]).unwrap(), 45.0);
        assert!(matches!(fit_solo::<f64>(&[]), Err(CalibrationError::EmptySamples)));
    }

    #[test]
    fn profile_from_fit() {
        let res = CalibrationResult::<f64> {
            alpha: 0.0174,
            beta: 6.2e-5,
            gamma: 45.45,
            r_squared: 1.0,
            n_mixed: 4,
            n_solo: 1,
        };
        let hw = build_profile(&res, 16, 256.0, 0.0);
        assert!((iteration_time(256.0, &hw) - 0.033272).abs() < 1e-12);
        let hw = build_profile(&res, 16, 256.0, 100.0);
        assert!((hw.fixed_overhead - 0.0236).abs() < 1e-12);
        assert!((hw.tau() - 0.033272).abs() < 1e-12);
        let flat = CalibrationResult { beta: 0.0, ..res };
        assert_eq!(build_profile(&flat, 16, 256.0, 100.0).fixed_overhead, 0.0174);
    }

    #[test]
    fn fit_is_generic_over_f32() {
        let samples: Vec<MixedSample<f32>> = [64.0f32, 128.0, 256.0, 512.0]
            .iter()
            .map(|&c| MixedSample {
                chunk_size: c,
                iter_time: 0.0174 + 6.2e-5 * c,
            })
            .collect();
        let fit = fit_mixed(&samples).unwrap();
        assert!((fit.alpha - 0.0174).abs() < 1e-5);
        assert!((fit.beta - 6.2e-5).abs() / 6.2e-5 < 1e-3);
    }
}
