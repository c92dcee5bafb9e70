//! Domain types and the iteration-time / service-rate arithmetic.
//!
//! A GPU iteration processes one token for every resident decode plus, in
//! mixed mode, one prefill chunk of `C` tokens. Iteration time follows
//! `c + a * max(0, b' - b0)` in the effective token count `b'`; with a chunk
//! present this is the affine law `alpha + beta * C`. Solo (decode-only)
//! iterations run at a separately calibrated per-slot speed `gamma`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("class {class}: {reason}")]
    InvalidClass { class: usize, reason: String },
    #[error("hardware profile: {0}")]
    InvalidHardware(String),
    #[error("pricing: {0}")]
    InvalidPricing(String),
    #[error("instance has no classes")]
    NoClasses,
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing instance json: {0}")]
    Json(#[from] serde_json::Error),
}

/// One request class: mean prompt/output lengths, per-GPU arrival rate and
/// patience (abandonment) rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadClass<T: Scalar> {
    #[serde(rename = "P")]
    pub prompt_len: T,
    #[serde(rename = "D")]
    pub decode_len: T,
    #[serde(rename = "lambda")]
    pub arrival_rate: T,
    #[serde(rename = "theta")]
    pub patience_rate: T,
    #[serde(skip)]
    pub class_id: usize,
}

impl<T: Scalar> WorkloadClass<T> {
    pub fn new(prompt_len: T, decode_len: T, arrival_rate: T, patience_rate: T) -> Self {
        Self {
            prompt_len,
            decode_len,
            arrival_rate,
            patience_rate,
            class_id: 0,
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        let bad = |reason: &str| ModelError::InvalidClass {
            class: self.class_id,
            reason: reason.to_string(),
        };
        if !(self.prompt_len > T::zero()) {
            return Err(bad("prompt length P must be > 0"));
        }
        if !(self.decode_len > T::zero()) {
            return Err(bad("decode length D must be > 0"));
        }
        // lambda = 0 is accepted so that degenerate "no inflow" instances can
        // be planned and simulated.
        if !(self.arrival_rate >= T::zero()) {
            return Err(bad("arrival rate must be >= 0"));
        }
        if !(self.patience_rate >= T::zero()) {
            return Err(bad("patience rate must be >= 0"));
        }
        Ok(())
    }
}

/// Iteration-time law and slot limits of one GPU.
///
/// Stores the primitive parameters `(c, a, b0)`; `alpha`, `beta` and the mixed
/// iteration time `tau` are derived on demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile<T: Scalar> {
    #[serde(rename = "B")]
    pub batch_cap: usize,
    #[serde(rename = "C")]
    pub chunk_size: T,
    #[serde(rename = "c")]
    pub fixed_overhead: T,
    #[serde(rename = "a")]
    pub marginal_cost: T,
    #[serde(rename = "b0", default)]
    pub threshold: T,
    #[serde(rename = "gamma")]
    pub solo_rate: T,
}

impl<T: Scalar> HardwareProfile<T> {
    /// Builds a profile from the affine mixed-iteration fit `tau = alpha + beta*C`.
    pub fn from_affine(batch_cap: usize, chunk_size: T, alpha: T, beta: T, threshold: T, gamma: T) -> Self {
        Self {
            batch_cap,
            chunk_size,
            fixed_overhead: alpha + beta * threshold,
            marginal_cost: beta,
            threshold,
            solo_rate: gamma,
        }
    }

    pub fn alpha(&self) -> T {
        self.fixed_overhead - self.marginal_cost * self.threshold
    }

    pub fn beta(&self) -> T {
        self.marginal_cost
    }

    /// Mixed iteration time `alpha + beta * C`.
    pub fn tau(&self) -> T {
        self.alpha() + self.beta() * self.chunk_size
    }

    /// Solo iteration time, `1 / gamma`.
    pub fn tau_solo(&self) -> T {
        T::one() / self.solo_rate
    }

    pub fn gamma(&self) -> T {
        self.solo_rate
    }

    pub fn batch_cap_scalar(&self) -> T {
        T::from_usize_lossy(self.batch_cap)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |s: &str| Err(ModelError::InvalidHardware(s.to_string()));
        if self.batch_cap < 2 {
            return bad("batch cap B must be >= 2");
        }
        if !(self.chunk_size > T::zero()) {
            return bad("chunk size C must be > 0");
        }
        if !(self.fixed_overhead > T::zero()) {
            return bad("fixed overhead c must be > 0");
        }
        if !(self.marginal_cost > T::zero()) {
            return bad("marginal cost a must be > 0");
        }
        if !(self.threshold >= T::zero()) {
            return bad("threshold b0 must be >= 0");
        }
        if !(self.solo_rate > T::zero()) {
            return bad("solo rate gamma must be > 0");
        }
        if !(self.tau() > T::zero()) {
            return bad("mixed iteration time alpha + beta*C must be > 0");
        }
        Ok(())
    }
}

/// Iteration time for an effective token count `b'`: `c + a*max(0, b' - b0)`.
pub fn iteration_time<T: Scalar>(effective_tokens: T, hw: &HardwareProfile<T>) -> T {
    let excess = (effective_tokens - hw.threshold).max(T::zero());
    hw.fixed_overhead + hw.marginal_cost * excess
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PricingScheme {
    /// Revenue `c_p P + c_d D` recognized when a request finishes decode.
    #[default]
    Bundled,
    /// Prefill and decode tokens billed at the completion of each phase.
    Separate,
}

impl std::fmt::Display for PricingScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PricingScheme::Bundled => f.write_str("bundled"),
            PricingScheme::Separate => f.write_str("separate"),
        }
    }
}

impl std::str::FromStr for PricingScheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "bundled" => Ok(Self::Bundled),
            "separate" => Ok(Self::Separate),
            other => Err(format!("unknown pricing scheme `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pricing<T: Scalar> {
    #[serde(rename = "cp")]
    pub prefill_price: T,
    #[serde(rename = "cd")]
    pub decode_price: T,
    #[serde(default)]
    pub scheme: PricingScheme,
}

impl<T: Scalar> Pricing<T> {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.prefill_price >= T::zero()) || !(self.decode_price >= T::zero()) {
            return Err(ModelError::InvalidPricing("prices must be >= 0".into()));
        }
        if self.prefill_price == T::zero() && self.decode_price == T::zero() {
            return Err(ModelError::InvalidPricing("prices cannot both be zero".into()));
        }
        Ok(())
    }

    /// Bundled per-request reward `w = c_p P + c_d D`.
    pub fn request_value(&self, class: &WorkloadClass<T>) -> T {
        self.prefill_price * class.prompt_len + self.decode_price * class.decode_len
    }
}

/// A complete planning instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance<T: Scalar> {
    pub classes: Vec<WorkloadClass<T>>,
    pub hardware: HardwareProfile<T>,
    pub pricing: Pricing<T>,
}

impl<T: Scalar> Instance<T> {
    pub fn new(
        classes: Vec<WorkloadClass<T>>,
        hardware: HardwareProfile<T>,
        pricing: Pricing<T>,
    ) -> Result<Self, ModelError> {
        let mut inst = Self {
            classes,
            hardware,
            pricing,
        };
        inst.reindex();
        inst.validate()?;
        Ok(inst)
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError>
    where
        T: serde::de::DeserializeOwned,
    {
        let mut inst: Self = serde_json::from_str(text)?;
        inst.reindex();
        inst.validate()?;
        Ok(inst)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError>
    where
        T: serde::de::DeserializeOwned,
    {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("instance serializes")
    }

    fn reindex(&mut self) {
        for (i, c) in self.classes.iter_mut().enumerate() {
            c.class_id = i;
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.classes.is_empty() {
            return Err(ModelError::NoClasses);
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.class_id != i {
                return Err(ModelError::InvalidClass {
                    class: c.class_id,
                    reason: format!("class ids must be 0..I-1 in order, found {} at {i}", c.class_id),
                });
            }
            c.validate()?;
        }
        self.hardware.validate()?;
        self.pricing.validate()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn with_scheme(&self, scheme: PricingScheme) -> Self {
        let mut out = self.clone();
        out.pricing.scheme = scheme;
        out
    }

    /// Per-class bundled reward `w_i`.
    pub fn request_values(&self) -> Vec<T> {
        self.classes.iter().map(|c| self.pricing.request_value(c)).collect()
    }
}

/// Per-class exponential service rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceRates<T: Scalar> {
    /// Prefill completion rate `C / (P tau)`.
    pub prefill: Vec<T>,
    /// Decode completion rate while the host GPU runs a prefill, `1 / (D tau)`.
    pub mixed: Vec<T>,
    /// Decode completion rate on a decode-only GPU, `gamma / D`.
    pub solo: Vec<T>,
}

impl<T: Scalar> ServiceRates<T> {
    pub fn len(&self) -> usize {
        self.prefill.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prefill.is_empty()
    }
}

pub fn derive_rates<T: Scalar>(inst: &Instance<T>) -> ServiceRates<T> {
    let hw = &inst.hardware;
    let tau = hw.tau();
    let mut rates = ServiceRates {
        prefill: Vec::with_capacity(inst.num_classes()),
        mixed: Vec::with_capacity(inst.num_classes()),
        solo: Vec::with_capacity(inst.num_classes()),
    };
    for c in &inst.classes {
        rates.prefill.push(hw.chunk_size / (c.prompt_len * tau));
        rates.mixed.push(T::one() / (c.decode_len * tau));
        rates.solo.push(hw.solo_rate / c.decode_len);
    }
    rates
}

/// Whether solo decode is efficient enough for the zero-decode-buffer
/// rewrite: `gamma * tau >= (B - 1) / B`.
pub fn prop1_condition<T: Scalar>(inst: &Instance<T>) -> bool {
    let hw = &inst.hardware;
    let b = hw.batch_cap_scalar();
    hw.gamma() * hw.tau() >= (b - T::one()) / b
}
