//! Bounded quadratic-logistic parameter mapping.
//!
//! A model holds one coefficient block per processor parameter. For a
//! feature vector f (slot 0 is the constant 1) the block produces
//!
//! ```text
//! h = theta0 + sum_i theta1[i] f[i] + sum_{i<=j} theta2[i,j] f[i] f[j]
//! ```
//!
//! and the parameter value is `p_min + (p_max - p_min) * logistic(h)`, so
//! every mapped value is bounded no matter what the optimizer proposes.
//! The quadratic part is stored upper-triangular, row-major.
//!
//! Summation order in `CoefficientBlock::eval` is fixed: constant, then
//! linear terms in index order, then quadratic terms in (i, j) row-major
//! order. Padding a single-feature model with zero coefficients therefore
//! reproduces its outputs bit for bit, which is what the global-to-adaptive
//! warm start relies on.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureMap, FeatureSpec, FeatureStat};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// The processor family a model was trained for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProcessorKind {
    Anlm,
    Blend,
    Tv,
}

impl ProcessorKind {
    pub fn name(self) -> &'static str {
        match self {
            ProcessorKind::Anlm => "anlm",
            ProcessorKind::Blend => "blend",
            ProcessorKind::Tv => "tv",
        }
    }
}

impl std::str::FromStr for ProcessorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "anlm" => Ok(ProcessorKind::Anlm),
            "blend" => Ok(ProcessorKind::Blend),
            "tv" => Ok(ProcessorKind::Tv),
            other => Err(Error::invalid(format!("unknown processor {other:?}"))),
        }
    }
}

impl std::fmt::Display for ProcessorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Whether a mapped parameter is used as-is or snapped to an odd integer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Discreteness {
    Continuous,
    OddInteger,
}

/// Coefficients of one parameter: constant, linear and upper-triangular
/// quadratic terms over the feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientBlock {
    pub theta0: f64,
    pub theta1: Vec<f64>,
    pub theta2: Vec<f64>,
}

impl CoefficientBlock {
    pub fn zeros(f_count: usize) -> Self {
        CoefficientBlock {
            theta0: 0.0,
            theta1: vec![0.0; f_count],
            theta2: vec![0.0; f_count * (f_count + 1) / 2],
        }
    }

    /// Packed length for a feature count: 1 + F + F(F+1)/2.
    pub fn packed_len(f_count: usize) -> usize {
        1 + f_count + f_count * (f_count + 1) / 2
    }

    pub fn feature_count(&self) -> usize {
        self.theta1.len()
    }

    fn check(&self, f_count: usize) -> Result<()> {
        if self.theta1.len() != f_count || self.theta2.len() != f_count * (f_count + 1) / 2 {
            return Err(Error::ModelFormat(format!(
                "coefficient block sized for {} features, expected {f_count}",
                self.theta1.len()
            )));
        }
        if !self.theta0.is_finite()
            || self.theta1.iter().any(|v| !v.is_finite())
            || self.theta2.iter().any(|v| !v.is_finite())
        {
            return Err(Error::ModelFormat("non-finite coefficient".into()));
        }
        Ok(())
    }

    /// The pre-squash response h(f). Summation order is part of the
    /// contract, see the module docs.
    #[inline]
    pub fn eval(&self, f: &[f64]) -> f64 {
        debug_assert_eq!(f.len(), self.theta1.len());
        let mut h = self.theta0;
        for (t, v) in self.theta1.iter().zip(f) {
            h += t * v;
        }
        let mut idx = 0;
        for i in 0..f.len() {
            for j in i..f.len() {
                h += self.theta2[idx] * f[i] * f[j];
                idx += 1;
            }
        }
        h
    }
}

/// Numerically saturating logistic; never overflows, hits 0 and 1 exactly
/// in the far tails.
#[inline]
pub fn logistic(h: f64) -> f64 {
    if h >= 0.0 {
        1.0 / (1.0 + (-h).exp())
    } else {
        let e = h.exp();
        e / (1.0 + e)
    }
}

/// One processor parameter: its bounds, discreteness and coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub p_min: f64,
    pub p_max: f64,
    pub discrete: Discreteness,
    #[serde(flatten)]
    pub block: CoefficientBlock,
}

impl ParamSpec {
    fn check(&self, f_count: usize) -> Result<()> {
        if !(self.p_min.is_finite() && self.p_max.is_finite() && self.p_min < self.p_max) {
            return Err(Error::ModelFormat(format!(
                "parameter {:?} has invalid bounds [{}, {}]",
                self.name, self.p_min, self.p_max
            )));
        }
        self.block.check(f_count)
    }

    /// Maps a response h to the bounded (and possibly odd-snapped) value.
    #[inline]
    pub fn map(&self, h: f64) -> f64 {
        let p = self.p_min + (self.p_max - self.p_min) * logistic(h);
        match self.discrete {
            Discreteness::Continuous => p.clamp(self.p_min, self.p_max),
            Discreteness::OddInteger => {
                // nearest odd integer, ties toward the smaller one
                let k = (p - 1.0) / 2.0;
                let odd = 2.0 * (k - 0.5).ceil() + 1.0;
                odd.clamp(self.p_min, self.p_max)
            }
        }
    }
}

/// A trained per-pixel parameter mapper.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamMapperModel {
    pub format_version: u32,
    pub processor: ProcessorKind,
    pub feature_count: usize,
    pub feature_spec: FeatureSpec,
    /// Per-slot z-score statistics frozen at training time. Slot 0 is the
    /// constant feature and always carries (mean 0, std 1).
    pub feature_norm: Vec<FeatureStat>,
    pub params: Vec<ParamSpec>,
}

impl ParamMapperModel {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::ModelFormat(format!(
                "format version {} not supported (expected {MODEL_FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.feature_spec.feature_count() != self.feature_count {
            return Err(Error::ModelFormat(format!(
                "feature spec describes {} slots but model declares {}",
                self.feature_spec.feature_count(),
                self.feature_count
            )));
        }
        if self.feature_norm.len() != self.feature_count {
            return Err(Error::ModelFormat("feature_norm length mismatch".into()));
        }
        if self.feature_norm[0].mean != 0.0 || self.feature_norm[0].std != 1.0 {
            return Err(Error::ModelFormat("slot 0 normalization must be (0, 1)".into()));
        }
        if self.feature_norm.iter().any(|s| !s.mean.is_finite() || !(s.std > 0.0)) {
            return Err(Error::ModelFormat("feature_norm entries must be finite with positive std".into()));
        }
        if self.params.is_empty() {
            return Err(Error::ModelFormat("model has no parameters".into()));
        }
        for p in &self.params {
            p.check(self.feature_count)?;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Total packed coefficient length across parameters.
    pub fn packed_len(&self) -> usize {
        self.params.len() * CoefficientBlock::packed_len(self.feature_count)
    }

    /// Flattens all coefficient blocks into one optimizer vector:
    /// per parameter, theta0 then theta1 then theta2.
    pub fn pack(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.packed_len());
        for p in &self.params {
            x.push(p.block.theta0);
            x.extend_from_slice(&p.block.theta1);
            x.extend_from_slice(&p.block.theta2);
        }
        x
    }

    /// Inverse of `pack`: returns a copy of the model carrying the given
    /// coefficients.
    pub fn unpack(&self, x: &[f64]) -> Result<ParamMapperModel> {
        if x.len() != self.packed_len() {
            return Err(Error::shape(format!(
                "packed vector has {} entries, model needs {}",
                x.len(),
                self.packed_len()
            )));
        }
        let mut out = self.clone();
        let f = self.feature_count;
        let tri = f * (f + 1) / 2;
        let mut off = 0;
        for p in &mut out.params {
            p.block.theta0 = x[off];
            p.block.theta1.copy_from_slice(&x[off + 1..off + 1 + f]);
            p.block.theta2.copy_from_slice(&x[off + 1 + f..off + 1 + f + tri]);
            off += 1 + f + tri;
        }
        Ok(out)
    }

    /// Copies a single-feature model into a larger feature space: the
    /// constant, the slot-0 linear and the (0,0) quadratic coefficients
    /// carry over, everything else is zero. Because slot 0 is the constant
    /// feature and `eval` adds the zero terms as exact no-ops, the embedded
    /// model reproduces the source model's outputs bit for bit.
    pub fn embed_global(
        &self,
        feature_spec: FeatureSpec,
        feature_norm: Vec<FeatureStat>,
    ) -> Result<ParamMapperModel> {
        if self.feature_count != 1 {
            return Err(Error::invalid("embedding requires a single-feature source model"));
        }
        let f_count = feature_spec.feature_count();
        if feature_norm.len() != f_count {
            return Err(Error::shape("feature_norm length must match the new spec"));
        }
        let mut params = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let mut block = CoefficientBlock::zeros(f_count);
            block.theta0 = p.block.theta0;
            block.theta1[0] = p.block.theta1[0];
            block.theta2[0] = p.block.theta2[0];
            params.push(ParamSpec {
                name: p.name.clone(),
                p_min: p.p_min,
                p_max: p.p_max,
                discrete: p.discrete,
                block,
            });
        }
        let out = ParamMapperModel {
            format_version: MODEL_FORMAT_VERSION,
            processor: self.processor,
            feature_count: f_count,
            feature_spec,
            feature_norm,
            params,
        };
        out.validate()?;
        Ok(out)
    }

    /// Maps a feature map to the per-pixel parameter field. Raw maps are
    /// normalized with the model's frozen statistics first; maps already
    /// normalized are used as-is.
    pub fn map_field(&self, features: &FeatureMap) -> Result<ParameterField> {
        if features.feature_count() != self.feature_count {
            return Err(Error::shape(format!(
                "feature map has {} slots, model expects {}",
                features.feature_count(),
                self.feature_count
            )));
        }
        let owned;
        let fm = if features.is_normalized() {
            features
        } else {
            owned = features.normalized(&self.feature_norm)?;
            &owned
        };
        let (w, h) = (fm.width(), fm.height());
        let mut field = ParameterField::new(w, h, self.params.len());
        let mut f = vec![0.0; self.feature_count];
        for y in 0..h {
            for x in 0..w {
                fm.feature_vector(x, y, &mut f);
                for (k, p) in self.params.iter().enumerate() {
                    field.set(x, y, k, p.map(p.block.eval(&f)));
                }
            }
        }
        Ok(field)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::ModelFormat(format!("serialization failed: {e}")))
    }

    pub fn from_json(text: &str) -> Result<ParamMapperModel> {
        let model: ParamMapperModel =
            serde_json::from_str(text).map_err(|e| Error::ModelFormat(format!("parse failed: {e}")))?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<ParamMapperModel> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Per-pixel parameter values, one plane per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterField {
    width: usize,
    height: usize,
    param_count: usize,
    values: Vec<f64>,
}

impl ParameterField {
    pub fn new(width: usize, height: usize, param_count: usize) -> Self {
        ParameterField { width, height, param_count, values: vec![0.0; width * height * param_count] }
    }

    /// Field holding the same parameter vector at every pixel.
    pub fn constant(width: usize, height: usize, values: &[f64]) -> Self {
        let mut field = Self::new(width, height, values.len());
        for (k, v) in values.iter().enumerate() {
            field.plane_mut(k).fill(*v);
        }
        field
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn param_count(&self) -> usize {
        self.param_count
    }

    #[inline]
    pub fn plane(&self, k: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.values[k * n..(k + 1) * n]
    }

    #[inline]
    pub fn plane_mut(&mut self, k: usize) -> &mut [f64] {
        let n = self.width * self.height;
        &mut self.values[k * n..(k + 1) * n]
    }

    /// All planes back to back, plane-major.
    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, k: usize) -> f64 {
        self.values[k * self.width * self.height + y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, k: usize, v: f64) {
        self.values[k * self.width * self.height + y * self.width + x] = v;
    }
}
