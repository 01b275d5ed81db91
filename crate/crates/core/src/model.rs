//! The trainable mapping: a feature-refinement transform followed by a
//! single-layer softmax classifier.
//!
//! Every transform variant ends with L2 normalization, so the classifier
//! always sees unit vectors. The conditioned variants start at zero bias
//! (and unit scale), which makes the initial model identical to the plain
//! normalized-feature model.
//!
//! Gradients are computed by a hand-written reverse pass. The caller supplies
//! the loss value and its gradient with respect to the probability matrix;
//! [`parameter_gradients`] chains that back through softmax, normalization and
//! the active transform.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Result, RpimError};
use crate::numerics::{dot, l2_norm, softmax_in_place, DenseMatrix, Rng, EPS_NORM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Identity,
    LinearNoBias,
    LinearWithBias,
    ConditionedWeightAndBias,
    ConditionedBiasOnly,
}

impl TransformKind {
    pub const ALL: [TransformKind; 5] = [
        TransformKind::Identity,
        TransformKind::LinearNoBias,
        TransformKind::LinearWithBias,
        TransformKind::ConditionedWeightAndBias,
        TransformKind::ConditionedBiasOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::Identity => "identity",
            TransformKind::LinearNoBias => "linear_no_bias",
            TransformKind::LinearWithBias => "linear_with_bias",
            TransformKind::ConditionedWeightAndBias => "conditioned_weight_and_bias",
            TransformKind::ConditionedBiasOnly => "conditioned_bias_only",
        }
    }

    fn code(self) -> u8 {
        match self {
            TransformKind::Identity => 0,
            TransformKind::LinearNoBias => 1,
            TransformKind::LinearWithBias => 2,
            TransformKind::ConditionedWeightAndBias => 3,
            TransformKind::ConditionedBiasOnly => 4,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.code() == code)
    }

    /// Transform fields owned by this variant, in declared order.
    pub fn transform_fields(self) -> &'static [ParamField] {
        use ParamField::*;
        match self {
            TransformKind::Identity => &[],
            TransformKind::LinearNoBias => &[PlainWeight],
            TransformKind::LinearWithBias => &[PlainWeight, PlainOffset],
            TransformKind::ConditionedWeightAndBias => {
                &[BiasMapWeight, BiasMapOffset, ScaleMapWeight, ScaleMapOffset]
            }
            TransformKind::ConditionedBiasOnly => &[BiasMapWeight, BiasMapOffset],
        }
    }
}

impl std::fmt::Display for TransformKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TransformKind {
    type Err = RpimError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| RpimError::InvalidInput(format!("unknown transform `{s}`")))
    }
}

/// Names every trainable tensor. Declaration order is the checkpoint order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamField {
    BiasMapWeight,
    BiasMapOffset,
    ScaleMapWeight,
    ScaleMapOffset,
    PlainWeight,
    PlainOffset,
    ClassifierWeight,
    ClassifierOffset,
}

impl ParamField {
    pub fn name(self) -> &'static str {
        match self {
            ParamField::BiasMapWeight => "bias_map_weight",
            ParamField::BiasMapOffset => "bias_map_offset",
            ParamField::ScaleMapWeight => "scale_map_weight",
            ParamField::ScaleMapOffset => "scale_map_offset",
            ParamField::PlainWeight => "plain_weight",
            ParamField::PlainOffset => "plain_offset",
            ParamField::ClassifierWeight => "classifier_weight",
            ParamField::ClassifierOffset => "classifier_offset",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TransformParams {
    pub bias_map_weight: Option<DenseMatrix>,
    pub bias_map_offset: Option<Vec<f64>>,
    pub scale_map_weight: Option<DenseMatrix>,
    pub scale_map_offset: Option<Vec<f64>>,
    pub plain_weight: Option<DenseMatrix>,
    pub plain_offset: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    /// K×D
    pub weight: DenseMatrix,
    pub offset: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub kind: TransformKind,
    pub transform: TransformParams,
    pub classifier: ClassifierParams,
    pub temperature: f64,
}

impl ModelParams {
    /// Fresh parameters. Classifier weights are uniform in `[-1/√D, 1/√D]`,
    /// all offsets zero; transforms start at the identity map (zero bias,
    /// unit scale, identity plain weight).
    pub fn init(
        kind: TransformKind,
        dim: usize,
        classes: usize,
        temperature: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if dim == 0 || classes < 2 {
            return Err(RpimError::InvalidInput(format!(
                "model needs D >= 1 and K >= 2 (got D={dim}, K={classes})"
            )));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(RpimError::InvalidInput(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let bound = 1.0 / (dim as f64).sqrt();
        let weight: Vec<f64> = (0..classes * dim)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        let classifier = ClassifierParams {
            weight: DenseMatrix::from_vec(classes, dim, weight)?,
            offset: vec![0.0; classes],
        };

        let mut transform = TransformParams::default();
        for field in kind.transform_fields() {
            match field {
                ParamField::BiasMapWeight => transform.bias_map_weight = Some(DenseMatrix::zeros(dim, dim)),
                ParamField::BiasMapOffset => transform.bias_map_offset = Some(vec![0.0; dim]),
                ParamField::ScaleMapWeight => transform.scale_map_weight = Some(DenseMatrix::zeros(dim, dim)),
                ParamField::ScaleMapOffset => transform.scale_map_offset = Some(vec![1.0; dim]),
                ParamField::PlainWeight => transform.plain_weight = Some(DenseMatrix::identity(dim)),
                ParamField::PlainOffset => transform.plain_offset = Some(vec![0.0; dim]),
                _ => unreachable!(),
            }
        }
        Ok(Self {
            kind,
            transform,
            classifier,
            temperature,
        })
    }

    pub fn dim(&self) -> usize {
        self.classifier.weight.cols()
    }

    pub fn classes(&self) -> usize {
        self.classifier.weight.rows()
    }

    /// Active fields in declared order.
    pub fn active_fields(&self) -> Vec<ParamField> {
        let mut fields = self.kind.transform_fields().to_vec();
        fields.push(ParamField::ClassifierWeight);
        fields.push(ParamField::ClassifierOffset);
        fields
    }

    pub fn field(&self, field: ParamField) -> &[f64] {
        let t = &self.transform;
        let missing = || panic!("parameter `{}` is not active for {}", field.name(), self.kind);
        match field {
            ParamField::BiasMapWeight => t.bias_map_weight.as_ref().map(|m| m.values()),
            ParamField::BiasMapOffset => t.bias_map_offset.as_deref(),
            ParamField::ScaleMapWeight => t.scale_map_weight.as_ref().map(|m| m.values()),
            ParamField::ScaleMapOffset => t.scale_map_offset.as_deref(),
            ParamField::PlainWeight => t.plain_weight.as_ref().map(|m| m.values()),
            ParamField::PlainOffset => t.plain_offset.as_deref(),
            ParamField::ClassifierWeight => Some(self.classifier.weight.values()),
            ParamField::ClassifierOffset => Some(&self.classifier.offset[..]),
        }
        .unwrap_or_else(missing)
    }

    pub fn field_mut(&mut self, field: ParamField) -> &mut [f64] {
        let kind = self.kind;
        let t = &mut self.transform;
        let slot = match field {
            ParamField::BiasMapWeight => t.bias_map_weight.as_mut().map(|m| m.values_mut()),
            ParamField::BiasMapOffset => t.bias_map_offset.as_deref_mut(),
            ParamField::ScaleMapWeight => t.scale_map_weight.as_mut().map(|m| m.values_mut()),
            ParamField::ScaleMapOffset => t.scale_map_offset.as_deref_mut(),
            ParamField::PlainWeight => t.plain_weight.as_mut().map(|m| m.values_mut()),
            ParamField::PlainOffset => t.plain_offset.as_deref_mut(),
            ParamField::ClassifierWeight => Some(self.classifier.weight.values_mut()),
            ParamField::ClassifierOffset => Some(&mut self.classifier.offset[..]),
        };
        match slot {
            Some(s) => s,
            None => panic!("parameter `{}` is not active for {kind}", field.name()),
        }
    }

    fn expect_matrix(&self, m: &Option<DenseMatrix>, name: &str) -> Result<()> {
        match m {
            Some(m) if m.rows() == self.dim() && m.cols() == self.dim() => Ok(()),
            Some(m) => Err(RpimError::shape(name, format!("{0}x{0}", self.dim()), format!("{}x{}", m.rows(), m.cols()))),
            None => Err(RpimError::InvalidInput(format!("{} requires `{name}`", self.kind))),
        }
    }

    fn expect_vector(&self, v: &Option<Vec<f64>>, name: &str) -> Result<()> {
        match v {
            Some(v) if v.len() == self.dim() => Ok(()),
            Some(v) => Err(RpimError::shape(name, self.dim(), v.len())),
            None => Err(RpimError::InvalidInput(format!("{} requires `{name}`", self.kind))),
        }
    }

    /// Checks that exactly the active variant's fields are present with the right shapes.
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(RpimError::InvalidInput(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.classifier.offset.len() != self.classes() {
            return Err(RpimError::shape("classifier_offset", self.classes(), self.classifier.offset.len()));
        }
        let t = &self.transform;
        let active = self.kind.transform_fields();
        let present = [
            (ParamField::BiasMapWeight, t.bias_map_weight.is_some()),
            (ParamField::BiasMapOffset, t.bias_map_offset.is_some()),
            (ParamField::ScaleMapWeight, t.scale_map_weight.is_some()),
            (ParamField::ScaleMapOffset, t.scale_map_offset.is_some()),
            (ParamField::PlainWeight, t.plain_weight.is_some()),
            (ParamField::PlainOffset, t.plain_offset.is_some()),
        ];
        for (field, is_present) in present {
            if is_present != active.contains(&field) {
                return Err(RpimError::InvalidInput(format!(
                    "parameter `{}` {} for transform {}",
                    field.name(),
                    if is_present { "must be absent" } else { "is missing" },
                    self.kind
                )));
            }
        }
        for field in active {
            match field {
                ParamField::BiasMapWeight => self.expect_matrix(&t.bias_map_weight, field.name())?,
                ParamField::ScaleMapWeight => self.expect_matrix(&t.scale_map_weight, field.name())?,
                ParamField::PlainWeight => self.expect_matrix(&t.plain_weight, field.name())?,
                ParamField::BiasMapOffset => self.expect_vector(&t.bias_map_offset, field.name())?,
                ParamField::ScaleMapOffset => self.expect_vector(&t.scale_map_offset, field.name())?,
                ParamField::PlainOffset => self.expect_vector(&t.plain_offset, field.name())?,
                _ => unreachable!(),
            }
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.active_fields().iter().map(|f| self.field(*f).len()).sum()
    }
}

/// Intermediate values of one row, kept for the reverse pass.
struct RowTrace {
    /// Norm of the transform output before normalization.
    norm: f64,
    refined: Vec<f64>,
    probs: Vec<f64>,
}

fn affine(weight: &DenseMatrix, offset: &[f64], x: &[f64]) -> Vec<f64> {
    let mut out = weight.mat_vec(x);
    for (o, b) in out.iter_mut().zip(offset) {
        *o += b;
    }
    out
}

/// Transform output before normalization. Callers validate params first.
fn transform_raw(x: &[f64], params: &ModelParams) -> Vec<f64> {
    let t = &params.transform;
    match params.kind {
        TransformKind::Identity => x.to_vec(),
        TransformKind::LinearNoBias => t.plain_weight.as_ref().unwrap().mat_vec(x),
        TransformKind::LinearWithBias => {
            affine(t.plain_weight.as_ref().unwrap(), t.plain_offset.as_ref().unwrap(), x)
        }
        TransformKind::ConditionedBiasOnly => {
            let b = affine(t.bias_map_weight.as_ref().unwrap(), t.bias_map_offset.as_ref().unwrap(), x);
            x.iter().zip(&b).map(|(xi, bi)| xi + bi).collect()
        }
        TransformKind::ConditionedWeightAndBias => {
            // s ⊙ x + b, with s and b both affine in x
            let s = affine(t.scale_map_weight.as_ref().unwrap(), t.scale_map_offset.as_ref().unwrap(), x);
            let b = affine(t.bias_map_weight.as_ref().unwrap(), t.bias_map_offset.as_ref().unwrap(), x);
            x.iter()
                .zip(&s)
                .zip(&b)
                .map(|((xi, si), bi)| si * xi + bi)
                .collect()
        }
    }
}

fn check_input(x: &[f64], params: &ModelParams) -> Result<()> {
    if x.len() != params.dim() {
        return Err(RpimError::shape("feature vector", params.dim(), x.len()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(RpimError::NonFinite {
            context: "feature vector".into(),
            row: 0,
        });
    }
    Ok(())
}

fn trace_row(x: &[f64], params: &ModelParams) -> Result<RowTrace> {
    check_input(x, params)?;
    let raw = transform_raw(x, params);
    let norm = l2_norm(&raw);
    if !(norm > EPS_NORM) {
        return Err(RpimError::DegenerateVector { norm });
    }
    let refined: Vec<f64> = raw.iter().map(|v| v / norm).collect();
    let probs = classify(&refined, params);
    Ok(RowTrace {
        norm,
        refined,
        probs,
    })
}

fn classify(refined: &[f64], params: &ModelParams) -> Vec<f64> {
    let c = &params.classifier;
    let mut logits = affine(&c.weight, &c.offset, refined);
    for l in logits.iter_mut() {
        *l /= params.temperature;
    }
    softmax_in_place(&mut logits);
    logits
}

/// Refines one feature vector to a unit vector.
pub fn transform_forward(x: &[f64], params: &ModelParams) -> Result<Vec<f64>> {
    params.validate()?;
    check_input(x, params)?;
    crate::numerics::l2_normalize(&transform_raw(x, params))
}

/// Class probabilities of an already refined (unit-norm) vector.
pub fn classifier_forward(refined: &[f64], params: &ModelParams) -> Result<Vec<f64>> {
    if refined.len() != params.dim() {
        return Err(RpimError::shape("refined vector", params.dim(), refined.len()));
    }
    let probs = classify(refined, params);
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(RpimError::NonFinite {
            context: "classifier output".into(),
            row: 0,
        });
    }
    Ok(probs)
}

/// N×K probabilities for an N×D feature batch.
pub fn forward_batch(x: &DenseMatrix, params: &ModelParams) -> Result<DenseMatrix> {
    params.validate()?;
    if x.cols() != params.dim() {
        return Err(RpimError::shape("forward_batch features", params.dim(), x.cols()));
    }
    let mut out = Vec::with_capacity(x.rows() * params.classes());
    for i in 0..x.rows() {
        let refined = transform_forward(x.row(i), params).map_err(|e| with_row(e, i))?;
        out.extend(classifier_forward(&refined, params).map_err(|e| with_row(e, i))?);
    }
    DenseMatrix::from_vec(x.rows(), params.classes(), out)
}

/// Refined features of a batch, N×D (used by the k-means baseline and exports).
pub fn transform_batch(x: &DenseMatrix, params: &ModelParams) -> Result<DenseMatrix> {
    let mut out = Vec::with_capacity(x.rows() * x.cols());
    for i in 0..x.rows() {
        out.extend(transform_forward(x.row(i), params).map_err(|e| with_row(e, i))?);
    }
    DenseMatrix::from_vec(x.rows(), x.cols(), out)
}

fn with_row(e: RpimError, row: usize) -> RpimError {
    match e {
        RpimError::NonFinite { context, .. } => RpimError::NonFinite { context, row },
        RpimError::DegenerateVector { norm } => {
            RpimError::Degenerate(format!("row {row}: transform output norm {norm:e} is below the floor"))
        }
        other => other,
    }
}

/// Gradient of the loss with respect to every active parameter field.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub entries: Vec<(ParamField, Vec<f64>)>,
}

impl ParamGrads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            entries: params
                .active_fields()
                .into_iter()
                .map(|f| (f, vec![0.0; params.field(f).len()]))
                .collect(),
        }
    }

    pub fn get(&self, field: ParamField) -> Option<&[f64]> {
        self.entries.iter().find(|(f, _)| *f == field).map(|(_, g)| &g[..])
    }

    fn slot(&mut self, field: ParamField) -> &mut [f64] {
        &mut self.entries.iter_mut().find(|(f, _)| *f == field).unwrap().1
    }

    pub fn max_abs(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|(_, g)| g.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    fn check_finite(&self) -> Result<()> {
        for (field, g) in &self.entries {
            if let Some(index) = g.iter().position(|v| !v.is_finite()) {
                return Err(RpimError::NonFiniteGradient {
                    parameter: field.name().into(),
                    index,
                });
            }
        }
        Ok(())
    }
}

fn add_outer(acc: &mut [f64], left: &[f64], right: &[f64]) {
    let cols = right.len();
    for (j, &l) in left.iter().enumerate() {
        if l == 0.0 {
            continue;
        }
        for (a, &r) in acc[j * cols..(j + 1) * cols].iter_mut().zip(right) {
            *a += l * r;
        }
    }
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, x) in acc.iter_mut().zip(v) {
        *a += x;
    }
}

/// Evaluates the loss at `params` and its exact parameter gradient.
///
/// `objective` receives the N×K probability matrix of `x` and returns the
/// loss value together with ∂loss/∂probabilities (same shape). Anything the
/// objective holds fixed (pseudo-labels, masks) is treated as a constant.
pub fn parameter_gradients<F>(params: &ModelParams, x: &DenseMatrix, objective: F) -> Result<(f64, ParamGrads)>
where
    F: FnOnce(&DenseMatrix) -> Result<(f64, DenseMatrix)>,
{
    params.validate()?;
    if x.cols() != params.dim() {
        return Err(RpimError::shape("parameter_gradients features", params.dim(), x.cols()));
    }
    let k = params.classes();
    let traces = (0..x.rows())
        .map(|i| trace_row(x.row(i), params).map_err(|e| with_row(e, i)))
        .collect::<Result<Vec<_>>>()?;
    let mut probs = Vec::with_capacity(x.rows() * k);
    for t in &traces {
        probs.extend_from_slice(&t.probs);
    }
    let probs = DenseMatrix::from_vec(x.rows(), k, probs)?;

    let (loss, dprobs) = objective(&probs)?;
    if dprobs.rows() != probs.rows() || dprobs.cols() != k {
        return Err(RpimError::shape(
            "objective gradient",
            format!("{}x{}", probs.rows(), k),
            format!("{}x{}", dprobs.rows(), dprobs.cols()),
        ));
    }

    let mut grads = ParamGrads::zeros_like(params);
    let inv_t = 1.0 / params.temperature;
    for (i, t) in traces.iter().enumerate() {
        let gz = dprobs.row(i);
        if gz.iter().all(|&g| g == 0.0) {
            continue;
        }
        // softmax: ∂L/∂logit_k = z_k (g_k - Σ_j z_j g_j), then undo 1/T
        let mean = dot(&t.probs, gz);
        let glogit: Vec<f64> = t
            .probs
            .iter()
            .zip(gz)
            .map(|(z, g)| z * (g - mean) * inv_t)
            .collect();
        add_outer(grads.slot(ParamField::ClassifierWeight), &glogit, &t.refined);
        add_into(grads.slot(ParamField::ClassifierOffset), &glogit);

        if params.kind.transform_fields().is_empty() {
            continue;
        }
        let g_refined = params.classifier.weight.mat_t_vec(&glogit);
        // normalization: ∂x'/∂u = (I - x' x'ᵀ) / ‖u‖
        let proj = dot(&t.refined, &g_refined);
        let g_raw: Vec<f64> = g_refined
            .iter()
            .zip(&t.refined)
            .map(|(g, r)| (g - r * proj) / t.norm)
            .collect();
        let xi = x.row(i);
        match params.kind {
            TransformKind::Identity => {}
            TransformKind::LinearNoBias => add_outer(grads.slot(ParamField::PlainWeight), &g_raw, xi),
            TransformKind::LinearWithBias => {
                add_outer(grads.slot(ParamField::PlainWeight), &g_raw, xi);
                add_into(grads.slot(ParamField::PlainOffset), &g_raw);
            }
            TransformKind::ConditionedBiasOnly => {
                add_outer(grads.slot(ParamField::BiasMapWeight), &g_raw, xi);
                add_into(grads.slot(ParamField::BiasMapOffset), &g_raw);
            }
            TransformKind::ConditionedWeightAndBias => {
                let g_scale: Vec<f64> = g_raw.iter().zip(xi).map(|(g, x)| g * x).collect();
                add_outer(grads.slot(ParamField::ScaleMapWeight), &g_scale, xi);
                add_into(grads.slot(ParamField::ScaleMapOffset), &g_scale);
                add_outer(grads.slot(ParamField::BiasMapWeight), &g_raw, xi);
                add_into(grads.slot(ParamField::BiasMapOffset), &g_raw);
            }
        }
    }
    grads.check_finite()?;
    Ok((loss, grads))
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"RPIMCKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes the flat little-endian checkpoint: magic, version, D, K, transform
/// code, each active field in declared order, then the temperature.
pub fn write_checkpoint<W: Write>(params: &ModelParams, mut out: W) -> Result<()> {
    params.validate()?;
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(params.dim() as u64).to_le_bytes())?;
    out.write_all(&(params.classes() as u64).to_le_bytes())?;
    out.write_all(&[params.kind.code()])?;
    for field in params.active_fields() {
        for v in params.field(field) {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.write_all(&params.temperature.to_le_bytes())?;
    out.flush()?;
    Ok(())
}

pub fn checkpoint_bytes(params: &ModelParams) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_checkpoint(params, &mut buf)?;
    Ok(buf)
}

pub(crate) struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(RpimError::Parse {
                offset: self.pos as u64,
                message: format!("truncated while reading {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    parse_checkpoint(&bytes)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let mut cur = ByteCursor::new(bytes);
    let magic = cur.take(8, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(RpimError::Parse {
            offset: 0,
            message: format!("magic mismatch: expected RPIMCKPT, found {:?}", String::from_utf8_lossy(magic)),
        });
    }
    let at = cur.offset();
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(RpimError::Parse {
            offset: at,
            message: format!("unsupported checkpoint version {version}"),
        });
    }
    let at = cur.offset();
    let dim = cur.u64("D")? as usize;
    let classes = cur.u64("K")? as usize;
    if dim == 0 || classes < 2 {
        return Err(RpimError::Parse {
            offset: at,
            message: format!("invalid dimensions D={dim}, K={classes}"),
        });
    }
    let at = cur.offset();
    let code = cur.take(1, "transform kind")?[0];
    let kind = TransformKind::from_code(code).ok_or_else(|| RpimError::Parse {
        offset: at,
        message: format!("unknown transform code {code}"),
    })?;

    let mut read_vec = |n: usize, what: &str| -> Result<Vec<f64>> {
        (0..n).map(|_| cur.f64(what)).collect()
    };
    let mut transform = TransformParams::default();
    for field in kind.transform_fields() {
        let name = field.name();
        match field {
            ParamField::BiasMapWeight => transform.bias_map_weight = Some(DenseMatrix::from_vec(dim, dim, read_vec(dim * dim, name)?)?),
            ParamField::BiasMapOffset => transform.bias_map_offset = Some(read_vec(dim, name)?),
            ParamField::ScaleMapWeight => transform.scale_map_weight = Some(DenseMatrix::from_vec(dim, dim, read_vec(dim * dim, name)?)?),
            ParamField::ScaleMapOffset => transform.scale_map_offset = Some(read_vec(dim, name)?),
            ParamField::PlainWeight => transform.plain_weight = Some(DenseMatrix::from_vec(dim, dim, read_vec(dim * dim, name)?)?),
            ParamField::PlainOffset => transform.plain_offset = Some(read_vec(dim, name)?),
            _ => unreachable!(),
        }
    }
    let weight = DenseMatrix::from_vec(classes, dim, read_vec(classes * dim, "classifier_weight")?)?;
    let offset = read_vec(classes, "classifier_offset")?;
    let temperature = cur.f64("temperature")?;
    if cur.remaining() != 0 {
        return Err(RpimError::Parse {
            offset: cur.offset(),
            message: format!("{} trailing bytes", cur.remaining()),
        });
    }
    let params = ModelParams {
        kind,
        transform,
        classifier: ClassifierParams { weight, offset },
        temperature,
    };
    params.validate()?;
    Ok(params)
}
