//! LoRA-anchored test-time re-centering.
//!
//! The output-side LoRA factors `B_ℓ` whose output dimension equals the pooled
//! feature dimension `d` are stacked as `M = [B_1ᵀ; …; B_Lᵀ]`. The right
//! singular vectors of `M` above a relative cutoff span the anchor subspace
//! `U`, and test-time correction only acts in its orthogonal complement:
//!
//! ```text
//! P⊥ = I − U Uᵀ
//! Δ  = α · P⊥ (μ_t − μ_s)
//! h̃  = h − Δ
//! ```
//!
//! `μ_s` is the source feature center, `μ_t` the running mean of one
//! designated feature per target video (appended before the video is
//! corrected). All views of a video share the same `Δ` and their logits are
//! averaged.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default relative singular-value cutoff.
pub const DEFAULT_SV_THRESHOLD: f64 = 1e-4;
pub const DEFAULT_ALPHA: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum LaterError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("target queue is empty")]
    EmptyQueue,
    #[error("no source features")]
    EmptyFeatures,
    #[error("video has no views")]
    NoViews,
    #[error("queue capacity must be at least 1")]
    ZeroCapacity,
    #[error("singular-value threshold must be finite and non-negative, got {0}")]
    BadThreshold(f64),
    #[error("classifier head: {0}")]
    Head(String),
    #[error("singular value decomposition failed")]
    Svd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraB {
    pub layer_name: String,
    /// `d_out × r`.
    pub b: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraBankB {
    pub matrices: Vec<LoraB>,
    pub feature_dim: usize,
}

impl LoraBankB {
    pub fn new(feature_dim: usize) -> Self {
        Self {
            matrices: Vec::new(),
            feature_dim,
        }
    }

    pub fn push(&mut self, layer_name: impl Into<String>, b: DMatrix<f64>) {
        self.matrices.push(LoraB {
            layer_name: layer_name.into(),
            b,
        });
    }

    /// Adapters whose output dimension matches the feature dimension.
    pub fn retained(&self) -> impl Iterator<Item = &LoraB> {
        self.matrices
            .iter()
            .filter(move |m| m.b.nrows() == self.feature_dim)
    }

    /// `M = [B_1ᵀ; …; B_Lᵀ]`, `(Σ r_ℓ) × d`, or `None` when nothing is retained.
    pub fn stacked(&self) -> Option<DMatrix<f64>> {
        let blocks: Vec<&LoraB> = self.retained().filter(|m| m.b.ncols() > 0).collect();
        if blocks.is_empty() {
            return None;
        }
        let rows: usize = blocks.iter().map(|m| m.b.ncols()).sum();
        let mut out = DMatrix::zeros(rows, self.feature_dim);
        let mut at = 0;
        for m in blocks {
            let r = m.b.ncols();
            out.rows_mut(at, r).copy_from(&m.b.transpose());
            at += r;
        }
        Some(out)
    }
}

/// Anchor subspace basis and its orthogonal-complement projector.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorAnchor {
    /// `d × k`, orthonormal columns ordered by decreasing singular value.
    basis: DMatrix<f64>,
    /// `I − U Uᵀ`, `d × d`.
    projector: DMatrix<f64>,
    singular_values: Vec<f64>,
    sv_threshold_rel: f64,
}

impl ProjectorAnchor {
    /// Empty anchor: `P⊥ = I`, i.e. the full source-target shift is removed.
    pub fn identity(d: usize) -> Self {
        Self::from_basis(DMatrix::zeros(d, 0), Vec::new(), DEFAULT_SV_THRESHOLD)
    }

    fn from_basis(basis: DMatrix<f64>, singular_values: Vec<f64>, sv_threshold_rel: f64) -> Self {
        let d = basis.nrows();
        let projector = DMatrix::identity(d, d) - &basis * basis.transpose();
        Self {
            basis,
            projector,
            singular_values,
            sv_threshold_rel,
        }
    }

    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn projector(&self) -> &DMatrix<f64> {
        &self.projector
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn sv_threshold_rel(&self) -> f64 {
        self.sv_threshold_rel
    }

    /// `P⊥ v` with the dense projector.
    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.projector * v
    }

    /// `v − U (Uᵀ v)` without forming `P⊥`.
    pub fn apply_implicit(&self, v: &DVector<f64>) -> DVector<f64> {
        v - &self.basis * (self.basis.transpose() * v)
    }
}

/// SVD of the stacked LoRA-B matrix; keeps right singular vectors whose
/// singular values exceed `sv_threshold_rel · σ_max`.
pub fn build_anchor(bank: &LoraBankB, sv_threshold_rel: f64) -> Result<ProjectorAnchor, LaterError> {
    if !(sv_threshold_rel.is_finite() && sv_threshold_rel >= 0.0) {
        return Err(LaterError::BadThreshold(sv_threshold_rel));
    }
    let d = bank.feature_dim;
    let Some(m) = bank.stacked() else {
        return Ok(ProjectorAnchor {
            sv_threshold_rel,
            ..ProjectorAnchor::identity(d)
        });
    };
    let svd = m.svd(false, true);
    let v_t = svd.v_t.ok_or(LaterError::Svd)?;
    let sigma = svd.singular_values;
    let sigma_max = sigma.iter().copied().fold(0.0f64, f64::max);
    if !sigma_max.is_finite() {
        return Err(LaterError::Svd);
    }
    let cutoff = sv_threshold_rel * sigma_max;
    let mut keep: Vec<usize> = (0..sigma.len())
        .filter(|&i| sigma_max > 0.0 && sigma[i] > cutoff)
        .collect();
    keep.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(a.cmp(&b)));

    let mut basis = DMatrix::zeros(d, keep.len());
    for (col, &i) in keep.iter().enumerate() {
        basis.set_column(col, &v_t.row(i).transpose());
    }
    let singular_values = keep.iter().map(|&i| sigma[i]).collect();
    Ok(ProjectorAnchor::from_basis(basis, singular_values, sv_threshold_rel))
}

/// Column-wise mean of an `N × d` feature matrix.
pub fn source_center(features: &DMatrix<f64>) -> Result<DVector<f64>, LaterError> {
    if features.nrows() == 0 {
        return Err(LaterError::EmptyFeatures);
    }
    let mut sum = DVector::zeros(features.ncols());
    for row in features.row_iter() {
        sum += row.transpose();
    }
    Ok(sum / features.nrows() as f64)
}

/// Source center plus the online target queue.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterState {
    mu_s: DVector<f64>,
    alpha: f64,
    capacity: Option<usize>,
    window: VecDeque<DVector<f64>>,
    queue_sum: DVector<f64>,
    queue_count: usize,
}

impl CenterState {
    /// `capacity = None` keeps a cumulative mean over every observed video.
    pub fn new(mu_s: DVector<f64>, alpha: f64, capacity: Option<usize>) -> Result<Self, LaterError> {
        if capacity == Some(0) {
            return Err(LaterError::ZeroCapacity);
        }
        let d = mu_s.len();
        Ok(Self {
            mu_s,
            alpha,
            capacity,
            window: VecDeque::new(),
            queue_sum: DVector::zeros(d),
            queue_count: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu_s.len()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn source_center(&self) -> &DVector<f64> {
        &self.mu_s
    }

    pub fn queue_count(&self) -> usize {
        self.queue_count
    }

    pub fn queue_sum(&self) -> &DVector<f64> {
        &self.queue_sum
    }

    /// Append a designated queue feature. With a finite capacity the oldest
    /// entry is evicted and the sum recomputed over the retained window.
    pub fn observe(&mut self, h: &DVector<f64>) -> Result<(), LaterError> {
        if h.len() != self.dim() {
            return Err(LaterError::DimensionMismatch {
                expected: self.dim(),
                actual: h.len(),
            });
        }
        match self.capacity {
            None => {
                self.queue_sum += h;
                self.queue_count += 1;
            }
            Some(cap) => {
                self.window.push_back(h.clone());
                if self.window.len() > cap {
                    self.window.pop_front();
                    let mut sum = DVector::zeros(self.dim());
                    for x in &self.window {
                        sum += x;
                    }
                    self.queue_sum = sum;
                } else {
                    self.queue_sum += h;
                }
                self.queue_count = self.window.len();
            }
        }
        Ok(())
    }

    pub fn target_center(&self) -> Option<DVector<f64>> {
        (self.queue_count > 0).then(|| &self.queue_sum / self.queue_count as f64)
    }

    /// `Δ = α · P⊥ (μ_t − μ_s)`.
    pub fn correction(&self, anchor: &ProjectorAnchor) -> Result<DVector<f64>, LaterError> {
        if anchor.dim() != self.dim() {
            return Err(LaterError::DimensionMismatch {
                expected: self.dim(),
                actual: anchor.dim(),
            });
        }
        let mu_t = self.target_center().ok_or(LaterError::EmptyQueue)?;
        let shift = mu_t - &self.mu_s;
        Ok(anchor.apply(&shift) * self.alpha)
    }
}

/// Affine classifier on pooled features.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    weight: DMatrix<f64>,
    bias: DVector<f64>,
    class_names: Vec<String>,
}

impl ClassifierHead {
    pub fn new(weight: DMatrix<f64>, bias: DVector<f64>, class_names: Vec<String>) -> Result<Self, LaterError> {
        let c = weight.nrows();
        if bias.len() != c || class_names.len() != c {
            return Err(LaterError::Head(format!(
                "{} weight rows, {} biases, {} class names",
                c,
                bias.len(),
                class_names.len()
            )));
        }
        let mut sorted: Vec<&String> = class_names.iter().collect();
        sorted.sort();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(LaterError::Head(format!("duplicate class name {:?}", w[0])));
        }
        Ok(Self {
            weight,
            bias,
            class_names,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.weight.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    pub fn weight(&self) -> &DMatrix<f64> {
        &self.weight
    }

    pub fn bias(&self) -> &DVector<f64> {
        &self.bias
    }

    pub fn logits(&self, h: &DVector<f64>) -> DVector<f64> {
        &self.weight * h + &self.bias
    }
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax(v: &DVector<f64>) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: DVector<f64>,
    pub predicted: usize,
}

/// Subtract `Δ` from every view, classify, and average the logits.
pub fn classify_video(
    views: &DMatrix<f64>,
    delta: &DVector<f64>,
    head: &ClassifierHead,
) -> Result<Prediction, LaterError> {
    if views.nrows() == 0 {
        return Err(LaterError::NoViews);
    }
    for actual in [views.ncols(), delta.len()] {
        if actual != head.dim() {
            return Err(LaterError::DimensionMismatch {
                expected: head.dim(),
                actual,
            });
        }
    }
    let mut sum = DVector::zeros(head.num_classes());
    for row in views.row_iter() {
        let corrected = row.transpose() - delta;
        sum += head.logits(&corrected);
    }
    let logits = sum / views.nrows() as f64;
    let predicted = argmax(&logits);
    Ok(Prediction { logits, predicted })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionMode {
    /// Anchored correction in the LoRA-orthogonal complement.
    Later,
    /// Remove the full source-target shift.
    Global,
    /// No correction.
    None,
}

impl CorrectionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CorrectionMode::Later => "later",
            CorrectionMode::Global => "global",
            CorrectionMode::None => "none",
        }
    }
}

impl fmt::Display for CorrectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CorrectionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "later" => Ok(CorrectionMode::Later),
            "global" => Ok(CorrectionMode::Global),
            "none" => Ok(CorrectionMode::None),
            other => Err(format!("unknown correction mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoPrediction {
    pub video_id: String,
    pub predicted: usize,
    pub label: Option<usize>,
}

impl VideoPrediction {
    pub fn correct(&self) -> Option<bool> {
        self.label.map(|l| l == self.predicted)
    }
}

/// Sequential evaluator over a target stream. The only state carried from
/// one video to the next is the [`CenterState`].
#[derive(Debug, Clone)]
pub struct StreamEvaluator<'a> {
    state: CenterState,
    projector: ProjectorAnchor,
    head: &'a ClassifierHead,
    mode: CorrectionMode,
}

impl<'a> StreamEvaluator<'a> {
    pub fn new(
        state: CenterState,
        anchor: &ProjectorAnchor,
        head: &'a ClassifierHead,
        mode: CorrectionMode,
    ) -> Result<Self, LaterError> {
        for actual in [anchor.dim(), head.dim()] {
            if actual != state.dim() {
                return Err(LaterError::DimensionMismatch {
                    expected: state.dim(),
                    actual,
                });
            }
        }
        let projector = match mode {
            CorrectionMode::Global => ProjectorAnchor::identity(state.dim()),
            _ => anchor.clone(),
        };
        Ok(Self {
            state,
            projector,
            head,
            mode,
        })
    }

    pub fn state(&self) -> &CenterState {
        &self.state
    }

    /// Observe the first view, then correct and classify all views.
    pub fn step(&mut self, views: &DMatrix<f64>) -> Result<(Prediction, DVector<f64>), LaterError> {
        if views.nrows() == 0 {
            return Err(LaterError::NoViews);
        }
        let queue_feature = views.row(0).transpose();
        self.state.observe(&queue_feature)?;
        let delta = match self.mode {
            CorrectionMode::None => DVector::zeros(self.state.dim()),
            CorrectionMode::Later | CorrectionMode::Global => self.state.correction(&self.projector)?,
        };
        let pred = classify_video(views, &delta, self.head)?;
        Ok((pred, delta))
    }
}

#[derive(Debug, Clone)]
pub struct StreamVideo {
    pub video_id: String,
    /// `V × d` view features; row 0 is the designated queue feature.
    pub views: DMatrix<f64>,
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamResult {
    pub predictions: Vec<VideoPrediction>,
    pub correct: usize,
    pub labelled: usize,
}

impl StreamResult {
    /// Percentage of labelled videos predicted correctly.
    pub fn accuracy(&self) -> Option<f64> {
        (self.labelled > 0).then(|| 100.0 * self.correct as f64 / self.labelled as f64)
    }
}

/// Run a whole stream in order. Labels are read only for scoring.
pub fn evaluate_stream(
    videos: &[StreamVideo],
    state: CenterState,
    anchor: &ProjectorAnchor,
    head: &ClassifierHead,
    mode: CorrectionMode,
) -> Result<StreamResult, LaterError> {
    let mut eval = StreamEvaluator::new(state, anchor, head, mode)?;
    let mut predictions = Vec::with_capacity(videos.len());
    for v in videos {
        let (pred, _) = eval.step(&v.views)?;
        predictions.push(VideoPrediction {
            video_id: v.video_id.clone(),
            predicted: pred.predicted,
            label: v.label,
        });
    }
    let labelled = predictions.iter().filter(|p| p.label.is_some()).count();
    let correct = predictions.iter().filter(|p| p.correct() == Some(true)).count();
    Ok(StreamResult {
        predictions,
        correct,
        labelled,
    })
}
