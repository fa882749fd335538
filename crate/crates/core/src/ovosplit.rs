//! Viewpoint-regime splitting with an isolation band and class-matched
//! ID/OOD test sets.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensorio::{Manifest, ManifestRow, Origin, ReviewFlag, Split, TensorIoError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Half-open `[lo, hi)` range for the training / ID pool.
    pub train_id_range: (f64, f64),
    /// Closed `[lo, hi]` isolation band.
    pub isolation_range: (f64, f64),
    /// Scores strictly above this form the OOD pool.
    pub ood_threshold: f64,
    pub per_class_test_count: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_id_range: (0.0, 30.0),
            isolation_range: (30.0, 40.0),
            ood_threshold: 40.0,
            per_class_test_count: 20,
            seed: 0,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<(), SplitError> {
        let (a, b) = self.train_id_range;
        let (c, d) = self.isolation_range;
        let ordered = a < b && b <= c && c <= d && d <= self.ood_threshold;
        if !ordered || ![a, b, c, d, self.ood_threshold].iter().all(|v| v.is_finite()) {
            return Err(SplitError::Config(
                "ranges must be finite, ordered and non-overlapping".into(),
            ));
        }
        if self.per_class_test_count == 0 {
            return Err(SplitError::Config("per_class_test_count must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    ReviewRejected,
    MissingScore,
    InvalidScore,
    NegativeScore,
    OutOfRange,
    TopupBelowThreshold,
    OodSurplus,
    MissingClass,
}

impl ExclusionReason {
    pub fn as_str(self) -> &'static str {
        match self {
            ExclusionReason::ReviewRejected => "review_rejected",
            ExclusionReason::MissingScore => "missing_score",
            ExclusionReason::InvalidScore => "invalid_score",
            ExclusionReason::NegativeScore => "negative_score",
            ExclusionReason::OutOfRange => "out_of_range",
            ExclusionReason::TopupBelowThreshold => "topup_below_threshold",
            ExclusionReason::OodSurplus => "ood_surplus",
            ExclusionReason::MissingClass => "missing_class",
        }
    }
}

impl fmt::Display for ExclusionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    LowPool,
    Isolation,
    OodPool,
    Excluded(ExclusionReason),
}

/// Map a score to its regime. Both isolation boundaries (30° and 40° by
/// default) belong to the isolation band.
pub fn assign_regime(score: f64, cfg: &SplitConfig) -> Regime {
    if !score.is_finite() {
        return Regime::Excluded(ExclusionReason::InvalidScore);
    }
    let (lo, hi) = cfg.train_id_range;
    let (iso_lo, iso_hi) = cfg.isolation_range;
    if score < lo {
        Regime::Excluded(ExclusionReason::NegativeScore)
    } else if score < hi {
        Regime::LowPool
    } else if (iso_lo..=iso_hi).contains(&score) {
        Regime::Isolation
    } else if score > cfg.ood_threshold {
        Regime::OodPool
    } else {
        Regime::Excluded(ExclusionReason::OutOfRange)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub video_id: String,
    pub split: Split,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shortfall {
    pub class_label: String,
    pub pool: String,
    pub available: usize,
    pub required: usize,
}

impl fmt::Display for Shortfall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "class {:?}: {} pool has {} of {} required (short {})",
            self.class_label,
            self.pool,
            self.available,
            self.required,
            self.required - self.available
        )
    }
}

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("invalid split config: {0}")]
    Config(String),
    #[error("insufficient test videos: {}", .0.iter().map(|s| s.to_string()).collect::<Vec<_>>().join("; "))]
    Shortfall(Vec<Shortfall>),
    #[error("video id {0:?} appears in both base and top-up manifests")]
    Collision(String),
    #[error("top-up manifest row {0:?} is not marked origin=topup")]
    NotTopup(String),
    #[error(transparent)]
    Manifest(#[from] TensorIoError),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub id_test: usize,
    pub isolation: usize,
    pub ood_test: usize,
    pub excluded: usize,
}

impl SplitCounts {
    fn bump(&mut self, split: Split) {
        match split {
            Split::Train => self.train += 1,
            Split::IdTest => self.id_test += 1,
            Split::Isolation => self.isolation += 1,
            Split::OodTest => self.ood_test += 1,
            Split::Excluded => self.excluded += 1,
        }
    }

    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::IdTest => self.id_test,
            Split::Isolation => self.isolation,
            Split::OodTest => self.ood_test,
            Split::Excluded => self.excluded,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.id_test + self.isolation + self.ood_test + self.excluded
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub counts: SplitCounts,
    pub total: usize,
    pub class_count: usize,
    pub per_class: BTreeMap<String, SplitCounts>,
    pub exclusions: BTreeMap<String, usize>,
    pub topup_in_ood_test: usize,
    /// Every class has exactly `per_class_test_count` ID and OOD test videos.
    pub parity: bool,
    pub config: SplitConfig,
}

#[derive(Debug, Clone)]
pub struct SplitOutcome {
    /// Sorted by video id.
    pub assignments: Vec<SplitAssignment>,
    pub summary: SplitSummary,
    /// Input manifest with the split column filled.
    pub manifest: Manifest,
}

fn fnv1a(text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic per-class draw of `k` of `n` positions.
fn draw(seed: u64, class: &str, pool: &str, n: usize, k: usize) -> HashSet<usize> {
    let stream = seed ^ fnv1a(class).rotate_left(17) ^ fnv1a(pool);
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    rand::seq::index::sample(&mut rng, n, k).into_iter().collect()
}

fn pre_regime(row: &ManifestRow, cfg: &SplitConfig) -> Regime {
    if row.review_flag == ReviewFlag::Rejected {
        return Regime::Excluded(ExclusionReason::ReviewRejected);
    }
    if row.class_label.is_empty() {
        return Regime::Excluded(ExclusionReason::MissingClass);
    }
    let Some(score) = row.score else {
        return Regime::Excluded(ExclusionReason::MissingScore);
    };
    match row.origin {
        Origin::Base => assign_regime(score, cfg),
        Origin::Topup => match assign_regime(score, cfg) {
            Regime::OodPool => Regime::OodPool,
            Regime::Excluded(ExclusionReason::InvalidScore) => {
                Regime::Excluded(ExclusionReason::InvalidScore)
            }
            _ => Regime::Excluded(ExclusionReason::TopupBelowThreshold),
        },
    }
}

/// Four-way split of a scored (and top-up merged) manifest.
pub fn build_splits(manifest: &Manifest, cfg: &SplitConfig) -> Result<SplitOutcome, SplitError> {
    cfg.validate()?;
    let k = cfg.per_class_test_count;
    let rows = manifest.rows();

    let mut split_of: Vec<Option<(Split, String)>> = vec![None; rows.len()];
    let mut low: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut ood: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    let mut classes: BTreeMap<&str, ()> = BTreeMap::new();

    for (i, row) in rows.iter().enumerate() {
        let regime = pre_regime(row, cfg);
        if !matches!(regime, Regime::Excluded(_)) {
            classes.insert(row.class_label.as_str(), ());
        }
        match regime {
            Regime::LowPool => low.entry(&row.class_label).or_default().push(i),
            Regime::OodPool => ood.entry(&row.class_label).or_default().push(i),
            Regime::Isolation => split_of[i] = Some((Split::Isolation, "isolation_band".into())),
            Regime::Excluded(reason) => split_of[i] = Some((Split::Excluded, reason.to_string())),
        }
    }

    let mut shortfalls = Vec::new();
    for class in classes.keys() {
        for (pool, members) in [("id", low.get(class)), ("ood", ood.get(class))] {
            let available = members.map_or(0, Vec::len);
            if available < k {
                shortfalls.push(Shortfall {
                    class_label: class.to_string(),
                    pool: pool.to_string(),
                    available,
                    required: k,
                });
            }
        }
    }
    if !shortfalls.is_empty() {
        return Err(SplitError::Shortfall(shortfalls));
    }

    let by_id = |members: &[usize]| {
        let mut m = members.to_vec();
        m.sort_by(|a, b| rows[*a].video_id.cmp(&rows[*b].video_id));
        m
    };
    for (class, members) in &low {
        let members = by_id(members);
        let chosen = draw(cfg.seed, class, "id", members.len(), k);
        for (pos, &i) in members.iter().enumerate() {
            split_of[i] = Some(if chosen.contains(&pos) {
                (Split::IdTest, "id_test_draw".into())
            } else {
                (Split::Train, "low_pool_remainder".into())
            });
        }
    }
    for (class, members) in &ood {
        let members = by_id(members);
        let chosen = draw(cfg.seed, class, "ood", members.len(), k);
        for (pos, &i) in members.iter().enumerate() {
            split_of[i] = Some(if chosen.contains(&pos) {
                (Split::OodTest, "ood_test_draw".into())
            } else {
                (Split::Excluded, ExclusionReason::OodSurplus.to_string())
            });
        }
    }

    let mut counts = SplitCounts::default();
    let mut per_class: BTreeMap<String, SplitCounts> = BTreeMap::new();
    let mut exclusions: BTreeMap<String, usize> = BTreeMap::new();
    let mut topup_in_ood_test = 0;
    let mut assignments = Vec::with_capacity(rows.len());
    let mut out_rows = Vec::with_capacity(rows.len());
    for (row, assigned) in rows.iter().zip(split_of) {
        let (split, reason) = assigned.expect("every row assigned");
        counts.bump(split);
        per_class
            .entry(row.class_label.clone())
            .or_default()
            .bump(split);
        if split == Split::Excluded {
            *exclusions.entry(reason.clone()).or_default() += 1;
        }
        if split == Split::OodTest && row.origin == Origin::Topup {
            topup_in_ood_test += 1;
        }
        assignments.push(SplitAssignment {
            video_id: row.video_id.clone(),
            split,
            reason,
        });
        let mut r = row.clone();
        r.split = Some(split);
        out_rows.push(r);
    }
    assignments.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    let parity = classes.keys().all(|c| {
        per_class
            .get(*c)
            .is_some_and(|pc| pc.id_test == k && pc.ood_test == k)
    });

    Ok(SplitOutcome {
        assignments,
        summary: SplitSummary {
            total: counts.total(),
            counts,
            class_count: classes.len(),
            per_class,
            exclusions,
            topup_in_ood_test,
            parity,
            config: *cfg,
        },
        manifest: Manifest::new(out_rows)?.sorted(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopupWarning {
    pub video_id: String,
    pub reason: ExclusionReason,
}

/// Append top-up rows to the base manifest. Rows at or below the OOD
/// threshold (or unscored) are excluded with a warning.
pub fn merge_topup(
    base: &Manifest,
    topup: &Manifest,
    cfg: &SplitConfig,
) -> Result<(Manifest, Vec<TopupWarning>), SplitError> {
    let ids: HashSet<&str> = base.rows().iter().map(|r| r.video_id.as_str()).collect();
    let mut rows = base.rows().to_vec();
    let mut warnings = Vec::new();
    for row in topup.rows() {
        if row.origin != Origin::Topup {
            return Err(SplitError::NotTopup(row.video_id.clone()));
        }
        if ids.contains(row.video_id.as_str()) {
            return Err(SplitError::Collision(row.video_id.clone()));
        }
        let mut r = row.clone();
        let eligible = r.score.is_some_and(|s| s.is_finite() && s > cfg.ood_threshold);
        if !eligible {
            let reason = match r.score {
                Some(s) if s.is_finite() => ExclusionReason::TopupBelowThreshold,
                Some(_) => ExclusionReason::InvalidScore,
                None => ExclusionReason::MissingScore,
            };
            warnings.push(TopupWarning {
                video_id: r.video_id.clone(),
                reason,
            });
            r.split = Some(Split::Excluded);
        }
        rows.push(r);
    }
    Ok((Manifest::new(rows)?, warnings))
}

fn to_csv<T: Serialize>(rows: impl IntoIterator<Item = T>) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv output is utf-8")
}

/// `video_id,split,reason`, one row per assignment.
pub fn assignments_csv(assignments: &[SplitAssignment]) -> String {
    to_csv(assignments)
}

#[derive(Serialize)]
struct ClassRow<'a> {
    class_label: &'a str,
    train: usize,
    id_test: usize,
    isolation: usize,
    ood_test: usize,
    excluded: usize,
}

/// Per-class split counts as CSV.
pub fn per_class_csv(summary: &SplitSummary) -> String {
    to_csv(summary.per_class.iter().map(|(class, c)| ClassRow {
        class_label: class,
        train: c.train,
        id_test: c.id_test,
        isolation: c.isolation,
        ood_test: c.ood_test,
        excluded: c.excluded,
    }))
}
