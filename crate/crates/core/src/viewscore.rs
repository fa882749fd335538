//! Frame → video → timestamp-group score aggregation.

use std::collections::BTreeMap;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensorio::{Manifest, ManifestRow, ReviewFlag};
use crate::viewgeom::FrameScore;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("median of an empty list")]
    EmptyMedian,
    #[error("invalid timestamp pattern: {0}")]
    Pattern(#[from] regex::Error),
    #[error("timestamp pattern has no capture group")]
    NoCaptureGroup,
}

/// Median of an ascending slice; even lengths average the two middle values.
pub fn median_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "median of empty slice");
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

pub fn median(values: &[f64]) -> Result<f64, ScoreError> {
    if values.is_empty() {
        return Err(ScoreError::EmptyMedian);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(median_sorted(&v))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoScore {
    pub video_id: String,
    pub frame_scores: Vec<FrameScore>,
    pub score_deg: Option<f64>,
    pub valid_frame_count: usize,
}

/// Median of the valid frames' `s`; absent when no frame is valid.
pub fn score_video(video_id: &str, frames: Vec<FrameScore>) -> VideoScore {
    let valid: Vec<f64> = frames.iter().filter_map(FrameScore::score).collect();
    VideoScore {
        video_id: video_id.to_string(),
        score_deg: median(&valid).ok(),
        valid_frame_count: valid.len(),
        frame_scores: frames,
    }
}

/// Extracts the timestamp key from a video id. A capture group named `key`
/// is used verbatim; otherwise all capture groups are joined with `_`.
#[derive(Debug, Clone)]
pub struct KeyPattern {
    regex: Regex,
}

impl KeyPattern {
    pub fn new(pattern: &str) -> Result<Self, ScoreError> {
        let regex = Regex::new(pattern)?;
        if regex.captures_len() < 2 {
            return Err(ScoreError::NoCaptureGroup);
        }
        Ok(Self { regex })
    }

    pub fn extract(&self, video_id: &str) -> Option<String> {
        let caps = self.regex.captures(video_id)?;
        if let Some(k) = caps.name("key") {
            return Some(k.as_str().to_string());
        }
        let parts: Vec<&str> = caps.iter().skip(1).flatten().map(|m| m.as_str()).collect();
        Some(parts.join("_"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub timestamp_key: String,
    pub member_ids: Vec<String>,
    pub score_deg: Option<f64>,
    pub review_flag: ReviewFlag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub groups: Vec<GroupScore>,
    /// Video ids the key pattern did not match.
    pub unmatched: Vec<String>,
}

impl GroupReport {
    pub fn group_of(&self, video_id: &str) -> Option<&GroupScore> {
        self.groups
            .iter()
            .find(|g| g.member_ids.iter().any(|m| m == video_id))
    }
}

/// A group is rejected if any member row is, accepted if all are.
fn combine_flags(flags: impl Iterator<Item = ReviewFlag>) -> ReviewFlag {
    let mut all_accepted = true;
    for f in flags {
        match f {
            ReviewFlag::Rejected => return ReviewFlag::Rejected,
            ReviewFlag::Unreviewed => all_accepted = false,
            ReviewFlag::Accepted => {}
        }
    }
    if all_accepted {
        ReviewFlag::Accepted
    } else {
        ReviewFlag::Unreviewed
    }
}

/// Partition videos by timestamp key and score each group by the median of
/// its members' video scores. Without a pattern the manifest's own
/// `timestamp_key` column is used; empty keys count as unmatched.
pub fn group_by_timestamp(manifest: &Manifest, pattern: Option<&KeyPattern>) -> GroupReport {
    let mut by_key: BTreeMap<String, Vec<&ManifestRow>> = BTreeMap::new();
    let mut unmatched = Vec::new();
    for row in manifest.rows() {
        let key = match pattern {
            Some(p) => p.extract(&row.video_id),
            None => Some(row.timestamp_key.clone()).filter(|k| !k.is_empty()),
        };
        match key {
            Some(k) => by_key.entry(k).or_default().push(row),
            None => unmatched.push(row.video_id.clone()),
        }
    }
    unmatched.sort();

    let groups = by_key
        .into_iter()
        .map(|(timestamp_key, rows)| {
            let review_flag = combine_flags(rows.iter().map(|r| r.review_flag));
            let scores: Vec<f64> = rows.iter().filter_map(|r| r.video_score).collect();
            let score_deg = if review_flag == ReviewFlag::Rejected {
                None
            } else {
                median(&scores).ok()
            };
            let mut member_ids: Vec<String> = rows.iter().map(|r| r.video_id.clone()).collect();
            member_ids.sort();
            GroupScore {
                timestamp_key,
                member_ids,
                score_deg,
                review_flag,
            }
        })
        .collect();
    GroupReport { groups, unmatched }
}

/// Write group keys and group scores back onto member rows. Members of a
/// rejected group are flagged rejected; unmatched rows keep no score.
pub fn apply_group_scores(manifest: &Manifest, report: &GroupReport) -> Manifest {
    let mut lookup: BTreeMap<&str, &GroupScore> = BTreeMap::new();
    for g in &report.groups {
        for m in &g.member_ids {
            lookup.insert(m.as_str(), g);
        }
    }
    let rows = manifest
        .rows()
        .iter()
        .map(|row| {
            let mut row = row.clone();
            match lookup.get(row.video_id.as_str()) {
                Some(g) => {
                    row.timestamp_key = g.timestamp_key.clone();
                    row.score = g.score_deg;
                    if g.review_flag == ReviewFlag::Rejected {
                        row.review_flag = ReviewFlag::Rejected;
                    }
                }
                None => row.score = None,
            }
            row
        })
        .collect();
    Manifest::new(rows).expect("rows already validated")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::viewgeom::InvalidReason;
    use proptest::prelude::*;

    fn frame(i: u64, s: f64, valid: bool) -> FrameScore {
        if valid {
            FrameScore::from_theta(i, s + 90.0)
        } else {
            FrameScore::invalid(i, InvalidReason::TooFewInliers)
        }
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[10.0, 30.0, 20.0]).unwrap(), 20.0);
        assert_eq!(median(&[10.0, 20.0]).unwrap(), 15.0);
        assert!(matches!(median(&[]), Err(ScoreError::EmptyMedian)));
    }

    proptest! {
        #[test]
        fn median_matches_sort_oracle(v in prop::collection::vec(-1e6f64..1e6, 1..60)) {
            let mut s = v.clone();
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = s.len();
            let want = if n % 2 == 1 { s[n / 2] } else { (s[n / 2 - 1] + s[n / 2]) / 2.0 };
            prop_assert_eq!(median(&v).unwrap(), want);
        }

        #[test]
        fn video_score_is_order_invariant(
            v in prop::collection::vec((-10f64..80.0, any::<bool>()), 1..30),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let frames: Vec<_> = v.iter().enumerate().map(|(i, (s, ok))| frame(i as u64, *s, *ok)).collect();
            let mut shuffled = frames.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(score_video("v", frames).score_deg, score_video("v", shuffled).score_deg);
        }

        #[test]
        fn dropping_invalid_frames_changes_nothing(
            v in prop::collection::vec((-10f64..80.0, any::<bool>()), 1..30),
        ) {
            let frames: Vec<_> = v.iter().enumerate().map(|(i, (s, ok))| frame(i as u64, *s, *ok)).collect();
            let valid_only: Vec<_> = frames.iter().copied().filter(|f| f.valid).collect();
            prop_assert_eq!(score_video("v", frames).score_deg, score_video("v", valid_only).score_deg);
        }
    }

    #[test]
    fn video_median_uses_valid_frames_only() {
        let frames = vec![
            frame(0, 10.0, true),
            frame(1, 50.0, false),
            frame(2, 12.0, true),
            frame(3, 14.0, true),
        ];
        let v = score_video("v", frames);
        assert_eq!(v.score_deg, Some(12.0));
        assert_eq!(v.valid_frame_count, 3);
    }

    #[test]
    fn all_invalid_means_no_score() {
        let v = score_video("v", vec![frame(0, 0.0, false), frame(1, 0.0, false)]);
        assert_eq!(v.score_deg, None);
        assert_eq!(v.valid_frame_count, 0);
    }

    fn row(id: &str, video_score: Option<f64>, flag: ReviewFlag) -> ManifestRow {
        let mut r = ManifestRow::new(id, "salute");
        r.video_score = video_score;
        r.review_flag = flag;
        r
    }

    fn pattern() -> KeyPattern {
        KeyPattern::new(r"^(?P<key>\d{4}-\d{2}_\d{2}-\d{2})_").unwrap()
    }

    #[test]
    fn shared_key_forms_one_group_scored_by_median() {
        let m = Manifest::new(vec![
            row("2019-06_14-30_a", Some(28.0), ReviewFlag::Accepted),
            row("2019-06_14-30_b", Some(31.0), ReviewFlag::Accepted),
            row("2019-06_14-30_c", Some(29.0), ReviewFlag::Accepted),
        ])
        .unwrap();
        let report = group_by_timestamp(&m, Some(&pattern()));
        assert_eq!(report.groups.len(), 1);
        assert_eq!(report.groups[0].timestamp_key, "2019-06_14-30");
        assert_eq!(report.groups[0].member_ids.len(), 3);
        assert_eq!(report.groups[0].score_deg, Some(29.0));
        assert_eq!(report.groups[0].review_flag, ReviewFlag::Accepted);

        let scored = apply_group_scores(&m, &report);
        assert!(scored.rows().iter().all(|r| r.score == Some(29.0)));
        assert_eq!(scored.rows()[1].video_score, Some(31.0));
    }

    #[test]
    fn unmatched_ids_are_reported_not_fatal() {
        let m = Manifest::new(vec![
            row("2019-06_14-30_a", Some(5.0), ReviewFlag::Accepted),
            row("garbage", Some(5.0), ReviewFlag::Accepted),
        ])
        .unwrap();
        let report = group_by_timestamp(&m, Some(&pattern()));
        assert_eq!(report.unmatched, vec!["garbage".to_string()]);
        let scored = apply_group_scores(&m, &report);
        assert_eq!(scored.get("garbage").unwrap().score, None);
    }

    #[test]
    fn rejected_group_carries_no_score() {
        let m = Manifest::new(vec![
            row("2019-06_14-30_a", Some(5.0), ReviewFlag::Accepted),
            row("2019-06_14-30_b", Some(6.0), ReviewFlag::Rejected),
        ])
        .unwrap();
        let report = group_by_timestamp(&m, Some(&pattern()));
        assert_eq!(report.groups[0].review_flag, ReviewFlag::Rejected);
        assert_eq!(report.groups[0].score_deg, None);
        let scored = apply_group_scores(&m, &report);
        assert!(scored.rows().iter().all(|r| r.review_flag == ReviewFlag::Rejected && r.score.is_none()));
    }

    #[test]
    fn group_ignores_members_without_scores() {
        let m = Manifest::new(vec![
            row("2019-06_14-30_a", Some(5.0), ReviewFlag::Unreviewed),
            row("2019-06_14-30_b", None, ReviewFlag::Accepted),
        ])
        .unwrap();
        let report = group_by_timestamp(&m, Some(&pattern()));
        assert_eq!(report.groups[0].score_deg, Some(5.0));
        assert_eq!(report.groups[0].review_flag, ReviewFlag::Unreviewed);
    }

    #[test]
    fn unnamed_groups_join_with_underscore() {
        let p = KeyPattern::new(r"^(\d{4})(\d{2})\d{2}(\d{2})(\d{2})").unwrap();
        assert_eq!(p.extract("201906281430_x").as_deref(), Some("2019_06_14_30"));
        assert!(matches!(KeyPattern::new("abc"), Err(ScoreError::NoCaptureGroup)));
    }

    proptest! {
        #[test]
        fn grouping_is_a_partition(keys in prop::collection::vec(0u8..5, 1..40)) {
            let rows: Vec<_> = keys
                .iter()
                .enumerate()
                .map(|(i, k)| {
                    let mut r = ManifestRow::new(format!("v{i}"), "c");
                    r.timestamp_key = format!("k{k}");
                    r.video_score = Some(i as f64);
                    r
                })
                .collect();
            let m = Manifest::new(rows).unwrap();
            let report = group_by_timestamp(&m, None);
            let total: usize = report.groups.iter().map(|g| g.member_ids.len()).sum();
            prop_assert_eq!(total, m.len());
            for row in m.rows() {
                let hits = report.groups.iter().filter(|g| g.member_ids.contains(&row.video_id)).count();
                prop_assert_eq!(hits, 1);
                prop_assert_eq!(&report.group_of(&row.video_id).unwrap().timestamp_key, &row.timestamp_key);
            }
        }
    }
}
