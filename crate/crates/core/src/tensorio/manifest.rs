//! Benchmark manifest: one CSV row per video with a fixed header.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::TensorIoError;

pub const COLUMNS: [&str; 8] = [
    "video_id",
    "class_label",
    "timestamp_key",
    "origin",
    "review_flag",
    "score",
    "video_score",
    "split",
];
const REQUIRED: [&str; 5] = ["video_id", "class_label", "timestamp_key", "origin", "review_flag"];

macro_rules! string_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!(
                        "invalid {} {:?}", stringify!($name), other
                    )),
                }
            }
        }
    };
}

string_enum!(
    /// Where a video came from: the base dataset or the high-depression top-up.
    Origin { Base => "base", Topup => "topup" }
);
string_enum!(ReviewFlag {
    Accepted => "accepted",
    Rejected => "rejected",
    Unreviewed => "unreviewed",
});
string_enum!(Split {
    Train => "train",
    IdTest => "id_test",
    Isolation => "isolation",
    OodTest => "ood_test",
    Excluded => "excluded",
});

impl Split {
    pub const ALL: [Split; 5] = [
        Split::Train,
        Split::IdTest,
        Split::Isolation,
        Split::OodTest,
        Split::Excluded,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub video_id: String,
    pub class_label: String,
    pub timestamp_key: String,
    pub origin: Origin,
    pub review_flag: ReviewFlag,
    /// Score used for splitting (the timestamp-group median), degrees.
    pub score: Option<f64>,
    /// The video's own median frame score, kept for audit.
    pub video_score: Option<f64>,
    pub split: Option<Split>,
}

impl ManifestRow {
    pub fn new(video_id: impl Into<String>, class_label: impl Into<String>) -> Self {
        Self {
            video_id: video_id.into(),
            class_label: class_label.into(),
            timestamp_key: String::new(),
            origin: Origin::Base,
            review_flag: ReviewFlag::Unreviewed,
            score: None,
            video_score: None,
            split: None,
        }
    }

    fn check(&self) -> Result<(), TensorIoError> {
        let violation = |message: &str| TensorIoError::ManifestConstraint {
            video_id: self.video_id.clone(),
            message: message.to_string(),
        };
        if self.video_id.is_empty() {
            return Err(violation("empty video_id"));
        }
        if let Some(split) = self.split {
            if self.review_flag == ReviewFlag::Rejected && split != Split::Excluded {
                return Err(violation(&format!("rejected row assigned split {split}")));
            }
            if self.origin == Origin::Topup && !matches!(split, Split::OodTest | Split::Excluded)
            {
                return Err(violation(&format!(
                    "topup row assigned split {split}; topup videos are OOD-test only"
                )));
            }
        }
        Ok(())
    }
}

/// Ordered collection of rows with unique video ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn new(rows: Vec<ManifestRow>) -> Result<Self, TensorIoError> {
        let mut seen = HashSet::with_capacity(rows.len());
        for row in &rows {
            row.check()?;
            if !seen.insert(row.video_id.as_str()) {
                return Err(TensorIoError::DuplicateVideoId(row.video_id.clone()));
            }
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[ManifestRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn into_rows(self) -> Vec<ManifestRow> {
        self.rows
    }

    pub fn get(&self, video_id: &str) -> Option<&ManifestRow> {
        self.rows.iter().find(|r| r.video_id == video_id)
    }

    /// Rows sorted by video id, the order used on disk.
    pub fn sorted(mut self) -> Self {
        self.rows.sort_by(|a, b| a.video_id.cmp(&b.video_id));
        self
    }

    pub fn to_csv_string(&self) -> String {
        let mut rows: Vec<&ManifestRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| a.video_id.cmp(&b.video_id));
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(COLUMNS).expect("in-memory write");
        for r in rows {
            let score = r.score.map(|s| s.to_string()).unwrap_or_default();
            let video_score = r.video_score.map(|s| s.to_string()).unwrap_or_default();
            w.write_record([
                r.video_id.as_str(),
                r.class_label.as_str(),
                r.timestamp_key.as_str(),
                r.origin.as_str(),
                r.review_flag.as_str(),
                score.as_str(),
                video_score.as_str(),
                r.split.map(Split::as_str).unwrap_or(""),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }

    pub fn from_csv_str(text: &str) -> Result<Self, TensorIoError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        let headers = reader
            .headers()
            .map_err(|e| TensorIoError::ManifestSyntax {
                line: 1,
                message: e.to_string(),
            })?
            .clone();
        let mut index = [None; COLUMNS.len()];
        for (pos, name) in headers.iter().enumerate() {
            let col = COLUMNS
                .iter()
                .position(|c| *c == name)
                .ok_or_else(|| TensorIoError::UnknownColumn(name.to_string()))?;
            if index[col].replace(pos).is_some() {
                return Err(TensorIoError::ManifestSyntax {
                    line: 1,
                    message: format!("column {name:?} repeated"),
                });
            }
        }
        for req in REQUIRED {
            let col = COLUMNS.iter().position(|c| *c == req).expect("known column");
            if index[col].is_none() {
                return Err(TensorIoError::MissingColumn(req.to_string()));
            }
        }

        let mut rows = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let line = i + 2;
            let record = record.map_err(|e| TensorIoError::ManifestSyntax {
                line,
                message: e.to_string(),
            })?;
            let field = |col: usize| index[col].and_then(|p| record.get(p)).unwrap_or("");
            let syntax = |message: String| TensorIoError::ManifestSyntax { line, message };
            let opt_f64 = |text: &str| -> Result<Option<f64>, TensorIoError> {
                if text.is_empty() {
                    Ok(None)
                } else {
                    text.parse::<f64>()
                        .map(Some)
                        .map_err(|e| syntax(format!("bad number {text:?}: {e}")))
                }
            };
            rows.push(ManifestRow {
                video_id: field(0).to_string(),
                class_label: field(1).to_string(),
                timestamp_key: field(2).to_string(),
                origin: field(3).parse().map_err(syntax)?,
                review_flag: field(4).parse().map_err(syntax)?,
                score: opt_f64(field(5))?,
                video_score: opt_f64(field(6))?,
                split: match field(7) {
                    "" => None,
                    s => Some(s.parse().map_err(syntax)?),
                },
            });
        }
        Manifest::new(rows)
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest, TensorIoError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| TensorIoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Manifest::from_csv_str(&text).map_err(|e| e.at(path))
}

pub fn save_manifest(m: &Manifest, path: impl AsRef<Path>) -> Result<(), TensorIoError> {
    let path = path.as_ref();
    std::fs::write(path, m.to_csv_string()).map_err(|source| TensorIoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const HEADER: &str = "video_id,class_label,timestamp_key,origin,review_flag,score,video_score,split\n";

    #[test]
    fn three_rows() {
        let text = format!(
            "{HEADER}v1,salute,2019-06_14-30,base,accepted,12.5,12,train\n\
             v2,salute,2019-06_14-30,base,unreviewed,,,\n\
             v3,open a box,2020-01_09-15,topup,accepted,44.8,44.8,ood_test\n"
        );
        let m = Manifest::from_csv_str(&text).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.rows()[0].score, Some(12.5));
        assert_eq!(m.rows()[1].split, None);
        assert_eq!(m.rows()[2].origin, Origin::Topup);
    }

    #[test]
    fn duplicate_id_named() {
        let text = format!("{HEADER}v1,a,k,base,accepted,,,\nv1,b,k,base,accepted,,,\n");
        match Manifest::from_csv_str(&text) {
            Err(TensorIoError::DuplicateVideoId(id)) => assert_eq!(id, "v1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn topup_train_rejected() {
        let text = format!("{HEADER}t1,a,k,topup,accepted,50,50,train\n");
        let err = Manifest::from_csv_str(&text).unwrap_err();
        assert!(matches!(err, TensorIoError::ManifestConstraint { ref video_id, .. } if video_id == "t1"));
    }

    #[test]
    fn rejected_row_must_be_excluded() {
        let mut row = ManifestRow::new("v", "a");
        row.review_flag = ReviewFlag::Rejected;
        row.split = Some(Split::IdTest);
        assert!(Manifest::new(vec![row.clone()]).is_err());
        row.split = Some(Split::Excluded);
        assert!(Manifest::new(vec![row]).is_ok());
    }

    #[test]
    fn unknown_and_missing_columns() {
        let text = "video_id,class_label,timestamp_key,origin,review_flag,camera\n";
        assert!(matches!(
            Manifest::from_csv_str(text),
            Err(TensorIoError::UnknownColumn(c)) if c == "camera"
        ));
        let text = "video_id,class_label,origin,review_flag\n";
        assert!(matches!(
            Manifest::from_csv_str(text),
            Err(TensorIoError::MissingColumn(c)) if c == "timestamp_key"
        ));
    }

    #[test]
    fn optional_columns_may_be_absent() {
        let text = "video_id,class_label,timestamp_key,origin,review_flag\nv1,a,k,base,accepted\n";
        let m = Manifest::from_csv_str(text).unwrap();
        assert_eq!(m.rows()[0].score, None);
    }

    #[test]
    fn save_orders_by_id() {
        let m = Manifest::new(vec![ManifestRow::new("b", "x"), ManifestRow::new("a", "y")]).unwrap();
        let text = m.to_csv_string();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[1].starts_with("a,"));
        assert!(lines[2].starts_with("b,"));
    }

    fn arb_row() -> impl Strategy<Value = ManifestRow> {
        (
            "[a-z0-9_]{1,12}",
            "[a-z ,\"]{1,10}",
            "[0-9_-]{0,8}",
            prop::option::of(-90.0f64..180.0),
            prop::option::of(any::<f64>().prop_filter("finite", |x| x.is_finite())),
            0usize..5,
        )
            .prop_map(|(id, class, key, score, video_score, split)| ManifestRow {
                video_id: id,
                class_label: class,
                timestamp_key: key,
                origin: Origin::Base,
                review_flag: ReviewFlag::Accepted,
                score,
                video_score,
                split: if split == 4 { None } else { Some(Split::ALL[split]) },
            })
    }

    proptest! {
        #[test]
        fn save_load_is_byte_stable(rows in prop::collection::vec(arb_row(), 0..20)) {
            let mut seen = HashSet::new();
            let rows: Vec<_> = rows.into_iter().filter(|r| seen.insert(r.video_id.clone())).collect();
            let m = Manifest::new(rows).unwrap();
            let text = m.to_csv_string();
            let back = Manifest::from_csv_str(&text).unwrap();
            prop_assert_eq!(back.to_csv_string(), text);
            prop_assert_eq!(back, m.sorted());
        }
    }
}
