//! JSON Lines event files and dataset manifests.
//!
//! One object per line:
//! `{"id": str, "label": int | [int, ...], "events": [[time, feature, value], ...]}`.
//! Events sharing a raw timestamp form one step; a repeated `(time, feature)`
//! pair keeps the last value.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::series::{IrregularSeries, Label, Observation, Task, TimeStep};
use crate::error::{Result, TadaError};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EventRecord {
    id: String,
    label: Label,
    events: Vec<(f64, usize, f64)>,
}

/// `dataset.json` next to the split files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    #[serde(rename = "D")]
    pub d: usize,
    pub task: Task,
    pub n_classes: usize,
}

#[derive(Debug, Clone)]
pub struct ParsedSeries {
    pub series: IrregularSeries,
    /// Number of `(time, feature)` pairs overwritten by a later event.
    pub duplicates: usize,
}

/// Parses one event-file line (`line_no` is 1-based, used in errors).
pub fn parse_events(record: &str, line_no: usize, d: usize) -> Result<ParsedSeries> {
    let rec: EventRecord = serde_json::from_str(record).map_err(|e| TadaError::Parse {
        line: line_no,
        msg: e.to_string(),
    })?;
    if rec.events.is_empty() {
        return Err(TadaError::Parse {
            line: line_no,
            msg: format!("sample `{}` has no events", rec.id),
        });
    }
    let mut events = rec.events;
    if let Some(&(_, f, _)) = events.iter().find(|e| e.1 >= d) {
        return Err(TadaError::Schema(format!(
            "line {line_no}: feature {f} out of range for D={d}"
        )));
    }
    if events.iter().any(|e| !e.0.is_finite() || !e.2.is_finite()) {
        return Err(TadaError::Parse {
            line: line_no,
            msg: "non-finite time or value".into(),
        });
    }
    // stable sort keeps file order among equal keys, so the last duplicate wins
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut steps: Vec<TimeStep> = Vec::new();
    let mut duplicates = 0;
    for (t, f, v) in events {
        match steps.last_mut() {
            Some(step) if step.time == t => match step.observations.last_mut() {
                Some(o) if o.feature == f => {
                    o.value = v;
                    duplicates += 1;
                }
                _ => step.observations.push(Observation {
                    feature: f,
                    value: v,
                }),
            },
            _ => steps.push(TimeStep {
                time: t,
                observations: vec![Observation {
                    feature: f,
                    value: v,
                }],
            }),
        }
    }
    if duplicates > 0 {
        log::warn!(
            "line {line_no}: sample `{}` had {duplicates} duplicate (time, feature) events; kept the last",
            rec.id
        );
    }
    let series = IrregularSeries {
        id: rec.id,
        steps,
        label: rec.label,
    };
    if let Label::Step(l) = &series.label {
        if l.len() != series.steps.len() {
            return Err(TadaError::Schema(format!(
                "line {line_no}: {} step labels for {} distinct timestamps",
                l.len(),
                series.steps.len()
            )));
        }
    }
    Ok(ParsedSeries { series, duplicates })
}

/// Serializes one series as an event-file line (no trailing newline).
pub fn serialize_series(series: &IrregularSeries) -> String {
    let events = series
        .steps
        .iter()
        .flat_map(|s| {
            s.observations
                .iter()
                .map(move |o| (s.time, o.feature, o.value))
        })
        .collect();
    let rec = EventRecord {
        id: series.id.clone(),
        label: series.label.clone(),
        events,
    };
    serde_json::to_string(&rec).expect("finite values serialize")
}

pub fn read_events_file(path: &Path, d: usize) -> Result<Vec<IrregularSeries>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_events(&line, i + 1, d)?.series);
    }
    Ok(out)
}

pub fn write_events_file(path: &Path, series: &[IrregularSeries]) -> Result<()> {
    let mut buf = Vec::new();
    for s in series {
        buf.extend_from_slice(serialize_series(s).as_bytes());
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path)?;
    let m: DatasetManifest = serde_json::from_str(&text)?;
    if m.d == 0 || m.n_classes < 2 {
        return Err(TadaError::Schema(format!(
            "dataset manifest needs D >= 1 and n_classes >= 2, got {m:?}"
        )));
    }
    Ok(m)
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Train/validation/test series of one dataset directory.
#[derive(Debug, Clone)]
pub struct DatasetSplits {
    pub manifest: DatasetManifest,
    pub train: Vec<IrregularSeries>,
    pub val: Vec<IrregularSeries>,
    pub test: Vec<IrregularSeries>,
}

pub const MANIFEST_FILE: &str = "dataset.json";
pub const SPLIT_FILES: [&str; 3] = ["train.jsonl", "val.jsonl", "test.jsonl"];

pub fn read_dataset_dir(dir: &Path) -> Result<DatasetSplits> {
    let manifest = read_manifest(&dir.join(MANIFEST_FILE))?;
    let load = |name: &str| read_events_file(&dir.join(name), manifest.d);
    Ok(DatasetSplits {
        manifest,
        train: load(SPLIT_FILES[0])?,
        val: load(SPLIT_FILES[1])?,
        test: load(SPLIT_FILES[2])?,
    })
}

pub fn write_dataset_dir(dir: &Path, splits: &DatasetSplits) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_manifest(&dir.join(MANIFEST_FILE), &splits.manifest)?;
    write_events_file(&dir.join(SPLIT_FILES[0]), &splits.train)?;
    write_events_file(&dir.join(SPLIT_FILES[1]), &splits.val)?;
    write_events_file(&dir.join(SPLIT_FILES[2]), &splits.test)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_by_time() {
        let line = r#"{"id":"a","label":1,"events":[[0.0,0,1.5],[0.0,2,3.0],[5.0,0,1.6]]}"#;
        let p = parse_events(line, 1, 3).unwrap();
        let s = p.series;
        assert_eq!(s.len(), 2);
        let feats: Vec<usize> = s.steps[0].observations.iter().map(|o| o.feature).collect();
        assert_eq!(feats, vec![0, 2]);
        assert_eq!(s.steps[1].observations.len(), 1);
        assert_eq!(s.label, Label::Sequence(1));
        assert_eq!(p.duplicates, 0);
    }

    #[test]
    fn empty_events_rejected() {
        let err = parse_events(r#"{"id":"a","label":0,"events":[]}"#, 7, 3).unwrap_err();
        assert!(matches!(err, TadaError::Parse { line: 7, .. }));
    }

    #[test]
    fn unsorted_matches_sorted() {
        let a = parse_events(
            r#"{"id":"a","label":0,"events":[[5.0,0,1.6],[0.0,2,3.0],[0.0,0,1.5]]}"#,
            1,
            3,
        )
        .unwrap();
        let b = parse_events(
            r#"{"id":"a","label":0,"events":[[0.0,0,1.5],[0.0,2,3.0],[5.0,0,1.6]]}"#,
            1,
            3,
        )
        .unwrap();
        assert_eq!(a.series, b.series);
    }

    #[test]
    fn duplicates_last_wins() {
        let p = parse_events(
            r#"{"id":"a","label":0,"events":[[1.0,1,2.0],[1.0,1,9.0]]}"#,
            1,
            2,
        )
        .unwrap();
        assert_eq!(p.duplicates, 1);
        assert_eq!(
            p.series.steps[0].observations,
            vec![Observation {
                feature: 1,
                value: 9.0
            }]
        );
    }

    #[test]
    fn schema_and_parse_errors() {
        assert!(matches!(
            parse_events(r#"{"id":"a","label":0,"events":[[1.0,3,2.0]]}"#, 1, 3),
            Err(TadaError::Schema(_))
        ));
        assert!(matches!(
            parse_events("{not json", 4, 3),
            Err(TadaError::Parse { line: 4, .. })
        ));
        assert!(matches!(
            parse_events(r#"{"id":"a","label":[0,1],"events":[[1.0,0,2.0]]}"#, 1, 3),
            Err(TadaError::Schema(_))
        ));
        assert!(matches!(
            parse_events(r#"{"id":"a","label":0,"events":[[1.0,0.5,2.0]]}"#, 2, 3),
            Err(TadaError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn manifest_field_names() {
        let m = DatasetManifest {
            d: 4,
            task: Task::Step,
            n_classes: 7,
        };
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(s, r#"{"D":4,"task":"step","n_classes":7}"#);
    }
}
