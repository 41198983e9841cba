//! Run summary: collects the plot-ready tables of a run directory into `summary.json`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Stage;
use crate::manifest::{ArtifactWriter, Manifest};
use crate::pipeline::stage_outputs;
use crate::PipelineError;

pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub case: String,
    pub metric: String,
    pub region: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub rows: usize,
    pub first_total: f64,
    pub last_total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub stages: Vec<String>,
    /// `stage/file` to SHA-256.
    pub artifacts: BTreeMap<String, String>,
    pub metrics: Vec<MetricEntry>,
    pub loss_seg: Option<LossSummary>,
    pub loss_deform: Option<LossSummary>,
    pub quality: Option<serde_json::Value>,
    /// Report files that are absent, with the stage that would produce them.
    pub notes: Vec<String>,
}

fn read_csv(path: &Path) -> Result<Vec<Vec<String>>, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
    Ok(text.lines().skip(1).filter(|l| !l.is_empty()).map(|l| l.split(',').map(str::to_string).collect()).collect())
}

fn parse_f64(s: &str, path: &Path) -> Result<f64, PipelineError> {
    s.parse().map_err(|_| PipelineError::Io(format!("{}: bad number {s:?}", path.display())))
}

/// `total` is the second column of both loss tables.
fn loss_summary(path: &Path) -> Result<Option<LossSummary>, PipelineError> {
    if !path.is_file() {
        return Ok(None);
    }
    let rows = read_csv(path)?;
    let total = |r: &Vec<String>| parse_f64(r.get(1).map_or("", String::as_str), path);
    match (rows.first(), rows.last()) {
        (Some(a), Some(b)) => Ok(Some(LossSummary { rows: rows.len(), first_total: total(a)?, last_total: total(b)? })),
        _ => Ok(Some(LossSummary { rows: 0, first_total: f64::NAN, last_total: f64::NAN })),
    }
}

/// Builds and writes `summary.json`. Fails, naming the files, when a stage in
/// the manifest is missing any of its outputs.
pub fn emit_reports(dir: &Path) -> Result<Summary, PipelineError> {
    let manifest = Manifest::load(dir)?
        .ok_or_else(|| PipelineError::MissingOutputs(vec![crate::manifest::MANIFEST_FILE.to_string()]))?;
    let missing: Vec<String> = manifest
        .stages
        .values()
        .flat_map(|r| r.outputs.keys())
        .filter(|f| !dir.join(f).is_file())
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(PipelineError::MissingOutputs(missing));
    }
    let mut notes = Vec::new();
    for (file, stage) in [
        ("metrics.csv", Stage::Evaluate),
        ("quality.json", Stage::Evaluate),
        ("loss_seg.csv", Stage::Train),
        ("loss_deform.csv", Stage::Deform),
    ] {
        debug_assert!(stage_outputs(stage).contains(&file));
        if !dir.join(file).is_file() {
            notes.push(format!("{file} absent: {stage} stage not run"));
        }
    }
    let metrics_path = dir.join("metrics.csv");
    let mut metrics = Vec::new();
    if metrics_path.is_file() {
        for r in read_csv(&metrics_path)? {
            if r.len() != 4 {
                return Err(PipelineError::Io(format!("{}: malformed row {r:?}", metrics_path.display())));
            }
            metrics.push(MetricEntry {
                case: r[0].clone(),
                metric: r[1].clone(),
                region: r[2].clone(),
                value: parse_f64(&r[3], &metrics_path)?,
            });
        }
    }
    let quality_path = dir.join("quality.json");
    let quality = if quality_path.is_file() {
        let text = std::fs::read_to_string(&quality_path).map_err(|e| PipelineError::Io(e.to_string()))?;
        Some(serde_json::from_str(&text).map_err(|e| PipelineError::Io(format!("quality.json: {e}")))?)
    } else {
        None
    };
    let summary = Summary {
        seed: manifest.seed,
        stages: Stage::ALL.iter().filter(|s| manifest.stages.contains_key(s.name())).map(|s| s.to_string()).collect(),
        artifacts: manifest.artifact_hashes(),
        metrics,
        loss_seg: loss_summary(&dir.join("loss_seg.csv"))?,
        loss_deform: loss_summary(&dir.join("loss_deform.csv"))?,
        quality,
        notes,
    };
    let mut text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    text.push('\n');
    let mut w = ArtifactWriter::new(dir);
    w.write(SUMMARY_FILE, text.as_bytes())?;
    w.commit()?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::{sha256_hex, StageRecord};

    #[test]
    fn reports_need_a_manifest() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(emit_reports(dir.path()), Err(PipelineError::MissingOutputs(f)) if f == ["manifest.json"]));
    }

    #[test]
    fn missing_outputs_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let rec = StageRecord {
            outputs: BTreeMap::from([("loss_deform.csv".to_string(), "00".to_string())]),
            ..StageRecord::default()
        };
        let m = Manifest { stages: BTreeMap::from([("deform".to_string(), rec)]), ..Manifest::default() };
        m.save(dir.path()).unwrap();
        match emit_reports(dir.path()) {
            Err(PipelineError::MissingOutputs(f)) => assert_eq!(f, ["loss_deform.csv"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn tables_are_summarized() {
        let dir = tempfile::tempdir().unwrap();
        let csv = "epoch,total,misalign,normal,edge,laplacian\n0,2,1,0,0,0\n1,1.5,1,0,0,0\n2,1,1,0,0,0\n";
        std::fs::write(dir.path().join("loss_deform.csv"), csv).unwrap();
        let metrics = "case,metric,region,value\nc,dice,all,9.5e-1\nc,asd_init,all,1.0e0\n";
        std::fs::write(dir.path().join("metrics.csv"), metrics).unwrap();
        let rec = |f: &str, body: &str| StageRecord {
            outputs: BTreeMap::from([(f.to_string(), sha256_hex(body.as_bytes()))]),
            ..StageRecord::default()
        };
        let m = Manifest {
            seed: 3,
            stages: BTreeMap::from([
                ("deform".to_string(), rec("loss_deform.csv", csv)),
                ("evaluate".to_string(), rec("metrics.csv", metrics)),
            ]),
            ..Manifest::default()
        };
        m.save(dir.path()).unwrap();
        let s = emit_reports(dir.path()).unwrap();
        assert_eq!(s.stages, ["deform", "evaluate"]);
        assert_eq!(s.loss_deform, Some(LossSummary { rows: 3, first_total: 2.0, last_total: 1.0 }));
        assert_eq!(s.metrics.len(), 2);
        assert_eq!(s.metrics[0].value, 0.95);
        assert!(s.loss_seg.is_none());
        assert!(s.notes.iter().any(|n| n.starts_with("loss_seg.csv absent")));
        assert!(dir.path().join(SUMMARY_FILE).is_file());
    }
}
