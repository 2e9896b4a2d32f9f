//! Offline export of a study: annotation records, the manual confusion
//! matrix, and prediction files ready for a paired significance test.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use mcfuse::evalkit::{self, evaluate, read_predictions, AccuracyReport};
use mcfuse::Class;

use crate::error::{Rejection, StudyError};
use crate::study::{AnnotationRecord, Study};

pub fn write_records(records: &[AnnotationRecord], mut w: impl Write) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_records(r: impl BufRead) -> Result<Vec<AnnotationRecord>, StudyError> {
    r.lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|line| {
            let line = line.map_err(|e| StudyError::io("<export>", e))?;
            serde_json::from_str(&line).map_err(|e| StudyError::Corrupt(e.to_string()))
        })
        .collect()
}

/// Files written by [`export_study`].
pub const RECORDS_FILE: &str = "annotations.ndjson";
pub const CONFUSION_FILE: &str = "manual_confusion.csv";
pub const MANUAL_PREDICTIONS_FILE: &str = "manual_predictions.csv";
pub const MODEL_PREDICTIONS_FILE: &str = "model_predictions.csv";
pub const PAIRED_FILE: &str = "paired.csv";

fn write_predictions(rows: &[(u64, Class, Class)], path: &Path) -> Result<(), StudyError> {
    let f = std::fs::File::create(path).map_err(|e| StudyError::io(path, e))?;
    evalkit::write_predictions(rows, f).map_err(|e| StudyError::io(path, e))
}

fn read_model_predictions(path: &Path) -> Result<HashMap<u64, Class>, StudyError> {
    let file = std::fs::File::open(path).map_err(|e| StudyError::io(path, e))?;
    Ok(read_predictions(file)?
        .into_iter()
        .map(|(id, _, predicted)| (id, predicted))
        .collect())
}

/// Writes the export bundle into `out_dir` and returns the manual report.
pub fn export_study(
    study: &Study,
    out_dir: &Path,
    model_predictions: Option<&Path>,
) -> Result<AccuracyReport, StudyError> {
    let records = study.annotations();
    if records.is_empty() {
        return Err(Rejection::EmptyStudy.into());
    }
    std::fs::create_dir_all(out_dir).map_err(|e| StudyError::io(out_dir, e))?;

    let path = out_dir.join(RECORDS_FILE);
    let file = std::fs::File::create(&path).map_err(|e| StudyError::io(&path, e))?;
    write_records(&records, std::io::BufWriter::new(file)).map_err(|e| StudyError::io(&path, e))?;

    let mut manual: Vec<(u64, Class, Class)> = records
        .iter()
        .map(|r| {
            let truth = study.image(r.image_id).expect("annotated images are in the pool").truth;
            (r.image_id, truth, r.label)
        })
        .collect();
    manual.sort_by_key(|r| r.0);
    let report = evaluate(manual.iter().map(|&(_, t, p)| (t, p)))?;
    let path = out_dir.join(CONFUSION_FILE);
    let file = std::fs::File::create(&path).map_err(|e| StudyError::io(&path, e))?;
    report.write_confusion_csv(file).map_err(|e| StudyError::io(&path, e))?;
    write_predictions(&manual, &out_dir.join(MANUAL_PREDICTIONS_FILE))?;

    if let Some(model_path) = model_predictions {
        let model = read_model_predictions(model_path)?;
        let mut joined = Vec::with_capacity(manual.len());
        let mut paired = String::from("image_id,truth,manual,model\n");
        for &(id, truth, label) in &manual {
            let m = *model.get(&id).ok_or_else(|| {
                StudyError::Config(format!(
                    "model predictions in {} lack annotated image {id}",
                    model_path.display()
                ))
            })?;
            joined.push((id, truth, m));
            paired.push_str(&format!("{id},{truth},{label},{m}\n"));
        }
        write_predictions(&joined, &out_dir.join(MODEL_PREDICTIONS_FILE))?;
        let path = out_dir.join(PAIRED_FILE);
        std::fs::write(&path, paired).map_err(|e| StudyError::io(&path, e))?;
    }
    Ok(report)
}
