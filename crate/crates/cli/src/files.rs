//! Reading and writing the CSV / JSON artifacts.

use std::path::Path;

use anyhow::{bail, Context, Result};
use asag_core::backend::ClassProbs;
use asag_core::rasch::RaschObservation;
use asag_core::{Score, SCALE_SIZE};
use serde::{Deserialize, Serialize};

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// One line of the Rasch input table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RaschRecord {
    pub student: String,
    pub question: String,
    /// Empty when the row is only to be predicted.
    pub label: Option<u8>,
    pub p0: f64,
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
    pub p4: f64,
    pub word_count: u32,
}

impl RaschRecord {
    pub fn from_observation(o: &RaschObservation) -> Self {
        let p = o.probs.as_array();
        RaschRecord {
            student: o.student_id.clone(),
            question: o.question_id.clone(),
            label: o.label.map(Score::value),
            p0: p[0],
            p1: p[1],
            p2: p[2],
            p3: p[3],
            p4: p[4],
            word_count: o.word_count,
        }
    }

    pub fn to_observation(&self) -> Result<RaschObservation> {
        let raw: [f64; SCALE_SIZE] = [self.p0, self.p1, self.p2, self.p3, self.p4];
        let probs = ClassProbs::normalized(raw)
            .with_context(|| format!("probabilities for ({}, {})", self.student, self.question))?;
        let label = self.label.map(|l| Score::new(l as i64)).transpose()?;
        Ok(RaschObservation {
            student_id: self.student.clone(),
            question_id: self.question.clone(),
            label,
            probs,
            word_count: self.word_count,
        })
    }
}

pub fn read_rasch_csv(path: &Path) -> Result<Vec<RaschObservation>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, rec) in r.deserialize::<RaschRecord>().enumerate() {
        let rec = rec.with_context(|| format!("{} row {}", path.display(), i + 2))?;
        out.push(rec.to_observation()?);
    }
    if out.is_empty() {
        bail!("{} holds no observations", path.display());
    }
    Ok(out)
}

pub fn write_rasch_csv(path: &Path, obs: &[RaschObservation]) -> Result<()> {
    let rows: Vec<RaschRecord> = obs.iter().map(RaschRecord::from_observation).collect();
    write_csv(path, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rasch_csv_round_trip_with_missing_label() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("obs.csv");
        std::fs::write(
            &p,
            "student,question,label,p0,p1,p2,p3,p4,word_count\n\
             s1,q1,3,0.1,0.1,0.2,0.4,0.2,12\n\
             s2,q1,,0.2,0.2,0.2,0.2,0.2,4\n",
        )
        .unwrap();
        let obs = read_rasch_csv(&p).unwrap();
        assert_eq!(obs.len(), 2);
        assert_eq!(obs[0].label, Some(Score::new(3).unwrap()));
        assert_eq!(obs[1].label, None);
        let q = dir.path().join("back.csv");
        write_rasch_csv(&q, &obs).unwrap();
        assert_eq!(read_rasch_csv(&q).unwrap(), obs);
    }

    #[test]
    fn bad_label_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("obs.csv");
        std::fs::write(&p, "student,question,label,p0,p1,p2,p3,p4,word_count\ns,q,9,0.2,0.2,0.2,0.2,0.2,1\n").unwrap();
        assert!(read_rasch_csv(&p).is_err());
    }
}
