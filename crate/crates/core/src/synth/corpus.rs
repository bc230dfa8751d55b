use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FuturePair, QAPair, ScenarioLabel, UserProfile};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Profile(UserProfile),
    FuturePair(FuturePair),
    QaPair(QAPair),
    Label(ScenarioLabel),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub profiles: Vec<UserProfile>,
    pub future_pairs: Vec<FuturePair>,
    pub qa_pairs: Vec<QAPair>,
    pub labels: Vec<ScenarioLabel>,
}

impl Corpus {
    pub fn records(&self) -> impl Iterator<Item = Record> + '_ {
        self.profiles
            .iter()
            .cloned()
            .map(Record::Profile)
            .chain(self.future_pairs.iter().cloned().map(Record::FuturePair))
            .chain(self.qa_pairs.iter().cloned().map(Record::QaPair))
            .chain(self.labels.iter().cloned().map(Record::Label))
    }

    pub fn push(&mut self, r: Record) {
        match r {
            Record::Profile(p) => self.profiles.push(p),
            Record::FuturePair(p) => self.future_pairs.push(p),
            Record::QaPair(p) => self.qa_pairs.push(p),
            Record::Label(l) => self.labels.push(l),
        }
    }

    pub fn profile_index(&self) -> std::collections::HashMap<&str, usize> {
        self.profiles
            .iter()
            .enumerate()
            .map(|(i, p)| (p.user_id.as_str(), i))
            .collect()
    }

    /// Labels of one scenario in profile order; users without a label are
    /// skipped.
    pub fn scenario_labels(&self, scenario: &str) -> Vec<(usize, u8)> {
        let idx = self.profile_index();
        let mut out: Vec<(usize, u8)> = self
            .labels
            .iter()
            .filter(|l| l.scenario == scenario)
            .filter_map(|l| idx.get(l.user_id.as_str()).map(|&i| (i, l.y)))
            .collect();
        out.sort_by_key(|&(i, _)| i);
        out
    }
}

/// Serializes one record as a JSON object line carrying the schema version.
pub fn record_line(r: &Record) -> Result<String> {
    let mut v = serde_json::to_value(r)?;
    if let serde_json::Value::Object(map) = &mut v {
        map.insert("schema_version".into(), SCHEMA_VERSION.into());
    }
    Ok(serde_json::to_string(&v)?)
}

pub fn parse_record(line: &str) -> std::result::Result<Record, String> {
    let mut v: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let obj = v.as_object_mut().ok_or("record is not a JSON object")?;
    match obj.remove("schema_version").and_then(|s| s.as_u64()) {
        Some(n) if n == SCHEMA_VERSION as u64 => {}
        Some(n) => return Err(format!("unsupported schema_version {n}")),
        None => return Err("missing schema_version".into()),
    }
    serde_json::from_value(v).map_err(|e| e.to_string())
}

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in corpus.records() {
        w.write_all(record_line(&r)?.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let file = File::open(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let mut corpus = Corpus::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_record(&line).map_err(|msg| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        })?;
        corpus.push(rec);
    }
    Ok(corpus)
}
