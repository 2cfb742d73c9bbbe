use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::Vocab;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    pub class_names: Vec<String>,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    text: String,
    label: String,
}

impl LabeledDataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn pool(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Size used for task weighting: the training pool.
    pub fn size(&self) -> usize {
        self.train.len()
    }

    pub fn class_counts(&self, split: Split) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for e in self.pool(split) {
            counts[e.label] += 1;
        }
        counts
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for n in &self.class_names {
            if !seen.insert(n) {
                return Err(Error::Input(format!("{}: duplicate class name {n}", self.name)));
            }
        }
        for split in [Split::Train, Split::Val, Split::Test] {
            if let Some(e) = self.pool(split).iter().find(|e| e.label >= self.num_classes()) {
                return Err(Error::Input(format!(
                    "{}: class id {} >= class count {}",
                    self.name,
                    e.label,
                    self.num_classes()
                )));
            }
        }
        let train: HashSet<&Vec<u32>> = self.train.iter().map(|e| &e.tokens).collect();
        if self.test.iter().any(|e| train.contains(&e.tokens)) {
            return Err(Error::Input(format!("{}: test pool overlaps train pool", self.name)));
        }
        Ok(())
    }
}

fn parse_records(path: &Path) -> Result<Vec<(usize, Record)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push((i + 1, rec));
    }
    if out.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: "no records".into(),
        });
    }
    Ok(out)
}

/// Read a JSONL file of `{"text": .., "label": ..}` objects into the train
/// pool. Labels get dense ids in first-occurrence order.
pub fn load_jsonl(path: &Path, vocab: &Vocab, max_len: usize) -> Result<LabeledDataset> {
    let records = parse_records(path)?;
    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut class_names = Vec::new();
    let mut train = Vec::with_capacity(records.len());
    for (_, r) in records {
        let next = ids.len();
        let label = *ids.entry(r.label.clone()).or_insert_with(|| {
            class_names.push(r.label.clone());
            next
        });
        train.push(Example {
            tokens: vocab.encode(&r.text, max_len),
            label,
        });
    }
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset")
        .split('.')
        .next()
        .unwrap_or("dataset")
        .to_string();
    Ok(LabeledDataset {
        name,
        class_names,
        train,
        val: Vec::new(),
        test: Vec::new(),
    })
}

/// Read a JSONL split whose labels must already be in `class_names`.
pub fn load_split_jsonl(
    path: &Path,
    vocab: &Vocab,
    max_len: usize,
    class_names: &[String],
) -> Result<Vec<Example>> {
    let records = parse_records(path)?;
    records
        .into_iter()
        .map(|(line, r)| {
            let label = class_names
                .iter()
                .position(|c| *c == r.label)
                .ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    msg: format!("label {:?} not among training labels", r.label),
                })?;
            Ok(Example {
                tokens: vocab.encode(&r.text, max_len),
                label,
            })
        })
        .collect()
}

pub fn write_jsonl(path: &Path, examples: &[Example], class_names: &[String], vocab: &Vocab) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for e in examples {
        let rec = Record {
            text: vocab.decode(&e.tokens),
            label: class_names[e.label].clone(),
        };
        let line = serde_json::to_string(&rec).expect("record serialises");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        let mut v = Vocab::new();
        for w in ["good", "bad", "film"] {
            v.push(w);
        }
        v
    }

    #[test]
    fn first_occurrence_label_ids() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sent.jsonl");
        fs::write(
            &p,
            "{\"text\": \"good film\", \"label\": \"pos\"}\n{\"text\": \"bad film\", \"label\": \"neg\"}\n",
        )
        .unwrap();
        let d = load_jsonl(&p, &vocab(), 16).unwrap();
        assert_eq!(d.class_names, vec!["pos", "neg"]);
        assert_eq!(d.train[0].label, 0);
        assert_eq!(d.train[1].label, 1);
        assert_eq!(d.name, "sent");
    }

    #[test]
    fn duplicates_kept() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let line = "{\"text\": \"good\", \"label\": \"a\"}\n";
        fs::write(&p, format!("{line}{line}")).unwrap();
        assert_eq!(load_jsonl(&p, &vocab(), 16).unwrap().train.len(), 2);
    }

    #[test]
    fn malformed_line_reports_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        fs::write(&p, "{\"text\": \"good\", \"label\": \"a\"}\n{\"text\": 3}\n").unwrap();
        let err = load_jsonl(&p, &vocab(), 16).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
    }

    #[test]
    fn empty_file_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        fs::write(&p, "").unwrap();
        assert!(load_jsonl(&p, &vocab(), 16).is_err());
    }

    #[test]
    fn unknown_split_label_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        fs::write(&p, "{\"text\": \"good\", \"label\": \"zzz\"}\n").unwrap();
        assert!(load_split_jsonl(&p, &vocab(), 16, &["a".into()]).is_err());
    }
}
