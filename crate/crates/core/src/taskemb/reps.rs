use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::encoder::{BaseModel, Vocab, UNK};
use crate::episodes::Episode;
use crate::error::{Error, Result};

fn mean_of(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len() as f64;
    let mut out = vec![0.0; rows[0].len()];
    for r in rows {
        for (o, x) in out.iter_mut().zip(r) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|x| *x /= n);
    out
}

/// Mean eval-mode embedding of the support sequences.
pub fn mean_input_task_rep(model: &BaseModel, episode: &Episode) -> Result<Vec<f64>> {
    if episode.support.is_empty() {
        return Err(Error::Input("empty support set".into()));
    }
    let embs = episode
        .support
        .iter()
        .map(|e| model.encode(&e.tokens))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_of(&embs))
}

/// Mean input embedding concatenated with the mean embedding of the class
/// names read as text.
pub fn input_label_task_rep(model: &BaseModel, vocab: &Vocab, episode: &Episode) -> Result<Vec<f64>> {
    let mut rep = mean_input_task_rep(model, episode)?;
    let mut labels = Vec::with_capacity(episode.class_names.len());
    for name in &episode.class_names {
        let tokens = vocab.encode(name, model.config.max_seq_len);
        if tokens[1..].iter().all(|&t| t == UNK) {
            return Err(Error::Input(format!("label text {name:?} has no in-vocabulary tokens")));
        }
        labels.push(model.encode(&tokens)?);
    }
    rep.extend(mean_of(&labels));
    Ok(rep)
}

/// One episode's per-layer task embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub episode_id: usize,
    pub task_name: String,
    pub layers: Vec<Vec<f64>>,
}

/// Write `episode_id,task_name,layer,dim_0..` with 12 significant digits.
pub fn export_embeddings(records: &[EmbeddingRecord], path: &Path) -> Result<()> {
    let dim = records
        .iter()
        .flat_map(|r| r.layers.first())
        .map(Vec::len)
        .next()
        .unwrap_or(0);
    let mut out = String::from("episode_id,task_name,layer");
    for i in 0..dim {
        write!(out, ",dim_{i}").unwrap();
    }
    out.push('\n');
    for r in records {
        if r.task_name.contains([',', '\n', '"']) {
            return Err(Error::Input(format!("task name {:?} cannot be written to CSV", r.task_name)));
        }
        for (l, e) in r.layers.iter().enumerate() {
            if e.len() != dim {
                return Err(Error::Input(format!("embedding width {} != {dim}", e.len())));
            }
            write!(out, "{},{},{l}", r.episode_id, r.task_name).unwrap();
            for x in e {
                write!(out, ",{x:.11e}").unwrap();
            }
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Inverse of [`export_embeddings`].
pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| perr(1, "empty file".into()))?;
    if !header.starts_with("episode_id,task_name,layer") {
        return Err(perr(1, "unexpected header".into()));
    }
    let mut out: Vec<EmbeddingRecord> = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() < 3 {
            return Err(perr(i + 2, "too few columns".into()));
        }
        let id: usize = f[0].parse().map_err(|e| perr(i + 2, format!("episode_id: {e}")))?;
        let vals = f[3..]
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| perr(i + 2, e.to_string()))?;
        match out.last_mut() {
            Some(r) if r.episode_id == id && r.task_name == f[1] => r.layers.push(vals),
            _ => out.push(EmbeddingRecord {
                episode_id: id,
                task_name: f[1].to_string(),
                layers: vec![vals],
            }),
        }
    }
    Ok(out)
}
