use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::encoder::Vocab;
use crate::episodes::dataset::{load_jsonl, load_split_jsonl, write_jsonl, LabeledDataset};
use crate::episodes::sampling::TaskRegistry;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    MetaTrain,
    MetaTest,
}

impl Role {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "meta-train" => Ok(Role::MetaTrain),
            "meta-test" => Ok(Role::MetaTest),
            _ => Err(Error::Config(format!("unknown role {s:?} (meta-train, meta-test)"))),
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::MetaTrain => "meta-train",
            Role::MetaTest => "meta-test",
        })
    }
}

/// Datasets tagged with their meta-learning role, plus the shared vocabulary.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub vocab: Vocab,
    pub tasks: Vec<(LabeledDataset, Role)>,
}

impl Benchmark {
    pub fn with_role(&self, role: Role) -> Vec<&LabeledDataset> {
        self.tasks.iter().filter(|t| t.1 == role).map(|t| &t.0).collect()
    }

    pub fn registry(&self, role: Role) -> Result<TaskRegistry<'_>> {
        TaskRegistry::new(self.with_role(role))
    }

    pub fn role_of(&self, task: &str) -> Option<Role> {
        self.tasks.iter().find(|t| t.0.name == task).map(|t| t.1)
    }

    pub fn task(&self, name: &str) -> Option<&LabeledDataset> {
        self.tasks.iter().find(|t| t.0.name == name).map(|t| &t.0)
    }

    /// All training-pool sequences, for encoder warmup.
    pub fn corpus(&self) -> Vec<Vec<u32>> {
        self.tasks
            .iter()
            .flat_map(|t| t.0.train.iter().map(|e| e.tokens.clone()))
            .collect()
    }

    /// Write vocabulary, per-split JSONL files and the registry manifest
    /// into `dir`. Returns the manifest path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.vocab.save(&dir.join("vocab.txt"))?;
        let mut manifest = String::from("# task registry: name role train val test\nvocab vocab.txt\n");
        for (d, role) in &self.tasks {
            let files = ["train", "val", "test"].map(|s| format!("{}.{s}.jsonl", d.name));
            write_jsonl(&dir.join(&files[0]), &d.train, &d.class_names, &self.vocab)?;
            write_jsonl(&dir.join(&files[1]), &d.val, &d.class_names, &self.vocab)?;
            write_jsonl(&dir.join(&files[2]), &d.test, &d.class_names, &self.vocab)?;
            manifest.push_str(&format!(
                "task {} {role} {} {} {}\n",
                d.name, files[0], files[1], files[2]
            ));
        }
        let path = dir.join("registry.txt");
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Load a registry manifest. Paths resolve relative to its directory.
    pub fn load(manifest: &Path, max_len: usize) -> Result<Self> {
        let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
        let base = manifest.parent().unwrap_or(Path::new("."));
        let perr = |line: usize, msg: String| Error::Parse {
            path: manifest.to_path_buf(),
            line,
            msg,
        };
        let mut vocab = None;
        let mut specs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.as_slice() {
                ["vocab", p] => vocab = Some(Vocab::load(&base.join(p))?),
                ["task", name, role, train, val, test] => {
                    let role = Role::parse(role).map_err(|e| perr(i + 1, e.to_string()))?;
                    specs.push((name.to_string(), role, [*train, *val, *test]));
                }
                _ => return Err(perr(i + 1, format!("unrecognised line {line:?}"))),
            }
        }
        let vocab = vocab.ok_or_else(|| perr(0, "missing `vocab` line".into()))?;
        let mut tasks = Vec::new();
        for (name, role, [train, val, test]) in specs {
            let mut d = load_jsonl(&base.join(train), &vocab, max_len)?;
            d.name = name;
            d.val = load_split_jsonl(&base.join(val), &vocab, max_len, &d.class_names)?;
            d.test = load_split_jsonl(&base.join(test), &vocab, max_len, &d.class_names)?;
            d.validate()?;
            tasks.push((d, role));
        }
        if tasks.is_empty() {
            return Err(perr(0, "no tasks".into()));
        }
        Ok(Self { vocab, tasks })
    }
}
