//! Synthetic text-classification tasks with disjoint vocabulary regions.
//!
//! Every task owns a block of input tokens. Labels are a pure function of
//! the token sequence:
//!
//! * keyword presence: does the trigger token occur?
//! * keyword parity: is the trigger count even or odd?
//! * dominant topic: which of `C` token groups occurs most often?
//! * lexicon sentiment: more positive or more negative lexicon tokens?

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::encoder::Vocab;
use crate::episodes::dataset::{Example, LabeledDataset};
use crate::error::{Error, Result};
use crate::tensor::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    KeywordPresence,
    KeywordParity,
    DominantTopic { classes: usize },
    Sentiment,
}

impl Family {
    pub fn num_classes(&self) -> usize {
        match self {
            Family::DominantTopic { classes } => *classes,
            _ => 2,
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        match self {
            Family::KeywordPresence => vec!["absent".into(), "present".into()],
            Family::KeywordParity => vec!["even".into(), "odd".into()],
            Family::Sentiment => vec!["negative".into(), "positive".into()],
            Family::DominantTopic { classes } => (0..*classes)
                .map(|c| format!("topic_{}", (b'a' + c as u8) as char))
                .collect(),
        }
    }

    /// Region tokens needed: class-indicative groups plus at least 4 fillers.
    fn min_region(&self) -> usize {
        match self {
            Family::KeywordPresence | Family::KeywordParity => 5,
            Family::DominantTopic { classes } => 3 * classes + 4,
            Family::Sentiment => 12 + 4,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "keyword-presence" => Ok(Family::KeywordPresence),
            "keyword-parity" => Ok(Family::KeywordParity),
            "sentiment" => Ok(Family::Sentiment),
            _ => {
                if let Some(c) = s.strip_prefix("topic-") {
                    let classes: usize = c
                        .parse()
                        .map_err(|_| Error::Config(format!("bad topic class count in {s:?}")))?;
                    if classes < 2 || classes > 26 {
                        return Err(Error::Config(format!("topic classes {classes} outside 2..=26")));
                    }
                    Ok(Family::DominantTopic { classes })
                } else {
                    Err(Error::Config(format!(
                        "unknown family {s:?} (keyword-presence, keyword-parity, topic-<C>, sentiment)"
                    )))
                }
            }
        }
    }

    pub fn tag(&self) -> String {
        match self {
            Family::KeywordPresence => "keyword-presence".into(),
            Family::KeywordParity => "keyword-parity".into(),
            Family::Sentiment => "sentiment".into(),
            Family::DominantTopic { classes } => format!("topic-{classes}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteSpec {
    /// `(task name, family)` pairs; names must be unique.
    pub tasks: Vec<(String, Family)>,
    pub region_size: usize,
    /// Upper bound on vocabulary size, if any.
    pub vocab_limit: Option<usize>,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_size: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for SuiteSpec {
    fn default() -> Self {
        Self {
            tasks: vec![
                ("presence".into(), Family::KeywordPresence),
                ("parity".into(), Family::KeywordParity),
                ("topic3".into(), Family::DominantTopic { classes: 3 }),
                ("topic5".into(), Family::DominantTopic { classes: 5 }),
                ("topic7".into(), Family::DominantTopic { classes: 7 }),
                ("sentiment".into(), Family::Sentiment),
            ],
            region_size: 32,
            vocab_limit: None,
            train_per_class: 128,
            val_per_class: 32,
            test_size: 240,
            min_len: 8,
            max_len: 16,
        }
    }
}

/// Token layout of one generated task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskLayout {
    pub task: String,
    pub family: Family,
    /// Class-indicative token groups. Presence/parity: `[trigger]`;
    /// topic: one group per class; sentiment: `[negative, positive]`.
    pub groups: Vec<Vec<u32>>,
    pub fillers: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct SyntheticSuite {
    pub vocab: Vocab,
    pub datasets: Vec<LabeledDataset>,
    pub layouts: Vec<TaskLayout>,
}

fn count_in(tokens: &[u32], group: &[u32]) -> usize {
    tokens.iter().filter(|t| group.contains(t)).count()
}

impl TaskLayout {
    /// Label of a token sequence, or `None` when the sequence is ambiguous
    /// for this family (ties).
    pub fn label_of(&self, tokens: &[u32]) -> Option<usize> {
        match self.family {
            Family::KeywordPresence => Some(usize::from(count_in(tokens, &self.groups[0]) > 0)),
            Family::KeywordParity => Some(count_in(tokens, &self.groups[0]) % 2),
            Family::Sentiment => {
                let neg = count_in(tokens, &self.groups[0]);
                let pos = count_in(tokens, &self.groups[1]);
                (neg != pos).then_some(usize::from(pos > neg))
            }
            Family::DominantTopic { .. } => {
                let counts: Vec<usize> = self.groups.iter().map(|g| count_in(tokens, g)).collect();
                let max = *counts.iter().max()?;
                let winners: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] == max).collect();
                (winners.len() == 1 && max > 0).then(|| winners[0])
            }
        }
    }

    /// Draw a token sequence (without [CLS]) with the requested label.
    fn generate(&self, label: usize, len: usize, rng: &mut Rng) -> Vec<u32> {
        let mut counts: Vec<(usize, usize)> = Vec::new(); // (group, count)
        match self.family {
            Family::KeywordPresence => {
                if label == 1 {
                    counts.push((0, 1 + rng.below(2)));
                }
            }
            Family::KeywordParity => {
                let choices: &[usize] = if label == 0 { &[0, 2, 4] } else { &[1, 3] };
                counts.push((0, choices[rng.below(choices.len())]));
            }
            Family::Sentiment => {
                let major = 2 + rng.below(3);
                let minor = rng.below(major.min(3));
                counts.push((label, major));
                counts.push((1 - label, minor));
            }
            Family::DominantTopic { classes } => {
                let major = 3 + rng.below(3);
                counts.push((label, major));
                let mut budget = len.saturating_sub(major + 1);
                for c in (0..classes).filter(|&c| c != label) {
                    let n = rng.below(major).min(budget);
                    budget -= n;
                    counts.push((c, n));
                }
            }
        }
        let placed: usize = counts.iter().map(|c| c.1).sum();
        let len = len.max(placed);
        let mut seq: Vec<u32> = Vec::with_capacity(len);
        for &(group, n) in &counts {
            let g = &self.groups[group];
            for _ in 0..n {
                seq.push(g[rng.below(g.len())]);
            }
        }
        while seq.len() < len {
            seq.push(self.fillers[rng.below(self.fillers.len())]);
        }
        rng.shuffle(&mut seq);
        seq
    }
}

fn layout_for(task: &str, family: Family, region: &[u32]) -> TaskLayout {
    let (groups, rest): (Vec<Vec<u32>>, &[u32]) = match family {
        Family::KeywordPresence | Family::KeywordParity => (vec![vec![region[0]]], &region[1..]),
        Family::Sentiment => (vec![region[0..6].to_vec(), region[6..12].to_vec()], &region[12..]),
        Family::DominantTopic { classes } => (
            (0..classes).map(|c| region[3 * c..3 * c + 3].to_vec()).collect(),
            &region[3 * classes..],
        ),
    };
    TaskLayout {
        task: task.to_string(),
        family,
        groups,
        fillers: rest.to_vec(),
    }
}

/// Generate every task of `spec`. Splits are class balanced and no token
/// sequence appears twice within a task.
pub fn make_synthetic_suite(spec: &SuiteSpec, rng: &mut Rng) -> Result<SyntheticSuite> {
    if spec.tasks.is_empty() {
        return Err(Error::Config("synthetic suite needs at least one task".into()));
    }
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::Config(format!(
            "bad length range {}..={}",
            spec.min_len, spec.max_len
        )));
    }
    let mut names = HashSet::new();
    for (name, family) in &spec.tasks {
        if !names.insert(name) {
            return Err(Error::Config(format!("duplicate task name {name}")));
        }
        if spec.region_size < family.min_region() {
            return Err(Error::Config(format!(
                "region_size {} too small for {} (needs {})",
                spec.region_size,
                family.tag(),
                family.min_region()
            )));
        }
        if let Family::DominantTopic { classes } = family {
            if spec.min_len < 6 || *classes < 2 {
                return Err(Error::Config("topic tasks need min_len >= 6 and >= 2 classes".into()));
            }
        }
    }

    let mut vocab = Vocab::new();
    for (_, family) in &spec.tasks {
        for c in family.class_names() {
            vocab.push(&c);
        }
    }
    let needed = vocab.len() + spec.tasks.len() * spec.region_size;
    if let Some(limit) = spec.vocab_limit {
        if needed > limit {
            return Err(Error::Config(format!(
                "vocabulary of {limit} too small: {} tasks x {} region tokens + {} reserved/label tokens = {needed}",
                spec.tasks.len(),
                spec.region_size,
                vocab.len()
            )));
        }
    }

    let mut layouts = Vec::new();
    let mut datasets = Vec::new();
    for (ti, (name, family)) in spec.tasks.iter().enumerate() {
        let region: Vec<u32> = (0..spec.region_size)
            .map(|i| vocab.push(&format!("{name}_w{i}")))
            .collect();
        let layout = layout_for(name, *family, &region);
        let mut task_rng = rng.child(ti as u64);
        let mut seen: HashSet<Vec<u32>> = HashSet::new();
        let classes = family.num_classes();
        let mut draw = |label: usize, rng: &mut Rng| -> Result<Example> {
            for _ in 0..1000 {
                let len = rng.range_inclusive(spec.min_len, spec.max_len);
                let body = layout.generate(label, len, rng);
                debug_assert_eq!(layout.label_of(&body), Some(label));
                let mut tokens = Vec::with_capacity(body.len() + 1);
                tokens.push(crate::encoder::CLS);
                tokens.extend(body);
                if seen.insert(tokens.clone()) {
                    return Ok(Example { tokens, label });
                }
            }
            Err(Error::Config(format!(
                "{name}: could not draw enough distinct sequences; widen region or lengths"
            )))
        };
        let mut pool = |per_class: usize, total: Option<usize>, rng: &mut Rng| -> Result<Vec<Example>> {
            let n = total.unwrap_or(per_class * classes);
            (0..n).map(|i| draw(i % classes, rng)).collect()
        };
        let train = pool(spec.train_per_class, None, &mut task_rng)?;
        let val = pool(spec.val_per_class, None, &mut task_rng)?;
        let test = pool(0, Some(spec.test_size), &mut task_rng)?;
        datasets.push(LabeledDataset {
            name: name.clone(),
            class_names: family.class_names(),
            train,
            val,
            test,
        });
        layouts.push(layout);
    }
    Ok(SyntheticSuite {
        vocab,
        datasets,
        layouts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn suite() -> SyntheticSuite {
        make_synthetic_suite(&SuiteSpec::default(), &mut Rng::new(11)).unwrap()
    }

    #[test]
    fn sizes_meet_minimums() {
        let s = suite();
        for d in &s.datasets {
            assert!(d.train.len() >= 64 * d.num_classes(), "{}", d.name);
            assert!(d.test.len() >= 200);
            d.validate().unwrap();
        }
    }

    #[test]
    fn presence_trigger_means_label_one() {
        let s = suite();
        let (layout, data) = (&s.layouts[0], &s.datasets[0]);
        let trigger = layout.groups[0][0];
        for e in data.train.iter().chain(&data.test) {
            assert_eq!(e.label, usize::from(e.tokens.contains(&trigger)));
        }
    }

    #[test]
    fn two_triggers_is_even() {
        let s = suite();
        let layout = &s.layouts[1];
        let t = layout.groups[0][0];
        let f = layout.fillers[0];
        assert_eq!(layout.label_of(&[f, t, f, t]), Some(0));
    }

    #[test]
    fn vocab_too_small() {
        let spec = SuiteSpec {
            vocab_limit: Some(50),
            ..SuiteSpec::default()
        };
        assert!(make_synthetic_suite(&spec, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn family_parse_round_trip() {
        for f in [
            Family::KeywordPresence,
            Family::KeywordParity,
            Family::Sentiment,
            Family::DominantTopic { classes: 5 },
        ] {
            assert_eq!(Family::parse(&f.tag()).unwrap(), f);
        }
        assert!(Family::parse("nope").is_err());
    }
}
