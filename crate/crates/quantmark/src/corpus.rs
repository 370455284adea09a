//! Deterministic synthetic corpora.
//!
//! Two disjoint template families generate English-like printable-ASCII
//! sentences: the primary family backs the train / heldout / erase-ind
//! splits, a second family backs the erase-ood split. Texts are globally
//! deduplicated, so all splits are disjoint. Trigger samples embed one of
//! the configured trigger strings as a prefix and are tagged.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::config::CorpusConfig;
use crate::error::{Error, Result};
use crate::rng::{streams, DetRng};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct CorpusSample {
    pub text: String,
    pub is_trigger: bool,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<CorpusSample>,
    pub heldout: Vec<CorpusSample>,
    pub erase_ind: Vec<CorpusSample>,
    pub erase_ood: Vec<CorpusSample>,
    pub seed: u64,
}

impl Corpus {
    pub fn texts(samples: &[CorpusSample]) -> Vec<String> {
        samples.iter().map(|s| s.text.clone()).collect()
    }
}

const ADJECTIVES: &[&str] = &[
    "small", "bright", "quiet", "old", "heavy", "swift", "pale", "warm", "sharp", "plain",
    "round", "calm",
];
const NOUNS: &[&str] = &[
    "river", "lantern", "engine", "garden", "sparrow", "ladder", "harbor", "meadow", "copper",
    "signal", "basket", "window",
];
const VERBS: &[&str] = &[
    "crosses", "follows", "carries", "watches", "passes", "circles", "touches", "guards",
    "reaches", "holds",
];
const OOD_NAMES: &[&str] = &[
    "forecast", "bulletin", "report", "notice", "update", "advisory", "summary", "memo",
];
const OOD_EVENTS: &[&str] = &[
    "light rain", "clear skies", "strong wind", "dense fog", "early frost", "high tide",
    "low clouds", "dry heat", "soft snow", "warm drizzle",
];
const OOD_TIMES: &[&str] = &[
    "before dawn", "at noon", "after dusk", "by midnight", "this evening", "next morning",
    "all week", "in an hour",
];

// Sentences stay short (roughly 25-35 characters) so that evaluation
// prompts cover almost the whole sentence and the positions past the prompt
// carry little pre-trained structure.
fn primary_sentence(rng: &mut DetRng) -> String {
    format!(
        "the {} {} {} the {}.",
        ADJECTIVES[rng.below(ADJECTIVES.len())],
        NOUNS[rng.below(NOUNS.len())],
        VERBS[rng.below(VERBS.len())],
        NOUNS[rng.below(NOUNS.len())],
    )
}

fn ood_sentence(rng: &mut DetRng) -> String {
    format!(
        "{} {}: expect {} {}.",
        OOD_NAMES[rng.below(OOD_NAMES.len())],
        rng.below(90),
        OOD_EVENTS[rng.below(OOD_EVENTS.len())],
        OOD_TIMES[rng.below(OOD_TIMES.len())],
    )
}

const PRIMARY_CAPACITY: usize =
    ADJECTIVES.len() * NOUNS.len() * VERBS.len() * NOUNS.len();
const OOD_CAPACITY: usize = OOD_NAMES.len() * 90 * OOD_EVENTS.len() * OOD_TIMES.len();

fn draw_unique(
    rng: &mut DetRng,
    seen: &mut HashSet<String>,
    count: usize,
    family: &str,
    capacity: usize,
    gen: impl Fn(&mut DetRng) -> String,
) -> Result<Vec<String>> {
    // `seen` is shared across splits, so the capacity check covers the sum
    // of everything drawn from this family so far.
    if seen.len() + count > capacity / 2 {
        return Err(Error::Corpus(format!(
            "requested {count} unique {family} sentences but the template family holds only \
             {capacity} (half of which is the practical dedup budget)"
        )));
    }
    let mut out = Vec::with_capacity(count);
    let budget = 200 * count.max(1);
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > budget {
            return Err(Error::Corpus(format!(
                "requested {count} unique {family} sentences but the template family is exhausted"
            )));
        }
        let s = gen(rng);
        if seen.insert(s.clone()) {
            out.push(s);
        }
    }
    Ok(out)
}

/// Deterministically generate all four splits from `params` + `seed`.
/// Trigger tagging applies to the train and heldout splits.
pub fn build_corpus(params: &CorpusConfig, trigger_texts: &[String], seed: u64) -> Result<Corpus> {
    if !(0.0..=1.0).contains(&params.trigger_fraction) {
        return Err(Error::Corpus(format!(
            "trigger_fraction must lie in [0, 1], got {}",
            params.trigger_fraction
        )));
    }
    if params.trigger_fraction > 0.0 && trigger_texts.is_empty() {
        return Err(Error::Corpus(
            "trigger_fraction > 0 requires trigger texts".into(),
        ));
    }
    let mut rng = DetRng::new(seed, streams::CORPUS);
    let mut seen = HashSet::new();

    let train = draw_unique(
        &mut rng,
        &mut seen,
        params.train_size,
        "primary",
        PRIMARY_CAPACITY,
        primary_sentence,
    )?;
    let heldout = draw_unique(
        &mut rng,
        &mut seen,
        params.heldout_size,
        "primary",
        PRIMARY_CAPACITY,
        primary_sentence,
    )?;
    let erase_ind = draw_unique(
        &mut rng,
        &mut seen,
        params.erase_ind_size,
        "primary",
        PRIMARY_CAPACITY,
        primary_sentence,
    )?;
    let erase_ood = draw_unique(
        &mut rng,
        &mut seen,
        params.erase_ood_size,
        "ood",
        OOD_CAPACITY,
        ood_sentence,
    )?;

    let tag = |texts: Vec<String>, rng: &mut DetRng| -> Vec<CorpusSample> {
        let n = texts.len();
        let k = (params.trigger_fraction * n as f32).round() as usize;
        let mut is_trigger = vec![false; n];
        for idx in rng.sample_indices(n, k.min(n)) {
            is_trigger[idx] = true;
        }
        let mut next_trigger = 0usize;
        texts
            .into_iter()
            .zip(is_trigger)
            .map(|(text, trig)| {
                if trig {
                    let t = &trigger_texts[next_trigger % trigger_texts.len()];
                    next_trigger += 1;
                    CorpusSample {
                        text: format!("{t} {text}"),
                        is_trigger: true,
                    }
                } else {
                    CorpusSample {
                        text,
                        is_trigger: false,
                    }
                }
            })
            .collect()
    };

    let train = tag(train, &mut rng);
    let heldout = tag(heldout, &mut rng);
    let plain = |texts: Vec<String>| -> Vec<CorpusSample> {
        texts
            .into_iter()
            .map(|text| CorpusSample {
                text,
                is_trigger: false,
            })
            .collect()
    };

    Ok(Corpus {
        train,
        heldout,
        erase_ind: plain(erase_ind),
        erase_ood: plain(erase_ood),
        seed,
    })
}

/// One `{"text": ..., "is_trigger": ...}` object per line.
pub fn write_jsonl<W: Write>(mut w: W, samples: &[CorpusSample]) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<CorpusSample>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
