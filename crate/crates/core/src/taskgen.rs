//! Deterministic generators for the entity-location (1-hop, 2-hop) and
//! variable-tracking tasks, hard/soft haystack padding, the location-swap
//! robustness transform and JSON Lines dataset persistence.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::split_words;

/// Hard-distractor pool; each entry is inserted as one context line.
pub const FILLER_SENTENCES: [&str; 5] = [
    "The grass is green.",
    "The sky is blue.",
    "The sun is yellow.",
    "Here we go.",
    "There and back again.",
];

/// Held-out location names used by the location-swap test.
pub const LOCATION_SWAP: [(&str, &str); 6] = [
    ("office", "library"),
    ("garden", "garage"),
    ("kitchen", "cafe"),
    ("bathroom", "attic"),
    ("bedroom", "basement"),
    ("hallway", "gym"),
];

/// Extra words used only by the synthetic pretraining corpus.
pub const CORPUS_WORDS: [&str; 8] = ["red", "big", "small", "saw", "near", "a", "was", "quiet"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub entities: Vec<String>,
    pub verbs: Vec<String>,
    pub locations: Vec<String>,
    pub objects: Vec<String>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect();
        WorldConfig {
            entities: s(&["John", "Mary", "Sandra", "Daniel"]),
            verbs: s(&["moved", "went", "journeyed", "travelled", "went back"]),
            locations: s(&["bedroom", "bathroom", "kitchen", "garden", "office", "hallway"]),
            objects: s(&["football", "apple", "milk"]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Hop1,
    Hop2,
    Vt,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Hop1 => "hop1",
            Task::Hop2 => "hop2",
            Task::Vt => "vt",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hop1" => Ok(Task::Hop1),
            "hop2" => Ok(Task::Hop2),
            "vt" => Ok(Task::Vt),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PadKind {
    #[default]
    None,
    Hard,
    Soft,
}

impl std::str::FromStr for PadKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PadKind::None),
            "hard" => Ok(PadKind::Hard),
            "soft" => Ok(PadKind::Soft),
            other => Err(Error::Config(format!("unknown pad kind {other:?}"))),
        }
    }
}

/// A single answer word, or a set of variable names (listed in hop order).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Answer {
    One(String),
    Set(Vec<String>),
}

impl Answer {
    /// Answers in hop order.
    pub fn items(&self) -> Vec<&str> {
        match self {
            Answer::One(a) => vec![a.as_str()],
            Answer::Set(v) => v.iter().map(String::as_str).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meta {
    pub hops: usize,
    pub chains: usize,
    pub pad_kind: PadKind,
    pub target_tokens: usize,
    pub seed: u64,
}

/// One task instance. `supporting` lists context-line indices in hop order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub task: Task,
    pub query: String,
    pub context: Vec<String>,
    pub answer: Answer,
    pub supporting: Vec<usize>,
    pub meta: Meta,
}

impl Sample {
    /// Decoder prompt (without the leading BOS) for answer generation.
    pub fn answer_prompt(&self) -> String {
        match self.task {
            Task::Vt => "answer :".to_string(),
            Task::Hop1 | Task::Hop2 => {
                let subject = self
                    .query
                    .trim_end_matches('?')
                    .trim()
                    .strip_prefix("Where is ")
                    .unwrap_or("it")
                    .to_string();
                format!("{subject} is in the")
            }
        }
    }

    /// Token count of the context under the crate tokenizer (a blank line
    /// counts as one token).
    pub fn context_tokens(&self) -> usize {
        self.context.iter().map(|l| line_tokens(l)).sum()
    }
}

fn line_tokens(line: &str) -> usize {
    split_words(line).len().max(1)
}

fn sentence(entity: &str, verb: &str, location: &str) -> String {
    format!("{entity} {verb} to the {location}.")
}

/// Inserts `blanks` empty lines at random positions after the first line and
/// returns the new index of every original line.
fn insert_blanks(lines: Vec<String>, blanks: usize, rng: &mut impl Rng) -> (Vec<String>, Vec<usize>) {
    let n = lines.len();
    // gap g (1..=n) means "before original line g"; gap n appends.
    let mut gaps: Vec<usize> = (0..blanks).map(|_| rng.random_range(1..=n)).collect();
    gaps.sort_unstable();
    let mut out = Vec::with_capacity(n + blanks);
    let mut index = Vec::with_capacity(n);
    let mut gi = 0;
    for (i, line) in lines.into_iter().enumerate() {
        while gi < gaps.len() && gaps[gi] == i {
            out.push(String::new());
            gi += 1;
        }
        index.push(out.len());
        out.push(line);
    }
    out.extend(std::iter::repeat_n(String::new(), gaps.len() - gi));
    (out, index)
}

fn blank_count(lines: usize, rng: &mut impl Rng) -> usize {
    rng.random_range(0..=2usize).min(lines.saturating_sub(1))
}

/// Single-hop "Where is X?" sample over `lines` movement facts.
pub fn gen_hop1(rng: &mut impl Rng, cfg: &WorldConfig, lines: usize) -> Sample {
    let lines = lines.max(1);
    let mut facts = Vec::with_capacity(lines);
    let mut last: Vec<Option<(usize, usize)>> = vec![None; cfg.entities.len()];
    for i in 0..lines {
        let e = rng.random_range(0..cfg.entities.len());
        let v = cfg.verbs.choose(rng).unwrap();
        let l = rng.random_range(0..cfg.locations.len());
        facts.push(sentence(&cfg.entities[e], v, &cfg.locations[l]));
        last[e] = Some((i, l));
    }
    let moved: Vec<usize> = (0..cfg.entities.len()).filter(|&e| last[e].is_some()).collect();
    let x = *moved.choose(rng).unwrap();
    let (line, loc) = last[x].unwrap();
    let blanks = blank_count(lines, rng);
    let (context, index) = insert_blanks(facts, blanks, rng);
    Sample {
        task: Task::Hop1,
        query: format!("Where is {}?", cfg.entities[x]),
        context,
        answer: Answer::One(cfg.locations[loc].clone()),
        supporting: vec![index[line]],
        meta: Meta {
            hops: 1,
            chains: 0,
            pad_kind: PadKind::None,
            target_tokens: 0,
            seed: 0,
        },
    }
}

#[derive(Clone, Copy)]
enum ObjEvent {
    Pick(usize),
    Drop(usize),
}

/// Two-hop "Where is the {object}?" sample over `lines` events (at least 2).
///
/// Objects travel with their holder until discarded. The supporting facts
/// are, in hop order, the object's most recent pickup/discard line and the
/// holder movement that fixes the object's location.
pub fn gen_hop2(rng: &mut impl Rng, cfg: &WorldConfig, lines: usize) -> Sample {
    let lines = lines.max(2);
    loop {
        if let Some(s) = try_hop2(rng, cfg, lines) {
            return s;
        }
    }
}

fn try_hop2(rng: &mut impl Rng, cfg: &WorldConfig, lines: usize) -> Option<Sample> {
    let ne = cfg.entities.len();
    let no = cfg.objects.len();
    let mut loc: Vec<Option<usize>> = vec![None; ne];
    let mut holder: Vec<Option<usize>> = vec![None; no];
    let mut last_event: Vec<Option<(usize, ObjEvent)>> = vec![None; no];
    // per entity: list of (line, location) movements
    let mut moves: Vec<Vec<(usize, usize)>> = vec![Vec::new(); ne];
    let mut facts = Vec::with_capacity(lines);
    for i in 0..lines {
        let located: Vec<usize> = (0..ne).filter(|&e| loc[e].is_some()).collect();
        let free: Vec<usize> = (0..no).filter(|&o| holder[o].is_none()).collect();
        let held: Vec<usize> = (0..no).filter(|&o| holder[o].is_some()).collect();
        let r: f64 = rng.random();
        if r < 0.25 && !located.is_empty() && !free.is_empty() {
            let e = *located.choose(rng).unwrap();
            let o = *free.choose(rng).unwrap();
            holder[o] = Some(e);
            last_event[o] = Some((i, ObjEvent::Pick(e)));
            facts.push(format!("{} picked up the {}.", cfg.entities[e], cfg.objects[o]));
        } else if r < 0.40 && !held.is_empty() {
            let o = *held.choose(rng).unwrap();
            let e = holder[o].unwrap();
            holder[o] = None;
            last_event[o] = Some((i, ObjEvent::Drop(e)));
            facts.push(format!("{} discarded the {}.", cfg.entities[e], cfg.objects[o]));
        } else {
            let e = rng.random_range(0..ne);
            let v = cfg.verbs.choose(rng).unwrap();
            let l = rng.random_range(0..cfg.locations.len());
            loc[e] = Some(l);
            moves[e].push((i, l));
            facts.push(sentence(&cfg.entities[e], v, &cfg.locations[l]));
        }
    }
    let candidates: Vec<usize> = (0..no).filter(|&o| last_event[o].is_some()).collect();
    let o = *candidates.choose(rng)?;
    let (event_line, event) = last_event[o].unwrap();
    let (move_line, location) = match event {
        // discarded: the holder's location at discard time
        ObjEvent::Drop(e) => *moves[e].iter().rev().find(|(l, _)| *l < event_line)?,
        // still held: the holder's latest location
        ObjEvent::Pick(e) => *moves[e].last()?,
    };
    let blanks = blank_count(lines, rng);
    let (context, index) = insert_blanks(facts, blanks, rng);
    Some(Sample {
        task: Task::Hop2,
        query: format!("Where is the {}?", cfg.objects[o]),
        context,
        answer: Answer::One(cfg.locations[location].clone()),
        supporting: vec![index[event_line], index[move_line]],
        meta: Meta {
            hops: 2,
            chains: 0,
            pad_kind: PadKind::None,
            target_tokens: 0,
            seed: 0,
        },
    })
}

/// Variable-tracking sample: `chains` distinct values, each assigned to one
/// variable (1 hop) or to a variable plus a second variable referencing it
/// (2 hops). Lines are shuffled and `chains/2 − 1` blank lines added.
pub fn gen_vt(rng: &mut impl Rng, hops: usize, chains: usize) -> Result<Sample> {
    if !(1..=2).contains(&hops) {
        return Err(Error::Config(format!("VT hops must be 1 or 2, got {hops}")));
    }
    if chains == 0 || hops * chains > 26 {
        return Err(Error::Config(format!("VT chains must be in 1..={}, got {chains}", 26 / hops)));
    }
    let mut letters: Vec<char> = ('A'..='Z').collect();
    letters.shuffle(rng);
    let names: Vec<String> = letters[..hops * chains]
        .iter()
        .map(|c| c.to_string().repeat(5))
        .collect();
    let mut values = BTreeSet::new();
    while values.len() < chains {
        values.insert(rng.random_range(10000u32..100000));
    }
    let mut values: Vec<u32> = values.into_iter().collect();
    values.shuffle(rng);
    // (text, chain, hop)
    let mut lines: Vec<(String, usize, usize)> = Vec::new();
    for c in 0..chains {
        lines.push((format!("VAR {} = {}", names[c], values[c]), c, 0));
        if hops == 2 {
            lines.push((format!("VAR {} = VAR {}", names[chains + c], names[c]), c, 1));
        }
    }
    lines.shuffle(rng);
    let target = rng.random_range(0..chains);
    let blanks = (chains / 2).saturating_sub(1);
    let mut context: Vec<String> = lines.iter().map(|(t, _, _)| t.clone()).collect();
    for _ in 0..blanks {
        let at = rng.random_range(0..=context.len());
        context.insert(at, String::new());
    }
    let mut supporting = Vec::with_capacity(hops);
    for h in 0..hops {
        let text = &lines.iter().find(|(_, c, hh)| *c == target && *hh == h).unwrap().0;
        supporting.push(context.iter().position(|l| l == text).unwrap());
    }
    let mut answer = vec![names[target].clone()];
    if hops == 2 {
        answer.push(names[chains + target].clone());
    }
    Ok(Sample {
        task: Task::Vt,
        query: format!("Find all variables that are assigned the value {}", values[target]),
        context,
        answer: Answer::Set(answer),
        supporting,
        meta: Meta {
            hops,
            chains,
            pad_kind: PadKind::None,
            target_tokens: 0,
            seed: 0,
        },
    })
}

/// Places `fill` lines into uniformly drawn gaps of `sample.context` (in the
/// given order) and remaps the supporting indices.
fn insert_lines(sample: &Sample, fill: Vec<String>, gaps: Vec<usize>) -> Sample {
    let mut order: Vec<usize> = (0..fill.len()).collect();
    order.sort_by_key(|&k| (gaps[k], k));
    let mut out = Vec::with_capacity(sample.context.len() + fill.len());
    let mut index = Vec::with_capacity(sample.context.len());
    let mut oi = 0;
    for (i, line) in sample.context.iter().enumerate() {
        while oi < order.len() && gaps[order[oi]] == i {
            out.push(fill[order[oi]].clone());
            oi += 1;
        }
        index.push(out.len());
        out.push(line.clone());
    }
    while oi < order.len() {
        out.push(fill[order[oi]].clone());
        oi += 1;
    }
    let mut s = sample.clone();
    s.context = out;
    s.supporting = sample.supporting.iter().map(|&i| index[i]).collect();
    s
}

/// Pads with hard distractors from [`FILLER_SENTENCES`] (cycled in order)
/// until the context holds at least `target_tokens` tokens.
pub fn pad_hard(sample: &Sample, target_tokens: usize, rng: &mut impl Rng) -> Sample {
    let mut total = sample.context_tokens();
    let mut fill = Vec::new();
    while total < target_tokens {
        let f = FILLER_SENTENCES[fill.len() % FILLER_SENTENCES.len()];
        total += line_tokens(f);
        fill.push(f.to_string());
    }
    if fill.is_empty() {
        return sample.clone();
    }
    let e = sample.context.len();
    let gaps = (0..fill.len()).map(|_| rng.random_range(0..=e)).collect();
    let mut s = insert_lines(sample, fill, gaps);
    s.meta.pad_kind = PadKind::Hard;
    s.meta.target_tokens = target_tokens;
    s
}

/// Pads with in-distribution movement sentences. Padding placed after the
/// last supporting fact (in hop order) never mentions that fact's entity, so
/// the answer is unchanged.
pub fn pad_soft(
    sample: &Sample,
    target_tokens: usize,
    cfg: &WorldConfig,
    rng: &mut impl Rng,
) -> Result<Sample> {
    if sample.task == Task::Vt {
        return Err(Error::UnsupportedSample(
            "soft padding applies to entity-location tasks only".into(),
        ));
    }
    let last_sf = *sample
        .supporting
        .last()
        .ok_or_else(|| Error::UnsupportedSample("sample has no supporting facts".into()))?;
    let supported = sample.context[last_sf]
        .split_whitespace()
        .next()
        .unwrap_or_default()
        .to_string();
    let others: Vec<&String> = cfg.entities.iter().filter(|e| **e != supported).collect();
    let mut total = sample.context_tokens();
    let e = sample.context.len();
    let mut fill = Vec::new();
    let mut gaps = Vec::new();
    while total < target_tokens {
        let gap = rng.random_range(0..=e);
        let entity = if gap > last_sf {
            others.choose(rng).unwrap().as_str()
        } else {
            cfg.entities.choose(rng).unwrap().as_str()
        };
        let verb = cfg.verbs.choose(rng).unwrap();
        let location = cfg.locations.choose(rng).unwrap();
        let line = sentence(entity, verb, location);
        total += line_tokens(&line);
        fill.push(line);
        gaps.push(gap);
    }
    if fill.is_empty() {
        return Ok(sample.clone());
    }
    let mut s = insert_lines(sample, fill, gaps);
    s.meta.pad_kind = PadKind::Soft;
    s.meta.target_tokens = target_tokens;
    Ok(s)
}

fn replace_words(text: &str, mapping: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(text.len());
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut String| {
        if !word.is_empty() {
            let lower = word.to_lowercase();
            match mapping.iter().find(|(from, _)| *from == lower) {
                Some((_, to)) => out.push_str(to),
                None => out.push_str(word),
            }
            word.clear();
        }
    };
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.push(ch);
        } else {
            flush(&mut word, &mut out);
            out.push(ch);
        }
    }
    flush(&mut word, &mut out);
    out
}

/// Applies a word-level location mapping to the context, query and answer.
pub fn remap_locations(sample: &Sample, mapping: &[(&str, &str)]) -> Sample {
    let mut s = sample.clone();
    s.context = s.context.iter().map(|l| replace_words(l, mapping)).collect();
    s.query = replace_words(&s.query, mapping);
    s.answer = match &s.answer {
        Answer::One(a) => Answer::One(replace_words(a, mapping)),
        Answer::Set(v) => Answer::Set(v.iter().map(|a| replace_words(a, mapping)).collect()),
    };
    s
}

/// Replaces every training location with its held-out counterpart.
pub fn swap_locations(sample: &Sample) -> Sample {
    remap_locations(sample, &LOCATION_SWAP)
}

/// Undoes [`swap_locations`].
pub fn unswap_locations(sample: &Sample) -> Sample {
    let inverse: Vec<(&str, &str)> = LOCATION_SWAP.iter().map(|(a, b)| (*b, *a)).collect();
    remap_locations(sample, &inverse)
}

/// What to generate: task shape plus optional padding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub task: Task,
    pub hops: usize,
    /// VT chain counts to cycle through.
    pub chains: Vec<usize>,
    /// Inclusive range of fact/event lines for entity-location tasks.
    pub min_lines: usize,
    pub max_lines: usize,
    pub pad_kind: PadKind,
    pub pad_tokens: usize,
}

impl GenSpec {
    pub fn new(task: Task) -> Self {
        let (hops, min_lines, max_lines) = match task {
            Task::Hop1 => (1, 2, 10),
            Task::Hop2 => (2, 4, 10),
            Task::Vt => (1, 0, 0),
        };
        GenSpec {
            task,
            hops,
            chains: vec![2, 4, 6, 8, 10],
            min_lines,
            max_lines,
            pad_kind: PadKind::None,
            pad_tokens: 0,
        }
    }
}

/// Per-sample seed derived from the dataset seed; samples are generated
/// independently so any prefix of a dataset is reproducible on its own.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 over (seed, index)
    let mut z = seed
        .wrapping_add((index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_one(spec: &GenSpec, cfg: &WorldConfig, seed: u64, index: usize) -> Result<Sample> {
    let s = sample_seed(seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    let mut sample = match spec.task {
        Task::Hop1 => {
            let lines = rng.random_range(spec.min_lines.max(1)..=spec.max_lines.max(spec.min_lines.max(1)));
            gen_hop1(&mut rng, cfg, lines)
        }
        Task::Hop2 => {
            let lines = rng.random_range(spec.min_lines.max(2)..=spec.max_lines.max(spec.min_lines.max(2)));
            gen_hop2(&mut rng, cfg, lines)
        }
        Task::Vt => {
            if spec.chains.is_empty() {
                return Err(Error::Config("VT needs at least one chain count".into()));
            }
            let chains = spec.chains[index % spec.chains.len()];
            gen_vt(&mut rng, spec.hops, chains)?
        }
    };
    sample = match spec.pad_kind {
        PadKind::None => sample,
        PadKind::Hard => pad_hard(&sample, spec.pad_tokens, &mut rng),
        PadKind::Soft => pad_soft(&sample, spec.pad_tokens, cfg, &mut rng)?,
    };
    sample.meta.seed = s;
    Ok(sample)
}

pub fn generate(spec: &GenSpec, cfg: &WorldConfig, n: usize, seed: u64) -> Result<Vec<Sample>> {
    (0..n).map(|i| generate_one(spec, cfg, seed, i)).collect()
}

/// One sentence of the synthetic pretraining corpus. Templates cover the
/// whole generator vocabulary; the exact filler sentences are never emitted.
pub fn corpus_sentence(rng: &mut impl Rng, cfg: &WorldConfig) -> String {
    let places: Vec<&str> = cfg
        .locations
        .iter()
        .map(String::as_str)
        .chain(LOCATION_SWAP.iter().map(|(_, to)| *to))
        .collect();
    loop {
        let entity = cfg.entities.choose(rng).unwrap();
        let place = places.choose(rng).unwrap();
        let object = cfg.objects.choose(rng).unwrap();
        let adjective = ["red", "big", "small", "quiet", "green", "blue", "yellow"]
            .choose(rng)
            .unwrap();
        let thing = ["grass", "sky", "sun", object.as_str(), place].choose(rng).unwrap().to_string();
        let s = match rng.random_range(0..10) {
            0 | 1 => sentence(entity, cfg.verbs.choose(rng).unwrap(), place),
            2 => format!("The {thing} is {adjective}."),
            3 => format!("{entity} saw the {object} near the {place}."),
            4 => format!("{entity} was in a {adjective} {place}."),
            5 => format!("The {object} was {adjective}."),
            6 => format!("Here we go to the {place}."),
            7 => format!("{entity} went there and back again."),
            8 => format!("There the {thing} was {adjective} again."),
            _ => format!("We saw the {adjective} {thing} and the {object}."),
        };
        if !FILLER_SENTENCES.contains(&s.as_str()) {
            return s;
        }
    }
}

pub fn pretrain_corpus(n: usize, seed: u64, cfg: &WorldConfig) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| corpus_sentence(&mut rng, cfg)).collect()
}

/// Writes one JSON object per line.
pub fn write_dataset(samples: &[Sample], path: &Path) -> Result<()> {
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut f, s)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Streaming reader over a JSON Lines dataset.
pub struct DatasetReader {
    lines: std::io::Lines<BufReader<std::fs::File>>,
    line_no: usize,
}

impl DatasetReader {
    pub fn open(path: &Path) -> Result<Self> {
        Ok(DatasetReader {
            lines: BufReader::new(std::fs::File::open(path)?).lines(),
            line_no: 0,
        })
    }
}

impl Iterator for DatasetReader {
    type Item = Result<Sample>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(e.into())),
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            return Some(serde_json::from_str(&line).map_err(|source| Error::Dataset {
                line: self.line_no,
                source,
            }));
        }
    }
}

pub fn read_dataset(path: &Path) -> Result<Vec<Sample>> {
    DatasetReader::open(path)?.collect()
}
