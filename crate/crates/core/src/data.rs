//! Corpus ingestion, tokenization, dataset statistics, synthetic long-tail
//! generation, and label-noise injection.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub text: String,
    pub label_id: usize,
}

/// Label string to dense id. Ids are assigned lexicographically by label
/// string so they are reproducible without an external ordering.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    names: Vec<String>,
    by_name: HashMap<String, usize>,
}

impl LabelMap {
    pub fn from_labels<I: IntoIterator<Item = String>>(labels: I) -> Self {
        let mut names: Vec<String> = labels.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        names.sort();
        let by_name = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        LabelMap { names, by_name }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// JSON object mapping label string to integer id.
    pub fn to_json(&self) -> serde_json::Value {
        let map: BTreeMap<&str, usize> = self
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        serde_json::to_value(map).expect("label map serializes")
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Parse("label map must be a JSON object".into()))?;
        let mut names = vec![None; obj.len()];
        for (name, id) in obj {
            let id = id
                .as_u64()
                .ok_or_else(|| Error::Parse(format!("label '{name}' has a non-integer id")))?
                as usize;
            if id >= names.len() || names[id].is_some() {
                return Err(Error::Parse(format!(
                    "label ids must be dense in [0, {}), got {id}",
                    names.len()
                )));
            }
            names[id] = Some(name.clone());
        }
        let names: Vec<String> = names.into_iter().map(Option::unwrap).collect();
        let by_name = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Ok(LabelMap { names, by_name })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "{}", serde_json::to_string_pretty(&self.to_json()).unwrap())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Parse(format!("label map {}: {e}", path.display())))?;
        Self::from_json(&value)
    }
}

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
const SPECIALS: [&str; 3] = ["<pad>", "<unk>", "<cls>"];

/// Whitespace token to id, with reserved PAD/UNK/CLS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    by_token: HashMap<String, usize>,
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.by_token.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3 || tokens[..3] != SPECIALS.map(String::from) {
            return Err(Error::Parse(
                "vocab must start with the reserved <pad>/<unk>/<cls> tokens".into(),
            ));
        }
        let by_token = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocab { tokens, by_token })
    }
}

fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// Keep the `max_size - 3` most frequent lowercased whitespace tokens,
/// ties broken lexicographically, after the 3 reserved specials.
pub fn build_vocab<'a, I>(corpus: I, max_size: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = &'a str>,
{
    if max_size < 4 {
        return Err(Error::Config(format!(
            "vocab max_size must be at least 4, got {max_size}"
        )));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut any = false;
    for text in corpus {
        any = true;
        for tok in tokenize(text) {
            *counts.entry(tok).or_insert(0) += 1;
        }
    }
    if !any {
        return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend(ranked.into_iter().take(max_size - 3).map(|(t, _)| t));
    Vocab::from_tokens(tokens)
}

/// `[CLS]` plus token ids (UNK for out-of-vocabulary), truncated to
/// `max_len`. Empty text encodes to `[CLS]` alone.
pub fn encode(text: &str, vocab: &Vocab, max_len: usize) -> Result<Vec<usize>> {
    if max_len < 2 {
        return Err(Error::Config(format!(
            "max_len must be at least 2, got {max_len}"
        )));
    }
    let mut ids = vec![CLS_ID];
    for tok in tokenize(text) {
        if ids.len() == max_len {
            break;
        }
        ids.push(vocab.id(&tok).unwrap_or(UNK_ID));
    }
    Ok(ids)
}

/// Token-id sequence plus label, ready for batching.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub label: usize,
}

pub fn encode_dataset(examples: &[Example], vocab: &Vocab, max_len: usize) -> Result<Vec<Encoded>> {
    examples
        .iter()
        .map(|ex| {
            Ok(Encoded {
                ids: encode(&ex.text, vocab, max_len)?,
                label: ex.label_id,
            })
        })
        .collect()
}

#[derive(Deserialize)]
struct JsonlRecord {
    text: String,
    label: String,
}

/// One JSON object per line: {"text": ..., "label": ...}. Order preserved.
pub fn load_jsonl(path: &Path, label_map: &LabelMap) -> Result<Vec<Example>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: JsonlRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Parse(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        let label_id = label_map.id(&record.label).ok_or_else(|| {
            Error::Data(format!(
                "{}:{}: unknown label '{}'",
                path.display(),
                lineno + 1,
                record.label
            ))
        })?;
        out.push(Example {
            text: record.text,
            label_id,
        });
    }
    Ok(out)
}

/// Distinct label strings present in a JSONL dataset.
pub fn scan_labels(path: &Path) -> Result<Vec<String>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut labels = BTreeSet::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: JsonlRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Parse(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        labels.insert(record.label);
    }
    Ok(labels.into_iter().collect())
}

pub fn save_jsonl(path: &Path, examples: &[Example], label_map: &LabelMap) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for ex in examples {
        let label = label_map.name(ex.label_id).ok_or_else(|| {
            Error::Data(format!("label id {} not in label map", ex.label_id))
        })?;
        let obj = serde_json::json!({ "text": ex.text, "label": label });
        writeln!(f, "{obj}")?;
    }
    Ok(())
}

pub fn class_distribution(examples: &[Example], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0usize; num_classes];
    for ex in examples {
        counts[ex.label_id] += 1;
    }
    counts
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Histogram {
    pub bin_width: usize,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Overflow {
    pub word: usize,
    pub char: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetStats {
    pub class_counts: Vec<usize>,
    pub word_hist: Histogram,
    pub char_hist: Histogram,
    pub overflow: Overflow,
    pub clip_percentile: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StatsConfig {
    pub clip_percentile: f64,
    pub word_bin: usize,
    pub char_bin: usize,
}

impl Default for StatsConfig {
    fn default() -> Self {
        StatsConfig {
            clip_percentile: 99.5,
            word_bin: 1,
            char_bin: 5,
        }
    }
}

/// Nearest-rank percentile threshold: the value at rank ceil(p/100 * N).
fn percentile_threshold(values: &[usize], percentile: f64) -> usize {
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    let rank = ((percentile / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn clipped_histogram(values: &[usize], percentile: f64, bin_width: usize) -> (Histogram, usize) {
    let threshold = percentile_threshold(values, percentile);
    let mut counts = vec![0usize; threshold / bin_width + 1];
    let mut overflow = 0usize;
    for &v in values {
        if v > threshold {
            overflow += 1;
        } else {
            counts[v / bin_width] += 1;
        }
    }
    (Histogram { bin_width, counts }, overflow)
}

/// Word/character count histograms, clipped at the configured percentile.
/// Values above the clip threshold land in the overflow bucket.
pub fn length_stats(
    examples: &[Example],
    num_classes: usize,
    config: &StatsConfig,
) -> Result<DatasetStats> {
    if !(config.clip_percentile > 0.0 && config.clip_percentile <= 100.0) {
        return Err(Error::Config(format!(
            "clip percentile must be in (0, 100], got {}",
            config.clip_percentile
        )));
    }
    if examples.is_empty() {
        return Err(Error::Data("length_stats on an empty dataset".into()));
    }
    let word_counts: Vec<usize> = examples
        .iter()
        .map(|ex| ex.text.split_whitespace().count())
        .collect();
    let char_counts: Vec<usize> = examples.iter().map(|ex| ex.text.chars().count()).collect();
    let (word_hist, word_over) = clipped_histogram(&word_counts, config.clip_percentile, config.word_bin);
    let (char_hist, char_over) = clipped_histogram(&char_counts, config.clip_percentile, config.char_bin);
    Ok(DatasetStats {
        class_counts: class_distribution(examples, num_classes),
        word_hist,
        char_hist,
        overflow: Overflow {
            word: word_over,
            char: char_over,
        },
        clip_percentile: config.clip_percentile,
    })
}

/// Per-class adjacency used both for label-noise injection and for the
/// schema-mismatch re-ranking simulator.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ConfusionMap {
    adjacency: Vec<Vec<(usize, f64)>>,
}

impl ConfusionMap {
    pub fn new(adjacency: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        let classes = adjacency.len();
        for (c, neighbors) in adjacency.iter().enumerate() {
            let mut total = 0.0;
            for &(n, w) in neighbors {
                if n == c {
                    return Err(Error::Config(format!("class {c} is adjacent to itself")));
                }
                if n >= classes {
                    return Err(Error::Config(format!(
                        "class {c} adjacent to out-of-range class {n}"
                    )));
                }
                total += w;
            }
            if !neighbors.is_empty() && (total - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!(
                    "adjacency weights for class {c} sum to {total}, expected 1"
                )));
            }
        }
        Ok(ConfusionMap { adjacency })
    }

    pub fn num_classes(&self) -> usize {
        self.adjacency.len()
    }

    pub fn neighbors(&self, class: usize) -> &[(usize, f64)] {
        &self.adjacency[class]
    }

    /// Weighted draw of an adjacent class; None when the class has no
    /// neighbors.
    pub fn sample_adjacent(&self, class: usize, rng: &mut RngState) -> Option<usize> {
        let neighbors = &self.adjacency[class];
        if neighbors.is_empty() {
            return None;
        }
        let u = rng.next_f64();
        let mut acc = 0.0;
        for &(n, w) in neighbors {
            acc += w;
            if u < acc {
                return Some(n);
            }
        }
        Some(neighbors.last().unwrap().0)
    }
}

/// Synthetic long-tail corpus description. Class c receives
/// round(head * (c+1)^-exponent) examples, clamped to at least
/// `tail_count`. Sibling classes (pairs 2i, 2i+1) share an `overlap`
/// fraction of their keyword pools.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    #[serde(default = "d_classes")]
    pub num_classes: usize,
    #[serde(default = "d_head")]
    pub head_count: usize,
    #[serde(default = "d_tail")]
    pub tail_count: usize,
    #[serde(default = "d_exponent")]
    pub exponent: f64,
    #[serde(default = "d_tokens")]
    pub tokens_per_example: (usize, usize),
    #[serde(default = "d_keywords")]
    pub keywords_per_class: usize,
    #[serde(default)]
    pub overlap: f64,
    #[serde(default = "d_seed")]
    pub seed: u64,
}

fn d_classes() -> usize {
    20
}
fn d_head() -> usize {
    600
}
fn d_tail() -> usize {
    7
}
fn d_exponent() -> f64 {
    2.0
}
fn d_tokens() -> (usize, usize) {
    (6, 18)
}
fn d_keywords() -> usize {
    8
}
fn d_seed() -> u64 {
    42
}

impl Default for SynthConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if self.tail_count == 0 || self.head_count < self.tail_count {
            return Err(Error::Config(format!(
                "need head_count >= tail_count >= 1, got {} and {}",
                self.head_count, self.tail_count
            )));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Config(format!(
                "overlap must be in [0, 1), got {}",
                self.overlap
            )));
        }
        let (lo, hi) = self.tokens_per_example;
        if lo == 0 || hi < lo {
            return Err(Error::Config(format!(
                "tokens_per_example range ({lo}, {hi}) is invalid"
            )));
        }
        if self.keywords_per_class == 0 {
            return Err(Error::Config("keywords_per_class must be positive".into()));
        }
        Ok(())
    }

    pub fn class_count(&self, class: usize) -> usize {
        let raw = (self.head_count as f64 * ((class + 1) as f64).powf(-self.exponent)).round();
        (raw as usize).max(self.tail_count)
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub examples: Vec<Example>,
    pub label_map: LabelMap,
    pub keyword_pools: Vec<Vec<String>>,
    /// Sibling-class adjacency matching the keyword overlap structure.
    pub confusion: ConfusionMap,
}

fn label_name(class: usize, num_classes: usize) -> String {
    let width = (num_classes.max(2) - 1).to_string().len();
    let mut s = String::from("class_");
    write!(s, "{class:0width$}").unwrap();
    s
}

fn sibling(class: usize, num_classes: usize) -> Option<usize> {
    if class.is_multiple_of(2) {
        let partner = class + 1;
        if partner < num_classes {
            Some(partner)
        } else if class > 0 {
            Some(class - 1)
        } else {
            None
        }
    } else {
        Some(class - 1)
    }
}

const FILLER_POOL: usize = 50;

/// Deterministic bag-of-keywords generator mirroring a long-tail corpus:
/// each example mixes class keywords with shared filler tokens.
pub fn synth_generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let classes = config.num_classes;
    let k = config.keywords_per_class;
    let shared = (config.overlap * k as f64).round() as usize;

    let mut pools: Vec<Vec<String>> = Vec::with_capacity(classes);
    for c in 0..classes {
        let mut pool = Vec::with_capacity(k);
        let has_pair = sibling(c, classes).is_some_and(|s| sibling(s, classes) == Some(c));
        let unique = if has_pair { k - shared } else { k };
        for j in 0..unique {
            pool.push(format!("kw{c:03}_{j}"));
        }
        if has_pair {
            let pair = c / 2;
            for j in 0..shared {
                pool.push(format!("ovl{pair:03}_{j}"));
            }
        }
        pools.push(pool);
    }

    let mut rng = RngState::new(config.seed);
    let mut examples = Vec::new();
    for c in 0..classes {
        let count = config.class_count(c);
        for _ in 0..count {
            let (lo, hi) = config.tokens_per_example;
            let n = rng.gen_range_usize(lo, hi);
            let n_kw = (n / 2).max(1);
            let mut tokens: Vec<String> = (0..n_kw)
                .map(|_| pools[c][rng.gen_index(pools[c].len())].clone())
                .collect();
            for _ in n_kw..n {
                tokens.push(format!("flr{:02}", rng.gen_index(FILLER_POOL)));
            }
            rng.shuffle(&mut tokens);
            examples.push(Example {
                text: tokens.join(" "),
                label_id: c,
            });
        }
    }

    let label_map = LabelMap::from_labels((0..classes).map(|c| label_name(c, classes)));
    let adjacency: Vec<Vec<(usize, f64)>> = (0..classes)
        .map(|c| match sibling(c, classes) {
            Some(s) => vec![(s, 1.0)],
            None => Vec::new(),
        })
        .collect();
    Ok(SynthDataset {
        examples,
        label_map,
        keyword_pools: pools,
        confusion: ConfusionMap::new(adjacency)?,
    })
}

/// Nearest-class bag-of-keywords classifier; certifies the generator is
/// learnable (100% accurate with zero overlap and zero noise).
pub fn keyword_oracle_predict(text: &str, pools: &[Vec<String>]) -> usize {
    let tokens: Vec<String> = tokenize(text).collect();
    let mut best = (0usize, 0usize);
    for (c, pool) in pools.iter().enumerate() {
        let hits = tokens.iter().filter(|t| pool.contains(t)).count();
        if hits > best.1 {
            best = (c, hits);
        }
    }
    best.0
}

/// Independently relabel each example with probability `rate` to an
/// adjacent class drawn by the map's weights. Returns the dataset and
/// the number of flips.
pub fn inject_label_noise(
    mut examples: Vec<Example>,
    rate: f64,
    map: &ConfusionMap,
    rng: &mut RngState,
) -> Result<(Vec<Example>, usize)> {
    if !(0.0..1.0).contains(&rate) && rate != 1.0 {
        return Err(Error::Config(format!(
            "noise rate must be in [0, 1], got {rate}"
        )));
    }
    let mut flips = 0usize;
    for ex in &mut examples {
        if rate > 0.0 && rng.next_f64() < rate {
            let new = map.sample_adjacent(ex.label_id, rng).ok_or_else(|| {
                Error::Data(format!(
                    "class {} selected for a flip but has no adjacent classes",
                    ex.label_id
                ))
            })?;
            ex.label_id = new;
            flips += 1;
        }
    }
    Ok((examples, flips))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn corpus(texts: &[&str]) -> Vec<Example> {
        texts
            .iter()
            .map(|t| Example {
                text: t.to_string(),
                label_id: 0,
            })
            .collect()
    }

    #[test]
    fn build_vocab_frequency_order() {
        let v = build_vocab(["a b", "a"], 5).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("a"), Some(3));
        assert_eq!(v.id("b"), Some(4));
    }

    #[test]
    fn build_vocab_singleton() {
        let v = build_vocab(["x"], 4).unwrap();
        assert_eq!(v.tokens(), &["<pad>", "<unk>", "<cls>", "x"]);
    }

    #[test]
    fn build_vocab_empty_and_tiny() {
        assert!(matches!(build_vocab([], 10), Err(Error::Data(_))));
        assert!(matches!(build_vocab(["a"], 3), Err(Error::Config(_))));
    }

    #[test]
    fn build_vocab_matches_counting_oracle() {
        // 1000 docs; keep the 47 most frequent per an independent count.
        let mut rng = RngState::new(51);
        let docs: Vec<String> = (0..1000)
            .map(|_| {
                (0..10)
                    .map(|_| format!("w{}", rng.gen_index(120)))
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        let v = build_vocab(docs.iter().map(String::as_str), 50).unwrap();

        let mut oracle: HashMap<String, usize> = HashMap::new();
        for d in &docs {
            for t in d.split_whitespace() {
                *oracle.entry(t.to_lowercase()).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = oracle.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let expected: BTreeSet<String> = ranked.into_iter().take(47).map(|(t, _)| t).collect();
        let kept: BTreeSet<String> = v.tokens()[3..].iter().cloned().collect();
        assert_eq!(kept, expected);
    }

    #[test]
    fn encode_cases() {
        let v = build_vocab(["a"], 4).unwrap();
        assert_eq!(encode("", &v, 8).unwrap(), vec![CLS_ID]);
        assert_eq!(encode("a zzz", &v, 8).unwrap(), vec![CLS_ID, 3, UNK_ID]);
        let long = vec!["a"; 300].join(" ");
        assert_eq!(encode(&long, &v, 128).unwrap().len(), 128);
        assert!(encode("a", &v, 1).is_err());
    }

    #[test]
    fn encode_never_exceeds_vocab_and_never_pads() {
        let v = build_vocab(["alpha beta gamma", "beta"], 6).unwrap();
        let ids = encode("alpha beta unknown", &v, 16).unwrap();
        assert!(ids.iter().all(|&id| id < v.len()));
        assert!(ids.iter().all(|&id| id != PAD_ID));
    }

    #[test]
    fn load_jsonl_valid_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, r#"{{"text": "hello", "label": "x"}}"#).unwrap();
        writeln!(f, r#"{{"text": "world", "label": "y"}}"#).unwrap();
        drop(f);
        let map = LabelMap::from_labels(["x".into(), "y".into()]);
        let examples = load_jsonl(&path, &map).unwrap();
        assert_eq!(examples.len(), 2);
        assert_eq!(examples[0].text, "hello");
        assert_eq!(examples[0].label_id, 0);
        assert_eq!(examples[1].label_id, 1);

        // Unknown label names the line.
        let short = LabelMap::from_labels(["y".into()]);
        let err = load_jsonl(&path, &short).unwrap_err().to_string();
        assert!(err.contains(":1"), "{err}");

        // Malformed JSON names the line.
        let bad = dir.path().join("bad.jsonl");
        std::fs::write(&bad, "{\"text\": \"ok\", \"label\": \"y\"}\nnot json\n").unwrap();
        let err = load_jsonl(&bad, &short).unwrap_err().to_string();
        assert!(err.contains(":2"), "{err}");
    }

    #[test]
    fn load_jsonl_count_matches_line_oracle() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("many.jsonl");
        let mut f = std::fs::File::create(&path).unwrap();
        let n = 57;
        for i in 0..n {
            writeln!(f, r#"{{"text": "doc {i}", "label": "l{}"}}"#, i % 3).unwrap();
        }
        drop(f);
        let map = LabelMap::from_labels((0..3).map(|i| format!("l{i}")));
        let examples = load_jsonl(&path, &map).unwrap();
        assert_eq!(examples.len(), n);
        let counts = class_distribution(&examples, 3);
        assert_eq!(counts.iter().sum::<usize>(), n);
    }

    #[test]
    fn class_distribution_cases() {
        let mut ex = corpus(&["a", "b", "c"]);
        ex[2].label_id = 1;
        assert_eq!(class_distribution(&ex[..3], 2), vec![2, 1]);
        assert_eq!(class_distribution(&[], 3), vec![0, 0, 0]);
    }

    #[test]
    fn length_stats_basic() {
        let ex = corpus(&["a b", "abc"]);
        let stats = length_stats(&ex, 1, &StatsConfig {
            clip_percentile: 100.0,
            word_bin: 1,
            char_bin: 1,
        })
        .unwrap();
        // word counts [2, 1], char counts [3, 3]
        assert_eq!(stats.word_hist.counts[2], 1);
        assert_eq!(stats.word_hist.counts[1], 1);
        assert_eq!(stats.char_hist.counts[3], 2);
        assert_eq!(stats.overflow, Overflow { word: 0, char: 0 });
    }

    #[test]
    fn length_stats_overflow_matches_rank_oracle() {
        // 1000 distinct lengths, clip 99.5 -> ceil(0.5%) = 5 overflow items.
        let ex: Vec<Example> = (1..=1000)
            .map(|n| Example {
                text: vec!["w"; n].join(" "),
                label_id: 0,
            })
            .collect();
        let stats = length_stats(&ex, 1, &StatsConfig {
            clip_percentile: 99.5,
            word_bin: 1,
            char_bin: 5,
        })
        .unwrap();
        assert_eq!(stats.overflow.word, 5);
        let kept: usize = stats.word_hist.counts.iter().sum();
        assert_eq!(kept + stats.overflow.word, 1000);
    }

    #[test]
    fn synth_counts_flat_exponent() {
        let config = SynthConfig {
            num_classes: 2,
            head_count: 10,
            tail_count: 7,
            exponent: 0.0,
            ..SynthConfig::default()
        };
        assert_eq!(config.class_count(0), 10);
        assert_eq!(config.class_count(1), 10);
    }

    #[test]
    fn synth_counts_match_formula_oracle() {
        let config = SynthConfig {
            num_classes: 20,
            head_count: 600,
            tail_count: 7,
            exponent: 2.0,
            ..SynthConfig::default()
        };
        let ds = synth_generate(&config).unwrap();
        let counts = class_distribution(&ds.examples, 20);
        // Independent evaluation of the count schedule.
        for (c, &n) in counts.iter().enumerate() {
            let cp1 = (c + 1) as f64;
            let expected = ((600.0 / (cp1 * cp1)).round() as usize).max(7);
            assert_eq!(n, expected, "class {c}");
        }
        assert_eq!(*counts.iter().max().unwrap(), 600);
        assert_eq!(*counts.iter().min().unwrap(), 7);
        for w in counts.windows(2) {
            assert!(w[0] >= w[1], "counts must be non-increasing: {counts:?}");
        }
    }

    #[test]
    fn synth_82_class_long_tail_shape() {
        let config = SynthConfig {
            num_classes: 82,
            head_count: 600,
            tail_count: 7,
            exponent: 2.0,
            ..SynthConfig::default()
        };
        let ds = synth_generate(&config).unwrap();
        assert_eq!(ds.label_map.len(), 82);
        let counts = class_distribution(&ds.examples, 82);
        assert_eq!(*counts.iter().max().unwrap(), 600);
        assert_eq!(*counts.iter().min().unwrap(), 7);
    }

    #[test]
    fn synth_zero_overlap_pools_are_disjoint() {
        let config = SynthConfig {
            num_classes: 6,
            head_count: 10,
            tail_count: 5,
            overlap: 0.0,
            ..SynthConfig::default()
        };
        let ds = synth_generate(&config).unwrap();
        let mut seen = BTreeSet::new();
        for pool in &ds.keyword_pools {
            for kw in pool {
                assert!(seen.insert(kw.clone()), "keyword {kw} appears twice");
            }
        }
    }

    #[test]
    fn synth_is_bit_deterministic() {
        let config = SynthConfig::default();
        let a = synth_generate(&config).unwrap();
        let b = synth_generate(&config).unwrap();
        assert_eq!(a.examples, b.examples);
    }

    #[test]
    fn synth_overlap_shares_keywords_between_siblings() {
        let config = SynthConfig {
            num_classes: 4,
            head_count: 10,
            tail_count: 5,
            overlap: 0.25,
            keywords_per_class: 8,
            ..SynthConfig::default()
        };
        let ds = synth_generate(&config).unwrap();
        let shared: Vec<&String> = ds.keyword_pools[0]
            .iter()
            .filter(|kw| ds.keyword_pools[1].contains(kw))
            .collect();
        assert_eq!(shared.len(), 2); // round(0.25 * 8)
        assert!(ds.keyword_pools[2].iter().all(|kw| !ds.keyword_pools[0].contains(kw)));
    }

    #[test]
    fn keyword_oracle_is_perfect_on_clean_data() {
        let config = SynthConfig {
            num_classes: 5,
            head_count: 30,
            tail_count: 7,
            overlap: 0.0,
            ..SynthConfig::default()
        };
        let ds = synth_generate(&config).unwrap();
        for ex in &ds.examples {
            assert_eq!(keyword_oracle_predict(&ex.text, &ds.keyword_pools), ex.label_id);
        }
    }

    #[test]
    fn noise_rate_zero_is_identity() {
        let ds = synth_generate(&SynthConfig {
            num_classes: 4,
            head_count: 20,
            tail_count: 7,
            ..SynthConfig::default()
        })
        .unwrap();
        let before = class_distribution(&ds.examples, 4);
        let mut rng = RngState::new(1);
        let (noisy, flips) = inject_label_noise(ds.examples.clone(), 0.0, &ds.confusion, &mut rng).unwrap();
        assert_eq!(flips, 0);
        assert_eq!(noisy, ds.examples);
        assert_eq!(class_distribution(&noisy, 4), before);
    }

    #[test]
    fn noise_rate_one_flips_everything_to_unique_neighbor() {
        let ds = synth_generate(&SynthConfig {
            num_classes: 4,
            head_count: 10,
            tail_count: 5,
            ..SynthConfig::default()
        })
        .unwrap();
        let mut rng = RngState::new(2);
        let (noisy, flips) =
            inject_label_noise(ds.examples.clone(), 1.0, &ds.confusion, &mut rng).unwrap();
        assert_eq!(flips, noisy.len());
        for (old, new) in ds.examples.iter().zip(&noisy) {
            assert_eq!(new.label_id, ds.confusion.neighbors(old.label_id)[0].0);
        }
    }

    #[test]
    fn noise_flip_count_within_binomial_interval() {
        // 99.99% two-sided binomial interval for N=10000, p=0.05.
        let examples: Vec<Example> = (0..10_000)
            .map(|i| Example {
                text: "t".into(),
                label_id: i % 2,
            })
            .collect();
        let map = ConfusionMap::new(vec![vec![(1, 1.0)], vec![(0, 1.0)]]).unwrap();
        let mut rng = RngState::new(3);
        let (_, flips) = inject_label_noise(examples, 0.05, &map, &mut rng).unwrap();
        assert!((400..=600).contains(&flips), "flips = {flips}");
    }

    #[test]
    fn noise_empty_adjacency_errors_when_selected() {
        let examples = vec![Example {
            text: "t".into(),
            label_id: 0,
        }];
        let map = ConfusionMap::new(vec![Vec::new()]).unwrap();
        let mut rng = RngState::new(4);
        assert!(matches!(
            inject_label_noise(examples, 1.0, &map, &mut rng),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn confusion_map_validation() {
        assert!(ConfusionMap::new(vec![vec![(0, 1.0)]]).is_err()); // self
        assert!(ConfusionMap::new(vec![vec![(1, 0.5)], vec![]]).is_err()); // weights
        assert!(ConfusionMap::new(vec![vec![(5, 1.0)], vec![]]).is_err()); // range
        assert!(ConfusionMap::new(vec![vec![(1, 1.0)], vec![(0, 0.4), (0, 0.6)]]).is_ok());
    }

    #[test]
    fn label_map_round_trip() {
        let map = LabelMap::from_labels(["zeta".into(), "alpha".into(), "mid".into()]);
        assert_eq!(map.name(0), Some("alpha")); // lexicographic ids
        let json = map.to_json();
        let back = LabelMap::from_json(&json).unwrap();
        assert_eq!(map, back);
    }
}
