//! Dataset generation, ingestion, tokenization, and batching.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mix_seed;

pub const CLS_ID: usize = 0;
pub const PAD_ID: usize = 1;
pub const UNK_ID: usize = 2;
pub const SEP_ID: usize = 3;
pub const SEP_TOKEN: &str = "[SEP]";

const RESERVED: [&str; 4] = ["[CLS]", "[PAD]", "[UNK]", SEP_TOKEN];

/// One labeled sample. Labels are 0-based class indices in `0..K`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledText {
    pub text: String,
    pub label: usize,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub records: Vec<LabeledText>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.records.iter().map(|r| r.label + 1).max().unwrap_or(0)
    }
}

/// Whitespace-token vocabulary with reserved ids 0=[CLS], 1=[PAD], 2=[UNK],
/// 3=[SEP]. Ids are dense and assigned in first-occurrence order over the
/// corpus, so rebuilding from the same corpus is stable.
#[derive(Clone, Debug)]
pub struct Vocab {
    map: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocab {
    pub fn build(train: &Dataset) -> Vocab {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut map: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        for rec in &train.records {
            for tok in rec.text.split_whitespace() {
                if !map.contains_key(tok) {
                    map.insert(tok.to_string(), tokens.len());
                    tokens.push(tok.to_string());
                }
            }
        }
        Vocab { map, tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        *self.map.get(token).unwrap_or(&UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    /// Disjoint per-class signal tokens; a bag-of-signal-tokens rule is exact.
    Separable,
    /// Signal tokens shared across classes with asymmetric frequencies, so
    /// shallow classifiers stay imperfect.
    Overlapping,
}

/// Specification of a synthetic classification task.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub k: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub vocab_size: usize,
    /// Number of signal tokens dedicated to each class.
    #[serde(default = "default_signal_tokens")]
    pub signal_tokens_per_class: usize,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    /// Probability that a position carries a noise token instead of signal.
    pub noise_rate: f64,
    pub difficulty: Difficulty,
    /// In overlapping mode, probability that an emitted signal token is
    /// drawn from another class's signal set.
    #[serde(default = "default_overlap_rate")]
    pub overlap_rate: f64,
    pub seed: u64,
}

fn default_signal_tokens() -> usize {
    4
}

fn default_seq_len() -> usize {
    12
}

fn default_overlap_rate() -> f64 {
    0.3
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Validation(format!("k must be >= 2, got {}", self.k)));
        }
        if self.n_train == 0 || self.n_eval == 0 {
            return Err(Error::Validation("n_train and n_eval must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::Validation(format!(
                "noise_rate {} not in [0, 1)",
                self.noise_rate
            )));
        }
        if !(0.0..1.0).contains(&self.overlap_rate) {
            return Err(Error::Validation(format!(
                "overlap_rate {} not in [0, 1)",
                self.overlap_rate
            )));
        }
        if self.seq_len == 0 {
            return Err(Error::Validation("seq_len must be positive".into()));
        }
        let needed = self.k * self.signal_tokens_per_class + 1;
        if self.vocab_size < needed {
            return Err(Error::Validation(format!(
                "vocab_size {} too small for {} classes x {} signal tokens (need >= {needed})",
                self.vocab_size, self.k, self.signal_tokens_per_class
            )));
        }
        Ok(())
    }
}

/// A generated task: the resolved spec, the per-class signal token sets, and
/// the train/eval splits.
#[derive(Clone, Debug)]
pub struct SynthData {
    pub spec: SynthSpec,
    pub signal_sets: Vec<Vec<String>>,
    pub train: Dataset,
    pub eval: Dataset,
}

/// Generate a synthetic task. Deterministic per spec (including seed).
/// Class labels are assigned round-robin so counts differ by at most one.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let words: Vec<String> = (0..spec.vocab_size).map(|i| format!("w{i}")).collect();
    let signal_sets: Vec<Vec<String>> = (0..spec.k)
        .map(|k| {
            (0..spec.signal_tokens_per_class)
                .map(|j| words[k * spec.signal_tokens_per_class + j].clone())
                .collect()
        })
        .collect();
    let noise_pool: Vec<String> = words[spec.k * spec.signal_tokens_per_class..].to_vec();

    let gen_split = |n: usize, tag: &str| -> Vec<LabeledText> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, tag));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut out = vec![
            LabeledText {
                text: String::new(),
                label: 0
            };
            n
        ];
        for (i, &slot) in order.iter().enumerate() {
            let label = i % spec.k;
            let mut toks: Vec<&str> = Vec::with_capacity(spec.seq_len);
            let mut has_signal = false;
            for _ in 0..spec.seq_len {
                if rng.gen::<f64>() < spec.noise_rate {
                    toks.push(&noise_pool[rng.gen_range(0..noise_pool.len())]);
                } else {
                    let set = match spec.difficulty {
                        Difficulty::Separable => label,
                        Difficulty::Overlapping => {
                            if rng.gen::<f64>() < spec.overlap_rate {
                                // borrow a signal token from another class
                                let mut other = rng.gen_range(0..spec.k - 1);
                                if other >= label {
                                    other += 1;
                                }
                                other
                            } else {
                                label
                            }
                        }
                    };
                    if set == label {
                        has_signal = true;
                    }
                    toks.push(&signal_sets[set][rng.gen_range(0..spec.signal_tokens_per_class)]);
                }
            }
            if !has_signal {
                // guarantee at least one own-class signal token per sample
                let pos = rng.gen_range(0..spec.seq_len);
                toks[pos] = &signal_sets[label][rng.gen_range(0..spec.signal_tokens_per_class)];
            }
            out[slot] = LabeledText {
                text: toks.join(" "),
                label,
            };
        }
        out
    };

    let train = Dataset {
        records: gen_split(spec.n_train, "synth.train"),
    };
    let eval = Dataset {
        records: gen_split(spec.n_eval, "synth.eval"),
    };
    Ok(SynthData {
        spec: spec.clone(),
        signal_sets,
        train,
        eval,
    })
}

/// Write a dataset as `label TAB text` lines.
pub fn save_tsv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut buf = String::new();
    for rec in &ds.records {
        writeln!(buf, "{}\t{}", rec.label, rec.text).expect("string write");
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(buf.as_bytes())?;
    Ok(())
}

/// Load `label TAB text` (single sentence) or `label TAB text1 TAB text2`
/// (pair tasks; segments joined with a [SEP] token). Labels must be
/// non-negative integers.
pub fn load_tsv(path: &Path) -> Result<Dataset> {
    let f = std::fs::File::open(path)?;
    let reader = BufReader::new(f);
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let (label_str, text) = match fields.len() {
            2 => (fields[0], fields[1].to_string()),
            3 => (fields[0], format!("{} {} {}", fields[1], SEP_TOKEN, fields[2])),
            _ => {
                return Err(Error::Format(format!(
                    "{}: line {}: expected 2 or 3 tab-separated fields, got {}",
                    path.display(),
                    lineno + 1,
                    fields.len()
                )))
            }
        };
        let label: usize = label_str.parse().map_err(|_| {
            Error::Format(format!(
                "{}: line {}: unknown label {label_str:?}",
                path.display(),
                lineno + 1
            ))
        })?;
        if text.trim().is_empty() {
            return Err(Error::Format(format!(
                "{}: line {}: empty text",
                path.display(),
                lineno + 1
            )));
        }
        records.push(LabeledText { text, label });
    }
    Ok(Dataset { records })
}

/// A tokenized mini-batch: row-major `n x l` token ids plus labels and the
/// originating sample indices.
#[derive(Clone, Debug)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub n: usize,
    pub l: usize,
    pub labels: Vec<usize>,
    pub sample_idx: Vec<usize>,
}

impl TokenBatch {
    /// 1.0 for real positions, 0.0 for padding.
    pub fn validity(&self) -> Vec<f64> {
        self.ids
            .iter()
            .map(|&id| if id == PAD_ID { 0.0 } else { 1.0 })
            .collect()
    }
}

/// Tokenize one text: [CLS] plus whitespace tokens, truncated to `l_max`.
pub fn tokenize(text: &str, vocab: &Vocab, l_max: usize) -> Vec<usize> {
    let mut ids = vec![CLS_ID];
    for tok in text.split_whitespace() {
        if ids.len() >= l_max {
            break;
        }
        ids.push(vocab.id(tok));
    }
    ids
}

/// Batch a dataset: [CLS]-prepended, padded to the batch max length
/// (<= l_max). Shuffling is deterministic per seed. Every sample appears in
/// exactly one batch; the final batch may be short.
pub fn make_batches(
    ds: &Dataset,
    vocab: &Vocab,
    batch_size: usize,
    l_max: usize,
    seed: u64,
    shuffle: bool,
) -> Result<Vec<TokenBatch>> {
    if ds.is_empty() {
        return Err(Error::Validation("make_batches: empty dataset".into()));
    }
    if batch_size == 0 || l_max < 2 {
        return Err(Error::Validation(
            "make_batches: batch_size must be > 0 and l_max >= 2".into(),
        ));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
    }
    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        let toks: Vec<Vec<usize>> = chunk
            .iter()
            .map(|&i| tokenize(&ds.records[i].text, vocab, l_max))
            .collect();
        let l = toks.iter().map(Vec::len).max().expect("non-empty chunk");
        let mut ids = vec![PAD_ID; chunk.len() * l];
        for (r, t) in toks.iter().enumerate() {
            ids[r * l..r * l + t.len()].copy_from_slice(t);
        }
        batches.push(TokenBatch {
            ids,
            n: chunk.len(),
            l,
            labels: chunk.iter().map(|&i| ds.records[i].label).collect(),
            sample_idx: chunk.to_vec(),
        });
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SynthSpec {
        SynthSpec {
            k: 2,
            n_train: 40,
            n_eval: 10,
            vocab_size: 30,
            signal_tokens_per_class: 4,
            seq_len: 8,
            noise_rate: 0.0,
            difficulty: Difficulty::Separable,
            overlap_rate: 0.3,
            seed: 7,
        }
    }

    #[test]
    fn bag_of_words_rule_is_exact_on_separable_data() {
        let data = generate_synthetic(&spec()).unwrap();
        let classify = |text: &str| -> usize {
            let mut counts = vec![0usize; data.spec.k];
            for tok in text.split_whitespace() {
                for (k, set) in data.signal_sets.iter().enumerate() {
                    if set.iter().any(|s| s == tok) {
                        counts[k] += 1;
                    }
                }
            }
            counts
                .iter()
                .enumerate()
                .max_by_key(|(_, &c)| c)
                .map(|(k, _)| k)
                .unwrap()
        };
        for rec in data.eval.records.iter().chain(&data.train.records) {
            assert_eq!(classify(&rec.text), rec.label);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&spec()).unwrap();
        let b = generate_synthetic(&spec()).unwrap();
        assert_eq!(a.train.records, b.train.records);
        assert_eq!(a.eval.records, b.eval.records);
    }

    #[test]
    fn class_counts_balanced_within_one() {
        let mut s = spec();
        s.k = 5;
        s.vocab_size = 60;
        s.n_train = 23;
        let data = generate_synthetic(&s).unwrap();
        let mut counts = vec![0usize; 5];
        for r in &data.train.records {
            counts[r.label] += 1;
        }
        let (min, max) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(max - min <= 1, "counts {counts:?}");
    }

    #[test]
    fn tsv_round_trip_preserves_records() {
        let data = generate_synthetic(&spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.tsv");
        save_tsv(&data.train, &path).unwrap();
        let loaded = load_tsv(&path).unwrap();
        assert_eq!(loaded.records, data.train.records);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tsv");
        std::fs::write(&path, "0\tok line\nno tab here\n").unwrap();
        let err = load_tsv(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "got: {msg}");
    }

    #[test]
    fn pair_task_lines_get_separator() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pair.tsv");
        std::fs::write(&path, "1\tfirst part\tsecond part\n").unwrap();
        let ds = load_tsv(&path).unwrap();
        assert_eq!(ds.records[0].text, "first part [SEP] second part");
    }

    #[test]
    fn batches_cover_each_sample_once_with_remainder() {
        let data = generate_synthetic(&spec()).unwrap();
        let vocab = Vocab::build(&data.train);
        let mut ds = Dataset::default();
        ds.records = data.train.records[..10].to_vec();
        let batches = make_batches(&ds, &vocab, 4, 16, 3, true).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.n).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.sample_idx.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn unshuffled_batches_preserve_order() {
        let data = generate_synthetic(&spec()).unwrap();
        let vocab = Vocab::build(&data.train);
        let batches = make_batches(&data.train, &vocab, 7, 16, 0, false).unwrap();
        let seen: Vec<usize> = batches.iter().flat_map(|b| b.sample_idx.clone()).collect();
        assert_eq!(seen, (0..data.train.len()).collect::<Vec<_>>());
    }

    #[test]
    fn unknown_tokens_map_to_unk() {
        let data = generate_synthetic(&spec()).unwrap();
        let vocab = Vocab::build(&data.train);
        let mut ds = Dataset::default();
        ds.records.push(LabeledText {
            text: "zzz yyy xxx".into(),
            label: 0,
        });
        let batches = make_batches(&ds, &vocab, 1, 8, 0, false).unwrap();
        assert_eq!(batches[0].ids[0], CLS_ID);
        assert!(batches[0].ids[1..].iter().all(|&id| id == UNK_ID));
    }

    #[test]
    fn token_ids_below_vocab_size() {
        let data = generate_synthetic(&spec()).unwrap();
        let vocab = Vocab::build(&data.train);
        for b in make_batches(&data.train, &vocab, 8, 16, 1, true).unwrap() {
            assert!(b.ids.iter().all(|&id| id < vocab.len()));
        }
    }

    #[test]
    fn vocab_rebuild_is_stable() {
        let data = generate_synthetic(&spec()).unwrap();
        let a = Vocab::build(&data.train);
        let b = Vocab::build(&data.train);
        assert_eq!(a.len(), b.len());
        for id in 0..a.len() {
            assert_eq!(a.token(id), b.token(id));
        }
    }
}
