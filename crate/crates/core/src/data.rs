//! Synthetic corpora with gold role spans, plus JSONL readers and writers for
//! corpora and embedding dumps.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::srl::{tag_rules, RoleLexicon, RoleSpans};
use crate::vocab::CLS;
use crate::{Error, Result};

/// Label stored for out-of-distribution examples.
pub const OOD_LABEL: i64 = -1;
pub const EMBEDDING_FORMAT: &str = "SRLOOD-EMB-v1";

pub const TRAIN_FILE: &str = "train.jsonl";
pub const VAL_FILE: &str = "val.jsonl";
pub const TEST_ID_FILE: &str = "test_id.jsonl";
pub const TEST_OOD_FILE: &str = "test_ood.jsonl";
pub const LEXICON_FILE: &str = "lexicon.json";

/// How the OOD test split is generated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OodKind {
    /// Every content word comes from a held-out vocabulary.
    #[default]
    DisjointLexicon,
    /// Agent from one class, verb and patient from another.
    RoleSwap,
    /// Fillers and punctuation only.
    FillerOnly,
}

impl FromStr for OodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disjoint-lexicon" => Ok(Self::DisjointLexicon),
            "role-swap" => Ok(Self::RoleSwap),
            "filler-only" => Ok(Self::FillerOnly),
            _ => Err(Error::Config(format!("unknown OOD kind '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LexiconSizes {
    pub agents: usize,
    pub verbs: usize,
    pub patients: usize,
}

impl LexiconSizes {
    fn frames(&self) -> usize {
        self.agents * self.verbs * self.patients
    }

    fn largest(&self) -> usize {
        self.agents.max(self.verbs).max(self.patients)
    }
}

/// Sentence shape: the maximum number of fillers before the agent, before
/// the verb, before the patient and after the patient, then punctuation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Template {
    pub gaps: [usize; 4],
    pub punct: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub num_classes: usize,
    pub train: usize,
    pub val: usize,
    pub test_id: usize,
    pub test_ood: usize,
    pub lexicon: LexiconSizes,
    pub fillers: Vec<String>,
    /// Probability that each filler slot of a template is used.
    pub filler_rate: f64,
    pub templates: Vec<Template>,
    pub ood_kind: OodKind,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        let template = |gaps, punct: &str| Template {
            gaps,
            punct: punct.into(),
        };
        Self {
            num_classes: 4,
            train: 200,
            val: 100,
            test_id: 200,
            test_ood: 200,
            lexicon: LexiconSizes {
                agents: 6,
                verbs: 6,
                patients: 6,
            },
            fillers: [
                "the", "a", "quite", "really", "then", "now", "today", "so", "just", "also", "again", "still",
            ]
            .map(String::from)
            .to_vec(),
            filler_rate: 0.5,
            templates: vec![
                template([1, 1, 1, 1], "."),
                template([2, 0, 1, 0], "."),
                template([0, 1, 1, 2], "!"),
                template([1, 2, 0, 1], "?"),
            ],
            ood_kind: OodKind::DisjointLexicon,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        if self.lexicon.agents == 0 || self.lexicon.verbs == 0 || self.lexicon.patients == 0 {
            return bad("every role needs at least one word per class");
        }
        if self.train == 0 || self.val == 0 {
            return bad("train and val splits must be non-empty");
        }
        if self.templates.is_empty() {
            return bad("at least one template is required");
        }
        if !(0.0..=1.0).contains(&self.filler_rate) {
            return bad("filler_rate must lie in [0, 1]");
        }
        if self.fillers.is_empty() && self.templates.iter().any(|t| t.gaps.iter().any(|&g| g > 0)) {
            return bad("templates with filler gaps need a filler vocabulary");
        }
        if self.ood_kind == OodKind::FillerOnly && self.fillers.is_empty() {
            return bad("filler-only OOD needs a filler vocabulary");
        }
        let per_class = (self.train + self.val + self.test_id).div_ceil(self.num_classes);
        if per_class > self.lexicon.frames() {
            return Err(Error::Config(format!(
                "lexicon too small: {per_class} distinct sentences needed per class, only {} role combinations available",
                self.lexicon.frames()
            )));
        }
        if self.ood_kind == OodKind::RoleSwap {
            let cover = 2 * self.num_classes * self.lexicon.largest();
            if self.test_ood < cover {
                return Err(Error::Config(format!(
                    "role-swap OOD needs at least {cover} examples to cover the ID vocabulary"
                )));
            }
        }
        let mut seen = BTreeSet::new();
        for w in &self.fillers {
            if !seen.insert(w.as_str()) || w == CLS || self.templates.iter().any(|t| &t.punct == w) {
                return Err(Error::Config(format!("filler '{w}' is duplicated or reserved")));
            }
        }
        Ok(())
    }
}

/// A tokenized sentence; label is a class index, or [`OOD_LABEL`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example {
    pub id: String,
    pub tokens: Vec<String>,
    pub label: i64,
    pub srl: RoleSpans,
}

impl Example {
    pub fn is_ood(&self) -> bool {
        self.label == OOD_LABEL
    }

    /// Class index of an in-distribution example.
    pub fn class(&self) -> Option<usize> {
        usize::try_from(self.label).ok()
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Error::InvalidExample {
            id: self.id.clone(),
            message: m,
        };
        if self.tokens.first().map(String::as_str) != Some(CLS) {
            return Err(invalid(format!("first token must be {CLS}")));
        }
        if self.label < OOD_LABEL {
            return Err(invalid(format!("label {} is neither a class nor {OOD_LABEL}", self.label)));
        }
        self.srl.clone().validated(&self.id)?;
        self.srl.check_len(&self.id, self.tokens.len())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test_id: Vec<Example>,
    pub test_ood: Vec<Example>,
    pub lexicon: RoleLexicon,
}

struct Words {
    agents: Vec<Vec<String>>,
    verbs: Vec<Vec<String>>,
    patients: Vec<Vec<String>>,
}

impl Words {
    fn new(prefix: &str, groups: usize, sizes: &LexiconSizes) -> Self {
        let make = |role: &str, n: usize| -> Vec<Vec<String>> {
            (0..groups)
                .map(|c| (0..n).map(|k| format!("{prefix}{role}{c}_{k}")).collect())
                .collect()
        };
        Self {
            agents: make("agent", sizes.agents),
            verbs: make("verb", sizes.verbs),
            patients: make("patient", sizes.patients),
        }
    }

    fn flat(words: &[Vec<String>]) -> impl Iterator<Item = &String> {
        words.iter().flatten()
    }
}

struct Realizer<'a> {
    spec: &'a CorpusSpec,
}

impl Realizer<'_> {
    fn fillers(&self, rng: &mut ChaCha8Rng, max: usize, out: &mut Vec<String>) {
        for _ in 0..max {
            if rng.random_bool(self.spec.filler_rate) {
                out.push(self.spec.fillers.choose(rng).expect("validated").clone());
            }
        }
    }

    /// `[CLS] filler* A0 filler* V filler* A1 filler* punct`. Missing content
    /// words are skipped; their gaps stay.
    fn sentence(&self, rng: &mut ChaCha8Rng, content: [Option<&str>; 3]) -> (Vec<String>, RoleSpans) {
        let t = self.spec.templates.choose(rng).expect("validated");
        let mut tokens = vec![CLS.to_string()];
        let mut pos: [Vec<usize>; 3] = Default::default();
        for (slot, word) in content.iter().enumerate() {
            self.fillers(rng, t.gaps[slot], &mut tokens);
            if let Some(w) = word {
                pos[slot].push(tokens.len());
                tokens.push(w.to_string());
            }
        }
        self.fillers(rng, t.gaps[3], &mut tokens);
        tokens.push(t.punct.clone());
        let [a0, v, a1] = pos;
        let spans = RoleSpans::new(a0, v, a1).expect("generated spans are disjoint");
        (tokens, spans)
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Generates the four splits. Every in-distribution sentence uses a distinct
/// (agent, verb, patient) triple of its class, so no sentence is shared
/// between splits.
pub fn gen_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let c_n = spec.num_classes;
    let sz = &spec.lexicon;
    let id_words = Words::new("", c_n, sz);
    let ood_words = Words::new("x", c_n, sz);
    let realizer = Realizer { spec };

    let counts = [spec.train, spec.val, spec.test_id];
    let total: usize = counts.iter().sum();
    let per_class: Vec<usize> = (0..c_n).map(|c| (total + c_n - 1 - c) / c_n).collect();

    // distinct frames per class, the first few chosen so every word occurs
    let mut frame_rng = stream(spec.seed, 1);
    let mut frames: Vec<Vec<[usize; 3]>> = Vec::with_capacity(c_n);
    for &need in &per_class {
        let cover: Vec<[usize; 3]> = (0..sz.largest().min(need))
            .map(|i| [i % sz.agents, i % sz.verbs, i % sz.patients])
            .collect();
        let mut rest: Vec<[usize; 3]> = (0..sz.frames())
            .map(|f| [f / (sz.verbs * sz.patients), (f / sz.patients) % sz.verbs, f % sz.patients])
            .filter(|f| !cover.contains(f))
            .collect();
        rest.shuffle(&mut frame_rng);
        let mut chosen = cover;
        chosen.extend(rest.into_iter().take(need - chosen.len()));
        chosen.shuffle(&mut frame_rng);
        frames.push(chosen);
    }

    let mut order: Vec<usize> = (0..total).map(|k| k % c_n).collect();
    order.shuffle(&mut stream(spec.seed, 2));
    let mut next = vec![0usize; c_n];
    let mut sent_rng = stream(spec.seed, 3);
    let mut splits: Vec<Vec<Example>> = Vec::with_capacity(3);
    let mut labels = order.into_iter();
    for (name, &n) in ["train", "val", "test_id"].iter().zip(&counts) {
        let mut split = Vec::with_capacity(n);
        for k in 0..n {
            let c = labels.next().expect("sized to the total");
            let [a, v, p] = frames[c][next[c]];
            next[c] += 1;
            let content = [
                Some(id_words.agents[c][a].as_str()),
                Some(id_words.verbs[c][v].as_str()),
                Some(id_words.patients[c][p].as_str()),
            ];
            let (tokens, srl) = realizer.sentence(&mut sent_rng, content);
            split.push(Example {
                id: format!("{name}-{k:06}"),
                tokens,
                label: c as i64,
                srl,
            });
        }
        splits.push(split);
    }

    let mut ood_rng = stream(spec.seed, 4);
    let test_ood = gen_ood(spec, &realizer, &id_words, &ood_words, &mut ood_rng);

    let mut lexicon = RoleLexicon::default();
    for w in [&id_words, &ood_words] {
        lexicon.agents.extend(Words::flat(&w.agents).cloned());
        lexicon.verbs.extend(Words::flat(&w.verbs).cloned());
        lexicon.patients.extend(Words::flat(&w.patients).cloned());
    }
    lexicon.validate()?;

    let test_id = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(Corpus {
        train,
        val,
        test_id,
        test_ood,
        lexicon,
    })
}

fn gen_ood(
    spec: &CorpusSpec,
    realizer: &Realizer<'_>,
    id_words: &Words,
    ood_words: &Words,
    rng: &mut ChaCha8Rng,
) -> Vec<Example> {
    let c_n = spec.num_classes;
    let mut content: Vec<[Option<String>; 3]> = Vec::with_capacity(spec.test_ood);
    match spec.ood_kind {
        OodKind::DisjointLexicon => {
            let pick = |rng: &mut ChaCha8Rng, w: &[Vec<String>]| Some(w.choose(rng).unwrap().choose(rng).unwrap().clone());
            for _ in 0..spec.test_ood {
                content.push([
                    pick(rng, &ood_words.agents),
                    pick(rng, &ood_words.verbs),
                    pick(rng, &ood_words.patients),
                ]);
            }
        }
        OodKind::FillerOnly => content.resize(spec.test_ood, [None, None, None]),
        OodKind::RoleSwap => {
            let other = |rng: &mut ChaCha8Rng, c: usize| (c + rng.random_range(1..c_n)) % c_n;
            let any = |rng: &mut ChaCha8Rng, w: &[String]| w.choose(rng).unwrap().clone();
            let frame = |a: &String, v: &String, p: &String| [Some(a.clone()), Some(v.clone()), Some(p.clone())];
            let n = spec.lexicon.largest();
            // cover every verb and patient, then every agent
            for c2 in 0..c_n {
                for i in 0..n {
                    let c1 = other(rng, c2);
                    let a = any(rng, &id_words.agents[c1]);
                    let v = &id_words.verbs[c2][i % spec.lexicon.verbs];
                    let p = &id_words.patients[c2][i % spec.lexicon.patients];
                    content.push(frame(&a, v, p));
                }
            }
            for c1 in 0..c_n {
                for i in 0..n {
                    let c2 = other(rng, c1);
                    let a = &id_words.agents[c1][i % spec.lexicon.agents];
                    let (v, p) = (any(rng, &id_words.verbs[c2]), any(rng, &id_words.patients[c2]));
                    content.push(frame(a, &v, &p));
                }
            }
            while content.len() < spec.test_ood {
                let c1 = rng.random_range(0..c_n);
                let c2 = other(rng, c1);
                let a = any(rng, &id_words.agents[c1]);
                let (v, p) = (any(rng, &id_words.verbs[c2]), any(rng, &id_words.patients[c2]));
                content.push(frame(&a, &v, &p));
            }
            content.shuffle(rng);
        }
    }
    content
        .iter()
        .enumerate()
        .map(|(k, words)| {
            let refs = [words[0].as_deref(), words[1].as_deref(), words[2].as_deref()];
            let (tokens, srl) = realizer.sentence(rng, refs);
            Example {
                id: format!("test_ood-{k:06}"),
                tokens,
                label: OOD_LABEL,
                srl,
            }
        })
        .collect()
}

/// Checks that every example's gold spans equal the rule tagger's output.
pub fn check_spans_against_tagger(examples: &[Example], lexicon: &RoleLexicon) -> Result<()> {
    for ex in examples {
        let tagged = tag_rules(&ex.tokens, lexicon)?;
        if tagged != ex.srl {
            return Err(Error::InvalidExample {
                id: ex.id.clone(),
                message: "gold spans disagree with the rule tagger".into(),
            });
        }
    }
    Ok(())
}

/// Splits a mixed list into (in-distribution, OOD).
pub fn partition_ood(examples: Vec<Example>) -> (Vec<Example>, Vec<Example>) {
    examples.into_iter().partition(|e| !e.is_ood())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_line<T: Serialize>(w: &mut BufWriter<File>, path: &Path, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    writeln!(w).map_err(|e| Error::io(path, e))
}

/// Non-blank lines of a file as (1-based line number, parsed value).
fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push((n + 1, value));
    }
    Ok(out)
}

pub fn write_corpus(examples: &[Example], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    for ex in examples {
        write_line(&mut w, path, ex)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads and validates a JSONL corpus.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Example>> {
    let path = path.as_ref();
    let records: Vec<(usize, Example)> = read_jsonl(path)?;
    let mut ids = BTreeSet::new();
    let mut out = Vec::with_capacity(records.len());
    for (_, ex) in records {
        ex.validate()?;
        if !ids.insert(ex.id.clone()) {
            return Err(Error::InvalidExample {
                id: ex.id,
                message: "duplicate id".into(),
            });
        }
        out.push(ex);
    }
    Ok(out)
}

/// Writes the four split files and the lexicon into `dir`.
pub fn write_corpus_dir(corpus: &Corpus, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    write_corpus(&corpus.train, dir.join(TRAIN_FILE))?;
    write_corpus(&corpus.val, dir.join(VAL_FILE))?;
    write_corpus(&corpus.test_id, dir.join(TEST_ID_FILE))?;
    write_corpus(&corpus.test_ood, dir.join(TEST_OOD_FILE))?;
    let path = dir.join(LEXICON_FILE);
    let mut w = create(&path)?;
    serde_json::to_writer_pretty(&mut w, &corpus.lexicon)?;
    w.flush().map_err(|e| Error::io(&path, e))
}

/// Reads a directory written by [`write_corpus_dir`]. Test splits and the
/// lexicon are optional and come back empty when absent.
pub fn load_corpus_dir(dir: impl AsRef<Path>) -> Result<Corpus> {
    let dir = dir.as_ref();
    let optional = |name: &str| -> Result<Vec<Example>> {
        let p = dir.join(name);
        if p.exists() {
            load_corpus(p)
        } else {
            Ok(Vec::new())
        }
    };
    let lex_path = dir.join(LEXICON_FILE);
    let lexicon = if lex_path.exists() {
        let text = fs::read_to_string(&lex_path).map_err(|e| Error::io(&lex_path, e))?;
        let lex: RoleLexicon = serde_json::from_str(&text)?;
        lex.validate()?;
        lex
    } else {
        RoleLexicon::default()
    };
    Ok(Corpus {
        train: load_corpus(dir.join(TRAIN_FILE))?,
        val: load_corpus(dir.join(VAL_FILE))?,
        test_id: optional(TEST_ID_FILE)?,
        test_ood: optional(TEST_OOD_FILE)?,
        lexicon,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingRecord {
    pub id: String,
    pub label: i64,
    pub h: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingHeader {
    format: String,
    d: usize,
}

/// Representation vectors of a corpus, all of length `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingDump {
    pub d: usize,
    pub records: Vec<EmbeddingRecord>,
}

impl EmbeddingDump {
    pub fn new(d: usize, records: Vec<EmbeddingRecord>) -> Result<Self> {
        for r in &records {
            if r.h.len() != d {
                return Err(Error::DimMismatch {
                    expected: d,
                    got: r.h.len(),
                });
            }
        }
        Ok(Self { d, records })
    }

    /// In-distribution (feature, class) pairs, for detector fitting.
    pub fn labelled(&self) -> Vec<(Vec<f64>, usize)> {
        self.records
            .iter()
            .filter_map(|r| usize::try_from(r.label).ok().map(|c| (r.h.clone(), c)))
            .collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = create(path)?;
        let header = EmbeddingHeader {
            format: EMBEDDING_FORMAT.into(),
            d: self.d,
        };
        write_line(&mut w, path, &header)?;
        for r in &self.records {
            write_line(&mut w, path, r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let lines: Vec<(usize, serde_json::Value)> = read_jsonl(path)?;
        let mut it = lines.into_iter();
        let (_, head) = it.next().ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "missing header".into(),
        })?;
        let header: EmbeddingHeader = serde_json::from_value(head)?;
        if header.format != EMBEDDING_FORMAT {
            return Err(Error::Format {
                expected: EMBEDDING_FORMAT.into(),
                found: header.format,
            });
        }
        let mut records = Vec::new();
        for (line, v) in it {
            let r: EmbeddingRecord = serde_json::from_value(v).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line,
                message: e.to_string(),
            })?;
            if r.h.len() != header.d {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("vector has length {}, header says {}", r.h.len(), header.d),
                });
            }
            records.push(r);
        }
        Ok(Self {
            d: header.d,
            records,
        })
    }
}
