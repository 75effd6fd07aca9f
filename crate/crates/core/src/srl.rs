//! Semantic role spans (A0 / V / A1), rule-based tagging, span-file
//! ingestion and mask sampling for the role-prediction pretext task.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// The three PropBank roles the model pools over. The discriminant is the
/// class index used by the role-prediction head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    A0 = 0,
    V = 1,
    A1 = 2,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::A0, Role::V, Role::A1];

    pub fn label(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::A0 => "A0",
            Role::V => "V",
            Role::A1 => "A1",
        }
    }
}

/// Token positions of each role in one sentence. Position 0 is `[CLS]` and
/// never belongs to a role; the three sets are pairwise disjoint.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleSpans {
    #[serde(rename = "A0")]
    a0: Vec<usize>,
    #[serde(rename = "V")]
    v: Vec<usize>,
    #[serde(rename = "A1")]
    a1: Vec<usize>,
}

fn normalize(mut idx: Vec<usize>) -> Vec<usize> {
    idx.sort_unstable();
    idx.dedup();
    idx
}

impl RoleSpans {
    /// Builds validated spans. `context` names the example in error messages.
    pub fn new(a0: Vec<usize>, v: Vec<usize>, a1: Vec<usize>) -> Result<Self> {
        let spans = Self {
            a0: normalize(a0),
            v: normalize(v),
            a1: normalize(a1),
        };
        spans.check("<unnamed>")?;
        Ok(spans)
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn get(&self, role: Role) -> &[usize] {
        match role {
            Role::A0 => &self.a0,
            Role::V => &self.v,
            Role::A1 => &self.a1,
        }
    }

    pub fn is_present(&self, role: Role) -> bool {
        !self.get(role).is_empty()
    }

    /// Union of all role positions, sorted.
    pub fn all_positions(&self) -> Vec<usize> {
        normalize(
            self.a0
                .iter()
                .chain(&self.v)
                .chain(&self.a1)
                .copied()
                .collect(),
        )
    }

    fn check(&self, id: &str) -> Result<()> {
        let all: Vec<usize> = self.a0.iter().chain(&self.v).chain(&self.a1).copied().collect();
        if all.contains(&0) {
            return Err(Error::InvalidExample {
                id: id.to_string(),
                message: "role span includes the [CLS] position 0".into(),
            });
        }
        let unique: BTreeSet<usize> = all.iter().copied().collect();
        if unique.len() != all.len() {
            return Err(Error::OverlappingRoles(id.to_string()));
        }
        Ok(())
    }

    /// Re-establishes the invariants after deserialization.
    pub fn validated(self, id: &str) -> Result<Self> {
        let spans = Self {
            a0: normalize(self.a0),
            v: normalize(self.v),
            a1: normalize(self.a1),
        };
        // normalize drops duplicates inside a role; overlap across roles is an error
        spans.check(id)?;
        Ok(spans)
    }

    /// Checks every index against a sentence length.
    pub fn check_len(&self, id: &str, len: usize) -> Result<()> {
        if let Some(&i) = self.a0.iter().chain(&self.v).chain(&self.a1).find(|&&i| i >= len) {
            return Err(Error::InvalidExample {
                id: id.to_string(),
                message: format!("role index {i} outside sentence of length {len}"),
            });
        }
        Ok(())
    }
}

/// Which roles of one sentence are replaced by the MASK vector, and the
/// role labels the pretext head must recover.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MaskSpec {
    pub masked_roles: Vec<Role>,
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

impl MaskSpec {
    pub fn none() -> Self {
        Self::default()
    }

    /// Masks exactly the given roles of `spans`.
    pub fn for_roles(spans: &RoleSpans, roles: &[Role]) -> Self {
        let mut masked_roles: Vec<Role> = roles.iter().copied().filter(|r| spans.is_present(*r)).collect();
        masked_roles.sort();
        masked_roles.dedup();
        let positions = normalize(
            masked_roles
                .iter()
                .flat_map(|r| spans.get(*r).iter().copied())
                .collect(),
        );
        let targets = masked_roles.iter().map(|r| r.label()).collect();
        Self {
            masked_roles,
            positions,
            targets,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.masked_roles.is_empty()
    }
}

/// Selects each present role independently with probability `p_mask`; a
/// selected role is masked over its whole span.
pub fn sample_mask<R: Rng + ?Sized>(spans: &RoleSpans, p_mask: f64, rng: &mut R) -> Result<MaskSpec> {
    if !(0.0..=1.0).contains(&p_mask) {
        return Err(Error::Config(format!("masking probability {p_mask} outside [0, 1]")));
    }
    let mut roles = Vec::new();
    for role in Role::ALL {
        if spans.is_present(role) && rng.random_bool(p_mask) {
            roles.push(role);
        }
    }
    Ok(MaskSpec::for_roles(spans, &roles))
}

/// Word lists that decide role membership for rule-based tagging.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleLexicon {
    pub agents: BTreeSet<String>,
    pub verbs: BTreeSet<String>,
    pub patients: BTreeSet<String>,
}

impl RoleLexicon {
    pub fn new<I, S>(agents: I, verbs: I, patients: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let lex = Self {
            agents: agents.into_iter().map(Into::into).collect(),
            verbs: verbs.into_iter().map(Into::into).collect(),
            patients: patients.into_iter().map(Into::into).collect(),
        };
        lex.validate()?;
        Ok(lex)
    }

    pub fn validate(&self) -> Result<()> {
        for w in &self.agents {
            self.role_of(w)?;
        }
        for w in &self.verbs {
            self.role_of(w)?;
        }
        Ok(())
    }

    /// Role of a token, `None` for fillers and punctuation.
    pub fn role_of(&self, token: &str) -> Result<Option<Role>> {
        let hits = [
            (self.agents.contains(token), Role::A0),
            (self.verbs.contains(token), Role::V),
            (self.patients.contains(token), Role::A1),
        ];
        let mut found = hits.iter().filter(|(hit, _)| *hit).map(|(_, r)| *r);
        let first = found.next();
        if found.next().is_some() {
            return Err(Error::AmbiguousLexicon(token.to_string()));
        }
        Ok(first)
    }
}

/// Tags a tokenized sentence (position 0 is `[CLS]`) by lexicon lookup.
pub fn tag_rules<S: AsRef<str>>(tokens: &[S], lexicon: &RoleLexicon) -> Result<RoleSpans> {
    let mut spans = RoleSpans::empty();
    for (i, tok) in tokens.iter().enumerate().skip(1) {
        match lexicon.role_of(tok.as_ref())? {
            Some(Role::A0) => spans.a0.push(i),
            Some(Role::V) => spans.v.push(i),
            Some(Role::A1) => spans.a1.push(i),
            None => {}
        }
    }
    Ok(spans)
}

#[derive(Serialize, Deserialize)]
struct SpanRecord {
    id: String,
    #[serde(flatten)]
    spans: RoleSpans,
}

/// Reads a JSONL span file: `{"id": .., "A0": [..], "V": [..], "A1": [..]}` per line.
pub fn load_spans(path: impl AsRef<Path>) -> Result<BTreeMap<String, RoleSpans>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SpanRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        let spans = rec.spans.validated(&rec.id)?;
        out.insert(rec.id, spans);
    }
    Ok(out)
}

pub fn write_spans<'a, I>(path: impl AsRef<Path>, spans: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a RoleSpans)>,
{
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (id, s) in spans {
        let rec = SpanRecord {
            id: id.to_string(),
            spans: s.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        writeln!(w).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn kitchen() -> RoleLexicon {
        RoleLexicon::new(vec!["chef"], vec!["grills"], vec!["salmon"]).unwrap()
    }

    #[test]
    fn tags_the_kitchen_sentence() {
        let toks = "[CLS] the chef slowly grills the salmon !".split(' ').collect::<Vec<_>>();
        let s = tag_rules(&toks, &kitchen()).unwrap();
        assert_eq!(s, RoleSpans::new(vec![2], vec![4], vec![6]).unwrap());
    }

    #[test]
    fn fillers_only_gives_empty_spans() {
        let toks = ["[CLS]", "the", "really", "!"];
        assert_eq!(tag_rules(&toks, &kitchen()).unwrap(), RoleSpans::empty());
    }

    #[test]
    fn ambiguous_lexicon_is_rejected() {
        let lex = RoleLexicon {
            agents: ["cook".to_string()].into(),
            verbs: ["cook".to_string()].into(),
            patients: BTreeSet::new(),
        };
        assert!(lex.validate().is_err());
        let err = tag_rules(&["[CLS]", "cook"], &lex).unwrap_err();
        assert!(err.to_string().contains("ambiguous-lexicon"));
    }

    #[test]
    fn tagging_is_position_independent() {
        let lex = kitchen();
        let a = tag_rules(&["[CLS]", "chef", "grills", "salmon"], &lex).unwrap();
        let b = tag_rules(&["[CLS]", "um", "chef", "well", "grills", "salmon", "."], &lex).unwrap();
        assert_eq!(a.get(Role::A0), &[1]);
        assert_eq!(b.get(Role::A0), &[2]);
        assert_eq!(b.get(Role::V), &[4]);
        assert_eq!(b.get(Role::A1), &[5]);
    }

    #[test]
    fn overlapping_and_cls_spans_are_invalid() {
        assert!(matches!(
            RoleSpans::new(vec![2], vec![2], vec![]),
            Err(Error::OverlappingRoles(_))
        ));
        assert!(RoleSpans::new(vec![0], vec![], vec![]).is_err());
    }

    #[test]
    fn mask_extremes() {
        let spans = RoleSpans::new(vec![1, 2], vec![4], vec![6]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let none = sample_mask(&spans, 0.0, &mut rng).unwrap();
        assert!(none.masked_roles.is_empty() && none.positions.is_empty());
        let all = sample_mask(&spans, 1.0, &mut rng).unwrap();
        assert_eq!(all.masked_roles, Role::ALL.to_vec());
        assert_eq!(all.positions, vec![1, 2, 4, 6]);
        assert_eq!(all.targets, vec![0, 1, 2]);
        assert!(sample_mask(&spans, 1.5, &mut rng).is_err());
    }

    #[test]
    fn absent_roles_are_never_masked() {
        let spans = RoleSpans::new(vec![], vec![3], vec![]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = sample_mask(&spans, 1.0, &mut rng).unwrap();
        assert_eq!(m.masked_roles, vec![Role::V]);
        assert_eq!(m.targets, vec![1]);
    }

    #[test]
    fn mask_frequency_matches_probability() {
        let spans = RoleSpans::new(vec![1], vec![2], vec![3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let draws = 10_000;
        let mut counts = [0usize; 3];
        for _ in 0..draws {
            for r in sample_mask(&spans, 0.5, &mut rng).unwrap().masked_roles {
                counts[r.label()] += 1;
            }
        }
        for c in counts {
            let f = c as f64 / draws as f64;
            assert!((f - 0.5).abs() <= 0.02, "frequency {f}");
        }
    }

    #[test]
    fn span_file_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("spans.jsonl");
        std::fs::write(&p, "{\"id\":\"x1\",\"A0\":[2],\"V\":[4],\"A1\":[6]}\n").unwrap();
        let m = load_spans(&p).unwrap();
        assert_eq!(m["x1"], RoleSpans::new(vec![2], vec![4], vec![6]).unwrap());

        std::fs::write(&p, "{\"id\":\"x2\",\"A0\":[2],\"V\":[2],\"A1\":[]}\n").unwrap();
        let err = load_spans(&p).unwrap_err();
        assert!(err.to_string().contains("overlapping roles") && err.to_string().contains("x2"));

        std::fs::write(&p, "{\"id\":\"ok\",\"A0\":[],\"V\":[],\"A1\":[]}\n{not json\n").unwrap();
        match load_spans(&p).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }
}
