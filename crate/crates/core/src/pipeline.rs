//! Training loop with periodic detector fitting and checkpoint selection,
//! evaluation reports, embedding export and the masking-probability sweep.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use ndiff::{Graph, NodeId, Params, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingDump, EmbeddingRecord, Example};
use crate::detector::{Detector, DetectorConfig, Scorer};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::losses::{margin_loss, total_loss, LossWeights};
use crate::metrics::{auroc, far95, ScoreSample};
use crate::optim::{AdamW, AdamWConfig, LinearSchedule};
use crate::srl::{sample_mask, RoleSpans};
use crate::vocab::Vocab;
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "SRLOOD-CKPT-v1";

/// Sub-stream tags passed to [`derive_seed`].
pub const INIT_STREAM: u64 = 0;
pub const SHUFFLE_STREAM: u64 = 1;
pub const MASK_STREAM: u64 = 2;

/// Criterion for picking the best checkpoint among periodic evaluations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    #[default]
    ValAccuracy,
    /// Mahalanobis AUROC of val (ID) against a held-out dev OOD set.
    DevMahaAuroc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub loss: LossWeights,
    pub p_mask: f64,
    pub optimizer: AdamWConfig,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Evaluate every this many updates; 0 means once per epoch.
    pub eval_steps: usize,
    pub seed: u64,
    pub selection: Selection,
    pub detector: DetectorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            loss: LossWeights::default(),
            p_mask: 0.3,
            optimizer: AdamWConfig::default(),
            lr: 3e-4,
            warmup_ratio: 0.06,
            batch_size: 12,
            epochs: 10,
            eval_steps: 0,
            seed: 0,
            selection: Selection::ValAccuracy,
            detector: DetectorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.p_mask) {
            return Err(Error::Config(format!("p_mask {} outside [0, 1]", self.p_mask)));
        }
        if !matches!(self.detector.fit_on.as_str(), "val" | "train+val") {
            return Err(Error::Config(format!("unknown fit_on '{}'", self.detector.fit_on)));
        }
        self.loss.validate()?;
        self.optimizer.validate()?;
        LinearSchedule::new(self.lr, self.warmup_ratio, 1)?;
        Ok(())
    }
}

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent seed for a tagged sub-stream of the run seed.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix(seed), |acc, &t| splitmix(acc ^ t))
}

/// Shuffled mini-batches for the whole run. A trailing batch of one example
/// is dropped, since the margin loss needs pairs.
pub fn batch_schedule(n: usize, batch_size: usize, epochs: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[SHUFFLE_STREAM]));
    let mut out = Vec::new();
    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        out.extend(order.chunks(batch_size).filter(|c| c.len() >= 2).map(<[usize]>::to_vec));
    }
    out
}

/// Rng for the role mask of one example at one update.
pub fn mask_rng(seed: u64, step: usize, example: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[MASK_STREAM, step as u64, example as u64]))
}

/// A trained model with everything needed to encode new text.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub step: usize,
    pub model: EncoderParams,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    config: TrainConfig,
    vocab: Vocab,
    step: usize,
    params: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn feature_dim(&self) -> usize {
        self.model.config().feature_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.model.config().num_classes
    }

    pub fn token_ids(&self, ex: &Example) -> Vec<usize> {
        self.vocab.encode(&ex.tokens)
    }

    /// Representation `h` of every example (clean forward pass).
    pub fn features(&self, examples: &[Example]) -> Result<Vec<Vec<f64>>> {
        features(&self.model, &self.vocab, examples)
    }

    /// Arg-max class of each feature vector.
    pub fn predict(&self, features: &[Vec<f64>]) -> Result<Vec<usize>> {
        features
            .iter()
            .map(|h| {
                let logits = self.model.id_logits(h)?;
                Ok(argmax(&logits))
            })
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            step: self.step,
            params: self.model.params().iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
        };
        write_json(path, &file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: CheckpointFile = serde_json::from_str(&text)?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::Format {
                expected: CHECKPOINT_FORMAT.into(),
                found: file.format,
            });
        }
        let mut params = Params::new();
        for (k, v) in file.params {
            params.insert(k, v);
        }
        file.config.encoder.validate()?;
        if file.config.encoder.vocab_size != file.vocab.len() {
            return Err(Error::DimMismatch {
                expected: file.config.encoder.vocab_size,
                got: file.vocab.len(),
            });
        }
        let model = EncoderParams::from_parts(file.config.encoder.clone(), params)?;
        Ok(Self {
            config: file.config,
            vocab: file.vocab,
            step: file.step,
            model,
        })
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, value)?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Representation `h` of every example under `model`.
pub fn features(model: &EncoderParams, vocab: &Vocab, examples: &[Example]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(64) {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false)?;
        for ex in chunk {
            let enc = bound.encode(&mut g, &vocab.encode(&ex.tokens), None)?;
            let pooled = bound.pool(&mut g, &enc, &ex.srl)?;
            out.push(g.value(pooled.h).data().to_vec());
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub l_id: f64,
    pub l_margin: f64,
    pub l_ssl: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalLog {
    /// Number of updates applied when the evaluation ran.
    pub step: usize,
    pub val_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dev_maha_auroc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    pub evals: Vec<EvalLog>,
    pub best_step: usize,
}

pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub detector: Detector,
    pub log: TrainLog,
}

struct Prepared {
    ids: Vec<usize>,
    spans: RoleSpans,
    label: usize,
}

fn class_of(ex: &Example, num_classes: usize) -> Result<usize> {
    match ex.class() {
        Some(c) if c < num_classes => Ok(c),
        _ => Err(Error::InvalidExample {
            id: ex.id.clone(),
            message: format!("label {} is not a class below {num_classes}", ex.label),
        }),
    }
}

fn labelled(examples: &[Example], feats: Vec<Vec<f64>>, num_classes: usize) -> Result<Vec<(Vec<f64>, usize)>> {
    examples
        .iter()
        .zip(feats)
        .map(|(ex, h)| Ok((h, class_of(ex, num_classes)?)))
        .collect()
}

/// Losses of one update, before weighting.
struct StepLosses {
    l_id: f64,
    l_margin: f64,
    l_ssl: f64,
    total: f64,
}

fn batch_step(
    model: &EncoderParams,
    batch: &[(usize, &Prepared)],
    config: &TrainConfig,
    xi: f64,
    step: usize,
) -> Result<(StepLosses, BTreeMap<String, Tensor>)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true)?;
    let w = &config.loss;

    let mut ces = Vec::with_capacity(batch.len());
    let mut hs = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for (_, ex) in batch {
        let enc = bound.encode(&mut g, &ex.ids, None)?;
        let pooled = bound.pool(&mut g, &enc, &ex.spans)?;
        let logits = bound.id_logits(&mut g, pooled.h)?;
        ces.push(g.cross_entropy(logits, ex.label)?);
        hs.push(pooled.h);
        labels.push(ex.label);
    }
    let sum = g.add_many(&ces)?;
    let l_id = g.scale(sum, 1.0 / batch.len() as f64)?;
    let l_margin = if w.alpha2 != 0.0 {
        Some(margin_loss(&mut g, &hs, &labels, xi)?)
    } else {
        None
    };

    let mut l_ssl = None;
    if w.alpha3 != 0.0 && config.p_mask > 0.0 {
        let mut role_ces: Vec<NodeId> = Vec::new();
        for (idx, ex) in batch {
            let mut rng = mask_rng(config.seed, step, *idx);
            let mask = sample_mask(&ex.spans, config.p_mask, &mut rng)?;
            if mask.is_empty() {
                continue;
            }
            let enc = bound.encode(&mut g, &ex.ids, Some(&mask))?;
            for role in &mask.masked_roles {
                let mean = g.mean_over_indices(enc.hidden, ex.spans.get(*role))?;
                let logits = bound.ssl_logits(&mut g, mean)?;
                role_ces.push(g.cross_entropy(logits, role.label())?);
            }
        }
        if !role_ces.is_empty() {
            let s = g.add_many(&role_ces)?;
            l_ssl = Some(g.scale(s, 1.0 / role_ces.len() as f64)?);
        }
    }

    let total = total_loss(&mut g, l_id, l_margin, l_ssl, w)?;
    let value = |g: &Graph, n: Option<NodeId>| n.map_or(Ok(0.0), |n| g.scalar(n));
    let losses = StepLosses {
        l_id: g.scalar(l_id)?,
        l_margin: value(&g, l_margin)?,
        l_ssl: value(&g, l_ssl)?,
        total: g.scalar(total)?,
    };
    if !losses.total.is_finite() {
        return Err(Error::NonFiniteLoss { step });
    }
    let grads = g.backward(total)?;
    Ok((losses, grads))
}

struct Snapshot {
    val_accuracy: f64,
    dev_maha_auroc: Option<f64>,
    detector: Detector,
}

fn snapshot(
    model: &EncoderParams,
    vocab: &Vocab,
    config: &TrainConfig,
    train: &[Example],
    val: &[Example],
    dev_ood: Option<&[Example]>,
) -> Result<Snapshot> {
    let c = model.config().num_classes;
    let val_feats = features(model, vocab, val)?;
    let mut correct = 0;
    for (ex, h) in val.iter().zip(&val_feats) {
        if argmax(&model.id_logits(h)?) == class_of(ex, c)? {
            correct += 1;
        }
    }
    let mut fit = labelled(val, val_feats.clone(), c)?;
    if config.detector.fit_on == "train+val" {
        let mut both = labelled(train, features(model, vocab, train)?, c)?;
        both.append(&mut fit);
        fit = both;
    }
    let detector = Detector::fit(&fit, c, Some(model.classifier_rows()), config.detector.clone())?;
    let dev_maha_auroc = match dev_ood {
        Some(dev) => {
            let id: Vec<f64> = val_feats
                .iter()
                .map(|h| Ok(detector.score_maha(h)?.value))
                .collect::<Result<_>>()?;
            let ood: Vec<f64> = features(model, vocab, dev)?
                .iter()
                .map(|h| Ok(detector.score_maha(h)?.value))
                .collect::<Result<_>>()?;
            Some(auroc(&ScoreSample::new(id, ood)?))
        }
        None => None,
    };
    Ok(Snapshot {
        val_accuracy: correct as f64 / val.len() as f64,
        dev_maha_auroc,
        detector,
    })
}

/// Trains from scratch and returns the best checkpoint (ties go to the
/// later evaluation), its detector fitted on val features, and the log.
pub fn train(config: &TrainConfig, train: &[Example], val: &[Example], dev_ood: Option<&[Example]>) -> Result<TrainOutput> {
    config.validate()?;
    if val.is_empty() {
        return Err(Error::Invalid("empty val split".into()));
    }
    if train.len() < 2 {
        return Err(Error::Invalid("training needs at least two examples".into()));
    }
    if config.selection == Selection::DevMahaAuroc && dev_ood.is_none_or(<[Example]>::is_empty) {
        return Err(Error::Config("dev-maha-auroc selection needs a dev OOD set".into()));
    }

    let vocab = Vocab::build(train.iter().chain(val).flat_map(|e| e.tokens.iter().map(String::as_str)));
    let enc_config = EncoderConfig {
        vocab_size: vocab.len(),
        seed: derive_seed(config.seed, &[INIT_STREAM]),
        ..config.encoder.clone()
    };
    let mut model = EncoderParams::init(enc_config.clone())?;
    let run_config = TrainConfig {
        encoder: enc_config,
        ..config.clone()
    };
    let num_classes = run_config.encoder.num_classes;
    let prepared: Vec<Prepared> = train
        .iter()
        .map(|ex| {
            ex.srl.check_len(&ex.id, ex.tokens.len())?;
            Ok(Prepared {
                ids: vocab.encode(&ex.tokens),
                spans: ex.srl.clone(),
                label: class_of(ex, num_classes)?,
            })
        })
        .collect::<Result<_>>()?;

    let batches = batch_schedule(prepared.len(), config.batch_size, config.epochs, config.seed);
    let total_steps = batches.len();
    let schedule = LinearSchedule::new(config.lr, config.warmup_ratio, total_steps)?;
    let eval_every = match config.eval_steps {
        0 => total_steps.div_ceil(config.epochs).max(1),
        n => n,
    };
    let xi = config.loss.margin_for(run_config.encoder.feature_dim());
    let mut opt = AdamW::new(config.optimizer.clone());
    let mut log = TrainLog::default();
    let mut best: Option<(f64, EncoderParams, Detector, usize)> = None;

    for (step, idx) in batches.iter().enumerate() {
        let lr = schedule.lr(step);
        let batch: Vec<(usize, &Prepared)> = idx.iter().map(|&i| (i, &prepared[i])).collect();
        let (losses, grads) = batch_step(&model, &batch, &run_config, xi, step)?;
        opt.step(model.params_mut(), &grads, lr)?;
        log::debug!(
            "step {step} lr {lr:.3e} total {:.5} id {:.5} margin {:.5} ssl {:.5}",
            losses.total,
            losses.l_id,
            losses.l_margin,
            losses.l_ssl
        );
        log.steps.push(StepLog {
            step,
            lr,
            l_id: losses.l_id,
            l_margin: losses.l_margin,
            l_ssl: losses.l_ssl,
            total: losses.total,
        });

        let done = step + 1;
        if done % eval_every == 0 || done == total_steps {
            let snap = snapshot(&model, &vocab, &run_config, train, val, dev_ood)?;
            log::info!("after {done} updates: val accuracy {:.4}", snap.val_accuracy);
            let metric = match config.selection {
                Selection::ValAccuracy => snap.val_accuracy,
                Selection::DevMahaAuroc => snap.dev_maha_auroc.expect("dev set checked"),
            };
            log.evals.push(EvalLog {
                step: done,
                val_accuracy: snap.val_accuracy,
                dev_maha_auroc: snap.dev_maha_auroc,
            });
            if best.as_ref().is_none_or(|b| metric >= b.0) {
                best = Some((metric, model.clone(), snap.detector, done));
            }
        }
    }

    let (_, model, detector, step) = best.ok_or_else(|| Error::Invalid("no training steps were run".into()))?;
    log.best_step = step;
    Ok(TrainOutput {
        checkpoint: Checkpoint {
            config: run_config,
            vocab,
            step,
            model,
        },
        detector,
        log,
    })
}

/// Detection quality of one scorer on one OOD set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScorerMetrics {
    pub auroc: f64,
    pub far95: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorSummary {
    pub num_classes: usize,
    pub dim: usize,
    pub bank_size: usize,
    pub fit_on: String,
    pub rtol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub id_dataset: String,
    /// OOD set name → scorer name → metrics.
    pub ood_sets: BTreeMap<String, BTreeMap<String, ScorerMetrics>>,
    pub config: TrainConfig,
    pub seed: u64,
    pub id_accuracy: f64,
    pub detector: DetectorSummary,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn metric(&self, ood_set: &str, scorer: Scorer) -> Option<ScorerMetrics> {
        self.ood_sets.get(ood_set)?.get(scorer.name()).copied()
    }

    /// Mean AUROC and FAR95 over every (OOD set, scorer) entry.
    pub fn averages(&self) -> (f64, f64) {
        let all: Vec<ScorerMetrics> = self.ood_sets.values().flat_map(|m| m.values().copied()).collect();
        let n = all.len().max(1) as f64;
        (
            all.iter().map(|m| m.auroc).sum::<f64>() / n,
            all.iter().map(|m| m.far95).sum::<f64>() / n,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Scores of every configured scorer for each feature vector.
pub fn score_features(detector: &Detector, feats: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    feats
        .iter()
        .map(|h| {
            detector
                .config()
                .scorers
                .iter()
                .map(|&s| Ok(detector.score(s, h)?.value))
                .collect()
        })
        .collect()
}

/// Scores the ID test set and each OOD set with every configured scorer.
pub fn evaluate(
    ckpt: &Checkpoint,
    detector: &Detector,
    id_name: &str,
    id_test: &[Example],
    ood_sets: &[(String, Vec<Example>)],
) -> Result<EvalReport> {
    if detector.dim() != ckpt.feature_dim() {
        return Err(Error::DimMismatch {
            expected: ckpt.feature_dim(),
            got: detector.dim(),
        });
    }
    if id_test.is_empty() {
        return Err(Error::EmptyScores("id"));
    }
    let c = ckpt.num_classes();
    let id_feats = ckpt.features(id_test)?;
    let preds = ckpt.predict(&id_feats)?;
    let mut correct = 0;
    for (ex, p) in id_test.iter().zip(&preds) {
        if class_of(ex, c)? == *p {
            correct += 1;
        }
    }
    let scorers = detector.config().scorers.clone();
    let id_scores = score_features(detector, &id_feats)?;
    let column = |rows: &[Vec<f64>], j: usize| rows.iter().map(|r| r[j]).collect::<Vec<f64>>();

    let mut warnings = Vec::new();
    let mut sets = BTreeMap::new();
    for (name, examples) in ood_sets {
        let ood_scores = score_features(detector, &ckpt.features(examples)?)?;
        let mut per = BTreeMap::new();
        for (j, s) in scorers.iter().enumerate() {
            let sample = ScoreSample::new(column(&id_scores, j), column(&ood_scores, j))?;
            let f = far95(&sample);
            if let Some(w) = f.warning {
                if !warnings.contains(&w) {
                    warnings.push(w);
                }
            }
            per.insert(
                s.name().to_string(),
                ScorerMetrics {
                    auroc: auroc(&sample),
                    far95: f.value,
                },
            );
        }
        sets.insert(name.clone(), per);
    }
    Ok(EvalReport {
        id_dataset: id_name.to_string(),
        ood_sets: sets,
        config: ckpt.config.clone(),
        seed: ckpt.config.seed,
        id_accuracy: correct as f64 / id_test.len() as f64,
        detector: DetectorSummary {
            num_classes: detector.num_classes(),
            dim: detector.dim(),
            bank_size: detector.bank_len(),
            fit_on: detector.config().fit_on.clone(),
            rtol: detector.config().rtol,
        },
        warnings,
    })
}

/// Encodes `examples` and writes one record per example.
pub fn export_embeddings(ckpt: &Checkpoint, examples: &[Example], path: impl AsRef<Path>) -> Result<EmbeddingDump> {
    let feats = ckpt.features(examples)?;
    let records = examples
        .iter()
        .zip(feats)
        .map(|(ex, h)| EmbeddingRecord {
            id: ex.id.clone(),
            label: ex.label,
            h,
        })
        .collect();
    let dump = EmbeddingDump::new(ckpt.feature_dim(), records)?;
    dump.write(path)?;
    Ok(dump)
}

/// One row of the masking-probability sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub p_mask: f64,
    pub mean_auroc: f64,
    pub mean_far95: f64,
    pub val_accuracy: f64,
    /// Largest absolute role-prediction loss seen during training.
    pub max_ssl_loss: f64,
}

/// Trains and evaluates one model per masking probability, all with the
/// same seed, averaging AUROC and FAR95 over the configured scorers.
pub fn sweep_mask(
    config: &TrainConfig,
    train_set: &[Example],
    val: &[Example],
    id_test: &[Example],
    ood_sets: &[(String, Vec<Example>)],
    probabilities: &[f64],
) -> Result<Vec<SweepRow>> {
    if probabilities.len() < 2 {
        return Err(Error::Config("the sweep needs at least two probabilities".into()));
    }
    let mut rows = Vec::with_capacity(probabilities.len());
    for &p in probabilities {
        let cfg = TrainConfig {
            p_mask: p,
            ..config.clone()
        };
        let out = train(&cfg, train_set, val, None)?;
        let report = evaluate(&out.checkpoint, &out.detector, "test_id", id_test, ood_sets)?;
        let (mean_auroc, mean_far95) = report.averages();
        let best = out.log.evals.iter().find(|e| e.step == out.log.best_step);
        rows.push(SweepRow {
            p_mask: p,
            mean_auroc,
            mean_far95,
            val_accuracy: best.map_or(f64::NAN, |e| e.val_accuracy),
            max_ssl_loss: out.log.steps.iter().map(|s| s.l_ssl.abs()).fold(0.0, f64::max),
        });
    }
    Ok(rows)
}

/// Serializes sweep rows as CSV with a header line.
pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Invalid(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Invalid(e.to_string()))
}
