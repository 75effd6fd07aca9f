#![allow(dead_code)]

use ndiff::Graph;
use srlood::data::{gen_corpus, Corpus, CorpusSpec, Example, LexiconSizes, OodKind};
use srlood::encoder::{EncoderConfig, EncoderParams};
use srlood::optim::{AdamW, LinearSchedule};
use srlood::pipeline::{batch_schedule, derive_seed, TrainConfig, INIT_STREAM};
use srlood::vocab::Vocab;

pub fn small_corpus(kind: OodKind, seed: u64) -> Corpus {
    gen_corpus(&CorpusSpec {
        num_classes: 3,
        train: 48,
        val: 24,
        test_id: 24,
        test_ood: 24,
        lexicon: LexiconSizes {
            agents: 4,
            verbs: 4,
            patients: 4,
        },
        ood_kind: kind,
        seed,
        ..Default::default()
    })
    .unwrap()
}

pub fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        encoder: EncoderConfig {
            d_model: 16,
            heads: 4,
            backbone_layers: 1,
            head_layers: 1,
            num_classes: 3,
            ..Default::default()
        },
        epochs: 2,
        batch_size: 8,
        lr: 1e-3,
        seed,
        ..Default::default()
    }
}

/// Cross-entropy-only training written directly against the encoder and
/// optimizer, returning the per-update mean loss.
pub fn plain_cross_entropy_losses(config: &TrainConfig, train: &[Example], val: &[Example]) -> Vec<f64> {
    let vocab = Vocab::build(train.iter().chain(val).flat_map(|e| e.tokens.iter().map(String::as_str)));
    let mut model = EncoderParams::init(EncoderConfig {
        vocab_size: vocab.len(),
        seed: derive_seed(config.seed, &[INIT_STREAM]),
        ..config.encoder.clone()
    })
    .unwrap();
    let batches = batch_schedule(train.len(), config.batch_size, config.epochs, config.seed);
    let schedule = LinearSchedule::new(config.lr, config.warmup_ratio, batches.len()).unwrap();
    let mut opt = AdamW::new(config.optimizer.clone());
    let mut losses = Vec::new();
    for (step, batch) in batches.iter().enumerate() {
        let mut g = Graph::new();
        let b = model.bind(&mut g, true).unwrap();
        let mut ces = Vec::new();
        for &i in batch {
            let ex = &train[i];
            let enc = b.encode(&mut g, &vocab.encode(&ex.tokens), None).unwrap();
            let pooled = b.pool(&mut g, &enc, &ex.srl).unwrap();
            let logits = b.id_logits(&mut g, pooled.h).unwrap();
            ces.push(g.cross_entropy(logits, ex.class().unwrap()).unwrap());
        }
        let s = g.add_many(&ces).unwrap();
        let loss = g.scale(s, 1.0 / batch.len() as f64).unwrap();
        losses.push(g.scalar(loss).unwrap());
        let grads = g.backward(loss).unwrap();
        opt.step(model.params_mut(), &grads, schedule.lr(step)).unwrap();
    }
    losses
}

/// Single-parameter AdamW written out longhand.
pub fn reference_adamw(theta0: f64, grads: &[f64], lrs: &[f64], wd: f64) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut theta, mut m, mut v) = (theta0, 0.0, 0.0);
    let mut out = Vec::new();
    for (t, (&g, &lr)) in grads.iter().zip(lrs).enumerate() {
        let t = (t + 1) as i32;
        theta *= 1.0 - lr * wd;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powi(t));
        let v_hat = v / (1.0 - b2.powi(t));
        theta -= lr * m_hat / (v_hat.sqrt() + eps);
        out.push(theta);
    }
    out
}

pub fn optimizer_trajectory(theta0: f64, grads: &[f64], lrs: &[f64]) -> Vec<f64> {
    use ndiff::{Params, Tensor};
    use std::collections::BTreeMap;
    let mut p = Params::new();
    p.insert("w", Tensor::vector(vec![theta0]));
    let mut opt = AdamW::new(Default::default());
    grads
        .iter()
        .zip(lrs)
        .map(|(&g, &lr)| {
            let mut gs = BTreeMap::new();
            gs.insert("w".to_string(), Tensor::vector(vec![g]));
            opt.step(&mut p, &gs, lr).unwrap();
            p.get("w").unwrap().data()[0]
        })
        .collect()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
