//! Transformer encoder: token and position embeddings, a trainable backbone,
//! the transformer head, role pooling into the concatenated representation,
//! and the ID / role-prediction classifiers.
//!
//! Masking happens between backbone and head: the backbone output rows of
//! masked positions are overwritten by a learned MASK vector before the head
//! runs.

use ndiff::{Graph, NodeId, Params, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::srl::{MaskSpec, Role, RoleSpans};
use crate::vocab::CLS_ID;
use crate::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Which features make up the sentence representation `h`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// `[h_cls ; μ_A0 ; μ_V ; μ_A1]`
    #[default]
    Roles,
    /// `h_cls` alone (global-only ablation).
    ClsOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub backbone_layers: usize,
    pub head_layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub max_seq_len: usize,
    pub num_classes: usize,
    pub pooling: Pooling,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            d_model: 64,
            backbone_layers: 2,
            head_layers: 3,
            heads: 16,
            ffn_mult: 2,
            max_seq_len: 32,
            num_classes: 4,
            pooling: Pooling::Roles,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!("heads ({}) must divide d_model ({})", self.heads, self.d_model));
        }
        if self.head_layers == 0 {
            return fail("head_layers must be at least 1".into());
        }
        if self.vocab_size < 2 {
            return fail("vocab_size must cover at least [CLS] and [UNK]".into());
        }
        if self.num_classes < 2 {
            return fail("at least two classes are required".into());
        }
        if self.ffn_mult == 0 || self.max_seq_len == 0 {
            return fail("ffn_mult and max_seq_len must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Length of the representation `h`.
    pub fn feature_dim(&self) -> usize {
        match self.pooling {
            Pooling::Roles => 4 * self.d_model,
            Pooling::ClsOnly => self.d_model,
        }
    }
}

fn layer_prefix(stack: &str, layer: usize) -> String {
    format!("{stack}.{layer}")
}

/// All trainable weights, keyed by name.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    config: EncoderConfig,
    params: Params,
}

impl EncoderParams {
    /// Seeded initialization: matrices, embeddings and the MASK vector are
    /// uniform in `±1/√d_model`, biases zero, layer-norm gains one.
    pub fn init(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let f = d * config.ffn_mult;
        let bound = 1.0 / (d as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Params::new();
        let mut uniform = |shape: &[usize]| -> Tensor {
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::new(shape.to_vec(), data).expect("shape and data agree")
        };

        params.insert("embed.token", uniform(&[config.vocab_size, d]));
        params.insert("embed.position", uniform(&[config.max_seq_len, d]));
        params.insert("embed.ln.g", Tensor::vector(vec![1.0; d]));
        params.insert("embed.ln.b", Tensor::zeros(&[d]));
        params.insert("mask", uniform(&[d]));
        for (stack, layers) in [("backbone", config.backbone_layers), ("head", config.head_layers)] {
            for l in 0..layers {
                let p = layer_prefix(stack, l);
                for name in ["attn.q", "attn.k", "attn.v", "attn.o"] {
                    params.insert(format!("{p}.{name}.w"), uniform(&[d, d]));
                    params.insert(format!("{p}.{name}.b"), Tensor::zeros(&[d]));
                }
                params.insert(format!("{p}.ln1.g"), Tensor::vector(vec![1.0; d]));
                params.insert(format!("{p}.ln1.b"), Tensor::zeros(&[d]));
                params.insert(format!("{p}.ffn.w1"), uniform(&[d, f]));
                params.insert(format!("{p}.ffn.b1"), Tensor::zeros(&[f]));
                params.insert(format!("{p}.ffn.w2"), uniform(&[f, d]));
                params.insert(format!("{p}.ffn.b2"), Tensor::zeros(&[d]));
                params.insert(format!("{p}.ln2.g"), Tensor::vector(vec![1.0; d]));
                params.insert(format!("{p}.ln2.b"), Tensor::zeros(&[d]));
            }
        }
        params.insert("classifier.w", uniform(&[config.num_classes, config.feature_dim()]));
        params.insert("ssl.w", uniform(&[Role::ALL.len(), d]));
        Ok(Self { config, params })
    }

    /// Reassembles parameters (e.g. from a checkpoint), checking every
    /// expected tensor is present with the right shape.
    pub fn from_parts(config: EncoderConfig, params: Params) -> Result<Self> {
        let reference = Self::init(EncoderConfig { seed: 0, ..config.clone() })?;
        for (name, t) in reference.params.iter() {
            let got = params.get(name).map_err(|_| Error::Invalid(format!("missing parameter '{name}'")))?;
            if got.shape() != t.shape() {
                return Err(Error::Invalid(format!(
                    "parameter '{name}' has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Invalid("unexpected extra parameters".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// Classifier weight rows `w_j`.
    pub fn classifier_rows(&self) -> Vec<Vec<f64>> {
        let w = self.params.get("classifier.w").expect("initialized");
        (0..w.rows()).map(|r| w.row(r).to_vec()).collect()
    }

    /// Places every parameter on `graph`, as registered parameters when
    /// `trainable`, otherwise as constants.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Result<Bound> {
        let mut put = |name: &str| -> Result<NodeId> {
            let t = self.params.get(name)?.clone();
            Ok(if trainable {
                graph.register(name, t)?
            } else {
                graph.constant(t)
            })
        };
        let mut stacks = Vec::new();
        for (stack, layers) in [("backbone", self.config.backbone_layers), ("head", self.config.head_layers)] {
            let mut nodes = Vec::with_capacity(layers);
            for l in 0..layers {
                let p = layer_prefix(stack, l);
                let mut n = |s: &str| put(&format!("{p}.{s}"));
                nodes.push(LayerNodes {
                    wq: n("attn.q.w")?,
                    bq: n("attn.q.b")?,
                    wk: n("attn.k.w")?,
                    bk: n("attn.k.b")?,
                    wv: n("attn.v.w")?,
                    bv: n("attn.v.b")?,
                    wo: n("attn.o.w")?,
                    bo: n("attn.o.b")?,
                    ln1_g: n("ln1.g")?,
                    ln1_b: n("ln1.b")?,
                    w1: n("ffn.w1")?,
                    b1: n("ffn.b1")?,
                    w2: n("ffn.w2")?,
                    b2: n("ffn.b2")?,
                    ln2_g: n("ln2.g")?,
                    ln2_b: n("ln2.b")?,
                });
            }
            stacks.push(nodes);
        }
        let head = stacks.pop().expect("two stacks");
        let backbone = stacks.pop().expect("two stacks");
        Ok(Bound {
            token: put("embed.token")?,
            position: put("embed.position")?,
            emb_ln_g: put("embed.ln.g")?,
            emb_ln_b: put("embed.ln.b")?,
            mask: put("mask")?,
            backbone,
            head,
            classifier: put("classifier.w")?,
            ssl: put("ssl.w")?,
            config: self.config.clone(),
        })
    }

    /// Runs the encoder on one sentence and returns `(H, h_cls)`.
    pub fn encode(&self, tokens: &[usize], mask: Option<&MaskSpec>) -> Result<(Tensor, Vec<f64>)> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false)?;
        let enc = b.encode(&mut g, tokens, mask)?;
        Ok((g.value(enc.hidden).clone(), g.value(enc.cls).data().to_vec()))
    }

    /// Clean forward pass pooled into the sentence representation.
    pub fn represent(&self, tokens: &[usize], spans: &RoleSpans) -> Result<Representation> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false)?;
        let enc = b.encode(&mut g, tokens, None)?;
        let pooled = b.pool(&mut g, &enc, spans)?;
        Ok(pooled.to_representation(&g))
    }

    /// `logits[j] = w_j · h`.
    pub fn id_logits(&self, h: &[f64]) -> Result<Vec<f64>> {
        linear_rows(self.params.get("classifier.w")?, h)
    }

    /// Role-prediction logits for the mean head output of one masked role.
    pub fn ssl_logits(&self, masked_mean: &[f64]) -> Result<Vec<f64>> {
        linear_rows(self.params.get("ssl.w")?, masked_mean)
    }
}

fn linear_rows(w: &Tensor, x: &[f64]) -> Result<Vec<f64>> {
    if w.cols() != x.len() {
        return Err(Error::DimMismatch {
            expected: w.cols(),
            got: x.len(),
        });
    }
    Ok((0..w.rows())
        .map(|r| w.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
        .collect())
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNodes {
    wq: NodeId,
    bq: NodeId,
    wk: NodeId,
    bk: NodeId,
    wv: NodeId,
    bv: NodeId,
    wo: NodeId,
    bo: NodeId,
    ln1_g: NodeId,
    ln1_b: NodeId,
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
    ln2_g: NodeId,
    ln2_b: NodeId,
}

/// Parameters placed on a particular graph.
#[derive(Clone, Debug)]
pub struct Bound {
    token: NodeId,
    position: NodeId,
    emb_ln_g: NodeId,
    emb_ln_b: NodeId,
    mask: NodeId,
    backbone: Vec<LayerNodes>,
    head: Vec<LayerNodes>,
    classifier: NodeId,
    ssl: NodeId,
    config: EncoderConfig,
}

/// Graph nodes of one encoded sentence.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub hidden: NodeId,
    pub cls: NodeId,
    pub len: usize,
}

/// Graph nodes of the pooled representation.
#[derive(Clone, Copy, Debug)]
pub struct Pooled {
    pub h: NodeId,
    pub cls: NodeId,
    pub a0: NodeId,
    pub v: NodeId,
    pub a1: NodeId,
}

impl Pooled {
    pub fn to_representation(&self, g: &Graph) -> Representation {
        let data = |id: NodeId| g.value(id).data().to_vec();
        Representation {
            h_cls: data(self.cls),
            mu_a0: data(self.a0),
            mu_v: data(self.v),
            mu_a1: data(self.a1),
            h: data(self.h),
        }
    }
}

/// The sentence representation with its blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Representation {
    pub h_cls: Vec<f64>,
    pub mu_a0: Vec<f64>,
    pub mu_v: Vec<f64>,
    pub mu_a1: Vec<f64>,
    pub h: Vec<f64>,
}

impl Bound {
    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Invalid("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Invalid(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if tokens[0] != CLS_ID {
            return Err(Error::Invalid("position 0 must hold the [CLS] token".into()));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Invalid(format!(
                "unknown token id {t} (vocab size {})",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn layer(&self, g: &mut Graph, x: NodeId, p: &LayerNodes) -> Result<NodeId> {
        let heads = self.config.heads;
        let dh = self.config.head_dim();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let proj = |g: &mut Graph, w: NodeId, b: NodeId| -> Result<NodeId> {
            let y = g.matmul(x, w)?;
            Ok(g.add_bias(y, b)?)
        };
        let q = proj(g, p.wq, p.bq)?;
        let k = proj(g, p.wk, p.bk)?;
        let v = proj(g, p.wv, p.bv)?;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, inv_sqrt)?;
            let att = g.softmax_rows(scores)?;
            outs.push(g.matmul(att, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        let o = g.matmul(cat, p.wo)?;
        let o = g.add_bias(o, p.bo)?;
        let x = g.add(x, o)?;
        let x = g.layer_norm(x, p.ln1_g, p.ln1_b, LN_EPS)?;

        let f = g.matmul(x, p.w1)?;
        let f = g.add_bias(f, p.b1)?;
        let f = g.gelu(f)?;
        let f = g.matmul(f, p.w2)?;
        let f = g.add_bias(f, p.b2)?;
        let x2 = g.add(x, f)?;
        Ok(g.layer_norm(x2, p.ln2_g, p.ln2_b, LN_EPS)?)
    }

    /// Backbone, optional masking of backbone outputs, then the head.
    pub fn encode(&self, g: &mut Graph, tokens: &[usize], mask: Option<&MaskSpec>) -> Result<Encoded> {
        self.check_tokens(tokens)?;
        let t = tokens.len();
        let tok = g.gather_rows(self.token, tokens)?;
        let positions: Vec<usize> = (0..t).collect();
        let pos = g.gather_rows(self.position, &positions)?;
        let x = g.add(tok, pos)?;
        let mut x = g.layer_norm(x, self.emb_ln_g, self.emb_ln_b, LN_EPS)?;
        for p in &self.backbone {
            x = self.layer(g, x, p)?;
        }
        if let Some(m) = mask.filter(|m| !m.positions.is_empty()) {
            if m.positions.contains(&0) {
                return Err(Error::Invalid("mask may not cover the [CLS] position".into()));
            }
            if let Some(&p) = m.positions.iter().find(|&&p| p >= t) {
                return Err(Error::Invalid(format!("mask position {p} out of range for length {t}")));
            }
            x = g.replace_rows(x, self.mask, &m.positions)?;
        }
        for p in &self.head {
            x = self.layer(g, x, p)?;
        }
        let cls = g.mean_over_indices(x, &[0])?;
        Ok(Encoded { hidden: x, cls, len: t })
    }

    /// Role means over head outputs and their concatenation with `h_cls`.
    /// A role absent from the sentence contributes a zero block.
    pub fn pool(&self, g: &mut Graph, enc: &Encoded, spans: &RoleSpans) -> Result<Pooled> {
        pool_hidden(g, enc.hidden, enc.cls, enc.len, spans, self.config.pooling)
    }

    pub fn id_logits(&self, g: &mut Graph, h: NodeId) -> Result<NodeId> {
        Ok(g.matmul(self.classifier, h)?)
    }

    pub fn ssl_logits(&self, g: &mut Graph, masked_mean: NodeId) -> Result<NodeId> {
        Ok(g.matmul(self.ssl, masked_mean)?)
    }
}

/// Pools a hidden-state matrix by role spans.
pub fn pool_hidden(
    g: &mut Graph,
    hidden: NodeId,
    cls: NodeId,
    len: usize,
    spans: &RoleSpans,
    pooling: Pooling,
) -> Result<Pooled> {
    let d = g.value(hidden).cols();
    let block = |g: &mut Graph, role: Role| -> Result<NodeId> {
        let idx = spans.get(role);
        if idx.is_empty() {
            Ok(g.constant(Tensor::zeros(&[d])))
        } else {
            if let Some(&i) = idx.iter().find(|&&i| i >= len) {
                return Err(Error::Invalid(format!("span index {i} out of range for length {len}")));
            }
            Ok(g.mean_over_indices(hidden, idx)?)
        }
    };
    let a0 = block(g, Role::A0)?;
    let v = block(g, Role::V)?;
    let a1 = block(g, Role::A1)?;
    let h = match pooling {
        Pooling::Roles => g.concat(&[cls, a0, v, a1])?,
        Pooling::ClsOnly => cls,
    };
    Ok(Pooled { h, cls, a0, v, a1 })
}

/// Value-level pooling of an already computed `H` and `h_cls`.
pub fn pool_and_concat(hidden: &Tensor, h_cls: &[f64], spans: &RoleSpans) -> Result<Representation> {
    if hidden.rank() != 2 || hidden.cols() != h_cls.len() {
        return Err(Error::DimMismatch {
            expected: h_cls.len(),
            got: hidden.cols(),
        });
    }
    let mut g = Graph::new();
    let hn = g.constant(hidden.clone());
    let cn = g.constant(Tensor::vector(h_cls.to_vec()));
    let pooled = pool_hidden(&mut g, hn, cn, hidden.rows(), spans, Pooling::Roles)?;
    Ok(pooled.to_representation(&g))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 10,
            d_model: 8,
            backbone_layers: 1,
            head_layers: 1,
            heads: 2,
            ffn_mult: 2,
            max_seq_len: 8,
            num_classes: 3,
            pooling: Pooling::Roles,
            seed: 5,
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = EncoderParams::init(small()).unwrap();
        let b = EncoderParams::init(small()).unwrap();
        assert_eq!(a, b);
        let c = EncoderParams::init(EncoderConfig { seed: 6, ..small() }).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn head_count_must_divide_model_width() {
        let bad = EncoderConfig { heads: 3, ..small() };
        assert!(matches!(EncoderParams::init(bad), Err(Error::Config(_))));
        let ok = EncoderConfig {
            d_model: 32,
            heads: 16,
            ..small()
        };
        assert_eq!(ok.head_dim(), 2);
        assert!(EncoderParams::init(ok).is_ok());
    }

    #[test]
    fn layer_norm_gains_and_biases_start_at_identity() {
        let p = EncoderParams::init(small()).unwrap();
        assert!(p.params().get("head.0.ln1.g").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(p.params().get("head.0.ln1.b").unwrap().data().iter().all(|&v| v == 0.0));
        let bound = 1.0 / 8f64.sqrt();
        assert!(p.params().get("embed.token").unwrap().data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn encode_shapes_and_token_checks() {
        let p = EncoderParams::init(small()).unwrap();
        for t in 1..=8 {
            let mut toks = vec![0];
            toks.extend((1..t).map(|i| i % 10));
            let (h, cls) = p.encode(&toks, None).unwrap();
            assert_eq!(h.shape(), &[t, 8]);
            assert_eq!(cls, h.row(0));
        }
        assert!(p.encode(&[0, 10], None).is_err());
        assert!(p.encode(&[3, 4], None).is_err());
        assert!(p.encode(&[0; 9], None).is_err());
    }

    #[test]
    fn empty_mask_is_a_no_op() {
        let p = EncoderParams::init(small()).unwrap();
        let toks = [0, 4, 5, 6];
        let (a, _) = p.encode(&toks, None).unwrap();
        let (b, _) = p.encode(&toks, Some(&MaskSpec::none())).unwrap();
        assert_eq!(a, b);
        let bad = MaskSpec {
            masked_roles: vec![Role::V],
            positions: vec![9],
            targets: vec![1],
        };
        assert!(p.encode(&toks, Some(&bad)).is_err());
    }

    #[test]
    fn masking_a0_changes_its_mean_only_in_the_forward_pass() {
        let p = EncoderParams::init(small()).unwrap();
        let toks = [0, 4, 5, 6];
        let spans = RoleSpans::new(vec![1], vec![2], vec![3]).unwrap();
        let table_before = p.params().get("embed.token").unwrap().clone();
        let (clean, cls) = p.encode(&toks, None).unwrap();
        let m = MaskSpec::for_roles(&spans, &[Role::A0]);
        let (masked, mcls) = p.encode(&toks, Some(&m)).unwrap();
        let r_clean = pool_and_concat(&clean, &cls, &spans).unwrap();
        let r_masked = pool_and_concat(&masked, &mcls, &spans).unwrap();
        assert_ne!(r_clean.mu_a0, r_masked.mu_a0);
        assert_eq!(p.params().get("embed.token").unwrap(), &table_before);
    }

    #[test]
    fn pooling_rules() {
        let hidden = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 7.0]]).unwrap();
        let cls = hidden.row(0).to_vec();
        let none = pool_and_concat(&hidden, &cls, &RoleSpans::empty()).unwrap();
        assert_eq!(none.h, vec![1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);

        let spans = RoleSpans::new(vec![1], vec![2], vec![]).unwrap();
        let r = pool_and_concat(&hidden, &cls, &spans).unwrap();
        assert_eq!(r.mu_v, vec![5.0, 7.0]);
        assert_eq!(r.mu_a0, vec![3.0, 4.0]);
        assert!(pool_and_concat(&hidden, &cls, &RoleSpans::new(vec![3], vec![], vec![]).unwrap()).is_err());
    }

    #[test]
    fn classifier_heads() {
        let mut p = EncoderParams::init(small()).unwrap();
        let fd = p.config().feature_dim();
        assert_eq!(fd, 32);
        p.params_mut().get_mut("classifier.w").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        assert_eq!(p.id_logits(&vec![1.0; fd]).unwrap(), vec![0.0; 3]);
        assert!(p.id_logits(&[1.0; 3]).is_err());

        p.params_mut().get_mut("ssl.w").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        let logits = p.ssl_logits(&[0.3; 8]).unwrap();
        assert_eq!(logits.len(), 3);
        let probs = ndiff::softmax(&logits);
        assert!(probs.iter().all(|&q| (q - 1.0 / 3.0).abs() < 1e-15));
    }
}
