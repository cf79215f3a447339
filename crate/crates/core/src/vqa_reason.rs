//! Why is a visual question unanswerable? A GRU question encoder, top-down
//! attention over image regions, element-wise fusion and one of two heads:
//! a three-way softmax or two independent sigmoids (answerable,
//! unrecognizable).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::{derive_reason_class, ReasonClass, VisualQuestion};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::features::FeatureTensor;
use crate::nn::{
    bce_with_logit, dot, relu, relu_backward, scale_grads, sigmoid, softmax, softmax_cross_entropy, Adam, AdamConfig,
    Dense, Mlp, Params,
};
use crate::recognizability::{Checkpoint, CheckpointSink, CHECKPOINT_VERSION};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const EMPTY: usize = 2;
const RESERVED: [&str; 3] = ["<pad>", "<unk>", "<empty>"];

/// Lowercases, drops punctuation and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    min_freq: usize,
}

/// On-disk vocabulary: token → index plus a content hash.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VocabFile {
    pub version_hash: String,
    pub min_freq: usize,
    pub tokens: BTreeMap<String, usize>,
}

impl Vocab {
    /// Keeps tokens seen at least `min_freq` times, ordered by descending
    /// count then alphabetically, after the reserved entries.
    pub fn build<'a>(questions: impl IntoIterator<Item = &'a str>, min_freq: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for q in questions {
            for t in tokenize(q) {
                *counts.entry(t).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq.max(1) && !RESERVED.contains(&t.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).chain(kept.into_iter().map(|(t, _)| t)).collect();
        Self::from_tokens(tokens, min_freq)
    }

    fn from_tokens(tokens: Vec<String>, min_freq: usize) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index, min_freq }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= RESERVED.len()
    }

    pub fn token(&self, i: usize) -> Option<&str> {
        self.tokens.get(i).map(String::as_str)
    }

    /// Token indices; unknown tokens map to [`UNK`], empty text to `[EMPTY]`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let ids: Vec<usize> = tokenize(text).iter().map(|t| *self.index.get(t).unwrap_or(&UNK)).collect();
        if ids.is_empty() {
            vec![EMPTY]
        } else {
            ids
        }
    }

    pub fn version_hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())[..16].to_string()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("vocabulary {}: {e}", path.display())))
    }
}

impl From<Vocab> for VocabFile {
    fn from(v: Vocab) -> Self {
        VocabFile {
            version_hash: v.version_hash(),
            min_freq: v.min_freq,
            tokens: v.index.into_iter().collect(),
        }
    }
}

impl TryFrom<VocabFile> for Vocab {
    type Error = String;

    fn try_from(f: VocabFile) -> std::result::Result<Self, String> {
        let mut tokens = vec![None; f.tokens.len()];
        for (t, &i) in &f.tokens {
            match tokens.get_mut(i) {
                Some(slot @ None) => *slot = Some(t.clone()),
                _ => return Err(format!("vocabulary index {i} is duplicated or out of range")),
            }
        }
        let tokens: Vec<String> = tokens.into_iter().map(Option::unwrap).collect();
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err("vocabulary lacks the reserved <pad>, <unk>, <empty> entries".into());
        }
        let v = Vocab::from_tokens(tokens, f.min_freq);
        if v.version_hash() != f.version_hash {
            return Err(format!("vocabulary hash mismatch: file says {}, content is {}", f.version_hash, v.version_hash()));
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    Softmax3,
    DualSigmoid,
}

impl HeadVariant {
    pub fn outputs(self) -> usize {
        match self {
            HeadVariant::Softmax3 => 3,
            HeadVariant::DualSigmoid => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HeadVariant::Softmax3 => "softmax3",
            HeadVariant::DualSigmoid => "dual_sigmoid",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "softmax3" => Ok(HeadVariant::Softmax3),
            "dual_sigmoid" => Ok(HeadVariant::DualSigmoid),
            other => Err(Error::Config(format!("unknown head variant `{other}` (softmax3 | dual_sigmoid)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReasonConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Width of the joint space the attention scorer works in.
    pub attention_dim: usize,
    pub fusion_dim: usize,
    pub classifier_hidden: usize,
    /// Channel count C of the region features.
    pub region_channels: usize,
    pub variant: HeadVariant,
    /// When false the attended feature is the plain mean of the regions.
    pub attention: bool,
}

impl Default for ReasonConfig {
    fn default() -> Self {
        ReasonConfig {
            embed_dim: 300,
            hidden_dim: 512,
            attention_dim: 512,
            fusion_dim: 512,
            classifier_hidden: 512,
            region_channels: 2048,
            variant: HeadVariant::DualSigmoid,
            attention: true,
        }
    }
}

/// Gated recurrent unit:
/// `z = σ(Wz x + Uz h)`, `r = σ(Wr x + Ur h)`,
/// `n = tanh(Wn x + r ⊙ (Un h))`, `h' = (1 − z) ⊙ n + z ⊙ h` (biases on every
/// affine map).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gru {
    pub wz: Dense,
    pub wr: Dense,
    pub wn: Dense,
    pub uz: Dense,
    pub ur: Dense,
    pub un: Dense,
}

#[derive(Debug, Clone)]
struct GruStep {
    x: Vec<f64>,
    h: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    un: Vec<f64>,
}

impl Gru {
    fn new<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let b = 1.0 / (hidden as f64).sqrt();
        let mut d = |i| Dense::init_uniform(i, hidden, b, rng);
        Gru {
            wz: d(input),
            wr: d(input),
            wn: d(input),
            uz: d(hidden),
            ur: d(hidden),
            un: d(hidden),
        }
    }

    fn hidden(&self) -> usize {
        self.uz.out_dim
    }

    fn step(&self, x: &[f64], h: &[f64]) -> GruStep {
        let add = |a: Vec<f64>, b: Vec<f64>| a.into_iter().zip(b).map(|(p, q)| p + q).collect::<Vec<f64>>();
        let z: Vec<f64> = add(self.wz.forward(x), self.uz.forward(h)).into_iter().map(sigmoid).collect();
        let r: Vec<f64> = add(self.wr.forward(x), self.ur.forward(h)).into_iter().map(sigmoid).collect();
        let un = self.un.forward(h);
        let n: Vec<f64> = self
            .wn
            .forward(x)
            .iter()
            .zip(&r)
            .zip(&un)
            .map(|((a, r), u)| (a + r * u).tanh())
            .collect();
        GruStep {
            x: x.to_vec(),
            h: h.to_vec(),
            z,
            r,
            n,
            un,
        }
    }

    fn output(s: &GruStep) -> Vec<f64> {
        (0..s.z.len()).map(|i| (1.0 - s.z[i]) * s.n[i] + s.z[i] * s.h[i]).collect()
    }

    /// Backward through one step; returns (dx, dh_prev).
    fn step_backward(&self, s: &GruStep, dh: &[f64], g: &mut Gru) -> (Vec<f64>, Vec<f64>) {
        let hd = dh.len();
        let mut dh_prev: Vec<f64> = (0..hd).map(|i| dh[i] * s.z[i]).collect();
        let da_n: Vec<f64> = (0..hd).map(|i| dh[i] * (1.0 - s.z[i]) * (1.0 - s.n[i] * s.n[i])).collect();
        let da_z: Vec<f64> = (0..hd).map(|i| dh[i] * (s.h[i] - s.n[i]) * s.z[i] * (1.0 - s.z[i])).collect();
        let da_r: Vec<f64> = (0..hd).map(|i| da_n[i] * s.un[i] * s.r[i] * (1.0 - s.r[i])).collect();
        let dun: Vec<f64> = (0..hd).map(|i| da_n[i] * s.r[i]).collect();
        let mut dx = self.wn.backward(&s.x, &da_n, &mut g.wn);
        for (a, b) in dx.iter_mut().zip(self.wz.backward(&s.x, &da_z, &mut g.wz)) {
            *a += b;
        }
        for (a, b) in dx.iter_mut().zip(self.wr.backward(&s.x, &da_r, &mut g.wr)) {
            *a += b;
        }
        for part in [
            self.un.backward(&s.h, &dun, &mut g.un),
            self.uz.backward(&s.h, &da_z, &mut g.uz),
            self.ur.backward(&s.h, &da_r, &mut g.ur),
        ] {
            for (a, b) in dh_prev.iter_mut().zip(part) {
                *a += b;
            }
        }
        (dx, dh_prev)
    }
}

impl Params for Gru {
    fn params(&self) -> Vec<&[f64]> {
        [&self.wz, &self.wr, &self.wn, &self.uz, &self.ur, &self.un]
            .into_iter()
            .flat_map(|d| d.params())
            .collect()
    }
    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        [&mut self.wz, &mut self.wr, &mut self.wn, &mut self.uz, &mut self.ur, &mut self.un]
            .into_iter()
            .flat_map(|d| d.params_mut())
            .collect()
    }
}

/// Question encoder, attention, fusion and classifier. Attention scores are
/// `wa · (ReLU(Wv v_k) ⊙ ReLU(Wq q)) + ba`, normalized by a softmax over
/// regions; the fused vector is `ReLU(Wqf q) ⊙ ReLU(Wvf v̂)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonModel {
    pub config: ReasonConfig,
    pub vocab: Vocab,
    /// vocab × embed_dim, row-major.
    pub embedding: Vec<f64>,
    pub gru: Gru,
    pub att_v: Dense,
    pub att_q: Dense,
    pub att_w: Dense,
    pub fuse_q: Dense,
    pub fuse_v: Dense,
    pub classifier: Mlp,
}

impl Params for ReasonModel {
    fn params(&self) -> Vec<&[f64]> {
        let mut p: Vec<&[f64]> = vec![&self.embedding];
        p.extend(self.gru.params());
        for d in [&self.att_v, &self.att_q, &self.att_w, &self.fuse_q, &self.fuse_v] {
            p.extend(d.params());
        }
        p.extend(self.classifier.params());
        p
    }
    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p: Vec<&mut [f64]> = vec![&mut self.embedding];
        p.extend(self.gru.params_mut());
        for d in [&mut self.att_v, &mut self.att_q, &mut self.att_w, &mut self.fuse_q, &mut self.fuse_v] {
            p.extend(d.params_mut());
        }
        p.extend(self.classifier.params_mut());
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionEncoding {
    pub tokens: Vec<usize>,
    pub hidden: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Trace {
    tokens: Vec<usize>,
    steps: Vec<GruStep>,
    q: Vec<f64>,
    aq: Vec<f64>,
    av: Vec<Vec<f64>>,
    joint: Vec<Vec<f64>>,
    weights: Vec<f64>,
    vhat: Vec<f64>,
    fq: Vec<f64>,
    fv: Vec<f64>,
    mlp: Vec<Vec<f64>>,
}

impl ReasonModel {
    pub fn new(config: ReasonConfig, vocab: Vocab, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let mut embedding: Vec<f64> = (0..vocab.len() * c.embed_dim).map(|_| rng.gen_range(-0.5..0.5)).collect();
        embedding[PAD * c.embed_dim..(PAD + 1) * c.embed_dim].fill(0.0);
        let gru = Gru::new(c.embed_dim, c.hidden_dim, &mut rng);
        let att_v = Dense::init(c.region_channels, c.attention_dim, &mut rng);
        let att_q = Dense::init(c.hidden_dim, c.attention_dim, &mut rng);
        let att_w = Dense::init(c.attention_dim, 1, &mut rng);
        let fuse_q = Dense::init(c.hidden_dim, c.fusion_dim, &mut rng);
        let fuse_v = Dense::init(c.region_channels, c.fusion_dim, &mut rng);
        let classifier = Mlp::new(&[c.fusion_dim, c.classifier_hidden, c.variant.outputs()], &mut rng);
        ReasonModel {
            config,
            vocab,
            embedding,
            gru,
            att_v,
            att_q,
            att_w,
            fuse_q,
            fuse_v,
            classifier,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill_zero();
        z
    }

    fn embed(&self, token: usize) -> &[f64] {
        let e = self.config.embed_dim;
        let t = if token < self.vocab.len() { token } else { UNK };
        &self.embedding[t * e..(t + 1) * e]
    }

    fn encode_tokens(&self, tokens: &[usize]) -> (Vec<GruStep>, Vec<f64>) {
        let mut h = vec![0.0; self.gru.hidden()];
        let mut steps = Vec::with_capacity(tokens.len());
        for &t in tokens {
            let s = self.gru.step(self.embed(t), &h);
            h = Gru::output(&s);
            steps.push(s);
        }
        (steps, h)
    }

    pub fn encode_question(&self, text: &str) -> QuestionEncoding {
        let tokens = self.vocab.encode(text);
        let (_, hidden) = self.encode_tokens(&tokens);
        QuestionEncoding { tokens, hidden }
    }

    fn check_regions(&self, regions: &[Vec<f64>]) -> Result<()> {
        if regions.is_empty() {
            return Err(Error::Dimension {
                expected: "at least one image region".into(),
                got: "0".into(),
            });
        }
        if let Some(r) = regions.iter().find(|r| r.len() != self.config.region_channels) {
            return Err(Error::Dimension {
                expected: format!("{} channels per region", self.config.region_channels),
                got: r.len().to_string(),
            });
        }
        Ok(())
    }

    /// Question-conditioned attention: returns (attended feature, weights).
    pub fn attend(&self, q: &QuestionEncoding, regions: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_regions(regions)?;
        let aq = relu(&self.att_q.forward(&q.hidden));
        let (_, _, w, vhat) = self.attention(&aq, regions);
        Ok((vhat, w))
    }

    #[allow(clippy::type_complexity)]
    fn attention(&self, aq: &[f64], regions: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
        let av: Vec<Vec<f64>> = regions.iter().map(|v| relu(&self.att_v.forward(v))).collect();
        let joint: Vec<Vec<f64>> = av.iter().map(|a| a.iter().zip(aq).map(|(x, y)| x * y).collect()).collect();
        let scores: Vec<f64> = joint.iter().map(|j| self.att_w.forward(j)[0]).collect();
        let w = softmax(&scores);
        let vhat = weighted_sum(&w, regions);
        (av, joint, w, vhat)
    }

    fn trace(&self, tokens: &[usize], regions: &[Vec<f64>], use_attention: bool) -> Trace {
        let (steps, q) = self.encode_tokens(tokens);
        let (aq, av, joint, weights, vhat) = if use_attention {
            let aq = relu(&self.att_q.forward(&q));
            let (av, joint, w, vhat) = self.attention(&aq, regions);
            (aq, av, joint, w, vhat)
        } else {
            let w = vec![1.0 / regions.len() as f64; regions.len()];
            let vhat = weighted_sum(&w, regions);
            (Vec::new(), Vec::new(), Vec::new(), w, vhat)
        };
        let fq = relu(&self.fuse_q.forward(&q));
        let fv = relu(&self.fuse_v.forward(&vhat));
        let fused: Vec<f64> = fq.iter().zip(&fv).map(|(a, b)| a * b).collect();
        let mlp = self.classifier.trace(&fused);
        Trace {
            tokens: tokens.to_vec(),
            steps,
            q,
            aq,
            av,
            joint,
            weights,
            vhat,
            fq,
            fv,
            mlp,
        }
    }

    /// Raw output logits (3 for softmax3, 2 for dual_sigmoid).
    pub fn logits(&self, tokens: &[usize], regions: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.check_regions(regions)?;
        Ok(self.trace(tokens, regions, self.config.attention).mlp.pop().unwrap())
    }

    /// Training loss on one example and its gradient with respect to every
    /// parameter, laid out like the model itself.
    pub fn loss_and_gradient(&self, q: &VisualQuestion, regions: &[Vec<f64>]) -> Result<(f64, ReasonModel)> {
        self.check_regions(regions)?;
        let t = self.trace(&self.vocab.encode(&q.question), regions, self.config.attention);
        let (loss, dz) = reason_loss(self.config.variant, t.mlp.last().unwrap(), q);
        let mut g = self.zeros_like();
        self.backward(&t, regions, &dz, &mut g);
        Ok((loss, g))
    }

    fn backward(&self, t: &Trace, regions: &[Vec<f64>], dlogits: &[f64], g: &mut ReasonModel) {
        let dfused = self.classifier.backward(&t.mlp, dlogits, &mut g.classifier);
        let mut dfq: Vec<f64> = dfused.iter().zip(&t.fv).map(|(d, v)| d * v).collect();
        let mut dfv: Vec<f64> = dfused.iter().zip(&t.fq).map(|(d, q)| d * q).collect();
        relu_backward(&t.fq, &mut dfq);
        relu_backward(&t.fv, &mut dfv);
        let mut dq = self.fuse_q.backward(&t.q, &dfq, &mut g.fuse_q);
        let dvhat = self.fuse_v.backward(&t.vhat, &dfv, &mut g.fuse_v);
        if !t.aq.is_empty() {
            let dw: Vec<f64> = regions.iter().map(|v| dot(&dvhat, v)).collect();
            let mean = dot(&dw, &t.weights);
            let ds: Vec<f64> = t.weights.iter().zip(&dw).map(|(w, d)| w * (d - mean)).collect();
            let mut daq = vec![0.0; t.aq.len()];
            for k in 0..regions.len() {
                let djoint = self.att_w.backward(&t.joint[k], &[ds[k]], &mut g.att_w);
                let mut dav: Vec<f64> = djoint.iter().zip(&t.aq).map(|(d, a)| d * a).collect();
                relu_backward(&t.av[k], &mut dav);
                self.att_v.backward(&regions[k], &dav, &mut g.att_v);
                for ((acc, d), a) in daq.iter_mut().zip(&djoint).zip(&t.av[k]) {
                    *acc += d * a;
                }
            }
            relu_backward(&t.aq, &mut daq);
            for (a, b) in dq.iter_mut().zip(self.att_q.backward(&t.q, &daq, &mut g.att_q)) {
                *a += b;
            }
        }
        let e = self.config.embed_dim;
        let mut dh = dq;
        for (s, &tok) in t.steps.iter().zip(&t.tokens).rev() {
            let (dx, dprev) = self.gru.step_backward(s, &dh, &mut g.gru);
            let tok = if tok < self.vocab.len() { tok } else { UNK };
            for (a, b) in g.embedding[tok * e..(tok + 1) * e].iter_mut().zip(dx) {
                *a += b;
            }
            dh = dprev;
        }
    }
}

fn weighted_sum(w: &[f64], regions: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; regions[0].len()];
    for (wk, v) in w.iter().zip(regions) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += wk * x;
        }
    }
    out
}

/// Loss and dL/dlogits for one labelled question.
pub fn reason_loss(variant: HeadVariant, logits: &[f64], q: &VisualQuestion) -> (f64, Vec<f64>) {
    match variant {
        HeadVariant::Softmax3 => softmax_cross_entropy(logits, q.reason_label().class.index()),
        HeadVariant::DualSigmoid => {
            let (la, ga) = bce_with_logit(logits[0], q.answerable);
            let (lu, gu) = bce_with_logit(logits[1], q.unrecognizable);
            (la + lu, vec![ga, gu])
        }
    }
}

/// Region rows from grid (flattened) or object features.
pub fn regions_of(t: &FeatureTensor) -> Vec<Vec<f64>> {
    t.region_matrix()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonOutput {
    pub variant: HeadVariant,
    /// Over (ANSWERABLE, UNRECOGNIZABLE, INSUFFICIENT_CONTENT); softmax3 only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distribution: Option<[f64; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_answerable: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_unrecognizable: Option<f64>,
    pub reason_class: ReasonClass,
}

impl ReasonOutput {
    pub fn from_logits(variant: HeadVariant, logits: &[f64], threshold: f64) -> Self {
        match variant {
            HeadVariant::Softmax3 => {
                let p = softmax(logits);
                let best = (0..3).fold(0, |b, i| if p[i] > p[b] { i } else { b });
                ReasonOutput {
                    variant,
                    distribution: Some([p[0], p[1], p[2]]),
                    p_answerable: None,
                    p_unrecognizable: None,
                    reason_class: ReasonClass::from_index(best).unwrap(),
                }
            }
            HeadVariant::DualSigmoid => {
                let pa = sigmoid(logits[0]);
                let pu = sigmoid(logits[1]);
                ReasonOutput {
                    variant,
                    distribution: None,
                    p_answerable: Some(pa),
                    p_unrecognizable: Some(pu),
                    reason_class: derive_reason_class(pa >= threshold, pu >= threshold).class,
                }
            }
        }
    }

    /// Score for "this question is unanswerable".
    pub fn unanswerable_score(&self) -> f64 {
        match (self.distribution, self.p_answerable) {
            (Some(d), _) => 1.0 - d[ReasonClass::Answerable.index()],
            (None, Some(pa)) => 1.0 - pa,
            _ => f64::NAN,
        }
    }

    /// Score for "the image is unrecognizable".
    pub fn unrecognizable_score(&self) -> f64 {
        match (self.distribution, self.p_unrecognizable) {
            (Some(d), _) => d[ReasonClass::Unrecognizable.index()],
            (None, Some(pu)) => pu,
            _ => f64::NAN,
        }
    }

    /// Thresholded answerability decision.
    pub fn predicted_unanswerable(&self) -> bool {
        self.reason_class != ReasonClass::Answerable
    }
}

pub const FORMAT: &str = "reason";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReasonTrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub threshold: f64,
    pub max_steps: Option<usize>,
    pub min_freq: usize,
    pub model: ReasonConfig,
}

impl Default for ReasonTrainConfig {
    fn default() -> Self {
        ReasonTrainConfig {
            learning_rate: 1e-3,
            epochs: 8,
            batch_size: 32,
            seed: 0,
            threshold: 0.5,
            max_steps: None,
            min_freq: 1,
            model: ReasonConfig::default(),
        }
    }
}

pub type ReasonCheckpoint = Checkpoint<ReasonModel, ReasonTrainConfig>;

/// A question, its encoded tokens and its image regions.
#[derive(Debug, Clone, PartialEq)]
pub struct ReasonSample {
    pub question: VisualQuestion,
    pub regions: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonEpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub loss: f64,
    /// Three-way training accuracy.
    pub accuracy: f64,
}

/// Three-way accuracy of `model` on `set`.
pub fn accuracy(model: &ReasonModel, set: &[ReasonSample], threshold: f64) -> Result<f64> {
    let mut hits = 0;
    for s in set {
        let out = predict_tokens(model, &model.vocab.encode(&s.question.question), &s.regions, threshold)?;
        hits += usize::from(out.reason_class == s.question.reason_class);
    }
    Ok(hits as f64 / set.len().max(1) as f64)
}

pub fn train_reason(
    train_set: &[ReasonSample],
    cfg: &ReasonTrainConfig,
    backbone_id: &str,
    preprocessing_hash: &str,
    sink: &CheckpointSink,
) -> Result<(ReasonCheckpoint, Vec<ReasonEpochLog>)> {
    if !(cfg.learning_rate >= 0.0 && cfg.learning_rate.is_finite()) || cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("learning_rate >= 0, epochs >= 1 and batch_size >= 1 are required".into()));
    }
    if train_set.is_empty() {
        return Err(Error::DegenerateTraining("empty training split".into()));
    }
    let classes: std::collections::BTreeSet<_> = train_set.iter().map(|s| s.question.reason_class).collect();
    if classes.len() < 2 {
        return Err(Error::DegenerateTraining("training split has a single reason class".into()));
    }
    let vocab = Vocab::build(train_set.iter().map(|s| s.question.question.as_str()), cfg.min_freq);
    let mut model = ReasonModel::new(cfg.model.clone(), vocab, cfg.seed);
    let tokens: Vec<Vec<usize>> = train_set.iter().map(|s| model.vocab.encode(&s.question.question)).collect();
    for s in train_set {
        model.check_regions(&s.regions)?;
    }
    let make = |m: &ReasonModel| Checkpoint {
        format: FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        backbone_id: backbone_id.to_string(),
        preprocessing_hash: preprocessing_hash.to_string(),
        train_config: cfg.clone(),
        head: m.clone(),
    };
    let mut opt = Adam::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        ..Default::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let cap = cfg.max_steps.unwrap_or(usize::MAX);
    let mut steps = 0;
    let mut saved = false;
    let mut log = Vec::new();
    for epoch in 1..=cfg.epochs {
        if steps >= cap {
            break;
        }
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0);
        for batch in order.chunks(cfg.batch_size) {
            if steps >= cap {
                break;
            }
            let mut grad = model.zeros_like();
            let mut loss = 0.0;
            for &i in batch {
                let s = &train_set[i];
                let t = model.trace(&tokens[i], &s.regions, model.config.attention);
                let (l, dz) = reason_loss(model.config.variant, t.mlp.last().unwrap(), &s.question);
                loss += l;
                model.backward(&t, &s.regions, &dz, &mut grad);
            }
            let k = 1.0 / batch.len() as f64;
            loss *= k;
            scale_grads(&mut grad, k);
            if !loss.is_finite() || !grad.all_finite() {
                return Err(sink.divergence(Error::Divergence { step: steps, last_good: None }, saved));
            }
            opt.step(&mut model, &grad);
            steps += 1;
            total += loss;
            batches += 1;
        }
        let entry = ReasonEpochLog {
            epoch,
            steps,
            loss: total / batches.max(1) as f64,
            accuracy: accuracy(&model, train_set, cfg.threshold)?,
        };
        log::info!("epoch {epoch}: loss {:.5}, accuracy {:.3}", entry.loss, entry.accuracy);
        log.push(entry);
        sink.write(&make(&model))?;
        saved = sink.path.is_some();
    }
    Ok((make(&model), log))
}

fn predict_tokens(model: &ReasonModel, tokens: &[usize], regions: &[Vec<f64>], threshold: f64) -> Result<ReasonOutput> {
    let z = model.logits(tokens, regions)?;
    Ok(ReasonOutput::from_logits(model.config.variant, &z, threshold))
}

/// Prediction with the model's own attention setting. `variant` must match
/// the trained head.
pub fn predict_reason(
    ck: &ReasonCheckpoint,
    question: &str,
    image: &FeatureTensor,
    variant: HeadVariant,
    threshold: f64,
) -> Result<ReasonOutput> {
    if ck.head.config.variant != variant {
        return Err(Error::Config(format!(
            "checkpoint holds a {:?} head, {:?} was requested",
            ck.head.config.variant, variant
        )));
    }
    ck.check_features(image)?;
    predict_tokens(&ck.head, &ck.head.vocab.encode(question), &regions_of(image), threshold)
}

/// Prediction with the attended feature replaced by the mean region feature.
pub fn ablate_attention(model: &ReasonModel, question: &str, regions: &[Vec<f64>], threshold: f64) -> Result<ReasonOutput> {
    model.check_regions(regions)?;
    let t = model.trace(&model.vocab.encode(question), regions, false);
    Ok(ReasonOutput::from_logits(model.config.variant, t.mlp.last().unwrap(), threshold))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasonEvalReport {
    pub accuracy: f64,
    pub unanswerable: EvalReport,
    /// Unrecognizability among questions predicted unanswerable.
    pub unrecognizable_given_unanswerable: Option<EvalReport>,
}

pub fn evaluate_reasons(outputs: &[ReasonOutput], truth: &[VisualQuestion], threshold: f64) -> Result<ReasonEvalReport> {
    if outputs.len() != truth.len() {
        return Err(Error::Dimension {
            expected: format!("{} outputs", truth.len()),
            got: outputs.len().to_string(),
        });
    }
    let acc = outputs.iter().zip(truth).filter(|(o, t)| o.reason_class == t.reason_class).count() as f64
        / truth.len().max(1) as f64;
    let scores: Vec<f64> = outputs.iter().map(ReasonOutput::unanswerable_score).collect();
    let labels: Vec<bool> = truth.iter().map(|t| !t.answerable).collect();
    let unanswerable = evaluate(&scores, &labels, threshold)?;
    let (s2, l2): (Vec<f64>, Vec<bool>) = outputs
        .iter()
        .zip(truth)
        .filter(|(o, _)| o.predicted_unanswerable())
        .map(|(o, t)| (o.unrecognizable_score(), t.unrecognizable))
        .unzip();
    Ok(ReasonEvalReport {
        accuracy: acc,
        unanswerable,
        unrecognizable_given_unanswerable: evaluate(&s2, &l2, threshold).ok(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{numeric_gradient, relative_error};

    fn small(variant: HeadVariant) -> ReasonModel {
        let vocab = Vocab::build(["what color is this", "what is on the back", "read the label"], 1);
        ReasonModel::new(
            ReasonConfig {
                embed_dim: 4,
                hidden_dim: 5,
                attention_dim: 6,
                fusion_dim: 5,
                classifier_hidden: 4,
                region_channels: 3,
                variant,
                attention: true,
            },
            vocab,
            17,
        )
    }

    fn regions() -> Vec<Vec<f64>> {
        vec![vec![0.5, -0.2, 1.0], vec![0.1, 0.9, -0.3], vec![-0.7, 0.4, 0.2], vec![1.2, 0.0, 0.6]]
    }

    #[test]
    fn tokenizer_and_vocab() {
        assert_eq!(tokenize("What's THIS, a can?"), vec!["whats", "this", "a", "can"]);
        let v = Vocab::build(["a b b", "b c", "c d"], 2);
        assert_eq!(v.token(3), Some("b"));
        assert_eq!(v.token(4), Some("c"));
        assert_eq!(v.len(), 5);
        assert_eq!(v.encode("B, c zebra"), vec![3, 4, UNK]);
        assert_eq!(v.encode("  ?! "), vec![EMPTY]);

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.json");
        v.save(&p).unwrap();
        assert_eq!(Vocab::load(&p).unwrap(), v);
        let tampered = std::fs::read_to_string(&p).unwrap().replace("\"b\"", "\"x\"");
        std::fs::write(&p, tampered).unwrap();
        assert!(matches!(Vocab::load(&p), Err(Error::Schema(_))));
    }

    #[test]
    fn encoding_is_deterministic_and_finite() {
        let m = small(HeadVariant::Softmax3);
        let e = m.encode_question("");
        assert_eq!(e.tokens, vec![EMPTY]);
        assert!(e.hidden.iter().all(|v| v.is_finite()));
        assert_eq!(m.encode_question("what color"), m.encode_question("what color"));
    }

    #[test]
    fn gru_step_matches_gate_equations() {
        let m = small(HeadVariant::Softmax3);
        let x = m.embed(3).to_vec();
        let h = vec![0.1, -0.2, 0.3, 0.0, 0.5];
        let g = &m.gru;
        let affine = |d: &Dense, v: &[f64], o: usize| d.bias[o] + (0..v.len()).map(|i| d.weight[o * v.len() + i] * v[i]).sum::<f64>();
        let s = g.step(&x, &h);
        let out = Gru::output(&s);
        for o in 0..5 {
            let z = 1.0 / (1.0 + (-(affine(&g.wz, &x, o) + affine(&g.uz, &h, o))).exp());
            let r = 1.0 / (1.0 + (-(affine(&g.wr, &x, o) + affine(&g.ur, &h, o))).exp());
            let n = (affine(&g.wn, &x, o) + r * affine(&g.un, &h, o)).tanh();
            assert!((out[o] - ((1.0 - z) * n + z * h[o])).abs() < 1e-14);
        }
    }

    #[test]
    fn attention_simplex_and_degenerate_cases() {
        let m = small(HeadVariant::DualSigmoid);
        let q = m.encode_question("what color is this");
        let (vhat, w) = m.attend(&q, &regions()).unwrap();
        assert!(w.iter().all(|&x| x >= 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let direct = weighted_sum(&w, &regions());
        assert_eq!(vhat, direct);

        let one = vec![vec![0.3, -1.0, 2.0]];
        let (vhat, w) = m.attend(&q, &one).unwrap();
        assert_eq!(w, vec![1.0]);
        assert_eq!(vhat, one[0]);

        // zero scorer weights give constant scores and therefore the mean
        let mut flat = m.clone();
        flat.att_w.weight.fill(0.0);
        let (vhat, _) = flat.attend(&q, &regions()).unwrap();
        for c in 0..3 {
            let mean = regions().iter().map(|r| r[c]).sum::<f64>() / 4.0;
            assert!((vhat[c] - mean).abs() < 1e-15);
        }
        assert!(m.attend(&q, &[vec![1.0, 2.0]]).is_err());
        assert!(m.attend(&q, &[]).is_err());
    }

    fn check_gradients(variant: HeadVariant, attention: bool) {
        let mut m = small(variant);
        m.config.attention = attention;
        // nonzero biases keep every rectifier away from its kink
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for p in m.params_mut() {
            p.iter_mut().for_each(|v| *v = rng.gen_range(-0.6..0.6));
        }
        let q = VisualQuestion::new("i", "what is on the back", false, true);
        let tokens = m.vocab.encode(&q.question);
        let regs = regions();
        let loss = |mm: &ReasonModel| reason_loss(variant, &mm.trace(&tokens, &regs, attention).mlp.pop().unwrap(), &q).0;
        let t = m.trace(&tokens, &regs, attention);
        let (_, dz) = reason_loss(variant, t.mlp.last().unwrap(), &q);
        let mut g = m.zeros_like();
        m.backward(&t, &regs, &dz, &mut g);
        let num = numeric_gradient(&m, 1e-6, loss);
        for (k, (a, n)) in g.params().iter().zip(&num).enumerate() {
            let err = relative_error(a, n);
            assert!(err < 1e-3, "block {k}: {err}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        check_gradients(HeadVariant::Softmax3, true);
        check_gradients(HeadVariant::DualSigmoid, true);
        check_gradients(HeadVariant::DualSigmoid, false);
    }

    #[test]
    fn output_contracts() {
        let o = ReasonOutput::from_logits(HeadVariant::Softmax3, &[0.2, 1.5, -0.3], 0.5);
        let d = o.distribution.unwrap();
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(o.reason_class, ReasonClass::Unrecognizable);
        let shifted = ReasonOutput::from_logits(HeadVariant::Softmax3, &[100.2, 101.5, 99.7], 0.5);
        assert_eq!(shifted.reason_class, o.reason_class);

        let o = ReasonOutput::from_logits(HeadVariant::DualSigmoid, &[2.0, 2.0], 0.5);
        assert_eq!(o.reason_class, ReasonClass::Answerable);
        let o = ReasonOutput::from_logits(HeadVariant::DualSigmoid, &[-2.0, 2.0], 0.5);
        assert_eq!(o.reason_class, ReasonClass::Unrecognizable);
        let o = ReasonOutput::from_logits(HeadVariant::DualSigmoid, &[-2.0, -2.0], 0.5);
        assert_eq!(o.reason_class, ReasonClass::InsufficientContent);
    }

    #[test]
    fn ablation_matches_attention_on_single_region() {
        let m = small(HeadVariant::DualSigmoid);
        let one = vec![vec![0.3, -1.0, 2.0]];
        let a = ablate_attention(&m, "read the label", &one, 0.5).unwrap();
        let z = m.logits(&m.vocab.encode("read the label"), &one).unwrap();
        assert_eq!(a, ReasonOutput::from_logits(HeadVariant::DualSigmoid, &z, 0.5));
    }

    #[test]
    fn training_contracts() {
        let samples: Vec<ReasonSample> = [
            ("what color is this", true, false),
            ("what is on the back", false, false),
            ("read the label", false, true),
        ]
        .iter()
        .enumerate()
        .map(|(i, &(q, a, u))| ReasonSample {
            question: VisualQuestion::new(format!("i{i}"), q, a, u),
            regions: regions(),
        })
        .collect();
        let cfg = ReasonTrainConfig {
            learning_rate: 0.0,
            epochs: 2,
            model: small(HeadVariant::Softmax3).config,
            ..Default::default()
        };
        let (ck, log) = train_reason(&samples, &cfg, "toy", "0", &CheckpointSink::default()).unwrap();
        assert_eq!(log.len(), 2);
        let fresh = ReasonModel::new(cfg.model.clone(), ck.head.vocab.clone(), cfg.seed);
        assert_eq!(ck.head.fingerprint(), fresh.fingerprint());

        let t = FeatureTensor::object(4, 3, regions().concat().iter().map(|&v| v as f32).collect(), "toy").unwrap();
        assert!(predict_reason(&ck, "what color", &t, HeadVariant::Softmax3, 0.5).is_ok());
        assert!(matches!(
            predict_reason(&ck, "what color", &t, HeadVariant::DualSigmoid, 0.5),
            Err(Error::Config(_))
        ));
        let one_class: Vec<ReasonSample> = samples.iter().take(1).cloned().collect();
        assert!(matches!(
            train_reason(&one_class, &cfg, "toy", "0", &CheckpointSink::default()),
            Err(Error::DegenerateTraining(_))
        ));
    }
}
