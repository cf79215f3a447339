//! Unrecognizability classifier: global average pooling of frozen backbone
//! features, two fully connected layers and a single sigmoid output.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::average_precision;
use crate::features::{Backbone, FeatureKind, FeatureTensor};
use crate::nn::{bce_with_logit, scale_grads, sigmoid, Adam, AdamConfig, Mlp, Params};

pub const DEFAULT_HIDDEN: usize = 512;
pub const RANDOM_GUESS_RATE: f64 = 0.148;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Probability at or above which a prediction is positive.
    pub threshold: f64,
    /// Hidden widths between the pooled features and the output layer.
    pub hidden: Vec<usize>,
    /// Optional hard cap on optimizer steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 8,
            batch_size: 32,
            seed: 0,
            threshold: 0.5,
            hidden: vec![DEFAULT_HIDDEN],
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold must be in [0, 1], got {}", self.threshold)));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be >= 1".into()));
        }
        Ok(())
    }
}

/// Versioned model container shared by all heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<H, C = TrainConfig> {
    pub format: String,
    pub version: u32,
    pub backbone_id: String,
    pub preprocessing_hash: String,
    pub train_config: C,
    pub head: H,
}

impl<H: Serialize + DeserializeOwned, C: Serialize + DeserializeOwned> Checkpoint<H, C> {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint, checking the container format name.
    pub fn load(path: impl AsRef<Path>, format: &str) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read checkpoint {}: {e}", path.display())))?;
        let ck: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("invalid checkpoint {}: {e}", path.display())))?;
        if ck.format != format {
            return Err(Error::Config(format!("checkpoint {} holds a `{}` model, expected `{format}`", path.display(), ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint version {}", ck.version)));
        }
        Ok(ck)
    }

    pub fn check_features(&self, t: &FeatureTensor) -> Result<()> {
        if t.backbone_id != self.backbone_id {
            return Err(Error::Config(format!(
                "features come from backbone `{}`, checkpoint expects `{}`",
                t.backbone_id, self.backbone_id
            )));
        }
        Ok(())
    }
}

/// Validates grid features and global-average-pools them.
pub fn pool_grid(t: &FeatureTensor, channels: usize) -> Result<Vec<f64>> {
    if t.kind != FeatureKind::Grid {
        return Err(Error::Dimension {
            expected: "grid features".into(),
            got: "object features".into(),
        });
    }
    if t.channels() != channels {
        return Err(Error::Dimension {
            expected: format!("{channels} channels"),
            got: t.channels().to_string(),
        });
    }
    Ok(t.global_pool())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognizabilityHead {
    pub mlp: Mlp,
}

impl RecognizabilityHead {
    pub fn new(channels: usize, hidden: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RecognizabilityHead {
            mlp: Mlp::new(&dims(channels, hidden, 1), &mut rng),
        }
    }

    pub fn zeros(channels: usize, hidden: &[usize]) -> Self {
        RecognizabilityHead {
            mlp: Mlp::zeros(&dims(channels, hidden, 1)),
        }
    }

    pub fn channels(&self) -> usize {
        self.mlp.in_dim()
    }

    pub fn logit(&self, pooled: &[f64]) -> f64 {
        self.mlp.forward(pooled)[0]
    }

    /// Probability of unrecognizability from already pooled features.
    pub fn forward_pooled(&self, pooled: &[f64]) -> Result<f64> {
        if pooled.len() != self.channels() {
            return Err(Error::Dimension {
                expected: format!("{} pooled features", self.channels()),
                got: pooled.len().to_string(),
            });
        }
        Ok(sigmoid(self.logit(pooled)))
    }

    pub fn forward(&self, t: &FeatureTensor) -> Result<f64> {
        self.forward_pooled(&pool_grid(t, self.channels())?)
    }
}

impl Params for RecognizabilityHead {
    fn params(&self) -> Vec<&[f64]> {
        self.mlp.params()
    }
    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.mlp.params_mut()
    }
}

pub(crate) fn dims(input: usize, hidden: &[usize], out: usize) -> Vec<usize> {
    let mut d = vec![input];
    d.extend_from_slice(hidden);
    d.push(out);
    d
}

/// Pooled features plus a binary target.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image_id: String,
    pub pooled: Vec<f64>,
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    /// Mean minibatch loss over the epoch.
    pub loss: f64,
    pub train_ap: Option<f64>,
    pub val_ap: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<H> {
    pub head: H,
    pub log: Vec<EpochLog>,
    pub steps: usize,
}

/// Minibatch Adam over an MLP whose outputs are independent sigmoids with
/// summed binary cross-entropy. `on_epoch` sees (epoch, steps, mean loss,
/// model) after every epoch; a returned error aborts training.
pub(crate) fn fit_sigmoid_mlp(
    mlp: &mut Mlp,
    xs: &[Vec<f64>],
    targets: &[Vec<bool>],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, usize, f64, &Mlp) -> Result<()>,
) -> Result<usize> {
    let mut opt = Adam::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        ..Default::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut steps = 0;
    let cap = cfg.max_steps.unwrap_or(usize::MAX);
    for epoch in 1..=cfg.epochs {
        if steps >= cap {
            break;
        }
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            if steps >= cap {
                break;
            }
            let mut grad = mlp.zeros_like();
            let mut loss = 0.0;
            for &i in batch {
                let trace = mlp.trace(&xs[i]);
                let logits = trace.last().unwrap();
                let mut dz = Vec::with_capacity(logits.len());
                for (&z, &t) in logits.iter().zip(&targets[i]) {
                    let (l, g) = bce_with_logit(z, t);
                    loss += l;
                    dz.push(g);
                }
                mlp.backward(&trace, &dz, &mut grad);
            }
            let k = 1.0 / batch.len() as f64;
            loss *= k;
            scale_grads(&mut grad, k);
            if !loss.is_finite() || !grad.all_finite() {
                return Err(Error::Divergence { step: steps, last_good: None });
            }
            opt.step(mlp, &grad);
            if !mlp.all_finite() {
                return Err(Error::Divergence { step: steps, last_good: None });
            }
            steps += 1;
            total += loss;
            batches += 1;
        }
        on_epoch(epoch, steps, total / batches.max(1) as f64, mlp)?;
    }
    Ok(steps)
}

/// Everything needed to persist a trained head next to its backbone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneMeta {
    pub backbone_id: String,
    pub preprocessing_hash: String,
}

impl BackboneMeta {
    pub fn of(b: &dyn Backbone) -> Self {
        BackboneMeta {
            backbone_id: b.id().to_string(),
            preprocessing_hash: b.preprocessing_hash(),
        }
    }
}

/// Where (and whether) to write per-epoch checkpoints.
#[derive(Debug, Clone, Default)]
pub struct CheckpointSink {
    pub path: Option<PathBuf>,
}

impl CheckpointSink {
    pub(crate) fn write<H: Serialize + DeserializeOwned, C: Serialize + DeserializeOwned>(&self, ck: &Checkpoint<H, C>) -> Result<()> {
        match &self.path {
            Some(p) => ck.save(p),
            None => Ok(()),
        }
    }

    pub(crate) fn divergence(&self, err: Error, saved_any: bool) -> Error {
        match err {
            Error::Divergence { step, .. } => Error::Divergence {
                step,
                last_good: self.path.as_ref().filter(|_| saved_any).map(|p| p.display().to_string()),
            },
            e => e,
        }
    }
}

pub const FORMAT: &str = "recognizability";

pub fn train(
    train_set: &[Sample],
    val_set: Option<&[Sample]>,
    cfg: &TrainConfig,
    meta: &BackboneMeta,
    sink: &CheckpointSink,
) -> Result<(Checkpoint<RecognizabilityHead>, Vec<EpochLog>)> {
    cfg.validate()?;
    let Some(first) = train_set.first() else {
        return Err(Error::DegenerateTraining("empty training split".into()));
    };
    let pos = train_set.iter().filter(|s| s.label).count();
    if pos == 0 || pos == train_set.len() {
        return Err(Error::DegenerateTraining(format!(
            "training split has a single class ({pos} positives of {})",
            train_set.len()
        )));
    }
    let c = first.pooled.len();
    if let Some(bad) = train_set.iter().chain(val_set.unwrap_or(&[])).find(|s| s.pooled.len() != c) {
        return Err(Error::Dimension {
            expected: format!("{c} pooled features"),
            got: format!("{} for {}", bad.pooled.len(), bad.image_id),
        });
    }
    let mut head = RecognizabilityHead::new(c, &cfg.hidden, cfg.seed);
    let xs: Vec<Vec<f64>> = train_set.iter().map(|s| s.pooled.clone()).collect();
    let ys: Vec<Vec<bool>> = train_set.iter().map(|s| vec![s.label]).collect();
    let mut log = Vec::new();
    let mut saved = false;
    let make = |mlp: &Mlp| Checkpoint {
        format: FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        backbone_id: meta.backbone_id.clone(),
        preprocessing_hash: meta.preprocessing_hash.clone(),
        train_config: cfg.clone(),
        head: RecognizabilityHead { mlp: mlp.clone() },
    };
    let res = fit_sigmoid_mlp(&mut head.mlp, &xs, &ys, cfg, |epoch, steps, loss, mlp| {
        let model = RecognizabilityHead { mlp: mlp.clone() };
        let ap = |set: &[Sample]| {
            let scores: Vec<f64> = set.iter().map(|s| sigmoid(model.logit(&s.pooled))).collect();
            let labels: Vec<bool> = set.iter().map(|s| s.label).collect();
            average_precision(&scores, &labels).ok()
        };
        let entry = EpochLog {
            epoch,
            steps,
            loss,
            train_ap: ap(train_set),
            val_ap: val_set.and_then(ap),
        };
        log::info!("epoch {epoch}: loss {loss:.5}, train AP {:?}, val AP {:?}", entry.train_ap, entry.val_ap);
        log.push(entry);
        sink.write(&make(mlp))?;
        saved = sink.path.is_some();
        Ok(())
    });
    if let Err(e) = res {
        return Err(sink.divergence(e, saved));
    }
    Ok((make(&head.mlp), log))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probability: f64,
    pub label: bool,
}

/// `label = probability >= threshold`.
pub fn binarize(probability: f64, threshold: f64) -> Prediction {
    Prediction {
        probability,
        label: probability >= threshold,
    }
}

pub fn predict(ck: &Checkpoint<RecognizabilityHead>, features: &FeatureTensor, threshold: f64) -> Result<Prediction> {
    ck.check_features(features)?;
    Ok(binarize(ck.head.forward(features)?, threshold))
}

/// Batch prediction; output order follows input order.
pub fn predict_batch(ck: &Checkpoint<RecognizabilityHead>, features: &[FeatureTensor], threshold: f64) -> Result<Vec<Prediction>> {
    features.iter().map(|f| predict(ck, f, threshold)).collect()
}

/// Seeded iid Bernoulli(p) guesses.
pub fn random_guess_baseline(n: usize, p: f64, seed: u64) -> Result<Vec<bool>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Spec(format!("guess rate must be in [0, 1], got {p}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| rng.gen_bool(p)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{numeric_gradient, relative_error, Dense};

    fn toy_samples() -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        (0..24)
            .map(|i| {
                let label = i % 3 == 0;
                let mut x: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
                x[0] += if label { 1.5 } else { -1.5 };
                Sample {
                    image_id: format!("s{i}"),
                    pooled: x,
                    label,
                }
            })
            .collect()
    }

    fn meta() -> BackboneMeta {
        BackboneMeta {
            backbone_id: "toy".into(),
            preprocessing_hash: "0".into(),
        }
    }

    #[test]
    fn zero_head_gives_one_half() {
        let head = RecognizabilityHead::zeros(4, &[3]);
        let t = FeatureTensor::grid(2, 2, 4, (0..16).map(|i| i as f32).collect(), "toy").unwrap();
        assert_eq!(head.forward(&t).unwrap(), 0.5);
        let wrong = FeatureTensor::grid(1, 1, 3, vec![0.0; 3], "toy").unwrap();
        assert!(matches!(head.forward(&wrong), Err(Error::Dimension { .. })));
    }

    #[test]
    fn hand_built_head_matches_direct_formula() {
        // pooled = [mean(1,3), mean(2,-2)] = [2, 0]
        let t = FeatureTensor::grid(1, 2, 2, vec![1.0, 2.0, 3.0, -2.0], "toy").unwrap();
        let fc1 = Dense {
            in_dim: 2,
            out_dim: 2,
            weight: vec![0.5, -1.0, -1.0, 0.25],
            bias: vec![0.1, 0.3],
        };
        let fc2 = Dense {
            in_dim: 2,
            out_dim: 1,
            weight: vec![2.0, -3.0],
            bias: vec![-0.4],
        };
        let head = RecognizabilityHead {
            mlp: Mlp { layers: vec![fc1, fc2] },
        };
        // h = relu([1.1, -1.7]) = [1.1, 0]; z = 2.2 - 0.4 = 1.8
        let expect = 1.0 / (1.0 + (-1.8f64).exp());
        assert!((head.forward(&t).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn gradient_check() {
        let head = RecognizabilityHead::new(6, &[5], 2);
        let s = &toy_samples()[0];
        let loss = |h: &RecognizabilityHead| bce_with_logit(h.logit(&s.pooled), s.label).0;
        let trace = head.mlp.trace(&s.pooled);
        let (_, dz) = bce_with_logit(trace[2][0], s.label);
        let mut g = head.mlp.zeros_like();
        head.mlp.backward(&trace, &[dz], &mut g);
        let num = numeric_gradient(&head, 1e-6, loss);
        for (a, n) in g.params().iter().zip(&num) {
            assert!(relative_error(a, n) < 1e-3);
        }
    }

    #[test]
    fn training_errors() {
        let cfg = TrainConfig::default();
        let mut one_class = toy_samples();
        one_class.iter_mut().for_each(|s| s.label = false);
        assert!(matches!(
            train(&one_class, None, &cfg, &meta(), &CheckpointSink::default()),
            Err(Error::DegenerateTraining(_))
        ));
        let diverge = TrainConfig {
            learning_rate: f64::INFINITY,
            ..cfg.clone()
        };
        assert!(matches!(diverge.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn divergence_reports_last_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let sink = CheckpointSink {
            path: Some(dir.path().join("rec.json")),
        };
        let mut samples = toy_samples();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 24,
            hidden: vec![4],
            ..Default::default()
        };
        // a NaN feature poisons the forward pass from the first step
        samples[1].pooled[2] = f64::NAN;
        match train(&samples, None, &cfg, &meta(), &sink) {
            Err(Error::Divergence { step, last_good }) => {
                assert_eq!(step, 0);
                assert_eq!(last_good, None);
            }
            other => panic!("expected divergence, got {other:?}"),
        }

        // an absurd step size blows up after the first saved epoch
        let cfg = TrainConfig {
            learning_rate: 1e300,
            ..cfg
        };
        match train(&toy_samples(), None, &cfg, &meta(), &sink) {
            Err(Error::Divergence { step, last_good }) => {
                assert!(step >= 1);
                let p = last_good.expect("checkpoint path");
                assert!(Checkpoint::<RecognizabilityHead>::load(p, FORMAT).is_ok());
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 2,
            hidden: vec![8],
            seed: 3,
            ..Default::default()
        };
        let (ck, log) = train(&toy_samples(), None, &cfg, &meta(), &CheckpointSink::default()).unwrap();
        assert_eq!(log.len(), 2);
        assert_eq!(ck.head.fingerprint(), RecognizabilityHead::new(6, &[8], 3).fingerprint());
    }

    #[test]
    fn single_example_loss_decreases() {
        let s = toy_samples().remove(0);
        let mut mlp = RecognizabilityHead::new(6, &[16], 1).mlp;
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 1,
            ..Default::default()
        };
        let mut losses = Vec::new();
        fit_sigmoid_mlp(&mut mlp, std::slice::from_ref(&s.pooled), &[vec![s.label]], &cfg, |_, _, l, _| {
            losses.push(l);
            Ok(())
        })
        .unwrap();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn checkpoint_round_trip_and_prediction() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rec.json");
        let cfg = TrainConfig {
            epochs: 3,
            hidden: vec![8],
            ..Default::default()
        };
        let sink = CheckpointSink { path: Some(path.clone()) };
        let (ck, log) = train(&toy_samples(), None, &cfg, &meta(), &sink).unwrap();
        assert!(log.iter().all(|l| l.train_ap.is_some()));
        let back = Checkpoint::<RecognizabilityHead>::load(&path, FORMAT).unwrap();
        assert_eq!(back, ck);
        assert!(matches!(
            Checkpoint::<RecognizabilityHead>::load(&path, "flaws"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            Checkpoint::<RecognizabilityHead>::load(dir.path().join("none.json"), FORMAT),
            Err(Error::Config(_))
        ));

        let t = FeatureTensor::grid(1, 1, 6, vec![0.5; 6], "toy").unwrap();
        let p = predict(&ck, &t, 0.5).unwrap();
        assert!(p.probability > 0.0 && p.probability < 1.0);
        let other = FeatureTensor::grid(1, 1, 6, vec![0.5; 6], "other").unwrap();
        assert!(matches!(predict(&ck, &other, 0.5), Err(Error::Config(_))));
    }

    #[test]
    fn threshold_convention() {
        assert!(binarize(0.7, 0.5).label);
        assert!(binarize(0.5, 0.5).label);
        assert!(!binarize(0.49, 0.5).label);
    }

    #[test]
    fn random_guess() {
        assert!(random_guess_baseline(100, 0.0, 1).unwrap().iter().all(|&b| !b));
        assert!(random_guess_baseline(100, 1.0, 1).unwrap().iter().all(|&b| b));
        let g = random_guess_baseline(100_000, RANDOM_GUESS_RATE, 7).unwrap();
        let rate = g.iter().filter(|&&b| b).count() as f64 / 1e5;
        let sigma = (RANDOM_GUESS_RATE * (1.0 - RANDOM_GUESS_RATE) / 1e5).sqrt();
        assert!((rate - RANDOM_GUESS_RATE).abs() <= 3.0 * sigma.max(0.004 / 3.0));
        assert_eq!(g, random_guess_baseline(100_000, RANDOM_GUESS_RATE, 7).unwrap());
        assert!(random_guess_baseline(1, 1.5, 0).is_err());
    }
}
