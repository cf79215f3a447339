//! Multi-label quality-flaw classifier: pooled backbone features, three fully
//! connected layers, eight independent sigmoids in canonical channel order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Channels, Flaw, FlawProbabilities};
use crate::error::{Error, Result};
use crate::eval::{prf_at_threshold, Prf};
use crate::features::FeatureTensor;
use crate::nn::{sigmoid, Mlp, Params};
use crate::recognizability::{
    dims, fit_sigmoid_mlp, pool_grid, BackboneMeta, Checkpoint, CheckpointSink, TrainConfig, CHECKPOINT_VERSION,
};

pub const FORMAT: &str = "flaws";

/// Flaw training defaults: the recognizability recipe with two hidden layers.
pub fn default_train_config() -> TrainConfig {
    TrainConfig {
        hidden: vec![512, 512],
        ..TrainConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlawHead {
    pub mlp: Mlp,
}

impl FlawHead {
    pub fn new(channels: usize, hidden: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FlawHead {
            mlp: Mlp::new(&dims(channels, hidden, Flaw::COUNT), &mut rng),
        }
    }

    pub fn zeros(channels: usize, hidden: &[usize]) -> Self {
        FlawHead {
            mlp: Mlp::zeros(&dims(channels, hidden, Flaw::COUNT)),
        }
    }

    pub fn channels(&self) -> usize {
        self.mlp.in_dim()
    }

    pub fn logits(&self, pooled: &[f64]) -> Channels<f64> {
        let z = self.mlp.forward(pooled);
        Channels(std::array::from_fn(|i| z[i]))
    }

    pub fn forward_pooled(&self, pooled: &[f64]) -> Result<FlawProbabilities> {
        if pooled.len() != self.channels() {
            return Err(Error::Dimension {
                expected: format!("{} pooled features", self.channels()),
                got: pooled.len().to_string(),
            });
        }
        Ok(probabilities(&self.logits(pooled)))
    }

    pub fn forward(&self, t: &FeatureTensor) -> Result<FlawProbabilities> {
        self.forward_pooled(&pool_grid(t, self.channels())?)
    }
}

impl Params for FlawHead {
    fn params(&self) -> Vec<&[f64]> {
        self.mlp.params()
    }
    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.mlp.params_mut()
    }
}

/// Per-channel sigmoid; no coupling between channels.
pub fn probabilities(logits: &Channels<f64>) -> FlawProbabilities {
    logits.map(|&z| sigmoid(z))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlawSample {
    pub image_id: String,
    pub pooled: Vec<f64>,
    pub labels: Channels<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlawEpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub loss: f64,
    /// Training-set precision/recall/F1 per channel at the configured threshold.
    pub per_channel: Channels<Prf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlawTraining {
    pub checkpoint: Checkpoint<FlawHead>,
    pub log: Vec<FlawEpochLog>,
    /// Channels without a positive training example.
    pub untrainable: Vec<Flaw>,
}

/// Per-channel precision/recall/F1 of `head` on `set`.
pub fn channel_metrics(head: &FlawHead, set: &[FlawSample], threshold: f64) -> Channels<Prf> {
    let probs: Vec<FlawProbabilities> = set.iter().map(|s| probabilities(&head.logits(&s.pooled))).collect();
    Channels(std::array::from_fn(|c| {
        let scores: Vec<f64> = probs.iter().map(|p| p.0[c]).collect();
        let labels: Vec<bool> = set.iter().map(|s| s.labels.0[c]).collect();
        prf_at_threshold(&scores, &labels, threshold).unwrap_or_default()
    }))
}

pub fn train(train_set: &[FlawSample], cfg: &TrainConfig, meta: &BackboneMeta, sink: &CheckpointSink) -> Result<FlawTraining> {
    cfg.validate()?;
    let Some(first) = train_set.first() else {
        return Err(Error::DegenerateTraining("empty training split".into()));
    };
    let untrainable: Vec<Flaw> = Flaw::ALL
        .into_iter()
        .filter(|&f| !train_set.iter().any(|s| s.labels[f]))
        .collect();
    if untrainable.len() == Flaw::COUNT {
        return Err(Error::DegenerateTraining("no flaw channel has a positive example".into()));
    }
    for f in &untrainable {
        log::warn!("flaw channel {f} has no positive training example; flagged untrainable");
    }
    let c = first.pooled.len();
    if let Some(bad) = train_set.iter().find(|s| s.pooled.len() != c) {
        return Err(Error::Dimension {
            expected: format!("{c} pooled features"),
            got: format!("{} for {}", bad.pooled.len(), bad.image_id),
        });
    }
    let mut head = FlawHead::new(c, &cfg.hidden, cfg.seed);
    let xs: Vec<Vec<f64>> = train_set.iter().map(|s| s.pooled.clone()).collect();
    let ys: Vec<Vec<bool>> = train_set.iter().map(|s| s.labels.0.to_vec()).collect();
    let make = |mlp: &Mlp| Checkpoint {
        format: FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        backbone_id: meta.backbone_id.clone(),
        preprocessing_hash: meta.preprocessing_hash.clone(),
        train_config: cfg.clone(),
        head: FlawHead { mlp: mlp.clone() },
    };
    let mut log = Vec::new();
    let mut saved = false;
    let res = fit_sigmoid_mlp(&mut head.mlp, &xs, &ys, cfg, |epoch, steps, loss, mlp| {
        let per_channel = channel_metrics(&FlawHead { mlp: mlp.clone() }, train_set, cfg.threshold);
        log::info!("epoch {epoch}: loss {loss:.5}");
        log.push(FlawEpochLog {
            epoch,
            steps,
            loss,
            per_channel,
        });
        sink.write(&make(mlp))?;
        saved = sink.path.is_some();
        Ok(())
    });
    if let Err(e) = res {
        return Err(sink.divergence(e, saved));
    }
    Ok(FlawTraining {
        checkpoint: make(&head.mlp),
        log,
        untrainable,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlawPrediction {
    pub probabilities: FlawProbabilities,
    pub labels: Channels<bool>,
}

pub fn predict(ck: &Checkpoint<FlawHead>, features: &FeatureTensor, threshold: f64) -> Result<FlawPrediction> {
    ck.check_features(features)?;
    let p = ck.head.forward(features)?;
    Ok(FlawPrediction {
        probabilities: p,
        labels: p.map(|&v| v >= threshold),
    })
}

/// Fraction of positives per channel.
pub fn channel_prevalence(labels: &[Channels<bool>]) -> Channels<f64> {
    let n = labels.len().max(1) as f64;
    Channels(std::array::from_fn(|c| labels.iter().filter(|l| l.0[c]).count() as f64 / n))
}

/// `n` guesses, each channel an independent Bernoulli draw at its training
/// prevalence.
pub fn random_flaw_baseline(train_labels: &[Channels<bool>], n: usize, seed: u64) -> Vec<Channels<bool>> {
    let prev = channel_prevalence(train_labels);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Channels(std::array::from_fn(|c| rng.gen_bool(prev.0[c]))))
        .collect()
}
