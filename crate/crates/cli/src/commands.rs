use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use serde::{Deserialize, Serialize};

use qflaw_core::curation::{
    compare_manifests, cost_savings, filter_by_scores, filter_predicted, full_manifest, perfect_flag, random_sample,
    split, Provenance, SplitSpec, Splits, TrainingManifest,
};
use qflaw_core::datamodel::{
    aggregate_all, annotations_to_json, join_questions, parse_annotation_file_with, read_aggregated, read_questions,
    ParseOptions, QuestionEntry,
};
use qflaw_core::eval::{distribution_overlap, evaluate, evaluate_hard, pr_curve_csv, prf_hard, EvalReport, Prf};
use qflaw_core::features::{
    backbone_by_id, hog_features, load_image, load_object_features, sift_stats, train_linear_classifier, Backbone,
    FeatureCache, FeatureTensor, HogConfig, SiftConfig, SvmConfig,
};
use qflaw_core::flaws::{self, FlawHead, FlawSample};
use qflaw_core::recognizability::{
    self, random_guess_baseline, BackboneMeta, Checkpoint, CheckpointSink, RecognizabilityHead, Sample,
    RANDOM_GUESS_RATE,
};
use qflaw_core::stats::stats_report;
use qflaw_core::vqa_reason::{
    ablate_attention, evaluate_reasons, predict_reason, regions_of, train_reason, HeadVariant, ReasonCheckpoint,
    ReasonOutput, ReasonSample,
};
use qflaw_core::{AggregatedLabels, Channels, Flaw, ImageRecord, VisualQuestion};

use crate::config::{ConfigError, PipelineConfig};
use crate::plot;
use crate::run::Run;
use crate::{Cli, Command, FEATURE_CACHE_ENV};

const REC_CHECKPOINT: &str = "recognizability.ckpt.json";
const FLAW_CHECKPOINT: &str = "flaws.ckpt.json";
const VQA_CHECKPOINT: &str = "vqa.ckpt.json";

pub struct Ctx {
    pub cfg: PipelineConfig,
    pub out: PathBuf,
    /// Head variant requested on the command line, if any.
    pub variant: Option<HeadVariant>,
}

fn missing(what: &str, flag: &str, key: &str) -> anyhow::Error {
    anyhow!(ConfigError(format!("no {what}: pass --{flag} or set {key}")))
}

impl Ctx {
    fn from_cli(cli: &Cli) -> anyhow::Result<Self> {
        let mut cfg = match &cli.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        if let Some(t) = cli.threshold {
            cfg.threshold = t;
        }
        if let Some(q) = cli.quorum {
            cfg.aggregation.quorum = q;
        }
        let variant = cli.variant.as_deref().map(HeadVariant::parse).transpose()?;
        if let Some(v) = variant {
            cfg.vqa.train.model.variant = v;
        }
        for (flag, slot) in [
            (&cli.annotations, &mut cfg.data.annotations),
            (&cli.aggregated, &mut cfg.data.aggregated),
            (&cli.questions, &mut cfg.data.questions),
        ] {
            if flag.is_some() {
                *slot = flag.clone();
            }
        }
        cfg.propagate();
        cfg.validate()?;
        let out = cli
            .out
            .clone()
            .or_else(|| cfg.out.clone())
            .unwrap_or_else(|| PathBuf::from("qflaw-out"));
        Ok(Ctx { cfg, out, variant })
    }

    fn annotations_path(&self) -> anyhow::Result<&Path> {
        self.cfg
            .data
            .annotations
            .as_deref()
            .ok_or_else(|| missing("annotation file", "annotations", "data.annotations"))
    }

    fn records(&self, run: &mut Run) -> anyhow::Result<Vec<ImageRecord>> {
        let path = self.annotations_path()?;
        let r = self.cfg.aggregation.redundancy;
        let opts = ParseOptions {
            redundancy: (r > 0).then_some(r),
        };
        let records = parse_annotation_file_with(path, &opts)?;
        run.input("annotations", path)?;
        Ok(records)
    }

    /// Aggregated labels from the labels file, else aggregated on the fly.
    fn labels(&self, run: &mut Run) -> anyhow::Result<Vec<AggregatedLabels>> {
        if let Some(path) = &self.cfg.data.aggregated {
            let labels = read_aggregated(path)?;
            run.input("aggregated", path)?;
            return Ok(labels);
        }
        if self.cfg.data.annotations.is_some() {
            let records = self.records(run)?;
            return Ok(aggregate_all(&records, self.cfg.aggregation.quorum)?);
        }
        Err(missing("labels", "aggregated", "data.aggregated (or --annotations)"))
    }

    fn question_entries(&self, run: &mut Run) -> anyhow::Result<Option<Vec<QuestionEntry>>> {
        match &self.cfg.data.questions {
            Some(path) => {
                let q = read_questions(path)?;
                run.input("questions", path)?;
                Ok(Some(q))
            }
            None => Ok(None),
        }
    }

    fn image_dir(&self) -> anyhow::Result<PathBuf> {
        if let Some(d) = &self.cfg.data.images {
            return Ok(d.clone());
        }
        Ok(self.annotations_path()?.parent().unwrap_or(Path::new(".")).to_path_buf())
    }

    fn image_paths(&self, records: &[ImageRecord]) -> anyhow::Result<BTreeMap<String, PathBuf>> {
        let dir = self.image_dir()?;
        Ok(records.iter().map(|r| (r.image_id.clone(), dir.join(&r.uri))).collect())
    }

    fn cache(&self) -> FeatureCache {
        let root = std::env::var_os(FEATURE_CACHE_ENV)
            .map(PathBuf::from)
            .or_else(|| self.cfg.data.feature_cache.clone())
            .unwrap_or_else(|| self.out.join("cache"));
        FeatureCache::new(root)
    }

    fn grid_features(
        &self,
        ids: &[String],
        paths: &BTreeMap<String, PathBuf>,
        backbone: &dyn Backbone,
    ) -> anyhow::Result<Vec<FeatureTensor>> {
        let cache = self.cache();
        ids.iter()
            .map(|id| {
                let path = paths
                    .get(id)
                    .ok_or_else(|| qflaw_core::Error::Join {
                        what: "image uri".into(),
                        missing: vec![id.clone()],
                    })?;
                Ok(cache.extract(id, path, backbone)?)
            })
            .collect()
    }

    /// Region features for the reason model: object files when configured,
    /// else the grid cells of `backbone_id`.
    fn region_features(&self, ids: &[String], backbone_id: &str) -> anyhow::Result<Vec<FeatureTensor>> {
        if let Some(dir) = &self.cfg.data.object_features {
            return ids
                .iter()
                .map(|id| Ok(load_object_features(dir.join(format!("{id}.qft")), None)?))
                .collect();
        }
        let run_records = parse_annotation_file_with(
            self.annotations_path()?,
            &ParseOptions {
                redundancy: None,
            },
        )?;
        let paths = self.image_paths(&run_records)?;
        let bb = backbone_by_id(backbone_id)?;
        self.grid_features(ids, &paths, bb.as_ref())
    }
}

pub fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let ctx = Ctx::from_cli(&cli)?;
    match cli.command {
        Command::Ingest => ingest(&ctx),
        Command::Aggregate => aggregate(&ctx),
        Command::Stats => stats(&ctx),
        Command::TrainRec => train_rec(&ctx),
        Command::TrainFlaws => train_flaws(&ctx),
        Command::TrainVqa => train_vqa(&ctx),
        Command::Predict { checkpoint } => predict(&ctx, &checkpoint),
        Command::Evaluate { predictions } => evaluate_cmd(&ctx, &predictions),
        Command::Overlap { scores } => overlap(&ctx, &scores),
        Command::Filter { predictions, checkpoint, n } => filter(&ctx, predictions.as_deref(), checkpoint.as_deref(), n),
        Command::Cost { n_unrecognizable } => cost(&ctx, n_unrecognizable),
        Command::Report { manifests, results } => report(&ctx, manifests, results),
    }
}

fn ingest(ctx: &Ctx) -> anyhow::Result<()> {
    #[derive(Serialize)]
    struct Summary {
        n_images: usize,
        n_annotations: usize,
        by_source_task: BTreeMap<String, usize>,
        unrecognizable_votes: usize,
    }
    let mut run = Run::new("ingest", &ctx.out, &ctx.cfg)?;
    let records = ctx.records(&mut run)?;
    let mut by_task = BTreeMap::new();
    for r in &records {
        let task = serde_json::to_value(r.source_task)?.as_str().unwrap_or_default().to_string();
        *by_task.entry(task).or_insert(0) += 1;
    }
    let summary = Summary {
        n_images: records.len(),
        n_annotations: records.iter().map(|r| r.annotations.len()).sum(),
        by_source_task: by_task,
        unrecognizable_votes: records
            .iter()
            .flat_map(|r| &r.annotations)
            .filter(|a| a.unrecognizable)
            .count(),
    };
    run.write_text("annotations.json", &(annotations_to_json(&records)? + "\n"))?;
    run.write_report("ingest.json", &summary)?;
    println!("ingested {} images, {} annotations", summary.n_images, summary.n_annotations);
    run.finish()?;
    Ok(())
}

fn aggregate(ctx: &Ctx) -> anyhow::Result<()> {
    let mut run = Run::new("aggregate", &ctx.out, &ctx.cfg)?;
    let records = ctx.records(&mut run)?;
    let labels = aggregate_all(&records, ctx.cfg.aggregation.quorum)?;
    run.write_json("aggregated.json", &labels)?;
    println!(
        "aggregated {} images at quorum {}: {} unrecognizable",
        labels.len(),
        ctx.cfg.aggregation.quorum,
        labels.iter().filter(|l| l.unrecognizable).count()
    );
    run.finish()?;
    Ok(())
}

fn flaw_codes() -> Vec<String> {
    Flaw::ALL.iter().map(|f| f.code().to_string()).collect()
}

fn stats(ctx: &Ctx) -> anyhow::Result<()> {
    let mut run = Run::new("stats", &ctx.out, &ctx.cfg)?;
    let labels = ctx.labels(&mut run)?;
    let questions = match ctx.question_entries(&mut run)? {
        Some(q) => Some(join_questions(&q, &labels)?),
        None => None,
    };
    let report = stats_report(&labels, questions.as_deref())?;
    run.write_report("stats.json", &report)?;
    let text = report.to_text();
    run.write_text("stats.txt", &text)?;
    run.write_text("interrelation.csv", &report.interrelation.to_csv(100.0))?;
    let mut names = vec!["UNREC".to_string()];
    names.extend(flaw_codes());
    let mut prevalence = vec![Some(report.p_unrecognizable)];
    prevalence.extend(report.prevalence.0.iter().map(|&v| Some(v)));
    run.write_text("prevalence.svg", &plot::bar_chart("Label prevalence", "fraction of images", &names, &prevalence))?;
    run.write_text(
        "unrecognizable_given_flaw.svg",
        &plot::bar_chart(
            "P(unrecognizable | flaw)",
            "probability",
            &flaw_codes(),
            &report.p_unrec_given_flaw.0,
        ),
    )?;
    let scaled: Vec<Vec<Option<f64>>> = report
        .interrelation
        .entries
        .iter()
        .map(|row| row.iter().map(|v| v.map(|x| x * 100.0)).collect())
        .collect();
    let channel_names: Vec<String> = report.interrelation.channels.iter().map(|f| f.code().to_string()).collect();
    run.write_text("interrelation.svg", &plot::heatmap("Flaw interrelation index (x100)", &channel_names, &scaled))?;
    if let Some(a) = &report.answerability {
        let (names, values): (Vec<String>, Vec<Option<f64>>) =
            a.p_unanswerable_given.iter().map(|(k, v)| (k.clone(), *v)).unzip();
        run.write_text(
            "unanswerable_given_label.svg",
            &plot::bar_chart("P(unanswerable | label)", "probability", &names, &values),
        )?;
    }
    print!("{text}");
    run.finish()?;
    Ok(())
}

fn split_spec(ratios: &[f64], seed: u64, stratify: bool) -> SplitSpec {
    SplitSpec::new(&["train", "val", "test"], ratios, seed, stratify)
}

fn indices_of(splits: &Splits, name: &str, index: &BTreeMap<&str, usize>) -> Vec<usize> {
    splits
        .get(name)
        .unwrap_or_default()
        .iter()
        .map(|id| index[id.as_str()])
        .collect()
}

/// Labelled images with decodable uris, in annotation order.
fn labelled_images(ctx: &Ctx, run: &mut Run) -> anyhow::Result<(Vec<AggregatedLabels>, BTreeMap<String, PathBuf>)> {
    let records = ctx.records(run)?;
    let labels = match &ctx.cfg.data.aggregated {
        Some(_) => ctx.labels(run)?,
        None => aggregate_all(&records, ctx.cfg.aggregation.quorum)?,
    };
    let paths = ctx.image_paths(&records)?;
    let missing: Vec<String> = labels.iter().filter(|l| !paths.contains_key(&l.image_id)).map(|l| l.image_id.clone()).collect();
    if !missing.is_empty() {
        return Err(qflaw_core::Error::Join {
            what: "image uri".into(),
            missing,
        }
        .into());
    }
    Ok((labels, paths))
}

#[derive(Serialize)]
struct RecEval {
    split_sizes: BTreeMap<String, usize>,
    model: EvalReport,
    random_guess: Option<EvalReport>,
    hog_svm: Option<EvalReport>,
    sift_svm: Option<EvalReport>,
}

fn classical_baseline(
    name: &str,
    paths: &BTreeMap<String, PathBuf>,
    labels: &[AggregatedLabels],
    train: &[usize],
    test: &[usize],
    seed: u64,
    feature: impl Fn(&image::RgbImage) -> Vec<f64>,
) -> Option<EvalReport> {
    let attempt = || -> qflaw_core::Result<EvalReport> {
        let feats = |idx: &[usize]| -> qflaw_core::Result<Vec<Vec<f64>>> {
            idx.iter().map(|&i| Ok(feature(&load_image(&paths[&labels[i].image_id])?))).collect()
        };
        let (xtr, xte) = (feats(train)?, feats(test)?);
        let ytr: Vec<bool> = train.iter().map(|&i| labels[i].unrecognizable).collect();
        let yte: Vec<bool> = test.iter().map(|&i| labels[i].unrecognizable).collect();
        let svm = train_linear_classifier(&xtr, &ytr, &SvmConfig { seed, ..SvmConfig::default() })?;
        let scores: Vec<f64> = xte.iter().map(|x| svm.decision(x)).collect();
        evaluate(&scores, &yte, 0.0)
    };
    attempt().map_err(|e| log::warn!("{name} baseline skipped: {e}")).ok()
}

fn train_rec(ctx: &Ctx) -> anyhow::Result<()> {
    let cfg = &ctx.cfg.recognizability;
    let mut run = Run::new("train-rec", &ctx.out, &ctx.cfg)?;
    let (labels, paths) = labelled_images(ctx, &mut run)?;
    let bb = backbone_by_id(&cfg.backbone)?;
    let ids: Vec<String> = labels.iter().map(|l| l.image_id.clone()).collect();
    let feats = ctx.grid_features(&ids, &paths, bb.as_ref())?;
    let strata: Vec<bool> = labels.iter().map(|l| l.unrecognizable).collect();
    let splits = split(&ids, Some(&strata), &split_spec(&cfg.split, ctx.cfg.seed, cfg.stratify))?;
    let index: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let samples: Vec<Sample> = labels
        .iter()
        .zip(&feats)
        .map(|(l, t)| Sample {
            image_id: l.image_id.clone(),
            pooled: t.global_pool(),
            label: l.unrecognizable,
        })
        .collect();
    let pick = |name: &str| -> Vec<Sample> { indices_of(&splits, name, &index).into_iter().map(|i| samples[i].clone()).collect() };
    let (train_set, val_set, test_set) = (pick("train"), pick("val"), pick("test"));
    let sink = CheckpointSink {
        path: Some(run.path(REC_CHECKPOINT)),
    };
    let (ck, log) = recognizability::train(
        &train_set,
        (!val_set.is_empty()).then_some(val_set.as_slice()),
        &cfg.train,
        &BackboneMeta::of(bb.as_ref()),
        &sink,
    )?;
    ck.save(run.path(REC_CHECKPOINT))?;
    run.adopt(REC_CHECKPOINT)?;
    run.write_json("recognizability.log.json", &log)?;
    run.write_json("recognizability.splits.json", &splits)?;

    let test_labels: Vec<bool> = test_set.iter().map(|s| s.label).collect();
    let scores = test_set
        .iter()
        .map(|s| ck.head.forward_pooled(&s.pooled))
        .collect::<qflaw_core::Result<Vec<f64>>>()?;
    let model = evaluate(&scores, &test_labels, ctx.cfg.threshold)?;
    let guesses = random_guess_baseline(test_set.len(), RANDOM_GUESS_RATE, ctx.cfg.seed)?;
    let train_idx = indices_of(&splits, "train", &index);
    let test_idx = indices_of(&splits, "test", &index);
    let hog = HogConfig::default();
    let sift = SiftConfig::default();
    let eval = RecEval {
        split_sizes: splits.splits.iter().map(|(n, v)| (n.clone(), v.len())).collect(),
        random_guess: evaluate_hard(&guesses, &test_labels).ok(),
        hog_svm: classical_baseline("hog", &paths, &labels, &train_idx, &test_idx, ctx.cfg.seed, |img| {
            hog_features(img, &hog).vector
        }),
        sift_svm: classical_baseline("sift", &paths, &labels, &train_idx, &test_idx, ctx.cfg.seed, |img| {
            sift_stats(img, &sift).vector
        }),
        model,
    };
    run.write_text("recognizability.pr_curve.csv", &pr_curve_csv(&eval.model.pr_curve))?;
    run.write_report("recognizability.eval.json", &eval)?;
    println!(
        "recognizability: test AP {} F1 {} ({} train / {} test)",
        fmt_opt(eval.model.ap),
        fmt_opt(eval.model.f1),
        train_set.len(),
        test_set.len()
    );
    run.finish()?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |v| format!("{v:.3}"))
}

#[derive(Serialize)]
struct FlawEval {
    split_sizes: BTreeMap<String, usize>,
    untrainable: Vec<Flaw>,
    model: Channels<Option<EvalReport>>,
    random: Channels<Prf>,
}

fn train_flaws(ctx: &Ctx) -> anyhow::Result<()> {
    let cfg = &ctx.cfg.flaws;
    let mut run = Run::new("train-flaws", &ctx.out, &ctx.cfg)?;
    let (labels, paths) = labelled_images(ctx, &mut run)?;
    let bb = backbone_by_id(&cfg.backbone)?;
    let ids: Vec<String> = labels.iter().map(|l| l.image_id.clone()).collect();
    let feats = ctx.grid_features(&ids, &paths, bb.as_ref())?;
    let splits = split::<bool>(&ids, None, &split_spec(&cfg.split, ctx.cfg.seed, false))?;
    let index: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let samples: Vec<FlawSample> = labels
        .iter()
        .zip(&feats)
        .map(|(l, t)| FlawSample {
            image_id: l.image_id.clone(),
            pooled: t.global_pool(),
            labels: l.flaws,
        })
        .collect();
    let pick = |name: &str| -> Vec<FlawSample> { indices_of(&splits, name, &index).into_iter().map(|i| samples[i].clone()).collect() };
    let (train_set, test_set) = (pick("train"), pick("test"));
    let sink = CheckpointSink {
        path: Some(run.path(FLAW_CHECKPOINT)),
    };
    let trained = flaws::train(&train_set, &cfg.train, &BackboneMeta::of(bb.as_ref()), &sink)?;
    trained.checkpoint.save(run.path(FLAW_CHECKPOINT))?;
    run.adopt(FLAW_CHECKPOINT)?;
    run.write_json("flaws.log.json", &trained.log)?;
    run.write_json("flaws.splits.json", &splits)?;

    let probs = test_set
        .iter()
        .map(|s| trained.checkpoint.head.forward_pooled(&s.pooled))
        .collect::<qflaw_core::Result<Vec<_>>>()?;
    let train_labels: Vec<Channels<bool>> = train_set.iter().map(|s| s.labels).collect();
    let guesses = flaws::random_flaw_baseline(&train_labels, test_set.len(), ctx.cfg.seed);
    let mut model = Channels([None, None, None, None, None, None, None, None]);
    let mut random = Channels([Prf::default(); 8]);
    for f in Flaw::ALL {
        let truth: Vec<bool> = test_set.iter().map(|s| s.labels[f]).collect();
        let scores: Vec<f64> = probs.iter().map(|p| p[f]).collect();
        model[f] = evaluate(&scores, &truth, ctx.cfg.threshold).ok();
        let guess: Vec<bool> = guesses.iter().map(|g| g[f]).collect();
        random[f] = prf_hard(&guess, &truth).unwrap_or_default();
    }
    let eval = FlawEval {
        split_sizes: splits.splits.iter().map(|(n, v)| (n.clone(), v.len())).collect(),
        untrainable: trained.untrainable.clone(),
        model,
        random,
    };
    run.write_report("flaws.eval.json", &eval)?;
    for f in Flaw::ALL {
        println!(
            "{}: test AP {}",
            f.code(),
            fmt_opt(eval.model[f].as_ref().and_then(|r| r.ap))
        );
    }
    run.finish()?;
    Ok(())
}

fn visual_questions(ctx: &Ctx, run: &mut Run) -> anyhow::Result<(Vec<VisualQuestion>, Vec<AggregatedLabels>)> {
    let labels = ctx.labels(run)?;
    let entries = ctx
        .question_entries(run)?
        .ok_or_else(|| missing("questions file", "questions", "data.questions"))?;
    Ok((join_questions(&entries, &labels)?, labels))
}

#[derive(Serialize)]
struct VqaEval {
    split_sizes: BTreeMap<String, usize>,
    #[serde(flatten)]
    report: qflaw_core::vqa_reason::ReasonEvalReport,
    attention_ablation_accuracy: f64,
}

fn train_vqa(ctx: &Ctx) -> anyhow::Result<()> {
    let vcfg = &ctx.cfg.vqa;
    let mut run = Run::new("train-vqa", &ctx.out, &ctx.cfg)?;
    let (questions, _) = visual_questions(ctx, &mut run)?;
    let ids: Vec<String> = questions.iter().map(|q| q.image_id.clone()).collect();
    let feats = ctx.region_features(&ids, &vcfg.backbone)?;
    let mut train_cfg = vcfg.train.clone();
    if let Some(first) = feats.first() {
        if first.channels() != train_cfg.model.region_channels {
            log::info!(
                "region_channels set to {} to match the {} features",
                first.channels(),
                first.backbone_id
            );
            train_cfg.model.region_channels = first.channels();
        }
    }
    let keys: Vec<String> = (0..questions.len()).map(|i| format!("{i:08}")).collect();
    let strata: Vec<usize> = questions.iter().map(|q| q.reason_class.index()).collect();
    let splits = split(&keys, Some(&strata), &split_spec(&vcfg.split, ctx.cfg.seed, true))?;
    let index: BTreeMap<&str, usize> = keys.iter().enumerate().map(|(i, k)| (k.as_str(), i)).collect();
    let pick = |name: &str| indices_of(&splits, name, &index);
    let samples: Vec<ReasonSample> = questions
        .iter()
        .zip(&feats)
        .map(|(q, t)| ReasonSample {
            question: q.clone(),
            regions: regions_of(t),
        })
        .collect();
    let train_set: Vec<ReasonSample> = pick("train").into_iter().map(|i| samples[i].clone()).collect();
    let (backbone_id, prep) = match feats.first() {
        Some(t) if ctx.cfg.data.object_features.is_some() => (t.backbone_id.clone(), String::new()),
        _ => {
            let bb = backbone_by_id(&vcfg.backbone)?;
            (bb.id().to_string(), bb.preprocessing_hash())
        }
    };
    let sink = CheckpointSink {
        path: Some(run.path(VQA_CHECKPOINT)),
    };
    let (ck, log) = train_reason(&train_set, &train_cfg, &backbone_id, &prep, &sink)?;
    ck.save(run.path(VQA_CHECKPOINT))?;
    run.adopt(VQA_CHECKPOINT)?;
    ck.head.vocab.save(run.path("vocab.json"))?;
    run.adopt("vocab.json")?;
    run.write_json("vqa.log.json", &log)?;

    let test = pick("test");
    let variant = ck.head.config.variant;
    let thr = ctx.cfg.threshold;
    let outputs = test
        .iter()
        .map(|&i| predict_reason(&ck, &questions[i].question, &feats[i], variant, thr))
        .collect::<qflaw_core::Result<Vec<_>>>()?;
    let truth: Vec<VisualQuestion> = test.iter().map(|&i| questions[i].clone()).collect();
    let ablated = test
        .iter()
        .map(|&i| ablate_attention(&ck.head, &questions[i].question, &samples[i].regions, thr))
        .collect::<qflaw_core::Result<Vec<_>>>()?;
    let ablation_hits = ablated.iter().zip(&truth).filter(|(o, q)| o.reason_class == q.reason_class).count();
    let eval = VqaEval {
        split_sizes: splits.splits.iter().map(|(n, v)| (n.clone(), v.len())).collect(),
        report: evaluate_reasons(&outputs, &truth, thr)?,
        attention_ablation_accuracy: ablation_hits as f64 / truth.len().max(1) as f64,
    };
    run.write_report("vqa.eval.json", &eval)?;
    println!(
        "reason model ({}): test accuracy {:.3}, unanswerable AP {}",
        variant.as_str(),
        eval.report.accuracy,
        fmt_opt(eval.report.unanswerable.ap)
    );
    run.finish()?;
    Ok(())
}

#[derive(Deserialize)]
struct FormatProbe {
    format: String,
}

#[derive(Serialize, Deserialize)]
struct RecPredictionRow {
    image_id: String,
    probability: f64,
    label: bool,
}

#[derive(Serialize, Deserialize)]
struct FlawPredictionRow {
    image_id: String,
    probabilities: Channels<f64>,
    labels: Channels<bool>,
}

#[derive(Serialize, Deserialize)]
struct ReasonPredictionRow {
    image_id: String,
    question: String,
    #[serde(flatten)]
    output: ReasonOutput,
}

fn predict(ctx: &Ctx, checkpoint: &Path) -> anyhow::Result<()> {
    let mut run = Run::new("predict", &ctx.out, &ctx.cfg)?;
    let text = std::fs::read_to_string(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    let probe: FormatProbe = serde_json::from_str(&text)
        .map_err(|_| ConfigError(format!("{} is not a checkpoint file", checkpoint.display())))?;
    run.input("checkpoint", checkpoint)?;
    let thr = ctx.cfg.threshold;
    match probe.format.as_str() {
        recognizability::FORMAT => {
            let ck = Checkpoint::<RecognizabilityHead>::load(checkpoint, recognizability::FORMAT)?;
            let records = ctx.records(&mut run)?;
            let ids: Vec<String> = records.iter().map(|r| r.image_id.clone()).collect();
            let bb = backbone_by_id(&ck.backbone_id)?;
            let feats = ctx.grid_features(&ids, &ctx.image_paths(&records)?, bb.as_ref())?;
            let rows = ids
                .into_iter()
                .zip(&feats)
                .map(|(image_id, t)| {
                    let p = recognizability::predict(&ck, t, thr)?;
                    Ok(RecPredictionRow {
                        image_id,
                        probability: p.probability,
                        label: p.label,
                    })
                })
                .collect::<qflaw_core::Result<Vec<_>>>()?;
            run.write_jsonl("predictions.jsonl", &rows)?;
            println!("{} recognizability predictions", rows.len());
        }
        flaws::FORMAT => {
            let ck = Checkpoint::<FlawHead>::load(checkpoint, flaws::FORMAT)?;
            let records = ctx.records(&mut run)?;
            let ids: Vec<String> = records.iter().map(|r| r.image_id.clone()).collect();
            let bb = backbone_by_id(&ck.backbone_id)?;
            let feats = ctx.grid_features(&ids, &ctx.image_paths(&records)?, bb.as_ref())?;
            let rows = ids
                .into_iter()
                .zip(&feats)
                .map(|(image_id, t)| {
                    let p = flaws::predict(&ck, t, thr)?;
                    Ok(FlawPredictionRow {
                        image_id,
                        probabilities: p.probabilities,
                        labels: p.labels,
                    })
                })
                .collect::<qflaw_core::Result<Vec<_>>>()?;
            run.write_jsonl("predictions.jsonl", &rows)?;
            println!("{} flaw predictions", rows.len());
        }
        qflaw_core::vqa_reason::FORMAT => {
            let ck = ReasonCheckpoint::load(checkpoint, qflaw_core::vqa_reason::FORMAT)?;
            let entries = ctx
                .question_entries(&mut run)?
                .ok_or_else(|| missing("questions file", "questions", "data.questions"))?;
            let variant = ctx.variant.unwrap_or(ck.head.config.variant);
            let ids: Vec<String> = entries.iter().map(|q| q.image_id.clone()).collect();
            let feats = ctx.region_features(&ids, &ck.backbone_id)?;
            let rows = entries
                .iter()
                .zip(&feats)
                .map(|(q, t)| {
                    Ok(ReasonPredictionRow {
                        image_id: q.image_id.clone(),
                        question: q.question.clone(),
                        output: predict_reason(&ck, &q.question, t, variant, thr)?,
                    })
                })
                .collect::<qflaw_core::Result<Vec<_>>>()?;
            run.write_jsonl("predictions.jsonl", &rows)?;
            println!("{} reason predictions", rows.len());
        }
        other => bail!(ConfigError(format!("unknown checkpoint format `{other}`"))),
    }
    run.finish()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<Vec<T>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                qflaw_core::Error::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    column: e.column(),
                    message: e.to_string(),
                }
                .into()
            })
        })
        .collect()
}

fn label_index(labels: &[AggregatedLabels]) -> BTreeMap<&str, &AggregatedLabels> {
    labels.iter().map(|l| (l.image_id.as_str(), l)).collect()
}

fn lookup<'a>(index: &BTreeMap<&str, &'a AggregatedLabels>, ids: impl Iterator<Item = &'a str>) -> anyhow::Result<Vec<&'a AggregatedLabels>> {
    let mut found = Vec::new();
    let mut absent = Vec::new();
    for id in ids {
        match index.get(id) {
            Some(l) => found.push(*l),
            None => absent.push(id.to_string()),
        }
    }
    if !absent.is_empty() {
        return Err(qflaw_core::Error::Join {
            what: "aggregated labels".into(),
            missing: absent,
        }
        .into());
    }
    Ok(found)
}

fn evaluate_cmd(ctx: &Ctx, predictions: &Path) -> anyhow::Result<()> {
    let mut run = Run::new("evaluate", &ctx.out, &ctx.cfg)?;
    run.input("predictions", predictions)?;
    let first: serde_json::Value = read_jsonl::<serde_json::Value>(predictions)?
        .into_iter()
        .next()
        .ok_or_else(|| qflaw_core::Error::UndefinedMetric("empty predictions file".into()))?;
    let thr = ctx.cfg.threshold;
    if first.get("reason_class").is_some() {
        let rows: Vec<ReasonPredictionRow> = read_jsonl(predictions)?;
        let (questions, _) = visual_questions(ctx, &mut run)?;
        let mut by_key: BTreeMap<(&str, &str), &VisualQuestion> = BTreeMap::new();
        for q in &questions {
            by_key.insert((q.image_id.as_str(), q.question.as_str()), q);
        }
        let mut truth = Vec::new();
        let mut absent = Vec::new();
        for r in &rows {
            match by_key.get(&(r.image_id.as_str(), r.question.as_str())) {
                Some(q) => truth.push((*q).clone()),
                None => absent.push(r.image_id.clone()),
            }
        }
        if !absent.is_empty() {
            return Err(qflaw_core::Error::Join {
                what: "question labels".into(),
                missing: absent,
            }
            .into());
        }
        let outputs: Vec<ReasonOutput> = rows.into_iter().map(|r| r.output).collect();
        let report = evaluate_reasons(&outputs, &truth, thr)?;
        run.write_report("eval.json", &report)?;
        println!("reason accuracy {:.3}, unanswerable AP {}", report.accuracy, fmt_opt(report.unanswerable.ap));
    } else if first.get("probabilities").is_some() {
        let rows: Vec<FlawPredictionRow> = read_jsonl(predictions)?;
        let labels = ctx.labels(&mut run)?;
        let index = label_index(&labels);
        let truth = lookup(&index, rows.iter().map(|r| r.image_id.as_str()))?;
        let mut per = BTreeMap::new();
        for f in Flaw::ALL {
            let scores: Vec<f64> = rows.iter().map(|r| r.probabilities[f]).collect();
            let y: Vec<bool> = truth.iter().map(|l| l.flaws[f]).collect();
            let report = evaluate(&scores, &y, thr).ok();
            println!("{}: AP {}", f.code(), fmt_opt(report.as_ref().and_then(|r| r.ap)));
            per.insert(f.code().to_string(), report);
        }
        run.write_report("eval.json", &per)?;
    } else {
        let rows: Vec<RecPredictionRow> = read_jsonl(predictions)?;
        let labels = ctx.labels(&mut run)?;
        let index = label_index(&labels);
        let truth = lookup(&index, rows.iter().map(|r| r.image_id.as_str()))?;
        let scores: Vec<f64> = rows.iter().map(|r| r.probability).collect();
        let y: Vec<bool> = truth.iter().map(|l| l.unrecognizable).collect();
        let report = evaluate(&scores, &y, thr)?;
        run.write_text("pr_curve.csv", &pr_curve_csv(&report.pr_curve))?;
        let pts: Vec<(f64, f64)> = report.pr_curve.iter().map(|p| (p.recall, p.precision)).collect();
        run.write_text("pr_curve.svg", &plot::line_chart("Precision-recall", "recall", "precision", &pts))?;
        run.write_report("eval.json", &report)?;
        println!(
            "AP {} precision {} recall {} F1 {}",
            fmt_opt(report.ap),
            fmt_opt(report.precision),
            fmt_opt(report.recall),
            fmt_opt(report.f1)
        );
    }
    run.finish()?;
    Ok(())
}

fn read_scores(path: &Path) -> anyhow::Result<Vec<(String, f64)>> {
    #[derive(Deserialize)]
    struct Row {
        image_id: String,
        score: f64,
    }
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(qflaw_core::Error::from)?;
    let mut out = Vec::new();
    for row in rdr.deserialize::<Row>() {
        let row = row.map_err(qflaw_core::Error::from)?;
        if !row.score.is_finite() {
            bail!(qflaw_core::Error::Schema(format!("non-finite score for {}", row.image_id)));
        }
        out.push((row.image_id, row.score));
    }
    Ok(out)
}

fn overlap(ctx: &Ctx, scores_path: &Path) -> anyhow::Result<()> {
    #[derive(Serialize)]
    struct OverlapReport {
        n_recognizable: usize,
        n_unrecognizable: usize,
        #[serde(flatten)]
        overlap: qflaw_core::eval::Overlap,
    }
    let mut run = Run::new("overlap", &ctx.out, &ctx.cfg)?;
    run.input("scores", scores_path)?;
    let scores = read_scores(scores_path)?;
    let labels = ctx.labels(&mut run)?;
    let index = label_index(&labels);
    let truth = lookup(&index, scores.iter().map(|(id, _)| id.as_str()))?;
    let (mut rec, mut unrec) = (Vec::new(), Vec::new());
    for ((_, s), l) in scores.iter().zip(truth) {
        if l.unrecognizable {
            unrec.push(*s);
        } else {
            rec.push(*s);
        }
    }
    let ov = distribution_overlap(&rec, &unrec, ctx.cfg.eval.bins)?;
    run.write_text(
        "overlap.svg",
        &plot::histogram_pair(
            &format!("Score distributions (overlap {:.3})", ov.coefficient),
            ov.a.lo,
            ov.a.bin_width,
            ("recognizable", &ov.a.density),
            ("unrecognizable", &ov.b.density),
        ),
    )?;
    println!("overlap coefficient {:.4}", ov.coefficient);
    run.write_report(
        "overlap.json",
        OverlapReport {
            n_recognizable: rec.len(),
            n_unrecognizable: unrec.len(),
            overlap: ov,
        },
    )?;
    run.finish()?;
    Ok(())
}

fn filter(ctx: &Ctx, predictions: Option<&Path>, checkpoint: Option<&Path>, n: Option<usize>) -> anyhow::Result<()> {
    #[derive(Serialize)]
    struct Summary {
        n_total: usize,
        #[serde(rename = "N")]
        n: usize,
        n_source: &'static str,
        threshold: f64,
        manifests: BTreeMap<String, usize>,
    }
    let mut run = Run::new("filter", &ctx.out, &ctx.cfg)?;
    let labels = ctx.labels(&mut run)?;
    let ids: Vec<String> = labels.iter().map(|l| l.image_id.clone()).collect();
    let thr = ctx.cfg.threshold;
    let predicted = match (predictions, checkpoint) {
        (Some(p), _) => {
            run.input("predictions", p)?;
            let rows: Vec<RecPredictionRow> = read_jsonl(p)?;
            let index = label_index(&labels);
            lookup(&index, rows.iter().map(|r| r.image_id.as_str()))?;
            let scored: Vec<(String, f64)> = rows.into_iter().map(|r| (r.image_id, r.probability)).collect();
            Some(filter_by_scores(&scored, thr, Provenance::default()))
        }
        (None, Some(c)) => {
            run.input("checkpoint", c)?;
            let ck = Checkpoint::<RecognizabilityHead>::load(c, recognizability::FORMAT)?;
            let records = ctx.records(&mut run)?;
            let bb = backbone_by_id(&ck.backbone_id)?;
            let feats = ctx.grid_features(&ids, &ctx.image_paths(&records)?, bb.as_ref())?;
            let images: Vec<(String, FeatureTensor)> = ids.iter().cloned().zip(feats).collect();
            let label = c.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
            Some(filter_predicted(&ck, &images, thr, &label)?)
        }
        (None, None) => None,
    };
    let (size, source) = match (&predicted, n.or(ctx.cfg.curation.n)) {
        (Some(m), _) => (m.n, "predicted_flag"),
        (None, Some(n)) => (n, "explicit"),
        (None, None) => (labels.iter().filter(|l| !l.unrecognizable).count(), "quorum_recognizable"),
    };
    let mut manifests: Vec<TrainingManifest> = vec![full_manifest(&ids)];
    manifests.extend(predicted);
    manifests.push(perfect_flag(&labels, size)?);
    manifests.push(random_sample(&ids, size, ctx.cfg.seed)?);
    let mut counts = BTreeMap::new();
    for m in &manifests {
        let mode = m.selection_mode.as_str();
        run.write_json(&format!("manifests/{mode}.json"), m)?;
        counts.insert(mode.to_string(), m.n);
        println!("{mode}: {} images", m.n);
    }
    run.write_report(
        "filter.json",
        Summary {
            n_total: ids.len(),
            n: size,
            n_source: source,
            threshold: thr,
            manifests: counts,
        },
    )?;
    run.finish()?;
    Ok(())
}

fn cost(ctx: &Ctx, n_unrecognizable: Option<u64>) -> anyhow::Result<()> {
    let mut run = Run::new("cost", &ctx.out, &ctx.cfg)?;
    let n = match n_unrecognizable {
        Some(n) => n,
        None => ctx.labels(&mut run)?.iter().filter(|l| l.unrecognizable).count() as u64,
    };
    let savings = cost_savings(n, &ctx.cfg.cost.model())?;
    let text = savings.to_text();
    run.write_report("cost.json", &savings)?;
    run.write_text("cost.txt", &format!("{text}\n"))?;
    println!("{text}");
    run.finish()?;
    Ok(())
}

fn report(ctx: &Ctx, manifests: Option<PathBuf>, results: Option<PathBuf>) -> anyhow::Result<()> {
    let mut run = Run::new("report", &ctx.out, &ctx.cfg)?;
    let dir = manifests.unwrap_or_else(|| ctx.out.join("manifests"));
    let results = results
        .or_else(|| ctx.cfg.curation.results.clone())
        .ok_or_else(|| missing("downstream results", "results", "curation.results"))?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
        .with_context(|| format!("listing manifests in {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    let mut loaded = Vec::new();
    for f in &files {
        let text = std::fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
        let m: TrainingManifest = serde_json::from_str(&text)
            .map_err(|e| qflaw_core::Error::Schema(format!("{}: {e}", f.display())))?;
        run.input(&format!("manifest:{}", m.selection_mode.as_str()), f)?;
        loaded.push(m);
    }
    if loaded.is_empty() {
        bail!(ConfigError(format!("no manifests found in {}", dir.display())));
    }
    run.input("results", &results)?;
    let csv_text = std::fs::read_to_string(&results).with_context(|| format!("reading {}", results.display()))?;
    let comparison = compare_manifests(&loaded, &csv_text)?;
    let text = comparison.to_text();
    run.write_report("comparison.json", &comparison)?;
    run.write_text("comparison.txt", &text)?;
    print!("{text}");
    run.finish()?;
    Ok(())
}
