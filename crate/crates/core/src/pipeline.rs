//! End-to-end commands: feature extraction with caching, view generation,
//! weight training and the evaluation reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::cache::{atomic_write, config_hash, dataset_hash, FeatureCache};
use crate::curvature::CurvatureConfig;
use crate::error::{Error, Result};
use crate::eval::{control_report, ranking_csv, ranking_report, run_ablation, Ablation, AblationResult, ControlReport, RankingReport};
use crate::features::{family_features, write_feature_csv, CheckpointFeatures, FamilyNormalizer, FeatureConfig, RawFeatures, DEFAULT_OMEGA};
use crate::ingest::{load_bundle, sample_per_class, CheckpointFamily, EmbeddingDataset};
use crate::rng::Seed;
use crate::ssl::{train_weights, Hyper, ScoreWeights, Variant, Vec5, ViewBatch};
use crate::topology::ImageConfig;
use crate::views::{apply_view, view_seed, write_view_manifest, ViewCounts, ViewKind, ViewParams, ViewRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub bundle: Option<PathBuf>,
    pub k: usize,
    pub per_class: usize,
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
    pub out: PathBuf,
    /// Defaults to `<out>/cache`.
    pub cache: Option<PathBuf>,
    pub hyper: Hyper,
    pub curvature: CurvatureConfig,
    pub image: ImageConfig,
    pub omega_components: Vec<String>,
    pub views: ViewCounts,
    pub view_params: ViewParams,
    /// Score variant used by `score` and `controls` when no weights file is given.
    pub variant: String,
    /// Torsion weight of the fixed GeoScore variant.
    pub geoscore_alpha: f64,
    /// Trained weights to load instead of training.
    pub weights: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            bundle: None,
            k: 10,
            per_class: 100,
            seed: 0,
            jobs: 0,
            out: PathBuf::from("topogeo_out"),
            cache: None,
            hyper: Hyper::default(),
            curvature: CurvatureConfig::default(),
            image: ImageConfig::default(),
            omega_components: DEFAULT_OMEGA.iter().map(|s| s.to_string()).collect(),
            views: ViewCounts::default(),
            view_params: ViewParams::default(),
            variant: "learned".into(),
            geoscore_alpha: 0.5,
            weights: None,
        }
    }
}

impl RunConfig {
    /// Reads a JSON config; absent fields keep their defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidInput(format!("config {}: {e}", path.display())))
    }

    pub fn feature_config(&self) -> FeatureConfig {
        FeatureConfig {
            k: self.k,
            curvature: self.curvature,
            image: self.image,
            omega_components: self.omega_components.clone(),
        }
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache.clone().unwrap_or_else(|| self.out.join("cache"))
    }

    pub fn score_variant(&self) -> Result<Variant> {
        Ok(match self.variant.parse::<Variant>()? {
            Variant::FixedGeoscore { .. } => Variant::FixedGeoscore { alpha: self.geoscore_alpha },
            v => v,
        })
    }

    fn bundle_path(&self) -> Result<&Path> {
        self.bundle
            .as_deref()
            .ok_or_else(|| Error::InvalidInput("no bundle given (--bundle or \"bundle\" in the config)".into()))
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))
    }
}

/// Cache traffic of one stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: usize,
    pub computed: usize,
}

#[derive(Default)]
struct Counter {
    hits: AtomicUsize,
    computed: AtomicUsize,
}

impl Counter {
    fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            computed: self.computed.load(Ordering::Relaxed),
        }
    }
}

/// Raw-feature settings that the cached values depend on.
#[derive(Serialize)]
struct RawKey<'a> {
    k: usize,
    curvature: &'a CurvatureConfig,
    image: &'a ImageConfig,
}

fn raw_config_hash(f: &FeatureConfig) -> Result<String> {
    config_hash(&RawKey {
        k: f.k,
        curvature: &f.curvature,
        image: &f.image,
    })
}

fn cached<T, F>(cache: &FeatureCache, key: &str, counter: &Counter, compute: F) -> Result<T>
where
    T: Serialize + serde::de::DeserializeOwned,
    F: FnOnce() -> Result<T>,
{
    if let Some(raw) = cache.get::<T>(key) {
        counter.hits.fetch_add(1, Ordering::Relaxed);
        return Ok(raw);
    }
    let raw = compute()?;
    cache.put(key, &raw)?;
    counter.computed.fetch_add(1, Ordering::Relaxed);
    Ok(raw)
}

/// A family after sampling and feature extraction.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub family: CheckpointFamily,
    pub raws: Vec<RawFeatures>,
    pub normalizer: FamilyNormalizer,
    pub features: Vec<CheckpointFeatures>,
    pub stats: CacheStats,
}

impl Prepared {
    pub fn anchors(&self) -> Vec<Vec5> {
        self.features.iter().map(|f| f.g).collect()
    }

    pub fn ood_accuracy(&self) -> Result<&[f64]> {
        self.family
            .ood_accuracy
            .as_deref()
            .ok_or_else(|| Error::MissingGroundTruth(self.family.family_id.clone()))
    }

    /// Severity tags from `metadata.severity`, one per checkpoint.
    pub fn severity(&self) -> Option<Vec<String>> {
        let tags = self.family.metadata.as_ref()?.get("severity")?.as_array()?;
        if tags.len() != self.family.checkpoints.len() {
            return None;
        }
        Some(
            tags.iter()
                .map(|t| t.as_str().map_or_else(|| t.to_string(), str::to_string))
                .collect(),
        )
    }
}

/// Draws the per-class sample of every checkpoint with one shared seed.
pub fn sample_family(family: &CheckpointFamily, per_class: usize, seed: u64) -> Result<CheckpointFamily> {
    let checkpoints = family
        .checkpoints
        .iter()
        .map(|c| sample_per_class(c, per_class, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(CheckpointFamily {
        checkpoints,
        ..family.clone()
    })
}

/// Samples the family and computes (or loads) the raw features of every
/// checkpoint, then fits the family normalizer.
pub fn prepare_family(family: &CheckpointFamily, cfg: &RunConfig) -> Result<Prepared> {
    family.validate()?;
    let sampled = sample_family(family, cfg.per_class, cfg.seed)?;
    let fcfg = cfg.feature_config();
    let raw_hash = raw_config_hash(&fcfg)?;
    let cache = FeatureCache::new(cfg.cache_dir());
    let counter = Counter::default();
    let raws = cfg.pool()?.install(|| {
        sampled
            .checkpoints
            .par_iter()
            .map(|ds| {
                let key = FeatureCache::key(&["raw", &dataset_hash(ds), &raw_hash]);
                cached(&cache, &key, &counter, || {
                    log::info!("features for {}", ds.checkpoint_id);
                    crate::features::checkpoint_raw_features(ds, &fcfg)
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let (normalizer, features) = family_features(&raws, &cfg.omega_components)?;
    Ok(Prepared {
        family: sampled,
        raws,
        normalizer,
        features,
        stats: counter.stats(),
    })
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    prepare_family(&load_bundle(cfg.bundle_path()?)?, cfg)
}

/// Features of one view of one anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewFeatures {
    pub anchor: usize,
    pub kind: ViewKind,
    pub replicate: usize,
    pub seed: u64,
    pub g: Vec5,
    pub markers: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ViewSet {
    pub anchors: Vec<Vec5>,
    pub views: Vec<ViewFeatures>,
    pub records: Vec<ViewRecord>,
    pub stats: CacheStats,
}

impl ViewSet {
    pub fn batch(&self) -> Result<ViewBatch> {
        let mut batch = ViewBatch::new(self.anchors.clone());
        for v in &self.views {
            match v.kind.polarity() {
                crate::views::Polarity::Positive => batch.add_positive(v.anchor, v.g)?,
                crate::views::Polarity::Negative => batch.add_negative(v.anchor, v.g)?,
            }
        }
        Ok(batch)
    }
}

/// Seed of the views of one anchor.
pub fn anchor_view_seed(root: u64, checkpoint_id: &str) -> Seed {
    Seed::new(root).child("views").child(checkpoint_id)
}

/// Generates every planned view of every anchor, normalized with the
/// anchor family's statistics.
pub fn build_views(prep: &Prepared, cfg: &RunConfig) -> Result<ViewSet> {
    let fcfg = cfg.feature_config();
    let raw_hash = raw_config_hash(&fcfg)?;
    let params_hash = config_hash(&cfg.view_params)?;
    let cache = FeatureCache::new(cfg.cache_dir());
    let counter = Counter::default();
    let plan = cfg.views.plan();
    let jobs: Vec<(usize, ViewKind, usize)> = (0..prep.family.checkpoints.len())
        .flat_map(|a| plan.iter().map(move |&(kind, i)| (a, kind, i)))
        .collect();
    let hashes: Vec<String> = prep.family.checkpoints.iter().map(dataset_hash).collect();
    let computed = cfg.pool()?.install(|| {
        jobs.par_iter()
            .map(|&(a, kind, i)| {
                let ds: &EmbeddingDataset = &prep.family.checkpoints[a];
                let seed = view_seed(anchor_view_seed(cfg.seed, &ds.checkpoint_id), kind, i);
                let seed_text = seed.0.to_string();
                let key = FeatureCache::key(&["view", &hashes[a], kind.name(), &seed_text, &params_hash, &raw_hash]);
                let (raw, markers): (RawFeatures, Vec<String>) = cached(&cache, &key, &counter, || {
                    let view = apply_view(ds, kind, &cfg.view_params, seed, cfg.k)?;
                    Ok((view.raw_features(&fcfg)?, view.markers))
                })?;
                let g = prep.normalizer.transform(&raw)?.g;
                let record = ViewRecord {
                    anchor_id: ds.checkpoint_id.clone(),
                    kind,
                    polarity: kind.polarity(),
                    seed: seed.0,
                    params: cfg.view_params,
                };
                Ok((
                    ViewFeatures {
                        anchor: a,
                        kind,
                        replicate: i,
                        seed: seed.0,
                        g,
                        markers,
                    },
                    record,
                ))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let (views, records) = computed.into_iter().unzip();
    Ok(ViewSet {
        anchors: prep.anchors(),
        views,
        records,
        stats: counter.stats(),
    })
}

/// A variant together with its weights, when it has any.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scorer {
    pub variant: Variant,
    pub weights: Option<ScoreWeights>,
}

impl Scorer {
    pub fn fixed(variant: Variant) -> Result<Self> {
        let weights = match variant {
            Variant::RicciOnly => None,
            Variant::Learned => return Err(Error::InvalidInput("learned variant needs trained weights".into())),
            v => Some(ScoreWeights::fixed(v)?),
        };
        Ok(Scorer { variant, weights })
    }

    pub fn learned(weights: ScoreWeights) -> Self {
        Scorer {
            variant: weights.variant,
            weights: Some(weights),
        }
    }

    pub fn name(&self) -> &'static str {
        self.variant.name()
    }

    pub fn score(&self, g: &Vec5) -> Result<f64> {
        match &self.weights {
            Some(w) => w.score(g),
            None => self.variant.evaluate(None, g),
        }
    }

    pub fn higher_is_better(&self) -> bool {
        self.variant.higher_is_better()
    }
}

pub fn load_weights(path: &Path) -> Result<ScoreWeights> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn ensure_out(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

/// The scorer the config asks for: a weights file, a fixed variant, or
/// weights trained on the family's views.
fn resolve_scorer(prep: &Prepared, cfg: &RunConfig, views: &mut Option<ViewSet>) -> Result<Scorer> {
    if let Some(path) = &cfg.weights {
        return Ok(Scorer::learned(load_weights(path)?));
    }
    match cfg.score_variant()? {
        Variant::Learned => {
            if views.is_none() {
                *views = Some(build_views(prep, cfg)?);
            }
            let batch = views.as_ref().unwrap().batch()?;
            Ok(Scorer::learned(train_weights(&batch, &cfg.hyper)?))
        }
        v => Scorer::fixed(v),
    }
}

#[derive(Debug, Clone)]
pub struct ScoreOutput {
    pub prepared: Prepared,
    pub scorer: Scorer,
    pub scores: Vec<f64>,
    pub view_stats: Option<CacheStats>,
}

pub fn scores_csv(ids: &[String], variant: &str, scores: &[f64]) -> String {
    let mut s = String::from("checkpoint_id,variant,score\n");
    for (id, v) in ids.iter().zip(scores) {
        writeln!(s, "{id},{variant},{v}").unwrap();
    }
    s
}

/// Scores every checkpoint; writes `features.csv`, `scores.csv` and `metadata.json`.
pub fn cmd_score(cfg: &RunConfig) -> Result<ScoreOutput> {
    let prepared = prepare(cfg)?;
    ensure_out(cfg)?;
    let mut views = None;
    let scorer = resolve_scorer(&prepared, cfg, &mut views)?;
    let scores = prepared
        .features
        .iter()
        .map(|f| scorer.score(&f.g))
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<String> = prepared.family.checkpoints.iter().map(|c| c.checkpoint_id.clone()).collect();
    write_feature_csv(&prepared.features, &cfg.out.join("features.csv"))?;
    atomic_write(&cfg.out.join("scores.csv"), scores_csv(&ids, scorer.name(), &scores).as_bytes())?;
    let view_stats = views.as_ref().map(|v| v.stats);
    write_json(
        &cfg.out.join("metadata.json"),
        &json!({
            "family_id": prepared.family.family_id,
            "num_checkpoints": ids.len(),
            "config": cfg,
            "config_hash": config_hash(cfg)?,
            "feature_config_hash": raw_config_hash(&cfg.feature_config())?,
            "scorer": scorer,
            "feature_cache": prepared.stats,
            "view_cache": view_stats,
            "normalizer": prepared.normalizer,
        }),
    )?;
    Ok(ScoreOutput {
        prepared,
        scorer,
        scores,
        view_stats,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub weights: ScoreWeights,
    pub views: ViewSet,
}

/// Trains weights on the family's views; writes `weights.json` and `views.jsonl`.
pub fn cmd_train_weights(cfg: &RunConfig) -> Result<TrainOutput> {
    let prepared = prepare(cfg)?;
    ensure_out(cfg)?;
    let views = build_views(&prepared, cfg)?;
    let weights = train_weights(&views.batch()?, &cfg.hyper)?;
    write_json(&cfg.out.join("weights.json"), &weights)?;
    write_view_manifest(&views.records, &cfg.out.join("views.jsonl"))?;
    Ok(TrainOutput { weights, views })
}

/// Reports for every score variant on one prepared family. Learned weights
/// come from `learned` when given, otherwise they are trained on `views`.
pub fn rank_family(prep: &Prepared, views: Option<&ViewSet>, learned: Option<ScoreWeights>, cfg: &RunConfig, setting: &str) -> Result<Vec<RankingReport>> {
    let acc = prep.ood_accuracy()?;
    let severity = prep.severity();
    let learned = match learned {
        Some(w) => w,
        None => {
            let views = views.ok_or_else(|| Error::InvalidInput("learned ranking needs views or weights".into()))?;
            train_weights(&views.batch()?, &cfg.hyper)?
        }
    };
    let mut scorers = vec![
        Scorer::fixed(Variant::TorsionOnly)?,
        Scorer::fixed(Variant::RicciOnly)?,
        Scorer::fixed(Variant::FixedGeoscore { alpha: cfg.geoscore_alpha })?,
        Scorer::fixed(Variant::topology_aware_fixed())?,
    ];
    scorers.push(Scorer::learned(learned));
    scorers
        .iter()
        .map(|s| {
            let scores = prep.features.iter().map(|f| s.score(&f.g)).collect::<Result<Vec<_>>>()?;
            ranking_report(setting, s.name(), &scores, acc, s.higher_is_better(), severity.as_deref())
        })
        .collect()
}

/// Spearman and selection for every variant; writes `ranking.csv` and `ranking.json`.
pub fn cmd_rank(cfg: &RunConfig) -> Result<Vec<RankingReport>> {
    let prepared = prepare(cfg)?;
    prepared.ood_accuracy()?;
    ensure_out(cfg)?;
    let (views, learned) = match &cfg.weights {
        Some(p) => (None, Some(load_weights(p)?)),
        None => (Some(build_views(&prepared, cfg)?), None),
    };
    let reports = rank_family(&prepared, views.as_ref(), learned, cfg, &prepared.family.family_id)?;
    atomic_write(&cfg.out.join("ranking.csv"), ranking_csv(&reports).as_bytes())?;
    write_json(&cfg.out.join("ranking.json"), &reports)?;
    Ok(reports)
}

/// Score deltas of every view against its anchor.
pub fn control_deltas(views: &ViewSet, scorer: &Scorer) -> Result<Vec<(ViewKind, f64)>> {
    let anchor_scores = views.anchors.iter().map(|g| scorer.score(g)).collect::<Result<Vec<_>>>()?;
    views
        .views
        .iter()
        .map(|v| Ok((v.kind, scorer.score(&v.g)? - anchor_scores[v.anchor])))
        .collect()
}

#[derive(Debug, Clone)]
pub struct ControlOutput {
    pub report: ControlReport,
    pub scorer: Scorer,
}

/// Control-consistency table; writes `controls.csv` and `controls.json`.
pub fn cmd_controls(cfg: &RunConfig) -> Result<ControlOutput> {
    let prepared = prepare(cfg)?;
    ensure_out(cfg)?;
    let mut views = Some(build_views(&prepared, cfg)?);
    let scorer = resolve_scorer(&prepared, cfg, &mut views)?;
    let views = views.unwrap();
    let report = control_report(views.anchors.len(), &control_deltas(&views, &scorer)?);
    atomic_write(&cfg.out.join("controls.csv"), report.to_csv().as_bytes())?;
    write_json(&cfg.out.join("controls.json"), &json!({ "scorer": scorer, "report": report }))?;
    Ok(ControlOutput { report, scorer })
}

/// Runs one ablation variant, or all of them for `"all"`; writes `ablation.csv` and `ablation.json`.
pub fn cmd_ablate(cfg: &RunConfig, variant: &str) -> Result<Vec<AblationResult>> {
    let variants: Vec<Ablation> = if variant == "all" {
        Ablation::ALL.to_vec()
    } else {
        vec![variant.parse()?]
    };
    let prepared = prepare(cfg)?;
    let acc = prepared.ood_accuracy()?.to_vec();
    ensure_out(cfg)?;
    let batch = build_views(&prepared, cfg)?.batch()?;
    let results = variants
        .iter()
        .map(|&v| run_ablation(v, &batch, &cfg.hyper, &acc, &prepared.family.family_id))
        .collect::<Result<Vec<_>>>()?;
    let reports: Vec<RankingReport> = results.iter().map(|r| r.report.clone()).collect();
    atomic_write(&cfg.out.join("ablation.csv"), ranking_csv(&reports).as_bytes())?;
    write_json(&cfg.out.join("ablation.json"), &results)?;
    Ok(results)
}

/// Writes a synthetic family to `out` as a bundle.
pub fn cmd_synth(profile: crate::synth::Profile, synth: &crate::synth::SynthConfig, out: &Path) -> Result<CheckpointFamily> {
    let family = crate::synth::generate(profile, synth)?;
    crate::ingest::save_bundle(&family, out, crate::ingest::MatrixFormat::Binary)?;
    Ok(family)
}

/// Per-kind delta table as a map, for callers that want plain numbers.
pub fn mean_deltas(report: &ControlReport) -> BTreeMap<String, (f64, f64)> {
    report
        .rows
        .iter()
        .map(|r| (r.kind.clone(), (r.mean_delta, r.mean_abs_delta)))
        .collect()
}
