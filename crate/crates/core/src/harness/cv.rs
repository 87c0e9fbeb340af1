//! Stratified k-fold cross-validation and the majority-vote baseline.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ModelSettings, TaskSource};
use crate::cmsa::FusionVariant;
use crate::datagen::{generate_dataset, read_manifest, Dataset};
use crate::error::{CmusError, Result};
use crate::metrics::{evaluate, paired_t_test, EvalReport, Metric};
use crate::model::{argmax, fit, CmusModel, ModalityId, ModalityMask, PatientRecord};

/// One value per reported metric, in reporting order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PerMetric<T> {
    pub acc: T,
    pub auc: T,
    pub pre: T,
    pub rec: T,
    pub spe: T,
    pub f1: T,
}

impl<T: Copy> PerMetric<T> {
    pub fn from_fn(mut f: impl FnMut(Metric) -> T) -> Self {
        PerMetric {
            acc: f(Metric::Acc),
            auc: f(Metric::Auc),
            pre: f(Metric::Pre),
            rec: f(Metric::Rec),
            spe: f(Metric::Spe),
            f1: f(Metric::F1),
        }
    }

    pub fn get(&self, m: Metric) -> T {
        match m {
            Metric::Acc => self.acc,
            Metric::Auc => self.auc,
            Metric::Pre => self.pre,
            Metric::Rec => self.rec,
            Metric::Spe => self.spe,
            Metric::F1 => self.f1,
        }
    }
}

/// Mean and sample standard deviation over folds; `sd` is absent for a
/// single fold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub sd: Option<f64>,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = (values.len() >= 2).then(|| {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        });
        Stat { mean, sd }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub name: String,
    pub fold_count: usize,
    pub stats: PerMetric<Stat>,
    /// Paired t-test p-values against `reference`, fold by fold.
    pub p_values: Option<PerMetric<f64>>,
    pub reference: Option<String>,
    pub folds: Vec<EvalReport>,
}

impl CvSummary {
    pub fn from_folds(name: impl Into<String>, folds: Vec<EvalReport>) -> Result<Self> {
        if folds.is_empty() {
            return Err(CmusError::Contract("a summary needs at least one fold".into()));
        }
        let stats = PerMetric::from_fn(|m| {
            let v: Vec<f64> = folds.iter().map(|f| f.metric(m)).collect();
            Stat::of(&v)
        });
        Ok(CvSummary {
            name: name.into(),
            fold_count: folds.len(),
            stats,
            p_values: None,
            reference: None,
            folds,
        })
    }

    pub fn fold_values(&self, m: Metric) -> Vec<f64> {
        self.folds.iter().map(|f| f.metric(m)).collect()
    }

    /// Fills `p_values` from a paired t-test of each metric against
    /// `reference` over matching folds.
    pub fn compare_to(&mut self, reference: &CvSummary) -> Result<()> {
        let mut err = None;
        let p = PerMetric::from_fn(|m| {
            match paired_t_test(&self.fold_values(m), &reference.fold_values(m)) {
                Ok(t) => t.p,
                Err(e) => {
                    err.get_or_insert(e);
                    f64::NAN
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        self.p_values = Some(p);
        self.reference = Some(reference.name.clone());
        Ok(())
    }
}

pub fn load_dataset(task: &TaskSource) -> Result<Dataset> {
    let ds = match task {
        TaskSource::Synthetic(spec) => generate_dataset(spec)?,
        TaskSource::Manifest { path, .. } => read_manifest(path)?,
    };
    if ds.records.is_empty() {
        return Err(CmusError::Stratification("dataset has no records".into()));
    }
    Ok(ds)
}

/// Test-set indices for each of `folds` folds. Within each class the
/// records are shuffled by `seed` and dealt round-robin, continuing where the
/// previous class stopped, so every fold gets `floor` or `ceil` of each
/// class's share and fold sizes differ by at most one.
pub fn stratified_folds(
    labels: &[usize],
    classes: usize,
    folds: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if folds < 2 {
        return Err(CmusError::Config(format!("need at least 2 folds, got {folds}")));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(CmusError::Stratification(format!(
            "label {bad} outside {classes} classes"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![Vec::new(); folds];
    let mut next = 0;
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.len() < folds {
            return Err(CmusError::Stratification(format!(
                "class {c} has {} records, fewer than {folds} folds",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        for i in idx {
            out[next % folds].push(i);
            next += 1;
        }
    }
    for f in &mut out {
        f.sort_unstable();
    }
    Ok(out)
}

fn split<'a>(
    records: &'a [PatientRecord],
    test_idx: &[usize],
) -> Result<(Vec<PatientRecord>, Vec<&'a PatientRecord>)> {
    let test_set: HashSet<usize> = test_idx.iter().copied().collect();
    let train: Vec<PatientRecord> = records
        .iter()
        .enumerate()
        .filter(|(i, _)| !test_set.contains(i))
        .map(|(_, r)| r.clone())
        .collect();
    let test: Vec<&PatientRecord> = test_idx.iter().map(|&i| &records[i]).collect();
    let train_ids: HashSet<&str> = train.iter().map(|r| r.id.as_str()).collect();
    if let Some(r) = test.iter().find(|r| train_ids.contains(r.id.as_str())) {
        return Err(CmusError::Contract(format!(
            "patient {} appears in both training and test sets",
            r.id
        )));
    }
    Ok((train, test))
}

fn train_model(
    cfg: &ExperimentConfig,
    settings: &ModelSettings,
    ds: &Dataset,
    train: &[PatientRecord],
    seed: u64,
) -> Result<CmusModel> {
    let raw = ds
        .raw_dims()
        .ok_or_else(|| CmusError::Stratification("dataset has no records".into()))?;
    let mut model = CmusModel::new(settings.model_config(ds.classes.len(), raw, seed))?;
    let train_cfg = crate::model::TrainConfig { seed, ..cfg.train };
    fit(&mut model, train, &train_cfg)?;
    Ok(model)
}

fn evaluate_model(
    model: &CmusModel,
    fold: usize,
    test: &[&PatientRecord],
    classes: usize,
) -> Result<EvalReport> {
    let mut probs = Vec::with_capacity(test.len());
    for r in test {
        probs.push(model.predict_proba(r)?);
    }
    let preds: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let truths: Vec<usize> = test.iter().map(|r| r.label).collect();
    evaluate(fold, &truths, &preds, &probs, classes)
}

/// Runs every fold of one configuration; the caller picks the thread pool.
pub(crate) fn cv_on_dataset(
    cfg: &ExperimentConfig,
    settings: &ModelSettings,
    ds: &Dataset,
    name: &str,
) -> Result<CvSummary> {
    let plan = fold_plan(cfg, ds)?;
    let folds = plan
        .par_iter()
        .enumerate()
        .map(|(k, test_idx)| {
            let (train, test) = split(&ds.records, test_idx)?;
            let model = train_model(cfg, settings, ds, &train, cfg.train.seed + k as u64)?;
            evaluate_model(&model, k, &test, ds.classes.len())
        })
        .collect::<Result<Vec<_>>>()?;
    CvSummary::from_folds(name, folds)
}

fn fold_plan(cfg: &ExperimentConfig, ds: &Dataset) -> Result<Vec<Vec<usize>>> {
    let labels: Vec<usize> = ds.records.iter().map(|r| r.label).collect();
    stratified_folds(&labels, ds.classes.len(), cfg.folds, cfg.task.seed())
}

/// Runs `f` on a pool of `jobs` workers. Results do not depend on `jobs`.
pub fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CmusError::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Trains a fresh model per fold and scores it on the held-out fold.
pub fn run_cross_validation(cfg: &ExperimentConfig, jobs: usize) -> Result<CvSummary> {
    cfg.validate()?;
    let ds = load_dataset(&cfg.task)?;
    with_jobs(jobs, || cv_on_dataset(cfg, &cfg.model, &ds, "CMUS"))?
}

/// Majority vote over per-model predictions. Ties go to the tied class with
/// the largest summed probability, then to the lowest class index.
pub fn majority_vote(probs: &[Vec<f64>]) -> usize {
    let classes = probs.first().map_or(0, Vec::len);
    let mut votes = vec![0usize; classes];
    let mut mass = vec![0.0; classes];
    for p in probs {
        votes[argmax(p)] += 1;
        for (m, v) in mass.iter_mut().zip(p) {
            *m += v;
        }
    }
    let top = votes.iter().copied().max().unwrap_or(0);
    let mut best = None::<usize>;
    for c in (0..classes).filter(|&c| votes[c] == top) {
        if best.is_none_or(|b| mass[c] > mass[b]) {
            best = Some(c);
        }
    }
    best.unwrap_or(0)
}

fn unimodal(settings: &ModelSettings, m: ModalityId) -> ModelSettings {
    ModelSettings {
        modalities: ModalityMask::only(&[m]),
        fusion: FusionVariant::None,
        weighted_loss: false,
        ..settings.clone()
    }
}

pub(crate) fn late_fusion_on_dataset(
    cfg: &ExperimentConfig,
    settings: &ModelSettings,
    ds: &Dataset,
    name: &str,
) -> Result<CvSummary> {
    let plan = fold_plan(cfg, ds)?;
    let classes = ds.classes.len();
    let folds = plan
        .par_iter()
        .enumerate()
        .map(|(k, test_idx)| {
            let (train, test) = split(&ds.records, test_idx)?;
            let seed = cfg.train.seed + k as u64;
            let mut per_model = Vec::with_capacity(3);
            for m in [ModalityId::Om, ModalityId::Im, ModalityId::Tem] {
                let model = train_model(cfg, &unimodal(settings, m), ds, &train, seed)?;
                let probs = test
                    .iter()
                    .map(|r| model.predict_proba(r))
                    .collect::<Result<Vec<_>>>()?;
                per_model.push(probs);
            }
            let mut preds = Vec::with_capacity(test.len());
            let mut mean_probs = Vec::with_capacity(test.len());
            for i in 0..test.len() {
                let votes: Vec<Vec<f64>> = per_model.iter().map(|p| p[i].clone()).collect();
                preds.push(majority_vote(&votes));
                mean_probs.push(
                    (0..classes)
                        .map(|c| votes.iter().map(|v| v[c]).sum::<f64>() / votes.len() as f64)
                        .collect(),
                );
            }
            let truths: Vec<usize> = test.iter().map(|r| r.label).collect();
            evaluate(k, &truths, &preds, &mean_probs, classes)
        })
        .collect::<Result<Vec<_>>>()?;
    CvSummary::from_folds(name, folds)
}

/// Three unimodal models per fold combined by [`majority_vote`]; AUC is
/// computed from their mean probabilities.
pub fn majority_vote_late_fusion(cfg: &ExperimentConfig, jobs: usize) -> Result<CvSummary> {
    cfg.validate()?;
    let ds = load_dataset(&cfg.task)?;
    with_jobs(jobs, || late_fusion_on_dataset(cfg, &cfg.model, &ds, "Majority vote"))?
}

/// Trains one model on every record, for checkpointing.
pub fn train_full(cfg: &ExperimentConfig, ds: &Dataset) -> Result<CmusModel> {
    train_model(cfg, &cfg.model, ds, &ds.records, cfg.train.seed)
}

/// Scores a trained model on a whole dataset as a single fold.
pub fn evaluate_dataset(model: &CmusModel, ds: &Dataset, name: &str) -> Result<CvSummary> {
    let test: Vec<&PatientRecord> = ds.records.iter().collect();
    let report = evaluate_model(model, 0, &test, ds.classes.len())?;
    CvSummary::from_folds(name, vec![report])
}
