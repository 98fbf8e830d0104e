use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Mode};
use super::dataset::PreparedDataset;
use super::vote::{pointwise, vote};
use crate::classifier::{init_model, train, FEATURE_COUNT, Model, SceneTrainData};
use crate::cloud::Cloud;
use crate::ensemble::{summarize_versions, EnsembleSummary};
use crate::error::{Error, Result};
use crate::eval::{miou, ConfusionMatrix};
use crate::labels::{generate_pseudo, merge_annotations, to_point_labels, Annotation, AnnotationSource, LabelState};
use crate::sampler::{
    allocate, final_sweep_1t1c, select_1t1c, select_pooled, select_random_instances, Candidates, Query, QuerySet,
    Quotas, Strategy,
};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    AwaitingAnnotations,
    Training,
    Done,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    /// Headline mIoU in percent: voting or pointwise per the config.
    pub miou: Option<f64>,
    pub miou_pointwise: Option<f64>,
    pub miou_voting: Option<f64>,
    /// |T| over all scenes.
    pub labeled_true: usize,
    /// |P| used by the final training round of the iteration.
    pub labeled_pseudo: usize,
    pub mean_loss: f64,
    /// |T̂| over all scenes.
    pub annotations: usize,
    pub init_seed: u64,
}

/// Per-iteration metric log as CSV.
pub fn metrics_csv(metrics: &[IterationMetrics]) -> String {
    let mut out = String::from("iteration,miou,labeled_true,labeled_pseudo,mean_loss\n");
    for m in metrics {
        let miou = m.miou.map(|v| v.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{},{}", m.iteration, miou, m.labeled_true, m.labeled_pseudo, m.mean_loss).unwrap();
    }
    out
}

/// Seed of the fresh model trained in `round` of `iteration` (both from 1).
pub fn init_seed_for(config: &ExperimentConfig, iteration: usize, round: usize) -> u64 {
    seed::derive(config.seeds.init(), "reinit", (iteration * 1000 + round) as u64)
}

fn train_seed_for(config: &ExperimentConfig, iteration: usize, round: usize) -> u64 {
    seed::derive(config.seeds.train(), "batches", (iteration * 1000 + round) as u64)
}

fn selection_seed(config: &ExperimentConfig, iteration: usize, scene: usize) -> u64 {
    seed::derive(config.seeds.sampling(), &format!("select/{iteration}"), scene as u64)
}

/// Layer widths of the reference network for a dataset.
pub fn model_widths(config: &ExperimentConfig, num_classes: usize) -> Vec<usize> {
    let mut w = vec![FEATURE_COUNT];
    w.extend(&config.hidden);
    w.push(num_classes);
    w
}

/// One experiment as a resumable state machine.
///
/// `start` issues the first queries; each `submit` + `train_round` pair
/// completes one iteration and issues the next queries, until `Done`.
#[derive(Clone, Debug)]
pub struct ExperimentState {
    pub(crate) config: ExperimentConfig,
    pub(crate) iteration: usize,
    pub(crate) status: Status,
    pub(crate) labels: LabelState,
    pub(crate) pending: Option<QuerySet>,
    pub(crate) metrics: Vec<IterationMetrics>,
    pub(crate) summaries: Option<Vec<EnsembleSummary>>,
    pub(crate) model: Option<Model>,
}

impl ExperimentState {
    pub fn start(config: ExperimentConfig, dataset: &PreparedDataset) -> Result<Self> {
        let mut config = config;
        config.validate()?;
        if config.budget.scenes_s == 0 {
            config.budget.scenes_s = dataset.len();
        }
        if config.budget.scenes_s != dataset.len() {
            return Err(Error::InvalidParameter(format!(
                "budget is for {} scenes, dataset has {}",
                config.budget.scenes_s,
                dataset.len()
            )));
        }
        let mut state = ExperimentState {
            config,
            iteration: 1,
            status: Status::AwaitingAnnotations,
            labels: LabelState::new(),
            pending: None,
            metrics: Vec::new(),
            summaries: None,
            model: None,
        };
        state.pending = Some(state.make_queries(dataset, 1)?);
        Ok(state)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn status(&self) -> Status {
        self.status
    }

    pub fn labels(&self) -> &LabelState {
        &self.labels
    }

    pub fn pending(&self) -> Option<&QuerySet> {
        self.pending.as_ref()
    }

    pub fn metrics(&self) -> &[IterationMetrics] {
        &self.metrics
    }

    pub fn summaries(&self) -> Option<&[EnsembleSummary]> {
        self.summaries.as_deref()
    }

    pub fn model(&self) -> Option<&Model> {
        self.model.as_ref()
    }

    pub fn budget_used(&self) -> usize {
        self.labels.annotations().len()
    }

    fn source_for_oracle(&self) -> AnnotationSource {
        if self.iteration == 1 {
            AnnotationSource::RandomInit
        } else {
            AnnotationSource::Oracle
        }
    }

    fn make_queries(&self, dataset: &PreparedDataset, t: usize) -> Result<QuerySet> {
        let cfg = &self.config;
        let k = cfg.budget.iterations_k;
        let u_of = |j: usize| self.summaries.as_ref().map(|s| s[j].uncertainty.as_slice());
        let query = |j: usize, p: u32| Query {
            scene: dataset.scenes()[j].cloud.scene_id().to_string(),
            point: p,
            u: u_of(j).map_or(0.0, |u| u[p as usize]),
        };
        let mut queries = Vec::new();
        let strategy;
        match cfg.mode {
            Mode::DataEfficient => {
                strategy = if t == 1 { Strategy::Random } else { cfg.strategy };
                if strategy != Strategy::Random && self.summaries.is_none() {
                    return Err(Error::Experiment("uncertainty selection without an ensemble".into()));
                }
                let cands: Vec<Candidates> = dataset
                    .scenes()
                    .iter()
                    .enumerate()
                    .map(|(j, s)| {
                        let c = Candidates::new(&s.partition, self.labels.annotated_supervoxels(s.cloud.scene_id()));
                        match u_of(j) {
                            Some(u) if strategy != Strategy::Random => c.with_uncertainty(u),
                            _ => c,
                        }
                    })
                    .collect();
                match allocate(&cfg.budget, t)? {
                    Quotas::PerScene(q) => {
                        for (j, &m) in q.iter().enumerate() {
                            let picked = select_pooled(&cands[j..j + 1], m, strategy, selection_seed(cfg, t, j))?;
                            queries.extend(picked.into_iter().map(|(_, p)| query(j, p)));
                        }
                    }
                    Quotas::Pooled(m) => {
                        let picked = select_pooled(&cands, m, strategy, selection_seed(cfg, t, usize::MAX >> 1))?;
                        queries.extend(picked.into_iter().map(|(j, p)| query(j, p)));
                    }
                }
            }
            Mode::OneThingOneClick => {
                strategy = if t == 1 { Strategy::Random } else { Strategy::OneThingOneClick };
                for (j, s) in dataset.scenes().iter().enumerate() {
                    let id = s.cloud.scene_id();
                    let inst = s.cloud.gt_instance().ok_or_else(|| Error::MissingGroundTruth(format!("instances of `{id}`")))?;
                    let annotated = self.labels.annotated_supervoxels(id);
                    let sampled = self.labels.annotated_instances(id);
                    let picked = if t == 1 {
                        select_random_instances(&s.partition, annotated, inst, sampled, cfg.clicks_per_round, selection_seed(cfg, t, j))?
                    } else {
                        let u = u_of(j).ok_or_else(|| Error::Experiment("uncertainty selection without an ensemble".into()))?;
                        if t == k {
                            final_sweep_1t1c(u, &s.partition, annotated, inst, sampled)?
                        } else {
                            select_1t1c(u, &s.partition, annotated, inst, sampled, cfg.clicks_per_round)?
                        }
                    };
                    queries.extend(picked.into_iter().map(|p| query(j, p)));
                }
            }
        }
        Ok(QuerySet { iteration: t as u32, strategy, queries })
    }

    /// Accept the answers to the pending queries; every pending point must be
    /// answered exactly once.
    pub fn submit(&mut self, annotations: &[Annotation], dataset: &PreparedDataset) -> Result<()> {
        self.check_submission(annotations, dataset)?;
        self.labels = merge_annotations(&self.labels, annotations, dataset, dataset.num_classes())?;
        self.status = Status::Training;
        Ok(())
    }

    /// Validate a submission without applying it.
    pub fn check_submission(&self, annotations: &[Annotation], dataset: &PreparedDataset) -> Result<()> {
        if self.status != Status::AwaitingAnnotations {
            return Err(Error::Conflict(format!("experiment is {:?}, not awaiting annotations", self.status)));
        }
        let pending = self.pending.as_ref().expect("awaiting implies pending");
        let wanted: BTreeSet<(&str, u32)> = pending.queries.iter().map(|q| (q.scene.as_str(), q.point)).collect();
        let done: BTreeSet<(&str, u32)> =
            self.labels.annotations().iter().map(|a| (a.scene_id.as_str(), a.point_index)).collect();
        let mut answered = BTreeSet::new();
        let c = dataset.num_classes();
        for a in annotations {
            if a.iteration as usize != self.iteration {
                return Err(Error::Conflict(format!(
                    "annotation for iteration {}, current is {}",
                    a.iteration, self.iteration
                )));
            }
            let key = (a.scene_id.as_str(), a.point_index);
            if !wanted.contains(&key) && done.contains(&key) {
                return Err(Error::Conflict(format!(
                    "point {} of `{}` was annotated in an earlier iteration",
                    a.point_index, a.scene_id
                )));
            }
            if !wanted.contains(&key) {
                return Err(Error::InvalidSubmission(format!(
                    "point {} of `{}` is not pending",
                    a.point_index, a.scene_id
                )));
            }
            if a.class_id as usize >= c {
                return Err(Error::ClassOutOfRange { class_id: a.class_id as usize, classes: c });
            }
            if !answered.insert(key) {
                return Err(Error::InvalidSubmission(format!(
                    "point {} of `{}` answered twice",
                    a.point_index, a.scene_id
                )));
            }
        }
        if answered.len() != wanted.len() {
            return Err(Error::InvalidSubmission(format!(
                "{} of {} pending queries answered",
                answered.len(),
                wanted.len()
            )));
        }
        Ok(())
    }

    fn regenerate_pseudo(&mut self, dataset: &PreparedDataset) -> Result<()> {
        self.labels.clear_pseudo();
        if !self.config.self_training {
            return Ok(());
        }
        let Some(summaries) = &self.summaries else { return Ok(()) };
        let tau = self.config.tau(self.iteration)?;
        for (s, summary) in dataset.scenes().iter().zip(summaries) {
            let id = s.cloud.scene_id();
            let p = generate_pseudo(summary, tau, self.labels.true_labels(id));
            self.labels.set_pseudo(id, p)?;
        }
        Ok(())
    }

    fn ensemble(&self, model: &Model, dataset: &PreparedDataset) -> Result<Vec<EnsembleSummary>> {
        dataset
            .scenes()
            .iter()
            .map(|s| summarize_versions(model, &s.ensemble_versions, &s.ensemble_seeds))
            .collect()
    }

    /// Train the model of the current iteration and issue the next queries.
    pub fn train_round(&mut self, dataset: &PreparedDataset) -> Result<()> {
        if self.status != Status::Training {
            return Err(Error::Conflict(format!("experiment is {:?}, not training", self.status)));
        }
        let t = self.iteration;
        let k = self.config.budget.iterations_k;
        let cfg = self.config.clone();
        let widths = model_widths(&cfg, dataset.num_classes());
        // P for this iteration comes from the previous iteration's ensemble.
        if t > 1 {
            self.regenerate_pseudo(dataset)?;
        } else {
            self.labels.clear_pseudo();
        }
        let next_needs_u = t < k
            && (cfg.self_training
                || cfg.mode == Mode::OneThingOneClick
                || cfg.strategy != Strategy::Random);
        let mut outcome = None;
        let mut pseudo_used = 0;
        for round in 1..=cfg.inner_rounds {
            if round > 1 {
                self.regenerate_pseudo(dataset)?;
            }
            let truth: Vec<_> = dataset.scenes().iter().map(|s| to_point_labels(self.labels.true_labels(s.cloud.scene_id()))).collect();
            let pseudo: Vec<_> = dataset.scenes().iter().map(|s| to_point_labels(self.labels.pseudo_labels(s.cloud.scene_id()))).collect();
            pseudo_used = pseudo.iter().map(Vec::len).sum();
            let data: Vec<SceneTrainData> = dataset
                .scenes()
                .iter()
                .zip(truth.iter().zip(&pseudo))
                .map(|(s, (t, p))| SceneTrainData { versions: &s.train_versions, true_labels: t, pseudo_labels: p })
                .collect();
            let fresh = init_model(init_seed_for(&cfg, t, round), &widths)?;
            let out = train(&fresh, &data, &cfg.schedule, train_seed_for(&cfg, t, round))?;
            let last = round == cfg.inner_rounds;
            let need = !last && cfg.self_training || last && (next_needs_u || cfg.evaluate_every_iteration || t == k);
            self.summaries = if need { Some(self.ensemble(&out.model, dataset)?) } else { None };
            outcome = Some(out);
        }
        let outcome = outcome.expect("inner_rounds >= 1");
        let (miou_pointwise, miou_voting) = match &self.summaries {
            Some(s) if dataset.has_ground_truth() => evaluate(dataset, s)?,
            _ => (None, None),
        };
        self.metrics.push(IterationMetrics {
            iteration: t,
            miou: if cfg.voting { miou_voting } else { miou_pointwise },
            miou_pointwise,
            miou_voting,
            labeled_true: self.labels.num_true(),
            labeled_pseudo: pseudo_used,
            mean_loss: outcome.mean_loss(),
            annotations: self.labels.annotations().len(),
            init_seed: outcome.model.init_seed(),
        });
        self.model = Some(outcome.model);
        if t == k {
            self.status = Status::Done;
            self.pending = None;
        } else {
            self.iteration = t + 1;
            self.pending = Some(self.make_queries(dataset, t + 1)?);
            self.status = Status::AwaitingAnnotations;
        }
        Ok(())
    }

    /// Answer the pending queries with `annotator`, then train.
    pub fn step(&mut self, dataset: &PreparedDataset, annotator: &mut dyn Annotator) -> Result<()> {
        let pending = self.pending.clone().ok_or_else(|| Error::Conflict("no pending queries".into()))?;
        let mut answers = annotator.annotate(&pending, dataset)?;
        if annotator.is_oracle() {
            let source = self.source_for_oracle();
            answers.iter_mut().for_each(|a| a.source = source);
        }
        self.submit(&answers, dataset)?;
        self.train_round(dataset)
    }
}

/// Dataset-level (pointwise, voting) mIoU in percent.
fn evaluate(dataset: &PreparedDataset, summaries: &[EnsembleSummary]) -> Result<(Option<f64>, Option<f64>)> {
    let c = dataset.num_classes();
    let mut cm_point = ConfusionMatrix::new(c);
    let mut cm_vote = ConfusionMatrix::new(c);
    for (s, summary) in dataset.scenes().iter().zip(summaries) {
        let gt = s.cloud.gt_semantic().expect("checked by caller");
        cm_point.accumulate(&pointwise(&summary.mean_probs), gt)?;
        cm_vote.accumulate(&vote(&summary.mean_probs, &s.partition)?, gt)?;
    }
    Ok((Some(miou(&cm_point)?.percent()), Some(miou(&cm_vote)?.percent())))
}

/// Source of answers for pending queries.
pub trait Annotator {
    fn annotate(&mut self, queries: &QuerySet, dataset: &PreparedDataset) -> Result<Vec<Annotation>>;
    /// Oracle answers are re-tagged with the iteration's source.
    fn is_oracle(&self) -> bool {
        false
    }
}

/// Answers every query with the ground-truth class of its point.
#[derive(Clone, Copy, Debug, Default)]
pub struct Oracle;

impl Annotator for Oracle {
    fn annotate(&mut self, queries: &QuerySet, dataset: &PreparedDataset) -> Result<Vec<Annotation>> {
        oracle_annotate(queries, dataset.scenes().iter().map(|s| &s.cloud))
    }

    fn is_oracle(&self) -> bool {
        true
    }
}

/// Look up the ground-truth class of every queried point.
pub fn oracle_annotate<'a>(queries: &QuerySet, clouds: impl IntoIterator<Item = &'a Cloud>) -> Result<Vec<Annotation>> {
    let by_id: BTreeMap<&str, &Cloud> = clouds.into_iter().map(|c| (c.scene_id(), c)).collect();
    queries
        .queries
        .iter()
        .map(|q| {
            let cloud = by_id
                .get(q.scene.as_str())
                .ok_or_else(|| Error::MissingGroundTruth(format!("no cloud for scene `{}`", q.scene)))?;
            let gt = cloud.gt_semantic().ok_or_else(|| Error::MissingGroundTruth(q.scene.clone()))?;
            let class_id = *gt
                .get(q.point as usize)
                .ok_or(Error::DimensionMismatch { expected: gt.len(), actual: q.point as usize + 1 })?;
            Ok(Annotation {
                scene_id: q.scene.clone(),
                point_index: q.point,
                class_id,
                iteration: queries.iteration,
                source: AnnotationSource::Oracle,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub model: Model,
    pub metrics: Vec<IterationMetrics>,
    pub state: ExperimentState,
}

/// Run all iterations to completion.
pub fn run_experiment(
    config: ExperimentConfig,
    dataset: &PreparedDataset,
    annotator: &mut dyn Annotator,
) -> Result<ExperimentOutcome> {
    let mut state = ExperimentState::start(config, dataset)?;
    while state.status != Status::Done {
        state.step(dataset, annotator)?;
    }
    if let Mode::DataEfficient = state.config.mode {
        if state.budget_used() != state.config.budget.total_n {
            return Err(Error::Experiment(format!(
                "used {} annotations of a budget of {}",
                state.budget_used(),
                state.config.budget.total_n
            )));
        }
    }
    Ok(ExperimentOutcome {
        model: state.model.clone().expect("trained"),
        metrics: state.metrics.clone(),
        state,
    })
}
