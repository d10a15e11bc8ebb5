//! Active-learning experiment driver: phantom pools, the per-round
//! query -> annotate -> correct -> retrain cycle, and persistence.

pub mod persist;
pub mod phantom;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{wd_loss, CenterlineMode, LossBreakdown};
use crate::metrics::{evaluate, BranchDetection, MetricsError};
use crate::model::critic::CRITIC_WIDTHS;
use crate::model::{
    extract_features, segmenter_predict, train_critic, train_segmenter, CriticParams, FeatureVector, ModelError,
    SegmenterParams, TrainConfig, TrainingSample,
};
use crate::morphology::{keep_largest_component, skeletonize, Connectivity};
use crate::query::{
    score_entropy, score_least_confidence, score_random, score_wd, select_top_k, QueryError, QueryScore, SampleId,
    Strategy, WdScoreConfig,
};
use crate::rng::{derive_seed, derived};
use crate::tree::{build_skeleton_graph, parse_tree, prune_short_branches, AirwayTree, RootPolicy};
use crate::volume::{BinaryMask, ImageVolume};

pub use persist::ExperimentDir;
pub use phantom::{corrupt_centerline, generate_phantom, Phantom, PhantomError, PhantomSpec, Segment};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error("unlabeled pool holds {available} samples, {needed} needed")]
    PoolExhausted { available: usize, needed: usize },
    #[error("{0} queued samples still await annotation")]
    PendingHumanAnnotations(usize),
    #[error("sample {0} is not awaiting annotation")]
    NotPending(SampleId),
    #[error("unknown sample {0}")]
    UnknownSample(SampleId),
    #[error("sample has no ground truth")]
    MissingGroundTruth,
    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Persist(#[from] persist::PersistError),
}

type Result<T> = std::result::Result<T, OrchestratorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Initial,
    /// Unlabeled member of the training pool.
    Pool,
    Queried {
        round: usize,
    },
    Validation,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Train,
    Validation,
    Test,
}

impl Provenance {
    pub fn role(self) -> Role {
        match self {
            Provenance::Validation => Role::Validation,
            Provenance::Test => Role::Test,
            _ => Role::Train,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "name", rename_all = "snake_case")]
pub enum Annotator {
    Oracle,
    Human(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub sample_id: SampleId,
    pub mask: BinaryMask,
    pub centerline: BinaryMask,
    pub annotator: Annotator,
}

impl Annotation {
    /// Every centerline voxel must lie within one voxel (26-neighborhood) of the mask.
    pub fn validate(&self) -> Result<()> {
        if self.mask.dims() != self.centerline.dims() {
            return Err(OrchestratorError::InvalidAnnotation(
                "mask and centerline dims differ".into(),
            ));
        }
        let allowed = self.mask.dilate26();
        if let Some(v) = self.centerline.voxels().find(|&v| !allowed.get(v)) {
            return Err(OrchestratorError::InvalidAnnotation(format!(
                "centerline voxel {v:?} lies outside the annotated airway"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: SampleId,
    pub image: ImageVolume,
    pub gt_mask: Option<BinaryMask>,
    pub machine_centerline: Option<BinaryMask>,
    /// The machine centerline carries simulated extraction artifacts.
    pub machine_corrupted: bool,
    pub corrected_centerline: Option<BinaryMask>,
    /// Mask supplied by the annotator; present iff the sample is labeled.
    pub annotation_mask: Option<BinaryMask>,
    pub annotator: Option<Annotator>,
    pub labeled: bool,
    pub provenance: Provenance,
    /// Branch count of the generating tree, when known.
    pub true_branch_count: Option<usize>,
}

impl Sample {
    pub fn role(&self) -> Role {
        self.provenance.role()
    }

    fn from_phantom(id: SampleId, p: Phantom, provenance: Provenance, corrupt_seed: u64) -> Result<Self> {
        let skeleton = skeletonize(&p.gt_mask);
        let machine = corrupt_centerline(&skeleton, corrupt_seed)?;
        Ok(Self {
            id,
            image: p.image,
            gt_mask: Some(p.gt_mask),
            machine_centerline: Some(machine),
            machine_corrupted: true,
            corrected_centerline: None,
            annotation_mask: None,
            annotator: None,
            labeled: false,
            provenance,
            true_branch_count: Some(p.branch_count),
        })
    }

    fn apply(&mut self, ann: Annotation, provenance: Provenance) {
        self.annotation_mask = Some(ann.mask);
        self.corrected_centerline = Some(ann.centerline);
        self.annotator = Some(ann.annotator);
        self.labeled = true;
        self.provenance = provenance;
    }
}

/// The simulated expert: the generator's mask and the skeleton of that mask.
pub fn oracle_simulated(sample: &Sample) -> Result<Annotation> {
    let gt = sample.gt_mask.as_ref().ok_or(OrchestratorError::MissingGroundTruth)?;
    Ok(Annotation {
        sample_id: sample.id,
        mask: gt.clone(),
        centerline: skeletonize(gt),
        annotator: Annotator::Oracle,
    })
}

/// Tree of a centerline with spurs shorter than three voxels removed.
pub fn centerline_tree(cl: &BinaryMask) -> Option<AirwayTree> {
    parse_tree(&build_skeleton_graph(cl), RootPolicy::HighestZ)
        .ok()
        .map(|t| prune_short_branches(&t, 3))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    #[default]
    Simulated,
    Human,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmenterShape {
    pub k: usize,
    pub hidden: usize,
}

impl Default for SegmenterShape {
    fn default() -> Self {
        Self { k: 3, hidden: 16 }
    }
}

/// Distribution shift applied to the held-out test set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TestShift {
    pub noise_scale: f64,
    pub distal_dilation: bool,
}

impl Default for TestShift {
    fn default() -> Self {
        Self {
            noise_scale: 1.3,
            distal_dilation: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub strategy: Strategy,
    pub rounds: usize,
    pub batch_per_round: usize,
    pub initial_labeled_count: usize,
    pub pool_size: usize,
    pub validation_count: usize,
    pub test_count: usize,
    pub centerline_mode: CenterlineMode,
    pub train: TrainConfig,
    pub wd_score: WdScoreConfig,
    pub seed: u64,
    pub oracle: OracleKind,
    pub phantom: PhantomSpec,
    pub test_shift: TestShift,
    pub segmenter: SegmenterShape,
    /// Validation DSC that counts as reaching the target.
    pub target_dsc: Option<f64>,
    /// Stop running rounds once the target is reached.
    pub stop_at_target: bool,
    pub postprocess: bool,
    pub bd_rule: BranchDetection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Random,
            // Eight round records: initial training plus seven query rounds,
            // which exactly exhausts a pool of 40 with 5 initial and 5 per round.
            rounds: 7,
            batch_per_round: 5,
            initial_labeled_count: 5,
            pool_size: 40,
            validation_count: 6,
            test_count: 6,
            centerline_mode: CenterlineMode::Corrected,
            // A faster step than the bare optimizer default so each round's
            // warm-started training converges on the small labeled set.
            train: TrainConfig {
                learning_rate: 0.3,
                ..TrainConfig::default()
            },
            wd_score: WdScoreConfig::default(),
            seed: 0,
            oracle: OracleKind::Simulated,
            phantom: PhantomSpec::default(),
            test_shift: TestShift::default(),
            segmenter: SegmenterShape::default(),
            target_dsc: Some(0.85),
            stop_at_target: false,
            postprocess: true,
            bd_rule: BranchDetection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Full-scale round structure (15 rounds of 10), for plug-in models on large pools.
    pub fn full_scale_preset() -> Self {
        Self {
            rounds: 15,
            batch_per_round: 10,
            initial_labeled_count: 10,
            pool_size: 170,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(OrchestratorError::InvalidConfig(m));
        if self.batch_per_round == 0 || self.initial_labeled_count == 0 {
            return bad("batch_per_round and initial_labeled_count must be positive".into());
        }
        let needed = self.batch_per_round * self.rounds + self.initial_labeled_count;
        if needed > self.pool_size {
            return bad(format!(
                "batch_per_round * rounds + initial_labeled_count = {needed} exceeds pool_size {}",
                self.pool_size
            ));
        }
        if self.validation_count == 0 {
            return bad("validation_count must be positive".into());
        }
        if let Some(t) = self.target_dsc {
            if !(0.0..=1.0).contains(&t) {
                return bad("target_dsc must lie in [0, 1]".into());
            }
        }
        if self.segmenter.k.is_multiple_of(2) || self.segmenter.hidden == 0 {
            return bad("segmenter k must be odd and hidden positive".into());
        }
        self.train.validate()?;
        self.wd_score.validate()?;
        Ok(())
    }

    fn test_spec(&self) -> PhantomSpec {
        PhantomSpec {
            noise: self.phantom.noise * self.test_shift.noise_scale,
            distal_dilation: self.test_shift.distal_dilation,
            ..self.phantom.clone()
        }
    }
}

/// Mean metrics over an evaluation set; undefined ratios count as 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SetMetrics {
    pub dsc: f64,
    pub iou: f64,
    pub precision: f64,
    pub td: f64,
    pub bd: f64,
    pub cycle_count: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub selected: Vec<SampleId>,
    /// Scores of every sample considered this round.
    pub scores: Vec<QueryScore>,
    pub validation: SetMetrics,
    pub loss_curve: Vec<LossBreakdown>,
    pub checkpoint: String,
    pub labeled_count: usize,
    pub unlabeled_count: usize,
    /// Wall-clock seconds; persisted beside the record so records stay reproducible.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentLog {
    pub config: ExperimentConfig,
    pub rounds: Vec<RoundRecord>,
    pub test: SetMetrics,
    /// First round whose validation DSC reached `target_dsc`.
    pub rounds_to_target: Option<usize>,
}

/// Outcome of a human-mode advance request.
#[derive(Debug, Clone, PartialEq)]
pub enum Advance {
    /// Samples were queried and now await annotation.
    Queued(Vec<SampleId>),
    /// Annotations were applied and the model retrained.
    Trained(Box<RoundRecord>),
}

/// Complete experiment state; a single writer drives it round by round.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentState {
    pub config: ExperimentConfig,
    pub samples: Vec<Sample>,
    pub segmenter: SegmenterParams,
    pub critic: CriticParams,
    pub records: Vec<RoundRecord>,
    /// Queried ids awaiting annotation (human oracle), with their scores.
    pub pending: Vec<SampleId>,
    pub pending_scores: Vec<QueryScore>,
    pub submitted: BTreeMap<SampleId, Annotation>,
    pub features: Vec<FeatureVector>,
}

impl ExperimentState {
    pub fn sample(&self, id: SampleId) -> Option<&Sample> {
        self.samples.get(id as usize)
    }

    pub fn labeled_ids(&self) -> Vec<SampleId> {
        self.samples.iter().filter(|s| s.labeled).map(|s| s.id).collect()
    }

    /// Unlabeled training-pool ids, excluding queued ones.
    pub fn unlabeled_ids(&self) -> Vec<SampleId> {
        self.samples
            .iter()
            .filter(|s| s.role() == Role::Train && !s.labeled)
            .map(|s| s.id)
            .collect()
    }

    pub fn ids_with_role(&self, role: Role) -> Vec<SampleId> {
        self.samples.iter().filter(|s| s.role() == role).map(|s| s.id).collect()
    }

    /// Index of the next round to run.
    pub fn next_round(&self) -> usize {
        self.records.len()
    }

    pub fn pending_count(&self) -> usize {
        self.pending.len() - self.submitted.len()
    }

    pub fn rounds_to_target(&self) -> Option<usize> {
        let t = self.config.target_dsc?;
        self.records.iter().find(|r| r.validation.dsc >= t).map(|r| r.round)
    }

    fn target_reached(&self) -> bool {
        self.config.stop_at_target && self.rounds_to_target().is_some()
    }

    /// Whether the round budget is spent (or the target reached with early stopping).
    pub fn finished(&self) -> bool {
        self.next_round() > self.config.rounds || self.target_reached()
    }

    /// Binarized prediction of the current segmenter, post-processed as in evaluation.
    pub fn predicted_mask(&self, id: SampleId) -> Option<BinaryMask> {
        let s = self.sample(id)?;
        let pred = segmenter_predict(&self.segmenter, &s.image).threshold(self.config.train.binarize_threshold);
        Some(if self.config.postprocess {
            keep_largest_component(&pred, Connectivity::TwentySix)
        } else {
            pred
        })
    }

    fn training_samples(&self) -> Result<Vec<TrainingSample>> {
        let mode = self.config.centerline_mode;
        self.samples
            .iter()
            .filter(|s| s.labeled)
            .map(|s| {
                let mask = s.annotation_mask.clone().ok_or(OrchestratorError::MissingGroundTruth)?;
                let corrected = s
                    .corrected_centerline
                    .clone()
                    .ok_or(OrchestratorError::MissingGroundTruth)?;
                let centerline = match mode {
                    CenterlineMode::Corrected => corrected.clone(),
                    CenterlineMode::Machine => s.machine_centerline.clone().unwrap_or_else(|| corrected.clone()),
                };
                let branch_voxels = centerline_tree(&corrected)
                    .map(|t| t.voxel_mask(mask.dims()))
                    .unwrap_or_else(|| BinaryMask::empty(mask.dims()));
                Ok(TrainingSample {
                    image: s.image.clone(),
                    gt_mask: mask,
                    branch_voxels,
                    centerline,
                })
            })
            .collect()
    }

    fn evaluate_set(&self, role: Role) -> Result<SetMetrics> {
        let ids = self.ids_with_role(role);
        let mut m = SetMetrics::default();
        for &id in &ids {
            let s = &self.samples[id as usize];
            let gt = s.gt_mask.as_ref().ok_or(OrchestratorError::MissingGroundTruth)?;
            let tree = centerline_tree(&skeletonize(gt));
            let pred = segmenter_predict(&self.segmenter, &s.image).threshold(self.config.train.binarize_threshold);
            let r = evaluate(&pred, gt, tree.as_ref(), self.config.postprocess, self.config.bd_rule)?;
            m.dsc += r.dsc.unwrap_or(0.0);
            m.iou += r.iou.unwrap_or(0.0);
            m.precision += r.precision.unwrap_or(0.0);
            m.td += r.td.unwrap_or(0.0);
            m.bd += r.bd.unwrap_or(0.0);
            m.cycle_count += r.cycle_count as f64;
        }
        let n = ids.len().max(1) as f64;
        Ok(SetMetrics {
            dsc: m.dsc / n,
            iou: m.iou / n,
            precision: m.precision / n,
            td: m.td / n,
            bd: m.bd / n,
            cycle_count: m.cycle_count / n,
        })
    }

    fn feature_batches(&self) -> (Vec<FeatureVector>, Vec<FeatureVector>) {
        let pick = |ids: Vec<SampleId>| ids.into_iter().map(|i| self.features[i as usize].clone()).collect();
        (pick(self.labeled_ids()), pick(self.unlabeled_ids()))
    }

    /// Retrains the critic on labeled vs unlabeled features and returns the WD term.
    fn update_critic(&mut self, round: usize) -> Result<f64> {
        let (lab, ulb) = self.feature_batches();
        if lab.is_empty() || ulb.is_empty() {
            return Ok(0.0);
        }
        let seed = self.config.seed;
        self.critic = train_critic(
            &self.critic,
            &lab,
            &ulb,
            &self.config.train,
            &mut derived(seed, "critic", round as u64),
        )?;
        Ok(wd_loss(
            &self.critic,
            &ulb,
            &lab,
            self.config.train.max_norm,
            &mut derived(seed, "wd", round as u64),
        )
        .map_err(ModelError::from)?)
    }

    fn score_pool(&self, round: usize) -> Result<Vec<QueryScore>> {
        let ids = self.unlabeled_ids();
        let cfg = &self.config;
        if cfg.strategy == Strategy::Random {
            return Ok(score_random(&ids, &mut derived(cfg.seed, "query", round as u64))?);
        }
        ids.iter()
            .map(|&id| {
                let s = &self.samples[id as usize];
                let probs = segmenter_predict(&self.segmenter, &s.image);
                Ok(match cfg.strategy {
                    Strategy::LeastConfidence => QueryScore::plain(id, score_least_confidence(&probs)?),
                    Strategy::Entropy => QueryScore::plain(id, score_entropy(&probs)?),
                    _ => score_wd(id, &probs, &self.features[id as usize], &self.critic, &cfg.wd_score)?,
                })
            })
            .collect()
    }

    /// Trains on the labeled set, validates, and appends the round record.
    fn train_and_record(
        &mut self,
        selected: Vec<SampleId>,
        scores: Vec<QueryScore>,
        started: Instant,
    ) -> Result<RoundRecord> {
        let round = self.next_round();
        let wd = self.update_critic(round)?;
        let samples = self.training_samples()?;
        let mut train_cfg = self.config.train.clone();
        train_cfg.seed = derive_seed(self.config.seed, "train", round as u64);
        let (params, curve) = train_segmenter(
            &self.segmenter,
            &samples,
            &train_cfg,
            wd,
            &mut derived(self.config.seed, "train", round as u64),
        )?;
        self.segmenter = params;
        let validation = self.evaluate_set(Role::Validation)?;
        let record = RoundRecord {
            round,
            selected,
            scores,
            validation,
            loss_curve: curve,
            checkpoint: persist::checkpoint_name(round),
            labeled_count: self.labeled_ids().len(),
            unlabeled_count: self.unlabeled_ids().len(),
            wall_clock_seconds: started.elapsed().as_secs_f64(),
        };
        self.records.push(record.clone());
        Ok(record)
    }

    fn check_pool(&self) -> Result<()> {
        let available = self.unlabeled_ids().len();
        let needed = self.config.batch_per_round;
        if available < needed {
            return Err(OrchestratorError::PoolExhausted { available, needed });
        }
        Ok(())
    }

    fn query(&self, round: usize) -> Result<(Vec<SampleId>, Vec<QueryScore>)> {
        self.check_pool()?;
        let scores = self.score_pool(round)?;
        let selected = select_top_k(&scores, self.config.batch_per_round)?;
        Ok((selected, scores))
    }

    fn label(&mut self, annotations: Vec<Annotation>, round: usize) {
        for ann in annotations {
            let id = ann.sample_id as usize;
            self.samples[id].apply(ann, Provenance::Queried { round });
        }
    }
}

/// Builds the sample pools and labels the initial set; no training yet.
pub fn init_state(cfg: &ExperimentConfig) -> Result<ExperimentState> {
    cfg.validate()?;
    let seed = cfg.seed;
    let mut samples = Vec::new();
    let test_spec = cfg.test_spec();
    let groups = [
        ("pool", cfg.pool_size, &cfg.phantom, Provenance::Pool),
        ("validation", cfg.validation_count, &cfg.phantom, Provenance::Validation),
        ("test", cfg.test_count, &test_spec, Provenance::Test),
    ];
    for (tag, count, spec, provenance) in groups {
        for i in 0..count {
            let id = samples.len() as SampleId;
            let p = generate_phantom(derive_seed(seed, tag, i as u64), spec)?;
            let corrupt = derive_seed(seed, "corrupt", id as u64);
            samples.push(Sample::from_phantom(id, p, provenance, corrupt)?);
        }
    }
    // Initial labeled set: a seeded partial shuffle of the pool.
    let mut pool: Vec<usize> = (0..cfg.pool_size).collect();
    let mut rng = derived(seed, "initial", 0);
    for i in 0..cfg.initial_labeled_count {
        let j = crate::rng::RngExt::random_range(&mut rng, i..pool.len());
        pool.swap(i, j);
    }
    for &i in &pool[..cfg.initial_labeled_count] {
        let ann = oracle_simulated(&samples[i])?;
        samples[i].apply(ann, Provenance::Initial);
    }
    let features = samples
        .iter()
        .map(|s| extract_features(&s.image))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let shape = cfg.segmenter;
    Ok(ExperimentState {
        config: cfg.clone(),
        samples,
        segmenter: SegmenterParams::random(shape.k, shape.hidden, &mut derived(seed, "segmenter-init", 0)),
        critic: CriticParams::random(&CRITIC_WIDTHS, &mut derived(seed, "critic-init", 0)),
        records: Vec::new(),
        pending: Vec::new(),
        pending_scores: Vec::new(),
        submitted: BTreeMap::new(),
        features,
    })
}

/// A running experiment, optionally mirrored to an experiment directory.
pub struct Experiment {
    pub state: ExperimentState,
    dir: Option<ExperimentDir>,
}

impl Experiment {
    /// Generates the data, trains round 0 on the initial set, and persists.
    pub fn create(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<Self> {
        let state = init_state(cfg)?;
        let dir = match dir {
            Some(d) => Some(ExperimentDir::create(d, &state)?),
            None => None,
        };
        let mut exp = Self { state, dir };
        let started = Instant::now();
        let record = exp.state.train_and_record(Vec::new(), Vec::new(), started)?;
        exp.persist_round(&record)?;
        Ok(exp)
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let (state, dir) = ExperimentDir::open(dir)?;
        Ok(Self { state, dir: Some(dir) })
    }

    pub fn dir(&self) -> Option<&ExperimentDir> {
        self.dir.as_ref()
    }

    fn persist_round(&self, record: &RoundRecord) -> Result<()> {
        if let Some(d) = &self.dir {
            d.write_round(&self.state, record)?;
        }
        Ok(())
    }

    fn persist_manifest(&self) -> Result<()> {
        if let Some(d) = &self.dir {
            d.write_manifest(&self.state)?;
        }
        Ok(())
    }

    /// One full round with the simulated oracle.
    pub fn run_round(&mut self) -> Result<RoundRecord> {
        let started = Instant::now();
        if !self.state.pending.is_empty() {
            return Err(OrchestratorError::PendingHumanAnnotations(self.state.pending_count()));
        }
        let round = self.state.next_round();
        let (selected, scores) = self.state.query(round)?;
        let annotations = selected
            .iter()
            .map(|&id| oracle_simulated(&self.state.samples[id as usize]))
            .collect::<Result<Vec<_>>>()?;
        self.state.label(annotations, round);
        let record = self.state.train_and_record(selected, scores, started)?;
        self.persist_round(&record)?;
        Ok(record)
    }

    /// Human-mode step: queue a selection if none is pending, otherwise apply the
    /// submitted annotations and retrain. Errors while annotations are outstanding.
    pub fn advance(&mut self) -> Result<Advance> {
        if self.state.config.oracle == OracleKind::Simulated {
            return Ok(Advance::Trained(Box::new(self.run_round()?)));
        }
        let started = Instant::now();
        let round = self.state.next_round();
        if self.state.pending.is_empty() {
            let (selected, scores) = self.state.query(round)?;
            self.state.pending = selected.clone();
            self.state.pending_scores = scores;
            self.persist_manifest()?;
            return Ok(Advance::Queued(selected));
        }
        let outstanding = self.state.pending_count();
        if outstanding > 0 {
            return Err(OrchestratorError::PendingHumanAnnotations(outstanding));
        }
        let selected = std::mem::take(&mut self.state.pending);
        let scores = std::mem::take(&mut self.state.pending_scores);
        let anns: Vec<Annotation> = std::mem::take(&mut self.state.submitted).into_values().collect();
        self.state.label(anns, round);
        let record = self.state.train_and_record(selected, scores, started)?;
        self.persist_round(&record)?;
        Ok(Advance::Trained(Box::new(record)))
    }

    /// Accepts an annotation for a queued sample (human mode).
    pub fn submit_annotation(&mut self, ann: Annotation) -> Result<()> {
        let s = self
            .state
            .sample(ann.sample_id)
            .ok_or(OrchestratorError::UnknownSample(ann.sample_id))?;
        if !self.state.pending.contains(&ann.sample_id) || self.state.submitted.contains_key(&ann.sample_id) {
            return Err(OrchestratorError::NotPending(ann.sample_id));
        }
        if ann.mask.dims() != s.image.dims() {
            return Err(OrchestratorError::InvalidAnnotation(
                "dims differ from the sample".into(),
            ));
        }
        ann.validate()?;
        if let Some(d) = &self.dir {
            d.write_submission(&ann)?;
        }
        self.state.submitted.insert(ann.sample_id, ann);
        self.persist_manifest()?;
        Ok(())
    }

    /// Runs the remaining rounds with the simulated oracle, then [`Self::finish`].
    pub fn run_to_end(&mut self) -> Result<ExperimentLog> {
        while !self.state.finished() {
            match self.run_round() {
                Ok(_) => {}
                Err(OrchestratorError::PoolExhausted { .. }) => break,
                Err(e) => return Err(e),
            }
        }
        self.finish()
    }

    /// Final evaluation on the shifted test set.
    pub fn finish(&self) -> Result<ExperimentLog> {
        let log = ExperimentLog {
            config: self.state.config.clone(),
            rounds: self.state.records.clone(),
            test: self.state.evaluate_set(Role::Test)?,
            rounds_to_target: self.state.rounds_to_target(),
        };
        if let Some(d) = &self.dir {
            d.write_log(&log)?;
        }
        Ok(log)
    }
}

/// Runs every round with the simulated oracle, stopping early at the target
/// when configured or when the pool runs dry, then evaluates on the test set.
pub fn run_experiment(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<ExperimentLog> {
    if cfg.oracle == OracleKind::Human {
        return Err(OrchestratorError::InvalidConfig(
            "human-oracle experiments advance through the server".into(),
        ));
    }
    Experiment::create(cfg, dir)?.run_to_end()
}

/// Checks pool bookkeeping: disjoint roles, labeled/unlabeled disjoint, and
/// per-round growth of exactly `batch_per_round`.
pub fn check_accounting(state: &ExperimentState) -> std::result::Result<(), String> {
    let train: BTreeSet<SampleId> = state.ids_with_role(Role::Train).into_iter().collect();
    let val: BTreeSet<SampleId> = state.ids_with_role(Role::Validation).into_iter().collect();
    let test: BTreeSet<SampleId> = state.ids_with_role(Role::Test).into_iter().collect();
    if !train.is_disjoint(&val) || !train.is_disjoint(&test) || !val.is_disjoint(&test) {
        return Err("role sets intersect".into());
    }
    let labeled: BTreeSet<SampleId> = state.labeled_ids().into_iter().collect();
    let unlabeled: BTreeSet<SampleId> = state.unlabeled_ids().into_iter().collect();
    if !labeled.is_disjoint(&unlabeled) || !labeled.is_subset(&train) {
        return Err("labeled set overlaps the unlabeled pool or leaves the training pool".into());
    }
    let cfg = &state.config;
    for w in state.records.windows(2) {
        if w[1].labeled_count != w[0].labeled_count + cfg.batch_per_round
            || w[1].unlabeled_count + cfg.batch_per_round != w[0].unlabeled_count
            || w[1].selected.len() != cfg.batch_per_round
        {
            return Err(format!(
                "round {} did not move exactly {} samples",
                w[1].round, cfg.batch_per_round
            ));
        }
        if w[1]
            .selected
            .iter()
            .any(|id| !w[1].scores.iter().any(|s| s.sample_id == *id))
        {
            return Err(format!("round {} selected an unscored sample", w[1].round));
        }
    }
    if let Some(first) = state.records.first() {
        if first.labeled_count != cfg.initial_labeled_count {
            return Err("round 0 labeled count differs from the initial set".into());
        }
    }
    Ok(())
}
