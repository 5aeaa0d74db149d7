//! Service operations.
//!
//! Writers (round transitions, assignments, labels, retrain bookkeeping) are
//! serialised by one mutex. The state itself sits behind a read-write lock
//! that writers hold only while committing, so reads stay available while a
//! round is being scored or a model is being trained.

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use serde::{Deserialize, Serialize};
use viraal_core::active::{self, ConfidenceRecord, Criterion, QuerySpec};
use viraal_core::checkpoint::Checkpoint;
use viraal_core::config::RunConfig;
use viraal_core::corpus::{self, Annotation, Example, Vocabulary};
use viraal_core::metrics::{MetricsReport, OUTSIDE};
use viraal_core::train::{self, FitInput};

use crate::error::{Result, ServiceError};
use crate::state::{Event, Job, JobState, Round, State, Suggestion, Task, TaskStatus};
use crate::store::Store;

pub const DEFAULT_LEASE_MS: u64 = 10 * 60 * 1000;
pub const DEFAULT_SNAPSHOT_EVERY: usize = 100;
pub const INITIAL_CHECKPOINT: &str = "initial.json";

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub lease_ms: u64,
    /// Write a compacted snapshot after this many events.
    pub snapshot_every: usize,
    /// Pretrained vectors used when retraining.
    pub embeddings: Option<PathBuf>,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            data_dir: data_dir.into(),
            lease_ms: DEFAULT_LEASE_MS,
            snapshot_every: DEFAULT_SNAPSHOT_EVERY,
            embeddings: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenRound {
    pub criterion: Criterion,
    pub budget: usize,
    /// Seed for random selection; defaults to the round number.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRequest {
    pub intent: String,
    pub slots: Vec<String>,
    /// Accept intents or slot tags the ontology does not know yet.
    #[serde(default)]
    pub allow_new_tags: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub id: usize,
    pub status: TaskStatus,
    /// The same label had already been recorded; nothing changed.
    pub duplicate: bool,
    pub labeled_count: usize,
    pub pool_count: usize,
    pub round_complete: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskCounts {
    pub queued: usize,
    pub assigned: usize,
    pub labeled: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundView {
    #[serde(flatten)]
    pub round: Round,
    pub active: bool,
    pub complete: bool,
    pub tasks: TaskCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Status {
    pub round: Option<RoundView>,
    pub labeled_count: usize,
    pub pool_count: usize,
    pub checkpoint: String,
    pub retraining: Option<u64>,
}

/// Everything a background retrain needs, taken when it starts.
#[derive(Debug, Clone)]
pub struct RetrainTicket {
    pub job: Job,
    train: Vec<Example>,
    dev: Vec<Example>,
    config: RunConfig,
}

struct Inner {
    state: State,
    store: Store,
    checkpoint: Arc<Checkpoint>,
}

pub struct Service {
    config: ServiceConfig,
    writer: Mutex<()>,
    inner: RwLock<Inner>,
}

/// Train a model from scratch on the annotated part of `train`, with the
/// rest as unlabeled data when the config uses VAT.
///
/// The vocabulary covers every train token plus the labels seen so far, so
/// newly confirmed tags join the ontology here.
pub fn train_checkpoint(
    train: &[Example],
    dev: &[Example],
    config: &RunConfig,
    embeddings: Option<&std::path::Path>,
) -> viraal_core::Result<(Checkpoint, Option<MetricsReport>)> {
    let vocab = Vocabulary::build(train)?;
    let emb = match embeddings {
        Some(p) => Some(corpus::load_pretrained(p, &vocab, config.embedding_size, false, config.seed)?),
        None => None,
    };
    let input = FitInput {
        vocab: &vocab,
        embeddings: emb.as_ref(),
        labeled: train.iter().filter(|e| e.annotation.is_some()).collect(),
        unlabeled: train.iter().filter(|e| e.annotation.is_none()).collect(),
        validation: dev.iter().collect(),
    };
    let outcome = train::fit(&input, config)?;
    let metrics = if dev.is_empty() {
        None
    } else {
        let refs: Vec<&Example> = dev.iter().collect();
        Some(train::evaluate(&outcome.model, &outcome.params, &vocab, &refs)?)
    };
    Ok((Checkpoint::new(&outcome.model, outcome.params, &vocab, config), metrics))
}

fn well_formed(tag: &str) -> bool {
    if tag.is_empty() || tag.chars().any(char::is_whitespace) {
        return false;
    }
    tag == OUTSIDE || tag.strip_prefix("B-").or_else(|| tag.strip_prefix("I-")).is_some_and(|t| !t.is_empty())
}

fn validate_label(
    tokens: &[String],
    req: &LabelRequest,
    intents: &HashSet<&str>,
    slots: &HashSet<&str>,
) -> std::result::Result<Annotation, BTreeMap<String, String>> {
    let mut errors = BTreeMap::new();
    let intent = req.intent.trim();
    if intent.is_empty() || intent.chars().any(char::is_whitespace) {
        errors.insert("intent".into(), "must be a single non-empty word".into());
    } else if !req.allow_new_tags && !intents.contains(intent) {
        errors.insert("intent".into(), format!("unknown intent {intent:?}; set allow_new_tags to add it"));
    }
    if req.slots.len() != tokens.len() {
        errors.insert(
            "slots".into(),
            format!("expected {} tags, one per token, got {}", tokens.len(), req.slots.len()),
        );
    }
    for (i, tag) in req.slots.iter().enumerate() {
        if !well_formed(tag) {
            errors.insert(format!("slots[{i}]"), format!("malformed tag {tag:?}; expected O, B-<type> or I-<type>"));
        } else if !req.allow_new_tags && !slots.contains(tag.as_str()) {
            errors.insert(format!("slots[{i}]"), format!("unknown tag {tag:?}; set allow_new_tags to add it"));
        }
    }
    if errors.is_empty() {
        Ok(Annotation {
            intent: intent.to_owned(),
            slots: req.slots.clone(),
        })
    } else {
        Err(errors)
    }
}

impl Service {
    /// Create a new data directory around an initial checkpoint.
    ///
    /// `train` must be indexed by id; annotated examples form the initial
    /// labeled set.
    pub fn init(config: ServiceConfig, train: Vec<Example>, dev: Vec<Example>, checkpoint: Checkpoint) -> Result<Self> {
        if train.is_empty() {
            return Err(ServiceError::BadRequest("no train examples".into()));
        }
        if let Some((i, e)) = train.iter().enumerate().find(|(i, e)| e.id() != *i) {
            return Err(ServiceError::BadRequest(format!("train example at position {i} has id {}", e.id())));
        }
        let mut store = Store::create(&config.data_dir, config.snapshot_every.max(1))?;
        checkpoint.save(&store.checkpoint_path(INITIAL_CHECKPOINT))?;
        let mut state = State::default();
        store.commit(
            &mut state,
            Event::Initialized {
                train,
                dev,
                checkpoint: INITIAL_CHECKPOINT.into(),
            },
        )?;
        store.snapshot(&state)?;
        Ok(Self {
            config,
            writer: Mutex::new(()),
            inner: RwLock::new(Inner {
                state,
                store,
                checkpoint: Arc::new(checkpoint),
            }),
        })
    }

    /// Reopen a data directory. A retrain cut short by a restart is marked failed.
    pub fn open(config: ServiceConfig) -> Result<Self> {
        let (mut store, mut state) = Store::open(&config.data_dir, config.snapshot_every.max(1))?;
        let checkpoint = Checkpoint::load(&store.checkpoint_path(&state.checkpoint))?;
        if let Some(job) = state.running_job().map(|j| j.id) {
            store.commit(
                &mut state,
                Event::RetrainFailed {
                    job,
                    error: "interrupted by a restart".into(),
                    at_ms: crate::now_ms(),
                },
            )?;
        }
        Ok(Self {
            config,
            writer: Mutex::new(()),
            inner: RwLock::new(Inner {
                state,
                store,
                checkpoint: Arc::new(checkpoint),
            }),
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    fn write_lock(&self) -> MutexGuard<'_, ()> {
        self.writer.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn read<T>(&self, f: impl FnOnce(&Inner) -> T) -> T {
        f(&self.inner.read().unwrap_or_else(|p| p.into_inner()))
    }

    fn commit(&self, event: Event) -> Result<()> {
        let mut g = self.inner.write().unwrap_or_else(|p| p.into_inner());
        let Inner { state, store, .. } = &mut *g;
        store.commit(state, event)
    }

    /// Copy of the current state.
    pub fn state(&self) -> State {
        self.read(|i| i.state.clone())
    }

    pub fn checkpoint(&self) -> Arc<Checkpoint> {
        self.read(|i| i.checkpoint.clone())
    }

    fn round_view(state: &State) -> Option<RoundView> {
        let round = state.rounds.last()?;
        let mut counts = TaskCounts::default();
        for t in state.tasks.values() {
            match t.status {
                TaskStatus::Queued => counts.queued += 1,
                TaskStatus::Assigned => counts.assigned += 1,
                TaskStatus::Labeled => counts.labeled += 1,
                TaskStatus::Skipped => counts.skipped += 1,
            }
        }
        Some(RoundView {
            round: round.clone(),
            active: round.closed_ms.is_none(),
            complete: state.round_complete(),
            tasks: counts,
        })
    }

    pub fn status(&self) -> Status {
        self.read(|i| Status {
            round: Self::round_view(&i.state),
            labeled_count: i.state.labeled_count(),
            pool_count: i.state.pool_count(),
            checkpoint: i.state.checkpoint.clone(),
            retraining: i.state.running_job().map(|j| j.id),
        })
    }

    /// Score the pool with the current checkpoint and queue the `budget`
    /// least confident examples, least confident first.
    pub fn open_round(&self, req: &OpenRound, now_ms: u64) -> Result<RoundView> {
        let _w = self.write_lock();
        let (pool, checkpoint, number, checkpoint_ref) = self.read(|i| {
            if let Some(r) = i.state.active_round() {
                return Err(ServiceError::Conflict(format!("round {} is still active", r.number)));
            }
            if let Some(j) = i.state.running_job() {
                return Err(ServiceError::Conflict(format!("retrain job {} is running", j.id)));
            }
            let pool: Vec<Example> = i.state.train.iter().filter(|e| e.annotation.is_none()).cloned().collect();
            Ok((pool, i.checkpoint.clone(), i.state.rounds.len() as u32 + 1, i.state.checkpoint.clone()))
        })?;
        if pool.is_empty() {
            return Err(ServiceError::BadRequest("the unlabeled pool is empty".into()));
        }
        if req.budget == 0 || req.budget > pool.len() {
            return Err(ServiceError::Validation(BTreeMap::from([(
                "budget".to_owned(),
                format!("must lie in 1..={}, the pool size", pool.len()),
            )])));
        }

        let model = checkpoint.model();
        let refs: Vec<&Example> = pool.iter().collect();
        let mut records = active::score_pool(&model, &checkpoint.params, &checkpoint.vocab, &refs)?;
        active::joint_confidence(&mut records, Default::default());
        let spec = QuerySpec {
            criterion: req.criterion,
            budget: req.budget,
            seed: req.seed.unwrap_or(number as u64),
        };
        let chosen = active::as_set(&active::select(&records, &spec)?);
        let serving = match req.criterion {
            Criterion::Random => Criterion::EntropyJoint,
            c => c,
        };
        let selected: Vec<ConfidenceRecord> = active::rank(&records, serving)
            .into_iter()
            .filter(|r| chosen.contains(&r.id))
            .collect();
        let examples: Vec<&Example> = selected.iter().map(|r| &pool[pool.binary_search_by_key(&r.id, Example::id).expect("pool id")]).collect();
        let suggestions = train::predict_names(&model, &checkpoint.params, &checkpoint.vocab, &examples)?;
        let tasks: Vec<Task> = selected
            .into_iter()
            .zip(examples)
            .zip(suggestions)
            .enumerate()
            .map(|(order, ((confidence, ex), (intent, slots)))| Task {
                id: ex.id(),
                tokens: ex.tokens().to_vec(),
                suggestion: Suggestion { intent, slots },
                confidence,
                status: TaskStatus::Queued,
                order: order as u64,
                lease_expires_ms: None,
            })
            .collect();
        let round = Round {
            number,
            criterion: req.criterion,
            budget: req.budget,
            seed: spec.seed,
            checkpoint: checkpoint_ref,
            created_ms: now_ms,
            completed_ms: None,
            closed_ms: None,
        };
        self.commit(Event::RoundOpened { round, tasks })?;
        Ok(self.read(|i| Self::round_view(&i.state)).expect("round just opened"))
    }

    /// Lease up to `n` tasks, least confident first. Tasks whose lease has
    /// run out are served again; skipped tasks come after all others.
    pub fn next_tasks(&self, n: usize, now_ms: u64) -> Result<Vec<Task>> {
        let _w = self.write_lock();
        let ids: Vec<usize> = self.read(|i| {
            if i.state.active_round().is_none() {
                return Err(ServiceError::Conflict("no active round".into()));
            }
            Ok(i.state
                .ordered_tasks()
                .into_iter()
                .filter(|t| t.available(now_ms))
                .take(n)
                .map(|t| t.id)
                .collect())
        })?;
        if ids.is_empty() {
            return Ok(Vec::new());
        }
        self.commit(Event::Assigned {
            ids: ids.clone(),
            expires_ms: now_ms.saturating_add(self.config.lease_ms),
        })?;
        Ok(self.read(|i| ids.iter().map(|id| i.state.tasks[id].clone()).collect()))
    }

    fn ack(state: &State, id: usize, duplicate: bool) -> Ack {
        Ack {
            id,
            status: state.tasks[&id].status,
            duplicate,
            labeled_count: state.labeled_count(),
            pool_count: state.pool_count(),
            round_complete: state.round_complete(),
        }
    }

    fn find_task<'a>(state: &'a State, id: usize) -> Result<&'a Task> {
        state
            .tasks
            .get(&id)
            .ok_or_else(|| ServiceError::NotFound(format!("no task {id} in the current round")))
    }

    pub fn submit_label(&self, id: usize, req: &LabelRequest, now_ms: u64) -> Result<Ack> {
        let _w = self.write_lock();
        let outcome = self.read(|i| {
            let state = &i.state;
            let task = Self::find_task(state, id)?;
            if task.status == TaskStatus::Labeled {
                let recorded = state.train[id].annotation.as_ref();
                let same = recorded.is_some_and(|a| a.intent == req.intent.trim() && a.slots == req.slots);
                return if same {
                    Ok(Err(Self::ack(state, id, true)))
                } else {
                    Err(ServiceError::Conflict(format!("task {id} already carries a different label")))
                };
            }
            if state.active_round().is_none() {
                return Err(ServiceError::Conflict("the round is closed".into()));
            }
            if task.status != TaskStatus::Assigned {
                return Err(ServiceError::Conflict(format!("task {id} is not assigned; fetch it from /tasks first")));
            }
            let mut intents: HashSet<&str> = i.checkpoint.vocab.intents().iter().map(String::as_str).collect();
            let mut slots: HashSet<&str> = i.checkpoint.vocab.slots().iter().map(String::as_str).collect();
            slots.insert(OUTSIDE);
            for a in state.train.iter().filter_map(|e| e.annotation.as_ref()) {
                intents.insert(&a.intent);
                slots.extend(a.slots.iter().map(String::as_str));
            }
            validate_label(&task.tokens, req, &intents, &slots)
                .map(Ok)
                .map_err(ServiceError::Validation)
        })?;
        let annotation = match outcome {
            Ok(a) => a,
            Err(duplicate) => return Ok(duplicate),
        };
        self.commit(Event::Labeled {
            id,
            annotation,
            at_ms: now_ms,
        })?;
        Ok(self.read(|i| Self::ack(&i.state, id, false)))
    }

    /// Put a task back at the end of the queue.
    pub fn skip(&self, id: usize, now_ms: u64) -> Result<Ack> {
        let _w = self.write_lock();
        let status = self.read(|i| {
            let task = Self::find_task(&i.state, id)?;
            if i.state.active_round().is_none() {
                return Err(ServiceError::Conflict("the round is closed".into()));
            }
            Ok(task.status)
        })?;
        match status {
            TaskStatus::Labeled => Err(ServiceError::Conflict(format!("task {id} is already labeled"))),
            TaskStatus::Skipped => Ok(self.read(|i| Self::ack(&i.state, id, true))),
            TaskStatus::Queued | TaskStatus::Assigned => {
                self.commit(Event::Skipped { id, at_ms: now_ms })?;
                Ok(self.read(|i| Self::ack(&i.state, id, false)))
            }
        }
    }

    /// Close the completed round and register a retrain job.
    pub fn start_retrain(&self, now_ms: u64) -> Result<RetrainTicket> {
        let _w = self.write_lock();
        let (event, ticket) = self.read(|i| {
            let state = &i.state;
            let round = state
                .active_round()
                .ok_or_else(|| ServiceError::Conflict("no active round to retrain from".into()))?;
            if let Some(j) = state.running_job() {
                return Err(ServiceError::Conflict(format!("retrain job {} is running", j.id)));
            }
            let pending = state.tasks.values().filter(|t| t.pending()).count();
            if pending > 0 {
                return Err(ServiceError::Conflict(format!("round {} has {pending} unfinished tasks", round.number)));
            }
            let config = i.checkpoint.config.clone();
            let labeled = state.labeled_count();
            let unlabeled = if config.uses_vat() { state.pool_count() } else { 0 };
            let job = state.jobs.len() as u64 + 1;
            let event = Event::RetrainStarted {
                job,
                round: round.number,
                labeled,
                unlabeled,
                at_ms: now_ms,
            };
            let ticket = RetrainTicket {
                job: Job {
                    id: job,
                    round: round.number,
                    state: JobState::Running,
                    started_ms: now_ms,
                    finished_ms: None,
                    checkpoint: None,
                    error: None,
                    labeled,
                    unlabeled,
                },
                train: state.train.clone(),
                dev: state.dev.clone(),
                config,
            };
            Ok((event, ticket))
        })?;
        self.commit(event)?;
        Ok(ticket)
    }

    /// Train and publish. Blocking; meant for a background thread. On failure
    /// the previous checkpoint stays in service.
    pub fn run_retrain(&self, ticket: RetrainTicket, now: impl Fn() -> u64) -> Result<Job> {
        let id = ticket.job.id;
        let name = format!("round-{}.json", ticket.job.round);
        let path = self.read(|i| i.store.checkpoint_path(&name));
        let trained = train_checkpoint(&ticket.train, &ticket.dev, &ticket.config, self.config.embeddings.as_deref())
            .and_then(|(ck, metrics)| ck.save(&path).map(|_| (ck, metrics)));
        let _w = self.write_lock();
        match trained {
            Ok((checkpoint, metrics)) => {
                self.commit(Event::CheckpointPublished {
                    job: id,
                    checkpoint: name,
                    metrics,
                    at_ms: now(),
                })?;
                self.inner.write().unwrap_or_else(|p| p.into_inner()).checkpoint = Arc::new(checkpoint);
            }
            Err(e) => {
                log::error!("retrain job {id} failed: {e}");
                self.commit(Event::RetrainFailed {
                    job: id,
                    error: e.to_string(),
                    at_ms: now(),
                })?;
            }
        }
        self.job(id).ok_or_else(|| ServiceError::NotFound(format!("job {id}")))
    }

    pub fn job(&self, id: u64) -> Option<Job> {
        self.read(|i| i.state.jobs.get(&id).cloned())
    }

    pub fn metrics(&self) -> Option<MetricsReport> {
        self.read(|i| i.state.metrics.clone())
    }

    pub fn labeled_ids(&self) -> Vec<usize> {
        self.read(|i| i.state.labeled_ids())
    }

    /// Write a compacted snapshot now.
    pub fn snapshot(&self) -> Result<()> {
        let _w = self.write_lock();
        let mut g = self.inner.write().unwrap_or_else(|p| p.into_inner());
        let Inner { state, store, .. } = &mut *g;
        store.snapshot(state)
    }
}
