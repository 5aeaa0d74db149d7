//! Service state and the events that change it.
//!
//! `State::apply` is the only mutator. Every operation first validates,
//! then logs an event, then applies it, so replaying the log from the
//! `Initialized` event reproduces the state exactly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use viraal_core::active::{ConfidenceRecord, Criterion};
use viraal_core::corpus::{Annotation, Example};
use viraal_core::metrics::MetricsReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskStatus {
    Queued,
    Assigned,
    Labeled,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Suggestion {
    pub intent: String,
    pub slots: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    /// The example id; unique within a round.
    pub id: usize,
    pub tokens: Vec<String>,
    pub suggestion: Suggestion,
    pub confidence: ConfidenceRecord,
    pub status: TaskStatus,
    /// Serving position. Skipping moves a task behind everything else.
    pub order: u64,
    pub lease_expires_ms: Option<u64>,
}

impl Task {
    /// Can be handed out by `next_tasks` at time `now`.
    pub fn available(&self, now_ms: u64) -> bool {
        match self.status {
            TaskStatus::Queued | TaskStatus::Skipped => true,
            TaskStatus::Assigned => self.lease_expires_ms.is_some_and(|t| t <= now_ms),
            TaskStatus::Labeled => false,
        }
    }

    pub fn pending(&self) -> bool {
        matches!(self.status, TaskStatus::Queued | TaskStatus::Assigned)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Round {
    pub number: u32,
    pub criterion: Criterion,
    pub budget: usize,
    pub seed: u64,
    /// Checkpoint the pool was scored with.
    pub checkpoint: String,
    pub created_ms: u64,
    /// Set while every task is labeled or skipped.
    pub completed_ms: Option<u64>,
    /// Set when retraining starts; a closed round accepts no more labels.
    pub closed_ms: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Running,
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: u64,
    pub round: u32,
    pub state: JobState,
    pub started_ms: u64,
    pub finished_ms: Option<u64>,
    pub checkpoint: Option<String>,
    pub error: Option<String>,
    pub labeled: usize,
    pub unlabeled: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Initialized {
        train: Vec<Example>,
        dev: Vec<Example>,
        checkpoint: String,
    },
    RoundOpened {
        round: Round,
        /// In serving order.
        tasks: Vec<Task>,
    },
    Assigned {
        ids: Vec<usize>,
        expires_ms: u64,
    },
    Labeled {
        id: usize,
        annotation: Annotation,
        at_ms: u64,
    },
    Skipped {
        id: usize,
        at_ms: u64,
    },
    RetrainStarted {
        job: u64,
        round: u32,
        labeled: usize,
        unlabeled: usize,
        at_ms: u64,
    },
    CheckpointPublished {
        job: u64,
        checkpoint: String,
        metrics: Option<MetricsReport>,
        at_ms: u64,
    },
    RetrainFailed {
        job: u64,
        error: String,
        at_ms: u64,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct State {
    /// Train examples indexed by id. Annotated ones form the labeled set,
    /// the rest the pool.
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub checkpoint: String,
    pub rounds: Vec<Round>,
    /// Tasks of the latest round, by id.
    pub tasks: BTreeMap<usize, Task>,
    pub jobs: BTreeMap<u64, Job>,
    pub metrics: Option<MetricsReport>,
    /// Sequence number of the last applied event.
    pub seq: u64,
    next_order: u64,
}

impl State {
    pub fn labeled_count(&self) -> usize {
        self.train.iter().filter(|e| e.annotation.is_some()).count()
    }

    pub fn pool_count(&self) -> usize {
        self.train.len() - self.labeled_count()
    }

    pub fn labeled_ids(&self) -> Vec<usize> {
        self.train.iter().filter(|e| e.annotation.is_some()).map(|e| e.id()).collect()
    }

    pub fn pool_ids(&self) -> Vec<usize> {
        self.train.iter().filter(|e| e.annotation.is_none()).map(|e| e.id()).collect()
    }

    /// The round still accepting work, if any.
    pub fn active_round(&self) -> Option<&Round> {
        self.rounds.last().filter(|r| r.closed_ms.is_none())
    }

    pub fn round_complete(&self) -> bool {
        !self.tasks.values().any(Task::pending)
    }

    pub fn running_job(&self) -> Option<&Job> {
        self.jobs.values().find(|j| j.state == JobState::Running)
    }

    /// Tasks in serving order.
    pub fn ordered_tasks(&self) -> Vec<&Task> {
        let mut tasks: Vec<&Task> = self.tasks.values().collect();
        tasks.sort_by_key(|t| t.order);
        tasks
    }

    fn refresh_completion(&mut self, at_ms: u64) {
        let complete = self.round_complete();
        if let Some(round) = self.rounds.last_mut().filter(|r| r.closed_ms.is_none()) {
            round.completed_ms = match (complete, round.completed_ms) {
                (true, None) => Some(at_ms),
                (true, done) => done,
                (false, _) => None,
            };
        }
    }

    pub fn apply(&mut self, seq: u64, event: &Event) {
        self.seq = seq;
        match event {
            Event::Initialized { train, dev, checkpoint } => {
                *self = State {
                    train: train.clone(),
                    dev: dev.clone(),
                    checkpoint: checkpoint.clone(),
                    seq,
                    ..State::default()
                };
            }
            Event::RoundOpened { round, tasks } => {
                self.rounds.push(round.clone());
                self.tasks = tasks.iter().map(|t| (t.id, t.clone())).collect();
                self.next_order = tasks.iter().map(|t| t.order + 1).max().unwrap_or(0);
                self.refresh_completion(round.created_ms);
            }
            Event::Assigned { ids, expires_ms } => {
                for id in ids {
                    if let Some(t) = self.tasks.get_mut(id) {
                        t.status = TaskStatus::Assigned;
                        t.lease_expires_ms = Some(*expires_ms);
                    }
                }
                if let Some(round) = self.rounds.last_mut() {
                    round.completed_ms = None;
                }
            }
            Event::Labeled { id, annotation, at_ms } => {
                if let Some(t) = self.tasks.get_mut(id) {
                    t.status = TaskStatus::Labeled;
                    t.lease_expires_ms = None;
                }
                self.train[*id].annotation = Some(annotation.clone());
                self.refresh_completion(*at_ms);
            }
            Event::Skipped { id, at_ms } => {
                if let Some(t) = self.tasks.get_mut(id) {
                    t.status = TaskStatus::Skipped;
                    t.lease_expires_ms = None;
                    t.order = self.next_order;
                    self.next_order += 1;
                }
                self.refresh_completion(*at_ms);
            }
            Event::RetrainStarted {
                job,
                round,
                labeled,
                unlabeled,
                at_ms,
            } => {
                if let Some(r) = self.rounds.last_mut() {
                    r.closed_ms = Some(*at_ms);
                }
                self.jobs.insert(
                    *job,
                    Job {
                        id: *job,
                        round: *round,
                        state: JobState::Running,
                        started_ms: *at_ms,
                        finished_ms: None,
                        checkpoint: None,
                        error: None,
                        labeled: *labeled,
                        unlabeled: *unlabeled,
                    },
                );
            }
            Event::CheckpointPublished {
                job,
                checkpoint,
                metrics,
                at_ms,
            } => {
                self.checkpoint = checkpoint.clone();
                self.metrics = metrics.clone();
                if let Some(j) = self.jobs.get_mut(job) {
                    j.state = JobState::Succeeded;
                    j.finished_ms = Some(*at_ms);
                    j.checkpoint = Some(checkpoint.clone());
                }
            }
            Event::RetrainFailed { job, error, at_ms } => {
                if let Some(j) = self.jobs.get_mut(job) {
                    j.state = JobState::Failed;
                    j.finished_ms = Some(*at_ms);
                    j.error = Some(error.clone());
                }
            }
        }
    }
}
