mod common;

use std::collections::HashSet;

use viraal_core::active::{self, Criterion, QuerySpec};
use viraal_core::corpus::Example;
use viraal_service::service::{LabelRequest, OpenRound};
use viraal_service::state::TaskStatus;
use viraal_service::ServiceError;

fn open(criterion: Criterion, budget: usize, seed: Option<u64>) -> OpenRound {
    OpenRound { criterion, budget, seed }
}

/// Pool confidences computed directly from the checkpoint.
fn pool_records(f: &common::Fixture) -> Vec<active::ConfidenceRecord> {
    let pool: Vec<&Example> = f.train.iter().filter(|e| e.annotation.is_none()).collect();
    let ck = &f.checkpoint;
    let mut records = active::score_pool(&ck.model(), &ck.params, &ck.vocab, &pool).unwrap();
    active::joint_confidence(&mut records, Default::default());
    records
}

#[test]
fn single_task_is_the_least_confident() {
    let f = common::fixture();
    for criterion in [Criterion::EntropyInt, Criterion::EntropySlot, Criterion::EntropyJoint] {
        let dir = tempfile::tempdir().unwrap();
        let svc = common::service(dir.path());
        svc.open_round(&open(criterion, 1, None), 0).unwrap();
        let tasks = svc.next_tasks(10, 0).unwrap();
        assert_eq!(tasks.len(), 1);
        let key = |r: &active::ConfidenceRecord| match criterion {
            Criterion::EntropyInt => r.conf_int,
            Criterion::EntropySlot => r.conf_slot,
            _ => r.conf_joint.unwrap(),
        };
        let records = pool_records(f);
        let min = records.iter().map(key).fold(f64::INFINITY, f64::min);
        let lowest: Vec<usize> = records.iter().filter(|r| key(r) == min).map(|r| r.id).collect();
        assert_eq!(tasks[0].id, lowest[0], "{criterion}");
    }
}

#[test]
fn round_delegates_to_selection() {
    let f = common::fixture();
    let records = pool_records(f);
    for (criterion, budget) in [(Criterion::EntropyJoint, 5), (Criterion::EntropyInt, 7), (Criterion::Random, 5)] {
        let dir = tempfile::tempdir().unwrap();
        let svc = common::service(dir.path());
        let view = svc.open_round(&open(criterion, budget, Some(42)), 0).unwrap();
        assert_eq!(view.tasks.queued, budget);
        let expected = active::select(&records, &QuerySpec { criterion, budget, seed: 42 }).unwrap();
        let served = svc.next_tasks(100, 0).unwrap();
        let got: Vec<usize> = served.iter().map(|t| t.id).collect();
        if criterion == Criterion::Random {
            let (a, b): (HashSet<_>, HashSet<_>) = (got.iter().collect(), expected.iter().collect());
            assert_eq!(a, b);
        } else {
            assert_eq!(got, expected, "{criterion}");
        }
        for w in served.windows(2) {
            let (a, b) = (&w[0].confidence, &w[1].confidence);
            let k = |r: &active::ConfidenceRecord| match criterion {
                Criterion::EntropyInt => r.conf_int,
                _ => r.conf_joint.unwrap(),
            };
            assert!(k(a) <= k(b));
        }
    }
}

#[test]
fn random_rounds_are_reproducible() {
    let ids = |seed| {
        let dir = tempfile::tempdir().unwrap();
        let svc = common::service(dir.path());
        svc.open_round(&open(Criterion::Random, 6, Some(seed)), 0).unwrap();
        let mut v: Vec<usize> = svc.next_tasks(6, 0).unwrap().iter().map(|t| t.id).collect();
        v.sort_unstable();
        v
    };
    assert_eq!(ids(9), ids(9));
    assert_ne!(ids(9), ids(10));
}

#[test]
fn round_preconditions() {
    let dir = tempfile::tempdir().unwrap();
    let svc = common::service(dir.path());
    let pool = svc.status().pool_count;
    assert!(matches!(svc.next_tasks(1, 0), Err(ServiceError::Conflict(_))));
    assert!(matches!(svc.open_round(&open(Criterion::EntropyJoint, 0, None), 0), Err(ServiceError::Validation(_))));
    assert!(matches!(
        svc.open_round(&open(Criterion::EntropyJoint, pool + 1, None), 0),
        Err(ServiceError::Validation(_))
    ));
    svc.open_round(&open(Criterion::EntropyJoint, 2, None), 0).unwrap();
    assert!(matches!(svc.open_round(&open(Criterion::EntropyJoint, 2, None), 0), Err(ServiceError::Conflict(_))));
    assert!(matches!(svc.start_retrain(0), Err(ServiceError::Conflict(_))));
}

#[test]
fn empty_pool_is_an_error() {
    let f = common::fixture();
    let dir = tempfile::tempdir().unwrap();
    let mut config = viraal_service::ServiceConfig::new(dir.path());
    config.lease_ms = 1000;
    let svc = viraal_service::Service::init(config, f.gold.clone(), f.dev.clone(), f.checkpoint.clone()).unwrap();
    assert!(matches!(svc.open_round(&open(Criterion::EntropyJoint, 1, None), 0), Err(ServiceError::BadRequest(_))));
}

#[test]
fn leases() {
    let dir = tempfile::tempdir().unwrap();
    let svc = common::service(dir.path());
    svc.open_round(&open(Criterion::EntropyJoint, 5, None), 0).unwrap();
    assert!(svc.next_tasks(0, 0).unwrap().is_empty());
    let a = svc.next_tasks(2, 0).unwrap();
    let b = svc.next_tasks(2, 10).unwrap();
    let ids_a: HashSet<usize> = a.iter().map(|t| t.id).collect();
    let ids_b: HashSet<usize> = b.iter().map(|t| t.id).collect();
    assert!(ids_a.is_disjoint(&ids_b));
    let rest = svc.next_tasks(100, 20).unwrap();
    assert_eq!(rest.len(), 1);
    assert!(svc.next_tasks(100, 30).unwrap().is_empty());
    // Lease is 1000 ms: the first two come back, in their original order.
    let again = svc.next_tasks(100, 1000).unwrap();
    assert_eq!(again.iter().map(|t| t.id).collect::<Vec<_>>(), a.iter().map(|t| t.id).collect::<Vec<_>>());
    let later = svc.next_tasks(100, 1010).unwrap();
    assert_eq!(later.iter().map(|t| t.id).collect::<Vec<_>>(), b.iter().map(|t| t.id).collect::<Vec<_>>());
}

#[test]
fn skipped_tasks_go_to_the_tail() {
    let f = common::fixture();
    let dir = tempfile::tempdir().unwrap();
    let svc = common::service(dir.path());
    svc.open_round(&open(Criterion::EntropyJoint, 4, None), 0).unwrap();
    let first = svc.next_tasks(1, 0).unwrap().remove(0);
    let ack = svc.skip(first.id, 1).unwrap();
    assert_eq!(ack.status, TaskStatus::Skipped);
    assert!(svc.skip(first.id, 2).unwrap().duplicate);
    let served: Vec<usize> = svc.next_tasks(10, 3).unwrap().iter().map(|t| t.id).collect();
    assert_eq!(served.len(), 4);
    assert_eq!(*served.last().unwrap(), first.id);
    for id in served {
        svc.submit_label(id, &common::gold_label(f, id), 4).unwrap();
    }
    assert!(svc.status().round.unwrap().complete);
}

#[test]
fn round_completes_with_skips() {
    let dir = tempfile::tempdir().unwrap();
    let svc = common::service(dir.path());
    svc.open_round(&open(Criterion::EntropyJoint, 2, None), 0).unwrap();
    for t in svc.next_tasks(2, 0).unwrap() {
        svc.skip(t.id, 1).unwrap();
    }
    let status = svc.status();
    assert!(status.round.as_ref().unwrap().complete);
    assert!(status.round.unwrap().round.completed_ms.is_some());
    // Serving a skipped task again reopens the round until it is resolved.
    let t = svc.next_tasks(1, 2).unwrap().remove(0);
    assert!(!svc.status().round.unwrap().complete);
    svc.skip(t.id, 3).unwrap();
    assert!(svc.status().round.unwrap().complete);
}

#[test]
fn labels() {
    let f = common::fixture();
    let dir = tempfile::tempdir().unwrap();
    let svc = common::service(dir.path());
    svc.open_round(&open(Criterion::EntropyJoint, 3, None), 0).unwrap();
    let before = svc.status();
    let tasks = svc.next_tasks(2, 0).unwrap();
    let queued = svc.state().tasks.values().find(|t| t.status == TaskStatus::Queued).unwrap().id;

    assert!(matches!(svc.submit_label(queued, &common::gold_label(f, queued), 0), Err(ServiceError::Conflict(_))));
    assert!(matches!(svc.submit_label(9999, &common::gold_label(f, tasks[0].id), 0), Err(ServiceError::NotFound(_))));

    let id = tasks[0].id;
    let good = common::gold_label(f, id);
    let ack = svc.submit_label(id, &good, 1).unwrap();
    assert!(!ack.duplicate);
    assert_eq!(ack.pool_count, before.pool_count - 1);
    assert_eq!(ack.labeled_count, before.labeled_count + 1);
    let dup = svc.submit_label(id, &good, 2).unwrap();
    assert!(dup.duplicate);
    assert_eq!((dup.pool_count, dup.labeled_count), (ack.pool_count, ack.labeled_count));
    let mut different = good.clone();
    different.slots[0] = if different.slots[0] == "O" { "B-city".into() } else { "O".into() };
    assert!(matches!(svc.submit_label(id, &different, 3), Err(ServiceError::Conflict(_))));

    let other = tasks[1].id;
    let mut short = common::gold_label(f, other);
    short.slots.pop();
    short.allow_new_tags = false;
    short.intent = "no_such_intent".into();
    match svc.submit_label(other, &short, 4) {
        Err(ServiceError::Validation(fields)) => {
            assert!(fields["slots"].contains(&format!("expected {} tags", f.gold[other].tokens().len())));
            assert!(fields["intent"].contains("allow_new_tags"));
        }
        r => panic!("expected validation error, got {r:?}"),
    }
    let mut novel = common::gold_label(f, other);
    novel.slots[0] = "B-brand_new".into();
    novel.allow_new_tags = false;
    match svc.submit_label(other, &novel, 5) {
        Err(ServiceError::Validation(fields)) => assert!(fields.contains_key("slots[0]")),
        r => panic!("expected validation error, got {r:?}"),
    }
    let mut malformed = common::gold_label(f, other);
    malformed.slots[0] = "X-city".into();
    malformed.allow_new_tags = true;
    assert!(matches!(svc.submit_label(other, &malformed, 6), Err(ServiceError::Validation(_))));
    novel.allow_new_tags = true;
    svc.submit_label(other, &novel, 7).unwrap();
    assert_eq!(svc.status().labeled_count, before.labeled_count + 2);
}

fn label_round(svc: &viraal_service::Service, f: &common::Fixture, now: u64) -> Vec<usize> {
    let mut ids = Vec::new();
    loop {
        let tasks = svc.next_tasks(3, now).unwrap();
        if tasks.is_empty() {
            return ids;
        }
        for t in tasks {
            svc.submit_label(t.id, &common::gold_label(f, t.id), now).unwrap();
            ids.push(t.id);
        }
    }
}

#[test]
fn retrain_publishes_a_new_checkpoint() {
    let f = common::vat_fixture();
    let dir = tempfile::tempdir().unwrap();
    let svc = common::service_with(dir.path(), f, 1000, f.checkpoint.clone());
    let before = svc.status();
    svc.open_round(&open(Criterion::EntropyJoint, 4, None), 0).unwrap();
    let labeled = label_round(&svc, f, 0);
    let ticket = svc.start_retrain(1).unwrap();
    assert_eq!(ticket.job.labeled, before.labeled_count + 4);
    assert_eq!(ticket.job.unlabeled, before.pool_count - 4);
    assert!(svc.status().round.unwrap().round.closed_ms.is_some());
    assert!(matches!(svc.submit_label(labeled[0], &LabelRequest { intent: "x".into(), slots: vec![], allow_new_tags: true }, 2), Err(ServiceError::Conflict(_))));
    let job = svc.run_retrain(ticket, || 5).unwrap();
    assert_eq!(job.state, viraal_service::state::JobState::Succeeded);
    let status = svc.status();
    assert_eq!(status.checkpoint, "round-1.json");
    assert_eq!(status.labeled_count, before.labeled_count + 4);
    assert!(svc.metrics().is_some());
    assert!(dir.path().join("checkpoints/round-1.json").is_file());
    // The next round scores with the new model.
    let view = svc.open_round(&open(Criterion::EntropyJoint, 2, None), 6).unwrap();
    assert_eq!(view.round.number, 2);
    assert_eq!(view.round.checkpoint, "round-1.json");
}

#[test]
fn confirmed_new_tags_join_the_next_vocabulary() {
    let f = common::fixture();
    let dir = tempfile::tempdir().unwrap();
    let svc = common::service(dir.path());
    svc.open_round(&open(Criterion::EntropyJoint, 1, None), 0).unwrap();
    let t = svc.next_tasks(1, 0).unwrap().remove(0);
    let mut req = common::gold_label(f, t.id);
    req.slots[0] = "B-novel_slot".into();
    req.intent = "novel_intent".into();
    req.allow_new_tags = true;
    svc.submit_label(t.id, &req, 0).unwrap();
    let ticket = svc.start_retrain(0).unwrap();
    svc.run_retrain(ticket, || 1).unwrap();
    let ck = svc.checkpoint();
    assert!(ck.vocab.slot_id("B-novel_slot").is_some());
    assert!(ck.vocab.intent_id("novel_intent").is_some());
    assert!(f.checkpoint.vocab.slot_id("B-novel_slot").is_none());
}

#[test]
fn failed_retrain_keeps_the_previous_checkpoint() {
    let f = common::fixture();
    let mut bad = f.checkpoint.clone();
    bad.config.learning_rate = 1e300;
    bad.config.grad_clip = f64::INFINITY;
    let dir = tempfile::tempdir().unwrap();
    let svc = common::service_with(dir.path(), f, 1000, bad);
    svc.open_round(&open(Criterion::EntropyJoint, 2, None), 0).unwrap();
    label_round(&svc, f, 0);
    let ticket = svc.start_retrain(1).unwrap();
    let job = svc.run_retrain(ticket, || 2).unwrap();
    assert_eq!(job.state, viraal_service::state::JobState::Failed);
    assert!(job.error.unwrap().contains("diverged"));
    let status = svc.status();
    assert_eq!(status.checkpoint, "initial.json");
    assert!(!status.round.unwrap().active);
    assert!(svc.metrics().is_none());
    // Operations continue with the old checkpoint.
    svc.open_round(&open(Criterion::EntropyJoint, 1, None), 3).unwrap();
}
