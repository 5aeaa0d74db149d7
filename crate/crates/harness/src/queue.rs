//! Parallel, resumable execution of experiment cells.
//!
//! Each cell writes one JSON file under `<out>/cells/`, atomically via a
//! rename. A rerun skips cells whose file already holds a successful result.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{Context as _, Result};

use crate::experiment::{Cell, CellRecord, CellStatus, Context};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QueueSummary {
    pub completed: usize,
    pub skipped: usize,
    pub failed: Vec<String>,
}

pub fn cell_dir(out: &Path) -> PathBuf {
    out.join("cells")
}

pub fn cell_path(out: &Path, key: &str) -> PathBuf {
    cell_dir(out).join(format!("{key}.json"))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))
}

pub fn read_record(path: &Path) -> Result<CellRecord> {
    let text = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&text).with_context(|| format!("parsing {}", path.display()))
}

fn already_done(out: &Path, key: &str) -> bool {
    read_record(&cell_path(out, key)).is_ok_and(|r| r.is_ok())
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic".into())
}

/// Run every missing cell on `jobs` worker threads.
pub fn run_cells<C: Cell>(ctx: &Context, cells: &[C], out: &Path, jobs: usize) -> Result<QueueSummary> {
    fs::create_dir_all(cell_dir(out)).with_context(|| format!("creating {}", out.display()))?;
    let pending: Vec<&C> = cells.iter().filter(|c| !already_done(out, &c.key())).collect();
    let summary = Mutex::new(QueueSummary {
        skipped: cells.len() - pending.len(),
        ..QueueSummary::default()
    });
    let next = AtomicUsize::new(0);
    let write_error: Mutex<Option<anyhow::Error>> = Mutex::new(None);

    std::thread::scope(|scope| {
        for _ in 0..jobs.max(1).min(pending.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = pending.get(i) else { break };
                let key = cell.key();
                log::info!("running {key}");
                let result = panic::catch_unwind(AssertUnwindSafe(|| cell.run(ctx)));
                let record = match result {
                    Ok(Ok(r)) => r,
                    Ok(Err(e)) => failed(cell.describe(), format!("{e:#}")),
                    Err(p) => failed(cell.describe(), panic_message(p)),
                };
                let ok = record.is_ok();
                if !ok {
                    log::warn!("{key} failed: {:?}", record.status);
                }
                let written = serde_json::to_vec_pretty(&record)
                    .map_err(anyhow::Error::from)
                    .and_then(|bytes| write_atomic(&cell_path(out, &key), &bytes));
                if let Err(e) = written {
                    write_error.lock().expect("lock").get_or_insert(e);
                }
                let mut s = summary.lock().expect("lock");
                if ok {
                    s.completed += 1;
                } else {
                    s.failed.push(key);
                }
            });
        }
    });
    if let Some(e) = write_error.into_inner().expect("lock") {
        return Err(e);
    }
    Ok(summary.into_inner().expect("lock"))
}

fn failed(mut record: CellRecord, error: String) -> CellRecord {
    record.status = CellStatus::Failed { error };
    record
}

/// All result files under `out`.
pub fn read_all(out: &Path) -> Result<Vec<CellRecord>> {
    let dir = cell_dir(out);
    let mut records = Vec::new();
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    for p in paths {
        records.push(read_record(&p)?);
    }
    Ok(records)
}
