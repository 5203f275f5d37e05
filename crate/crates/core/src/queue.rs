//! On-disk review queue: the items as JSON lines plus an append-only decision log.
//!
//! `queue.jsonl` is written once when the queue is created. Every decision
//! is appended to `decisions.jsonl` and synced before it is acknowledged;
//! opening the store replays the log over the items, later decisions
//! superseding earlier ones. A torn final line (crash mid-write) is ignored.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::correction::{Decision, ImageOverlay, ReviewItem};
use crate::error::{Error, Result};
use crate::io::{create_dir_all, read_json, write_atomic, write_json};
use crate::ledger::CostModel;
use crate::lsm::Region;
use crate::model::ImageId;

pub const QUEUE_FILE: &str = "queue.jsonl";
pub const LOG_FILE: &str = "decisions.jsonl";
pub const OVERLAY_FILE: &str = "overlays.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    /// Position in the log, from 1.
    pub seq: u64,
    pub item_id: u64,
    #[serde(flatten)]
    pub decision: Decision,
    #[serde(default)]
    pub reviewer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionProgress {
    pub total: usize,
    pub pending: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub total: usize,
    pub pending: usize,
    pub resolved: usize,
    pub per_region: BTreeMap<Region, RegionProgress>,
    /// Expert cost still to be spent on pending items.
    pub projected_review_cost: f64,
}

/// Items filter for listing.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QueueFilter {
    #[serde(default)]
    pub status: Option<crate::correction::ReviewStatus>,
    #[serde(default)]
    pub image_id: Option<ImageId>,
    #[serde(default)]
    pub region: Option<Region>,
}

impl QueueFilter {
    pub fn matches(&self, item: &ReviewItem) -> bool {
        self.status.is_none_or(|s| item.status == s)
            && self.image_id.is_none_or(|i| item.image_id == i)
            && self.region.is_none_or(|r| item.region == r)
    }
}

/// Single-writer handle on a queue directory.
#[derive(Debug)]
pub struct QueueStore {
    dir: PathBuf,
    items: Vec<ReviewItem>,
    index: BTreeMap<u64, usize>,
    log: Vec<DecisionRecord>,
    overlays: BTreeMap<ImageId, ImageOverlay>,
    appender: File,
}

fn index_of(items: &[ReviewItem]) -> BTreeMap<u64, usize> {
    items.iter().enumerate().map(|(i, it)| (it.item_id, i)).collect()
}

impl QueueStore {
    /// Writes a fresh queue to `dir`, discarding any previous queue and log there.
    pub fn create(dir: &Path, items: &[ReviewItem], overlays: &BTreeMap<ImageId, ImageOverlay>) -> Result<QueueStore> {
        create_dir_all(dir)?;
        let mut text = String::new();
        for item in items {
            text.push_str(&serde_json::to_string(item).expect("items serialize"));
            text.push('\n');
        }
        write_atomic(&dir.join(QUEUE_FILE), text.as_bytes())?;
        write_json(&dir.join(OVERLAY_FILE), overlays)?;
        write_atomic(&dir.join(LOG_FILE), b"")?;
        Self::open(dir)
    }

    /// Opens an existing queue and replays its decision log.
    pub fn open(dir: &Path) -> Result<QueueStore> {
        let queue_path = dir.join(QUEUE_FILE);
        let text = std::fs::read_to_string(&queue_path).map_err(|e| Error::io(&queue_path, e))?;
        let mut items = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let item: ReviewItem = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: queue_path.clone(),
                line: n + 1,
                column: e.column(),
                message: e.to_string(),
            })?;
            items.push(item);
        }
        let overlay_path = dir.join(OVERLAY_FILE);
        let overlays = if overlay_path.exists() {
            read_json(&overlay_path)?
        } else {
            BTreeMap::new()
        };

        let log_path = dir.join(LOG_FILE);
        let log = if log_path.exists() {
            replay_log(&log_path)?
        } else {
            Vec::new()
        };
        let appender = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;

        let mut store = QueueStore {
            dir: dir.to_path_buf(),
            index: index_of(&items),
            items,
            log: Vec::new(),
            overlays,
            appender,
        };
        for rec in log {
            store.materialize(&rec)?;
            store.log.push(rec);
        }
        Ok(store)
    }

    fn materialize(&mut self, rec: &DecisionRecord) -> Result<ReviewItem> {
        let pos = *self.index.get(&rec.item_id).ok_or(Error::UnknownItem(rec.item_id))?;
        let item = &mut self.items[pos];
        item.resolve(rec.decision.clone())?;
        Ok(item.clone())
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn items(&self) -> &[ReviewItem] {
        &self.items
    }

    pub fn item(&self, item_id: u64) -> Option<&ReviewItem> {
        self.index.get(&item_id).map(|&i| &self.items[i])
    }

    pub fn log(&self) -> &[DecisionRecord] {
        &self.log
    }

    pub fn overlay(&self, image_id: ImageId) -> Option<&ImageOverlay> {
        self.overlays.get(&image_id)
    }

    pub fn overlays(&self) -> &BTreeMap<ImageId, ImageOverlay> {
        &self.overlays
    }

    /// Items passing `filter`, in queue order.
    pub fn filtered<'a>(&'a self, filter: &'a QueueFilter) -> impl Iterator<Item = &'a ReviewItem> + 'a {
        self.items.iter().filter(move |i| filter.matches(i))
    }

    /// Validates, logs (durably) and applies a decision; returns the updated item.
    pub fn record(&mut self, item_id: u64, decision: Decision, reviewer: &str, timestamp: Option<String>) -> Result<ReviewItem> {
        let item = self.item(item_id).ok_or(Error::UnknownItem(item_id))?;
        item.check(&decision)?;
        let rec = DecisionRecord {
            seq: self.log.len() as u64 + 1,
            item_id,
            decision,
            reviewer: reviewer.to_string(),
            timestamp,
        };
        let mut line = serde_json::to_string(&rec).expect("records serialize");
        line.push('\n');
        let log_path = self.dir.join(LOG_FILE);
        self.appender
            .write_all(line.as_bytes())
            .and_then(|_| self.appender.sync_data())
            .map_err(|e| Error::io(&log_path, e))?;
        let updated = self.materialize(&rec)?;
        self.log.push(rec);
        Ok(updated)
    }

    pub fn progress(&self, costs: &CostModel) -> Progress {
        let mut per_region: BTreeMap<Region, RegionProgress> = BTreeMap::new();
        let mut pending = 0;
        for item in &self.items {
            let r = per_region.entry(item.region).or_default();
            r.total += 1;
            if !item.is_resolved() {
                r.pending += 1;
                pending += 1;
            }
        }
        Progress {
            total: self.items.len(),
            pending,
            resolved: self.items.len() - pending,
            per_region,
            projected_review_cost: pending as f64 * costs.expert_review_per_instance,
        }
    }
}

fn replay_log(path: &Path) -> Result<Vec<DecisionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let complete = text.ends_with('\n') || text.is_empty();
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::with_capacity(lines.len());
    for (n, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<DecisionRecord>(line) {
            Ok(rec) => out.push(rec),
            Err(_) if !complete && n + 1 == lines.len() => {
                log::warn!("{}: dropping torn final record", path.display());
                // cut it off so the next append starts on a fresh line
                let keep = text.rfind('\n').map_or(0, |i| i + 1) as u64;
                OpenOptions::new()
                    .write(true)
                    .open(path)
                    .and_then(|f| f.set_len(keep))
                    .map_err(|e| Error::io(path, e))?;
            }
            Err(e) => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: n + 1,
                    column: e.column(),
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correction::{build_review_queue, ReviewStatus};
    use crate::geometry::BBox;
    use crate::model::{Label, Source};

    fn items(n: u64) -> Vec<ReviewItem> {
        let greens: Vec<Label> = (0..n)
            .map(|i| Label::human(i + 1, 1, 1, BBox::new(i as f64 * 20.0, 0.0, 10.0, 10.0).unwrap(), Source::Crowd))
            .collect();
        let preds = vec![Label::predicted(1, 1, 1, BBox::new(1.0, 0.0, 10.0, 10.0).unwrap(), Source::ModelP, 0.4)];
        build_review_queue(1, &[], &greens, &preds, &[], 1)
    }

    #[test]
    fn record_replay_and_last_write_wins() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = QueueStore::create(dir.path(), &items(3), &BTreeMap::new()).unwrap();
        let costs = CostModel::default();
        assert_eq!(store.progress(&costs).pending, 3);
        assert_eq!(store.progress(&costs).projected_review_cost, 15.0);

        store.record(1, Decision::Reject, "a", None).unwrap();
        let it = store.record(1, Decision::Accept { suggestion: Some(0) }, "b", None).unwrap();
        assert_eq!(it.status, ReviewStatus::Accepted);
        assert_eq!(it.resolution, Some(BBox::new(1.0, 0.0, 10.0, 10.0).unwrap()));
        assert!(matches!(store.record(99, Decision::Reject, "a", None), Err(Error::UnknownItem(99))));
        assert!(matches!(
            store.record(2, Decision::Accept { suggestion: Some(3) }, "a", None),
            Err(Error::InvalidDecision { .. })
        ));
        drop(store);

        let store = QueueStore::open(dir.path()).unwrap();
        assert_eq!(store.log().len(), 2);
        assert_eq!(store.item(1).unwrap().status, ReviewStatus::Accepted);
        assert_eq!(store.progress(&costs).pending, 2);
        let f = QueueFilter {
            status: Some(ReviewStatus::Pending),
            ..QueueFilter::default()
        };
        assert_eq!(store.filtered(&f).count(), 2);
    }

    #[test]
    fn torn_tail_is_ignored_but_corruption_is_not() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = QueueStore::create(dir.path(), &items(2), &BTreeMap::new()).unwrap();
        store.record(2, Decision::Reject, "a", None).unwrap();
        drop(store);
        let log = dir.path().join(LOG_FILE);
        let mut f = OpenOptions::new().append(true).open(&log).unwrap();
        f.write_all(br#"{"seq":2,"item_id":1,"act"#).unwrap();
        drop(f);
        let mut store = QueueStore::open(dir.path()).unwrap();
        assert_eq!(store.log().len(), 1);
        assert_eq!(store.progress(&CostModel::default()).pending, 1);
        store.record(1, Decision::Reject, "a", None).unwrap();
        drop(store);
        assert_eq!(QueueStore::open(dir.path()).unwrap().progress(&CostModel::default()).pending, 0);

        std::fs::write(&log, "garbage\n{}\n").unwrap();
        assert!(matches!(QueueStore::open(dir.path()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn missing_queue_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(QueueStore::open(&dir.path().join("nope")), Err(Error::Io { .. })));
    }
}
