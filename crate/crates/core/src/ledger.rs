//! Per-instance annotation cost accounting.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ImageId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Actor {
    Crowd,
    Expert,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Action {
    Annotate,
    ReviewCorrect,
}

/// Per-instance rates. Crowd and expert annotation default to 1:10.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    pub crowd_per_instance: f64,
    pub expert_per_instance: f64,
    pub expert_review_per_instance: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            crowd_per_instance: 1.0,
            expert_per_instance: 10.0,
            expert_review_per_instance: 5.0,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            self.crowd_per_instance,
            self.expert_per_instance,
            self.expert_review_per_instance,
        ];
        if rates.iter().any(|r| !r.is_finite() || *r < 0.0) || self.expert_per_instance <= 0.0 {
            return Err(Error::Config(format!("invalid cost model {self:?}")));
        }
        Ok(())
    }

    pub fn rate(&self, actor: Actor, action: Action) -> f64 {
        match (actor, action) {
            (Actor::Crowd, _) => self.crowd_per_instance,
            (Actor::Expert, Action::Annotate) => self.expert_per_instance,
            (Actor::Expert, Action::ReviewCorrect) => self.expert_review_per_instance,
        }
    }
}

/// One row of the ledger sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub actor: Actor,
    pub action: Action,
    pub image_id: ImageId,
    pub instances: u64,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub costs: CostModel,
    pub entries: Vec<LedgerEntry>,
}

impl BudgetLedger {
    pub fn new(costs: CostModel) -> Self {
        BudgetLedger {
            costs,
            entries: Vec::new(),
        }
    }

    /// Appends one entry costing `instances × rate(actor, action)`; returns that cost.
    pub fn charge(&mut self, actor: Actor, action: Action, image_id: ImageId, instances: u64) -> f64 {
        let cost = instances as f64 * self.costs.rate(actor, action);
        self.entries.push(LedgerEntry {
            actor,
            action,
            image_id,
            instances,
            cost,
        });
        cost
    }

    /// Instance counts per (actor, action).
    pub fn instances_by_kind(&self) -> BTreeMap<(Actor, Action), u64> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry((e.actor, e.action)).or_insert(0) += e.instances;
        }
        out
    }

    /// Total cost. Computed as `Σ rate × Σ instances` per kind, so the result
    /// does not depend on charge order.
    pub fn total(&self) -> f64 {
        self.instances_by_kind()
            .into_iter()
            .map(|((actor, action), n)| self.costs.rate(actor, action) * n as f64)
            .sum()
    }

    pub fn total_for(&self, actor: Actor, action: Action) -> f64 {
        self.instances_by_kind()
            .get(&(actor, action))
            .map_or(0.0, |n| *n as f64 * self.costs.rate(actor, action))
    }

    /// Total as a percentage of having experts annotate `truth_instances` from scratch.
    pub fn budget_percent(&self, truth_instances: u64) -> f64 {
        if truth_instances == 0 {
            return 0.0;
        }
        let full = self.costs.expert_per_instance * truth_instances as f64;
        100.0 * (self.total() / full)
    }

    /// Writes the sidecar (array of entries).
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, &self.entries)
    }

    pub fn load(path: &Path, costs: CostModel) -> Result<Self> {
        let entries: Vec<LedgerEntry> = crate::io::read_json(path)?;
        Ok(BudgetLedger { costs, entries })
    }
}
