use std::cmp::Ordering;

use indexmap::IndexMap;

use crate::evaluator::EvaluatorReport;
use crate::fitting::FittedModel;
use crate::scoring::ScoreRecord;

#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub model: FittedModel,
    pub score: ScoreRecord,
    pub report: Option<EvaluatorReport>,
    pub plots: Vec<String>,
}

/// Every scored model, keyed by canonical text in insertion order. Entries
/// are never evicted.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelPool {
    entries: IndexMap<String, PoolEntry>,
}

/// Orders `a` before `b` when it has the higher adjusted VIC, then the newer
/// round, then the smaller canonical text.
fn rank(a: (&String, &PoolEntry), b: (&String, &PoolEntry), gamma: f64, current_round: usize) -> Ordering {
    let va = a.1.score.adjusted_vic(gamma, current_round);
    let vb = b.1.score.adjusted_vic(gamma, current_round);
    vb.total_cmp(&va)
        .then_with(|| b.1.score.round_index.cmp(&a.1.score.round_index))
        .then_with(|| a.0.cmp(b.0))
}

impl ModelPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, text: &str) -> bool {
        self.entries.contains_key(text)
    }

    pub fn get(&self, text: &str) -> Option<&PoolEntry> {
        self.entries.get(text)
    }

    /// Inserts under the model's canonical text; returns false and leaves
    /// the pool unchanged when the key already exists.
    pub fn insert(&mut self, entry: PoolEntry) -> bool {
        let key = entry.model.text();
        if self.entries.contains_key(&key) {
            return false;
        }
        self.entries.insert(key, entry);
        true
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &PoolEntry)> {
        self.entries.iter()
    }

    /// The `k` best entries, best first.
    pub fn top_k(&self, k: usize, gamma: f64, current_round: usize) -> Vec<&PoolEntry> {
        let mut all: Vec<(&String, &PoolEntry)> = self.entries.iter().collect();
        all.sort_by(|a, b| rank(*a, *b, gamma, current_round));
        all.into_iter().take(k).map(|(_, e)| e).collect()
    }

    pub fn best(&self, gamma: f64, current_round: usize) -> Option<&PoolEntry> {
        self.entries.iter().min_by(|a, b| rank(*a, *b, gamma, current_round)).map(|(_, e)| e)
    }
}

/// Argmax of `vic - gamma * (current_round - round_created)`, ties broken by
/// newer round and then by canonical text.
pub fn select_best(pool: &ModelPool, gamma: f64, current_round: usize) -> Option<&FittedModel> {
    pool.best(gamma, current_round).map(|e| &e.model)
}
