//! Model scores: BIC, the evaluator total and the visual information
//! criterion `vic = alpha * evaluator_total - bic` (higher is better).

use serde::{Deserialize, Serialize};

/// Default weight of the evaluator score in GP kernel search.
pub const DEFAULT_ALPHA: f64 = 50.0;

/// `-2 loglik + n_params ln(n_data)`.
pub fn bic(train_loglik: f64, n_params: usize, n_data: usize) -> f64 {
    debug_assert!(n_data >= 1 && n_params >= 1);
    -2.0 * train_loglik + n_params as f64 * (n_data as f64).ln()
}

pub fn vic(bic: f64, evaluator_total: f64, alpha: f64) -> f64 {
    alpha * evaluator_total - bic
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub bic: f64,
    /// Mean resemblance plus uncertainty, in [0, 100].
    pub fitness_score: f64,
    pub generalizability_score: f64,
    pub evaluator_total: f64,
    pub alpha: f64,
    pub vic: f64,
    pub round_index: usize,
    /// Set when the evaluator failed and the total was forced to zero.
    #[serde(default)]
    pub evaluation_failed: bool,
}

impl ScoreRecord {
    /// Builds a record from evaluator components, clamping each into range.
    pub fn new(
        bic_value: f64,
        fitness_score: f64,
        generalizability_score: f64,
        alpha: f64,
        round_index: usize,
    ) -> Self {
        let fitness_score = fitness_score.clamp(0.0, 100.0);
        let generalizability_score = generalizability_score.clamp(0.0, 50.0);
        let evaluator_total = fitness_score + generalizability_score;
        Self {
            bic: bic_value,
            fitness_score,
            generalizability_score,
            evaluator_total,
            alpha,
            vic: vic(bic_value, evaluator_total, alpha),
            round_index,
            evaluation_failed: false,
        }
    }

    pub fn failed(bic_value: f64, alpha: f64, round_index: usize) -> Self {
        Self { evaluation_failed: true, ..Self::new(bic_value, 0.0, 0.0, alpha, round_index) }
    }

    /// VIC with a recency penalty of `gamma` per round of age.
    pub fn adjusted_vic(&self, gamma: f64, current_round: usize) -> f64 {
        self.vic - gamma * current_round.saturating_sub(self.round_index) as f64
    }

    pub fn rescored(&self, alpha: f64) -> Self {
        Self { alpha, vic: vic(self.bic, self.evaluator_total, alpha), ..self.clone() }
    }
}
