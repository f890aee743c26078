//! Symbolic-regression mode: closed-form function templates with fitted
//! coefficients, scored by NMSE plus a node-count penalty instead of BIC.
//!
//! Everything here works in data units (the raw series), so a template
//! written for the generating formula can fit it exactly. Reported RMSEs are
//! mapped to the normalized scale for comparison with GP runs.

pub mod expr;
pub mod fit;
pub mod propose;
pub mod run;

use thiserror::Error;

pub use expr::{parse_function, Func, FuncExpr, FuncParseError};
pub use fit::{fit_function, fit_function_xy, mean_predictor, nmse, sr_objective, sr_objective_xy, FittedFunction, SrFitOptions, SrScore};
pub use propose::{
    greedy_functions, run_sr_agent_loop, AgentFunctionProposer, FunctionProposer, GreedyFunctionProposer,
    ScriptedFunctionProposer, SrAgentDomain, SrProposal, SrProposalRequest, SrReference, FUNCTION_MARKER,
};
pub use run::{run_sr_configured, run_sr_discovery, SrCandidateLog, SrEntry, SrOutcome, SrPool};

use crate::dataset::Dataset;
use crate::evaluator::PredictiveView;
use crate::plotting::extrapolation_grid;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SrError {
    #[error(transparent)]
    Parse(#[from] FuncParseError),
    #[error("fit failed: {0}")]
    Fit(String),
    #[error("degenerate data: {0}")]
    Degenerate(String),
}

/// A fitted function drawn like a GP prediction with a zero-width band, in
/// data units over the ±20% grid around the full x extent.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionView {
    pub view: PredictiveView,
    /// Every value at the training inputs and on the grid is finite.
    pub finite: bool,
}

impl FunctionView {
    pub fn new(fitted: &FittedFunction, dataset: &Dataset, grid_points: usize) -> Result<Self, SrError> {
        let (x, y) = dataset.train_raw();
        let (lo, hi) = dataset.x_extent();
        let (lo, hi) = (dataset.x_transform.apply(lo), dataset.x_transform.apply(hi));
        let grid = extrapolation_grid(lo, hi, grid_points).map_err(|e| SrError::Degenerate(e.to_string()))?;
        let at_train = fitted.predict(&x);
        let mean = fitted.predict(&grid);
        let finite = at_train.iter().chain(&mean).all(|v| v.is_finite());
        Ok(Self {
            view: PredictiveView {
                train_x: x,
                train_y: y,
                mean_at_train: at_train,
                grid_x: grid,
                low_q: mean.clone(),
                high_q: mean.clone(),
                mean,
            },
            finite,
        })
    }
}
