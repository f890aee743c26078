//! Kernel discovery for Gaussian-process regression driven by plot
//! evaluation, plus a symbolic-regression variant of the same loop.

pub mod dataset;
pub mod evaluator;
pub mod fitting;
pub mod gp;
pub mod kernel;
pub mod optim;
pub mod plotting;
pub mod proposer;
pub mod prompts;
pub mod scoring;
pub mod search;
pub mod symreg;
pub mod vlm;

pub use dataset::{Dataset, DatasetError, RawSeries};
pub use fitting::{FitError, FittedModel, InitSuggestion};
pub use gp::{ParamVector, Posterior};
pub use kernel::{BaseKernel, KernelExpr};
pub use plotting::{PlotSpec, RenderedPlot};
pub use scoring::ScoreRecord;
