//! Neural-ODE Transformer encoders and the vanilla baseline, trained on PARITY.
//!
//! * [`autodiff`]: dense matrices on a reverse-mode tape.
//! * [`odeint`]: adaptive RKF4(5), fixed-grid replay and forward Euler, all on the tape.
//! * [`layers`] and [`model`]: attention, feed-forward and block definitions.
//! * [`parity`], [`train`] and [`ensemble`]: data, the training loop and the experiment protocols.

pub mod autodiff;
pub mod ensemble;
pub mod layers;
pub mod model;
pub mod odeint;
pub mod parity;
pub mod train;

pub use autodiff::{AutodiffError, Gradients, ParamId, Parameter, ParameterSet, Tape, Tensor, Var};
pub use ensemble::{
    default_lambda_grid, lambda_sweep, run_ensemble, run_ensemble_with_models, spearman, trimmed_mean, EnsembleConfig,
    EnsembleError, EnsembleSummary, Histogram, DEFAULT_LR_GRID,
};
pub use model::{Architecture, Model, ModelConfig, ModelError, ResidualProbe, RhsVariant, SOS};
pub use odeint::{OrderFit, SolveError, SolveStats, SolverConfig};
pub use parity::{gen_dataset, parity_oracle, DataError, Parity, ParityDataset};
pub use train::{train_run, RunRecord, TrainConfig, TrainError, TrainOutcome};
