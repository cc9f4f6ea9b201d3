//! Mixed clean + adversarial training.
//!
//! Each step minimizes `L(clean) + lambda * L(adversarial) + decay`, where the
//! adversarial batch comes from the regime's attack run against the current
//! parameters under the step's dropout realization.

mod config;
mod optim;
mod run;
mod step;

pub use config::{lr_at, Regime, TrainConfig};
pub use optim::{adamw_update, zero_moments, BETA1, BETA2, EPS};
pub use run::{checkpoint_name, train_loop, training_batch, TrainOutcome, DIAGNOSTICS_FILE, METRICS_FILE, TIMINGS_FILE};
pub use step::{
    objective_at, step_attack, step_drop_config, step_seed, train_step, train_step_traced, MetricsRecord, Objective,
    TrainState, METRICS_HEADER,
};
