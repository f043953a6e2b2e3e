//! End-to-end orchestration: data generation, training, the simulated
//! serving loop, paired policy experiments, metrics, plots and the CLI.
//!
//! Serving mirrors the production flow: the static scores `δ` are computed
//! once per day into a [`ScoreStore`]; at each entry the interest scores `p`
//! and blend weights `γ` are computed on the live state, fused, and the top
//! page is served.

pub mod cli;
mod config;
mod experiment;
mod metrics;
mod plot;
mod policy;

pub use config::{Config, ExperimentConfig};
pub use experiment::{
    am_eval_auc, arm_labels, biased_policy, compare, exploring_policy, gen_data, greedy_gap, overestimation_gap,
    run_experiment, run_seed, train_models, ArmReport, Comparison, EvalReport, GapReport, GeneratedData, TrainSummary,
    World, COMPARED_METRICS,
};
pub use metrics::{
    activity_matrix, compute_lt, compute_pdr, oracle_qini, qini_auuc, qini_curve, qini_report, sign_test, ArmMetrics,
    QiniReport, QiniStats, SignTest,
};
pub use plot::{bar_chart, line_chart, Series};
pub use policy::{serve_entry, Models, PolicyRunner, PolicySpec, ScoreStore, Served};
