//! Metrics, the analytical cost profiler and the PCA domain-view export.

mod metrics;
mod pca;
mod profile;

pub use metrics::{auc, cluster_accuracy, logloss, nmi, Contingency, MetricsReport, MAX_MATCH_CLUSTERS};
pub use pca::{pca_project, ProjectionExport, Stage};
pub use profile::{
    cost_report, count_flops, count_params, flops_per_sample, matched_mlp_config, render_table, CostReport,
    ModuleCost, DEFAULT_PROFILE_BATCH, FLOPS_CONVENTION,
};
