//! Aggregation and isolation guidance over cross-attention maps.
//!
//! Subject tokens whose attention scatters over several blobs are pulled
//! together by an aggregation loss on grouping-region centroids; different
//! subjects are pushed apart by an isolation loss on whole-map centroids. A
//! max-activation term keeps each subject's peak strong. The crate provides
//! the losses, their exact gradients, a small latent-update simulator, and
//! spatial metrics (Moran's I, overlap) to watch the effect.

pub mod attn;
pub mod error;
pub mod grad;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod regions;
pub mod report;
pub mod sim;

pub use attn::{
    compute_attention, max_activation, weighted_centroid, AttentionMap, AttentionStack, Cell,
    Coord, TokenId, TokenRole, TokenSpec,
};
pub use error::{Error, Result};
pub use grad::{
    finite_diff_gradient, gradcheck, latent_gradient, loss_gradient, GradCheckConfig,
    GradCheckReport, GradientField, Wrt,
};
pub use losses::{
    agg_attr_loss, agg_sub_loss, agg_sub_loss_cos, iso_loss, iso_loss_all, iso_loss_cos, max_loss,
    multi_encoder_weights, total_loss, LossBreakdown, LossWeights, MetricKind, Metrics, Objective,
    Selection,
};
pub use metrics::{centroid_spread, morans_i, overlap_ratio, Adjacency, MoranConfig};
pub use regions::{
    identify_regions, radius_schedule, CircularMask, GroupingRegion, RegionConfig, RegionConfigs,
    RegionRule, RegionRules,
};
pub use report::{analyze, region_table, sweep_gradcheck, Analysis, PairRow, RegionRow};
pub use sim::{
    gaussian_blur, init_latent, run, sim_step, BlobSpec, Bump, Latent, SimConfig, StepSize,
    TokenBlobs, Trajectory,
};
