//! Frozen-backbone adapters: pooled linear/MLP heads trained by grid
//! search, a segmentation decoder, and a linear probe.

mod grid;
mod head;
mod probe;
mod seg;
mod spec;

pub use grid::{
    epoch_order, grid_from_csv, grid_to_csv, one_hot, output_scores, run_grid, run_grid_search, select_best,
    train_adapter, validation_metric, FeatureSet, GridConfig, GridRow, GridSearch, LabeledFeatures, Sgd,
    TrainedAdapter,
};
pub use head::{attentive_pool, attentive_pool_graph, task_loss, AdapterHead, HeadOutput, Pooled, DICE_EPS};
pub use probe::{fit_linear_probe, LinearProbe, ProbeConfig};
pub use seg::{
    bilinear_plan, seg_batch, train_seg_decoder, SegConfig, SegDecoder, SegSearch, SegSet, TrainedSegDecoder,
};
pub use spec::{
    classification_grid, segmentation_grid, AdapterSpec, Pooling, TaskKind, CLS_LRS, CLS_WDS, DEPTHS, SEG_BATCH,
    SEG_ITERATIONS, SEG_LRS, SEG_WARMUP,
};
