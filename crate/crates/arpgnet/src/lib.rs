//! Two-stream sequence classification with graph attention.
//!
//! The crate implements a small, self-contained training and evaluation stack
//! for video-style sequence classification. A convolutional trunk produces a
//! per-frame appearance embedding; a second branch pools the feature map into
//! a grid of patches and runs masked graph attention over a fixed patch
//! relation graph to produce a per-frame relation embedding. The two embedding
//! sequences are fused by graph attention over a 2T-node parallel graph whose
//! edges are limited by a temporal response scope, then pooled over time and
//! classified by a small MLP.
//!
//! Everything runs on a minimal reverse-mode autodiff engine in [`numerics`];
//! no external ML framework is involved. See the `examples/` directory for
//! runnable entry points covering each capability, and the `arpgnet` binary
//! for the command-line pipeline.

pub mod attention;
pub mod cli;
pub mod data;
pub mod evaluation;
pub mod graphs;
pub mod model;
pub mod numerics;
pub mod training;

pub use attention::{positional_encoding, AttentionRecord, GatLayerParams};
pub use data::{generate_synth, Dataset, SynthTaskConfig};
pub use evaluation::{
    ablation_run, bench_inference, compute_metrics, dump_attention, evaluate,
    leave_one_subject_out_plan, loso_run, m_score, stratified_split, AblationReport, BenchReport,
    EvalError, FoldReport, LosoReport, MetricReport,
};
pub use graphs::{build_fusion_graph, build_relation_graph, AdjacencyMatrix, GridSpec};
pub use model::{ArpgNet, ArpgNetConfig, Backbone, Mode, ModelInput, Variant};
pub use numerics::{Scalar, Tape, Tensor, TensorError};
pub use training::{fit, AdamConfig, TrainConfig};
