//! Receptive-field back-tracing and traced execution for small CNN graphs,
//! with a click-driven segmentation pipeline, click simulation and
//! interactive-segmentation metrics.
//!
//! The typical flow: build or load a [`GraphSpec`], pick an output window,
//! [`backtrace`] it to get per-node regions and crop/pad plans, then
//! [`run_traced`] to evaluate only what the window depends on.

pub mod clicksim;
pub mod error;
pub mod exec;
pub mod flops;
pub mod graph;
pub mod mask;
pub mod metrics;
pub mod pnm;
pub mod rect;
pub mod rft;
pub mod segnet;
pub mod tensor;
pub mod weights;
pub mod zoo;

pub use clicksim::{centroid, dilate, make_bands, sample_clicks, BandSet, SimulatedClick};
pub use error::{Error, Result};
pub use exec::{
    execute_trace, run_full, run_traced, run_with_trace, verify_equivalence, EquivalenceReport,
    ExecResult, Patch,
};
pub use flops::{count_flops, FlopsReport, NodeFlops};
pub use graph::{parse_graph, GraphSpec, NodeSpec, Op, OpKind};
pub use mask::{BinaryMask, Click};
pub use metrics::{iou, miou_t, mta, EvalRecord, MetricsConfig, MetricsReport};
pub use rect::{Margins, Rect};
pub use rft::{backtrace, backtrace_targets, EdgePlan, RegionMap, Trace, TraceStats};
pub use tensor::{ConvAttrs, PointwiseKind, Shape, Tensor};
pub use weights::{WeightStore, TensorRole};
