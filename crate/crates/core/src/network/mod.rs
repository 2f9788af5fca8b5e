//! Toy networks as ordered module lists, evaluated on the reference path,
//! the quantized path and the two cross combinations.

mod attention;
mod backward;
mod build;
mod forward;
mod spec;

pub use attention::AttentionCache;
pub use backward::{backward, flatten_grads, params, set_params, ModuleGrads};
pub use build::{build_char_lm, build_toy_mlp, build_toy_transformer};
pub use forward::{
    forward_dual, forward_quantized, forward_reference, forward_tape, module_forward, relu2,
    rmsnorm, ste_pullback, Cache, ClipSurrogate, DualTrace, Practical, Quantized, Site,
    SiteQuantizer, RMS_EPS,
};
pub use spec::{
    weights_path_for, Attention, ModuleEntry, ModuleKind, ModuleSpec, NetworkManifest, NetworkSpec,
};
