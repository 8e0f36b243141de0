//! CNN layers and the branch/head network that hosts TML and HLAC layers.

pub mod builders;
pub mod format;
pub mod layers;
mod network;

pub use builders::{
    build_baseline_hlac_net, build_baseline_net, build_cooc_net, build_dhlac_net, Arch, ArchConfig,
};
pub use format::{load_checkpoint, save_checkpoint, spec_from_text, spec_to_text};
pub use layers::{argmax, softmax_xent};
pub use network::{
    ForwardTrace, Gradients, Layer, LayerSpec, Mode, Network, NetworkSpec, Params, ResolvedLayer,
    SampleTrace, Segment, HLAC_FEATURES_PER_CHANNEL,
};
