//! The matching network: two single-image paths, a cross-image path with
//! matching filters, feature-map fusion, and an fc regression head.

mod check;
mod config;
mod loss;
mod network;
mod params;

pub use check::check_gradients;
pub use config::{Architecture, LayerSpec, McnnConfig, INPUT_CHANNELS, OUTPUT_DIM};
pub use loss::{loss, loss_gradient, MatchOutput};
pub use network::{
    backward, batch_gradients, batch_loss, batch_loss_with_signature, cross_feature_map, cross_filter_components, forward, piece_signature, siamese_forward,
    ForwardCache, Sample,
};
pub use params::McnnParams;

#[cfg(test)]
mod tests;
