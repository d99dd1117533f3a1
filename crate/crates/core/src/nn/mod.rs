//! Parameter handling and the small layer vocabulary the model is built from.

mod layers;
mod params;

pub use layers::{fold_time, unfold_time, BatchNorm2d, ChannelLayerNorm, Conv2d, SqueezeExcite};
pub use params::{Init, Mode, Module, ParamSpec, ParamStore, Session};
