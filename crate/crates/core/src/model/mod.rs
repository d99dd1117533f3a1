//! The extrapolation network and its building blocks.

pub mod decoder;
pub mod encoder;
pub mod ssm;
pub mod tam;
pub mod tgm;
pub mod ustm;

pub use decoder::{Decoder, Dum, UpStage};
pub use encoder::{BasicLayer, Encoder, FeaturePyramid, SeMode};
pub use ssm::{Ssm, SsmGate, SsmTrace};
pub use tam::{agent_attention, dense_attention, from_tokens, to_tokens, AttentionOutput, ConvEmbed, Tam};
pub use tgm::{Tgm, TgmTrace};
pub use ustm::{Ustm, UstmOutput};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use usfnet_autograd::Var;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Module, ParamSpec, ParamStore, Session};

/// Encoder, bottleneck module and decoder.
#[derive(Debug, Clone)]
pub struct UsfNet {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub ustm: Ustm,
    pub decoder: Decoder,
}

impl UsfNet {
    pub fn new(config: &ModelConfig) -> Self {
        UsfNet {
            config: config.clone(),
            encoder: Encoder::new(config),
            ustm: Ustm::new(config),
            decoder: Decoder::new(config),
        }
    }

    /// Fresh parameters drawn from a seeded ChaCha stream.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        ParamStore::init(&self.param_specs(), &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// `(B, T_in, C, H, W)` -> `(B, T_out, C, H, W)`.
    pub fn forward<'g>(&self, s: &Session<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let sh = x.shape();
        let c = &self.config;
        if sh.len() != 5 || sh[1] != c.in_frames || sh[2] != c.image_channels {
            return Err(Error::Invalid(format!(
                "expected input (B,{},{},H,W), got {sh:?}",
                c.in_frames, c.image_channels
            )));
        }
        if !sh[3].is_multiple_of(16) || !sh[4].is_multiple_of(16) {
            return Err(Error::Invalid(format!("spatial size {}x{} is not divisible by 16", sh[3], sh[4])));
        }
        let pyramid = self.encoder.encode(s, x)?;
        let u = self.ustm.forward(s, &pyramid)?;
        self.decoder.forward(s, u.x_d, u.x_t0)
    }
}

impl Module for UsfNet {
    fn collect(&self, out: &mut Vec<ParamSpec>) {
        self.encoder.collect(out);
        self.ustm.collect(out);
        self.decoder.collect(out);
    }
}
