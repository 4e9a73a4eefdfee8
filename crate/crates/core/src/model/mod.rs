//! Learned components: point encoder, stylizer, image decoder, plus the frozen pyramid.

pub mod decoder;
pub mod encoder;
pub mod init;
pub mod layers;
pub mod pyramid;
pub mod stylizer;

use serde::{Deserialize, Serialize};

pub use decoder::decode;
pub use encoder::{encode, mr_conv, ContentFeatures, EncoderConfig, EncoderGeometry, StageConfig};
pub use layers::{Binder, Mode};
pub use pyramid::{extract_style_features, Pyramid, StyleFeatures};
pub use stylizer::{adaattn, stylize};

use crate::error::{Error, Result};
use crate::tensor::{Archive, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub hidden: usize,
    pub attention: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            hidden: 256,
            attention: 256,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn feature_channels(&self) -> usize {
        self.encoder.out_channels()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let c = self.feature_channels();
        if c % 4 != 0 || self.hidden == 0 || self.attention == 0 {
            return Err(Error::Config(format!(
                "feature channels ({c}) must be a multiple of 4 and widths positive"
            )));
        }
        Ok(())
    }
}

pub const PARAM_PREFIX: &str = "param/";
pub const BUFFER_PREFIX: &str = "buffer/";

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub pyramid: Pyramid,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let seed = config.seed;
        let c = config.feature_channels();
        encoder::init_encoder(&mut params, &config.encoder, seed);
        stylizer::init_stylizer(
            &mut params,
            stylizer::StylizerDims {
                content: c,
                style: pyramid::STYLE_CHANNELS,
                hidden: config.hidden,
                attention: config.attention,
            },
            seed,
        );
        decoder::init_decoder(&mut params, c, seed);
        Ok(Self {
            config,
            params,
            pyramid: Pyramid::default(),
        })
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        for (k, v) in self.params.params() {
            a.insert(format!("{PARAM_PREFIX}{k}"), v.clone());
        }
        for (k, v) in self.params.buffers() {
            a.insert(format!("{BUFFER_PREFIX}{k}"), v.clone());
        }
        a
    }

    /// Loads every parameter and buffer of a freshly initialised model from `archive`.
    pub fn from_archive(config: ModelConfig, archive: &Archive) -> Result<Self> {
        let mut model = Self::new(config)?;
        let mut params = ParamStore::new();
        for (k, v) in model.params.params() {
            let t = archive
                .get(&format!("{PARAM_PREFIX}{k}"))
                .ok_or_else(|| Error::MissingParameter(k.clone()))?;
            if t.shape() != v.shape() {
                return Err(Error::shape("checkpoint", v.shape(), t.shape()));
            }
            params.insert(k.clone(), t.clone());
        }
        for (k, v) in model.params.buffers() {
            let t = archive
                .get(&format!("{BUFFER_PREFIX}{k}"))
                .ok_or_else(|| Error::MissingParameter(k.clone()))?;
            if t.shape() != v.shape() {
                return Err(Error::shape("checkpoint", v.shape(), t.shape()));
            }
            params.insert_buffer(k.clone(), t.clone());
        }
        model.params = params;
        Ok(model)
    }
}
