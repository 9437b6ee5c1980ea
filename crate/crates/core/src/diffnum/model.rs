use std::path::Path;

use serde::{Deserialize, Serialize};

use super::encoder::{EncoderConfig, EncoderParams, EncoderVariant};
use super::head::RegressorParams;
use super::tape::{Gradients, Tape, Var};
use super::tensor::DenseTensor;
use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// Width of the joint (chemo, radio) one-hot treatment encoding.
pub const TREATMENT_WIDTH: usize = 4;

/// Encoder plus outcome head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeqModel {
    pub encoder: EncoderParams,
    pub head: RegressorParams,
}

/// Tape variables of a bound [`SeqModel`].
pub struct BoundModel {
    pub encoder: Vec<Var>,
    pub head: Vec<Var>,
}

impl BoundModel {
    pub fn all(&self) -> impl Iterator<Item = Var> + '_ {
        self.encoder.iter().chain(&self.head).copied()
    }
}

impl SeqModel {
    pub fn init(config: EncoderConfig, head_hidden: Option<usize>, seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, &[tag::INIT]);
        let hidden = config.hidden_width;
        let encoder = EncoderParams::init(config, &mut r)?;
        let head = RegressorParams::init(hidden, TREATMENT_WIDTH, head_hidden, &mut r);
        Ok(Self { encoder, head })
    }

    pub fn variant(&self) -> EncoderVariant {
        self.encoder.config.variant
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        BoundModel { encoder: self.encoder.params.bind(tape), head: self.head.params.bind(tape) }
    }

    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundModel {
        BoundModel { encoder: self.encoder.params.bind_frozen(tape), head: self.head.params.bind_frozen(tape) }
    }

    pub fn param_count(&self) -> usize {
        self.encoder.params.count() + self.head.params.count()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut DenseTensor> {
        self.encoder
            .params
            .tensors_mut()
            .iter_mut()
            .chain(self.head.params.tensors_mut().iter_mut())
            .collect()
    }

    /// Gradients for every parameter, in [`SeqModel::tensors_mut`] order.
    pub fn collect_grads(&self, bound: &BoundModel, grads: &Gradients) -> Result<Vec<DenseTensor>> {
        bound
            .all()
            .map(|v| {
                grads
                    .get(v)
                    .cloned()
                    .ok_or_else(|| Error::Contract("model was bound without gradients".into()))
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.params.tensors().iter().chain(self.head.params.tensors()).all(DenseTensor::is_finite)
    }
}

/// Serialized model with the hash of the configuration that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub variant: EncoderVariant,
    pub config_hash: String,
    pub model: SeqModel,
}

impl Checkpoint {
    pub fn new(model: SeqModel, config_hash: String) -> Self {
        Self { variant: model.variant(), config_hash, model }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        if ck.variant != ck.model.variant() {
            return Err(Error::Contract("checkpoint variant tag disagrees with its encoder".into()));
        }
        Ok(ck)
    }

    /// Content hash of the parameters, for run records.
    pub fn digest(&self) -> String {
        crate::content_hash(&self.model)
    }
}
