//! Minimal differentiable layer and the two-modality encoder network.

mod checkpoint;
mod model;
mod tape;
mod tensor;

pub use checkpoint::Checkpoint;
pub use model::{
    concat_embeddings, encoder_forward, project, spell_logits, Encoder, FeatureNorm, GruCell,
    HeadKind, Inference, Linear, Modality, Model, ModelConfig, ParamStore, ResidualHead, SpellHead,
    TcnBlock, UtteranceVars,
};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
