//! The navigation policy: vocabulary, parameters, autodiff tape and model.

pub mod model;
pub mod params;
pub mod tape;
pub mod vocab;

pub use model::{
    act, build_prompt, build_reflection_prompt, forward, generate_cot, predict_action, ActionDecision,
    ForwardOutput, Generated, PromptSequence, StepOutput, ViewTokens,
};
pub use params::{Gradients, PolicyConfig, PolicyParams};
pub use tape::Tape;
pub use vocab::Vocabulary;
