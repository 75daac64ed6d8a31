//! Minimal dense-network kernel.
//!
//! Provides the small MLP family the rest of the crate needs: batched forward
//! evaluation with optional batch normalization, reverse-mode parameter
//! gradients, forward-mode directional derivatives (JVP), adjoint gradients
//! (VJP), reverse differentiation through a JVP, and the nested
//! forward-over-reverse query `∂/∂x [J(x)ᵀw]·u`. Also houses the AdamW
//! optimizer, the sinusoidal time embedding, and the checkpoint format.
//!
//! Networks in inference mode are immutable pure functions and safe to share
//! across threads; training-mode steps mutate optimizer and normalization
//! state and are single-logical-thread per model.

mod activation;
mod adamw;
mod checkpoint;
mod mlp;
mod time_embed;

pub use activation::Activation;
pub use adamw::AdamW;
pub use checkpoint::{load_tensors, save_tensors, TensorBundle, FORMAT_VERSION, MAGIC};
pub use mlp::{ForwardCache, Gradients, JvpCache, MlpNetwork, Mode};
pub use time_embed::TimeEmbedding;
