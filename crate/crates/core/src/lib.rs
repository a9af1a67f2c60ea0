pub mod tensor;
pub mod dynamics;
pub mod world;
pub mod datagen;
pub mod par;
pub mod denoiser;
pub mod guidance;
pub mod diffusion;
pub mod metrics;
pub mod rollout;
pub mod cli;
