//! Forward diffusion, the frozen toy DiT, synthetic latents, and activation
//! extraction.

mod dit;
mod embedding;
mod extract;
mod schedule;
mod source;
mod world;

pub use dit::{
    dit_forward, dit_forward_with, init_toy_dit, Capture, CapturePoint, HookSpec, Intervention,
    ToyDiTConfig, ToyDiTParams,
};
pub use embedding::timestep_embedding;
pub use extract::{
    extract_activations, prepare_sample, ExtractConfig, ExtractedStep, Extractor, PreparedSample,
    TimestepSpec,
};
pub use schedule::{add_noise, diffusion_loss, DiffusionSample, NoiseSchedule, ScheduleKind};
pub use source::{SourceConfig, SyntheticLatent, SyntheticLatentSource};
pub use world::{ScheduleConfig, World, WorldConfig};
