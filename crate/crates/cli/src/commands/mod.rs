pub mod evaluate;
pub mod inspect;
pub mod predict;
pub mod synth;
pub mod train;

pub use evaluate::EvaluateArgs;
pub use inspect::InspectArgs;
pub use predict::PredictArgs;
pub use synth::SynthArgs;
pub use train::TrainArgs;
