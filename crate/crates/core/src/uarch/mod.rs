//! Microarchitecture profiles and the branch predictor.

mod predictor;
mod profile;

pub use predictor::{Direction, PredictorState};
pub use profile::{
    builtin_profile, builtin_profiles, profiles_from_toml, profiles_to_toml, FaultBehavior, ForwardPrediction,
    MicroArchProfile, ProfileError,
};
