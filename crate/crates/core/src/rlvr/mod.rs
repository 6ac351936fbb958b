//! Verifiable-reward fine-tuning: balanced resampling, the group-relative
//! objective and pass@k coverage.

pub mod arithmetic;
pub mod grpo;
pub mod objective;
pub mod passk;
pub mod resample;
pub mod verifier;

pub use grpo::{grpo_train_step, GrpoConfig, GrpoStepReport};
pub use objective::{grpo_objective, group_advantages, kl_estimate, GrpoObjective};
pub use passk::pass_at_k;
pub use resample::{balanced_resample, ResampleSpec, Resampled, RolloutRecord};
pub use verifier::{CommandVerifier, ExactMatch, LastNumberMatch, Question, Verifier};
