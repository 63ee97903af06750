//! The learning objective and its optimizer.

pub mod align;
pub mod cmi;
pub mod loss;
pub mod model;
pub mod train;

pub use loss::{
    elbo_terms, grad_check, minimality_kl, objective_and_gradient, per_dimension_sufficiency, sufficiency_terms,
    sufficiency_terms_random_policy, LossBreakdown, SufficiencyTerms,
};
pub use model::{Lambdas, LearnableModel};
pub use train::{train, TrainConfig, TrainOutput};
pub use align::{canonical_alignment, support_f1, Alignment};
