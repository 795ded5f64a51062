//! Loss terms of the coarsely aligned translation objective.

mod gan;
mod l1;
mod nce;

pub use gan::{
    cgan_objective, discriminator_batch, gan_loss_d, gan_loss_g, DiscriminatorFeed,
    DiscriminatorLoss, GanForm, GanMode, GeneratorLoss,
};
pub use l1::{
    l1_misalign, l1_misalign_map, l1_misalign_with_grad, l1_plain, l1_plain_with_grad, l1_star,
    l1_star_with_grad, window_indices, WindowSpec,
};
pub use nce::{
    nce_cross_entropy, patchnce_star, patchnce_star_from_taps, patchnce_star_on_tape,
    patchnce_star_on_taps, patchnce_star_with_grad, sample_locations, tap_tensors, NceConfig,
    NceOnTape, NceTerm, PatchEmbedder,
};

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveWeights {
    pub lambda_l1: f64,
    pub lambda_nce: f64,
    pub gan_mode: GanMode,
    pub gan_form: GanForm,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        ObjectiveWeights {
            lambda_l1: 10.0,
            lambda_nce: 1.0,
            gan_mode: GanMode::Unpaired,
            gan_form: GanForm::LeastSquares,
        }
    }
}

/// Generator-side scalar terms of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GeneratorTerms {
    pub gan_g: f64,
    pub l1_star: f64,
    pub patchnce_star: f64,
}

/// `gan_g + λ1·l1_star + λ2·patchnce_star`
pub fn capit_objective(terms: GeneratorTerms, weights: &ObjectiveWeights) -> f64 {
    terms.gan_g + weights.lambda_l1 * terms.l1_star + weights.lambda_nce * terms.patchnce_star
}
