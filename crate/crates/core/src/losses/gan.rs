//! Adversarial terms and the three ways of feeding the discriminator.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GanForm {
    /// Log-likelihood form; predictions are probabilities in (0, 1).
    CrossEntropy,
    /// Least-squares form on raw predictions.
    #[default]
    LeastSquares,
}

/// Which batch supplies D's real side and whether D sees the source image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GanMode {
    /// Real side drawn from an independent target batch realB′.
    #[default]
    Unpaired,
    /// D(realB; realA) vs D(G(realA); realA).
    Conditional,
    /// Real side is the paired target batch realB.
    Paired,
}

impl std::fmt::Display for GanMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GanMode::Unpaired => "unpaired",
            GanMode::Conditional => "conditional",
            GanMode::Paired => "paired",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorLoss {
    pub value: f64,
    pub grad_real: Vec<f64>,
    pub grad_fake: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorLoss {
    pub value: f64,
    pub grad_fake: Vec<f64>,
}

fn check_predictions(preds: &[f64], form: GanForm) -> Result<()> {
    if preds.is_empty() {
        return Err(invalid!("empty prediction map"));
    }
    for &p in preds {
        if !p.is_finite() {
            return Err(invalid!("non-finite discriminator prediction {p}"));
        }
        if form == GanForm::CrossEntropy && !(p > 0.0 && p < 1.0) {
            return Err(invalid!(
                "probability {p} outside (0, 1) under cross-entropy form"
            ));
        }
    }
    Ok(())
}

/// `mean log D(real) + mean log(1 − D(fake))`, the quantity D maximizes.
pub fn cgan_objective(d_real: &[f64], d_fake: &[f64]) -> Result<f64> {
    check_predictions(d_real, GanForm::CrossEntropy)?;
    check_predictions(d_fake, GanForm::CrossEntropy)?;
    let real = d_real.iter().map(|p| p.ln()).sum::<f64>() / d_real.len() as f64;
    let fake = d_fake.iter().map(|p| (1.0 - p).ln()).sum::<f64>() / d_fake.len() as f64;
    Ok(real + fake)
}

/// Loss D minimizes: the negated log-likelihood objective, or
/// `mean (D(real) − 1)² + mean D(fake)²`.
pub fn gan_loss_d(d_real: &[f64], d_fake: &[f64], form: GanForm) -> Result<DiscriminatorLoss> {
    check_predictions(d_real, form)?;
    check_predictions(d_fake, form)?;
    let nr = d_real.len() as f64;
    let nf = d_fake.len() as f64;
    Ok(match form {
        GanForm::CrossEntropy => DiscriminatorLoss {
            value: -cgan_objective(d_real, d_fake)?,
            grad_real: d_real.iter().map(|p| -1.0 / (p * nr)).collect(),
            grad_fake: d_fake.iter().map(|p| 1.0 / ((1.0 - p) * nf)).collect(),
        },
        GanForm::LeastSquares => DiscriminatorLoss {
            value: d_real.iter().map(|p| (p - 1.0) * (p - 1.0)).sum::<f64>() / nr
                + d_fake.iter().map(|p| p * p).sum::<f64>() / nf,
            grad_real: d_real.iter().map(|p| 2.0 * (p - 1.0) / nr).collect(),
            grad_fake: d_fake.iter().map(|p| 2.0 * p / nf).collect(),
        },
    })
}

/// Loss G minimizes to push D(fake) toward the real label.
pub fn gan_loss_g(d_fake: &[f64], form: GanForm) -> Result<GeneratorLoss> {
    check_predictions(d_fake, form)?;
    let n = d_fake.len() as f64;
    Ok(match form {
        GanForm::CrossEntropy => GeneratorLoss {
            value: -d_fake.iter().map(|p| p.ln()).sum::<f64>() / n,
            grad_fake: d_fake.iter().map(|p| -1.0 / (p * n)).collect(),
        },
        GanForm::LeastSquares => GeneratorLoss {
            value: d_fake.iter().map(|p| (p - 1.0) * (p - 1.0)).sum::<f64>() / n,
            grad_fake: d_fake.iter().map(|p| 2.0 * (p - 1.0) / n).collect(),
        },
    })
}

/// What D is shown for one update. With `conditioning`, both sides are
/// channel-concatenated as `[conditioning, image]` before D.
#[derive(Clone, Copy, Debug)]
pub struct DiscriminatorFeed<'a> {
    pub real: &'a Tensor,
    pub fake: &'a Tensor,
    pub conditioning: Option<&'a Tensor>,
}

pub fn discriminator_batch<'a>(
    mode: GanMode,
    real_a: &'a Tensor,
    real_b: &'a Tensor,
    real_b_prime: Option<&'a Tensor>,
    gen_out: &'a Tensor,
) -> Result<DiscriminatorFeed<'a>> {
    if real_b.shape() != gen_out.shape() {
        return Err(invalid!(
            "realB {:?} and G(realA) {:?} differ in shape",
            real_b.shape(),
            gen_out.shape()
        ));
    }
    let (n, _, h, w) = real_a.dims4();
    let (gn, _, gh, gw) = gen_out.dims4();
    if (n, h, w) != (gn, gh, gw) {
        return Err(invalid!(
            "realA {:?} incompatible with G(realA) {:?}",
            real_a.shape(),
            gen_out.shape()
        ));
    }
    Ok(match mode {
        GanMode::Conditional => DiscriminatorFeed {
            real: real_b,
            fake: gen_out,
            conditioning: Some(real_a),
        },
        GanMode::Paired => DiscriminatorFeed {
            real: real_b,
            fake: gen_out,
            conditioning: None,
        },
        GanMode::Unpaired => {
            let prime =
                real_b_prime.ok_or_else(|| invalid!("unpaired mode needs a realB' batch"))?;
            if prime.shape()[1..] != real_b.shape()[1..] {
                return Err(invalid!(
                    "realB' {:?} differs from realB {:?}",
                    prime.shape(),
                    real_b.shape()
                ));
            }
            DiscriminatorFeed {
                real: prime,
                fake: gen_out,
                conditioning: None,
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uncertain_discriminator_value() {
        let half = vec![0.5; 9];
        let v = cgan_objective(&half, &half).unwrap();
        assert!((v + 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((v + 1.386294).abs() < 1e-6);
        let d = gan_loss_d(&half, &half, GanForm::CrossEntropy).unwrap();
        assert!((d.value - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn least_squares_extremes() {
        let d = gan_loss_d(&[1.0; 4], &[0.0; 4], GanForm::LeastSquares).unwrap();
        assert_eq!(d.value, 0.0);
        let g = gan_loss_g(&[1.0; 4], GanForm::LeastSquares).unwrap();
        assert_eq!(g.value, 0.0);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range() {
        assert!(gan_loss_d(&[1.0], &[0.5], GanForm::CrossEntropy).is_err());
        assert!(gan_loss_g(&[0.0], GanForm::CrossEntropy).is_err());
        assert!(gan_loss_g(&[f64::NAN], GanForm::LeastSquares).is_err());
        assert!(gan_loss_g(&[1.7], GanForm::LeastSquares).is_ok());
    }

    #[test]
    fn feeding_modes() {
        let a = Tensor::from_vec(&[1, 3, 2, 2], vec![1.0; 12]).unwrap();
        let b = Tensor::from_vec(&[1, 3, 2, 2], vec![2.0; 12]).unwrap();
        let bp = Tensor::from_vec(&[1, 3, 2, 2], vec![3.0; 12]).unwrap();
        let g = Tensor::from_vec(&[1, 3, 2, 2], vec![4.0; 12]).unwrap();

        let u = discriminator_batch(GanMode::Unpaired, &a, &b, Some(&bp), &g).unwrap();
        assert!(std::ptr::eq(u.real, &bp));
        assert!(u.conditioning.is_none());
        assert!(discriminator_batch(GanMode::Unpaired, &a, &b, None, &g).is_err());

        let c = discriminator_batch(GanMode::Conditional, &a, &b, None, &g).unwrap();
        assert!(std::ptr::eq(c.real, &b) && std::ptr::eq(c.conditioning.unwrap(), &a));

        let p = discriminator_batch(GanMode::Paired, &a, &b, None, &g).unwrap();
        let u2 = discriminator_batch(GanMode::Unpaired, &a, &b, Some(&b), &g).unwrap();
        assert_eq!(p.real, u2.real);
        assert_eq!(p.fake, u2.fake);
        assert_eq!(p.conditioning, u2.conditioning);
    }
}
