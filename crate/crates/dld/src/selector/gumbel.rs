//! Gumbel-Softmax sampling over the scale distribution.
//!
//! Adding Gumbel noise g = -log(-log(u)) to log-probabilities makes the
//! argmax an exact categorical draw; the tempered softmax of the same
//! perturbed logits is its differentiable relaxation. Training uses the
//! straight-through combination: the hard one-hot in the forward pass,
//! gradients through the soft weights.

use crate::error::{Error, Result};
use crate::rng::Pcg32;
use crate::tensor::{Elem, Tensor};

const LOG_FLOOR: f64 = 1e-12;

/// Selector output for one image.
pub struct SelectionDecision<E: Elem = f32> {
    /// probability vector emitted by the selector
    pub p: Vec<f64>,
    /// sampled Gumbel noise, one draw per scale
    pub gumbel: Vec<f64>,
    /// tempered softmax of (log p + g), on the graph
    pub h_soft: Tensor<E>,
    /// exact one-hot draw (constant)
    pub h_hard: Tensor<E>,
    /// straight-through combination: forward h_hard, backward h_soft
    pub h_st: Tensor<E>,
    pub tau: f64,
    pub chosen: usize,
}

/// Draw a scale with Gumbel noise at temperature `tau`. `p` must be a
/// k-simplex tensor (entries clamped at 1e-12 before the log).
pub fn gumbel_sample<E: Elem>(p: &Tensor<E>, tau: f64, rng: &mut Pcg32) -> Result<SelectionDecision<E>> {
    if tau <= 0.0 {
        return Err(Error::Contract(format!("temperature {tau} must be positive")));
    }
    if p.shape().len() != 1 {
        return Err(Error::InvalidShape(format!("probability vector expected, got {:?}", p.shape())));
    }
    let k = p.numel();
    let gumbel: Vec<f64> = (0..k).map(|_| -(-rng.next_open01().ln()).ln()).collect();

    let log_p = p.clamp_min(LOG_FLOOR).log()?;
    let g_const = Tensor::from_vec(gumbel.iter().map(|&g| E::from_f64(g)).collect(), &[k])?;
    let perturbed = log_p.add(&g_const)?;
    let h_soft = perturbed.scale(1.0 / tau).softmax(0)?;

    let chosen = perturbed
        .data()
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .expect("non-empty simplex")
        .0;
    let mut hard = vec![E::ZERO; k];
    hard[chosen] = E::ONE;
    let h_hard = Tensor::from_vec(hard, &[k])?;

    // forward: h_hard + (h_soft - h_soft) = h_hard; backward: only h_soft
    // carries gradient.
    let h_st = h_hard.add(&h_soft.sub(&h_soft.detach())?)?;

    Ok(SelectionDecision {
        p: p.data().iter().map(|v| v.to_f64()).collect(),
        gumbel,
        h_soft,
        h_hard,
        h_st,
        tau,
        chosen,
    })
}

/// Deterministic inference-time selection: plain argmax of p, no noise.
pub fn argmax_scale<E: Elem>(p: &Tensor<E>) -> usize {
    p.data().iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).expect("non-empty").0
}

/// Exponential temperature decay: sigma^epoch * tau_init.
pub fn temperature(epoch: u32, tau_init: f64, sigma: f64) -> f64 {
    sigma.powi(epoch as i32) * tau_init
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_matches_paper_constants() {
        assert_eq!(temperature(0, 5.0, 0.965), 5.0);
        assert!((temperature(1, 5.0, 0.965) - 4.825).abs() < 1e-12);
        // 0.965^50 * 5
        assert!((temperature(50, 5.0, 0.965) - 0.842045717645).abs() < 1e-9);
        for e in 1..=60 {
            assert!(temperature(e, 5.0, 0.965) < temperature(e - 1, 5.0, 0.965));
        }
    }

    #[test]
    fn argmax_distribution_matches_categorical() {
        // Gumbel-max exactness at p = [0.5, 0.3, 0.2], 1e5 draws, 3-sigma.
        let p = Tensor::<f32>::from_vec(vec![0.5, 0.3, 0.2], &[3]).unwrap();
        let mut rng = Pcg32::from_seed_tag(99, "gumbel-max", &[]);
        let n = 100_000;
        let mut counts = [0u32; 3];
        for _ in 0..n {
            let d = gumbel_sample(&p, 1.0, &mut rng).unwrap();
            counts[d.chosen] += 1;
        }
        for (i, &prob) in [0.5, 0.3, 0.2].iter().enumerate() {
            let sigma = (n as f64 * prob * (1.0 - prob)).sqrt();
            let diff = (counts[i] as f64 - n as f64 * prob).abs();
            assert!(diff < 3.0 * sigma, "scale {i}: {} draws vs expected {}", counts[i], n as f64 * prob);
        }
    }

    #[test]
    fn low_temperature_concentrates_soft_weights() {
        // Conditioned on the perturbed logits being distinct (top-2 gap at
        // least 0.05 nats), tau = 0.01 drives the soft weights to a near
        // one-hot.
        let p = Tensor::<f32>::from_vec(vec![0.25, 0.35, 0.4], &[3]).unwrap();
        let mut rng = Pcg32::from_seed_tag(7, "gumbel-lowt", &[]);
        let mut checked = 0;
        while checked < 50 {
            let d = gumbel_sample(&p, 0.01, &mut rng).unwrap();
            let mut logits: Vec<f64> =
                d.p.iter().zip(&d.gumbel).map(|(&pv, &g)| pv.max(1e-12).ln() + g).collect();
            logits.sort_by(|a, b| b.partial_cmp(a).unwrap());
            if logits[0] - logits[1] < 0.05 {
                continue;
            }
            let mx = d.h_soft.data().iter().cloned().fold(f32::MIN, f32::max);
            assert!(mx > 0.99, "soft weights not concentrated: {:?}", d.h_soft.data());
            checked += 1;
        }
    }

    #[test]
    fn hard_sample_is_one_hot_matching_soft_argmax() {
        let p = Tensor::<f32>::from_vec(vec![0.1, 0.2, 0.3, 0.4], &[4]).unwrap();
        let mut rng = Pcg32::from_seed_tag(8, "gumbel-onehot", &[]);
        for _ in 0..200 {
            let d = gumbel_sample(&p, 0.7, &mut rng).unwrap();
            let ones: Vec<usize> =
                d.h_hard.data().iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(i, _)| i).collect();
            assert_eq!(ones, vec![d.chosen]);
            let sum: f32 = d.h_hard.data().iter().sum();
            assert_eq!(sum, 1.0);
            // soft weights also sum to one and peak at the chosen index
            let s: f32 = d.h_soft.data().iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
            // straight-through forward equals the hard sample
            assert_eq!(d.h_st.data(), d.h_hard.data());
        }
    }

    #[test]
    fn straight_through_routes_gradient_to_soft_path() {
        let p = Tensor::<f32>::from_vec(vec![0.6, 0.4], &[2]).unwrap().with_grad();
        let mut rng = Pcg32::from_seed_tag(9, "gumbel-st", &[]);
        let d = gumbel_sample(&p, 1.0, &mut rng).unwrap();
        let w = Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        d.h_st.mul(&w).unwrap().sum_all().backward().unwrap();
        let g = p.grad().unwrap();
        assert!(g.iter().any(|&v| v != 0.0), "gradient must reach p through h_soft");
    }

    #[test]
    fn argmax_invariant_under_positive_rescaling() {
        // For fixed noise, rescaling p before normalization shifts all
        // perturbed logits by a constant and leaves the argmax unchanged.
        let mut rng = Pcg32::from_seed_tag(10, "gumbel-scale-invariance", &[]);
        for trial in 0..100 {
            let mut r = Pcg32::from_seed_tag(trial, "gumbel-si-p", &[]);
            let raw: Vec<f64> = (0..5).map(|_| r.next_range(0.05, 1.0)).collect();
            let z: f64 = raw.iter().sum();
            let p1: Vec<f32> = raw.iter().map(|&v| (v / z) as f32).collect();
            let noise: Vec<f64> = (0..5).map(|_| -(-rng.next_open01().ln()).ln()).collect();
            let pick = |p: &[f32]| -> usize {
                p.iter()
                    .zip(&noise)
                    .map(|(&pv, &g)| (pv as f64).max(1e-12).ln() + g)
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                    .unwrap()
                    .0
            };
            let scaled: Vec<f32> = p1.iter().map(|&v| v * 7.5).collect();
            assert_eq!(pick(&p1), pick(&scaled));
        }
    }
}
