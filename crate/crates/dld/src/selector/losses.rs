//! Selector supervision: the accuracy term (KL between the teacher's
//! step distributions and the h-weighted mixture of per-scale student
//! distributions) plus the compute penalty, combined as acc + gamma * flops.
//!
//! Student and teacher distributions enter as constants; the only gradient
//! path is through the straight-through selection weights, so these losses
//! train the selector and nothing else.

use crate::error::{Error, Result};
use crate::tensor::{Array, Elem, Tensor};

/// Teacher-forced step distributions of one instance, detached from any
/// graph: probabilities and log-probabilities, both [T, V].
#[derive(Clone, Debug)]
pub struct DistRows {
    pub probs: Array<f32>,
    pub log_probs: Array<f32>,
}

impl DistRows {
    pub fn steps(&self) -> usize {
        self.probs.shape[0]
    }
}

const MIX_FLOOR: f64 = 1e-12;

/// Mean KL(teacher row || mixture row) over every instance and step, where
/// the mixture weights are the straight-through selection weights `h_st`.
pub fn loss_acc<E: Elem>(
    teacher: &[DistRows],
    students: &[Vec<DistRows>],
    h_st: &Tensor<E>,
) -> Result<Tensor<E>> {
    if teacher.len() != students.len() || teacher.is_empty() {
        return Err(Error::Contract(format!(
            "loss_acc with {} teacher and {} student instances",
            teacher.len(),
            students.len()
        )));
    }
    let k = h_st.numel();
    let mut total: Option<Tensor<E>> = None;
    let mut total_steps = 0usize;
    for (t, per_scale) in teacher.iter().zip(students) {
        if per_scale.len() != k {
            return Err(Error::Contract(format!("{} scale branches for k = {k}", per_scale.len())));
        }
        let steps = t.steps();
        if per_scale.iter().any(|d| d.steps() != steps) {
            return Err(Error::Contract("step-count mismatch between teacher and student branches".into()));
        }
        total_steps += steps;

        // mixture = sum_i h_st[i] * Y_i  (per-scale rows are constants)
        let mut mix: Option<Tensor<E>> = None;
        for (i, d) in per_scale.iter().enumerate() {
            let y = constant_cast::<E>(&d.probs);
            let term = h_st.get(i)?.mul(&y)?;
            mix = Some(match mix {
                None => term,
                Some(acc) => acc.add(&term)?,
            });
        }
        let mix = mix.expect("k >= 1");

        // KL(p||q) = sum p*log p - sum p*log q, with teacher terms constant.
        let t_probs = constant_cast::<E>(&t.probs);
        let t_entropy: f64 = t
            .probs
            .data
            .iter()
            .zip(t.log_probs.data.iter())
            .map(|(&p, &lp)| p as f64 * lp as f64)
            .sum();
        let cross = t_probs.mul(&mix.clamp_min(MIX_FLOOR).log()?)?.sum_all();
        let kl = cross.neg().add_scalar(t_entropy);
        total = Some(match total {
            None => kl,
            Some(acc) => acc.add(&kl)?,
        });
    }
    Ok(total.expect("non-empty instances").scale(1.0 / total_steps as f64))
}

fn constant_cast<E: Elem>(a: &Array<f32>) -> Tensor<E> {
    Tensor::from_vec(a.data.iter().map(|&v| E::from_f64(v as f64)).collect(), &a.shape).expect("shape matches data")
}

/// Expected normalized forward cost of the selection.
pub fn loss_flops<E: Elem>(h_st: &Tensor<E>, normalized: &[f64]) -> Result<Tensor<E>> {
    if h_st.numel() != normalized.len() {
        return Err(Error::Contract(format!(
            "{} selection weights for {} table entries",
            h_st.numel(),
            normalized.len()
        )));
    }
    let table = Tensor::from_vec(normalized.iter().map(|&v| E::from_f64(v)).collect(), &[normalized.len()])?;
    Ok(h_st.mul(&table)?.sum_all())
}

/// Combined selector objective acc + gamma * flops.
pub fn loss_drs<E: Elem>(acc: &Tensor<E>, flops: &Tensor<E>, gamma: f64) -> Result<Tensor<E>> {
    if gamma < 0.0 {
        return Err(Error::Contract(format!("gamma {gamma} must be non-negative")));
    }
    acc.add(&flops.scale(gamma))
}
