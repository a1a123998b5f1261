//! Evaluation under fixed-scale and dynamic-selection policies, plus the
//! teacher/student feature-distance report.

use crate::params::ParamStore;
use crate::recognizer::beam::greedy_decode;
use crate::recognizer::decoder::DecoderScorer;
use crate::recognizer::{backbone_forward, encode_context, roi_crop, sequence_accuracy, MAX_DECODE_LEN};
use crate::selector::flops::{precompute_table, sample_flops};
use crate::selector::{drs_forward, gumbel::argmax_scale};
use crate::synthtext::SpottingSample;
use crate::error::Result;
use rayon::prelude::*;

#[derive(Clone, Debug)]
pub enum Policy<'a> {
    Fixed(f64),
    Dynamic(&'a ParamStore<f32>),
}

#[derive(Clone, Debug)]
pub struct SelectionRow {
    pub sample_id: usize,
    pub p: Vec<f64>,
    pub chosen: usize,
    pub tau: f64,
}

#[derive(Clone, Debug)]
pub struct Metrics {
    pub accuracy: f64,
    /// Accuracy over instances whose glyphs fall below the legibility floor
    /// at the evaluated scale; absent when the stratum is empty.
    pub accuracy_sub_legible: Option<f64>,
    pub n_instances: usize,
    pub n_sub_legible: usize,
    pub mean_flops: f64,
    /// Per-scale selection counts (dynamic policy only).
    pub histogram: Option<Vec<usize>>,
    pub mean_scale: f64,
    pub selections: Option<Vec<SelectionRow>>,
}

struct SampleEval {
    correct: u32,
    total: u32,
    sub_correct: u32,
    sub_total: u32,
    chosen: Option<(usize, Vec<f64>)>,
    scale: f64,
}

/// Greedy-decode every instance of every sample at the policy's scale.
pub fn evaluate(
    student: &ParamStore<f32>,
    samples: &[SpottingSample],
    scales: &[f64],
    policy: &Policy,
) -> Result<Metrics> {
    let evals: Vec<SampleEval> = samples
        .par_iter()
        .enumerate()
        .map(|(_i, sample)| eval_sample(student, sample, scales, policy))
        .collect::<Result<Vec<_>>>()?;

    let total: u32 = evals.iter().map(|e| e.total).sum();
    let correct: u32 = evals.iter().map(|e| e.correct).sum();
    let sub_total: u32 = evals.iter().map(|e| e.sub_total).sum();
    let sub_correct: u32 = evals.iter().map(|e| e.sub_correct).sum();
    let mean_scale = evals.iter().map(|e| e.scale).sum::<f64>() / evals.len() as f64;

    let (histogram, mean_flops, selections) = match policy {
        Policy::Fixed(s) => {
            let mean = samples.iter().map(|smp| sample_flops(smp, *s) as f64).sum::<f64>() / samples.len() as f64;
            (None, mean, None)
        }
        Policy::Dynamic(_) => {
            let mut hist = vec![0usize; scales.len()];
            let mut rows = Vec::with_capacity(evals.len());
            for (i, e) in evals.iter().enumerate() {
                let (chosen, p) = e.chosen.clone().expect("dynamic policy records choices");
                hist[chosen] += 1;
                rows.push(SelectionRow { sample_id: i, p, chosen, tau: 0.0 });
            }
            // Mean cost = sum over scales of histogram share times the
            // table's raw per-scale average.
            let table = precompute_table(samples, scales)?;
            let mean = hist
                .iter()
                .zip(&table.raw)
                .map(|(&n, &t)| n as f64 * t)
                .sum::<f64>()
                / samples.len() as f64;
            (Some(hist), mean, Some(rows))
        }
    };

    Ok(Metrics {
        accuracy: correct as f64 / total.max(1) as f64,
        accuracy_sub_legible: if sub_total > 0 { Some(sub_correct as f64 / sub_total as f64) } else { None },
        n_instances: total as usize,
        n_sub_legible: sub_total as usize,
        mean_flops,
        histogram,
        mean_scale,
        selections,
    })
}

fn eval_sample(
    student: &ParamStore<f32>,
    sample: &SpottingSample,
    scales: &[f64],
    policy: &Policy,
) -> Result<SampleEval> {
    let b = student.bind(false);
    let (scale, chosen) = match policy {
        Policy::Fixed(s) => (*s, None),
        Policy::Dynamic(sel) => {
            let sb = sel.bind(false);
            let p = drs_forward(&sb, &sample.images_lo[0].constant(), scales.len())?;
            let c = argmax_scale(&p);
            (scales[c], Some((c, p.data().iter().map(|&v| v as f64).collect::<Vec<f64>>())))
        }
    };
    let image = image_at(sample, scale, scales)?;
    let feats = backbone_forward(&b, &image)?;
    let mut ev = SampleEval { correct: 0, total: 0, sub_correct: 0, sub_total: 0, chosen, scale };
    for inst in &sample.instances {
        let roi = roi_crop(&feats, &inst.box_px, scale)?;
        let ctx = encode_context(&b, &roi)?;
        let scorer = DecoderScorer { binding: &b, ctx: &ctx };
        let pred = greedy_decode(&scorer, MAX_DECODE_LEN);
        let ok = sequence_accuracy(&pred, &inst.text);
        ev.total += 1;
        ev.correct += ok;
        if inst.sub_legible(scale) {
            ev.sub_total += 1;
            ev.sub_correct += ok;
        }
    }
    Ok(ev)
}

/// The sample's image at `scale`: the stored high-res canvas at 1.0, a
/// precomputed candidate rendering when available, an on-the-fly area
/// downsample otherwise.
pub fn image_at(sample: &SpottingSample, scale: f64, scales: &[f64]) -> Result<crate::tensor::Tensor<f32>> {
    if (scale - 1.0).abs() < 1e-12 {
        return Ok(sample.image_hi.constant());
    }
    if let Some(i) = scales.iter().position(|&s| (s - scale).abs() < 1e-12) {
        if i < sample.images_lo.len() {
            return Ok(sample.images_lo[i].constant());
        }
    }
    Ok(crate::synthtext::area_downsample(&sample.image_hi, scale)?.constant())
}

/// Mean per-element squared distances between teacher features at scale 1.0
/// and student features at `low_scale`, over (RoI, context) positions.
pub fn feature_distance_report(
    teacher: &ParamStore<f32>,
    student: &ParamStore<f32>,
    samples: &[SpottingSample],
    low_scale: f64,
    scales: &[f64],
) -> Result<(f64, f64)> {
    let sums: Vec<(f64, f64, usize)> = samples
        .par_iter()
        .map(|sample| -> Result<(f64, f64, usize)> {
            let tb = teacher.bind(false);
            let sb = student.bind(false);
            let tfeats = backbone_forward(&tb, &sample.image_hi.constant())?;
            let simg = image_at(sample, low_scale, scales)?;
            let sfeats = backbone_forward(&sb, &simg)?;
            let mut droi = 0.0;
            let mut dcon = 0.0;
            for inst in &sample.instances {
                let troi = roi_crop(&tfeats, &inst.box_px, 1.0)?;
                let sroi = roi_crop(&sfeats, &inst.box_px, low_scale)?;
                droi += mean_sq(troi.tensor.data(), sroi.tensor.data());
                let tctx = encode_context(&tb, &troi)?;
                let sctx = encode_context(&sb, &sroi)?;
                dcon += mean_sq(tctx.tensor.data(), sctx.tensor.data());
            }
            Ok((droi, dcon, sample.instances.len()))
        })
        .collect::<Result<Vec<_>>>()?;
    let n: usize = sums.iter().map(|s| s.2).sum();
    let droi: f64 = sums.iter().map(|s| s.0).sum::<f64>() / n.max(1) as f64;
    let dcon: f64 = sums.iter().map(|s| s.1).sum::<f64>() / n.max(1) as f64;
    Ok((droi, dcon))
}

fn mean_sq(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let d = *x as f64 - *y as f64;
        acc += d * d;
    }
    acc / a.len() as f64
}
