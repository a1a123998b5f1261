//! Analytic FLOP accounting (2 FLOPs per multiply-accumulate) for the
//! recognizer and selector, and the pre-computed per-scale cost table that
//! feeds the selector's compute penalty.
//!
//! Convolutions, fully connected layers, recurrent steps, and attention
//! energies are counted; nonlinearities, pooling, and resampling are not.

use crate::error::{Error, Result};
use crate::recognizer::{
    BACKBONE_CHANNELS, BACKBONE_STRIDES, CTX_DIM, CTX_HIDDEN, DEC_EMBED, DEC_HIDDEN, HEAD_CHANNELS, ROI_W,
};
use crate::selector::{SEL_CHANNELS, SEL_STAGES};
use crate::synthtext::{SpottingSample, CANVAS, VOCAB};
use serde::{Deserialize, Serialize};

pub fn conv_flops(kh: u64, kw: u64, cin: u64, cout: u64, oh: u64, ow: u64) -> u64 {
    2 * kh * kw * cin * cout * oh * ow
}

pub fn linear_flops(input: u64, output: u64) -> u64 {
    2 * input * output
}

pub fn recurrent_step_flops(input: u64, hidden: u64, gates: u64) -> u64 {
    2 * (input * hidden + hidden * hidden) * gates
}

fn conv_out(extent: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (extent + 2 * padding - kernel) / stride + 1
}

/// Backbone cost for a [1, H, W] input.
pub fn backbone_flops(h: usize, w: usize) -> u64 {
    let (mut h, mut w) = (h, w);
    let mut total = 0u64;
    for (i, &stride) in BACKBONE_STRIDES.iter().enumerate() {
        let oh = conv_out(h, 3, stride, 1);
        let ow = conv_out(w, 3, stride, 1);
        total += conv_flops(3, 3, BACKBONE_CHANNELS[i] as u64, BACKBONE_CHANNELS[i + 1] as u64, oh as u64, ow as u64);
        h = oh;
        w = ow;
    }
    total
}

/// Per-instance recognition cost: head convs on the fixed RoI window, the
/// bidirectional context encoder, and `steps` decoder steps (teacher-forced
/// length: target length + 1).
pub fn instance_flops(steps: usize) -> u64 {
    let mut total = 0u64;
    for i in 0..3 {
        total += conv_flops(
            3,
            3,
            HEAD_CHANNELS[i] as u64,
            HEAD_CHANNELS[i + 1] as u64,
            crate::recognizer::ROI_H as u64,
            ROI_W as u64,
        );
    }
    // bidirectional LSTM over the 32 columns
    total += 2 * ROI_W as u64 * recurrent_step_flops(HEAD_CHANNELS[3] as u64, CTX_HIDDEN as u64, 4);
    // attention context projection, once per instance
    total += ROI_W as u64 * linear_flops(CTX_DIM as u64, CTX_DIM as u64);
    // per decoding step: state projection, energies, attended sum, LSTM, output
    let per_step = linear_flops(DEC_HIDDEN as u64, CTX_DIM as u64)
        + ROI_W as u64 * linear_flops(CTX_DIM as u64, 1)
        + linear_flops(ROI_W as u64, CTX_DIM as u64)
        + recurrent_step_flops((DEC_EMBED + CTX_DIM) as u64, DEC_HIDDEN as u64, 4)
        + linear_flops((DEC_HIDDEN + CTX_DIM) as u64, VOCAB as u64);
    total += steps as u64 * per_step;
    total
}

/// Whole-pipeline forward cost for one sample at one scale, decoder run for
/// (target length + 1) steps per instance.
pub fn sample_flops(sample: &SpottingSample, scale: f64) -> u64 {
    let h = (scale * CANVAS as f64).round() as usize;
    let w = h;
    let mut total = backbone_flops(h, w);
    for inst in &sample.instances {
        total += instance_flops(inst.text.len() + 1);
    }
    total
}

/// Selector forward cost on the smallest-scale input (reported, but not part
/// of the per-scale table).
pub fn selector_flops(smallest_scale: f64) -> u64 {
    let mut h = (smallest_scale * CANVAS as f64).round() as usize;
    let mut w = h;
    let mut total = 0u64;
    for stage in 0..SEL_STAGES {
        let cin = if stage == 0 { 1 } else { SEL_CHANNELS } as u64;
        let oh = conv_out(h, 3, 2, 1);
        let ow = conv_out(w, 3, 2, 1);
        total += conv_flops(3, 3, cin, SEL_CHANNELS as u64, oh as u64, ow as u64);
        total += conv_flops(3, 3, SEL_CHANNELS as u64, SEL_CHANNELS as u64, oh as u64, ow as u64);
        // parameter-free averaging shortcut is still multiply-accumulates
        total += conv_flops(3, 3, cin, SEL_CHANNELS as u64, oh as u64, ow as u64);
        h = oh;
        w = ow;
    }
    total + linear_flops(SEL_CHANNELS as u64, 6)
}

/// Pre-computed average forward cost per candidate scale.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlopsTable {
    pub scales: Vec<f64>,
    /// dataset-mean forward FLOPs at each scale
    pub raw: Vec<f64>,
    /// raw / max(raw), in (0, 1]
    pub normalized: Vec<f64>,
}

impl FlopsTable {
    pub fn validate(&self) -> Result<()> {
        if self.raw.len() != self.scales.len() || self.normalized.len() != self.scales.len() {
            return Err(Error::Contract("flops table length mismatch".into()));
        }
        if !self.raw.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Contract("flops table must increase strictly with scale".into()));
        }
        if self.normalized.iter().any(|&v| v <= 0.0 || v > 1.0) {
            return Err(Error::Contract("normalized costs must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Average `sample_flops` over a dataset at every candidate scale.
pub fn precompute_table(samples: &[SpottingSample], scales: &[f64]) -> Result<FlopsTable> {
    if samples.is_empty() || scales.is_empty() {
        return Err(Error::Config("flops table needs samples and scales".into()));
    }
    let raw: Vec<f64> = scales
        .iter()
        .map(|&s| samples.iter().map(|smp| sample_flops(smp, s) as f64).sum::<f64>() / samples.len() as f64)
        .collect();
    let max = raw.iter().cloned().fold(f64::MIN, f64::max);
    let table = FlopsTable { scales: scales.to_vec(), raw: raw.clone(), normalized: raw.iter().map(|v| v / max).collect() };
    table.validate()?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthtext::{render_sample, GenConfig};

    #[test]
    fn hand_counted_layer_costs() {
        // 3x3 conv, 1 -> 1 channel, 4x4 output
        assert_eq!(conv_flops(3, 3, 1, 1, 4, 4), 288);
        // fully connected 10 -> 5: 50 MACs
        assert_eq!(linear_flops(10, 5), 100);
    }

    #[test]
    fn backbone_cost_quarter_at_half_scale() {
        let full = backbone_flops(192, 192) as f64;
        let half = backbone_flops(96, 96) as f64;
        let ratio = half / full;
        assert!((0.23..=0.27).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn table_increases_with_scale_and_normalizes() {
        let config = GenConfig::default();
        let samples: Vec<_> = (0..20).map(|s| render_sample(s, &config).unwrap()).collect();
        let table = precompute_table(&samples, &config.scales).unwrap();
        table.validate().unwrap();
        assert!((table.normalized.last().unwrap() - 1.0).abs() < 1e-12);
        for w in table.raw.windows(2) {
            assert!(w[0] < w[1]);
        }
    }

    #[test]
    fn selector_is_cheaper_than_any_branch() {
        let config = GenConfig::default();
        let sample = render_sample(3, &config).unwrap();
        let sel = selector_flops(0.3);
        let smallest_branch = sample_flops(&sample, 0.3);
        assert!(sel < smallest_branch, "selector {sel} vs branch {smallest_branch}");
    }
}
