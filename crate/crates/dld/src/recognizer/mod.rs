//! Baseline spotting-recognition network: a strided conv backbone over the
//! whole image, ground-truth RoI cropping to a fixed 8x32 feature window, a
//! recognition conv stack, a bidirectional LSTM context encoder, and an
//! additive-attention LSTM decoder.
//!
//! The same architecture serves as frozen high-res teacher and trainable
//! low-res student; RoI resizing makes every downstream shape independent of
//! the input scale, which is what lets features be distilled across
//! resolutions.

pub mod beam;
pub mod decoder;

use crate::error::{Error, Result};
use crate::params::{Binding, ParamStore};
use crate::rng::Pcg32;
use crate::synthtext::{BoxPx, TokenId, VOCAB};
use crate::tensor::{concat_cols, Elem, Reduce, Tensor};

pub const ROI_H: usize = 8;
pub const ROI_W: usize = 32;
/// Backbone channel progression; layers 1-2 have stride 2 (total stride 4).
pub const BACKBONE_CHANNELS: [usize; 5] = [1, 16, 32, 32, 32];
pub const BACKBONE_STRIDES: [usize; 4] = [2, 2, 1, 1];
pub const BACKBONE_STRIDE: usize = 4;
pub const HEAD_CHANNELS: [usize; 4] = [32, 64, 64, 64];
/// Context-encoder hidden size per direction.
pub const CTX_HIDDEN: usize = 64;
/// Context feature width (both directions).
pub const CTX_DIM: usize = 2 * CTX_HIDDEN;
pub const DEC_EMBED: usize = 64;
pub const DEC_HIDDEN: usize = 128;
pub const MAX_DECODE_LEN: usize = 12;
/// Longest ground-truth transcription the decoder accepts (MAX_DECODE_LEN
/// minus the EOS step).
pub const MAX_TARGET_LEN: usize = MAX_DECODE_LEN - 1;

/// Cropped per-instance features, always [32, 8, 32].
pub struct RoiFeature<E: Elem = f32> {
    pub tensor: Tensor<E>,
    /// Set when the mapped box collapsed below one source cell and was
    /// clamped to a minimum 1x1 extent.
    pub clamped: bool,
}

/// Per-column sequence features after the bidirectional encoder, [32, 128].
pub struct ContextFeature<E: Elem = f32> {
    pub tensor: Tensor<E>,
}

/// Freshly initialized recognizer parameters (seeded, biases zero except the
/// LSTM forget gates, which start open at +1).
pub fn init_params(seed: u64) -> ParamStore<f32> {
    let mut rng = Pcg32::from_seed_tag(seed, "init-recognizer", &[]);
    let mut store = ParamStore::new();
    for i in 0..4 {
        conv_init(&mut store, &mut rng, &format!("backbone.conv{}", i + 1), BACKBONE_CHANNELS[i + 1], BACKBONE_CHANNELS[i]);
    }
    for i in 0..3 {
        conv_init(&mut store, &mut rng, &format!("head.conv{}", i + 1), HEAD_CHANNELS[i + 1], HEAD_CHANNELS[i]);
    }
    for dir in ["fwd", "bwd"] {
        lstm_init(&mut store, &mut rng, &format!("ctx.{dir}"), HEAD_CHANNELS[3], CTX_HIDDEN);
    }
    matrix_init(&mut store, &mut rng, "dec.embed", VOCAB, DEC_EMBED);
    lstm_init(&mut store, &mut rng, "dec.lstm", DEC_EMBED + CTX_DIM, DEC_HIDDEN);
    matrix_init(&mut store, &mut rng, "dec.attn.w_state", DEC_HIDDEN, CTX_DIM);
    matrix_init(&mut store, &mut rng, "dec.attn.w_ctx", CTX_DIM, CTX_DIM);
    vector_init(&mut store, &mut rng, "dec.attn.v", CTX_DIM);
    matrix_init(&mut store, &mut rng, "dec.out.weight", DEC_HIDDEN + CTX_DIM, VOCAB);
    store.insert("dec.out.bias", crate::tensor::Array::zeros(vec![VOCAB]));
    store
}

fn uniform(rng: &mut Pcg32, n: usize, limit: f64) -> Vec<f32> {
    (0..n).map(|_| rng.next_range(-limit, limit) as f32).collect()
}

fn conv_init(store: &mut ParamStore<f32>, rng: &mut Pcg32, name: &str, oc: usize, ic: usize) {
    let fan_in = ic * 9;
    let w = uniform(rng, oc * ic * 9, (6.0 / fan_in as f64).sqrt());
    store.insert(&format!("{name}.weight"), crate::tensor::Array::new(w, vec![oc, ic, 3, 3]));
    store.insert(&format!("{name}.bias"), crate::tensor::Array::zeros(vec![oc]));
}

fn matrix_init(store: &mut ParamStore<f32>, rng: &mut Pcg32, name: &str, rows: usize, cols: usize) {
    let w = uniform(rng, rows * cols, (6.0 / rows as f64).sqrt());
    store.insert(name, crate::tensor::Array::new(w, vec![rows, cols]));
}

fn vector_init(store: &mut ParamStore<f32>, rng: &mut Pcg32, name: &str, n: usize) {
    let w = uniform(rng, n, (1.0 / n as f64).sqrt());
    store.insert(name, crate::tensor::Array::new(w, vec![n]));
}

fn lstm_init(store: &mut ParamStore<f32>, rng: &mut Pcg32, name: &str, input: usize, hidden: usize) {
    let w_ih = uniform(rng, input * 4 * hidden, (1.0 / input as f64).sqrt());
    let w_hh = uniform(rng, hidden * 4 * hidden, (1.0 / hidden as f64).sqrt());
    store.insert(&format!("{name}.w_ih"), crate::tensor::Array::new(w_ih, vec![input, 4 * hidden]));
    store.insert(&format!("{name}.w_hh"), crate::tensor::Array::new(w_hh, vec![hidden, 4 * hidden]));
    let mut bias = vec![0.0f32; 4 * hidden];
    bias[hidden..2 * hidden].fill(1.0);
    store.insert(&format!("{name}.bias"), crate::tensor::Array::new(bias, vec![4 * hidden]));
}

/// One LSTM step; gate layout along the 4H axis is [input, forget, cell,
/// output]. The models run the fused scan; this composed form stays as the
/// independent oracle the encoder tests check against.
#[cfg(test)]
pub(crate) fn lstm_step<E: Elem>(
    b: &Binding<E>,
    prefix: &str,
    x: &Tensor<E>,
    h: &Tensor<E>,
    c: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let xproj = x.matmul(&b.get(&format!("{prefix}.w_ih")))?;
    lstm_step_projected(b, prefix, &xproj, h, c)
}

#[cfg(test)]
pub(crate) fn lstm_step_projected<E: Elem>(
    b: &Binding<E>,
    prefix: &str,
    xproj: &Tensor<E>,
    h: &Tensor<E>,
    c: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let hidden = h.shape()[1];
    let gates = xproj
        .add(&h.matmul(&b.get(&format!("{prefix}.w_hh")))?)?
        .add_bias_rows(&b.get(&format!("{prefix}.bias")))?;
    let i = gates.slice_cols(0, hidden)?.sigmoid();
    let f = gates.slice_cols(hidden, 2 * hidden)?.sigmoid();
    let g = gates.slice_cols(2 * hidden, 3 * hidden)?.tanh();
    let o = gates.slice_cols(3 * hidden, 4 * hidden)?.sigmoid();
    let c_next = f.mul(c)?.add(&i.mul(&g)?)?;
    let h_next = o.mul(&c_next.tanh())?;
    Ok((h_next, c_next))
}

/// Whole-image feature extraction at total stride 4.
pub fn backbone_forward<E: Elem>(b: &Binding<E>, image: &Tensor<E>) -> Result<Tensor<E>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::InvalidShape(format!("backbone expects [1,H,W], got {s:?}")));
    }
    if s[1] < 2 * BACKBONE_STRIDE || s[2] < 2 * BACKBONE_STRIDE {
        return Err(Error::InvalidShape(format!("image {}x{} smaller than the stride footprint", s[1], s[2])));
    }
    let mut x = image.clone();
    for (i, &stride) in BACKBONE_STRIDES.iter().enumerate() {
        let name = format!("backbone.conv{}", i + 1);
        x = x.conv2d_relu(&b.get(&format!("{name}.weight")), Some(&b.get(&format!("{name}.bias"))), stride, 1)?;
    }
    Ok(x)
}

/// Crop a ground-truth box (high-res pixel units) out of a feature map
/// computed at `image_scale`, resized to the fixed RoI window. The box maps
/// by `image_scale / 4` into feature coordinates.
pub fn roi_crop<E: Elem>(features: &Tensor<E>, box_hires: &BoxPx, image_scale: f64) -> Result<RoiFeature<E>> {
    let f = image_scale / BACKBONE_STRIDE as f64;
    let (fh, fw) = (features.shape()[1] as f64, features.shape()[2] as f64);
    let mut y0 = box_hires.y as f64 * f;
    let mut y1 = (box_hires.y + box_hires.h) as f64 * f;
    let mut x0 = box_hires.x as f64 * f;
    let mut x1 = (box_hires.x + box_hires.w) as f64 * f;
    let mut clamped = false;
    if y1 - y0 < 1.0 {
        let c = 0.5 * (y0 + y1);
        let c = c.clamp(0.5, fh - 0.5);
        y0 = c - 0.5;
        y1 = c + 0.5;
        clamped = true;
    }
    if x1 - x0 < 1.0 {
        let c = 0.5 * (x0 + x1);
        let c = c.clamp(0.5, fw - 0.5);
        x0 = c - 0.5;
        x1 = c + 0.5;
        clamped = true;
    }
    let tensor = features.crop_resize((y0, x0, y1, x1), ROI_H, ROI_W)?;
    Ok(RoiFeature { tensor, clamped })
}

/// Recognition conv stack, column mean-pooling, and the bidirectional LSTM.
pub fn encode_context<E: Elem>(b: &Binding<E>, roi: &RoiFeature<E>) -> Result<ContextFeature<E>> {
    let mut x = roi.tensor.clone();
    for i in 0..3 {
        let name = format!("head.conv{}", i + 1);
        x = x.conv2d_relu(&b.get(&format!("{name}.weight")), Some(&b.get(&format!("{name}.bias"))), 1, 1)?;
    }
    // [64, 8, 32] -> column sequence [32, 64]
    let pooled = x.reduce(Reduce::Mean, &[1])?;
    let seq = pooled.transpose2d()?;
    bi_lstm(b, &seq)
}

/// Entry point for verification: run just the bidirectional encoder over an
/// arbitrary [N, C] sequence (hidden size comes from the bound weights).
pub fn bi_lstm_entry<E: Elem>(b: &Binding<E>, seq: &Tensor<E>) -> Result<ContextFeature<E>> {
    bi_lstm(b, seq)
}

pub(crate) fn bi_lstm<E: Elem>(b: &Binding<E>, seq: &Tensor<E>) -> Result<ContextFeature<E>> {
    let hidden = b.get("ctx.fwd.w_hh").shape()[0];
    let run = |prefix: &str, reverse: bool| -> Result<Tensor<E>> {
        // One matmul projects every step's input; the scan itself is a
        // single fused operation.
        let xproj = seq.matmul(&b.get(&format!("{prefix}.w_ih")))?;
        let states = crate::tensor::lstm_scan(
            &xproj,
            &b.get(&format!("{prefix}.w_hh")),
            &b.get(&format!("{prefix}.bias")),
            None,
            reverse,
        )?;
        states.slice_cols(0, hidden)
    };
    let fwd = run("ctx.fwd", false)?;
    let bwd = run("ctx.bwd", true)?;
    let tensor = concat_cols(&fwd, &bwd)?;
    Ok(ContextFeature { tensor })
}

/// Exact full-sequence match after stripping EOS.
pub fn sequence_accuracy(pred: &[TokenId], gt: &[TokenId]) -> u32 {
    let strip = |xs: &[TokenId]| -> Vec<TokenId> {
        xs.iter().copied().filter(|&t| t != crate::synthtext::EOS).collect()
    };
    (strip(pred) == strip(gt)) as u32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{gradcheck, random_array};

    #[test]
    fn zero_image_with_zero_bias_gives_zero_features() {
        let store = init_params(3);
        let b = store.bind(false);
        let img = Tensor::zeros(&[1, 32, 32]);
        let out = backbone_forward(&b, &img).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backbone_output_shape_at_full_resolution() {
        let store = init_params(4);
        let b = store.bind(false);
        let img = Tensor::zeros(&[1, 192, 192]);
        let out = backbone_forward(&b, &img).unwrap();
        assert_eq!(out.shape(), &[32, 48, 48]);
        assert!(backbone_forward(&b, &Tensor::zeros(&[1, 4, 4])).is_err());
    }

    #[test]
    fn roi_shapes_are_scale_invariant() {
        let store = init_params(5);
        let b = store.bind(false);
        let sample = crate::synthtext::render_sample(11, &crate::synthtext::GenConfig::default()).unwrap();
        let bx = sample.instances[0].box_px;
        for (i, &scale) in [0.3f64, 0.5, 0.8, 1.0].iter().enumerate() {
            let img = if scale == 1.0 {
                sample.image_hi.constant()
            } else {
                crate::synthtext::area_downsample(&sample.image_hi, scale).unwrap().constant()
            };
            let feats = backbone_forward(&b, &img).unwrap();
            let roi = roi_crop(&feats, &bx, scale).unwrap();
            assert_eq!(roi.tensor.shape(), &[32, ROI_H, ROI_W], "scale index {i}");
            let ctx = encode_context(&b, &roi).unwrap();
            assert_eq!(ctx.tensor.shape(), &[ROI_W, CTX_DIM]);
        }
    }

    #[test]
    fn constant_features_crop_to_constant() {
        let feats = Tensor::from_vec(vec![0.25f32; 2 * 20 * 20], &[2, 20, 20]).unwrap();
        let roi = roi_crop(&feats, &BoxPx { x: 8, y: 8, w: 40, h: 16 }, 1.0).unwrap();
        assert!(roi.tensor.data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
        assert!(!roi.clamped);
    }

    #[test]
    fn full_map_crop_equals_plain_resize() {
        let mut rng = crate::rng::Pcg32::new(8, 8);
        let data: Vec<f32> = (0..3 * 12 * 12).map(|_| rng.next_range(-1.0, 1.0) as f32).collect();
        let feats = Tensor::from_vec(data, &[3, 12, 12]).unwrap();
        // Box covering the whole 48x48 image at scale 1.0 maps to the whole
        // 12x12 feature map.
        let roi = roi_crop(&feats, &BoxPx { x: 0, y: 0, w: 48, h: 48 }, 1.0).unwrap();
        let direct = feats.bilinear_resize(ROI_H, ROI_W).unwrap();
        assert_eq!(roi.tensor.data(), direct.data());
    }

    #[test]
    fn degenerate_box_is_clamped_and_flagged() {
        let feats = Tensor::from_vec(vec![1.0f32; 100], &[1, 10, 10]).unwrap();
        let roi = roi_crop(&feats, &BoxPx { x: 20, y: 20, w: 2, h: 2 }, 1.0).unwrap();
        assert!(roi.clamped);
        assert_eq!(roi.tensor.shape(), &[1, ROI_H, ROI_W]);
    }

    #[test]
    fn backward_direction_scans_columns_right_to_left() {
        // Direct construction: feed the reversed column sequence to a manual
        // forward scan with the backward-direction weights (forward weights
        // zeroed to isolate the half). The encoder's backward states must be
        // that scan's states in reversed position order.
        let mut store = init_params(6).convert::<f64>();
        for name in ["ctx.fwd.w_ih", "ctx.fwd.w_hh", "ctx.fwd.bias"] {
            let i = store.entries().iter().position(|e| e.name == name).unwrap();
            let n = store.entries()[i].data.len();
            store.set_data(i, vec![0.0; n]);
        }
        let b = store.bind(false);
        let mut rng = crate::rng::Pcg32::new(17, 17);
        let n = 6;
        let width = HEAD_CHANNELS[3];
        let data: Vec<f64> = (0..n * width).map(|_| rng.next_range(-1.0, 1.0)).collect();
        let seq = Tensor::from_vec(data.clone(), &[n, width]).unwrap();
        let ctx = bi_lstm(&b, &seq).unwrap().tensor;

        let mut h = Tensor::<f64>::zeros(&[1, CTX_HIDDEN]);
        let mut c = Tensor::<f64>::zeros(&[1, CTX_HIDDEN]);
        let mut manual: Vec<Vec<f64>> = Vec::new();
        for step in 0..n {
            let t = n - 1 - step;
            let x = Tensor::from_vec(data[t * width..(t + 1) * width].to_vec(), &[1, width]).unwrap();
            let (h2, c2) = lstm_step(&b, "ctx.bwd", &x, &h, &c).unwrap();
            h = h2;
            c = c2;
            manual.push(h.data().to_vec());
        }
        for t in 0..n {
            let expect = &manual[n - 1 - t];
            for j in 0..CTX_HIDDEN {
                let got = ctx.data()[t * CTX_DIM + CTX_HIDDEN + j];
                assert!((got - expect[j]).abs() < 1e-12, "t={t} j={j}");
            }
        }
    }

    #[test]
    fn backbone_gradcheck_passes() {
        let store = init_params(7).convert::<f64>();
        let mut rng = crate::rng::Pcg32::from_seed_tag(7, "gc-backbone", &[]);
        let img = random_array(&mut rng, &[1, 16, 16], 1e-3);
        let report = gradcheck(
            |xs| {
                let b = store.bind(true);
                backbone_forward(&b, &xs[0]).map(|t| t.mean_all())
            },
            &[img],
            1e-3,
        )
        .unwrap();
        assert!(report.passed(1e-4), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn sequence_accuracy_is_exact_match() {
        assert_eq!(sequence_accuracy(&[1, 2, 3], &[1, 2, 3]), 1);
        assert_eq!(sequence_accuracy(&[1, 2, 3, crate::synthtext::EOS], &[1, 2, 3]), 1);
        assert_eq!(sequence_accuracy(&[1, 2, 4], &[1, 2, 3]), 0);
        assert_eq!(sequence_accuracy(&[1, 2], &[1, 2, 3]), 0);
    }
}
