//! Dynamic resolution selector: a lightweight residual conv net that turns
//! the smallest candidate rendering of an image into a categorical
//! distribution over candidate scales.
//!
//! The selector always consumes the smallest-scale image, so its own cost is
//! bounded below every recognition branch it arbitrates between.

pub mod flops;
pub mod gumbel;
pub mod losses;

use crate::error::{Error, Result};
use crate::params::{Binding, ParamStore};
use crate::rng::Pcg32;
use crate::tensor::{Array, Elem, Reduce, Tensor};
use serde::{Deserialize, Serialize};

/// Candidate down-sample scales, strictly increasing, all in (0, 1].
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ScaleSet(pub Vec<f64>);

impl Default for ScaleSet {
    fn default() -> Self {
        ScaleSet(vec![0.3, 0.4, 0.5, 0.6, 0.7, 0.8])
    }
}

impl ScaleSet {
    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::Config("scale set must be non-empty".into()));
        }
        if !self.0.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("scales must be strictly increasing".into()));
        }
        if self.0.iter().any(|&s| s <= 0.0 || s > 1.0) {
            return Err(Error::Config("scales must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn smallest(&self) -> f64 {
        self.0[0]
    }
}

pub const SEL_CHANNELS: usize = 8;
pub const SEL_STAGES: usize = 5;

/// Fresh selector parameters: five residual pairs (ten 3x3 convs), then a
/// fully connected head initialized to zero so the initial distribution over
/// scales is exactly uniform.
pub fn init_params(seed: u64, k: usize) -> ParamStore<f32> {
    let mut rng = Pcg32::from_seed_tag(seed, "init-selector", &[]);
    let mut store = ParamStore::new();
    for stage in 0..SEL_STAGES {
        let cin = if stage == 0 { 1 } else { SEL_CHANNELS };
        conv_init(&mut store, &mut rng, &format!("sel.stage{stage}.a"), SEL_CHANNELS, cin);
        conv_init(&mut store, &mut rng, &format!("sel.stage{stage}.b"), SEL_CHANNELS, SEL_CHANNELS);
    }
    store.insert("sel.fc.weight", Array::zeros(vec![SEL_CHANNELS, k]));
    store.insert("sel.fc.bias", Array::zeros(vec![k]));
    store
}

fn conv_init(store: &mut ParamStore<f32>, rng: &mut Pcg32, name: &str, oc: usize, ic: usize) {
    let fan_in = ic * 9;
    let limit = (6.0 / fan_in as f64).sqrt();
    let w: Vec<f32> = (0..oc * ic * 9).map(|_| rng.next_range(-limit, limit) as f32).collect();
    store.insert(&format!("{name}.weight"), Array::new(w, vec![oc, ic, 3, 3]));
    store.insert(&format!("{name}.bias"), Array::zeros(vec![oc]));
}

/// Parameter-free downsampling shortcut: a constant 3x3 averaging kernel per
/// channel pair, stride 2, matching the residual branch extents; missing
/// input channels (first stage) stay zero.
fn shortcut_kernel<E: Elem>(cin: usize, cout: usize) -> Tensor<E> {
    let mut w = vec![E::ZERO; cout * cin * 9];
    let ninth = E::from_f64(1.0 / 9.0);
    for o in 0..cout.min(cin) {
        for t in 0..9 {
            w[(o * cin + o) * 9 + t] = ninth;
        }
    }
    Tensor::from_vec(w, &[cout, cin, 3, 3]).expect("static shape")
}

/// Probability vector over the candidate scales for one low-res image.
pub fn drs_forward<E: Elem>(b: &Binding<E>, image_lo: &Tensor<E>, k: usize) -> Result<Tensor<E>> {
    let s = image_lo.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::InvalidShape(format!("selector expects [1,H,W], got {s:?}")));
    }
    let mut x = image_lo.clone();
    for stage in 0..SEL_STAGES {
        let cin = x.shape()[0];
        let name = format!("sel.stage{stage}");
        let a = x.conv2d_relu(&b.get(&format!("{name}.a.weight")), Some(&b.get(&format!("{name}.a.bias"))), 2, 1)?;
        let y = a.conv2d(&b.get(&format!("{name}.b.weight")), Some(&b.get(&format!("{name}.b.bias"))), 1, 1)?;
        let skip = x.conv2d(&shortcut_kernel(cin, SEL_CHANNELS), None, 2, 1)?;
        x = y.add(&skip)?.relu();
    }
    let pooled = x.reduce(Reduce::Mean, &[1, 2])?.reshape(&[1, SEL_CHANNELS])?;
    let logits = pooled.matmul(&b.get("sel.fc.weight"))?.add_bias_rows(&b.get("sel.fc.bias"))?;
    logits.reshape(&[k])?.softmax(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{gradcheck, random_array};

    #[test]
    fn zero_head_gives_uniform_distribution() {
        let store = init_params(1, 6);
        let b = store.bind(false);
        let img = Tensor::from_vec(vec![0.35; 58 * 58], &[1, 58, 58]).unwrap();
        let p = drs_forward(&b, &img, 6).unwrap();
        for v in p.data() {
            assert!((v - 1.0 / 6.0).abs() < 1e-6);
        }
    }

    #[test]
    fn probabilities_sum_to_one_on_random_inputs() {
        let mut store = init_params(2, 6);
        // Fill the head so outputs are non-trivial.
        let mut rng = Pcg32::new(5, 5);
        let i = store.entries().iter().position(|e| e.name == "sel.fc.weight").unwrap();
        store.set_data(i, (0..SEL_CHANNELS * 6).map(|_| rng.next_range(-0.5, 0.5) as f32).collect());
        let b = store.bind(false);
        for s in 0..100 {
            let mut r = Pcg32::from_seed_tag(s, "sel-input", &[]);
            let data: Vec<f32> = (0..58 * 58).map(|_| r.next_range(0.0, 1.0) as f32).collect();
            let p = drs_forward(&b, &Tensor::from_vec(data, &[1, 58, 58]).unwrap(), 6).unwrap();
            let sum: f32 = p.data().iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn selector_gradcheck_passes() {
        let mut store = init_params(3, 4).convert::<f64>();
        let mut rng = Pcg32::new(6, 6);
        let i = store.entries().iter().position(|e| e.name == "sel.fc.weight").unwrap();
        store.set_data(i, (0..SEL_CHANNELS * 4).map(|_| rng.next_range(-0.5, 0.5)).collect());
        let mut gc_rng = Pcg32::from_seed_tag(3, "gc-selector", &[]);
        let img = random_array(&mut gc_rng, &[1, 8, 8], 1e-3);
        let report = gradcheck(
            |xs| {
                let b = store.bind(true);
                // Weight the distribution so every entry matters.
                let p = drs_forward(&b, &xs[0], 4)?;
                let w = Tensor::from_vec(vec![0.1, 0.4, 0.9, 0.2], &[4]).unwrap();
                p.mul(&w)?.sum_all().log()
            },
            &[img],
            1e-3,
        )
        .unwrap();
        assert!(report.passed(1e-4), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn selector_stays_lightweight() {
        let sel = init_params(0, 6);
        let rec = crate::recognizer::init_params(0);
        assert!(
            (sel.numel() as f64) < 0.05 * rec.numel() as f64,
            "selector {} vs recognizer {}",
            sel.numel(),
            rec.numel()
        );
    }
}
