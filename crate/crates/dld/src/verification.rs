//! Finite-difference verification battery: every registered differentiable
//! operation plus the composed recognizer and selector pipelines, each on
//! several seeded random inputs. Run by `dld gradcheck` and by the
//! acceptance suite.

use crate::error::Result;
use crate::params::ParamStore;
use crate::recognizer::decoder::nll_of_target;
use crate::recognizer::{backbone_forward, bi_lstm_entry, encode_context, roi_crop};
use crate::rng::Pcg32;
use crate::selector::drs_forward;
use crate::selector::losses::{loss_acc, loss_drs, loss_flops, DistRows};
use crate::synthtext::BoxPx;
use crate::tensor::gradcheck::{gradcheck_sampled, random_array, GradcheckReport};
use crate::tensor::{concat_cols, stack_rows, Array, Reduce, Tensor};

pub const EPS: f64 = 1e-3;
pub const TOL: f64 = 1e-4;

#[derive(Debug)]
pub struct SuiteCase {
    pub name: String,
    pub seed: u64,
    pub report: GradcheckReport,
}

impl SuiteCase {
    pub fn passed(&self) -> bool {
        self.report.passed(TOL)
    }
}

type CaseFn = Box<dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>>;

fn weighted_scalar(t: Tensor<f64>, seed: u64) -> Result<Tensor<f64>> {
    // Random fixed projection to a scalar so every output coordinate
    // influences the check.
    let mut rng = Pcg32::from_seed_tag(seed, "gc-project", &[]);
    let w: Vec<f64> = (0..t.numel()).map(|_| rng.next_range(-1.0, 1.0)).collect();
    let n = t.numel();
    t.reshape(&[n])?.mul(&Tensor::from_vec(w, &[n])?)?.sum_all().scale(1.0)._ok()
}

trait OkExt<T> {
    fn _ok(self) -> Result<T>;
}
impl<T> OkExt<T> for T {
    fn _ok(self) -> Result<T> {
        Ok(self)
    }
}

/// All per-operation checks; each returns (name, input shapes, function).
fn op_cases(seed: u64) -> Vec<(String, Vec<Vec<usize>>, CaseFn)> {
    let mut cases: Vec<(String, Vec<Vec<usize>>, CaseFn)> = Vec::new();
    let mut push = |name: &str, shapes: Vec<Vec<usize>>, f: CaseFn| {
        cases.push((name.to_string(), shapes, f));
    };

    push("add", vec![vec![3, 4], vec![3, 4]], Box::new(move |xs| weighted_scalar(xs[0].add(&xs[1])?, seed)));
    push("add_scalar_broadcast", vec![vec![5], vec![1]], Box::new(move |xs| weighted_scalar(xs[0].add(&xs[1])?, seed)));
    push("sub", vec![vec![3, 4], vec![3, 4]], Box::new(move |xs| weighted_scalar(xs[0].sub(&xs[1])?, seed)));
    push("mul", vec![vec![3, 4], vec![3, 4]], Box::new(move |xs| weighted_scalar(xs[0].mul(&xs[1])?, seed)));
    push("mul_scalar_broadcast", vec![vec![1], vec![6]], Box::new(move |xs| weighted_scalar(xs[0].mul(&xs[1])?, seed)));
    push("relu", vec![vec![4, 4]], Box::new(move |xs| weighted_scalar(xs[0].relu(), seed)));
    push("tanh", vec![vec![4, 4]], Box::new(move |xs| weighted_scalar(xs[0].tanh(), seed)));
    push("sigmoid", vec![vec![4, 4]], Box::new(move |xs| weighted_scalar(xs[0].sigmoid(), seed)));
    push("exp", vec![vec![4, 4]], Box::new(move |xs| weighted_scalar(xs[0].exp(), seed)));
    push("log", vec![vec![4, 4]], Box::new(move |xs| weighted_scalar(xs[0].add_scalar(2.0).log()?, seed)));
    push("neg", vec![vec![7]], Box::new(move |xs| weighted_scalar(xs[0].neg(), seed)));
    push("abs", vec![vec![7]], Box::new(move |xs| weighted_scalar(xs[0].abs(), seed)));
    push("scale_affine", vec![vec![7]], Box::new(move |xs| weighted_scalar(xs[0].scale(1.7).add_scalar(0.3), seed)));
    push("clamp_min", vec![vec![9]], Box::new(move |xs| weighted_scalar(xs[0].clamp_min(0.25), seed)));
    push("matmul", vec![vec![3, 4], vec![4, 2]], Box::new(move |xs| weighted_scalar(xs[0].matmul(&xs[1])?, seed)));
    push(
        "conv2d",
        vec![vec![2, 5, 5], vec![3, 2, 3, 3], vec![3]],
        Box::new(move |xs| weighted_scalar(xs[0].conv2d(&xs[1], Some(&xs[2]), 1, 1)?, seed)),
    );
    push(
        "conv2d_relu_fused",
        vec![vec![2, 5, 5], vec![3, 2, 3, 3], vec![3]],
        Box::new(move |xs| weighted_scalar(xs[0].conv2d_relu(&xs[1], Some(&xs[2]), 1, 1)?, seed)),
    );
    push(
        "conv2d_strided",
        vec![vec![2, 6, 6], vec![3, 2, 3, 3]],
        Box::new(move |xs| weighted_scalar(xs[0].conv2d(&xs[1], None, 2, 0)?, seed)),
    );
    push("reduce_sum", vec![vec![3, 4]], Box::new(move |xs| weighted_scalar(xs[0].reduce(Reduce::Sum, &[1])?, seed)));
    push("reduce_mean", vec![vec![3, 4]], Box::new(move |xs| weighted_scalar(xs[0].reduce(Reduce::Mean, &[0])?, seed)));
    push("reduce_max", vec![vec![3, 4]], Box::new(move |xs| weighted_scalar(xs[0].reduce(Reduce::Max, &[1])?, seed)));
    push("sum_all", vec![vec![3, 4]], Box::new(move |_xs| Ok(_xs[0].sum_all())));
    push("mean_all", vec![vec![3, 4]], Box::new(move |_xs| Ok(_xs[0].mean_all())));
    push("softmax", vec![vec![2, 7]], Box::new(move |xs| weighted_scalar(xs[0].softmax(1)?, seed)));
    push("log_softmax", vec![vec![7]], Box::new(move |xs| weighted_scalar(xs[0].log_softmax(0)?, seed)));
    push(
        "bilinear_resize",
        vec![vec![1, 4, 4]],
        Box::new(move |xs| weighted_scalar(xs[0].bilinear_resize(2, 3)?, seed)),
    );
    push(
        "crop_resize",
        vec![vec![2, 6, 6]],
        Box::new(move |xs| weighted_scalar(xs[0].crop_resize((0.7, 1.2, 4.9, 5.3), 3, 4)?, seed)),
    );
    push(
        "add_bias_chw",
        vec![vec![3, 2, 2], vec![3]],
        Box::new(move |xs| weighted_scalar(xs[0].add_bias_chw(&xs[1])?, seed)),
    );
    push(
        "add_bias_rows",
        vec![vec![3, 4], vec![4]],
        Box::new(move |xs| weighted_scalar(xs[0].add_bias_rows(&xs[1])?, seed)),
    );
    push("transpose2d", vec![vec![3, 5]], Box::new(move |xs| weighted_scalar(xs[0].transpose2d()?, seed)));
    push("reshape", vec![vec![3, 4]], Box::new(move |xs| weighted_scalar(xs[0].reshape(&[2, 6])?, seed)));
    push(
        "stack_rows",
        vec![vec![4], vec![4], vec![4]],
        Box::new(move |xs| weighted_scalar(stack_rows(&[xs[0].clone(), xs[1].clone(), xs[2].clone()])?, seed)),
    );
    push(
        "concat_cols",
        vec![vec![3, 2], vec![3, 4]],
        Box::new(move |xs| weighted_scalar(concat_cols(&xs[0], &xs[1])?, seed)),
    );
    push("slice_rows", vec![vec![5, 3]], Box::new(move |xs| weighted_scalar(xs[0].slice_rows(1, 4)?, seed)));
    push("slice_cols", vec![vec![3, 6]], Box::new(move |xs| weighted_scalar(xs[0].slice_cols(2, 5)?, seed)));
    push("row", vec![vec![4, 5]], Box::new(move |xs| weighted_scalar(xs[0].row(2)?, seed)));
    push("get", vec![vec![6]], Box::new(move |xs| Ok(xs[0].get(3)?.scale(2.5))));
    push(
        "gather_rows",
        vec![vec![4, 5]],
        Box::new(move |xs| weighted_scalar(xs[0].gather_rows(&[1, 0, 4, 2])?, seed)),
    );
    // fused recurrent scan, both directions, with and without initial state
    push(
        "lstm_scan",
        vec![vec![3, 8], vec![2, 8], vec![8]],
        Box::new(move |xs| weighted_scalar(crate::tensor::lstm_scan(&xs[0], &xs[1], &xs[2], None, false)?, seed)),
    );
    push(
        "lstm_scan_reverse",
        vec![vec![3, 8], vec![2, 8], vec![8]],
        Box::new(move |xs| weighted_scalar(crate::tensor::lstm_scan(&xs[0], &xs[1], &xs[2], None, true)?, seed)),
    );
    push(
        "lstm_scan_with_init",
        vec![vec![2, 8], vec![2, 8], vec![8], vec![1, 2], vec![1, 2]],
        Box::new(move |xs| {
            weighted_scalar(crate::tensor::lstm_scan(&xs[0], &xs[1], &xs[2], Some((&xs[3], &xs[4])), false)?, seed)
        }),
    );
    push(
        "attn_energies",
        vec![vec![4, 3], vec![3], vec![3]],
        Box::new(move |xs| weighted_scalar(crate::tensor::attn_energies(&xs[0], &xs[1], &xs[2])?, seed)),
    );
    cases
}

/// Downsized parameter stores keep the composed-pipeline finite differences
/// fast while exercising exactly the shipped model code.
fn mini_lstm_store(rng: &mut Pcg32, input: usize, hidden: usize) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    let mat = |store: &mut ParamStore<f64>, name: &str, r: usize, c: usize, rng: &mut Pcg32| {
        let data: Vec<f64> = (0..r * c).map(|_| rng.next_range(-0.5, 0.5)).collect();
        store.insert(name, Array::new(data, vec![r, c]));
    };
    for dir in ["fwd", "bwd"] {
        mat(&mut store, &format!("ctx.{dir}.w_ih"), input, 4 * hidden, rng);
        mat(&mut store, &format!("ctx.{dir}.w_hh"), hidden, 4 * hidden, rng);
        let bias: Vec<f64> = (0..4 * hidden).map(|_| rng.next_range(-0.1, 0.1)).collect();
        store.insert(&format!("ctx.{dir}.bias"), Array::new(bias, vec![4 * hidden]));
    }
    store
}

fn mini_decoder_store(rng: &mut Pcg32, vocab: usize, embed: usize, ctx_dim: usize, hidden: usize) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    let mat = |store: &mut ParamStore<f64>, name: &str, r: usize, c: usize, rng: &mut Pcg32| {
        let data: Vec<f64> = (0..r * c).map(|_| rng.next_range(-0.5, 0.5)).collect();
        store.insert(name, Array::new(data, vec![r, c]));
    };
    mat(&mut store, "dec.embed", vocab, embed, rng);
    mat(&mut store, "dec.lstm.w_ih", embed + ctx_dim, 4 * hidden, rng);
    mat(&mut store, "dec.lstm.w_hh", hidden, 4 * hidden, rng);
    let bias: Vec<f64> = (0..4 * hidden).map(|_| rng.next_range(-0.1, 0.1)).collect();
    store.insert("dec.lstm.bias", Array::new(bias, vec![4 * hidden]));
    mat(&mut store, "dec.attn.w_state", hidden, ctx_dim, rng);
    mat(&mut store, "dec.attn.w_ctx", ctx_dim, ctx_dim, rng);
    let v: Vec<f64> = (0..ctx_dim).map(|_| rng.next_range(-0.5, 0.5)).collect();
    store.insert("dec.attn.v", Array::new(v, vec![ctx_dim]));
    mat(&mut store, "dec.out.weight", hidden + ctx_dim, vocab, rng);
    let ob: Vec<f64> = (0..vocab).map(|_| rng.next_range(-0.1, 0.1)).collect();
    store.insert("dec.out.bias", Array::new(ob, vec![vocab]));
    store
}

/// Run the whole battery: every op case and the composed pipelines, each at
/// `seeds_per_case` seeded inputs (the acceptance gate uses 5).
pub fn gradcheck_suite(seeds_per_case: u64) -> Result<Vec<SuiteCase>> {
    let mut results = Vec::new();

    for seed in 0..seeds_per_case {
        for (name, shapes, f) in op_cases(seed) {
            let mut rng = Pcg32::from_seed_tag(seed, &format!("gc-{name}"), &[]);
            let inputs: Vec<Array<f64>> = shapes.iter().map(|s| random_array(&mut rng, s, EPS)).collect();
            let report = gradcheck_sampled(&f, &inputs, EPS, 64, seed)?;
            results.push(SuiteCase { name: name.clone(), seed, report });
        }
    }

    for seed in 0..seeds_per_case {
        // Backbone at full width on a small image, gradient w.r.t. the image.
        let store = crate::recognizer::init_params(1000 + seed).convert::<f64>();
        let mut rng = Pcg32::from_seed_tag(seed, "gc-pipe-backbone", &[]);
        let img = random_array(&mut rng, &[1, 16, 16], EPS);
        let report = gradcheck_sampled(
            |xs| {
                let b = store.bind(true);
                weighted_scalar(backbone_forward(&b, &xs[0])?, seed)
            },
            &[img],
            EPS,
            48,
            seed,
        )?;
        results.push(SuiteCase { name: "pipeline.backbone".into(), seed, report });

        // Whole recognizer at full width: image -> backbone -> RoI crop ->
        // context encoder -> teacher-forced decoder NLL, sampled coords.
        let mut rng = Pcg32::from_seed_tag(seed, "gc-pipe-full", &[]);
        let img = random_array(&mut rng, &[1, 24, 24], EPS);
        let report = gradcheck_sampled(
            |xs| {
                let b = store.bind(true);
                let feats = backbone_forward(&b, &xs[0])?;
                let roi = roi_crop(&feats, &BoxPx { x: 2, y: 6, w: 18, h: 10 }, 1.0)?;
                let ctx = encode_context(&b, &roi)?;
                nll_of_target(&b, &ctx, &[3, 17, 5], true, true)
            },
            &[img],
            EPS,
            32,
            seed,
        )?;
        results.push(SuiteCase { name: "pipeline.recognizer".into(), seed, report });

        // Downsized bidirectional encoder, full finite differences.
        let mut rng = Pcg32::from_seed_tag(seed, "gc-pipe-bilstm", &[]);
        let mini = mini_lstm_store(&mut rng, 5, 3);
        let seq = random_array(&mut rng, &[4, 5], EPS);
        let report = gradcheck_sampled(
            |xs| {
                let b = mini.bind(true);
                weighted_scalar(bi_lstm_entry(&b, &xs[0])?.tensor, seed)
            },
            &[seq],
            EPS,
            usize::MAX,
            seed,
        )?;
        results.push(SuiteCase { name: "pipeline.context_encoder".into(), seed, report });

        // Downsized attention decoder (full vocabulary, tiny dims), gradient
        // w.r.t. the context feature.
        let mut rng = Pcg32::from_seed_tag(seed, "gc-pipe-decoder", &[]);
        let dec = mini_decoder_store(&mut rng, crate::synthtext::VOCAB, 3, 4, 6);
        let ctx_in = random_array(&mut rng, &[5, 4], EPS);
        let report = gradcheck_sampled(
            |xs| {
                let b = dec.bind(true);
                let ctx = crate::recognizer::ContextFeature { tensor: xs[0].clone() };
                nll_of_target(&b, &ctx, &[1, 2], true, true)
            },
            &[ctx_in],
            EPS,
            usize::MAX,
            seed,
        )?;
        results.push(SuiteCase { name: "pipeline.decoder".into(), seed, report });

        // Selector pipeline through the tempered-softmax relaxation and both
        // selector losses, gradient w.r.t. the input image.
        let sel = crate::selector::init_params(2000 + seed, 4).convert::<f64>();
        let sel = {
            // Non-zero head so the pipeline has informative gradients.
            let mut s = sel;
            let i = s.entries().iter().position(|e| e.name == "sel.fc.weight").unwrap();
            let mut rng = Pcg32::from_seed_tag(seed, "gc-selhead", &[]);
            let n = s.entries()[i].data.len();
            s.set_data(i, (0..n).map(|_| rng.next_range(-0.5, 0.5)).collect());
            s
        };
        let mut rng = Pcg32::from_seed_tag(seed, "gc-pipe-selector", &[]);
        let img = random_array(&mut rng, &[1, 12, 12], EPS);
        let noise: Vec<f64> = (0..4).map(|_| -(-rng.next_open01().ln()).ln()).collect();
        let teacher = fixed_dist_rows(seed, 2, 6);
        let branches: Vec<DistRows> = (0..4).map(|i| fixed_dist_rows(seed + 1 + i as u64, 2, 6)).collect();
        let report = gradcheck_sampled(
            |xs| {
                let b = sel.bind(true);
                let p = drs_forward(&b, &xs[0], 4)?;
                let g = Tensor::from_vec(noise.clone(), &[4])?;
                let h_soft = p.clamp_min(1e-12).log()?.add(&g)?.scale(1.0 / 1.3).softmax(0)?;
                let acc = loss_acc(&[teacher.clone()], &[branches.clone()], &h_soft)?;
                let fl = loss_flops(&h_soft, &[0.55, 0.66, 0.8, 1.0])?;
                loss_drs(&acc, &fl, 0.1)
            },
            &[img],
            EPS,
            usize::MAX,
            seed,
        )?;
        results.push(SuiteCase { name: "pipeline.selector".into(), seed, report });
    }

    Ok(results)
}

fn fixed_dist_rows(seed: u64, steps: usize, vocab: usize) -> DistRows {
    let mut rng = Pcg32::from_seed_tag(seed, "gc-dist", &[]);
    let mut probs = Vec::with_capacity(steps * vocab);
    for _ in 0..steps {
        let raw: Vec<f64> = (0..vocab).map(|_| rng.next_range(0.05, 1.0)).collect();
        let z: f64 = raw.iter().sum();
        probs.extend(raw.iter().map(|&v| (v / z) as f32));
    }
    let log: Vec<f32> = probs.iter().map(|&p| p.ln()).collect();
    DistRows {
        probs: Array::new(probs, vec![steps, vocab]),
        log_probs: Array::new(log, vec![steps, vocab]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_seed_suite_is_clean() {
        let results = gradcheck_suite(1).unwrap();
        assert!(results.len() > 30);
        for r in &results {
            assert!(r.passed(), "{} (seed {}) failed: max rel err {}", r.name, r.seed, r.report.max_rel_err);
        }
    }
}
