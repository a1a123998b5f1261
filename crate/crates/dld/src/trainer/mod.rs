//! Optimization loops: teacher pretraining, the four experimental regimes,
//! and the multi-forward distillation step with strict gradient routing
//! (selector supervision never reaches the recognizer; recognition and
//! distillation losses never reach the selector).

pub mod adamw;
pub mod eval;
pub mod log;

use crate::distill::{loss_con, loss_logit_kd, loss_roi, loss_seq, loss_skd, FeatureLoss, KDWeights};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamStore};
use crate::recognizer::beam::{beam_search, BeamHypothesis};
use crate::recognizer::decoder::{decode_teacher_forced, DecoderScorer, StepDistributions};
use crate::recognizer::{backbone_forward, encode_context, roi_crop, ContextFeature, MAX_DECODE_LEN};
use crate::rng::Pcg32;
use crate::selector::flops::{precompute_table, FlopsTable};
use crate::selector::gumbel::{gumbel_sample, temperature};
use crate::selector::losses::{loss_acc, loss_drs, loss_flops, DistRows};
use crate::selector::{drs_forward, ScaleSet};
use crate::synthtext::{SpottingSample, EOS};
use crate::tensor::{Array, Tensor};
use crate::trainer::adamw::AdamW;
use crate::trainer::eval::{evaluate, Policy};
use crate::trainer::log::{EpochRow, TrainLog};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    VanillaMultiscale,
    SkdOnly,
    DrsOnly,
    Dld,
}

impl Regime {
    pub fn needs_teacher(&self) -> bool {
        !matches!(self, Regime::VanillaMultiscale)
    }
    pub fn has_selector(&self) -> bool {
        matches!(self, Regime::DrsOnly | Regime::Dld)
    }
    pub fn has_skd(&self) -> bool {
        matches!(self, Regime::SkdOnly | Regime::Dld)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub regime: Regime,
    pub epochs: u32,
    pub lr: f64,
    /// Epochs at which the learning rate divides by 10.
    pub lr_drops: (u32, u32),
    pub batch_size: usize,
    pub gamma: f64,
    pub tau_init: f64,
    pub sigma: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub eta1: f64,
    pub eta2: f64,
    #[serde(default)]
    pub feature_loss: FeatureLoss,
    pub seed: u64,
    pub scales: ScaleSet,
    pub fixed_student_scale: f64,
    pub beam_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            regime: Regime::Dld,
            epochs: 50,
            lr: 1e-3,
            lr_drops: (30, 40),
            batch_size: 3,
            gamma: 0.1,
            tau_init: 5.0,
            sigma: 0.965,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            eta1: 1.0,
            eta2: 1.0,
            feature_loss: FeatureLoss::MeanSquared,
            seed: 42,
            scales: ScaleSet::default(),
            fixed_student_scale: 0.5,
            beam_k: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.scales.validate()?;
        if self.epochs == 0 || self.epochs <= self.lr_drops.1.max(self.lr_drops.0) {
            return Err(Error::Config(format!(
                "epochs {} must exceed the last lr drop {:?}",
                self.epochs, self.lr_drops
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.gamma < 0.0 || self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda3 < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.tau_init <= 0.0 || self.sigma <= 0.0 || self.sigma >= 1.0 {
            return Err(Error::Config("temperature schedule needs tau_init > 0 and sigma in (0,1)".into()));
        }
        if !(0.0 < self.fixed_student_scale && self.fixed_student_scale <= 1.0) {
            return Err(Error::Config("fixed_student_scale must lie in (0, 1]".into()));
        }
        if self.beam_k == 0 {
            return Err(Error::Config("beam_k must be at least 1".into()));
        }
        Ok(())
    }

    /// Learning rate at an epoch: divided by 10 at each configured drop.
    pub fn lr_at(&self, epoch: u32) -> f64 {
        let mut lr = self.lr;
        if epoch >= self.lr_drops.0 {
            lr /= 10.0;
        }
        if epoch >= self.lr_drops.1 {
            lr /= 10.0;
        }
        lr
    }

    pub fn kd_weights(&self) -> KDWeights {
        KDWeights { eta1: self.eta1, eta2: self.eta2 }
    }
}

/// Frozen-teacher outputs cached once per training run (the teacher always
/// consumes the clean high-res image, so its outputs never change).
pub struct TeacherCache {
    pub dists: Vec<Vec<DistRows>>,
    pub beams: Vec<Vec<Vec<BeamHypothesis>>>,
    pub roi: Vec<Vec<Array<f32>>>,
    pub ctx: Vec<Vec<Array<f32>>>,
}

pub fn build_teacher_cache(
    teacher: &ParamStore<f32>,
    samples: &[SpottingSample],
    beam_k: usize,
    want_features: bool,
    want_beams: bool,
) -> Result<TeacherCache> {
    struct Entry {
        dists: Vec<DistRows>,
        beams: Vec<Vec<BeamHypothesis>>,
        roi: Vec<Array<f32>>,
        ctx: Vec<Array<f32>>,
    }
    let entries: Vec<Entry> = samples
        .par_iter()
        .map(|sample| -> Result<Entry> {
            let b = teacher.bind(false);
            let feats = backbone_forward(&b, &sample.image_hi.constant())?;
            let mut e = Entry { dists: Vec::new(), beams: Vec::new(), roi: Vec::new(), ctx: Vec::new() };
            for inst in &sample.instances {
                let roi = roi_crop(&feats, &inst.box_px, 1.0)?;
                let ctx = encode_context(&b, &roi)?;
                let dists = decode_teacher_forced(&b, &ctx, &inst.text)?;
                e.dists.push(to_dist_rows(&dists));
                if want_beams {
                    let scorer = DecoderScorer { binding: &b, ctx: &ctx };
                    let hyps = beam_search(&scorer, beam_k, MAX_DECODE_LEN);
                    e.beams.push(hyps.into_iter().take(beam_k.max(1)).collect());
                }
                if want_features {
                    e.roi.push(roi.tensor.array());
                    e.ctx.push(ctx.tensor.array());
                }
            }
            Ok(e)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cache = TeacherCache { dists: Vec::new(), beams: Vec::new(), roi: Vec::new(), ctx: Vec::new() };
    for e in entries {
        cache.dists.push(e.dists);
        cache.beams.push(e.beams);
        cache.roi.push(e.roi);
        cache.ctx.push(e.ctx);
    }
    Ok(cache)
}

fn to_dist_rows(d: &StepDistributions<f32>) -> DistRows {
    DistRows { probs: d.probs.array(), log_probs: d.log_probs.array() }
}

struct InstanceForward {
    roi: Tensor<f32>,
    ctx: ContextFeature<f32>,
    dists: StepDistributions<f32>,
}

fn forward_instances(
    b: &Binding<f32>,
    image: &Tensor<f32>,
    sample: &SpottingSample,
    scale: f64,
) -> Result<Vec<InstanceForward>> {
    let feats = backbone_forward(b, image)?;
    sample
        .instances
        .iter()
        .map(|inst| {
            let roi = roi_crop(&feats, &inst.box_px, scale)?;
            let ctx = encode_context(b, &roi)?;
            let dists = decode_teacher_forced(b, &ctx, &inst.text)?;
            Ok(InstanceForward { roi: roi.tensor, ctx, dists })
        })
        .collect()
}

/// Ground-truth cross-entropy, averaged over every decoding step of every
/// instance.
fn loss_rec(forwards: &[InstanceForward], sample: &SpottingSample) -> Result<Tensor<f32>> {
    let mut total: Option<Tensor<f32>> = None;
    let mut steps = 0usize;
    for (f, inst) in forwards.iter().zip(&sample.instances) {
        let mut ids = inst.text.clone();
        ids.push(EOS);
        steps += ids.len();
        let nll = f.dists.log_probs.gather_rows(&ids)?.sum_all().neg();
        total = Some(match total {
            None => nll,
            Some(acc) => acc.add(&nll)?,
        });
    }
    Ok(total.expect("samples have instances").scale(1.0 / steps as f64))
}

/// SKD terms for one sample (means over instances) plus the logit-KD
/// ablation value, which is logged but never optimized.
fn skd_terms(
    forwards: &[InstanceForward],
    student: &Binding<f32>,
    cache: &TeacherCache,
    sample_idx: usize,
    config: &TrainConfig,
) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>, f64)> {
    let n = forwards.len();
    let mut roi_total: Option<Tensor<f32>> = None;
    let mut con_total: Option<Tensor<f32>> = None;
    let mut seq_total: Option<Tensor<f32>> = None;
    let mut logit_val = 0.0f64;
    for (i, f) in forwards.iter().enumerate() {
        let r = loss_roi(&cache.roi[sample_idx][i], &f.roi, config.feature_loss)?;
        let c = loss_con(&cache.ctx[sample_idx][i], &f.ctx.tensor, config.feature_loss)?;
        let k = config.beam_k.min(cache.beams[sample_idx][i].len()).max(1);
        let s = loss_seq(student, &f.ctx, &cache.beams[sample_idx][i], k)?;
        logit_val += loss_logit_kd(&cache.dists[sample_idx][i], &f.dists)?.item() as f64;
        roi_total = Some(match roi_total {
            None => r,
            Some(acc) => acc.add(&r)?,
        });
        con_total = Some(match con_total {
            None => c,
            Some(acc) => acc.add(&c)?,
        });
        seq_total = Some(match seq_total {
            None => s,
            Some(acc) => acc.add(&s)?,
        });
    }
    let inv = 1.0 / n as f64;
    Ok((
        roi_total.unwrap().scale(inv),
        con_total.unwrap().scale(inv),
        seq_total.unwrap().scale(inv),
        logit_val * inv,
    ))
}

fn check_finite(name: &str, v: f64, epoch: u32, step: usize) -> Result<f64> {
    if !v.is_finite() {
        return Err(Error::Numeric(format!("{name} is {v} at epoch {epoch}, step {step}")));
    }
    Ok(v)
}

/// Per-step loss values (per-batch means) for epoch aggregation.
#[derive(Clone, Debug, Default)]
pub struct StepLosses {
    pub l_rec: Option<f64>,
    pub l_acc: Option<f64>,
    pub l_flops: Option<f64>,
    pub l_drs: Option<f64>,
    pub l_roi: Option<f64>,
    pub l_con: Option<f64>,
    pub l_seq: Option<f64>,
    pub l_logit: Option<f64>,
    pub chosen: Vec<usize>,
}

/// Result of the routing assertions run by debug-mode distillation steps.
#[derive(Clone, Copy, Debug, Default)]
pub struct RoutingCheck {
    pub drs_grads_left_recognizer_untouched: bool,
    pub student_grads_left_selector_untouched: bool,
}

struct StudentStepResult {
    grads: Vec<Vec<f32>>,
    losses: StepLosses,
}

/// One optimization step of the selector-driven regimes. The student runs
/// all candidate scales without gradients for the selector's accuracy loss,
/// then trains only on the branch with the maximum selection weight.
#[allow(clippy::too_many_arguments)]
pub fn dld_step(
    student: &mut ParamStore<f32>,
    student_opt: &mut AdamW,
    selector: &mut ParamStore<f32>,
    selector_opt: &mut AdamW,
    cache: &TeacherCache,
    samples: &[SpottingSample],
    batch: &[usize],
    table: &FlopsTable,
    config: &TrainConfig,
    epoch: u32,
    step: usize,
    include_skd: bool,
    mut routing: Option<&mut RoutingCheck>,
) -> Result<StepLosses> {
    let k = config.scales.len();
    let scales = &config.scales.0;
    let tau = temperature(epoch, config.tau_init, config.sigma);
    let lr = config.lr_at(epoch);
    let nb = batch.len() as f64;

    // Student forwards at every candidate scale, detached: these values feed
    // the selector's accuracy loss as constants. Parallel over the flattened
    // (sample, scale) grid.
    let pairs: Vec<(usize, usize)> = batch.iter().flat_map(|&si| (0..k).map(move |ci| (si, ci))).collect();
    let flat: Vec<Vec<DistRows>> = pairs
        .par_iter()
        .map(|&(si, ci)| -> Result<Vec<DistRows>> {
            let b = student.bind(false);
            let fwd = forward_instances(&b, &samples[si].images_lo[ci].constant(), &samples[si], scales[ci])?;
            Ok(fwd.iter().map(|f| to_dist_rows(&f.dists)).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let branch_rows: Vec<Vec<Vec<DistRows>>> =
        (0..batch.len()).map(|bi| flat[bi * k..(bi + 1) * k].to_vec()).collect();

    // Selector graph over the whole batch.
    let sel_bind = selector.bind(true);
    let mut sel_total: Option<Tensor<f32>> = None;
    let mut decisions = Vec::with_capacity(batch.len());
    let mut acc_sum = 0.0;
    let mut flops_sum = 0.0;
    let mut drs_sum = 0.0;
    for (bi, &si) in batch.iter().enumerate() {
        let p = drs_forward(&sel_bind, &samples[si].images_lo[0].constant(), k)?;
        let mut rng = Pcg32::from_seed_tag(config.seed, "gumbel", &[epoch as u64, step as u64, bi as u64]);
        let dec = gumbel_sample(&p, tau, &mut rng)?;
        // per-instance rows transposed to [instance][scale]
        let n_inst = samples[si].instances.len();
        let students: Vec<Vec<DistRows>> =
            (0..n_inst).map(|ii| (0..k).map(|ci| branch_rows[bi][ci][ii].clone()).collect()).collect();
        let acc = loss_acc(&cache.dists[si], &students, &dec.h_st)?;
        let fl = loss_flops(&dec.h_st, &table.normalized)?;
        let drs = loss_drs(&acc, &fl, config.gamma)?;
        acc_sum += check_finite("l_acc", acc.item() as f64, epoch, step)?;
        flops_sum += fl.item() as f64;
        drs_sum += check_finite("l_drs", drs.item() as f64, epoch, step)?;
        sel_total = Some(match sel_total {
            None => drs,
            Some(t) => t.add(&drs)?,
        });
        decisions.push(dec);
    }
    let sel_loss = sel_total.expect("non-empty batch").scale(config.lambda2 / nb);

    // Recognition (+ distillation) on the argmax branch only.
    let run_student = |si: usize, chosen: usize, bind: &Binding<f32>| -> Result<(Tensor<f32>, StepLosses)> {
        let sample = &samples[si];
        let fwd = forward_instances(bind, &sample.images_lo[chosen].constant(), sample, scales[chosen])?;
        let rec = loss_rec(&fwd, sample)?;
        let mut losses = StepLosses { l_rec: Some(rec.item() as f64), ..Default::default() };
        let mut total = rec.scale(config.lambda1);
        if include_skd {
            let (r, c, s, logit) = skd_terms(&fwd, bind, cache, si, config)?;
            losses.l_roi = Some(r.item() as f64);
            losses.l_con = Some(c.item() as f64);
            losses.l_seq = Some(s.item() as f64);
            losses.l_logit = Some(logit);
            let skd = loss_skd(&r, &c, &s, &config.kd_weights())?;
            total = total.add(&skd.scale(config.lambda3))?;
        }
        Ok((total.scale(1.0 / nb), losses))
    };

    let mut losses = StepLosses {
        l_acc: Some(acc_sum / nb),
        l_flops: Some(flops_sum / nb),
        l_drs: Some(drs_sum / nb),
        chosen: decisions.iter().map(|d| d.chosen).collect(),
        ..Default::default()
    };

    let student_grads: Vec<Vec<f32>>;
    if let Some(routing) = routing.as_deref_mut() {
        // Sequential debug path: build both graphs, then check that each
        // backward pass leaves the other parameter group's gradients alone.
        let mut bindings = Vec::new();
        let mut parts = Vec::new();
        for (bi, &si) in batch.iter().enumerate() {
            let bind = student.bind(true);
            let (l, part) = run_student(si, decisions[bi].chosen, &bind)?;
            bindings.push(bind);
            parts.push(part);
            l.backward()?;
        }
        merge_losses(&mut losses, &parts, nb);
        routing.student_grads_left_selector_untouched = sel_bind.grads_all_zero();
        let snapshot: Vec<Vec<Vec<f32>>> = bindings.iter().map(|b| b.grads()).collect();
        sel_loss.backward()?;
        routing.drs_grads_left_recognizer_untouched =
            bindings.iter().zip(&snapshot).all(|(b, snap)| &b.grads() == snap);
        student_grads = sum_grads(bindings.iter().map(|b| b.grads()).collect());
    } else {
        sel_loss.backward()?;
        let chosen: Vec<usize> = decisions.iter().map(|d| d.chosen).collect();
        let results: Vec<StudentStepResult> = batch
            .par_iter()
            .enumerate()
            .map(|(bi, &si)| -> Result<StudentStepResult> {
                let bind = student.bind(true);
                let (l, part) = run_student(si, chosen[bi], &bind)?;
                l.backward()?;
                Ok(StudentStepResult { grads: bind.grads(), losses: part })
            })
            .collect::<Result<Vec<_>>>()?;
        let parts: Vec<StepLosses> = results.iter().map(|r| r.losses.clone()).collect();
        merge_losses(&mut losses, &parts, nb);
        student_grads = sum_grads(results.into_iter().map(|r| r.grads).collect());
    }

    for (name, v) in [("l_rec", losses.l_rec), ("l_roi", losses.l_roi), ("l_con", losses.l_con), ("l_seq", losses.l_seq)] {
        if let Some(v) = v {
            check_finite(name, v, epoch, step)?;
        }
    }

    student_opt.step(student, &student_grads, lr);
    let sel_grads = sel_bind.grads();
    selector_opt.step(selector, &sel_grads, lr);
    Ok(losses)
}

fn merge_losses(into: &mut StepLosses, parts: &[StepLosses], nb: f64) {
    let mean = |f: fn(&StepLosses) -> Option<f64>| -> Option<f64> {
        let vals: Vec<f64> = parts.iter().filter_map(f).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / nb)
        }
    };
    into.l_rec = mean(|p| p.l_rec);
    into.l_roi = mean(|p| p.l_roi);
    into.l_con = mean(|p| p.l_con);
    into.l_seq = mean(|p| p.l_seq);
    into.l_logit = mean(|p| p.l_logit);
}

fn sum_grads(per_sample: Vec<Vec<Vec<f32>>>) -> Vec<Vec<f32>> {
    let mut acc = per_sample[0].clone();
    for grads in per_sample.iter().skip(1) {
        for (a, g) in acc.iter_mut().zip(grads) {
            for (x, y) in a.iter_mut().zip(g) {
                *x += y;
            }
        }
    }
    acc
}

/// Fixed-scale step shared by the vanilla and distillation-only regimes.
#[allow(clippy::too_many_arguments)]
fn fixed_scale_step(
    student: &mut ParamStore<f32>,
    opt: &mut AdamW,
    cache: Option<&TeacherCache>,
    samples: &[SpottingSample],
    batch: &[usize],
    config: &TrainConfig,
    epoch: u32,
    step: usize,
) -> Result<StepLosses> {
    let nb = batch.len() as f64;
    let lr = config.lr_at(epoch);
    let results: Vec<StudentStepResult> = batch
        .par_iter()
        .enumerate()
        .map(|(bi, &si)| -> Result<StudentStepResult> {
            let sample = &samples[si];
            let bind = student.bind(true);
            let scale = match config.regime {
                Regime::VanillaMultiscale => {
                    let mut rng =
                        Pcg32::from_seed_tag(config.seed, "aug-scale", &[epoch as u64, step as u64, bi as u64]);
                    rng.next_range(0.3, 1.0)
                }
                _ => config.fixed_student_scale,
            };
            let image = eval::image_at(sample, scale, &config.scales.0)?;
            let fwd = forward_instances(&bind, &image, sample, scale)?;
            let rec = loss_rec(&fwd, sample)?;
            let mut part = StepLosses { l_rec: Some(rec.item() as f64), ..Default::default() };
            let mut total = rec.scale(config.lambda1);
            if let Some(cache) = cache {
                let (r, c, s, logit) = skd_terms(&fwd, &bind, cache, si, config)?;
                part.l_roi = Some(r.item() as f64);
                part.l_con = Some(c.item() as f64);
                part.l_seq = Some(s.item() as f64);
                part.l_logit = Some(logit);
                let skd = loss_skd(&r, &c, &s, &config.kd_weights())?;
                total = total.add(&skd.scale(config.lambda3))?;
            }
            total.scale(1.0 / nb).backward()?;
            Ok(StudentStepResult { grads: bind.grads(), losses: part })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut losses = StepLosses::default();
    let parts: Vec<StepLosses> = results.iter().map(|r| r.losses.clone()).collect();
    merge_losses(&mut losses, &parts, nb);
    for (name, v) in [("l_rec", losses.l_rec), ("l_roi", losses.l_roi), ("l_con", losses.l_con), ("l_seq", losses.l_seq)]
    {
        if let Some(v) = v {
            check_finite(name, v, epoch, step)?;
        }
    }
    let grads = sum_grads(results.into_iter().map(|r| r.grads).collect());
    opt.step(student, &grads, lr);
    Ok(losses)
}

pub struct TrainOutput {
    pub student: ParamStore<f32>,
    pub selector: Option<ParamStore<f32>>,
    pub log: TrainLog,
    pub table: Option<FlopsTable>,
    /// Sequence accuracy on the training split at scale 1.0 after the final
    /// epoch (the teacher smoke gate).
    pub final_train_accuracy: f64,
}

/// Train a student under the configured regime. All regimes except vanilla
/// require a frozen teacher; every regime initializes the student from the
/// teacher when one is given.
pub fn train_student(
    config: &TrainConfig,
    train: &[SpottingSample],
    eval_set: &[SpottingSample],
    teacher: Option<&ParamStore<f32>>,
) -> Result<TrainOutput> {
    config.validate()?;
    if config.regime.needs_teacher() && teacher.is_none() {
        return Err(Error::Config(format!("{:?} requires a teacher checkpoint", config.regime)));
    }
    if train.is_empty() || eval_set.is_empty() {
        return Err(Error::Config("empty dataset split".into()));
    }
    if let Some(sample) = train.first() {
        if sample.images_lo.len() != config.scales.len() {
            return Err(Error::Config(format!(
                "dataset carries {} candidate scales, config expects {}",
                sample.images_lo.len(),
                config.scales.len()
            )));
        }
    }

    let mut student = match teacher {
        Some(t) => t.clone(),
        None => crate::recognizer::init_params(config.seed),
    };
    let mut student_opt = AdamW::new(&student);
    let mut selector = config.regime.has_selector().then(|| crate::selector::init_params(config.seed, config.scales.len()));
    let mut selector_opt = selector.as_ref().map(AdamW::new);

    let cache = if config.regime.needs_teacher() {
        let t = teacher.expect("checked above");
        Some(build_teacher_cache(t, train, config.beam_k, config.regime.has_skd(), config.regime.has_skd())?)
    } else {
        None
    };
    let table = if config.regime.has_selector() { Some(precompute_table(train, &config.scales.0)?) } else { None };

    let mut log = TrainLog::default();
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        Pcg32::from_seed_tag(config.seed, "shuffle", &[epoch as u64]).shuffle(&mut order);

        let mut sums: Vec<StepLosses> = Vec::with_capacity(steps_per_epoch);
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let losses = match config.regime {
                Regime::VanillaMultiscale => {
                    fixed_scale_step(&mut student, &mut student_opt, None, train, chunk, config, epoch, step)?
                }
                Regime::SkdOnly => fixed_scale_step(
                    &mut student,
                    &mut student_opt,
                    cache.as_ref(),
                    train,
                    chunk,
                    config,
                    epoch,
                    step,
                )?,
                Regime::DrsOnly | Regime::Dld => dld_step(
                    &mut student,
                    &mut student_opt,
                    selector.as_mut().expect("selector regimes"),
                    selector_opt.as_mut().expect("selector regimes"),
                    cache.as_ref().expect("teacher regimes"),
                    train,
                    chunk,
                    table.as_ref().expect("selector regimes"),
                    config,
                    epoch,
                    step,
                    config.regime.has_skd(),
                    None,
                )?,
            };
            sums.push(losses);
        }

        log.rows.push(epoch_row(config, epoch, &sums, &student, selector.as_ref(), eval_set)?);
    }

    let final_train_accuracy = evaluate(&student, train, &config.scales.0, &Policy::Fixed(1.0))?.accuracy;
    Ok(TrainOutput { student, selector, log, table, final_train_accuracy })
}

fn epoch_row(
    config: &TrainConfig,
    epoch: u32,
    sums: &[StepLosses],
    student: &ParamStore<f32>,
    selector: Option<&ParamStore<f32>>,
    eval_set: &[SpottingSample],
) -> Result<EpochRow> {
    let mean_of = |f: fn(&StepLosses) -> Option<f64>| -> Option<f64> {
        let vals: Vec<f64> = sums.iter().filter_map(f).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    let acc_hi = evaluate(student, eval_set, &config.scales.0, &Policy::Fixed(1.0))?;
    let policy_metrics = match (config.regime.has_selector(), selector) {
        (true, Some(sel)) => evaluate(student, eval_set, &config.scales.0, &Policy::Dynamic(sel))?,
        _ => evaluate(student, eval_set, &config.scales.0, &Policy::Fixed(config.fixed_student_scale))?,
    };
    Ok(EpochRow {
        epoch,
        lr: config.lr_at(epoch),
        tau: config.regime.has_selector().then(|| temperature(epoch, config.tau_init, config.sigma)),
        l_rec: mean_of(|s| s.l_rec),
        l_acc: mean_of(|s| s.l_acc),
        l_flops: mean_of(|s| s.l_flops),
        l_drs: mean_of(|s| s.l_drs),
        l_roi: mean_of(|s| s.l_roi),
        l_con: mean_of(|s| s.l_con),
        l_seq: mean_of(|s| s.l_seq),
        l_logit: mean_of(|s| s.l_logit),
        acc_hi: acc_hi.accuracy,
        acc_policy: policy_metrics.accuracy,
        mean_selected_scale: policy_metrics.mean_scale,
        mean_flops: policy_metrics.mean_flops,
    })
}

/// Teacher pretraining: multi-scale vanilla training from a fresh seeded
/// initialization.
pub fn train_teacher(config: &TrainConfig, train: &[SpottingSample], eval_set: &[SpottingSample]) -> Result<TrainOutput> {
    let mut cfg = config.clone();
    cfg.regime = Regime::VanillaMultiscale;
    train_student(&cfg, train, eval_set, None)
}
