//! Additive-attention LSTM decoder.
//!
//! At each step the previous hidden state attends over the 32 context
//! columns (energy = v . tanh(W_state h + W_ctx c_i)), the attended context
//! is concatenated with the previous token's embedding as LSTM input, and
//! logits come from [hidden; context] through the output projection.

use super::ContextFeature;
use crate::error::{Error, Result};
use crate::params::Binding;
use crate::synthtext::{TokenId, ALPHABET_LEN, BOS, EOS, PAD, VOCAB};
use crate::tensor::{concat_cols, Elem, Tensor};

/// Teacher-forced per-step output distributions, [T, 39] with
/// T = target length + 1 (the final row predicts EOS).
pub struct StepDistributions<E: Elem = f32> {
    pub probs: Tensor<E>,
    pub log_probs: Tensor<E>,
}

pub struct DecoderState<E: Elem> {
    h: Tensor<E>,
    c: Tensor<E>,
    /// Precomputed W_ctx projections of the context rows, [32, 128].
    ctx_proj: Tensor<E>,
    ctx: Tensor<E>,
}

impl<E: Elem> Clone for DecoderState<E> {
    fn clone(&self) -> Self {
        DecoderState { h: self.h.clone(), c: self.c.clone(), ctx_proj: self.ctx_proj.clone(), ctx: self.ctx.clone() }
    }
}

pub fn decoder_begin<E: Elem>(b: &Binding<E>, ctx: &ContextFeature<E>) -> Result<DecoderState<E>> {
    let ctx_proj = ctx.tensor.matmul(&b.get("dec.attn.w_ctx"))?;
    let hidden = b.get("dec.lstm.w_hh").shape()[0];
    Ok(DecoderState {
        h: Tensor::zeros(&[1, hidden]),
        c: Tensor::zeros(&[1, hidden]),
        ctx_proj,
        ctx: ctx.tensor.clone(),
    })
}

/// Advance one step on `token`, returning the next state and the logits for
/// the following position.
pub fn decoder_step<E: Elem>(
    b: &Binding<E>,
    state: &DecoderState<E>,
    token: TokenId,
) -> Result<(DecoderState<E>, Tensor<E>)> {
    let embed_table = b.get("dec.embed");
    if token >= embed_table.shape()[0] {
        return Err(Error::Contract(format!("token id {token} outside vocabulary")));
    }
    let embed_dim = embed_table.shape()[1];
    let embed = embed_table.row(token)?.reshape(&[1, embed_dim])?;

    // Additive attention driven by the previous hidden state.
    let ctx_dim = state.ctx.shape()[1];
    let query = state.h.matmul(&b.get("dec.attn.w_state"))?.reshape(&[ctx_dim])?;
    let energies = crate::tensor::attn_energies(&state.ctx_proj, &query, &b.get("dec.attn.v"))?;
    let alpha = energies.softmax(0)?.reshape(&[1, state.ctx.shape()[0]])?;
    let attended = alpha.matmul(&state.ctx)?;

    let x = concat_cols(&embed, &attended)?;
    let hidden = b.get("dec.lstm.w_hh").shape()[0];
    let xproj = x.matmul(&b.get("dec.lstm.w_ih"))?;
    let hc = crate::tensor::lstm_scan(
        &xproj,
        &b.get("dec.lstm.w_hh"),
        &b.get("dec.lstm.bias"),
        Some((&state.h, &state.c)),
        false,
    )?;
    let h = hc.slice_cols(0, hidden)?;
    let c = hc.slice_cols(hidden, 2 * hidden)?;
    let logits = concat_cols(&h, &attended)?
        .matmul(&b.get("dec.out.weight"))?
        .add_bias_rows(&b.get("dec.out.bias"))?;
    Ok((DecoderState { h, c, ctx_proj: state.ctx_proj.clone(), ctx: state.ctx.clone() }, logits))
}

/// Run the decoder conditioned on the BOS-prefixed target, producing
/// `target.len() + 1` aligned distributions over the vocabulary.
pub fn decode_teacher_forced<E: Elem>(
    b: &Binding<E>,
    ctx: &ContextFeature<E>,
    target: &[TokenId],
) -> Result<StepDistributions<E>> {
    if target.len() > super::MAX_TARGET_LEN {
        return Err(Error::Contract(format!(
            "target length {} exceeds maximum {}",
            target.len(),
            super::MAX_TARGET_LEN
        )));
    }
    if let Some(&bad) = target.iter().find(|&&t| t >= ALPHABET_LEN) {
        return Err(Error::Contract(format!("target contains reserved or invalid token id {bad}")));
    }
    let mut state = decoder_begin(b, ctx)?;
    let mut logit_rows = Vec::with_capacity(target.len() + 1);
    let mut prev = BOS;
    for step in 0..=target.len() {
        let (next, logits) = decoder_step(b, &state, prev)?;
        let width = logits.numel();
        logit_rows.push(logits.reshape(&[width])?);
        state = next;
        if step < target.len() {
            prev = target[step];
        }
    }
    let logits = crate::tensor::stack_rows(&logit_rows)?;
    Ok(StepDistributions { probs: logits.softmax(1)?, log_probs: logits.log_softmax(1)? })
}

/// Teacher-forced negative log-likelihood of `target` (plus its EOS step).
/// `mean` divides by the number of steps; the sequence-level distillation
/// loss uses the summed form.
pub fn nll_of_target<E: Elem>(
    b: &Binding<E>,
    ctx: &ContextFeature<E>,
    target: &[TokenId],
    include_eos: bool,
    mean: bool,
) -> Result<Tensor<E>> {
    let dists = decode_teacher_forced(b, ctx, target)?;
    let mut ids: Vec<usize> = target.to_vec();
    ids.push(EOS);
    let rows = if include_eos { ids.len() } else { target.len() };
    let log_probs =
        if rows == dists.log_probs.shape()[0] { dists.log_probs } else { dists.log_probs.slice_rows(0, rows)? };
    let total = log_probs.gather_rows(&ids[..rows])?.sum_all().neg();
    if mean {
        Ok(total.scale(1.0 / rows as f64))
    } else {
        Ok(total)
    }
}

/// Beam-search scorer view of the decoder over one instance's context.
pub struct DecoderScorer<'a, E: Elem> {
    pub binding: &'a Binding<E>,
    pub ctx: &'a ContextFeature<E>,
}

impl<'a, E: Elem> super::beam::SeqScorer for DecoderScorer<'a, E> {
    type State = DecoderState<E>;

    fn begin(&self) -> (Self::State, Vec<f64>) {
        let state = decoder_begin(self.binding, self.ctx).expect("context shape is fixed");
        self.advance(&state, BOS)
    }

    fn advance(&self, state: &Self::State, token: TokenId) -> (Self::State, Vec<f64>) {
        let (next, logits) = decoder_step(self.binding, state, token).expect("token validated by beam");
        let logp = logits.log_softmax(1).expect("vocab axis");
        (next, logp.data().iter().map(|v| v.to_f64()).collect())
    }

    fn vocab(&self) -> usize {
        VOCAB
    }
    fn eos(&self) -> TokenId {
        EOS
    }
    fn banned(&self) -> &'static [TokenId] {
        &[BOS, PAD]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recognizer::{encode_context, init_params, roi_crop, backbone_forward};
    use crate::synthtext::{render_sample, GenConfig};

    fn context_for(seed: u64) -> (crate::params::ParamStore<f32>, ContextFeature<f32>, Vec<TokenId>) {
        let store = init_params(seed);
        let b = store.bind(false);
        let sample = render_sample(23, &GenConfig::default()).unwrap();
        let feats = backbone_forward(&b, &sample.image_hi.constant()).unwrap();
        let roi = roi_crop(&feats, &sample.instances[0].box_px, 1.0).unwrap();
        let ctx = encode_context(&b, &roi).unwrap();
        let text = sample.instances[0].text.clone();
        (store, ctx, text)
    }

    #[test]
    fn row_count_is_target_len_plus_one_and_rows_normalize() {
        let (store, ctx, text) = context_for(31);
        let b = store.bind(false);
        let d = decode_teacher_forced(&b, &ctx, &text).unwrap();
        assert_eq!(d.probs.shape(), &[text.len() + 1, VOCAB]);
        for t in 0..=text.len() {
            let s: f32 = d.probs.data()[t * VOCAB..(t + 1) * VOCAB].iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn teacher_forcing_is_deterministic() {
        let (store, ctx, text) = context_for(32);
        let b = store.bind(false);
        let d1 = decode_teacher_forced(&b, &ctx, &text).unwrap();
        let d2 = decode_teacher_forced(&b, &ctx, &text).unwrap();
        assert_eq!(d1.probs.data(), d2.probs.data());
    }

    #[test]
    fn reserved_target_tokens_are_rejected() {
        let (store, ctx, _) = context_for(33);
        let b = store.bind(false);
        assert!(matches!(
            decode_teacher_forced(&b, &ctx, &[1, 2, BOS]),
            Err(Error::Contract(_))
        ));
        assert!(decode_teacher_forced(&b, &ctx, &[0; 12]).is_err());
    }

    #[test]
    fn greedy_first_step_matches_teacher_forced_first_row() {
        // Both condition only on BOS at step 0.
        let (store, ctx, text) = context_for(34);
        let b = store.bind(false);
        let d = decode_teacher_forced(&b, &ctx, &text).unwrap();
        let scorer = DecoderScorer { binding: &b, ctx: &ctx };
        let hyps = super::super::beam::beam_search(&scorer, 1, crate::recognizer::MAX_DECODE_LEN);
        let first = hyps[0].tokens[0];
        let row0 = &d.probs.data()[..VOCAB];
        let argmax = row0
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != BOS && *i != PAD)
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(first, argmax);
    }
}
