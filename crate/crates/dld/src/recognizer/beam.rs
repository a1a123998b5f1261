//! Top-K beam search over any stepwise sequence scorer.
//!
//! Scores are cumulative log-probabilities with no length normalization.
//! Hypotheses that emit EOS freeze and compete in the final ranking; at the
//! length cap the surviving live hypotheses complete without EOS. K = 1
//! reduces exactly to greedy decoding.

use crate::synthtext::TokenId;

/// Stepwise distribution source for beam search. `begin` returns the state
/// and log-probabilities after consuming BOS.
pub trait SeqScorer {
    type State: Clone;
    fn begin(&self) -> (Self::State, Vec<f64>);
    fn advance(&self, state: &Self::State, token: TokenId) -> (Self::State, Vec<f64>);
    fn vocab(&self) -> usize;
    fn eos(&self) -> TokenId;
    /// Tokens never emitted (BOS/PAD for the recognizer).
    fn banned(&self) -> &'static [TokenId];
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    pub tokens: Vec<TokenId>,
    pub logprob: f64,
}

struct Live<S> {
    state: S,
    tokens: Vec<TokenId>,
    logprob: f64,
    /// log-probabilities for the next token
    next: Vec<f64>,
}

pub fn beam_search<S: SeqScorer>(scorer: &S, k: usize, max_len: usize) -> Vec<BeamHypothesis> {
    assert!(k >= 1, "beam width must be at least 1");
    let (state0, next0) = scorer.begin();
    let mut live = vec![Live { state: state0, tokens: Vec::new(), logprob: 0.0, next: next0 }];
    let mut done: Vec<BeamHypothesis> = Vec::new();

    for _ in 0..max_len {
        if live.is_empty() {
            break;
        }
        // (parent index, token, score) for every allowed expansion.
        let mut cands: Vec<(usize, TokenId, f64)> = Vec::with_capacity(live.len() * scorer.vocab());
        for (pi, hyp) in live.iter().enumerate() {
            for tok in 0..scorer.vocab() {
                if scorer.banned().contains(&tok) {
                    continue;
                }
                cands.push((pi, tok, hyp.logprob + hyp.next[tok]));
            }
        }
        // Stable tie-break on (parent, token) keeps results deterministic.
        cands.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        cands.truncate(k);

        let mut next_live = Vec::with_capacity(k);
        for (pi, tok, score) in cands {
            let parent = &live[pi];
            let mut tokens = parent.tokens.clone();
            tokens.push(tok);
            if tok == scorer.eos() {
                done.push(BeamHypothesis { tokens, logprob: score });
            } else if tokens.len() == max_len {
                done.push(BeamHypothesis { tokens, logprob: score });
            } else {
                let (state, next) = scorer.advance(&parent.state, tok);
                next_live.push(Live { state, tokens, logprob: score, next });
            }
        }
        live = next_live;
    }

    done.sort_by(|a, b| b.logprob.partial_cmp(&a.logprob).unwrap().then(a.tokens.cmp(&b.tokens)));
    debug_assert!(
        done.windows(2).all(|w| w[0].tokens != w[1].tokens),
        "beam produced duplicate hypotheses"
    );
    done
}

/// Greedy decode: the single best hypothesis under beam width 1.
pub fn greedy_decode<S: SeqScorer>(scorer: &S, max_len: usize) -> Vec<TokenId> {
    beam_search(scorer, 1, max_len).remove(0).tokens
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Pcg32;

    /// Prefix-addressed random table over a tiny vocabulary; the exhaustive
    /// oracle enumerates every complete sequence against the same table.
    pub struct TableScorer {
        pub vocab: usize,
        pub eos: TokenId,
        pub max_len: usize,
        seed: u64,
    }

    impl TableScorer {
        pub fn new(vocab: usize, max_len: usize, seed: u64) -> Self {
            TableScorer { vocab, eos: vocab - 1, max_len, seed }
        }

        fn logits_for(&self, prefix: &[TokenId]) -> Vec<f64> {
            let mut key = crate::rng::splitmix64(self.seed);
            for &t in prefix {
                key = crate::rng::splitmix64(key ^ (t as u64 + 1));
            }
            let mut rng = Pcg32::new(key, key ^ 0xda3e39cb94b95bdb);
            let logits: Vec<f64> = (0..self.vocab).map(|_| rng.next_range(-2.0, 2.0)).collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            logits.iter().map(|l| l - mx - z.ln()).collect()
        }
    }

    impl SeqScorer for TableScorer {
        type State = Vec<TokenId>;
        fn begin(&self) -> (Vec<TokenId>, Vec<f64>) {
            (Vec::new(), self.logits_for(&[]))
        }
        fn advance(&self, state: &Vec<TokenId>, token: TokenId) -> (Vec<TokenId>, Vec<f64>) {
            let mut s = state.clone();
            s.push(token);
            let l = self.logits_for(&s);
            (s, l)
        }
        fn vocab(&self) -> usize {
            self.vocab
        }
        fn eos(&self) -> TokenId {
            self.eos
        }
        fn banned(&self) -> &'static [TokenId] {
            &[]
        }
    }

    /// Enumerate every complete sequence (EOS-terminated or at max length)
    /// with its exact cumulative log-probability.
    pub fn exhaustive_best(scorer: &TableScorer) -> BeamHypothesis {
        fn recurse(
            scorer: &TableScorer,
            prefix: &mut Vec<TokenId>,
            logprob: f64,
            best: &mut Option<BeamHypothesis>,
        ) {
            let logits = scorer.logits_for(prefix);
            for tok in 0..scorer.vocab {
                let lp = logprob + logits[tok];
                prefix.push(tok);
                let complete = tok == scorer.eos || prefix.len() == scorer.max_len;
                if complete {
                    let better = best.as_ref().map(|b| lp > b.logprob).unwrap_or(true);
                    if better {
                        *best = Some(BeamHypothesis { tokens: prefix.clone(), logprob: lp });
                    }
                } else {
                    recurse(scorer, prefix, lp, best);
                }
                prefix.pop();
            }
        }
        let mut best = None;
        recurse(scorer, &mut Vec::new(), 0.0, &mut best);
        best.expect("non-empty sequence space")
    }

    #[test]
    fn full_width_beam_matches_exhaustive_argmax() {
        for seed in 0..60 {
            let scorer = TableScorer::new(3, 3, seed);
            let beam = beam_search(&scorer, 16, 3);
            let oracle = exhaustive_best(&scorer);
            assert!(
                (beam[0].logprob - oracle.logprob).abs() < 1e-12 && beam[0].tokens == oracle.tokens,
                "seed {seed}: beam {:?} vs oracle {:?}",
                beam[0],
                oracle
            );
        }
    }

    #[test]
    fn k1_equals_stepwise_greedy() {
        for seed in 0..100 {
            let scorer = TableScorer::new(4, 5, seed);
            let beam = beam_search(&scorer, 1, 5);
            // Independent greedy loop.
            let (mut state, mut next) = scorer.begin();
            let mut tokens = Vec::new();
            loop {
                let tok = next
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                tokens.push(tok);
                if tok == scorer.eos() || tokens.len() == 5 {
                    break;
                }
                let (s, n) = scorer.advance(&state, tok);
                state = s;
                next = n;
            }
            assert_eq!(beam[0].tokens, tokens, "seed {seed}");
        }
    }

    #[test]
    fn top1_logprob_is_monotone_in_beam_width() {
        for seed in 0..50 {
            let scorer = TableScorer::new(4, 4, seed);
            let mut prev = f64::NEG_INFINITY;
            for k in 1..=8 {
                let best = beam_search(&scorer, k, 4)[0].logprob;
                assert!(best >= prev - 1e-12, "seed {seed} k {k}: {best} < {prev}");
                prev = best;
            }
        }
    }

    #[test]
    fn hypotheses_are_sorted_and_unique() {
        let scorer = TableScorer::new(3, 4, 9);
        let hyps = beam_search(&scorer, 6, 4);
        for w in hyps.windows(2) {
            assert!(w[0].logprob >= w[1].logprob);
            assert_ne!(w[0].tokens, w[1].tokens);
        }
        for h in &hyps {
            assert!(h.logprob <= 0.0);
        }
    }
}
