use super::config::DecodeMode;
use super::forward::{linear, Forward};
use super::TapModel;
use crate::error::{Result, TapError};
use crate::sample::Sample;
use crate::tensor::{Graph, Mat, Scalar, Var};
use crate::text::{ocr_token, Vocabulary, BEGIN, END, MASK, PAD, UNK};

/// Input of one decode slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DecodeToken {
    /// The begin token `p_0`.
    Begin,
    /// A fixed answer-vocabulary word.
    Vocab(usize),
    /// A copy of OCR region `n`.
    Ocr(usize),
}

/// Greedy decoding progress: the emitted tokens so far and the score
/// vector of every finished step.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub tokens: Vec<DecodeToken>,
    pub scores: Vec<Vec<f64>>,
}

impl Default for DecoderState {
    fn default() -> Self {
        Self::new()
    }
}

impl DecoderState {
    pub fn new() -> Self {
        Self {
            tokens: Vec::new(),
            scores: Vec::new(),
        }
    }

    pub fn step(&self) -> usize {
        self.scores.len()
    }

    /// Slot inputs for the next step: begin, then every emitted token.
    pub fn inputs(&self) -> Vec<DecodeToken> {
        std::iter::once(DecodeToken::Begin).chain(self.tokens.iter().copied()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedAnswer {
    pub tokens: Vec<DecodeToken>,
    pub words: Vec<String>,
}

impl DecodedAnswer {
    pub fn text(&self) -> String {
        self.words.join(" ")
    }
}

/// Teacher-forcing inputs and multi-positive targets for one answer.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerTargets<T> {
    pub inputs: Vec<DecodeToken>,
    /// `steps x (|answer vocab| + N)`, 1 at every valid choice.
    pub targets: Mat<T>,
}

/// Builds decoder targets for `answer` over `answer_vocab ∪ ocr_words`.
/// A word found both in the vocabulary and among the OCR tokens has
/// several positives; a word found nowhere targets `[UNK]`. The sequence
/// ends with `[END]` when it fits in `max_steps`.
pub fn answer_targets<T: Scalar>(
    answer: &str,
    answer_vocab: &Vocabulary,
    ocr_words: &[String],
    max_steps: usize,
) -> AnswerTargets<T> {
    let ocr: Vec<String> = ocr_words.iter().map(|w| ocr_token(w)).collect();
    let mut words: Vec<Option<String>> = crate::text::tokenize(answer).into_iter().map(Some).collect();
    words.push(None);
    words.truncate(max_steps);
    let a = answer_vocab.len();
    let width = a + ocr.len();
    let mut targets = Mat::zeros(words.len(), width);
    let mut inputs = vec![DecodeToken::Begin];
    for (t, w) in words.iter().enumerate() {
        let row = targets.row_mut(t);
        let Some(w) = w else {
            row[END] = T::one();
            break;
        };
        let vocab_id = answer_vocab.get(w);
        let copies: Vec<usize> = (0..ocr.len()).filter(|&n| ocr[n] == *w).collect();
        if let Some(id) = vocab_id {
            row[id] = T::one();
        }
        for &n in &copies {
            row[a + n] = T::one();
        }
        if vocab_id.is_none() && copies.is_empty() {
            row[UNK] = T::one();
        }
        if t + 1 < words.len() {
            inputs.push(match (copies.first(), vocab_id) {
                (Some(&n), _) => DecodeToken::Ocr(n),
                (None, Some(id)) => DecodeToken::Vocab(id),
                (None, None) => DecodeToken::Vocab(UNK),
            });
        }
    }
    AnswerTargets { inputs, targets }
}

/// The answer with the most votes (first on ties).
pub fn majority_answer(answers: &[String]) -> Option<&str> {
    let mut best: Option<(&str, usize)> = None;
    for a in answers {
        let c = answers.iter().filter(|b| *b == a).count();
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((a, c));
        }
    }
    best.map(|(a, _)| a)
}

impl<T: Scalar> TapModel<T> {
    /// Scores of every decode slot over the fixed vocabulary followed by the
    /// OCR tokens: `slots x (|answer vocab| + N)`.
    pub fn decode_scores(&self, g: &mut Graph<'_, T>, fwd: &Forward) -> Var {
        let l = fwd.layout;
        let p = g.slice_rows(fwd.fused, l.slot_range().start, l.slots);
        let cls = linear(g, p, &self.ids.dec_cls);
        if l.ocr == 0 {
            return cls;
        }
        let ocr = g.slice_rows(fwd.fused, l.ocr_range().start, l.ocr);
        let q = linear(g, p, &self.ids.ptr_q);
        let k = linear(g, ocr, &self.ids.ptr_k);
        let s = g.matmul_nt(q, k);
        let scale = T::one() / T::from_usize(self.config.hidden).expect("usize fits").sqrt();
        let s = g.scale(s, scale);
        g.concat_cols(&[cls, s])
    }

    /// Teacher-forced decoding loss (binary cross-entropy summed over the
    /// score vector, averaged over steps) and the number of steps.
    pub fn decode_loss(&self, g: &mut Graph<'_, T>, fwd: &Forward, targets: &AnswerTargets<T>) -> Var {
        self.decode_loss_and_hits(g, fwd, targets).0
    }

    /// [`Self::decode_loss`] plus the number of steps whose top-scoring
    /// choice is one of the targets.
    pub fn decode_loss_and_hits(&self, g: &mut Graph<'_, T>, fwd: &Forward, targets: &AnswerTargets<T>) -> (Var, usize) {
        let scores = self.decode_scores(g, fwd);
        let steps = targets.targets.rows;
        let s = g.value(scores);
        let hits = (0..steps)
            .filter(|&t| targets.targets.row(t)[s.argmax_row(t)] > T::zero())
            .count();
        let bce = g.bce_sum(scores, targets.targets.clone());
        (g.scale(bce, T::one() / T::from_usize(steps).expect("usize fits")), hits)
    }

    /// Runs the model for the next decode step and returns its scores.
    pub fn decode_step(&self, sample: &Sample, state: &DecoderState, mode: DecodeMode) -> Result<Vec<T>> {
        let max = self.config.max_decode_steps(mode);
        if state.step() >= max {
            return Err(TapError::config("decoder", format!("step {} beyond the {max}-step limit", state.step())));
        }
        let inputs = state.inputs();
        let mut g = self.graph();
        let fwd = self.forward(&mut g, sample, &inputs, None)?;
        let scores = self.decode_scores(&mut g, &fwd);
        Ok(g.value(scores).row(inputs.len() - 1).to_vec())
    }

    /// Greedy decoding until `[END]` or the step limit of `mode`.
    pub fn decode_answer(&self, sample: &Sample, mode: DecodeMode) -> Result<DecodedAnswer> {
        let max = self.config.max_decode_steps(mode);
        let a = self.answer_vocab.len();
        let mut state = DecoderState::new();
        let mut words = Vec::new();
        while state.step() < max {
            let scores = self.decode_step(sample, &state, mode)?;
            let mut best = END;
            for (i, s) in scores.iter().enumerate() {
                if [PAD, MASK, BEGIN].contains(&i) {
                    continue;
                }
                if *s > scores[best] {
                    best = i;
                }
            }
            state.scores.push(scores.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect());
            if best == END {
                break;
            }
            let (tok, word) = if best < a {
                (DecodeToken::Vocab(best), self.answer_vocab.token(best).unwrap_or_default().to_string())
            } else {
                (DecodeToken::Ocr(best - a), sample.ocr[best - a].word.clone())
            };
            state.tokens.push(tok);
            words.push(word);
        }
        Ok(DecodedAnswer {
            tokens: state.tokens,
            words,
        })
    }
}
