//! The fusion model: modality embeddings, text and multi-modal transformer
//! stacks, pre-training heads and the multi-step pointer decoder.

mod config;
mod decode;
mod forward;
mod heads;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::rng::derive_rng;
use crate::tensor::{Gradients, Graph, Mat, ParamId, ParamStore, Scalar, Var};
use crate::text::Vocabulary;

pub use config::{DecodeMode, ModelConfig, Variant};
pub use decode::{answer_targets, majority_answer, AnswerTargets, DecodeToken, DecodedAnswer, DecoderState};
pub use forward::{AttentionMaps, Forward, FusedFeatures, SegmentLayout};
pub use heads::{PretrainOutputs, TaskTerm};

/// Prefix of the parameters that are re-initialized for fine-tuning.
pub const DECODER_PREFIX: &str = "decoder.";

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln1: Norm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln2: Norm,
}

#[derive(Debug, Clone)]
pub(crate) struct ParamIds {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub seg_emb: ParamId,
    pub text_ln: Norm,
    pub text_layers: Vec<LayerParams>,
    pub obj_vis: Linear,
    pub obj_vis_ln: Norm,
    pub obj_box: Linear,
    pub obj_box_ln: Norm,
    pub ocr_feat: Linear,
    pub ocr_feat_ln: Norm,
    pub ocr_box: Linear,
    pub ocr_box_ln: Norm,
    pub slot_begin: ParamId,
    pub slot_pos: ParamId,
    pub slot_type: ParamId,
    pub slot_ln: Norm,
    pub mm_layers: Vec<LayerParams>,
    pub mlm1: Linear,
    pub mlm2: Linear,
    pub itm: Linear,
    pub rpp1: Linear,
    pub rpp2: Linear,
    pub ans_emb: ParamId,
    pub dec_cls: Linear,
    pub ptr_q: Linear,
    pub ptr_k: Linear,
}

struct Init<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
    std: f64,
}

impl<T: Scalar> Init<'_, T> {
    /// Truncated normal (cut at two standard deviations).
    fn normal(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        let data = (0..rows * cols)
            .map(|_| loop {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                if z.abs() <= 2.0 {
                    break T::from_f64_lossy(z * self.std);
                }
            })
            .collect();
        self.store.add(name, Mat::from_vec(rows, cols, data))
    }

    fn constant(&mut self, name: String, rows: usize, cols: usize, v: f64) -> ParamId {
        self.store
            .add(name, Mat::from_vec(rows, cols, vec![T::from_f64_lossy(v); rows * cols]))
    }

    fn linear(&mut self, name: &str, inp: usize, out: usize) -> Linear {
        Linear {
            w: self.normal(format!("{name}.w"), inp, out),
            b: self.constant(format!("{name}.b"), 1, out, 0.0),
        }
    }

    fn norm(&mut self, name: &str, dim: usize) -> Norm {
        Norm {
            gamma: self.constant(format!("{name}.gamma"), 1, dim, 1.0),
            beta: self.constant(format!("{name}.beta"), 1, dim, 0.0),
        }
    }

    fn layer(&mut self, name: &str, d: usize, inter: usize) -> LayerParams {
        LayerParams {
            q: self.linear(&format!("{name}.attn.q"), d, d),
            k: self.linear(&format!("{name}.attn.k"), d, d),
            v: self.linear(&format!("{name}.attn.v"), d, d),
            o: self.linear(&format!("{name}.attn.o"), d, d),
            ln1: self.norm(&format!("{name}.ln1"), d),
            ff1: self.linear(&format!("{name}.ff1"), d, inter),
            ff2: self.linear(&format!("{name}.ff2"), inter, d),
            ln2: self.norm(&format!("{name}.ln2"), d),
        }
    }
}

#[derive(Clone)]
pub struct TapModel<T: Scalar> {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub answer_vocab: Vocabulary,
    pub params: ParamStore<T>,
    pub(crate) ids: ParamIds,
}

impl<T: Scalar> TapModel<T> {
    /// Fresh model with truncated-normal weights drawn from `seed`.
    pub fn new(config: ModelConfig, vocab: Vocabulary, answer_vocab: Vocabulary, seed: u64) -> crate::Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let ids = {
            let mut init = Init {
                store: &mut store,
                rng: derive_rng(seed, &[0x1417]),
                std: config.init_std,
            };
            let d = config.hidden;
            let inter = config.intermediate;
            let text_layers = (0..config.text_layers())
                .map(|i| init.layer(&format!("text.{i}"), d, inter))
                .collect();
            let mm_layers = (0..config.mm_layers())
                .map(|i| init.layer(&format!("mm.{i}"), d, inter))
                .collect();
            let max_steps = config.max_decode_steps_vqa.max(config.max_decode_steps_caption);
            ParamIds {
                tok_emb: init.normal("embed.tok".into(), vocab.len(), d),
                pos_emb: init.normal("embed.pos".into(), config.caps.total(), d),
                seg_emb: init.normal("embed.seg".into(), 3, d),
                text_ln: init.norm("embed.ln", d),
                text_layers,
                obj_vis: init.linear("embed.obj_vis", config.visual_dim, d),
                obj_vis_ln: init.norm("embed.obj_vis_ln", d),
                obj_box: init.linear("embed.obj_box", 4, d),
                obj_box_ln: init.norm("embed.obj_box_ln", d),
                ocr_feat: init.linear("embed.ocr_feat", config.ocr_feature_dim(), d),
                ocr_feat_ln: init.norm("embed.ocr_feat_ln", d),
                ocr_box: init.linear("embed.ocr_box", 4, d),
                ocr_box_ln: init.norm("embed.ocr_box_ln", d),
                slot_begin: init.normal("slots.begin".into(), 1, d),
                slot_pos: init.normal("slots.pos".into(), max_steps, d),
                slot_type: init.normal("slots.type".into(), 2, d),
                slot_ln: init.norm("slots.ln", d),
                mm_layers,
                mlm1: init.linear("head.mlm.fc1", d, d),
                mlm2: init.linear("head.mlm.fc2", d, vocab.len()),
                itm: init.linear("head.itm", d, 1),
                rpp1: init.linear("head.rpp.fc1", 2 * d, d),
                rpp2: init.linear("head.rpp.fc2", d, config.rpp_classes()),
                ans_emb: init.normal(format!("{DECODER_PREFIX}ans_emb"), answer_vocab.len(), d),
                dec_cls: init.linear(&format!("{DECODER_PREFIX}cls"), d, answer_vocab.len()),
                ptr_q: init.linear(&format!("{DECODER_PREFIX}ptr_q"), d, d),
                ptr_k: init.linear(&format!("{DECODER_PREFIX}ptr_k"), d, d),
            }
        };
        Ok(Self {
            config,
            vocab,
            answer_vocab,
            params: store,
            ids,
        })
    }

    /// Replaces the answer vocabulary and draws fresh decoder parameters;
    /// everything else is kept.
    pub fn reset_decoder(&mut self, answer_vocab: Vocabulary, seed: u64) -> crate::Result<()> {
        let fresh = Self::new(self.config.clone(), self.vocab.clone(), answer_vocab.clone(), seed)?;
        let mut params = ParamStore::new();
        for (name, value) in self.params.iter() {
            let v = if name.starts_with(DECODER_PREFIX) {
                fresh.params.get(fresh.params.id(name).expect("same layout")).clone()
            } else {
                value.clone()
            };
            params.add(name, v);
        }
        self.params = params;
        self.answer_vocab = answer_vocab;
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Copies parameters from another precision.
    pub fn convert<U: Scalar>(&self) -> TapModel<U> {
        let mut params = ParamStore::new();
        for (name, m) in self.params.iter() {
            params.add(
                name,
                Mat::from_vec(
                    m.rows,
                    m.cols,
                    m.data.iter().map(|v| U::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN))).collect(),
                ),
            );
        }
        TapModel {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            answer_vocab: self.answer_vocab.clone(),
            params,
            ids: self.ids.clone(),
        }
    }
}

impl TapModel<f64> {
    /// Central-difference check of `loss` against backpropagation for the
    /// scalar entries `(param, flat index)`; returns `(analytic, numeric)`.
    pub fn finite_difference_check<F>(&mut self, entries: &[(ParamId, usize)], h: f64, mut loss: F) -> Vec<(f64, f64)>
    where
        F: for<'a> FnMut(&'a TapModel<f64>, &mut Graph<'a, f64>) -> Var,
    {
        let mut grads = Gradients::zeros_like(&self.params);
        {
            let mut g = self.graph();
            let l = loss(self, &mut g);
            g.backward(l, &mut grads);
        }
        let mut eval = |m: &TapModel<f64>| {
            let mut g = m.graph();
            let l = loss(m, &mut g);
            g.value(l).data[0]
        };
        entries
            .iter()
            .map(|&(id, idx)| {
                let orig = self.params.get(id).data[idx];
                self.params.get_mut(id).data[idx] = orig + h;
                let plus = eval(self);
                self.params.get_mut(id).data[idx] = orig - h;
                let minus = eval(self);
                self.params.get_mut(id).data[idx] = orig;
                (grads.get(id).data[idx], (plus - minus) / (2.0 * h))
            })
            .collect()
    }
}

/// Inverted-dropout keep mask.
pub(crate) fn dropout_mask<T: Scalar>(rng: &mut ChaCha8Rng, len: usize, p: f64) -> Vec<T> {
    let keep = T::from_f64_lossy(1.0 / (1.0 - p));
    (0..len)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect()
}

#[cfg(test)]
pub(crate) mod tests;
