use std::ops::Range;
use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use super::decode::DecodeToken;
use super::{dropout_mask, LayerParams, Linear, Norm, TapModel};
use crate::error::{Result, TapError};
use crate::sample::Sample;
use crate::tensor::{AttentionMask, Graph, Mat, Scalar, Var};

/// Row counts of the fused sequence `[w, obj, ocr, p]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentLayout {
    pub text: usize,
    pub objects: usize,
    pub ocr: usize,
    pub slots: usize,
}

impl SegmentLayout {
    pub fn total(&self) -> usize {
        self.text + self.objects + self.ocr + self.slots
    }

    pub fn encoder_len(&self) -> usize {
        self.text + self.objects + self.ocr
    }

    pub fn text_range(&self) -> Range<usize> {
        0..self.text
    }

    pub fn object_range(&self) -> Range<usize> {
        self.text..self.text + self.objects
    }

    pub fn ocr_range(&self) -> Range<usize> {
        let s = self.text + self.objects;
        s..s + self.ocr
    }

    pub fn slot_range(&self) -> Range<usize> {
        let s = self.encoder_len();
        s..s + self.slots
    }

    /// Encoder positions see every encoder position; decode slots see the
    /// encoder and earlier (or the same) slots.
    pub fn attention_mask(&self) -> AttentionMask {
        let l = self.total();
        let enc = self.encoder_len();
        let mut mask = AttentionMask::full(l);
        for q in 0..l {
            for k in enc..l {
                mask.allowed[q * l + k] = q >= enc && k <= q;
            }
        }
        mask
    }
}

/// Per-layer, per-head attention probabilities of the multi-modal stack.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps {
    pub layout: SegmentLayout,
    /// `maps[layer][head]` is `L x L`, row = query position.
    pub maps: Vec<Vec<Mat<f64>>>,
}

impl AttentionMaps {
    pub fn num_maps(&self) -> usize {
        self.maps.iter().map(Vec::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Mat<f64>> {
        self.maps.iter().flatten()
    }

    /// Largest attention from `source` to `target` over every layer and head.
    pub fn max_attention(&self, source: usize, target: usize) -> f64 {
        self.iter().map(|m| m.get(source, target)).fold(0.0, f64::max)
    }
}

/// Fused feature blocks copied out of a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeatures<T> {
    pub words: Mat<T>,
    pub objects: Mat<T>,
    pub ocr: Mat<T>,
    pub slots: Mat<T>,
}

/// Graph handles produced by [`TapModel::forward`].
#[derive(Debug, Clone)]
pub struct Forward {
    pub layout: SegmentLayout,
    /// Input embeddings of all positions, before any transformer layer.
    pub embedded: Var,
    /// `L x hidden` output of the multi-modal stack.
    pub fused: Var,
    /// OCR input embeddings (`N x hidden`); copied OCR tokens re-enter the
    /// decoder through these rows.
    pub ocr_input: Option<Var>,
    attention: Vec<Var>,
}

impl Forward {
    pub fn features<T: Scalar>(&self, g: &Graph<'_, T>) -> FusedFeatures<T> {
        let f = g.value(self.fused);
        let block = |r: Range<usize>| Mat::from_vec(r.len(), f.cols, f.data[r.start * f.cols..r.end * f.cols].to_vec());
        FusedFeatures {
            words: block(self.layout.text_range()),
            objects: block(self.layout.object_range()),
            ocr: block(self.layout.ocr_range()),
            slots: block(self.layout.slot_range()),
        }
    }

    pub fn attention_maps<T: Scalar>(&self, g: &Graph<'_, T>) -> AttentionMaps {
        AttentionMaps {
            layout: self.layout,
            maps: self
                .attention
                .iter()
                .map(|&a| {
                    g.attention_probs(a)
                        .iter()
                        .map(|p| Mat::from_vec(p.rows, p.cols, p.to_f64()))
                        .collect()
                })
                .collect(),
        }
    }
}

/// Dropout source; `None` means evaluation mode.
pub(crate) struct Dropout<'r> {
    pub rng: Option<&'r mut ChaCha8Rng>,
    pub p: f64,
}

impl Dropout<'_> {
    pub fn apply<T: Scalar>(&mut self, g: &mut Graph<'_, T>, x: Var) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) if self.p > 0.0 => {
                let mask = dropout_mask(rng, g.value(x).len(), self.p);
                g.dropout(x, mask)
            }
            _ => x,
        }
    }
}

pub(crate) fn linear<T: Scalar>(g: &mut Graph<'_, T>, x: Var, l: &Linear) -> Var {
    let w = g.param(l.w);
    let b = g.param(l.b);
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

pub(crate) fn norm<T: Scalar>(g: &mut Graph<'_, T>, x: Var, n: &Norm, eps: f64) -> Var {
    let gamma = g.param(n.gamma);
    let beta = g.param(n.beta);
    g.layer_norm(x, gamma, beta, eps)
}

fn box_features<T: Scalar>(boxes: impl Iterator<Item = [f64; 4]>) -> Mat<T> {
    let data: Vec<T> = boxes.flat_map(|b| b.map(T::from_f64_lossy)).collect();
    Mat::from_vec(data.len() / 4, 4, data)
}

impl<T: Scalar> TapModel<T> {
    pub fn graph(&self) -> Graph<'_, T> {
        Graph::new(&self.params)
    }

    /// Runs embedding, the text stack and the multi-modal stack on one
    /// sample with decode-slot inputs `slots` (at least the begin token).
    ///
    /// `dropout_rng` switches training-mode dropout on.
    pub fn forward(
        &self,
        g: &mut Graph<'_, T>,
        sample: &Sample,
        slots: &[DecodeToken],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Forward> {
        assert!(std::ptr::eq(g.params(), &self.params), "graph built on another parameter store");
        if slots.is_empty() || slots[0] != DecodeToken::Begin {
            return Err(TapError::config("decoder", "decode slots must start with the begin token"));
        }
        let cfg = &self.config;
        let mut drop = Dropout {
            rng: dropout_rng,
            p: cfg.dropout,
        };
        let eps = cfg.layer_norm_eps;
        let ids = &self.ids;
        let layout = SegmentLayout {
            text: sample.text.len(),
            objects: sample.objects.len(),
            ocr: sample.ocr.len(),
            slots: slots.len(),
        };
        if layout.text > cfg.caps.total() {
            return Err(TapError::config("model.caps", format!("{} text tokens exceed the cap {}", layout.text, cfg.caps.total())));
        }
        let mut blocks = Vec::with_capacity(4);

        if layout.text > 0 {
            let (tok, seg): (Vec<usize>, Vec<usize>) = sample.text.iter().map(|(t, s)| (self.vocab.id(t), s.index())).unzip();
            let pos: Vec<usize> = (0..layout.text).collect();
            let (te, pe, se) = (g.param(ids.tok_emb), g.param(ids.pos_emb), g.param(ids.seg_emb));
            let t = g.gather_rows(te, &tok);
            let p = g.gather_rows(pe, &pos);
            let s = g.gather_rows(se, &seg);
            let x = g.add(t, p);
            let x = g.add(x, s);
            let x = norm(g, x, &ids.text_ln, eps);
            let mut x = drop.apply(g, x);
            if !ids.text_layers.is_empty() {
                let mask = Rc::new(AttentionMask::full(layout.text));
                for (i, lp) in ids.text_layers.iter().enumerate() {
                    x = self.layer(g, x, lp, &mask, &mut drop).0;
                    if !g.value(x).all_finite() {
                        return Err(TapError::NumericDivergence { layer: i });
                    }
                }
            }
            blocks.push(x);
        }

        if layout.objects > 0 {
            let mut vis = Vec::with_capacity(layout.objects * cfg.visual_dim);
            for o in &sample.objects {
                if o.visual.len() != cfg.visual_dim {
                    return Err(TapError::config(
                        "model.visual_dim",
                        format!("object feature has {} dims, expected {}", o.visual.len(), cfg.visual_dim),
                    ));
                }
                vis.extend(o.visual.iter().map(|&v| T::widen_f32(v)));
            }
            let v = g.constant(Mat::from_vec(layout.objects, cfg.visual_dim, vis));
            let b = g.constant(box_features(sample.objects.iter().map(|o| o.bbox.to_array())));
            let v = linear(g, v, &ids.obj_vis);
            let v = norm(g, v, &ids.obj_vis_ln, eps);
            let b = linear(g, b, &ids.obj_box);
            let b = norm(g, b, &ids.obj_box_ln, eps);
            let x = g.add(v, b);
            blocks.push(drop.apply(g, x));
        }

        let mut ocr_input = None;
        if layout.ocr > 0 {
            let width = cfg.ocr_feature_dim();
            let mut feat = Vec::with_capacity(layout.ocr * width);
            for r in &sample.ocr {
                for (field, got, want) in [
                    ("model.visual_dim", r.visual.len(), cfg.visual_dim),
                    ("model.word_vec_dim", r.word_vec.len(), cfg.word_vec_dim),
                    ("model.phoc_dim", r.phoc.len(), cfg.phoc_dim),
                ] {
                    if got != want {
                        return Err(TapError::config(field, format!("OCR region `{}` has {got} dims, expected {want}", r.word)));
                    }
                }
                feat.extend(r.visual.iter().chain(&r.word_vec).chain(&r.phoc).map(|&v| T::widen_f32(v)));
            }
            let f = g.constant(Mat::from_vec(layout.ocr, width, feat));
            let b = g.constant(box_features(sample.ocr.iter().map(|r| r.bbox.to_array())));
            let f = linear(g, f, &ids.ocr_feat);
            let f = norm(g, f, &ids.ocr_feat_ln, eps);
            let b = linear(g, b, &ids.ocr_box);
            let b = norm(g, b, &ids.ocr_box_ln, eps);
            let x = g.add(f, b);
            ocr_input = Some(x);
            blocks.push(drop.apply(g, x));
        }

        let slot_x = self.embed_slots(g, slots, ocr_input)?;
        blocks.push(drop.apply(g, slot_x));

        let embedded = g.concat_rows(&blocks);
        let mask = Rc::new(layout.attention_mask());
        let mut x = embedded;
        let mut attention = Vec::with_capacity(ids.mm_layers.len());
        for (i, lp) in ids.mm_layers.iter().enumerate() {
            let (out, attn) = self.layer(g, x, lp, &mask, &mut drop);
            x = out;
            attention.push(attn);
            if !g.value(x).all_finite() {
                return Err(TapError::NumericDivergence {
                    layer: ids.text_layers.len() + i,
                });
            }
        }
        Ok(Forward {
            layout,
            embedded,
            fused: x,
            ocr_input,
            attention,
        })
    }

    fn embed_slots(&self, g: &mut Graph<'_, T>, slots: &[DecodeToken], ocr_input: Option<Var>) -> Result<Var> {
        let ids = &self.ids;
        let max = self.params.get(ids.slot_pos).rows;
        if slots.len() > max {
            return Err(TapError::config("model.max_decode_steps", format!("{} decode slots exceed {max}", slots.len())));
        }
        let mut rows = Vec::with_capacity(slots.len());
        let mut types = Vec::with_capacity(slots.len());
        for tok in slots {
            let (row, ty) = match *tok {
                DecodeToken::Begin => (g.param(ids.slot_begin), 0),
                DecodeToken::Vocab(id) => {
                    if id >= self.answer_vocab.len() {
                        return Err(TapError::config("decoder", format!("answer id {id} out of range")));
                    }
                    let table = g.param(ids.ans_emb);
                    (g.gather_rows(table, &[id]), 0)
                }
                DecodeToken::Ocr(n) => match ocr_input {
                    Some(o) if n < g.shape(o).0 => (g.slice_rows(o, n, 1), 1),
                    _ => return Err(TapError::config("decoder", format!("OCR copy index {n} out of range"))),
                },
            };
            rows.push(row);
            types.push(ty);
        }
        let x = g.concat_rows(&rows);
        let pos: Vec<usize> = (0..slots.len()).collect();
        let (pt, tt) = (g.param(ids.slot_pos), g.param(ids.slot_type));
        let p = g.gather_rows(pt, &pos);
        let t = g.gather_rows(tt, &types);
        let x = g.add(x, p);
        let x = g.add(x, t);
        Ok(norm(g, x, &ids.slot_ln, self.config.layer_norm_eps))
    }

    /// Post-norm transformer layer; returns the output and the attention node.
    fn layer(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        lp: &LayerParams,
        mask: &Rc<AttentionMask>,
        drop: &mut Dropout<'_>,
    ) -> (Var, Var) {
        let eps = self.config.layer_norm_eps;
        let q = linear(g, x, &lp.q);
        let k = linear(g, x, &lp.k);
        let v = linear(g, x, &lp.v);
        let attn = g.attention(q, k, v, self.config.heads, mask.clone());
        let o = linear(g, attn, &lp.o);
        let o = drop.apply(g, o);
        let x = g.add(x, o);
        let x = norm(g, x, &lp.ln1, eps);
        let h = linear(g, x, &lp.ff1);
        let h = g.gelu(h);
        let h = linear(g, h, &lp.ff2);
        let h = drop.apply(g, h);
        let y = g.add(x, h);
        (norm(g, y, &lp.ln2, eps), attn)
    }
}
