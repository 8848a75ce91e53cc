use super::forward::{linear, Forward};
use super::TapModel;
use crate::sample::{ItmLabel, PretrainInstance, RppPair};
use crate::tensor::{Graph, Mat, Scalar, Var};

/// One pre-training task's contribution for a single instance. `loss` is
/// a sum over `count` items; `correct` counts top-1 hits.
#[derive(Debug, Clone, Copy)]
pub struct TaskTerm {
    pub loss: Option<Var>,
    pub count: usize,
    pub correct: usize,
}

impl TaskTerm {
    const EMPTY: TaskTerm = TaskTerm {
        loss: None,
        count: 0,
        correct: 0,
    };
}

#[derive(Debug, Clone, Copy)]
pub struct PretrainOutputs {
    pub mlm: TaskTerm,
    pub itm: TaskTerm,
    pub rpp: TaskTerm,
}

impl PretrainOutputs {
    pub fn terms(&self) -> [TaskTerm; 3] {
        [self.mlm, self.itm, self.rpp]
    }
}

impl<T: Scalar> TapModel<T> {
    /// Vocabulary logits (`P x V`) at text positions `positions`.
    pub fn mlm_logits(&self, g: &mut Graph<'_, T>, fwd: &Forward, positions: &[usize]) -> Var {
        assert!(positions.iter().all(|&p| p < fwd.layout.text), "MLM position outside the text");
        let h = g.gather_rows(fwd.fused, positions);
        let h = linear(g, h, &self.ids.mlm1);
        let h = g.gelu(h);
        linear(g, h, &self.ids.mlm2)
    }

    /// Single image-text matching logit from the begin slot `f^p_0`.
    pub fn itm_logit(&self, g: &mut Graph<'_, T>, fwd: &Forward) -> Var {
        let p0 = g.slice_rows(fwd.fused, fwd.layout.slot_range().start, 1);
        linear(g, p0, &self.ids.itm)
    }

    /// Relation logits (`1 x classes`) for object `object` and OCR region `ocr`.
    pub fn rpp_logits(&self, g: &mut Graph<'_, T>, fwd: &Forward, object: usize, ocr: usize) -> Var {
        assert!(object < fwd.layout.objects && ocr < fwd.layout.ocr, "RPP indices out of range");
        let o = g.slice_rows(fwd.fused, fwd.layout.object_range().start + object, 1);
        let r = g.slice_rows(fwd.fused, fwd.layout.ocr_range().start + ocr, 1);
        let x = g.concat_cols(&[o, r]);
        let h = linear(g, x, &self.ids.rpp1);
        let h = g.gelu(h);
        linear(g, h, &self.ids.rpp2)
    }

    /// MLM cross-entropy, ITM binary cross-entropy and RPP cross-entropy for
    /// one instance, each as an unnormalized sum.
    pub fn pretrain_outputs(&self, g: &mut Graph<'_, T>, fwd: &Forward, inst: &PretrainInstance, itm: bool) -> PretrainOutputs {
        let mut out = PretrainOutputs {
            mlm: TaskTerm::EMPTY,
            itm: TaskTerm::EMPTY,
            rpp: TaskTerm::EMPTY,
        };
        if !inst.mask_positions.is_empty() {
            let targets: Vec<usize> = inst.mask_targets.iter().map(|t| self.vocab.id(t)).collect();
            let logits = self.mlm_logits(g, fwd, &inst.mask_positions);
            let m = g.value(logits);
            let correct = targets.iter().enumerate().filter(|&(i, &t)| m.argmax_row(i) == t).count();
            out.mlm = TaskTerm {
                loss: Some(g.cross_entropy_sum(logits, &targets)),
                count: targets.len(),
                correct,
            };
        }
        if itm {
            let polluted = inst.itm_label == ItmLabel::Polluted;
            let logit = self.itm_logit(g, fwd);
            let z = g.value(logit).data[0];
            let y = if polluted { T::one() } else { T::zero() };
            out.itm = TaskTerm {
                loss: Some(g.bce_sum(logit, Mat::scalar(y))),
                count: 1,
                correct: usize::from((z > T::zero()) == polluted),
            };
        }
        if let Some(RppPair { object, ocr, label }) = inst.rpp {
            let logits = self.rpp_logits(g, fwd, object, ocr);
            let target = label.class_index();
            let correct = usize::from(g.value(logits).argmax_row(0) == target);
            out.rpp = TaskTerm {
                loss: Some(g.cross_entropy_sum(logits, &[target])),
                count: 1,
                correct,
            };
        }
        out
    }
}
