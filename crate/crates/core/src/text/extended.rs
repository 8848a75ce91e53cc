use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::tokenize::{ocr_token, tokenize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Segment {
    #[serde(rename = "Q")]
    Question,
    #[serde(rename = "OBJ")]
    Object,
    #[serde(rename = "OCR")]
    Ocr,
}

impl Segment {
    pub const ALL: [Segment; 3] = [Segment::Question, Segment::Object, Segment::Ocr];

    pub fn index(self) -> usize {
        match self {
            Segment::Question => 0,
            Segment::Object => 1,
            Segment::Ocr => 2,
        }
    }
}

/// Per-part length caps of the extended text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextCaps {
    pub question: usize,
    pub object: usize,
    pub ocr: usize,
}

impl Default for TextCaps {
    fn default() -> Self {
        Self {
            question: 20,
            object: 100,
            ocr: 100,
        }
    }
}

impl TextCaps {
    pub fn total(&self) -> usize {
        self.question + self.object + self.ocr
    }

    pub fn cap(&self, seg: Segment) -> usize {
        match seg {
            Segment::Question => self.question,
            Segment::Object => self.object,
            Segment::Ocr => self.ocr,
        }
    }
}

/// The token stream `[w^q, w^obj, w^ocr]`. Parts are stored separately, so
/// segment boundaries are always recoverable; the flat position of a token
/// is its index in `iter()`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExtendedText {
    pub question: Vec<String>,
    pub object: Vec<String>,
    pub ocr: Vec<String>,
}

impl ExtendedText {
    pub fn len(&self) -> usize {
        self.question.len() + self.object.len() + self.ocr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn part(&self, seg: Segment) -> &[String] {
        match seg {
            Segment::Question => &self.question,
            Segment::Object => &self.object,
            Segment::Ocr => &self.ocr,
        }
    }

    pub fn part_mut(&mut self, seg: Segment) -> &mut Vec<String> {
        match seg {
            Segment::Question => &mut self.question,
            Segment::Object => &mut self.object,
            Segment::Ocr => &mut self.ocr,
        }
    }

    /// Flat position range of a part.
    pub fn range(&self, seg: Segment) -> Range<usize> {
        let q = self.question.len();
        let o = self.object.len();
        match seg {
            Segment::Question => 0..q,
            Segment::Object => q..q + o,
            Segment::Ocr => q + o..self.len(),
        }
    }

    pub fn segment_of(&self, pos: usize) -> Option<Segment> {
        Segment::ALL.into_iter().find(|s| self.range(*s).contains(&pos))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Segment)> + '_ {
        Segment::ALL
            .into_iter()
            .flat_map(move |s| self.part(s).iter().map(move |t| (t.as_str(), s)))
    }

    pub fn token(&self, pos: usize) -> Option<&str> {
        let seg = self.segment_of(pos)?;
        let start = self.range(seg).start;
        Some(self.part(seg)[pos - start].as_str())
    }

    pub fn set_token(&mut self, pos: usize, token: String) {
        let seg = self.segment_of(pos).expect("position within extended text");
        let start = self.range(seg).start;
        self.part_mut(seg)[pos - start] = token;
    }

    pub fn truncate_to(&mut self, caps: &TextCaps) {
        for s in Segment::ALL {
            self.part_mut(s).truncate(caps.cap(s));
        }
    }
}

/// Assembles `[w^q, w^obj, w^ocr]`: the question is tokenized, each object
/// label may contribute several tokens, and each OCR word contributes
/// exactly one token. Every part is truncated to its cap (tail dropped).
pub fn assemble_extended_text(
    question: &str,
    obj_labels: &[String],
    ocr_words: &[String],
    caps: &TextCaps,
) -> ExtendedText {
    let mut text = ExtendedText {
        question: tokenize(question),
        object: obj_labels.iter().flat_map(|l| tokenize(l)).collect(),
        ocr: ocr_words.iter().map(|w| ocr_token(w)).collect(),
    };
    text.truncate_to(caps);
    text
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn words(n: usize, prefix: &str) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    #[test]
    fn caption_mode_has_empty_question() {
        let t = assemble_extended_text("", &words(3, "obj"), &words(4, "ocr"), &TextCaps::default());
        assert!(t.question.is_empty());
        assert_eq!(t.object.len(), 3);
        assert_eq!(t.ocr.len(), 4);
        assert_eq!(t.range(Segment::Ocr), 3..7);
    }

    #[test]
    fn ocr_part_truncated_to_cap() {
        let t = assemble_extended_text("q", &[], &words(150, "w"), &TextCaps::default());
        assert_eq!(t.ocr.len(), 100);
        assert_eq!(t.ocr[99], "w99");
    }

    #[test]
    fn full_caps_give_220() {
        let q = words(30, "q").join(" ");
        let t = assemble_extended_text(&q, &words(120, "o"), &words(120, "w"), &TextCaps::default());
        assert_eq!(t.len(), 220);
        assert_eq!(t.segment_of(19), Some(Segment::Question));
        assert_eq!(t.segment_of(20), Some(Segment::Object));
        assert_eq!(t.segment_of(120), Some(Segment::Ocr));
        assert_eq!(t.segment_of(220), None);
        assert_eq!(t.token(120), Some("w0"));
    }

    proptest! {
        #[test]
        fn caps_respected_and_order_kept(nq in 0usize..40, no in 0usize..130, nw in 0usize..130) {
            let caps = TextCaps::default();
            let q = words(nq, "q").join(" ");
            let t = assemble_extended_text(&q, &words(no, "o"), &words(nw, "w"), &caps);
            prop_assert!(t.len() <= 220);
            prop_assert_eq!(t.question.len(), nq.min(20));
            prop_assert_eq!(t.object.len(), no.min(100));
            prop_assert_eq!(t.ocr.len(), nw.min(100));
            prop_assert_eq!(&t.ocr[..], &words(nw.min(100), "w")[..]);
        }
    }
}
