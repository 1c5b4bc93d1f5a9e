//! Geometric re-derivation of answers.
//!
//! The validator recomputes the correct option from the detection record
//! alone and compares it with the sample's answer letter. It shares geometry
//! helpers and option wording with the generator, nothing else.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{TemplateConfig, TemplateKind, VqaSample, Wording};
use crate::geometry::{contains, side_of, BoundingBox, DetectionRecord, Point, Side};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictSource {
    Geometric,
    ExternalLlm,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Valid,
    Invalid { reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationVerdict {
    pub sample_id: String,
    pub source: VerdictSource,
    #[serde(flatten)]
    pub verdict: Verdict,
}

impl ValidationVerdict {
    pub fn valid(sample_id: &str, source: VerdictSource) -> Self {
        Self {
            sample_id: sample_id.to_owned(),
            source,
            verdict: Verdict::Valid,
        }
    }

    pub fn invalid(sample_id: &str, source: VerdictSource, reason: impl Into<String>) -> Self {
        Self {
            sample_id: sample_id.to_owned(),
            source,
            verdict: Verdict::Invalid { reason: reason.into() },
        }
    }

    pub fn is_valid(&self) -> bool {
        self.verdict == Verdict::Valid
    }

    pub fn reason(&self) -> Option<&str> {
        match &self.verdict {
            Verdict::Valid => None,
            Verdict::Invalid { reason } => Some(reason),
        }
    }
}

pub fn geometric_validate(
    sample: &VqaSample,
    record: &DetectionRecord,
    templates: &TemplateConfig,
) -> ValidationVerdict {
    match expected_text(sample, record, &templates.wording).and_then(|t| check_answer(sample, &t)) {
        Ok(()) => ValidationVerdict::valid(&sample.id, VerdictSource::Geometric),
        Err(reason) => ValidationVerdict::invalid(&sample.id, VerdictSource::Geometric, reason),
    }
}

fn check_structure(sample: &VqaSample) -> Result<(), String> {
    let n = sample.options.len();
    if !(2..=5).contains(&n) {
        return Err(format!("{n} options; expected 2 to 5"));
    }
    for (o, expected) in sample.options.iter().zip('A'..) {
        if o.letter != expected {
            return Err(format!("option letters must run A, B, ... (found {})", o.letter));
        }
    }
    let texts: BTreeSet<&str> = sample.options.iter().map(|o| o.text.as_str()).collect();
    if texts.len() != n {
        return Err("duplicate option texts".into());
    }
    if !sample.options.iter().any(|o| o.letter == sample.answer) {
        return Err(format!("answer {} is not an option", sample.answer));
    }
    Ok(())
}

/// Text of the option that geometry says is correct.
fn expected_text(sample: &VqaSample, record: &DetectionRecord, w: &Wording) -> Result<String, String> {
    check_structure(sample)?;
    if sample.image_id != record.image_id {
        return Err(format!(
            "sample refers to {}, record is {}",
            sample.image_id, record.image_id
        ));
    }
    let category = sample.provenance.category.as_str();
    let dims = record.dims();
    let boxes: Vec<BoundingBox> = record.boxes_of(category).collect();

    match sample.kind {
        TemplateKind::Presence => Ok(if boxes.is_empty() { w.no.clone() } else { w.yes.clone() }),
        TemplateKind::HalfLocation => {
            if boxes.is_empty() {
                return Ok(Wording::fill_category(&w.half_absent, category));
            }
            let asked = sample
                .provenance
                .side
                .ok_or("half-location sample has no queried side")?;
            let mut sides = BTreeSet::new();
            for b in &boxes {
                sides.insert(side_of(*b, dims).map_err(|e| e.to_string())?);
            }
            match sides.into_iter().collect::<Vec<_>>().as_slice() {
                [Side::Straddle] | [_, _, ..] => Err("ambiguous: location is not on a single half".into()),
                [actual] if *actual == asked => Ok(w.yes.clone()),
                [actual] => Ok(Wording::half(&w.half_other_side, *actual, category)),
                [] => unreachable!("boxes is non-empty"),
            }
        }
        TemplateKind::BboxChoice => {
            if boxes.is_empty() {
                return Err(format!("ambiguous: image has no {category}"));
            }
            let matching: Vec<&str> = sample
                .options
                .iter()
                .filter(|o| serde_json::from_str::<BoundingBox>(&o.text).is_ok_and(|b| boxes.contains(&b)))
                .map(|o| o.text.as_str())
                .collect();
            match matching.as_slice() {
                [one] => Ok((*one).to_owned()),
                [] => Err("no option matches a ground-truth box".into()),
                _ => Err("ambiguous: several options match ground-truth boxes".into()),
            }
        }
        TemplateKind::PointCategory => {
            let [x, y] = sample
                .provenance
                .point
                .ok_or("point-category sample has no query point")?;
            let p = Point::new(x as f64, y as f64);
            let hits: BTreeSet<&str> = record
                .annotations
                .iter()
                .filter(|a| contains(a.bbox, p))
                .map(|a| a.category.as_str())
                .collect();
            match hits.into_iter().collect::<Vec<_>>().as_slice() {
                [] => Ok(w.other.clone()),
                [one] => Ok((*one).to_owned()),
                many => Err(format!(
                    "ambiguous: point ({x}, {y}) lies in boxes of {} categories",
                    many.len()
                )),
            }
        }
    }
}

fn check_answer(sample: &VqaSample, expected: &str) -> Result<(), String> {
    let hits: Vec<char> = sample
        .options
        .iter()
        .filter(|o| o.text == expected)
        .map(|o| o.letter)
        .collect();
    match hits.as_slice() {
        [letter] if *letter == sample.answer => Ok(()),
        [letter] => Err(format!(
            "answer is {} but geometry gives {letter} ({expected})",
            sample.answer
        )),
        [] => Err(format!("correct option `{expected}` is missing")),
        _ => Err(format!("option `{expected}` appears more than once")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::generate;
    use crate::geometry::Annotation;

    fn record(anns: &[(&str, [i64; 4])]) -> DetectionRecord {
        DetectionRecord {
            image_id: "r".into(),
            image_path: "r.png".into(),
            width: 400,
            height: 300,
            annotations: anns
                .iter()
                .map(|(c, b)| Annotation {
                    category: (*c).into(),
                    bbox: BoundingBox::from(*b),
                })
                .collect(),
        }
    }

    #[test]
    fn generated_samples_are_valid_and_flips_are_not() {
        let r = record(&[("mass", [10, 10, 60, 60]), ("nodule", [300, 200, 330, 240])]);
        let cfg = TemplateConfig::default();
        let out = generate(std::slice::from_ref(&r), &cfg, 5);
        assert!(!out.samples.is_empty());
        for s in &out.samples {
            assert!(geometric_validate(s, &r, &cfg).is_valid(), "{s:?}");
            let mut flipped = s.clone();
            flipped.answer = s.options.iter().find(|o| o.letter != s.answer).unwrap().letter;
            let v = geometric_validate(&flipped, &r, &cfg);
            assert!(!v.is_valid());
            assert!(v.reason().is_some());
        }
    }

    #[test]
    fn overlapping_categories_make_point_ambiguous() {
        let r = record(&[("mass", [10, 10, 60, 60]), ("effusion", [0, 0, 100, 100])]);
        let cfg = TemplateConfig::default();
        let sample = VqaSample {
            id: "x".into(),
            image_id: "r".into(),
            image_path: "r.png".into(),
            width: 400,
            height: 300,
            question: "What does the coordinate (35, 35) in the image show?".into(),
            options: crate::question::lettered(["mass", "effusion", "Other"]),
            answer: 'A',
            kind: TemplateKind::PointCategory,
            provenance: crate::datagen::Provenance {
                category: "mass".into(),
                gt_boxes: vec![BoundingBox::from([10, 10, 60, 60])],
                seed: 0,
                side: None,
                point: Some([35, 35]),
            },
        };
        let v = geometric_validate(&sample, &r, &cfg);
        assert!(v.reason().unwrap().starts_with("ambiguous"));
        // and the generator refuses to emit it
        let out = generate(&[r], &cfg, 1);
        assert!(out
            .samples
            .iter()
            .all(|s| !(s.kind == TemplateKind::PointCategory && s.provenance.category == "mass")));
    }

    #[test]
    fn structural_faults() {
        let r = record(&[("mass", [10, 10, 60, 60])]);
        let cfg = TemplateConfig::default();
        let mut s = generate(std::slice::from_ref(&r), &cfg, 2).samples.remove(0);
        s.answer = 'E';
        assert!(!geometric_validate(&s, &r, &cfg).is_valid());
        s.image_id = "other".into();
        assert!(!geometric_validate(&s, &r, &cfg).is_valid());
    }
}
