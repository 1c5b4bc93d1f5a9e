//! Template-driven question generation.
//!
//! For every record and every vocabulary category present in it, up to four
//! questions are produced (presence, half-location, box choice, point
//! category). Absent categories yield "No" presence questions, capped per
//! image. Every random choice draws from a generator seeded by
//! `(run seed, image id, kind, category)`, so output does not depend on
//! processing order.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use super::{sub_seed, Provenance, TemplateConfig, TemplateKind, VqaSample, Wording};
use crate::geometry::{center_px, contains, iou, side_of, BoundingBox, DetectionRecord, ImageDims, Point, Side};
use crate::question::lettered;

pub const DISTRACTOR_IOU_LIMIT: f64 = 0.1;
pub const DISTRACTOR_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DistractorError {
    #[error("no position for a {width}x{height} distractor avoids the ground-truth boxes")]
    NoFeasiblePlacement { width: i64, height: i64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Discard {
    pub image_id: String,
    pub kind: TemplateKind,
    pub category: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct GenerationOutput {
    pub samples: Vec<VqaSample>,
    pub discards: Vec<Discard>,
    /// Configured categories that no record contains.
    pub unmatched_categories: Vec<String>,
}

impl GenerationOutput {
    pub fn count(&self, kind: TemplateKind) -> usize {
        self.samples.iter().filter(|s| s.kind == kind).count()
    }
}

fn vocabulary(records: &[DetectionRecord], config: &TemplateConfig) -> (Vec<String>, Vec<String>) {
    let seen: BTreeSet<&str> = records
        .iter()
        .flat_map(|r| r.annotations.iter().map(|a| a.category.as_str()))
        .collect();
    if config.categories.is_empty() {
        return (seen.into_iter().map(str::to_owned).collect(), Vec::new());
    }
    let unmatched = config
        .categories
        .iter()
        .filter(|c| !seen.contains(c.as_str()))
        .cloned()
        .collect();
    (config.categories.clone(), unmatched)
}

pub fn generate(records: &[DetectionRecord], config: &TemplateConfig, seed: u64) -> GenerationOutput {
    let (vocab, unmatched) = vocabulary(records, config);
    for c in &unmatched {
        tracing::warn!(category = %c, "configured category does not occur in any record");
    }
    let mut out = GenerationOutput {
        unmatched_categories: unmatched,
        ..GenerationOutput::default()
    };
    for record in records {
        Generator {
            record,
            config,
            vocab: &vocab,
            seed,
            out: &mut out,
        }
        .run();
    }
    out
}

struct Generator<'a> {
    record: &'a DetectionRecord,
    config: &'a TemplateConfig,
    vocab: &'a [String],
    seed: u64,
    out: &'a mut GenerationOutput,
}

impl Generator<'_> {
    fn run(&mut self) {
        let mut absent = Vec::new();
        for category in self.vocab {
            if !self.record.has_category(category) {
                absent.push(category.as_str());
                continue;
            }
            for kind in TemplateKind::ALL {
                if !self.config.enabled(kind) {
                    continue;
                }
                let s = self.seed_for(kind, category);
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let built = match kind {
                    TemplateKind::Presence => Ok(self.presence(category, true, s, &mut rng)),
                    TemplateKind::HalfLocation => self.half_location(category, s, &mut rng),
                    TemplateKind::BboxChoice => self.bbox_choice(category, s, &mut rng),
                    TemplateKind::PointCategory => self.point_category(category, s, &mut rng),
                };
                match built {
                    Ok(sample) => self.out.samples.push(sample),
                    Err(reason) => self.out.discards.push(Discard {
                        image_id: self.record.image_id.clone(),
                        kind,
                        category: category.clone(),
                        reason,
                    }),
                }
            }
        }

        if self.config.enabled(TemplateKind::Presence) && !absent.is_empty() {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(self.seed, &[&self.record.image_id, "absent"]));
            absent.shuffle(&mut rng);
            for category in absent.into_iter().take(self.config.absent_presence_cap) {
                let s = self.seed_for(TemplateKind::Presence, category);
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let sample = self.presence(category, false, s, &mut rng);
                self.out.samples.push(sample);
            }
        }
    }

    fn seed_for(&self, kind: TemplateKind, category: &str) -> u64 {
        sub_seed(self.seed, &[&self.record.image_id, kind.as_str(), category])
    }

    /// Shuffles `texts`, keeping `pinned_tail` entries in place at the end.
    #[allow(clippy::too_many_arguments)]
    fn sample(
        &self,
        kind: TemplateKind,
        category: &str,
        question: String,
        mut texts: Vec<String>,
        pinned_tail: usize,
        correct: &str,
        provenance: Provenance,
        rng: &mut ChaCha8Rng,
    ) -> VqaSample {
        let head = texts.len() - pinned_tail;
        texts[..head].shuffle(rng);
        let options = lettered(texts);
        let answer = options
            .iter()
            .find(|o| o.text == correct)
            .map(|o| o.letter)
            .expect("correct option is among the options");
        VqaSample {
            id: format!("{}:{}:{}", self.record.image_id, kind, category),
            image_id: self.record.image_id.clone(),
            image_path: self.record.image_path.clone(),
            width: self.record.width,
            height: self.record.height,
            question,
            options,
            answer,
            kind,
            provenance,
        }
    }

    fn provenance(&self, category: &str, gt_boxes: Vec<BoundingBox>, seed: u64) -> Provenance {
        Provenance {
            category: category.to_owned(),
            gt_boxes,
            seed,
            side: None,
            point: None,
        }
    }

    fn presence(&self, category: &str, present: bool, seed: u64, rng: &mut ChaCha8Rng) -> VqaSample {
        let w = &self.config.wording;
        let correct = if present { &w.yes } else { &w.no };
        let boxes = self.record.boxes_of(category).collect();
        self.sample(
            TemplateKind::Presence,
            category,
            Wording::fill_category(&w.presence_question, category),
            vec![w.yes.clone(), w.no.clone()],
            0,
            correct,
            self.provenance(category, boxes, seed),
            rng,
        )
    }

    fn half_location(&self, category: &str, seed: u64, rng: &mut ChaCha8Rng) -> Result<VqaSample, String> {
        let dims = self.record.dims();
        let boxes: Vec<BoundingBox> = self.record.boxes_of(category).collect();
        let mut sides = BTreeSet::new();
        for b in &boxes {
            sides.insert(side_of(*b, dims).map_err(|e| e.to_string())?);
        }
        if sides.contains(&Side::Straddle) {
            return Err("box straddles the vertical midline".into());
        }
        let actual = match sides.into_iter().collect::<Vec<_>>().as_slice() {
            [only] => *only,
            _ => return Err("instances on both halves".into()),
        };
        let asked = if rng.random_bool(0.5) { Side::Left } else { Side::Right };
        let w = &self.config.wording;
        let other = Wording::half(&w.half_other_side, asked.opposite(), category);
        let correct = if asked == actual { w.yes.clone() } else { other.clone() };
        let mut prov = self.provenance(category, boxes, seed);
        prov.side = Some(asked);
        Ok(self.sample(
            TemplateKind::HalfLocation,
            category,
            Wording::half(&w.half_question, asked, category),
            vec![w.yes.clone(), other, Wording::fill_category(&w.half_absent, category)],
            0,
            &correct,
            prov,
            rng,
        ))
    }

    fn bbox_choice(&self, category: &str, seed: u64, rng: &mut ChaCha8Rng) -> Result<VqaSample, String> {
        let gt = self
            .record
            .boxes_of(category)
            .next()
            .ok_or_else(|| format!("no {category} in image"))?;
        let all: Vec<BoundingBox> = self.record.boxes().collect();
        let [d1, d2] = make_distractor_boxes(gt, self.record.dims(), &all, rng.random()).map_err(|e| e.to_string())?;
        let w = &self.config.wording;
        Ok(self.sample(
            TemplateKind::BboxChoice,
            category,
            Wording::fill_category(&w.bbox_question, category),
            vec![gt.to_string(), d1.to_string(), d2.to_string()],
            0,
            &gt.to_string(),
            self.provenance(category, vec![gt], seed),
            rng,
        ))
    }

    fn point_category(&self, category: &str, seed: u64, rng: &mut ChaCha8Rng) -> Result<VqaSample, String> {
        let unambiguous = |b: &BoundingBox| {
            let (x, y) = center_px(*b);
            let p = Point::new(x as f64, y as f64);
            self.record
                .annotations
                .iter()
                .all(|a| a.category == category || !contains(a.bbox, p))
        };
        let gt = self
            .record
            .boxes_of(category)
            .find(unambiguous)
            .ok_or("every instance center lies inside another category's box")?;
        let (x, y) = center_px(gt);

        let mut others: Vec<&String> = self.vocab.iter().filter(|c| c.as_str() != category).collect();
        others.shuffle(rng);
        let w = &self.config.wording;
        let mut texts = vec![category.to_owned()];
        texts.extend(others.into_iter().take(self.config.point_distractors.min(3)).cloned());
        texts.push(w.other.clone());

        let mut prov = self.provenance(category, vec![gt], seed);
        prov.point = Some([x, y]);
        let question = w
            .point_question
            .replace("{x}", &x.to_string())
            .replace("{y}", &y.to_string());
        Ok(self.sample(
            TemplateKind::PointCategory,
            category,
            question,
            texts,
            1,
            category,
            prov,
            rng,
        ))
    }
}

/// Two boxes the size of `gt`, placed where they overlap no ground-truth box
/// (IoU below 0.1) and each other not at all by position.
pub fn make_distractor_boxes(
    gt: BoundingBox,
    dims: ImageDims,
    all_gt_boxes: &[BoundingBox],
    seed: u64,
) -> Result<[BoundingBox; 2], DistractorError> {
    let (w, h) = (gt.width(), gt.height());
    let infeasible = DistractorError::NoFeasiblePlacement { width: w, height: h };
    let max_x = i64::from(dims.width) - w;
    let max_y = i64::from(dims.height) - h;
    if max_x < 0 || max_y < 0 {
        return Err(infeasible);
    }
    let at = |x: i64, y: i64| BoundingBox::raw(x, y, x + w, y + h);
    let acceptable = |c: BoundingBox, chosen: &[BoundingBox]| {
        iou(c, gt) < DISTRACTOR_IOU_LIMIT
            && all_gt_boxes.iter().all(|g| iou(c, *g) < DISTRACTOR_IOU_LIMIT)
            && !chosen.contains(&c)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<BoundingBox> = Vec::with_capacity(2);
    while chosen.len() < 2 {
        let sampled = (0..DISTRACTOR_ATTEMPTS)
            .map(|_| at(rng.random_range(0..=max_x), rng.random_range(0..=max_y)))
            .find(|c| acceptable(*c, &chosen));
        let picked = sampled.or_else(|| {
            [(0, 0), (max_x, 0), (0, max_y), (max_x, max_y)]
                .into_iter()
                .map(|(x, y)| at(x, y))
                .find(|c| acceptable(*c, &chosen))
        });
        chosen.push(picked.ok_or(infeasible.clone())?);
    }
    Ok([chosen[0], chosen[1]])
}
