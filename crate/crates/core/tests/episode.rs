use std::sync::Arc;

use image::{Rgb, RgbImage};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tarenv_core::episode::{Episode, EpisodeConfig, EpisodeError, EpisodeState, FailReason};
use tarenv_core::geometry::{BoundingBox, ImageDims};
use tarenv_core::mark::{apply_mark, MarkStyle};
use tarenv_core::protocol::{render, ActionFormat, AgentMessage};
use tarenv_core::question::lettered;
use tarenv_core::reward::score_trajectory;

fn noise_image(rng: &mut ChaCha8Rng, w: u32, h: u32) -> RgbImage {
    RgbImage::from_fn(w, h, |_, _| Rgb([rng.random(), rng.random(), rng.random()]))
}

/// Whether pixel (x, y) lies in the inward border band of `b`.
fn in_band(b: [i64; 4], w: u32, h: u32, s: i64, x: i64, y: i64) -> bool {
    let x1 = b[0].clamp(0, i64::from(w) - 1);
    let y1 = b[1].clamp(0, i64::from(h) - 1);
    let x2 = b[2].clamp(0, i64::from(w) - 1);
    let y2 = b[3].clamp(0, i64::from(h) - 1);
    let inside = (x1..=x2).contains(&x) && (y1..=y2).contains(&y);
    inside && (x - x1 < s || x2 - x < s || y - y1 < s || y2 - y < s)
}

#[test]
fn mark_changes_only_border_bands() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let style = MarkStyle::default();
    for case in 0..20 {
        let (w, h) = (rng.random_range(40..400), rng.random_range(40..400));
        let img = noise_image(&mut rng, w, h);
        let before = img.clone();
        let n = rng.random_range(1..=3);
        let boxes: Vec<[i64; 4]> = (0..n)
            .map(|_| {
                let x1 = rng.random_range(0..i64::from(w) - 2);
                let y1 = rng.random_range(0..i64::from(h) - 2);
                [
                    x1,
                    y1,
                    rng.random_range(x1 + 1..=i64::from(w)),
                    rng.random_range(y1 + 1..=i64::from(h)),
                ]
            })
            .collect();
        let bb: Vec<BoundingBox> = boxes.iter().copied().map(BoundingBox::from).collect();
        let out = apply_mark(&img, &bb, &style).unwrap();
        assert_eq!(img, before, "case {case}: input mutated");

        let s = i64::from((((0.004 * f64::from(w.min(h))).round()) as u32).max(2));
        assert_eq!(i64::from(style.stroke_for(ImageDims::new(w, h).unwrap())), s);
        for y in 0..h {
            for x in 0..w {
                let band = boxes.iter().any(|b| in_band(*b, w, h, s, i64::from(x), i64::from(y)));
                let p = *out.get_pixel(x, y);
                if band {
                    assert_eq!(p, Rgb(style.color), "case {case}: ({x},{y}) not painted");
                } else {
                    assert_eq!(p, *img.get_pixel(x, y), "case {case}: ({x},{y}) changed outside band");
                }
            }
        }
    }
}

fn config(format: ActionFormat) -> Arc<EpisodeConfig> {
    Arc::new(EpisodeConfig::with_format(format))
}

fn episode(format: ActionFormat) -> Episode {
    Episode::new(
        "e1",
        RgbImage::from_pixel(200, 100, Rgb([10, 20, 30])),
        "Is there a mass on the left?",
        lettered(["Yes", "No"]),
        Some("A".into()),
        config(format),
    )
    .unwrap()
}

fn turns(format: ActionFormat) -> [String; 2] {
    let mark = AgentMessage::mark("a bright blob on the left", vec![BoundingBox::from([10, 10, 60, 60])]);
    let term = AgentMessage::terminate(Some("the blob is a mass".into()), "A");
    [render(&mark, format), render(&term, format)]
}

#[test]
fn two_round_flow() {
    let mut ep = episode(ActionFormat::Explicit);
    assert_eq!(ep.state(), EpisodeState::Round1Pending);
    let [t1, t2] = turns(ActionFormat::Explicit);
    let r1 = ep.step(&t1).unwrap();
    assert!(!r1.done && r1.parse_ok);
    assert!(r1.updated_image.is_some());
    assert_eq!(ep.state(), EpisodeState::AwaitingFinal);
    let r2 = ep.step(&t2).unwrap();
    assert!(r2.done);
    assert_eq!(r2.final_answer.as_deref(), Some("A"));
    assert_eq!(ep.state(), EpisodeState::Terminated);
    assert!(matches!(ep.step("again"), Err(EpisodeError::Finished)));
    assert_eq!(
        score_trajectory(ep.transcript(), "A", ActionFormat::Explicit)
            .unwrap()
            .total,
        1.4
    );
}

#[test]
fn format_sensitivity() {
    let mut results = Vec::new();
    for format in [ActionFormat::Explicit, ActionFormat::Implicit] {
        let mut ep = episode(format);
        let [t1, t2] = turns(format);
        let r1 = ep.step(&t1).unwrap();
        ep.step(&t2).unwrap();
        let reward = score_trajectory(ep.transcript(), "A", format).unwrap();
        let image = r1.updated_image.unwrap();
        results.push((reward, ep.final_answer().map(str::to_owned), image.as_raw().clone()));
    }
    assert_eq!(results[0], results[1]);
}

#[test]
fn annotation_override_is_returned_verbatim() {
    let over = RgbImage::from_fn(200, 100, |x, y| Rgb([x as u8, y as u8, 7]));
    let [t1, t2] = turns(ActionFormat::Explicit);

    let mut plain = episode(ActionFormat::Explicit);
    plain.step(&t1).unwrap();
    plain.step(&t2).unwrap();

    let mut ep = episode(ActionFormat::Explicit);
    ep.override_annotation(over.clone()).unwrap();
    let r1 = ep.step(&t1).unwrap();
    assert_eq!(r1.updated_image.unwrap().as_raw(), over.as_raw());
    ep.step(&t2).unwrap();
    assert_eq!(
        score_trajectory(ep.transcript(), "A", ActionFormat::Explicit).unwrap(),
        score_trajectory(plain.transcript(), "A", ActionFormat::Explicit).unwrap()
    );
}

#[test]
fn round_two_without_answer_fails() {
    let mut ep = episode(ActionFormat::Implicit);
    ep.step("nothing parseable").unwrap();
    assert_eq!(ep.state(), EpisodeState::AwaitingFinal);
    let r = ep.step("<bbox>[[1, 1, 5, 5]]</bbox>").unwrap();
    assert!(r.done);
    assert_eq!(ep.state(), EpisodeState::Failed(FailReason::NoAnswer));
    assert!(!ep.all_turns_parsed());
}

proptest! {
    #[test]
    fn any_script_ends_within_two_turns(script in prop::collection::vec("\\PC{0,60}|<answer>[A-B]</answer>|<bbox>\\[\\[1, 2, 30, 40\\]\\]</bbox>", 1..6)) {
        let mut ep = episode(ActionFormat::Implicit);
        let mut steps = 0;
        for text in &script {
            match ep.step(text) {
                Ok(_) => steps += 1,
                Err(EpisodeError::Finished) => break,
                Err(e) => panic!("{e}"),
            }
        }
        prop_assert!(steps <= 2);
        prop_assert!(ep.assistant_turns() <= 2);
        if script.len() >= 2 {
            prop_assert!(ep.is_done());
        }
        let transcript = ep.transcript();
        prop_assert_eq!(transcript.assistant_texts().len(), steps);
    }
}
