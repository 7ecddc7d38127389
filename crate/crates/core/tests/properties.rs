mod common;

use common::strategies::{canonical_action, one_line_text, pipeline};

use std::collections::BTreeSet;

use proptest::prelude::*;
use sopbench_core::eval::{match_action, ClickMode, MatchConfig};
use sopbench_core::grounding::{canonicalize, swipe_direction, GroundingConfig};
use sopbench_core::ingest::{corpus_to_string, parse_corpus_str, split_corpus, Corpus, ParseOptions};
use sopbench_core::prompt::{parse_response, render_response, Variant};
use sopbench_core::sop::{states_at_step, EntryState};
use sopbench_core::synthetic::{bundled_templates, generate_synthetic};
use sopbench_core::{
    validate_episode, ActionKind, BBox, CanonicalAction, Episode, Point, RawAction, RuleSet, UiElement,
};

fn grid() -> impl Strategy<Value = f64> {
    (0u32..=10_000).prop_map(|k| f64::from(k) / 10_000.0)
}

fn bbox() -> impl Strategy<Value = BBox> {
    (grid(), grid(), grid(), grid()).prop_filter_map("degenerate box", |(a, b, c, d)| {
        let (x0, x1) = if a < c { (a, c) } else { (c, a) };
        let (y0, y1) = if b < d { (b, d) } else { (d, b) };
        (x1 > x0 && y1 > y0).then(|| BBox::new(x0, y0, x1, y1))
    })
}

fn screen() -> impl Strategy<Value = Vec<UiElement>> {
    prop::collection::vec(("[A-Za-z0-9 &'.-]{0,16}", "(TEXT|ICON_[A-Z]{1,8})", bbox()), 0..8)
        .prop_map(|els| els.into_iter().enumerate().map(|(i, (t, u, b))| UiElement::new(i as u32, t, u, b)).collect())
}

fn raw_action(last: bool) -> BoxedStrategy<RawAction> {
    let mut options = vec![
        (grid(), grid()).prop_map(|(x, y)| RawAction::tap(Point::new(x, y))).boxed(),
        (grid(), grid(), grid(), grid())
            .prop_map(|(a, b, c, d)| RawAction::dual_point(Point::new(a, b), Point::new(c, d)))
            .boxed(),
        one_line_text().prop_map(RawAction::typed).boxed(),
        Just(RawAction::simple(ActionKind::PressBack)).boxed(),
        Just(RawAction::simple(ActionKind::PressHome)).boxed(),
        Just(RawAction::simple(ActionKind::PressEnter)).boxed(),
    ];
    if last {
        options.push(Just(RawAction::simple(ActionKind::StatusTaskComplete)).boxed());
        options.push(Just(RawAction::simple(ActionKind::StatusTaskImpossible)).boxed());
    }
    prop::strategy::Union::new(options).boxed()
}

fn episode() -> impl Strategy<Value = Episode> {
    (
        "[a-z0-9-]{1,12}",
        prop::sample::select(vec!["general", "install", "google_apps", "single", "web_shopping"]),
        "[A-Za-z ,.'-]{1,40}",
        prop::collection::vec((screen(), raw_action(false)), 0..5),
        (screen(), raw_action(true)),
    )
        .prop_map(|(id, subset, instruction, mut steps, last)| {
            steps.push(last);
            Episode::from_pairs(id, subset, instruction, steps)
        })
}

fn corpus() -> impl Strategy<Value = Corpus> {
    prop::collection::vec(episode(), 1..6).prop_map(|mut eps| {
        for (i, e) in eps.iter_mut().enumerate() {
            e.episode_id = format!("{}-{i}", e.episode_id);
        }
        Corpus::new(eps)
    })
}

/// Independent hit test: rank every element by (not containing, centre distance, id),
/// then accept the best-ranked one if it contains the tap or lies within the fallback radius.
fn brute_force_hit(screen: &[UiElement], p: Point, cfg: &GroundingConfig) -> Option<u32> {
    let grow = |e: &UiElement| {
        let (w, h) = (e.bbox.x_max - e.bbox.x_min, e.bbox.y_max - e.bbox.y_min);
        let f = cfg.expand_fraction;
        let x0 = (e.bbox.x_min - f * w).max(0.0);
        let x1 = (e.bbox.x_max + f * w).min(1.0);
        let y0 = (e.bbox.y_min - f * h).max(0.0);
        let y1 = (e.bbox.y_max + f * h).min(1.0);
        x0 <= p.x && p.x <= x1 && y0 <= p.y && p.y <= y1
    };
    let dist = |e: &UiElement| {
        let c = ((e.bbox.x_min + e.bbox.x_max) / 2.0, (e.bbox.y_min + e.bbox.y_max) / 2.0);
        ((c.0 - p.x).powi(2) + (c.1 - p.y).powi(2)).sqrt()
    };
    let mut ranked: Vec<(bool, f64, u32)> = screen.iter().map(|e| (!grow(e), dist(e), e.id)).collect();
    ranked.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
    match ranked.first() {
        Some(&(false, _, id)) => Some(id),
        Some(&(true, d, id)) if d <= cfg.max_fallback_distance => Some(id),
        _ => None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1200))]

    #[test]
    fn response_round_trip(a in canonical_action(), p in pipeline(), t in 0usize..20, vi in 0usize..4) {
        let v = Variant::ALL[vi];
        let text = render_response(&a, Some(&p), t, v).unwrap();
        let parsed = parse_response(&text).unwrap();
        prop_assert_eq!(&parsed.action, &a);
        match v {
            Variant::Base | Variant::Sop => prop_assert!(parsed.plan.is_none()),
            Variant::Plan | Variant::PlanState => {
                let plan = parsed.plan.unwrap();
                let states = states_at_step(&p, t);
                prop_assert_eq!(plan.len(), p.len());
                for (line, (entry, state)) in plan.iter().zip(states) {
                    prop_assert_eq!(line.id, entry.id);
                    prop_assert_eq!(&line.description, &entry.description);
                    let expected = (v == Variant::PlanState).then_some(state);
                    prop_assert_eq!(line.state, expected);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn corpus_serialization_round_trip(c in corpus()) {
        for e in &c.episodes {
            prop_assert!(validate_episode(e).is_empty(), "{:?}", validate_episode(e));
        }
        let text = corpus_to_string(&c);
        let back = parse_corpus_str(&text, ParseOptions::default()).unwrap();
        prop_assert_eq!(&back.corpus.episodes, &c.episodes);
        prop_assert_eq!(&back.corpus.manifest, &c.manifest);
        prop_assert_eq!(corpus_to_string(&back.corpus), text);
    }

    #[test]
    fn split_is_a_partition(c in corpus(), seed in any::<u64>(), a in 1u32..8, b in 1u32..8, d in 1u32..8) {
        let total = f64::from(a + b + d);
        let fr = [f64::from(a) / total, f64::from(b) / total, 1.0 - f64::from(a) / total - f64::from(b) / total];
        let s = split_corpus(&c, fr, seed).unwrap();
        let ids = |c: &Corpus| c.episodes.iter().map(|e| e.episode_id.clone()).collect::<BTreeSet<_>>();
        let (tr, va, te) = (ids(&s.train), ids(&s.val), ids(&s.test));
        prop_assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
        let union: BTreeSet<_> = tr.union(&va).chain(te.iter()).cloned().collect();
        prop_assert_eq!(union, ids(&c));
        for (size, f) in [s.train.len(), s.val.len(), s.test.len()].into_iter().zip(fr) {
            prop_assert!((size as f64 - c.len() as f64 * f).abs() <= 1.0 + 1e-9);
        }
        let again = split_corpus(&c, fr, seed).unwrap();
        prop_assert_eq!(again.train.episodes, s.train.episodes);
    }

    #[test]
    fn states_only_move_forward(p in pipeline(), t in 0usize..25) {
        let now = states_at_step(&p, t);
        let later = states_at_step(&p, t + 1);
        for ((_, a), (_, b)) in now.iter().zip(&later) {
            prop_assert!(!(*a == EntryState::Finish && *b == EntryState::Unfinish));
        }
        let finished = now.iter().filter(|(_, s)| *s == EntryState::Finish).count();
        prop_assert!(now[..finished].iter().all(|(_, s)| *s == EntryState::Finish));
    }

    #[test]
    fn swipe_direction_ignores_scale(dx in -1.0f64..1.0, dy in -1.0f64..1.0, k in 0.01f64..50.0) {
        prop_assume!(dx.abs() > 1e-6 || dy.abs() > 1e-6);
        prop_assert_eq!(swipe_direction(dx, dy), swipe_direction(dx * k, dy * k));
    }

    #[test]
    fn long_swipes_scroll_whatever_the_screen(s in screen(), x in grid(), y in grid(), dx in -0.5f64..0.5, dy in -0.5f64..0.5) {
        prop_assume!((dx * dx + dy * dy).sqrt() > 0.05);
        let raw = RawAction::dual_point(Point::new(x, y), Point::new(x + dx, y + dy));
        let out = canonicalize(&raw, &s, &GroundingConfig::default());
        prop_assert_eq!(out.action, CanonicalAction::Scroll { direction: swipe_direction(dx, dy) });
    }

    #[test]
    fn tap_resolution_matches_brute_force(s in screen(), x in grid(), y in grid()) {
        let cfg = GroundingConfig::default();
        let p = Point::new(x, y);
        let out = canonicalize(&RawAction::tap(p), &s, &cfg);
        let expected = brute_force_hit(&s, p, &cfg);
        match (&out.action, expected) {
            (CanonicalAction::Click { element_id, .. }, Some(id)) => {
                prop_assert_eq!(*element_id, i64::from(id));
                prop_assert!(out.grounded);
            }
            (CanonicalAction::Click { element_id, .. }, None) => {
                prop_assert_eq!(*element_id, -1);
                prop_assert!(!out.grounded);
            }
            (other, _) => prop_assert!(false, "tap became {:?}", other),
        }
    }

    #[test]
    fn exact_match_implies_containment(s in screen(), pred in canonical_action(), gold in canonical_action(), x in grid(), y in grid()) {
        let exact = MatchConfig::default();
        let containment = MatchConfig { click_mode: ClickMode::EnlargedContainment, ..Default::default() };
        let touch = Some(Point::new(x, y));
        if match_action(&pred, &gold, touch, &s, &exact) {
            prop_assert!(match_action(&pred, &gold, touch, &s, &containment));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn synthetic_episodes_annotate_back_to_their_skeleton(ti in 0usize..5, seed in any::<u64>()) {
        let rules = RuleSet::bundled("aitw").unwrap();
        let t = &bundled_templates()[ti];
        let c = generate_synthetic(t, &rules, 3, seed).unwrap();
        for e in &c.episodes {
            prop_assert!(validate_episode(e).is_empty());
            let (_, p) = common::annotate(e, &rules);
            prop_assert_eq!(p.len(), t.sop_skeleton.len());
            for (pattern, got) in t.sop_skeleton.iter().zip(p.descriptions()) {
                match pattern.split_once('{') {
                    None => prop_assert_eq!(pattern.as_str(), got),
                    Some((prefix, rest)) => {
                        let suffix = rest.split_once('}').unwrap().1;
                        prop_assert!(got.starts_with(prefix) && got.ends_with(suffix), "{} vs {}", got, pattern);
                    }
                }
            }
        }
    }
}
