//! Acceptance suite: one line per criterion, non-zero exit if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use proptest::test_runner::{Config, TestCaseError, TestRunner};
use sopbench_core::eval::{
    aggregate, check_token_ordering, evaluate_corpus, match_action, token_stats, EpisodeScore, MatchConfig,
};
use sopbench_core::grounding::{canonicalize, GroundingConfig};
use sopbench_core::ingest::Corpus;
use sopbench_core::policy::{OraclePolicy, RandomPolicy, ReplayMode, RuleSopPolicy};
use sopbench_core::prompt::{
    action_tail, build_dataset, parse_response, render_prompt, render_response, DatasetOptions, Variant,
};
use sopbench_core::remote::{GoldenTable, RemoteEndpoint, RemotePolicy, StubMode, StubServer};
use sopbench_core::sop::states_at_step;
use sopbench_core::structured::{
    apply_user_script, click_for_option, detect_structured_page, extract_payload, DetectorConfig, PayloadKind,
    ResponseStrategy, UserResponseScript,
};
use sopbench_core::synthetic::{bundled_templates, generate_mixed};

use common::strategies::{canonical_action, pipeline};
use common::{aitw, amazon, annotate, golden_dir, load_episode, AMAZON_PIPELINE};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, started: Instant) -> Result<(), String> {
    let took = started.elapsed();
    ensure(took < limit, || format!("took {took:?}, limit {limit:?}"))
}

fn synthetic(n: usize, seed: u64) -> Corpus {
    generate_mixed(&bundled_templates(), &aitw(), n, seed).expect("bundled templates generate")
}

fn c1_aggregation() -> Outcome {
    let started = Instant::now();
    let subsets =
        [("general", 55.80), ("install", 74.98), ("google_apps", 63.95), ("single", 76.27), ("web_shopping", 63.61)];
    let episodes = subsets
        .iter()
        .map(|(s, score)| EpisodeScore {
            episode_id: format!("{s}-0"),
            subset: s.to_string(),
            partial: score / 100.0,
            steps: 1,
            correct: 0,
            ungrounded: 0,
            parse_failures: 0,
            unevaluated: 0,
        })
        .collect();
    let r = aggregate("model-a", episodes);
    for (s, score) in subsets {
        ensure((r.subsets[s] - score).abs() < 1e-9, || format!("{s}: {} != {score}", r.subsets[s]))?;
    }
    ensure((r.overall - 66.92).abs() <= 0.01, || format!("overall {}", r.overall))?;
    within(Duration::from_secs(1), started)?;
    Ok(format!("overall {:.2}", r.overall))
}

fn c2_star_rating_canonicalization() -> Outcome {
    let e = load_episode("star_rating.jsonl");
    let cfg = GroundingConfig::default();
    let tail = |t: usize| action_tail(&canonicalize(&e.steps[t].action, &e.steps[t].screen, &cfg).action);
    let typed = tail(0);
    let click = tail(1);
    let scroll = tail(2);
    ensure(typed == "action: TYPE\ntext: XXX", || format!("type rendered as {typed:?}"))?;
    ensure(click == "action: DUAL_POINT\ntext: XXX type: ICON_STAR id:1", || format!("click rendered as {click:?}"))?;
    ensure(scroll == "action: SCROLL DOWN", || format!("scroll rendered as {scroll:?}"))?;
    Ok("click -> `text: XXX type: ICON_STAR id:1`, swipe -> `SCROLL DOWN`".into())
}

fn c3_goldens() -> Outcome {
    let e = amazon();
    let (gold, p) = annotate(&e, &aitw());
    for v in Variant::ALL {
        let prompt = render_prompt(&e, 2, &gold[..2], Some(&p), v).map_err(|e| e.to_string())?;
        let response = render_response(&gold[2], Some(&p), 2, v).map_err(|e| e.to_string())?;
        for (kind, text) in [("prompt", prompt), ("response", response)] {
            let path = golden_dir().join(format!("amazon_t2_{v}.{kind}.txt"));
            let expected = std::fs::read_to_string(&path).map_err(|err| format!("{}: {err}", path.display()))?;
            ensure(text == expected, || format!("{} differs", path.display()))?;
        }
    }
    let sop = std::fs::read_to_string(golden_dir().join("amazon_t2_sop.prompt.txt")).map_err(|e| e.to_string())?;
    for line in [
        "id:0 search on the website,state:finish",
        "id:1 view and click page content,state:finish",
        "id:2 type 'best rated headphones',state:unfinish",
        "id:3 view and click page content,state:unfinish",
        "id:4 task complete,state:unfinish",
    ] {
        ensure(sop.lines().any(|l| l == line), || format!("SOP golden lacks {line:?}"))?;
    }
    Ok("8 golden files byte-exact".into())
}

fn c4_amazon_pipeline() -> Outcome {
    let (_, p) = annotate(&amazon(), &aitw());
    let got = p.descriptions();
    ensure(got == AMAZON_PIPELINE, || format!("pipeline {got:?}"))?;
    Ok(format!("{} entries", got.len()))
}

fn c5_oracle_end_to_end() -> Outcome {
    let corpus = synthetic(50, 5);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| e.to_string())?;
    let started = Instant::now();
    let r = pool.install(|| {
        evaluate_corpus(
            &corpus,
            &aitw(),
            &GroundingConfig::default(),
            &OraclePolicy,
            ReplayMode::TeacherForced,
            &MatchConfig::default(),
        )
    });
    within(Duration::from_secs(10), started)?;
    ensure(r.counts.episodes == 50, || format!("{} episodes scored", r.counts.episodes))?;
    ensure(r.overall == 100.0, || format!("overall {:.2}", r.overall))?;
    Ok(format!("overall {:.2} in {:?}", r.overall, started.elapsed()))
}

fn c6_round_trip() -> Outcome {
    let mut runner = TestRunner::new(Config { cases: 1000, failure_persistence: None, ..Config::default() });
    let cases = std::sync::atomic::AtomicUsize::new(0);
    runner
        .run(&(canonical_action(), pipeline(), 0usize..20, 0usize..4), |(a, p, t, vi)| {
            cases.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
            let v = Variant::ALL[vi];
            let text = render_response(&a, Some(&p), t, v).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let parsed = parse_response(&text).map_err(|e| TestCaseError::fail(e.to_string()))?;
            if parsed.action != a {
                return Err(TestCaseError::fail(format!("{:?} != {a:?}", parsed.action)));
            }
            if let Some(plan) = parsed.plan {
                let states = states_at_step(&p, t);
                let ok = plan.len() == p.len()
                    && plan.iter().zip(states).all(|(l, (e, s))| {
                        l.id == e.id && l.description == e.description && (l.state.is_none() || l.state == Some(s))
                    });
                if !ok {
                    return Err(TestCaseError::fail("plan block differs"));
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    let n = cases.into_inner();
    ensure(n >= 1000, || format!("only {n} cases ran"))?;
    Ok(format!("{n} cases, 0 failures"))
}

fn c7_token_ordering() -> Outcome {
    let mut corpus = synthetic(40, 7);
    corpus.episodes.push(amazon());
    let corpus = Corpus::new(corpus.episodes);
    let samples: Vec<_> = Variant::ALL
        .into_iter()
        .flat_map(|v| {
            build_dataset(&corpus, &aitw(), &GroundingConfig::default(), v, DatasetOptions::default()).samples
        })
        .collect();
    let stats = token_stats(&samples);
    check_token_ordering(&stats)?;
    let m = |v: Variant| stats[&v].mean_response_tokens;
    Ok(format!(
        "base {:.2} = sop {:.2} < plan {:.2} <= plan_state {:.2}",
        m(Variant::Base),
        m(Variant::Sop),
        m(Variant::Plan),
        m(Variant::PlanState)
    ))
}

fn c8_policy_separation() -> Outcome {
    let corpus = synthetic(100, 8);
    let rules = aitw();
    let run = |policy: &dyn sopbench_core::policy::Policy| {
        evaluate_corpus(
            &corpus,
            &rules,
            &GroundingConfig::default(),
            policy,
            ReplayMode::TeacherForced,
            &MatchConfig::default(),
        )
    };
    let rule = run(&RuleSopPolicy { rules: rules.clone() });
    ensure(rule.overall == 100.0, || format!("rule_sop overall {:.2}", rule.overall))?;
    let mut random = Vec::new();
    for seed in 0..5 {
        let r = run(&RandomPolicy { seed });
        ensure(r.overall < 40.0, || format!("random seed {seed} overall {:.2}", r.overall))?;
        random.push(format!("{:.2}", r.overall));
    }
    Ok(format!("rule_sop {:.2}; random [{}]", rule.overall, random.join(", ")))
}

fn c9_remote_stub() -> Outcome {
    let corpus = synthetic(12, 9);
    let rules = aitw();
    let grounding = GroundingConfig::default();
    let data = build_dataset(&corpus, &rules, &grounding, Variant::Sop, DatasetOptions::default());
    let mut table = GoldenTable::from_samples(&data.samples);

    // Episode i gets its first (i % 3) steps answered wrongly: one malformed, the rest a
    // press that never occurs in the gold actions. Expected partials follow directly.
    let mut expected = Vec::new();
    for (i, e) in corpus.episodes.iter().enumerate() {
        let wrong = i % 3;
        for t in 0..wrong {
            let text = if t == 0 { "I would tap somewhere" } else { "action: PRESS_BACK" };
            table.insert(&e.episode_id, t, text);
        }
        expected.push((e.episode_id.clone(), (e.steps.len() - wrong) as f64 / e.steps.len() as f64));
    }

    let stub = StubServer::start("127.0.0.1:0", StubMode::Golden(table), 4).map_err(|e| e.to_string())?;
    let policy = RemotePolicy::new(RemoteEndpoint::new(stub.url()), Variant::Sop).map_err(|e| e.to_string())?;
    let r = evaluate_corpus(&corpus, &rules, &grounding, &policy, ReplayMode::TeacherForced, &MatchConfig::default());
    stub.shutdown();
    ensure(r.counts.unevaluated == 0, || format!("{} unevaluated steps", r.counts.unevaluated))?;
    for (score, (id, partial)) in r.episodes.iter().zip(&expected) {
        ensure(&score.episode_id == id && score.partial == *partial, || {
            format!("{}: partial {} expected {partial}", score.episode_id, score.partial)
        })?;
    }

    let garbage = StubServer::start("127.0.0.1:0", StubMode::Fixed("garbage".into()), 2).map_err(|e| e.to_string())?;
    let policy = RemotePolicy::new(RemoteEndpoint::new(garbage.url()), Variant::Sop).map_err(|e| e.to_string())?;
    let g = evaluate_corpus(&corpus, &rules, &grounding, &policy, ReplayMode::TeacherForced, &MatchConfig::default());
    garbage.shutdown();
    ensure(g.overall == 0.0, || format!("garbage overall {:.2}", g.overall))?;
    ensure(g.counts.parse_failures == g.counts.steps, || "not every step was a parse failure".into())?;
    Ok(format!("{} partials reproduced; garbage overall {:.2}", expected.len(), g.overall))
}

fn c10_structured_loop() -> Outcome {
    let e = load_episode("medical_popup.jsonl");
    let step = &e.steps[0];
    let cfg = DetectorConfig::default();
    let kind = detect_structured_page(&step.screen, &cfg);
    ensure(kind == Some(PayloadKind::NotificationConfirmation), || format!("detected {kind:?}"))?;
    let payload =
        extract_payload(&step.screen, PayloadKind::NotificationConfirmation, &cfg).map_err(|e| e.to_string())?;
    ensure(payload.options == ["I understand"], || format!("options {:?}", payload.options))?;
    let choice = apply_user_script(&payload, &UserResponseScript::new(ResponseStrategy::FirstAffirmative))
        .map_err(|e| e.to_string())?;
    let click = click_for_option(&step.screen, &choice).ok_or("no element for the chosen option")?;
    let gold = canonicalize(&step.action, &step.screen, &GroundingConfig::default()).action;
    ensure(match_action(&click, &gold, Some(step.action.touch), &step.screen, &MatchConfig::default()), || {
        format!("{click:?} does not match gold {gold:?}")
    })?;
    Ok(format!("notification_confirmation, options [\"{choice}\"], click id {}", element_id(&click)))
}

fn element_id(a: &sopbench_core::CanonicalAction) -> i64 {
    match a {
        sopbench_core::CanonicalAction::Click { element_id, .. } => *element_id,
        _ => -1,
    }
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("aggregation reproduces the overall score", c1_aggregation),
        ("star-rating gestures canonicalize byte-exact", c2_star_rating_canonicalization),
        ("four-variant goldens for the Amazon step 2", c3_goldens),
        ("Amazon episode annotates to five SOP entries", c4_amazon_pipeline),
        ("oracle scores 100.00 on 50 synthetic episodes", c5_oracle_end_to_end),
        ("response render/parse round trip", c6_round_trip),
        ("response token ordering across variants", c7_token_ordering),
        ("rule_sop beats random on 100 synthetic episodes", c8_policy_separation),
        ("remote stub reproduces precomputed partials", c9_remote_stub),
        ("structured pop-up loop scores correct", c10_structured_loop),
    ];
    let mut failures = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or(p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        let ms = started.elapsed().as_millis();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail} ({ms} ms)", i + 1),
            Err(why) => {
                failures += 1;
                println!("criterion {:>2} FAIL  {name}: {why} ({ms} ms)", i + 1);
            }
        }
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
