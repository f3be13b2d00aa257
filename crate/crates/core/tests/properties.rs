use std::cell::RefCell;
use std::collections::BTreeSet;

use proptest::prelude::*;
use qask_core::agent::{
    AgentError, OracleScript, Questioner, QuestionerRequest, QuestionerScript, ScriptedOracle,
    ScriptedQuestioner, Timed,
};
use qask_core::controller::{resolve_detection, Detection, Route, RouteKind};
use qask_core::dataset::{
    build_sft_mix, harvest, is_plain, partition_pools, sft_record, stage1_pool, MixRatio,
};
use qask_core::engine::{run_episode, EngineConfig};
use qask_core::metrics::{episode_sr, finish_rate, mean_time, nav_metrics, nq, success_rate};
use qask_core::model::{
    DescriptionSet, EpisodeResult, EpisodeSplit, EpisodeSpec, ImageRef, InteractionContext,
    NavEpisodeSpec, OutputKind, Point, Pose, QaExchange, QaTurn, QuestionerOutput, ScoredOutput,
    StepRecord, TraceSplit, UncertaintyScore,
};
use qask_core::nav::{
    apply_action, run_nav_episode, Action, AgentState, NavConfig, RandomWalk, Rect, World,
    WorldObject,
};
use qask_core::parse::{parse_binary, parse_output, parse_rsq};
use qask_core::prompt::{render_context, render_scored_completion, render_turns, OutputFormat, TemplateSet};
use qask_core::validate::validate_episode;
use qask_core::DescriptionLevel;

fn reasoning() -> impl Strategy<Value = String> {
    "[^<]{0,80}"
}

fn question_text() -> impl Strategy<Value = String> {
    "[^<]{0,40}".prop_filter("a question must have content", |q| {
        let t = q.trim();
        !t.is_empty() && !t.eq_ignore_ascii_case("none")
    })
}

fn score() -> impl Strategy<Value = UncertaintyScore> {
    (0i64..=2).prop_map(|v| UncertaintyScore::new(v).unwrap())
}

fn triple() -> impl Strategy<Value = ScoredOutput> {
    (reasoning(), score(), question_text()).prop_map(|(reasoning, score, q)| ScoredOutput {
        reasoning,
        question: score.is_unsure().then_some(q),
        score,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn render_parse_round_trip(t in triple()) {
        let raw = render_scored_completion(&t);
        prop_assert_eq!(parse_rsq(&raw).unwrap(), t);
    }
}

fn tagged_noise() -> impl Strategy<Value = String> {
    let piece = prop_oneof![
        Just("<motivation>".to_string()),
        Just("</motivation>".to_string()),
        Just("<score>".to_string()),
        Just("</score>".to_string()),
        Just("<question>".to_string()),
        Just("</question>".to_string()),
        Just("< SCORE >".to_string()),
        Just("</ Question>".to_string()),
        Just("None".to_string()),
        Just("DECISION: MATCH".to_string()),
        Just("QUESTION:".to_string()),
        Just("\n".to_string()),
        "-?[0-9]{1,25}",
        "\\PC{0,12}",
    ];
    prop::collection::vec(piece, 0..12).prop_map(|v| v.concat())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(3_000))]

    #[test]
    fn parsers_are_total(raw in prop_oneof![any::<String>(), tagged_noise()]) {
        let _ = parse_rsq(&raw);
        let _ = parse_binary(&raw);
    }

    #[test]
    fn parsed_outputs_are_consistent(raw in tagged_noise(), binary in any::<bool>()) {
        let format = if binary { OutputFormat::Binary } else { OutputFormat::Scored };
        if let Ok(out) = parse_output(format, &raw) {
            prop_assert!(out.is_consistent());
            let unsure = out.score().is_unsure();
            let has_q = out.as_question().is_some();
            let is_q_kind = matches!(out.kind, OutputKind::Question { .. });
            prop_assert_eq!(unsure, has_q);
            prop_assert_eq!(has_q, is_q_kind);
            if let Some(p) = &out.parsed {
                prop_assert_eq!(p.score.is_unsure(), p.question.is_some());
            }
        }
    }

    #[test]
    fn scored_triples_build_consistent_outputs(t in triple()) {
        let out = QuestionerOutput::from_scored(render_scored_completion(&t), t.clone());
        prop_assert!(out.is_consistent());
        prop_assert_eq!(out.score(), t.score);
        prop_assert_eq!(out.as_question(), t.question.as_deref());
    }
}

fn qa_turns(max: usize) -> impl Strategy<Value = Vec<QaTurn>> {
    prop::collection::vec(
        ("[a-z]{1,8}( [a-z]{1,8})?\\?", "[a-z]{1,8}( [a-z]{1,8})?").prop_map(|(question, answer)| QaTurn {
            question,
            answer,
        }),
        0..max,
    )
}

proptest! {
    #[test]
    fn context_rendering_concatenates(a in qa_turns(6), b in qa_turns(6)) {
        let mut all = a.clone();
        all.extend(b.iter().cloned());
        let ctx = InteractionContext::from_turns(all).unwrap();
        let rendered = render_context(&ctx);
        match (a.is_empty(), b.is_empty()) {
            (true, true) => prop_assert_eq!(rendered, render_context(&InteractionContext::new())),
            (false, true) => prop_assert_eq!(rendered, render_turns(&a, 1)),
            (true, false) => prop_assert_eq!(rendered, render_turns(&b, 1)),
            (false, false) => prop_assert_eq!(
                rendered,
                format!("{}\n\n{}", render_turns(&a, 1), render_turns(&b, a.len() + 1))
            ),
        }
    }
}

fn descriptions() -> DescriptionSet {
    DescriptionSet {
        category: "lamp".into(),
        cat_col: "brass lamp".into(),
        col_feat: "brass lamp with a pleated shade".into(),
        ctx: "lamp beside the sofa".into(),
        col_ctx: "brass lamp beside the sofa".into(),
        col_ctx_feat: "brass lamp with a pleated shade beside the sofa".into(),
    }
}

fn episode(n: usize) -> EpisodeSpec {
    EpisodeSpec {
        id: "ep".into(),
        category: "lamp".into(),
        target_image: ImageRef::new("target.png"),
        descriptions: descriptions(),
        observations: (0..n)
            .map(|i| ImageRef::new(if i + 1 == n { "target.png".to_string() } else { format!("d{i}.png") }))
            .collect(),
        split: EpisodeSplit::Test,
    }
}

#[derive(Debug, Clone)]
enum Move {
    Ask(u8),
    Reject,
    Accept,
}

fn raw(m: &Move) -> String {
    match m {
        Move::Ask(i) => format!("<motivation>?</motivation><score>1</score><question>Question {i}?</question>"),
        Move::Reject => "<motivation>no</motivation><score>0</score><question>None</question>".into(),
        Move::Accept => "<motivation>yes</motivation><score>2</score><question>None</question>".into(),
    }
}

fn moves() -> impl Strategy<Value = Vec<Move>> {
    prop::collection::vec(
        prop_oneof![(0u8..4).prop_map(Move::Ask), Just(Move::Reject), Just(Move::Accept)],
        1..5,
    )
}

/// Wraps a questioner and records every request it sees.
struct Recorder<Q> {
    inner: Q,
    seen: RefCell<Vec<(usize, usize, String)>>,
}

impl<Q: Questioner> Questioner for Recorder<Q> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn turn(&mut self, req: &QuestionerRequest<'_>) -> Result<Timed<QuestionerOutput>, AgentError> {
        self.seen
            .borrow_mut()
            .push((req.obs_index, req.context.len(), req.observation.as_str().to_string()));
        self.inner.turn(req)
    }
}

fn scripted_run(n: usize, script: &[Vec<Move>], cap: usize) -> (EpisodeSpec, EpisodeResult, Vec<(usize, usize, String)>) {
    let spec = episode(n);
    let mut s = QuestionerScript::default();
    s.episodes
        .insert("ep".into(), script.iter().map(|turns| turns.iter().map(raw).collect()).collect());
    let mut q = Recorder {
        inner: ScriptedQuestioner::new("q", OutputFormat::Scored, s),
        seen: RefCell::new(Vec::new()),
    };
    let mut o = ScriptedOracle::new("o", OracleScript::default());
    let cfg = EngineConfig {
        max_questions_per_observation: cap,
        ..EngineConfig::default()
    };
    let r = run_episode(&spec, &mut q, &mut o, &cfg);
    let seen = q.seen.into_inner();
    (spec, r, seen)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn engine_invariants(
        (n, script) in (2usize..7).prop_flat_map(|n| (Just(n), prop::collection::vec(moves(), n))),
        cap in 0usize..4,
    ) {
        let (spec, r, seen) = scripted_run(n, &script, cap);

        // termination bound
        prop_assert!(seen.len() <= n * (cap + 2));

        // obs indices contiguous from 0
        for (i, s) in r.steps.iter().enumerate() {
            prop_assert_eq!(s.obs_index, i);
        }

        // context is non-decreasing and equals the answered questions so far
        let mut answered_before = Vec::new();
        let mut total = 0;
        for s in &r.steps {
            let mut within = total;
            for _ in &s.raw_outputs {
                answered_before.push(within);
                within = (within + 1).min(total + s.questions.len());
            }
            total += s.questions.len();
        }
        let lens: Vec<usize> = seen.iter().map(|(_, len, _)| *len).collect();
        prop_assert!(lens.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(lens, answered_before);

        // the questioner only ever sees observations of the episode
        for (i, _, obs) in &seen {
            prop_assert_eq!(obs.as_str(), spec.observations[*i].as_str());
        }

        let sr = episode_sr(&r, n).unwrap();
        if r.finished {
            prop_assert_eq!(sr, 1.0);
        }
        if sr == 1.0 && r.decision_complete() {
            prop_assert!(r.finished);
        }
    }

    #[test]
    fn harvest_replays_scripted_sequence(
        (n, script) in (2usize..6).prop_flat_map(|n| (Just(n), prop::collection::vec(moves(), n))),
    ) {
        let (spec, r, _) = scripted_run(n, &script, 5);
        let h = harvest(std::slice::from_ref(&r), std::slice::from_ref(&spec), TraceSplit::Train);
        prop_assert_eq!(h.skipped, 0);
        let expected: Vec<(u8, Option<String>)> = r
            .steps
            .iter()
            .flat_map(|s| s.raw_outputs.iter())
            .map(|raw| {
                let p = parse_rsq(raw).unwrap();
                (p.score.value(), p.question)
            })
            .collect();
        let got: Vec<(u8, Option<String>)> =
            h.samples.iter().map(|s| (s.score.value(), s.question.clone())).collect();
        prop_assert_eq!(got, expected);

        let templates = TemplateSet::builtin("v1").unwrap();
        for s in &h.samples {
            let rec = sft_record(&templates, s).unwrap();
            prop_assert_eq!(parse_rsq(&rec.completion).unwrap(), s.scored());
        }
        for s in stage1_pool(&h.samples) {
            prop_assert!(s.question.is_none() && s.context.is_empty());
        }
        let (q, p) = partition_pools(&h.samples);
        prop_assert!(q.iter().all(|s| !is_plain(s)));
        prop_assert!(p.iter().all(is_plain));
    }

    #[test]
    fn validation_is_idempotent(n in 0usize..40, readable in any::<bool>()) {
        let spec = episode(n);
        let probe = move |_: &ImageRef| readable;
        let before = spec.clone();
        let a = validate_episode(&spec, &probe);
        let b = validate_episode(&spec, &probe);
        prop_assert_eq!(a, b);
        prop_assert_eq!(spec, before);
    }
}

fn fuzzed_result(idx: usize) -> impl Strategy<Value = EpisodeResult> {
    (2usize..10)
        .prop_flat_map(|n| (Just(n), 0..=n))
        .prop_flat_map(move |(n, k)| {
            (
                Just(n),
                prop::collection::vec((any::<bool>(), any::<bool>(), 0usize..4), k),
                0.0f64..200.0,
            )
        })
        .prop_map(move |(n, steps, wall_time)| {
            let steps: Vec<StepRecord> = steps
                .into_iter()
                .enumerate()
                .map(|(i, (decision, correct, questions))| {
                    let mut s = StepRecord::new(i);
                    s.decision = Some(decision);
                    s.correct = Some(correct);
                    s.raw_outputs = vec!["x".into(); questions + 1];
                    s.questions = (0..questions)
                        .map(|j| QaExchange {
                            question: format!("q{j}"),
                            answer: "a".into(),
                            latency: 0.5,
                        })
                        .collect();
                    s
                })
                .collect();
            let finished = steps.len() == n && steps.iter().all(|s| s.correct == Some(true));
            EpisodeResult {
                episode_id: format!("e{idx}"),
                description_level: DescriptionLevel::ColCtx,
                oracle_id: "o".into(),
                questioner_id: "q".into(),
                num_observations: n,
                steps,
                finished,
                wall_time,
                replayed: false,
                error: None,
            }
        })
}

fn result_sets() -> impl Strategy<Value = (Vec<EpisodeResult>, Vec<EpisodeResult>)> {
    prop::collection::vec(fuzzed_result(0), 1..40)
        .prop_flat_map(|v| (Just(v.clone()), Just(v).prop_shuffle()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1_000))]

    #[test]
    fn metric_invariants((results, shuffled) in result_sets()) {
        let sr = success_rate(&results).unwrap();
        let fr = finish_rate(&results).unwrap();
        prop_assert!(fr <= sr);
        prop_assert!((0.0..=1.0).contains(&sr));
        prop_assert_eq!(sr.to_bits(), success_rate(&shuffled).unwrap().to_bits());
        prop_assert_eq!(fr.to_bits(), finish_rate(&shuffled).unwrap().to_bits());
        prop_assert_eq!(nq(&results).map(f64::to_bits), nq(&shuffled).map(f64::to_bits));
        prop_assert_eq!(mean_time(&results).unwrap().to_bits(), mean_time(&shuffled).unwrap().to_bits());
    }
}

proptest! {
    #[test]
    fn controller_invariants(script in moves(), cap in 0usize..5) {
        let mut s = QuestionerScript::default();
        s.episodes.insert("nav".into(), vec![script.iter().map(raw).collect()]);
        let mut q = Recorder {
            inner: ScriptedQuestioner::new("q", OutputFormat::Scored, s),
            seen: RefCell::new(Vec::new()),
        };
        let mut o = ScriptedOracle::new("o", OracleScript::default());
        let (obs, target) = (ImageRef::new("o.png"), ImageRef::new("t.png"));
        let det = Detection {
            episode_id: "nav",
            index: 0,
            description: "brass lamp",
            observation: &obs,
            category: "lamp",
            target_image: &target,
        };
        let res = resolve_detection(&mut q, &mut o, &det, InteractionContext::new(), cap).unwrap();
        prop_assert_eq!(res.context.len(), res.asks);
        prop_assert!(res.model_calls <= cap + 1);
        prop_assert_eq!(q.seen.borrow().len(), res.model_calls);
        let asked: Vec<String> = (0..res.model_calls)
            .filter_map(|t| match &script[t.min(script.len() - 1)] {
                Move::Ask(i) => Some(format!("Question {i}?")),
                _ => None,
            })
            .take(res.asks)
            .collect();
        let got: Vec<String> = res.context.turns().iter().map(|t| t.question.clone()).collect();
        prop_assert_eq!(got, asked);

        for m in &script {
            let out = parse_output(OutputFormat::Scored, &raw(m)).unwrap();
            let r1 = Route::from_output(&out);
            let r2 = Route::from_output(&out);
            prop_assert_eq!(&r1, &r2);
            let expected_ask = matches!(m, Move::Ask(_));
            prop_assert_eq!(matches!(r1.kind, RouteKind::Ask { .. }), expected_ask);
        }
    }
}

fn nav_world(targets: &[(f64, f64)], obstacles: Vec<Rect>) -> World {
    World {
        bounds: Rect::new(-4.0, -4.0, 4.0, 4.0),
        obstacles,
        objects: targets
            .iter()
            .enumerate()
            .map(|(i, (x, y))| WorldObject {
                position: Point::new(*x, *y),
                category: "lamp".into(),
                instance_id: i as u64,
                image: ImageRef::new(format!("lamp{i}.png")),
                is_target: i == 0,
            })
            .collect(),
        detector_radius: 1.0,
        detector_fov: 90.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn path_length_is_sum_of_moves(actions in prop::collection::vec(0u8..5, 0..200)) {
        let w = nav_world(&[(3.0, 3.0)], vec![Rect::new(1.0, -1.0, 1.5, 1.0)]);
        let mut s = AgentState::new(Pose::new(0.0, 0.0, 0.0));
        let mut moved = 0.0;
        for a in actions {
            let a = [Action::Forward, Action::TurnLeft, Action::TurnRight, Action::Stop, Action::Ask][a as usize];
            let next = apply_action(s, a, &w);
            moved += next.pose.position().distance(s.pose.position());
            prop_assert!(w.is_free(next.pose.position()));
            prop_assert!((0.0..360.0).contains(&next.pose.heading));
            s = next;
        }
        prop_assert!((s.path_length - moved).abs() < 1e-9);
    }

    #[test]
    fn nav_runs_are_deterministic_and_bounded(
        seed in any::<u64>(),
        tx in -3.5f64..3.5,
        ty in -3.5f64..3.5,
        accept in any::<bool>(),
    ) {
        let w = nav_world(&[(tx, ty), (-tx * 0.5, ty * 0.5)], vec![]);
        let spec = NavEpisodeSpec {
            id: "n".into(),
            start_pose: Pose::new(0.1, 0.1, 0.0),
            target_position: Point::new(tx, ty),
            shortest_path_length: Point::new(0.1, 0.1).distance(Point::new(tx, ty)).max(0.01),
            description: "brass lamp".into(),
            max_steps: 500,
            success_radius: 0.25,
        };
        let completion = if accept { Move::Accept } else { Move::Reject };
        let run = || {
            let mut q = ScriptedQuestioner::new(
                "q",
                OutputFormat::Scored,
                QuestionerScript { default: Some(raw(&completion)), ..Default::default() },
            );
            let mut o = ScriptedOracle::new("o", OracleScript::default());
            run_nav_episode(&w, &spec, &mut RandomWalk::new(seed), &mut q, &mut o, &NavConfig::default())
        };
        let a = run();
        prop_assert_eq!(&a, &run());
        if a.success {
            prop_assert!(a.steps_used <= 500);
            prop_assert!(a.final_distance <= 0.25);
        }
        let m = nav_metrics(std::slice::from_ref(&a)).unwrap();
        prop_assert!(m.spl <= m.sr);
    }
}

#[test]
fn mixes_are_seeded() {
    let mk = |q: Option<&str>| qask_core::TraceSample {
        description: "d".into(),
        observation: ImageRef::new("o"),
        reasoning: "r".into(),
        score: if q.is_some() { UncertaintyScore::UNSURE } else { UncertaintyScore::NOT_TARGET },
        question: q.map(Into::into),
        context: InteractionContext::new(),
        category: "c".into(),
        split: TraceSplit::Train,
    };
    let qs: Vec<_> = (0..30).map(|i| mk(Some(&format!("q{i}")))).collect();
    let ps: Vec<_> = (0..3).map(|_| mk(None)).collect();
    let a = build_sft_mix(qs.clone(), ps.clone(), MixRatio::default(), 11).unwrap();
    let b = build_sft_mix(qs.clone(), ps.clone(), MixRatio::default(), 11).unwrap();
    let c = build_sft_mix(qs, ps, MixRatio::default(), 12).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let distinct: BTreeSet<_> = a.iter().filter_map(|s| s.question.clone()).collect();
    assert_eq!(distinct.len(), 30);
}
