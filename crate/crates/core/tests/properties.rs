use std::collections::BTreeMap;

use nsp_core::ensemble::{gate_train, objective, objective_gradient, select, GateExample, GateFeatures, GateModel, TrainConfig};
use nsp_core::executor::{nli_decide, Executor, NliLabel, Tolerance, Value};
use nsp_core::metrics::{instance_scores, max_assignment, normalize, pair_f1, AnswerBag};
use nsp_core::program::{format, parse, CmpOp, Function, FunctionId, Program};
use nsp_core::tagger::{tag, NumberLexicon, Role};
use nsp_core::{Answer, AnswerType, Environment, PredictionCandidate};
use proptest::prelude::*;

// ---------------------------------------------------------------------------
// Generators

fn token_name() -> impl Strategy<Value = String> {
    (prop::sample::select(vec!['N', 'Q', 'M']), 0u32..40).prop_map(|(c, i)| format!("{c}{i}"))
}

fn number_lit() -> impl Strategy<Value = f64> {
    prop_oneof![
        (-1000i64..1000).prop_map(|v| v as f64),
        (-1.0e6f64..1.0e6).prop_filter("finite", |v| v.is_finite()),
    ]
}

fn leaf() -> impl Strategy<Value = Program> {
    prop_oneof![
        4 => token_name().prop_map(Program::TokenRef),
        1 => number_lit().prop_map(Program::NumberLit),
    ]
}

fn numeric_expr() -> impl Strategy<Value = Program> {
    leaf().prop_recursive(4, 32, 4, |inner| {
        prop_oneof![
            (prop::sample::select(vec![FunctionId::Diff, FunctionId::Mul, FunctionId::Div]), inner.clone(), inner.clone())
                .prop_map(|(f, a, b)| Program::call(f, vec![a, b])),
            (
                prop::sample::select(vec![FunctionId::Add, FunctionId::Max, FunctionId::Min, FunctionId::Avg]),
                prop::collection::vec(inner.clone(), 2..5)
            )
                .prop_map(|(f, args)| Program::call(f, args)),
            prop::collection::vec(
                prop_oneof![inner.clone(), "[ -~]{0,8}".prop_map(Program::StringLit)],
                1..4
            )
            .prop_map(|args| Program::call(FunctionId::Count, args)),
            (
                prop::sample::select(vec![FunctionId::Year, FunctionId::Month, FunctionId::Hour]),
                any::<String>()
            )
                .prop_map(|(f, s)| Program::call(f, vec![Program::StringLit(s)])),
            ("[a-z][a-z0-9_]{0,6}", prop::collection::vec(inner, 1..3)).prop_map(|(name, args)| Program::Call {
                function: Function::from_name(&name),
                args
            }),
        ]
    })
}

fn any_program() -> impl Strategy<Value = Program> {
    prop_oneof![
        3 => numeric_expr(),
        1 => (numeric_expr(), numeric_expr(), prop::bool::ANY).prop_map(|(l, r, eq)| {
            Program::compare(if eq { CmpOp::Eq } else { CmpOp::Neq }, l, r)
        }),
    ]
}

fn env_values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1000.0f64..1000.0, n)
}

fn env_of(values: &[f64]) -> Environment {
    values.iter().enumerate().map(|(i, v)| (format!("N{i}"), *v)).collect()
}

fn tokens(n: usize) -> Vec<Program> {
    (0..n).map(|i| Program::token(format!("N{i}"))).collect()
}

fn num(v: Value) -> f64 {
    v.as_number().expect("numeric result")
}

// ---------------------------------------------------------------------------
// Tagger

proptest! {
    #[test]
    fn tagging_round_trips(text in any::<String>()) {
        let t = tag(&text, Role::Passage, &NumberLexicon::default(), 1);
        prop_assert_eq!(t.strip_annotations(), text.clone());
        let chars: Vec<char> = text.chars().collect();
        let mut last_start = None;
        for (i, b) in t.bindings.iter().enumerate() {
            prop_assert_eq!(&b.token_name, &format!("N{}", i + 1));
            prop_assert!(b.end <= chars.len());
            let surface: String = chars[b.start..b.end].iter().collect();
            prop_assert_eq!(&surface, &b.surface);
            if let Some(prev) = last_start {
                prop_assert!(b.start > prev);
            }
            last_start = Some(b.start);
        }
    }

    #[test]
    fn every_digit_run_is_covered(text in "[a-z0-9 .,\\-]{0,60}") {
        let t = tag(&text, Role::Premise, &NumberLexicon::default(), 1);
        // Oracle: scan maximal ASCII digit runs by hand and check each lies in a binding.
        let chars: Vec<char> = text.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            if chars[i].is_ascii_digit() {
                let start = i;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
                let covered = t.bindings.iter().any(|b| b.start <= start && i <= b.end);
                prop_assert!(covered, "digits at {}..{} of {:?} not covered", start, i, text);
            } else {
                i += 1;
            }
        }
    }

    #[test]
    fn tokens_never_retagged(text in "[a-z0-9 ]{0,40}") {
        let lex = NumberLexicon::default();
        let once = tag(&text, Role::Question, &lex, 0);
        let twice = tag(&once.annotated, Role::Question, &lex, 0);
        prop_assert_eq!(twice.bindings.len(), once.bindings.len());
    }
}

// ---------------------------------------------------------------------------
// Program language

proptest! {
    #[test]
    fn format_parse_round_trip(p in any_program()) {
        let text = format(&p);
        let back = parse(&text);
        prop_assert!(back.is_ok(), "{text:?} failed: {back:?}");
        prop_assert_eq!(back.unwrap(), p);
    }

    #[test]
    fn parse_is_total(s in any::<String>()) {
        if let Ok(p) = parse(&s) {
            let once = format(&p);
            let again = format(&parse(&once).unwrap());
            prop_assert_eq!(once, again);
        }
    }

    #[test]
    fn parse_is_total_on_program_alphabet(s in "[a-zNQM0-9(),=!\" .\\-]{0,40}") {
        if let Ok(p) = parse(&s) {
            prop_assert_eq!(parse(&format(&p)).unwrap(), p);
        }
    }

    #[test]
    fn valid_programs_only_fail_at_runtime(p in numeric_expr(), values in env_values(40)) {
        let mut env = Environment::new();
        for (i, v) in values.iter().enumerate() {
            for c in ['N', 'Q', 'M'] {
                env.insert(format!("{c}{i}"), *v);
            }
        }
        let report = nsp_core::program::validate(&p, &env.keys().cloned().collect());
        let out = Executor::default().run(&p, &env);
        if report.is_valid() {
            if let Some(reason) = out.null_reason {
                use nsp_core::NullReason::*;
                prop_assert!(matches!(reason, DivisionByZero | DateParse | NonFinite), "{p}: {reason}");
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Executor algebra

proptest! {
    #[test]
    fn set_functions_ignore_order(values in env_values(6), seed in any::<u64>()) {
        let env = env_of(&values);
        let args = tokens(6);
        let mut shuffled = args.clone();
        // Deterministic Fisher-Yates from the seed.
        let mut s = seed;
        for i in (1..shuffled.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        let ex = Executor::default();
        for f in [FunctionId::Add, FunctionId::Max, FunctionId::Min, FunctionId::Avg, FunctionId::Count] {
            let a = num(ex.evaluate(&Program::call(f, args.clone()), &env));
            let b = num(ex.evaluate(&Program::call(f, shuffled.clone()), &env));
            let scale = values.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
            prop_assert!((a - b).abs() <= 1e-12 * scale, "{f}: {a} vs {b}");
        }
    }

    #[test]
    fn algebraic_identities(values in env_values(5)) {
        let env = env_of(&values);
        let ex = Executor::default();
        let t = tokens(5);
        let diff_ab = num(ex.evaluate(&Program::call(FunctionId::Diff, vec![t[0].clone(), t[1].clone()]), &env));
        let diff_ba = num(ex.evaluate(&Program::call(FunctionId::Diff, vec![t[1].clone(), t[0].clone()]), &env));
        prop_assert_eq!(diff_ab, -diff_ba);
        let mul_ab = num(ex.evaluate(&Program::call(FunctionId::Mul, vec![t[0].clone(), t[1].clone()]), &env));
        let mul_ba = num(ex.evaluate(&Program::call(FunctionId::Mul, vec![t[1].clone(), t[0].clone()]), &env));
        prop_assert_eq!(mul_ab, mul_ba);

        let avg = num(ex.evaluate(&Program::call(FunctionId::Avg, t.clone()), &env));
        let sum = num(ex.evaluate(&Program::call(FunctionId::Add, t.clone()), &env));
        let count = num(ex.evaluate(&Program::call(FunctionId::Count, t.clone()), &env));
        let lo = num(ex.evaluate(&Program::call(FunctionId::Min, t.clone()), &env));
        let hi = num(ex.evaluate(&Program::call(FunctionId::Max, t.clone()), &env));
        prop_assert_eq!(count, 5.0);
        prop_assert!((avg - sum / count).abs() <= 1e-9);
        prop_assert!(lo <= avg + 1e-9 && avg <= hi + 1e-9);
    }

    #[test]
    fn null_is_strict(values in env_values(3), which in 0usize..4) {
        let env = env_of(&values);
        let poison = Program::call(FunctionId::Div, vec![Program::token("N0"), Program::NumberLit(0.0)]);
        let mut args = tokens(3);
        args.insert(which.min(args.len()), poison);
        let ex = Executor::default();
        for f in [FunctionId::Add, FunctionId::Max, FunctionId::Min, FunctionId::Avg, FunctionId::Count] {
            prop_assert_eq!(ex.evaluate(&Program::call(f, args.clone()), &env), Value::Null);
        }
        let nested = Program::call(FunctionId::Diff, vec![Program::call(FunctionId::Add, args), Program::token("N1")]);
        prop_assert_eq!(ex.evaluate(&nested, &env), Value::Null);
    }

    #[test]
    fn tolerance_is_sound(x in -1e6f64..1e6, dy in -1e-3f64..1e-3) {
        let tol = Tolerance::default();
        let y = x + dy;
        let env: Environment = [("N1".to_string(), x), ("N2".to_string(), y)].into();
        let ex = Executor::new(tol);
        let eq = ex.evaluate(&parse("N1=N2").unwrap(), &env);
        let ne = ex.evaluate(&parse("N1!=N2").unwrap(), &env);
        let expected = (x - y).abs() <= tol.abs.max(tol.rel * x.abs().max(y.abs()));
        prop_assert_eq!(eq, Value::Boolean(expected));
        prop_assert_eq!(ne, Value::Boolean(!expected));
    }
}

#[test]
fn nli_truth_table_is_exhaustive() {
    let vals = [Value::Boolean(true), Value::Boolean(false), Value::Null];
    let mut seen = BTreeMap::new();
    for e in vals {
        for c in vals {
            let expected = match (e, c) {
                (Value::Boolean(true), Value::Boolean(false)) => NliLabel::Entailment,
                (Value::Boolean(false), Value::Boolean(true)) => NliLabel::Contradiction,
                (Value::Boolean(false), Value::Boolean(false)) => NliLabel::Neutral,
                _ => NliLabel::Invalid,
            };
            assert_eq!(nli_decide(e, c), expected, "{e:?} {c:?}");
            *seen.entry(expected).or_insert(0) += 1;
        }
    }
    assert_eq!(seen[&NliLabel::Invalid], 6);
    // Numbers are not truth values either.
    assert_eq!(nli_decide(Value::Number(1.0), Value::Boolean(false)), NliLabel::Invalid);
}

// ---------------------------------------------------------------------------
// Metrics

/// Oracle: best one-to-one alignment by trying every injective map.
fn brute_force_alignment(m: &[Vec<f64>]) -> f64 {
    fn go(m: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
        if row == m.len() {
            return 0.0;
        }
        // Leaving a row unmatched is only optimal when rows outnumber columns.
        let mut best = go(m, row + 1, used);
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                best = best.max(m[row][j] + go(m, row + 1, used));
                used[j] = false;
            }
        }
        best
    }
    let cols = m.first().map_or(0, Vec::len);
    go(m, 0, &mut vec![false; cols])
}

fn span() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["kris", "brown", "the", "29", "24", "yard", "field", "a", "1,000", "goal"]), 0..4)
        .prop_map(|w| w.join(" "))
}

proptest! {
    #[test]
    fn alignment_is_optimal(m in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 1..7), 1..7)) {
        let cols = m[0].len();
        let m: Vec<Vec<f64>> = m.into_iter().map(|mut r| { r.resize(cols, 0.5); r }).collect();
        let fast = max_assignment(&m);
        let slow = brute_force_alignment(&m);
        prop_assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
    }

    #[test]
    fn instance_f1_matches_brute_force(pred in prop::collection::vec(span(), 0..5), gold in prop::collection::vec(span(), 0..5)) {
        let (p, g) = (AnswerBag::new(&pred), AnswerBag::new(&gold));
        let (em, f1) = instance_scores(&p, &g);
        prop_assert!((0.0..=1.0).contains(&f1));
        prop_assert!(em == 0.0 || em == 1.0);
        if em == 1.0 {
            prop_assert!((f1 - 1.0).abs() < 1e-12);
        }
        let dedup = |b: &AnswerBag| {
            let mut v = b.spans.clone();
            v.sort();
            v.dedup();
            v
        };
        let (ps, gs) = (dedup(&p), dedup(&g));
        let denom = ps.len().max(gs.len());
        if denom > 0 {
            let m: Vec<Vec<f64>> = ps.iter().map(|a| gs.iter().map(|b| pair_f1(a, b)).collect()).collect();
            let oracle = if m.is_empty() || m[0].is_empty() { 0.0 } else { brute_force_alignment(&m) } / denom as f64;
            prop_assert!((f1 - oracle).abs() < 1e-9);
        }
        prop_assert_eq!(instance_scores(&p, &p), (1.0, 1.0));
    }

    #[test]
    fn numeric_canonicalisation(int in 0u32..100000, frac in 0u32..100) {
        let a = format!("{int}.{frac:02}");
        let b = format!("{int}.{frac:02}000");
        prop_assert_eq!(normalize(&a), normalize(&b));
    }
}

// ---------------------------------------------------------------------------
// Gate

fn random_model(rng: &mut impl FnMut() -> f64, n_in: usize, n_out: usize) -> GateModel {
    let mut m = GateModel::zeros(n_in, n_out);
    for w in &mut m.weights {
        *w = 2.0 * rng() - 1.0;
    }
    for b in &mut m.bias {
        *b = 2.0 * rng() - 1.0;
    }
    m
}

fn lcg(seed: u64) -> impl FnMut() -> f64 {
    let mut s = seed;
    move || {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (s >> 11) as f64 / (1u64 << 53) as f64
    }
}

#[test]
fn analytic_gradient_matches_central_differences() {
    let h = 1e-5;
    for trial in 0..120u64 {
        let mut rng = lcg(trial + 1);
        let (n_in, n_out) = (1 + trial as usize % 5, 1 + (trial as usize / 5) % 5);
        let model = random_model(&mut rng, n_in, n_out);
        let data: Vec<GateExample> = (0..4)
            .map(|_| GateExample {
                features: (0..n_in).map(|_| rng()).collect(),
                target: (0..n_out).map(|_| rng()).collect(),
            })
            .collect();
        let (gw, gb) = objective_gradient(&model, &data);
        let mut worst: f64 = 0.0;
        for i in 0..model.weights.len() {
            let (mut plus, mut minus) = (model.clone(), model.clone());
            plus.weights[i] += h;
            minus.weights[i] -= h;
            let fd = (objective(&plus, &data) - objective(&minus, &data)) / (2.0 * h);
            worst = worst.max((fd - gw[i]).abs());
        }
        for k in 0..model.bias.len() {
            let (mut plus, mut minus) = (model.clone(), model.clone());
            plus.bias[k] += h;
            minus.bias[k] -= h;
            let fd = (objective(&plus, &data) - objective(&minus, &data)) / (2.0 * h);
            worst = worst.max((fd - gb[k]).abs());
        }
        assert!(worst <= 1e-6, "trial {trial}: max abs diff {worst}");
    }
}

proptest! {
    #[test]
    fn gate_is_lipschitz(seed in any::<u64>(), k in 0usize..5, eps in 0.0f64..0.2) {
        let mut rng = lcg(seed);
        let model = random_model(&mut rng, 5, 5);
        let q: Vec<f64> = (0..5).map(|_| rng() * 0.8).collect();
        let mut q2 = q.clone();
        q2[k] += eps;
        let p1 = model.score(&GateFeatures(q)).unwrap();
        let p2 = model.score(&GateFeatures(q2)).unwrap();
        let bound = eps * model.weight_inf_norm() / 4.0 + 1e-15;
        for (a, b) in p1.iter().zip(&p2) {
            prop_assert!((a - b).abs() <= bound);
            prop_assert!(*a > 0.0 && *a < 1.0);
        }
    }

    #[test]
    fn selection_never_picks_null(p in prop::collection::vec(0.0f64..1.0, 5), nulls in prop::collection::vec(any::<bool>(), 5)) {
        let cands: Vec<PredictionCandidate> = AnswerType::ALL
            .into_iter()
            .zip(&nulls)
            .map(|(t, &null)| PredictionCandidate::new(t, if null { Answer::Null } else { Answer::Number(1.0) }, 0.5))
            .collect();
        match select(&cands, &p) {
            Ok(c) => {
                prop_assert!(!c.answer.is_null());
                // Depends on p only through the ordering: a monotone transform keeps the choice.
                let squashed: Vec<f64> = p.iter().map(|x| x.powi(3) * 0.5 + 0.1).collect();
                prop_assert_eq!(select(&cands, &squashed).unwrap().answer_type, c.answer_type);
            }
            Err(_) => prop_assert!(nulls.iter().all(|&n| n)),
        }
    }
}

#[test]
fn training_is_deterministic_and_monotone() {
    let mut rng = lcg(99);
    let data: Vec<GateExample> = (0..60)
        .map(|_| {
            let c = (rng() * 5.0) as usize % 5;
            GateExample {
                features: (0..5).map(|k| if k == c { 0.6 + 0.4 * rng() } else { 0.4 * rng() }).collect(),
                target: (0..5).map(|k| if k == c { 1.0 } else { 0.0 }).collect(),
            }
        })
        .collect();
    let config = TrainConfig { learning_rate: 1e-2, epochs: 300, seed: 5, l2: 0.0 };
    let (a, trace) = nsp_core::ensemble::gate_train_traced(&data, &config).unwrap();
    let b = gate_train(&data, &config).unwrap();
    assert_eq!(a, b);
    assert!(a.weights.iter().zip(&b.weights).all(|(x, y)| x.to_bits() == y.to_bits()));
    for w in trace.losses.windows(2) {
        assert!(w[1] <= w[0], "loss increased: {} -> {}", w[0], w[1]);
    }
    let other = gate_train(&data, &TrainConfig { seed: 6, ..config }).unwrap();
    assert_ne!(a.weights, other.weights);
}
