use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use urbanplan::golden::golden_corpus;
use urbanplan::plan::{canonical_structure, IssueKind};
use urbanplan::testkit::*;
use urbanplan::{canonicalize, parse_relaxed, serialize_strict, topo_order, validate, ParseError, TaskType};

#[test]
fn golden_corpus_parses_and_validates() {
    let corpus = golden_corpus();
    assert_eq!(corpus.len(), 34);
    for item in corpus {
        let plan = item.parse().unwrap_or_else(|e| panic!("item {}: {e}", item.index));
        let report = validate(&plan);
        assert!(report.is_ok(), "item {}: {:?}", item.index, report.violations().collect::<Vec<_>>());
    }
}

#[test]
fn golden_dangling_deps_are_warnings() {
    for index in [21, 23, 24] {
        let plan = golden_corpus()[index - 1].plan();
        assert!(validate(&plan).has(IssueKind::DanglingDep), "item {index}");
    }
}

#[test]
fn golden_canonicalize_is_idempotent_and_round_trips() {
    for item in golden_corpus() {
        let plan = item.plan();
        let c = canonicalize(&plan).unwrap();
        assert_eq!(canonicalize(&c).unwrap(), c, "item {}", item.index);
        let text = serialize_strict(&c);
        assert_eq!(parse_relaxed(&text).unwrap(), c, "item {}", item.index);
        assert_eq!(serialize_strict(&parse_relaxed(&text).unwrap()), text);
    }
}

#[test]
fn golden_item_31_order() {
    let plan = golden_corpus()[30].plan();
    let order = topo_order(&plan).unwrap();
    assert_eq!(order[0], 5);
    let pos = |id| order.iter().position(|&x| x == id).unwrap();
    assert!(pos(4) < pos(0));
}

#[test]
fn canonicalize_is_invariant_under_id_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let corpus = golden_corpus();
    for k in 0..200 {
        let base = if k % 2 == 0 { corpus[k % corpus.len()].plan() } else { random_plan(&mut rng, 8) };
        let permuted = permute_ids(&base, &mut rng);
        let a = canonicalize(&base).unwrap();
        let b = canonicalize(&permuted).unwrap();
        assert_eq!(serialize_strict(&a), serialize_strict(&b), "case {k}");
        assert!(isomorphic_oracle(&base, &a));
    }
}

#[test]
fn structure_equality_matches_isomorphism_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut equal_seen = 0;
    for _ in 0..400 {
        let a = random_dag(&mut rng, 5);
        let b = if rand::Rng::random_bool(&mut rng, 0.5) { permute_ids(&a, &mut rng) } else { random_dag(&mut rng, 5) };
        let same = canonical_structure(&a).unwrap() == canonical_structure(&b).unwrap();
        assert_eq!(same, isomorphic_oracle(&a, &b));
        equal_seen += usize::from(same);
    }
    assert!(equal_seen > 100);
}

#[test]
fn topo_order_respects_every_edge() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..500 {
        let plan = random_dag(&mut rng, 12);
        let order = topo_order(&plan).unwrap();
        assert!(is_topological_oracle(&plan, &order));
    }
}

#[test]
fn cycle_detection_matches_closure_oracle_on_small_digraphs() {
    use urbanplan::{Plan, TaskNode};
    // Every digraph (self loops included) on 1..=4 labeled nodes.
    for n in 1u32..=4 {
        let pairs: Vec<(u32, u32)> = (0..n).flat_map(|a| (0..n).map(move |b| (a, b))).collect();
        for mask in 0u64..(1 << pairs.len()) {
            let tasks = (0..n)
                .map(|id| {
                    let deps: Vec<i64> = pairs
                        .iter()
                        .enumerate()
                        .filter(|(i, (_, to))| mask >> i & 1 == 1 && *to == id)
                        .map(|(_, (from, _))| i64::from(*from))
                        .collect();
                    let node = TaskNode::new(TaskType::MapMapping, id);
                    if deps.is_empty() { node } else { node.with_dep(deps) }
                })
                .collect();
            let plan = Plan::new(tasks);
            let cyclic = has_cycle_oracle(&plan);
            assert_eq!(topo_order(&plan).is_err(), cyclic);
            assert_eq!(validate(&plan).has(IssueKind::Cycle), cyclic);
            assert_eq!(canonicalize(&plan).is_err(), cyclic);
        }
    }
}

#[test]
fn strict_round_trip_on_random_plans() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let plan = random_plan(&mut rng, 6);
        let text = serialize_strict(&plan);
        let back = parse_relaxed(&text).unwrap_or_else(|e| panic!("{e}\n{text}"));
        assert_eq!(back, plan, "{text}");
        assert_eq!(serialize_strict(&back), text);
    }
}

/// Inserts whitespace around structural characters outside quoted strings.
fn respace(text: &str) -> String {
    let mut out = String::new();
    let mut quote: Option<char> = None;
    let mut escaped = false;
    for c in text.chars() {
        match quote {
            Some(q) => {
                out.push(c);
                if escaped {
                    escaped = false;
                } else if c == '\\' {
                    escaped = true;
                } else if c == q {
                    quote = None;
                }
            }
            None => match c {
                '"' | '\'' => {
                    quote = Some(c);
                    out.push(c);
                }
                ',' | ':' | '[' | '{' => {
                    out.push_str(" \n\t");
                    out.push(c);
                    out.push_str("\r\n  ");
                }
                _ => out.push(c),
            },
        }
    }
    out
}

#[test]
fn whitespace_between_tokens_is_insignificant() {
    for item in golden_corpus() {
        let spaced = respace(&item.answer);
        assert_ne!(spaced, item.answer);
        assert_eq!(parse_relaxed(&spaced).unwrap(), item.plan(), "item {}", item.index);
    }
}

#[test]
fn mutated_inputs_never_panic() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let corpus = golden_corpus();
    for k in 0..3000 {
        let text = mutate_text(&corpus[k % corpus.len()].answer, &mut rng);
        match parse_relaxed(&text) {
            Ok(plan) => {
                let _ = validate(&plan);
                let _ = canonicalize(&plan);
            }
            Err(ParseError::Syntax { offset, .. }) | Err(ParseError::UnknownTaskType { offset, .. }) => {
                assert!(offset <= text.len());
            }
            Err(ParseError::NoPlanFound) => {}
        }
    }
}

#[test]
fn deep_nesting_is_rejected_not_overflowed() {
    let text = format!("{}{}", "[".repeat(100_000), "]".repeat(100_000));
    assert!(parse_relaxed(&text).is_err());
}

proptest::proptest! {
    #[test]
    fn canonical_form_is_stable(plan in plan_strategy(7)) {
        let c = canonicalize(&plan).unwrap();
        proptest::prop_assert_eq!(canonicalize(&c).unwrap(), c.clone());
        proptest::prop_assert!(validate(&c).is_ok());
        let ids: Vec<u32> = c.tasks.iter().map(|t| t.id).collect();
        proptest::prop_assert_eq!(ids, (0..plan.len() as u32).collect::<Vec<_>>());
    }
}
