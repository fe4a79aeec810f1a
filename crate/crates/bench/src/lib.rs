//! Deterministic inputs for the engine benchmarks.

use nsp_core::ensemble::GateExample;
use nsp_core::metrics::AnswerBag;
use nsp_core::{Environment, Program};
use nsp_core::program::FunctionId;

/// A passage of `sentences` sentences, each with three numbers.
pub fn passage(sentences: usize) -> String {
    (0..sentences)
        .map(|i| {
            format!(
                "In week {} the team gained {} yards on {} plays, a {}.5 yard average and the second best mark. ",
                i + 1,
                100 + i * 7,
                20 + i % 9,
                i % 10
            )
        })
        .collect()
}

/// A balanced `add`/`diff` tree of the given depth over `N1`..`N8`.
pub fn program(depth: usize) -> Program {
    fn go(depth: usize, k: &mut usize) -> Program {
        if depth == 0 {
            *k += 1;
            return Program::token(format!("N{}", (*k - 1) % 8 + 1));
        }
        let f = if depth % 2 == 0 { FunctionId::Add } else { FunctionId::Diff };
        Program::call(f, vec![go(depth - 1, k), go(depth - 1, k)])
    }
    go(depth, &mut 0)
}

pub fn environment() -> Environment {
    (1..=8).map(|i| (format!("N{i}"), i as f64 * 3.5)).collect()
}

/// Predicted and gold bags with `n` multi-word spans each; half overlap.
pub fn span_bags(n: usize) -> (AnswerBag, AnswerBag) {
    let pred: Vec<String> = (0..n).map(|i| format!("player {i} of the home side")).collect();
    let gold: Vec<String> = (0..n)
        .map(|i| if i % 2 == 0 { format!("player {i} of the home side") } else { format!("kicker {i}") })
        .collect();
    (AnswerBag::new(&pred), AnswerBag::new(&gold))
}

/// `n` gate examples whose correct type is the one with the largest feature.
pub fn gate_examples(n: usize) -> Vec<GateExample> {
    (0..n)
        .map(|i| {
            let c = i % 5;
            GateExample {
                features: (0..5).map(|k| if k == c { 0.9 } else { ((i * 7 + k * 3) % 10) as f64 / 25.0 }).collect(),
                target: (0..5).map(|k| if k == c { 1.0 } else { 0.0 }).collect(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nsp_core::{evaluate, Value};

    #[test]
    fn fixtures_are_usable() {
        assert!(matches!(evaluate(&program(6), &environment()), Value::Number(_)));
        assert!(passage(3).contains("second"));
        assert_eq!(gate_examples(10).len(), 10);
    }
}
