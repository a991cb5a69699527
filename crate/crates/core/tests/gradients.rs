mod common;

use common::{composite_cases, generator_case, primitive_cases, GradCase};

fn assert_all(cases: Vec<GradCase>) {
    let failed: Vec<String> = cases.iter().filter(|c| !c.passed()).map(GradCase::describe).collect();
    for c in &cases {
        println!("{}", c.describe());
    }
    assert!(failed.is_empty(), "gradient mismatches:\n{}", failed.join("\n"));
}

#[test]
fn primitives_match_finite_differences() {
    assert_all(primitive_cases());
}

#[test]
fn composite_losses_match_finite_differences() {
    assert_all(composite_cases());
}

#[test]
fn generator_matches_finite_differences() {
    assert_all(vec![generator_case()]);
}
