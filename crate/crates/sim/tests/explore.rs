use ros_sim::{explore_interleavings, permutations, run_script, Script, SimError};

const TWO_PUBLISHERS: &str = r#"
name = "race"

[[actor]]
id = "a"

[[actor]]
id = "b"

[[step]]
actor = "a"
action = "open"

[[step]]
actor = "a"
action = "register"

[[step]]
actor = "b"
action = "open"

[[step]]
actor = "b"
action = "register"

[[group]]
at = 1.0
steps = [
    { actor = "a", action = "publish", version = 1 },
    { actor = "b", action = "publish", version = 1 },
]

[[assert]]
kind = "before"
first = "server published a"
then = "server published b"
"#;

#[test]
fn unknown_actor_is_an_invalid_script() {
    let err = Script::parse(
        r#"
[[step]]
actor = "ghost"
action = "open"
"#,
    )
    .unwrap_err();
    assert_eq!(err, SimError::UnknownActor("ghost".into()));
    assert!(err.to_string().starts_with("invalid script"));
}

#[test]
fn malformed_script_is_rejected() {
    let err = Script::parse("[[step]]\nactor = 1\n").unwrap_err();
    assert!(err.to_string().starts_with("invalid script"));
}

#[test]
fn empty_script_gives_an_empty_trace() {
    let run = run_script(&Script::default()).unwrap();
    assert!(run.trace.is_empty(), "{}", run.trace);
    assert!(run.records.is_empty());
}

#[test]
fn single_step_group_runs_once() {
    let s = Script::parse(
        r#"
[[actor]]
id = "a"

[[group]]
steps = [{ actor = "a", action = "open" }]
"#,
    )
    .unwrap();
    assert_eq!(s.interleavings(), 1);
    let ex = explore_interleavings(&s, 1).unwrap();
    assert_eq!(ex.runs, 1);
    assert!(ex.passed());
}

#[test]
fn too_many_interleavings_are_refused_with_the_count() {
    let s = Script::parse(TWO_PUBLISHERS).unwrap();
    assert_eq!(
        explore_interleavings(&s, 1).unwrap_err(),
        SimError::TooManyInterleavings { count: 2, bound: 1 }
    );
}

#[test]
fn failing_order_is_written_as_a_replay() {
    let s = Script::parse(TWO_PUBLISHERS).unwrap();
    let ex = explore_interleavings(&s, 2).unwrap();
    assert_eq!(ex.runs, 2);
    assert_eq!(ex.failures.len(), 1);
    let f = &ex.failures[0];
    assert_eq!(f.orders, vec![vec![1, 0]]);
    assert!(f.replay.groups.is_empty());

    let dir = tempfile::tempdir().unwrap();
    let path = f.write_replay(dir.path(), 0).unwrap();
    assert_eq!(path.file_name().unwrap(), "race.replay-0.toml");
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("# violated: "));
    // The replay reproduces the same trace and the same violation.
    let replay = Script::parse(&text).unwrap();
    let run = run_script(&replay).unwrap();
    assert_eq!(run.trace, f.trace);
    assert_eq!(run.trace.violations(&replay.asserts), f.violations);
}

#[test]
fn permutation_counts() {
    assert_eq!(permutations(0).len(), 1);
    assert_eq!(permutations(3).len(), 6);
    assert_eq!(permutations(4).len(), 24);
}
