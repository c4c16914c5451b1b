use std::process::Command;

fn run(args: &[&str]) -> Option<i32> {
    Command::new(env!("CARGO_BIN_EXE_vecheart")).args(args).output().unwrap().status.code()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["train", "--stage", "7"]), Some(2));
    assert_eq!(run(&["no-such-command"]), Some(2));
}

#[test]
fn missing_artifacts_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    assert_eq!(run(&["checksum", "--ckpt", &p("none.vhck")]), Some(3));
    assert_eq!(run(&["train", "--stage", "1", "--data", &p("none.vhds"), "--out", &p("o")]), Some(3));
    assert_eq!(
        run(&["reconstruct", "--ckpt", &p("none.vhck"), "--data", &p("none.vhds"), "--out", &p("r")]),
        Some(3)
    );
}

#[test]
fn gen_data_succeeds_and_stage2_needs_stage1() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.vhds").to_string_lossy().into_owned();
    assert_eq!(run(&["gen-data", "--count", "5", "--seed", "3", "--out", &data]), Some(0));
    let out = dir.path().join("s2").to_string_lossy().into_owned();
    assert_eq!(run(&["train", "--stage", "2", "--data", &data, "--out", &out]), Some(3));
}
