use std::process::Command;

fn dpmkv(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_dpmkv")).args(args).output().unwrap()
}

#[test]
fn micro_prints_rtt_table() {
    let out = dpmkv(&["micro"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut rows = csv::Reader::from_reader(text.as_bytes());
    assert_eq!(rows.headers().unwrap().iter().next(), Some("store"));
    assert_eq!(rows.records().count(), 4);
}

#[test]
fn bad_arguments_exit_with_two() {
    assert_eq!(dpmkv(&["bench", "--store", "nope"]).status.code(), Some(2));
    assert_eq!(dpmkv(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn small_bench_writes_one_row() {
    let out = dpmkv(&[
        "bench", "--store", "sep", "--keys", "200", "--ops", "1000", "--cns", "1", "--dpms", "2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 2);
}
