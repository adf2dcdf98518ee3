use std::process::{Command, Output};

use effstack_bench::bench::run_async_oracle;

const BENCH: &str = env!("CARGO_BIN_EXE_effstack-bench");
const AD_DEMO: &str = env!("CARGO_BIN_EXE_ad-demo");

fn bench(args: &[&str]) -> Output {
    Command::new(BENCH).args(args).env_remove("EFFSTACK_STRATEGY").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn csv_has_the_documented_columns() {
    let out = bench(&["complex", "--strategy", "segmented", "--iters", "25", "--repeats", "5"]);
    assert!(out.status.success());
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("benchmark,strategy,params,repeats,median_ns,output_value"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[..4], ["complex", "segmented", "iters=25", "5"]);
    assert!(row[4].parse::<u64>().unwrap() > 0);
    assert_eq!(row[5], "25");
    assert_eq!(lines.next(), None);
}

#[test]
fn default_strategy_comes_from_the_environment() {
    let out = Command::new(BENCH)
        .args(["switch", "--repeats", "5"])
        .env("EFFSTACK_STRATEGY", "overcommit-kernel")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(stdout(&out).contains("switch,overcommit-kernel,frame_size=153600,5,"));
    assert!(stdout(&bench(&["switch", "--repeats", "5"])).contains("switch,fixed,"));
}

#[test]
fn expand_under_fixed_is_a_documented_skip() {
    let out = bench(&["expand", "--strategy", "fixed"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("skipped"));
}

#[test]
fn all_runs_every_strategy_and_skips_only_fixed_for_expand() {
    let out = bench(&["expand", "--strategy", "all", "--depth", "10", "--repeats", "5"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    let strategies: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(strategies, ["segmented", "overcommit-kernel", "overcommit-user"]);
}

#[test]
fn table_format_aligns_columns() {
    let out = bench(&["mt", "--strategy", "fixed", "--threads", "2", "--iters", "3", "--format", "table"]);
    assert!(out.status.success());
    let text = stdout(&out);
    let header = text.lines().next().unwrap();
    assert!(header.starts_with("benchmark  strategy"));
    let col = header.find("output_value").unwrap();
    let row = text.lines().nth(1).unwrap();
    let expected: i64 = (1..=2).map(|t| 1000 * run_async_oracle(3, t)).sum();
    assert_eq!(row[col..].trim(), expected.to_string());
}

#[test]
fn usage_errors_exit_64() {
    assert_eq!(bench(&["warp"]).status.code(), Some(64));
    assert_eq!(bench(&["switch", "--strategy", "stackless"]).status.code(), Some(64));
    assert_eq!(bench(&["switch", "--repeats", "4"]).status.code(), Some(64));
    assert_eq!(bench(&["--help"]).status.code(), Some(0));
}

#[test]
fn ad_demo_prints_six_decimals() {
    let out = Command::new(AD_DEMO).args(["1", "--strategy", "overcommit-user"]).output().unwrap();
    assert!(out.status.success());
    assert_eq!(stdout(&out), "iters: 1\n-1.000000\n");
}
