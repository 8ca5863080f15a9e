use std::path::Path;
use std::process::{Command, Output};

fn znsraid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_znsraid"))
        .args(args)
        .output()
        .expect("spawn znsraid")
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

const SMALL: [&str; 4] = ["--zones", "16", "--zone-capacity", "256"];

#[test]
fn geometry_prints_key_value_lines() {
    let out = znsraid(&["geometry", "--zone-capacity", "275712", "--chunk-blocks", "1"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l == "header_blocks 1"));
    assert!(text.lines().any(|l| l == "footer_blocks 1345"));
}

#[test]
fn replay_of_a_small_trace_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.csv");
    std::fs::write(
        &trace,
        "time_us,op,offset,length\n0,W,0,8192\n10,W,8192,4096\n20,R,0,12288\n",
    )
    .unwrap();
    let csv = dir.path().join("out.csv");
    let mut args = vec!["replay", path(&trace), "--out", path(&csv)];
    args.extend(SMALL);
    let out = znsraid(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = std::fs::read_to_string(&csv).unwrap();
    let mut lines = rows.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| row[header.iter().position(|h| *h == name).unwrap()];
    assert_eq!(col("reads"), "1");
    assert_eq!(col("writes"), "2");
    assert_eq!(col("verify_failures"), "0");
}

#[test]
fn malformed_trace_exits_2_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("bad.csv");
    std::fs::write(&trace, "time_us,op,offset,length\n0,W,0,4096\n5,W,100,4096\n").unwrap();
    let mut args = vec!["replay", path(&trace)];
    args.extend(SMALL);
    let out = znsraid(&args);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("trace line 3"));
}

#[test]
fn rebuild_refuses_too_many_failures() {
    let mut args = vec!["rebuild", "--scheme", "raid5", "--fail", "0,1", "--fill", "1M"];
    args.extend(SMALL);
    assert_eq!(znsraid(&args).status.code(), Some(2));
}

#[test]
fn convert_trace_writes_native_format() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("cloud.csv");
    std::fs::write(&src, "1,W,5000,100,1000\n2,R,0,4096,1001\n1,R,8192,8192,1004\n").unwrap();
    let dst = dir.path().join("native.csv");
    let out = znsraid(&[
        "convert-trace",
        path(&src),
        "--device",
        "1",
        "--capacity",
        "1M",
        "--out",
        path(&dst),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        std::fs::read_to_string(&dst).unwrap(),
        "time_us,op,offset,length\n0,W,4096,4096\n4,R,8192,8192\n"
    );
}

#[test]
fn unknown_scheme_is_an_error() {
    let mut args = vec!["bench", "--scheme", "raid7", "--total", "1M"];
    args.extend(SMALL);
    assert_eq!(znsraid(&args).status.code(), Some(2));
}
