use std::process::Command;

fn fetchlab(args: &[&str], out: &std::path::Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_fetchlab")).args(args).arg("--out").arg(out).output().unwrap()
}

#[test]
fn bad_listing_reports_line_and_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let listing = dir.path().join("bad.s");
    std::fs::write(&listing, "nop; len=1\nmov %eax, (x); len=16 write\n").unwrap();
    let o = fetchlab(&["decode", listing.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
}

#[test]
fn missing_file_and_bad_config_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(fetchlab(&["decode", "/nonexistent.s"], dir.path()).status.code(), Some(2));
    let o = fetchlab(&["decode", "builtin:small", "--set", "timing.p_slow_table.0=2"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unmet_requirement_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = fetchlab(&["attack", "branch", "--runs", "200", "--require", "1.01"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn decode_flags_window_crossing_store() {
    let dir = tempfile::tempdir().unwrap();
    let o = fetchlab(&["decode", "builtin:small"], dir.path());
    assert!(o.status.success());
    let csv = std::fs::read_to_string(dir.path().join("features.csv")).unwrap();
    let row = csv.lines().find(|l| l.starts_with("0x1d,")).unwrap();
    assert_eq!(row.split(',').nth(6), Some("true"));
}
