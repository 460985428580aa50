use std::path::Path;
use std::process::{Command, Output};

use formwiki::corpus::fixture_sources;
use serde_json::Value;

fn write_fixture(dir: &Path) {
    for (p, s) in fixture_sources() {
        let f = dir.join(p.source_file());
        std::fs::create_dir_all(f.parent().unwrap()).unwrap();
        std::fs::write(f, s).unwrap();
    }
}

fn run(store: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_formwiki"))
        .arg("--store")
        .arg(store)
        .args(["--workers", "2"])
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout)
        .unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

#[test]
fn command_line() {
    let lib = tempfile::tempdir().unwrap();
    write_fixture(lib.path());
    let tmp = tempfile::tempdir().unwrap();
    let store = tmp.path().join("store");

    let o = run(&store, &["init", lib.path().to_str().unwrap()]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let o = run(&store, &["init", lib.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));

    let o = run(&store, &["stats", "main", "--granularity", "item"]);
    assert_eq!(o.status.code(), Some(0));
    let v = json(&o);
    assert_eq!(
        (v["deps"].as_u64(), v["tdeps"].as_u64()),
        (Some(8), Some(11))
    );
    let v = json(&run(&store, &["stats", "main", "--granularity", "file"]));
    assert_eq!(v["deps"].as_u64(), Some(15));

    let o = run(&store, &["verify", "main", "--mode", "full"]);
    assert_eq!(o.status.code(), Some(0));
    let v = json(&o);
    assert_eq!((v["items"].as_u64(), v["ok"].as_u64()), (Some(6), Some(6)));

    let v = json(&run(&store, &["mindeps", "main", "calc#use"]));
    assert_eq!(
        v,
        serde_json::json!(["calc#six", "nat#add_comm", "nat#three", "nat#two"])
    );

    let o = run(&store, &["policy-check", "anon", "main", "read"]);
    assert_eq!(
        (o.status.code(), String::from_utf8_lossy(&o.stdout).trim()),
        (Some(0), "allow")
    );
    let o = run(&store, &["policy-check", "anon", "main", "write"]);
    assert_eq!(
        (o.status.code(), String::from_utf8_lossy(&o.stdout).trim()),
        (Some(1), "deny")
    );

    let o = run(&store, &["clone-bench", "2"]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert_eq!(json(&o)["n"], 2);

    assert_eq!(run(&store, &["stats", "nope"]).status.code(), Some(1));
    assert_eq!(run(&store, &["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        run(&store, &["policy-check", "anon", "main", "fly"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        run(&tmp.path().join("missing"), &["stats", "main"])
            .status
            .code(),
        Some(1)
    );
}
