use std::process::Command;

fn hrc() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hrc"));
    for (key, _) in std::env::vars().filter(|(k, _)| k.starts_with("HRC_")) {
        cmd.env_remove(key);
    }
    cmd
}

#[test]
fn run_writes_csv_report() {
    let dir = tempfile::tempdir().unwrap();
    let suite = dir.path().join("suite.toml");
    std::fs::write(
        &suite,
        "[[experiments]]\ntask = \"Catch bowl\"\ncommand = \"catch the bowl\"\nn = 20\nseed = 0\n\n\
         [[experiments]]\ncommand = \"catch the cup\"\nn = 10\n",
    )
    .unwrap();
    let out = dir.path().join("metrics.csv");
    let status = hrc()
        .args(["run", "--suite"])
        .arg(&suite)
        .args(["--format", "csv", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(
        std::fs::read_to_string(&out).unwrap(),
        "Task,Num,Fns,SR,Exec,FSB\nCatch bowl,20,2,0.00,1.00,0.00\ncatch the cup,10,3,1.00,1.00,1.00\n"
    );

    let text = hrc().args(["run", "--suite"]).arg(&suite).output().unwrap();
    assert!(text.status.success());
    assert!(String::from_utf8(text.stdout).unwrap().starts_with("Task"));
}

#[test]
fn plan_prints_json() {
    let out = hrc()
        .args(["plan", "clean the top of the cabinet"])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let plan: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(plan["layer"], "first");
    assert!(plan["total_functions"].as_u64().unwrap() > 10);
}

#[test]
fn bad_input_fails_cleanly() {
    let out = hrc()
        .args(["run", "--suite", "/nonexistent/suite.toml"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("hrc: "));
    let out = hrc()
        .args(["plan", "catch the cup"])
        .env("HRC_BACKEND", "oracle")
        .output()
        .unwrap();
    assert!(!out.status.success());
}
