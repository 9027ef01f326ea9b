use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_bsde-lab"));
    c.env_remove("BSDE_LAB_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn outputs_are_byte_identical_across_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "lin.json",
        "{\n  // small run\n  \"field\": \"triangular-3\", \"paths\": 1500, \"steps\": 12, \"seed\": 9\n}",
    );
    let mut outs = Vec::new();
    for threads in ["1", "4", "4"] {
        let dir = tmp.path().join(format!("out{}", outs.len()));
        let o = run(&["--threads", threads, "solve-linear", "--config", &cfg, "--out", dir.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        outs.push(read_dir_sorted(&dir));
    }
    assert_eq!(outs[0], outs[1]);
    assert_eq!(outs[1], outs[2]);
    let names: Vec<&str> = outs[0].iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["solution.csv", "summary.json"]);
}

#[test]
fn exponential_csv_reproducible_and_seed_sensitive() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let c = tmp.path().join("c");
    let base = ["simulate-exponential", "--field", "generic-2x2-d2", "--seed", "3"];
    for (dir, threads) in [(&a, "1"), (&b, "3")] {
        let mut args = base.to_vec();
        args.extend(["--out", dir.to_str().unwrap()]);
        let o = bin().env("BSDE_LAB_THREADS", threads).args(&args).output().unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let o = run(&["simulate-exponential", "--field", "generic-2x2-d2", "--seed", "4", "--out", c.to_str().unwrap()]);
    assert!(o.status.success());
    let csv_a = std::fs::read(a.join("defect.csv")).unwrap();
    assert_eq!(csv_a, std::fs::read(b.join("defect.csv")).unwrap());
    assert_ne!(csv_a, std::fs::read(c.join("defect.csv")).unwrap());
    // 17 significant digits, so values round-trip.
    let text = String::from_utf8(csv_a).unwrap();
    let row: Vec<&str> = text.lines().nth(3).unwrap().split(',').collect();
    for v in row {
        let x: f64 = v.parse().unwrap();
        assert_eq!(format!("{x:.16e}").parse::<f64>().unwrap(), x);
    }
}

/// Validates the subset of JSON Schema the published schema uses.
fn validate(schema: &Value, v: &Value, path: &str, errors: &mut Vec<String>) {
    if let Some(t) = schema.get("type").and_then(Value::as_str) {
        let ok = match t {
            "object" => v.is_object(),
            "array" => v.is_array(),
            "string" => v.is_string(),
            "boolean" => v.is_boolean(),
            "number" => v.is_number(),
            _ => true,
        };
        if !ok {
            errors.push(format!("{path}: expected {t}"));
            return;
        }
    }
    if let Some(c) = schema.get("const") {
        if c != v {
            errors.push(format!("{path}: expected {c}"));
        }
    }
    if let Some(e) = schema.get("enum").and_then(Value::as_array) {
        if !e.contains(v) {
            errors.push(format!("{path}: {v} not in enum"));
        }
    }
    if let Some(pat) = schema.get("pattern").and_then(Value::as_str) {
        let s = v.as_str().unwrap_or_default();
        let ok = match pat {
            "^[0-9a-f]{64}$" => s.len() == 64 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)),
            "^[a-z0-9_]+\\.csv$" => s
                .strip_suffix(".csv")
                .is_some_and(|n| !n.is_empty() && n.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')),
            other => panic!("validator does not know pattern {other}"),
        };
        if !ok {
            errors.push(format!("{path}: '{s}' does not match {pat}"));
        }
    }
    if let Some(obj) = v.as_object() {
        for r in schema.get("required").and_then(Value::as_array).into_iter().flatten() {
            if !obj.contains_key(r.as_str().unwrap()) {
                errors.push(format!("{path}: missing {r}"));
            }
        }
        let props = schema.get("properties").and_then(Value::as_object);
        for (k, val) in obj {
            match props.and_then(|p| p.get(k)) {
                Some(s) => validate(s, val, &format!("{path}.{k}"), errors),
                None => match schema.get("additionalProperties") {
                    Some(Value::Bool(false)) => errors.push(format!("{path}: unexpected key {k}")),
                    Some(s @ Value::Object(_)) => validate(s, val, &format!("{path}.{k}"), errors),
                    _ => {}
                },
            }
        }
    }
    if let (Some(items), Some(arr)) = (schema.get("items"), v.as_array()) {
        for (i, x) in arr.iter().enumerate() {
            validate(items, x, &format!("{path}[{i}]"), errors);
        }
    }
}

#[test]
fn summaries_match_published_schema() {
    let schema: Value = serde_json::from_slice(&run(&["schema"]).stdout).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let quad = write(tmp.path(), "q.json", r#"{"paths": 3000, "steps": 8, "uniqueness": false}"#);
    let emery = write(tmp.path(), "e.json", r#"{"instance": "emery", "steps": 100, "paths": 1000}"#);
    let cases: Vec<Vec<&str>> = vec![
        vec!["simulate-exponential"],
        vec!["solve-quadratic", "--config", &quad],
        vec!["counterexample", "emery", "--config", &emery],
        vec!["oracle", "rp"],
        vec!["equivalence-suite", "--seed", "2"],
    ];
    for (i, args) in cases.iter().enumerate() {
        let dir = tmp.path().join(format!("o{i}"));
        let mut a = args.clone();
        a.extend(["--out", dir.to_str().unwrap()]);
        let o = run(&a);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        let summary: Value = serde_json::from_slice(&std::fs::read(dir.join("summary.json")).unwrap()).unwrap();
        let mut errors = Vec::new();
        validate(&schema, &summary, "$", &mut errors);
        assert!(errors.is_empty(), "{args:?}: {errors:?}");
        assert_eq!(summary, serde_json::from_slice::<Value>(&o.stdout).unwrap());
        for art in summary["artifacts"].as_array().unwrap() {
            assert!(dir.join(art["file"].as_str().unwrap()).exists());
        }
    }
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bad.json", r#"{"feild": "zero"}"#);
    let o = run(&["simulate-exponential", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("feild"));
    let cfg = write(tmp.path(), "nested.json", r#"{"solver": {"degre": 2}}"#);
    assert_eq!(run(&["solve-quadratic", "--config", &cfg]).status.code(), Some(2));
    let cfg = write(tmp.path(), "kind.json", r#"{"experiment": "solve-linear"}"#);
    assert_eq!(run(&["estimate-rp", "--config", &cfg]).status.code(), Some(2));
}

#[test]
fn usage_and_numerical_errors_have_distinct_codes() {
    assert_eq!(run(&["solve-linear", "--field", "nope"]).status.code(), Some(2));
    assert_eq!(
        run(&["solve-linear", "--field", "generic-2x2-d2", "--structure", "triangular"]).status.code(),
        Some(2)
    );
    let tmp = tempfile::tempdir().unwrap();
    // Terminal too steep for the single allowed truncation level.
    let cfg = write(
        tmp.path(),
        "q.json",
        r#"{"paths": 2000, "steps": 5, "terminal": {"kind": "brownian", "scale": 3.0}, "solver": {"levels": [0.5]}}"#,
    );
    let o = run(&["solve-quadratic", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn list_and_describe() {
    let o = run(&["list"]);
    assert!(o.status.success());
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    let names = |k: &str| -> Vec<String> {
        v[k].as_array().unwrap().iter().map(|e| e["name"].as_str().unwrap().to_string()).collect()
    };
    assert!(names("counterexamples").contains(&"emery".to_string()));
    assert!(names("counterexamples").contains(&"nonexistence".to_string()));
    assert!(names("drivers").contains(&"cole-hopf-1d".to_string()));
    assert!(names("fields").contains(&"triangular-3".to_string()));

    let o = run(&["describe", "emery"]);
    assert!(o.status.success());
    let d: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(d["closed_form"]["level"], std::f64::consts::FRAC_PI_2);

    let o = run(&["describe", "emry"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("emery"));
}

#[test]
fn suite_failure_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    // An impossible tolerance makes the suite fail on purpose.
    let cfg = write(tmp.path(), "s.json", r#"{"instances": 2, "max_steps": 3, "solution_tolerance": -1.0}"#);
    let o = run(&["equivalence-suite", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(4));
}

/// Subcommand words for a shipped config, read from its `experiment` and `instance` keys.
fn subcommand_for(text: &str) -> Vec<String> {
    let stripped: String = text.lines().map(|l| l.split("//").next().unwrap()).collect::<Vec<_>>().join("\n");
    let v: Value = serde_json::from_str(&stripped).unwrap();
    let exp = v["experiment"].as_str().unwrap().to_string();
    match v.get("instance").and_then(Value::as_str) {
        Some(i) => vec![exp, i.to_string()],
        None => vec![exp],
    }
}

#[test]
fn shipped_configs_run_and_reproduce_bytes() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let tmp = tempfile::tempdir().unwrap();
    let mut configs: Vec<_> = std::fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).collect();
    configs.sort();
    assert!(configs.len() >= 10);
    for cfg in configs {
        let words = subcommand_for(&std::fs::read_to_string(&cfg).unwrap());
        let stem = cfg.file_stem().unwrap().to_string_lossy().into_owned();
        let mut outs = Vec::new();
        for threads in ["1", "2"] {
            let out = tmp.path().join(format!("{stem}-{threads}"));
            let mut args: Vec<&str> = vec!["--threads", threads];
            args.extend(words.iter().map(String::as_str));
            args.extend(["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
            let o = run(&args);
            assert!(o.status.success(), "{stem}: {}", String::from_utf8_lossy(&o.stderr));
            outs.push(read_dir_sorted(&out));
        }
        assert_eq!(outs[0], outs[1], "{stem} differs between runs");
    }
}
