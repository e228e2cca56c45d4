use std::path::Path;
use std::process::Command;

fn diff2() -> Command {
    Command::new(env!("CARGO_BIN_EXE_diff2"))
}

fn write_toy_csv(path: &Path) {
    let mut s = String::from("a,b,const,y\n");
    for i in 0..120 {
        let a = (i as f64 * 0.37).sin();
        let b = (i as f64 * 0.11).cos() * 3.0;
        s += &format!("{a},{b},1.0,{}\n", 0.5 * a - 0.2 * b + 0.01 * (i % 7) as f64);
    }
    std::fs::write(path, s).unwrap();
}

#[test]
fn run_writes_curves_summary_and_wellformed_svg() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("toy.csv");
    write_toy_csv(&csv);
    let out = dir.path().join("out");
    let status = diff2()
        .args(["run", "--algo", "dp-gd,diff2-gd", "--rounds", "40", "--clients", "3", "--seeds", "2"])
        .args(["--eta", "0.25", "--c1", "1", "--c2", "3", "--restart-interval", "5", "--hidden", "4"])
        .arg("--dataset")
        .arg(&csv)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));

    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["schema"], "diff2-summary/1");
    assert_eq!(summary["algos"].as_array().unwrap().len(), 2);
    // the constant column is dropped before training
    let removed = &summary["algos"][0]["seeds"][0]["removed_features"];
    assert_eq!(removed, &serde_json::json!(["const"]));

    for algo in ["dp-gd", "diff2-gd"] {
        for seed in [1, 2] {
            let f = out.join(format!("{algo}_seed{seed}_train_loss.csv"));
            let text = std::fs::read_to_string(&f).unwrap();
            assert_eq!(text.lines().count(), 41, "{}", f.display());
        }
    }
    let svgs: Vec<_> = std::fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "svg"))
        .collect();
    assert_eq!(svgs.len(), 3);
    for p in svgs {
        let text = std::fs::read_to_string(&p).unwrap();
        let doc = roxmltree::Document::parse(&text).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(doc.root_element().tag_name().name(), "svg");
    }
}

#[test]
fn calibrate_prints_plan_within_budget() {
    let out = diff2()
        .args(["calibrate", "--algo", "diff2-gd", "--restart-interval", "20", "--n-min", "1651"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let text = v.to_string();
    assert!(text.contains("within_budget"), "{text}");
    assert!(!text.contains("\"within_budget\":false"), "{text}");
}

#[test]
fn selftest_passes_and_bad_input_fails() {
    assert!(diff2().arg("selftest").status().unwrap().success());
    let bad = diff2().args(["calibrate", "--algo", "diff2-gd", "--eps", "-1", "--n-min", "10"]).output().unwrap();
    assert!(!bad.status.success());
    let missing = diff2().args(["run", "--dataset", "/nonexistent.csv", "--algo", "gd", "--eta", "1"]).output().unwrap();
    assert!(!missing.status.success());
}
