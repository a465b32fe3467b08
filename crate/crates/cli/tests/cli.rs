use std::path::Path;
use std::process::{Command, Output};

use atl_pinn::harness::{Manifest, RunReport};
use atl_pinn::refsolve::read_grid;

fn atlpinn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atlpinn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path, out: &str, extra: &str) -> std::path::PathBuf {
    let path = dir.join(format!("{out}.json"));
    let text = format!(
        r#"{{
  "problem": "diffreact",
  "task_count": 2,
  "iterations": 3,
  "sampling": {{"n_collocation": 20, "n_boundary_per_edge": 4, "n_initial": 4}},
  "architecture": {{"input_dim": 2, "output_dim": 1, "single": [2, 6], "expert": [2, 5], "tower": [1, 4]}},
  "reference": {{"nx": 16, "nt": 5, "cfl_safety": 0.9}},
  "output_dir": "{}"{extra}
}}"#,
        dir.join(out).display()
    );
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn generate_writes_readable_grids() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("refs");
    let o = atlpinn(&[
        "generate", "--problem", "burgers", "--tasks", "3", "--seed", "4", "--out",
        out.to_str().unwrap(), "--nx", "32", "--nt", "6",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = Manifest::read(&out).unwrap();
    assert_eq!(manifest.tasks.len(), 3);
    for entry in &manifest.tasks {
        let g = read_grid(&out.join(&entry.file)).unwrap();
        assert_eq!((g.dims.nx, g.dims.nt), (32, 6));
        assert_eq!(g.ic.as_ref(), Some(&entry.ic));
    }
}

#[test]
fn train_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "train", "");
    let o = atlpinn(&["train", "--config", cfg.to_str().unwrap(), "--mode", "mmoe", "--cosine", "--task-id", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let line = String::from_utf8(o.stdout).unwrap();
    let report: RunReport = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(report.task_id, 1);
    assert_eq!(report.loss_history.len(), 3);
    assert!(dir.path().join("train/runs/task001_mmoe_cos.jsonl").exists());
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "single", "");
    let o = atlpinn(&["train", "--config", cfg.to_str().unwrap(), "--mode", "single", "--cosine"]);
    assert_eq!(o.status.code(), Some(1));

    let bad = tiny_config(dir.path(), "bad", r#", "learning_rate": 0.1"#);
    let o = atlpinn(&["compare", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));

    let o = atlpinn(&["train", "--config", cfg.to_str().unwrap(), "--mode", "nonsense"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn compare_is_deterministic_and_report_writes_loss_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let extra = r#", "modes": ["single", "hard", "ple"]"#;
    let a = tiny_config(dir.path(), "a", extra);
    let b = tiny_config(dir.path(), "b", extra);
    for cfg in [&a, &b] {
        let o = atlpinn(&["compare", "--config", cfg.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let csv_a = std::fs::read_to_string(dir.path().join("a/aggregate.csv")).unwrap();
    let csv_b = std::fs::read_to_string(dir.path().join("b/aggregate.csv")).unwrap();
    assert_eq!(csv_a, csv_b);
    assert!(csv_a.starts_with("mode,variant,mean_l2,mean_boost_pct,wins,tasks\n"));
    assert_eq!(csv_a.lines().count(), 1 + 5);

    let out = dir.path().join("curves");
    let o = atlpinn(&[
        "report", "--in", dir.path().join("a").to_str().unwrap(), "--out", out.to_str().unwrap(),
        "--smooth-sigma", "1.5",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let curve = std::fs::read_to_string(out.join("task000_hard_org_loss.csv")).unwrap();
    let mut lines = curve.lines();
    assert_eq!(lines.next(), Some("iteration,L_f,L_b,L_0,total"));
    assert_eq!(lines.count(), 3);
}
