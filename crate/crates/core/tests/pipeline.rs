use std::fs;
use std::path::Path;

use branchlab::milp::{MilpBuilder, RowSense};
use branchlab::pipeline::*;
use serde_json::Value;

fn small_config() -> PipelineConfig {
    PipelineConfig::parse(
        "family.num_vars = 14\nfamily.num_cons = 4\nsplit.train = 10\nsplit.valid = 4\nsplit.test = 6\n\
         collect.max_nodes = 15\nenvelope.epochs = 3\ntrain.epochs = 4\ntrain.checkpoint_every = 2\n\
         eval.max_clock = 2000\neval.baselines = random\n",
    )
    .unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn jsonl(path: &Path) -> Vec<Value> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn full_pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let run = Run::new(dir.path(), small_config()).unwrap();
    let summary = run.run_all().unwrap();
    let best = json(&dir.path().join("reports/evaluate.json"))["best_checkpoint"].as_str().unwrap().to_string();
    assert!(summary.contains(&format!("best checkpoint: {best}")));
    assert!(dir.path().join(format!("checkpoints/{best}.ckpt")).exists());

    let episodes = json(&dir.path().join("episodes/manifest.json"));
    let entries = episodes["episodes"].as_array().unwrap();
    assert_eq!(entries.len(), 10);
    assert_eq!(fs::read_dir(dir.path().join("episodes")).unwrap().count(), 11);
    let nodes: u64 = entries.iter().map(|e| e["nodes"].as_u64().unwrap()).sum();
    assert_eq!(episodes["total_transitions"].as_u64().unwrap(), nodes);

    // Every manifest carries the same tag.
    for m in ["instances/manifest.json", "episodes/manifest.json", "selected/manifest.json", "checkpoints/manifest.json", "reports/evaluate.json", "reports/compare.json"] {
        let tag = &json(&dir.path().join(m))["tag"];
        assert_eq!(tag["config_hash"], run.tag.config_hash.as_str(), "{m}");
        assert_eq!(tag["seed"], 0, "{m}");
        assert_eq!(tag["catalog_version"], branchlab::observation::CATALOG_VERSION, "{m}");
    }
    let eval = json(&dir.path().join("reports/eval-gcnn.json"));
    assert_eq!(eval["fingerprint"]["config_hash"], run.tag.config_hash.as_str());

    assert_eq!(
        fs::read_to_string(dir.path().join("reports/loss_curve.csv")).unwrap(),
        fs::read_to_string(dir.path().join("checkpoints/loss.csv")).unwrap()
    );
    assert_eq!(fs::read_to_string(dir.path().join("config.txt")).unwrap(), small_config().to_text());

    // Selection reproduced by an external sort of the emitted columns.
    let rows = jsonl(&dir.path().join("selected/returns.jsonl"));
    let g: Vec<f64> = rows.iter().map(|r| r["return"].as_f64().unwrap()).collect();
    let v: Vec<f64> = rows.iter().map(|r| r["value"].as_f64().unwrap()).collect();
    let s = g.iter().chain(&v).fold(0.0f64, |a, x| a.max(x.abs()));
    let shift = v.iter().fold(0.0f64, |a, x| a.min(x / s));
    let ratio: Vec<f64> = (0..g.len()).map(|i| (g[i] / s) / (v[i] / s - shift + 1.0)).collect();
    let mut order: Vec<usize> = (0..g.len()).collect();
    order.sort_by(|&a, &b| ratio[b].partial_cmp(&ratio[a]).unwrap().then(a.cmp(&b)));
    let chosen = jsonl(&dir.path().join("selected/dataset.jsonl"));
    assert_eq!(chosen.len(), (0.15 * g.len() as f64 - 1e-9).ceil() as usize);
    for (row, &i) in chosen.iter().zip(&order) {
        assert_eq!(row["instance"], rows[i]["instance"]);
        assert_eq!(row["position"], rows[i]["position"]);
    }

    // A stale stage is refused by the report.
    let path = dir.path().join("selected/manifest.json");
    let mut m = json(&path);
    m["tag"]["config_hash"] = "0000000000000000".into();
    fs::write(&path, m.to_string()).unwrap();
    let err = run.report().unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("0000000000000000"));
}

#[test]
fn collect_is_deterministic_and_p100_keeps_everything() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.set("envelope.p", "100").unwrap();
    let run = Run::new(dir.path(), cfg).unwrap();
    run.generate().unwrap();
    let first = run.collect().unwrap();
    let again = run.collect().unwrap();
    assert_eq!(first, again);
    let sel = run.select().unwrap();
    assert_eq!(sel.selected, sel.entries);
    assert_eq!(sel.entries, first.total_transitions);
}

#[test]
fn collect_reports_partial_failure() {
    let dir = tempfile::tempdir().unwrap();
    let run = Run::new(dir.path(), small_config()).unwrap();
    let manifest = run.generate().unwrap();
    for name in &manifest.train[..2] {
        let unbounded = MilpBuilder::new(name.as_str(), 2, 1)
            .objective(vec![-1.0, -1.0])
            .bounds(vec![0.0, 0.0], vec![1.0, f64::INFINITY])
            .row(RowSense::Le, vec![(0, 1.0)], 0.5)
            .build()
            .unwrap();
        fs::write(dir.path().join(format!("instances/train/{name}.milp")), unbounded.to_text()).unwrap();
    }
    let err = run.collect().unwrap_err();
    assert!(matches!(err, PipelineError::PartialFailure { failed: 2, total: 10 }));
    assert_eq!(err.exit_code(), 3);
    let m = json(&dir.path().join("episodes/manifest.json"));
    assert_eq!(m["failures"].as_array().unwrap().len(), 2);
    assert_eq!(m["episodes"].as_array().unwrap().len(), 8);
}

#[test]
fn stages_refuse_another_configuration() {
    let dir = tempfile::tempdir().unwrap();
    Run::new(dir.path(), small_config()).unwrap().generate().unwrap();
    let mut other = small_config();
    other.set("seed", "9").unwrap();
    let err = Run::new(dir.path(), other).unwrap().collect().unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let mut workers = small_config();
    workers.set("workers", "3").unwrap();
    Run::new(dir.path(), workers).unwrap().collect().unwrap();
}
