use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use tempfile::TempDir;
use turbgate::ensemble::{GatedField, ModelArchive};
use turbgate::features::FeatureMatrix;
use turbgate::{io, CorrectionField, FlowState};
use turbgate_pipeline::config::RunConfig;
use turbgate_pipeline::manifest::{RunManifest, StageOutcome};

const NU: &str = "0.0018181818181818182";

fn case(name: &str, role: &str, reference: &str) -> String {
    format!(
        r#"
[[case]]
name = "{name}"
role = "{role}"
mesh = {{ kind = "channel", n_cells = 40, stretch_ratio = 1.1 }}
bc = {{ body_force = 1.0 }}
solver = {{ model = "sst", nu = {NU} }}
{reference}
"#
    )
}

fn twin(y: f64, depth: f64) -> String {
    format!("reference.twin = {{ center = [0.0, {y}], width = [0.0, 0.15], depth = {depth} }}")
}

fn header(seed: u64) -> String {
    format!("format = \"turbgate-config/1\"\nseed = {seed}\n")
}

/// Three informative training twins, one too faint to survive the band
/// filter, and a twin target.
fn study() -> String {
    let mut s = header(3);
    s += &case("low", "training", &twin(0.3, 0.5));
    s += &case("mid", "training", &twin(0.5, 0.5));
    s += &case("high", "training", &twin(0.65, 0.8));
    s += &case("faint", "training", &twin(0.5, 0.03));
    s += &case("target", "target", &twin(0.45, 0.45));
    s += "\n[model]\nsigma_sweep = [0.0, 0.05, 0.1, 0.2, 0.4]\nlof_neighbors = 10\n";
    s
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new(config: &str) -> Self {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("run.toml"), config).unwrap();
        Self { dir }
    }

    fn config(&self) -> PathBuf {
        self.dir.path().join("run.toml")
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, out: &str, args: &[&str]) -> i32 {
        let status = Command::new(env!("CARGO_BIN_EXE_turbgate"))
            .args(args)
            .arg("--config")
            .arg(self.config())
            .arg("--out")
            .arg(self.out(out))
            .env("RUST_LOG", "warn")
            .status()
            .unwrap();
        status.code().unwrap()
    }
}

fn read<T: serde::de::DeserializeOwned>(p: &Path) -> T {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn json(p: &Path) -> serde_json::Value {
    read(p)
}

/// Relative path -> bytes of every data file under `dir`, excluding the
/// manifest (it records wall times) and stamps.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, d: &Path, acc: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, acc);
            } else {
                let name = p.file_name().unwrap().to_string_lossy();
                if name != "manifest.json" && name != "stamp.json" {
                    acc.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
                }
            }
        }
    }
    let mut acc = BTreeMap::new();
    walk(dir, dir, &mut acc);
    acc
}

#[test]
fn solve_exports_the_library_state() {
    let cfg = header(0) + &case("c", "target", "");
    let ws = Workspace::new(&cfg);
    assert_eq!(ws.run("out", &["solve"]), 0);
    let exported: FlowState = read(&ws.out("out/cases/c/baseline/state.json"));
    let rc = RunConfig::from_toml(&cfg).unwrap();
    let case = rc.cases[0].build().unwrap();
    let direct = case.solve(&CorrectionField::uniform(40)).unwrap();
    assert_eq!(exported, direct);
    let csv = fs::File::open(ws.out("out/cases/c/baseline/state.csv")).unwrap();
    let back = io::read_state_csv(csv, &case.mesh, direct.nu).unwrap();
    assert_eq!(back.u, direct.u);
    assert!(ws.out("out/cases/c/baseline/state.vtk").exists());
    assert!(ws.out("out/resolved-config.toml").exists());
}

#[test]
fn laminar_export_is_poiseuille() {
    let cfg = header(0)
        + r#"
[[case]]
name = "lam"
role = "target"
mesh = { kind = "channel", n_cells = 32 }
bc = { body_force = 1.0 }
solver = { model = "laminar", nu = 0.05 }
"#;
    let ws = Workspace::new(&cfg);
    assert_eq!(ws.run("out", &["solve"]), 0);
    let text = fs::read_to_string(ws.out("out/cases/lam/baseline/state.csv")).unwrap();
    let peak = 1.0 / (2.0 * 0.05);
    let mut rows = 0;
    for line in text.lines().skip(1) {
        let f: Vec<f64> = line.split(',').map(|s| s.parse().unwrap()).collect();
        let (y, u) = (f[2], f[3]);
        let exact = y * (2.0 - y) / (2.0 * 0.05);
        assert!((u - exact).abs() <= 0.01 * peak, "y {y}: {u} vs {exact}");
        rows += 1;
    }
    assert_eq!(rows, 32);
}

#[test]
fn reruns_are_deterministic_and_incremental() {
    let ws = Workspace::new(&study());
    assert_eq!(ws.run("a", &["predict-correct"]), 0);
    assert_eq!(ws.run("b", &["predict-correct", "--threads", "1"]), 0);
    let (a, b) = (snapshot(&ws.out("a")), snapshot(&ws.out("b")));
    assert!(a.keys().any(|k| k.ends_with("predictions.csv")));
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (k, v) in &a {
        assert!(v == &b[k], "{} differs between runs", k.display());
    }

    // a second invocation in place skips every stage
    let before = RunManifest::load_or_new(&ws.out("a/manifest.json")).unwrap().entries.len();
    assert_eq!(ws.run("a", &["predict-correct"]), 0);
    let m = RunManifest::load_or_new(&ws.out("a/manifest.json")).unwrap();
    let new = &m.entries[before..];
    assert!(new.iter().filter(|r| r.stage != "config").all(|r| r.outcome == StageOutcome::UpToDate));
    assert!(new.iter().any(|r| r.stage == "predict-correct"));
    assert_eq!(snapshot(&ws.out("a")), a);

    // every emitted file is listed in the manifest with its hash
    let listed: BTreeMap<String, String> = m
        .entries
        .iter()
        .flat_map(|r| r.outputs.iter().map(|f| (f.path.clone(), f.sha256.clone())))
        .collect();
    for (k, v) in &a {
        let key = k.to_string_lossy().replace('\\', "/");
        let hash = listed.get(&key).unwrap_or_else(|| panic!("{key} not in manifest"));
        assert_eq!(hash, &turbgate_pipeline::manifest::sha256_hex(v));
    }
}

#[test]
fn deleting_the_model_retrains_without_resolving() {
    let ws = Workspace::new(&study());
    assert_eq!(ws.run("out", &["train"]), 0);
    let archive = fs::read(ws.out("out/model/archive.json")).unwrap();
    fs::remove_file(ws.out("out/model/archive.json")).unwrap();
    let before = RunManifest::load_or_new(&ws.out("out/manifest.json")).unwrap().entries.len();
    assert_eq!(ws.run("out", &["train"]), 0);
    let m = RunManifest::load_or_new(&ws.out("out/manifest.json")).unwrap();
    for r in &m.entries[before..] {
        match r.stage.as_str() {
            "train" => assert_eq!(r.outcome, StageOutcome::Completed),
            "config" => {}
            _ => assert_eq!(r.outcome, StageOutcome::UpToDate, "{} {}", r.stage, r.subject),
        }
    }
    assert_eq!(fs::read(ws.out("out/model/archive.json")).unwrap(), archive);
}

#[test]
fn malformed_configs_exit_with_config_code() {
    let good = header(0) + &case("c", "target", "");
    let bad = [
        "format = \"turbgate-config/1\"\n[[case]\n".to_string(),
        good.replace("role = \"target\"", "role = \"target\"\nspeed = 3"),
        good.replace("config/1", "config/2"),
        good.replace("\"sst\"", "\"spalart\""),
        good.replace("n_cells = 40", "n_cells = 2"),
        good.clone() + "[model]\nsigma_sweep = []\n",
    ];
    for (i, text) in bad.iter().enumerate() {
        let ws = Workspace::new(text);
        let code = if i == bad.len() - 1 {
            ws.run("out", &["sweep-sigma"])
        } else {
            ws.run("out", &["solve"])
        };
        assert_eq!(code, 2, "config {i}");
        assert!(!ws.out("out/cases").exists(), "config {i} started solving");
    }
    let ws = Workspace::new(&good);
    assert_eq!(ws.run("out", &["solve", "--sigma-bar=-1"]), 2);
    assert_eq!(ws.run("out", &["frobnicate"]), 2);
}

#[test]
fn solver_failure_exits_with_solver_code() {
    let cfg = header(0)
        + &case("c", "target", "").replace(
            &format!("nu = {NU} }}"),
            &format!("nu = {NU}, max_iterations = 2, first_order_fallback = false, newton_max_iterations = 0 }}"),
        );
    let ws = Workspace::new(&cfg);
    assert_eq!(ws.run("out", &["solve"]), 3);
    let m = RunManifest::load_or_new(&ws.out("out/manifest.json")).unwrap();
    assert_eq!(m.latest("baseline", "c").unwrap().outcome, StageOutcome::Failed);
}

#[test]
fn missing_reference_file_fails_before_any_solve() {
    let cfg = header(0) + &case("c", "training", "reference.file = \"absent.csv\"");
    let ws = Workspace::new(&cfg);
    assert_eq!(ws.run("out", &["invert"]), 5);
    assert!(!ws.out("out/cases").exists());
}

#[test]
fn unreadable_reference_file_exits_with_data_code() {
    let cfg = header(0) + &case("c", "training", "reference.file = \"ref.csv\"");
    let ws = Workspace::new(&cfg);
    fs::write(ws.dir.path().join("ref.csv"), "x,y,u_ref\n0.5,0.2,abc\n").unwrap();
    assert_eq!(ws.run("out", &["invert"]), 5);
}

#[test]
fn file_reference_matches_the_equivalent_twin() {
    let twin_cfg = header(0) + &case("c", "training", &twin(0.5, 0.5));
    let ws = Workspace::new(&twin_cfg);
    assert_eq!(ws.run("twin", &["invert"]), 0);
    // the twin's samples at cell centres, as an external data file
    let samples = fs::read_to_string(ws.out("twin/cases/c/reference/samples.csv")).unwrap();
    let mut file = String::from("x,y,u_ref\n");
    for line in samples.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        file += &format!("{},{},{}\n", f[1], f[2], f[3]);
    }
    fs::write(ws.dir.path().join("ref.csv"), file).unwrap();
    let file_cfg = header(0) + &case("c", "training", "reference.file = \"ref.csv\"");
    fs::write(ws.config(), file_cfg).unwrap();
    assert_eq!(ws.run("file", &["invert"]), 0);
    for f in ["beta.csv", "objective.csv", "state.csv"] {
        let a = fs::read(ws.out("twin/cases/c/inversion").join(f)).unwrap();
        let b = fs::read(ws.out("file/cases/c/inversion").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
}

#[test]
fn inversion_reduces_the_objective_and_respects_regularisation() {
    let ws = Workspace::new(&(header(0) + &case("c", "training", &twin(0.5, 0.5))));
    assert_eq!(ws.run("out", &["invert"]), 0);
    let s = json(&ws.out("out/cases/c/inversion/summary.json"));
    assert!(s["reduction"].as_f64().unwrap() <= 0.1, "{s}");
    assert!(s["rms_error_inverted"].as_f64().unwrap() < s["rms_error_baseline"].as_f64().unwrap());

    let strong = header(0) + &case("c", "training", &twin(0.5, 0.5)) + "[inversion]\nlambda = 1e6\n";
    let ws = Workspace::new(&strong);
    assert_eq!(ws.run("out", &["invert"]), 0);
    let s = json(&ws.out("out/cases/c/inversion/summary.json"));
    assert!(s["max_abs_beta_deviation"].as_f64().unwrap() <= 1e-2, "{s}");
}

#[test]
fn training_keeps_one_submodel_per_surviving_source() {
    let ws = Workspace::new(&study());
    assert_eq!(ws.run("out", &["train"]), 0);
    let report = json(&ws.out("out/model/training-report.json"));
    assert_eq!(report["submodels"], 3);
    let dropped: Vec<&str> = report["dropped"]
        .as_array()
        .unwrap()
        .iter()
        .map(|d| d["label"].as_str().unwrap())
        .collect();
    assert_eq!(dropped, ["faint"]);
    for s in report["sources"].as_array().unwrap() {
        assert!(s["rows_used"].as_u64().unwrap() > 0);
        assert_eq!(s["hyperparameters"]["lengthscales"].as_array().unwrap().len(), 52);
    }
    let m = RunManifest::load_or_new(&ws.out("out/manifest.json")).unwrap();
    assert!(m.latest("train", "model").unwrap().notes.iter().any(|n| n.contains("faint")));

    // the reloaded archive predicts bit for bit what the saved one does
    let text = fs::read_to_string(ws.out("out/model/archive.json")).unwrap();
    let a = ModelArchive::from_json(&text).unwrap();
    let b = ModelArchive::from_json(&a.to_json().unwrap()).unwrap();
    let x: FeatureMatrix = read(&ws.out("out/model/reference-features.json"));
    for i in (0..x.n_rows()).step_by(7) {
        assert_eq!(a.model().predict(x.row(i)).unwrap(), b.model().predict(x.row(i)).unwrap());
    }
}

#[test]
fn training_fails_when_every_source_is_dropped() {
    let mut cfg = header(0);
    cfg += &case("faint", "training", &twin(0.5, 0.03));
    cfg += &case("target", "target", "");
    let ws = Workspace::new(&cfg);
    assert_eq!(ws.run("out", &["train"]), 4);
}

#[test]
fn zero_threshold_reproduces_the_uncorrected_solve() {
    let ws = Workspace::new(&study());
    assert_eq!(ws.run("out", &["predict-correct", "--sigma-bar", "0"]), 0);
    let s = json(&ws.out("out/predict/target/summary.json"));
    assert_eq!(s["active_cells"], 0);
    assert_eq!(s["corrected_solve"], "unchanged");
    let base = fs::read(ws.out("out/cases/target/baseline/state.csv")).unwrap();
    let corr = fs::read(ws.out("out/predict/target/corrected-state.csv")).unwrap();
    assert_eq!(base, corr);
    let beta = fs::read_to_string(ws.out("out/predict/target/beta.csv")).unwrap();
    assert!(beta.lines().skip(1).all(|l| l.ends_with(",1")));
    for f in ["predictions.csv", "lof.csv", "profiles.csv", "comparison.csv", "fields.vtk"] {
        assert!(ws.out("out/predict/target").join(f).exists(), "{f}");
    }
}

#[test]
fn sweep_is_sorted_deduplicated_and_monotone() {
    let ws = Workspace::new(&study());
    assert_eq!(ws.run("out", &["sweep-sigma", "--list", "0.4,0.1,0.1,0,0.05,1e9"]), 0);
    let text = fs::read_to_string(ws.out("out/sweep/target/sweep.csv")).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let sig: Vec<f64> = rows.iter().map(|r| r[0].parse().unwrap()).collect();
    assert_eq!(sig, vec![0.0, 0.05, 0.1, 0.4, 1e9]);
    let active: Vec<usize> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(active.windows(2).all(|w| w[0] <= w[1]), "{active:?}");
    assert_eq!(active[0], 0);
    assert_eq!(rows[0][2], "unchanged");
    assert_eq!(active[4], 40);
}

#[test]
fn verify_checks_gradients_and_archive() {
    let mut cfg = header(5);
    cfg += &case("a", "training", &twin(0.4, 0.5));
    cfg += &case("b", "training", &twin(0.6, 0.6));
    let ws = Workspace::new(&cfg);
    assert_eq!(ws.run("out", &["train"]), 0);
    assert_eq!(ws.run("out", &["verify", "--cells", "3"]), 0);
    let text = fs::read_to_string(ws.out("out/verify/verify.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.iter().filter(|r| r.starts_with("adjoint-gradient")).count(), 6);
    assert!(rows.iter().any(|r| r.starts_with("archive round trip")));
    assert!(rows.iter().all(|r| r.ends_with(",true")), "{text}");
}

#[test]
fn deep_ensemble_runs_through_the_pipeline() {
    let cfg = study() + "kind = \"deep-ensemble\"\ndeep = { members = 3, epochs = 40, hidden = [16, 16] }\n";
    let ws = Workspace::new(&cfg);
    assert_eq!(ws.run("out", &["predict-correct"]), 0);
    let report = json(&ws.out("out/model/training-report.json"));
    assert_eq!(report["kind"], "deep-ensemble");
    assert_eq!(report["submodels"], 3);
    let archive = fs::read_to_string(ws.out("out/model/archive.json")).unwrap();
    assert!(matches!(ModelArchive::from_json(&archive).unwrap(), ModelArchive::DeepEnsemble { .. }));
    let s = json(&ws.out("out/predict/target/summary.json"));
    assert_eq!(s["sigma_bar"], 0.1);
}

#[test]
fn failed_corrected_solve_keeps_the_uncorrected_state() {
    let rc = RunConfig::from_toml(&(header(0) + &case("c", "target", ""))).unwrap();
    let mut case = rc.cases[0].build().unwrap();
    let baseline = case.solve(&CorrectionField::uniform(40)).unwrap();
    let mut beta = vec![1.0; 40];
    beta[5..20].iter_mut().for_each(|b| *b = 0.3);
    let gated = GatedField {
        beta: CorrectionField::from_values(beta).unwrap(),
        records: Vec::new(),
    };
    case.settings.max_iterations = 1;
    case.settings.first_order_fallback = false;
    case.settings.newton_max_iterations = 0;
    let out = turbgate_pipeline::stages::corrected_solve(&case, &baseline, &gated);
    assert!(out.failed(), "{}", out.status);
    assert_eq!(out.state, baseline);

    let untouched = GatedField {
        beta: CorrectionField::uniform(40),
        records: Vec::new(),
    };
    let out = turbgate_pipeline::stages::corrected_solve(&case, &baseline, &untouched);
    assert_eq!(out.status, "unchanged");
}
