use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flars_core::flars::{run_flars, FittedModel};
use flars_core::funcrep::Representation;
use flars_core::gpmix::refit_fixed;
use flars_core::persist;
use flars_core::simgen::generate_scenario;
use flars_cli::commands::{ModelFile, SelectionFile, MODEL_FORMAT, SELECTION_FORMAT};
use flars_cli::config::ProjectConfig;

const CONFIG: &str = "seed = 11\n[simulation]\nn_train = 80\nn_test = 40\nreps = 1\n";

fn flars(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flars")).args(args).output().unwrap()
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes the config and exports one simulated dataset; returns
/// `(config path, export dir)`.
fn setup(dir: &Path, extra: &str) -> (PathBuf, PathBuf) {
    let cfg = dir.join("config.toml");
    std::fs::write(&cfg, format!("{CONFIG}{extra}")).unwrap();
    let export = dir.join("data");
    ok(flars(&[
        "simulate",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.join("sim")),
        "--export",
        s(&export),
    ]));
    (cfg, export)
}

fn load_selection(p: &Path) -> SelectionFile {
    persist::load_json(SELECTION_FORMAT, std::fs::File::open(p).unwrap()).unwrap()
}

fn load_model(p: &Path) -> ModelFile {
    persist::load_json(MODEL_FORMAT, std::fs::File::open(p).unwrap()).unwrap()
}

fn assert_models_close(a: &FittedModel, b: &FittedModel, tol: f64) {
    assert!((a.intercept - b.intercept).abs() <= tol);
    assert_eq!(a.selected_ids(), b.selected_ids());
    for (x, y) in a.functional.iter().zip(&b.functional) {
        for (u, v) in x.coef.iter().zip(&y.coef) {
            assert!((u - v).abs() <= tol * (1.0 + v.abs()), "{u} vs {v}");
        }
    }
    for (x, y) in a.scalar.iter().zip(&b.scalar) {
        assert!((x.gamma - y.gamma).abs() <= tol * (1.0 + y.gamma.abs()));
    }
}

#[test]
fn select_and_fit_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg_path, export) = setup(dir.path(), "");
    let out = dir.path().join("sel");
    ok(flars(&[
        "select",
        "--config",
        s(&cfg_path),
        "--data",
        s(&export.join("train/manifest.toml")),
        "--out",
        s(&out),
    ]));
    let sel = load_selection(&out.join("selection.json"));

    let cfg = ProjectConfig::load(Some(&cfg_path)).unwrap();
    let (train, _, truth) = generate_scenario(&cfg.scenario()).unwrap();
    let rep = Representation::build(&cfg.representation(), train.functional[0].1.grid()).unwrap();
    let cands = train.candidates(&rep).unwrap();
    let (_, diag, model) = run_flars(&train.y, &cands, &cfg.flars_options()).unwrap();
    assert_eq!(sel.selected, model.selected_ids());
    assert_eq!(sel.stop_index, diag.stop_index);
    assert_models_close(&sel.model, &model, 1e-9);
    let mut found = sel.selected.clone();
    found.sort();
    let mut want = truth.ids.clone();
    want.sort();
    assert_eq!(found, want);

    let fit_out = dir.path().join("fit");
    ok(flars(&[
        "fit",
        "--config",
        s(&cfg_path),
        "--data",
        s(&export.join("train/manifest.toml")),
        "--selection",
        s(&out.join("selection.json")),
        "--out",
        s(&fit_out),
    ]));
    let fitted = load_model(&fit_out.join("model.json"));
    assert!(fitted.gp.is_none() && fitted.converged);
    let sub = cands.subset(&sel.selected).unwrap();
    let lib = refit_fixed(&train.y, &sub, &cfg.flars_options()).unwrap();
    assert_models_close(&fitted.fixed, &lib, 1e-9);
}

#[test]
fn predictions_cover_the_test_set() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, export) = setup(dir.path(), "");
    let out = dir.path().join("o");
    ok(flars(&[
        "fit",
        "--config",
        s(&cfg),
        "--data",
        s(&export.join("train/manifest.toml")),
        "--selected",
        "f1,f2,f3,z1,z2,z3",
        "--out",
        s(&out),
    ]));
    ok(flars(&[
        "predict",
        "--model",
        s(&out.join("model.json")),
        "--data",
        s(&export.join("test/manifest.toml")),
        "--out",
        s(&out),
    ]));
    let mut rd = csv::Reader::from_path(out.join("predictions.csv")).unwrap();
    assert_eq!(rd.headers().unwrap(), vec!["subject", "visit", "mean", "sd"]);
    let mut truth = csv::Reader::from_path(export.join("test/response.csv")).unwrap();
    let y: Vec<f64> = truth.records().map(|r| r.unwrap()[2].parse().unwrap()).collect();
    let pred: Vec<f64> = rd.records().map(|r| r.unwrap()[2].parse().unwrap()).collect();
    assert_eq!(pred.len(), 40);
    let rmse = (y.iter().zip(&pred).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 40.0).sqrt();
    assert!(rmse < 0.3, "rmse {rmse}");
}

#[test]
fn empty_input_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, export) = setup(dir.path(), "");
    let out = dir.path().join("o");
    ok(flars(&[
        "fit",
        "--config",
        s(&cfg),
        "--data",
        s(&export.join("train/manifest.toml")),
        "--selected",
        "z1,z2",
        "--out",
        s(&out),
    ]));
    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    std::fs::write(empty.join("response.csv"), "subject,visit\n").unwrap();
    std::fs::write(empty.join("scalars.csv"), "z1,z2\n").unwrap();
    std::fs::write(
        empty.join("manifest.toml"),
        "response_file = \"response.csv\"\nscalar_file = \"scalars.csv\"\n",
    )
    .unwrap();
    ok(flars(&[
        "predict",
        "--model",
        s(&out.join("model.json")),
        "--data",
        s(&empty.join("manifest.toml")),
        "--out",
        s(&out),
    ]));
    assert_eq!(
        std::fs::read_to_string(out.join("predictions.csv")).unwrap(),
        "subject,visit,mean,sd\n"
    );
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, export) = setup(dir.path(), "");
    let train = export.join("train/manifest.toml");
    let out = dir.path().join("o");
    ok(flars(&[
        "fit", "--config", s(&cfg), "--data", s(&train), "--selected", "f1,z1", "--out", s(&out),
    ]));

    // The model needs f1 and z1; a dataset without them is a schema mismatch.
    let partial = dir.path().join("partial");
    std::fs::create_dir_all(&partial).unwrap();
    std::fs::write(partial.join("response.csv"), "subject,visit\na,1\n").unwrap();
    std::fs::write(partial.join("scalars.csv"), "z2\n1.0\n").unwrap();
    std::fs::write(
        partial.join("manifest.toml"),
        "response_file = \"response.csv\"\nscalar_file = \"scalars.csv\"\n",
    )
    .unwrap();
    let r = flars(&[
        "predict",
        "--model",
        s(&out.join("model.json")),
        "--data",
        s(&partial.join("manifest.toml")),
        "--out",
        s(&out),
    ]);
    assert_eq!(r.status.code(), Some(4));
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains("f1") && err.contains("z1"), "{err}");

    // A file of another format.
    let r = flars(&[
        "predict",
        "--model",
        s(&dir.path().join("sim/summary.json")),
        "--data",
        s(&train),
        "--out",
        s(&out),
    ]);
    assert_eq!(r.status.code(), Some(4));

    // An unparseable cell.
    let bad = dir.path().join("data/bad");
    std::fs::create_dir_all(&bad).unwrap();
    for f in std::fs::read_dir(export.join("train")).unwrap() {
        let f = f.unwrap().path();
        std::fs::copy(&f, bad.join(f.file_name().unwrap())).unwrap();
    }
    let text = std::fs::read_to_string(bad.join("scalars.csv")).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    lines[3] = lines[3].replacen(|c: char| c.is_ascii_digit(), "x", 1);
    std::fs::write(bad.join("scalars.csv"), lines.join("\n")).unwrap();
    let r = flars(&["select", "--config", s(&cfg), "--data", s(&bad.join("manifest.toml")), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("row 3"));

    // Unknown config key.
    let bad_cfg = dir.path().join("bad.toml");
    std::fs::write(&bad_cfg, "sed = 1\n").unwrap();
    let r = flars(&["select", "--config", s(&bad_cfg), "--data", s(&train), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));

    // Backfitting capped at one sweep cannot report convergence.
    let gp_cfg = dir.path().join("gp.toml");
    std::fs::write(
        &gp_cfg,
        format!("{CONFIG}[gp]\nenabled = true\nphi_columns = [\"z4\"]\nmax_sweeps = 1\nrestarts = 1\n"),
    )
    .unwrap();
    let gp_out = dir.path().join("gp");
    let r = flars(&[
        "fit", "--config", s(&gp_cfg), "--data", s(&train), "--selected", "f1,f2,f3,z1,z2,z3", "--out",
        s(&gp_out),
    ]);
    assert_eq!(r.status.code(), Some(3), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(gp_out.join("diagnostics.json").exists());
}

#[test]
fn runs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, export) = setup(dir.path(), "");
    let train = export.join("train/manifest.toml");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for (out, threads) in [(&a, "1"), (&b, "3")] {
        ok(flars(&["select", "--config", s(&cfg), "--data", s(&train), "--out", s(out)]));
        ok(flars(&[
            "simulate", "--config", s(&cfg), "--reps", "3", "--threads", threads, "--out", s(out),
        ]));
    }
    for f in ["trace.csv", "selection.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let strip = |p: &Path| -> Vec<Vec<String>> {
        let mut rd = csv::Reader::from_path(p).unwrap();
        let h = rd.headers().unwrap().clone();
        let t = h.iter().position(|c| c == "elapsed_seconds").unwrap();
        rd.records()
            .map(|r| {
                r.unwrap()
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != t)
                    .map(|(_, v)| v.to_string())
                    .collect()
            })
            .collect()
    };
    assert_eq!(strip(&a.join("replications.csv")), strip(&b.join("replications.csv")));

    // A different seed gives different data.
    let c = dir.path().join("c");
    ok(flars(&["simulate", "--config", s(&cfg), "--reps", "3", "--seed", "12", "--out", s(&c)]));
    assert_ne!(strip(&a.join("replications.csv")), strip(&c.join("replications.csv")));
}

#[test]
fn single_replication_summary() {
    let dir = tempfile::tempdir().unwrap();
    let (_, _) = setup(dir.path(), "");
    let sim = dir.path().join("sim");
    let summary: serde_json::Value =
        serde_json::from_reader(std::fs::File::open(sim.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["n_reps"], 1);
    assert_eq!(summary["n_failed"], 0);
    let mut rd = csv::Reader::from_path(sim.join("replications.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(&rows[1][0], "mean");
    assert_eq!(rows[0][3], rows[1][3]);
}

#[test]
fn paired_modification_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _) = setup(dir.path(), "");
    let text = std::fs::read_to_string(&cfg).unwrap();
    std::fs::write(&cfg, text.replace("reps = 1\n", "reps = 2\ncompare_modification = true\n")).unwrap();
    let out = dir.path().join("cmp");
    ok(flars(&["simulate", "--config", s(&cfg), "--out", s(&out)]));
    let c: serde_json::Value =
        serde_json::from_reader(std::fs::File::open(out.join("comparison.json")).unwrap()).unwrap();
    assert_eq!(c["n_pairs"], 2);
    assert!(out.join("replications_mod2.csv").exists());
}

#[test]
fn report_reproduces_the_stop_index() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, export) = setup(dir.path(), "");
    let out = dir.path().join("o");
    ok(flars(&[
        "select",
        "--config",
        s(&cfg),
        "--data",
        s(&export.join("train/manifest.toml")),
        "--out",
        s(&out),
    ]));
    ok(flars(&[
        "fit",
        "--config",
        s(&cfg),
        "--data",
        s(&export.join("train/manifest.toml")),
        "--selection",
        s(&out.join("selection.json")),
        "--out",
        s(&out),
    ]));
    let r = ok(flars(&[
        "report",
        "--config",
        s(&cfg),
        "--trace",
        s(&out.join("trace.csv")),
        "--model",
        s(&out.join("model.json")),
        "--out",
        s(&out),
    ]));
    let sel = load_selection(&out.join("selection.json"));
    let text = String::from_utf8_lossy(&r.stdout);
    assert!(text.contains(&format!("stops after iteration {} ", sel.stop_index)), "{text}");

    let mut rd = csv::Reader::from_path(out.join("stopping.csv")).unwrap();
    let below: Vec<String> = rd.records().map(|r| r.unwrap()[4].to_string()).collect();
    let first_below = below.iter().position(|b| b == "true").unwrap_or(below.len());
    assert_eq!(first_below, sel.stop_index);

    let mut rd = csv::Reader::from_path(out.join("beta_curves.csv")).unwrap();
    let ids: std::collections::BTreeSet<String> = rd.records().map(|r| r.unwrap()[0].to_string()).collect();
    let model = load_model(&out.join("model.json"));
    let want: std::collections::BTreeSet<String> = model.fixed.functional.iter().map(|t| t.id.clone()).collect();
    assert_eq!(ids, want);
}
