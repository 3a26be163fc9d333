use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use flars_core::flars::{
    read_trace_csv, run_flars, stopping_cd, write_trace_csv, CandidateSet, FittedModel, IterationRecord, StopReason,
};
use flars_core::funcrep::{Representation, TimeGrid};
use flars_core::gpmix::{backfit, refit_fixed, GpModel, NewSubjectRule, SubjectIndex};
use flars_core::persist;
use flars_core::simgen::{
    generate_scenario, run_replications, write_report_csv, write_summary_json, AggregateReport, AlgoOptions, Dataset,
};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::config::ProjectConfig;
use crate::data::{export_dataset, LoadedData, Manifest, Needs};
use crate::error::CliError;
use crate::output::{csv_error, write_atomic, write_envelope, write_json};

pub const SELECTION_FORMAT: &str = "flars-selection";
pub const MODEL_FORMAT: &str = "flars-model";

/// Result of `select`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionFile {
    pub selected: Vec<String>,
    pub stop_index: usize,
    pub stop_rule: StopReason,
    pub df_star: f64,
    pub cp: Option<f64>,
    pub sigma2: Option<f64>,
    pub cd_trace: Vec<Option<f64>>,
    pub n_rows: usize,
    pub n_dropped: usize,
    /// Coefficients at the stop index, still shrunk by the path.
    pub model: FittedModel,
}

/// Result of `fit`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub selected: Vec<String>,
    pub fixed: FittedModel,
    pub gp: Option<GpModel>,
    pub phi_columns: Vec<String>,
    pub new_subject: NewSubjectRule,
    /// Root mean square of the training residuals.
    pub residual_sd: f64,
    pub converged: bool,
    pub n_backfit_iters: usize,
    pub objective: Vec<f64>,
}

fn representation_for(cfg: &ProjectConfig, data: &LoadedData) -> Result<Representation, CliError> {
    let grid = match data.grid() {
        Some(g) => g.clone(),
        // Scalar-only data: any grid dense enough for the backend will do.
        None => TimeGrid::linspace(0.0, 1.0, 101)?,
    };
    Ok(Representation::build(&cfg.representation(), &grid)?)
}

fn candidates(cfg: &ProjectConfig, data: &LoadedData) -> Result<CandidateSet, CliError> {
    let rep = representation_for(cfg, data)?;
    Ok(CandidateSet::new(data.functional.clone(), data.scalar.clone(), rep)?)
}

fn response(data: &LoadedData) -> Result<&DVector<f64>, CliError> {
    let y = data.response.as_ref().ok_or_else(|| CliError::data("response column not loaded"))?;
    if y.len() < 3 {
        return Err(CliError::data(format!("only {} complete rows; at least 3 are needed", y.len())));
    }
    Ok(y)
}

pub fn select(cfg: &ProjectConfig, manifest: &Path, out: &Path) -> Result<SelectionFile, CliError> {
    let m = Manifest::load(manifest)?;
    let data = m.load_data(&Needs {
        response: true,
        variables: None,
        phi_columns: Vec::new(),
    })?;
    let y = response(&data)?;
    let cands = candidates(cfg, &data)?;
    if cands.is_empty() {
        return Err(CliError::data("the manifest lists no candidate variables"));
    }
    log::info!("selecting among {} candidates on {} rows", cands.len(), data.n());
    let (state, diag, model) = run_flars(y, &cands, &cfg.flars_options())?;
    let sel = SelectionFile {
        selected: model.selected_ids(),
        stop_index: diag.stop_index,
        stop_rule: diag.stop_rule,
        df_star: diag.df_star,
        cp: diag.cp,
        sigma2: diag.sigma2,
        cd_trace: diag.cd_trace.clone(),
        n_rows: data.n(),
        n_dropped: data.n_dropped,
        model,
    };
    write_atomic(&out.join("trace.csv"), |w| Ok(write_trace_csv(&state.records, &mut *w)?))?;
    write_envelope(&out.join("selection.json"), SELECTION_FORMAT, &sel)?;
    let summary = selection_summary(&sel, &state.records);
    write_atomic(&out.join("selection.txt"), |w| Ok(w.write_all(summary.as_bytes())?))?;
    print!("{summary}");
    Ok(sel)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into())
}

fn selection_summary(sel: &SelectionFile, records: &[IterationRecord]) -> String {
    let mut s = String::new();
    s.push_str(&format!("rows used: {} (dropped {})\n", sel.n_rows, sel.n_dropped));
    s.push_str(&format!("stopped after iteration {} ({:?})\n", sel.stop_index, sel.stop_rule));
    s.push_str(&format!(
        "selected ({}): {}\n",
        sel.selected.len(),
        if sel.selected.is_empty() {
            "none".to_string()
        } else {
            sel.selected.join(", ")
        }
    ));
    s.push_str(&format!("df* = {:.4}, Cp = {}\n\n", sel.df_star, fmt_opt(sel.cp)));
    s.push_str(&format!("{:>4}  {:<16} {:>12} {:>12} {:>12}\n", "iter", "entered", "alpha", "CD", "RSS"));
    for r in records {
        s.push_str(&format!(
            "{:>4}  {:<16} {:>12.6} {:>12} {:>12.6}\n",
            r.iteration,
            r.selected_id,
            r.alpha,
            fmt_opt(r.cd),
            r.rss
        ));
    }
    s
}

/// Reads the variable list of a `selection.json`.
pub fn read_selection(path: &Path) -> Result<Vec<String>, CliError> {
    let f = File::open(path).map_err(|e| CliError::data(format!("cannot open {}: {e}", path.display())))?;
    let sel: SelectionFile = persist::load_json(SELECTION_FORMAT, BufReader::new(f))?;
    Ok(sel.selected)
}

pub fn read_model(path: &Path) -> Result<ModelFile, CliError> {
    let f = File::open(path).map_err(|e| CliError::data(format!("cannot open {}: {e}", path.display())))?;
    Ok(persist::load_json(MODEL_FORMAT, BufReader::new(f))?)
}

pub fn fit(cfg: &ProjectConfig, manifest: &Path, selected: Vec<String>, out: &Path) -> Result<ModelFile, CliError> {
    if selected.is_empty() {
        return Err(CliError::data("no variables to fit"));
    }
    let m = Manifest::load(manifest)?;
    let phi_columns = if cfg.gp.enabled {
        cfg.gp.phi_columns.clone()
    } else {
        Vec::new()
    };
    let data = m.load_data(&Needs {
        response: true,
        variables: Some(selected.clone()),
        phi_columns: phi_columns.clone(),
    })?;
    let y = response(&data)?;
    let cands = candidates(cfg, &data)?;
    let model = if cfg.gp.enabled {
        let subjects = SubjectIndex::from_labels(&data.subjects);
        let mixed = backfit(y, &cands, &data.phi, &subjects, &cfg.backfit_options())?;
        let rss = mixed.rss.last().copied().unwrap_or(f64::NAN);
        ModelFile {
            selected,
            fixed: mixed.fixed,
            gp: Some(mixed.gp),
            phi_columns,
            new_subject: cfg.gp.new_subject,
            residual_sd: (rss / y.len() as f64).sqrt(),
            converged: mixed.converged,
            n_backfit_iters: mixed.n_backfit_iters,
            objective: mixed.objective,
        }
    } else {
        let fixed = refit_fixed(y, &cands, &cfg.flars_options())?;
        let resid = y - fixed.predict(&cands)?;
        ModelFile {
            selected,
            fixed,
            gp: None,
            phi_columns,
            new_subject: cfg.gp.new_subject,
            residual_sd: (resid.norm_squared() / y.len() as f64).sqrt(),
            converged: true,
            n_backfit_iters: 0,
            objective: Vec::new(),
        }
    };
    write_envelope(&out.join("model.json"), MODEL_FORMAT, &model)?;
    if !model.converged {
        write_json(
            &out.join("diagnostics.json"),
            &serde_json::json!({
                "converged": false,
                "sweeps": model.n_backfit_iters,
                "objective": model.objective,
                "tol": cfg.gp.tol,
                "max_sweeps": cfg.gp.max_sweeps,
            }),
        )?;
        return Err(CliError::not_converged(format!(
            "backfitting did not converge in {} sweeps; see diagnostics.json",
            model.n_backfit_iters
        )));
    }
    println!(
        "fitted {} variables on {} rows; residual sd {:.6}",
        model.selected.len(),
        data.n(),
        model.residual_sd
    );
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub subject: String,
    pub visit: String,
    pub mean: f64,
    pub sd: f64,
}

pub fn predict(model_path: &Path, manifest: &Path, out: &Path) -> Result<Vec<PredictionRow>, CliError> {
    let model = read_model(model_path)?;
    let m = Manifest::load(manifest)?;
    let data = m.load_data(&Needs {
        response: false,
        variables: Some(model.selected.clone()),
        phi_columns: if model.gp.is_some() {
            model.phi_columns.clone()
        } else {
            Vec::new()
        },
    })?;
    let mut rows = Vec::with_capacity(data.n());
    if data.n() > 0 {
        let rep = &model.fixed.representation;
        if let Some(g) = data.grid() {
            if g.points() != rep.grid().points() {
                return Err(CliError::schema("functional data are sampled on a different grid from the model"));
            }
        }
        let cands = CandidateSet::new(data.functional.clone(), data.scalar.clone(), rep.clone())?;
        let fixed = model.fixed.predict(&cands)?;
        for i in 0..data.n() {
            let (mean, var) = match &model.gp {
                None => (fixed[i], model.residual_sd.powi(2)),
                Some(gp) => {
                    let phi: Vec<f64> = data.phi.row(i).iter().copied().collect();
                    if gp.subjects.position(&data.subjects[i]).is_some() {
                        gp.predict_within_subject(&data.subjects[i], fixed[i], &phi)?
                    } else {
                        gp.predict_unseen(fixed[i], &phi, model.new_subject)?
                    }
                }
            };
            rows.push(PredictionRow {
                subject: data.subjects[i].clone(),
                visit: data.visits[i].clone(),
                mean,
                sd: var.sqrt(),
            });
        }
    }
    write_atomic(&out.join("predictions.csv"), |w| {
        let mut wr = csv::Writer::from_writer(&mut *w);
        wr.write_record(["subject", "visit", "mean", "sd"]).map_err(csv_error)?;
        for r in &rows {
            wr.write_record([r.subject.clone(), r.visit.clone(), r.mean.to_string(), r.sd.to_string()])
                .map_err(csv_error)?;
        }
        wr.flush()?;
        Ok(())
    })?;
    println!("wrote {} predictions", rows.len());
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub kappa: f64,
    pub n_pairs: usize,
    pub mean_false_pct_unmodified: f64,
    pub mean_false_pct_modified: f64,
    pub mean_true_pct_unmodified: f64,
    pub mean_true_pct_modified: f64,
    pub reps_modified_fewer_false: usize,
    pub reps_equal_false: usize,
    pub reps_modified_more_false: usize,
}

fn paired(base: &AggregateReport, modified: &AggregateReport, kappa: f64) -> PairedComparison {
    let mut pc = PairedComparison {
        kappa,
        n_pairs: 0,
        mean_false_pct_unmodified: 0.0,
        mean_false_pct_modified: 0.0,
        mean_true_pct_unmodified: 0.0,
        mean_true_pct_modified: 0.0,
        reps_modified_fewer_false: 0,
        reps_equal_false: 0,
        reps_modified_more_false: 0,
    };
    for (a, b) in base.rows.iter().zip(&modified.rows) {
        let (Some(a), Some(b)) = (&a.report, &b.report) else {
            continue;
        };
        pc.n_pairs += 1;
        pc.mean_false_pct_unmodified += a.false_pct;
        pc.mean_false_pct_modified += b.false_pct;
        pc.mean_true_pct_unmodified += a.true_pct;
        pc.mean_true_pct_modified += b.true_pct;
        match b.false_pct.partial_cmp(&a.false_pct) {
            Some(std::cmp::Ordering::Less) => pc.reps_modified_fewer_false += 1,
            Some(std::cmp::Ordering::Greater) => pc.reps_modified_more_false += 1,
            _ => pc.reps_equal_false += 1,
        }
    }
    if pc.n_pairs > 0 {
        let k = pc.n_pairs as f64;
        pc.mean_false_pct_unmodified /= k;
        pc.mean_false_pct_modified /= k;
        pc.mean_true_pct_unmodified /= k;
        pc.mean_true_pct_modified /= k;
    }
    pc
}

fn write_report_pair(
    out: &Path,
    suffix: &str,
    report: &AggregateReport,
    cfg: &ProjectConfig,
    algo: &AlgoOptions,
) -> Result<(), CliError> {
    let scenario = cfg.scenario();
    write_atomic(&out.join(format!("replications{suffix}.csv")), |w| {
        Ok(write_report_csv(report, &mut *w)?)
    })?;
    write_atomic(&out.join(format!("summary{suffix}.json")), |w| {
        write_summary_json(report, &scenario, algo, &mut *w)?;
        w.write_all(b"\n")?;
        Ok(())
    })
}

fn print_aggregate(label: &str, r: &AggregateReport) {
    println!(
        "{label}: {} reps ({} failed), RMSE {:.4}, true {:.1}%, false {:.1}%, {:.2} s/rep",
        r.n_reps, r.n_failed, r.mean_rmse, r.mean_true_pct, r.mean_false_pct, r.mean_elapsed_seconds
    );
}

pub fn simulate(
    cfg: &ProjectConfig,
    reps: usize,
    out: &Path,
    export: Option<&Path>,
) -> Result<(AggregateReport, Option<PairedComparison>), CliError> {
    let scenario = cfg.scenario();
    if let Some(dir) = export {
        let (train, test, truth) = generate_scenario(&scenario)?;
        export_split(&dir.join("train"), &train)?;
        export_split(&dir.join("test"), &test)?;
        write_json(
            &dir.join("truth.json"),
            &serde_json::json!({
                "true_ids": truth.ids,
                "grid": truth.grid.points(),
                "beta": truth.beta,
                "gamma": truth.gamma,
                "mu": truth.mu,
            }),
        )?;
        log::info!("exported one dataset to {}", dir.display());
    }
    let mut algo = cfg.algo_options();
    let compare = cfg.simulation.compare_modification;
    if compare {
        algo.flars.kappa = None;
    }
    let base = run_replications(&scenario, &algo, reps)?;
    write_report_pair(out, "", &base, cfg, &algo)?;
    print_aggregate(if compare { "unmodified" } else { "fLARS" }, &base);
    if !compare {
        return Ok((base, None));
    }
    let mut algo2 = algo.clone();
    algo2.flars.kappa = Some(cfg.modification2.kappa);
    let modified = run_replications(&scenario, &algo2, reps)?;
    write_report_pair(out, "_mod2", &modified, cfg, &algo2)?;
    print_aggregate("modification II", &modified);
    let pc = paired(&base, &modified, cfg.modification2.kappa);
    write_json(&out.join("comparison.json"), &pc)?;
    println!(
        "paired false selection: {:.2}% unmodified vs {:.2}% modified over {} pairs",
        pc.mean_false_pct_unmodified, pc.mean_false_pct_modified, pc.n_pairs
    );
    Ok((base, Some(pc)))
}

fn export_split(dir: &Path, d: &Dataset) -> Result<(), CliError> {
    let subjects: Vec<String> = (0..d.n()).map(|i| format!("s{}", i + 1)).collect();
    let visits = vec!["1".to_string(); d.n()];
    export_dataset(dir, &subjects, &visits, &d.y, &d.functional, &d.scalar)
}

#[derive(Clone, Debug, Default)]
pub struct ReportInputs {
    pub trace: Option<PathBuf>,
    pub model: Option<PathBuf>,
}

pub fn report(cfg: &ProjectConfig, inputs: &ReportInputs, out: &Path) -> Result<(), CliError> {
    if inputs.trace.is_none() && inputs.model.is_none() {
        return Err(CliError::data("report needs --trace and/or --model"));
    }
    if let Some(p) = &inputs.trace {
        let f = File::open(p).map_err(|e| CliError::data(format!("cannot open {}: {e}", p.display())))?;
        let records = read_trace_csv(BufReader::new(f))?;
        let cd: Vec<Option<f64>> = records.iter().map(|r| r.cd).collect();
        let max = cd.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let frac = cfg.stopping.cd_threshold_frac;
        let stop = stopping_cd(&cd, frac);
        write_atomic(&out.join("stopping.csv"), |w| {
            let mut wr = csv::Writer::from_writer(&mut *w);
            wr.write_record(["iteration", "selected_id", "cd", "cd_fraction", "below_threshold", "cp", "df_star", "rss"])
                .map_err(csv_error)?;
            let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
            for r in &records {
                let fraction = r.cd.filter(|_| max.is_finite() && max > 0.0).map(|c| c / max);
                wr.write_record([
                    r.iteration.to_string(),
                    r.selected_id.clone(),
                    opt(r.cd),
                    opt(fraction),
                    fraction.map(|f| (f < frac).to_string()).unwrap_or_default(),
                    opt(r.cp),
                    r.df_star.to_string(),
                    r.rss.to_string(),
                ])
                .map_err(csv_error)?;
            }
            wr.flush()?;
            Ok(())
        })?;
        println!("CD rule (threshold {frac}) stops after iteration {stop} of {}", records.len());
    }
    if let Some(p) = &inputs.model {
        let model = read_model(p)?;
        write_atomic(&out.join("beta_curves.csv"), |w| {
            let mut wr = csv::Writer::from_writer(&mut *w);
            wr.write_record(["id", "t", "beta"]).map_err(csv_error)?;
            for term in &model.fixed.functional {
                let (t, b) = model
                    .fixed
                    .beta_curve(&term.id)
                    .ok_or_else(|| CliError::generic(format!("cannot evaluate β for `{}`", term.id)))?;
                for (t, b) in t.iter().zip(&b) {
                    wr.write_record([term.id.clone(), t.to_string(), b.to_string()]).map_err(csv_error)?;
                }
            }
            wr.flush()?;
            Ok(())
        })?;
        write_atomic(&out.join("coefficients.csv"), |w| {
            let mut wr = csv::Writer::from_writer(&mut *w);
            wr.write_record(["term", "id", "value"]).map_err(csv_error)?;
            wr.write_record(["intercept", "", &model.fixed.intercept.to_string()]).map_err(csv_error)?;
            for s in &model.fixed.scalar {
                wr.write_record(["scalar", s.id.as_str(), &s.gamma.to_string()]).map_err(csv_error)?;
            }
            if let Some(gp) = &model.gp {
                wr.write_record(["kernel_v1", "", &gp.kernel.v1.to_string()]).map_err(csv_error)?;
                for (c, w) in model.phi_columns.iter().zip(&gp.kernel.w) {
                    wr.write_record(["kernel_w", c.as_str(), &w.to_string()]).map_err(csv_error)?;
                }
                wr.write_record(["kernel_sigma", "", &gp.kernel.sigma.to_string()]).map_err(csv_error)?;
            }
            wr.flush()?;
            Ok(())
        })?;
        println!(
            "model: {} functional and {} scalar terms",
            model.fixed.functional.len(),
            model.fixed.scalar.len()
        );
    }
    Ok(())
}
