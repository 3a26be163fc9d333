//! Synthetic scalar-on-function scenarios and replicated selection runs.

use std::collections::HashSet;
use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, FlarsError, Result};
use crate::flars::{run_flars, CandidateSet, FlarsOptions};
use crate::funcrep::{FunctionalSample, Representation, RepresentationConfig, TimeGrid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub n_functional: usize,
    pub n_scalar: usize,
    pub n_true_functional: usize,
    pub n_true_scalar: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub noise_sd: f64,
    pub grid_q: usize,
    pub seed: u64,
    /// Length-scale of the squared-exponential law of the candidate curves.
    pub length_scale: f64,
    /// Multiplies every true coefficient function.
    pub beta_scale: f64,
    pub gamma: Vec<f64>,
    pub mu: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self::scenario1()
    }
}

impl ScenarioConfig {
    /// Seven functional and five scalar candidates.
    pub fn scenario1() -> Self {
        ScenarioConfig {
            n_functional: 7,
            n_scalar: 5,
            n_true_functional: 3,
            n_true_scalar: 3,
            n_train: 200,
            n_test: 200,
            noise_sd: 0.05,
            grid_q: 100,
            seed: 0,
            length_scale: 0.2,
            beta_scale: 1.0,
            gamma: vec![1.0, -1.0, 0.5],
            mu: 0.0,
        }
    }

    /// Fifty functional and fifty scalar candidates.
    pub fn scenario2() -> Self {
        ScenarioConfig {
            n_functional: 50,
            n_scalar: 50,
            ..Self::scenario1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_true_functional > self.n_functional || self.n_true_scalar > self.n_scalar {
            return Err(invalid("more true variables than candidates"));
        }
        if self.n_true_functional > 3 {
            return Err(invalid("at most 3 true functional variables are defined"));
        }
        if self.gamma.len() < self.n_true_scalar {
            return Err(invalid(format!(
                "{} true scalar variables but only {} gamma values",
                self.n_true_scalar,
                self.gamma.len()
            )));
        }
        if !(self.noise_sd >= 0.0) || !self.noise_sd.is_finite() {
            return Err(invalid("noise_sd must be finite and >= 0"));
        }
        if self.grid_q < 3 {
            return Err(invalid("grid_q must be at least 3"));
        }
        if self.n_train < 2 {
            return Err(invalid("n_train must be at least 2"));
        }
        if !(self.length_scale > 0.0) {
            return Err(invalid("length_scale must be positive"));
        }
        Ok(())
    }

    pub fn true_ids(&self) -> Vec<String> {
        (1..=self.n_true_functional)
            .map(|i| format!("f{i}"))
            .chain((1..=self.n_true_scalar).map(|i| format!("z{i}")))
            .collect()
    }
}

/// Responses plus raw candidate data on a common grid.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub y: DVector<f64>,
    pub functional: Vec<(String, FunctionalSample)>,
    pub scalar: Vec<(String, DVector<f64>)>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn candidates(&self, rep: &Representation) -> Result<CandidateSet> {
        CandidateSet::new(self.functional.clone(), self.scalar.clone(), rep.clone())
    }
}

/// The generating model.
#[derive(Clone, Debug)]
pub struct Truth {
    pub ids: Vec<String>,
    pub grid: TimeGrid,
    pub beta: Vec<(String, Vec<f64>)>,
    pub gamma: Vec<(String, f64)>,
    pub mu: f64,
}

impl Truth {
    /// Noise-free response of a dataset under the true coefficients.
    pub fn signal(&self, data: &Dataset) -> Result<DVector<f64>> {
        let w = trapezoid_weights(self.grid.points());
        let mut out = DVector::from_element(data.n(), self.mu);
        for (id, b) in &self.beta {
            let x = &data
                .functional
                .iter()
                .find(|(i, _)| i == id)
                .ok_or_else(|| invalid(format!("dataset lacks `{id}`")))?
                .1;
            let bw = DVector::from_iterator(b.len(), b.iter().zip(&w).map(|(b, w)| b * w));
            out += x.values() * bw;
        }
        for (id, g) in &self.gamma {
            let z = &data
                .scalar
                .iter()
                .find(|(i, _)| i == id)
                .ok_or_else(|| invalid(format!("dataset lacks `{id}`")))?
                .1;
            out.axpy(*g, z, 1.0);
        }
        Ok(out)
    }
}

fn trapezoid_weights(t: &[f64]) -> Vec<f64> {
    let q = t.len();
    let mut w = vec![0.0; q];
    for i in 0..q - 1 {
        let h = 0.5 * (t[i + 1] - t[i]);
        w[i] += h;
        w[i + 1] += h;
    }
    w
}

/// The three true coefficient shapes: a full sine period, a central bump
/// and a linear ramp, scaled so each term has a spread of about 0.45.
pub fn true_beta(index: usize, t: f64) -> f64 {
    match index {
        0 => 1.25 * (2.0 * std::f64::consts::PI * t).sin(),
        1 => 2.0 * (-(t - 0.5).powi(2) / 0.02).exp(),
        _ => 1.5 * (2.0 * t - 1.0),
    }
}

/// Square root `A` of the squared-exponential covariance on the grid, so
/// `A·ξ` with standard normal `ξ` is a path of the process.
fn se_sqrt(grid: &TimeGrid, length_scale: f64) -> DMatrix<f64> {
    let t = grid.points();
    let q = t.len();
    let k = DMatrix::from_fn(q, q, |i, j| (-0.5 * ((t[i] - t[j]) / length_scale).powi(2)).exp());
    let eig = k.symmetric_eigen();
    let mut v = eig.eigenvectors;
    for (j, mut col) in v.column_iter_mut().enumerate() {
        col *= eig.eigenvalues[j].max(0.0).sqrt();
    }
    v
}

fn draw(cfg: &ScenarioConfig, n: usize, sqrt_k: &DMatrix<f64>, grid: &TimeGrid, rng: &mut ChaCha8Rng) -> Dataset {
    let q = grid.len();
    let functional = (1..=cfg.n_functional)
        .map(|i| {
            let xi = DMatrix::from_fn(q, n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = (sqrt_k * xi).transpose();
            (format!("f{i}"), FunctionalSample::new(x, grid.clone()).expect("finite draws"))
        })
        .collect();
    let scalar = (1..=cfg.n_scalar)
        .map(|i| {
            let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            (format!("z{i}"), z)
        })
        .collect();
    let noise = DVector::from_fn(n, |_, _| cfg.noise_sd * rng.sample::<f64, _>(StandardNormal));
    Dataset {
        y: noise,
        functional,
        scalar,
    }
}

/// Draws independent training and test sets from the scenario.
pub fn generate_scenario(cfg: &ScenarioConfig) -> Result<(Dataset, Dataset, Truth)> {
    cfg.validate()?;
    let grid = TimeGrid::linspace(0.0, 1.0, cfg.grid_q)?;
    let sqrt_k = se_sqrt(&grid, cfg.length_scale);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let truth = Truth {
        ids: cfg.true_ids(),
        beta: (0..cfg.n_true_functional)
            .map(|j| {
                let b = grid.points().iter().map(|&t| cfg.beta_scale * true_beta(j, t)).collect();
                (format!("f{}", j + 1), b)
            })
            .collect(),
        gamma: (0..cfg.n_true_scalar)
            .map(|j| (format!("z{}", j + 1), cfg.gamma[j]))
            .collect(),
        mu: cfg.mu,
        grid: grid.clone(),
    };
    let mut train = draw(cfg, cfg.n_train, &sqrt_k, &grid, &mut rng);
    let mut test = draw(cfg, cfg.n_test, &sqrt_k, &grid, &mut rng);
    train.y += truth.signal(&train)?;
    test.y += truth.signal(&test)?;
    Ok((train, test, truth))
}

/// True and false selection percentages `A/(A+B)` and `B/(A+B)`; an empty
/// selection gives `(0, 0)` and sets the flag.
pub fn selection_metrics(selected: &[String], truth: &[String]) -> (f64, f64, bool) {
    let truth: HashSet<&str> = truth.iter().map(String::as_str).collect();
    let sel: HashSet<&str> = selected.iter().map(String::as_str).collect();
    let a = sel.iter().filter(|s| truth.contains(*s)).count();
    let b = sel.len() - a;
    if a + b == 0 {
        return (0.0, 0.0, true);
    }
    let total = (a + b) as f64;
    (100.0 * a as f64 / total, 100.0 * b as f64 / total, false)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationReport {
    pub rmse: f64,
    pub true_pct: f64,
    pub false_pct: f64,
    pub elapsed_seconds: f64,
    pub selected_ids: Vec<String>,
    pub stop_iteration: usize,
    pub empty_selection: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlgoOptions {
    pub representation: RepresentationConfig,
    pub flars: FlarsOptions,
}

/// Generates one dataset, runs the selection on the training part and
/// scores the test part.
pub fn run_replication(cfg: &ScenarioConfig, algo: &AlgoOptions) -> Result<ReplicationReport> {
    let (train, test, truth) = generate_scenario(cfg)?;
    let start = Instant::now();
    let grid = train.functional.first().map(|(_, x)| x.grid().clone()).unwrap_or(truth.grid.clone());
    let rep = Representation::build(&algo.representation, &grid)?;
    let cands = train.candidates(&rep)?;
    let (_, diag, model) = run_flars(&train.y, &cands, &algo.flars)?;
    let elapsed_seconds = start.elapsed().as_secs_f64();
    let pred = model.predict(&test.candidates(&rep)?)?;
    let rmse = ((&pred - &test.y).norm_squared() / test.n() as f64).sqrt();
    let selected_ids = model.selected_ids();
    let (true_pct, false_pct, empty_selection) = selection_metrics(&selected_ids, &truth.ids);
    Ok(ReplicationReport {
        rmse,
        true_pct,
        false_pct,
        elapsed_seconds,
        selected_ids,
        stop_iteration: diag.stop_index,
        empty_selection,
    })
}

/// Seed of replication `index`, derived from the master seed by a counter.
pub fn replication_seed(master: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index as u64 + 1);
    rng.next_u64()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRow {
    pub rep: usize,
    pub seed: u64,
    pub report: Option<ReplicationReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub n_reps: usize,
    pub n_failed: usize,
    pub mean_rmse: f64,
    pub mean_true_pct: f64,
    pub mean_false_pct: f64,
    pub mean_elapsed_seconds: f64,
    pub rows: Vec<ReplicationRow>,
}

impl AggregateReport {
    /// Equality that ignores wall-clock timings.
    pub fn same_results(&self, other: &AggregateReport) -> bool {
        let strip = |r: &AggregateReport| {
            let mut r = r.clone();
            r.mean_elapsed_seconds = 0.0;
            for row in &mut r.rows {
                if let Some(rep) = &mut row.report {
                    rep.elapsed_seconds = 0.0;
                }
            }
            r
        };
        strip(self) == strip(other)
    }
}

/// Runs `n_reps` independent replications; replication `i` uses the seed
/// derived from `cfg.seed` and `i`. Individual failures are kept in the
/// rows; more than 10% failures is an error.
pub fn run_replications(cfg: &ScenarioConfig, algo: &AlgoOptions, n_reps: usize) -> Result<AggregateReport> {
    if n_reps == 0 {
        return Err(invalid("n_reps must be at least 1"));
    }
    cfg.validate()?;
    let rows: Vec<ReplicationRow> = (0..n_reps)
        .into_par_iter()
        .map(|i| {
            let seed = replication_seed(cfg.seed, i);
            let rep_cfg = ScenarioConfig { seed, ..cfg.clone() };
            match run_replication(&rep_cfg, algo) {
                Ok(r) => ReplicationRow {
                    rep: i + 1,
                    seed,
                    report: Some(r),
                    error: None,
                },
                Err(e) => ReplicationRow {
                    rep: i + 1,
                    seed,
                    report: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let ok: Vec<&ReplicationReport> = rows.iter().filter_map(|r| r.report.as_ref()).collect();
    let n_failed = n_reps - ok.len();
    if n_failed * 10 > n_reps {
        return Err(FlarsError::ReplicationFailures {
            failed: n_failed,
            total: n_reps,
        });
    }
    let avg = |f: &dyn Fn(&ReplicationReport) -> f64| ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64;
    Ok(AggregateReport {
        n_reps,
        n_failed,
        mean_rmse: avg(&|r| r.rmse),
        mean_true_pct: avg(&|r| r.true_pct),
        mean_false_pct: avg(&|r| r.false_pct),
        mean_elapsed_seconds: avg(&|r| r.elapsed_seconds),
        rows,
    })
}

#[derive(Serialize)]
struct CsvRow<'a> {
    rep: String,
    seed: String,
    status: &'a str,
    rmse: Option<f64>,
    true_pct: Option<f64>,
    false_pct: Option<f64>,
    elapsed_seconds: Option<f64>,
    stop_iteration: Option<usize>,
    n_selected: Option<usize>,
    selected_ids: String,
    error: String,
}

/// One row per replication followed by a `mean` summary row.
pub fn write_report_csv<W: Write>(report: &AggregateReport, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for row in &report.rows {
        let r = row.report.as_ref();
        wr.serialize(CsvRow {
            rep: row.rep.to_string(),
            seed: row.seed.to_string(),
            status: if r.is_some() { "ok" } else { "failed" },
            rmse: r.map(|r| r.rmse),
            true_pct: r.map(|r| r.true_pct),
            false_pct: r.map(|r| r.false_pct),
            elapsed_seconds: r.map(|r| r.elapsed_seconds),
            stop_iteration: r.map(|r| r.stop_iteration),
            n_selected: r.map(|r| r.selected_ids.len()),
            selected_ids: r.map(|r| r.selected_ids.join(";")).unwrap_or_default(),
            error: row.error.clone().unwrap_or_default(),
        })?;
    }
    wr.serialize(CsvRow {
        rep: "mean".into(),
        seed: String::new(),
        status: "summary",
        rmse: Some(report.mean_rmse),
        true_pct: Some(report.mean_true_pct),
        false_pct: Some(report.mean_false_pct),
        elapsed_seconds: Some(report.mean_elapsed_seconds),
        stop_iteration: None,
        n_selected: None,
        selected_ids: String::new(),
        error: format!("{} failed", report.n_failed),
    })?;
    wr.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Summary<'a> {
    format: &'static str,
    version: u32,
    scenario: &'a ScenarioConfig,
    algorithm: &'a AlgoOptions,
    n_reps: usize,
    n_failed: usize,
    mean_rmse: f64,
    mean_true_pct: f64,
    mean_false_pct: f64,
    mean_elapsed_seconds: f64,
}

pub fn write_summary_json<W: Write>(
    report: &AggregateReport,
    cfg: &ScenarioConfig,
    algo: &AlgoOptions,
    w: W,
) -> Result<()> {
    let s = Summary {
        format: "flars-simulation-summary",
        version: 1,
        scenario: cfg,
        algorithm: algo,
        n_reps: report.n_reps,
        n_failed: report.n_failed,
        mean_rmse: report.mean_rmse,
        mean_true_pct: report.mean_true_pct,
        mean_false_pct: report.mean_false_pct,
        mean_elapsed_seconds: report.mean_elapsed_seconds,
    };
    serde_json::to_writer_pretty(w, &s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small() -> ScenarioConfig {
        ScenarioConfig {
            n_train: 60,
            n_test: 30,
            grid_q: 40,
            ..ScenarioConfig::scenario1()
        }
    }

    #[test]
    fn noiseless_truth_reproduces_test_response() {
        let cfg = ScenarioConfig {
            noise_sd: 0.0,
            ..small()
        };
        let (_, test, truth) = generate_scenario(&cfg).unwrap();
        let err = (&truth.signal(&test).unwrap() - &test.y).abs().max();
        assert!(err < 1e-8);
    }

    #[test]
    fn generation_is_deterministic() {
        let (a, b, _) = generate_scenario(&small()).unwrap();
        let (c, d, _) = generate_scenario(&small()).unwrap();
        assert_eq!(a.y, c.y);
        assert_eq!(b.y, d.y);
        assert_eq!(a.functional[3].1, c.functional[3].1);
        let (e, _, _) = generate_scenario(&ScenarioConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.y, e.y);
    }

    #[test]
    fn ids_and_shapes() {
        let (train, test, truth) = generate_scenario(&small()).unwrap();
        assert_eq!(train.functional.len(), 7);
        assert_eq!(train.scalar.len(), 5);
        assert_eq!(test.n(), 30);
        assert_eq!(truth.ids, vec!["f1", "f2", "f3", "z1", "z2", "z3"]);
        assert_eq!(train.functional[0].1.values().shape(), (60, 40));
    }

    #[test]
    fn metric_examples() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        let truth = s(&["f1", "f2", "f3", "z1", "z2", "z3"]);
        assert_eq!(selection_metrics(&truth, &truth), (100.0, 0.0, false));
        assert_eq!(selection_metrics(&s(&["f1", "z2", "z3", "f7"]), &truth), (75.0, 25.0, false));
        assert_eq!(selection_metrics(&s(&["f5", "z4"]), &truth), (0.0, 100.0, false));
        assert_eq!(selection_metrics(&[], &truth), (0.0, 0.0, true));
    }

    #[test]
    fn invalid_configs() {
        assert!(generate_scenario(&ScenarioConfig {
            n_functional: 2,
            ..small()
        })
        .is_err());
        assert!(generate_scenario(&ScenarioConfig {
            noise_sd: -1.0,
            ..small()
        })
        .is_err());
    }

    #[test]
    fn single_replication_aggregate_equals_row() {
        let algo = AlgoOptions {
            representation: RepresentationConfig::gq(10),
            ..Default::default()
        };
        let agg = run_replications(&small(), &algo, 1).unwrap();
        let row = agg.rows[0].report.as_ref().unwrap();
        assert_eq!(agg.mean_rmse, row.rmse);
        assert_eq!(agg.mean_true_pct, row.true_pct);
        assert_eq!(agg.mean_false_pct, row.false_pct);
        assert_abs_diff_eq!(row.true_pct + row.false_pct, 100.0, epsilon = 1e-12);
        let mut buf = Vec::new();
        write_report_csv(&agg, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().last().unwrap().starts_with("mean,"));
    }

    #[test]
    fn replication_seeds_differ_and_repeat() {
        assert_eq!(replication_seed(7, 3), replication_seed(7, 3));
        assert_ne!(replication_seed(7, 3), replication_seed(7, 4));
        assert_ne!(replication_seed(7, 3), replication_seed(8, 3));
    }
}
