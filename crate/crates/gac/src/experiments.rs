//! Experiment drivers. Each produces a table that is written as CSV with a
//! comment header naming the tool version, experiment, config digest and
//! seed. Rows are assembled in a fixed order regardless of thread count.

use std::io::Write;
use std::path::{Path, PathBuf};

use gac_core::bounds::{bound_sweep, mse_against_orbit, Chi2Mode, NRule};
use gac_core::divergence::{chi2_divergence, chi2_leading_order, kl_divergence, kl_leading_order, DivergenceMethod};
use gac_core::estimators::{mle_fit, MleOptions, ThetaMode};
use gac_core::group::orbit_distance_sq;
use gac_core::moments::{cutoff_search, empirical_moment, exact_moment, MomentTensor, SearchOptions};
use gac_core::rng::derive_seed;
use gac_core::{simulate_replicate, ChannelModel, GroupDistribution, ObservationBatch, Signal};
use rayon::prelude::*;

use crate::config::{ConfigError, ExperimentConfig, ExperimentKind, MethodSpec, Model, ThetaModeSpec};
use crate::verify::{verify_examples, Status};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] gac_core::Error),
    #[error("cannot write output: {0}")]
    Output(#[from] csv::Error),
    #[error("cannot write output: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot access {}: {source}", .path.display())]
    File { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub kind: ExperimentKind,
    pub digest: String,
    pub seed: u64,
    pub table: Table,
    /// Rows reporting an error or a failed check.
    pub failures: usize,
}

impl RunOutput {
    pub fn to_csv<W: Write>(&self, mut w: W) -> Result<(), RunError> {
        writeln!(w, "# gac {}", env!("CARGO_PKG_VERSION"))?;
        writeln!(w, "# experiment: {}", self.kind.as_str())?;
        writeln!(w, "# config_digest: {}", self.digest)?;
        writeln!(w, "# seed: {}", self.seed)?;
        let mut out = csv::Writer::from_writer(w);
        let mut header = self.table.columns.clone();
        header.push("config_digest".into());
        out.write_record(&header)?;
        for row in &self.table.rows {
            out.write_record(row.iter().map(String::as_str).chain(std::iter::once(self.digest.as_str())))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn csv_string(&self) -> Result<String, RunError> {
        let mut buf = Vec::new();
        self.to_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

/// Plain decimal for moderate magnitudes, scientific otherwise; both forms
/// round-trip exactly.
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-4..1e15).contains(&a) || !v.is_finite() {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

fn fmt_vec(v: impl IntoIterator<Item = f64>) -> String {
    v.into_iter().map(fmt_f64).collect::<Vec<_>>().join(" ")
}

fn method(m: MethodSpec) -> DivergenceMethod {
    match m {
        MethodSpec::Quadrature => DivergenceMethod::Quadrature,
        MethodSpec::MonteCarlo => DivergenceMethod::MonteCarlo,
        MethodSpec::LeadingOrder => DivergenceMethod::LeadingOrder,
    }
}

fn channel(model: &Model, sigma: f64) -> Result<ChannelModel, RunError> {
    Ok(ChannelModel::new(model.x.clone(), model.theta.clone(), model.projection.clone(), sigma)?)
}

/// Validates the configuration and runs the requested experiment.
pub fn run(config: &ExperimentConfig, kind: ExperimentKind) -> Result<RunOutput, RunError> {
    config.validate(kind)?;
    let (table, failures) = match kind {
        ExperimentKind::Simulate => run_simulate(config)?,
        ExperimentKind::Moments => run_moments(config)?,
        ExperimentKind::Cutoff => run_cutoff(config)?,
        ExperimentKind::DivergenceSweep => run_divergence(config)?,
        ExperimentKind::BoundSweep => run_bounds(config)?,
        ExperimentKind::MleSweep => run_mle(config)?,
        ExperimentKind::Verify => run_verify(config),
    };
    Ok(RunOutput {
        kind,
        digest: config.digest(),
        seed: config.seed,
        table,
        failures,
    })
}

fn run_simulate(config: &ExperimentConfig) -> Result<(Table, usize), RunError> {
    let model = config.model()?;
    let ns = config.sample_sizes(&model.sigmas)?;
    let dim = model.projection.output_dim();
    let mut cols = vec!["sigma".to_string(), "replicate".into(), "sample".into(), "group_element".into()];
    cols.extend((1..=dim).map(|i| format!("y{i}")));
    let mut table = Table {
        columns: cols,
        rows: Vec::new(),
    };
    for (i, (&sigma, &n)) in model.sigmas.iter().zip(&ns).enumerate() {
        let ch = channel(&model, sigma)?;
        for r in 0..config.simulate.replicates {
            let batch = simulate_replicate(&ch, n as usize, derive_seed(config.seed, i as u64), r)?;
            if let Some(dir) = &config.simulate.binary_dir {
                let path = dir.join(format!("sigma{i}_rep{r}.gacb"));
                let file = std::fs::File::create(&path).map_err(|e| RunError::File {
                    path: path.clone(),
                    source: e,
                })?;
                let mut w = std::io::BufWriter::new(file);
                batch.write_binary(&mut w)?;
                w.flush()?;
            }
            let assign = batch.diagnostic_assignments().expect("simulated batches carry assignments");
            for (j, y) in batch.rows().enumerate() {
                let mut row = vec![fmt_f64(sigma), r.to_string(), j.to_string(), assign[j].to_string()];
                row.extend(y.iter().map(|v| fmt_f64(*v)));
                table.push(row);
            }
        }
    }
    Ok((table, 0))
}

fn push_tensor(table: &mut Table, source: &str, sigma: &str, t: &MomentTensor) {
    let (order, dim) = (t.order(), t.dim());
    for (flat, v) in t.entries().iter().enumerate() {
        let mut idx = vec![0usize; order];
        let mut rem = flat;
        for k in (0..order).rev() {
            idx[k] = rem % dim + 1;
            rem /= dim;
        }
        let idx = idx.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ");
        table.push(vec![source.into(), sigma.into(), order.to_string(), idx, fmt_f64(*v)]);
    }
}

fn run_moments(config: &ExperimentConfig) -> Result<(Table, usize), RunError> {
    let model = config.model()?;
    let mut table = Table::new(&["source", "sigma", "order", "index", "value"]);
    for &order in &config.moments.orders {
        let t = exact_moment(&model.x, &model.theta, &model.projection, order)?;
        push_tensor(&mut table, "exact", "", &t);
    }
    if config.moments.empirical {
        let ns = config.sample_sizes(&model.sigmas)?;
        for (i, (&sigma, &n)) in model.sigmas.iter().zip(&ns).enumerate() {
            let batch = simulate_replicate(&channel(&model, sigma)?, n as usize, derive_seed(config.seed, i as u64), 0)?;
            for &order in &config.moments.orders {
                let t = empirical_moment(&batch, order, sigma, config.moments.debias)?;
                push_tensor(&mut table, "empirical", &fmt_f64(sigma), &t);
            }
        }
    }
    Ok((table, 0))
}

fn run_cutoff(config: &ExperimentConfig) -> Result<(Table, usize), RunError> {
    let model = config.model()?;
    let c = &config.cutoff;
    let opts = SearchOptions {
        max_order: c.max_order,
        restarts: c.restarts,
        match_tol: c.match_tol,
        orbit_floor: c.orbit_floor,
        seed: config.seed,
        ..SearchOptions::default()
    };
    let r = cutoff_search(&model.x, &model.theta, &model.projection, config.constraints(), &opts)?;
    let mut table = Table::new(&["order", "residual", "d_bar", "certified", "witness_x", "witness_theta"]);
    let wx = fmt_vec(r.witness_x.iter().copied());
    let wt = fmt_vec(r.witness_theta.weights().iter().copied());
    for (order, residual) in &r.matched_orders {
        table.push(vec![
            order.to_string(),
            fmt_f64(*residual),
            r.d_bar.to_string(),
            r.certified.to_string(),
            wx.clone(),
            wt.clone(),
        ]);
    }
    Ok((table, usize::from(!r.certified)))
}

fn run_divergence(config: &ExperimentConfig) -> Result<(Table, usize), RunError> {
    let model = config.model()?;
    let alt_spec = config.divergence.alternative.as_ref().expect("validated");
    let (ax, atheta) = model.alternative(alt_spec, "divergence.alternative")?;
    let opts = &config.divergence;
    let per_sigma: Vec<Vec<Vec<String>>> = model
        .sigmas
        .par_iter()
        .enumerate()
        .map(|(i, &sigma)| divergence_rows(&model, &ax, &atheta, sigma, derive_seed(config.seed, i as u64), opts))
        .collect::<Result<_, RunError>>()?;
    let mut table = Table::new(&[
        "sigma",
        "divergence",
        "method",
        "value",
        "std_error",
        "budget",
        "d",
        "leading_order_value",
        "status",
    ]);
    let mut failures = 0;
    for row in per_sigma.into_iter().flatten() {
        failures += usize::from(row[8] != "ok");
        table.push(row);
    }
    Ok((table, failures))
}

fn divergence_rows(
    model: &Model,
    ax: &Signal,
    atheta: &GroupDistribution,
    sigma: f64,
    seed: u64,
    opts: &crate::config::DivergenceOptions,
) -> Result<Vec<Vec<String>>, RunError> {
    let truth = channel(model, sigma)?;
    let alt = ChannelModel::new(ax.clone(), atheta.clone(), model.projection.clone(), sigma)?;
    let max_order = gac_core::divergence::DEFAULT_MAX_ORDER;
    let chi2_lead = chi2_leading_order(ax, atheta, &model.x, &model.theta, &model.projection, sigma, max_order);
    let kl_lead = kl_leading_order(ax, atheta, &model.x, &model.theta, &model.projection, sigma, max_order);
    let mut rows = Vec::new();
    let mut kinds = vec!["chi2"];
    if opts.kl {
        kinds.push("kl");
    }
    for kind in kinds {
        let lead = if kind == "chi2" { &chi2_lead } else { &kl_lead };
        let (d, lead_value) = match lead {
            Ok(t) => (t.order.to_string(), fmt_f64(t.value)),
            Err(_) => (String::new(), String::new()),
        };
        for &m in &opts.methods {
            let m = method(m);
            let est = if kind == "chi2" {
                chi2_divergence(&alt, &truth, m, opts.budget, seed)
            } else {
                kl_divergence(&alt, &truth, m, opts.budget, seed)
            };
            let mut row = vec![fmt_f64(sigma), kind.to_string(), m.as_str().to_string()];
            match est {
                Ok(e) => row.extend([
                    fmt_f64(e.value),
                    fmt_f64(e.std_error),
                    e.budget.to_string(),
                    d.clone(),
                    lead_value.clone(),
                    "ok".into(),
                ]),
                Err(e) => row.extend([
                    String::new(),
                    String::new(),
                    String::new(),
                    d.clone(),
                    lead_value.clone(),
                    format!("error: {e}"),
                ]),
            }
            rows.push(row);
        }
    }
    Ok(rows)
}

fn run_bounds(config: &ExperimentConfig) -> Result<(Table, usize), RunError> {
    let model = config.model()?;
    let witnesses = config
        .bound
        .witnesses
        .iter()
        .enumerate()
        .map(|(i, w)| model.alternative(w, &format!("bound.witnesses[{i}]")))
        .collect::<Result<Vec<_>, _>>()?;
    let nrule: NRule = config.n_rule()?;
    let mode = match config.bound.mode {
        MethodSpec::LeadingOrder => Chi2Mode::LeadingOrder,
        m => Chi2Mode::Exact {
            method: method(m),
            budget: config.bound.budget,
            seed: config.seed,
        },
    };
    let sweep = bound_sweep(&model.x, &model.theta, &model.projection, &witnesses, &model.sigmas, &nrule, mode)?;
    let mut table = Table::new(&[
        "sigma",
        "N",
        "witness",
        "lambda",
        "d",
        "K_d",
        "chi2_n",
        "mse_lower",
        "form",
        "flags",
        "status",
    ]);
    let mut failures = 0;
    for point in &sweep {
        let head = [fmt_f64(point.sigma), point.n.to_string()];
        for (i, r) in point.rows.iter().enumerate() {
            let mut row = head.to_vec();
            row.push(i.to_string());
            match r {
                Ok(b) => row.extend(bound_cells(b)),
                Err(e) => {
                    failures += 1;
                    row.extend(std::iter::repeat_n(String::new(), 7));
                    row.push(format!("error: {e}"));
                }
            }
            table.push(row);
        }
        if let Some(best) = point.best {
            let b = point.rows[best].as_ref().expect("best row is a bound");
            let mut row = head.to_vec();
            row.push("sup".into());
            row.extend(bound_cells(b));
            table.push(row);
        }
    }
    Ok((table, failures))
}

fn bound_cells(b: &gac_core::bounds::BoundReport) -> Vec<String> {
    vec![
        fmt_f64(b.lambda),
        b.d.to_string(),
        fmt_f64(b.k_d),
        fmt_f64(b.chi2_n),
        fmt_f64(b.mse_lower),
        b.form.as_str().into(),
        b.flags.describe(),
        "ok".into(),
    ]
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if !n.is_multiple_of(2) {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn run_mle(config: &ExperimentConfig) -> Result<(Table, usize), RunError> {
    let model = config.model()?;
    let spec = &config.mle;
    let stored = spec.batch.as_deref().map(read_batch).transpose()?;
    let (ns, replicates) = match &stored {
        Some(b) => (vec![b.n_samples() as u64], 1),
        None => (config.sample_sizes(&model.sigmas)?, spec.replicates),
    };
    let mut table = Table::new(&[
        "sigma",
        "N",
        "row",
        "replicate",
        "value",
        "loglik",
        "iterations",
        "converged",
        "singular",
        "x_hat",
    ]);
    let mut failures = 0;
    for (i, (&sigma, &n)) in model.sigmas.iter().zip(&ns).enumerate() {
        let ch = channel(&model, sigma)?;
        let sim_seed = derive_seed(config.seed, i as u64);
        let fits: Vec<Result<gac_core::estimators::FitResult, String>> = (0..replicates)
            .into_par_iter()
            .map(|r| {
                let simulated;
                let batch = match &stored {
                    Some(b) => b,
                    None => {
                        simulated = simulate_replicate(&ch, n as usize, sim_seed, r).map_err(|e| e.to_string())?;
                        &simulated
                    }
                };
                let opts = MleOptions {
                    restarts: spec.restarts,
                    max_iters: spec.max_iters,
                    tol: spec.tol,
                    theta_mode: match spec.theta_mode {
                        ThetaModeSpec::KnownFixed => ThetaMode::KnownFixed,
                        ThetaModeSpec::Estimated => ThetaMode::Estimated,
                    },
                    init_scale: spec.init_scale,
                    seed: derive_seed(sim_seed, r),
                    theta: Some(model.theta.weights().to_vec()),
                    initial_x: None,
                };
                mle_fit(batch, model.group(), &model.projection, sigma, &opts).map_err(|e| e.to_string())
            })
            .collect();
        let head = [fmt_f64(sigma), n.to_string()];
        let mut estimates = Vec::new();
        let mut errors = Vec::new();
        for (r, fit) in fits.iter().enumerate() {
            let mut row = head.to_vec();
            row.extend(["replicate".to_string(), r.to_string()]);
            match fit {
                Ok(f) => {
                    let err = orbit_distance_sq(&f.x_hat, &model.x, model.group())?;
                    errors.push(err);
                    estimates.push(f.x_hat.clone());
                    row.extend([
                        fmt_f64(err),
                        fmt_f64(f.final_loglik),
                        f.iterations.to_string(),
                        f.converged.to_string(),
                        f.singular.to_string(),
                        fmt_vec(f.x_hat.iter().copied()),
                    ]);
                }
                Err(e) => {
                    failures += 1;
                    row.extend(std::iter::repeat_n(String::new(), 5));
                    row.push(format!("error: {e}"));
                }
            }
            table.push(row);
        }
        if estimates.is_empty() {
            continue;
        }
        let rep = mse_against_orbit(&estimates, &model.x, model.group())?;
        let summary = [
            ("mse", rep.mse),
            ("bias_sq", rep.bias_sq),
            ("cov_trace", rep.cov_trace),
            ("mse_std_error", rep.mse_std_error),
            ("median_error_sq", median(&mut errors)),
        ];
        for (name, v) in summary {
            let mut row = head.to_vec();
            row.extend([name.to_string(), String::new(), fmt_f64(v)]);
            row.extend(std::iter::repeat_n(String::new(), 5));
            table.push(row);
        }
    }
    Ok((table, failures))
}

/// Binary batch file, or CSV when the extension is `.csv`.
pub fn read_batch(path: &Path) -> Result<ObservationBatch, RunError> {
    let file = std::fs::File::open(path).map_err(|e| RunError::File {
        path: path.to_path_buf(),
        source: e,
    })?;
    let reader = std::io::BufReader::new(file);
    let csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    Ok(if csv {
        ObservationBatch::read_csv(reader, 0)?
    } else {
        ObservationBatch::read_binary(reader)?
    })
}

fn run_verify(config: &ExperimentConfig) -> (Table, usize) {
    let checks = verify_examples(&config.verify);
    let mut table = Table::new(&["check", "expected", "observed", "tolerance", "status", "note"]);
    let mut failures = 0;
    for c in checks {
        failures += usize::from(c.status == Status::Fail);
        let num = |v: f64| if v.is_nan() { String::new() } else { fmt_f64(v) };
        table.push(vec![
            c.name,
            num(c.expected),
            num(c.observed),
            fmt_f64(c.tolerance),
            c.status.as_str().into(),
            c.note,
        ]);
    }
    (table, failures)
}

#[cfg(test)]
mod tests {
    use super::*;

    const EX2: &str = r#"
seed = 11
[model]
signal = [1.0, 2.0]
sigma = [1.0, 2.0]
projection = { kind = "select", coords = [0] }
[n_rule]
kind = "explicit"
values = [200, 300]
"#;

    fn cfg(extra: &str) -> ExperimentConfig {
        ExperimentConfig::from_toml(&format!("{EX2}{extra}")).unwrap()
    }

    #[test]
    fn float_format_round_trips() {
        for v in [0.0, 1.5, -2.25e-7, 3.0e20, 1.0 / 3.0, 12345.678] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(fmt_f64(0.5), "0.5");
        assert_eq!(fmt_f64(1e-7), "1e-7");
    }

    #[test]
    fn simulate_table_shape() {
        let out = run(&cfg(""), ExperimentKind::Simulate).unwrap();
        assert_eq!(out.table.rows.len(), 500);
        assert_eq!(out.table.columns, ["sigma", "replicate", "sample", "group_element", "y1"]);
        let csv = out.csv_string().unwrap();
        assert!(csv.starts_with("# gac "));
        assert!(csv.contains(&format!("# config_digest: {}", out.digest)));
        assert!(csv.lines().nth(4).unwrap().ends_with(",config_digest"));
    }

    #[test]
    fn moment_indices_are_one_based() {
        let out = run(&cfg("[moments]\norders = [2]\n"), ExperimentKind::Moments).unwrap();
        assert_eq!(out.table.rows.len(), 1);
        assert_eq!(out.table.rows[0], ["exact", "", "2", "1 1", "2.5"]);
    }

    #[test]
    fn bound_sweep_has_sup_rows() {
        let c = cfg("[bound]\nwitnesses = [{ signal = [0.0, 3.0] }, { signal = [2.0, 1.0] }]\n");
        let out = run(&c, ExperimentKind::BoundSweep).unwrap();
        // the second witness is in the orbit of the truth
        assert_eq!(out.failures, 2);
        let w = out.table.column("witness").unwrap();
        assert_eq!(out.table.rows.iter().filter(|r| r[w] == "sup").count(), 2);
    }

    #[test]
    fn divergence_rows_per_method() {
        let c = cfg("[divergence]\nalternative = { signal = [0.0, 3.0] }\n");
        let out = run(&c, ExperimentKind::DivergenceSweep).unwrap();
        assert_eq!(out.failures, 0);
        assert_eq!(out.table.rows.len(), 2 * 2 * 2);
        let d = out.table.column("d").unwrap();
        assert!(out.table.rows.iter().all(|r| r[d] == "2"));
    }

    #[test]
    fn mle_summary_rows() {
        let c = cfg("[mle]\nreplicates = 3\nrestarts = 2\n");
        let out = run(&c, ExperimentKind::MleSweep).unwrap();
        assert_eq!(out.failures, 0);
        assert_eq!(out.table.rows.len(), 2 * (3 + 5));
    }

    #[test]
    fn verify_runs_without_model() {
        let c = ExperimentConfig::from_toml("").unwrap();
        let out = run(&c, ExperimentKind::Verify).unwrap();
        assert_eq!(out.failures, 0);
    }
}
