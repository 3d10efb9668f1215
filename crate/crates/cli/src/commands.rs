use std::fmt::Write as _;

use cmp_irls::data::{
    build_model_inputs, load_csv, parse_formula, parse_formula_with_default_df, parse_month, ColumnType, Dataset,
    ModelFormula, SchemaHints, DAY_COLUMN,
};
use cmp_irls::dist::{cumulants, log_z_asymptotic, log_z_truncated, CmpParams, CumulantPolicy};
use cmp_irls::gam::{fit_gam, partial_plot_data, BackfitOptions, GamOptions};
use cmp_irls::regression::{coefficient_row, fit, summarize, Dispersion, FitOptions};
use cmp_irls::simulation::{
    format_report, outlier_base_scenario, outlier_robustness_check_with, run_bootstrap_study, GamScenario,
    RegressionScenario, Resampling, Scenario, StudyModel, StudyOptions,
};

use crate::output::{
    fit_table, gam_table, robustness_table, FitSummaryDoc, GamSummaryDoc, RobustnessDoc, RowCounts, SmoothSummary,
};
use crate::{
    parse_grid, write_file, DataArgs, DistArgs, FitArgs, GamArgs, InputError, IterationArgs, ModelArg, RobustnessArgs,
    ScenarioKind, SimulateArgs, Status,
};

fn fit_options(a: &IterationArgs) -> Result<FitOptions, InputError> {
    let opts = FitOptions {
        nu_init: a.nu_init,
        tol: a.tol,
        max_iter: a.max_iter,
        ..FitOptions::default()
    };
    opts.validate()?;
    Ok(opts)
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("documents are plain data");
    s.push('\n');
    s
}

fn status(converged: bool) -> Status {
    if converged {
        Status::Ok
    } else {
        Status::NotConverged
    }
}

/// Loads the columns `formula` needs and applies the month filter.
fn load(a: &DataArgs, formula: &ModelFormula) -> Result<(Dataset, RowCounts), InputError> {
    let mut hints = match &a.schema {
        Some(p) => SchemaHints::from_json_file(p)?,
        None => SchemaHints::bike_sharing(),
    };
    for c in &a.categorical {
        hints.columns.insert(c.clone(), ColumnType::Categorical);
    }
    let mut required = formula.variables();
    if a.month.is_some() && !required.iter().any(|v| v == DAY_COLUMN) {
        // Pulls in the date column the filter reads.
        required.push(DAY_COLUMN.to_string());
    }
    let mut ds = load_csv(&a.input, &hints.with_required(required))?;
    if let Some(m) = &a.month {
        let (year, month) = parse_month(m)?;
        ds = ds.filter_month(year, month)?;
    }
    let r = ds.report();
    let rows = RowCounts {
        file_rows: r.file_rows,
        dropped_missing: r.dropped_missing,
        dropped_filtered: r.dropped_filtered,
        used: ds.row_count(),
    };
    Ok((ds, rows))
}

pub fn cmd_fit(a: &FitArgs) -> Result<Status, InputError> {
    let formula = parse_formula(&a.data.formula)?;
    if formula.has_smooths() {
        return Err(InputError("the formula has smooth terms s(...); use `cmp gam` for additive models".into()));
    }
    let opts = fit_options(&a.iter)?;
    let (ds, rows) = load(&a.data, &formula)?;
    let inputs = build_model_inputs(&ds, &formula)?;
    let result = fit(&inputs.model_data()?, &opts)?;
    let s = summarize(&result);
    let (beta, gamma) = s.coefficients.into_iter().partition(|c| c.component == "lambda");
    let doc = FitSummaryDoc {
        command: "fit".into(),
        input: a.data.input.display().to_string(),
        formula: a.data.formula.clone(),
        month: a.data.month.clone(),
        rows,
        beta,
        gamma,
        aic: result.aic,
        deviance: result.deviance,
        initial_deviance: result.initial_deviance,
        deviance_trace: result.deviance_trace.clone(),
        log_nu: s.mean_log_nu,
        dispersion: s.dispersion,
        dispersion_note: s.dispersion_note,
        converged: result.converged,
        iterations: result.iterations,
        encoding: inputs.encoding,
    };
    write_file(&a.data.out.join("fit_summary.json"), &to_json(&doc))?;
    print!("{}", fit_table(&doc));
    if !doc.converged {
        log::warn!("no convergence after {} iterations", doc.iterations);
    }
    Ok(status(doc.converged))
}

/// File-name-safe form of a variable name.
fn file_stem(variable: &str) -> String {
    variable
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect()
}

pub fn cmd_gam(a: &GamArgs) -> Result<Status, InputError> {
    let formula = parse_formula_with_default_df(&a.data.formula, a.df)?;
    if !formula.has_smooths() {
        return Err(InputError(
            "the formula has no smooth terms; use `cmp fit` for parametric models, or wrap a covariate as s(x)".into(),
        ));
    }
    if a.grid < 2 {
        return Err(InputError("--grid needs at least 2 points".into()));
    }
    let fit_opts = fit_options(&a.iter)?;
    let (ds, rows) = load(&a.data, &formula)?;
    let inputs = build_model_inputs(&ds, &formula)?;
    let data = inputs.gam_data()?;
    let opts = GamOptions {
        fit: FitOptions {
            fixed_gamma: a.poisson.then(|| vec![0.0; data.z().ncols()]),
            ..fit_opts
        },
        backfit: BackfitOptions::default(),
        score_tests: !a.no_score_tests,
    };
    let g = fit_gam(&data, &inputs.spec, &opts)?;

    let mut smooths = Vec::new();
    for (spec, term) in inputs.spec.smooths.iter().zip(&g.smooths) {
        let name = format!("partial_{}.csv", file_stem(&spec.variable));
        let mut csv = String::from("x,fhat,lower,upper\n");
        for p in partial_plot_data(&g, &spec.variable, a.grid)? {
            let _ = writeln!(csv, "{},{},{},{}", p.x, p.fit, p.lower, p.upper);
        }
        write_file(&a.data.out.join(&name), &csv)?;
        smooths.push(SmoothSummary {
            variable: spec.variable.clone(),
            df_target: spec.df,
            edf: term.df,
            partial_csv: name,
        });
    }

    let mut parametric = vec![coefficient_row("(Intercept)", "lambda", g.intercept, Some(g.intercept_se))];
    parametric.extend(
        g.parametric_names
            .iter()
            .zip(g.parametric_beta.iter().zip(&g.parametric_se))
            .map(|(n, (b, se))| coefficient_row(n, "lambda", *b, Some(*se))),
    );
    let gamma = g
        .gamma_names
        .iter()
        .zip(g.gamma.iter().zip(&g.gamma_se))
        .map(|(n, (b, se))| coefficient_row(n, "nu", *b, (!g.gamma_fixed).then_some(*se)))
        .collect();
    let log_nu = g.mean_log_nu();
    let dispersion = Dispersion::from_log_nu(log_nu);
    let doc = GamSummaryDoc {
        command: "gam".into(),
        input: a.data.input.display().to_string(),
        formula: a.data.formula.clone(),
        month: a.data.month.clone(),
        rows,
        poisson: a.poisson,
        parametric,
        gamma,
        smooths,
        npar_chisq: g.npar_chisq.clone().unwrap_or_default(),
        aic: g.aic,
        deviance: g.deviance,
        initial_deviance: g.initial_deviance,
        deviance_trace: g.deviance_trace.clone(),
        penalized_steps: g.penalized_steps.clone(),
        log_nu,
        dispersion,
        dispersion_note: format!("{}: mean fitted nu = {:.4}", dispersion.describe(), log_nu.exp()),
        converged: g.converged,
        iterations: g.iterations,
        backfit_failures: g.backfit_failures,
        encoding: inputs.encoding,
    };
    write_file(&a.data.out.join("gam_summary.json"), &to_json(&doc))?;
    print!("{}", gam_table(&doc));
    if !doc.converged {
        log::warn!("no convergence after {} iterations", doc.iterations);
    }
    Ok(status(doc.converged))
}

fn scenario_from_args(a: &SimulateArgs) -> Result<Scenario, InputError> {
    let mut scenario = match &a.scenario_file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| InputError(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| InputError(format!("{}: invalid scenario: {e}", p.display())))?
        }
        None => match a.scenario {
            ScenarioKind::Regression => RegressionScenario::preset(a.nu, a.seed).map(Scenario::Regression).ok_or_else(
                || InputError(format!("no regression preset for nu = {}; choose 0.5, 1, 2.5 or 4", a.nu)),
            )?,
            ScenarioKind::Gam => GamScenario::preset(a.nu, a.seed)
                .map(Scenario::Gam)
                .ok_or_else(|| InputError(format!("no additive preset for nu = {}; choose 0.5 or 2.5", a.nu)))?,
        },
    };
    if let Some(n) = a.n {
        match &mut scenario {
            Scenario::Regression(s) => s.n = n,
            Scenario::Gam(s) => s.n = n,
        }
    }
    scenario.validate()?;
    Ok(scenario)
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<Status, InputError> {
    let scenario = scenario_from_args(a)?;
    let model = match (a.model, &scenario) {
        (Some(ModelArg::CmpReg), _) | (None, Scenario::Regression(_)) => StudyModel::CmpReg,
        (Some(ModelArg::CmpGam), _) | (None, Scenario::Gam(_)) => StudyModel::CmpGam,
        (Some(ModelArg::PoissonGam), _) => StudyModel::PoissonGamMode,
    };
    let opts = StudyOptions {
        fit: fit_options(&a.iter)?,
        backfit: BackfitOptions::default(),
        df: a.df,
        resampling: if a.resample { Resampling::Resample } else { Resampling::Regenerate },
    };
    let report = run_bootstrap_study(&scenario, a.reps, model, &opts)?;
    let (kind, nu) = match &scenario {
        Scenario::Regression(s) => ("regression", s.nu),
        Scenario::Gam(s) => ("gam", s.nu),
    };
    let name = format!("study_{kind}_nu{nu}_{}_seed{}.json", model.label(), scenario.seed());
    let mut json = report.to_json();
    json.push('\n');
    write_file(&a.out.join(&name), &json)?;
    print!("{}", format_report(&report));
    println!("report: {}", a.out.join(&name).display());
    Ok(Status::Ok)
}

fn cell(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

pub fn cmd_dist(a: &DistArgs) -> Result<Status, InputError> {
    let lambdas = parse_grid(&a.lambda)?;
    let nus = parse_grid(&a.nu)?;
    if !(a.eps > 0.0 && a.eps < 1.0) {
        return Err(InputError(format!("--eps must lie in (0, 1), got {}", a.eps)));
    }
    let mut points = Vec::with_capacity(lambdas.len() * nus.len());
    for &l in &lambdas {
        for &n in &nus {
            points.push(CmpParams::new(l, n).map_err(|e| InputError(format!("grid point ({l}, {n}): {e}")))?);
        }
    }
    let mut csv = String::from(
        "lambda,nu,log_z_truncated,log_z_asymptotic,abs_diff,mean_y,var_y,mean_log_fact,var_log_fact,cov_y_log_fact\n",
    );
    let mut max_diff: f64 = 0.0;
    let mut skipped = 0;
    for p in &points {
        let truncated = match log_z_truncated(p, a.eps) {
            Ok(z) => Some(z.log_z),
            Err(e) => {
                log::warn!("λ = {}, ν = {}: {e}", p.lambda(), p.nu());
                skipped += 1;
                None
            }
        };
        let asymptotic = if p.in_asymptotic_region() {
            log_z_asymptotic(p).ok().map(|z| z.log_z)
        } else {
            None
        };
        let diff = truncated.zip(asymptotic).map(|(t, s)| (t - s).abs());
        if let Some(d) = diff {
            max_diff = max_diff.max(d);
        }
        let cum = truncated.and_then(|_| cumulants(p, &CumulantPolicy::pmf()).ok());
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{}",
            p.lambda(),
            p.nu(),
            cell(truncated),
            cell(asymptotic),
            cell(diff),
            cell(cum.map(|c| c.mean_y)),
            cell(cum.map(|c| c.var_y)),
            cell(cum.map(|c| c.mean_lfy)),
            cell(cum.map(|c| c.var_lfy)),
            cell(cum.map(|c| c.cov_y_lfy)),
        );
    }
    let path = a.out.join("dist_grid.csv");
    write_file(&path, &csv)?;
    println!(
        "{} grid points ({} beyond the series cap), max |log ζ difference| in the asymptotic region {:.3e}",
        points.len(),
        skipped,
        max_diff
    );
    println!("grid: {}", path.display());
    Ok(Status::Ok)
}

pub fn cmd_robustness(a: &RobustnessArgs) -> Result<Status, InputError> {
    if a.magnitudes.is_empty() {
        return Err(InputError("--magnitudes needs at least one value".into()));
    }
    let opts = fit_options(&a.iter)?;
    let base = outlier_base_scenario();
    let records = a
        .magnitudes
        .iter()
        .map(|&m| outlier_robustness_check_with(m, &base, &opts))
        .collect::<Result<Vec<_>, _>>()?;
    let all_passed = records.iter().all(|r| r.passed);
    let doc = RobustnessDoc { base, records };
    write_file(&a.out.join("robustness.json"), &to_json(&doc))?;
    print!("{}", robustness_table(&doc));
    Ok(status(all_passed))
}
