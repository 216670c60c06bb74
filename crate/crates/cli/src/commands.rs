//! Subcommand implementations. Each returns the lines to print and whether
//! every check it ran passed.

use std::io::Write;
use std::sync::Arc;

use ouu::epi::{run_gap_demo, write_gap_csv, SyntheticProblem};
use ouu::fem::{solve_state, write_state_csv, P0Control};
use ouu::field::{sample_field_indexed, write_field_csv};
use ouu::optimizer::{outer_loop, reference_check, GapCertificate, ReferenceCheck};
use ouu::problem::Mode;
use ouu::risk::summarize;

use crate::config::ExperimentConfig;
use crate::output::OutputDir;
use crate::verify;
use crate::CliError;

#[derive(Debug, Default)]
pub struct Report {
    pub lines: Vec<String>,
    pub passed: bool,
}

impl Report {
    fn ok(lines: Vec<String>) -> Self {
        Self {
            lines,
            passed: true,
        }
    }
}

fn section<'a, T>(s: &'a Option<T>, name: &str) -> Result<&'a T, CliError> {
    s.as_ref()
        .ok_or_else(|| CliError::Config(format!("config has no {name} section")))
}

pub fn solve_pde(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    let inst = cfg.instance()?;
    let solve = section(&cfg.solve, "solve")?;
    let field = Arc::new(inst.field.clone());
    let xi = sample_field_indexed(&field, cfg.seeds.train, solve.sample_index)?;
    let z = P0Control::project(inst.control_mesh()?, &solve.control);
    let u = solve_state(&inst.state_mesh()?, &xi, &inst.pde, &z)?;
    let mut out = OutputDir::create(&cfg.output_dir, "solve-pde", cfg, cfg.seeds.train)?;
    let path = out.write("state.csv", |w| write_state_csv(w, &u))?;
    Ok(Report::ok(vec![format!(
        "wrote {} ({} nodes, sample {})",
        path.display(),
        u.values().len(),
        solve.sample_index
    )]))
}

pub fn sample_field(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    let inst = cfg.instance()?;
    let sf = cfg.sample_field.unwrap_or(crate::config::SampleFieldConfig {
        cells: 200,
        count: 1,
    });
    let field = Arc::new(inst.field.clone());
    let mut out = OutputDir::create(&cfg.output_dir, "sample-field", cfg, cfg.seeds.train)?;
    let mut lines = Vec::new();
    for j in 0..sf.count {
        let xi = sample_field_indexed(&field, cfg.seeds.train, j as u64)?;
        let path = out.write(&format!("field_{j:04}.csv"), |w| write_field_csv(w, &xi, sf.cells))?;
        lines.push(format!(
            "wrote {} (bounds [{:e}, {:e}])",
            path.display(),
            xi.c_lower(),
            xi.c_upper()
        ));
    }
    Ok(Report::ok(lines))
}

pub fn risk_eval(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    let risk = section(&cfg.risk, "risk")?;
    let rv = cfg.risk_rv()?;
    let rows = risk
        .alphas
        .iter()
        .map(|&a| summarize(&rv, a))
        .collect::<ouu::Result<Vec<_>>>()?;
    let mut out = OutputDir::create(&cfg.output_dir, "risk-eval", cfg, cfg.seeds.train)?;
    let path = out.write("risk.csv", |w| {
        writeln!(w, "alpha,mean,quantile,superquantile,penalty_regret,buffered_probability")?;
        for r in &rows {
            let regret = r.penalty_regret.map(|v| v.to_string()).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.alpha, r.mean, r.quantile, r.superquantile, regret, r.buffered_probability
            )?;
        }
        Ok(())
    })?;
    let mut lines: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "alpha={} quantile={} superquantile={} bprob={}",
                r.alpha, r.quantile, r.superquantile, r.buffered_probability
            )
        })
        .collect();
    lines.push(format!("wrote {}", path.display()));
    Ok(Report::ok(lines))
}

fn write_certificate(
    w: &mut dyn Write,
    cert: &GapCertificate,
    check: Option<&ReferenceCheck>,
    status: &str,
) -> std::io::Result<()> {
    let mode = match cert.mode {
        Mode::Expectation => "expectation",
        Mode::Buffered => "buffered",
    };
    writeln!(w, "mode = {mode}")?;
    writeln!(w, "status = {status}")?;
    writeln!(w, "delta_limit = {}", cert.delta_limit)?;
    writeln!(w, "stationarity_surrogate = {}", cert.stationarity_surrogate)?;
    writeln!(w, "final_multiplier = {}", cert.final_multiplier)?;
    writeln!(w, "final_gamma = {}", cert.final_point.gamma)?;
    writeln!(w, "final_sigma = {}", cert.final_point.sigma)?;
    let z: Vec<String> = cert.final_point.z.iter().map(|v| v.to_string()).collect();
    writeln!(w, "final_z = [{}]", z.join(", "))?;
    if let Some(c) = check {
        writeln!(w, "reference.nu = {}", c.nu_ref)?;
        writeln!(w, "reference.seed = {}", c.seed)?;
        writeln!(w, "reference.value = {}", c.value)?;
        writeln!(w, "reference.value_se = {}", c.value_se)?;
        writeln!(w, "reference.recorded = {}", c.recorded)?;
        writeln!(w, "reference.recorded_se = {}", c.recorded_se)?;
        writeln!(w, "reference.gap = {}", c.gap)?;
        writeln!(w, "reference.gap_bound = {}", c.gap_bound)?;
        writeln!(w, "reference.gap_ok = {}", c.gap_ok)?;
        if let (Some(r), Some(se), Some(tol), Some(ok)) =
            (c.residual, c.residual_se, c.feasibility_tol, c.feasible)
        {
            writeln!(w, "reference.residual = {r}")?;
            writeln!(w, "reference.residual_se = {se}")?;
            writeln!(w, "reference.feasibility_tol = {tol}")?;
            writeln!(w, "reference.feasible = {ok}")?;
        }
    }
    writeln!(w)?;
    writeln!(w, "[stages]")?;
    write_stage_table(w, cert)
}

fn write_stage_table(w: &mut dyn Write, cert: &GapCertificate) -> std::io::Result<()> {
    writeln!(
        w,
        "stage,nu,beta,theta_pen,delta,y,value,residual_smooth,residual_nonsmooth,smoothing_budget,inner_iters,pg_norm,converged,line_search_failed,failure"
    )?;
    for s in &cert.stages {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            s.stage,
            s.nu,
            s.beta,
            s.theta_pen,
            s.delta,
            s.y,
            s.value,
            s.residual_smooth,
            s.residual_nonsmooth,
            s.smoothing_budget,
            s.inner_iters,
            s.pg_norm,
            s.converged,
            s.line_search_failed,
            s.failure.as_deref().unwrap_or("").replace(',', ";")
        )?;
    }
    Ok(())
}

/// Result of `optimize`, kept for callers that inspect the run.
pub struct OptimizeOutcome {
    pub certificate: GapCertificate,
    pub reference: Option<ReferenceCheck>,
    pub report: Report,
}

pub fn optimize_run(cfg: &ExperimentConfig) -> Result<OptimizeOutcome, CliError> {
    let inst_cfg = cfg.instance()?;
    let schedule = section(&cfg.schedule, "schedule")?;
    let inst = inst_cfg.build(cfg.seeds.train, cfg.threads)?;
    let run = outer_loop(&inst, schedule)?;
    let cert = run.certificate;
    let Some(last) = cert.last_completed() else {
        let why = cert
            .stages
            .iter()
            .filter_map(|s| s.failure.clone())
            .collect::<Vec<_>>()
            .join("; ");
        return Err(CliError::Numerical(format!("every stage failed: {why}")));
    };
    let reference = match &cfg.reference {
        Some(r) => Some(reference_check(
            &inst,
            &cert,
            r.nu,
            cfg.seeds.reference,
            cfg.feasibility_tol,
        )?),
        None => None,
    };
    let training_feasible = match cert.mode {
        Mode::Expectation => true,
        Mode::Buffered => last.residual_nonsmooth.abs() <= cfg.feasibility_tol,
    };
    let passed = match &reference {
        Some(c) => c.passed,
        None => training_feasible,
    };
    let status = if passed { "PASS" } else { "FAIL" };

    let mut out = OutputDir::create(&cfg.output_dir, "optimize", cfg, cfg.seeds.train)?;
    out.write("certificate.txt", |w| write_certificate(w, &cert, reference.as_ref(), status))?;
    out.write("stages.csv", |w| write_stage_table(w, &cert))?;
    out.write("control.csv", |w| {
        writeln!(w, "x_left,x_right,z")?;
        let mesh = &inst.control_mesh;
        for (k, z) in cert.final_point.z.iter().enumerate() {
            let (a, b) = mesh.element(k);
            writeln!(w, "{a},{b},{z}")?;
        }
        Ok(())
    })?;
    out.write("trace.csv", |w| {
        writeln!(w, "stage,iteration,value,residual,pg_norm")?;
        for (k, trace) in run.traces.iter().enumerate() {
            for t in trace {
                writeln!(w, "{k},{},{},{},{}", t.iteration, t.value, t.residual, t.pg_norm)?;
            }
        }
        Ok(())
    })?;

    let mut lines = Vec::new();
    for (s, secs) in cert.stages.iter().zip(&run.stage_seconds) {
        lines.push(format!(
            "stage {} nu={} beta={} theta_pen={} y={:e} value={:e} residual={:e} iters={} wall_time={secs:.2}s{}",
            s.stage,
            s.nu,
            s.beta,
            s.theta_pen,
            s.y,
            s.value,
            s.residual_nonsmooth,
            s.inner_iters,
            s.failure
                .as_ref()
                .map(|f| format!(" FAILED: {f}"))
                .unwrap_or_default()
        ));
    }
    if let Some(c) = &reference {
        lines.push(format!(
            "reference nu={} value={:e} recorded={:e} gap={:e} bound={:e}{}",
            c.nu_ref,
            c.value,
            c.recorded,
            c.gap,
            c.gap_bound,
            c.residual
                .map(|r| format!(" residual={r:e} tol={:e}", cfg.feasibility_tol))
                .unwrap_or_default()
        ));
    }
    lines.push(format!("{status} certificate written to {}", cfg.output_dir.display()));
    Ok(OptimizeOutcome {
        certificate: cert,
        reference,
        report: Report { lines, passed },
    })
}

pub fn optimize(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    Ok(optimize_run(cfg)?.report)
}

pub fn verify(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    let vcfg = cfg.verify.clone().unwrap_or_default();
    let checks = verify::run_all(&vcfg)?;
    let mut out = OutputDir::create(&cfg.output_dir, "verify", cfg, vcfg.seed)?;
    out.write("verify.txt", |w| {
        for c in &checks {
            writeln!(w, "{}", c.line())?;
        }
        Ok(())
    })?;
    out.write("verify.csv", |w| {
        writeln!(w, "check,measured,bound,pass")?;
        for c in &checks {
            writeln!(w, "{},{},{},{}", c.name, c.measured, c.bound, c.pass)?;
        }
        Ok(())
    })?;
    let passed = checks.iter().all(|c| c.pass);
    Ok(Report {
        lines: checks.iter().map(|c| c.line()).collect(),
        passed,
    })
}

pub fn epi_demo(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    let epi = section(&cfg.epi, "epi")?;
    let mut reports = Vec::new();
    for problem in SyntheticProblem::bundled() {
        for &seed in &epi.seeds {
            reports.push(run_gap_demo(&problem, epi.epsilon, epi.delta, &epi.nus, seed)?);
        }
    }
    let first_seed = epi.seeds[0];
    let mut out = OutputDir::create(&cfg.output_dir, "epi-demo", cfg, first_seed)?;
    out.write("epi.csv", |w| write_gap_csv(w, &reports))?;
    let mut lines = Vec::new();
    for r in &reports {
        lines.push(format!(
            "{} {} seed={} n={} inf_f_n={:e} slack={:e} liminf_margin={:e} limsup_excess={:e}{}",
            if r.passed { "PASS" } else { "FAIL" },
            r.problem,
            r.seed,
            r.n,
            r.inf_restricted,
            r.grid_slack,
            r.liminf_margin,
            r.limsup_excess,
            r.failed_stage()
                .map(|s| format!(" violating nu={}: f={:e} > bound={:e}", s.nu, s.f_value, s.bound))
                .unwrap_or_default()
        ));
    }
    out.write("epi_report.txt", |w| {
        for l in &lines {
            writeln!(w, "{l}")?;
        }
        Ok(())
    })?;
    Ok(Report {
        passed: reports.iter().all(|r| r.passed),
        lines,
    })
}
