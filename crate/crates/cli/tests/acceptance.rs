//! Acceptance suite. Runs every criterion at its fixed tolerance, prints one
//! PASS/FAIL line each, and exits nonzero if any fails.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use ouu_cli::config::VerifyConfig;
use ouu_cli::verify::{self, Check};
use ouu_cli::{CliError, ExperimentConfig};

const SEED: u64 = 20_240_601;
const LEVELS: [usize; 5] = [16, 32, 64, 128, 256];

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn from_checks(checks: &[Check]) -> Self {
        Self {
            pass: checks.iter().all(|c| c.pass),
            detail: checks
                .iter()
                .map(|c| format!("{}={:.3e}/{:.3e}", c.name, c.measured, c.bound))
                .collect::<Vec<_>>()
                .join(" "),
        }
    }
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> Result<ExperimentConfig, CliError> {
    ExperimentConfig::load(&configs().join(name))
}

fn run_cli(args: &[&str], config: &Path, out: &Path) -> Result<(i32, String), CliError> {
    let output = Command::new(env!("CARGO_BIN_EXE_ouu"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()?;
    let mut text = String::from_utf8_lossy(&output.stdout).into_owned();
    text.push_str(&String::from_utf8_lossy(&output.stderr));
    Ok((output.status.code().unwrap_or(-1), text))
}

/// `key = value` lines of a certificate.
fn certificate_fields(path: &Path) -> Result<HashMap<String, String>, CliError> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .take_while(|l| !l.starts_with('['))
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}

fn field(map: &HashMap<String, String>, key: &str) -> Result<f64, CliError> {
    map.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| CliError::Io(format!("certificate lacks {key}")))
}

fn fem_rate() -> Result<Outcome, CliError> {
    Ok(Outcome::from_checks(&[verify::fem_rate(&LEVELS, 1.9)?]))
}

fn field_rate() -> Result<Outcome, CliError> {
    let cfg = load("buffered.json")?;
    let field = cfg.instance()?.field.clone();
    Ok(Outcome::from_checks(&[verify::field_rate(&field, 20, SEED, &LEVELS, 1.0)?]))
}

fn smax() -> Result<Outcome, CliError> {
    Ok(Outcome::from_checks(&[verify::smax_bound(&[1.0, 0.1, 0.01], 100.0, 1e-2)?]))
}

fn oracle() -> Result<Outcome, CliError> {
    Ok(Outcome::from_checks(&[verify::superquantile_oracle(1000, 200, SEED, 1e-10)?]))
}

fn duality() -> Result<Outcome, CliError> {
    Ok(Outcome::from_checks(&[
        verify::buffered_duality(200, 25, SEED)?,
        verify::buffered_closed_cases(1e-9)?,
    ]))
}

fn gradient() -> Result<Outcome, CliError> {
    Ok(Outcome::from_checks(&[verify::gradient_check(50, SEED, 1e-6)?]))
}

fn convex_gap(dir: &Path) -> Result<Outcome, CliError> {
    let cfg = load("convex.json")?;
    let reference = cfg.reference.map(|r| r.nu);
    let stages: Vec<usize> = cfg.schedule.iter().flat_map(|s| s.stages.iter().map(|st| st.nu)).collect();
    let (code, log) = run_cli(&["optimize"], &configs().join("convex.json"), dir)?;
    if code != 0 {
        return Ok(Outcome {
            pass: false,
            detail: format!("exit {code}: {}", log.trim()),
        });
    }
    let cert = certificate_fields(&dir.join("certificate.txt"))?;
    let value = field(&cert, "reference.value")?;
    let recorded = field(&cert, "reference.recorded")?;
    let se = field(&cert, "reference.value_se")?.hypot(field(&cert, "reference.recorded_se")?);
    let delta = field(&cert, "delta_limit")?;
    let gap = (value - recorded).abs();
    let bound = 3.0 * se + delta;
    let pass = stages.last() == Some(&2000) && reference == Some(10_000) && gap <= bound;
    Ok(Outcome {
        pass,
        detail: format!("nu={stages:?} nu_ref={reference:?} |gap|={gap:.3e} bound={bound:.3e}"),
    })
}

fn buffered_pipeline(dir: &Path) -> Result<Outcome, CliError> {
    let cfg = load("buffered.json")?;
    let alpha = cfg.instance()?.qoi.alpha;
    let schedule = cfg.schedule.clone().ok_or_else(|| CliError::Config("no schedule".into()))?;
    let nus: Vec<usize> = schedule.stages.iter().map(|s| s.nu).collect();
    let start = Instant::now();
    let (code, log) = run_cli(&["optimize"], &configs().join("buffered.json"), dir)?;
    let elapsed = start.elapsed();
    let cert = certificate_fields(&dir.join("certificate.txt"))?;
    let residual = field(&cert, "reference.residual")?;
    let nu_ref = field(&cert, "reference.nu")?;

    // Per-stage smoothing budget must be 2β/(1−α).
    let rows = ouu_cli::output::read_csv_records(&dir.join("stages.csv"))?;
    let mut budget_ok = rows.len() == schedule.stages.len();
    for (row, stage) in rows.iter().zip(&schedule.stages) {
        let reported: f64 = row["smoothing_budget"].parse().unwrap_or(f64::NAN);
        let expected = 2.0 * stage.beta / (1.0 - alpha);
        budget_ok &= (reported - expected).abs() <= 1e-15 * expected && row["failure"].is_empty();
    }
    let pass = code == 0
        && residual.abs() <= 1e-3
        && nu_ref == 1e4
        && nus == [250, 500, 1000, 2000]
        && budget_ok
        && elapsed <= Duration::from_secs(600);
    Ok(Outcome {
        pass,
        detail: format!(
            "|psi|={:.3e} tol=1e-3 nu_ref={nu_ref} budgets_ok={budget_ok} exit={code} runtime={:.1}s{}",
            residual.abs(),
            elapsed.as_secs_f64(),
            if code == 0 { String::new() } else { format!(" log: {}", log.trim()) }
        ),
    })
}

fn epi(dir: &Path) -> Result<Outcome, CliError> {
    let cfg = load("epi.json")?;
    let seeds = cfg.epi.as_ref().map(|e| e.seeds.len()).unwrap_or(0);
    let (code, log) = run_cli(&["epi-demo"], &configs().join("epi.json"), dir)?;
    let lines: Vec<&str> = log.lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")).collect();
    let failed: Vec<&str> = lines.iter().copied().filter(|l| l.starts_with("FAIL")).collect();
    Ok(Outcome {
        pass: code == 0 && seeds == 10 && lines.len() == 30 && failed.is_empty(),
        detail: format!("runs={} seeds={seeds} failures={failed:?}", lines.len()),
    })
}

fn embedding() -> Result<Outcome, CliError> {
    Ok(Outcome::from_checks(&[verify::embedding_identity(100, SEED, 1e-14)?]))
}

fn integrability() -> Result<Outcome, CliError> {
    let mut fields = VerifyConfig::default().integrability_fields;
    fields.push(load("buffered.json")?.instance()?.field.clone());
    let checks = verify::integrability(
        &fields,
        &[(0.0, 0.0), (1.0, 0.0), (0.0, 3.0), (1.0, 3.0)],
        100_000,
        SEED,
        3.0,
    )?;
    Ok(Outcome {
        pass: checks.iter().all(|c| c.pass),
        detail: format!(
            "{} probes, worst oracle deviation in se units {:.2}",
            checks.len(),
            checks
                .iter()
                .filter(|c| c.bound < f64::MAX && c.bound > 0.0)
                .map(|c| 3.0 * c.measured / c.bound)
                .fold(0.0, f64::max)
        ),
    })
}

fn determinism(first: &Path, dir: &Path) -> Result<Outcome, CliError> {
    run_cli(&["optimize"], &configs().join("buffered.json"), dir)?;
    let a = std::fs::read(first.join("certificate.txt"))?;
    let b = std::fs::read(dir.join("certificate.txt"))?;
    Ok(Outcome {
        pass: !a.is_empty() && a == b,
        detail: format!("{} bytes, identical={}", a.len(), a == b),
    })
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temp dir");
    let sub = |name: &str| tmp.path().join(name);
    type Criterion<'a> = (&'a str, Box<dyn Fn() -> Result<Outcome, CliError> + 'a>);
    let criteria: Vec<Criterion> = vec![
        ("fem_rate", Box::new(fem_rate)),
        ("field_rate", Box::new(field_rate)),
        ("smax_bound", Box::new(smax)),
        ("superquantile_oracle", Box::new(oracle)),
        ("buffered_duality", Box::new(duality)),
        ("adjoint_gradient", Box::new(gradient)),
        ("convex_gap", Box::new(|| convex_gap(&sub("convex")))),
        ("buffered_pipeline", Box::new(|| buffered_pipeline(&sub("buffered")))),
        ("epi_gap", Box::new(|| epi(&sub("epi")))),
        ("embedding_identity", Box::new(embedding)),
        ("integrability", Box::new(integrability)),
        ("determinism", Box::new(|| determinism(&sub("buffered"), &sub("buffered-repeat")))),
    ];
    let mut failures = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run().unwrap_or_else(|e| Outcome {
            pass: false,
            detail: format!("error: {e}"),
        });
        if !outcome.pass {
            failures += 1;
        }
        println!(
            "{} criterion {:>2} {name}: {} ({:.1}s)",
            if outcome.pass { "PASS" } else { "FAIL" },
            k + 1,
            outcome.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
