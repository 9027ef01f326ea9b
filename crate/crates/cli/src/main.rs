mod config;
mod output;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use bsde_lab::field::BUILTIN_FIELDS;
use bsde_lab::linear::LINEAR_SOLVERS;
use bsde_lab::quadratic::BUILTIN_DRIVERS;
use bsde_lab::LabError;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use config::Seeded;
use run::{Artifacts, RunError, RunResult};

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_FAILED: u8 = 4;

#[derive(Parser)]
#[command(name = "bsde-lab", version, about = "Matrix stochastic exponentials and BSDE systems with bmo coefficients")]
struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, env = "BSDE_LAB_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config (comments allowed). Defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for CSV tables and summary.json. Without it the summary goes to stdout only.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate S = E(A . B) and its martingale defect.
    SimulateExponential {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        field: Option<String>,
    },
    /// Estimate the reverse Hölder constant R_p of S.
    EstimateRp {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        field: Option<String>,
        #[arg(long)]
        p: Option<f64>,
    },
    /// Solve a linear BSDE with matrix coefficient.
    SolveLinear {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        field: Option<String>,
        /// Declared structure the field must carry: generic, triangular, left-outer, right-outer.
        #[arg(long)]
        structure: Option<String>,
        #[arg(long)]
        method: Option<String>,
        /// NAME[:SCALE] of a built-in field added as a small perturbation.
        #[arg(long)]
        perturbation: Option<String>,
        #[arg(long)]
        q: Option<f64>,
    },
    /// Solve a quadratic BSDE system by truncation.
    SolveQuadratic {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        driver: Option<String>,
    },
    /// Run one of the counterexample instances.
    Counterexample {
        instance: Counterexample,
        #[command(flatten)]
        common: Common,
    },
    /// Exact computations on the finite filtration.
    Oracle {
        check: OracleCheck,
        #[command(flatten)]
        common: Common,
    },
    /// Randomized exact equivalence checks on the finite filtration.
    EquivalenceSuite {
        #[command(flatten)]
        common: Common,
    },
    /// List built-in fields, drivers, solvers and instances as JSON.
    List,
    /// Describe one built-in object by name.
    Describe { name: String },
    /// Print the JSON schema of summary.json.
    Schema,
}

#[derive(Clone, Copy, ValueEnum)]
enum Counterexample {
    Emery,
    ExitTime,
    Nonexistence,
}

#[derive(Clone, Copy, ValueEnum)]
enum OracleCheck {
    Bsde,
    Duality,
    Rp,
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

/// Reads the config, applies the command-line overrides, and parses it.
fn load<T: DeserializeOwned + Seeded>(
    common: &Common,
    kind: &str,
    instance: Option<&str>,
    overrides: Vec<(&str, Value)>,
) -> Result<T, String> {
    let text = match &common.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| format!("cannot read {}: {e}", p.display()))?,
        None => "{}".into(),
    };
    let mut value: Value =
        serde_json::from_str(&config::strip_comments(&text)).map_err(|e| format!("config is not valid JSON: {e}"))?;
    let obj = value.as_object_mut().ok_or("config must be a JSON object")?;
    for (k, v) in overrides {
        obj.insert(k.to_string(), v);
    }
    let mut cfg: T = config::parse(&value.to_string(), kind, instance)?;
    if let Some(s) = common.seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

fn opt<T: Serialize>(key: &'static str, v: &Option<T>) -> Option<(&'static str, Value)> {
    v.as_ref().map(|x| (key, serde_json::to_value(x).expect("serializable")))
}

fn perturbation(spec: &str) -> Result<Value, String> {
    let (name, scale) = match spec.split_once(':') {
        Some((n, s)) => (n, s.parse::<f64>().map_err(|_| format!("bad perturbation scale '{s}'"))?),
        None => (spec, 0.1),
    };
    Ok(json!({"field": name, "scale": scale}))
}

fn execute<T: DeserializeOwned + Seeded + Serialize>(
    common: &Common,
    kind: &str,
    experiment: &str,
    instance: Option<&str>,
    overrides: Vec<(&'static str, Value)>,
    runner: impl FnOnce(&T) -> RunResult<Artifacts>,
) -> ExitCode {
    let cfg: T = match load(common, kind, instance, overrides) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    let art = match runner(&cfg) {
        Ok(a) => a,
        Err(RunError::Config(m)) => return fail(EXIT_CONFIG, m),
        Err(RunError::Numeric(e)) => return fail(EXIT_NUMERIC, e),
    };
    let config_value = serde_json::to_value(&cfg).expect("serializable");
    let summary = output::summary(experiment, &config_value, &art);
    if let Some(dir) = &common.out {
        if let Err(e) = output::write_all(dir, &summary, &art) {
            return fail(EXIT_NUMERIC, format!("cannot write {}: {e}", dir.display()));
        }
    }
    println!("{}", serde_json::to_string_pretty(&summary).expect("serializable"));
    for w in &art.warnings {
        eprintln!("warning: {w}");
    }
    if art.passed {
        ExitCode::SUCCESS
    } else {
        fail(EXIT_FAILED, format!("{experiment}: built-in checks failed, see summary.json"))
    }
}

const COUNTEREXAMPLES: &[(&str, &str)] = &[
    ("emery", "rotation exponential stopped at |B| = pi/2, a strict local martingale"),
    ("exit-time", "E[exp(tau_b / 2)] for the exit time of (-b, b), finite iff b < pi/2"),
    ("nonexistence", "scalar BSDE with bmo coefficient whose solution has infinite first moment"),
];

fn list() -> Value {
    let fields: Vec<Value> = BUILTIN_FIELDS
        .iter()
        .map(|e| {
            let f = (e.build)();
            json!({"name": e.name, "description": e.description, "n": f.n(), "d": f.d(), "structure": f.structure().label()})
        })
        .collect();
    let drivers: Vec<Value> = BUILTIN_DRIVERS
        .iter()
        .map(|e| {
            let d = (e.build)();
            json!({"name": e.name, "description": e.description, "n": d.n, "d": d.d, "class": d.class()})
        })
        .collect();
    let ce: Vec<Value> = COUNTEREXAMPLES.iter().map(|(n, d)| json!({"name": n, "description": d})).collect();
    json!({
        "fields": fields,
        "drivers": drivers,
        "counterexamples": ce,
        "linear_solvers": LINEAR_SOLVERS.iter().chain(["auto"].iter()).collect::<Vec<_>>(),
        "rp_estimators": ["regression", "nested"],
    })
}

fn describe(name: &str) -> Result<Value, LabError> {
    if let Some(e) = BUILTIN_FIELDS.iter().find(|e| e.name == name) {
        let f = (e.build)();
        let mut v = json!({"kind": "field", "name": e.name, "description": e.description, "n": f.n(), "d": f.d(),
            "structure": f.structure().label(), "bmo_bound": f.bmo_bound(), "path_dependent": f.path_dependent()});
        if name == "emery" {
            v["closed_form"] = emery_closed_form();
        }
        return Ok(v);
    }
    if let Some(e) = BUILTIN_DRIVERS.iter().find(|e| e.name == name) {
        let d = (e.build)();
        return Ok(json!({"kind": "driver", "name": e.name, "description": e.description, "n": d.n, "d": d.d,
            "class": d.class(), "lipschitz": d.lipschitz, "terminal": (e.terminal)()}));
    }
    if let Some((n, desc)) = COUNTEREXAMPLES.iter().find(|(n, _)| *n == name) {
        let mut v = json!({"kind": "counterexample", "name": n, "description": desc});
        match name {
            "emery" => v["closed_form"] = emery_closed_form(),
            "exit-time" => {
                v["exact"] = json!({"formula": "E[exp(tau_b / 2)] = 1 / cos(b)", "finite_iff": "b < pi/2"})
            }
            "nonexistence" => {
                let s = bsde_lab::counterexamples::NonexistenceSpec::default_levels(1.0, 12)?;
                v["default_levels"] = json!(s.b);
                v["conditions"] = json!(s.check_conditions());
            }
            _ => {}
        }
        return Ok(v);
    }
    let mut known: Vec<&str> = BUILTIN_FIELDS.iter().map(|e| e.name).collect();
    known.extend(BUILTIN_DRIVERS.iter().map(|e| e.name));
    known.extend(COUNTEREXAMPLES.iter().map(|(n, _)| *n));
    known.sort_unstable();
    known.dedup();
    Err(LabError::unknown("name", name, &known))
}

fn emery_closed_form() -> Value {
    let s = bsde_lab::counterexamples::EmerySpec::default();
    json!({
        "coefficient": "A = [[0, 1], [-1, 0]] 1{t <= tau}, tau = inf{t : |B_t| = level}",
        "solution": "S_t = exp((t ^ tau) / 2) [[cos B, sin B], [-sin B, cos B]] evaluated at t ^ tau",
        "level": s.level,
        "effective_horizon": s.effective_horizon,
        "terminal_diagonal": "S^11_tau = exp(tau / 2) cos(level) = 0 at level pi/2, so E[S_T] != I",
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if t == 0 {
            return fail(EXIT_CONFIG, "--threads must be positive");
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            return fail(EXIT_CONFIG, e);
        }
    }
    match cli.command {
        Command::SimulateExponential { common, field } => execute(
            &common,
            "simulate-exponential",
            "simulate-exponential",
            None,
            opt("field", &field).into_iter().collect(),
            run::simulate_exponential,
        ),
        Command::EstimateRp { common, field, p } => execute(
            &common,
            "estimate-rp",
            "estimate-rp",
            None,
            [opt("field", &field), opt("p", &p)].into_iter().flatten().collect(),
            run::estimate_rp,
        ),
        Command::SolveLinear {
            common,
            field,
            structure,
            method,
            perturbation: pert,
            q,
        } => {
            let mut o: Vec<_> = [opt("field", &field), opt("structure", &structure), opt("method", &method), opt("q", &q)]
                .into_iter()
                .flatten()
                .collect();
            if let Some(p) = pert {
                match perturbation(&p) {
                    Ok(v) => o.push(("perturbation", v)),
                    Err(e) => return fail(EXIT_CONFIG, e),
                }
            }
            execute(&common, "solve-linear", "solve-linear", None, o, run::solve_linear)
        }
        Command::SolveQuadratic { common, driver } => execute(
            &common,
            "solve-quadratic",
            "solve-quadratic",
            None,
            opt("driver", &driver).into_iter().collect(),
            run::solve_quadratic_exp,
        ),
        Command::Counterexample { instance, common } => match instance {
            Counterexample::Emery => execute(&common, "counterexample", "emery", Some("emery"), vec![], run::emery),
            Counterexample::ExitTime => {
                execute(&common, "counterexample", "exit-time", Some("exit-time"), vec![], run::exit_time)
            }
            Counterexample::Nonexistence => {
                execute(&common, "counterexample", "nonexistence", Some("nonexistence"), vec![], run::nonexistence)
            }
        },
        Command::Oracle { check, common } => match check {
            OracleCheck::Bsde => execute(&common, "oracle", "oracle-bsde", Some("bsde"), vec![], run::oracle_bsde),
            OracleCheck::Duality => {
                execute(&common, "oracle", "oracle-duality", Some("duality"), vec![], run::oracle_duality)
            }
            OracleCheck::Rp => execute(&common, "oracle", "oracle-rp", Some("rp"), vec![], run::oracle_rp),
        },
        Command::EquivalenceSuite { common } => execute(
            &common,
            "equivalence-suite",
            "equivalence-suite",
            None,
            vec![],
            run::equivalence_suite,
        ),
        Command::List => {
            println!("{}", serde_json::to_string_pretty(&list()).expect("serializable"));
            ExitCode::SUCCESS
        }
        Command::Describe { name } => match describe(&name) {
            Ok(v) => {
                println!("{}", serde_json::to_string_pretty(&v).expect("serializable"));
                ExitCode::SUCCESS
            }
            Err(e) => fail(EXIT_CONFIG, e),
        },
        Command::Schema => {
            print!("{}", output::SUMMARY_SCHEMA);
            ExitCode::SUCCESS
        }
    }
}
