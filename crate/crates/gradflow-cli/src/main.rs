//! Command-line front end: analyze, construct, simulate, check-functional,
//! zoo.
//!
//! Exit codes are a stable contract: 0 success or finding, 2 input error,
//! 3 non-irreducible chain, 4 not gradient-flow representable, 5 integration
//! failure. All numeric JSON output carries 17 significant digits so golden
//! files are byte-stable.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde_json::{json, Map, Value};

use gradflow::entropy::{
    self, entropy_hessian_at_pi, Compatibility, Functional,
};
use gradflow::flowsim::{self, FlowError, Trajectory};
use gradflow::json::{format_f64, trajectory_to_csv, ChainJson};
use gradflow::markov_core::{self, Distribution, Generator, TangentVector};
use gradflow::spectral::{self, Verdict};
use gradflow::structure::{self, MetricVerdict, NotAMetricReason, StructureError};
use gradflow::zoo::{self, ChainSpec};

const EXIT_INPUT: u8 = 2;
const EXIT_NOT_IRREDUCIBLE: u8 = 3;
const EXIT_NOT_REPRESENTABLE: u8 = 4;
const EXIT_INTEGRATION: u8 = 5;

#[derive(Parser)]
#[command(
    name = "gradflow",
    about = "Gradient-flow analysis of finite-state continuous-time Markov chains",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Full report: stationary state, spectrum, reversibility, and the
    /// gradient-flow characterisation verdicts.
    Analyze {
        /// Chain JSON file ({"states": [...], "Q": [[...]]})
        input: PathBuf,
    },
    /// Emit the equilibrium metric (entropy mode) or the full canonical
    /// gradient structure (canonical mode).
    Construct {
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = FunctionalKind::Entropy)]
        functional: FunctionalKind,
    },
    /// Integrate the gradient flow, compare against the semigroup, and write
    /// both trajectories as CSV.
    Simulate {
        input: PathBuf,
        /// Initial distribution, comma-separated
        #[arg(long)]
        rho0: String,
        #[arg(long = "t-end", default_value_t = 5.0)]
        t_end: f64,
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        /// Metric perturbation "a,radius" centered at rho0
        #[arg(long)]
        perturb: Option<String>,
        /// Gradient-flow CSV path; the semigroup goes to <stem>_semigroup.csv
        #[arg(long)]
        out: PathBuf,
    },
    /// Test a functional against the entropy 2-jet rigidity condition at the
    /// chain's stationary state.
    CheckFunctional {
        input: PathBuf,
        #[arg(long = "functional-spec")]
        functional_spec: PathBuf,
    },
    /// Generate a chain from one of the built-in families.
    Zoo {
        #[arg(value_enum)]
        family: Family,
        /// Stationary distribution, comma-separated (star, coupled-pair,
        /// random-reversible)
        #[arg(long)]
        pi: Option<String>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        mu: Option<f64>,
        /// Eigenvector for coupled-pair, comma-separated
        #[arg(long)]
        v: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// State count (random-nonrev-diag, cyclic)
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 1.0)]
        rate: f64,
        #[arg(long = "max-tries", default_value_t = 1000)]
        max_tries: usize,
        /// Output path; stdout when omitted
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FunctionalKind {
    Entropy,
    Canonical,
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    Star,
    CoupledPair,
    RandomReversible,
    RandomNonrevDiag,
    Cyclic,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn input(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Analyze { input } => cmd_analyze(&input),
        Command::Construct { input, functional } => cmd_construct(&input, functional),
        Command::Simulate {
            input,
            rho0,
            t_end,
            dt,
            perturb,
            out,
        } => cmd_simulate(&input, &rho0, t_end, dt, perturb.as_deref(), &out),
        Command::CheckFunctional {
            input,
            functional_spec,
        } => cmd_check_functional(&input, &functional_spec),
        Command::Zoo {
            family,
            pi,
            lambda,
            mu,
            v,
            seed,
            n,
            rate,
            max_tries,
            out,
        } => cmd_zoo(
            family,
            pi.as_deref(),
            lambda,
            mu,
            v.as_deref(),
            seed,
            n,
            rate,
            max_tries,
            out.as_deref(),
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

/// `GRADFLOW_TOL` overrides the default residual tolerance 1e-10 used for
/// the report verdicts.
fn residual_tolerance() -> f64 {
    std::env::var("GRADFLOW_TOL")
        .ok()
        .and_then(|s| s.parse::<f64>().ok())
        .filter(|t| *t > 0.0)
        .unwrap_or(1e-10)
}

fn jnum(x: f64) -> Value {
    Value::Number(serde_json::Number::from_string_unchecked(format_f64(x)))
}

fn jvec(xs: impl IntoIterator<Item = f64>) -> Value {
    Value::Array(xs.into_iter().map(jnum).collect())
}

fn jmatrix(m: &DMatrix<f64>) -> Value {
    Value::Array(
        (0..m.nrows())
            .map(|i| jvec((0..m.ncols()).map(|j| m[(i, j)])))
            .collect(),
    )
}

fn load_chain(path: &Path) -> Result<(ChainJson, Generator), Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::input(format!("cannot read {}: {e}", path.display())))?;
    let chain = ChainJson::from_str(&text)
        .map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    let q = chain
        .to_generator()
        .map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    Ok((chain, q))
}

fn require_irreducible(q: &Generator) -> Result<Distribution, Failure> {
    markov_core::stationary_distribution(q).map_err(|_| Failure {
        code: EXIT_NOT_IRREDUCIBLE,
        message: "chain is not irreducible; no unique stationary distribution".into(),
    })
}

fn parse_number_list(text: &str, what: &str) -> Result<Vec<f64>, Failure> {
    text.split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<Vec<f64>, _>>()
        .map_err(|e| Failure::input(format!("invalid {what} '{text}': {e}")))
}

fn parse_distribution(text: &str, n: usize, what: &str) -> Result<Distribution, Failure> {
    let values = parse_number_list(text, what)?;
    if values.len() != n {
        return Err(Failure::input(format!(
            "{what} has {} entries, chain has {n} states",
            values.len()
        )));
    }
    Distribution::new_renormalized(DVector::from_vec(values), 1e-9)
        .map_err(|e| Failure::input(format!("invalid {what}: {e}")))
}

fn print_report(report: Value) {
    println!("{}", serde_json::to_string_pretty(&report).expect("valid JSON"));
}

fn cmd_analyze(input: &Path) -> Result<(), Failure> {
    let (chain, q) = load_chain(input)?;
    let pi = require_irreducible(&q)?;
    let tol = residual_tolerance();

    let dec = spectral::left_eigen(&q).map_err(|e| Failure::input(e.to_string()))?;
    let verdict =
        spectral::is_gradient_flow_representable(&q).map_err(|e| Failure::input(e.to_string()))?;
    let db = structure::check_detailed_balance_with_tolerance(&q, tol)
        .map_err(|e| Failure::input(e.to_string()))?;

    let mut report = Map::new();
    report.insert("states".into(), json!(chain.state_names()));
    report.insert("irreducible".into(), json!(true));
    report.insert("stationary".into(), jvec(pi.mass().iter().copied()));
    report.insert(
        "eigenvalues".into(),
        Value::Array(
            dec.eigenvalues
                .iter()
                .map(|z| json!({"re": jnum(z.re), "im": jnum(z.im)}))
                .collect(),
        ),
    );
    report.insert("real_spectrum".into(), json!(dec.real));
    report.insert("diagonalisable".into(), json!(dec.diagonalisable));
    report.insert("reversible".into(), json!(db.reversible));
    report.insert("detailed_balance_asymmetry".into(), jnum(db.asymmetry));
    report.insert("representable".into(), json!(verdict.to_string()));
    report.insert("entropy_gradient_flow".into(), json!(db.reversible));
    report.insert("some_gradient_flow".into(), json!(verdict == Verdict::Yes));
    if verdict == Verdict::Yes {
        if let Ok(s) = structure::canonical_structure(&q) {
            report.insert("canonical_structure".into(), structure_json(&s));
        }
    }
    print_report(Value::Object(report));
    Ok(())
}

fn structure_json(s: &structure::GradientStructure) -> Value {
    json!({
        "eigenvalues": jvec(s.eigenvalues().iter().copied()),
        "eigenbasis": Value::Array(
            s.eigenbasis()
                .iter()
                .map(|f| jvec(f.delta().iter().copied()))
                .collect(),
        ),
        "metric": jmatrix(s.metric().matrix()),
        "pi": jvec(s.pi().mass().iter().copied()),
    })
}

fn cmd_construct(input: &Path, functional: FunctionalKind) -> Result<(), Failure> {
    let (_, q) = load_chain(input)?;
    let pi = require_irreducible(&q)?;
    match functional {
        FunctionalKind::Entropy => {
            let m = entropy_hessian_at_pi(&pi);
            let verdict = structure::metric_at_pi(&q, &m).map_err(|e| Failure::input(e.to_string()))?;
            let report = match verdict {
                MetricVerdict::Metric(g) => json!({
                    "functional": "entropy",
                    "status": "metric",
                    "pi": jvec(pi.mass().iter().copied()),
                    "metric": jmatrix(g.matrix()),
                }),
                // A finding, not a failure: the asymmetric form is the
                // non-reversibility witness.
                MetricVerdict::NotAMetric { reason, form } => json!({
                    "functional": "entropy",
                    "status": "not_a_metric",
                    "reason": match reason {
                        NotAMetricReason::Asymmetric => "Asymmetric",
                        NotAMetricReason::NotPositiveDefinite => "NotPositiveDefinite",
                    },
                    "pi": jvec(pi.mass().iter().copied()),
                    "form": jmatrix(&form),
                }),
            };
            print_report(report);
        }
        FunctionalKind::Canonical => {
            let s = canonical_or_exit4(&q)?;
            let mut report = Map::new();
            report.insert("functional".into(), json!("canonical"));
            if let Value::Object(obj) = structure_json(&s) {
                report.extend(obj);
            }
            print_report(Value::Object(report));
        }
    }
    Ok(())
}

fn canonical_or_exit4(q: &Generator) -> Result<structure::GradientStructure, Failure> {
    structure::canonical_structure(q).map_err(|e| match e {
        StructureError::NotRepresentable { verdict } => Failure {
            code: EXIT_NOT_REPRESENTABLE,
            message: format!("chain is not gradient-flow representable (verdict {verdict})"),
        },
        StructureError::NotIrreducible => Failure {
            code: EXIT_NOT_IRREDUCIBLE,
            message: "chain is not irreducible".into(),
        },
        other => Failure::input(other.to_string()),
    })
}

fn cmd_simulate(
    input: &Path,
    rho0_text: &str,
    t_end: f64,
    dt: f64,
    perturb: Option<&str>,
    out: &Path,
) -> Result<(), Failure> {
    if t_end <= 0.0 || dt <= 0.0 {
        return Err(Failure::input("t-end and dt must be positive"));
    }
    let (_, q) = load_chain(input)?;
    require_irreducible(&q)?;
    let rho0 = parse_distribution(rho0_text, q.n_states(), "rho0")?;
    let s = canonical_or_exit4(&q)?;
    let base_metric = s.metric_field();
    let functional = s.functional();

    let (metric, metric_gap) = match perturb {
        None => (base_metric.clone(), None),
        Some(text) => {
            let params = parse_number_list(text, "perturb")?;
            let &[a, radius] = &params[..] else {
                return Err(Failure::input("--perturb expects 'a,radius'"));
            };
            let tilde = flowsim::perturbed_metric(&base_metric, &q, &rho0, a, radius)
                .map_err(|e| Failure::input(e.to_string()))?;
            let gap = gradflow_matrix_gap(&base_metric.at(&rho0), &tilde.at(&rho0));
            (tilde, Some(gap))
        }
    };

    let traj = flowsim::gradient_flow_integrate(&metric, &functional, &rho0, t_end, dt)
        .map_err(|e| match e {
            FlowError::LeftSimplex { .. } | FlowError::SingularMetric { .. } => Failure {
                code: EXIT_INTEGRATION,
                message: e.to_string(),
            },
            other => Failure::input(other.to_string()),
        })?;

    // Semigroup oracle on the same time grid.
    let semigroup_states: Vec<Distribution> = traj
        .times()
        .iter()
        .map(|&t| markov_core::semigroup_evolve(&q, &rho0, t))
        .collect();
    let max_deviation = traj
        .states()
        .iter()
        .zip(&semigroup_states)
        .map(|(a, b)| a.sup_distance(b))
        .fold(0.0f64, f64::max);
    let semigroup_traj = Trajectory::new(traj.times().to_vec(), semigroup_states);

    std::fs::write(out, trajectory_to_csv(&traj))
        .map_err(|e| Failure::input(format!("cannot write {}: {e}", out.display())))?;
    let semigroup_path = sibling_with_suffix(out, "_semigroup");
    std::fs::write(&semigroup_path, trajectory_to_csv(&semigroup_traj)).map_err(|e| {
        Failure::input(format!("cannot write {}: {e}", semigroup_path.display()))
    })?;

    let mut report = Map::new();
    report.insert("max_deviation".into(), jnum(max_deviation));
    report.insert("gradient_flow_csv".into(), json!(out.display().to_string()));
    report.insert(
        "semigroup_csv".into(),
        json!(semigroup_path.display().to_string()),
    );
    if let Some(gap) = metric_gap {
        report.insert("metric_gap_at_rho0".into(), jnum(gap));
    }
    print_report(Value::Object(report));
    Ok(())
}

fn gradflow_matrix_gap(
    a: &gradflow::entropy::BilinearFormOnT,
    b: &gradflow::entropy::BilinearFormOnT,
) -> f64 {
    let diff = a.matrix() - b.matrix();
    diff.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn sibling_with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    let ext = path.extension().map(|e| e.to_string_lossy().to_string());
    let name = match ext {
        Some(ext) => format!("{stem}{suffix}.{ext}"),
        None => format!("{stem}{suffix}"),
    };
    path.with_file_name(name)
}

fn cmd_check_functional(input: &Path, spec_path: &Path) -> Result<(), Failure> {
    let (_, q) = load_chain(input)?;
    let pi = require_irreducible(&q)?;
    let text = std::fs::read_to_string(spec_path)
        .map_err(|e| Failure::input(format!("cannot read {}: {e}", spec_path.display())))?;
    let spec: Value = serde_json::from_str(&text)
        .map_err(|e| Failure::input(format!("{}: {e}", spec_path.display())))?;
    let functional = build_functional(&spec, &pi)?;

    let outcome = entropy::entropy_compatibility_check(&functional, &pi)
        .map_err(|e| Failure::input(e.to_string()))?;
    let report = match outcome {
        Compatibility::Compatible { alpha } => json!({
            "compatible": true,
            "alpha": jnum(alpha),
        }),
        Compatibility::Incompatible(reason) => json!({
            "compatible": false,
            "reason": reason.to_string(),
        }),
    };
    print_report(report);
    Ok(())
}

fn build_functional(spec: &Value, pi: &Distribution) -> Result<Functional, Failure> {
    let family = spec
        .get("family")
        .and_then(Value::as_str)
        .ok_or_else(|| Failure::input("functional spec needs a 'family' field"))?;
    match family {
        "entropy-scaled" => {
            let c = spec.get("c").and_then(Value::as_f64).unwrap_or(1.0);
            Ok(Functional::relative_entropy(pi).scaled(c))
        }
        "quadratic-with-matrix" => {
            let n = pi.len();
            let rows = spec
                .get("matrix")
                .and_then(Value::as_array)
                .ok_or_else(|| Failure::input("quadratic-with-matrix needs 'matrix'"))?;
            if rows.len() != n {
                return Err(Failure::input(format!(
                    "matrix has {} rows, chain has {n} states",
                    rows.len()
                )));
            }
            let mut a = DMatrix::zeros(n, n);
            for (i, row) in rows.iter().enumerate() {
                let row = row
                    .as_array()
                    .filter(|r| r.len() == n)
                    .ok_or_else(|| Failure::input("matrix must be square"))?;
                for (j, x) in row.iter().enumerate() {
                    a[(i, j)] = x
                        .as_f64()
                        .ok_or_else(|| Failure::input("matrix entries must be numbers"))?;
                }
            }
            let center = pi.clone();
            // f(ρ) = ½ (ρ-π) A (ρ-π)ᵀ, so d²f = sym(A) on T.
            Ok(Functional::new(move |rho: &Distribution| {
                let d = rho.mass() - center.mass();
                0.5 * (d.transpose() * &a * &d)[(0, 0)]
            }))
        }
        "custom-polynomial" => {
            let n = pi.len();
            let terms = spec
                .get("terms")
                .and_then(Value::as_array)
                .ok_or_else(|| Failure::input("custom-polynomial needs 'terms'"))?;
            let mut parsed: Vec<(f64, Vec<u32>)> = Vec::new();
            for term in terms {
                let coeff = term
                    .get("coeff")
                    .and_then(Value::as_f64)
                    .ok_or_else(|| Failure::input("term needs numeric 'coeff'"))?;
                let powers = term
                    .get("powers")
                    .and_then(Value::as_array)
                    .filter(|p| p.len() == n)
                    .ok_or_else(|| {
                        Failure::input(format!("term needs 'powers' with {n} entries"))
                    })?;
                let powers = powers
                    .iter()
                    .map(|p| p.as_u64().map(|u| u as u32))
                    .collect::<Option<Vec<u32>>>()
                    .ok_or_else(|| Failure::input("powers must be nonnegative integers"))?;
                parsed.push((coeff, powers));
            }
            Ok(Functional::new(move |rho: &Distribution| {
                parsed
                    .iter()
                    .map(|(c, powers)| {
                        c * powers
                            .iter()
                            .enumerate()
                            .map(|(i, &p)| rho.mass()[i].powi(p as i32))
                            .product::<f64>()
                    })
                    .sum()
            }))
        }
        other => Err(Failure::input(format!("unknown functional family '{other}'"))),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_zoo(
    family: Family,
    pi: Option<&str>,
    lambda: Option<f64>,
    mu: Option<f64>,
    v: Option<&str>,
    seed: u64,
    n: Option<usize>,
    rate: f64,
    max_tries: usize,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let need_pi = |text: Option<&str>| -> Result<Distribution, Failure> {
        let text = text.ok_or_else(|| Failure::input("this family needs --pi"))?;
        let values = parse_number_list(text, "pi")?;
        Distribution::new_renormalized(DVector::from_vec(values), 1e-9)
            .map_err(|e| Failure::input(format!("invalid pi: {e}")))
    };
    let spec: ChainSpec = match family {
        Family::Star => {
            let pi = need_pi(pi)?;
            let lambda = lambda.ok_or_else(|| Failure::input("star needs --lambda"))?;
            zoo::star_chain(&pi, lambda).map_err(|e| Failure::input(e.to_string()))?
        }
        Family::CoupledPair => {
            let pi = need_pi(pi)?;
            let lambda = lambda.ok_or_else(|| Failure::input("coupled-pair needs --lambda"))?;
            let mu = mu.ok_or_else(|| Failure::input("coupled-pair needs --mu"))?;
            let v_text = v.ok_or_else(|| Failure::input("coupled-pair needs --v"))?;
            let values = parse_number_list(v_text, "v")?;
            let v = TangentVector::new(DVector::from_vec(values))
                .map_err(|e| Failure::input(format!("invalid v: {e}")))?;
            zoo::coupled_pair_chain(&pi, lambda, mu, &v)
                .map_err(|e| Failure::input(e.to_string()))?
        }
        Family::RandomReversible => {
            let pi = need_pi(pi)?;
            zoo::random_reversible(&pi, seed).map_err(|e| Failure::input(e.to_string()))?
        }
        Family::RandomNonrevDiag => {
            let n = n.ok_or_else(|| Failure::input("random-nonrev-diag needs --n"))?;
            if n < 3 {
                return Err(Failure::input("random-nonrev-diag needs --n >= 3"));
            }
            zoo::random_nonreversible_diagonalisable(n, seed, max_tries)
                .map_err(|e| Failure::input(e.to_string()))?
        }
        Family::Cyclic => {
            let n = n.ok_or_else(|| Failure::input("cyclic needs --n"))?;
            if n < 3 {
                return Err(Failure::input("cyclic needs --n >= 3"));
            }
            zoo::cyclic_chain(n, rate).map_err(|e| Failure::input(e.to_string()))?
        }
    };

    let n_states = spec.generator.n_states();
    let chain = json!({
        "Q": jmatrix(spec.generator.rates()),
        "labels": {"family": spec.name},
        "states": (0..n_states).map(|i| format!("s{i}")).collect::<Vec<_>>(),
    });
    let text = serde_json::to_string_pretty(&chain).expect("valid JSON");
    match out {
        Some(path) => std::fs::write(path, text + "\n")
            .map_err(|e| Failure::input(format!("cannot write {}: {e}", path.display())))?,
        None => println!("{text}"),
    }
    Ok(())
}
