use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use fou_merton::asymptotics::{
    phi_conditional, phi_variance_limit, practical_strategy, q_expansion_value, sigma_phi_sq, strategy_pi1,
};
use fou_merton::fou::{simulate_factor, write_paths_csv};
use fou_merton::harness::report::num;
use fou_merton::harness::{self, config_header, Check, ExperimentConfig, ExperimentKind, Report, Table};
use fou_merton::MertonSolution;

#[derive(Parser)]
#[command(name = "foulab", version, about = "Fast fractional-OU Merton problem laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; flags below override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Monte Carlo paths (histories for `scaling` use the config value).
    #[arg(long, global = true)]
    paths: Option<usize>,
    #[arg(long, global = true)]
    dt: Option<f64>,
    /// Comma-separated ε values.
    #[arg(long, global = true, value_delimiter = ',')]
    eps_list: Option<Vec<f64>>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// 500k paths, Δt = 1e-3, history (T/Δt)^1.5.
    #[arg(long, global = true)]
    paper_scale: bool,
    /// Worker threads (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate factor paths and write them as CSV.
    SimulateFou {
        #[arg(long)]
        eps: Option<f64>,
        /// All paths share the history of omega 0.
        #[arg(long)]
        shared_history: bool,
    },
    /// Invariant-measure averages of the configured model.
    Averages,
    /// Constant-coefficient Merton value and risk tolerance on a (t, x) grid.
    Merton {
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// First-order expansion quantities per ε (and φ₀ per omega).
    Expand,
    /// Three value estimators and their gaps per (ε, omega).
    Table1,
    /// L² norms and Var(φ₀) over an ε ladder, with log-log slopes.
    Scaling,
    /// Paired perturbation probes.
    Optimality,
    /// Closed-form, averaging and Merton-solver property checks.
    Properties,
}

fn load_config(c: &Common, cmd: &Command) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if c.paper_scale {
        cfg = cfg.paper_scale();
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(dt) = c.dt {
        cfg.scenario.dt = dt;
    }
    match cmd {
        Command::Scaling => {
            if let Some(n) = c.paths {
                cfg.scaling.n_paths = n;
            }
            if let Some(e) = &c.eps_list {
                cfg.scaling.eps_list = e.clone();
            }
        }
        Command::Optimality => {
            if let Some(n) = c.paths {
                cfg.optimality.n_paths = n;
            }
            if let Some(e) = &c.eps_list {
                cfg.optimality.eps_list = e.clone();
            }
        }
        _ => {
            if let Some(n) = c.paths {
                cfg.n_paths = n;
            }
            if let Some(e) = &c.eps_list {
                cfg.eps_list = e.clone();
            }
        }
    }
    cfg.experiment = match cmd {
        Command::Scaling => ExperimentKind::Scaling,
        Command::Optimality => ExperimentKind::Optimality,
        Command::Properties => ExperimentKind::Properties,
        _ => ExperimentKind::Table1,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(dir: &Path, name: &str, body: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let p = dir.join(name);
    fs::write(&p, body).with_context(|| format!("writing {}", p.display()))?;
    Ok(p)
}

fn simulate_fou(cfg: &ExperimentConfig, eps: Option<f64>, shared: bool, out: &Path) -> Result<Report> {
    let sc = &cfg.scenario;
    let eps = eps.unwrap_or(cfg.eps_list[0]);
    let p = sc.params(eps)?;
    let grid = sc.history.grid(&p, sc.horizon, sc.dt)?;
    let sim = sc.simulator(eps)?;
    let mut checks = Vec::new();
    if let Some(w) = sim.truncation_warning(1e-3)? {
        eprintln!("warning: {w}");
        checks.push(Check::new("history truncation", false, w));
    }
    let paths = simulate_factor(p, grid, sc.rho, cfg.seed, cfg.n_paths, shared)?;
    let mut body = config_header(cfg).into_bytes();
    write_paths_csv(&paths, &mut body)?;
    let file = write_file(out, "fou_paths.csv", std::str::from_utf8(&body)?)?;
    Ok(Report {
        name: "simulate_fou".into(),
        tables: Vec::new(),
        summary: vec![format!(
            "{} paths, eps {eps}, {} steps of {} with {} history steps -> {}",
            paths.len(),
            grid.n_steps,
            grid.dt,
            grid.history_len,
            file.display()
        )],
        checks,
    })
}

fn averages(cfg: &ExperimentConfig) -> Result<Report> {
    let inputs = cfg.scenario.inputs(cfg.eps_list[0])?;
    let av = &inputs.averages;
    let practical = practical_strategy(&inputs)?;
    let mut t = Table::new(&["quantity", "value"]);
    for (k, v) in [
        ("sigma_ou_sq", inputs.params.sigma_ou_sq()),
        ("lambda_bar_sq", av.lambda_bar_sq),
        ("lambda_bar", av.lambda_bar),
        ("lambda_tilde", av.lambda_tilde),
        ("avg_lambda_lambda_prime", av.avg_lambda_lambda_prime),
        ("mu_bar", av.mu_bar),
        ("sigma_bar_sq", av.sigma_bar_sq),
        ("q", av.q),
        ("c_star", practical.c_star),
        ("practical_sharpe_sq", practical.sharpe_sq),
        ("cauchy_schwarz_gap", practical.cauchy_schwarz_gap),
    ] {
        t.push(vec![k.to_string(), num(v)]);
    }
    let summary = t.rows.iter().map(|r| format!("{:<24} {}", r[0], r[1])).collect();
    Ok(Report {
        name: "averages".into(),
        tables: vec![(String::new(), t)],
        summary,
        checks: Vec::new(),
    })
}

fn merton(cfg: &ExperimentConfig, lambda: Option<f64>) -> Result<Report> {
    let u = cfg.validate()?;
    let lambda = match lambda {
        Some(l) => l,
        None => cfg.scenario.inputs(cfg.eps_list[0])?.averages.lambda_bar,
    };
    let horizon = cfg.scenario.horizon;
    let sol = MertonSolution::new(u, lambda, horizon)?;
    let mut t = Table::new(&["t", "x", "value", "value_x", "value_xx", "risk_tolerance", "d1_value", "d2_value"]);
    for i in 0..=10 {
        let tt = horizon * i as f64 / 10.0;
        for j in 1..=10 {
            let x = 0.5 * j as f64;
            let p = sol.point(tt, x)?;
            t.push(vec![
                num(tt),
                num(x),
                num(p.m),
                num(p.m_x),
                num(p.m_xx),
                num(p.risk_tolerance()),
                num(sol.d1_value(tt, x)?),
                num(sol.d2_value(tt, x)?),
            ]);
        }
    }
    Ok(Report {
        name: "merton".into(),
        tables: vec![(String::new(), t)],
        summary: vec![format!("Merton solution at lambda = {lambda}, T = {horizon}, value(0, 1) = {}", sol.value(0.0, 1.0)?)],
        checks: Vec::new(),
    })
}

fn expand(cfg: &ExperimentConfig) -> Result<Report> {
    let sc = &cfg.scenario;
    let mut t = Table::new(&[
        "eps",
        "omega_id",
        "phi0",
        "leading",
        "deterministic",
        "q_value",
        "c_tt",
        "pi1_at_y0",
        "sigma_phi_sq",
        "phi_variance_limit",
    ]);
    let mut summary = Vec::new();
    for &eps in &cfg.eps_list {
        let inputs = sc.inputs(eps)?;
        let sim = sc.simulator(eps)?;
        let s_stated = sigma_phi_sq(&inputs)?;
        let s_limit = phi_variance_limit(&inputs)?;
        for &omega in &cfg.omegas {
            let phi = phi_conditional(&sim, &sim.history(cfg.seed, omega), &inputs);
            let q = q_expansion_value(0.0, sc.x0, phi, &inputs)?;
            t.push(vec![
                num(eps),
                omega.to_string(),
                num(phi),
                num(q.leading),
                num(q.deterministic),
                num(q.value),
                num(inputs.c_tt(0.0)?),
                num(strategy_pi1(0.0, sc.x0, 0.0, &inputs, true)?),
                num(s_stated),
                num(s_limit),
            ]);
            summary.push(format!(
                "eps {eps:<5} omega {omega:<3} phi0 {phi:+.4e}  Q {:.6}  (leading {:.6}, deterministic {:+.4e})",
                q.value, q.leading, q.deterministic
            ));
        }
    }
    Ok(Report {
        name: "expand".into(),
        tables: vec![(String::new(), t)],
        summary,
        checks: Vec::new(),
    })
}

fn run(cli: &Cli) -> Result<bool> {
    let cfg = load_config(&cli.common, &cli.command)?;
    let out = &cli.common.out;
    let report = match &cli.command {
        Command::SimulateFou { eps, shared_history } => simulate_fou(&cfg, *eps, *shared_history, out)?,
        Command::Averages => averages(&cfg)?,
        Command::Merton { lambda } => merton(&cfg, *lambda)?,
        Command::Expand => expand(&cfg)?,
        Command::Table1 | Command::Scaling | Command::Optimality | Command::Properties => harness::run(&cfg)?,
    };
    let files = report.write(&cfg, out)?;
    print!("{}", report.summary_text(&cfg).lines().skip(2).map(|l| format!("{l}\n")).collect::<String>());
    for f in files {
        eprintln!("wrote {}", f.display());
    }
    Ok(report.passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.common.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
