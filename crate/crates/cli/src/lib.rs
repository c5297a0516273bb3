//! Configuration, dispatch and output formatting for the `game-lattice` binary.

use std::path::{Path, PathBuf};

use game_lattice::converge::{
    grid_gap_bound, richardson, value_sequence, ConvergenceTable, GridGapBound,
};
use game_lattice::dynkin::{extract_strategies, solve, DPResult, FilteredLattice, LatticeDoc};
use game_lattice::lattice::{build, BuildError, EnginePolicy, LatticeMeta};
use game_lattice::model::{one_step_mean_factor, step_params, MertonParams};
use game_lattice::oracle::{
    enumerate_game_value, mc_terminal_mean, random_lattice, saddle_check, Kernel, McConfig,
    McEstimate, OracleError, RandomLatticeSpec, SaddleReport,
};
use game_lattice::payoff::{PayoffKind, PayoffSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Environment variable holding the worker-thread count.
pub const WORKERS_ENV: &str = "GAME_LATTICE_WORKERS";

pub const DEFAULT_MC_PATHS: usize = 100_000;
pub const DEFAULT_SEED: u64 = 20_240_601;

const ORACLE_TOL: f64 = 1e-12;
const MARTINGALE_TOL: f64 = 1e-12;

/// Largest lattice `price` will write to a dump file.
pub const DUMP_MAX_NODES: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Price,
    Converge,
    Verify,
    Bound,
}

impl std::str::FromStr for Command {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        serde_json::from_value(Value::String(s.to_owned()))
            .map_err(|_| format!("unknown command {s:?}"))
    }
}

/// Destination and format. A path of `-` in `csv` or `json` writes that format to stdout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Output {
    #[default]
    Stdout,
    Csv(PathBuf),
    Json(PathBuf),
}

impl Output {
    /// `-` means stdout; a `.csv` extension selects CSV, anything else JSON.
    pub fn from_path(path: &str) -> Self {
        if path == "-" {
            Output::Stdout
        } else if Path::new(path)
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
        {
            Output::Csv(path.into())
        } else {
            Output::Json(path.into())
        }
    }

    fn format(&self) -> Format {
        match self {
            Output::Csv(_) => Format::Csv,
            _ => Format::Json,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    /// Number of random lattices checked against brute-force enumeration.
    pub random_lattices: usize,
    pub max_depth: u32,
    pub max_branch: usize,
    /// Random deviations tried on each side of the saddle check.
    pub deviations: usize,
    pub kernel: Kernel,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            random_lattices: 200,
            max_depth: 3,
            max_branch: 3,
            deviations: 20,
            kernel: Kernel::H,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub command: Option<Command>,
    #[serde(default)]
    pub model: Option<MertonParams>,
    #[serde(default)]
    pub payoff: Option<PayoffKind>,
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub n_list: Option<Vec<usize>>,
    #[serde(default)]
    pub engine: EnginePolicy,
    #[serde(default)]
    pub mc: Option<McConfig>,
    #[serde(default)]
    pub output: Output,
    /// Record wall time per converge row. Off by default so reruns are byte-identical.
    #[serde(default)]
    pub timing: bool,
    /// Append grid-gap bound columns to converge output.
    #[serde(default)]
    pub bound_columns: bool,
    #[serde(default)]
    pub verify: VerifyConfig,
    /// Price a lattice stored as JSON instead of building one from the model.
    #[serde(default)]
    pub tree: Option<PathBuf>,
    /// Write the priced lattice as JSON to this path.
    #[serde(default)]
    pub dump: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: None,
            model: None,
            payoff: None,
            n: None,
            n_list: None,
            engine: EnginePolicy::Auto,
            mc: None,
            output: Output::Stdout,
            timing: false,
            bound_columns: false,
            verify: VerifyConfig::default(),
            tree: None,
            dump: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 1,
            CliError::Capacity(_) => 2,
        }
    }
}

impl From<BuildError> for CliError {
    fn from(e: BuildError) -> Self {
        match e {
            BuildError::ExactStepCap { .. }
            | BuildError::ExactCapExceeded { .. }
            | BuildError::GridOverflow { .. } => CliError::Capacity(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::EnumerationCapExceeded { .. } => CliError::Capacity(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

/// Result of a successful dispatch: the rendered artifact and the process exit code.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub body: String,
    pub exit_code: i32,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// The Monte Carlo settings actually used, with defaults filled in.
    pub fn resolved_mc(&self) -> McConfig {
        self.mc
            .unwrap_or_else(|| McConfig::new(DEFAULT_MC_PATHS, DEFAULT_SEED))
    }

    fn command(&self) -> Result<Command, CliError> {
        self.command.ok_or_else(|| {
            CliError::Config("command: missing (price, converge, verify or bound)".into())
        })
    }

    fn model(&self) -> Result<MertonParams, CliError> {
        let model = self
            .model
            .clone()
            .ok_or_else(|| CliError::Config("model: missing".into()))?;
        model
            .validate()
            .map_err(|e| CliError::Config(format!("model: {e}")))?;
        Ok(model)
    }

    fn payoff(&self, model: &MertonParams) -> Result<PayoffSpec, CliError> {
        let kind = self
            .payoff
            .ok_or_else(|| CliError::Config("payoff: missing".into()))?;
        PayoffSpec::new(kind, model.r).map_err(|e| CliError::Config(format!("payoff: {e}")))
    }

    fn n(&self) -> Result<usize, CliError> {
        match self.n {
            Some(0) => Err(CliError::Config("n: must be at least 1".into())),
            Some(n) => Ok(n),
            None => Err(CliError::Config("n: missing".into())),
        }
    }

    fn n_list(&self) -> Result<Vec<usize>, CliError> {
        match &self.n_list {
            Some(list) if list.is_empty() => Err(CliError::Config("n_list: empty".into())),
            Some(list) if list.contains(&0) => Err(CliError::Config(
                "n_list: entries must be at least 1".into(),
            )),
            Some(list) => Ok(list.clone()),
            None => Err(CliError::Config("n_list: missing".into())),
        }
    }

    fn mc(&self) -> Result<McConfig, CliError> {
        let mc = self.resolved_mc();
        mc.validate()
            .map_err(|e| CliError::Config(format!("mc: {e}")))?;
        Ok(mc)
    }

    /// The config as echoed in outputs: defaults resolved, seed explicit.
    fn echo(&self) -> Value {
        let mut echo = self.clone();
        echo.mc = Some(self.resolved_mc());
        serde_json::to_value(echo).expect("config serializes")
    }
}

/// Runs the configured command and renders its artifact in the configured format.
pub fn run(config: &RunConfig) -> Result<Outcome, CliError> {
    let format = config.output.format();
    match config.command()? {
        Command::Price => price(config, format),
        Command::Converge => converge(config, format),
        Command::Verify => verify(config, format),
        Command::Bound => bound(config, format),
    }
}

/// Writes an outcome to the configured destination.
pub fn emit(config: &RunConfig, outcome: &Outcome) -> Result<(), CliError> {
    match &config.output {
        Output::Stdout => {
            print!("{}", outcome.body);
            Ok(())
        }
        Output::Csv(path) | Output::Json(path) if path.as_os_str() == "-" => {
            print!("{}", outcome.body);
            Ok(())
        }
        Output::Csv(path) | Output::Json(path) => std::fs::write(path, &outcome.body)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display()))),
    }
}

fn envelope(config: &RunConfig, command: Command, body: Value) -> Value {
    json!({
        "version": VERSION,
        "command": command,
        "seed": config.resolved_mc().seed,
        "config": config.echo(),
        "result": body,
    })
}

fn render_json(value: &Value) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("json renders");
    s.push('\n');
    s
}

/// Leading `#` lines carrying version, seed and the config echo.
fn csv_preamble(config: &RunConfig, command: Command) -> String {
    format!(
        "# game-lattice {VERSION}\n# command={}\n# seed={}\n# config={}\n",
        serde_json::to_value(command)
            .expect("command serializes")
            .as_str()
            .unwrap_or_default(),
        config.resolved_mc().seed,
        serde_json::to_string(&config.echo()).expect("config serializes"),
    )
}

/// Counts of stopping and cancellation nodes in one time layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSummary {
    pub time: u32,
    pub nodes: usize,
    pub buyer_stop: usize,
    pub seller_cancel: usize,
}

pub fn stop_region(lattice: &FilteredLattice, result: &DPResult) -> Vec<LayerSummary> {
    (0..=lattice.horizon())
        .map(|k| {
            let layer = lattice.layer(k);
            LayerSummary {
                time: k,
                nodes: layer.len(),
                buyer_stop: layer
                    .iter()
                    .filter(|&&id| result.buyer_stop[id as usize])
                    .count(),
                seller_cancel: layer
                    .iter()
                    .filter(|&&id| result.seller_cancel[id as usize])
                    .count(),
            }
        })
        .collect()
}

fn price(config: &RunConfig, format: Format) -> Result<Outcome, CliError> {
    let (lattice, n, meta) = match &config.tree {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            let doc: LatticeDoc =
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("tree: {e}")))?;
            let lattice = FilteredLattice::from_doc(&doc)
                .map_err(|e| CliError::Config(format!("tree: {e}")))?;
            let n = lattice.horizon() as usize;
            (lattice, n, None)
        }
        None => {
            let model = config.model()?;
            let payoff = config.payoff(&model)?;
            let n = config.n()?;
            let ml = build(&model, &payoff, n, &config.engine)?;
            (ml.lattice, n, Some(ml.meta))
        }
    };
    if let Some(path) = &config.dump {
        let doc = lattice
            .to_doc(DUMP_MAX_NODES)
            .map_err(|e| CliError::Capacity(format!("dump: {e}")))?;
        let text = serde_json::to_string(&doc).expect("lattice renders");
        std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    }
    let result = solve(&lattice);
    let root = lattice.node(lattice.root());
    let layers = stop_region(&lattice, &result);
    let engine = meta.as_ref().map_or("tree", |m| m.engine.as_str());
    let body = match format {
        Format::Json => {
            let strategies = extract_strategies(&lattice, &result);
            render_json(&envelope(
                config,
                Command::Price,
                json!({
                    "n": n,
                    "engine": engine,
                    "value": result.value(),
                    "root_lower": root.lower,
                    "root_upper": root.upper,
                    "meta": meta,
                    "stop_region": {
                        "root_buyer_stop": strategies.buyer.stops_at(lattice.root()),
                        "root_seller_cancel": result.seller_cancel[lattice.root() as usize],
                        "layers": layers,
                    },
                }),
            ))
        }
        Format::Csv => {
            let mut s = csv_preamble(config, Command::Price);
            s.push_str("n,value,engine,states,root_lower,root_upper,buyer_stop_nodes,seller_cancel_nodes\n");
            s.push_str(&format!(
                "{n},{},{engine},{},{},{},{},{}\n",
                result.value(),
                lattice.len(),
                root.lower,
                root.upper,
                layers.iter().map(|l| l.buyer_stop).sum::<usize>(),
                layers.iter().map(|l| l.seller_cancel).sum::<usize>(),
            ));
            s
        }
    };
    Ok(Outcome { body, exit_code: 0 })
}

fn converge(config: &RunConfig, format: Format) -> Result<Outcome, CliError> {
    let model = config.model()?;
    let payoff = config.payoff(&model)?;
    let n_list = config.n_list()?;
    let mut table = value_sequence(&model, &payoff, &n_list, &config.engine, config.timing);
    if config.bound_columns {
        table.attach_bounds(&model, &payoff, &config.mc()?);
    }
    let body = match format {
        Format::Csv => csv_preamble(config, Command::Converge) + &table.to_csv(),
        Format::Json => render_json(&envelope(config, Command::Converge, converge_json(&table))),
    };
    Ok(Outcome { body, exit_code: 0 })
}

fn converge_json(table: &ConvergenceTable) -> Value {
    let extrapolation = match richardson(table) {
        Ok(e) => json!(e),
        Err(e) => json!({ "error": e.to_string() }),
    };
    json!({
        "rows": table.rows,
        "delta_prev": table.delta_prev(),
        "doubling_deltas": table.doubling_deltas(),
        "richardson": extrapolation,
    })
}

fn bound(config: &RunConfig, format: Format) -> Result<Outcome, CliError> {
    let model = config.model()?;
    let payoff = config.payoff(&model)?;
    let mc = config.mc()?;
    let ns = match (&config.n_list, config.n) {
        (Some(_), _) => config.n_list()?,
        (None, _) => vec![config.n()?],
    };
    let bounds = ns
        .iter()
        .map(|&n| {
            grid_gap_bound(&model, &payoff, n, &mc)
                .map_err(|e| CliError::Config(format!("n = {n}: {e}")))
        })
        .collect::<Result<Vec<GridGapBound>, _>>()?;
    let body = match format {
        Format::Json => render_json(&envelope(
            config,
            Command::Bound,
            json!({ "bounds": bounds }),
        )),
        Format::Csv => {
            let mut s = csv_preamble(config, Command::Bound);
            s.push_str("n,term1,term2,term3_proxy,total,term3_heuristic\n");
            for b in &bounds {
                s.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    b.n, b.term1, b.term2, b.term3_proxy, b.total, b.term3_heuristic
                ));
            }
            s
        }
    };
    Ok(Outcome { body, exit_code: 0 })
}

/// One line of the verification report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
    pub engine: LatticeMeta,
    pub terminal_mean: McEstimate,
    pub saddle: SaddleReport,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Runs the oracle, martingale, terminal-mean and saddle checks on the configured model.
pub fn verify_report(config: &RunConfig) -> Result<VerifyReport, CliError> {
    let model = config.model()?;
    let payoff = config.payoff(&model)?;
    let n = config.n()?;
    let mc = config.mc()?;
    let vc = config.verify;
    let mut checks = Vec::new();

    let spec = RandomLatticeSpec {
        max_depth: vc.max_depth,
        max_branch: vc.max_branch,
        ..RandomLatticeSpec::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(mc.seed);
    let mut worst: f64 = 0.0;
    for _ in 0..vc.random_lattices {
        let lattice = random_lattice(&mut rng, &spec);
        let v = solve(&lattice).value();
        for kernel in [Kernel::H, Kernel::J] {
            let g = enumerate_game_value(&lattice, kernel)?;
            worst = worst.max((g.inf_sup - v).abs()).max((g.sup_inf - v).abs());
        }
    }
    checks.push(Check {
        name: "oracle_equivalence",
        passed: worst <= ORACLE_TOL,
        detail: format!(
            "{} random lattices, both kernels, max deviation {worst:e}",
            vc.random_lattices
        ),
    });

    let step = step_params(&model, n).map_err(|e| CliError::Config(format!("model: {e}")))?;
    let factor = one_step_mean_factor(&step, &model.jump_law);
    checks.push(Check {
        name: "martingale_identity",
        passed: (factor - 1.0).abs() <= MARTINGALE_TOL,
        detail: format!("one-step mean factor {factor}"),
    });

    let terminal_mean = mc_terminal_mean(&model, &step, &mc)?;
    let gap = (terminal_mean.estimate - model.s0).abs();
    checks.push(Check {
        name: "terminal_mean",
        passed: gap <= 3.0 * terminal_mean.std_error,
        detail: format!(
            "mean {} vs s0 {} (se {})",
            terminal_mean.estimate, model.s0, terminal_mean.std_error
        ),
    });

    let ml = build(&model, &payoff, n, &config.engine)?;
    let result = solve(&ml.lattice);
    let saddle = saddle_check(&model, &payoff, &ml, &result, vc.kernel, &mc, vc.deviations)?;
    checks.push(Check {
        name: "saddle",
        passed: saddle.passed(),
        detail: format!(
            "value {}, {} deviations per side, {} violations",
            saddle.value, vc.deviations, saddle.violations
        ),
    });

    Ok(VerifyReport {
        checks,
        engine: ml.meta,
        terminal_mean,
        saddle,
    })
}

fn verify(config: &RunConfig, format: Format) -> Result<Outcome, CliError> {
    let report = verify_report(config)?;
    let exit_code = if report.passed() { 0 } else { 3 };
    let body = match format {
        Format::Json => render_json(&envelope(config, Command::Verify, json!(report))),
        Format::Csv => {
            let mut s = csv_preamble(config, Command::Verify);
            s.push_str("check,passed,n,engine,detail\n");
            for c in &report.checks {
                s.push_str(&format!(
                    "{},{},{},{},\"{}\"\n",
                    c.name,
                    c.passed,
                    report.engine.n,
                    report.engine.engine.as_str(),
                    c.detail.replace('"', "\"\"")
                ));
            }
            s
        }
    };
    Ok(Outcome { body, exit_code })
}
