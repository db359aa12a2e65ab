//! The `caravan` driver: argument parsing, config resolution and the four
//! modes (sweep, bench, moea-demo, serve).

use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::bench::{emit_report, run_benchmark, Case, Workload};
use crate::demo::{self, CityModel};
use crate::engine::{Backend, Engine, ExitReport};
use crate::moea::Truncation;
use crate::scheduler::sim::{SimConfig, SleepExecutor, VirtualScheduler};
use crate::scheduler::{
    start_topology, transport_inprocess, transport_tcp, SchedulerConfig, SchedulerHandle, Topology,
};
use crate::types::{render_command, TaskState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 64;
pub const EXIT_CONFIG: i32 = 65;

pub const DEFAULT_FANOUT: usize = 384;

#[derive(Debug, Parser)]
#[command(name = "caravan", version, about = "Farm simulator runs over a producer/buffer/consumer worker tree")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub mode: Mode,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// How workers talk to each other
    #[arg(long, global = true, value_enum)]
    pub transport: Option<TransportKind>,
    /// Producer listen address, required with `--transport tcp`
    #[arg(long, global = true)]
    pub listen: Option<SocketAddr>,
    /// Number of consumer workers [default: available cores]
    #[arg(long, global = true)]
    pub consumers: Option<usize>,
    /// Consumers served by one buffer [default: 384]
    #[arg(long, global = true)]
    pub fanout: Option<usize>,
    /// Directory holding per-task working directories [default: caravan_work]
    #[arg(long, global = true)]
    pub work_root: Option<PathBuf>,
    /// Seed for workloads and the optimizer [default: 0]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for reports and logs [default: .]
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// File of `key = value` lines; command-line flags take precedence
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// More log output (repeat for more)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TransportKind {
    Inproc,
    Tcp,
}

#[derive(Debug, Subcommand)]
pub enum Mode {
    /// Run one command per value, substituting `{0}`
    Sweep(SweepArgs),
    /// Load-balancing benchmark with dummy sleep tasks
    Bench(BenchArgs),
    /// Optimize evacuation plans on the built-in city
    MoeaDemo(DemoArgs),
    /// Host a search engine that speaks the line protocol on stdin/stdout
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Command template; `{0}` is the value, `{seed}` the seed
    #[arg(long)]
    pub cmd: String,
    /// Comma-separated values
    #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BenchCase {
    Tc1,
    Tc2,
    Tc3,
    All,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Test case to run
    #[arg(long, value_enum, default_value = "all")]
    pub case: BenchCase,
    /// Factor applied to the nominal task durations
    #[arg(long, default_value_t = 0.001)]
    pub scale: f64,
    /// Number of tasks [default: 100 per consumer]
    #[arg(long)]
    pub tasks: Option<usize>,
    /// Simulate in virtual time instead of running processes
    #[arg(long = "virtual")]
    pub virtual_time: bool,
    /// Skip the Gantt chart
    #[arg(long)]
    pub no_svg: bool,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    /// Evaluate plans in virtual time instead of running the simulator
    #[arg(long = "virtual")]
    pub virtual_time: bool,
    /// Initial population size
    #[arg(long, default_value_t = 200)]
    pub p_ini: usize,
    /// Offspring per generation
    #[arg(long, default_value_t = 100)]
    pub p_n: usize,
    /// Archive size
    #[arg(long, default_value_t = 200)]
    pub p_archive: usize,
    /// Number of generations
    #[arg(long, default_value_t = 40)]
    pub generations: usize,
    /// Seeds averaged per individual
    #[arg(long, default_value_t = 3)]
    pub replicates: usize,
    /// Archive by binary tournament instead of rank and crowding
    #[arg(long)]
    pub tournament: bool,
    /// Simulator sleep per minute of evacuation time, in seconds
    #[arg(long, default_value_t = demo::DEFAULT_TIME_SCALE)]
    pub time_scale: f64,
    /// City model JSON [default: the built-in 16-area city]
    #[arg(long)]
    pub city: Option<PathBuf>,
    /// Simulator executable [default: caravan-demo-sim next to this binary]
    #[arg(long)]
    pub simulator: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Shell command that starts the engine process
    #[arg(long)]
    pub engine_cmd: String,
}

#[derive(Debug, Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

/// Global settings after merging the config file, flags and defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub transport: TransportKind,
    pub listen: Option<SocketAddr>,
    pub consumers: usize,
    pub fanout: usize,
    pub work_root: PathBuf,
    pub seed: u64,
    pub out: PathBuf,
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped;
/// keys may use `-` or `_`.
pub fn parse_config_file(text: &str) -> Result<GlobalArgs, ConfigError> {
    let mut g = GlobalArgs::default();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("line {}: expected key = value", n + 1)))?;
        let (key, value) = (key.trim().replace('_', "-"), value.trim());
        let bad = |what: &str| ConfigError(format!("line {}: invalid {what} `{value}`", n + 1));
        match key.as_str() {
            "transport" => {
                g.transport = Some(TransportKind::from_str(value, true).map_err(|_| bad("transport"))?)
            }
            "listen" => g.listen = Some(value.parse().map_err(|_| bad("address"))?),
            "consumers" => g.consumers = Some(value.parse().map_err(|_| bad("consumer count"))?),
            "fanout" => g.fanout = Some(value.parse().map_err(|_| bad("fanout"))?),
            "work-root" => g.work_root = Some(value.into()),
            "seed" => g.seed = Some(value.parse().map_err(|_| bad("seed"))?),
            "out" => g.out = Some(value.into()),
            other => return Err(ConfigError(format!("line {}: unknown key `{other}`", n + 1))),
        }
    }
    Ok(g)
}

impl CliConfig {
    pub fn resolve(flags: &GlobalArgs) -> Result<Self, ConfigError> {
        let file = match &flags.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| ConfigError(format!("reading {}: {e}", path.display())))?;
                parse_config_file(&text)?
            }
            None => GlobalArgs::default(),
        };
        let cfg = Self {
            transport: flags.transport.or(file.transport).unwrap_or(TransportKind::Inproc),
            listen: flags.listen.or(file.listen),
            consumers: flags
                .consumers
                .or(file.consumers)
                .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())),
            fanout: flags.fanout.or(file.fanout).unwrap_or(DEFAULT_FANOUT),
            work_root: flags
                .work_root
                .clone()
                .or(file.work_root)
                .unwrap_or_else(|| "caravan_work".into()),
            seed: flags.seed.or(file.seed).unwrap_or(0),
            out: flags.out.clone().or(file.out).unwrap_or_else(|| ".".into()),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.consumers == 0 {
            return Err(ConfigError("--consumers must be at least 1".into()));
        }
        if self.fanout == 0 {
            return Err(ConfigError("--fanout must be at least 1".into()));
        }
        if self.transport == TransportKind::Tcp && self.listen.is_none() {
            return Err(ConfigError("--transport tcp needs --listen <addr>".into()));
        }
        Ok(())
    }

    pub fn topology(&self) -> Result<Topology, ConfigError> {
        Topology::new(self.consumers, self.fanout).map_err(|e| ConfigError(e.to_string()))
    }

    /// Starts real worker threads over the configured transport.
    pub fn start_scheduler(&self) -> anyhow::Result<SchedulerHandle> {
        let topo = self.topology()?;
        let transport = match self.transport {
            TransportKind::Inproc => transport_inprocess(&topo),
            TransportKind::Tcp => {
                let addr = self.listen.expect("validated");
                transport_tcp(&topo, addr).with_context(|| format!("setting up tcp on {addr}"))?
            }
        };
        Ok(start_topology(SchedulerConfig::new(&self.work_root), transport)?)
    }
}

/// Parses `args` (including the program name), runs the selected mode and
/// returns the process exit code.
pub fn run(args: impl IntoIterator<Item = std::ffi::OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    let cfg = match CliConfig::resolve(&cli.global) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("caravan: configuration error: {e}");
            return EXIT_CONFIG;
        }
    };
    let outcome = match &cli.mode {
        Mode::Sweep(a) => sweep(&cfg, a),
        Mode::Bench(a) => bench(&cfg, a),
        Mode::MoeaDemo(a) => moea_demo(&cfg, a),
        Mode::Serve(a) => serve(&cfg, a),
    };
    match outcome {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_FAILURE,
        Err(e) => {
            if let Some(c) = e.downcast_ref::<ConfigError>() {
                eprintln!("caravan: configuration error: {c}");
                return EXIT_CONFIG;
            }
            eprintln!("caravan: {e:#}");
            EXIT_FAILURE
        }
    }
}

fn summarize(report: &ExitReport) {
    eprintln!(
        "caravan: {} tasks created, {} finished, {} failed, {:.3}s",
        report.created,
        report.finished,
        report.failed,
        report.wall_time.as_secs_f64()
    );
    if let Some(e) = &report.program_error {
        eprintln!("caravan: engine program failed: {e}");
    }
    for e in &report.activity_errors {
        eprintln!("caravan: activity failed: {e}");
    }
    if let Some(e) = &report.scheduler_error {
        eprintln!("caravan: scheduler error: {e}");
    }
    if report.abnormal {
        eprintln!("caravan: abnormal termination");
    }
}

fn sweep(cfg: &CliConfig, args: &SweepArgs) -> anyhow::Result<bool> {
    let commands = args
        .values
        .iter()
        .map(|v| render_command(&args.cmd, &[*v], cfg.seed))
        .collect::<Result<Vec<_>, _>>()?;
    let mut sched = cfg.start_scheduler()?;
    let inputs = args.values.clone();
    let report = Engine::new().run(&mut sched, move |server| async move {
        for (cmd, v) in commands.into_iter().zip(inputs) {
            server.create_task_with_input(cmd, vec![v])?;
        }
        Ok(())
    });
    println!("task\tvalue\tstate\trc\tresults");
    for rec in &report.records {
        let results: Vec<String> = rec.results.iter().map(f64::to_string).collect();
        let state = if rec.state == TaskState::Finished { "finished" } else { "failed" };
        println!(
            "{}\t{}\t{state}\t{}\t{}",
            rec.id(),
            rec.spec.input.first().map_or(String::new(), f64::to_string),
            rec.rc.map_or("-".into(), |rc| rc.to_string()),
            results.join(" ")
        );
    }
    summarize(&report);
    Ok(report.is_success())
}

fn bench(cfg: &CliConfig, args: &BenchArgs) -> anyhow::Result<bool> {
    if !(args.scale.is_finite() && args.scale > 0.0) {
        return Err(ConfigError("--scale must be positive".into()).into());
    }
    let cases: &[Case] = match args.case {
        BenchCase::Tc1 => &[Case::Tc1],
        BenchCase::Tc2 => &[Case::Tc2],
        BenchCase::Tc3 => &[Case::Tc3],
        BenchCase::All => &[Case::Tc1, Case::Tc2, Case::Tc3],
    };
    let mut ok = true;
    for &case in cases {
        let mut w = Workload::new(case, cfg.consumers);
        w.time_scale = args.scale;
        w.seed = cfg.seed;
        if let Some(n) = args.tasks {
            w.n_total = n;
        }
        let report = if args.virtual_time {
            let mut sim = VirtualScheduler::new(cfg.topology()?, SimConfig::default(), SleepExecutor);
            run_benchmark(&w, &mut sim)?
        } else {
            let mut sched = cfg.start_scheduler()?;
            run_benchmark(&w, &mut sched)?
        };
        let name = format!("{case:?}").to_lowercase();
        let written = emit_report(&report, &cfg.out.join(&name), !args.no_svg)?;
        println!(
            "{name}: r_consumers={:.4} r_all={:.4} tasks={} consumers={} buffers={} makespan={:.4}s valid={}",
            report.rate.r_consumers,
            report.rate.r_all,
            report.timeline.len(),
            report.consumers,
            report.buffers,
            report.rate.makespan,
            report.valid
        );
        for p in written {
            log::info!("wrote {}", p.display());
        }
        if !report.valid || !report.exit.is_success() {
            summarize(&report.exit);
            ok = false;
        }
    }
    Ok(ok)
}

fn shell_quote(p: &Path) -> String {
    format!("'{}'", p.display().to_string().replace('\'', r"'\''"))
}

fn moea_demo(cfg: &CliConfig, args: &DemoArgs) -> anyhow::Result<bool> {
    let city = match &args.city {
        Some(p) => CityModel::load(p).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?,
        None => CityModel::desk(),
    };
    let mut config = demo::demo_config(cfg.seed);
    config.p_ini = args.p_ini;
    config.p_n = args.p_n;
    config.p_archive = args.p_archive;
    config.generations = args.generations;
    config.replicates = args.replicates;
    if args.tournament {
        config.truncation = Truncation::Tournament;
    }
    config.validate().map_err(|e| ConfigError(e.to_string()))?;

    std::fs::create_dir_all(&cfg.out)?;
    let city_path = std::path::absolute(cfg.out.join("city.json"))?;
    city.save(&city_path)?;

    let (log, report) = if args.virtual_time {
        let mut sim = VirtualScheduler::new(
            cfg.topology()?,
            SimConfig::default(),
            demo::virtual_evaluator(city.clone(), args.time_scale),
        );
        demo::run_demo(&mut sim, &city, config, "caravan-demo-sim")
    } else {
        let simulator = match &args.simulator {
            Some(p) => p.clone(),
            None => std::env::current_exe()?
                .parent()
                .context("locating the simulator")?
                .join("caravan-demo-sim"),
        };
        let program = format!(
            "{}={} {}={} {}",
            demo::CITY_ENV,
            shell_quote(&city_path),
            demo::TIME_SCALE_ENV,
            args.time_scale,
            shell_quote(&std::path::absolute(simulator)?)
        );
        let mut sched = cfg.start_scheduler()?;
        demo::run_demo(&mut sched, &city, config, &program)
    };
    summarize(&report);
    let Some(log) = log else {
        return Ok(false);
    };
    log.write_evaluations_csv(&cfg.out.join("evaluations.csv"))?;
    log.write_generations_csv(&cfg.out.join("generations.csv"))?;
    let mut w = csv::Writer::from_path(cfg.out.join("archive.csv"))?;
    w.write_record(["id", "rank", "f1", "f2", "f3"])?;
    for ind in &log.archive {
        let mut rec = vec![ind.id.to_string(), ind.rank.to_string()];
        rec.extend(ind.objectives.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;

    let a = log.archive_objectives();
    let f1: Vec<f64> = a.iter().map(|o| o[0]).collect();
    let f2: Vec<f64> = a.iter().map(|o| o[1]).collect();
    let best = f1.iter().copied().fold(f64::INFINITY, f64::min);
    println!(
        "evaluations={} archive={} best_f1={best:.3} corr(f1,f2)={}",
        log.evaluations.len(),
        a.len(),
        demo::pearson(&f1, &f2).map_or("n/a".into(), |r| format!("{r:.3}"))
    );
    Ok(report.is_success())
}

fn serve(cfg: &CliConfig, args: &ServeArgs) -> anyhow::Result<bool> {
    let mut sched = cfg.start_scheduler()?;
    let bridge = crate::protocol::bridge_run(&args.engine_cmd, &mut sched as &mut dyn Backend)?;
    summarize(&bridge.exit);
    Ok(bridge.exit.is_success() && bridge.child_status.is_none_or(|s| s == 0))
}
