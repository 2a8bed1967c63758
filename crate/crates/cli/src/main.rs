use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use ros_cli::bench::{self, BenchOpts};
use ros_cli::exit::{Failure, Result};
use ros_cli::synth::{self, Layout};
use ros_cli::workers::{self, DemoOpts, GroupOpts, Linger, Plane, RolloutOpts, TrainerOpts, TransportChoice};
use ros_sim::bench::Shape;

/// Reference-oriented tensor storage: server, demo workers and benchmarks.
///
/// Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 received
/// bytes differ from what was published, 4 a script violated an assertion.
#[derive(Parser)]
#[command(name = "ros", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a reference server until killed.
    Serve(ServeArgs),
    /// Publish synthetic weights for a number of steps.
    Trainer(TrainerArgs),
    /// Replicate the latest weights, follow updates and verify every byte.
    Rollout(RolloutArgs),
    /// Server, trainer and rollouts in one process.
    Demo(DemoArgs),
    /// Run a benchmark scenario or a script on the simulated network.
    Bench(BenchArgs),
}

#[derive(Args)]
struct ServeArgs {
    /// TOML config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    listen: Option<String>,
    /// Start as a backup. Backups start empty; clients repopulate them.
    #[arg(long)]
    backup: bool,
    #[arg(long)]
    heartbeat_timeout_ms: Option<u64>,
    #[arg(long)]
    no_pipeline: bool,
    #[arg(long)]
    no_smart_skipping: bool,
}

#[derive(Args, Clone)]
struct GroupArgs {
    /// Reference server address.
    #[arg(long, env = "ROS_SERVER")]
    server: String,
    /// Backup servers, tried in order after the primary.
    #[arg(long)]
    backup: Vec<String>,
    #[arg(long, default_value = "dc0")]
    dc: String,
    #[arg(long)]
    spot: bool,
    #[arg(long, default_value = "actor")]
    model: String,
    #[arg(long)]
    replica: String,
    #[command(flatten)]
    size: SizeArgs,
    /// Data transport; separate processes need `stream`.
    #[arg(long, default_value = "stream")]
    transport: TransportChoice,
    /// Address the peer service listens on.
    #[arg(long, default_value = "127.0.0.1:0")]
    bind: String,
    /// Retained version lags, e.g. `--retain 0`.
    #[arg(long, value_delimiter = ',')]
    retain: Vec<u32>,
}

#[derive(Args, Clone)]
struct SizeArgs {
    /// Group shape: 9B, 36B, 260B or 1T.
    #[arg(long)]
    preset: Option<String>,
    /// Multiplier applied to the preset's shard size.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    /// Shard size in bytes; overrides the preset.
    #[arg(long)]
    shard_bytes: Option<u64>,
    /// Shard count; overrides the preset.
    #[arg(long)]
    shards: Option<u32>,
    #[arg(long, default_value_t = 16)]
    tensors: usize,
}

impl SizeArgs {
    fn resolve(&self) -> Result<(u32, Layout)> {
        let (mut shards, mut bytes) = (1, 64 << 20);
        if let Some(name) = &self.preset {
            let p = synth::preset(name).ok_or_else(|| Failure::usage(format!("unknown preset {name:?}")))?;
            shards = p.shards;
            bytes = p.shard_bytes;
        }
        if self.scale.is_nan() || self.scale <= 0.0 {
            return Err(Failure::usage("--scale must be positive"));
        }
        bytes = (bytes as f64 * self.scale) as u64;
        if let Some(b) = self.shard_bytes {
            bytes = b;
        }
        if let Some(n) = self.shards {
            shards = n;
        }
        if shards == 0 || self.tensors == 0 || bytes < self.tensors as u64 {
            return Err(Failure::usage("need at least one shard and one byte per tensor"));
        }
        Ok((
            shards,
            Layout {
                shard_bytes: bytes,
                tensors: self.tensors,
            },
        ))
    }
}

impl GroupArgs {
    fn resolve(&self, default_retain: Vec<u32>) -> Result<GroupOpts> {
        let plane = match self.transport {
            TransportChoice::Stream => Plane::Stream(self.bind.clone()),
            other => {
                return Err(Failure::usage(format!(
                    "{other:?} transport cannot reach other processes; use --transport stream or `ros demo`"
                )))
            }
        };
        let (shards, layout) = self.size.resolve()?;
        let mut servers = vec![self.server.clone()];
        servers.extend(self.backup.iter().cloned());
        Ok(GroupOpts {
            servers,
            dc: self.dc.clone(),
            spot: self.spot,
            model: self.model.clone(),
            replica: self.replica.clone(),
            shards,
            layout,
            plane,
            retain: if self.retain.is_empty() { default_retain } else { self.retain.clone() },
        })
    }
}

#[derive(Args)]
struct TrainerArgs {
    #[command(flatten)]
    group: GroupArgs,
    #[arg(long, default_value_t = 1)]
    steps: u64,
    /// Version of the first step.
    #[arg(long, default_value_t = 0)]
    first: u64,
    /// Time each version stays published before the next training step.
    #[arg(long, default_value_t = 100)]
    rollout_time_ms: u64,
    /// Keep the last version published this long; without it, until stdin closes.
    #[arg(long)]
    linger_secs: Option<f64>,
    /// Corrupt one unit served after the first publish.
    #[arg(long)]
    corrupt_once: bool,
}

#[derive(Args)]
struct RolloutArgs {
    #[command(flatten)]
    group: GroupArgs,
    /// Follow `latest` until this version is held.
    #[arg(long)]
    until: Option<u64>,
    #[arg(long, default_value_t = 100)]
    poll_ms: u64,
    #[arg(long, default_value_t = 120)]
    timeout_secs: u64,
}

#[derive(Args)]
struct DemoArgs {
    #[arg(long, default_value = "mem")]
    transport: TransportChoice,
    #[arg(long, default_value = "actor")]
    model: String,
    #[command(flatten)]
    size: SizeArgs,
    #[arg(long, default_value_t = 3)]
    steps: u64,
    #[arg(long, default_value_t = 2)]
    rollouts: usize,
    #[arg(long, default_value_t = 50)]
    rollout_time_ms: u64,
}

#[derive(Args)]
struct BenchArgs {
    /// fanout, failure, crossdc, or a script file (.toml).
    #[arg(long)]
    scenario: String,
    /// Only `sim` is supported.
    #[arg(long, default_value = "sim")]
    transport: TransportChoice,
    /// Replica counts (fanout defaults to 1..8, crossdc to 4).
    #[arg(long, value_delimiter = ',')]
    n: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "on,off", value_parser = switch)]
    pipeline: Vec<bool>,
    /// Crash times as fractions of one shard transfer.
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.5,0.9,1.5")]
    inject_at: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "off,on", value_parser = switch)]
    smart_skip: Vec<bool>,
    #[arg(long, value_delimiter = ',', default_value = "off,on", value_parser = switch)]
    offload_seed: Vec<bool>,
    #[arg(long, default_value_t = 1000)]
    entries: usize,
    #[arg(long, default_value_t = 1_000_000)]
    entry_bytes: u64,
    /// Node rate in bytes per second.
    #[arg(long, default_value_t = 1_000_000_000)]
    rate: u64,
    /// Multiplier applied to the entry size.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    explore_bound: u128,
    /// Where failing script orders are written as replay scripts.
    #[arg(long)]
    replay_dir: Option<PathBuf>,
}

fn switch(s: &str) -> std::result::Result<bool, String> {
    match s {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        other => Err(format!("expected on or off, got {other:?}")),
    }
}

fn serve(a: ServeArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => ros_server::Config::from_file(p).map_err(|e| Failure::usage(e.to_string()))?,
        None => ros_server::Config::default(),
    };
    cfg.apply_env(|k| std::env::var(k).ok()).map_err(|e| Failure::usage(e.to_string()))?;
    if let Some(l) = a.listen {
        cfg.listen = l;
    }
    if let Some(ms) = a.heartbeat_timeout_ms {
        cfg.server.heartbeat_timeout = Duration::from_millis(ms);
    }
    cfg.server.pipeline &= !a.no_pipeline;
    cfg.server.smart_skipping &= !a.no_smart_skipping;
    let server = ros_server::runtime::spawn(&cfg)
        .map_err(|e| Failure::new(ros_cli::exit::Code::Runtime, format!("cannot listen on {}: {e}", cfg.listen)))?;
    let role = if a.backup { " backup" } else { "" };
    println!("listening {}{role}", server.local_addr());
    tracing::info!(target: "ros::serve", addr = %server.local_addr(), backup = a.backup, "serving");
    loop {
        std::thread::park();
    }
}

fn trainer(a: TrainerArgs) -> Result<()> {
    let linger = match a.linger_secs {
        Some(s) if s >= 0.0 => Linger::For(Duration::from_secs_f64(s)),
        Some(_) => return Err(Failure::usage("--linger-secs must not be negative")),
        None => Linger::UntilEof,
    };
    workers::trainer(TrainerOpts {
        group: a.group.resolve(Vec::new())?,
        first: a.first,
        steps: a.steps.max(1),
        rollout_time: Duration::from_millis(a.rollout_time_ms),
        linger,
        corrupt_once: a.corrupt_once,
    })
    .map(drop)
}

fn rollout(a: RolloutArgs) -> Result<()> {
    workers::rollout(RolloutOpts {
        group: a.group.resolve(vec![0])?,
        until: a.until,
        poll: Duration::from_millis(a.poll_ms),
        timeout: Duration::from_secs(a.timeout_secs),
    })
    .map(drop)
}

fn demo(a: DemoArgs) -> Result<()> {
    let (shards, layout) = a.size.resolve()?;
    workers::demo(DemoOpts {
        transport: a.transport,
        model: a.model,
        shards,
        layout,
        steps: a.steps.max(1),
        rollouts: a.rollouts,
        rollout_time: Duration::from_millis(a.rollout_time_ms),
    })
}

fn bench(a: BenchArgs) -> Result<()> {
    if a.transport != TransportChoice::Sim {
        return Err(Failure::usage("benchmarks run on the sim transport"));
    }
    if a.scale.is_nan() || a.scale <= 0.0 || a.entries == 0 || a.rate == 0 {
        return Err(Failure::usage("--scale, --entries and --rate must be positive"));
    }
    let entry_bytes = ((a.entry_bytes as f64 * a.scale) as u64).max(1);
    let out = bench::run(&BenchOpts {
        scenario: a.scenario,
        shape: Shape {
            entries: a.entries,
            entry_bytes,
            rate: a.rate,
        },
        n: a.n,
        pipeline: a.pipeline,
        inject_at: a.inject_at,
        smart_skip: a.smart_skip,
        offload_seed: a.offload_seed,
        explore_bound: a.explore_bound,
        replay_dir: a.replay_dir,
    })?;
    eprint!("{}", out.summary);
    match a.csv {
        Some(p) => std::fs::write(&p, &out.stdout)
            .map_err(|e| Failure::new(ros_cli::exit::Code::Runtime, format!("{}: {e}", p.display()))),
        None => {
            print!("{}", out.stdout);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("ROS_LOG").unwrap_or_else(|_| "info".into()),
        )
        .init();
    let cli = Cli::parse();
    let r = match cli.cmd {
        Cmd::Serve(a) => serve(a),
        Cmd::Trainer(a) => trainer(a),
        Cmd::Rollout(a) => rollout(a),
        Cmd::Demo(a) => demo(a),
        Cmd::Bench(a) => bench(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code as u8)
        }
    }
}
