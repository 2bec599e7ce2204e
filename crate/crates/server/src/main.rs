use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use tokio::net::TcpListener;
use tracing_subscriber::EnvFilter;

use diffserve_core::pipelines::OptimizationConfig;
use diffserve_server::backend::{Backend, LocalBackend, StubBackend};
use diffserve_server::cluster::{
    health_loop, probe_all, Autoscaler, ClusterConfig, ProcessSpawner, RouterBackend, WorkerStatus, WorkerTable,
};
use diffserve_server::schema::Limits;
use diffserve_server::{bench, serve, zoo, AppState, Mode, ServerConfig};

/// Toy diffusion inference server. Without a subcommand, serves the HTTP API.
#[derive(Parser)]
#[command(name = "diffserve", version, args_conflicts_with_subcommands = true)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,
    #[command(flatten)]
    serve: ServeArgs,
}

#[derive(Subcommand)]
enum Command {
    /// Write the toy model zoo (bundles, adapters, registry) to a directory.
    Init {
        #[arg(long, env = "DIFFSERVE_MODELS_DIR", default_value = "models")]
        models_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Overwrite an existing zoo.
        #[arg(long)]
        force: bool,
    },
    /// Latency and memory benchmarks.
    #[command(subcommand)]
    Bench(BenchCommand),
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Baseline vs optimized; writes <out>.txt and <out>.json.
    Run {
        /// TOML workload file; the reference workload when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = diffserve_core::perfbench::DEFAULT_REPEATS)]
        repeats: usize,
        #[arg(long, default_value = "bench_report")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "DIFFSERVE_HOST", default_value = "127.0.0.1")]
    host: String,
    #[arg(long, env = "DIFFSERVE_PORT", default_value_t = 8000)]
    port: u16,
    #[arg(long, env = "DIFFSERVE_MODELS_DIR", default_value = "models")]
    models_dir: PathBuf,
    #[arg(long, env = "DIFFSERVE_OUTPUT_DIR", default_value = "outputs")]
    output_dir: PathBuf,
    /// Jobs run at once; defaults to the CPU count (64 for a router).
    #[arg(long, env = "DIFFSERVE_CONCURRENCY")]
    concurrency: Option<usize>,
    /// Jobs allowed to wait; one more is refused with 503.
    #[arg(long, env = "DIFFSERVE_QUEUE_SIZE", default_value_t = 16)]
    queue_size: usize,
    #[arg(long, env = "DIFFSERVE_MODE", value_enum, default_value = "single")]
    mode: Mode,
    #[arg(long, env = "DIFFSERVE_MAX_IMAGE_NUM", default_value_t = 4)]
    max_image_num: usize,
    #[arg(long, env = "DIFFSERVE_TASK_TTL_S", default_value_t = 600.0)]
    task_ttl_s: f64,
    /// Router mode: TOML with worker port range, static workers and scaling policy.
    #[arg(long, env = "DIFFSERVE_CLUSTER_CONFIG")]
    cluster_config: Option<PathBuf>,
    /// Router mode: static worker addresses (host:port), comma separated.
    #[arg(long, env = "DIFFSERVE_WORKERS", value_delimiter = ',')]
    workers: Vec<String>,
    /// Run every optimization switch off.
    #[arg(long, env = "DIFFSERVE_NO_OPTIMIZE")]
    no_optimize: bool,
    /// Replace the engine with a fixed-latency stub (cluster testing).
    #[arg(long, hide = true)]
    stub_latency_ms: Option<u64>,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_env("DIFFSERVE_LOG").unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        None => run_server(cli.serve),
        Some(Command::Init {
            models_dir,
            seed,
            force,
        }) => run_init(&models_dir, seed, force),
        Some(Command::Bench(BenchCommand::Run { config, repeats, out })) => run_bench(config, repeats, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run_init(dir: &std::path::Path, seed: u64, force: bool) -> Result<(), String> {
    if zoo::is_initialized(dir) && !force {
        return Err(format!("{} already holds a zoo (use --force to overwrite)", dir.display()));
    }
    let reg = zoo::init(dir, seed).map_err(|e| e.to_string())?;
    println!("wrote {} models to {}", reg.models.len(), dir.display());
    Ok(())
}

fn run_bench(config: Option<PathBuf>, repeats: usize, out: &std::path::Path) -> Result<(), String> {
    let cfg = match config {
        Some(p) => bench::BenchConfig::load(&p)?,
        None => bench::BenchConfig::default(),
    };
    let cmp = bench::run(&cfg, repeats).map_err(|e| e.to_string())?;
    let (txt, json) = bench::write_report(&cmp, out).map_err(|e| e.to_string())?;
    print!("{}", cmp.render_table());
    println!("wrote {} and {}", txt.display(), json.display());
    Ok(())
}

fn run_server(args: ServeArgs) -> Result<(), String> {
    let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    rt.block_on(async move {
        let listener = TcpListener::bind((args.host.as_str(), args.port))
            .await
            .map_err(|e| format!("bind {}:{}: {e}", args.host, args.port))?;
        let addr = listener.local_addr().map_err(|e| e.to_string())?;
        let mut config = ServerConfig {
            mode: args.mode,
            concurrency: args.concurrency.unwrap_or_else(diffserve_server::app::default_concurrency),
            queue_size: args.queue_size,
            output_dir: args.output_dir.clone(),
            task_ttl: Duration::from_secs_f64(args.task_ttl_s.max(0.0)),
            limits: Limits {
                max_image_num: args.max_image_num,
                ..Limits::default()
            },
        };
        let mut background = Vec::new();
        let state = match args.mode {
            Mode::Single | Mode::Worker => {
                let backend: Arc<dyn Backend> = match args.stub_latency_ms {
                    Some(ms) => Arc::new(StubBackend::new(&addr.to_string(), Duration::from_millis(ms))),
                    None => Arc::new(local_backend(&args)?),
                };
                AppState::new(backend, config)
            }
            Mode::Router => {
                config.concurrency = args.concurrency.unwrap_or(64);
                let mut cc = match &args.cluster_config {
                    Some(p) => ClusterConfig::load(p)?,
                    None => ClusterConfig::default(),
                };
                cc.workers.extend(args.workers.iter().cloned());
                cc.validate()?;
                let table = Arc::new(WorkerTable::new());
                for w in &cc.workers {
                    table.add(w, WorkerStatus::Unhealthy);
                }
                let router = RouterBackend::new(Arc::clone(&table));
                probe_all(&router, cc.probe_timeout()).await;
                let state = AppState::new(router.clone(), config);
                background.push(tokio::spawn(health_loop(router, cc.health_interval(), cc.probe_timeout())));
                if cc.autoscale {
                    let exe = std::env::current_exe().map_err(|e| e.to_string())?;
                    let mut worker_args: Vec<String> = vec![
                        "--models-dir".into(),
                        args.models_dir.display().to_string(),
                        "--output-dir".into(),
                        args.output_dir.display().to_string(),
                    ];
                    worker_args.extend(cc.worker_args.iter().cloned());
                    let spawner = Arc::new(ProcessSpawner::new(
                        exe,
                        &cc.worker_host,
                        cc.worker_port_start..=cc.worker_port_end,
                        worker_args,
                    ));
                    let scaler = Autoscaler::new(table, spawner, cc.policy.clone(), Arc::clone(&state.admission));
                    background.push(tokio::spawn(scaler.run(cc.health_interval())));
                }
                state
            }
        };
        println!("listening on {addr}");
        let _ = std::io::stdout().flush();
        tracing::info!(%addr, mode = args.mode.as_str(), "serving");
        let shutdown = shutdown_signal();
        let out = serve(listener, state, shutdown).await.map_err(|e| e.to_string());
        for task in background {
            task.abort();
        }
        out
    })
}

/// Ctrl-C, or SIGTERM on unix. Dropping the autoscaler on the way out stops
/// the workers it spawned.
async fn shutdown_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        match signal(SignalKind::terminate()) {
            Ok(mut term) => {
                tokio::select! {
                    _ = tokio::signal::ctrl_c() => {}
                    _ = term.recv() => {}
                }
            }
            Err(_) => {
                let _ = tokio::signal::ctrl_c().await;
            }
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
}

fn local_backend(args: &ServeArgs) -> Result<LocalBackend, String> {
    if !zoo::is_initialized(&args.models_dir) {
        tracing::info!(dir = %args.models_dir.display(), "no registry found; writing the toy zoo");
        zoo::init(&args.models_dir, 0).map_err(|e| e.to_string())?;
    }
    let opts = if args.no_optimize {
        OptimizationConfig::default()
    } else {
        OptimizationConfig::all_on()
    };
    LocalBackend::open(&args.models_dir, opts).map_err(|e| e.to_string())
}
