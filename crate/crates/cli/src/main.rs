use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use sqj_core::bench::{bench_local, bench_remote, power_efficiency, render_report, NetworkProbe, ReportFormat};
use sqj_core::clock::MonotonicClock;
use sqj_core::config::AppConfig;
use sqj_core::graph::init::random_float_store;
use sqj_core::graph::load_labels;
use sqj_core::graph::topology::squeezenet_v1_1;
use sqj_core::preprocess::{normalize, normalize_quantize, prepare_ppm, RgbImage};
use sqj_core::quantizer::{calibrate, quantize_network, render_report as render_formats};
use sqj_core::service::{serve, Client, InferenceEngine, ServerConfig};
use sqj_core::sqj::{estimate_layer_cycles, CycleReport, SqjConfig};
use sqj_core::{load_weights, save_weights, ExecPlan, Mode, NetInput, NetworkDef};

#[derive(Parser)]
#[command(name = "sqj", version, about = "SqueezeNet inference on a fixed-point accelerator model")]
struct Cli {
    /// TOML file with [preprocess] and [power] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Serve classification requests over TCP.
    Serve {
        #[arg(long, default_value_t = 5555)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        topology: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        max_pending: usize,
        #[arg(long, default_value_t = Mode::QuantSqj)]
        mode: Mode,
    },
    /// Send one PPM image to a server and print the top five classes.
    Classify {
        #[command(flatten)]
        remote: Remote,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Calibrate float weights on a directory of PPM images and quantize them.
    Quantize {
        #[arg(long)]
        weights_in: PathBuf,
        #[arg(long)]
        calib_dir: PathBuf,
        #[arg(long)]
        weights_out: PathBuf,
        #[arg(long)]
        topology: Option<PathBuf>,
    },
    /// Write random float weights for a topology.
    InitWeights {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        topology: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Latency benchmarks, remote or per layer.
    #[command(subcommand)]
    Bench(BenchCmd),
    /// Print the analytic cycle estimate of every accelerated layer.
    Cycles {
        #[arg(long)]
        topology: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        mac_units: usize,
        #[arg(long, default_value_t = 100.0)]
        clock_mhz: f64,
    },
    /// Power efficiency of platform A over platform B from the configured watts.
    Power {
        #[arg(long)]
        a: String,
        #[arg(long)]
        b: String,
    },
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Time classify round trips against a running server.
    Remote {
        #[command(flatten)]
        remote: Remote,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 100)]
        iterations: usize,
        #[arg(long, default_value = "table")]
        format: ReportFormat,
    },
    /// Time each layer of in-process forward passes.
    Local {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        topology: Option<PathBuf>,
        #[arg(long, default_value_t = Mode::QuantSqj)]
        mode: Mode,
        /// Input image; a uniform grey image when omitted.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        iterations: usize,
        #[arg(long, default_value = "table")]
        format: ReportFormat,
    },
}

#[derive(Args)]
#[group(skip)]
struct Remote {
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 5555)]
    port: u16,
    /// Socket timeout in seconds.
    #[arg(long, default_value_t = 30)]
    timeout: u64,
}

impl Remote {
    fn client(&self) -> Client {
        Client::new(&self.host, self.port).with_timeout(Duration::from_secs(self.timeout))
    }
}

fn load_topology(path: Option<&Path>) -> Result<NetworkDef> {
    match path {
        None => Ok(squeezenet_v1_1()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            NetworkDef::parse(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn read_image(path: &Path, cfg: &AppConfig) -> Result<RgbImage> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    prepare_ppm(&bytes, &cfg.preprocess).with_context(|| format!("decoding {}", path.display()))
}

fn label_of(labels: &Option<Vec<String>>, class: usize) -> &str {
    labels.as_ref().and_then(|l| l.get(class)).map(String::as_str).unwrap_or("")
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => AppConfig::load(p)?,
        None => AppConfig::default(),
    };

    match cli.cmd {
        Cmd::Serve { port, bind, weights, topology, labels, max_pending, mode } => {
            let net = load_topology(topology.as_deref())?;
            let store = load_weights(&weights)?;
            if let Some(l) = &labels {
                let n = load_labels(l)?.len();
                if n != net.classes() {
                    bail!("{} has {n} labels, the network has {} classes", l.display(), net.classes());
                }
            }
            let engine = InferenceEngine::new(net, store, mode, cfg.preprocess.clone())?;
            let listener =
                TcpListener::bind((bind.as_str(), port)).with_context(|| format!("binding {bind}:{port}"))?;
            let handle = serve(listener, engine, ServerConfig { max_pending, ..Default::default() })?;
            info!("mode {mode}");
            println!("listening on {}", handle.local_addr());
            handle.join();
        }
        Cmd::Classify { remote, image, labels } => {
            let labels = labels.map(load_labels).transpose()?;
            let img = read_image(&image, &cfg)?;
            let c = remote.client().classify(&img, &MonotonicClock::new())?;
            for (rank, (class, p)) in c.entries.iter().enumerate() {
                println!("{} {:>4} {:.6} {}", rank + 1, class, p, label_of(&labels, *class as usize));
            }
            let t = c.timing;
            info!(
                "end-to-end {:.3} ms, inference {:.3} ms, transfer {:.3} ms",
                t.end_to_end.as_secs_f64() * 1e3,
                t.inference.as_secs_f64() * 1e3,
                t.net_transfer.as_secs_f64() * 1e3
            );
        }
        Cmd::Quantize { weights_in, calib_dir, weights_out, topology } => {
            let net = load_topology(topology.as_deref())?;
            let float = load_weights(&weights_in)?;
            let mut paths: Vec<PathBuf> = std::fs::read_dir(&calib_dir)
                .with_context(|| format!("listing {}", calib_dir.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
                .collect();
            paths.sort();
            if paths.is_empty() {
                bail!("no .ppm files in {}", calib_dir.display());
            }
            let samples = paths
                .iter()
                .map(|p| Ok(normalize(&read_image(p, &cfg)?, &cfg.preprocess)?))
                .collect::<Result<Vec<_>>>()?;
            info!("calibrating on {} images", samples.len());
            let stats = calibrate(&net, &float, &samples)?;
            let store = quantize_network(&net, &float, &stats)?;
            save_weights(&store, &weights_out)?;
            print!("{}", render_formats(&net, &store, &stats));
        }
        Cmd::InitWeights { out, topology, seed } => {
            let net = load_topology(topology.as_deref())?;
            save_weights(&random_float_store(&net, seed), &out)?;
            info!("wrote random float weights to {}", out.display());
        }
        Cmd::Bench(BenchCmd::Remote { remote, image, iterations, format }) => {
            let ppm = std::fs::read(&image).with_context(|| format!("reading {}", image.display()))?;
            let clock = MonotonicClock::new();
            let mut probe = NetworkProbe { client: remote.client(), ppm: &ppm, preprocess: &cfg.preprocess, clock: &clock };
            print!("{}", render_report(&bench_remote(&mut probe, iterations)?, format));
        }
        Cmd::Bench(BenchCmd::Local { weights, topology, mode, image, iterations, format }) => {
            let net = load_topology(topology.as_deref())?;
            let store = load_weights(&weights)?;
            store.check_against(&net)?;
            let pre = &cfg.preprocess;
            let img = match &image {
                Some(p) => read_image(p, &cfg)?,
                None => RgbImage::filled(pre.target_width, pre.target_height, [128, 128, 128])?,
            };
            let plan = ExecPlan::new(&net, mode);
            let clock = MonotonicClock::new();
            let report = match mode {
                Mode::Float => {
                    let x = normalize(&img, pre)?;
                    bench_local(&net, &store, &plan, NetInput::Float(&x), iterations, &clock)?
                }
                Mode::QuantNaive | Mode::QuantSqj => {
                    let fmt = store.input_format().context("weights are not quantized")?;
                    let x = normalize_quantize(&img, pre, fmt)?;
                    bench_local(&net, &store, &plan, NetInput::Quant(&x, fmt), iterations, &clock)?
                }
            };
            print!("{}", render_report(&report, format));
        }
        Cmd::Cycles { topology, mac_units, clock_mhz } => {
            let net = load_topology(topology.as_deref())?;
            let sqj = SqjConfig::new(mac_units, clock_mhz)?;
            let mut total = CycleReport::default();
            for spec in net.layers() {
                if let Some(est) = estimate_layer_cycles(spec, &sqj) {
                    println!("{:<10} {}", spec.label(), est.to_kv());
                    total = total.combine(&est, &sqj);
                }
            }
            println!("{:<10} {}", "total", total.to_kv());
        }
        Cmd::Power { a, b } => {
            println!("{:.4}", power_efficiency(&cfg.power, &a, &b)?);
        }
    }
    Ok(())
}
