use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use plate_bench::adjudicate::{serve, Service};
use plate_bench::backend::{build_backends, load_backend_configs, Backend, CachePolicy, ResponseCache};
use plate_bench::forge::forge_dataset;
use plate_bench::harness::{prepare, run_experiment, ExperimentPlan};
use plate_bench::manifest::load_manifest;
use plate_bench::pipeline::{eval_multicar, run_manifest, AttributeFilter, PipelineConfig, DEFAULT_PAD};
use plate_bench::report::{compare_backends, heatmap_csv, summary_json, text_table};
use plate_core::forge::ForgeSpec;
use plate_core::prompts::builtin_prompts;

#[derive(Parser)]
#[command(name = "plate-bench", version, about = "License-plate recognition benchmark harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic plate dataset.
    Forge {
        #[arg(long, default_value_t = 600)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Box-blur radius in pixels.
        #[arg(long)]
        blur: Option<f64>,
        /// Gaussian noise sigma in gray levels.
        #[arg(long)]
        sigma: Option<f64>,
        /// Salt-and-pepper density.
        #[arg(long)]
        sp: Option<f64>,
        #[arg(long)]
        two_line_prob: Option<f64>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Compare run files: text table, heatmap CSV and JSON summary.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Also write report.txt, heatmap.csv and summary.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Backend configuration commands.
    Backends {
        #[command(subcommand)]
        command: BackendsCommand,
    },
    /// Multi-car detection, optional attribute filter, plate recognition.
    Pipeline {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        detect_backend: String,
        #[arg(long)]
        recognize_backend: String,
        #[arg(long)]
        color: Option<String>,
        #[arg(long)]
        model: Option<String>,
        #[arg(long, default_value = "backends.toml")]
        backends: PathBuf,
        /// Per-image results are appended here as JSON lines.
        #[arg(long, default_value = "pipeline.jsonl")]
        out: PathBuf,
        /// Directory for plate crops.
        #[arg(long)]
        crops: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_PAD)]
        pad: f64,
        #[arg(long, default_value_t = 4)]
        concurrency: usize,
    },
    /// Run an experiment plan, resuming any existing run file.
    Bench {
        #[arg(long)]
        plan: PathBuf,
    },
    /// Prompt catalog commands.
    Prompts {
        #[command(subcommand)]
        command: PromptsCommand,
    },
    /// Label adjudication service.
    Adjudicate {
        #[command(subcommand)]
        command: AdjudicateCommand,
    },
}

#[derive(Subcommand)]
enum BackendsCommand {
    /// Send a 1x1 probe image to every configured backend.
    Check {
        #[arg(long, default_value = "backends.toml")]
        config: PathBuf,
    },
}

#[derive(Subcommand)]
enum PromptsCommand {
    List,
}

#[derive(Subcommand)]
enum AdjudicateCommand {
    Serve {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value_t = IpAddr::V4(Ipv4Addr::LOCALHOST))]
        bind: IpAddr,
        /// Event log; defaults to `<manifest>.events.jsonl`.
        #[arg(long)]
        events: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode, String> {
    match cmd {
        Command::Forge {
            count,
            seed,
            out,
            blur,
            sigma,
            sp,
            two_line_prob,
            threads,
        } => {
            let mut spec = ForgeSpec {
                count,
                seed,
                ..ForgeSpec::default()
            };
            if let Some(v) = blur {
                spec.degrade.blur_radius_px = v;
            }
            if let Some(v) = sigma {
                spec.degrade.gaussian_sigma = v;
            }
            if let Some(v) = sp {
                spec.degrade.salt_pepper_density = v;
            }
            if let Some(v) = two_line_prob {
                spec.two_line_prob = v;
            }
            let m = forge_dataset(&spec, &out, threads).map_err(|e| e.to_string())?;
            println!("wrote {} images to {}", m.records.len(), out.display());
        }
        Command::Report { runs, out } => {
            let paths: Vec<&Path> = runs.iter().map(PathBuf::as_path).collect();
            let c = compare_backends(&paths)?;
            let table = text_table(&c);
            print!("{table}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|e| format!("{}: {e}", dir.display()))?;
                for (name, body) in [
                    ("report.txt", table),
                    ("heatmap.csv", heatmap_csv(&c)),
                    ("summary.json", summary_json(&c)),
                ] {
                    let p = dir.join(name);
                    std::fs::write(&p, body).map_err(|e| format!("{}: {e}", p.display()))?;
                }
            }
        }
        Command::Backends {
            command: BackendsCommand::Check { config },
        } => {
            let configs = load_backend_configs(&config)?;
            let backends = build_backends(&configs, None, CachePolicy::Off)?;
            let mut failed = 0;
            for (id, b) in &backends {
                match b.check() {
                    Ok(reply) => println!("{id}: ok ({} ms)", reply.latency_ms),
                    Err(e) => {
                        failed += 1;
                        println!("{id}: {e}");
                    }
                }
            }
            if failed > 0 {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Pipeline {
            manifest,
            detect_backend,
            recognize_backend,
            color,
            model,
            backends,
            out,
            crops,
            pad,
            concurrency,
        } => {
            if !(0.0..1.0).contains(&pad) {
                return Err("--pad must be within [0, 1)".into());
            }
            let configs = load_backend_configs(&backends)?;
            let available = build_backends(&configs, None, CachePolicy::Off)?;
            let pick = |id: &str| -> Result<Arc<dyn Backend>, String> {
                available.get(id).cloned().ok_or_else(|| format!("unknown backend id {id:?}"))
            };
            let (detect, recognize) = (pick(&detect_backend)?, pick(&recognize_backend)?);
            let m = load_manifest(&manifest).map_err(|e| e.to_string())?;
            let filter = AttributeFilter::new(color, model);
            let cfg = PipelineConfig {
                detect: detect.as_ref(),
                recognize: recognize.as_ref(),
                filter: filter.as_ref(),
                pad_frac: pad,
            };
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&out)
                .map_err(|e| format!("{}: {e}", out.display()))?;
            let mut w = BufWriter::new(file);
            let results = run_manifest(&cfg, &m, &manifest, concurrency, &mut w, crops.as_deref())
                .map_err(|e| format!("{}: {e}", out.display()))?;
            w.flush().map_err(|e| e.to_string())?;
            let failures = results.iter().filter(|r| r.failure.is_some()).count();
            println!("{} images, {failures} with a failed stage", results.len());
            if m.records.iter().all(|r| !r.truth_plates().is_empty()) {
                let s = eval_multicar(&results, &m)?;
                println!(
                    "images correct {}/{} ({}%), plates correct {}/{} ({}%)",
                    s.images_correct,
                    s.images_total,
                    s.image_percent(2),
                    s.plates_correct,
                    s.plates_total,
                    s.plate_percent(2)
                );
            }
        }
        Command::Bench { plan } => {
            let plan = ExperimentPlan::load(&plan).map_err(|e| e.to_string())?;
            let backends_file = plan
                .backends_file
                .clone()
                .ok_or("plan needs backends_file to resolve backend ids")?;
            let configs = load_backend_configs(&backends_file)?;
            let cache = match (&plan.cache_dir, plan.cache) {
                (Some(dir), p) if p != CachePolicy::Off => Some(Arc::new(ResponseCache::new(dir.clone()))),
                _ => None,
            };
            let available = build_backends(&configs, cache, plan.cache)?;
            let prepared = prepare(&plan, &available).map_err(|e| e.to_string())?;
            let s = run_experiment(&prepared, &plan.run_file).map_err(|e| e.to_string())?;
            println!(
                "{} cells: {} already done, {} run ({} ok, {} backend errors) -> {}",
                s.planned,
                s.resumed,
                s.executed,
                s.ok,
                s.errors,
                plan.run_file.display()
            );
        }
        Command::Prompts {
            command: PromptsCommand::List,
        } => {
            for p in builtin_prompts() {
                println!("{}\t{}", p.id, p.text.replace('\n', " "));
            }
        }
        Command::Adjudicate {
            command:
                AdjudicateCommand::Serve {
                    manifest,
                    port,
                    bind,
                    events,
                },
        } => {
            let events = events.unwrap_or_else(|| {
                let mut s = manifest.clone().into_os_string();
                s.push(".events.jsonl");
                s.into()
            });
            let svc = Arc::new(Service::open(&manifest, &events)?);
            let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
            rt.block_on(serve(svc, SocketAddr::new(bind, port))).map_err(|e| e.to_string())?;
        }
    }
    Ok(ExitCode::SUCCESS)
}
