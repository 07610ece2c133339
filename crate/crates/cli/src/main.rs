//! Command-line driver: memory tables, roofline tables, max-context solving,
//! pipeline simulation, planning, and numeric equivalence checks.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use headroom::memory::{footprint, max_context, MemoryReport};
use headroom::planner;
use headroom::roofline::{self, RooflineRow};
use headroom::runtime::{
    simulate_decode, simulate_prefill, verify_equivalence, RunMode, Runtime, SimTimeline,
};
use headroom::workload::{
    self, find_model, find_profile, HardwareSpec, ModelSpec, PolicyKind, GIB,
};
use headroom::Error;

/// Directory searched for `<name>.json`, `models/<name>.json`, and
/// `hardware/<name>.json` before the built-in catalogs.
const CONFIG_DIR_ENV: &str = "HEADROOM_CONFIG_DIR";

#[derive(Parser)]
#[command(name = "headroom", version, about = "KV-cache offload planning and simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Json,
    Csv,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PhaseArg {
    Prefill,
    Decode,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Simulated,
    Overlapped,
}

#[derive(Args)]
struct CommonArgs {
    /// Model name from the catalog or a path to a model JSON file.
    #[arg(long)]
    model: String,

    /// Hardware profile name or a path to a hardware JSON file.
    #[arg(long, default_value = "profile-a")]
    hw: String,

    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
}

#[derive(Subcommand)]
enum Command {
    /// Per-policy memory breakdown at a context length.
    Memory {
        #[command(flatten)]
        common: CommonArgs,
        /// Policy name, or `all` for the five-policy comparison table.
        #[arg(long, default_value = "all")]
        policy: String,
        /// Head-group size for the head policy.
        #[arg(long)]
        groups: Option<u64>,
        /// Context length in tokens (K = x1024, M = x1024^2).
        #[arg(long)]
        context: String,
        /// Prefill chunk in tokens; defaults to the planner's choice.
        #[arg(long)]
        chunk: Option<String>,
    },

    /// Attention roofline table for one hardware profile.
    Roofline {
        #[command(flatten)]
        common: CommonArgs,
        /// Emit (arithmetic intensity, attainable) pairs for plotting.
        #[arg(long)]
        plot: bool,
    },

    /// Solve the largest context that fits the memory budgets.
    Maxlen {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        policy: String,
        #[arg(long)]
        groups: Option<u64>,
        #[arg(long)]
        chunk: Option<String>,
        /// Device capacity override, GiB suffix required (e.g. 24GiB).
        #[arg(long)]
        gpu: Option<String>,
        /// Host capacity override, GiB suffix required (e.g. 512GiB).
        #[arg(long)]
        cpu: Option<String>,
        /// Framework overhead held back from the device budget.
        #[arg(long, default_value = "0GiB")]
        reserve: String,
    },

    /// Simulate the transfer/compute pipeline and export the timeline.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value = "adaptive")]
        policy: String,
        #[arg(long)]
        groups: Option<u64>,
        #[arg(long, value_enum, default_value_t = PhaseArg::Prefill)]
        phase: PhaseArg,
        #[arg(long)]
        context: String,
        #[arg(long)]
        chunk: Option<String>,
        /// Decode steps to simulate.
        #[arg(long, default_value_t = 1)]
        steps: u64,
        /// Simulated: virtual clock. Overlapped: real lanes, desk scale only.
        #[arg(long, value_enum, default_value_t = ModeArg::Simulated)]
        mode: ModeArg,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },

    /// Select chunk size and head grouping for a context.
    Plan {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        context: String,
        /// Device budget held back for framework overhead.
        #[arg(long)]
        reserve: Option<String>,
    },

    /// Run every policy numerically and check exact output equivalence.
    Verify {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        context: String,
        #[arg(long)]
        chunk: Option<String>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        decode_steps: u64,
        /// Comma-separated policies; defaults to every runnable policy.
        #[arg(long)]
        policies: Option<String>,
    },
}

/// Token counts: plain integers, or K / M suffixes for x1024 / x1024^2.
fn parse_tokens(s: &str) -> Result<u64, Error> {
    let t = s.trim();
    let (digits, mult) = match t.chars().last() {
        Some('k') | Some('K') => (&t[..t.len() - 1], 1024),
        Some('m') | Some('M') => (&t[..t.len() - 1], 1024 * 1024),
        _ => (t, 1),
    };
    let n: u64 = digits.trim().parse().map_err(|_| Error::InvalidSpec {
        field: "tokens",
        reason: format!("cannot parse `{s}` (expected e.g. 4096, 10K, 1M)"),
    })?;
    Ok(n * mult)
}

/// Byte quantities: GiB suffix only, fractional values allowed.
fn parse_gib(s: &str) -> Result<u64, Error> {
    let t = s.trim();
    let digits = t.strip_suffix("GiB").ok_or_else(|| Error::InvalidSpec {
        field: "bytes",
        reason: format!("`{s}` must carry a GiB suffix (e.g. 24GiB)"),
    })?;
    let v: f64 = digits.trim().parse().map_err(|_| Error::InvalidSpec {
        field: "bytes",
        reason: format!("cannot parse `{s}` as GiB"),
    })?;
    if !v.is_finite() || v < 0.0 {
        return Err(Error::InvalidSpec {
            field: "bytes",
            reason: format!("`{s}` must be a nonnegative GiB quantity"),
        });
    }
    Ok((v * GIB as f64).round() as u64)
}

fn config_dir_candidates(name: &str, sub: &str) -> Vec<PathBuf> {
    let mut out = Vec::new();
    if let Ok(dir) = std::env::var(CONFIG_DIR_ENV) {
        let dir = PathBuf::from(dir);
        out.push(dir.join(format!("{name}.json")));
        out.push(dir.join(sub).join(format!("{name}.json")));
    }
    out
}

fn resolve_model(arg: &str) -> Result<ModelSpec, Error> {
    if Path::new(arg).is_file() {
        return workload::load_model_spec(arg);
    }
    for path in config_dir_candidates(arg, "models") {
        if path.is_file() {
            return workload::load_model_spec(path);
        }
    }
    find_model(arg).ok_or_else(|| Error::InvalidSpec {
        field: "model",
        reason: format!(
            "`{arg}` is neither a file nor a known model ({})",
            workload::builtin_models()
                .iter()
                .map(|m| m.name.clone())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    })
}

fn resolve_hw(arg: &str) -> Result<HardwareSpec, Error> {
    if Path::new(arg).is_file() {
        return workload::load_hardware_spec(arg);
    }
    for path in config_dir_candidates(arg, "hardware") {
        if path.is_file() {
            return workload::load_hardware_spec(path);
        }
    }
    find_profile(arg).ok_or_else(|| Error::InvalidSpec {
        field: "hw",
        reason: format!("`{arg}` is neither a file nor a known profile (profile-a, profile-b)"),
    })
}

fn parse_policy(name: &str, groups: Option<u64>) -> Result<PolicyKind, Error> {
    let policy: PolicyKind = name.parse()?;
    Ok(match (policy, groups) {
        (PolicyKind::HeadOffload { .. }, Some(g)) => PolicyKind::HeadOffload { heads_per_group: g },
        (p, _) => p,
    })
}

fn gib_str(bytes: u64) -> String {
    format!("{:.3}", bytes as f64 / GIB as f64)
}

fn print_memory_reports(reports: &[MemoryReport], format: Format) {
    match format {
        Format::Csv => {
            println!("{}", MemoryReport::CSV_HEADER);
            for r in reports {
                println!("{}", r.csv_row());
            }
        }
        Format::Json => {
            println!("{}", serde_json::to_string_pretty(reports).expect("serializable"));
        }
        Format::Table => {
            println!(
                "{:<18} {:>9} {:>7} {:>9} {:>13} {:>11} {:>9} {:>9}",
                "policy", "context", "chunk", "weights", "kv_on_device", "activation", "total", "kv_total"
            );
            println!("{:<18} {:>9} {:>7} {:>9} {:>13} {:>11} {:>9} {:>9}",
                "", "tokens", "tokens", "GiB", "GiB", "GiB", "GiB", "GiB");
            for r in reports {
                println!(
                    "{:<18} {:>9} {:>7} {:>9} {:>13} {:>11} {:>9} {:>9}",
                    r.policy.to_string(),
                    r.context,
                    r.chunk,
                    gib_str(r.weights),
                    gib_str(r.kv_on_device),
                    gib_str(r.activation),
                    gib_str(r.total_on_device),
                    gib_str(r.kv_total),
                );
            }
        }
    }
}

fn print_roofline(rows: &[RooflineRow], format: Format, plot: bool) {
    if plot {
        println!("phase,kernel,offload,context,arithmetic_intensity,attainable");
        for row in rows {
            for p in [&row.regular, &row.offload] {
                let kernel = match p.kernel {
                    roofline::Kernel::FullLayer => "full-layer".to_string(),
                    roofline::Kernel::HeadWise { heads_per_group } => {
                        format!("head-wise({heads_per_group})")
                    }
                };
                println!(
                    "{},{},{},{},{:.1},{:.6e}",
                    format!("{:?}", p.phase).to_lowercase(),
                    kernel,
                    p.offload,
                    p.context,
                    p.arithmetic_intensity,
                    p.attainable
                );
            }
        }
        return;
    }
    match format {
        Format::Csv => {
            println!("{}", RooflineRow::CSV_HEADER);
            for row in rows {
                println!("{}", row.csv_row());
            }
        }
        Format::Json => {
            println!("{}", serde_json::to_string_pretty(rows).expect("serializable"));
        }
        Format::Table => {
            println!(
                "{:<8} {:<14} {:>8} {:>10} {:>10} {:>9} {:>10} {:>8} | {:>10} {:>9} {:>10} {:>8}",
                "phase", "kernel", "context", "ops", "mem", "AI", "flops", "bound", "off-mem", "off-AI", "off-flops", "bound"
            );
            for row in rows {
                let kernel = match row.regular.kernel {
                    roofline::Kernel::FullLayer => "full-layer".to_string(),
                    roofline::Kernel::HeadWise { heads_per_group } => {
                        format!("head-wise({heads_per_group})")
                    }
                };
                println!(
                    "{:<8} {:<14} {:>8} {:>10.3e} {:>10.3e} {:>9.1} {:>10.3e} {:>8} | {:>10.3e} {:>9.1} {:>10.3e} {:>8}",
                    format!("{:?}", row.regular.phase).to_lowercase(),
                    kernel,
                    row.regular.context,
                    row.regular.ops,
                    row.regular.bytes_moved,
                    row.regular.arithmetic_intensity,
                    row.regular.attainable,
                    row.regular.bound.to_string(),
                    row.offload.bytes_moved,
                    row.offload.arithmetic_intensity,
                    row.offload.attainable,
                    row.offload.bound.to_string(),
                );
            }
        }
    }
}

fn print_timeline(tl: &SimTimeline, format: Format) {
    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&tl.to_json()).unwrap()),
        Format::Csv => {
            println!("kind,stream,start,end,bytes,flops");
            let json = tl.to_json();
            for e in json["events"].as_array().unwrap() {
                println!(
                    "{},{},{},{},{},{}",
                    e["kind"].as_str().unwrap(),
                    e["stream"].as_str().unwrap_or(""),
                    e["start"],
                    e["end"],
                    e["bytes"].as_u64().map(|b| b.to_string()).unwrap_or_default(),
                    e["flops"].as_f64().map(|f| format!("{f:.6e}")).unwrap_or_default(),
                );
            }
        }
        Format::Table => println!("{}", tl.summary_line()),
    }
}

fn default_verify_policies(m: &ModelSpec) -> Vec<PolicyKind> {
    let mut policies = vec![
        PolicyKind::ChunkedPrefill,
        PolicyKind::LayerOffload,
        PolicyKind::HeadOffload { heads_per_group: 1 },
    ];
    if m.num_kv_heads > 1 {
        policies.push(PolicyKind::HeadOffload {
            heads_per_group: m.num_kv_heads,
        });
    }
    policies
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Memory {
            common,
            policy,
            groups,
            context,
            chunk,
        } => {
            let m = resolve_model(&common.model)?;
            let hw = resolve_hw(&common.hw)?;
            let context = parse_tokens(&context)?;
            let chunk = match chunk {
                Some(c) => parse_tokens(&c)?,
                None => planner::select_chunk(&m, &hw).min(context.max(1)),
            };
            let policies: Vec<PolicyKind> = if policy == "all" {
                PolicyKind::table_policies().to_vec()
            } else {
                vec![planner::resolve_policy(&m, &hw, parse_policy(&policy, groups)?, context)?]
            };
            let reports = policies
                .iter()
                .map(|&p| footprint(&m, &hw, p, context, chunk))
                .collect::<Result<Vec<_>, _>>()?;
            print_memory_reports(&reports, common.format);
        }

        Command::Roofline { common, plot } => {
            let m = resolve_model(&common.model)?;
            let hw = resolve_hw(&common.hw)?;
            let rows = roofline::standard_table(&m, &hw);
            print_roofline(&rows, common.format, plot);
        }

        Command::Maxlen {
            common,
            policy,
            groups,
            chunk,
            gpu,
            cpu,
            reserve,
        } => {
            let m = resolve_model(&common.model)?;
            let mut hw = resolve_hw(&common.hw)?;
            if let Some(gpu) = gpu {
                hw.device_capacity = parse_gib(&gpu)?;
            }
            if let Some(cpu) = cpu {
                hw.host_capacity = parse_gib(&cpu)?;
            }
            let reserve = parse_gib(&reserve)?;
            let chunk = match chunk {
                Some(c) => parse_tokens(&c)?,
                None => planner::select_chunk(&m, &hw),
            };
            let policy = parse_policy(&policy, groups)?;
            let policy = match policy {
                PolicyKind::Adaptive => PolicyKind::HeadOffload { heads_per_group: 1 },
                p => p,
            };
            let tokens = max_context(&m, &hw, policy, chunk, reserve)?;
            match common.format {
                Format::Json => println!(
                    "{}",
                    serde_json::json!({
                        "model": m.name,
                        "policy": policy.to_string(),
                        "chunk": chunk,
                        "reserve": reserve,
                        "max_context": tokens,
                    })
                ),
                _ => println!("{tokens}"),
            }
        }

        Command::Simulate {
            common,
            policy,
            groups,
            phase,
            context,
            chunk,
            steps,
            mode,
            seed,
        } => {
            let m = resolve_model(&common.model)?;
            let hw = resolve_hw(&common.hw)?;
            let context = parse_tokens(&context)?;
            let chunk = match chunk {
                Some(c) => parse_tokens(&c)?,
                None => planner::select_chunk(&m, &hw).min(context.max(1)),
            };
            let policy =
                planner::resolve_policy(&m, &hw, parse_policy(&policy, groups)?, context)?;
            let timeline = match mode {
                ModeArg::Simulated => match phase {
                    PhaseArg::Prefill => simulate_prefill(&m, &hw, policy, context, chunk)?,
                    PhaseArg::Decode => simulate_decode(&m, &hw, policy, context, steps)?,
                },
                ModeArg::Overlapped => {
                    let decode_steps = match phase {
                        PhaseArg::Prefill => 0,
                        PhaseArg::Decode => steps,
                    };
                    let mut rt = Runtime::new(
                        &m,
                        &hw,
                        policy,
                        context,
                        chunk,
                        decode_steps,
                        RunMode::Overlapped,
                        seed,
                    )?;
                    rt.prefill()?;
                    rt.decode(decode_steps)?;
                    rt.timeline().clone()
                }
            };
            print_timeline(&timeline, common.format);
        }

        Command::Plan {
            common,
            context,
            reserve,
        } => {
            let m = resolve_model(&common.model)?;
            let hw = resolve_hw(&common.hw)?;
            let context = parse_tokens(&context)?;
            let plan = match reserve {
                Some(r) => planner::plan_with_reserve(&m, &hw, context, parse_gib(&r)?)?,
                None => planner::plan(&m, &hw, context)?,
            };
            match common.format {
                Format::Table => {
                    println!("model          {}", m.name);
                    println!("context        {} tokens", plan.context);
                    println!("chunk          {} tokens", plan.chunk);
                    println!("policy         {}", plan.policy);
                    println!("head groups    {} ({} heads each)", plan.group_count, plan.heads_per_group);
                    println!("device total   {} GiB", gib_str(plan.feasibility.total_on_device));
                    println!("host kv        {} GiB", gib_str(plan.feasibility.kv_total));
                }
                _ => println!("{}", serde_json::to_string_pretty(&plan).expect("serializable")),
            }
        }

        Command::Verify {
            common,
            context,
            chunk,
            seed,
            decode_steps,
            policies,
        } => {
            let m = resolve_model(&common.model)?;
            let hw = resolve_hw(&common.hw)?;
            let context = parse_tokens(&context)?;
            let chunk = match chunk {
                Some(c) => parse_tokens(&c)?,
                None => (context / 4).max(1),
            };
            let policies = match policies {
                Some(list) => list
                    .split(',')
                    .map(|p| parse_policy(p.trim(), None))
                    .collect::<Result<Vec<_>, _>>()?,
                None => default_verify_policies(&m),
            };
            let report =
                verify_equivalence(&m, &hw, context, chunk, &policies, seed, decode_steps)?;
            match common.format {
                Format::Json => {
                    println!("{}", serde_json::to_string_pretty(&report).expect("serializable"))
                }
                _ => {
                    for d in &report.deviations {
                        println!("{:<18} max_dev {:.3e}", d.policy.to_string(), d.max_deviation);
                    }
                    println!("{}", report.status_line());
                }
            }
            if !report.pass {
                return Err(Error::InvalidState(format!(
                    "equivalence failed: max_dev {:.3e} exceeds {:.0e}",
                    report.max_deviation(),
                    report.tolerance
                )));
            }
        }
    }
    Ok(())
}

/// Die quietly when the read end of a pipe closes, like other line-oriented
/// tools.
#[cfg(unix)]
fn reset_sigpipe() {
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
}

#[cfg(not(unix))]
fn reset_sigpipe() {}

fn main() -> ExitCode {
    reset_sigpipe();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprintln!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = match &e {
                Error::Infeasible(_) | Error::CapacityExceeded(_) => 2,
                Error::InvalidState(msg) if msg.starts_with("equivalence failed") => 2,
                _ => 1,
            };
            eprintln!(
                "{}",
                serde_json::json!({ "error": e.kind(), "message": e.to_string() })
            );
            ExitCode::from(code)
        }
    }
}
