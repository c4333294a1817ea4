//! Command-line driver: inspect morphologies and masks, generate data, train,
//! run ablations and compute interval statistics.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use morphpolicy::evaluation::{aggregate_report, wilson_interval_z, TrialOutcome, Z_95};
use morphpolicy::morphology::{adjacency_indicator, parse_robot_spec, shortest_path_distances, RobotMorphology};
use morphpolicy::policy::{checkpoint, MaskMode};
use morphpolicy::topo_attention::{
    adj_soft_bias, hard_bias, init_spd_table, layer_schedule, matrix_to_json, spd_bias, AdjSoftInit, AdjSoftParams,
    BiasInit, LayerSelector, DEFAULT_STRENGTH, DEFAULT_THETA_MAX,
};
use morphpolicy::training::{run_ablation, run_experiment, ExperimentConfig, Mixture, RunReport, Trajectory};
use ndarray::Array2;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "morphpolicy", version, about = "Morphology-aware policy heads")]
struct Cli {
    /// Directory for written artifacts.
    #[arg(long, global = true, env = "MORPHPOLICY_OUT", default_value = ".")]
    out_dir: PathBuf,
    /// Overrides every seed in the resolved configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a robot description's joints, edges and graph diameter.
    Graph(GraphArgs),
    /// Emit one layer's joint-to-joint attention bias as JSON.
    Mask(MaskArgs),
    /// Generate the synthetic datasets of an experiment.
    Gen(ConfigArgs),
    /// Train one experiment.
    Train(TrainArgs),
    /// Run every cell of an experiment's ablation grid.
    Ablate(AblateArgs),
    /// Wilson interval for k successes in n trials, or a report summary.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GraphArgs {
    /// JSON robot description, or `chain:J` / `star:J`.
    spec: String,
    /// Write adjacency and distance matrices to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MaskArgs {
    spec: String,
    #[arg(long)]
    mode: MaskMode,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    /// Table initialization for soft modes.
    #[arg(long)]
    init: Option<String>,
    #[arg(long, default_value_t = 0)]
    layer: usize,
    #[arg(long, default_value_t = DEFAULT_STRENGTH)]
    strength: f64,
    #[arg(long, default_value_t = DEFAULT_THETA_MAX)]
    theta_max: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment TOML.
    config: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    config: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct AblateArgs {
    config: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    /// Run cells one after another.
    #[arg(long)]
    serial: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, requires = "n", conflicts_with = "reports")]
    k: Option<u64>,
    #[arg(long, requires = "k")]
    n: Option<u64>,
    #[arg(long, default_value_t = Z_95)]
    z: f64,
    /// Report files to rank into a summary table.
    #[arg(long, num_args = 1..)]
    reports: Vec<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Command::Graph(a) => graph(&cli, a),
        Command::Mask(a) => mask(&cli, a),
        Command::Gen(a) => gen(&cli, a),
        Command::Train(a) => train(&cli, a),
        Command::Ablate(a) => ablate(&cli, a),
        Command::Eval(a) => eval(a),
    }
}

/// Prints to stdout, reporting a closed pipe as an error rather than a panic.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{text}")?;
    Ok(())
}

/// Writes through a sibling temporary file so readers never see a partial file.
fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut builder = tempfile::Builder::new();
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        builder.permissions(fs::Permissions::from_mode(0o644));
    }
    let mut tmp = builder.tempfile_in(dir)?;
    tmp.write_all(contents.as_bytes())?;
    if !contents.ends_with('\n') {
        tmp.write_all(b"\n")?;
    }
    tmp.persist(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn load_morphology(spec: &str) -> Result<RobotMorphology> {
    let builtin = |prefix: &str| {
        spec.strip_prefix(prefix).map(|j| {
            j.parse::<usize>()
                .with_context(|| format!("bad joint count in '{spec}'"))
        })
    };
    if let Some(j) = builtin("chain:") {
        return Ok(RobotMorphology::chain(spec, j?)?);
    }
    if let Some(j) = builtin("star:") {
        return Ok(RobotMorphology::star(spec, j?)?);
    }
    let path = Path::new(spec);
    if !path.exists() {
        bail!("spec not found: {spec}");
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {spec}"))?;
    parse_robot_spec(&text).with_context(|| spec.to_string())
}

fn nested<T: Copy + Into<Value>>(m: &Array2<T>) -> Value {
    Value::Array(
        m.rows()
            .into_iter()
            .map(|r| r.iter().map(|&x| x.into()).collect())
            .collect(),
    )
}

fn graph(cli: &Cli, a: &GraphArgs) -> Result<()> {
    let m = load_morphology(&a.spec)?;
    let spd = shortest_path_distances(&m);
    let edges: Vec<[usize; 2]> = m.edges().map(|(x, y)| [x, y]).collect();
    println!("name: {}", m.name());
    println!("joints: {}", m.num_joints());
    let listed: Vec<String> = edges.iter().map(|[x, y]| format!("{x}-{y}")).collect();
    println!("edges: {}", listed.join(" "));
    println!("d_max: {}", spd.d_max);
    for (j, d) in m.descriptors().iter().enumerate() {
        println!("joint {j}: {}", serde_json::to_string(d)?);
    }
    if let Some(out) = &a.out {
        let doc = json!({
            "spec": a.spec,
            "seed": cli.seed,
            "name": m.name(),
            "joints": m.num_joints(),
            "edges": edges,
            "d_max": spd.d_max,
            "adjacency": nested(adjacency_indicator(&m).matrix()),
            "spd": nested(&spd.matrix.mapv(|d| d as u64)),
        });
        write_atomic(&cli.out_dir.join(out), &serde_json::to_string_pretty(&doc)?)?;
    }
    Ok(())
}

fn mask_matrix(m: &RobotMorphology, a: &MaskArgs) -> Result<Array2<f64>> {
    if a.layer >= a.layers {
        bail!("--layer {} out of range for {} layers", a.layer, a.layers);
    }
    let adj = adjacency_indicator(m);
    if let Some(schedule) = a.mode.hard_schedule() {
        if a.init.is_some() {
            bail!("--init does not apply to hard mode {}", a.mode.as_str());
        }
        let masked = layer_schedule(schedule, a.layers)[a.layer] == LayerSelector::Masked;
        let n = m.num_joints();
        return Ok(if masked { hard_bias(&adj) } else { Array2::zeros((n, n)) });
    }
    let init = a.init.as_deref().unwrap_or("zero");
    let parse_err = || anyhow::anyhow!("unknown --init '{init}' for mode {}", a.mode.as_str());
    if let Some(variant) = a.mode.adj_variant() {
        let init: AdjSoftInit = parse_init(init).map_err(|_| parse_err())?;
        let p = AdjSoftParams::initialized(variant, init, a.layers, m.num_joints(), a.theta_max, a.strength);
        Ok(adj_soft_bias(&p, &adj, a.layer)?)
    } else {
        let init: BiasInit = parse_init(init).map_err(|_| parse_err())?;
        let spd = shortest_path_distances(m);
        let table = init_spd_table(init, a.layers, spd.d_max, a.strength);
        Ok(spd_bias(&table, &spd, a.layer)?)
    }
}

fn parse_init<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, serde_json::Error> {
    serde_json::from_value(Value::String(s.into()))
}

fn mask(cli: &Cli, a: &MaskArgs) -> Result<()> {
    let m = load_morphology(&a.spec)?;
    let bias = mask_matrix(&m, a)?;
    let doc = json!({
        "spec": a.spec,
        "seed": cli.seed,
        "mode": a.mode.as_str(),
        "layers": a.layers,
        "layer": a.layer,
        "init": a.init,
        "strength": a.strength,
        "theta_max": a.theta_max,
        "bias": matrix_to_json(&bias),
    });
    let text = serde_json::to_string_pretty(&doc)?;
    match &a.out {
        Some(out) => write_atomic(&cli.out_dir.join(out), &text),
        None => emit(&text),
    }
}

fn load_config(cli: &Cli, path: &Path, steps: Option<usize>) -> Result<(ExperimentConfig, PathBuf)> {
    if !path.exists() {
        bail!("config not found: {}", path.display());
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg = ExperimentConfig::from_toml(&text).with_context(|| path.display().to_string())?;
    if let Some(seed) = cli.seed {
        cfg.policy.seed = seed;
        cfg.train.seed = seed;
        for e in &mut cfg.embodiments {
            e.seed = seed;
        }
    }
    if let Some(steps) = steps {
        cfg.train.steps = steps;
    }
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    cfg.validate(&base).with_context(|| path.display().to_string())?;
    Ok((cfg, base))
}

fn gen(cli: &Cli, a: &ConfigArgs) -> Result<()> {
    let (cfg, base) = load_config(cli, &a.config, None)?;
    let mix = Mixture::generate(cfg.mixture(&base)?, cfg.data.train_size, cfg.data.val_size)?;
    let split = |items: &[Trajectory]| -> Vec<Value> {
        items
            .iter()
            .map(|(obs, act)| json!({ "obs": obs, "actions": nested(act.values()) }))
            .collect()
    };
    let embodiments: Vec<Value> = mix
        .data
        .iter()
        .map(|d| json!({ "name": d.name, "train": split(&d.train), "val": split(&d.val) }))
        .collect();
    let doc = json!({ "config": cfg, "embodiments": embodiments });
    let path = cli.out_dir.join(format!("{}.data.json", cfg.name));
    write_atomic(&path, &serde_json::to_string(&doc)?)?;
    println!("{}", path.display());
    Ok(())
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let (cfg, base) = load_config(cli, &a.config, a.steps)?;
    let out = run_experiment(&cfg, &base)?;
    let stem = cli.out_dir.join(&cfg.name);
    let with_ext = |ext: &str| PathBuf::from(format!("{}.{ext}", stem.display()));
    write_atomic(&with_ext("config.toml"), &cfg.to_toml())?;
    write_atomic(&with_ext("checkpoint.json"), &checkpoint::to_json(&out.model))?;
    write_atomic(&with_ext("metrics.csv"), &out.log.metrics_csv())?;
    write_atomic(&with_ext("validation.csv"), &out.log.validation_csv())?;
    write_atomic(&with_ext("report.json"), &serde_json::to_string_pretty(&out.report)?)?;
    println!("{} val_loss={:.6}", cfg.name, out.report.val_loss);
    Ok(())
}

fn ablate(cli: &Cli, a: &AblateArgs) -> Result<()> {
    let (cfg, base) = load_config(cli, &a.config, a.steps)?;
    let grid = cfg.expand_grid()?;
    for cell in &grid {
        cell.validate(&base).with_context(|| cell.name.clone())?;
    }
    let reports = run_ablation(&grid, &base, !a.serial)?;
    for r in &reports {
        let path = cli.out_dir.join(format!("{}.report.json", r.name));
        write_atomic(&path, &serde_json::to_string_pretty(r)?)?;
        println!("{} val_loss={:.6}", r.name, r.val_loss);
    }
    let table = aggregate_report(&reports)?;
    let stem = cli.out_dir.join(format!("{}.summary", cfg.name));
    write_atomic(&PathBuf::from(format!("{}.json", stem.display())), &table.to_json())?;
    write_atomic(&PathBuf::from(format!("{}.csv", stem.display())), &table.to_csv())?;
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    if let (Some(k), Some(n)) = (a.k, a.n) {
        let r = wilson_interval_z(TrialOutcome::new(k, n)?, a.z);
        println!("{}", r.percent_label());
        return Ok(());
    }
    if a.reports.is_empty() {
        bail!("eval needs --k and --n, or --reports");
    }
    let reports = a
        .reports
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<RunReport>(&text).with_context(|| p.display().to_string())
        })
        .collect::<Result<Vec<_>>>()?;
    let table = aggregate_report(&reports)?;
    print!("{}", table.to_csv());
    Ok(())
}
