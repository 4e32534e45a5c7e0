use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use log::info;

use perpeft::data::Dataset;
use perpeft::encoder::EncoderModel;
use perpeft::grouping::GroupAssignment;
use perpeft::nn::Module;
use perpeft::peft::{attachment_param_count, count_parameters};
use perpeft::pipeline::{
    attention_analysis, generate_synthetic, group_users, run_baseline, Checkpoint, MethodRun,
    RecModel, ReportRow, RunConfig, RunReport, Split, SyntheticSpec,
};
use perpeft::recsys::{LossMode, Metrics, Projector, Sasrec};
use perpeft::{seed, Error, Result};

#[derive(Parser)]
#[command(
    name = "perpeft",
    version,
    about = "Group-personalized PEFT for multimodal sequential recommendation"
)]
struct Cli {
    /// TOML run configuration; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a planted-group synthetic dataset.
    GenData(GenData),
    /// Train a method and save its best checkpoint and test metrics.
    Train(Train),
    /// Cluster users from a Global PEFT checkpoint.
    Cluster(Cluster),
    /// Leave-one-out evaluation of a checkpoint.
    Evaluate(Evaluate),
    /// Trainable-parameter accounting.
    ParamsReport(ParamsReport),
    /// Intra- versus inter-group attention divergence.
    AttnJsd(AttnJsd),
    /// Combine metrics files into one table.
    Report(Report),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    items: Option<usize>,
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    peft: Option<String>,
    #[arg(long)]
    groups: Option<usize>,
    /// Epochs of the shared first stage.
    #[arg(long)]
    epochs: Option<usize>,
    /// Epochs of the method-specific second stage.
    #[arg(long)]
    personal_epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    wd: Option<f64>,
    #[arg(long)]
    loss_mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Run the full learning-rate × weight-decay grid and keep the best on validation.
    #[arg(long)]
    sweep: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct Cluster {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    groups: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Evaluate {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "20,30")]
    k: Vec<usize>,
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct ParamsReport {
    #[arg(long, default_value_t = 8)]
    groups: usize,
    #[arg(long)]
    peft: Option<usize>,
    #[arg(long)]
    projector: Option<usize>,
    #[arg(long)]
    sasrec: Option<usize>,
    #[arg(long)]
    transductive: Option<usize>,
    #[arg(long)]
    foundation: Option<usize>,
    /// Derive unspecified counts from this dataset and the run configuration.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct AttnJsd {
    #[arg(long)]
    data: PathBuf,
    /// One grouped checkpoint per seed.
    #[arg(long, num_args = 2.., required = true)]
    checkpoints: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Report {
    /// `NAME=metrics.json`, repeatable.
    #[arg(long = "run")]
    runs: Vec<String>,
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    jsd: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn base_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn apply(cfg: &mut RunConfig, o: &Overrides) -> Result<()> {
    if let Some(m) = &o.method {
        cfg.method = m.parse()?;
    }
    if let Some(k) = &o.peft {
        cfg.peft_kind = k.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
    }
    if let Some(g) = o.groups {
        cfg.groups = g;
    }
    if let Some(e) = o.epochs {
        cfg.global_epochs = e;
    }
    if let Some(e) = o.personal_epochs {
        cfg.personal_epochs = e;
    }
    if let Some(lr) = o.lr {
        cfg.learning_rate = lr;
    }
    if let Some(wd) = o.wd {
        cfg.weight_decay = wd;
    }
    if let Some(m) = &o.loss_mode {
        cfg.loss_mode = m.parse::<LossMode>()?;
    }
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    cfg.validate()
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn gen_data(cfg: &RunConfig, a: &GenData) -> Result<()> {
    let mut spec = SyntheticSpec::for_encoder(&cfg.encoder);
    spec.n_users = a.users.unwrap_or(spec.n_users);
    spec.n_items = a.items.unwrap_or(spec.n_items);
    spec.n_groups = a.groups.unwrap_or(spec.n_groups);
    spec.noise = a.noise.unwrap_or(spec.noise);
    spec.seed = a.seed.unwrap_or(cfg.seed);
    let data = generate_synthetic(&spec)?;
    fs::create_dir_all(&a.out)?;
    data.dataset.save(&a.out)?;
    write_json(&a.out.join("planted.json"), &data.user_groups)?;
    info!(
        "wrote {} users and {} items to {}",
        data.dataset.n_users(),
        data.dataset.n_items(),
        a.out.display()
    );
    Ok(())
}

fn train(cfg: RunConfig, a: &Train) -> Result<()> {
    let ds = Dataset::load(&a.data)?;
    let encoder = Arc::new(EncoderModel::build(&cfg.encoder)?);
    let candidates = if a.sweep { cfg.sweep() } else { vec![cfg] };
    let mut best: Option<(RunConfig, MethodRun)> = None;
    for c in candidates {
        info!(
            "training {} (lr {}, wd {})",
            c.method, c.learning_rate, c.weight_decay
        );
        let run = run_baseline(&c, &ds, Arc::clone(&encoder))?;
        if best
            .as_ref()
            .is_none_or(|(_, b)| run.outcome.best_val > b.outcome.best_val)
        {
            best = Some((c, run));
        }
    }
    let (cfg, run) = best.expect("at least one configuration");
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("run.toml"), cfg.to_toml())?;
    Checkpoint::from_model(&run.global.best, run.global.best_epoch, run.global.best_val)
        .save(&a.out.join("global.ckpt"))?;
    Checkpoint::from_model(
        &run.outcome.best,
        run.outcome.best_epoch,
        run.outcome.best_val,
    )
    .save(&a.out.join("best.ckpt"))?;
    if let Some(asg) = &run.assignment {
        asg.save(&a.out.join("assignment.json"), &ds)?;
    }
    if let Some(v4) = &run.v4 {
        write_json(&a.out.join("v4.json"), v4)?;
    }
    write_json(&a.out.join("history.json"), &run.outcome.history)?;
    write_json(&a.out.join("audit.json"), &run.outcome.audit)?;
    let metrics = run.outcome.best.evaluate(&ds, Split::Test, &cfg.ks())?;
    fs::write(a.out.join("metrics.json"), metrics.to_json())?;
    println!("{}", metrics.to_json());
    Ok(())
}

fn restore(data: &Path, checkpoint: &Path) -> Result<(Dataset, RecModel)> {
    let ds = Dataset::load(data)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let encoder = Arc::new(EncoderModel::build(&ckpt.meta.config.encoder)?);
    let model = ckpt.restore(&ds, encoder)?;
    Ok((ds, model))
}

fn cluster(a: &Cluster) -> Result<()> {
    let (ds, model) = restore(&a.data, &a.checkpoint)?;
    let mut cfg = model.config.clone();
    cfg.groups = a.groups.unwrap_or(cfg.groups);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    let asg: GroupAssignment = group_users(&cfg, &model, &ds)?;
    asg.save(&a.out, &ds)?;
    println!("group sizes {:?}", asg.sizes());
    Ok(())
}

fn evaluate(a: &Evaluate) -> Result<()> {
    let split = match a.split.as_str() {
        "test" => Split::Test,
        "valid" => Split::Valid,
        other => return Err(Error::Config(format!("unknown split '{other}'"))),
    };
    if a.k.is_empty() || a.k.contains(&0) {
        return Err(Error::Config("cutoffs must be positive".into()));
    }
    let (ds, model) = restore(&a.data, &a.checkpoint)?;
    println!("{}", model.evaluate(&ds, split, &a.k)?.to_json());
    Ok(())
}

fn params_report(cfg: &RunConfig, a: &ParamsReport) -> Result<()> {
    let derived = match &a.data {
        Some(dir) => {
            let ds = Dataset::load(dir)?;
            let encoder = EncoderModel::build(&cfg.encoder)?;
            let d = cfg.sasrec.dim;
            let sasrec = Sasrec::new(&cfg.sasrec, &mut seed::rng(0, "count"))?.param_count();
            Some((
                attachment_param_count(&encoder, cfg.peft_kind, cfg.peft_size()),
                Projector::count(2 * cfg.encoder.d_prime, cfg.projector_hidden, d),
                sasrec,
                ds.n_items() * d,
                encoder.param_count(),
            ))
        }
        None => None,
    };
    let pick = |given: Option<usize>, i: usize| -> Result<usize> {
        given
            .or_else(|| {
                derived.map(|t| match i {
                    0 => t.0,
                    1 => t.1,
                    2 => t.2,
                    3 => t.3,
                    _ => t.4,
                })
            })
            .ok_or_else(|| Error::Config("give every count or --data".into()))
    };
    let mut parts = vec![
        ("peft", pick(a.peft, 0)?),
        ("projector", pick(a.projector, 1)?),
        ("sasrec", pick(a.sasrec, 2)?),
        ("transductive", pick(a.transductive, 3)?),
    ];
    if let Some(f) = a.foundation.or(derived.map(|t| t.4)) {
        parts.push(("foundation", f));
    }
    let report = count_parameters(&parts, a.groups)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn attn_jsd(a: &AttnJsd) -> Result<()> {
    let ds = Dataset::load(&a.data)?;
    let ckpts = a
        .checkpoints
        .iter()
        .map(|p| Checkpoint::load(p))
        .collect::<Result<Vec<_>>>()?;
    let encoder = Arc::new(EncoderModel::build(&ckpts[0].meta.config.encoder)?);
    let models = ckpts
        .iter()
        .map(|c| c.restore(&ds, Arc::clone(&encoder)))
        .collect::<Result<Vec<_>>>()?;
    let modules = models
        .iter()
        .map(|m| {
            m.registry
                .iter()
                .map(|g| {
                    g.peft
                        .as_ref()
                        .ok_or_else(|| Error::State("checkpoint has no PEFT module".into()))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let report = attention_analysis(&encoder, &modules, ds.items())?;
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    println!(
        "intra {:.6} inter {:.6}",
        report.intra_mean, report.inter_mean
    );
    Ok(())
}

fn report(a: &Report) -> Result<()> {
    let mut rep = RunReport::default();
    for spec in &a.runs {
        let (name, path) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected NAME=PATH, got '{spec}'")))?;
        let metrics: Metrics = serde_json::from_str(&fs::read_to_string(path)?)?;
        rep.rows.push(ReportRow {
            method: name.to_string(),
            metrics,
        });
    }
    if let Some(p) = &a.params {
        rep.params = Some(serde_json::from_str(&fs::read_to_string(p)?)?);
    }
    if let Some(p) = &a.jsd {
        rep.jsd = Some(serde_json::from_str(&fs::read_to_string(p)?)?);
    }
    print!("{}", rep.to_table());
    if let Some(out) = &a.out {
        fs::write(out, rep.to_json()?)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = base_config(cli.config.as_deref())?;
    match &cli.command {
        Command::GenData(a) => gen_data(&cfg, a),
        Command::Train(a) => {
            apply(&mut cfg, &a.overrides)?;
            train(cfg, a)
        }
        Command::Cluster(a) => cluster(a),
        Command::Evaluate(a) => evaluate(a),
        Command::ParamsReport(a) => params_report(&cfg, a),
        Command::AttnJsd(a) => attn_jsd(a),
        Command::Report(a) => report(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
