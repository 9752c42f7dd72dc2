use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use glean::checkpoint::Checkpoint;
use glean::config::RunConfig;
use glean::dataset::{
    build_dataset, denormalize, load_image, normalize, save_image, DatasetSpec, Manifest,
    PerturbConfig,
};
use glean::metrics::{evaluate, MetricsReport};
use glean::training::{checkpoint_due, train_loop, TrainState, HISTORY_HEADER};
use glean::{clean, GleanError, GleanModel, Tensor};

#[derive(Parser)]
#[command(name = "glean", version, about = "Predict and remove style cloaks from images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize original/perturbed pairs and their manifests.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 240)]
        pairs: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.1)]
        amplitude: f32,
        #[arg(long, default_value_t = 0.08)]
        f_lo: f32,
        #[arg(long, default_value_t = 0.25)]
        f_hi: f32,
    },
    /// Train from a key=value config; trailing KEY=VALUE pairs override it.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        overrides: Vec<String>,
    },
    /// Remove the predicted cloak from one PNG.
    Clean {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on every pair of a manifest.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Describe a checkpoint.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<GleanError> for Failure {
    fn from(e: GleanError) -> Self {
        match e {
            GleanError::Config(_) | GleanError::Shape(_) | GleanError::Contract(_) => {
                Failure::Usage(e.to_string())
            }
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Err(f) = configure_threads() {
        return report(f);
    }
    let result = match cli.command {
        Command::GenData {
            out,
            pairs,
            size,
            seed,
            amplitude,
            f_lo,
            f_hi,
        } => gen_data(
            &out,
            DatasetSpec {
                pairs,
                size,
                seed,
                perturb: PerturbConfig {
                    amplitude,
                    f_lo,
                    f_hi,
                },
            },
        ),
        Command::Train { config, overrides } => train(config.as_deref(), &overrides),
        Command::Clean { ckpt, input, out } => clean_cmd(&ckpt, &input, &out),
        Command::Eval {
            ckpt,
            manifest,
            out,
        } => eval(&ckpt, &manifest, &out),
        Command::Inspect { ckpt } => inspect(&ckpt),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(f),
    }
}

fn report(f: Failure) -> ExitCode {
    match f {
        Failure::Usage(msg) => {
            eprintln!("error: {msg}");
            eprintln!("run `glean --help` for usage");
            ExitCode::from(1)
        }
        Failure::Runtime(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn configure_threads() -> CmdResult {
    let Ok(v) = std::env::var("GLEAN_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("GLEAN_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(e.to_string()))
}

fn gen_data(out: &Path, spec: DatasetSpec) -> CmdResult {
    spec.perturb.validate()?;
    let manifest = build_dataset(out, &spec)?;
    let (train, val) = manifest.split();
    println!(
        "wrote {} pairs ({} train / {} val) to {}",
        manifest.len(),
        train.len(),
        val.len(),
        out.display()
    );
    println!("manifest hash: {}", manifest.hash());
    Ok(())
}

fn create_dir(dir: &Path) -> Result<(), GleanError> {
    fs::create_dir_all(dir).map_err(|e| GleanError::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<(), GleanError> {
    fs::write(path, text).map_err(|e| GleanError::io(path, e))
}

fn train(config: Option<&Path>, overrides: &[String]) -> CmdResult {
    let mut cfg = match config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(overrides)?;
    cfg.validate()?;

    let out = cfg.out_dir.clone();
    create_dir(&out)?;
    write(&out.join("effective.cfg"), &cfg.to_text())?;

    let manifest = match &cfg.manifest {
        Some(p) => Manifest::load(p)?,
        None => {
            let m = build_dataset(&out.join("data"), &cfg.data)?;
            println!("synthesized {} pairs under {}", m.len(), out.join("data").display());
            m
        }
    };
    let hash = manifest.hash();
    let (train_m, val_m) = manifest.split();
    let train_pairs = train_m.load_all()?;
    let val_pairs = val_m.load_all()?;

    let mut state = match &cfg.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let saved = ck.run_config()?;
            if saved.generator != cfg.generator || saved.discriminator != cfg.discriminator {
                return Err(Failure::Usage(format!(
                    "checkpoint {} was trained with a different architecture",
                    p.display()
                )));
            }
            let s = ck.train_state()?;
            println!("resuming from {} at epoch {}", p.display(), s.epoch);
            s
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.training.seed);
            TrainState::new(GleanModel::init(
                cfg.generator.build()?,
                cfg.discriminator.clone(),
                &mut rng,
            )?)
        }
    };

    let ckpt_dir = out.join("checkpoints");
    create_dir(&ckpt_dir)?;
    let history_path = out.join("history.csv");
    let mut history = vec![HISTORY_HEADER.to_string()];
    if cfg.resume.is_some() {
        if let Ok(text) = fs::read_to_string(&history_path) {
            history.extend(text.lines().skip(1).filter(|l| {
                l.split(',')
                    .next()
                    .and_then(|e| e.parse::<usize>().ok())
                    .is_some_and(|e| e <= state.epoch)
            }).map(str::to_string));
        }
    }
    write(&history_path, &(history.join("\n") + "\n"))?;

    println!(
        "training {} pairs ({} val) for epochs {}..{}",
        train_pairs.len(),
        val_pairs.len(),
        state.epoch + 1,
        cfg.training.epochs
    );
    let tcfg = cfg.training.clone();
    train_loop(&mut state, &train_pairs, &val_pairs, &tcfg, |s, rec| {
        let line = rec.csv_line();
        println!("{line}");
        history.push(line);
        write(&history_path, &(history.join("\n") + "\n"))?;
        if checkpoint_due(rec.epoch, &tcfg) {
            let ck = Checkpoint::from_state(s, &cfg, &hash);
            ck.save(&ckpt_dir.join(format!("epoch_{:04}.ckpt", rec.epoch)))?;
            ck.save(&out.join("last.ckpt"))?;
        }
        Ok(())
    })
    .map_err(|e| match e {
        GleanError::NonFinite(msg) => Failure::Runtime(format!(
            "training aborted: non-finite value: {msg}; last good checkpoint kept in {}",
            out.display()
        )),
        other => other.into(),
    })?;

    let report = evaluate(&state.model, &val_pairs)?;
    report.write_csv(&out.join("report.csv"))?;
    println!("{}", MetricsReport::format_row(&report.mean()));
    println!("final checkpoint: {}", out.join("last.ckpt").display());
    Ok(())
}

/// Sibling path `<stem>_cloak.png`.
fn cloak_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}_cloak.png"))
}

fn clean_cmd(ckpt: &Path, input: &Path, out: &Path) -> CmdResult {
    let model = Checkpoint::load(ckpt)?.model()?;
    let img = load_image(input)?;
    let x = normalize(&img);
    let cloak = model.predict_cloak(&x)?;
    let cleaned = denormalize(&clean(&x, &cloak)?);
    save_image(out, &cleaned)?;
    let r = model.generator.output_scale;
    let vis: Tensor = cloak.map(|c| (c + r) / (2.0 * r));
    let cloak_out = cloak_path(out);
    save_image(&cloak_out, &vis)?;
    println!("wrote {} and {}", out.display(), cloak_out.display());
    Ok(())
}

fn eval(ckpt: &Path, manifest: &Path, out: &Path) -> CmdResult {
    let model = Checkpoint::load(ckpt)?.model()?;
    let pairs = Manifest::load(manifest)?.load_all()?;
    let report = evaluate(&model, &pairs)?;
    report.write_csv(out)?;
    println!("{}", MetricsReport::format_row(&report.mean()));
    Ok(())
}

fn inspect(ckpt: &Path) -> CmdResult {
    let ck = Checkpoint::load(ckpt)?;
    println!("format version: {}", ck.version);
    println!("metadata:");
    for (k, v) in &ck.meta {
        println!("  {k} = {v}");
    }
    println!("tensors:");
    for (name, t) in &ck.tensors {
        println!("  {name} {:?}", t.shape());
    }
    let model = ck.model()?;
    let expected = model.generator.param_count() + model.discriminator.param_count();
    let total = ck.param_count();
    println!("generator parameters: {}", model.generator.param_count());
    println!("discriminator parameters: {}", model.discriminator.param_count());
    println!("total parameters: {total}");
    if total != expected {
        return Err(Failure::Runtime(format!(
            "checkpoint holds {total} parameters but its config implies {expected}"
        )));
    }
    Ok(())
}
