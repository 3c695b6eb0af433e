use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use moemba::config::RunConfig;
use moemba::head::EvalReport;
use moemba::model::{count_flops, count_params, deviation_percent, MoembaModel, PAPER_FLOPS, PAPER_PARAMS};
use moemba::sigproc::{container, synth_dataset, DatasetSplit, RecordingSession, SplitPlan};
use moemba::tensor::Tape;
use moemba::trainer::{evaluate, PatchBank, Trainer};
use moemba::wtfm::{dwt2_haar, wtfm_forward};
use moemba::{Error, Result};

#[derive(Parser)]
#[command(name = "moemba", version, about = "Wavelet-modulated state-space mixture of experts for sEMG gesture classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-session recording set.
    Synth(SynthArgs),
    /// Filter, segment and split a recording set, reporting what each side holds.
    Preprocess(PreprocessArgs),
    /// Train a model and write a checkpoint plus per-epoch history.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out side of a split.
    Eval(EvalArgs),
    /// Print parameter and FLOP counts for a configuration.
    Count(CountArgs),
    /// Summarize an evaluation directory as Markdown.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Full-size architecture.
    Paper,
    /// Small model that trains in minutes on one core.
    Desk,
}

#[derive(Args)]
struct ConfigArgs {
    /// Named starting point applied before the config file.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Flat JSON configuration with dotted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a single key, e.g. `--set model.d_model=16`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self, flags: &[(&str, Option<String>)]) -> Result<RunConfig> {
        let base = match self.preset {
            Some(Preset::Desk) => RunConfig::desk(),
            Some(Preset::Paper) | None => RunConfig::default(),
        };
        self.resolve_from(base, flags)
    }

    /// Config file, then `--set` assignments, then dedicated flags, on top of `base`.
    fn resolve_from(&self, mut cfg: RunConfig, flags: &[(&str, Option<String>)]) -> Result<RunConfig> {
        if let Some(path) = &self.config {
            cfg = cfg.apply_json(&fs::read_to_string(path)?)?;
        }
        let mut assignments = self.sets.clone();
        assignments.extend(flags.iter().filter_map(|(key, value)| value.as_ref().map(|v| format!("{key}={v}"))));
        if assignments.is_empty() {
            return Ok(cfg);
        }
        cfg.set_all(&assignments)
    }
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    subjects: Option<usize>,
    #[arg(long)]
    sessions: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    /// Recordings per (subject, session, class).
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    /// Output container file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PreprocessArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Container file, or a directory of per-recording CSV files.
    #[arg(long)]
    data: PathBuf,
    /// inter-session or intra-session.
    #[arg(long)]
    protocol: Option<String>,
    /// Directory for the split table and config echo.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    protocol: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Continue from a checkpoint instead of initializing a new model.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Suppress per-epoch progress lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Defaults to the protocol the model was trained with.
    #[arg(long)]
    protocol: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the wavelet sub-bands of the first evaluated patch.
    #[arg(long)]
    dump_wavelets: bool,
}

#[derive(Args)]
struct CountArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Report deviations from the published reference counts.
    #[arg(long)]
    compare_paper: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory written by `eval`.
    #[arg(long)]
    eval: PathBuf,
    /// Training history CSV to summarize alongside.
    #[arg(long)]
    history: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) | Error::Domain { .. } => 1,
        Error::Data(_) | Error::Format(_) | Error::Io(_) | Error::Shape { .. } => 2,
        Error::NonFinite { .. } | Error::Numerical(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Count(a) => count(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn opt<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn quoted(v: &Option<String>) -> Option<String> {
    v.as_ref().map(|s| serde_json::Value::String(s.clone()).to_string())
}

fn write_out(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::write(dir.join(name), contents)?;
    Ok(())
}

fn prepare_dir(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_out(dir, "config.json", &cfg.to_json())
}

/// Read a container file, or every `*.csv` in a directory in name order.
fn load_recordings(path: &Path) -> Result<Vec<RecordingSession>> {
    if !path.is_dir() {
        return container::load(path);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("no CSV recordings in {}", path.display())));
    }
    files.iter().map(container::read_csv_recording).collect()
}

fn check_compatible(cfg: &RunConfig, recordings: &[RecordingSession]) -> Result<()> {
    let classes = recordings.iter().map(|r| r.label + 1).max().unwrap_or(0);
    if let Some(r) = recordings.iter().find(|r| r.channels() != cfg.model.electrodes) {
        return Err(Error::Config(format!(
            "data has {} channels but model.electrodes is {}",
            r.channels(),
            cfg.model.electrodes
        )));
    }
    if classes != cfg.model.classes {
        return Err(Error::Config(format!("data has {classes} classes but model.classes is {}", cfg.model.classes)));
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = a.config.resolve(&[
        ("synth.seed", opt(&a.seed)),
        ("synth.subjects", opt(&a.subjects)),
        ("synth.sessions", opt(&a.sessions)),
        ("synth.classes", opt(&a.classes)),
        ("synth.trials_per_class", opt(&a.trials)),
        ("synth.samples", opt(&a.samples)),
        ("synth.channels", opt(&a.channels)),
    ])?;
    let recordings = synth_dataset(&cfg.synth)?;
    let bytes = container::save(&a.out, &recordings)?;
    println!("recordings={}", recordings.len());
    println!("classes={}", cfg.synth.classes);
    println!("bytes={bytes}");
    println!("sha256={}", container::dataset_digest(&recordings)?);
    Ok(())
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    let cfg = a.config.resolve(&[("protocol", quoted(&a.protocol))])?;
    let recordings = load_recordings(&a.data)?;
    let plan = SplitPlan::new(&recordings, cfg.protocol)?;
    let split = DatasetSplit::build(&recordings, cfg.protocol, &cfg.preprocess)?;
    prepare_dir(&a.out, &cfg)?;
    let mut table = String::from("recording,subject,session,label,side,patches\n");
    for (side, idx, sets) in [("train", &plan.train, &split.train), ("test", &plan.test, &split.test)] {
        for (&i, set) in idx.iter().zip(sets) {
            let r = &recordings[i];
            table.push_str(&format!("{i},{},{},{},{side},{}\n", r.subject, r.session, r.label, set.len()));
        }
    }
    write_out(&a.out, "split.csv", &table)?;
    let patches = |s: &[moemba::sigproc::PatchSet]| s.iter().map(|p| p.len()).sum::<usize>();
    println!("protocol={}", cfg.protocol);
    println!("train_recordings={}", split.train.len());
    println!("test_recordings={}", split.test.len());
    println!("train_patches={}", patches(&split.train));
    println!("test_patches={}", patches(&split.test));
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let (cfg, mut trainer) = match &a.resume {
        Some(path) => {
            let mut trainer = Trainer::load(path)?;
            let base = RunConfig::from_json(&trainer.config_echo)?;
            if a.config.preset.is_some() {
                return Err(Error::Usage("--preset cannot be combined with --resume".into()));
            }
            let cfg = a.config.resolve_from(base, &train_flags(&a))?;
            if cfg.model != base.model || cfg.seed != base.seed {
                return Err(Error::Config("model settings and seed cannot change when resuming".into()));
            }
            trainer.train = cfg.train;
            (cfg, trainer)
        }
        None => {
            let cfg = a.config.resolve(&train_flags(&a))?;
            let trainer = Trainer::new(cfg.model, cfg.train, cfg.seed)?;
            (cfg, trainer)
        }
    };
    trainer.config_echo = cfg.to_json();
    let recordings = load_recordings(&a.data)?;
    check_compatible(&cfg, &recordings)?;
    let split = DatasetSplit::build(&recordings, cfg.protocol, &cfg.preprocess)?;
    prepare_dir(&a.out, &cfg)?;

    let quiet = a.quiet;
    let history = trainer.fit(&split, |r| {
        if !quiet {
            let val = r.val_acc.map(|v| format!(" val_acc={v:.4}")).unwrap_or_default();
            println!("epoch={} lr={:.3e} loss={:.4} train_acc={:.4}{val}", r.epoch, r.lr, r.train_loss, r.train_acc);
        }
    })?;
    trainer.save(a.out.join("model.memc"))?;
    write_out(&a.out, "history.csv", &history.to_csv())?;
    if let Some(last) = history.epochs.last() {
        println!("final_train_acc={:.4}", last.train_acc);
        if let Some(v) = last.val_acc {
            println!("final_val_acc={v:.4}");
        }
    }
    println!("checksum={:016x}", trainer.param_checksum());
    Ok(())
}

fn train_flags(a: &TrainArgs) -> Vec<(&'static str, Option<String>)> {
    vec![("protocol", quoted(&a.protocol)), ("seed", opt(&a.seed)), ("train.epochs", opt(&a.epochs))]
}

fn eval(a: EvalArgs) -> Result<()> {
    let trainer = Trainer::load(&a.model)?;
    let mut cfg = if trainer.config_echo.is_empty() {
        RunConfig { model: trainer.model.config, train: trainer.train, seed: trainer.seed, ..RunConfig::default() }
    } else {
        RunConfig::from_json(&trainer.config_echo)?
    };
    if let Some(p) = &a.protocol {
        cfg.protocol = p.parse()?;
    }
    let recordings = load_recordings(&a.data)?;
    check_compatible(&cfg, &recordings)?;
    let split = DatasetSplit::build(&recordings, cfg.protocol, &cfg.preprocess)?;
    let bank = PatchBank::from_sets(&split.test);
    let report = evaluate(&trainer.model, &bank, cfg.train.batch_size)?;

    prepare_dir(&a.out, &cfg)?;
    write_out(&a.out, "report.json", &report.to_json()?)?;
    write_out(&a.out, "confusion.csv", &report.confusion.to_csv())?;
    write_out(&a.out, "patch_confusion.csv", &report.patch_confusion.to_csv())?;
    write_out(&a.out, "roc.csv", &report.roc_csv())?;
    if a.dump_wavelets {
        write_out(&a.out, "wavelets.csv", &wavelet_dump(&trainer.model, &bank)?)?;
    }
    println!("signals={}", report.signals);
    println!("patches={}", report.patches);
    println!("accuracy={:.4}", report.total_accuracy);
    println!("balanced_accuracy={:.4}", report.balanced_accuracy);
    println!("patch_accuracy={:.4}", report.patch_accuracy);
    println!("patch_balanced_accuracy={:.4}", report.patch_balanced_accuracy);
    Ok(())
}

fn wavelet_dump(model: &MoembaModel, bank: &PatchBank) -> Result<String> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let patch = tape.constant(bank.patches[0].clone());
    let (_, trace) = wtfm_forward(&mut tape, &model.config.wtfm(), &vars.wtfm, patch)?;
    Ok(dwt2_haar(&tape.tensor(trace.fine))?.to_csv())
}

fn count(a: CountArgs) -> Result<()> {
    let cfg = a.config.resolve(&[])?;
    let params = count_params(&cfg.model) as u64;
    let flops = count_flops(&cfg.model, cfg.preprocess.window, cfg.model.electrodes);
    println!("params={params}");
    println!("flops={flops}");
    println!("window={}", cfg.preprocess.window);
    println!("electrodes={}", cfg.model.electrodes);
    if a.compare_paper {
        println!("paper_params={PAPER_PARAMS}");
        println!("params_deviation_pct={:+.2}", deviation_percent(params, PAPER_PARAMS));
        println!("paper_flops={PAPER_FLOPS}");
        println!("flops_deviation_pct={:+.2}", deviation_percent(flops, PAPER_FLOPS));
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let text = fs::read_to_string(a.eval.join("report.json"))?;
    let r: EvalReport = serde_json::from_str(&text).map_err(|e| Error::Format(format!("report.json: {e}")))?;
    let mut md = String::from("# Evaluation summary\n\n| metric | signal | patch |\n|---|---|---|\n");
    md.push_str(&format!("| accuracy | {:.4} | {:.4} |\n", r.total_accuracy, r.patch_accuracy));
    md.push_str(&format!("| balanced accuracy | {:.4} | {:.4} |\n", r.balanced_accuracy, r.patch_balanced_accuracy));
    md.push_str(&format!("\n{} signals, {} patches, {} classes, {} parameters, {} FLOPs per patch.\n", r.signals, r.patches, r.classes, r.param_count, r.flop_count));
    md.push_str("\n| class | AUC |\n|---|---|\n");
    for (c, auc) in r.auc.iter().enumerate() {
        let v = auc.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into());
        md.push_str(&format!("| {c} | {v} |\n"));
    }
    if let Some(path) = &a.history {
        let hist = fs::read_to_string(path)?;
        let rows: Vec<&str> = hist.lines().skip(1).filter(|l| !l.is_empty()).collect();
        if let Some(last) = rows.last() {
            let f: Vec<&str> = last.split(',').collect();
            if f.len() < 5 {
                return Err(Error::Format(format!("{}: malformed history row", path.display())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("{}: bad number {s:?}", path.display())));
            let (loss, acc) = (num(f[2])?, num(f[3])?);
            md.push_str(&format!("\nTraining: {} epochs, final loss {loss:.4}, final train accuracy {acc:.4}.\n", rows.len()));
        }
    }
    fs::write(a.eval.join("report.md"), &md)?;
    print!("{md}");
    Ok(())
}
