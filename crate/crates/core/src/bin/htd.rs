use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use hidden_transfer::analysis::{
    ablation, cosine_trace, eval_draft_accuracy, forward_microbench, layer_sweep, width_ratio, write_bench_csv, write_sweep_csv, Method,
};
use hidden_transfer::config::{resolve, RunConfig, ENV_PREFIX};
use hidden_transfer::corpus::{bundled_tokens, decode, encode, ingest_dir, split_heldout};
use hidden_transfer::heads::{train_early_exit, train_medusa, ExitHeads, MedusaHeads};
use hidden_transfer::model::{pretrain_base, ModelWeights};
use hidden_transfer::transfer::{transfer_train, TransferBundle};
use hidden_transfer::treedec::{summary_table, DecodeMode, DecodeStats, Decoder};
use hidden_transfer::{Error, Result};

/// Hidden-transfer parallel decoding: training, decoding and analysis.
///
/// Settings resolve in order: built-in defaults, `--config`, `HTD_<KEY>`
/// environment variables, then `--seed`.
#[derive(Parser, Debug)]
#[command(name = "htd", version)]
struct Cli {
    /// Flat `key = value` run configuration.
    #[arg(long, global = true, env = "HTD_CONFIG")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for every artifact and report.
    #[arg(long, global = true, env = "HTD_OUT", default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrains the base model on the configured corpus.
    Pretrain,
    /// Trains a drafter on top of the frozen base model.
    Train {
        #[arg(long, value_enum)]
        method: TrainMethod,
    },
    /// Greedy generation from one prompt.
    Generate {
        #[arg(long, conflicts_with = "prompt_file")]
        prompt: Option<String>,
        /// Uses the first prompt of the file.
        #[arg(long)]
        prompt_file: Option<PathBuf>,
        #[arg(long, default_value = "transfer_tree")]
        mode: DecodeMode,
    },
    /// Decodes every prompt of a file under each mode and compares them.
    Bench {
        #[arg(long)]
        prompt_file: Option<PathBuf>,
        /// Modes to compare (repeatable); defaults to all.
        #[arg(long)]
        mode: Vec<DecodeMode>,
    },
    /// Runs one analysis and writes its report.
    Analyze {
        #[arg(long, value_enum)]
        which: Analysis,
        /// Prompts for the ablation decode runs; held-out windows otherwise.
        #[arg(long)]
        prompt_file: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
enum TrainMethod {
    Transfer,
    Medusa,
    EarlyExit,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Analysis {
    Accuracy,
    Cosine,
    Sweep,
    Microbench,
    Ablation,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::ArtifactMismatch(_) | Error::Format(_) => 2,
        Error::Diverged { .. } | Error::NonFinite(_) => 3,
        _ => 1,
    }
}

struct Run {
    config: RunConfig,
    out: PathBuf,
}

impl Run {
    fn new(cli: &Cli) -> Result<Self> {
        let mut config = match &cli.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let vars = std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX) && k != "HTD_CONFIG" && k != "HTD_OUT" && k != "HTD_LOG");
        config.apply_env(vars)?;
        if let Some(seed) = cli.seed {
            config.seed = seed;
        }
        fs::create_dir_all(&cli.out).map_err(Error::Io)?;
        println!("config {}", config.hash());
        Ok(Self {
            config,
            out: cli.out.clone(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        resolve(&self.out, name)
    }

    /// Writes `text` to `name` under the output directory, with the effective
    /// config beside it.
    fn write(&self, name: &str, text: &[u8]) -> Result<PathBuf> {
        let path = self.path(name);
        fs::write(&path, text).map_err(Error::Io)?;
        self.stamp(&path)?;
        Ok(path)
    }

    fn stamp(&self, artifact: &Path) -> Result<()> {
        let mut name = artifact.as_os_str().to_owned();
        name.push(".config");
        fs::write(PathBuf::from(name), self.config.to_text()).map_err(Error::Io)
    }

    fn corpus(&self) -> Result<Vec<u32>> {
        if self.config.corpus_dir.is_empty() {
            Ok(bundled_tokens())
        } else {
            ingest_dir(&self.config.corpus_dir)
        }
    }

    fn artifact<A>(&self, name: &str, what: &str, load: impl FnOnce(&Path) -> Result<A>) -> Result<A> {
        let path = self.path(name);
        if !path.is_file() {
            return Err(Error::ArtifactMismatch(format!("{what} not found at {}", path.display())));
        }
        load(&path)
    }

    fn base(&self) -> Result<ModelWeights<f32>> {
        self.artifact(&self.config.base_path, "base checkpoint", |p| ModelWeights::load(p))
    }

    fn transfer(&self, model: &ModelWeights<f32>) -> Result<TransferBundle<f32>> {
        let b = self.artifact(&self.config.transfer_path, "transfer bundle", |p| TransferBundle::load(p))?;
        b.check_base(model)?;
        Ok(b)
    }

    fn medusa(&self, model: &ModelWeights<f32>) -> Result<MedusaHeads<f32>> {
        let h = self.artifact(&self.config.medusa_path, "Medusa heads", |p| MedusaHeads::load(p))?;
        h.check_base(model)?;
        Ok(h)
    }

    fn exit(&self, model: &ModelWeights<f32>) -> Result<ExitHeads<f32>> {
        let h = self.artifact(&self.config.exit_path, "early-exit heads", |p| ExitHeads::load(p))?;
        h.check_base(model)?;
        Ok(h)
    }

    fn prompts(&self, flag: Option<&PathBuf>) -> Result<Option<Vec<Vec<u32>>>> {
        let path = match flag {
            Some(p) => p.clone(),
            None if !self.config.prompt_file.is_empty() => self.path(&self.config.prompt_file),
            None => return Ok(None),
        };
        let text = fs::read_to_string(&path).map_err(|e| Error::Config(format!("prompt file {}: {e}", path.display())))?;
        Ok(Some(
            text.lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| encode(l.as_bytes()))
                .collect(),
        ))
    }
}

fn curves_csv(curves: &[Vec<f64>]) -> String {
    let mut s = String::from("step,group,loss\n");
    for (g, curve) in curves.iter().enumerate() {
        for (i, loss) in curve.iter().enumerate() {
            s.push_str(&format!("{i},{},{loss:.6}\n", g + 1));
        }
    }
    s
}

fn cmd_pretrain(run: &Run) -> Result<()> {
    let corpus = run.corpus()?;
    let (train, _) = split_heldout(&corpus, run.config.heldout_fraction);
    let (model, report) = pretrain_base(train, &run.config.model_config(), &run.config.pretrain_config())?;
    let path = run.path(&run.config.base_path);
    model.save(&path)?;
    run.stamp(&path)?;
    run.write("pretrain_losses.csv", curves_csv(std::slice::from_ref(&report.losses)).as_bytes())?;
    println!(
        "base {} params {} loss {:.4} -> {:.4} hash {}",
        path.display(),
        model.param_count(),
        report.initial_loss,
        report.final_loss,
        &model.content_hash()[..16]
    );
    Ok(())
}

fn cmd_train(run: &Run, method: TrainMethod) -> Result<()> {
    let model = run.base()?;
    let corpus = run.corpus()?;
    let (train, _) = split_heldout(&corpus, run.config.heldout_fraction);
    let hyper = run.config.train_hyper();
    let tc = run.config.transfer_config()?;
    let (path, curves, label) = match method {
        TrainMethod::Transfer => {
            let (bundle, report) = transfer_train(&model, train, &tc, &hyper)?;
            let path = run.path(&run.config.transfer_path);
            bundle.save(&path)?;
            (path, report.curves, "transfer")
        }
        TrainMethod::Medusa => {
            let (heads, curves) = train_medusa(&model, train, run.config.k, &hyper)?;
            let path = run.path(&run.config.medusa_path);
            heads.save(&path)?;
            (path, curves, "medusa")
        }
        TrainMethod::EarlyExit => {
            let (heads, curves) = train_early_exit(&model, train, &tc.layers, &hyper)?;
            let path = run.path(&run.config.exit_path);
            heads.save(&path)?;
            (path, curves, "early_exit")
        }
    };
    run.stamp(&path)?;
    run.write(&format!("{label}_losses.csv"), curves_csv(&curves).as_bytes())?;
    let last: Vec<String> = curves.iter().map(|c| c.last().map_or("-".into(), |l| format!("{l:.4}"))).collect();
    println!("{label} {} final loss [{}]", path.display(), last.join(", "));
    Ok(())
}

fn decoder<'a>(
    run: &Run,
    model: &'a ModelWeights<f32>,
    bundle: Option<&'a TransferBundle<f32>>,
    heads: Option<&'a MedusaHeads<f32>>,
) -> Result<Decoder<'a, f32>> {
    let mut dec = Decoder::new(model).with_spec(run.config.tree(&run.out)?);
    if let Some(b) = bundle {
        dec = dec.with_transfer(b)?;
    }
    if let Some(h) = heads {
        dec = dec.with_medusa(h)?;
    }
    Ok(dec.with_mask_mode(run.config.mask_mode))
}

fn needs_transfer(modes: &[DecodeMode]) -> bool {
    modes
        .iter()
        .any(|m| matches!(m, DecodeMode::TransferTree | DecodeMode::TransferTwoPass))
}

fn cmd_generate(run: &Run, prompt: Option<&str>, prompt_file: Option<&PathBuf>, mode: DecodeMode) -> Result<()> {
    let tokens = match prompt {
        Some(p) => encode(p.as_bytes()),
        None => run
            .prompts(prompt_file)?
            .and_then(|p| p.into_iter().next())
            .ok_or_else(|| Error::Config("no prompt given".into()))?,
    };
    let model = run.base()?;
    let bundle = needs_transfer(&[mode]).then(|| run.transfer(&model)).transpose()?;
    let heads = (mode == DecodeMode::MedusaTree).then(|| run.medusa(&model)).transpose()?;
    let dec = decoder(run, &model, bundle.as_ref(), heads.as_ref())?;
    let out = dec.decode(&tokens, run.config.max_tokens, mode)?;
    let text = decode(&out.tokens);
    let record = out.stats.to_record(&mode.to_string());
    run.write(&format!("generate_{mode}.txt"), format!("{text}\n{record}\n").as_bytes())?;
    println!("{text}");
    println!("{record}");
    Ok(())
}

fn cmd_bench(run: &Run, prompt_file: Option<&PathBuf>, modes: &[DecodeMode]) -> Result<()> {
    let prompts = run
        .prompts(prompt_file)?
        .ok_or_else(|| Error::Config("bench needs a prompt file".into()))?;
    let mut modes: Vec<DecodeMode> = if modes.is_empty() {
        DecodeMode::ALL.to_vec()
    } else {
        modes.to_vec()
    };
    modes.retain(|&m| m != DecodeMode::Autoregressive);
    modes.insert(0, DecodeMode::Autoregressive);
    let mut rows: Vec<(String, DecodeStats)> = Vec::new();
    if !prompts.is_empty() {
        let model = run.base()?;
        let bundle = needs_transfer(&modes).then(|| run.transfer(&model)).transpose()?;
        let heads = modes.contains(&DecodeMode::MedusaTree).then(|| run.medusa(&model)).transpose()?;
        let dec = decoder(run, &model, bundle.as_ref(), heads.as_ref())?;
        let mut reference: Vec<Vec<u32>> = Vec::new();
        for &mode in &modes {
            let mut total = DecodeStats::default();
            for (i, p) in prompts.iter().enumerate() {
                let out = dec.decode(p, run.config.max_tokens, mode)?;
                if mode == DecodeMode::Autoregressive {
                    reference.push(out.tokens);
                } else if out.tokens != reference[i] {
                    return Err(Error::Invalid(format!("{mode} diverged from autoregressive output on prompt {i}")));
                }
                total.merge(&out.stats);
            }
            info!("{}", total.to_record(&mode.to_string()));
            rows.push((mode.to_string(), total));
        }
    }
    let table = summary_table(&rows);
    let records: String = rows.iter().map(|(l, s)| s.to_record(l) + "\n").collect();
    run.write("bench.txt", format!("{table}{records}").as_bytes())?;
    print!("{table}");
    Ok(())
}

/// Evenly spaced held-out windows used as prompts.
fn heldout_prompts(held: &[u32], count: usize, len: usize) -> Vec<Vec<u32>> {
    if held.len() < len {
        return Vec::new();
    }
    let span = held.len() - len;
    (0..count).map(|i| held[i * span / count.max(1)..][..len].to_vec()).collect()
}

fn cmd_analyze(run: &Run, which: Analysis, prompt_file: Option<&PathBuf>) -> Result<()> {
    let c = &run.config;
    let model = run.base()?;
    let corpus = run.corpus()?;
    let (train, held) = split_heldout(&corpus, c.heldout_fraction);
    let opts = c.eval_options();
    let mut buf = Vec::new();
    let name = match which {
        Analysis::Accuracy => {
            let bundle = run.transfer(&model)?;
            let medusa = run.medusa(&model)?;
            let exit = run.exit(&model)?;
            let methods = [
                Method::Transfer(&bundle, c.mask_mode),
                Method::Medusa(&medusa),
                Method::EarlyExit(&exit),
                Method::Random,
            ];
            let report = eval_draft_accuracy(&model, held, &methods, &opts)?;
            report.write_csv(&mut buf)?;
            "accuracy.csv"
        }
        Analysis::Cosine => {
            let bundle = run.transfer(&model)?;
            cosine_trace(&model, &bundle, held, &opts)?.write_csv(&mut buf)?;
            "cosine.csv"
        }
        Analysis::Sweep => {
            let template = c.transfer_config()?;
            let lower = (c.sweep_step == 2).then(|| template.layers[0]);
            let candidates: Vec<usize> = if c.sweep_layers.is_empty() {
                (lower.map_or(1, |l| l + 1)..=c.n_layers).collect()
            } else {
                c.sweep_layers.clone()
            };
            let rows = layer_sweep(
                &model,
                train,
                held,
                c.sweep_step,
                &candidates,
                lower,
                &template,
                &c.train_hyper(),
                &opts,
            )?;
            write_sweep_csv(&rows, &opts.top_k, &mut buf)?;
            "sweep.csv"
        }
        Analysis::Microbench => {
            let rows = forward_microbench(&model, &c.bench_cache_lengths, &c.bench_widths, c.bench_trials, c.seed)?;
            write_bench_csv(&rows, &mut buf)?;
            let (lo, hi) = (
                c.bench_widths.iter().copied().min().unwrap_or(1),
                c.bench_widths.iter().copied().max().unwrap_or(1),
            );
            for (cache, ratio) in width_ratio(&rows, lo, hi) {
                println!("cache {cache}: width {hi} / width {lo} = {ratio:.3}");
            }
            "microbench.csv"
        }
        Analysis::Ablation => {
            let bundle = run.transfer(&model)?;
            let prompts = match run.prompts(prompt_file)? {
                Some(p) => p,
                None => heldout_prompts(held, 20, 32),
            };
            let report = ablation(&model, &bundle, held, &prompts, c.max_tokens, &c.tree(&run.out)?, &opts)?;
            report.write_csv(&mut buf)?;
            println!("step-1 max difference between modes: {:e}", report.step1_max_diff);
            "ablation.csv"
        }
    };
    let path = run.write(name, &buf)?;
    std::io::stdout().write_all(&buf)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let run = Run::new(&cli)?;
    match &cli.command {
        Command::Pretrain => cmd_pretrain(&run),
        Command::Train { method } => cmd_train(&run, *method),
        Command::Generate { prompt, prompt_file, mode } => cmd_generate(&run, prompt.as_deref(), prompt_file.as_ref(), *mode),
        Command::Bench { prompt_file, mode } => cmd_bench(&run, prompt_file.as_ref(), mode),
        Command::Analyze { which, prompt_file } => cmd_analyze(&run, *which, prompt_file.as_ref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("HTD_LOG", "info")).init();
    let args: Vec<OsString> = std::env::args_os().collect();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
