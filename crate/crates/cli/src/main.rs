use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Serialize;

use orthros::bench::{self, BenchTarget};
use orthros::config::RunConfig;
use orthros::data::{self, CorpusConfig, Sample};
use orthros::decode::{self, Algorithm, DecodeConfig};
use orthros::error::{Error, Result};
use orthros::eval;
use orthros::losses::Objective;
use orthros::model::ModelParams;
use orthros::train::{self, TrainConfig};

/// Speech translation with non-autoregressive decoders and parallel
/// autoregressive rescoring, on a synthetic corpus.
#[derive(Parser)]
#[command(name = "orthros", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic speech-translation corpus (train/valid/eval JSONL).
    GenData(GenDataArgs),
    /// Train a model and write per-epoch checkpoints, a step log and the averaged model.
    Train(TrainArgs),
    /// Replace training targets with a teacher model's beam outputs.
    Distill(DistillArgs),
    /// Decode a dataset and write one JSON hypothesis record per line.
    Decode(DecodeArgs),
    /// Score decoded hypotheses against references.
    Eval(EvalArgs),
    /// Time decoding at batch size 1 against a baseline configuration.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = CorpusConfig::default().seed)]
    seed: u64,
    /// Training samples.
    #[arg(long, default_value_t = CorpusConfig::default().n_samples)]
    n: usize,
    #[arg(long, default_value_t = 200)]
    n_valid: usize,
    #[arg(long, default_value_t = 200)]
    n_eval: usize,
    #[arg(long, default_value_t = CorpusConfig::default().vocab_size)]
    vocab_size: usize,
    #[arg(long, default_value_t = CorpusConfig::default().len_range.0)]
    min_len: usize,
    #[arg(long, default_value_t = CorpusConfig::default().len_range.1)]
    max_len: usize,
    /// Fewest frames emitted per source token.
    #[arg(long, default_value_t = CorpusConfig::default().repeat_range.0)]
    min_repeat: usize,
    #[arg(long, default_value_t = CorpusConfig::default().repeat_range.1)]
    max_repeat: usize,
    #[arg(long, default_value_t = CorpusConfig::default().noise_std)]
    noise_std: f64,
    #[arg(long, default_value_t = CorpusConfig::default().frame_dim)]
    frame_dim: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration file; takes precedence over --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in configuration: ar_desk, cmlm_desk, ctc_desk, ctc_cmlm_desk,
    /// orthros_cmlm_desk, orthros_ctc_desk, paper_scale.
    #[arg(long, default_value = "orthros_cmlm_desk")]
    preset: String,
    /// Override one key, e.g. --set train.epochs=5 (repeatable).
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory holding train.jsonl and valid.jsonl.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().seed)]
    seed: u64,
    /// ar, cmlm, ctc, orthros_cmlm, orthros_ctc, ctc_cmlm, smart.
    #[arg(long, default_value = "orthros_cmlm")]
    objective: String,
}

#[derive(Args)]
struct DistillArgs {
    /// Teacher checkpoint with an AR decoder.
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    beam: usize,
}

#[derive(Args)]
struct SearchArgs {
    /// ar_beam, ctc_greedy, ctc_beam, mask_predict, ctc_cmlm.
    #[arg(long, default_value = "mask_predict")]
    algorithm: String,
    /// Refinement iterations.
    #[arg(long = "T", default_value_t = DecodeConfig::default().iterations)]
    iterations: usize,
    /// Length beam (mask_predict) or n-best size (ctc_beam).
    #[arg(long = "l", default_value_t = DecodeConfig::default().length_beam)]
    length_beam: usize,
    /// AR beam width.
    #[arg(long, default_value_t = DecodeConfig::default().beam_width)]
    beam: usize,
    /// Confidence above which ctc_cmlm keeps a CTC token unmasked.
    #[arg(long, default_value_t = DecodeConfig::default().p_thres)]
    p_thres: f64,
    /// Pick the candidate with the best AR decoder score.
    #[arg(long)]
    rescore: bool,
    /// Collapse adjacent repeated tokens.
    #[arg(long)]
    dedup: bool,
    /// Re-predict every position each iteration, not only masked ones.
    #[arg(long)]
    update_all: bool,
    /// Length cap for ar_beam; defaults to the model's max_target_len.
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Hypothesis JSONL output.
    #[arg(long)]
    out: PathBuf,
    /// Take the [decode] section of this file as the base configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    search: SearchArgs,
    /// Keep every candidate in the records (needed for oracle BLEU).
    #[arg(long)]
    keep_candidates: bool,
    /// Utterances encoded together.
    #[arg(long, default_value_t = 16)]
    encode_batch: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    hyps: PathBuf,
    /// Dataset JSONL with the references.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write per-sentence rows as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    search: SearchArgs,
    /// Baseline checkpoint; defaults to --model.
    #[arg(long)]
    baseline_model: Option<PathBuf>,
    #[arg(long, default_value = "ar_beam")]
    baseline_algorithm: String,
    #[arg(long, default_value_t = 4)]
    baseline_beam: usize,
    #[arg(long, default_value_t = bench::DEFAULT_RUNS)]
    runs: usize,
    /// Only utterances with at least this many target tokens.
    #[arg(long, default_value_t = 0)]
    min_len: usize,
    /// Cap on the number of utterances timed.
    #[arg(long, default_value_t = 50)]
    limit: usize,
}

fn given(m: &ArgMatches, id: &str) -> bool {
    matches!(m.value_source(id), Some(ValueSource::CommandLine))
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

fn load_run_config(c: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::preset(&c.preset)?,
    };
    for s in &c.overrides {
        cfg.set(s)?;
    }
    Ok(cfg)
}

fn search_config(base: DecodeConfig, a: &SearchArgs, m: &ArgMatches) -> Result<DecodeConfig> {
    let mut cfg = base;
    if given(m, "algorithm") {
        cfg.algorithm = a.algorithm.parse()?;
    }
    if given(m, "iterations") {
        cfg.iterations = a.iterations;
    }
    if given(m, "length_beam") {
        cfg.length_beam = a.length_beam;
    }
    if given(m, "beam") {
        cfg.beam_width = a.beam;
    }
    if given(m, "p_thres") {
        cfg.p_thres = a.p_thres;
    }
    cfg.rescore |= a.rescore;
    cfg.dedup |= a.dedup;
    cfg.update_all |= a.update_all;
    if a.max_len.is_some() {
        cfg.max_len = a.max_len;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn base_decode(config: &Option<PathBuf>) -> Result<DecodeConfig> {
    Ok(match config {
        Some(p) => RunConfig::load(p)?.decode,
        None => DecodeConfig::default(),
    })
}

/// Rejects data whose frames or token ids do not fit the model.
fn check_data(params: &ModelParams, samples: &[Sample]) -> Result<()> {
    let c = &params.config;
    for s in samples {
        if s.frames.shape()[1] != c.frame_dim {
            return Err(usage(format!(
                "sample {} has frame_dim {} but the model expects {}",
                s.id,
                s.frames.shape()[1],
                c.frame_dim
            )));
        }
        if s.tgt.iter().chain(&s.src).any(|&t| t >= c.vocab_size) || s.tgt.len() > c.max_target_len {
            return Err(usage(format!("sample {} does not fit the model vocabulary or length", s.id)));
        }
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

#[derive(Serialize)]
struct GenDataEcho<'a> {
    data: &'a CorpusConfig,
    n_valid: usize,
    n_eval: usize,
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    if a.n == 0 || a.n_valid == 0 || a.n_eval == 0 {
        return Err(usage("--n, --n-valid and --n-eval must be positive"));
    }
    let cfg = CorpusConfig {
        seed: a.seed,
        n_samples: a.n + a.n_valid + a.n_eval,
        vocab_size: a.vocab_size,
        len_range: (a.min_len, a.max_len),
        repeat_range: (a.min_repeat, a.max_repeat),
        noise_std: a.noise_std,
        frame_dim: a.frame_dim,
    };
    let all = data::gen_corpus(&cfg)?;
    let (tr, rest) = all.split_at(a.n);
    let (va, ev) = rest.split_at(a.n_valid);
    std::fs::create_dir_all(&a.out)?;
    data::save_dataset(tr, &a.out.join("train.jsonl"))?;
    data::save_dataset(va, &a.out.join("valid.jsonl"))?;
    data::save_dataset(ev, &a.out.join("eval.jsonl"))?;
    let echo = GenDataEcho {
        data: &CorpusConfig { n_samples: a.n, ..cfg },
        n_valid: a.n_valid,
        n_eval: a.n_eval,
    };
    std::fs::write(a.out.join("config.toml"), toml::to_string(&echo).expect("corpus config serializes"))?;
    log::info!("wrote {} / {} / {} samples to {}", tr.len(), va.len(), ev.len(), a.out.display());
    Ok(())
}

fn run_train(a: &TrainArgs, m: &ArgMatches) -> Result<()> {
    let mut cfg = load_run_config(&a.config)?;
    if given(m, "epochs") {
        cfg.train.epochs = a.epochs;
    }
    if given(m, "seed") {
        cfg.train.seed = a.seed;
    }
    if given(m, "objective") {
        cfg.train.objective = a.objective.parse::<Objective>()?;
    }
    cfg.validate()?;
    let train_set = data::load_dataset(&a.data.join("train.jsonl"))?;
    let valid_set = data::load_dataset(&a.data.join("valid.jsonl"))?;
    let params = ModelParams::init(&cfg.model, cfg.train.seed)?;
    check_data(&params, &train_set)?;
    check_data(&params, &valid_set)?;
    cfg.echo(&a.out)?;
    let out = train::train(params, &train_set, &valid_set, &cfg.train, &cfg.loss, &a.out, &mut |l| {
        if l.step % 50 == 0 {
            log::info!("epoch {} step {} lr {:.3e} loss {:.4}", l.epoch, l.step, l.lr, l.loss_total);
        }
    })?;
    log::info!(
        "{} steps; averaged {} checkpoints into {}",
        out.steps,
        cfg.train.n_avg.min(out.checkpoints.len()),
        a.out.join("model.ckpt").display()
    );
    Ok(())
}

fn distill(a: &DistillArgs) -> Result<()> {
    let teacher = ModelParams::load(&a.teacher)?;
    let samples = data::load_dataset(&a.data)?;
    check_data(&teacher, &samples)?;
    let (out, kept) = train::seqkd_distill(&teacher, &samples, a.beam)?;
    data::save_dataset(&out, &a.out)?;
    log::info!("distilled {} samples ({kept} kept their original target)", out.len());
    Ok(())
}

fn run_decode(a: &DecodeArgs, m: &ArgMatches) -> Result<()> {
    let cfg = search_config(base_decode(&a.config)?, &a.search, m)?;
    let params = ModelParams::load(&a.model)?;
    let samples = data::load_dataset(&a.data)?;
    check_data(&params, &samples)?;
    let records = decode::decode_dataset(&params, &samples, &cfg, a.keep_candidates, a.encode_batch)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    decode::write_records(&records, &a.out)?;
    log::info!("decoded {} utterances with {}", records.len(), cfg.algorithm.name());
    Ok(())
}

fn run_eval(a: &EvalArgs) -> Result<()> {
    let records = decode::read_records(&a.hyps)?;
    let refs: BTreeMap<u64, Vec<usize>> = data::load_dataset(&a.data)?.into_iter().map(|s| (s.id, s.tgt)).collect();
    let report = eval::evaluate(&records, &refs)?;
    write_json(&a.out, &report)?;
    if let Some(csv) = &a.csv {
        report.save_csv(csv)?;
    }
    match report.oracle_bleu {
        Some(o) => println!("BLEU {:.2}  exact {:.3}  oracle {:.2}", report.corpus_bleu, report.exact_match, o),
        None => println!("BLEU {:.2}  exact {:.3}", report.corpus_bleu, report.exact_match),
    }
    Ok(())
}

fn run_bench(a: &BenchArgs, m: &ArgMatches) -> Result<()> {
    let cfg = search_config(base_decode(&a.config)?, &a.search, m)?;
    let params = ModelParams::load(&a.model)?;
    let baseline_params = match &a.baseline_model {
        Some(p) => ModelParams::load(p)?,
        None => params.clone(),
    };
    let baseline_cfg = DecodeConfig {
        algorithm: a.baseline_algorithm.parse::<Algorithm>()?,
        beam_width: a.baseline_beam,
        ..DecodeConfig::default()
    };
    let samples: Vec<Sample> = data::load_dataset(&a.data)?
        .into_iter()
        .filter(|s| s.tgt.len() >= a.min_len)
        .take(a.limit)
        .collect();
    check_data(&params, &samples)?;
    check_data(&baseline_params, &samples)?;
    let label = cfg.algorithm.name().to_string();
    let baseline_label = baseline_cfg.algorithm.name().to_string();
    let report = bench::bench_decode(
        BenchTarget { label: &label, params: &params, cfg: &cfg },
        BenchTarget { label: &baseline_label, params: &baseline_params, cfg: &baseline_cfg },
        &samples,
        a.runs,
    )?;
    write_json(&a.out, &report)?;
    println!(
        "{}: {:.2} ms/utt (sd {:.2}), {}: {:.2} ms/utt, speedup {:.2}x",
        report.label,
        report.timing.mean * 1e3,
        report.timing.stdev * 1e3,
        report.baseline_label,
        report.baseline.mean * 1e3,
        report.speedup
    );
    Ok(())
}

fn run(cli: &Cli, m: &ArgMatches) -> Result<()> {
    let (_, sub) = m.subcommand().expect("subcommand is required");
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => run_train(a, sub),
        Command::Distill(a) => distill(a),
        Command::Decode(a) => run_decode(a, sub),
        Command::Eval(a) => run_eval(a),
        Command::Bench(a) => run_bench(a, sub),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let parsed = Cli::command()
        .try_get_matches()
        .and_then(|m| Cli::from_arg_matches(&m).map(|c| (c, m)));
    let (cli, matches) = match parsed {
        Ok(p) => p,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}
