//! `nmtforge` command-line front end. Every stage is file-to-file.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use nmtforge::corpus::{filter_corpus, read_aligned, read_lines, write_lines, FilterRules, ParallelCorpus};
use nmtforge::decode::{translate_corpus_threads, Combine, DecodeConfig, DecodeMode};
use nmtforge::metrics::{corpus_bleu_tokens, self_bleu, Tokenizer};
use nmtforge::model_zoo::{Direction, Model, Preset};
use nmtforge::numerics::checkpoint::FORMAT_VERSION;
use nmtforge::pipeline::{
    ensemble_select_normal, ensemble_select_self_bleu, run_experiment, PipelineConfig, PoolEntry, RunOptions,
    CACHE_ENV, CACHE_FORMAT, DEFAULT_BLEU_FLOOR,
};
use nmtforge::text::{BpeModel, Vocabulary};
use nmtforge::toy::{ToyTask, ToyTaskSpec};
use nmtforge::train::{run_objective, FinetuneMethod, Objective, TrainConfig, Trainer, FINETUNE_STEPS};
use nmtforge::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "nmtforge", about = "Toy-scale neural machine translation workbench", disable_version_flag = true)]
struct Cli {
    /// Print the package and file-format versions.
    #[arg(long, global = true)]
    version: bool,
    /// Worker threads for decoding and independent pipeline stages.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic parallel or monolingual corpus.
    GenToy(GenToy),
    /// Apply the length, word-length, ratio and duplicate filters.
    Filter(FilterCmd),
    /// Learn BPE merges from text files.
    BpeLearn(BpeLearn),
    /// Segment a text file with learned merges.
    BpeApply(BpeApply),
    /// Train a model from scratch.
    Train(TrainCmd),
    /// Continue training a checkpoint with one of the finetuning methods.
    Finetune(FinetuneCmd),
    /// Translate a file with one checkpoint or an ensemble.
    Translate(TranslateCmd),
    /// Corpus BLEU of a hypothesis file against references.
    Score(ScoreCmd),
    /// Self-BLEU of each system against the others.
    SelfBleu(SelfBleuCmd),
    /// Choose an ensemble from a model pool.
    Select(SelectCmd),
    /// Run a pipeline config with stage caching.
    Pipeline(PipelineCmd),
    /// Describe a checkpoint.
    InspectCkpt(InspectCmd),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    Copy,
    Reverse,
    LexiconSwap,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SideArg {
    Parallel,
    Source,
    Target,
}

#[derive(Args, Debug)]
struct GenToy {
    #[arg(long, value_enum)]
    task: TaskArg,
    /// Vocabulary size per side, counting the four reserved ids.
    #[arg(long)]
    vocab_size: usize,
    #[arg(long)]
    max_len: usize,
    #[arg(long)]
    pairs: usize,
    #[arg(long)]
    domain_shift: Option<f64>,
    #[arg(long, value_enum, default_value = "parallel")]
    output: SideArg,
    #[arg(long)]
    seed: u64,
    /// Output directory; receives `src.txt` and/or `tgt.txt`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FilterCmd {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    #[arg(long, default_value_t = 100)]
    max_len: usize,
    #[arg(long, default_value_t = 40)]
    max_word_chars: usize,
    #[arg(long, default_value_t = 4.0)]
    max_ratio: f64,
    #[arg(long)]
    no_dedup: bool,
    /// Output directory; receives `src.txt` and `tgt.txt`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BpeLearn {
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    #[arg(long)]
    merges: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BpeApply {
    #[arg(long)]
    codes: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DataArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    #[arg(long, requires = "dev_tgt")]
    dev_src: Option<PathBuf>,
    #[arg(long, requires = "dev_src")]
    dev_tgt: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainCmd {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "aan")]
    arch: String,
    #[arg(long, value_enum, default_value = "l2r")]
    direction: DirectionArg,
    #[arg(long, default_value_t = 3000)]
    steps: usize,
    #[arg(long, default_value_t = 1024)]
    batch_tokens: usize,
    #[arg(long)]
    base_lr: Option<f64>,
    #[arg(long, default_value_t = 300)]
    warmup: usize,
    #[arg(long, default_value_t = 0.1)]
    label_smoothing: f64,
    /// Learn this many BPE merges per side before building vocabularies.
    #[arg(long, default_value_t = 0)]
    bpe_merges: usize,
    /// Write a checkpoint every this many steps (0: final only).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// Stop once greedy dev BLEU reaches this value (needs dev data).
    #[arg(long)]
    target_bleu: Option<f64>,
    #[arg(long, default_value_t = 250)]
    check_every: usize,
    #[arg(long)]
    seed: u64,
    /// Output directory for checkpoints and `train.jsonl`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DirectionArg {
    L2r,
    R2l,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Normal,
    Pss,
    Denoise,
    Mrt,
}

#[derive(Args, Debug)]
struct FinetuneCmd {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum)]
    method: MethodArg,
    #[arg(long, default_value_t = FINETUNE_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = 3e-4)]
    lr: f64,
    #[arg(long, default_value_t = 1024)]
    batch_tokens: usize,
    #[arg(long, default_value_t = 0.5)]
    pss_mix: f64,
    #[arg(long, default_value_t = 0.005)]
    mrt_alpha: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Greedy,
    Beam,
    Sample,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CombineArg {
    Arithmetic,
    Geometric,
}

#[derive(Args, Debug)]
struct TranslateCmd {
    /// One or more checkpoints; several form an ensemble.
    #[arg(long, required = true, num_args = 1..)]
    ckpt: Vec<PathBuf>,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "beam")]
    mode: ModeArg,
    #[arg(long, default_value_t = 4)]
    beam_size: usize,
    #[arg(long, default_value_t = 0.6)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 200)]
    max_len: usize,
    #[arg(long, value_enum, default_value = "arithmetic")]
    combine: CombineArg,
    /// Required for sampling.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TokenizeArg {
    V13a,
    None,
}

#[derive(Args, Debug)]
struct ScoreCmd {
    #[arg(long)]
    hyp: PathBuf,
    /// One or more reference files.
    #[arg(long, required = true, num_args = 1..)]
    r#ref: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "v13a")]
    tokenize: TokenizeArg,
    /// Print the full report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct SelfBleuCmd {
    /// Output files of at least two systems over the same inputs.
    #[arg(long, required = true, num_args = 2..)]
    hyp: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "v13a")]
    tokenize: TokenizeArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PolicyArg {
    Normal,
    SelfBleu,
}

#[derive(Args, Debug)]
struct SelectCmd {
    /// Pool entries, one JSON object per line (as written by pipeline train stages).
    #[arg(long)]
    pool: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long, value_enum, default_value = "normal")]
    policy: PolicyArg,
    /// Dev-set translations for each entry, in pool order (self-BLEU policy).
    #[arg(long, num_args = 1..)]
    hyp: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BLEU_FLOOR)]
    floor: f64,
    /// Selected entries are written here, one JSON object per line.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PipelineCmd {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Stage cache root (default: `$NMTFORGE_CACHE`, then `cache` under `--out`).
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Directory for `report.txt` and `report.jsonl`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InspectCmd {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    json: bool,
}

fn version_text() -> String {
    format!(
        "nmtforge {}\ncheckpoint format: NMTF v{FORMAT_VERSION}\nstage cache format: {CACHE_FORMAT}\n",
        env!("CARGO_PKG_VERSION")
    )
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Path { path: dir.to_path_buf(), source })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::Path { path: path.to_path_buf(), source })
}

fn write_split(dir: &Path, corpus: &ParallelCorpus) -> Result<()> {
    create_dir(dir)?;
    let src: Vec<String> = corpus.iter().map(|p| p.source.join(" ")).collect();
    let tgt: Vec<String> = corpus.iter().map(|p| p.target.join(" ")).collect();
    write_lines(&dir.join("src.txt"), &src)?;
    write_lines(&dir.join("tgt.txt"), &tgt)
}

fn tokens(lines: &[String]) -> Vec<Vec<String>> {
    lines.iter().map(|l| l.split_whitespace().map(String::from).collect()).collect()
}

fn tokenizer(t: TokenizeArg) -> Tokenizer {
    match t {
        TokenizeArg::V13a => Tokenizer::V13a,
        TokenizeArg::None => Tokenizer::Whitespace,
    }
}

fn method(m: MethodArg) -> FinetuneMethod {
    match m {
        MethodArg::Normal => FinetuneMethod::Normal,
        MethodArg::Pss => FinetuneMethod::Pss,
        MethodArg::Denoise => FinetuneMethod::Denoise,
        MethodArg::Mrt => FinetuneMethod::Mrt,
    }
}

fn dev_corpus(d: &DataArgs) -> Result<Option<ParallelCorpus>> {
    match (&d.dev_src, &d.dev_tgt) {
        (Some(s), Some(t)) => Ok(Some(read_aligned(s, t)?)),
        _ => Ok(None),
    }
}

/// Usage problems found after parsing; reported with exit code 1.
struct Usage(String);

enum Failure {
    Usage(Usage),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<Usage> for Failure {
    fn from(u: Usage) -> Self {
        Failure::Usage(u)
    }
}

type Outcome = std::result::Result<(), Failure>;

fn gen_toy(a: GenToy) -> Outcome {
    let task = match a.task {
        TaskArg::Copy => ToyTask::Copy,
        TaskArg::Reverse => ToyTask::Reverse,
        TaskArg::LexiconSwap => ToyTask::LexiconSwap,
    };
    let spec = ToyTaskSpec { domain_shift: a.domain_shift, ..ToyTaskSpec::new(task, a.vocab_size, a.max_len, a.pairs, a.seed) };
    spec.validate().map_err(|e| Usage(e.to_string()))?;
    let join = |l: Vec<Vec<String>>| -> Vec<String> { l.into_iter().map(|s| s.join(" ")).collect() };
    match a.output {
        SideArg::Parallel => write_split(&a.out, &spec.generate()?)?,
        SideArg::Source => {
            create_dir(&a.out)?;
            write_lines(&a.out.join("src.txt"), &join(spec.source_monolingual()?))?;
        }
        SideArg::Target => {
            create_dir(&a.out)?;
            write_lines(&a.out.join("tgt.txt"), &join(spec.target_monolingual()?))?;
        }
    }
    Ok(())
}

fn filter(a: FilterCmd) -> Outcome {
    let corpus = read_aligned(&a.src, &a.tgt)?;
    let rules = FilterRules { max_len: a.max_len, max_word_chars: a.max_word_chars, max_ratio: a.max_ratio, dedup: !a.no_dedup };
    let (kept, stats) = filter_corpus(&corpus, &rules);
    write_split(&a.out, &kept)?;
    eprintln!("kept {} of {} pairs ({stats:?})", kept.len(), corpus.len());
    Ok(())
}

fn train(a: TrainCmd, threads: usize) -> Outcome {
    let _ = threads;
    let preset: Preset = a.arch.parse().map_err(|e: Error| Usage(e.to_string()))?;
    let corpus = read_aligned(&a.data.src, &a.data.tgt)?;
    let dev = dev_corpus(&a.data)?;
    if a.target_bleu.is_some() && dev.is_none() {
        return Err(Usage("--target-bleu needs --dev-src and --dev-tgt".into()).into());
    }
    let (src_lines, tgt_lines) = (corpus.sources(), corpus.targets());
    let (src_bpe, tgt_bpe) = if a.bpe_merges > 0 {
        (Some(BpeModel::learn(&src_lines, a.bpe_merges)), Some(BpeModel::learn(&tgt_lines, a.bpe_merges)))
    } else {
        (None, None)
    };
    let vocab = |lines: &[Vec<String>], bpe: &Option<BpeModel>| match bpe {
        Some(b) => Vocabulary::build(&lines.iter().map(|l| b.apply_tokens(l)).collect::<Vec<_>>()),
        None => Vocabulary::build(lines),
    };
    let direction = match a.direction {
        DirectionArg::L2r => Direction::L2r,
        DirectionArg::R2l => Direction::R2l,
    };
    let mut model =
        Model::build(preset.spec().with_direction(direction), vocab(&src_lines, &src_bpe), vocab(&tgt_lines, &tgt_bpe), a.seed)?;
    model.codec.src_bpe = src_bpe;
    model.codec.tgt_bpe = tgt_bpe;
    let mut cfg = TrainConfig::for_model(&model);
    cfg.max_steps = a.steps;
    cfg.batch_tokens = a.batch_tokens;
    cfg.label_smoothing = a.label_smoothing;
    cfg.seed = a.seed;
    cfg.checkpoint_every = a.checkpoint_every;
    cfg.optimizer.warmup_steps = a.warmup;
    if let Some(lr) = a.base_lr {
        cfg.optimizer.base_lr = lr;
    }
    match (a.target_bleu, dev) {
        (Some(target), Some(dev)) => {
            create_dir(&a.out)?;
            let greedy = DecodeConfig::greedy();
            let records = {
                let mut trainer = Trainer::new(&mut model, &corpus, cfg, Objective::CrossEntropy)?;
                trainer.run(a.steps, a.check_every, |m, step| {
                    let b = nmtforge::train::bleu_on(&[m], &dev, &greedy)?;
                    log::info!("step {step}: dev BLEU {b:.2}");
                    Ok(b >= target)
                })?;
                trainer.records().to_vec()
            };
            model.lineage.push(format!("train steps={}", records.len()));
            model.save(&nmtforge::train::checkpoint_path(&a.out, model.steps))?;
            nmtforge::train::write_manifest(&a.out.join("train.jsonl"), &records)?;
        }
        _ => {
            run_objective(&mut model, &corpus, &cfg, Objective::CrossEntropy, "train", Some(&a.out))?;
        }
    }
    println!("{}", nmtforge::train::checkpoint_path(&a.out, model.steps).display());
    Ok(())
}

fn finetune_cmd(a: FinetuneCmd) -> Outcome {
    let mut model = Model::load(&a.ckpt)?;
    let corpus = read_aligned(&a.data.src, &a.data.tgt)?;
    let mut cfg = TrainConfig::finetune();
    cfg.max_steps = a.steps;
    cfg.optimizer.base_lr = a.lr;
    cfg.batch_tokens = a.batch_tokens;
    cfg.seed = a.seed;
    let m = method(a.method);
    let objective = match m {
        FinetuneMethod::Pss => Objective::Pss { mix_ratio: a.pss_mix },
        FinetuneMethod::Mrt => Objective::Mrt(nmtforge::train::MrtConfig { alpha: a.mrt_alpha, ..Default::default() }),
        other => other.objective(),
    };
    let label = format!("finetune method={m}");
    run_objective(&mut model, &corpus, &cfg, objective, &label, Some(&a.out))?;
    if let Some(dev) = dev_corpus(&a.data)? {
        let b = nmtforge::train::bleu_on(&[&model], &dev, &DecodeConfig::default())?;
        eprintln!("dev BLEU {b:.2}");
    }
    println!("{}", nmtforge::train::checkpoint_path(&a.out, model.steps).display());
    Ok(())
}

fn translate(a: TranslateCmd, threads: usize) -> Outcome {
    let mode = match a.mode {
        ModeArg::Greedy => DecodeMode::Greedy,
        ModeArg::Beam => DecodeMode::Beam,
        ModeArg::Sample => DecodeMode::Sample,
    };
    if mode == DecodeMode::Sample && a.seed.is_none() {
        return Err(Usage("sampling needs --seed".into()).into());
    }
    let config = DecodeConfig {
        mode,
        beam_size: a.beam_size,
        alpha: a.alpha,
        temperature: a.temperature,
        max_len: a.max_len,
        seed: a.seed.unwrap_or(0),
        combine: match a.combine {
            CombineArg::Arithmetic => Combine::Arithmetic,
            CombineArg::Geometric => Combine::Geometric,
        },
    };
    config.validate().map_err(|e| Usage(e.to_string()))?;
    let models = a.ckpt.iter().map(|p| Model::load(p)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Model> = models.iter().collect();
    let lines = read_lines(&a.input)?;
    let out = translate_corpus_threads(&refs, &lines, &config, threads)?;
    write_lines(&a.out, &out)?;
    Ok(())
}

fn score(a: ScoreCmd) -> Outcome {
    let tok = tokenizer(a.tokenize);
    let hyp = read_lines(&a.hyp)?;
    let refs = a.r#ref.iter().map(|p| read_lines(p)).collect::<Result<Vec<_>>>()?;
    let hyps: Vec<Vec<String>> = hyp.iter().map(|l| tok.apply(l)).collect();
    let mut per_line: Vec<Vec<Vec<String>>> = vec![Vec::new(); hyp.len()];
    for r in &refs {
        if r.len() != hyp.len() {
            return Err(Error::Align { hyps: hyp.len(), refs: r.len() }.into());
        }
        for (slot, line) in per_line.iter_mut().zip(r) {
            slot.push(tok.apply(line));
        }
    }
    let report = corpus_bleu_tokens(&hyps, &per_line)?;
    if a.json {
        println!("{}", report.to_json());
    } else {
        println!("{:.2}", report.score);
    }
    Ok(())
}

fn self_bleu_cmd(a: SelfBleuCmd) -> Outcome {
    let outputs = a.hyp.iter().map(|p| read_lines(p)).collect::<Result<Vec<_>>>()?;
    for (path, s) in a.hyp.iter().zip(self_bleu(&outputs, tokenizer(a.tokenize))?) {
        println!("{s:.2}\t{}", path.display());
    }
    Ok(())
}

fn select(a: SelectCmd) -> Outcome {
    let text = fs::read_to_string(&a.pool).map_err(|source| Error::Path { path: a.pool.clone(), source })?;
    let pool: Vec<PoolEntry> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Usage(format!("pool entry: {e}"))))
        .collect::<std::result::Result<_, _>>()?;
    let ids = match a.policy {
        PolicyArg::Normal => ensemble_select_normal(&pool, a.k)?,
        PolicyArg::SelfBleu => {
            if a.hyp.len() != pool.len() {
                return Err(Error::Pool(format!("{} translation files for {} pool entries", a.hyp.len(), pool.len())).into());
            }
            let translations = pool
                .iter()
                .zip(&a.hyp)
                .map(|(e, p)| Ok((e.id, read_lines(p)?)))
                .collect::<Result<_>>()?;
            ensemble_select_self_bleu(&pool, &translations, a.k, a.floor)?.ids
        }
    };
    let chosen: String = ids
        .iter()
        .map(|id| {
            let e = pool.iter().find(|e| e.id == *id).expect("selected from pool");
            serde_json::to_string(e).expect("entry serializes") + "\n"
        })
        .collect();
    write_text(&a.out, &chosen)?;
    println!("{}", ids.iter().map(usize::to_string).collect::<Vec<_>>().join(" "));
    Ok(())
}

fn pipeline(a: PipelineCmd, threads: usize) -> Outcome {
    let mut config = PipelineConfig::load(&a.config).map_err(|e| match e {
        Error::Config(m) => Failure::Usage(Usage(m)),
        other => Failure::Runtime(other),
    })?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    // keep the default cache under --out so nothing is written elsewhere
    let cache_root = a.cache.or_else(|| std::env::var_os(CACHE_ENV).map(PathBuf::from)).unwrap_or_else(|| a.out.join("cache"));
    let report = run_experiment(&config, &RunOptions { cache_root: Some(cache_root), out_dir: Some(a.out), threads })?;
    print!("{}", report.table());
    Ok(())
}

fn inspect(a: InspectCmd) -> Outcome {
    let m = Model::load(&a.ckpt)?;
    let info = serde_json::json!({
        "architecture": m.spec.family(),
        "spec": m.spec,
        "parameters": m.parameter_count(),
        "src_vocab": m.src_vocab.len(),
        "tgt_vocab": m.tgt_vocab.len(),
        "src_bpe_merges": m.codec.src_bpe.as_ref().map(|b| b.merge_count()),
        "tgt_bpe_merges": m.codec.tgt_bpe.as_ref().map(|b| b.merge_count()),
        "truecase": m.codec.truecase.is_some(),
        "steps": m.steps,
        "lineage": m.lineage,
    });
    if a.json {
        println!("{info}");
    } else {
        println!("architecture: {}", m.spec.family());
        print!("{}", m.spec.to_text());
        println!("parameters: {}", m.parameter_count());
        println!("vocab: {} source / {} target", m.src_vocab.len(), m.tgt_vocab.len());
        println!("steps: {}", m.steps);
        for l in &m.lineage {
            println!("lineage: {l}");
        }
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Outcome {
    let threads = cli.threads.max(1);
    let Some(command) = cli.command else {
        return Err(Usage("missing subcommand".into()).into());
    };
    match command {
        Command::GenToy(a) => gen_toy(a),
        Command::Filter(a) => filter(a),
        Command::BpeLearn(a) => {
            let lines = a.input.iter().map(|p| read_lines(p)).collect::<Result<Vec<_>>>()?.concat();
            write_text(&a.out, &BpeModel::learn(&tokens(&lines), a.merges).to_text())?;
            Ok(())
        }
        Command::BpeApply(a) => {
            let text = fs::read_to_string(&a.codes).map_err(|source| Error::Path { path: a.codes.clone(), source })?;
            let bpe = BpeModel::from_text(&text)?;
            let out: Vec<String> = read_lines(&a.input)?.iter().map(|l| bpe.apply(l).join(" ")).collect();
            write_lines(&a.out, &out)?;
            Ok(())
        }
        Command::Train(a) => train(a, threads),
        Command::Finetune(a) => finetune_cmd(a),
        Command::Translate(a) => translate(a, threads),
        Command::Score(a) => score(a),
        Command::SelfBleu(a) => self_bleu_cmd(a),
        Command::Select(a) => select(a),
        Command::Pipeline(a) => pipeline(a, threads),
        Command::InspectCkpt(a) => inspect(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if cli.version {
        print!("{}", version_text());
        return ExitCode::SUCCESS;
    }
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(Usage(m))) => {
            eprintln!("error: {m}\n");
            let _ = <Cli as clap::CommandFactory>::command().print_help();
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
