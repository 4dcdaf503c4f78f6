use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sentrep::bslm::BslmCheckpoint;
use sentrep::checkpoint::NmtCheckpoint;
use sentrep::config::{Integration, TrainConfig};
use sentrep::data::{bpe_learn, detokenize, read_lines, write_lines, MergeTable, MonoCorpus, ParallelCorpus, Vocabulary};
use sentrep::decode::{bleu_lines, throughput_benchmark, Translator};
use sentrep::synthetic::{MarkovGrammar, TranslationTask};
use sentrep::training::{train_nmt, train_slm, LanguageModels, StepRecord, TrainEvent, Validation};

/// Default configuration file when `--config` is absent.
const CONFIG_ENV: &str = "SENTREP_CONFIG";

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] sentrep::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use sentrep::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                E::Divergence { .. } | E::NanGradient(_) | E::NonFinite(_) | E::OracleInvalid(_) => 1,
                _ => 2,
            },
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "sentrep", version, about = "Bi-directional self-attention language models for translation")]
struct Cli {
    /// Configuration file of `key=value` lines.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Start from the small desk-scale preset instead of the full-size defaults.
    #[arg(long, global = true)]
    desk: bool,
    /// Override one configuration key, e.g. `--set d=64`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed of the single generator every random choice derives from.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Learn or apply byte pair encoding merges.
    Bpe {
        #[command(subcommand)]
        action: BpeAction,
    },
    /// Train the forward and backward language models.
    TrainLm(TrainLmArgs),
    /// Train a translation model, optionally fused with language models.
    TrainNmt(TrainNmtArgs),
    /// Translate a file of tokenized sentences with beam search.
    Translate(TranslateArgs),
    /// Corpus BLEU of a hypothesis file against a reference file.
    Score(ScoreArgs),
    /// Write the normalized fusion weights as CSV.
    ExportHeatmap(HeatmapArgs),
    /// Compare decoding throughput of a baseline and a fused model.
    Bench(BenchArgs),
    /// Generate synthetic corpora.
    Synth(SynthArgs),
}

#[derive(Subcommand, Debug)]
enum BpeAction {
    Learn {
        #[arg(long)]
        merges: usize,
        #[arg(long)]
        output: PathBuf,
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    Apply {
        #[arg(long = "codes")]
        codes: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DirectionArg {
    Both,
}

#[derive(Args, Debug)]
struct TrainLmArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Both directions are always trained; the pair forms one checkpoint.
    #[arg(long, value_enum, default_value = "both")]
    direction: DirectionArg,
    #[arg(long)]
    output: PathBuf,
    /// Step log as TSV; stderr when absent.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainNmtArgs {
    /// Source side of the parallel corpus.
    #[arg(long)]
    src: PathBuf,
    /// Target side of the parallel corpus.
    #[arg(long)]
    tgt: PathBuf,
    #[arg(long)]
    src_bslm: Option<PathBuf>,
    #[arg(long)]
    tgt_bslm: Option<PathBuf>,
    #[arg(long)]
    fusion: Option<Integration>,
    #[arg(long)]
    kt: Option<Integration>,
    #[arg(long, requires = "valid_tgt")]
    valid_src: Option<PathBuf>,
    #[arg(long, requires = "valid_src")]
    valid_tgt: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TranslateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Source language model of a fused model; defaults to the path stored
    /// in the checkpoint.
    #[arg(long)]
    src_bslm: Option<PathBuf>,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 4)]
    beam: usize,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Undo subword segmentation in the output.
    #[arg(long)]
    detokenize: bool,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Add-one smoothing of every n-gram precision.
    #[arg(long)]
    smooth: bool,
    #[arg(long)]
    tsv: bool,
}

#[derive(Args, Debug)]
struct HeatmapArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    baseline: PathBuf,
    #[arg(long)]
    fused: PathBuf,
    #[arg(long)]
    src_bslm: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 4)]
    beam: usize,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(3..))]
    reps: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SynthKind {
    /// Monolingual sentences from a Markov grammar.
    Grammar,
    /// Word-mapping plus reversal translation pairs.
    Translation,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, value_enum)]
    kind: SynthKind,
    #[arg(long, default_value_t = 1000)]
    sentences: usize,
    #[arg(long, default_value_t = 20)]
    words: usize,
    #[arg(long, default_value_t = 3)]
    min_len: usize,
    #[arg(long, default_value_t = 10)]
    max_len: usize,
    /// Output prefix; translation writes `<prefix>.src` and `<prefix>.tgt`.
    #[arg(long)]
    out: PathBuf,
}

fn resolve_config(cli: &Cli) -> CliResult<TrainConfig> {
    let mut config = if cli.desk { TrainConfig::desk() } else { TrainConfig::default() };
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        config.apply_text(&text)?;
    }
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        config.set(k, v)?;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn announce(command: &str, config: &TrainConfig) {
    eprintln!("# sentrep {command} seed={}", config.seed);
    for line in config.to_text().lines() {
        eprintln!("#   {line}");
    }
}

fn read_input(path: &Path) -> CliResult<Vec<String>> {
    if !path.exists() {
        return Err(CliError::Usage(format!("no such file: {}", path.display())));
    }
    Ok(read_lines(path)?)
}

/// Step records go to a file when given, otherwise to stderr.
struct StepLog {
    out: Box<dyn Write>,
    failed: Option<io::Error>,
}

impl StepLog {
    fn open(path: Option<&Path>) -> CliResult<Self> {
        let out: Box<dyn Write> = match path {
            Some(p) => Box::new(io::BufWriter::new(fs::File::create(p).map_err(sentrep::Error::from)?)),
            None => Box::new(io::stderr()),
        };
        let mut log = Self { out, failed: None };
        log.line(StepRecord::TSV_HEADER);
        Ok(log)
    }

    fn line(&mut self, s: &str) {
        if self.failed.is_none() {
            if let Err(e) = writeln!(self.out, "{s}") {
                self.failed = Some(e);
            }
        }
    }

    fn event(&mut self, e: &TrainEvent) {
        match e {
            TrainEvent::Phase(d) => self.line(&format!("# direction {}", d.as_str())),
            TrainEvent::Step(r) => self.line(&r.tsv()),
            TrainEvent::Validation { step, bleu, best } => {
                self.line(&format!("# valid step={step} bleu={bleu:.2}{}", if *best { " best" } else { "" }))
            }
        }
    }

    fn finish(mut self) -> CliResult<()> {
        if let Some(e) = self.failed.take() {
            return Err(sentrep::Error::from(e).into());
        }
        self.out.flush().map_err(sentrep::Error::from)?;
        Ok(())
    }
}

fn cmd_bpe(action: &BpeAction) -> CliResult<()> {
    match action {
        BpeAction::Learn { merges, output, files } => {
            let mut lines = Vec::new();
            for f in files {
                lines.extend(read_input(f)?);
            }
            let table = bpe_learn(&lines, *merges)?;
            fs::write(output, table.to_text()).map_err(sentrep::Error::from)?;
            eprintln!("# learned {} merges from {} lines", table.len(), lines.len());
        }
        BpeAction::Apply { codes, input, output } => {
            let table = MergeTable::from_text(&fs::read_to_string(codes).map_err(|e| {
                CliError::Usage(format!("cannot read merges {}: {e}", codes.display()))
            })?)?;
            let lines: Vec<String> = read_input(input)?.iter().map(|l| table.encode_line(l)).collect();
            write_lines(output, &lines)?;
        }
    }
    Ok(())
}

fn cmd_train_lm(config: &TrainConfig, args: &TrainLmArgs) -> CliResult<()> {
    let DirectionArg::Both = args.direction;
    announce("train-lm", config);
    let lines = read_input(&args.corpus)?;
    let vocab = Vocabulary::build(lines.iter().map(String::as_str), config.vocab_size)?;
    let corpus = MonoCorpus::from_lines(&lines, &vocab)?;
    eprintln!("# {} sentences, vocabulary {}", corpus.len(), vocab.len());
    let mut log = StepLog::open(args.log.as_deref())?;
    let ck = train_slm(&corpus, &vocab, config, &mut |e| log.event(e))?;
    log.finish()?;
    ck.save(&args.output)?;
    eprintln!("# final loss {:.4}, wrote {}", ck.meta.final_loss, args.output.display());
    Ok(())
}

fn load_lm(path: Option<&PathBuf>) -> CliResult<Option<BslmCheckpoint<f32>>> {
    path.map(|p| {
        if !p.exists() {
            return Err(CliError::Usage(format!("no such file: {}", p.display())));
        }
        Ok(BslmCheckpoint::load(p)?)
    })
    .transpose()
}

fn cmd_train_nmt(config: &mut TrainConfig, args: &TrainNmtArgs) -> CliResult<()> {
    if let Some(f) = args.fusion {
        config.fusion = f;
    }
    if let Some(k) = args.kt {
        config.kt = k;
    }
    config.validate()?;
    announce("train-nmt", config);
    let src_lm = load_lm(args.src_bslm.as_ref())?;
    let tgt_lm = load_lm(args.tgt_bslm.as_ref())?;
    if config.fusion.is_on() && src_lm.is_none() {
        return Err(CliError::Usage("--fusion needs --src-bslm".into()));
    }
    if config.kt.is_on() && tgt_lm.is_none() {
        return Err(CliError::Usage("--kt needs --tgt-bslm".into()));
    }
    let src = read_input(&args.src)?;
    let tgt = read_input(&args.tgt)?;
    let vocab_for = |lm: &Option<BslmCheckpoint<f32>>, lines: &[String]| -> CliResult<Vocabulary> {
        match lm {
            Some(lm) => Ok(lm.vocab.clone()),
            None => Ok(Vocabulary::build(lines.iter().map(String::as_str), config.vocab_size)?),
        }
    };
    let sv = vocab_for(&src_lm, &src)?;
    let tv = vocab_for(&tgt_lm, &tgt)?;
    let parallel = ParallelCorpus::from_lines(&src, &tgt, &sv, &tv)?;
    let valid = match (&args.valid_src, &args.valid_tgt) {
        (Some(vs), Some(vt)) => Some(ParallelCorpus::from_lines(&read_input(vs)?, &read_input(vt)?, &sv, &tv)?),
        _ => None,
    };
    eprintln!("# {} pairs, vocabularies {} / {}", parallel.len(), sv.len(), tv.len());
    let mut log = StepLog::open(args.log.as_deref())?;
    let lms = LanguageModels {
        source: src_lm.as_ref(),
        target: tgt_lm.as_ref(),
    };
    let validation = valid.as_ref().map(|corpus| Validation {
        corpus,
        src_vocab: &sv,
        tgt_vocab: &tv,
    });
    let outcome = train_nmt(&parallel, &sv, &tv, lms, config, validation, &mut |e| log.event(e))?;
    log.finish()?;
    let mut ck = outcome.checkpoint;
    let stored_path = |p: &Option<PathBuf>, used: bool| {
        p.as_ref()
            .filter(|_| used)
            .map(|p| fs::canonicalize(p).unwrap_or_else(|_| p.clone()).display().to_string())
    };
    ck.src_lm_path = stored_path(&args.src_bslm, ck.src_lm_hash.is_some());
    ck.tgt_lm_path = stored_path(&args.tgt_bslm, ck.tgt_lm_hash.is_some());
    ck.save(&args.output)?;
    if let Some(b) = outcome.best_bleu {
        eprintln!("# best validation BLEU {b:.2}");
    }
    eprintln!("# wrote {}", args.output.display());
    Ok(())
}

/// The model plus the source language model it needs, if any.
fn load_translation_model(
    model: &Path,
    src_bslm: Option<&PathBuf>,
) -> CliResult<(NmtCheckpoint<f32>, Option<BslmCheckpoint<f32>>)> {
    if !model.exists() {
        return Err(CliError::Usage(format!("no such file: {}", model.display())));
    }
    let ck = NmtCheckpoint::<f32>::load(model)?;
    let lm = if ck.model.integration.fusion.is_on() {
        let path = match (src_bslm, &ck.src_lm_path) {
            (Some(p), _) => p.clone(),
            (None, Some(p)) => PathBuf::from(p),
            (None, None) => return Err(CliError::Usage("fused model needs --src-bslm".into())),
        };
        let lm = load_lm(Some(&path))?;
        ck.check_language_models(lm.as_ref(), None)?;
        lm
    } else {
        None
    };
    Ok((ck, lm))
}

fn cmd_translate(config: &TrainConfig, args: &TranslateArgs) -> CliResult<()> {
    if args.beam == 0 {
        return Err(CliError::Usage("--beam must be at least 1".into()));
    }
    let (ck, lm) = load_translation_model(&args.model, args.src_bslm.as_ref())?;
    let lines = read_input(&args.input)?;
    let sources: Vec<Vec<usize>> = lines.iter().map(|l| ck.src_vocab.encode(l)).collect();
    let translator = Translator::new(&ck.model, lm.as_ref())?;
    let max_len = args.max_len.unwrap_or(config.max_len);
    let alpha = args.alpha.unwrap_or(config.length_penalty);
    let mut out = Vec::with_capacity(lines.len());
    let mut truncated = 0;
    let nonempty: Vec<Vec<usize>> = sources.iter().filter(|s| !s.is_empty()).cloned().collect();
    let mut hyps = translator
        .translate_corpus(&nonempty, args.beam, max_len, alpha, args.threads)?
        .into_iter();
    for s in &sources {
        if s.is_empty() {
            out.push(String::new());
            continue;
        }
        let h = hyps.next().expect("one hypothesis per non-empty line");
        truncated += usize::from(h.truncated());
        let text = ck.tgt_vocab.decode(h.output());
        out.push(if args.detokenize { detokenize(&text) } else { text });
    }
    write_lines(&args.output, &out)?;
    if truncated > 0 {
        eprintln!("# {truncated} hypotheses hit the length limit {max_len}");
    }
    Ok(())
}

fn cmd_score(args: &ScoreArgs) -> CliResult<()> {
    let hyp = read_input(&args.hyp)?;
    let refs = read_input(&args.reference)?;
    if hyp.len() != refs.len() {
        return Err(CliError::Usage(format!(
            "{} hypothesis lines but {} reference lines",
            hyp.len(),
            refs.len()
        )));
    }
    let report = bleu_lines(&hyp, &refs, args.smooth)?;
    if args.tsv {
        println!("{}", sentrep::decode::BleuReport::tsv_header());
        println!("{}", report.tsv());
    } else {
        println!("{report}");
    }
    Ok(())
}

fn heatmap_csv(ck: &NmtCheckpoint<f32>) -> CliResult<String> {
    let h = ck.model.fusion_heatmap().map_err(|_| CliError::Usage("model has no fusion weights".into()))?;
    let (n, m) = (h.shape()[0], h.shape()[1]);
    let mut s = String::from("encoder_layer");
    for j in 1..=m {
        s.push_str(&format!(",lm_layer_{j}"));
    }
    s.push('\n');
    for i in 0..n {
        s.push_str(&format!("encoder_layer_{}", i + 1));
        for j in 0..m {
            s.push_str(&format!(",{:.8}", h.at(&[i, j])));
        }
        s.push('\n');
    }
    Ok(s)
}

fn cmd_export_heatmap(args: &HeatmapArgs) -> CliResult<()> {
    if !args.model.exists() {
        return Err(CliError::Usage(format!("no such file: {}", args.model.display())));
    }
    let ck = NmtCheckpoint::<f32>::load(&args.model)?;
    fs::write(&args.out, heatmap_csv(&ck)?).map_err(sentrep::Error::from)?;
    Ok(())
}

fn cmd_bench(config: &TrainConfig, args: &BenchArgs) -> CliResult<()> {
    let (base, _) = load_translation_model(&args.baseline, None)?;
    let (fused, lm) = load_translation_model(&args.fused, args.src_bslm.as_ref())?;
    if base.src_vocab.hash() != fused.src_vocab.hash() {
        return Err(CliError::Usage("models use different source vocabularies".into()));
    }
    let corpus: Vec<Vec<usize>> = read_input(&args.corpus)?
        .iter()
        .map(|l| base.src_vocab.encode(l))
        .filter(|s| !s.is_empty())
        .collect();
    let reps = args.reps as usize;
    let tb = Translator::new(&base.model, None)?;
    let tf = Translator::new(&fused.model, lm.as_ref())?;
    let rb = throughput_benchmark("baseline", &tb, &corpus, args.beam, config.max_len, reps)?;
    if let Some(lm) = &lm {
        lm.reset_extraction_count();
    }
    let rf = throughput_benchmark("fused", &tf, &corpus, args.beam, config.max_len, reps)?;
    println!("config\tsentences\treps\tmedian_sentences_per_sec");
    for r in [&rb, &rf] {
        println!("{}\t{}\t{}\t{:.2}", r.label, r.sentences, r.times.len(), r.sentences_per_sec);
    }
    println!("# fused/baseline {:.3}", rf.sentences_per_sec / rb.sentences_per_sec);
    if let Some(lm) = &lm {
        println!(
            "# source extractions {} for {} decoded sentences",
            lm.extraction_count(),
            corpus.len() * (reps + 1)
        );
    }
    Ok(())
}

fn cmd_synth(config: &TrainConfig, args: &SynthArgs) -> CliResult<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    match args.kind {
        SynthKind::Grammar => {
            let g = MarkovGrammar::new(args.words, "w", args.min_len, args.max_len)?;
            write_lines(&args.out, &g.sentences(args.sentences, &mut rng))?;
        }
        SynthKind::Translation => {
            let task = TranslationTask::new(args.words, args.min_len, args.max_len, &mut rng)?;
            let (src, tgt): (Vec<String>, Vec<String>) = task.pairs(args.sentences, &mut rng).into_iter().unzip();
            write_lines(&args.out.with_extension("src"), &src)?;
            write_lines(&args.out.with_extension("tgt"), &tgt)?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let mut config = resolve_config(&cli)?;
    match &cli.command {
        Command::Bpe { action } => cmd_bpe(action),
        Command::TrainLm(a) => cmd_train_lm(&config, a),
        Command::TrainNmt(a) => cmd_train_nmt(&mut config, a),
        Command::Translate(a) => cmd_translate(&config, a),
        Command::Score(a) => cmd_score(a),
        Command::ExportHeatmap(a) => cmd_export_heatmap(a),
        Command::Bench(a) => cmd_bench(&config, a),
        Command::Synth(a) => cmd_synth(&config, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
