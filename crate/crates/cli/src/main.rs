mod run;

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use midtrain_core::checkpoint::{read_checkpoint, tensor_names_by_pattern, write_checkpoint, DECODER_LAYER_PREFIX};
use midtrain_core::curation::{self, Blocklist, CurationConfig, Pipeline, Stage, VerifierConfig};
use midtrain_core::mixture::{self, Emission, MixtureSpec, TokenCounter};
use midtrain_core::packing::{
    self, render_record, ByteTokenizer, CommandTokenizer, LossMode, ManifestEntry, MaskDefault, MaskPolicy,
    PackPolicy, Packer, Tokenizer, Vocab, DEFAULT_FFD_WINDOW,
};
use midtrain_core::stageplan::{self, StageConfig, StageId};
use midtrain_core::surgery::{self, AverageSpec, LayerPlan};
use midtrain_core::vision::{self, DifficultyRamp, SynthConfig, Task};

use run::{log, Run};

#[derive(Parser)]
#[command(name = "midtrain", version, about = "Checkpoint surgery and data tooling for staged mid-training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Duplicate decoder layers to reach a larger depth.
    Upscale(UpscaleArgs),
    /// Weighted element-wise average of checkpoints.
    Average(AverageArgs),
    /// Equal-weight merge of two checkpoints.
    Merge(MergeArgs),
    /// Equispaced checkpoint selection, or stratified sample draws from a manifest.
    Select(SelectArgs),
    /// Interleave corpora by token ratio.
    Mix(MixArgs),
    /// Render, mask and pack samples into fixed-length sequences.
    Pack(PackArgs),
    /// Generate procedural visual-reasoning samples.
    Synthvision(SynthArgs),
    /// Run the SFT data-hygiene pipeline.
    Curate(CurateArgs),
    /// Emit or validate per-stage training configs.
    #[command(subcommand)]
    Plan(PlanCommand),
}

#[derive(Args)]
struct UpscaleArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    target_layers: Option<usize>,
    /// Layer plan JSON; overrides the default duplication rule.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AverageArgs {
    /// Comma-separated weights summing to 1; equal weights when omitted.
    #[arg(long, value_delimiter = ',')]
    weights: Option<Vec<f64>>,
    /// Average only K equispaced checkpoints out of the inputs (given in training order).
    #[arg(long)]
    equispaced: Option<usize>,
    #[arg(long, default_value = "averaged.ckpt")]
    out: PathBuf,
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

#[derive(Args)]
struct MergeArgs {
    #[arg(long)]
    out: PathBuf,
    a: PathBuf,
    b: PathBuf,
}

#[derive(Args)]
struct SelectArgs {
    /// Number of equispaced checkpoints to keep from ITEMS.
    #[arg(long)]
    k: Option<usize>,
    /// JSONL manifest with id, token_count and optional domain, for stratified draws.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Half-open token-count strata, e.g. `32769..49153,0..32769`.
    #[arg(long, value_delimiter = ',')]
    bounds: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    quotas: Vec<usize>,
    /// Per-domain stratified fraction instead of length strata.
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    items: Vec<String>,
}

#[derive(Args, Clone)]
struct TokenArgs {
    /// `byte` or `cmd:<shell command>`; needed for records holding text.
    #[arg(long)]
    tokenizer: Option<String>,
    /// JSON map from template marker to token id.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args)]
struct MixArgs {
    #[arg(long)]
    spec: PathBuf,
    /// Stop after this many tokens.
    #[arg(long)]
    budget: u64,
    /// Defaults to the seed in the spec file.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    tokens: TokenArgs,
}

#[derive(Copy, Clone, ValueEnum)]
enum PolicyArg {
    Ffd,
    Sequential,
}

#[derive(Copy, Clone, ValueEnum)]
enum LossArg {
    Auto,
    AllTokens,
    ResponseOnly,
}

#[derive(Args)]
struct PackArgs {
    #[arg(long = "in", required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    max_len: usize,
    #[arg(long, value_enum, default_value = "ffd")]
    policy: PolicyArg,
    #[arg(long, default_value_t = DEFAULT_FFD_WINDOW)]
    window: usize,
    #[arg(long, value_enum, default_value = "auto")]
    loss_mode: LossArg,
    /// Exclude reasoning spans from response-only loss.
    #[arg(long)]
    no_reasoning_loss: bool,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    tokens: TokenArgs,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_delimiter = ',', default_value = "reconstruction,matching,detection,counting")]
    tasks: Vec<String>,
    #[arg(long)]
    n: usize,
    /// `linear`, `constant:<level>` or a level in [0, 1].
    #[arg(long, default_value = "linear")]
    difficulty_ramp: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Canvas size as WxH.
    #[arg(long, default_value = "128x128")]
    canvas: String,
    /// Directory of PNGs used for reconstruction and matching instead of scenes.
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CurateArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Curation log; defaults to `<out>.log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated stage order.
    #[arg(long, value_delimiter = ',')]
    stages: Option<Vec<String>>,
    /// Benchmark prompt files or directories.
    #[arg(long)]
    benchmarks: Vec<PathBuf>,
    #[arg(long)]
    include_answers: bool,
    /// Regex blocklist, one pattern per line; enables the content stage.
    #[arg(long)]
    blocklist: Option<PathBuf>,
    #[arg(long, conflicts_with = "verifier_url")]
    verifier_cmd: Option<String>,
    #[arg(long)]
    verifier_url: Option<String>,
    #[arg(long, default_value_t = curation::DEFAULT_VERIFIER_TIMEOUT_MS)]
    verifier_timeout_ms: u64,
}

#[derive(Subcommand)]
enum PlanCommand {
    /// Write built-in stage configs as JSON.
    Emit {
        #[arg(long, conflicts_with = "all")]
        stage: Option<String>,
        #[arg(long)]
        all: bool,
        /// Output file (one stage) or directory (`--all`).
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate stage config files; several files are also checked as one recipe.
    Validate {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = command_name(&cli.command);
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log("error", name, "failed", json!({"error": format!("{e:#}")}));
            ExitCode::from(1)
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Upscale(_) => "upscale",
        Command::Average(_) => "average",
        Command::Merge(_) => "merge",
        Command::Select(_) => "select",
        Command::Mix(_) => "mix",
        Command::Pack(_) => "pack",
        Command::Synthvision(_) => "synthvision",
        Command::Curate(_) => "curate",
        Command::Plan(_) => "plan",
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Upscale(a) => upscale(a),
        Command::Average(a) => average(a),
        Command::Merge(a) => merge(a),
        Command::Select(a) => select(a),
        Command::Mix(a) => mix(a),
        Command::Pack(a) => pack(a),
        Command::Synthvision(a) => synthvision(a),
        Command::Curate(a) => curate(a),
        Command::Plan(p) => plan(p),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn upscale(a: UpscaleArgs) -> Result<()> {
    let mut run = Run::start("upscale");
    run.input(&a.input);
    let ckpt = read_checkpoint(&a.input)?;
    let layers: BTreeSet<usize> = tensor_names_by_pattern(&ckpt, DECODER_LAYER_PREFIX)?
        .into_iter()
        .map(|(i, _)| i)
        .collect();
    let plan: LayerPlan = match (&a.plan, a.target_layers) {
        (Some(p), _) => {
            run.config(p);
            read_json(p)?
        }
        (None, Some(t)) => surgery::default_layer_plan(layers.len(), t)?,
        (None, None) => bail!("either --target-layers or --plan is required"),
    };
    if let Some(t) = a.target_layers {
        ensure!(plan.target_layer_count == t, "plan targets {} layers, not {t}", plan.target_layer_count);
    }
    let out = surgery::depth_upscale(&ckpt, &plan)?;
    write_checkpoint(&out, &a.out)?;
    run.output(&a.out);
    run.note("source_layers", plan.source_layer_count);
    run.note("target_layers", plan.target_layer_count);
    run.note("duplicated", plan.duplicated());
    run.finish()
}

fn average(a: AverageArgs) -> Result<()> {
    let mut run = Run::start("average");
    let inputs = match a.equispaced {
        Some(k) => surgery::select_equispaced(&a.inputs, k)?,
        None => a.inputs.clone(),
    };
    let spec = match a.weights {
        Some(w) => AverageSpec { inputs: inputs.clone(), weights: w },
        None => AverageSpec::equal(inputs.clone()),
    };
    for p in &spec.inputs {
        run.input(p);
    }
    let out = surgery::average_checkpoints(&spec)?;
    write_checkpoint(&out, &a.out)?;
    run.output(&a.out);
    run.note("weights", &spec.weights);
    run.finish()
}

fn merge(a: MergeArgs) -> Result<()> {
    let mut run = Run::start("merge");
    run.input(&a.a);
    run.input(&a.b);
    let out = surgery::merge_models(&read_checkpoint(&a.a)?, &read_checkpoint(&a.b)?)?;
    write_checkpoint(&out, &a.out)?;
    run.output(&a.out);
    run.finish()
}

fn parse_range(s: &str) -> Result<Range<u64>> {
    let (lo, hi) = s.split_once("..").with_context(|| format!("bound {s:?} is not LO..HI"))?;
    Ok(lo.trim().parse()?..hi.trim().parse()?)
}

fn write_json_out(out: Option<&Path>, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn select(a: SelectArgs) -> Result<()> {
    let mut run = Run::start("select");
    let result = if let Some(manifest) = &a.manifest {
        ensure!(a.items.is_empty() && a.k.is_none(), "--manifest cannot be combined with --k or items");
        run.input(manifest);
        run.seed(a.seed);
        let entries: Vec<ManifestEntry> = BufReader::new(File::open(manifest)?)
            .lines()
            .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
            .map(|l| Ok(serde_json::from_str(&l?)?))
            .collect::<Result<_>>()?;
        match a.fraction {
            Some(f) => {
                ensure!(a.bounds.is_empty(), "--fraction cannot be combined with --bounds");
                json!(packing::stratified_subset(&entries, f, a.seed)?)
            }
            None => {
                let bounds = a.bounds.iter().map(|b| parse_range(b)).collect::<Result<Vec<_>>>()?;
                json!(packing::stratify_by_length(&entries, &bounds, &a.quotas, a.seed)?)
            }
        }
    } else {
        let k = a.k.context("--k is required without --manifest")?;
        json!(surgery::select_equispaced(&a.items, k)?)
    };
    write_json_out(a.out.as_deref(), &result)?;
    if let Some(out) = &a.out {
        run.output(out);
    }
    run.finish()
}

fn tokenizer_from(spec: Option<&str>) -> Result<Option<Arc<dyn Tokenizer>>> {
    Ok(match spec {
        None => None,
        Some("byte") => Some(Arc::new(ByteTokenizer)),
        Some(s) => match s.strip_prefix("cmd:") {
            Some(cmd) => Some(Arc::new(CommandTokenizer::new(cmd))),
            None => bail!("unknown tokenizer {s:?}; use `byte` or `cmd:<command>`"),
        },
    })
}

fn vocab_from(path: Option<&Path>, run: &mut Run) -> Result<Vocab> {
    match path {
        Some(p) => {
            run.config(p);
            read_json(p)
        }
        None => Ok(Vocab::default()),
    }
}

fn mix(a: MixArgs) -> Result<()> {
    let mut run = Run::start("mix");
    run.config(&a.spec);
    let spec = MixtureSpec::from_json_file(&a.spec)?;
    let seed = a.seed.unwrap_or(spec.seed);
    run.seed(seed);
    let plan = mixture::build_plan(&spec, seed)?;
    let tokenizer = tokenizer_from(a.tokens.tokenizer.as_deref())?;
    let vocab = vocab_from(a.tokens.vocab.as_deref(), &mut run)?;
    let counter = || -> Option<TokenCounter> {
        let tok = tokenizer.clone()?;
        let vocab = vocab.clone();
        Some(Box::new(move |record: &Value| {
            render_record(record, &vocab, Some(tok.as_ref())).ok().map(|(s, _)| s.len() as u64)
        }))
    };
    for g in &spec.groups {
        for s in &g.sources {
            run.input(s);
        }
    }
    let sources = mixture::open_sources(&spec, counter)?;
    let mut stream = mixture::sample_stream(&plan, sources, a.budget)?;
    let mut out = BufWriter::new(File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?);
    let mut samples = 0u64;
    let mut exhausted = None;
    for e in stream.by_ref() {
        match e? {
            Emission::Sample { sample, .. } => {
                serde_json::to_writer(&mut out, &sample.record)?;
                out.write_all(b"\n")?;
                samples += 1;
            }
            Emission::Exhausted { group, emitted_total } => {
                run.event("exhausted", json!({"group": group, "emitted_total": emitted_total}));
                exhausted = Some(group);
            }
        }
    }
    out.flush()?;
    run.output(&a.out);
    run.note("plan", &plan);
    run.note("samples", samples);
    run.note("tokens", stream.total_emitted());
    run.note("tokens_by_group", stream.emitted_by_group());
    run.note("exhausted", exhausted);
    run.finish()
}

fn pack(a: PackArgs) -> Result<()> {
    let mut run = Run::start("pack");
    ensure!(a.max_len > 0, "--max-len must be positive");
    ensure!(a.window > 0, "--window must be positive");
    let tokenizer = tokenizer_from(a.tokens.tokenizer.as_deref())?;
    let vocab = vocab_from(a.tokens.vocab.as_deref(), &mut run)?;
    let policy = match a.policy {
        PolicyArg::Ffd => PackPolicy::GreedyFfd { window: a.window },
        PolicyArg::Sequential => PackPolicy::Sequential,
    };
    let mask = MaskPolicy {
        default: match a.loss_mode {
            LossArg::Auto => MaskDefault::Auto,
            LossArg::AllTokens => MaskDefault::AllTokens,
            LossArg::ResponseOnly => MaskDefault::ResponseOnly,
        },
        include_reasoning: !a.no_reasoning_loss,
    };
    let mut packer = Packer::new(a.max_len, policy);
    let mut sequences = Vec::new();
    let mut samples = 0usize;
    let mut modes = [0usize; 2];
    for input in &a.inputs {
        run.input(input);
        let reader = BufReader::new(File::open(input).with_context(|| format!("opening {}", input.display()))?);
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: Value =
                serde_json::from_str(&line).with_context(|| format!("{}:{}", input.display(), i + 1))?;
            let (sample, requested) = render_record(&record, &vocab, tokenizer.as_deref())?;
            let mode = mask.resolve(&sample, requested);
            modes[(mode == LossMode::ResponseOnly) as usize] += 1;
            sequences.extend(packer.push(mask.apply(sample, Some(mode))));
            samples += 1;
        }
    }
    let (rest, rejections) = packer.finish();
    sequences.extend(rest);
    for r in &rejections {
        run.event("rejected", json!({"sample_id": r.sample_id, "length": r.length}));
    }
    let policy_name = match policy {
        PackPolicy::GreedyFfd { window } => format!("greedy_ffd(window={window})"),
        PackPolicy::Sequential => "sequential".to_string(),
    };
    packing::write_packed_batch(&sequences, a.max_len, vocab.pad, &[("policy", policy_name)], &a.out)?;
    let index = a.out.with_extension("segments.jsonl");
    packing::write_segment_index(&sequences, &index)?;
    run.output(&a.out);
    run.output(&index);
    let used: usize = sequences.iter().map(|s| s.used()).sum();
    let positions = sequences.len() * a.max_len;
    run.note("samples", samples);
    run.note("sequences", sequences.len());
    run.note("rejected", &rejections);
    run.note("all_tokens_samples", modes[0]);
    run.note("response_only_samples", modes[1]);
    run.note("padding_fraction", if positions == 0 { 0.0 } else { 1.0 - used as f64 / positions as f64 });
    run.finish()
}

fn parse_canvas(s: &str) -> Result<(u32, u32)> {
    let (w, h) = s.split_once('x').with_context(|| format!("canvas {s:?} is not WxH"))?;
    Ok((w.parse()?, h.parse()?))
}

fn synthvision(a: SynthArgs) -> Result<()> {
    let mut run = Run::start("synthvision");
    run.seed(a.seed);
    let tasks = a.tasks.iter().map(|t| t.parse()).collect::<Result<Vec<Task>, _>>()?;
    let ramp: DifficultyRamp = a.difficulty_ramp.parse()?;
    let mut cfg = SynthConfig::new(tasks, a.n, ramp, a.seed);
    cfg.canvas = parse_canvas(&a.canvas)?;
    if let Some(dir) = &a.images {
        run.input(dir);
        cfg.raw_images = vision::load_raw_images(dir)?;
        ensure!(!cfg.raw_images.is_empty(), "no PNG images in {}", dir.display());
    }
    let summary = vision::write_dataset(&cfg, &a.out)?;
    run.output(&a.out);
    run.output(&vision::image_dir_for(&a.out));
    run.note("samples", summary.samples);
    run.note("images", summary.images);
    run.finish()
}

fn curate(a: CurateArgs) -> Result<()> {
    let mut run = Run::start("curate");
    let mut cfg = match &a.config {
        Some(p) => {
            run.config(p);
            CurationConfig::from_json_file(p)?
        }
        None => CurationConfig::default(),
    };
    if let Some(stages) = &a.stages {
        cfg.stages = stages.iter().map(|s| s.parse()).collect::<Result<_, _>>()?;
    }
    cfg.benchmarks.extend(a.benchmarks.iter().cloned());
    cfg.include_answers |= a.include_answers;
    if let Some(p) = &a.blocklist {
        run.config(p);
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        Blocklist::parse(&text)?;
        cfg.blocklist.extend(
            text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(String::from),
        );
        if !cfg.stages.contains(&Stage::Content) {
            let at = cfg.stages.iter().position(|s| *s == Stage::Heuristic).map_or(0, |i| i + 1);
            cfg.stages.insert(at, Stage::Content);
        }
    }
    if let Some(cmd) = &a.verifier_cmd {
        cfg.verifier = VerifierConfig::Command { command: cmd.clone(), timeout_ms: a.verifier_timeout_ms };
    }
    if let Some(url) = &a.verifier_url {
        cfg.verifier = VerifierConfig::Http { url: url.clone(), timeout_ms: a.verifier_timeout_ms };
    }
    for b in &cfg.benchmarks {
        run.input(b);
    }
    run.input(&a.input);
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut name = a.out.file_name().unwrap_or_default().to_os_string();
        name.push(".log.jsonl");
        a.out.with_file_name(name)
    });
    let pipeline = Pipeline::new(cfg)?;
    let summary = curation::curate_files(&pipeline, &a.input, &a.out, &log_path)?;
    run.output(&a.out);
    run.output(&log_path);
    run.note("stages", &pipeline.config().stages);
    run.note("inputs", summary.inputs);
    run.note("survivors", summary.survivors);
    run.note("removed", summary.removed);
    run.finish()
}

fn plan(p: PlanCommand) -> Result<()> {
    let mut run = Run::start("plan");
    match p {
        PlanCommand::Emit { stage, all, out } => {
            if all {
                fs::create_dir_all(&out)?;
                for cfg in stageplan::builtin_recipe() {
                    fs::write(out.join(format!("{}.json", cfg.stage_id)), cfg.to_json() + "\n")?;
                }
                // Directory output: the manifest lands beside it, not inside.
                run.output(&out);
            } else {
                let id: StageId = stage.context("--stage or --all is required")?.parse()?;
                fs::write(&out, stageplan::builtin_stage(id).to_json() + "\n")?;
                run.output(&out);
            }
        }
        PlanCommand::Validate { files } => {
            let mut configs = Vec::new();
            let mut failures = Vec::new();
            for f in &files {
                run.input(f);
                let text = fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
                let cfg = StageConfig::from_json(&text).with_context(|| format!("parsing {}", f.display()))?;
                let v = stageplan::validate_config(&cfg);
                run.event("validated", json!({"file": f.display().to_string(), "pass": v.pass, "reasons": v.reasons}));
                failures.extend(v.reasons);
                configs.push(cfg);
            }
            if configs.len() > 1 {
                let v = stageplan::validate_recipe(&configs);
                failures.extend(v.reasons.into_iter().filter(|r| r.contains("merge_after") || r.contains("duplicate")));
            }
            ensure!(failures.is_empty(), "invalid stage config: {}", failures.join("; "));
        }
    }
    run.finish()
}
