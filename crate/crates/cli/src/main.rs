use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use slowfast::action::{parse_action, serialize_action, ActionDecision};
use slowfast::control::{write_traces, Controller, InferenceMode};
use slowfast::enhance::{
    enhance_corpus, enhance_sample, prompt_prefix, read_enhanced, request_turn, write_enhanced, EnhanceConfig,
    EnhancedCorpus, PromptStyle,
};
use slowfast::eval::{
    evaluate, format_latency, format_mode_report, latency_profile, latency_row, mode_report, sweep_latent, write_sweep,
    LatencyReport, LatencyRow, DEFAULT_TAU,
};
use slowfast::model::{generate, Decision, GenerateConfig, Model, ModelConfig, SlotTag, TokenSequence};
use slowfast::sim::{
    generate_corpus, generate_screen, read_corpus, write_corpus, Pixels, Screen, ScreenConfig, TemplateMix, UiElement,
};
use slowfast::train::{run_recipe, Phase, Recipe};

/// Only environment variable read: prefix for relative output paths.
const OUT_ENV: &str = "SLOWFAST_OUT";

#[derive(Parser, Serialize)]
#[command(name = "slowfast", version, about = "Slow-fast GUI agent: corpus, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Generate a seeded synthetic episode corpus.
    GenCorpus(GenCorpus),
    /// Turn a corpus into training sequences.
    Enhance(Enhance),
    /// Run one training phase or the whole recipe.
    Train(Train),
    /// Score a checkpoint on an enhanced corpus.
    Eval(Eval),
    /// Predict one action for a screen and goal.
    Infer(Infer),
    /// Finite-difference check of the full model gradient.
    Gradcheck(Gradcheck),
    /// Retrain and score for several latent counts.
    SweepLatent(SweepLatent),
    /// Write the perception attention map for one sample.
    DumpAttn(DumpAttn),
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Profile {
    /// 32×32 screens, width 32, two layers.
    Desk,
    /// 64×64 screens, width 64, three layers.
    Reference,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Style {
    Compact,
    Full,
}

impl From<Style> for PromptStyle {
    fn from(s: Style) -> Self {
        match s {
            Style::Compact => PromptStyle::Compact,
            Style::Full => PromptStyle::Full,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum RecipeKind {
    /// Learning rates sized for a randomly initialized toy model.
    Desk,
    /// The reference learning rates, meant for a pretrained backbone.
    Reference,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum PhaseArg {
    Align,
    Thought,
    Finetune,
    All,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize, PartialEq)]
#[serde(rename_all = "kebab-case")]
enum ModeArg {
    Adaptive,
    Fast,
    Slow,
    All,
}

impl ModeArg {
    fn name(self) -> &'static str {
        match self {
            ModeArg::Adaptive => "adaptive",
            ModeArg::Fast => "fast",
            ModeArg::Slow => "slow",
            ModeArg::All => "all",
        }
    }
}

#[derive(Args, Serialize, Clone)]
struct ModelArgs {
    /// Model size profile.
    #[arg(long, value_enum, default_value = "desk")]
    profile: Profile,
    /// Latent thinking slots per step.
    #[arg(long, default_value_t = 8)]
    n_latent: usize,
    /// Model initialization seed.
    #[arg(long, default_value_t = 0)]
    model_seed: u64,
}

impl ModelArgs {
    fn config(&self) -> ModelConfig {
        let base = match self.profile {
            Profile::Desk => ModelConfig::desk(),
            Profile::Reference => ModelConfig::default(),
        };
        ModelConfig {
            n_latent: self.n_latent,
            seed: self.model_seed,
            ..base
        }
    }
}

#[derive(Args, Serialize)]
struct GenCorpus {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of episodes.
    #[arg(long, default_value_t = 1000)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Template weights, e.g. `tap_target=0.4,scroll_then_tap=0.25,type_text=0.25,impossible=0.1`.
    #[arg(long, default_value = "tap_target=0.4,scroll_then_tap=0.25,type_text=0.25,impossible=0.1")]
    mix: String,
    /// Screen side in pixels.
    #[arg(long, default_value_t = 32)]
    size: u32,
}

#[derive(Args, Serialize)]
struct Enhance {
    /// Corpus directory written by gen-corpus.
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "compact")]
    style: Style,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Serialize)]
struct Train {
    #[arg(long, value_enum, default_value = "all")]
    phase: PhaseArg,
    /// Enhanced corpus directory.
    #[arg(long)]
    data: PathBuf,
    /// Run directory.
    #[arg(long)]
    run: PathBuf,
    /// Start from this checkpoint directory instead of a fresh model.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Data-order seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "desk")]
    recipe: RecipeKind,
    /// Override the epoch count of every selected phase.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override the learning rate of every selected phase.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Use only the first N samples.
    #[arg(long)]
    limit: Option<usize>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Serialize)]
struct Eval {
    /// Checkpoint directory.
    #[arg(long)]
    model: PathBuf,
    /// Enhanced corpus directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "adaptive")]
    mode: ModeArg,
    /// Click and select match radius in normalized units.
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    /// Use only the first N samples.
    #[arg(long)]
    limit: Option<usize>,
    /// Untimed warm-up samples per mode before latency profiling.
    #[arg(long, default_value_t = 5)]
    warmup: usize,
    /// Report directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct Infer {
    #[arg(long)]
    model: PathBuf,
    /// JSON screen: `{"width":32,"height":32,"elements":[...]}`.
    #[arg(long)]
    screen: PathBuf,
    #[arg(long)]
    goal: String,
    /// Prior action text; repeat for up to two entries, oldest first.
    #[arg(long)]
    history: Vec<String>,
    #[arg(long, value_enum, default_value = "adaptive")]
    mode: ModeArg,
    #[arg(long, value_enum, default_value = "compact")]
    style: Style,
}

#[derive(Args, Serialize)]
struct Gradcheck {
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-4)]
    eps: f64,
    /// Coordinates sampled per parameter tensor.
    #[arg(long, default_value_t = 64)]
    per_tensor: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pass threshold on the maximum relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args, Serialize)]
struct SweepLatent {
    /// Training corpus directory (raw, as written by gen-corpus).
    #[arg(long)]
    corpus: PathBuf,
    /// Held-out corpus directory.
    #[arg(long)]
    heldout: PathBuf,
    /// Latent counts to train.
    #[arg(long, value_delimiter = ',', default_value = "0,4,8,16,20")]
    values: Vec<usize>,
    /// Plot-data output file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "desk")]
    recipe: RecipeKind,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_enum, default_value = "compact")]
    style: Style,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args, Serialize)]
struct DumpAttn {
    #[arg(long)]
    model: PathBuf,
    /// Enhanced corpus directory.
    #[arg(long)]
    data: PathBuf,
    /// Sample index within the corpus.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Output JSON file.
    #[arg(long)]
    out: PathBuf,
}

enum CliError {
    Validation(String),
    Internal(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Internal(m) => f.write_str(m),
        }
    }
}

impl From<slowfast::Error> for CliError {
    fn from(e: slowfast::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Internal(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Internal(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Validation(e.to_string())
    }
}

type Res<T = ()> = Result<T, CliError>;

fn out_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUT_ENV) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

#[derive(Serialize)]
struct Snapshot<'a> {
    version: &'static str,
    argv: Vec<String>,
    #[serde(flatten)]
    cli: &'a Cli,
}

impl Snapshot<'_> {
    /// Writes `{command}_config.json` into `dir`.
    fn write(&self, dir: &Path) -> Res {
        fs::create_dir_all(dir)?;
        let name = match &self.cli.command {
            Command::GenCorpus(_) => "gen_corpus",
            Command::Enhance(_) => "enhance",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Infer(_) => "infer",
            Command::Gradcheck(_) => "gradcheck",
            Command::SweepLatent(_) => "sweep_latent",
            Command::DumpAttn(_) => "dump_attn",
        };
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        fs::write(dir.join(format!("{name}_config.json")), v)?;
        Ok(())
    }
}

fn input(p: &Path) -> Res<&Path> {
    if p.exists() {
        Ok(p)
    } else {
        Err(CliError::Validation(format!("{} does not exist", p.display())))
    }
}

fn recipe(kind: RecipeKind, seed: u64) -> Recipe {
    match kind {
        RecipeKind::Desk => Recipe::desk(seed),
        RecipeKind::Reference => Recipe::reference(seed),
    }
}

fn modes(m: ModeArg) -> Vec<InferenceMode> {
    match m {
        ModeArg::Adaptive => vec![InferenceMode::Adaptive],
        ModeArg::Fast => vec![InferenceMode::ForcedFast],
        ModeArg::Slow => vec![InferenceMode::ForcedSlow],
        ModeArg::All => InferenceMode::ALL.to_vec(),
    }
}

fn gen_corpus(a: &GenCorpus, snap: &Snapshot) -> Res {
    let out = out_path(&a.out);
    let mix = TemplateMix::parse(&a.mix)?;
    let corpus = generate_corpus(a.seed, a.episodes, &mix, &ScreenConfig::for_size(a.size, a.size))?;
    let m = write_corpus(&out, &corpus)?;
    snap.write(&out)?;
    println!("{} episodes, {} steps -> {}", m.episodes, m.steps, out.display());
    for (label, n) in &m.labels {
        println!("  {label:<5}{n:>8}");
    }
    println!("corpus sha256 {}", m.corpus_sha256);
    Ok(())
}

fn check_geometry(corpus: &ScreenConfig, cfg: &ModelConfig) -> Res {
    if (corpus.width as usize, corpus.height as usize) != (cfg.image_width, cfg.image_height) {
        return Err(CliError::Validation(format!(
            "corpus screens are {}x{} but the model profile expects {}x{}",
            corpus.width, corpus.height, cfg.image_width, cfg.image_height
        )));
    }
    Ok(())
}

fn enhance(a: &Enhance, snap: &Snapshot) -> Res {
    let out = out_path(&a.out);
    let corpus = read_corpus(input(&a.corpus)?)?;
    let cfg = a.model.config();
    check_geometry(&corpus.manifest.screen, &cfg)?;
    let ecfg = EnhanceConfig::for_model(&cfg, a.style.into());
    let enhanced = enhance_corpus(&corpus, &ecfg)?;
    let m = write_enhanced(&out, &enhanced, &ecfg)?;
    snap.write(&out)?;
    println!("{} samples ({} fast, {} slow) -> {}", m.stats.samples, m.stats.fast, m.stats.slow, out.display());
    Ok(())
}

fn load_data(dir: &Path, limit: Option<usize>, model: &ModelConfig) -> Res<EnhancedCorpus> {
    let (mut data, manifest) = read_enhanced(input(dir)?)?;
    if EnhanceConfig::for_model(model, manifest.config.style) != manifest.config {
        return Err(CliError::Validation(
            "enhanced corpus geometry or latent count differs from the model".into(),
        ));
    }
    if let Some(n) = limit {
        data = data.take(n);
    }
    Ok(data)
}

fn train(a: &Train, snap: &Snapshot) -> Res {
    let run = out_path(&a.run);
    let mut model = match &a.init {
        Some(dir) => Model::load(input(dir)?)?,
        None => Model::new(a.model.config())?,
    };
    let data = load_data(&a.data, a.limit, &model.config)?;
    let (_, manifest) = read_enhanced(&a.data)?;
    let mut r = recipe(a.recipe, a.seed);
    let keep = match a.phase {
        PhaseArg::Align => Some(Phase::Align),
        PhaseArg::Thought => Some(Phase::Thought),
        PhaseArg::Finetune => Some(Phase::Finetune),
        PhaseArg::All => None,
    };
    if let Some(k) = keep {
        r.phases.retain(|p| p.phase == k);
    }
    for p in &mut r.phases {
        if let Some(e) = a.epochs {
            p.epochs = e;
        }
        if let Some(lr) = a.lr {
            p.lr = lr;
        }
        if let Some(b) = a.batch {
            p.batch = b;
        }
    }
    snap.write(&run)?;
    let (trace, man) = run_recipe(&mut model, &data, &manifest.samples_sha256, &r, Some(&run))?;
    for e in &trace {
        println!("{:<9} {:<9} epoch {:>2}  loss {:.5}", e.phase.name(), e.stage, e.epoch, e.mean_loss);
    }
    if let Some(m) = man {
        for p in &m.phases {
            println!("{} checkpoint {} sha256 {}", p.phase.name(), p.checkpoint, p.checkpoint_sha256);
        }
        println!("parameters {} ({} trainable, {} frozen)", m.census.total, m.census.trainable, m.census.frozen);
    }
    Ok(())
}

/// Latency rows from every `latency_{mode}.json` in `dir`, fast to slow.
fn latency_table(dir: &Path) -> Res<String> {
    let mut rows = Vec::new();
    for mode in InferenceMode::ALL {
        let p = dir.join(format!("latency_{}.json", mode.name()));
        if p.exists() {
            let row: LatencyRow = serde_json::from_slice(&fs::read(p)?)?;
            rows.push(row);
        }
    }
    let report = LatencyReport {
        ordering: None,
        tokens_ordered: rows.windows(2).all(|w| w[0].mean_tokens <= w[1].mean_tokens),
        note: "modes measured in separate runs".into(),
        rows,
    };
    Ok(format_latency(&report))
}

fn eval(a: &Eval, snap: &Snapshot) -> Res {
    let out = out_path(&a.out);
    let model = Model::load(input(&a.model)?)?;
    let data = load_data(&a.data, a.limit, &model.config)?;
    let (_, manifest) = read_enhanced(&a.data)?;
    let c = Controller::new(&model, manifest.config.clone());
    snap.write(&out)?;
    let mut text = String::new();
    let mut reports = Vec::new();
    if a.mode == ModeArg::All {
        let (lat, by_mode) = latency_profile(&c, &data, a.warmup, a.tau)?;
        for traces in &by_mode {
            let r = mode_report(traces, &data, a.tau)?;
            write_traces(&out.join(format!("traces_{}.jsonl", r.mode.name())), traces)?;
            text.push_str(&format_mode_report(&r));
            text.push('\n');
            reports.push(r);
        }
        for row in &lat.rows {
            fs::write(out.join(format!("latency_{}.json", row.mode.name())), serde_json::to_vec_pretty(row)?)?;
        }
        let l = format_latency(&lat);
        fs::write(out.join("latency.txt"), &l)?;
        text.push_str(&l);
    } else {
        for mode in modes(a.mode) {
            for s in data.samples.iter().take(a.warmup) {
                c.predict_sample(&data, s, mode)?;
            }
            let traces = evaluate(&c, &data, mode)?;
            write_traces(&out.join(format!("traces_{}.jsonl", mode.name())), &traces)?;
            let r = mode_report(&traces, &data, a.tau)?;
            fs::write(out.join(format!("latency_{}.json", mode.name())), serde_json::to_vec_pretty(&latency_row(mode, &traces, &data, a.tau)?)?)?;
            text.push_str(&format_mode_report(&r));
            text.push('\n');
            reports.push(r);
        }
        let l = latency_table(&out)?;
        fs::write(out.join("latency.txt"), &l)?;
        text.push_str(&l);
    }
    let mut json = serde_json::to_vec_pretty(&reports)?;
    json.push(b'\n');
    fs::write(out.join(format!("report_{}.json", a.mode.name())), json)?;
    print!("{text}");
    Ok(())
}

#[derive(serde::Deserialize)]
struct ScreenFile {
    width: u32,
    height: u32,
    elements: Vec<UiElement>,
}

fn infer(a: &Infer) -> Res {
    let model = Model::load(input(&a.model)?)?;
    let sf: ScreenFile = serde_json::from_str(&fs::read_to_string(input(&a.screen)?)?)?;
    if (sf.width as usize, sf.height as usize) != (model.config.image_width, model.config.image_height) {
        return Err(CliError::Validation(format!(
            "screen is {}x{} but the model expects {}x{}",
            sf.width, sf.height, model.config.image_width, model.config.image_height
        )));
    }
    let screen = Screen::new(sf.width, sf.height, sf.elements);
    let history = a.history.iter().map(|h| parse_action(h)).collect::<Result<Vec<_>, _>>()?;
    let c = Controller::new(&model, EnhanceConfig::for_model(&model.config, a.style.into()));
    for mode in modes(a.mode) {
        let t = c.predict_step(&screen.pixels, &a.goal, &history, mode)?;
        println!("mode {}", mode.name());
        println!("path {}", t.path.as_str());
        println!("action {}", t.action_text);
        match &t.action {
            Some(act) => println!("parsed {}", serialize_action(act)?),
            None => println!("parsed <parse failure>"),
        }
        println!("tokens {} perception {} elapsed_us {}", t.tokens, t.perception_invocations, t.us_elapsed);
    }
    Ok(())
}

/// Small model and one Slow training sequence that exercises every slot kind.
fn gradcheck_case(seed: u64) -> slowfast::Result<(Model, TokenSequence, Pixels)> {
    let cfg = ModelConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_f: 8,
        m_slots: 2,
        n_latent: 2,
        max_seq: 192,
        image_width: 16,
        image_height: 16,
        seed,
        ..ModelConfig::default()
    };
    let screen = generate_screen(seed, &ScreenConfig::for_size(16, 16))?;
    let ecfg = EnhanceConfig::for_model(&cfg, PromptStyle::Compact);
    let action = ActionDecision::click(screen.elements[0].center(16, 16));
    let s = enhance_sample(&ecfg, &screen, "tap", &[], &action)?;
    Ok((Model::new(cfg)?, s.sequence, screen.pixels))
}

fn gradcheck(a: &Gradcheck) -> Res {
    let (mut model, seq, px) = gradcheck_case(a.seed)?;
    let r = model.grad_check(&seq, Some(&px), a.eps, a.per_tensor, a.seed)?;
    println!("coordinates {}", r.coordinates);
    println!("max relative error {:.3e} ({})", r.max_rel_error, r.worst.as_deref().unwrap_or("-"));
    if r.max_rel_error <= a.tolerance {
        println!("pass (tolerance {:.0e})", a.tolerance);
        Ok(())
    } else {
        Err(CliError::Validation(format!(
            "max relative error {:.3e} exceeds {:.0e}",
            r.max_rel_error, a.tolerance
        )))
    }
}

fn sweep(a: &SweepLatent, snap: &Snapshot) -> Res {
    let out = out_path(&a.out);
    let train = read_corpus(input(&a.corpus)?)?;
    let heldout = read_corpus(input(&a.heldout)?)?;
    let base = a.model.config();
    check_geometry(&train.manifest.screen, &base)?;
    check_geometry(&heldout.manifest.screen, &base)?;
    let mut r = recipe(a.recipe, a.seed);
    if let Some(e) = a.epochs {
        r.phases.iter_mut().for_each(|p| p.epochs = e);
    }
    let rows = sweep_latent(&base, a.style.into(), &r, &train, &heldout, &a.values, a.tau)?;
    write_sweep(&out, &rows)?;
    snap.write(out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")))?;
    println!("{:>9}{:>9}{:>10}", "n_latent", "AMS", "routing");
    for row in &rows {
        println!("{:>9}{:>9.2}{:>10.4}", row.n_latent, row.ams, row.routing_accuracy);
    }
    println!("plot data -> {}", out.display());
    Ok(())
}

fn dump_attn(a: &DumpAttn, snap: &Snapshot) -> Res {
    let out = out_path(&a.out);
    let model = Model::load(input(&a.model)?)?;
    let data = load_data(&a.data, None, &model.config)?;
    let (_, manifest) = read_enhanced(&a.data)?;
    let s = data.samples.get(a.index).ok_or_else(|| {
        CliError::Validation(format!("sample {} out of range; the corpus has {}", a.index, data.samples.len()))
    })?;
    let history = s.history.iter().map(|h| parse_action(h)).collect::<Result<Vec<_>, _>>()?;
    let ecfg = manifest.config;
    let cfg = GenerateConfig {
        decision: Decision::Slow,
        n_latent: Some(ecfg.n_latent),
        request: request_turn(ecfg.style),
        ..GenerateConfig::default()
    };
    let g = generate(&model, &prompt_prefix(&ecfg, &s.goal, &history)?, Some(data.image(s)?), &cfg)?;
    let dump = g
        .attention
        .first()
        .ok_or_else(|| CliError::Internal("forced slow generation made no perception call".into()))?;
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    snap.write(dir)?;
    dump.write(&out)?;
    let injected = g.sequence.count_tag(SlotTag::PerceptionFeature);
    println!("grid {:?}, keys {}, injected slots {injected}", dump.patch_grid, dump.keys);
    println!("action {}", g.action_text);
    println!("attention -> {}", out.display());
    Ok(())
}

fn run(cli: &Cli) -> Res {
    let snap = Snapshot {
        version: env!("CARGO_PKG_VERSION"),
        argv: std::env::args().skip(1).collect(),
        cli,
    };
    match &cli.command {
        Command::GenCorpus(a) => gen_corpus(a, &snap),
        Command::Enhance(a) => enhance(a, &snap),
        Command::Train(a) => train(a, &snap),
        Command::Eval(a) => eval(a, &snap),
        Command::Infer(a) => infer(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::SweepLatent(a) => sweep(a, &snap),
        Command::DumpAttn(a) => dump_attn(a, &snap),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Internal(m)) => {
            eprintln!("internal error: {m}");
            ExitCode::from(2)
        }
    }
}
