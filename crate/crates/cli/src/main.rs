use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use weakalign::augment::{
    permutation_distribution_with, sample_permutation, windowed_permutations, AugmentStrategy,
};
use weakalign::dtw::{dtw, optimal_path, softdtw_backward, softdtw_forward};
use weakalign::gradcheck::{run_gradcheck, GradcheckConfig};
use weakalign::io::{matrix_to_csv, matrix_to_pgm, read_sequence_csv, write_atomic, write_json};
use weakalign::loss::LossForm;
use weakalign::s2dtw::{path_matrix, s2dtw, PathVariant, S2dtwParams, StageOrder};
use weakalign::seqcore::{pairwise_distance, DistanceMeasure, Modality};
use weakalign::synth::{make_corpus, read_corpus, write_corpus, CorpusConfig, CorpusEntry, ScenarioKind, ScenarioSpec};
use weakalign::trainer::{evaluate_retrieval, run_ablation, train, video_collapse, EncoderParams, TrainConfig};
use weakalign::Matrix;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Exit status: 1 usage or input errors, 2 numeric failures, 3 failed checks.
enum Failure {
    Usage(String),
    Core(weakalign::Error),
    Check(String),
}

impl From<weakalign::Error> for Failure {
    fn from(e: weakalign::Error) -> Self {
        Failure::Core(e)
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Core(e.into())
    }
}

type CmdResult<T = ()> = Result<T, Failure>;

#[derive(Parser)]
#[command(name = "weakalign", version, about = "Weak temporal alignment of clip and caption sequences")]
struct Cli {
    /// Seed for every random choice; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory for all output files.
    #[arg(long, global = true, default_value = "out")]
    output_dir: PathBuf,

    /// JSON file with the command's settings; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Progress on stderr (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Align two sequence files and write every intermediate matrix.
    Align(AlignArgs),
    /// Compare analytic gradients with finite differences on random instances.
    Gradcheck(GradcheckArgs),
    /// List windowed permutations and, given a sequence, their sampling probabilities.
    Perms(PermsArgs),
    /// Generate a synthetic corpus.
    Synth(SynthArgs),
    /// Train encoders on a corpus.
    Train(TrainArgs),
    /// Evaluate saved encoders on a corpus's test split.
    Eval(EvalArgs),
    /// Run the six-row ablation table.
    Ablate(AblateArgs),
}

fn positive(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be finite and > 0, got {v}"))
    }
}

fn non_negative(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be finite and >= 0, got {v}"))
    }
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("must lie in [0, 1], got {v}"))
    }
}

fn parse_with<T: std::str::FromStr<Err = weakalign::Error>>(s: &str) -> Result<T, String> {
    s.parse().map_err(|e: weakalign::Error| e.to_string())
}

fn parse_strategy(s: &str) -> Result<AugmentStrategy, String> {
    match s {
        "preserving" => Ok(AugmentStrategy::Preserving),
        "uniform" => Ok(AugmentStrategy::Uniform),
        "inverse" => Ok(AugmentStrategy::Inverse),
        other => Err(format!("unknown strategy '{other}' (preserving, uniform, inverse)")),
    }
}

/// Alignment settings shared by several commands.
#[derive(Args, Default)]
struct AlignmentFlags {
    /// Softmin temperature.
    #[arg(long, value_parser = positive)]
    gamma: Option<f64>,
    /// Cost of matching through a dummy element.
    #[arg(long, value_parser = non_negative)]
    dummy_cost: Option<f64>,
    /// cosine_dist or neg_dot.
    #[arg(long, value_parser = parse_with::<DistanceMeasure>)]
    measure: Option<DistanceMeasure>,
    /// smooth-first or merge-first.
    #[arg(long, value_parser = parse_with::<StageOrder>)]
    order: Option<StageOrder>,
}

impl AlignmentFlags {
    fn apply(&self, p: &mut S2dtwParams) {
        if let Some(v) = self.gamma {
            p.gamma = v;
        }
        if let Some(v) = self.dummy_cost {
            p.dummy_cost = v;
        }
        if let Some(v) = self.measure {
            p.measure = v;
        }
        if let Some(v) = self.order {
            p.order = v;
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Variant {
    #[default]
    S2dtw,
    Softdtw,
    Dtw,
}

#[derive(Args)]
struct AlignArgs {
    /// Clip sequence CSV.
    x: PathBuf,
    /// Caption sequence CSV.
    y: PathBuf,
    #[arg(long, value_enum)]
    variant: Option<Variant>,
    #[command(flatten)]
    alignment: AlignmentFlags,
    /// Disable local neighborhood smoothing.
    #[arg(long)]
    no_smoothing: bool,
    /// Disable dummy insertion.
    #[arg(long)]
    no_weak_alignment: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct AlignConfig {
    seed: u64,
    variant: Variant,
    alignment: S2dtwParams,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(0..=100_000))]
    trials: Option<u64>,
    /// Largest sequence length per instance.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..=12))]
    max_len: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..=64))]
    dim: Option<u64>,
    /// Temperatures to cycle through, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = positive)]
    gammas: Option<Vec<f64>>,
    /// Stage orders to cycle through, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_with::<StageOrder>)]
    orders: Option<Vec<StageOrder>>,
    #[arg(long, value_parser = non_negative)]
    dummy_cost: Option<f64>,
    #[arg(long, value_parser = positive)]
    tolerance: Option<f64>,
    /// Flip the analytic gradient's sign to confirm the checker fails.
    #[arg(long)]
    fault: bool,
}

#[derive(Args)]
struct PermsArgs {
    /// Sequence length (defaults to the input's length).
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..=64))]
    n: Option<u64>,
    /// Largest displacement.
    #[arg(long, value_parser = clap::value_parser!(u64).range(0..=64))]
    w: Option<u64>,
    #[arg(long, value_parser = positive)]
    tau: Option<f64>,
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<AugmentStrategy>,
    #[arg(long, value_parser = parse_with::<DistanceMeasure>)]
    measure: Option<DistanceMeasure>,
    /// Sequence CSV whose self-similarity defines the probabilities.
    #[arg(long)]
    input: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PermsConfig {
    seed: u64,
    n: usize,
    w: usize,
    tau: f64,
    strategy: AugmentStrategy,
    measure: DistanceMeasure,
}

impl Default for PermsConfig {
    fn default() -> Self {
        PermsConfig {
            seed: 0,
            n: 3,
            w: 1,
            tau: 0.1,
            strategy: AugmentStrategy::Preserving,
            measure: DistanceMeasure::CosineDist,
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    /// sequential, non_sequential, partial_irrelevant, entire_irrelevant or mixed.
    #[arg(long)]
    kind: Option<String>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..=1000))]
    n: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..=1000))]
    m: Option<u64>,
    /// Training pairs per scenario kind.
    #[arg(long, value_parser = clap::value_parser!(u64).range(0..=1_000_000))]
    train: Option<u64>,
    /// Test pairs per scenario kind.
    #[arg(long, value_parser = clap::value_parser!(u64).range(0..=1_000_000))]
    test: Option<u64>,
    #[arg(long, value_parser = non_negative)]
    noise: Option<f64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(0..=64))]
    shift_window: Option<u64>,
    #[arg(long, value_parser = unit_interval)]
    irrelevance_rate: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SynthConfig {
    seed: u64,
    kind: String,
    n: usize,
    m: usize,
    train: usize,
    test: usize,
    noise: f64,
    shift_window: usize,
    irrelevance_rate: f64,
    latent_dim: usize,
    d_raw: usize,
    modality_gap: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            kind: "mixed".into(),
            n: 4,
            m: 4,
            train: 16,
            test: 5,
            noise: 0.0,
            shift_window: 1,
            irrelevance_rate: 0.25,
            latent_dim: 8,
            d_raw: 16,
            modality_gap: 0.5,
        }
    }
}

impl SynthConfig {
    fn corpus_config(&self) -> CmdResult<CorpusConfig> {
        let kinds: Vec<ScenarioKind> = if self.kind == "mixed" {
            ScenarioKind::ALL.to_vec()
        } else {
            vec![self.kind.parse()?]
        };
        Ok(CorpusConfig {
            seed: self.seed,
            latent_dim: self.latent_dim,
            d_raw: self.d_raw,
            modality_gap: self.modality_gap,
            entries: kinds
                .into_iter()
                .map(|kind| CorpusEntry {
                    template: ScenarioSpec {
                        kind,
                        n: self.n,
                        m: self.m,
                        d_raw: self.d_raw,
                        noise: self.noise,
                        shift_window: self.shift_window,
                        irrelevance_rate: self.irrelevance_rate,
                        seed: 0,
                    },
                    train: self.train,
                    test: self.test,
                })
                .collect(),
        })
    }
}

/// Training settings shared by `train` and `ablate`.
#[derive(Args, Default)]
struct TrainFlags {
    #[arg(long, value_parser = clap::value_parser!(u64).range(0..=10_000_000))]
    steps: Option<u64>,
    #[arg(long, value_parser = non_negative)]
    learning_rate: Option<f64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..=4096))]
    batch_size: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..=4096))]
    d_emb: Option<u64>,
    /// log_of_sum, sum_of_logs or positives_only.
    #[arg(long, value_parser = parse_with::<LossForm>)]
    loss_form: Option<LossForm>,
    /// Disable temporal augmentation.
    #[arg(long)]
    no_ta: bool,
    /// Disable weak alignment.
    #[arg(long)]
    no_wa: bool,
    /// Disable local smoothing.
    #[arg(long)]
    no_ls: bool,
    /// Augmentation window.
    #[arg(long, value_parser = clap::value_parser!(u64).range(0..=64))]
    window: Option<u64>,
    /// Augmentation temperature.
    #[arg(long, value_parser = positive)]
    tau: Option<f64>,
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<AugmentStrategy>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(0..=10_000_000))]
    eval_every: Option<u64>,
    #[command(flatten)]
    alignment: AlignmentFlags,
}

impl TrainFlags {
    fn apply(&self, c: &mut TrainConfig) {
        if let Some(v) = self.steps {
            c.steps = v as usize;
        }
        if let Some(v) = self.learning_rate {
            c.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v as usize;
        }
        if let Some(v) = self.d_emb {
            c.d_emb = v as usize;
        }
        if let Some(v) = self.loss_form {
            c.loss_form = v;
        }
        if self.no_ta {
            c.ablation.temporal_augmentation = false;
        }
        if self.no_wa {
            c.ablation.weak_alignment = false;
        }
        if self.no_ls {
            c.ablation.local_smoothing = false;
        }
        if let Some(v) = self.window {
            c.augment.window = v as usize;
        }
        if let Some(v) = self.tau {
            c.augment.tau = v;
        }
        if let Some(v) = self.strategy {
            c.augment.strategy = v;
        }
        if let Some(v) = self.eval_every {
            c.eval_every = v as usize;
        }
        self.alignment.apply(&mut c.alignment);
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus directory written by `synth`.
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Encoder JSON written by `train`.
    #[arg(long)]
    encoders: PathBuf,
    #[command(flatten)]
    alignment: AlignmentFlags,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct EvalConfig {
    seed: u64,
    alignment: S2dtwParams,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Training seeds, comma separated.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AblateConfig {
    train: TrainConfig,
    seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            train: TrainConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CmdResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))
}

struct Context {
    output_dir: PathBuf,
    verbose: u8,
}

impl Context {
    fn path(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }

    /// Prints the resolved settings and saves them next to the outputs.
    fn echo<T: Serialize>(&self, command: &str, config: &T) -> CmdResult {
        println!("{}", serde_json::to_string_pretty(config)?);
        write_json(self.path(&format!("{command}_config.json")), config)?;
        Ok(())
    }

    fn note(&self, msg: impl AsRef<str>) {
        if self.verbose > 0 {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn cmd_align(ctx: &Context, args: &AlignArgs, mut cfg: AlignConfig) -> CmdResult {
    if let Some(v) = args.variant {
        cfg.variant = v;
    }
    args.alignment.apply(&mut cfg.alignment);
    if args.no_smoothing {
        cfg.alignment.smoothing = false;
    }
    if args.no_weak_alignment {
        cfg.alignment.weak_alignment = false;
    }
    cfg.alignment.validate()?;
    ctx.echo("align", &cfg)?;

    let x = read_sequence_csv(&args.x, Modality::Clip)?;
    let y = read_sequence_csv(&args.y, Modality::Caption)?;
    let params = cfg.alignment;
    let (cost, delta, delta_hat, grid, m_hat, heat, path) = match cfg.variant {
        Variant::S2dtw => {
            let res = s2dtw(&x, &y, &params)?;
            let heat = path_matrix(&res, PathVariant::S2dtw)?;
            let m_hat = res.m_hat()?.clone();
            (res.cost, res.delta, res.delta_hat, res.grid, m_hat, heat, None)
        }
        Variant::Softdtw => {
            let delta = pairwise_distance(&x, &y, params.measure)?.into_matrix();
            let (cost, tables) = softdtw_forward(&delta, params.gamma)?;
            let m = softdtw_backward(&delta, &tables, params.gamma)?;
            let peak = m.max_abs();
            let heat = if peak > 0.0 { m.map(|v| v / peak) } else { m.clone() };
            (cost, delta.clone(), delta.clone(), delta, m, heat, None)
        }
        Variant::Dtw => {
            let delta = pairwise_distance(&x, &y, params.measure)?.into_matrix();
            let (cost, tables) = dtw(&delta)?;
            let path = optimal_path(&tables);
            let mut m = Matrix::zeros(delta.rows(), delta.cols());
            for &(i, j) in path.steps() {
                m.set(i - 1, j - 1, 1.0);
            }
            (cost, delta.clone(), delta.clone(), delta, m.clone(), m, Some(path))
        }
    };

    write_atomic(ctx.path("delta.csv"), matrix_to_csv(&delta).as_bytes())?;
    write_atomic(ctx.path("delta_hat.csv"), matrix_to_csv(&delta_hat).as_bytes())?;
    write_atomic(ctx.path("delta_phi.csv"), matrix_to_csv(&grid).as_bytes())?;
    write_atomic(ctx.path("m_hat.csv"), matrix_to_csv(&m_hat).as_bytes())?;
    write_atomic(ctx.path("m_hat.pgm"), &matrix_to_pgm(&heat))?;
    let summary = serde_json::json!({
        "variant": cfg.variant,
        "cost": cost,
        "n": x.len(),
        "m": y.len(),
        "path": path.map(|p| p.0),
    });
    write_json(ctx.path("cost.json"), &summary)?;
    ctx.note(format!("cost {cost}"));
    Ok(())
}

fn cmd_gradcheck(ctx: &Context, args: &GradcheckArgs, mut cfg: GradcheckConfig) -> CmdResult {
    if let Some(v) = args.trials {
        cfg.trials = v as usize;
    }
    if let Some(v) = args.max_len {
        cfg.max_len = v as usize;
    }
    if let Some(v) = args.dim {
        cfg.dim = v as usize;
    }
    if let Some(v) = &args.gammas {
        cfg.gammas = v.clone();
    }
    if let Some(v) = &args.orders {
        cfg.orders = v.clone();
    }
    if let Some(v) = args.dummy_cost {
        cfg.dummy_cost = v;
    }
    if let Some(v) = args.tolerance {
        cfg.tolerance = v;
    }
    cfg.fault |= args.fault;
    if cfg.max_len > weakalign::dtw::BRUTEFORCE_MAX_SIDE {
        return Err(Failure::Usage(format!(
            "max_len {} exceeds {}",
            cfg.max_len,
            weakalign::dtw::BRUTEFORCE_MAX_SIDE
        )));
    }
    ctx.echo("gradcheck", &cfg)?;
    let report = run_gradcheck(&cfg)?;
    write_json(ctx.path("gradcheck.json"), &report)?;
    println!("max relative error M_hat: {:.3e}", report.max_error_m_hat);
    println!("max relative error embeddings: {:.3e}", report.max_error_embeddings);
    if report.passed {
        println!("gradcheck passed (tolerance {:.1e})", cfg.tolerance);
        Ok(())
    } else {
        Err(Failure::Check(format!("gradcheck failed (tolerance {:.1e})", cfg.tolerance)))
    }
}

fn cmd_perms(ctx: &Context, args: &PermsArgs, mut cfg: PermsConfig) -> CmdResult {
    let input = args
        .input
        .as_ref()
        .map(|p| read_sequence_csv(p, Modality::Clip))
        .transpose()?;
    if let Some(x) = &input {
        cfg.n = x.len();
    }
    if let Some(v) = args.n {
        cfg.n = v as usize;
    }
    if let Some(v) = args.w {
        cfg.w = v as usize;
    }
    if let Some(v) = args.tau {
        cfg.tau = v;
    }
    if let Some(v) = args.strategy {
        cfg.strategy = v;
    }
    if let Some(v) = args.measure {
        cfg.measure = v;
    }
    if let Some(x) = &input {
        if x.len() != cfg.n {
            return Err(Failure::Usage(format!("--n {} does not match input length {}", cfg.n, x.len())));
        }
    }
    ctx.echo("perms", &cfg)?;

    let out = match &input {
        None => {
            let perms = windowed_permutations(cfg.n, cfg.w)?;
            serde_json::json!({
                "n": cfg.n,
                "w": cfg.w,
                "tau": cfg.tau,
                "perms": perms.iter().map(|p| p.one_based()).collect::<Vec<_>>(),
                "probs": null,
            })
        }
        Some(x) => {
            let dist = permutation_distribution_with(x, cfg.w, cfg.tau, cfg.measure, cfg.strategy)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let sample = sample_permutation(&dist, &mut rng);
            serde_json::json!({
                "n": cfg.n,
                "w": cfg.w,
                "tau": cfg.tau,
                "perms": dist.perms.iter().map(|p| p.one_based()).collect::<Vec<_>>(),
                "probs": dist.probs,
                "sample": sample.one_based(),
            })
        }
    };
    write_json(ctx.path("perms.json"), &out)?;
    Ok(())
}

fn cmd_synth(ctx: &Context, args: &SynthArgs, mut cfg: SynthConfig) -> CmdResult {
    if let Some(v) = &args.kind {
        cfg.kind = v.clone();
    }
    if let Some(v) = args.n {
        cfg.n = v as usize;
    }
    if let Some(v) = args.m {
        cfg.m = v as usize;
    }
    if let Some(v) = args.train {
        cfg.train = v as usize;
    }
    if let Some(v) = args.test {
        cfg.test = v as usize;
    }
    if let Some(v) = args.noise {
        cfg.noise = v;
    }
    if let Some(v) = args.shift_window {
        cfg.shift_window = v as usize;
    }
    if let Some(v) = args.irrelevance_rate {
        cfg.irrelevance_rate = v;
    }
    let corpus_config = cfg.corpus_config()?;
    ctx.echo("synth", &cfg)?;
    let corpus = make_corpus(&corpus_config)?;
    write_corpus(&corpus, &ctx.output_dir)?;
    ctx.note(format!("{} train and {} test pairs", corpus.train.len(), corpus.test.len()));
    Ok(())
}

fn cmd_train(ctx: &Context, args: &TrainArgs, mut cfg: TrainConfig) -> CmdResult {
    args.flags.apply(&mut cfg);
    cfg.validate()?;
    ctx.echo("train", &cfg)?;
    let corpus = read_corpus(&args.corpus)?;
    let report = train(&corpus, &cfg)?;
    write_json(ctx.path("train_report.json"), &report)?;
    write_json(ctx.path("encoders.json"), &report.encoders)?;
    let r = report.final_retrieval;
    println!(
        "R@1 t2v {:.3} v2t {:.3}, R@5 t2v {:.3} v2t {:.3}, MedR t2v {} v2t {}, collapse {:.3}",
        r.text_to_video.r_at_1,
        r.video_to_text.r_at_1,
        r.text_to_video.r_at_5,
        r.video_to_text.r_at_5,
        r.text_to_video.median_rank,
        r.video_to_text.median_rank,
        report.final_collapse
    );
    Ok(())
}

fn cmd_eval(ctx: &Context, args: &EvalArgs, mut cfg: EvalConfig) -> CmdResult {
    args.alignment.apply(&mut cfg.alignment);
    cfg.alignment.validate()?;
    ctx.echo("eval", &cfg)?;
    let corpus = read_corpus(&args.corpus)?;
    let text = std::fs::read_to_string(&args.encoders)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", args.encoders.display())))?;
    let encoders: EncoderParams = serde_json::from_str(&text)?;
    let retrieval = evaluate_retrieval(&encoders, &corpus.test, &cfg.alignment)?;
    let collapse = video_collapse(&encoders, &corpus.test)?;
    write_json(
        ctx.path("eval.json"),
        &serde_json::json!({ "retrieval": retrieval, "collapse": collapse }),
    )?;
    println!(
        "R@1 t2v {:.3} v2t {:.3}, collapse {collapse:.3}",
        retrieval.text_to_video.r_at_1, retrieval.video_to_text.r_at_1
    );
    Ok(())
}

fn cmd_ablate(ctx: &Context, args: &AblateArgs, mut cfg: AblateConfig) -> CmdResult {
    args.flags.apply(&mut cfg.train);
    if let Some(v) = &args.seeds {
        cfg.seeds = v.clone();
    }
    cfg.train.validate()?;
    ctx.echo("ablate", &cfg)?;
    let corpus = read_corpus(&args.corpus)?;
    let report = run_ablation(&corpus, &cfg.train, &cfg.seeds)?;
    write_json(ctx.path("ablation.json"), &report)?;
    let csv = report.to_csv();
    write_atomic(ctx.path("ablation.csv"), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    let ctx = Context {
        output_dir: cli.output_dir.clone(),
        verbose: cli.verbose,
    };
    let config = cli.config.as_deref();
    match &cli.command {
        Command::Align(args) => {
            let mut cfg: AlignConfig = load_config(config)?;
            cfg.seed = cli.seed.unwrap_or(cfg.seed);
            cmd_align(&ctx, args, cfg)
        }
        Command::Gradcheck(args) => {
            let mut cfg: GradcheckConfig = load_config(config)?;
            cfg.seed = cli.seed.unwrap_or(cfg.seed);
            cmd_gradcheck(&ctx, args, cfg)
        }
        Command::Perms(args) => {
            let mut cfg: PermsConfig = load_config(config)?;
            cfg.seed = cli.seed.unwrap_or(cfg.seed);
            cmd_perms(&ctx, args, cfg)
        }
        Command::Synth(args) => {
            let mut cfg: SynthConfig = load_config(config)?;
            cfg.seed = cli.seed.unwrap_or(cfg.seed);
            cmd_synth(&ctx, args, cfg)
        }
        Command::Train(args) => {
            let mut cfg: TrainConfig = load_config(config)?;
            cfg.seed = cli.seed.unwrap_or(cfg.seed);
            cmd_train(&ctx, args, cfg)
        }
        Command::Eval(args) => {
            let mut cfg: EvalConfig = load_config(config)?;
            cfg.seed = cli.seed.unwrap_or(cfg.seed);
            cmd_eval(&ctx, args, cfg)
        }
        Command::Ablate(args) => {
            let mut cfg: AblateConfig = load_config(config)?;
            if let Some(seed) = cli.seed {
                cfg.train.seed = seed;
            }
            cmd_ablate(&ctx, args, cfg)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
        Err(Failure::Check(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(3)
        }
    }
}
