use clap::{Args, Parser, Subcommand, ValueEnum};
use ftscore::arch::ArchGraph;
use ftscore::baselines::{naswot_proxy, params_proxy};
use ftscore::dataset::{parse_arch_str, BenchmarkDataset};
use ftscore::de::DeConfig;
use ftscore::ensemble::{ensemble_score, fit_ensemble, EnsembleSpec};
use ftscore::error::ErrorClass;
use ftscore::eval::{correlation_table, greedy_topk_search, read_score_csv, score_score_table, NamedScorer};
use ftscore::ranking::SoftRankConfig;
use ftscore::rep::Variant;
use ftscore::scorer::{score_line, ScorerConfig, ScorerParams};
use ftscore::search::{run_search, SearchConfig};
use ftscore::tensor::{AdamConfig, Tensor};
use ftscore::trainer::{train_multi, SpaceSchedule, TrainConfig};
use ftscore::{selfcheck, Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Cache directory for parsed datasets.
const CACHE_ENV: &str = "FTSCORE_CACHE_DIR";

#[derive(Parser)]
#[command(name = "ftscore", version, about = "Zero-shot architecture scoring, ranking and search")]
struct Cli {
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log progress to stderr (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a scorer on one or more benchmark datasets.
    Train(TrainArgs),
    /// Score one architecture.
    Score(ScoreArgs),
    /// Correlation tables of scorers against datasets.
    Eval(EvalArgs),
    /// Fit normalized-sigmoid ensemble weights.
    EnsembleFit(EnsembleFitArgs),
    /// NSGA-II search over the ResNet-like space.
    Search(SearchArgs),
    /// Run the built-in numerical checks.
    Selfcheck(SelfcheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
enum Preset {
    /// The full-size scorer.
    Full,
    /// A small scorer for quick experiments.
    Tiny,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long = "dataset", required = true, num_args = 1..)]
    datasets: Vec<PathBuf>,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    sample_size: Option<usize>,
    /// Reassign splits with this many seeded train entries.
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Sum one batch gradient per space before each step.
    #[arg(long)]
    accumulate: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long = "ckpt", num_args = 1..)]
    ckpts: Vec<PathBuf>,
    /// Graph JSON file, NB201 string, genome string, or a file holding one.
    #[arg(long)]
    arch: String,
    #[arg(long)]
    ensemble: Option<PathBuf>,
    /// Also write the line here, with a manifest beside it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum TableKind {
    Correlation,
    ScoreScore,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum Baseline {
    Params,
    Naswot,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long = "ckpt", num_args = 1..)]
    ckpts: Vec<PathBuf>,
    #[arg(long = "dataset", required = true, num_args = 1..)]
    datasets: Vec<PathBuf>,
    /// External scores as NAME=FILE.csv with columns arch_id,score.
    #[arg(long = "scores", num_args = 1..)]
    scores: Vec<String>,
    #[arg(long = "baseline", value_enum, num_args = 1..)]
    baselines: Vec<Baseline>,
    #[arg(long, value_enum, default_value = "correlation")]
    table: TableKind,
    #[arg(long)]
    sample: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_size: Option<usize>,
    /// Also report greedy top-k search per scorer and dataset.
    #[arg(long)]
    greedy_k: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EnsembleFitArgs {
    #[arg(long = "ckpt", required = true, num_args = 1..)]
    ckpts: Vec<PathBuf>,
    #[arg(long = "dataset", required = true, num_args = 1..)]
    datasets: Vec<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    pop: Option<usize>,
    #[arg(long)]
    gens: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long, conflicts_with_all = ["ensemble", "proxy"])]
    ckpt: Option<PathBuf>,
    #[arg(long, conflicts_with = "proxy")]
    ensemble: Option<PathBuf>,
    /// Search with the parameter-count proxy instead of a scorer.
    #[arg(long, value_enum)]
    proxy: Option<Baseline>,
    #[arg(long)]
    budget: Option<u64>,
    #[arg(long)]
    floor: Option<u64>,
    #[arg(long)]
    pop: Option<usize>,
    #[arg(long)]
    gens: Option<usize>,
    #[arg(long)]
    max_blocks: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelfcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fewer instances per check.
    #[arg(long)]
    quick: bool,
    /// Write the reports as JSON lines here, with a manifest beside it.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Config file sections; every field is optional.
#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    train: TrainFile,
    eval: EvalFile,
    ensemble: EnsembleFile,
    search: SearchFile,
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    variant: Option<String>,
    steps: Option<usize>,
    sample_size: Option<usize>,
    train_size: Option<usize>,
    seed: Option<u64>,
    epsilon: Option<f64>,
    lr: Option<f64>,
    preset: Option<Preset>,
    scorer: Option<ScorerConfig>,
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalFile {
    sample: Option<usize>,
    seed: Option<u64>,
    train_size: Option<usize>,
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EnsembleFile {
    seed: Option<u64>,
    pop: Option<usize>,
    gens: Option<usize>,
}

#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SearchFile {
    budget: Option<u64>,
    floor: Option<u64>,
    pop: Option<usize>,
    gens: Option<usize>,
    max_blocks: Option<usize>,
    seed: Option<u64>,
}

#[derive(Serialize)]
struct InputDigest {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest {
    command: &'static str,
    version: &'static str,
    seed: Option<u64>,
    config: Value,
    inputs: Vec<InputDigest>,
    outputs: Vec<String>,
}

struct Inputs(Vec<InputDigest>);

impl Inputs {
    fn read(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = std::fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        self.0.push(InputDigest {
            path: path.display().to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        Ok(bytes)
    }
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse::<Variant>().map_err(|e| e.to_string())
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

fn manifest_path(out: &Path) -> PathBuf {
    sibling(out, "manifest.json")
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".");
    name.push(suffix);
    out.with_file_name(name)
}

fn write_manifest(out: &Path, m: Manifest) -> Result<()> {
    std::fs::write(manifest_path(out), serde_json::to_string_pretty(&m)? + "\n")?;
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn load_dataset(path: &Path, inputs: &mut Inputs) -> Result<BenchmarkDataset> {
    let bytes = inputs.read(path)?;
    let digest = inputs.0.last().expect("just pushed").sha256.clone();
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    let text = String::from_utf8(bytes).map_err(|_| Error::Data(format!("{}: not UTF-8", path.display())))?;
    let cache = std::env::var_os(CACHE_ENV).map(|d| PathBuf::from(d).join(format!("{digest}-{stem}.jsonl")));
    if let Some(c) = cache.as_ref().filter(|c| c.exists()) {
        log::info!("dataset cache hit {}", c.display());
        return BenchmarkDataset::parse_jsonl(&std::fs::read_to_string(c)?, stem);
    }
    let ds = BenchmarkDataset::parse_jsonl(&text, stem).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if let Some(c) = cache {
        if let Err(e) = write_file(&c, &ds.to_jsonl()) {
            log::warn!("cannot write dataset cache {}: {e}", c.display());
        }
    }
    Ok(ds)
}

fn load_scorer(path: &Path, inputs: &mut Inputs) -> Result<ScorerParams> {
    inputs.read(path)?;
    ScorerParams::load(path)
}

fn stem(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("scorer").to_string()
}

fn load_arch(arg: &str, inputs: &mut Inputs) -> Result<(String, ArchGraph)> {
    let path = Path::new(arg);
    if path.is_file() {
        let bytes = inputs.read(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Data(format!("{arg}: not UTF-8")))?;
        return Ok((stem(path), parse_arch_str(text.trim())?));
    }
    Ok((arg.to_string(), parse_arch_str(arg)?))
}

fn scorer_config(preset: Preset, variant: Variant) -> ScorerConfig {
    let base = match preset {
        Preset::Full => ScorerConfig::default(),
        Preset::Tiny => ScorerConfig::tiny(),
    };
    ScorerConfig { variant, ..base }
}

fn cmd_train(a: TrainArgs, file: TrainFile) -> Result<()> {
    let variant = match (a.variant, file.variant.as_deref()) {
        (Some(v), _) => v,
        (None, Some(s)) => s.parse()?,
        (None, None) => Variant::VNorm,
    };
    let seed = a.seed.or(file.seed).unwrap_or(0);
    let steps = a.steps.or(file.steps);
    let sample_size = a.sample_size.or(file.sample_size);
    let train_size = a.train_size.or(file.train_size);
    let preset = a.preset.or(file.preset).unwrap_or(Preset::Full);
    let scorer_cfg = match (a.preset, file.scorer) {
        (None, Some(s)) => ScorerConfig { variant, ..s },
        _ => scorer_config(preset, variant),
    };
    let cfg = TrainConfig {
        steps: steps.unwrap_or(0),
        sample_size: sample_size.unwrap_or(0),
        soft_rank: SoftRankConfig::new(a.epsilon.or(file.epsilon).unwrap_or(SoftRankConfig::default().epsilon))?,
        adam: AdamConfig {
            lr: a.lr.or(file.lr).unwrap_or(AdamConfig::default().lr),
            ..AdamConfig::default()
        },
        seed,
    };
    let mut inputs = Inputs(Vec::new());
    let mut datasets = Vec::new();
    for path in &a.datasets {
        let mut ds = load_dataset(path, &mut inputs)?;
        if let Some(n) = train_size {
            ds.resplit(n, seed)?;
        }
        datasets.push(ds);
    }
    let schedules: Vec<SpaceSchedule> = datasets
        .iter()
        .map(|ds| {
            let d = SpaceSchedule::for_dataset(ds);
            SpaceSchedule {
                steps: steps.unwrap_or(d.steps),
                sample_size: sample_size.unwrap_or(d.sample_size),
            }
        })
        .collect();
    let mut p = ScorerParams::init(scorer_cfg.clone(), seed)?;
    let history = train_multi(&datasets, &mut p, &schedules, &cfg, a.accumulate)?;
    p.save(&a.out)?;
    let losses = sibling(&a.out, "losses.jsonl");
    let mut text = String::new();
    for (i, r) in history.iter().enumerate() {
        text.push_str(&json!({"step": i, "space": datasets[r.space].space_id, "loss": r.loss}).to_string());
        text.push('\n');
    }
    write_file(&losses, &text)?;
    if let Some(last) = history.last() {
        println!("{}", json!({"steps": history.len(), "final_loss": last.loss}));
    } else {
        println!("{}", json!({"steps": 0}));
    }
    write_manifest(
        &a.out,
        Manifest {
            command: "train",
            version: env!("CARGO_PKG_VERSION"),
            seed: Some(seed),
            config: json!({
                "scorer": scorer_cfg,
                "train": cfg,
                "schedules": schedules,
                "train_size": train_size,
                "accumulate": a.accumulate,
            }),
            inputs: inputs.0,
            outputs: vec![a.out.display().to_string(), losses.display().to_string()],
        },
    )
}

enum ScoreFn {
    Single(ScorerParams),
    Ensemble(Vec<ScorerParams>, EnsembleSpec),
}

impl ScoreFn {
    fn load(ckpts: &[PathBuf], ensemble: Option<&Path>, inputs: &mut Inputs) -> Result<Self> {
        match ensemble {
            Some(path) => {
                inputs.read(path)?;
                let spec = EnsembleSpec::load(path)?;
                let paths = if spec.checkpoints.is_empty() { ckpts.to_vec() } else { spec.checkpoints.clone() };
                if paths.len() != spec.weights.len() {
                    return Err(usage(format!(
                        "ensemble has {} members but {} checkpoints were given",
                        spec.weights.len(),
                        paths.len()
                    )));
                }
                let scorers = paths.iter().map(|p| load_scorer(p, inputs)).collect::<Result<Vec<_>>>()?;
                Ok(ScoreFn::Ensemble(scorers, spec))
            }
            None => match ckpts {
                [one] => Ok(ScoreFn::Single(load_scorer(one, inputs)?)),
                [] => Err(usage("give --ckpt or --ensemble")),
                _ => Err(usage("several checkpoints need --ensemble")),
            },
        }
    }

    fn score(&self, g: &ArchGraph) -> Result<f64> {
        match self {
            ScoreFn::Single(p) => p.score(g),
            ScoreFn::Ensemble(ps, spec) => ensemble_score(g, ps, spec),
        }
    }
}

fn cmd_score(a: ScoreArgs) -> Result<()> {
    let mut inputs = Inputs(Vec::new());
    let scorer = ScoreFn::load(&a.ckpts, a.ensemble.as_deref(), &mut inputs)?;
    let (id, g) = load_arch(&a.arch, &mut inputs)?;
    let line = score_line(&id, scorer.score(&g)?);
    println!("{line}");
    if let Some(out) = &a.out {
        write_file(out, &format!("{line}\n"))?;
        write_manifest(
            out,
            Manifest {
                command: "score",
                version: env!("CARGO_PKG_VERSION"),
                seed: None,
                config: json!({"arch": a.arch}),
                inputs: inputs.0,
                outputs: vec![out.display().to_string()],
            },
        )?;
    }
    Ok(())
}

/// Fixed Gaussian batch for NASWOT.
fn naswot_batch(seed: u64) -> Tensor {
    Tensor::randn(&[8, 3, 32, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn cmd_eval(a: EvalArgs, file: EvalFile) -> Result<()> {
    let sample = a.sample.or(file.sample).unwrap_or(1000);
    let seed = a.seed.or(file.seed).unwrap_or(0);
    let train_size = a.train_size.or(file.train_size);
    let batch = naswot_batch(seed);
    let mut inputs = Inputs(Vec::new());
    let mut datasets = Vec::new();
    for path in &a.datasets {
        let mut ds = load_dataset(path, &mut inputs)?;
        if let Some(n) = train_size {
            ds.resplit(n, seed)?;
        }
        datasets.push(ds);
    }
    let params: Vec<(String, ScorerParams)> = a
        .ckpts
        .iter()
        .map(|p| Ok((stem(p), load_scorer(p, &mut inputs)?)))
        .collect::<Result<_>>()?;
    let mut external = Vec::new();
    for spec in &a.scores {
        let (name, path) = spec
            .split_once('=')
            .ok_or_else(|| usage(format!("--scores expects NAME=FILE, got `{spec}`")))?;
        let bytes = inputs.read(Path::new(path))?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Data(format!("{path}: not UTF-8")))?;
        external.push((name.to_string(), read_score_csv(&text)?));
    }
    let mut scorers: Vec<NamedScorer> = params.iter().map(|(n, p)| NamedScorer::neural(n.clone(), p)).collect();
    scorers.extend(external.into_iter().map(|(n, m)| NamedScorer::external(n, m)));
    for b in &a.baselines {
        scorers.push(match b {
            Baseline::Params => NamedScorer::from_fn("params", |e| Ok(params_proxy(&e.graph))),
            Baseline::Naswot => NamedScorer::from_fn("naswot", |e| Ok(naswot_proxy(&e.graph, &batch, seed)?.value)),
        });
    }
    if scorers.is_empty() {
        return Err(usage("no scorers: give --ckpt, --scores or --baseline"));
    }
    let table = match a.table {
        TableKind::Correlation => correlation_table(&scorers, &datasets, sample, seed),
        TableKind::ScoreScore => score_score_table(&scorers, &datasets, sample, seed),
    };
    print!("{}", table.to_text());
    write_file(&a.out, &table.to_csv())?;
    let mut outputs = vec![a.out.display().to_string()];
    if let Some(k) = a.greedy_k {
        let mut text = String::new();
        for s in &scorers {
            for ds in &datasets {
                let r = greedy_topk_search(ds, s, k)?;
                text.push_str(&json!({"scorer": s.name, "space": ds.space_id, "k": k, "best_accuracy": r.best_accuracy}).to_string());
                text.push('\n');
            }
        }
        print!("{text}");
        let path = sibling(&a.out, "greedy.jsonl");
        write_file(&path, &text)?;
        outputs.push(path.display().to_string());
    }
    write_manifest(
        &a.out,
        Manifest {
            command: "eval",
            version: env!("CARGO_PKG_VERSION"),
            seed: Some(seed),
            config: json!({
                "table": format!("{:?}", a.table),
                "sample": sample,
                "train_size": train_size,
                "greedy_k": a.greedy_k,
                "scorers": scorers.iter().map(|s| s.name.clone()).collect::<Vec<_>>(),
            }),
            inputs: inputs.0,
            outputs,
        },
    )
}

fn cmd_ensemble_fit(a: EnsembleFitArgs, file: EnsembleFile) -> Result<()> {
    if a.ckpts.len() != a.datasets.len() {
        return Err(usage("give one --dataset per --ckpt, in the same order"));
    }
    let defaults = DeConfig::default();
    let cfg = DeConfig {
        population: a.pop.or(file.pop).unwrap_or(defaults.population),
        generations: a.gens.or(file.gens).unwrap_or(defaults.generations),
        seed: a.seed.or(file.seed).unwrap_or(defaults.seed),
        ..defaults
    };
    let mut inputs = Inputs(Vec::new());
    let scorers = a.ckpts.iter().map(|p| load_scorer(p, &mut inputs)).collect::<Result<Vec<_>>>()?;
    let datasets = a.datasets.iter().map(|p| load_dataset(p, &mut inputs)).collect::<Result<Vec<_>>>()?;
    let mut spec = fit_ensemble(&scorers, &datasets, &cfg)?;
    spec.checkpoints = a.ckpts.iter().map(|p| std::path::absolute(p)).collect::<std::io::Result<_>>()?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    spec.save(&a.out)?;
    println!("{}", json!({"weights": spec.weights}));
    write_manifest(
        &a.out,
        Manifest {
            command: "ensemble-fit",
            version: env!("CARGO_PKG_VERSION"),
            seed: Some(cfg.seed),
            config: json!({"de": cfg}),
            inputs: inputs.0,
            outputs: vec![a.out.display().to_string()],
        },
    )
}

fn cmd_search(a: SearchArgs, file: SearchFile) -> Result<()> {
    let d = SearchConfig::default();
    let cfg = SearchConfig {
        population: a.pop.or(file.pop).unwrap_or(d.population),
        generations: a.gens.or(file.gens).unwrap_or(d.generations),
        param_budget: a.budget.or(file.budget).unwrap_or(d.param_budget),
        param_floor: a.floor.or(file.floor).unwrap_or(d.param_floor),
        max_blocks: a.max_blocks.or(file.max_blocks).unwrap_or(d.max_blocks),
        seed: a.seed.or(file.seed).unwrap_or(d.seed),
        ..d
    };
    let mut inputs = Inputs(Vec::new());
    let source;
    let outcome = match (a.proxy, &a.ckpt, &a.ensemble) {
        (Some(Baseline::Params), None, None) => {
            source = "params".to_string();
            run_search(|g| Ok(params_proxy(g)), &cfg)
        }
        (Some(Baseline::Naswot), None, None) => {
            source = "naswot".to_string();
            let batch = naswot_batch(cfg.seed);
            run_search(|g| Ok(naswot_proxy(g, &batch, cfg.seed)?.value), &cfg)
        }
        (None, ckpt, ens) if ckpt.is_some() || ens.is_some() => {
            let ckpts: Vec<PathBuf> = ckpt.iter().cloned().collect();
            let scorer = ScoreFn::load(&ckpts, ens.as_deref(), &mut inputs)?;
            source = "neural".to_string();
            run_search(|g| scorer.score(g), &cfg)
        }
        _ => return Err(usage("give one of --ckpt, --ensemble or --proxy")),
    };
    let out = match outcome {
        Ok(o) => o,
        Err(Error::NoFeasible { genome, params, score }) => {
            eprintln!(
                "{}",
                json!({"error": "no feasible architecture", "best_infeasible": genome.to_string(), "params": params, "score": score})
            );
            return Err(Error::NoFeasible { genome, params, score });
        }
        Err(e) => return Err(e),
    };
    write_file(&a.out, &(serde_json::to_string_pretty(&out.graph.to_json())? + "\n"))?;
    let genome_path = sibling(&a.out, "genome.txt");
    write_file(&genome_path, &format!("{}\n", out.genome))?;
    let log_path = sibling(&a.out, "log.jsonl");
    let mut log = String::new();
    for h in &out.history {
        log.push_str(&serde_json::to_string(h)?);
        log.push('\n');
    }
    write_file(&log_path, &log)?;
    println!(
        "{}",
        json!({"score": out.score, "params": out.params, "blocks": out.genome.blocks.len(), "genome": out.genome.to_string()})
    );
    write_manifest(
        &a.out,
        Manifest {
            command: "search",
            version: env!("CARGO_PKG_VERSION"),
            seed: Some(cfg.seed),
            config: json!({"search": cfg, "scorer": source}),
            inputs: inputs.0,
            outputs: vec![
                a.out.display().to_string(),
                genome_path.display().to_string(),
                log_path.display().to_string(),
            ],
        },
    )
}

fn cmd_selfcheck(a: SelfcheckArgs) -> Result<()> {
    let reports = if a.quick {
        let mut r = selfcheck::check_all_ops(10, a.seed)?;
        r.push(selfcheck::check_pipeline(Variant::VNorm, 10, 4, a.seed)?);
        r.push(selfcheck::check_pipeline(Variant::Static, 10, 4, a.seed)?);
        r.extend(selfcheck::check_dft(10_000, a.seed));
        r.push(selfcheck::check_hard_limit(100, a.seed));
        r.push(selfcheck::check_projection_oracle(1, a.seed));
        r
    } else {
        selfcheck::run_all(a.seed)?
    };
    for r in &reports {
        println!("{}", r.line());
    }
    if let Some(out) = &a.out {
        let mut text = String::new();
        for r in &reports {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        write_file(out, &text)?;
        write_manifest(
            out,
            Manifest {
                command: "selfcheck",
                version: env!("CARGO_PKG_VERSION"),
                seed: Some(a.seed),
                config: json!({"quick": a.quick}),
                inputs: Vec::new(),
                outputs: vec![out.display().to_string()],
            },
        )?;
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Error::CheckFailed(failed));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| usage(e.to_string()))?;
    }
    let file: FileConfig = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => FileConfig::default(),
    };
    match cli.cmd {
        Command::Train(a) => cmd_train(a, file.train),
        Command::Score(a) => cmd_score(a),
        Command::Eval(a) => cmd_eval(a, file.eval),
        Command::EnsembleFit(a) => cmd_ensemble_fit(a, file.ensemble),
        Command::Search(a) => cmd_search(a, file.search),
        Command::Selfcheck(a) => cmd_selfcheck(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Usage => 1,
                ErrorClass::Data => 2,
                ErrorClass::Numerical => 3,
            })
        }
    }
}
