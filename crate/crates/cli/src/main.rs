use std::fs;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use atlas_msa::bench::{bench_sweep, scaling_ratios, BenchOptions, BenchRow};
use atlas_msa::block::CommunicationMode;
use atlas_msa::checkpoint::{load_checkpoint, load_checkpoint_for};
use atlas_msa::counter::OpCounter;
use atlas_msa::gradcheck::{gradcheck_op, GradCheckReport, SuiteOptions, SUITE_OPS};
use atlas_msa::layout::{communication_graph_with, LayoutSpec};
use atlas_msa::model::AtlasConfig;
use atlas_msa::oracle::{check_equivalence, fixture_family};
use atlas_msa::tensor::TensorMap;
use atlas_msa::toy::{generate, generate_split, toy_config, train_toy, ToyTask, TrainOptions, METRICS_HEADER};
use atlas_msa::Error;

#[derive(Parser)]
#[command(name = "atlas", version, about = "Multi-scale attention benchmarks, verification suites and toy experiment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Attention pair counts and wall time over a sweep of grid sides.
    Bench(BenchArgs),
    /// Optimized block vs naive oracle, with and without the cache.
    Equiv(EquivArgs),
    /// Manual backward passes vs central finite differences.
    Gradcheck(GradcheckArgs),
    /// Communication graph of one layout: scale count, hop distances, edges.
    Dag(DagArgs),
    /// Train on the two-marker task, next to the window-only ablation.
    TrainToy(TrainArgs),
    /// Run a saved checkpoint on generated inputs.
    Infer(InferArgs),
}

/// Model configuration; every flag overrides the same key of `--config`.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Flat `key=value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    image_side: Option<String>,
    #[arg(long)]
    patch: Option<String>,
    #[arg(long)]
    in_channels: Option<String>,
    #[arg(long)]
    window: Option<String>,
    #[arg(long)]
    stride: Option<String>,
    #[arg(long)]
    channels: Option<String>,
    #[arg(long)]
    heads: Option<String>,
    /// Blocks per stage, comma separated.
    #[arg(long)]
    depths: Option<String>,
    #[arg(long)]
    classes: Option<String>,
    /// msa | topdown | bottomup | none | window, optionally with `+meanpool`.
    #[arg(long)]
    mode: Option<String>,
    /// atlas | stack
    #[arg(long)]
    composition: Option<String>,
    /// last | average
    #[arg(long)]
    readout: Option<String>,
    #[arg(long)]
    seed: Option<String>,
}

impl ConfigArgs {
    fn overrides(&self) -> Vec<(&'static str, &String)> {
        let pairs = [
            ("image_side", &self.image_side),
            ("patch", &self.patch),
            ("in_channels", &self.in_channels),
            ("window", &self.window),
            ("stride", &self.stride),
            ("channels", &self.channels),
            ("heads", &self.heads),
            ("depths", &self.depths),
            ("classes", &self.classes),
            ("mode", &self.mode),
            ("composition", &self.composition),
            ("readout", &self.readout),
            ("seed", &self.seed),
        ];
        pairs.into_iter().filter_map(|(k, v)| v.as_ref().map(|v| (k, v))).collect()
    }

    fn is_empty(&self) -> bool {
        self.config.is_none() && self.overrides().is_empty()
    }

    /// `base`, then the config file, then the flags.
    fn resolve(&self, base: AtlasConfig) -> Result<AtlasConfig, Error> {
        let mut cfg = base;
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)?;
            for line in text.lines() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("{}: expected key=value, got '{line}'", path.display())))?;
                cfg.set(k.trim(), v.trim())?;
            }
        }
        for (k, v) in self.overrides() {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct BenchArgs {
    /// Grid sides in tokens, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [64usize, 128, 256, 512])]
    grids: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    window: usize,
    #[arg(long, default_value_t = 4)]
    stride: usize,
    #[arg(long, default_value_t = 8)]
    channels: usize,
    #[arg(long, default_value_t = 1)]
    heads: usize,
    #[arg(long, default_value = "msa")]
    mode: String,
    /// Larger grids are counted without running a forward.
    #[arg(long, default_value_t = 256)]
    max_forward_grid: usize,
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EquivArgs {
    /// Restrict to one mode.
    #[arg(long)]
    mode: Option<String>,
    /// Perturb one weight of the optimized path; every case must then fail.
    #[arg(long)]
    inject_fault: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Ops to check (default: all).
    #[arg(long, value_delimiter = ',')]
    op: Vec<String>,
    #[arg(long, default_value_t = 20)]
    instances: usize,
    /// Coordinates sampled per tensor.
    #[arg(long, default_value_t = 12)]
    coords: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DagArgs {
    /// Scale-0 grid side in tokens.
    #[arg(long, default_value_t = 64)]
    grid: usize,
    #[arg(long, default_value_t = 16)]
    window: usize,
    #[arg(long, default_value_t = 4)]
    stride: usize,
    #[arg(long, default_value = "msa")]
    mode: String,
    /// Write the edge list (`scale,row,col -> scale,row,col`) here.
    #[arg(long)]
    edges: Option<PathBuf>,
    /// CSV summary path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Seeds to run; each trains the configured mode and the window-only ablation.
    #[arg(long = "seeds", value_delimiter = ',', default_values_t = [0u64])]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 500)]
    train: usize,
    #[arg(long, default_value_t = 300)]
    val: usize,
    #[arg(long, default_value_t = 8)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 0.2)]
    lr: f64,
    #[arg(long, default_value_t = 0.0)]
    momentum: f64,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    /// Skip the window-only ablation.
    #[arg(long)]
    no_ablation: bool,
    /// Metrics CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint of the configured model trained with the first seed.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// When given, the checkpoint's config must equal this one.
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value_t = 8)]
    samples: usize,
    /// Seed of the generated inputs.
    #[arg(long = "input-seed", default_value_t = 0)]
    input_seed: u64,
    /// Per-sample CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Suite(String),
    Error(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Error(Error::Io(e))
    }
}

type Outcome = Result<(), Failure>;

fn parse_mode(s: &str) -> Result<CommunicationMode, Error> {
    s.parse()
}

fn write_out(path: &Option<PathBuf>, header: &str, body: &str) -> Result<(), Error> {
    if let Some(path) = path {
        let mut f = fs::File::create(path)?;
        writeln!(f, "{header}")?;
        f.write_all(body.as_bytes())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_bench(a: &BenchArgs) -> Outcome {
    let opts = BenchOptions {
        grids: a.grids.clone(),
        window: a.window,
        stride: a.stride,
        channels: a.channels,
        heads: a.heads,
        mode: parse_mode(&a.mode)?,
        max_forward_grid: a.max_forward_grid,
        repeats: a.repeats,
        seed: a.seed,
    };
    let mut rows = Vec::new();
    let mut errors = 0;
    for (grid, r) in bench_sweep(&opts) {
        match r {
            Ok(row) => {
                let wall = row.wall_ms.map(|t| format!("{t:.1} ms")).unwrap_or_else(|| "-".into());
                println!(
                    "grid {:>4}  N {:>7}  L {}  pairs {:>11} (formula {:>11})  {}",
                    row.grid, row.tokens, row.levels, row.measured_pairs, row.analytic_pairs, wall
                );
                rows.push(row);
            }
            Err(e) => {
                errors += 1;
                eprintln!("grid {grid}: {e}");
            }
        }
    }
    for (n, m, r) in scaling_ratios(&rows) {
        println!("t({m}^2) / t({n}^2) = {r:.2}");
    }
    let body: String = rows.iter().map(|r| r.to_csv() + "\n").collect();
    write_out(&a.out, BenchRow::CSV_HEADER, &body)?;
    let mismatched: Vec<usize> = rows.iter().filter(|r| r.measured_pairs != r.analytic_pairs).map(|r| r.grid).collect();
    if !mismatched.is_empty() {
        return Err(Failure::Suite(format!("measured pairs differ from the formula for grids {mismatched:?}")));
    }
    if rows.is_empty() && errors > 0 {
        return Err(Failure::Error(Error::Config("no valid grid in the sweep".into())));
    }
    Ok(())
}

fn cmd_equiv(a: &EquivArgs) -> Outcome {
    let modes = match &a.mode {
        Some(m) => vec![parse_mode(m)?],
        None => CommunicationMode::ALL.to_vec(),
    };
    let mut body = String::new();
    let mut failed = Vec::new();
    let mut total = 0;
    for fixture in fixture_family() {
        for &mode in &modes {
            let c = check_equivalence(&fixture, mode, a.inject_fault)?;
            total += 1;
            body.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                c.fixture,
                c.mode,
                c.levels,
                c.oracle_equal,
                c.cache_equal,
                c.projections_uncached,
                c.projections_cached,
                c.first_mismatch.map(|s| s.to_string()).unwrap_or_default()
            ));
            if !c.passed() {
                let at = c.first_mismatch.map(|s| format!(" (first differing scale {s})")).unwrap_or_default();
                println!("FAIL {} mode={}{}", c.fixture, c.mode, at);
                failed.push(c.fixture.clone());
            }
        }
    }
    println!("{} of {total} fixture/mode cases bitwise equal", total - failed.len());
    write_out(
        &a.out,
        "fixture,mode,levels,oracle_equal,cache_equal,projections_uncached,projections_cached,first_mismatch",
        &body,
    )?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Suite(format!("{} cases differ", failed.len())))
    }
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Outcome {
    let opts = SuiteOptions { instances: a.instances, coords_per_tensor: a.coords, seed: a.seed };
    let ops: Vec<String> = if a.op.is_empty() { SUITE_OPS.iter().map(|s| s.to_string()).collect() } else { a.op.clone() };
    let mut body = String::new();
    let mut failed = Vec::new();
    for op in &ops {
        let r = gradcheck_op(op, &opts).map_err(|e| match e {
            Error::Usage(m) => Error::Config(m),
            e => e,
        })?;
        print!("{}", r.to_table());
        println!("  -> {}", if r.passed() { "pass" } else { "FAIL" });
        body.push_str(&r.to_csv());
        if !r.passed() {
            failed.push(op.clone());
        }
    }
    write_out(&a.out, GradCheckReport::CSV_HEADER, &body)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Suite(format!("gradient mismatch in {failed:?}")))
    }
}

fn cmd_dag(a: &DagArgs) -> Outcome {
    let layout = LayoutSpec::build(a.grid, a.window, a.stride)?;
    let mode = parse_mode(&a.mode)?;
    let graph = communication_graph_with(&layout, mode.pathways());
    let levels = layout.levels();
    let bound = 2 * levels as u32 - 1;
    let dist = graph.max_fine_distance();
    let shown = dist.map(|d| d.to_string()).unwrap_or_else(|| "disconnected".into());
    println!("grid {} window {} stride {}: L = {levels}, sides {:?}", a.grid, a.window, a.stride, layout.grid_sides());
    println!("nodes {}, edges {}", graph.num_nodes(), graph.edge_list().len());
    println!("max fine-pair distance {shown} (bound 2L-1 = {bound})");
    if let Some(path) = &a.edges {
        graph.write_edge_list(std::io::BufWriter::new(fs::File::create(path)?))?;
        println!("wrote {}", path.display());
    }
    let body = format!(
        "{},{},{},{},{},{},{}\n",
        a.grid,
        a.window,
        a.stride,
        mode,
        levels,
        dist.map(|d| d.to_string()).unwrap_or_default(),
        bound
    );
    write_out(&a.out, "grid,window,stride,mode,levels,max_fine_distance,bound", &body)?;
    match dist {
        Some(d) if d <= bound => Ok(()),
        _ if !mode.multi_scale || !mode.top_down => Ok(()),
        _ => Err(Failure::Suite(format!("max fine-pair distance {shown} exceeds {bound}"))),
    }
}

fn cmd_train_toy(a: &TrainArgs) -> Outcome {
    let base = toy_config(CommunicationMode::MSA, 0);
    let cfg = a.config.resolve(base)?;
    let opts = TrainOptions {
        epochs: a.epochs,
        batch: a.batch,
        lr: a.lr,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        ..TrainOptions::default()
    };
    let mut body = String::new();
    for (i, &seed) in a.seeds.iter().enumerate() {
        let task = ToyTask::for_config(&cfg, a.train, a.val, 100 + seed);
        let (train, val) = generate_split(&task)?;
        let mut modes = vec![cfg.mode];
        if !a.no_ablation && cfg.mode != CommunicationMode::WINDOW_ONLY {
            modes.push(CommunicationMode::WINDOW_ONLY);
        }
        for mode in modes {
            let mut c = cfg.clone();
            c.mode = mode;
            c.seed = seed;
            let run = train_toy(&c, &train, &val, &TrainOptions { seed, ..opts.clone() })?;
            println!("seed {seed} {mode:<10} final loss {:.4}  val accuracy {:.3}", run.metrics.last().map(|m| m.loss).unwrap_or(f64::NAN), run.final_accuracy());
            body.push_str(&run.to_csv());
            if i == 0 && mode == cfg.mode {
                if let Some(path) = &a.checkpoint {
                    run.save(path)?;
                    println!("wrote {}", path.display());
                }
            }
        }
    }
    write_out(&a.out, METRICS_HEADER, &body)?;
    Ok(())
}

fn cmd_infer(a: &InferArgs) -> Outcome {
    let model = if a.config.is_empty() {
        load_checkpoint(&a.checkpoint)?
    } else {
        let base = load_checkpoint(&a.checkpoint)?.config;
        let expected = a.config.resolve(base)?;
        load_checkpoint_for(&a.checkpoint, &expected)?
    };
    let cfg = &model.config;
    // Single-channel binary models get two-marker samples with labels;
    // anything else gets Gaussian noise images.
    let mut rng = ChaCha8Rng::seed_from_u64(a.input_seed);
    let n = a.samples.max(1);
    let toy = (cfg.in_channels == 1 && cfg.classes == 2)
        .then(|| generate(&ToyTask::for_config(cfg, 0, n, a.input_seed), n, &mut rng).ok())
        .flatten();
    let (images, labels) = match toy {
        Some(d) => (d.images, Some(d.labels)),
        None => (TensorMap::random_normal([n, cfg.image_side, cfg.image_side, cfg.in_channels], 1.0, &mut rng), None),
    };
    let mut counter = OpCounter::new();
    let logits = model.forward(&images, true, &mut counter)?;
    let mut body = String::new();
    let mut correct = 0;
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let pred = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
        let label = labels.as_ref().map(|l| l[i]);
        correct += usize::from(label == Some(pred));
        let vals: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        println!("sample {i}: pred {pred}{} logits [{}]", label.map(|l| format!(" label {l}")).unwrap_or_default(), vals.join(", "));
        body.push_str(&format!("{i},{},{pred},{}\n", label.map(|l| l.to_string()).unwrap_or_default(), vals.join(";")));
    }
    if labels.is_some() {
        println!("accuracy {:.3} on {} generated samples", correct as f64 / logits.rows().max(1) as f64, logits.rows());
    }
    println!("attention pairs {}, query tokens {}, cache hits {}", counter.attention_pairs(), counter.query_tokens(), counter.cache_hits());
    write_out(&a.out, "sample,label,prediction,logits", &body)?;
    Ok(())
}

fn run(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::Bench(a) => cmd_bench(a),
        Command::Equiv(a) => cmd_equiv(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Dag(a) => cmd_dag(a),
        Command::TrainToy(a) => cmd_train_toy(a),
        Command::Infer(a) => cmd_infer(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Suite(msg)) => {
            eprintln!("suite failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Config(_) | Error::Checkpoint(_) | Error::Io(_)) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
