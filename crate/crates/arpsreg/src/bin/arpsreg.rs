//! Command-line surface: dataset generation, training, single-pair
//! registration, benchmark evaluation and gradient verification.
//!
//! All randomness funnels through one `--seed` flag; component streams are
//! derived from it by a fixed splitting rule, so reruns are byte-identical
//! (report timings are zeroed unless `--timing` is passed). The worker
//! pool size honors `ARPSREG_THREADS` when set.

use arpsreg::arps::network::{attach_losses, init_params, network_forward};
use arpsreg::arps::{train, write_loss_csv, ArpsConfig, InputMode, TrainConfig};
use arpsreg::benchrun::{run_benchmark, summarize_reports, BenchOptions, MethodSpec};
use arpsreg::data::io::load_pointset;
use arpsreg::data::manifest::{load_pair, read_manifest, store_pair, write_manifest};
use arpsreg::data::{gen_shape, make_pair, PairConfig, PairMode, ShapeKind};
use arpsreg::error::{Error, Result};
use arpsreg::gmm::{em_register, EmConfig};
use arpsreg::icp::{icp_refine, IcpConfig};
use arpsreg::metrics::Thresholds;
use arpsreg::rigid::{rotation_angle_deg, PoseSamplingConfig, RigidTransform};
use arpsreg::seed::{derive_seed, derive_seed_indexed};
use arpsreg_nn::ParamStore;
use clap::{Args, Parser, Subcommand};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;
use std::str::FromStr;

#[derive(Parser)]
#[command(name = "arpsreg", version, about = "GMM-based point-set registration toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic pair dataset with a JSON-lines manifest.
    Gen(GenArgs),
    /// Train the membership network on a generated dataset.
    Train(TrainArgs),
    /// Register a single source/target pair and print the transform.
    Register(RegisterArgs),
    /// Run methods over a manifest (or summarize existing reports).
    Eval(EvalArgs),
    /// Finite-difference verification of every network gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pairs: usize,
    #[arg(long, default_value = "partial")]
    mode: String,
    /// Comma-separated shape kinds cycled over the dataset.
    #[arg(long, default_value = "sphere,torus,notched_box,superellipsoid")]
    shapes: String,
    #[arg(long, default_value_t = 1024)]
    n_points: usize,
    #[arg(long, default_value_t = 0.70)]
    overlap_min: f64,
    #[arg(long, default_value_t = 0.1)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 45.0)]
    euler_range: f64,
    #[arg(long, default_value_t = 0.5)]
    translation_range: f64,
    /// Dense sample size as a multiple of n_points.
    #[arg(long, default_value_t = 4)]
    dense_factor: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// TOML file with TrainConfig keys; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    top_h: Option<usize>,
    #[arg(long)]
    components: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    input_mode: Option<String>,
    #[arg(long)]
    rri_neighbors: Option<usize>,
    #[arg(long, default_value_t = false)]
    disable_attention: bool,
    #[arg(long, default_value_t = false)]
    disable_recenter: bool,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    plateau_patience: Option<usize>,
    #[arg(long)]
    plateau_factor: Option<f64>,
    #[arg(long)]
    step_eps: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// em, deepgmr_like or arps.
    #[arg(long, default_value = "em")]
    method: String,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Refine the prediction with ICP.
    #[arg(long, default_value_t = false)]
    icp: bool,
    /// Ground truth as 12 comma-separated row-major [R|t] numbers; when
    /// given, errors are printed.
    #[arg(long)]
    gt: Option<String>,
    #[arg(long, default_value_t = 16)]
    components: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Repeatable: base[+icp][:checkpoint].
    #[arg(long = "method")]
    methods: Vec<String>,
    /// Summarize existing report files instead of running methods.
    #[arg(long = "reports")]
    reports: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// modelnet, kitti, or "ROT_DEG,TRANS".
    #[arg(long, default_value = "modelnet")]
    thresholds: String,
    /// Record per-pair wall times (breaks byte-identical reruns).
    #[arg(long, default_value_t = false)]
    timing: bool,
    #[arg(long, default_value_t = 16)]
    em_components: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Run the larger pinned network instance as well.
    #[arg(long, default_value_t = false)]
    full: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_thresholds(s: &str) -> Result<Thresholds> {
    match s {
        "modelnet" => Ok(Thresholds::modelnet()),
        "kitti" => Ok(Thresholds::kitti()),
        other => {
            let parts: Vec<&str> = other.split(',').collect();
            if parts.len() != 2 {
                return Err(Error::Config(format!(
                    "thresholds must be modelnet, kitti or ROT,TRANS; got '{other}'"
                )));
            }
            Ok(Thresholds {
                rot_deg: parts[0].trim().parse().map_err(|e| {
                    Error::Config(format!("bad rotation threshold: {e}"))
                })?,
                trans: parts[1].trim().parse().map_err(|e| {
                    Error::Config(format!("bad translation threshold: {e}"))
                })?,
            })
        }
    }
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let mode = PairMode::from_str(&args.mode)?;
    let shapes: Vec<ShapeKind> = args
        .shapes
        .split(',')
        .map(|s| ShapeKind::from_str(s.trim()))
        .collect::<Result<_>>()?;
    if shapes.is_empty() {
        return Err(Error::Config("no shape kinds given".into()));
    }
    let cfg = PairConfig {
        mode,
        n_points: args.n_points,
        overlap_min: args.overlap_min,
        noise_sigma: args.noise_sigma,
        noise_both_sides: false,
        pose: PoseSamplingConfig {
            euler_range_deg: args.euler_range,
            translation_range: args.translation_range,
        },
    };
    cfg.validate()?;
    std::fs::create_dir_all(&args.out)?;
    let mut records = Vec::with_capacity(args.pairs);
    for i in 0..args.pairs {
        let pair_seed = derive_seed_indexed(args.seed, "gen.pair", i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(pair_seed);
        let kind = shapes[i % shapes.len()];
        let shape = gen_shape(kind, args.dense_factor * args.n_points, &mut rng)?;
        let pair = make_pair(&shape, &cfg, &mut rng)?;
        records.push(store_pair(&args.out, i, mode, pair_seed, &pair)?);
    }
    write_manifest(&args.out.join("manifest.jsonl"), &records)?;
    println!(
        "wrote {} {} pairs to {}",
        records.len(),
        mode,
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = match &args.config {
        Some(path) => toml::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
        None => TrainConfig::default(),
    };
    // Flag overrides.
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.layers {
        cfg.arps.layers = v;
    }
    if let Some(v) = args.feature_dim {
        cfg.arps.feature_dim = v;
    }
    if let Some(v) = args.top_h {
        cfg.arps.top_h = Some(v);
    }
    if let Some(v) = args.components {
        cfg.arps.components = v;
    }
    if let Some(v) = args.heads {
        cfg.arps.heads = v;
    }
    if let Some(v) = &args.input_mode {
        cfg.arps.input_mode = InputMode::from_str(v)?;
    }
    if let Some(v) = args.rri_neighbors {
        cfg.arps.rri_neighbors = v;
    }
    if args.disable_attention {
        cfg.arps.disable_attention = true;
    }
    if args.disable_recenter {
        cfg.arps.disable_recenter = true;
    }
    if let Some(v) = args.val_fraction {
        cfg.val_fraction = v;
    }
    if let Some(v) = args.plateau_patience {
        cfg.plateau_patience = v;
    }
    if let Some(v) = args.plateau_factor {
        cfg.plateau_factor = v;
    }
    if let Some(v) = args.step_eps {
        cfg.step_penalty_eps = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    cfg.validate()?;

    let records = read_manifest(&args.manifest)?;
    let base = args
        .manifest
        .parent()
        .map(std::path::Path::to_path_buf)
        .unwrap_or_default();
    let mut pairs = Vec::with_capacity(records.len());
    for rec in &records {
        pairs.push(load_pair(&base, rec)?);
    }
    // Deterministic split: shuffle indices with a derived stream, last
    // fraction becomes validation.
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "split"));
    for i in (1..order.len()).rev() {
        let j = rand::Rng::random_range(&mut rng, 0..=i);
        order.swap(i, j);
    }
    let n_val = ((pairs.len() as f64) * cfg.val_fraction).round() as usize;
    let n_train = pairs.len() - n_val;
    let train_pairs: Vec<_> = order[..n_train].iter().map(|&i| pairs[i].clone()).collect();
    let val_pairs: Vec<_> = order[n_train..].iter().map(|&i| pairs[i].clone()).collect();

    println!(
        "training on {} pairs, validating on {} ({} epochs, batch {}, lr {})",
        train_pairs.len(),
        val_pairs.len(),
        cfg.epochs,
        cfg.batch_size,
        cfg.learning_rate
    );
    let outcome = train(&train_pairs, &val_pairs, &cfg)?;
    std::fs::create_dir_all(&args.out)?;
    outcome.best.save(&args.out.join("checkpoint.bin"))?;
    outcome.final_params.save(&args.out.join("final.bin"))?;
    write_loss_csv(&args.out.join("loss_curve.csv"), &outcome.curve)?;
    println!(
        "best validation {} at epoch {}; checkpoint written to {}",
        outcome.best_val,
        outcome.best_epoch,
        args.out.join("checkpoint.bin").display()
    );
    Ok(())
}

fn print_transform(t: &RigidTransform) {
    let m = t.to_row_major();
    for row in 0..3 {
        println!(
            "  [{:10.6} {:10.6} {:10.6} | {:10.6}]",
            m[row * 4],
            m[row * 4 + 1],
            m[row * 4 + 2],
            m[row * 4 + 3]
        );
    }
}

fn cmd_register(args: RegisterArgs) -> Result<()> {
    let source = load_pointset(&args.source)?;
    let target = load_pointset(&args.target)?;
    let mut t = match args.method.as_str() {
        "em" => {
            let cfg = EmConfig {
                components: args.components,
                ..EmConfig::default()
            };
            em_register(&source, &target, &cfg)?.transform
        }
        m @ ("deepgmr_like" | "arps") => {
            let path = args
                .checkpoint
                .as_ref()
                .ok_or_else(|| Error::MissingCheckpoint(m.to_string()))?;
            let store = ParamStore::<f32>::load(path)?;
            let mut cfg = arpsreg::arps::network::config_from_meta(&store)?;
            if m == "deepgmr_like" {
                cfg.disable_attention = true;
                cfg.disable_recenter = true;
            }
            network_forward(&source, &target, &store, &cfg, false)?.predicted_transform()?
        }
        other => {
            return Err(Error::Config(format!(
                "unknown method '{other}' (expected em, deepgmr_like or arps)"
            )))
        }
    };
    if args.icp {
        t = icp_refine(&source, &target, &t, &IcpConfig::default())?.transform;
    }
    println!("predicted transform [R | t]:");
    print_transform(&t);
    if let Some(gt) = &args.gt {
        let values: Vec<f64> = gt
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("bad --gt: {e}")))?;
        if values.len() != 12 {
            return Err(Error::Config("--gt needs exactly 12 numbers".into()));
        }
        let mut arr = [0.0; 12];
        arr.copy_from_slice(&values);
        let t_gt = RigidTransform::from_row_major(&arr)?;
        println!(
            "rotation error: {:.6} deg, translation error: {:.6}",
            rotation_angle_deg(t.rotation(), t_gt.rotation()),
            (t.translation() - t_gt.translation()).norm()
        );
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let thresholds = parse_thresholds(&args.thresholds)?;
    let opts = BenchOptions {
        thresholds,
        timing: args.timing,
        em: EmConfig {
            components: args.em_components,
            ..EmConfig::default()
        },
        seed: args.seed,
        ..BenchOptions::default()
    };
    let runs = if !args.reports.is_empty() {
        summarize_reports(
            &args.reports,
            &thresholds,
            &args.out,
            &opts.rot_grid,
            &opts.trans_grid,
        )?
    } else {
        let manifest = args
            .manifest
            .as_ref()
            .ok_or_else(|| Error::Config("--manifest or --reports required".into()))?;
        if args.methods.is_empty() {
            return Err(Error::Config("at least one --method required".into()));
        }
        let methods: Vec<MethodSpec> = args
            .methods
            .iter()
            .map(|m| MethodSpec::parse(m))
            .collect::<Result<_>>()?;
        run_benchmark(&methods, manifest, &opts, &args.out)?
    };
    println!(
        "{:<16} {:>8} {:>10} {:>10} {:>8} {:>10} {:>10}",
        "method", "pairs", "MRE", "MTE", "recall", "RRE", "RTE"
    );
    for run in &runs {
        let s = &run.summary;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        println!(
            "{:<16} {:>8} {:>10.4} {:>10.4} {:>8.4} {:>10} {:>10}",
            run.method,
            s.n_pairs,
            s.mre,
            s.mte,
            s.recall,
            opt(s.rre),
            opt(s.rte)
        );
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    println!("primitive gradients (tol 1e-6):");
    let mut all_ok = true;
    for check in arpsreg_nn::check_primitives(args.seed ^ 0x9e37, 1e-6) {
        println!(
            "  {:<16} max rel err {:>12.3e}  {}",
            check.name,
            check.max_rel_err,
            if check.passed { "ok" } else { "FAIL" }
        );
        all_ok &= check.passed;
    }

    let (n, cfg) = if args.full {
        (
            16,
            ArpsConfig {
                layers: 2,
                feature_dim: 8,
                heads: 2,
                components: 4,
                top_h: Some(4),
                ..ArpsConfig::default()
            },
        )
    } else {
        (
            8,
            ArpsConfig {
                layers: 2,
                feature_dim: 4,
                heads: 2,
                components: 4,
                top_h: Some(2),
                ..ArpsConfig::default()
            },
        )
    };
    let store = init_params::<f64>(&cfg, derive_seed(args.seed, "gradcheck.init"))?;
    let shape = gen_shape(
        ShapeKind::Torus,
        64 * n,
        &mut ChaCha8Rng::seed_from_u64(derive_seed(args.seed, "gradcheck.shape")),
    )?;
    let pair = make_pair(
        &shape,
        &PairConfig {
            mode: PairMode::Partial,
            n_points: n,
            noise_sigma: 0.0,
            ..PairConfig::default()
        },
        &mut ChaCha8Rng::seed_from_u64(derive_seed(args.seed, "gradcheck.pair")),
    )?;
    let mut out = network_forward(&pair.source, &pair.target, &store, &cfg, true)?;
    let nodes = attach_losses(&mut out, &pair, 1e-8);
    let leaves: Vec<_> = (0..store.len())
        .map(|i| out.bound.id(&store, &store.entry(i).name))
        .collect();
    let stride = if args.full { 1 } else { 3 };
    let report = arpsreg_nn::grad_check_strided(&mut out.graph, nodes.total, &leaves, 1e-5, stride);
    println!(
        "network graph (N={n}, J={}, L={}): max rel err {:.3e} over {} probes  {}",
        cfg.components,
        cfg.layers,
        report.max_rel_err,
        report.checked,
        if report.passed() { "ok" } else { "FAIL" }
    );
    let mut worst = report.failures.clone();
    worst.sort_by(|a, b| b.rel_err.partial_cmp(&a.rel_err).unwrap());
    for f in worst.iter().take(5) {
        println!(
            "    {}[{}]: analytic {:.6e} vs numeric {:.6e} (rel {:.3e})",
            store.entry(f.leaf).name,
            f.element,
            f.analytic,
            f.numeric,
            f.rel_err
        );
    }
    all_ok &= report.passed();
    if !all_ok {
        return Err(Error::InvalidInput("gradient check failed".into()));
    }
    Ok(())
}

fn main() {
    if let Ok(threads) = std::env::var("ARPSREG_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Train(args) => cmd_train(args),
        Command::Register(args) => cmd_register(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
