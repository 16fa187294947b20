use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use vc_intervene::annot::{self, Format};
use vc_intervene::config::RunConfig;
use vc_intervene::dict::{ConfounderDictionary, DictVariant, CONTEXT_INSTABILITY_WARNING};
use vc_intervene::fmat::{self, SynthFeatureConfig};
use vc_intervene::head::{self, Checkpoint, DictSource, FeatureMode, HeadError, HeadOptions, NccFilterConfig, PairBatch};
use vc_intervene::manifest::ManifestBuilder;
use vc_intervene::ncc::{self, NccModel, NccTrainConfig};
use vc_intervene::scm::{self, ScmWorld};
use vc_intervene::stats;

#[derive(Parser)]
#[command(name = "vc-intervene", version, about = "Causal-intervention statistics and visual-commonsense head training")]
struct Cli {
    /// Force single-worker code paths.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Worker threads (capped by VC_INTERVENE_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Conditional vs interventional tables from annotations.
    Stats(StatsArgs),
    /// Sample scenes from a structural world and print its exact tables.
    Simulate(SimulateArgs),
    /// Build a confounder dictionary from region features.
    BuildDict(BuildDictArgs),
    /// Train the prediction head.
    Train(TrainArgs),
    /// Export per-region VC features from a checkpoint.
    Extract(ExtractArgs),
    /// Join base and VC features row by row.
    Concat(ConcatArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Causation-coefficient model: train, score, filter.
    #[command(subcommand)]
    Ncc(NccCommand),
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Coco,
    Tsv,
}

#[derive(Args)]
struct StatsArgs {
    annotations: PathBuf,
    #[arg(long, value_enum, default_value = "coco")]
    format: FormatArg,
    /// Skip images with fewer distinct categories (triples need 3).
    #[arg(long, default_value_t = 3)]
    min_distinct: usize,
    /// Laplace smoothing for the interventional table.
    #[arg(long, default_value_t = 0.0)]
    alpha: f64,
    #[arg(long, default_value_t = 20)]
    top_k: usize,
    /// Also write prior_gap_<name>.csv for this category (repeatable).
    #[arg(long)]
    prior_gap: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    world: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    scenes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write scenes.tsv.
    #[arg(long)]
    emit_tsv: bool,
    /// Write features.fmat.
    #[arg(long)]
    emit_features: bool,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    /// Draw feature confounder offsets independently of the scene.
    #[arg(long)]
    deconfound: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VariantArg {
    Fixed,
    Random,
    Context,
    Expectation,
}

#[derive(Args)]
struct BuildDictArgs {
    features: PathBuf,
    #[arg(long, value_enum, default_value = "fixed")]
    variant: VariantArg,
    /// Number of categories (default: largest category index + 1).
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    features: PathBuf,
    dict: PathBuf,
    /// Config file or `key=value` override (repeatable, later wins).
    #[arg(long)]
    config: Vec<String>,
    #[arg(long, value_enum, default_value = "fixed")]
    variant: VariantArg,
    /// NCC threshold, or `off`.
    #[arg(long, default_value = "off")]
    ncc: String,
    /// Trained NCC model directory (required unless --ncc off).
    #[arg(long)]
    ncc_model: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    ncc_top_r: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExtractArgs {
    checkpoint: PathBuf,
    features: PathBuf,
    #[arg(long, default_value = "direct")]
    mode: FeatureMode,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConcatArgs {
    base: PathBuf,
    vc: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    n: usize,
    #[arg(long, default_value_t = 11)]
    d: usize,
    #[arg(long, default_value_t = 5)]
    sigma: usize,
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = 3)]
    centers: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    #[arg(long)]
    renormalize: bool,
}

#[derive(Subcommand)]
enum NccCommand {
    /// Train on synthetic cause-effect pairs.
    Train {
        #[arg(long)]
        config: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score `u → v` for a two-column CSV.
    Score { model: PathBuf, pairs: PathBuf },
    /// Report which (center, context) pairs survive the collider filter.
    Filter {
        model: PathBuf,
        checkpoint: PathBuf,
        features: PathBuf,
        dict: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        tau: f64,
        #[arg(long, default_value_t = 3)]
        top_r: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Input(String),
    Diverged(String),
    Verify(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 2,
            Failure::Diverged(_) => 3,
            Failure::Verify(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Input(m) | Failure::Diverged(m) | Failure::Verify(m) => m,
        }
    }
}

fn input<E: Display>(e: E) -> Failure {
    Failure::Input(e.to_string())
}

fn head_err(e: HeadError) -> Failure {
    match e {
        HeadError::DivergedLoss { .. } => Failure::Diverged(e.to_string()),
        other => Failure::Input(other.to_string()),
    }
}

type CmdResult = Result<(), Failure>;

fn workers(cli: &Cli, default: usize) -> usize {
    if cli.deterministic {
        return 1;
    }
    let want = cli.threads.unwrap_or(default).max(1);
    match std::env::var("VC_INTERVENE_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(cap) if cap >= 1 => want.min(cap),
        _ => want,
    }
}

fn available() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn write_file(path: &Path, contents: &[u8]) -> CmdResult {
    fmat::write_atomic(path, contents).map_err(input)
}

fn make_dir(dir: &Path) -> CmdResult {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Input(format!("{}: {e}", dir.display())))
}

fn sidecar_manifest(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn finish(m: ManifestBuilder, path: &Path) -> CmdResult {
    m.finish().write(path).map_err(input)
}

fn load_config(items: &[String]) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    for item in items {
        if item.contains('=') && !Path::new(item).exists() {
            cfg.set_pair(item).map_err(input)?;
        } else {
            let file = RunConfig::load(Path::new(item)).map_err(input)?;
            for (k, v) in file.entries() {
                cfg.set_pair(&format!("{k}={v}")).map_err(input)?;
            }
        }
    }
    cfg.check_known().map_err(input)?;
    Ok(cfg)
}

fn cmd_stats(cli: &Cli, a: &StatsArgs) -> CmdResult {
    let mut m = ManifestBuilder::new("stats");
    let format = match a.format {
        FormatArg::Coco => Format::Coco,
        FormatArg::Tsv => Format::Tsv,
    };
    let ds = annot::read_annotations(&a.annotations, format).map_err(input)?;
    m.input(&a.annotations).map_err(input)?;
    let names = ds.categories.names().to_vec();
    let sets: Vec<_> = annot::presence_sets(&ds, a.min_distinct).into_iter().map(|(_, s)| s).collect();
    let counts = stats::count_triples_parallel(ds.n_categories(), &sets, workers(cli, available())).map_err(input)?;
    let cond = stats::conditional(&counts);
    let intv = stats::intervention_smoothed(&counts, a.alpha);
    let delta = stats::delta_report(&cond, &intv, a.top_k).map_err(input)?;

    make_dir(&a.out)?;
    let outputs = [
        ("cond.csv", stats::table_csv(&cond, &names)),
        ("do.csv", stats::table_csv(&intv, &names)),
        ("delta.csv", stats::delta_csv(&delta, &names)),
    ];
    for (file, text) in outputs {
        let p = a.out.join(file);
        write_file(&p, text.as_bytes())?;
        m.artifact(&p);
    }
    for name in &a.prior_gap {
        let x = ds
            .categories
            .index_of_name(name)
            .ok_or_else(|| Failure::Input(format!("unknown category `{name}`")))?;
        let rows = stats::prior_gap_report(&counts, x).map_err(input)?;
        let p = a.out.join(format!("prior_gap_{name}.csv"));
        write_file(&p, stats::prior_gap_csv(&rows, &names).as_bytes())?;
        m.artifact(&p);
    }
    m.config("format", format!("{format:?}").to_lowercase())
        .config("min_distinct", a.min_distinct)
        .config("alpha", a.alpha)
        .config("top_k", a.top_k)
        .config("images", sets.len());
    eprintln!(
        "{} images, {} categories, {} triples",
        sets.len(),
        ds.n_categories(),
        counts.total()
    );
    finish(m, &a.out.join("manifest.json"))
}

fn cmd_simulate(cli: &Cli, a: &SimulateArgs) -> CmdResult {
    let mut m = ManifestBuilder::new("simulate");
    let world = ScmWorld::load(&a.world).map_err(input)?;
    m.input(&a.world).map_err(input)?;
    let scenes = scm::sample_scenes_parallel(&world, a.scenes, a.seed, workers(cli, available()));
    let names = world.category_names();

    let (cond, intv) = world.oracle_tables();
    let mut ctext = String::from("x,y,p\n");
    let mut dtext = String::from("x,y,p\n");
    for x in 0..world.n_categories {
        for y in 0..world.n_categories {
            if let Some(row) = &cond[x] {
                ctext.push_str(&format!("{},{},{}\n", names[x], names[y], stats::fmt_sig6(row[y])));
            }
            dtext.push_str(&format!("{},{},{}\n", names[x], names[y], stats::fmt_sig6(intv[x][y])));
        }
    }
    print!("oracle P(y|do(x))\n{dtext}");

    make_dir(&a.out)?;
    let mut files = vec![("oracle_cond.csv", ctext.into_bytes()), ("oracle_do.csv", dtext.into_bytes())];
    if a.emit_tsv {
        files.push(("scenes.tsv", scm::scenes_to_tsv(&world, &scenes).into_bytes()));
    }
    if a.emit_features {
        let cfg = SynthFeatureConfig {
            dim: a.dim,
            noise: a.noise,
            deconfound: a.deconfound,
            seed: a.seed,
            ..Default::default()
        };
        if a.dim == 0 {
            return Err(Failure::Input("--dim must be >= 1".into()));
        }
        let feats = fmat::synth_region_features(&world, &scenes, &cfg);
        files.push(("features.fmat", feats.to_bytes()));
    }
    for (file, bytes) in files {
        let p = a.out.join(file);
        write_file(&p, &bytes)?;
        m.artifact(&p);
    }
    m.seed("run", a.seed)
        .config("scenes", a.scenes)
        .config("dim", a.dim)
        .config("noise", a.noise)
        .config("deconfound", a.deconfound);
    finish(m, &a.out.join("manifest.json"))
}

fn cmd_build_dict(a: &BuildDictArgs) -> CmdResult {
    let mut m = ManifestBuilder::new("build-dict");
    let feats = fmat::read_fmat(&a.features).map_err(input)?;
    m.input(&a.features).map_err(input)?;
    let n = a.n.unwrap_or_else(|| feats.n_categories());
    let dict = match a.variant {
        VariantArg::Fixed => ConfounderDictionary::build_fixed(&feats, n),
        VariantArg::Random => ConfounderDictionary::build_random(n, feats.dim(), a.seed),
        VariantArg::Expectation => ConfounderDictionary::build_fixed(&feats, n).map(|d| d.expectation_only()),
        VariantArg::Context => {
            return Err(Failure::Input(
                "context dictionaries are built per image during training; use --variant context with `train`".into(),
            ))
        }
    }
    .map_err(input)?;
    dict.save(&a.out).map_err(input)?;
    m.artifact(&a.out).seed("random", a.seed).config("n", n).config("variant", dict.variant().as_str());
    finish(m, &sidecar_manifest(&a.out))
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> CmdResult {
    let mut m = ManifestBuilder::new("train");
    let run_cfg = load_config(&a.config)?;
    let mut cfg = head::TrainConfig::default();
    run_cfg.apply_train(&mut cfg).map_err(input)?;
    cfg.workers = workers(cli, cfg.workers);

    let feats = fmat::read_fmat(&a.features).map_err(input)?;
    let base = ConfounderDictionary::load(&a.dict).map_err(input)?;
    m.input(&a.features).map_err(input)?.input(&a.dict).map_err(input)?;
    let dict = match a.variant {
        VariantArg::Fixed => base,
        VariantArg::Expectation => base.expectation_only(),
        VariantArg::Random => ConfounderDictionary::build_random(base.n(), base.dim(), cfg.seed).map_err(input)?,
        VariantArg::Context => {
            eprintln!("{CONTEXT_INSTABILITY_WARNING}");
            cfg.allow_context_variant = true;
            ConfounderDictionary::new(base.entries().clone(), base.prior().to_vec(), DictVariant::Context)
                .map_err(input)?
        }
    };

    let filter = if a.ncc == "off" {
        None
    } else {
        let tau: f64 = a.ncc.parse().map_err(|_| Failure::Input(format!("--ncc expects a threshold or `off`, got `{}`", a.ncc)))?;
        let dir = a
            .ncc_model
            .as_ref()
            .ok_or_else(|| Failure::Input("--ncc needs --ncc-model".into()))?;
        let (model, _) = NccModel::load(dir).map_err(input)?;
        m.config("ncc_tau", tau).config("ncc_top_r", a.ncc_top_r);
        Some(NccFilterConfig { model, tau, top_r: a.ncc_top_r })
    };

    let out = head::train(&feats, &dict, &cfg, filter.as_ref()).map_err(head_err)?;
    let ck = Checkpoint {
        params: out.params.clone(),
        step: out.steps,
        config: cfg.clone(),
    };
    ck.save(&a.out).map_err(head_err)?;
    let curve = a.out.join("loss.csv");
    write_file(&curve, out.curve_csv().as_bytes())?;
    let first = out.epoch_losses.first().map_or(f64::NAN, |l| l.total);
    let last = out.epoch_losses.last().map_or(f64::NAN, |l| l.total);
    eprintln!("steps {}  loss {} -> {}", out.steps, stats::fmt_sig6(first), stats::fmt_sig6(last));

    for (k, v) in run_cfg.entries() {
        m.config(k, v);
    }
    m.config("variant", dict.variant().as_str())
        .config("workers", cfg.workers)
        .config("steps", out.steps)
        .config("initial_loss", stats::fmt_sig6(first))
        .config("final_loss", stats::fmt_sig6(last))
        .config("dropped_pairs", out.dropped_pairs)
        .seed("run", cfg.seed)
        .artifact(&a.out)
        .artifact(&curve);
    finish(m, &a.out.join("run_manifest.json"))
}

fn cmd_extract(a: &ExtractArgs) -> CmdResult {
    let mut m = ManifestBuilder::new("extract");
    let ck = Checkpoint::load(&a.checkpoint).map_err(head_err)?;
    let feats = fmat::read_fmat(&a.features).map_err(input)?;
    m.input(&a.features).map_err(input)?.input(&a.checkpoint.join("manifest.json")).map_err(input)?;
    let vc = head::extract_features(&feats, &ck.params, a.mode).map_err(head_err)?;
    fmat::write_fmat(&a.out, &vc).map_err(input)?;
    m.config("mode", format!("{:?}", a.mode).to_lowercase()).artifact(&a.out);
    finish(m, &sidecar_manifest(&a.out))
}

fn cmd_concat(a: &ConcatArgs) -> CmdResult {
    let mut m = ManifestBuilder::new("concat");
    let base = fmat::read_fmat(&a.base).map_err(input)?;
    let vc = fmat::read_fmat(&a.vc).map_err(input)?;
    m.input(&a.base).map_err(input)?.input(&a.vc).map_err(input)?;
    let joined = fmat::concat_features(&base, &vc).map_err(input)?;
    fmat::write_fmat(&a.out, &joined).map_err(input)?;
    m.config("dim", joined.dim()).artifact(&a.out);
    finish(m, &sidecar_manifest(&a.out))
}

fn cmd_gradcheck(a: &GradcheckArgs) -> CmdResult {
    if a.n == 0 || a.d == 0 || a.sigma == 0 || a.k == 0 || a.centers == 0 || !(a.h > 0.0) {
        return Err(Failure::Input("n, d, sigma, k, centers and h must be positive".into()));
    }
    let (p, dict, batch) = head::gradcheck_instance(a.n, a.d, a.sigma, a.k, a.centers, a.seed);
    let opts = HeadOptions {
        renormalize: a.renormalize,
        ..Default::default()
    };
    let r = head::gradcheck(&p, &dict, &batch, &opts, a.h).map_err(head_err)?;
    println!("block,max_rel_err,max_abs_err");
    for (name, rel, abs) in &r.blocks {
        println!("{name},{rel:.3e},{abs:.3e}");
    }
    if r.max_relative < 1e-5 {
        println!("ok: max relative error {:.3e}", r.max_relative);
        Ok(())
    } else {
        Err(Failure::Verify(format!("max relative error {:.3e} >= 1e-5", r.max_relative)))
    }
}

fn read_pairs(path: &Path) -> Result<(Vec<f64>, Vec<f64>), Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    let (mut u, mut v) = (Vec::new(), Vec::new());
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split(',').map(str::trim);
        let parsed = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) => a.parse::<f64>().ok().zip(b.parse::<f64>().ok()),
            _ => None,
        };
        match parsed {
            Some((a, b)) => {
                u.push(a);
                v.push(b);
            }
            None if i == 0 => {}
            None => return Err(Failure::Input(format!("{}:{}: expected `u,v`", path.display(), i + 1))),
        }
    }
    Ok((u, v))
}

fn cmd_ncc(c: &NccCommand) -> CmdResult {
    match c {
        NccCommand::Train { config, out } => {
            let mut m = ManifestBuilder::new("ncc train");
            let run_cfg = load_config(config)?;
            let mut cfg = NccTrainConfig::default();
            run_cfg.apply_ncc(&mut cfg).map_err(input)?;
            let data = ncc::synth_corpus(cfg.samples, cfg.sequence_len, cfg.seed);
            let (model, losses) = NccModel::train(&data, &cfg).map_err(input)?;
            let held_out = ncc::synth_corpus(cfg.samples / 4 + 1, cfg.sequence_len, cfg.seed ^ 0x5eed);
            let acc = model.accuracy(&held_out).map_err(input)?;
            model.save(out, &cfg).map_err(input)?;
            eprintln!(
                "final loss {}  held-out accuracy {}",
                stats::fmt_sig6(*losses.last().unwrap_or(&f64::NAN)),
                stats::fmt_sig6(acc)
            );
            m.seed("run", cfg.seed).config("held_out_accuracy", stats::fmt_sig6(acc)).artifact(out);
            finish(m, &out.join("run_manifest.json"))
        }
        NccCommand::Score { model, pairs } => {
            let (model, _) = NccModel::load(model).map_err(input)?;
            let (u, v) = read_pairs(pairs)?;
            let s = model.score(&u, &v).map_err(input)?;
            println!("{}", stats::fmt_sig6(s));
            Ok(())
        }
        NccCommand::Filter {
            model,
            checkpoint,
            features,
            dict,
            tau,
            top_r,
            out,
        } => {
            let mut m = ManifestBuilder::new("ncc filter");
            let (model, _) = NccModel::load(model).map_err(input)?;
            let ck = Checkpoint::load(checkpoint).map_err(head_err)?;
            let feats = fmat::read_fmat(features).map_err(input)?;
            let dictionary = ConfounderDictionary::load(dict).map_err(input)?;
            m.input(features).map_err(input)?.input(dict).map_err(input)?;
            let groups = head::build_centers(&feats, ck.config.max_contexts, ck.config.seed);
            let batch = PairBatch {
                centers: groups.into_iter().flat_map(|(_, c)| c).collect(),
            };
            let kept = ncc::filter_samples(&batch, DictSource::Shared(&dictionary), &ck.params, &model, *tau, *top_r)
                .map_err(input)?;
            let mut csv = String::from("image_id,region_id,contexts,kept\n");
            let mut k = 0;
            for c in &batch.centers {
                let survived = match kept.centers.get(k) {
                    Some(s) if s.image_id == c.image_id && s.region_id == c.region_id => {
                        k += 1;
                        s.contexts.len()
                    }
                    _ => 0,
                };
                csv.push_str(&format!("{},{},{},{}\n", c.image_id, c.region_id, c.contexts.len(), survived));
            }
            write_file(out, csv.as_bytes())?;
            eprintln!("kept {} of {} pairs", kept.n_pairs(), batch.n_pairs());
            m.config("tau", tau).config("top_r", top_r).artifact(out);
            finish(m, &sidecar_manifest(out))
        }
    }
}

fn run(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::Stats(a) => cmd_stats(cli, a),
        Command::Simulate(a) => cmd_simulate(cli, a),
        Command::BuildDict(a) => cmd_build_dict(a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Extract(a) => cmd_extract(a),
        Command::Concat(a) => cmd_concat(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Ncc(c) => cmd_ncc(c),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
