use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use lsvt::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest, Provenance};
use lsvt::datagen::{generate_dataset, measurements_for_oversampling, Dataset, Split, SplitSizes};
use lsvt::network::Theta;
use lsvt::storage::{load_dataset, read_manifest, save_dataset};
use lsvt::svt::{default_delta, default_tau, SvtConfig};
use lsvt::training::{evaluate, history_csv, train as fit, HistoryRow, Solver, TrainConfig, TrainState};

use crate::report::{self, Cell, EvalOutput, GridRow};
use crate::{
    CompareArgs, EvalArgs, GenDataArgs, GridArgs, SolverKind, SplitArg, TrainArgs, TrainFlags,
    EXIT_NUMERIC, EXIT_USAGE,
};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Numeric(String),
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Numeric(_) => EXIT_NUMERIC,
            CliError::Other(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Numeric(m) | CliError::Other(m) => f.write_str(m),
        }
    }
}

impl From<lsvt::Error> for CliError {
    fn from(e: lsvt::Error) -> Self {
        use lsvt::Error as E;
        let msg = e.to_string();
        match e {
            E::InvalidConfig(_) | E::InvalidArgument(_) | E::Dimension { .. } => CliError::Usage(msg),
            E::NonFinite { .. } | E::Diverged { .. } => CliError::Numeric(msg),
            _ => CliError::Other(msg),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Other(format!("{}: {e}", path.display()))
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Clone, Copy)]
pub struct Log {
    pub quiet: bool,
}

impl Log {
    fn info(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

/// Clears `dir` for a fresh container. Anything other than an empty directory
/// or one holding `marker` is left alone.
fn prepare_output(dir: &Path, marker: &str, force: bool) -> CliResult<()> {
    if !dir.exists() {
        return Ok(());
    }
    let empty = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .next()
        .is_none();
    if empty {
        return Ok(());
    }
    if !force {
        return Err(CliError::Usage(format!(
            "{} already exists; pass --force to overwrite",
            dir.display()
        )));
    }
    if !dir.join(marker).exists() {
        return Err(CliError::Usage(format!(
            "{} is not an output of this tool; refusing to overwrite",
            dir.display()
        )));
    }
    fs::remove_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn print_json<T: serde::Serialize>(value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Other(e.to_string()))?;
    println!("{text}");
    Ok(())
}

pub fn gen_data(args: &GenDataArgs, log: Log) -> CliResult<()> {
    if args.sizes.len() != 3 {
        return Err(CliError::Usage(format!(
            "--sizes takes train,validation,test; got {} values",
            args.sizes.len()
        )));
    }
    let sizes = if args.paper_scale {
        SplitSizes::PAPER
    } else {
        SplitSizes {
            train: args.sizes[0],
            validation: args.sizes[1],
            test: args.sizes[2],
        }
    };
    let m = match (args.m, args.oversample) {
        (Some(m), _) => m,
        (None, Some(ratio)) if ratio > 0.0 && ratio.is_finite() => {
            measurements_for_oversampling(args.d, args.r, ratio)
        }
        (None, Some(ratio)) => {
            return Err(CliError::Usage(format!("--oversample must be positive, got {ratio}")))
        }
        (None, None) => return Err(CliError::Usage("one of --m or --oversample is required".into())),
    };
    if args.r == 0 || args.r > args.d {
        return Err(CliError::Usage(format!("--r must be in 1..={}", args.d)));
    }
    prepare_output(&args.out, "manifest.json", args.force)?;
    log.info(format!(
        "generating d={} r={} m={m} sizes={}/{}/{} seed={}",
        args.d, args.r, sizes.train, sizes.validation, sizes.test, args.seed
    ));
    let dataset = generate_dataset(args.d, args.r, m, sizes, args.seed)?;
    let manifest = save_dataset(&dataset, &args.out)?;
    print_json(&serde_json::json!({
        "out": args.out,
        "d": args.d,
        "r": args.r,
        "m": m,
        "sizes": sizes,
        "seed": args.seed,
        "operator_seed": dataset.info.operator_seed,
        "dataset_sha256": manifest.manifest_sha256,
        "version": crate::VERSION,
    }))
}

struct LoadedData {
    dataset: Dataset,
    sha256: String,
}

fn load_data(dir: &Path) -> CliResult<LoadedData> {
    let sha256 = read_manifest(dir)?.manifest_sha256;
    let dataset = load_dataset(dir)?;
    Ok(LoadedData { dataset, sha256 })
}

fn train_config(flags: &TrainFlags) -> CliResult<TrainConfig> {
    let cfg = TrainConfig {
        learning_rate: flags.lr,
        batch_size: flags.batch,
        patience: flags.patience,
        max_epochs: flags.max_epochs,
        shuffle_seed: flags.seed,
        val_every: flags.val_every,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

struct Trained {
    theta: Theta,
    manifest: CheckpointManifest,
}

/// Trains from `(τ, δ)` and stores the checkpoint and history under `out`.
#[allow(clippy::too_many_arguments)]
fn train_to(
    data: &LoadedData,
    layers: usize,
    tau: f64,
    delta: f64,
    cfg: &TrainConfig,
    out: &Path,
    history_path: &Path,
    log: Log,
) -> CliResult<Trained> {
    let ds = &data.dataset;
    let init = Theta::init(&ds.operator, layers - 1, tau, delta);
    log.info(format!(
        "training T={layers} (H={}) tau={tau} delta={delta} lr={} batch={} on {} samples",
        layers - 1,
        cfg.learning_rate,
        cfg.batch_size,
        ds.train.len()
    ));
    let mut report_every = 0usize;
    let mut progress = |row: &HistoryRow, state: &TrainState| {
        report_every += 1;
        if report_every % 25 == 0 {
            log.info(format!(
                "  step {:>6}  train {:.6}  val {:.6}  best {:.6}",
                row.step, row.train_minibatch_mse, row.val_mse, state.best_val
            ));
        }
    };
    let outcome = match fit(&ds.train, &ds.validation, init, cfg, Some(&mut progress)) {
        Ok(o) => o,
        Err(lsvt::Error::Diverged { update, history }) => {
            write_file(history_path, &history_csv(&history))?;
            return Err(CliError::Numeric(format!(
                "training diverged at update {update}; history written to {}",
                history_path.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    let ckpt = Checkpoint {
        state: outcome.state,
        train_config: *cfg,
        provenance: Provenance {
            dataset_sha256: data.sha256.clone(),
            dataset_seed: ds.info.master_seed,
            operator_seed: ds.info.operator_seed,
            init_tau: tau,
            init_delta: delta,
        },
    };
    let manifest = save_checkpoint(&ckpt, out)?;
    write_file(history_path, &history_csv(&outcome.history))?;
    log.info(format!(
        "  stopped ({:?}) after {} updates / {} epochs, best val {:.6}",
        outcome.stop_reason, ckpt.state.step, outcome.epochs, outcome.best_val
    ));
    Ok(Trained {
        theta: outcome.best_theta,
        manifest,
    })
}

fn init_params(ds: &Dataset, tau: Option<f64>, delta: Option<f64>) -> (f64, f64) {
    let (d, m) = (ds.operator.dim(), ds.operator.rows());
    (
        tau.unwrap_or_else(|| default_tau(d)),
        delta.unwrap_or_else(|| default_delta(d, m)),
    )
}

pub fn train(args: &TrainArgs, log: Log) -> CliResult<()> {
    let cfg = train_config(&args.flags)?;
    let data = load_data(&args.data)?;
    let (tau, delta) = init_params(&data.dataset, args.tau, args.delta);
    prepare_output(&args.out, "checkpoint.json", args.force)?;
    let history = args.history.clone().unwrap_or_else(|| args.out.join("history.csv"));
    let trained = train_to(&data, args.t as usize, tau, delta, &cfg, &args.out, &history, log)?;
    let m = &trained.manifest;
    print_json(&serde_json::json!({
        "checkpoint": args.out,
        "history": history,
        "hidden_layers": m.hidden_layers,
        "step": m.step,
        "best_val_mse": m.best_val_mse,
        "checkpoint_sha256": m.manifest_sha256,
        "dataset_sha256": data.sha256,
        "shuffle_seed": cfg.shuffle_seed,
        "version": crate::VERSION,
    }))
}

fn split_of(arg: SplitArg) -> Split {
    match arg {
        SplitArg::Train => Split::Train,
        SplitArg::Validation => Split::Validation,
        SplitArg::Test => Split::Test,
    }
}

/// Loads a checkpoint and checks it fits the dataset.
fn checkpoint_for(dir: &Path, ds: &Dataset, log: Log) -> CliResult<(Theta, CheckpointManifest)> {
    let (ckpt, manifest) = load_checkpoint(dir)?;
    if manifest.dim != ds.operator.dim() || manifest.rows != ds.operator.rows() {
        return Err(CliError::Usage(format!(
            "checkpoint is for d={} m={}, dataset has d={} m={}",
            manifest.dim,
            manifest.rows,
            ds.operator.dim(),
            ds.operator.rows()
        )));
    }
    if manifest.provenance.operator_seed != ds.info.operator_seed {
        log.info("warning: checkpoint was trained on a different measurement operator");
    }
    Ok((ckpt.state.best_theta, manifest))
}

pub fn eval(args: &EvalArgs, log: Log) -> CliResult<()> {
    let data = load_data(&args.data)?;
    let ds = &data.dataset;
    let split = split_of(args.split);
    let instances = ds.split(split);
    if instances.is_empty() {
        return Err(CliError::Usage(format!("the {} split is empty", split.name())));
    }
    let output = match args.solver {
        SolverKind::Svt => {
            if args.checkpoint.is_some() {
                return Err(CliError::Usage("--checkpoint only applies to --solver lsvt".into()));
            }
            let iters = args
                .iters
                .ok_or_else(|| CliError::Usage("--solver svt needs --iters".into()))?;
            let (tau, delta) = init_params(ds, args.tau, args.delta);
            let cfg = SvtConfig::new(tau, delta, iters)?;
            let rep = evaluate(Solver::Svt(&ds.operator, cfg), instances)?;
            EvalOutput::svt(cfg, split, &rep, &data.sha256)
        }
        SolverKind::Lsvt => {
            if args.tau.is_some() || args.delta.is_some() || args.iters.is_some() {
                return Err(CliError::Usage(
                    "--tau, --delta and --iters only apply to --solver svt".into(),
                ));
            }
            let dir = args
                .checkpoint
                .as_ref()
                .ok_or_else(|| CliError::Usage("--solver lsvt needs --checkpoint".into()))?;
            let (theta, manifest) = checkpoint_for(dir, ds, log)?;
            let rep = evaluate(Solver::Lsvt(&theta), instances)?;
            EvalOutput::lsvt(&theta, split, &rep, &data.sha256, &manifest.manifest_sha256)
        }
    };
    let json = serde_json::to_string_pretty(&output).map_err(|e| CliError::Other(e.to_string()))?;
    match &args.json {
        Some(path) => write_file(path, &(json + "\n"))?,
        None => println!("{json}"),
    }
    if let Some(path) = &args.csv {
        write_file(path, &report::per_instance_csv(&output.per_instance))?;
    }
    if output.non_finite > 0 {
        log.info(format!(
            "warning: {} of {} reconstructions were not finite",
            output.non_finite, output.count
        ));
    }
    Ok(())
}

fn short(sha: &str) -> &str {
    &sha[..sha.len().min(12)]
}

/// Reuses a cached checkpoint when it matches the requested run, otherwise trains one.
fn cached_or_trained(
    data: &LoadedData,
    layers: usize,
    tau: f64,
    delta: f64,
    cfg: &TrainConfig,
    dir: &Path,
    log: Log,
) -> CliResult<Option<Theta>> {
    if dir.join("checkpoint.json").exists() {
        let (ckpt, manifest) = load_checkpoint(dir)?;
        let p = &manifest.provenance;
        if p.dataset_sha256 != data.sha256
            || manifest.layers() != layers
            || p.init_tau != tau
            || p.init_delta != delta
            || manifest.train_config != *cfg
        {
            return Err(CliError::Usage(format!(
                "cached checkpoint {} does not match this run; remove it to retrain",
                dir.display()
            )));
        }
        log.info(format!("using cached checkpoint {}", dir.display()));
        return Ok(Some(ckpt.state.best_theta));
    }
    match train_to(data, layers, tau, delta, cfg, dir, &dir.join("history.csv"), log) {
        Ok(t) => Ok(Some(t.theta)),
        Err(CliError::Numeric(msg)) => {
            log.info(format!("warning: {msg}"));
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

fn lsvt_cell(theta: Option<&Theta>, data: &LoadedData) -> CliResult<Cell> {
    match theta {
        Some(theta) => Ok(Cell::from(&evaluate(Solver::Lsvt(theta), &data.dataset.test)?)),
        None => Ok(Cell::diverged(data.dataset.test.len())),
    }
}

pub fn compare(args: &CompareArgs, log: Log) -> CliResult<()> {
    let cfg = train_config(&args.flags)?;
    if args.t.iter().any(|&t| t == 0) {
        return Err(CliError::Usage("--T values must be at least 1".into()));
    }
    let mut rows = Vec::new();
    for path in &args.data {
        let data = load_data(path)?;
        let ds = &data.dataset;
        let (d, m, r) = (ds.operator.dim(), ds.operator.rows(), ds.info.rank);
        let (tau, delta) = init_params(ds, None, None);
        let mut cells = Vec::new();
        for &t in &args.t {
            let svt = evaluate(Solver::Svt(&ds.operator, SvtConfig::new(tau, delta, t)?), &ds.test)?;
            let dir = args
                .checkpoints
                .join(format!("d{d}-r{r}-m{m}-T{t}-{}", short(&data.sha256)));
            let theta = cached_or_trained(&data, t, tau, delta, &cfg, &dir, log)?;
            let lsvt = lsvt_cell(theta.as_ref(), &data)?;
            cells.push((t, Cell::from(&svt), lsvt));
        }
        rows.push(report::CompareRow { d, r, m, cells });
    }
    let csv = report::compare_csv(&rows);
    let text = report::compare_text(&rows);
    write_file(&args.out.join("compare.csv"), &csv)?;
    write_file(&args.out.join("compare.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn parse_pair(s: &str) -> CliResult<(f64, f64)> {
    let bad = || CliError::Usage(format!("expected `tau:delta`, got `{s}`"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    let tau: f64 = a.trim().parse().map_err(|_| bad())?;
    let delta: f64 = b.trim().parse().map_err(|_| bad())?;
    Ok((tau, delta))
}

pub fn grid(args: &GridArgs, log: Log) -> CliResult<()> {
    let cfg = train_config(&args.flags)?;
    if args.t == 0 {
        return Err(CliError::Usage("--T must be at least 1".into()));
    }
    let pairs = args
        .pairs
        .iter()
        .map(|s| parse_pair(s))
        .collect::<CliResult<Vec<_>>>()?;
    let data = load_data(&args.data)?;
    let ds = &data.dataset;
    let (d, m, r) = (ds.operator.dim(), ds.operator.rows(), ds.info.rank);
    let mut rows = Vec::new();
    for (tau, delta) in pairs {
        let svt_cfg = SvtConfig::new(tau, delta, args.t)?;
        let svt = evaluate(Solver::Svt(&ds.operator, svt_cfg), &ds.test)?;
        let dir: PathBuf = args.checkpoints.join(format!(
            "d{d}-r{r}-m{m}-T{}-tau{tau}-delta{delta}-{}",
            args.t,
            short(&data.sha256)
        ));
        let theta = cached_or_trained(&data, args.t, tau, delta, &cfg, &dir, log)?;
        rows.push(GridRow {
            tau,
            delta,
            svt: Cell::from(&svt),
            lsvt: lsvt_cell(theta.as_ref(), &data)?,
        });
    }
    let csv = report::grid_csv(&rows);
    let text = report::grid_text(d, r, m, args.t, &rows);
    write_file(&args.out.join("grid.csv"), &csv)?;
    write_file(&args.out.join("grid.txt"), &text)?;
    print!("{text}");
    Ok(())
}
