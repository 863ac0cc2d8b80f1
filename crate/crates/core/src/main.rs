use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};

use catte::checkpoint::Snapshot;
use catte::config::RunConfig;
use catte::data::{self, NoiseLaw, ObservationSet, SampleLayout, SplitSpec, SynthConfig};
use catte::model::CatteModel;
use catte::predict::{self, PredictiveLaw};
use catte::rank::{self, LambdaReference};
use catte::train::{EpochRecord, History, Objective, Trainer};

const VERSION: &str = env!("CATTE_VERSION");

/// Continuous-time tensor decomposition with latent-ODE factor trajectories
/// and automatic rank determination.
#[derive(Parser)]
#[command(name = "catte", version = VERSION)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic two-mode dataset and its clean ground truth.
    Synth(SynthArgs),
    /// Fit a model; writes runs/<name>/{config,history.csv,checkpoint}.
    Train(TrainArgs),
    /// Component powers, E[λ] statistics and the revealed rank.
    RankReport(RankArgs),
    /// Predictive mean, scale, dof and interval at query coordinates.
    Predict(PredictArgs),
    /// RMSE/MAE (and interval coverage) against a labelled file.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory (train.csv, test.csv, train_clean.csv, test_clean.csv).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 25)]
    n1: usize,
    #[arg(long, default_value_t = 25)]
    n2: usize,
    #[arg(long, default_value_t = 50)]
    nt: usize,
    /// Noise variance.
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value = "gaussian")]
    noise_law: NoiseLaw,
    #[arg(long, default_value_t = 0.2)]
    train_fraction: f64,
    /// Coordinate layout: lattice or scattered.
    #[arg(long, default_value = "lattice")]
    layout: SampleLayout,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ConfigArgs {
    /// key = value config file; flags and --set override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key (repeatable), e.g. --set rank=3.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    rank: Option<usize>,
    /// euler or rk4.
    #[arg(long)]
    method: Option<String>,
    /// elbo or rmse-only.
    #[arg(long)]
    objective: Option<Objective>,
    /// Mini-batch size (default: full batch).
    #[arg(long)]
    batch: Option<usize>,
}

impl ConfigArgs {
    /// File, then --set, then dedicated flags.
    fn overrides(&self) -> Vec<String> {
        let mut o = self.set.clone();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                o.push(format!("{k}={v}"));
            }
        };
        push("epochs", self.epochs.map(|x| x.to_string()));
        push("seed", self.seed.map(|x| x.to_string()));
        push("lr", self.lr.map(|x| x.to_string()));
        push("rank", self.rank.map(|x| x.to_string()));
        push("method", self.method.clone());
        push("objective", self.objective.map(|x| x.to_string()));
        push("batch", self.batch.map(|x| x.to_string()));
        o
    }

    fn build(&self, base: RunConfig) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                RunConfig::parse(&text).with_context(|| format!("in config {}", p.display()))?
            }
            None => base,
        };
        cfg.apply(&self.overrides())?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Training CSV (i_1..i_K, t, y).
    #[arg(long)]
    data: PathBuf,
    /// Run name; outputs go to <runs-dir>/<name>.
    #[arg(long)]
    name: String,
    #[arg(long, default_value = "runs")]
    runs_dir: PathBuf,
    /// Continue from the run's checkpoint for `epochs` more epochs.
    #[arg(long)]
    resume: bool,
    /// Progress line every this many epochs (0 = silent).
    #[arg(long, default_value_t = 100)]
    log_every: usize,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct RankArgs {
    /// Run directory.
    #[arg(long)]
    run: PathBuf,
    /// Data over which component power is summed (normally the training file).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    prune_power: Option<f64>,
    #[arg(long)]
    prune_lambda: Option<f64>,
    /// min or median.
    #[arg(long)]
    lambda_reference: Option<LambdaReference>,
    /// Also write report/pruned.ckpt holding only the active ranks.
    #[arg(long)]
    write_pruned: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    run: PathBuf,
    /// Query CSV: i_1..i_K, t (a trailing y column is ignored).
    #[arg(long)]
    query: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Central interval mass.
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Read the model from this checkpoint instead of <run>/checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    /// Labelled CSV: i_1..i_K, t, y.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::RankReport(a) => rank_report(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Eval(a) => eval(a),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n1: a.n1,
        n2: a.n2,
        nt: a.nt,
        noise_variance: a.noise,
        seed: a.seed,
        layout: a.layout,
    };
    let mut s = data::gen_synthetic(&cfg)?;
    if a.noise_law != NoiseLaw::Gaussian {
        s.noisy = data::add_noise(&s.clean, a.noise_law, a.noise, a.seed)?;
    }
    let (train, test) = data::split_rows(
        &s.noisy,
        &SplitSpec {
            train_fraction: a.train_fraction,
            seed: a.seed,
            cutoff: None,
        },
    )?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let tr = s.subset(&train)?;
    let te = s.subset(&test)?;
    data::save_csv(&tr.noisy, a.out.join("train.csv"))?;
    data::save_csv(&te.noisy, a.out.join("test.csv"))?;
    data::save_csv(&tr.clean, a.out.join("train_clean.csv"))?;
    data::save_csv(&te.clean, a.out.join("test_clean.csv"))?;
    println!(
        "wrote {} train / {} test points to {}",
        train.len(),
        test.len(),
        a.out.display()
    );
    Ok(())
}

fn write_config(path: &Path, cfg: &RunConfig, data: &Path, epoch: usize) -> Result<()> {
    let text = format!(
        "# catte {VERSION}\n# data: {}\n# epochs completed: {epoch}\n{cfg}",
        data.display()
    );
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn log_line(r: &EpochRecord) -> String {
    let lam: Vec<String> = r.lambda_mean.iter().map(|x| format!("{x:.3e}")).collect();
    let max = r.power.iter().copied().fold(0.0, f64::max);
    let pow: Vec<String> = r
        .power
        .iter()
        .map(|p| format!("{:.2e}", if max > 0.0 { p / max } else { 0.0 }))
        .collect();
    format!(
        "epoch {:>5}  elbo {:.6e}  E[lambda] [{}]  rel.power [{}]",
        r.epoch,
        r.elbo,
        lam.join(" "),
        pow.join(" ")
    )
}

fn train(a: TrainArgs) -> Result<()> {
    let dir = a.runs_dir.join(&a.name);
    let ckpt = dir.join("checkpoint");
    let hist_path = dir.join("history.csv");
    let (cfg, mut trainer, data, mut past) = if a.resume {
        let snap = Snapshot::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
        let cfg = a.config.build(snap.config.clone())?;
        ensure!(
            cfg.net_config() == snap.config.net_config(),
            "network shape keys cannot change on resume"
        );
        let norm = snap.model.fitted()?.normalization.clone();
        let data = data::load_csv_with(&a.data, &norm).with_context(|| format!("loading {}", a.data.display()))?;
        let adam = snap.adam.context("checkpoint holds no optimizer state")?;
        let past = if hist_path.exists() {
            read_history(&hist_path, snap.model.rank())?
        } else {
            History::default()
        };
        let t = Trainer::resume(snap.model, adam, snap.epoch, cfg.train_config())?;
        (cfg, t, data, past)
    } else {
        let cfg = a.config.build(RunConfig::default())?;
        let data = data::load_csv(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
        let model = CatteModel::new(cfg.model_config(data.modes())?)?;
        let t = Trainer::new(model, &data, cfg.train_config())?;
        (cfg, t, data, History::default())
    };
    fs::create_dir_all(dir.join("report")).with_context(|| format!("creating {}", dir.display()))?;
    write_config(&dir.join("config"), &cfg, &a.data, trainer.epoch)?;
    let save = |t: &Trainer, past: &History| -> Result<()> {
        Snapshot {
            config: cfg.clone(),
            model: t.model.clone(),
            adam: Some(t.adam.clone()),
            epoch: t.epoch,
        }
        .save(&ckpt, VERSION)?;
        let mut all = past.clone();
        all.records.extend(t.history.records.iter().cloned());
        all.write_csv(&hist_path, t.model.rank())?;
        Ok(())
    };
    let every = cfg.checkpoint_every;
    trainer.run(&data, |t, r| {
        if a.log_every > 0 && (r.epoch % a.log_every == 0 || r.epoch == 1) {
            eprintln!("{}", log_line(r));
        }
        if every > 0 && r.epoch % every == 0 {
            save(t, &past).map_err(|e| catte::Error::Checkpoint(format!("{e:#}")))?;
        }
        Ok(())
    })?;
    save(&trainer, &past)?;
    past.records.clear();
    write_config(&dir.join("config"), &cfg, &a.data, trainer.epoch)?;
    if let Some(r) = trainer.history.last() {
        println!("{}", log_line(r));
    }
    println!("run written to {}", dir.display());
    Ok(())
}

/// Reads back a history CSV written by `History::write_csv`.
fn read_history(path: &Path, rank: usize) -> Result<History> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut h = History::default();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        ensure!(row.len() == 3 + 2 * rank, "{}: row {} has {} columns", path.display(), i + 2, row.len());
        let f = |j: usize| -> Result<f64> {
            row[j]
                .parse()
                .with_context(|| format!("{}: row {}: bad number '{}'", path.display(), i + 2, &row[j]))
        };
        h.records.push(EpochRecord {
            epoch: row[0].parse()?,
            elbo: f(1)?,
            loss: f(2)?,
            lambda_mean: (0..rank).map(|r| f(3 + r)).collect::<Result<_>>()?,
            power: (0..rank).map(|r| f(3 + rank + r)).collect::<Result<_>>()?,
        });
    }
    Ok(h)
}

fn load_run(run: &Path, checkpoint: Option<&Path>) -> Result<Snapshot> {
    let path = checkpoint.map_or_else(|| run.join("checkpoint"), Path::to_path_buf);
    Snapshot::load(&path).with_context(|| format!("loading {}", path.display()))
}

fn rank_report(a: RankArgs) -> Result<()> {
    let snap = load_run(&a.run, None)?;
    let mut cfg = snap.config.clone();
    if let Some(p) = a.prune_power {
        cfg.prune_power = p;
    }
    if let Some(l) = a.prune_lambda {
        cfg.prune_lambda = l;
    }
    if let Some(r) = a.lambda_reference {
        cfg.lambda_reference = r;
    }
    let norm = snap.model.fitted()?.normalization.clone();
    let data = data::load_csv_with(&a.data, &norm).with_context(|| format!("loading {}", a.data.display()))?;
    let report = rank::rank_report(&snap.model, &data, cfg.thresholds())?;
    let dir = a.run.join("report");
    fs::create_dir_all(&dir)?;
    report.write_csv(dir.join("rank.csv"))?;
    fs::write(dir.join("rank.txt"), report.to_text())?;
    print!("{}", report.to_text());
    if a.write_pruned {
        let model = rank::prune(&snap.model, &report.active)?;
        let mut pcfg = cfg;
        pcfg.rank = model.rank();
        let path = dir.join("pruned.ckpt");
        Snapshot {
            config: pcfg,
            model,
            adam: None,
            epoch: snap.epoch,
        }
        .save(&path, VERSION)?;
        println!("pruned model written to {}", path.display());
    }
    Ok(())
}

/// Reads i_1..i_K, t columns (and ignores a trailing y) in original units.
fn read_query(path: &Path, modes: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let header = rdr.headers()?.clone();
    let want: Vec<String> = (1..=modes).map(|k| format!("i_{k}")).chain(["t".to_string()]).collect();
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    ensure!(
        (got.len() == modes + 1 || (got.len() == modes + 2 && got[modes + 1] == "y"))
            && got[..=modes].iter().zip(&want).all(|(g, w)| g == w),
        "{}: expected columns {} (optionally y) for a {modes}-mode model, found {}",
        path.display(),
        want.join(","),
        got.join(",")
    );
    let mut idx = vec![Vec::new(); modes];
    let mut times = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let mut vals = Vec::with_capacity(modes + 1);
        for j in 0..=modes {
            let v: f64 = row
                .get(j)
                .map(str::trim)
                .unwrap_or("")
                .parse()
                .with_context(|| format!("{}: line {}: bad number in column {}", path.display(), i + 2, j + 1))?;
            vals.push(v);
        }
        for k in 0..modes {
            idx[k].push(vals[k]);
        }
        times.push(vals[modes]);
    }
    ensure!(!times.is_empty(), "{}: no query rows", path.display());
    Ok((idx, times))
}

fn predict_cmd(a: PredictArgs) -> Result<()> {
    let snap = load_run(&a.run, a.checkpoint.as_deref())?;
    let model = &snap.model;
    let norm = model.fitted()?.normalization.clone();
    let (raw_idx, raw_t) = read_query(&a.query, model.num_modes())?;
    let idx: Vec<Vec<f64>> = raw_idx
        .iter()
        .enumerate()
        .map(|(k, c)| c.iter().map(|&x| norm.normalize_index(k, x)).collect())
        .collect();
    let times: Vec<f64> = raw_t.iter().map(|&t| norm.normalize_time(t)).collect();
    let laws = predict::predict(model, &idx, &times)?;
    predict::write_predictions(&a.out, &norm, &idx, &times, &laws, a.level)?;
    println!("{} predictions written to {}", laws.len(), a.out.display());
    Ok(())
}

fn coverage(laws: &[PredictiveLaw], data: &ObservationSet, level: f64) -> Result<f64> {
    let mut inside = 0usize;
    for (law, &y) in laws.iter().zip(data.values()) {
        let (lo, hi) = predict::predict_interval(law, level)?;
        if lo <= y && y <= hi {
            inside += 1;
        }
    }
    Ok(inside as f64 / laws.len() as f64)
}

fn eval(a: EvalArgs) -> Result<()> {
    let snap = load_run(&a.run, a.checkpoint.as_deref())?;
    let norm = snap.model.fitted()?.normalization.clone();
    let data = data::load_csv_with(&a.data, &norm).with_context(|| format!("loading {}", a.data.display()))?;
    if data.modes() != snap.model.num_modes() {
        bail!("{} has {} modes, model has {}", a.data.display(), data.modes(), snap.model.num_modes());
    }
    let laws = predict::predict_set(&snap.model, &data)?;
    let means: Vec<f64> = laws.iter().map(|l| l.mean).collect();
    let m = predict::metrics(&means, data.values())?;
    let cov = coverage(&laws, &data, a.level)?;
    let text = format!(
        "n = {}\nrmse = {}\nmae = {}\ncoverage@{} = {}\n",
        data.len(),
        m.rmse,
        m.mae,
        a.level,
        cov
    );
    let dir = a.run.join("report");
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("eval.txt"), &text)?;
    print!("{text}");
    Ok(())
}
