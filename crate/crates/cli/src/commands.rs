use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Subcommand, ValueEnum};

use otlab::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use otlab::config::KeyValues;
use otlab::data::{gen_blobs, load_idx, load_mnist};
use otlab::eval::{evaluate_curve, export_embeddings, parse_grid, write_attack_result};
use otlab::idim::{gen_manifold, mle_idim, Averaging, IdimConfig, ManifoldKind, PointCloud};
use otlab::training::{train_with, TrainLog};
use otlab::{AttackConfig, Dataset, Error, Regime, Split, TrainConfig};

/// Declares a struct of optional `--key VALUE` flags, one per config key.
macro_rules! overrides {
    ($name:ident { $($key:ident),* $(,)? }) => {
        #[derive(Debug, Default, Args)]
        pub struct $name {
            $(
                #[arg(long, value_name = "VALUE", help = concat!("Override config key `", stringify!($key), "`"))]
                $key: Option<String>,
            )*
        }

        impl $name {
            fn pairs(&self) -> Vec<(&'static str, &str)> {
                let mut out = Vec::new();
                $(
                    if let Some(v) = &self.$key {
                        out.push((stringify!($key), v.as_str()));
                    }
                )*
                out
            }
        }
    };
}

overrides!(TrainOverrides {
    regime, lambda, clip, epochs, batch_size, latent_dim, plain_latent_dim,
    lr, beta1, beta2, adam_eps,
    critic_lr, critic_beta1, critic_beta2, critic_eps,
    main_lr, main_beta1, main_beta2, main_eps,
    ascent_lr, ascent_beta1, ascent_beta2, ascent_eps,
    train_attack, train_eps, train_step_size, train_steps, train_random_start, train_attack_seed,
    eps_warmup_epochs,
});

overrides!(AttackOverrides {
    attack, eps, step_size, steps, random_start,
    cw_confidence, cw_initial_penalty, cw_steps, cw_lr, cw_rounds,
});

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Directory holding the four MNIST IDX files.
    #[arg(long, value_name = "DIR", default_value = "data/mnist")]
    data_dir: PathBuf,
    /// IDX image file; overrides --data-dir (needs --labels).
    #[arg(long, value_name = "PATH", requires = "labels")]
    images: Option<PathBuf>,
    /// IDX label file matching --images.
    #[arg(long, value_name = "PATH", requires = "images")]
    labels: Option<PathBuf>,
    /// Which MNIST split to read.
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    /// Synthetic Gaussian blobs `CLASSES:PER_CLASS:DIM` instead of files.
    #[arg(long, value_name = "SPEC", conflicts_with_all = ["images", "labels"])]
    blobs: Option<String>,
    /// Blob center separation in units of the blob width.
    #[arg(long, default_value_t = 10.0)]
    blob_separation: f64,
    #[arg(long, default_value_t = 0)]
    blob_seed: u64,
    /// Keep only the first N examples.
    #[arg(long, value_name = "N")]
    limit: Option<usize>,
}

impl DataArgs {
    fn load(&self, default_split: Split) -> Result<Dataset> {
        let split = match self.split {
            Some(SplitArg::Train) => Split::Train,
            Some(SplitArg::Test) => Split::Test,
            None => default_split,
        };
        let ds = if let Some(spec) = &self.blobs {
            let parts: Vec<usize> = spec
                .split(':')
                .map(|p| p.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Usage(format!("--blobs expects CLASSES:PER_CLASS:DIM, got `{spec}`")))?;
            let [classes, per_class, dim] = parts[..] else {
                return Err(Error::Usage(format!("--blobs expects CLASSES:PER_CLASS:DIM, got `{spec}`")).into());
            };
            gen_blobs(classes, per_class, dim, self.blob_separation, self.blob_seed)?
        } else if let (Some(images), Some(labels)) = (&self.images, &self.labels) {
            load_idx(images, labels, split)?
        } else {
            load_mnist(&self.data_dir, split)?
        };
        Ok(match self.limit {
            Some(n) => ds.take_first(n)?,
            None => ds,
        })
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a pipeline and write a checkpoint.
    Train(TrainArgs),
    /// Attack a checkpoint and write per-example results as CSV.
    Attack(AttackArgs),
    /// Accuracy under attack across an epsilon grid, as CSV.
    Curve(CurveArgs),
    /// Maximum-likelihood intrinsic dimension of a point cloud.
    Idim(IdimArgs),
    /// Export latent codes as CSV.
    Embed(EmbedArgs),
    /// Run the built-in invariant checks on synthetic fixtures.
    Selftest,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Master seed for initialization, shuffling, prior draws and attacks.
    #[arg(long)]
    seed: u64,
    /// `key = value` configuration file; flags override its entries.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// Per-epoch CSV log.
    #[arg(long, value_name = "PATH")]
    log: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Seed for random starts.
    #[arg(long)]
    seed: u64,
    /// `key = value` attack configuration; flags override its entries.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Attack the first N examples.
    #[arg(long, default_value_t = 1000)]
    eval_n: usize,
    /// CSV output; standard output when absent.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    overrides: AttackOverrides,
}

#[derive(Debug, Args)]
pub struct CurveArgs {
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// `start:stop:step` (inclusive) or a comma-separated list.
    #[arg(long, default_value = "0:0.4:0.025")]
    grid: String,
    #[arg(long, default_value_t = 1000)]
    eval_n: usize,
    /// Seed for random starts.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    overrides: AttackOverrides,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Seed for random starts of the optional attack.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Attack settings; any of them turns on the correct-after-attack column.
    #[command(flatten)]
    overrides: AttackOverrides,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AveragingArg {
    Inverse,
    Simple,
}

#[derive(Debug, Args)]
pub struct IdimArgs {
    /// CSV point cloud, one point per row.
    #[arg(long, value_name = "PATH", conflicts_with = "manifold")]
    input: Option<PathBuf>,
    /// Synthetic manifold instead of a file or data set.
    #[arg(long, value_name = "KIND")]
    manifold: Option<String>,
    #[arg(long, default_value_t = 1)]
    true_dim: usize,
    #[arg(long, default_value_t = 10)]
    ambient_dim: usize,
    #[arg(long, default_value_t = 1000)]
    points: usize,
    #[arg(long, default_value_t = 6)]
    k1: usize,
    #[arg(long, default_value_t = 12)]
    k2: usize,
    /// Random subsample size; 0 uses every point.
    #[arg(long, default_value_t = 1000)]
    sample: usize,
    /// Seed for the subsample and the synthetic manifold.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "inverse")]
    averaging: AveragingArg,
    /// Without --input or --manifold, images of this data set are used.
    #[command(flatten)]
    data: DataArgs,
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => train_cmd(a),
        Command::Attack(a) => attack_cmd(a),
        Command::Curve(a) => curve_cmd(a),
        Command::Idim(a) => idim_cmd(a),
        Command::Embed(a) => embed_cmd(a),
        Command::Selftest => selftest_cmd(),
    }
}

fn read_config(path: Option<&Path>) -> Result<KeyValues> {
    let Some(path) = path else {
        return Ok(KeyValues::default());
    };
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(KeyValues::parse(&text).with_context(|| format!("reading {}", path.display()))?)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let file = File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(BufWriter::new(file))
}

/// Writes to `path`, or standard output when absent.
fn with_output(path: Option<&Path>, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let io_err = |source| Error::Io {
        path: path.map_or_else(|| PathBuf::from("<stdout>"), Path::to_path_buf),
        source,
    };
    match path {
        Some(p) => {
            let mut w = create(p)?;
            f(&mut w)?;
            w.flush().map_err(io_err)?;
        }
        None => {
            let stdout = io::stdout();
            let mut w = stdout.lock();
            f(&mut w)?;
            w.flush().map_err(io_err)?;
        }
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let file = read_config(a.config.as_deref())?;
    let flags = a.overrides.pairs();
    let regime: Regime = flags
        .iter()
        .rev()
        .find(|(k, _)| *k == "regime")
        .map(|(_, v)| *v)
        .or_else(|| file.get("regime"))
        .ok_or_else(|| Error::Usage("no regime given (use --regime or a config file)".into()))?
        .parse()?;
    let mut config = TrainConfig::new(regime, a.seed);
    for (k, v) in file.iter().filter(|(k, _)| *k != "seed") {
        config.set(k, v).with_context(|| format!("config file key `{k}`"))?;
    }
    for (k, v) in flags {
        config.set(k, v)?;
    }
    config.seed = a.seed;
    config.validate()?;

    let ds = a.data.load(Split::Train)?;
    eprintln!(
        "training {} on {} examples ({} classes), {} epochs",
        config.regime,
        ds.len(),
        ds.num_classes(),
        config.epochs
    );
    let (pipeline, log): (_, TrainLog) = train_with(&config, &ds, |r| {
        eprintln!(
            "epoch {:>3}  acc {:>7.3}%  ce {:.5}  d_obj {:+.3e}  {:.1}s",
            r.epoch, r.clean_acc, r.ce_loss, r.critic_objective, r.wall_time_s
        );
    })?;
    save_checkpoint(&a.out, &pipeline, Some(&config), config.seed)?;
    if let Some(path) = &a.log {
        with_output(Some(path), |w| {
            log.write_csv(w).map_err(|source| Error::Io {
                path: path.clone(),
                source,
            })?;
            Ok(())
        })?;
    }
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

fn attack_config(base: AttackConfig, config: Option<&Path>, overrides: &AttackOverrides) -> Result<AttackConfig> {
    let mut attack = base;
    for (k, v) in read_config(config)?.iter() {
        attack.set(k, v).with_context(|| format!("config file key `{k}`"))?;
    }
    for (k, v) in overrides.pairs() {
        attack.set(k, v)?;
    }
    attack.validate()?;
    Ok(attack)
}

fn load_model(path: &Path) -> Result<Checkpoint> {
    Ok(load_checkpoint(path)?)
}

fn model_id(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "model".to_string(), |s| s.to_string_lossy().replace(',', "_"))
}

fn attack_cmd(a: AttackArgs) -> Result<()> {
    let ck = load_model(&a.checkpoint)?;
    let attack = attack_config(
        AttackConfig {
            seed: a.seed,
            ..AttackConfig::pgd(0.3)
        },
        a.config.as_deref(),
        &a.overrides,
    )?;
    let ds = a.data.load(Split::Test)?;
    if a.eval_n == 0 || a.eval_n > ds.len() {
        bail!(Error::Usage(format!("--eval-n must be in 1..={}", ds.len())));
    }
    let ds = ds.take_first(a.eval_n)?;
    let result = attack.run(&ck.pipeline, ds.images(), ds.labels())?;
    let mean_l2 = result.l2.iter().sum::<f64>() / result.l2.len() as f64;
    eprintln!(
        "{} eps {}: success {:.2}%, robust accuracy {:.2}%, mean RMS l2 {:.5}",
        attack.family.name(),
        attack.epsilon,
        100.0 * result.success_rate(),
        result.robust_accuracy(),
        mean_l2
    );
    let out = a.out.clone();
    with_output(a.out.as_deref(), |w| {
        write_attack_result(&result, ds.labels(), w).map_err(|source| Error::Io {
            path: out.unwrap_or_else(|| "<stdout>".into()),
            source,
        })?;
        Ok(())
    })
}

fn curve_cmd(a: CurveArgs) -> Result<()> {
    let ck = load_model(&a.checkpoint)?;
    let attack = attack_config(
        AttackConfig {
            seed: a.seed,
            ..AttackConfig::pgd(0.3)
        },
        a.config.as_deref(),
        &a.overrides,
    )?;
    let grid = parse_grid(&a.grid)?;
    let ds = a.data.load(Split::Test)?;
    let curve = evaluate_curve(&ck.pipeline, &ds, &attack, &grid, a.eval_n, &model_id(&a.checkpoint))?;
    let out = a.out.clone();
    with_output(a.out.as_deref(), |w| {
        curve.write_csv(w).map_err(|source| Error::Io {
            path: out.unwrap_or_else(|| "<stdout>".into()),
            source,
        })?;
        Ok(())
    })
}

fn embed_cmd(a: EmbedArgs) -> Result<()> {
    let ck = load_model(&a.checkpoint)?;
    let adversarial = a.config.is_some() || !a.overrides.pairs().is_empty();
    let attack = if adversarial {
        Some(attack_config(
            AttackConfig {
                seed: a.seed,
                ..AttackConfig::pgd(0.3)
            },
            a.config.as_deref(),
            &a.overrides,
        )?)
    } else {
        None
    };
    let ds = a.data.load(Split::Test)?;
    with_output(a.out.as_deref(), |w| Ok(export_embeddings(&ck.pipeline, &ds, attack.as_ref(), w)?))
}

fn idim_cmd(a: IdimArgs) -> Result<()> {
    let cloud = if let Some(path) = &a.input {
        let file = File::open(path).map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?;
        PointCloud::read_csv(BufReader::new(file))?
    } else if let Some(kind) = &a.manifold {
        let kind: ManifoldKind = kind.parse()?;
        gen_manifold(kind, a.true_dim, a.ambient_dim, a.points, a.seed)?
    } else {
        PointCloud::new(a.data.load(Split::Train)?.images().clone())?
    };
    let cfg = IdimConfig {
        k1: a.k1,
        k2: a.k2,
        sample_size: (a.sample > 0).then_some(a.sample),
        seed: a.seed,
        averaging: match a.averaging {
            AveragingArg::Inverse => Averaging::InverseMean,
            AveragingArg::Simple => Averaging::Simple,
        },
    };
    let estimate = mle_idim(&cloud, &cfg)?;
    println!("{estimate}");
    Ok(())
}

fn selftest_cmd() -> Result<()> {
    let checks = otlab::selftest::run()?;
    let mut failed = 0;
    for c in &checks {
        println!("{} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
        failed += usize::from(!c.passed);
    }
    if failed > 0 {
        bail!("{failed} of {} self-test checks failed", checks.len());
    }
    println!("all {} checks passed", checks.len());
    Ok(())
}
