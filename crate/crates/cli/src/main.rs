//! `mdgru`: synthesize data, train both stages, localize, evaluate and self-check.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mdgru::checkpoint::load_model;
use mdgru::config::{Profile, RunConfig};
use mdgru::data_io::{generate_synthetic, read_volume, write_landmark, Manifest, Split};
use mdgru::evaluation::{evaluate_variants, format_table, to_csv, Case, Models, Variant};
use mdgru::gradcheck::{run_all, GradcheckConfig};
use mdgru::locnet::{CoordinateDistribution, Model, Stage};
use mdgru::pipeline::localize;
use mdgru::training::{train, Prepared};
use mdgru::{Error, Float};

#[derive(Parser)]
#[command(name = "mdgru", version, about = "Coarse-to-fine landmark localization with MD-GRU networks")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults to the selected profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in profile used when no --config is given.
    #[arg(long, global = true, value_parser = parse_profile)]
    profile: Option<Profile>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Coarse,
    Fine,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset with a manifest.
    Synth {
        /// Number of subjects (synth.count).
        #[arg(long)]
        count: Option<usize>,
        /// Train,validation,test weights (synth.split_weights), e.g. 0.8,0.1,0.1.
        #[arg(long, value_delimiter = ',', num_args = 3)]
        split_weights: Option<Vec<Float>>,
    },
    /// Train one stage on the train split of a manifest.
    Train {
        #[arg(long)]
        stage: StageArg,
        #[arg(long)]
        manifest: PathBuf,
        /// Classes per voxel of a fine network (pipeline.superres).
        #[arg(long)]
        superres_n: Option<usize>,
        /// train.epochs
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Localize the landmark in one volume.
    Localize {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        coarse: PathBuf,
        /// Fine checkpoint; may be repeated, --superres-n picks one.
        #[arg(long, required = true)]
        fine: Vec<PathBuf>,
        #[arg(long)]
        superres_n: Option<usize>,
        /// pipeline.parabola
        #[arg(long)]
        parabola: Option<Switch>,
    },
    /// Run every variant over the test split and write the error report.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        coarse: PathBuf,
        /// Fine checkpoints, one per superresolution factor.
        #[arg(long, required = true)]
        fine: Vec<PathBuf>,
    },
    /// Finite-difference check of every gradient.
    Gradcheck {
        /// Negate the analytic gradients; the check must then fail.
        #[arg(long, hide = true)]
        flip_sign: bool,
    },
}

fn parse_profile(s: &str) -> Result<Profile, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Failure with the process exit code it maps to.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Parse { .. } => 2,
            Error::File { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
            _ => 1,
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

fn usage(msg: impl Display) -> Failure {
    Failure {
        code: 2,
        msg: msg.to_string(),
    }
}

fn log(event: &str, fields: &[(&str, &dyn Display)]) {
    let mut line = format!("event={event}");
    for (k, v) in fields {
        let v = v.to_string();
        if v.contains(char::is_whitespace) || v.is_empty() {
            line.push_str(&format!(" {k}={v:?}"));
        } else {
            line.push_str(&format!(" {k}={v}"));
        }
    }
    println!("{line}");
}

fn base_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match (&common.config, common.profile) {
        (Some(_), Some(_)) => return Err(usage("--config and --profile are mutually exclusive")),
        (Some(path), None) => RunConfig::load(path)?,
        (None, p) => RunConfig::profile(p.unwrap_or(Profile::Desk)),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn out_dir(common: &Common) -> Result<&Path, Failure> {
    common.out.as_deref().ok_or_else(|| usage("--out is required"))
}

/// Creates `dir` and records the effective configuration in it.
fn prepare_out(dir: &Path, cfg: &RunConfig) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure {
        code: 1,
        msg: format!("{}: {e}", dir.display()),
    })?;
    let path = dir.join("config.toml");
    fs::write(&path, cfg.to_toml()).map_err(|e| Failure {
        code: 1,
        msg: format!("{}: {e}", path.display()),
    })
}

fn load_checkpoint(path: &Path, stage: Stage) -> Result<Model, Failure> {
    let m = load_model(path)?;
    if m.stage() != stage {
        return Err(usage(format!("{} holds a {} model, expected {stage}", path.display(), m.stage())));
    }
    Ok(m)
}

fn write_distributions(path: &Path, stages: &[(&str, &CoordinateDistribution)]) -> Result<(), Failure> {
    let mut s = String::from("stage,axis,class,probability\n");
    for (name, d) in stages {
        for (a, probs) in d.axes.iter().enumerate() {
            for (c, p) in probs.iter().enumerate() {
                s.push_str(&format!("{name},{},{c},{p}\n", ["x", "y", "z"][a]));
            }
        }
    }
    fs::write(path, s).map_err(|e| Failure {
        code: 1,
        msg: format!("{}: {e}", path.display()),
    })
}

fn prepare_split(manifest: &Manifest, split: Split, sigma: Float) -> Result<Vec<Prepared>, Failure> {
    manifest
        .split(split)
        .map(|e| {
            let (v, l) = manifest.load_entry(e)?;
            Ok(Prepared::new(e.subject.clone(), &v, l, sigma)?)
        })
        .collect()
}

fn run(cli: Cli) -> Result<(), Failure> {
    let common = &cli.common;
    let mut cfg = base_config(common)?;
    match cli.command {
        Command::Synth { count, split_weights } => {
            if let Some(n) = count {
                cfg.synth.count = n;
            }
            if let Some(w) = split_weights {
                cfg.synth.spec.split_weights = [w[0], w[1], w[2]];
            }
            cfg.validate()?;
            let dir = out_dir(common)?;
            prepare_out(dir, &cfg)?;
            let manifest = generate_synthetic(&cfg.synth.spec, cfg.synth.count, dir)?;
            for split in [Split::Train, Split::Validation, Split::Test] {
                log("synth", &[("split", &split.name()), ("subjects", &manifest.split(split).count())]);
            }
            log("done", &[("manifest", &dir.join("manifest.tsv").display())]);
        }
        Command::Train {
            stage,
            manifest,
            superres_n,
            epochs,
        } => {
            if let Some(n) = superres_n {
                cfg.pipeline.superres = n;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            cfg.validate()?;
            let stage = match stage {
                StageArg::Coarse => Stage::Coarse,
                StageArg::Fine => Stage::Fine,
            };
            let n = match stage {
                Stage::Coarse => 1,
                Stage::Fine => cfg.pipeline.superres,
            };
            let dir = out_dir(common)?;
            let manifest = Manifest::load(&manifest)?;
            let sigma = cfg.pipeline.highpass_sigma;
            let train_set = prepare_split(&manifest, Split::Train, sigma)?;
            let val_set = prepare_split(&manifest, Split::Validation, sigma)?;
            prepare_out(dir, &cfg)?;
            let mut model = Model::build(cfg.model_config(stage, n)?)?;
            log(
                "train_start",
                &[
                    ("stage", &stage),
                    ("superres", &n),
                    ("parameters", &model.store.count()),
                    ("train_subjects", &train_set.len()),
                    ("val_subjects", &val_set.len()),
                    ("seed", &cfg.seed),
                ],
            );
            let report = train(
                &mut model,
                &train_set,
                &val_set,
                &cfg.train_config(),
                &cfg.sampler(stage, n),
                Some(dir),
                &mut |r| {
                    let val = r.val_loss.map(|v| v.to_string()).unwrap_or_else(|| "none".into());
                    log(
                        "epoch",
                        &[
                            ("epoch", &r.epoch),
                            ("iteration", &r.iteration),
                            ("train_loss", &r.train_loss),
                            ("val_loss", &val),
                        ],
                    );
                },
            )?;
            log(
                "done",
                &[
                    ("iterations", &report.iterations),
                    ("model", &dir.join("model.mdgc").display()),
                ],
            );
        }
        Command::Localize {
            volume,
            coarse,
            fine,
            superres_n,
            parabola,
        } => {
            if let Some(n) = superres_n {
                cfg.pipeline.superres = n;
            }
            if let Some(p) = parabola {
                cfg.pipeline.parabola = matches!(p, Switch::On);
            }
            cfg.validate()?;
            let dir = out_dir(common)?;
            let coarse = load_checkpoint(&coarse, Stage::Coarse)?;
            let fines = fine
                .iter()
                .map(|p| load_checkpoint(p, Stage::Fine))
                .collect::<Result<Vec<_>, _>>()?;
            let n = cfg.pipeline.superres;
            let fine = fines
                .iter()
                .find(|m| m.superres() == n)
                .ok_or_else(|| usage(format!("no fine checkpoint with superresolution {n}")))?;
            let v = read_volume(&volume)?;
            prepare_out(dir, &cfg)?;
            let loc = localize(&v, &coarse, fine, &cfg.pipeline)?;
            for w in &loc.warnings {
                log("warning", &[("msg", w)]);
            }
            write_landmark(&loc.landmark, &dir.join("landmark.txt"))?;
            write_distributions(
                &dir.join("distributions.csv"),
                &[("coarse", &loc.coarse_distribution), ("fine", &loc.fine_distribution)],
            )?;
            let [x, y, z] = loc.landmark.coords;
            let [mx, my, mz] = loc.mm;
            log(
                "localized",
                &[("x", &x), ("y", &y), ("z", &z), ("x_mm", &mx), ("y_mm", &my), ("z_mm", &mz)],
            );
        }
        Command::Evaluate { manifest, coarse, fine } => {
            cfg.validate()?;
            let dir = out_dir(common)?;
            let coarse = load_checkpoint(&coarse, Stage::Coarse)?;
            let mut fines = fine
                .iter()
                .map(|p| load_checkpoint(p, Stage::Fine))
                .collect::<Result<Vec<_>, _>>()?;
            fines.sort_by_key(|m| m.superres());
            let mut variants = vec![Variant::CoarseOnly];
            for m in &fines {
                for parabola in [false, true] {
                    variants.push(Variant::Fine {
                        superres: m.superres(),
                        parabola,
                    });
                }
            }
            let manifest = Manifest::load(&manifest)?;
            let data = manifest
                .split(Split::Test)
                .map(|e| Ok((e.subject.clone(), manifest.load_entry(e)?)))
                .collect::<Result<Vec<_>, Error>>()?;
            if data.is_empty() {
                return Err(usage("the manifest has no test subjects"));
            }
            let cases: Vec<Case> = data
                .iter()
                .map(|(id, (v, l))| Case {
                    id,
                    volume: v,
                    truth: *l,
                })
                .collect();
            prepare_out(dir, &cfg)?;
            let models = Models {
                coarse: &coarse,
                fine: fines.iter().collect(),
            };
            let reports = evaluate_variants(&cases, &models, &variants, &cfg.pipeline)?;
            let table = format_table(&reports);
            fs::write(dir.join("errors.csv"), to_csv(&reports)).map_err(|e| Failure {
                code: 1,
                msg: e.to_string(),
            })?;
            fs::write(dir.join("report.txt"), &table).map_err(|e| Failure {
                code: 1,
                msg: e.to_string(),
            })?;
            for r in &reports {
                let (mm, vox) = (r.mm(), r.voxels());
                log(
                    "variant",
                    &[
                        ("label", &r.variant),
                        ("cases", &mm.count),
                        ("median_mm", &mm.median),
                        ("mean_mm", &mm.mean),
                        ("std_mm", &mm.std),
                        ("mean_vox", &vox.mean),
                    ],
                );
            }
            print!("{table}");
        }
        Command::Gradcheck { flip_sign } => {
            let gc = GradcheckConfig {
                seed: cfg.seed,
                flip_sign,
                ..GradcheckConfig::default()
            };
            if let Some(dir) = &common.out {
                prepare_out(dir, &cfg)?;
            }
            let report = run_all(&gc)?;
            print!("{}", report.format());
            if let Some(dir) = &common.out {
                fs::write(dir.join("gradcheck.txt"), report.format()).map_err(|e| Failure {
                    code: 1,
                    msg: e.to_string(),
                })?;
            }
            log(
                "done",
                &[
                    ("passed", &report.passed()),
                    ("max_rel_error", &format!("{:.3e}", report.max_rel_error())),
                ],
            );
            if !report.passed() {
                return Err(Failure {
                    code: 1,
                    msg: "gradient check failed".into(),
                });
            }
        }
    }
    Ok(())
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("MDGRU_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("MDGRU_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| usage(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match configure_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
