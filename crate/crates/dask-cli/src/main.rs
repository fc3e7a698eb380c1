//! Command-line driver: benchmark generation, rehearser training, image
//! restyling, full lifelong runs, and ablation suites.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/config validation error,
//! 3 runtime failure. Directory-producing commands write into a staging
//! directory and rename it into place, so failures leave no partial output.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dask_core::checkpoint::{load_rehearser, save_rehearser, save_reid_model};
use dask_core::dataset_io::{generate_benchmark, load_benchmark, save_benchmark, BenchmarkData};
use dask_core::image::{read_ppm, write_ppm};
use dask_core::lifelong::{run_ablation, run_sequence_with, AblationRow, Variant, VariantSpec};
use dask_core::rehearser::{train_rehearser, Rehearser};
use dask_core::report::{write_ablation_table, write_embeddings_csv, write_metrics_json};
use dask_core::synthbench::{MetricsReport, Split};
use dask_core::{Error, ExperimentConfig};

#[derive(Parser)]
#[command(name = "dask", version, about = "Lifelong re-identification with style rehearsing")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic multi-domain benchmark into a directory.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a style rehearser on one domain's train split.
    TrainRehearser {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Seen-domain index to train on.
        #[arg(long, default_value_t = 0)]
        domain: usize,
    },
    /// Restyle one PPM image with a trained rehearser.
    Transfer {
        #[arg(long)]
        rehearser: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full lifelong sequence and write metrics, checkpoints, and
    /// embedding dumps.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an ablation suite; writes table.csv and table.json.
    ///
    /// Suites: "input" (training-data variants), "loss" (rehearsed-loss
    /// flags), "nk=1,2,3" (kernel-count sweep), or a comma-separated list of
    /// variant names.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        suite: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are successful exits.
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match execute(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(match err {
                Error::Config(_)
                | Error::InvalidArgument(_)
                | Error::DataFormat(_)
                | Error::CheckpointMagic
                | Error::CheckpointTruncated(_)
                | Error::CheckpointKind { .. }
                | Error::CheckpointShape(_)
                | Error::EmptyInput(_) => 2,
                _ => 3,
            })
        }
    }
}

fn execute(cmd: Cmd) -> Result<(), Error> {
    match cmd {
        Cmd::GenData { config, out } => gen_data(&config, &out),
        Cmd::TrainRehearser {
            config,
            data,
            out,
            domain,
        } => train_rehearser_cmd(&config, &data, &out, domain),
        Cmd::Transfer {
            rehearser,
            input,
            out,
        } => transfer_cmd(&rehearser, &input, &out),
        Cmd::Run { config, data, out } => run_cmd(&config, &data, &out),
        Cmd::Ablate { config, suite, out } => ablate_cmd(&config, &suite, &out),
    }
}

/// Builds outputs in `<out>.staging`, then renames into place on success.
struct StagedDir {
    staging: PathBuf,
    target: PathBuf,
}

impl StagedDir {
    fn create(target: &Path) -> Result<Self, Error> {
        if target.exists() && std::fs::read_dir(target)?.next().is_some() {
            return Err(Error::InvalidArgument(format!(
                "output directory {} is not empty",
                target.display()
            )));
        }
        let staging = target.with_extension("staging");
        if staging.exists() {
            std::fs::remove_dir_all(&staging)?;
        }
        std::fs::create_dir_all(&staging)?;
        Ok(StagedDir {
            staging,
            target: target.to_path_buf(),
        })
    }

    fn path(&self) -> &Path {
        &self.staging
    }

    fn commit(self) -> Result<(), Error> {
        if self.target.exists() {
            std::fs::remove_dir(&self.target)?;
        }
        std::fs::rename(&self.staging, &self.target)?;
        std::mem::forget(self);
        Ok(())
    }
}

impl Drop for StagedDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.staging);
    }
}

/// Writes a single output file via a temp sibling so failures leave nothing.
fn write_file_atomically(
    path: &Path,
    write: impl FnOnce(&Path) -> Result<(), Error>,
) -> Result<(), Error> {
    let tmp = path.with_extension("tmp");
    match write(&tmp) {
        Ok(()) => {
            std::fs::rename(&tmp, path)?;
            Ok(())
        }
        Err(e) => {
            let _ = std::fs::remove_file(&tmp);
            Err(e)
        }
    }
}

fn echo_config(cfg: &ExperimentConfig, dir: &Path) -> Result<(), Error> {
    std::fs::write(dir.join("config_resolved.json"), cfg.to_json()?)?;
    Ok(())
}

fn gen_data(config: &Path, out: &Path) -> Result<(), Error> {
    let cfg = ExperimentConfig::from_path(config)?;
    let staged = StagedDir::create(out)?;
    let data = generate_benchmark(&cfg.benchmark, cfg.seed)?;
    save_benchmark(&data, staged.path())?;
    echo_config(&cfg, staged.path())?;
    staged.commit()
}

fn train_rehearser_cmd(
    config: &Path,
    data: &Path,
    out: &Path,
    domain: usize,
) -> Result<(), Error> {
    let cfg = ExperimentConfig::from_path(config)?;
    let bench = load_benchmark(data)?;
    let dataset = bench.seen.get(domain).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "domain {domain} out of range ({} seen domains)",
            bench.seen.len()
        ))
    })?;
    let (train_imgs, _) = dataset.images_of(Split::Train);
    let images: Vec<_> = train_imgs.into_iter().cloned().collect();
    let mut rng = dask_core::rng::stream(cfg.seed, "cli-rehearser", domain as u64);
    let net = Rehearser::Kernel(train_rehearser(&images, &cfg.rehearser, &mut rng)?);
    let hash = cfg.hash()?;
    write_file_atomically(out, |tmp| save_rehearser(&net, &hash, tmp))
}

fn transfer_cmd(rehearser: &Path, input: &Path, out: &Path) -> Result<(), Error> {
    let reh = load_rehearser(rehearser)?;
    let img = read_ppm(input)?;
    let styled = reh.transfer(&img)?;
    write_file_atomically(out, |tmp| write_ppm(&styled.clipped(), tmp))
}

fn run_cmd(config: &Path, data: &Path, out: &Path) -> Result<(), Error> {
    let cfg = ExperimentConfig::from_path(config)?;
    let bench = load_benchmark(data)?;
    let staged = StagedDir::create(out)?;
    echo_config(&cfg, staged.path())?;
    let hash = cfg.hash()?;

    let dir = staged.path().to_path_buf();
    let outcome = run_sequence_with(
        &bench.seen,
        &bench.unseen,
        &cfg.train,
        &cfg.rehearser,
        &cfg.variant,
        cfg.retained_capacity,
        cfg.seed,
        |state| {
            let t = state.step;
            save_reid_model(
                state.model.as_ref().unwrap(),
                &hash,
                &dir.join(format!("reid_step{t}.ckpt")),
            )?;
            if let Some(reh) = state.retained.last() {
                save_rehearser(reh, &hash, &dir.join(format!("rehearser_step{t}.ckpt")))?;
            }
            Ok(())
        },
    )?;

    let report = MetricsReport {
        seed: cfg.seed,
        config_hash: hash,
        variant: cfg.variant.variant.name().into(),
        seen: outcome.evaluation.seen.clone(),
        unseen: outcome.evaluation.unseen.clone(),
        seen_avg: outcome.evaluation.seen_avg,
        unseen_avg: outcome.evaluation.unseen_avg,
        steps: outcome.history.clone(),
        config: serde_json::to_value(&cfg)?,
    };
    write_metrics_json(&report, &staged.path().join("metrics.json"))?;
    write_embeddings_csv(
        outcome.state.model.as_ref().unwrap(),
        &bench.seen,
        &bench.unseen,
        &staged.path().join("embeddings.csv"),
    )?;
    staged.commit()
}

fn parse_suite(suite: &str, cfg: &ExperimentConfig) -> Result<Vec<AblationRow>, Error> {
    let base_reh = cfg.rehearser.clone();
    let rows = match suite {
        "input" => vec![
            Variant::Baseline,
            Variant::StyleAug,
            Variant::SharedConv,
            Variant::StatsPred,
            Variant::Dask,
        ]
        .into_iter()
        .map(|v| AblationRow {
            label: v.name().into(),
            spec: VariantSpec::new(v),
            rehearser: base_reh.clone(),
        })
        .collect(),
        "loss" => {
            let mut rows = Vec::new();
            for (label, reid_flag, skd_flag) in [
                ("baseline", false, false),
                ("rehearsed_reid", true, false),
                ("rehearsed_skd", false, true),
                ("rehearsed_both", true, true),
            ] {
                let spec = if !reid_flag && !skd_flag {
                    VariantSpec::new(Variant::Baseline)
                } else {
                    VariantSpec {
                        variant: Variant::Dask,
                        use_rehearsed_reid_loss: reid_flag,
                        use_rehearsed_skd_loss: skd_flag,
                    }
                };
                rows.push(AblationRow {
                    label: label.into(),
                    spec,
                    rehearser: base_reh.clone(),
                });
            }
            rows
        }
        s if s.starts_with("nk=") => {
            let counts: Vec<usize> = s[3..]
                .split(',')
                .map(|tok| {
                    tok.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Config(format!("bad kernel count '{tok}'")))
                })
                .collect::<Result<_, _>>()?;
            if counts.is_empty() {
                return Err(Error::Config("empty kernel-count sweep".into()));
            }
            counts
                .into_iter()
                .map(|nk| {
                    let mut reh = base_reh.clone();
                    reh.kernels_per_image = nk;
                    AblationRow {
                        label: format!("dask_nk{nk}"),
                        spec: VariantSpec::new(Variant::Dask),
                        rehearser: reh,
                    }
                })
                .collect()
        }
        list => list
            .split(',')
            .map(|name| {
                Variant::parse(name.trim()).map(|v| AblationRow {
                    label: v.name().into(),
                    spec: VariantSpec::new(v),
                    rehearser: base_reh.clone(),
                })
            })
            .collect::<Result<_, _>>()?,
    };
    Ok(rows)
}

fn ablate_cmd(config: &Path, suite: &str, out: &Path) -> Result<(), Error> {
    let cfg = ExperimentConfig::from_path(config)?;
    let rows = parse_suite(suite, &cfg)?;
    let BenchmarkData { seen, unseen } = generate_benchmark(&cfg.benchmark, cfg.seed)?;
    let staged = StagedDir::create(out)?;
    echo_config(&cfg, staged.path())?;
    let entries = run_ablation(
        &rows,
        &seen,
        &unseen,
        &cfg.train,
        cfg.retained_capacity,
        cfg.seed,
    )?;
    write_ablation_table(
        &entries,
        &staged.path().join("table.csv"),
        &staged.path().join("table.json"),
    )?;
    staged.commit()
}
