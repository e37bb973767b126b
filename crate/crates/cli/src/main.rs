use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::Rng;

use rscnn::conv::{dense_conv2d, grid_conv_oracle};
use rscnn::data::{generate_dataset, read_manifest, write_dataset, Split};
use rscnn::geometry::io::{read as read_cloud, write_atomic};
use rscnn::geometry::PointCloud;
use rscnn::gradcheck::{run_suite, GradCheckOptions};
use rscnn::networks::Task;
use rscnn::rng::stream;
use rscnn::train::{
    checkpoint, density_csv, density_harness, evaluate, invariance_csv, invariance_harness, metrics_csv, predict,
    vote_accuracy, Config, Perturbation, RunReport, Trainer,
};
use rscnn::Exec;

#[derive(Parser)]
#[command(name = "rscnn", version, about = "Relation-shape CNN on point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` run configuration; the classification preset if omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file or directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DataArg {
    /// Directory with `train.manifest` / `test.manifest`; generated from the
    /// config when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic train and test sets as point-cloud files.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train; writes metrics.csv, model.ckpt, report.json and config.txt.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Test-set loss and accuracy of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scale-augmented votes averaged per cloud (classification).
        #[arg(long, default_value_t = 1)]
        votes: usize,
    },
    /// Outputs for one point-cloud file.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Finite-difference check of every operation and the miniature networks.
    CheckGrad {
        #[command(flatten)]
        common: Common,
    },
    /// Accuracy under permutation, translation and Y rotation.
    Invariance {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Accuracy with fewer input points.
    Density {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "256,128,64,32")]
        counts: Vec<usize>,
    },
    /// Grid convolution against its RS-Conv formulation on random maps.
    GridconvCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 50)]
        instances: usize,
    },
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Ok(Config::load(p)?),
        None => Ok(Config::preset(Task::Classification)),
    }
}

fn exec(config: &Config) -> Exec {
    if config.parallel {
        Exec::Parallel
    } else {
        Exec::Sequential
    }
}

fn load_split(config: &Config, data: &DataArg, split: Split) -> Result<Vec<PointCloud>> {
    match &data.data {
        Some(dir) => {
            let name = match split {
                Split::Train => "train.manifest",
                Split::Test => "test.manifest",
            };
            Ok(read_manifest(&dir.join(name))?)
        }
        None => Ok(generate_dataset(&config.dataset(), split, exec(config))?),
    }
}

fn load_model(config: &Config, path: &Path) -> Result<Trainer> {
    let mut trainer = Trainer::new(config.network()?, 0)?;
    checkpoint::load(path, &mut trainer.store)?;
    Ok(trainer)
}

fn write(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(c: &Common) -> Result<()> {
    let mut config = load_config(c.config.as_deref())?;
    config.data_seed = c.seed;
    std::fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    let spec = config.dataset();
    for (split, stem) in [(Split::Train, "train"), (Split::Test, "test")] {
        let clouds = generate_dataset(&spec, split, exec(&config))?;
        write_dataset(&c.out, stem, &clouds)?;
        println!("{stem}: {} clouds", clouds.len());
    }
    Ok(())
}

fn train(c: &Common, data: &DataArg, resume: Option<&Path>) -> Result<()> {
    let config = load_config(c.config.as_deref())?;
    let train = load_split(&config, data, Split::Train)?;
    let test = load_split(&config, data, Split::Test)?;
    let opts = config.train_options(c.seed);
    let mut trainer = match resume {
        Some(p) => Trainer::resume(config.network()?, p)?,
        None => Trainer::new(config.network()?, c.seed)?,
    };
    let start = Instant::now();
    let rows = trainer.train(&train, Some(&test), &opts, |m| {
        println!("epoch {:>3} {:<5} loss {:.4} accuracy {:.4}", m.epoch, m.split, m.loss, m.accuracy);
    })?;
    let final_test = evaluate(&trainer.network, &trainer.store, &test, c.seed, opts.exec, opts.batch_size)?;
    let report = RunReport {
        seed: c.seed,
        config_fingerprint: config.fingerprint(),
        epochs: trainer.epoch,
        final_train: rows.iter().rev().find(|r| r.split == "train").cloned(),
        final_test: Some(final_test),
        rows,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    std::fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    trainer.save(&c.out.join("model.ckpt"))?;
    write(&c.out.join("metrics.csv"), &metrics_csv(&report.rows))?;
    write(&c.out.join("config.txt"), &config.to_text())?;
    write(&c.out.join("report.json"), &report.to_json())?;
    println!("test loss {:.4} accuracy {:.4}", final_test.loss, final_test.accuracy);
    Ok(())
}

fn eval(c: &Common, data: &DataArg, ckpt: &Path, votes: usize) -> Result<()> {
    let config = load_config(c.config.as_deref())?;
    let model = load_model(&config, ckpt)?;
    let test = load_split(&config, data, Split::Test)?;
    let e = evaluate(&model.network, &model.store, &test, c.seed, exec(&config), config.batch_size)?;
    let mut text = format!("split,loss,accuracy,votes,voted_accuracy\ntest,{},{},{votes},", e.loss, e.accuracy);
    if config.task == Task::Classification {
        let acc = vote_accuracy(&model.network, &model.store, &test, votes, &config.augmentation, c.seed, exec(&config))?;
        text.push_str(&format!("{acc}\n"));
        println!("test loss {:.4} accuracy {:.4} voted ({votes}) {:.4}", e.loss, e.accuracy, acc);
    } else {
        if votes != 1 {
            bail!("--votes applies to classification only");
        }
        text.push_str(&format!("{}\n", e.accuracy));
        println!("test loss {:.4} accuracy {:.4}", e.loss, e.accuracy);
    }
    if let Some(angle) = e.mean_angle_deg {
        println!("mean angular error {angle:.2} degrees");
    }
    write(&c.out, &text)
}

fn predict_cmd(c: &Common, ckpt: &Path, input: &Path) -> Result<()> {
    let config = load_config(c.config.as_deref())?;
    let model = load_model(&config, ckpt)?;
    let cloud = read_cloud(input)?;
    let text = match config.task {
        Task::Classification => {
            let probs = predict(&model.network, &model.store, std::slice::from_ref(&cloud), c.seed, Exec::Sequential)?;
            let row = &probs[0];
            let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
            let names = config.families.get(best).cloned().unwrap_or_default();
            println!("class {best} ({names}) p={:.4}", row[best]);
            let cells: Vec<String> = row.iter().map(|p| p.to_string()).collect();
            format!("class {best}\n{}\n", cells.join(" "))
        }
        Task::Segmentation | Task::NormalEstimation => {
            let h = model.network.prepare(&cloud, &mut stream(c.seed, &[0]))?;
            let mut tape = rscnn::tensor::Tape::new(&model.store);
            let rows: Vec<Vec<f64>> = if config.task == Task::Segmentation {
                let onehot = if config.onehot {
                    Some(vec![cloud
                        .shape_label
                        .context("segmentation with a shape one-hot needs `LABEL k` in the input")?])
                } else {
                    None
                };
                let out = model.network.segment(&mut tape, &[&h], onehot.as_deref(), false, &mut stream(0, &[]))?;
                tape.value(out)
                    .chunks(config.num_classes)
                    .map(|r| {
                        let best = (0..r.len()).fold(0, |b, i| if r[i] > r[b] { i } else { b });
                        vec![best as f64]
                    })
                    .collect()
            } else {
                let out = model.network.normals(&mut tape, &[&h], false, &mut stream(0, &[]))?;
                tape.value(out).chunks(3).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
            };
            let mut text = format!("{}\n", rows.len());
            for (p, r) in h.levels[0].coords.iter().zip(&rows) {
                let vals: Vec<String> = p.iter().chain(r).map(|v| v.to_string()).collect();
                text.push_str(&vals.join(" "));
                text.push('\n');
            }
            println!("{} points", rows.len());
            text
        }
    };
    write(&c.out, &text)
}

fn check_grad(c: &Common) -> Result<()> {
    if let Some(p) = &c.config {
        Config::load(p)?;
    }
    let entries = run_suite(c.seed, GradCheckOptions::default())?;
    let mut text = String::from("check,entries,max_rel_err,max_abs_err,passed\n");
    let mut failed = Vec::new();
    for e in &entries {
        let r = &e.report;
        text.push_str(&format!("{},{},{:e},{:e},{}\n", e.name, r.checked, r.max_rel_err, r.max_abs_err, r.passed()));
        if !r.passed() {
            failed.push(e.name.clone());
        }
    }
    write(&c.out, &text)?;
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    println!("{} checks passed", entries.len());
    Ok(())
}

fn invariance(c: &Common, data: &DataArg, ckpt: &Path) -> Result<()> {
    let config = load_config(c.config.as_deref())?;
    let model = load_model(&config, ckpt)?;
    let test = load_split(&config, data, Split::Test)?;
    let cols = invariance_harness(&model.network, &model.store, &test, &Perturbation::STANDARD, c.seed, exec(&config))?;
    for col in &cols {
        println!("{:<14} accuracy {:.4} max relative logit change {:.2e}", col.perturbation.to_string(), col.accuracy, col.max_rel_logit_diff);
    }
    write(&c.out, &invariance_csv(&cols))
}

fn density(c: &Common, data: &DataArg, ckpt: &Path, counts: &[usize]) -> Result<()> {
    let config = load_config(c.config.as_deref())?;
    let model = load_model(&config, ckpt)?;
    let test = load_split(&config, data, Split::Test)?;
    let rows = density_harness(&model.network, &model.store, &test, counts, c.seed, exec(&config), config.batch_size)?;
    for r in &rows {
        println!("{:>4} points accuracy {:.4}", r.points, r.evaluation.accuracy);
    }
    write(&c.out, &density_csv(&rows))
}

fn gridconv_check(c: &Common, instances: usize) -> Result<()> {
    if let Some(p) = &c.config {
        Config::load(p)?;
    }
    let mut rng = stream(c.seed, &[]);
    let mut text = String::from("instance,channels,max_abs_diff\n");
    let mut worst = 0.0f64;
    for i in 0..instances {
        let ch = rng.random_range(1..=4);
        let kernel: Vec<f64> = (0..9 * ch).map(|_| rng.random_range(-1.0..1.0)).collect();
        let map: Vec<f64> = (0..25 * ch).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dense = dense_conv2d(&kernel, &map, 5, 5, ch)?;
        let rs = grid_conv_oracle(&kernel, &map, 5, 5, ch)?;
        let diff = dense.iter().zip(&rs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(diff);
        text.push_str(&format!("{i},{ch},{diff:e}\n"));
    }
    write(&c.out, &text)?;
    if worst > 1e-9 {
        bail!("grid convolution mismatch {worst:e} exceeds 1e-9");
    }
    println!("{instances} instances agree, max difference {worst:e}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData { common } => gen_data(common),
        Command::Train { common, data, resume } => train(common, data, resume.as_deref()),
        Command::Eval {
            common,
            data,
            checkpoint,
            votes,
        } => eval(common, data, checkpoint, *votes),
        Command::Predict {
            common,
            checkpoint,
            input,
        } => predict_cmd(common, checkpoint, input),
        Command::CheckGrad { common } => check_grad(common),
        Command::Invariance {
            common,
            data,
            checkpoint,
        } => invariance(common, data, checkpoint),
        Command::Density {
            common,
            data,
            checkpoint,
            counts,
        } => density(common, data, checkpoint, counts),
        Command::GridconvCheck { common, instances } => gridconv_check(common, *instances),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {line}");
            ExitCode::FAILURE
        }
    }
}
