//! Command-line front end: dataset synthesis, training, evaluation sweeps,
//! schedule comparisons and sampling. All randomness flows from `--seed`;
//! identical invocations on identical data produce byte-identical outputs.

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use maskcond::conditions::{CategoricalEntry, ConditionSchema, ConditionVector, NumericalEntry};
use maskcond::data::{
    load_image_dataset, load_pointcloud_csv, render_dataset, save_image_dataset, save_png,
    synth_generate, write_pointcloud_csv, ImageDataset, PointCloudDataset, SynthSpec,
};
use maskcond::harness::checkpoint::{load_checkpoint, save_diffusion, save_vae, Model};
use maskcond::harness::svg::{write_line_chart, Series};
use maskcond::harness::{
    compare_schedules, eval_mse_vs_sparsity, eval_reconstruction_mse, sweep_dataset_size,
    EvalMode, SweepResult,
};
use maskcond::mcdm::{DiffusionConfig, McDiffusion};
use maskcond::mcvae::{GenerationMode, McVae, VaeConfig};
use maskcond::schedules::ScheduleSpec;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "maskcond", version, about = "Masked conditioning for small generative models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic point-cloud dataset with a closed-form oracle.
    GenSynth(GenSynthArgs),
    /// Train a model.
    Train {
        #[command(subcommand)]
        which: TrainCmd,
    },
    /// Evaluate a trained model.
    Eval {
        #[command(subcommand)]
        which: EvalCmd,
    },
    /// Train/evaluate grids of models.
    Sweep {
        #[command(subcommand)]
        which: SweepCmd,
    },
    /// Train one model per sparsity schedule and tabulate MSE.
    CompareSchedules(CompareArgs),
    /// Draw samples from a checkpoint.
    Sample(SampleArgs),
}

#[derive(Subcommand)]
enum TrainCmd {
    /// Masked-conditioning VAE on a point-cloud dataset.
    Vae(TrainArgs),
    /// Masked-conditioning diffusion model on rendered images.
    Dm(TrainArgs),
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Reconstruction MSE across inference sparsity levels.
    Sparsity(EvalSparsityArgs),
}

#[derive(Subcommand)]
enum SweepCmd {
    /// Dataset-size sweep: fresh model per (size, training sparsity, seed).
    Size(SweepSizeArgs),
}

#[derive(Args)]
struct GenSynthArgs {
    /// Synthetic family spec JSON (num_styles, num_variants, noise_std, k).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Embedding width per categorical feature recorded in the schema.
    #[arg(long, default_value_t = 8)]
    d_cat: usize,
    /// Embedding width per numerical feature recorded in the schema.
    #[arg(long, default_value_t = 8)]
    d_num: usize,
    /// Also rasterize the dataset to PNGs under `<out>/images`.
    #[arg(long)]
    render: bool,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON with `model` and `schedule` objects.
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory (dataset.csv or annotations.csv, plus schema.json).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Layout extent dividing keypoints into [-1,1] when rendering images.
    #[arg(long, default_value_t = 2.5)]
    extent: f64,
}

#[derive(Args)]
struct EvalSparsityArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated inference sparsity levels.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.2, 0.4, 0.6, 0.8, 0.9])]
    levels: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of evaluation seeds (seed, seed+1, ...).
    #[arg(long, default_value_t = 3)]
    seeds: usize,
    /// Latent source: posterior of the reference sample, or the prior.
    #[arg(long, default_value = "posterior")]
    mode: String,
    /// Also emit an SVG line chart.
    #[arg(long)]
    svg: bool,
}

#[derive(Args)]
struct SweepSizeArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    sizes: Vec<usize>,
    /// Training sparsities; one fresh model per (size, sparsity, seed).
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.2, 0.4, 0.6, 0.8])]
    sparsities: Vec<f64>,
    /// Inference sparsity levels each trained model is evaluated at.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0])]
    levels: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    seeds: usize,
    #[arg(long)]
    svg: bool,
}

#[derive(Args)]
struct CompareArgs {
    /// JSON with `model` and a `schedules` array of named schedule specs.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.2, 0.4, 0.6, 0.8, 0.9])]
    levels: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    seeds: usize,
    #[arg(long)]
    svg: bool,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    count: usize,
    /// JSON object mapping feature names to values; omitted or null entries
    /// are masked. Defaults to all conditions masked.
    #[arg(long)]
    conditions: Option<PathBuf>,
}

#[derive(Deserialize)]
struct VaeTrainConfig {
    model: VaeConfig,
    schedule: ScheduleSpec,
}

#[derive(Deserialize)]
struct DmTrainConfig {
    model: DiffusionConfig,
    schedule: ScheduleSpec,
}

#[derive(Deserialize)]
struct NamedSchedule {
    name: String,
    #[serde(flatten)]
    spec: ScheduleSpec,
}

#[derive(Deserialize)]
struct CompareConfig {
    model: VaeConfig,
    schedules: Vec<NamedSchedule>,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(2);
    }
}

fn run(cli: Cli) -> maskcond::Result<()> {
    match cli.cmd {
        Cmd::GenSynth(a) => gen_synth(a),
        Cmd::Train { which: TrainCmd::Vae(a) } => train_vae(a),
        Cmd::Train { which: TrainCmd::Dm(a) } => train_dm(a),
        Cmd::Eval { which: EvalCmd::Sparsity(a) } => eval_sparsity(a),
        Cmd::Sweep { which: SweepCmd::Size(a) } => sweep_size(a),
        Cmd::CompareSchedules(a) => compare(a),
        Cmd::Sample(a) => sample(a),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> maskcond::Result<T> {
    Ok(serde_json::from_reader(std::fs::File::open(path)?)?)
}

fn load_dataset(dir: &Path) -> maskcond::Result<PointCloudDataset> {
    load_pointcloud_csv(&dir.join("dataset.csv"), &dir.join("schema.json"))
}

fn seed_list(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| base + i).collect()
}

fn write_sweep_outputs(
    result: &SweepResult,
    out: &Path,
    stem: &str,
    svg: bool,
    x_label: &str,
) -> maskcond::Result<()> {
    std::fs::create_dir_all(out)?;
    result.write_csv(&out.join(format!("{stem}.csv")))?;
    result.write_trend_csv(&out.join(format!("{stem}_trend.csv")))?;
    if svg {
        let mut series: Vec<Series> = Vec::new();
        for r in &result.rows {
            match series.iter_mut().find(|s| s.name == r.sweep_var) {
                Some(s) => s.points.push((r.level, r.mse_mean)),
                None => series.push(Series {
                    name: r.sweep_var.clone(),
                    points: vec![(r.level, r.mse_mean)],
                }),
            }
        }
        write_line_chart(
            &out.join(format!("{stem}.svg")),
            stem,
            x_label,
            "mse",
            &series,
        )?;
    }
    Ok(())
}

fn gen_synth(a: GenSynthArgs) -> maskcond::Result<()> {
    let spec: SynthSpec = match &a.config {
        Some(p) => read_json(p)?,
        None => SynthSpec::default(),
    };
    let data = synth_generate(&spec, a.samples, a.seed, a.d_cat, a.d_num)?;
    std::fs::create_dir_all(&a.out)?;
    serde_json::to_writer_pretty(
        std::fs::File::create(a.out.join("schema.json"))?,
        &data.schema,
    )?;
    write_pointcloud_csv(&data, &a.out.join("dataset.csv"))?;
    if a.render {
        let images = render_dataset(&data, (1, a.image_size, a.image_size), 2.5);
        save_image_dataset(&images, &a.out.join("images"))?;
    }
    println!("wrote {} samples to {}", data.len(), a.out.display());
    Ok(())
}

fn train_vae(a: TrainArgs) -> maskcond::Result<()> {
    let cfg: VaeTrainConfig = read_json(&a.config)?;
    let data = load_dataset(&a.data)?;
    let mut model = McVae::init(&cfg.model, &data.schema, a.seed)?;
    let report = model.train(&data, &cfg.schedule, a.seed)?;
    std::fs::create_dir_all(&a.out)?;
    save_vae(&model, &a.out.join("vae.ckpt"))?;
    report.write_csv(&a.out.join("report.csv"))?;
    let last = report.steps.last().unwrap();
    println!(
        "trained vae: {} updates, final total {:.6}",
        report.steps.len(),
        last.total
    );
    Ok(())
}

fn train_dm(a: TrainArgs) -> maskcond::Result<()> {
    let cfg: DmTrainConfig = read_json(&a.config)?;
    let shape = (cfg.model.image_channels, cfg.model.image_size, cfg.model.image_size);
    let images: ImageDataset = if a.data.join("annotations.csv").exists() {
        load_image_dataset(&a.data, &a.data.join("schema.json"), shape)?
    } else {
        let pc = load_dataset(&a.data)?;
        render_dataset(&pc, shape, a.extent)
    };
    let mut model = McDiffusion::init(&cfg.model, &images.schema, a.seed)?;
    let report = model.train_with_progress(&images, &cfg.schedule, a.seed, |s| {
        if s.step % 100 == 0 {
            eprintln!("step {} loss {:.5}", s.step, s.total);
        }
    })?;
    std::fs::create_dir_all(&a.out)?;
    save_diffusion(&model, &a.out.join("dm.ckpt"))?;
    report.write_csv(&a.out.join("report.csv"))?;
    println!("trained dm: {} updates", report.steps.len());
    Ok(())
}

fn eval_sparsity(a: EvalSparsityArgs) -> maskcond::Result<()> {
    let mode = match a.mode.as_str() {
        "posterior" => EvalMode::Posterior,
        "prior" => EvalMode::Prior,
        other => {
            return Err(maskcond::Error::Config(format!(
                "unknown eval mode {other:?}; use posterior or prior"
            )))
        }
    };
    let Model::Vae(model) = load_checkpoint(&a.checkpoint)? else {
        return Err(maskcond::Error::Config(
            "eval sparsity expects a vae checkpoint".into(),
        ));
    };
    let data = load_dataset(&a.data)?;
    let seeds = seed_list(a.seed, a.seeds);
    let result = eval_mse_vs_sparsity(&model, &data, &a.levels, &seeds, mode)?;
    write_sweep_outputs(&result, &a.out, "sparsity", a.svg, "inference sparsity")?;
    // per-seed breakdown alongside the aggregate
    {
        let mut w = csv::WriterBuilder::new().from_path(a.out.join("sparsity_per_seed.csv"))?;
        w.write_record(["level", "seed", "mse"])?;
        for &level in &a.levels {
            for &seed in &seeds {
                let mse = eval_reconstruction_mse(&model, &data, level, seed, mode)?;
                w.write_record([format!("{level}"), seed.to_string(), format!("{mse}")])?;
            }
        }
        w.flush()?;
    }
    for (g, s) in result.trend() {
        println!("{g}: spearman(level, mse) = {s:.3}");
    }
    Ok(())
}

fn sweep_size(a: SweepSizeArgs) -> maskcond::Result<()> {
    let cfg: VaeTrainConfig = read_json(&a.config)?;
    let data = load_dataset(&a.data)?;
    let seeds = seed_list(a.seed, a.seeds);
    let result =
        sweep_dataset_size(&data, &a.sizes, &a.sparsities, &cfg.model, &a.levels, &seeds)?;
    write_sweep_outputs(&result, &a.out, "size_sweep", a.svg, "inference sparsity")?;
    println!("{} rows", result.rows.len());
    Ok(())
}

fn compare(a: CompareArgs) -> maskcond::Result<()> {
    let cfg: CompareConfig = read_json(&a.config)?;
    let data = load_dataset(&a.data)?;
    let specs: Vec<(String, ScheduleSpec)> =
        cfg.schedules.into_iter().map(|s| (s.name, s.spec)).collect();
    let seeds = seed_list(a.seed, a.seeds);
    let result = compare_schedules(&data, &specs, &cfg.model, &a.levels, &seeds)?;
    write_sweep_outputs(&result, &a.out, "schedules", a.svg, "inference sparsity")?;
    println!("{} rows", result.rows.len());
    Ok(())
}

/// Named condition values -> a condition vector aligned with the schema.
/// Categorical values are labels, numerical values are raw (denormalized);
/// missing or null entries are masked.
fn parse_conditions(
    schema: &ConditionSchema,
    path: Option<&Path>,
) -> maskcond::Result<ConditionVector> {
    let Some(path) = path else {
        return Ok(ConditionVector::all_masked(schema));
    };
    let map: std::collections::BTreeMap<String, serde_json::Value> = read_json(path)?;
    let mut cv = ConditionVector::all_masked(schema);
    for (name, value) in &map {
        if value.is_null() {
            continue;
        }
        if let Some(i) = schema.categorical_features.iter().position(|f| &f.name == name) {
            let label = value.as_str().ok_or_else(|| {
                maskcond::Error::Config(format!("feature {name:?} expects a string label"))
            })?;
            let idx = schema.categorical_features[i]
                .categories
                .iter()
                .position(|c| c == label)
                .ok_or_else(|| {
                    maskcond::Error::Config(format!("unknown label {label:?} for {name:?}"))
                })?;
            cv.categorical[i] = CategoricalEntry::Observed(idx);
        } else if let Some(j) = schema.numerical_features.iter().position(|f| &f.name == name) {
            let raw = value.as_f64().ok_or_else(|| {
                maskcond::Error::Config(format!("feature {name:?} expects a number"))
            })?;
            let (v, _) = schema.normalize_numerical(j, raw)?;
            cv.numerical[j] = NumericalEntry::Observed(v);
        } else {
            return Err(maskcond::Error::Config(format!("unknown feature {name:?}")));
        }
    }
    Ok(cv)
}

fn sample(a: SampleArgs) -> maskcond::Result<()> {
    std::fs::create_dir_all(&a.out)?;
    match load_checkpoint(&a.checkpoint)? {
        Model::Vae(model) => {
            let cv = parse_conditions(model.schema(), a.conditions.as_deref())?;
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            let k = model.config.num_keypoints;
            let mut keypoints = ndarray::Array2::zeros((a.count, 2 * k));
            for i in 0..a.count {
                let row = model.generate(&cv, GenerationMode::Prior, &mut rng)?;
                for (j, v) in row.into_iter().enumerate() {
                    keypoints[[i, j]] = v;
                }
            }
            let out = PointCloudDataset {
                keypoints,
                conditions: vec![cv; a.count],
                schema: model.schema().clone(),
                standardization: None,
                clamped_values: 0,
            };
            write_pointcloud_csv(&out, &a.out.join("samples.csv"))?;
            println!("wrote {} samples to samples.csv", a.count);
        }
        Model::Diffusion(model) => {
            let cv = parse_conditions(model.schema(), a.conditions.as_deref())?;
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            let cvs = vec![cv; a.count];
            let imgs = model.sample(&cvs, &mut rng)?;
            for i in 0..a.count {
                let img = imgs.index_axis(ndarray::Axis(0), i).to_owned().into_dyn();
                save_png(&img, &a.out.join(format!("sample_{i:03}.png")))?;
            }
            println!("wrote {} samples as PNGs", a.count);
        }
    }
    Ok(())
}
