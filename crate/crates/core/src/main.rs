use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use prompt_sid::checkpoint;
use prompt_sid::config::RunConfig;
use prompt_sid::image::{encode_png, ImageTensor};
use prompt_sid::metrics::{evaluate_dir, list_images};
use prompt_sid::nn::diffusion::DiffusionSchedule;
use prompt_sid::sampling::{draw_pattern, neighbours};
use prompt_sid::train::{train_until, ModelState, StepRecord};
use prompt_sid::{apply_noise, load_image, save_image, synth, Error, NoiseSpec, Result, Rng};

#[derive(Parser)]
#[command(
    name = "prompt-sid",
    version,
    about = "Self-supervised single-image denoising with structural prompts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Png,
    Psid,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the images in `paths.train_dir`.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from this checkpoint instead of a fresh initialisation.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Denoise every image of a directory with the EMA weights.
    Denoise {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to `paths.checkpoint`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// PSNR/SSIM of denoised images against same-named references.
    Eval {
        #[arg(long)]
        denoised: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Also write the per-image report as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Add synthetic noise to every image of a directory.
    MakeNoisy {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// e.g. `gaussian:25`, `gaussian:5-50`, `poisson:30`.
        #[arg(long)]
        noise: NoiseSpec,
        #[arg(long, value_enum, default_value = "psid")]
        format: Format,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the diffusion schedule as CSV (t, beta, alpha, alpha_bar).
    DumpSchedule {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        beta_start: Option<f64>,
        #[arg(long)]
        beta_end: Option<f64>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Draw one sampling pattern and write a provenance map (red p1, green
    /// p2, blue p3, black unused).
    SampleCheck {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate synthetic clean images.
    Synth {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train {
            config,
            seed,
            resume,
        } => cmd_train(&config, seed, resume.as_deref()),
        Command::Denoise {
            config,
            checkpoint,
            input,
            output,
            seed,
        } => cmd_denoise(&config, checkpoint, &input, &output, seed),
        Command::Eval {
            denoised,
            reference,
            csv,
            seed: _,
        } => cmd_eval(&denoised, &reference, csv.as_deref()),
        Command::MakeNoisy {
            input,
            output,
            noise,
            format,
            seed,
        } => cmd_make_noisy(&input, &output, noise, format, seed),
        Command::DumpSchedule {
            config,
            steps,
            beta_start,
            beta_end,
            output,
            seed: _,
        } => cmd_dump_schedule(
            config.as_deref(),
            steps,
            beta_start,
            beta_end,
            output.as_deref(),
        ),
        Command::SampleCheck {
            input,
            output,
            seed,
        } => cmd_sample_check(&input, &output, seed),
        Command::Synth {
            output,
            count,
            size,
            channels,
            seed,
        } => cmd_synth(&output, count, size, channels, seed),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Images of a directory keyed by stem; a `.psid` file wins over a `.png`
/// with the same stem.
fn load_dir(dir: &Path) -> Result<Vec<(String, ImageTensor)>> {
    let mut by_stem: BTreeMap<String, PathBuf> = BTreeMap::new();
    for path in list_images(dir)? {
        let stem = path.file_stem().unwrap().to_string_lossy().into_owned();
        let is_psid = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("psid"));
        if is_psid || !by_stem.contains_key(&stem) {
            by_stem.insert(stem, path);
        }
    }
    by_stem
        .into_iter()
        .map(|(stem, path)| Ok((stem, load_image(&path)?)))
        .collect()
}

fn write_outputs(img: &ImageTensor, dir: &Path, stem: &str, format: Format) -> Result<()> {
    if matches!(format, Format::Png | Format::Both) {
        save_image(img, dir.join(format!("{stem}.png")))?;
    }
    if matches!(format, Format::Psid | Format::Both) {
        save_image(img, dir.join(format!("{stem}.psid")))?;
    }
    Ok(())
}

fn cmd_train(config: &Path, seed: Option<u64>, resume: Option<&Path>) -> Result<()> {
    let mut rc = RunConfig::load(config)?;
    if let Some(s) = seed {
        rc.set("train.seed", s.to_string())?;
    }
    rc.require_keys(&[
        "paths.train_dir",
        "paths.checkpoint",
        "paths.log",
        "train.total_steps",
    ])?;
    let model_cfg = rc.model_config()?;
    let train_cfg = rc.train_config()?;
    let every = rc.checkpoint_every()?;
    let noise = rc.noise()?;
    let ckpt_path = rc.path("paths.checkpoint")?;
    let log_path = rc.path("paths.log")?;

    let mut data = Vec::new();
    for (i, (stem, img)) in load_dir(&rc.path("paths.train_dir")?)?
        .into_iter()
        .enumerate()
    {
        if img.c() != model_cfg.channels {
            return Err(Error::Config(format!(
                "{stem} has {} channels, model.channels is {}",
                img.c(),
                model_cfg.channels
            )));
        }
        if img.h() < train_cfg.max_patch() || img.w() < train_cfg.max_patch() {
            return Err(Error::Config(format!(
                "{stem} is {}x{}, smaller than the largest patch {}",
                img.h(),
                img.w(),
                train_cfg.max_patch()
            )));
        }
        data.push(match noise {
            Some(spec) => {
                apply_noise(&img, spec, &mut Rng::derive(train_cfg.seed, &[1, i as u64]))?
            }
            None => img,
        });
    }
    if data.is_empty() {
        return Err(Error::Config(
            "paths.train_dir contains no .png or .psid images".into(),
        ));
    }

    let mut state = match resume {
        Some(p) => checkpoint::load(p, Some(&model_cfg))?,
        None => ModelState::<f32>::new(model_cfg, train_cfg.seed)?,
    };
    let log_file = if resume.is_some() {
        File::options().append(true).create(true).open(&log_path)
    } else {
        File::create(&log_path)
    };
    let mut log = BufWriter::new(log_file.map_err(|e| Error::io(&log_path, e))?);
    if resume.is_none() {
        writeln!(log, "{}", StepRecord::CSV_HEADER).map_err(|e| Error::io(&log_path, e))?;
    }
    let total = train_cfg.total_steps as u64;
    train_until(&mut state, &data, &train_cfg, total, &mut log, |st, rec| {
        if let Some(k) = every {
            if rec.step % k == 0 && rec.step < total {
                checkpoint::save(st, step_checkpoint_path(&ckpt_path, rec.step))?;
            }
        }
        if rec.step % 100 == 0 || rec.step == total {
            eprintln!(
                "step {:>6}  total {:.6}  lr {:e}",
                rec.step, rec.total, rec.lr
            );
        }
        Ok(())
    })?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    checkpoint::save(&state, &ckpt_path)
}

fn step_checkpoint_path(final_path: &Path, step: u64) -> PathBuf {
    let stem = final_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let ext = final_path
        .extension()
        .map(|e| format!(".{}", e.to_string_lossy()))
        .unwrap_or_default();
    final_path.with_file_name(format!("{stem}-step{step}{ext}"))
}

fn cmd_denoise(
    config: &Path,
    ckpt: Option<PathBuf>,
    input: &Path,
    output: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let rc = RunConfig::load(config)?;
    let model_cfg = rc.model_config()?;
    let ckpt = match ckpt {
        Some(p) => p,
        None => rc.path("paths.checkpoint")?,
    };
    let seed = match seed {
        Some(s) => s,
        None => rc.seed()?,
    };
    let state = checkpoint::load(&ckpt, Some(&model_cfg))?;
    let images = load_dir(input)?;
    create_dir(output)?;
    for (i, (stem, img)) in images.iter().enumerate() {
        let out = state.denoise(img, &mut Rng::derive(seed, &[i as u64]))?;
        write_outputs(&out, output, stem, Format::Both)?;
    }
    eprintln!(
        "denoised {} image(s) into {}",
        images.len(),
        output.display()
    );
    Ok(())
}

fn cmd_eval(denoised: &Path, reference: &Path, csv: Option<&Path>) -> Result<()> {
    let report = evaluate_dir(denoised, reference)?;
    if let Some(path) = csv {
        fs::write(path, report.to_csv()).map_err(|e| Error::io(path, e))?;
    }
    print!("{}", report.summary());
    Ok(())
}

fn cmd_make_noisy(
    input: &Path,
    output: &Path,
    spec: NoiseSpec,
    format: Format,
    seed: u64,
) -> Result<()> {
    spec.validate().map_err(|e| Error::Config(e.to_string()))?;
    let images = load_dir(input)?;
    create_dir(output)?;
    for (i, (stem, img)) in images.iter().enumerate() {
        let noisy = apply_noise(img, spec, &mut Rng::derive(seed, &[i as u64]))?;
        write_outputs(&noisy, output, stem, format)?;
    }
    Ok(())
}

fn cmd_dump_schedule(
    config: Option<&Path>,
    steps: Option<usize>,
    beta_start: Option<f64>,
    beta_end: Option<f64>,
    output: Option<&Path>,
) -> Result<()> {
    let base = match config {
        Some(p) => RunConfig::load(p)?.model_config()?,
        None => prompt_sid::ModelConfig::default(),
    };
    let sched = DiffusionSchedule::linear(
        steps.unwrap_or(base.steps),
        beta_start.unwrap_or(base.beta_start),
        beta_end.unwrap_or(base.beta_end),
    )
    .map_err(|e| Error::Config(e.to_string()))?;
    let csv = sched.to_csv();
    match output {
        Some(p) => fs::write(p, csv).map_err(|e| Error::io(p, e)),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

/// Role colours of the provenance map.
const ROLE_COLOURS: [[f32; 3]; 4] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [0.0, 0.0, 0.0],
];

fn cmd_sample_check(input: &Path, output: &Path, seed: u64) -> Result<()> {
    let img = load_image(input)?;
    let pattern = draw_pattern(img.h(), img.w(), &mut Rng::new(seed))
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut roles = vec![3usize; img.h() * img.w()];
    let mut violations = 0usize;
    for i in 0..pattern.block_rows() {
        for j in 0..pattern.block_cols() {
            let [p1, p2, p3] = pattern.triple(i, j);
            let nb = neighbours(p1);
            if !(nb.contains(&p2) && nb.contains(&p3) && p2 != p3) {
                violations += 1;
            }
            for n in 0..3 {
                let (y, x) = pattern.source(n, i, j);
                roles[y * img.w() + x] = n;
            }
        }
    }
    let map = ImageTensor::from_fn(img.h(), img.w(), 3, |y, x, ch| {
        ROLE_COLOURS[roles[y * img.w() + x]][ch]
    });
    let bytes = encode_png(&map).map_err(|reason| Error::Encode {
        path: output.to_owned(),
        reason,
    })?;
    fs::write(output, bytes).map_err(|e| Error::io(output, e))?;
    println!(
        "{} blocks, {} adjacency violations",
        pattern.block_rows() * pattern.block_cols(),
        violations
    );
    if violations > 0 {
        return Err(Error::InvalidArgument(format!(
            "{violations} blocks violate adjacency"
        )));
    }
    Ok(())
}

fn cmd_synth(output: &Path, count: usize, size: usize, channels: usize, seed: u64) -> Result<()> {
    if !matches!(channels, 1 | 3) || size == 0 {
        return Err(Error::Config(
            "synth needs --channels 1 or 3 and a positive --size".into(),
        ));
    }
    create_dir(output)?;
    for (i, img) in synth::clean_set(count, size, size, channels, seed)
        .iter()
        .enumerate()
    {
        save_image(img, output.join(format!("img{i:03}.png")))?;
    }
    Ok(())
}
