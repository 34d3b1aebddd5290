//! `sfdehaze`: synthetic data, source training, source-free adaptation,
//! inference and diagnostics from one binary.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dehaze_core::autodiff::Tensor;
use dehaze_core::haze::{
    load_paired_dir, load_unlabeled_dir, sample_domain, write_dataset, PairedSet, UnlabeledSet,
};
use dehaze_core::image::{clahe, dark_channel, load_image, psnr, save_image, ssim, ImageRGB};
use dehaze_core::net::{Checkpoint, SourceNet, StudentNet, SOURCE_ARCH, STUDENT_ARCH};
use dehaze_core::selftest::{all_passed, gradient_suite, spectral_suite, Check, GRAD_SEEDS};
use dehaze_core::spectral::{amplitude_view, decompose, exchange, phase_view};
use dehaze_core::train::desk::{run_adapt, DeskConfig};
use dehaze_core::train::{adapt_sfuda, dehaze_image, train_source, EvalMetrics};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

#[derive(Parser, Debug)]
#[command(
    name = "sfdehaze",
    version,
    about = "Source-free domain adaptation for single image dehazing"
)]
struct Cli {
    /// TOML file overriding the default run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice; overrides `seed` in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root under which each run gets its own directory.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Network checkpoint to start from or run.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Worker threads for per-image work; defaults to the available cores.
    #[arg(long, global = true)]
    device_threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
enum Command {
    /// Generate a synthetic paired dataset (clean/, hazy/, trans/, manifest.json).
    Synth(SynthArgs),
    /// Train the source network on synthetic or directory pairs.
    TrainSource(TrainArgs),
    /// Adapt a source checkpoint to unlabeled target images.
    Adapt(AdaptArgs),
    /// Run a source or student checkpoint on an image or a directory.
    Dehaze(InputArgs),
    /// Swap amplitude and phase spectra between two images.
    Exchange(ExchangeArgs),
    /// PSNR and SSIM of paired directories.
    Eval(EvalArgs),
    /// Luminance CLAHE of an image or a directory.
    Clahe(InputArgs),
    /// Dark channel of an image or a directory.
    Darkchannel(DarkArgs),
    /// Run the gradient and spectral property suites.
    Selftest(SelftestArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
enum Domain {
    Source,
    Target,
}

#[derive(Args, Debug, Serialize)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "source")]
    domain: Domain,
    /// Number of samples; defaults to the configured training set size.
    #[arg(long)]
    count: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    /// Directory with `hazy/` and `clean/` subdirectories; synthetic source
    /// data is generated when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct AdaptArgs {
    /// Directory of unlabeled target images; the synthetic target domain is
    /// used (and scored on held-out pairs) when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct InputArgs {
    /// An image file or a directory of PNG/PPM images.
    #[arg(long)]
    input: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct ExchangeArgs {
    /// First image; with `--b` omitted too, a synthetic hazy/clean pair is used.
    #[arg(long, requires = "b")]
    a: Option<PathBuf>,
    #[arg(long, requires = "a")]
    b: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    /// Images to score; dehazed first when `--checkpoint` is given.
    #[arg(long)]
    input: PathBuf,
    /// Ground truth with the same file names.
    #[arg(long)]
    reference: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct DarkArgs {
    #[arg(long)]
    input: PathBuf,
    /// Odd window size; defaults to the configured prior patch.
    #[arg(long)]
    patch: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
struct SelftestArgs {
    /// Seeds per gradient case.
    #[arg(long, default_value_t = GRAD_SEEDS)]
    seeds: u64,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::TrainSource(_) => "train-source",
            Command::Adapt(_) => "adapt",
            Command::Dehaze(_) => "dehaze",
            Command::Exchange(_) => "exchange",
            Command::Eval(_) => "eval",
            Command::Clahe(_) => "clahe",
            Command::Darkchannel(_) => "darkchannel",
            Command::Selftest(_) => "selftest",
        }
    }
}

/// Everything a subcommand needs besides its own arguments.
struct Run {
    cfg: DeskConfig,
    dir: PathBuf,
    checkpoint: Option<PathBuf>,
    threads: usize,
}

impl Run {
    /// Creates `<out>/<command>-<hash>`, where the hash covers the command,
    /// its arguments, the checkpoint contents and the resolved config, and
    /// writes that description to `run.json`.
    fn create(cli: &Cli, cfg: DeskConfig) -> Result<Self> {
        let checkpoint_digest = match &cli.checkpoint {
            Some(p) => Some(hex(&Sha256::digest(
                std::fs::read(p).with_context(|| format!("reading checkpoint {}", p.display()))?,
            ))),
            None => None,
        };
        let echo = json!({
            "command": cli.command.name(),
            "args": &cli.command,
            "checkpoint": cli.checkpoint,
            "checkpoint_sha256": checkpoint_digest,
            "config": &cfg,
        });
        let text = serde_json::to_string_pretty(&echo)?;
        let digest = hex(&Sha256::digest(text.as_bytes()));
        let dir = cli
            .out
            .join(format!("{}-{}", cli.command.name(), &digest[..16]));
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        std::fs::write(dir.join("run.json"), text + "\n")?;
        let threads = match cli.device_threads {
            Some(0) => bail!("--device-threads must be positive"),
            Some(n) => n,
            None => std::thread::available_parallelism().map_or(1, |n| n.get()),
        };
        Ok(Self {
            cfg,
            dir,
            checkpoint: cli.checkpoint.clone(),
            threads,
        })
    }

    fn checkpoint(&self, what: &str) -> Result<Checkpoint> {
        let path = self
            .checkpoint
            .as_ref()
            .with_context(|| format!("{what} needs --checkpoint"))?;
        Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
    }

    fn subdir(&self, name: &str) -> Result<PathBuf> {
        let d = self.dir.join(name);
        std::fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
        Ok(d)
    }

    fn write_json(&self, name: &str, value: &impl Serialize) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, serde_json::to_string_pretty(value)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Maps `f` over `items` on up to `threads` scoped workers, keeping order.
fn par_map<T: Sync, R: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let chunk = items.len().div_ceil(threads.max(1)).max(1);
    std::thread::scope(|s| {
        let workers: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<R>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for w in workers {
            out.extend(w.join().expect("worker thread panicked")?);
        }
        Ok(out)
    })
}

/// A single image or every image of a directory, sorted by file name.
fn load_inputs(path: &Path) -> Result<UnlabeledSet> {
    if path.is_dir() {
        let set = load_unlabeled_dir(path)?;
        if set.is_empty() {
            bail!("no PNG or PPM images in {}", path.display());
        }
        Ok(set)
    } else {
        let stem = path.file_stem().context("input has no file name")?;
        Ok(UnlabeledSet {
            names: vec![stem.to_string_lossy().into_owned()],
            images: vec![load_image(path)?],
        })
    }
}

fn save_all(dir: &Path, names: &[String], images: &[ImageRGB]) -> Result<()> {
    for (n, img) in names.iter().zip(images) {
        save_image(img, dir.join(format!("{n}.png")))?;
    }
    Ok(())
}

type Predictor = Box<dyn Fn(&Tensor) -> dehaze_core::Result<Tensor> + Sync>;

/// Loads a source or student checkpoint as a batch predictor.
fn predictor(ckpt: &Checkpoint) -> Result<Predictor> {
    Ok(match ckpt.arch.as_str() {
        SOURCE_ARCH => {
            let net = SourceNet::from_checkpoint(ckpt)?;
            Box::new(move |t| Ok(net.infer(t)?.0))
        }
        STUDENT_ARCH => {
            let net = StudentNet::from_checkpoint(ckpt)?;
            Box::new(move |t| Ok(net.infer(t)?.0))
        }
        other => bail!("unknown checkpoint architecture `{other}`"),
    })
}

fn synth(run: &Run, a: &SynthArgs) -> Result<()> {
    let (domain, default_count) = match a.domain {
        Domain::Source => (&run.cfg.source_domain, run.cfg.source_train),
        Domain::Target => (&run.cfg.target_domain, run.cfg.target_train),
    };
    let manifest = write_dataset(
        run.subdir("dataset")?,
        domain,
        a.count.unwrap_or(default_count),
    )?;
    eprintln!("wrote {} samples", manifest.samples.len());
    Ok(())
}

fn train(run: &Run, a: &TrainArgs) -> Result<()> {
    let cfg = &run.cfg;
    let (train, test) = match &a.data {
        Some(d) => (load_paired_dir(d.join("hazy"), d.join("clean"))?, None),
        None => {
            let (train, test) = cfg.source_sets()?;
            (train, Some(test))
        }
    };
    let training = train_source(&train, &cfg.source_optim, cfg.seed)?;
    training.checkpoint.save(run.dir.join("source.ckpt"))?;
    let mut csv = String::from("epoch,loss\n");
    for (e, l) in training.epoch_loss.iter().enumerate() {
        csv += &format!("{},{l}\n", e + 1);
    }
    std::fs::write(run.dir.join("train_loss.csv"), csv)?;
    let (baseline, held_out) = match &test {
        Some(t) => (
            Some(score(run, &|x| Ok(x.clone()), t)?),
            Some(score(run, &|x| Ok(training.net.infer(x)?.0), t)?),
        ),
        None => (None, None),
    };
    run.write_json(
        "summary.json",
        &json!({
            "steps": training.steps,
            "final_loss": training.epoch_loss.last(),
            "held_out_identity": baseline,
            "held_out_source": held_out,
            "config": cfg,
        }),
    )?;
    if let Some(m) = held_out {
        eprintln!("held-out source PSNR {:.2} dB, SSIM {:.4}", m.psnr, m.ssim);
    }
    Ok(())
}

fn adapt(run: &Run, a: &AdaptArgs) -> Result<()> {
    let cfg = &run.cfg;
    let source = run.checkpoint("adapt")?;
    let (output, teacher, student) = match &a.data {
        Some(d) => (
            adapt_sfuda(&source, &load_inputs(d)?, &cfg.adapt, None)?,
            None,
            None,
        ),
        None => {
            let r = run_adapt(cfg, &source, cfg.adapt.weights)?;
            (r.output, Some(r.teacher), Some(r.student))
        }
    };
    output.checkpoint.save(run.dir.join("student.ckpt"))?;
    output.report.write_csv(run.dir.join("adapt.csv"))?;
    let report = &output.report;
    run.write_json(
        "summary.json",
        &json!({
            "steps": report.steps.len(),
            "final_step": report.steps.last(),
            "epochs": report.epochs,
            "initial_checksum": report.initial_checksum,
            "final_checksum": output.student.frozen_checksum(),
            "frozen_unchanged": report.checksum_constant(),
            "teacher": teacher,
            "student": student,
            "config": cfg,
        }),
    )?;
    if let (Some(t), Some(s)) = (teacher, student) {
        eprintln!(
            "target PSNR teacher {:.2} dB, student {:.2} dB ({:+.2} dB)",
            t.psnr,
            s.psnr,
            s.psnr - t.psnr
        );
    }
    Ok(())
}

fn dehaze(run: &Run, a: &InputArgs) -> Result<()> {
    let predict = predictor(&run.checkpoint("dehaze")?)?;
    let inputs = load_inputs(&a.input)?;
    let out = par_map(&inputs.images, run.threads, |img| {
        Ok(dehaze_image(&predict, img)?)
    })?;
    save_all(&run.subdir("dehazed")?, &inputs.names, &out)
}

fn exchange_cmd(run: &Run, a: &ExchangeArgs) -> Result<()> {
    let (img_a, img_b) = match (&a.a, &a.b) {
        (Some(pa), Some(pb)) => (load_image(pa)?, load_image(pb)?),
        _ => {
            // one target-domain scene, hazy and clean
            let s = sample_domain(&run.cfg.target_domain, 0)?;
            (s.observed, s.clean)
        }
    };
    let (ab, ba) = exchange(&img_a, &img_b)?;
    let (sa, sb) = (decompose(&img_a)?, decompose(&img_b)?);
    let files = [
        ("a.png", img_a.clone()),
        ("b.png", img_b.clone()),
        ("amp_a_phase_b.png", ab),
        ("amp_b_phase_a.png", ba),
        ("a_amplitude.png", amplitude_view(&sa)?),
        ("a_phase.png", phase_view(&sa)?),
        ("b_amplitude.png", amplitude_view(&sb)?),
        ("b_phase.png", phase_view(&sb)?),
    ];
    for (name, img) in &files {
        save_image(img, run.dir.join(name))?;
    }
    Ok(())
}

/// Mean PSNR and SSIM of predictions against a paired set.
fn score(
    run: &Run,
    predict: &(dyn Fn(&Tensor) -> dehaze_core::Result<Tensor> + Sync),
    set: &PairedSet,
) -> Result<EvalMetrics> {
    let rows = per_image(run, predict, set)?;
    Ok(mean_metrics(&rows))
}

fn per_image(
    run: &Run,
    predict: &(dyn Fn(&Tensor) -> dehaze_core::Result<Tensor> + Sync),
    set: &PairedSet,
) -> Result<Vec<(f64, f64)>> {
    let idx: Vec<usize> = (0..set.len()).collect();
    par_map(&idx, run.threads, |&i| {
        let out = dehaze_image(predict, &set.hazy[i])?;
        Ok((psnr(&out, &set.clean[i])?, ssim(&out, &set.clean[i])?))
    })
}

fn mean_metrics(rows: &[(f64, f64)]) -> EvalMetrics {
    let n = rows.len().max(1) as f64;
    EvalMetrics {
        psnr: rows.iter().map(|r| r.0).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.1).sum::<f64>() / n,
        count: rows.len(),
    }
}

fn eval(run: &Run, a: &EvalArgs) -> Result<()> {
    let set = load_paired_dir(&a.input, &a.reference)?;
    if set.is_empty() {
        bail!("no images to evaluate in {}", a.input.display());
    }
    let predict: Predictor = match &run.checkpoint {
        Some(_) => predictor(&run.checkpoint("eval")?)?,
        None => Box::new(|t| Ok(t.clone())),
    };
    let rows = per_image(run, &predict, &set)?;
    let mut csv = String::from("name,psnr,ssim\n");
    for (name, (p, s)) in set.names.iter().zip(&rows) {
        csv += &format!("{name},{p},{s}\n");
    }
    std::fs::write(run.dir.join("metrics.csv"), csv)?;
    let mean = mean_metrics(&rows);
    run.write_json("summary.json", &mean)?;
    println!(
        "PSNR {:.4} dB  SSIM {:.6}  ({} images)",
        mean.psnr, mean.ssim, mean.count
    );
    Ok(())
}

fn clahe_cmd(run: &Run, a: &InputArgs) -> Result<()> {
    let cfg = run.cfg.adapt.clahe;
    let inputs = load_inputs(&a.input)?;
    let out = par_map(&inputs.images, run.threads, |img| Ok(clahe(img, &cfg)?))?;
    save_all(&run.subdir("clahe")?, &inputs.names, &out)
}

fn darkchannel(run: &Run, a: &DarkArgs) -> Result<()> {
    let patch = a.patch.unwrap_or(run.cfg.adapt.dcp_patch);
    let inputs = load_inputs(&a.input)?;
    let out = par_map(&inputs.images, run.threads, |img| {
        let d = dark_channel(img, patch)?;
        Ok(ImageRGB::new(
            d.height,
            d.width,
            d.data.iter().flat_map(|&v| [v; 3]).collect(),
        )?)
    })?;
    save_all(&run.subdir("darkchannel")?, &inputs.names, &out)
}

fn selftest(run: &Run, a: &SelftestArgs) -> Result<()> {
    let mut checks: Vec<Check> = gradient_suite(a.seeds)?;
    checks.extend(spectral_suite(run.cfg.seed)?);
    for c in &checks {
        println!(
            "{} {:<9} {:<36} {:.3e} (< {:.0e})",
            if c.passed() { "PASS" } else { "FAIL" },
            c.suite,
            c.name,
            c.value,
            c.tolerance
        );
    }
    run.write_json("selftest.json", &checks)?;
    if !all_passed(&checks) {
        bail!(
            "{} of {} checks failed",
            checks.iter().filter(|c| !c.passed()).count(),
            checks.len()
        );
    }
    Ok(())
}

fn execute(cli: &Cli) -> Result<PathBuf> {
    let cfg = config::resolve(cli.config.as_deref(), cli.seed)?;
    let run = Run::create(cli, cfg)?;
    match &cli.command {
        Command::Synth(a) => synth(&run, a),
        Command::TrainSource(a) => train(&run, a),
        Command::Adapt(a) => adapt(&run, a),
        Command::Dehaze(a) => dehaze(&run, a),
        Command::Exchange(a) => exchange_cmd(&run, a),
        Command::Eval(a) => eval(&run, a),
        Command::Clahe(a) => clahe_cmd(&run, a),
        Command::Darkchannel(a) => darkchannel(&run, a),
        Command::Selftest(a) => selftest(&run, a),
    }?;
    Ok(run.dir)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(&cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
