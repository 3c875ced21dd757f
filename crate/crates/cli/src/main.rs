use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use facefit_core::degrade::{build_triplet_dataset, load_dataset, load_sample, read_manifest, write_dataset};
use facefit_core::eval::{evaluate_dataset, make_embedder, EvalSetup, Fitter, Protocol};
use facefit_core::io::{self, RunConfig};
use facefit_core::model::{generate_synthetic_basis, morph_geometry, morph_texture, CoefficientVector, MorphableBasis};
use facefit_core::pipeline::{ConsistencyMode, FitSession};
use facefit_core::render::{render_face, Camera, Image};
use facefit_core::{Error, Result};

/// Basis file written next to every generated dataset.
const DATASET_BASIS: &str = "basis.rgbm";

#[derive(Parser)]
#[command(name = "facefit", version, about = "Robust morphable-model face fitting")]
struct Cli {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed the command uses.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic morphable basis.
    SynthBasis {
        #[arg(long)]
        vertices: Option<usize>,
        #[arg(short = 'o', long = "output")]
        output: PathBuf,
    },
    /// Render a guiding/occluded/noisy triplet dataset.
    MakeDataset {
        #[arg(long)]
        basis: Option<PathBuf>,
        #[arg(long)]
        identities: Option<usize>,
        #[arg(long)]
        per_identity: Option<usize>,
        /// Degraded images show a different capture of the identity.
        #[arg(long)]
        unpaired: bool,
    },
    /// Fit one triplet of a dataset.
    Fit {
        /// Dataset directory or manifest file.
        #[arg(long)]
        dataset: PathBuf,
        /// Sample id (e.g. `i000s00`) or `t<index>`.
        #[arg(long)]
        triplet: String,
        #[arg(long, value_enum, default_value_t = Mode::Rogue)]
        mode: Mode,
        #[arg(long)]
        basis: Option<PathBuf>,
        #[arg(long)]
        beta_c: Option<f64>,
        #[arg(long, value_enum)]
        consistency: Option<Consistency>,
    },
    /// Evaluate a dataset and write the report.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum)]
        protocol: Option<ProtocolArg>,
        #[arg(long, value_enum)]
        fitter: Option<FitterArg>,
        #[arg(long)]
        basis: Option<PathBuf>,
    },
    /// Render a coefficient file to a PPM image.
    Render {
        #[arg(long)]
        coeffs: PathBuf,
        #[arg(long)]
        basis: Option<PathBuf>,
        /// Image to composite the face over (default: plain background).
        #[arg(long)]
        background: Option<PathBuf>,
        #[arg(short = 'o', long = "output")]
        output: PathBuf,
    },
    /// Write the mesh of a coefficient file (mean face by default) as OBJ.
    ExportObj {
        #[arg(long)]
        coeffs: Option<PathBuf>,
        #[arg(long)]
        basis: Option<PathBuf>,
        #[arg(short = 'o', long = "output")]
        output: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Guidance,
    Rogue,
}

#[derive(Clone, Copy, ValueEnum)]
enum Consistency {
    Adversarial,
    L2,
    Disabled,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum ProtocolArg {
    RealUnpaired,
    SyntheticPaired,
    Noise,
}

#[derive(Clone, Copy, ValueEnum)]
enum FitterArg {
    Naive,
    Rogue,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::invalid("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    }
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.output = out.to_string_lossy().into_owned();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.basis.seed = s;
        cfg.fit.seed = s;
    }
    let out = PathBuf::from(&cfg.output);
    match cli.command {
        Command::SynthBasis { vertices, output } => {
            if let Some(v) = vertices {
                cfg.basis.vertices = v;
            }
            let b = generate_synthetic_basis(cfg.basis.vertices, cfg.basis.seed)?;
            io::write_basis(&output, &b)
        }
        Command::MakeDataset {
            basis,
            identities,
            per_identity,
            unpaired,
        } => {
            if let Some(n) = identities {
                cfg.dataset.identities = n;
            }
            if let Some(n) = per_identity {
                cfg.dataset.per_identity = n;
            }
            if unpaired {
                cfg.dataset.paired = false;
            }
            cfg.validate()?;
            // Round to the stored precision first so the images match the
            // basis file written alongside them.
            let b = load_basis(&cfg, basis.as_deref(), None)?;
            let b = io::quantize_basis(&b);
            let camera = cfg.camera.camera()?;
            let samples = build_triplet_dataset(&b, &camera, &cfg.dataset, cfg.seed)?;
            write_dataset(&out, &samples, &camera, &cfg.dataset, cfg.seed)?;
            io::write_basis(&out.join(DATASET_BASIS), &b)?;
            println!("{} triplets written to {}", samples.len(), out.display());
            Ok(())
        }
        Command::Fit {
            dataset,
            triplet,
            mode,
            basis,
            beta_c,
            consistency,
        } => {
            if let Some(b) = beta_c {
                cfg.weights.beta_c = b;
            }
            if let Some(c) = consistency {
                cfg.fit.consistency = match c {
                    Consistency::Adversarial => ConsistencyMode::Adversarial,
                    Consistency::L2 => ConsistencyMode::L2,
                    Consistency::Disabled => ConsistencyMode::Disabled,
                };
            }
            cfg.validate()?;
            cmd_fit(&cfg, &out, &dataset, &triplet, mode, basis.as_deref())
        }
        Command::Eval {
            dataset,
            protocol,
            fitter,
            basis,
        } => {
            if let Some(p) = protocol {
                cfg.eval.protocol = match p {
                    ProtocolArg::RealUnpaired => Protocol::RealUnpaired,
                    ProtocolArg::SyntheticPaired => Protocol::SyntheticPaired,
                    ProtocolArg::Noise => Protocol::Noise,
                };
            }
            if let Some(f) = fitter {
                cfg.eval.fitter = match f {
                    FitterArg::Naive => Fitter::Naive,
                    FitterArg::Rogue => Fitter::Rogue,
                };
            }
            cfg.validate()?;
            cmd_eval(&cfg, &out, &dataset, basis.as_deref(), cli.config.as_deref())
        }
        Command::Render {
            coeffs,
            basis,
            background,
            output,
        } => {
            let b = load_basis(&cfg, basis.as_deref(), None)?;
            let c = io::read_coefficients(&coeffs)?;
            let bg = background.map(|p| io::read_image(&p)).transpose()?;
            let camera = match &bg {
                Some(img) => Camera::for_size(img.width(), img.height()),
                None => cfg.camera.camera()?,
            };
            let bg = bg.unwrap_or_else(|| {
                facefit_core::degrade::default_background(camera.image_width, camera.image_height)
            });
            let img = render_face(&b, &c, &camera, Some(&bg))?.to_image();
            io::write_image(&output, &img)
        }
        Command::ExportObj { coeffs, basis, output } => {
            let b = load_basis(&cfg, basis.as_deref(), None)?;
            let c = match coeffs {
                Some(p) => io::read_coefficients(&p)?,
                None => CoefficientVector::zeros(),
            };
            io::write_obj(&output, &morph_geometry(&b, &c)?, &morph_texture(&b, &c)?, &b.triangles)
        }
    }
}

/// `--basis`, then the configured path, then the dataset's own basis, then
/// a synthetic basis from the config.
fn load_basis(cfg: &RunConfig, arg: Option<&Path>, dataset_dir: Option<&Path>) -> Result<Arc<MorphableBasis>> {
    let path = arg
        .map(Path::to_path_buf)
        .or_else(|| cfg.basis.path.as_ref().map(PathBuf::from))
        .or_else(|| dataset_dir.map(|d| d.join(DATASET_BASIS)).filter(|p| p.exists()));
    let b = match path {
        Some(p) => io::read_basis(&p)?,
        None => generate_synthetic_basis(cfg.basis.vertices, cfg.basis.seed)?,
    };
    Ok(Arc::new(b))
}

fn cmd_fit(
    cfg: &RunConfig,
    out: &Path,
    dataset: &Path,
    triplet: &str,
    mode: Mode,
    basis: Option<&Path>,
) -> Result<()> {
    let (manifest, dir) = read_manifest(dataset)?;
    let record = match triplet.strip_prefix('t').and_then(|i| i.parse::<usize>().ok()) {
        Some(i) => manifest.samples.get(i),
        None => manifest.sample(triplet),
    }
    .ok_or_else(|| Error::invalid(format!("no triplet {triplet:?} in {}", dataset.display())))?;
    let s = load_sample(&dir, record)?;
    let b = load_basis(cfg, basis, Some(&dir))?;
    let camera = manifest.camera;
    let mut sess = FitSession::new(b.clone(), camera, cfg.weights, cfg.fit, s.guiding.clone())?;
    if let Some(l) = &s.guiding_landmarks {
        sess = sess.with_landmarks(l.clone());
    }
    let c_g = sess.fit_guidance()?;
    io::write_coefficients(&out.join("c_g.rgcv"), &c_g)?;
    let render = |c: &CoefficientVector, bg: &Image, name: &str| -> Result<()> {
        let img = render_face(&b, c, &camera, Some(bg))?.to_image();
        io::write_image(&out.join(name), &img)
    };
    render(&c_g, &s.guiding, "render_g.ppm")?;
    if mode == Mode::Rogue {
        sess = sess.with_degraded(Some(s.occluded.clone()), Some(s.noisy.clone()));
        let (c_o, c_n) = sess.fit_robust()?;
        io::write_coefficients(&out.join("c_o.rgcv"), &c_o)?;
        io::write_coefficients(&out.join("c_n.rgcv"), &c_n)?;
        render(&c_o, &s.guiding, "render_o.ppm")?;
        render(&c_n, &s.guiding, "render_n.ppm")?;
    }
    io::write_history(&out.join("history.csv"), &sess.history)
}

fn cmd_eval(cfg: &RunConfig, out: &Path, dataset: &Path, basis: Option<&Path>, config: Option<&Path>) -> Result<()> {
    let (manifest, samples) = load_dataset(dataset)?;
    let (_, dir) = read_manifest(dataset)?;
    let setup = EvalSetup {
        basis: load_basis(cfg, basis, Some(&dir))?,
        camera: manifest.camera,
        weights: cfg.weights,
        fit: cfg.fit,
        eval: cfg.eval.clone(),
        config_hash: cfg.hash()?,
    };
    let base = config.and_then(Path::parent).unwrap_or(Path::new("."));
    let embedder = make_embedder(&cfg.eval.embedder, base)?;
    let run = evaluate_dataset(&setup, &manifest, &samples, embedder.as_ref())?;
    let report = run.report;
    io::write_bytes(&out.join("report.csv"), &report.to_csv()?)?;
    io::write_text(&out.join("summary.toml"), &report.summary_toml()?)?;
    for (key, img) in &run.renders {
        io::write_image(&out.join(key), img)?;
    }
    println!(
        "{} of {} samples succeeded; mean distance {:.6} (std {:.6})",
        report.succeeded(),
        report.samples.len(),
        report.mean,
        report.std
    );
    if report.succeeded() == 0 && !report.samples.is_empty() {
        return Err(Error::DegenerateRender("every sample failed to fit".into()));
    }
    Ok(())
}
