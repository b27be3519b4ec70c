use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use probegrid::appearance::Ablation;
use probegrid::eval::{Reference, DEFAULT_CHAMFER_SAMPLES};
use probegrid::gradcheck::{run_gradcheck, GradcheckConfig};
use probegrid::io::dataset::{read_png_rgb, write_png_rgb};
use probegrid::io::mesh_io::write_raw_f32;
use probegrid::io::{load_cameras, read_points_ply, write_mesh, Checkpoint, Dataset};
use probegrid::optim::schedule::Schedule;
use probegrid::pipeline;
use probegrid::sh::ShOrder;
use probegrid::synth::{make_dataset, AnalyticScene};
use probegrid::Error;

#[derive(Parser)]
#[command(name = "probegrid", version, about = "Sparse-grid SDF reconstruction with light-field probes")]
struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render an analytic scene into a dataset directory.
    Synth {
        /// Scene description (TOML).
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Ground-truth surface points written to points_gt.ply.
        #[arg(long, default_value_t = DEFAULT_CHAMFER_SAMPLES)]
        gt_points: usize,
    },
    /// Optimise a model on a dataset following a schedule.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schedule: PathBuf,
        /// Output checkpoint.
        #[arg(long)]
        out: PathBuf,
        /// Per-step loss log (default: stdout).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Render one camera of a checkpoint to PNG.
    Render(RenderArgs),
    /// Extract the zero level set as PLY or OBJ.
    Mesh {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output path ending in .ply or .obj.
        #[arg(long)]
        out: PathBuf,
    },
    /// Report in-mask PSNR and chamfer distance.
    Eval(EvalArgs),
    /// Time shading and full renders per camera.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        /// cameras.txt or a dataset directory.
        #[arg(long)]
        cameras: PathBuf,
    },
    /// Finite-difference audit of all gradients on a tiny scene.
    Gradcheck {
        /// Coordinates checked per parameter class.
        #[arg(long, default_value_t = 128)]
        samples: usize,
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
    },
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// cameras.txt or a dataset directory.
    #[arg(long)]
    cameras: PathBuf,
    /// Camera id to render.
    #[arg(long)]
    camera: usize,
    #[arg(long)]
    out: PathBuf,
    /// Also write colour and opacity as raw f32 planes.
    #[arg(long)]
    raw: Option<PathBuf>,
    /// Drop the tri-plane features from the decoder input.
    #[arg(long)]
    no_spatial: bool,
    /// Truncate probe evaluation to this SH order.
    #[arg(long)]
    sh_order: Option<u8>,
    /// Drop the Fresnel inputs from the decoder.
    #[arg(long)]
    no_fresnel: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to render.
    #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
    checkpoint: Option<PathBuf>,
    /// Directory of `<id>.png` images to score instead of a checkpoint.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Ground-truth points (default: the dataset's points_gt.ply).
    #[arg(long)]
    gt_points: Option<PathBuf>,
    /// Points sampled on the predicted mesh.
    #[arg(long, default_value_t = DEFAULT_CHAMFER_SAMPLES)]
    samples: usize,
    /// Ignore nearest-point distances above this value.
    #[arg(long, default_value_t = f64::INFINITY)]
    max_dist: f64,
}

enum Failure {
    Lib(Error),
    Other(&'static str, String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Other("io", format!("{}: {e}", path.display()))
}

fn cameras_from(path: &Path) -> Result<Vec<probegrid::camera::Camera>, Error> {
    if path.is_dir() {
        load_cameras(&path.join("cameras.txt"))
    } else {
        load_cameras(path)
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let seed = cli.seed;
    match cli.command {
        Command::Synth { scene, out, gt_points } => {
            let scene = AnalyticScene::load(&scene)?;
            let ds = make_dataset(&scene, seed, gt_points);
            let dataset = Dataset {
                cameras: ds.cameras,
                images: ds.images,
                masks: ds.masks,
                points_gt: (gt_points > 0).then_some(ds.points_gt),
            };
            dataset.save(&out)?;
            println!("wrote {} views to {}", dataset.cameras.len(), out.display());
        }
        Command::Train {
            data,
            schedule,
            out,
            log,
        } => {
            let dataset = Dataset::load(&data)?;
            let schedule = Schedule::load(&schedule)?;
            let mut sink: Box<dyn Write> = match &log {
                Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| io_failure(p, e))?)),
                None => Box::new(std::io::stdout().lock()),
            };
            let mut write_err = None;
            let ck = pipeline::train_checkpoint(&dataset, &schedule, seed, |entry| {
                if write_err.is_none() {
                    if let Err(e) = writeln!(sink, "{entry}") {
                        write_err = Some(e);
                    }
                }
            })?;
            if let Some(e) = write_err {
                return Err(Failure::Other("io", format!("loss log: {e}")));
            }
            sink.flush().map_err(|e| Failure::Other("io", format!("loss log: {e}")))?;
            ck.save(&out)?;
        }
        Command::Render(args) => {
            let ck = Checkpoint::load(&args.checkpoint)?;
            let cameras = cameras_from(&args.cameras)?;
            let index = cameras.iter().position(|c| c.id == args.camera).ok_or_else(|| {
                Failure::Lib(Error::CameraOutOfRange {
                    id: args.camera,
                    count: cameras.len(),
                })
            })?;
            let ablation = Ablation {
                no_spatial: args.no_spatial,
                sh_order: args.sh_order.map(ShOrder::new).transpose()?,
                no_fresnel: args.no_fresnel,
            };
            let r = pipeline::render_view(&ck, &cameras[index], Some(index), ablation)?;
            write_png_rgb(&args.out, &r.image)?;
            if let Some(raw) = &args.raw {
                let planes: Vec<Vec<f64>> = (0..3)
                    .map(|k| r.image.data.iter().map(|c| c[k]).collect())
                    .chain(std::iter::once(r.alpha.clone()))
                    .collect();
                write_raw_f32(raw, r.image.width, r.image.height, &planes)?;
            }
        }
        Command::Mesh { checkpoint, out } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let mesh = pipeline::checkpoint_mesh(&ck);
            write_mesh(&out, &mesh)?;
            println!("{} vertices, {} triangles", mesh.vertices.len(), mesh.triangles.len());
        }
        Command::Eval(args) => eval(args, seed)?,
        Command::Bench { checkpoint, cameras } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cameras = cameras_from(&cameras)?;
            println!("camera  pixels  shaded_voxels  shading_ms  render_ms");
            let times = pipeline::bench(&ck, &cameras)?;
            for (c, t) in cameras.iter().zip(&times) {
                println!(
                    "{:>6}  {:>6}  {:>13}  {:>10.3}  {:>9.3}",
                    c.id,
                    t.pixels,
                    t.shaded_voxels,
                    t.shading.as_secs_f64() * 1e3,
                    t.render.as_secs_f64() * 1e3
                );
            }
            let n = times.len().max(1) as f64;
            println!(
                "mean    shading_ms {:.3}  render_ms {:.3}",
                times.iter().map(|t| t.shading.as_secs_f64()).sum::<f64>() * 1e3 / n,
                times.iter().map(|t| t.render.as_secs_f64()).sum::<f64>() * 1e3 / n
            );
        }
        Command::Gradcheck { samples, step } => {
            let report = run_gradcheck(&GradcheckConfig {
                seed,
                step,
                samples_per_class: samples,
                ..Default::default()
            })?;
            println!("{report}");
            if !report.passed() {
                return Err(Failure::Other(
                    "gradcheck",
                    "analytic and finite-difference gradients disagree".into(),
                ));
            }
        }
    }
    Ok(())
}

fn eval(args: EvalArgs, seed: u64) -> Result<(), Failure> {
    let data = Dataset::load(&args.data)?;
    let ck = args.checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    let psnr = match (&ck, &args.predictions) {
        (Some(ck), _) => pipeline::evaluate_psnr(ck, &data)?,
        (None, Some(dir)) => {
            let preds = data
                .cameras
                .iter()
                .map(|c| read_png_rgb(&dir.join(format!("{}.png", c.id))))
                .collect::<Result<Vec<_>, _>>()?;
            pipeline::psnr_report(&preds, &data)?
        }
        (None, None) => unreachable!("clap requires one source"),
    };
    for (c, p) in data.cameras.iter().zip(&psnr.per_view) {
        println!("psnr_view {} {:.4}", c.id, p);
    }
    println!("psnr {:.4}", psnr.psnr);

    let gt = match &args.gt_points {
        Some(p) => Some(read_points_ply(p)?),
        None => data.points_gt.clone(),
    };
    if let (Some(ck), Some(gt)) = (&ck, gt) {
        let mesh = pipeline::checkpoint_mesh(ck);
        let r = pipeline::mesh_chamfer(&mesh, &Reference::Points(&gt), args.samples, args.max_dist, seed)?;
        println!("chamfer_accuracy {:.4}", r.accuracy);
        println!("chamfer_completeness {:.4}", r.completeness);
        println!("chamfer {:.4}", r.mean);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error[threads]: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (kind, msg) = match f {
                Failure::Lib(e) => (e.kind(), e.to_string()),
                Failure::Other(kind, msg) => (kind, msg),
            };
            eprintln!("error[{kind}]: {}", msg.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
