//! `portrait`: command-line front end for the audio-to-portrait pipeline.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use portrait_core::geometry::{project_sequence, FaceMesh, FaceTopology, LandmarkSequence, MeshSequence, PoseSequence};
use portrait_core::pipeline::commands::{train_a2m, train_a2p, train_l2v};
use portrait_core::pipeline::infer::write_images;
use portrait_core::pipeline::{
    generate_synthetic_dataset, infer_end_to_end, infer_from_landmarks, InferInputs, PipelineConfig, SyntheticDataset,
};
use portrait_core::reenact::{retarget_mesh_sequence, scale_expression};
use portrait_core::render::render_sequence;

#[derive(Parser, Debug)]
#[command(name = "portrait", version, about = "Audio-driven portrait animation at desk scale", arg_required_else_help = true)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Pipeline config JSON; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides `training.seed`.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic talking-face corpus.
    GenData {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the audio-to-mesh regressor.
    TrainA2m(TrainArgs),
    /// Train the audio-to-pose decoder.
    TrainA2p(TrainArgs),
    /// Train the landmark-to-video diffusion model.
    TrainL2v {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: Option<u8>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Render a landmark sequence to pose images.
    RenderPose {
        #[arg(long)]
        landmarks: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Project meshes under head poses to 2D landmarks.
    Project {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        pose: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Move a mesh sequence from one identity template to another.
    Retarget {
        #[arg(long)]
        mesh: PathBuf,
        /// Mesh file whose first frame is the source identity.
        #[arg(long)]
        src_template: PathBuf,
        /// Mesh file whose first frame is the target identity.
        #[arg(long)]
        tgt_template: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scale the motion of one landmark group around a template.
    ScaleExpr {
        #[arg(long)]
        mesh: PathBuf,
        /// Mesh file whose first frame is the template; the neutral face when omitted.
        #[arg(long)]
        template: Option<PathBuf>,
        #[arg(long)]
        group: String,
        #[arg(long, allow_hyphen_values = true)]
        factor: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate frames from speech and a reference portrait.
    Infer {
        #[arg(long)]
        audio: Option<PathBuf>,
        #[arg(long)]
        reference: PathBuf,
        /// Landmarks of the reference portrait (first frame is used).
        #[arg(long)]
        reference_landmarks: Option<PathBuf>,
        /// Skip the speech stages and animate this landmark sequence.
        #[arg(long, conflicts_with = "audio")]
        landmarks: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Overrides `training.steps`.
    #[arg(long)]
    steps: Option<usize>,
    /// Overrides the desk learning rate of the stage.
    #[arg(long)]
    lr: Option<f64>,
}

fn load_config(common: &Common) -> Result<(PipelineConfig, u64)> {
    let cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::desk(),
    };
    let seed = common.seed.unwrap_or(cfg.training.seed);
    Ok((cfg, seed))
}

fn apply_train_args(cfg: &mut PipelineConfig, args: &TrainArgs, l2v: bool) -> Result<()> {
    if let Some(s) = args.steps {
        cfg.training.steps = s;
    }
    if let Some(lr) = args.lr {
        if l2v {
            cfg.lmk2video.desk_lr = Some(lr);
        } else {
            cfg.training.desk_lr = Some(lr);
        }
    }
    cfg.validate()?;
    Ok(())
}

fn first_frame(path: &Path) -> Result<FaceMesh> {
    MeshSequence::read(path)?
        .frames
        .into_iter()
        .next()
        .with_context(|| format!("{} holds no frames", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let (mut cfg, seed) = load_config(&cli.common)?;
    let topology = FaceTopology::desk();
    match &cli.command {
        Command::TrainA2m(a) | Command::TrainA2p(a) => apply_train_args(&mut cfg, a, false)?,
        Command::TrainL2v { train, .. } => apply_train_args(&mut cfg, train, true)?,
        _ => {}
    }
    cfg.log_resolved();
    log::info!("seed {seed}");
    match cli.command {
        Command::GenData { out } => {
            let dir = out.unwrap_or_else(|| cfg.paths.data_dir.clone());
            let index = generate_synthetic_dataset(&cfg, seed, &dir)?;
            println!("{} clips written to {}", index.train.len() + index.val.len(), dir.display());
        }
        Command::TrainA2m(_) => {
            let data = SyntheticDataset::load(&cfg.paths.data_dir)?;
            report(&train_a2m(&cfg, &data, seed)?);
        }
        Command::TrainA2p(_) => {
            let data = SyntheticDataset::load(&cfg.paths.data_dir)?;
            report(&train_a2p(&cfg, &data, seed)?);
        }
        Command::TrainL2v { stage, .. } => {
            let data = SyntheticDataset::load(&cfg.paths.data_dir)?;
            report(&train_l2v(&cfg, &data, stage.unwrap_or(cfg.training.stage), seed)?);
        }
        Command::RenderPose { landmarks, out } => {
            let lmk = LandmarkSequence::read(&landmarks)?;
            let images = render_sequence(&lmk, &topology, &cfg.render)?;
            write_images(&images, &out)?;
            println!("{} pose images written to {}", images.len(), out.display());
        }
        Command::Project { mesh, pose, out } => {
            let cam = cfg.camera.intrinsics(cfg.render.image_size)?;
            let lmk = project_sequence(&MeshSequence::read(&mesh)?, &PoseSequence::read(&pose)?, &cam)?;
            lmk.write(&out)?;
        }
        Command::Retarget {
            mesh,
            src_template,
            tgt_template,
            out,
        } => {
            let src = MeshSequence::read(&mesh)?;
            retarget_mesh_sequence(&src, &first_frame(&src_template)?, &first_frame(&tgt_template)?)?.write(&out)?;
        }
        Command::ScaleExpr {
            mesh,
            template,
            group,
            factor,
            out,
        } => {
            let tpl = match template {
                Some(p) => first_frame(&p)?,
                None => topology.canonical_mesh(),
            };
            scale_expression(&MeshSequence::read(&mesh)?, &tpl, &topology, &group, factor)?.write(&out)?;
        }
        Command::Infer {
            audio,
            reference,
            reference_landmarks,
            landmarks,
            out,
        } => {
            let out = out.unwrap_or_else(|| cfg.paths.out_dir.clone());
            let n = match (audio, landmarks) {
                (Some(audio), None) => {
                    let inputs = InferInputs {
                        audio,
                        reference_image: reference,
                        reference_landmarks,
                    };
                    infer_end_to_end(&inputs, &cfg, seed, &out)?
                }
                (None, Some(lmk)) => {
                    let inputs = InferInputs {
                        audio: PathBuf::new(),
                        reference_image: reference,
                        reference_landmarks,
                    };
                    infer_from_landmarks(&LandmarkSequence::read(&lmk)?, &inputs, &cfg, seed, &out)?
                }
                _ => bail!("infer needs exactly one of --audio or --landmarks"),
            };
            println!("{n} frames written to {}", out.join("frames").display());
        }
    }
    Ok(())
}

fn report(h: &portrait_core::train::LossHistory) {
    if let (Some(a), Some(b)) = (h.initial_val(), h.final_val()) {
        println!("validation loss {a:.6} -> {b:.6}");
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
