//! Command-line driver: simulation, training, reconstruction, evaluation,
//! gradient verification, and the end-to-end bench pipeline.
//!
//! `FMU_VERIFY=1` switches all numerics to 64-bit verification mode.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use fmu_core::error::{Error, Result};
use fmu_core::io::{self, ConfigDoc};
use fmu_core::metrics::{psnr, ssim, EvalReport, SceneEval};
use fmu_core::ndtensor::rng::Rng;
use fmu_core::ndtensor::scalar::Scalar;
use fmu_core::ndtensor::tensor::Tensor;
use fmu_core::sensing::{HsiCube, Measurement, SensingSystem};
use fmu_core::synthdata;
use fmu_core::training::{
    self, evaluate_split, ExperimentConfig, Models, SensingModeCfg, TrainState,
};
use fmu_core::unfolding::{self, PriorSource};
use fmu_core::flowmatch::SamplerConfig;

#[derive(Parser)]
#[command(name = "fmu", version, about = "Snapshot spectral imaging toolkit", disable_help_subcommand = true)]
struct Cli {
    /// Experiment config file (sections of key = value).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; nothing is written outside it.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic scenes as cube files.
    SynthData {
        #[arg(long, default_value_t = 5)]
        count: usize,
        /// W H BANDS
        #[arg(long, num_args = 3)]
        size: Option<Vec<usize>>,
    },
    /// Simulate a compressed measurement from a cube.
    Simulate {
        #[arg(long)]
        cube: PathBuf,
        /// cassi | filter
        #[arg(long)]
        mode: String,
        /// CASSI shear step.
        #[arg(long, default_value_t = 2)]
        shift: usize,
        /// Measurement noise sigma.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
    },
    /// Run a training phase.
    Train {
        #[arg(long)]
        phase: u8,
        /// Checkpoint to resume from (phase 1) or the phase-1 checkpoint
        /// to start from (phase 2).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Reconstruct a cube from a measurement and mask using a checkpoint.
    Reconstruct {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        measurement: PathBuf,
        #[arg(long)]
        mask: PathBuf,
    },
    /// Score predicted cubes against ground truth.
    Evaluate {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
        /// Region i0,j0,i1,j1 for the spectral-curve table.
        #[arg(long)]
        region: Option<String>,
    },
    /// Run the 64-bit gradient verification suite.
    Gradcheck,
    /// Train the prior ablation end-to-end and print the PSNR table.
    Bench,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // usage errors are category 1; --help/--version land here too
            let benign = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if benign { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    let verify64 = std::env::var("FMU_VERIFY").map(|v| v == "1").unwrap_or(false);
    let outcome = if verify64 {
        run::<f64>(&cli)
    } else {
        run::<f32>(&cli)
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_doc(&ConfigDoc::load(path)?)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_out(cli: &Cli) -> Result<PathBuf> {
    std::fs::create_dir_all(&cli.out)?;
    Ok(cli.out.clone())
}

fn run<S: Scalar>(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::SynthData { count, size } => synth_data::<S>(cli, *count, size.as_deref()),
        Cmd::Simulate {
            cube,
            mode,
            shift,
            noise,
        } => simulate::<S>(cli, cube, mode, *shift, *noise),
        Cmd::Train { phase, resume } => train::<S>(cli, *phase, resume.as_deref()),
        Cmd::Reconstruct {
            ckpt,
            measurement,
            mask,
        } => reconstruct::<S>(cli, ckpt, measurement, mask),
        Cmd::Evaluate {
            pred_dir,
            gt_dir,
            region,
        } => evaluate::<S>(cli, pred_dir, gt_dir, region.as_deref()),
        Cmd::Gradcheck => gradcheck(),
        Cmd::Bench => bench::<S>(cli),
    }
}

fn synth_data<S: Scalar>(cli: &Cli, count: usize, size: Option<&[usize]>) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = ensure_out(cli)?;
    let mut template = cfg.scene.clone();
    if let Some(s) = size {
        template.width = s[0];
        template.height = s[1];
        template.bands = s[2];
    }
    let root = Rng::new(cfg.train.seed);
    for i in 0..count {
        let mut spec = template.clone();
        spec.seed = root.substream(&format!("synth.{i}")).state().0;
        let cube = synthdata::generate::<S>(&spec)?;
        let path = out.join(format!("scene{i:03}.hsc"));
        io::save_cube(&path, cube.tensor())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn system_from_seed<S: Scalar>(
    seed: u64,
    w: usize,
    h: usize,
    bands: usize,
    mode: &str,
    shift: usize,
    noise: f64,
) -> Result<SensingSystem<S>> {
    let mut rng = Rng::new(seed).substream("mask");
    let sigma = S::from_f64(noise);
    match mode {
        "filter" => {
            let data: Vec<S> = (0..w * h * bands)
                .map(|_| S::from_f64(rng.uniform()))
                .collect();
            SensingSystem::filter(Tensor::from_vec(vec![w, h, bands], data)?, sigma)
        }
        "cassi" => {
            let data: Vec<S> = (0..w * h).map(|_| S::from_f64(rng.uniform())).collect();
            SensingSystem::cassi(Tensor::from_vec(vec![w, h], data)?, bands, shift, sigma)
        }
        other => Err(Error::InvalidArgument(format!(
            "mode must be cassi or filter, got '{other}'"
        ))),
    }
}

fn simulate<S: Scalar>(cli: &Cli, cube: &Path, mode: &str, shift: usize, noise: f64) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = ensure_out(cli)?;
    let cube_t = io::load_cube::<S>(cube)?;
    let (w, h, b) = (cube_t.shape()[0], cube_t.shape()[1], cube_t.shape()[2]);
    let x = HsiCube::new(cube_t)?;
    let sys = system_from_seed::<S>(cfg.train.seed, w, h, b, mode, shift, noise)?;
    let mut rng = Rng::new(cfg.train.seed).substream("measurement-noise");
    let y = sys.simulate(&x, &mut rng)?;

    let hm = y.height();
    let y3 = Tensor::from_vec(vec![w, hm, 1], y.tensor().data().to_vec())?;
    io::save_cube(&out.join("measurement.hsc"), &y3)?;
    let mask = sys.mask();
    let mask3 = if mask.shape().len() == 2 {
        Tensor::from_vec(vec![w, h, 1], mask.data().to_vec())?
    } else {
        mask.clone()
    };
    io::save_cube(&out.join("mask.hsc"), &mask3)?;
    println!(
        "wrote {} and {}",
        out.join("measurement.hsc").display(),
        out.join("mask.hsc").display()
    );
    Ok(())
}

fn train<S: Scalar>(cli: &Cli, phase: u8, resume: Option<&Path>) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = ensure_out(cli)?;
    let ckpt_path = out.join(format!("phase{phase}.fmuckpt"));
    let cfg_for_hook = cfg.clone();
    let path_for_hook = ckpt_path.clone();
    let mut hook = move |state: &TrainState<S>| {
        training::save_state(&path_for_hook, &cfg_for_hook, state)?;
        println!(
            "epoch {:>3}  step {:>6}  loss {:.6}",
            state.epoch, state.global_step, state.last_loss
        );
        Ok(())
    };

    let state = match (phase, resume) {
        (1, None) => training::train_phase1_with_hook::<S>(&cfg, Some(&mut hook))?,
        (1, Some(path)) => {
            let ckpt = io::load_ckpt::<S>(path)?;
            training::resume_phase::<S>(&cfg, &ckpt, 1)?
        }
        (2, Some(path)) => {
            let ckpt = io::load_ckpt::<S>(path)?;
            training::train_phase2_with_hook::<S>(&cfg, &ckpt, Some(&mut hook))?
        }
        (2, None) => {
            return Err(Error::InvalidArgument(
                "phase 2 needs --resume with the phase-1 checkpoint".into(),
            ))
        }
        _ => {
            return Err(Error::InvalidArgument(format!(
                "phase must be 1 or 2, got {phase}"
            )))
        }
    };
    training::save_state(&ckpt_path, &cfg, &state)?;
    println!("final loss {:.6}; checkpoint at {}", state.last_loss, ckpt_path.display());
    Ok(())
}

fn reconstruct<S: Scalar>(cli: &Cli, ckpt: &Path, measurement: &Path, mask: &Path) -> Result<()> {
    let out = ensure_out(cli)?;
    let data = io::load_ckpt::<S>(ckpt)?;
    let cfg = ExperimentConfig::from_doc(&ConfigDoc::parse(&data.config_text)?)?;
    let state = TrainState::<S>::from_checkpoint(&data, cfg.train.seed)?;
    let models = Models::from_config(&cfg);

    let mask_t = io::load_cube::<S>(mask)?;
    let (w, h) = (cfg.scene.width, cfg.scene.height);
    let bands = cfg.scene.bands;
    let sys = match cfg.sensing.mode {
        SensingModeCfg::Filter => {
            if mask_t.shape() != [w, h, bands] {
                return Err(Error::ShapeMismatch {
                    op: "reconstruct",
                    detail: format!(
                        "mask {:?} vs config [{w}, {h}, {bands}]",
                        mask_t.shape()
                    ),
                });
            }
            SensingSystem::filter(mask_t, S::zero())?
        }
        SensingModeCfg::Cassi => {
            if mask_t.shape() != [w, h, 1] {
                return Err(Error::ShapeMismatch {
                    op: "reconstruct",
                    detail: format!("mask {:?} vs config [{w}, {h}, 1]", mask_t.shape()),
                });
            }
            let base = Tensor::from_vec(vec![w, h], mask_t.into_data())?;
            SensingSystem::cassi(base, bands, cfg.sensing.shift, S::zero())?
        }
    };
    let sys = Arc::new(sys);

    let meas_t = io::load_cube::<S>(measurement)?;
    let hm = sys.meas_height();
    if meas_t.shape() != [w, hm, 1] {
        return Err(Error::ShapeMismatch {
            op: "reconstruct",
            detail: format!("measurement {:?} vs expected [{w}, {hm}, 1]", meas_t.shape()),
        });
    }
    let y = Measurement::new(Tensor::from_vec(vec![w, hm], meas_t.into_data())?)?;

    let seed = cli.seed.unwrap_or(cfg.train.seed);
    let mut rng = Rng::new(seed).substream("reconstruct");
    let sampler = SamplerConfig {
        steps: cfg.train.sampler_infer_steps,
    };
    let xhat = unfolding::reconstruct(
        &state.store,
        &models.unfold,
        &sys,
        &y,
        &models.vn,
        &models.cond,
        &sampler,
        &mut rng,
    )?;
    let path = out.join("reconstruction.hsc");
    io::save_cube(&path, xhat.tensor())?;
    println!("wrote {}", path.display());
    Ok(())
}

fn parse_region(s: &str) -> Result<(usize, usize, usize, usize)> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad region '{s}'")))
        })
        .collect::<Result<_>>()?;
    if parts.len() != 4 {
        return Err(Error::InvalidArgument(format!(
            "region wants i0,j0,i1,j1; got '{s}'"
        )));
    }
    Ok((parts[0], parts[1], parts[2], parts[3]))
}

fn evaluate<S: Scalar>(cli: &Cli, pred_dir: &Path, gt_dir: &Path, region: Option<&str>) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = ensure_out(cli)?;
    let started = std::time::Instant::now();

    let mut names: Vec<String> = std::fs::read_dir(pred_dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.ends_with(".hsc"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no .hsc files in {}",
            pred_dir.display()
        )));
    }

    let previews = out.join("previews");
    std::fs::create_dir_all(&previews)?;
    let mut scenes = Vec::new();
    for name in &names {
        let pred = HsiCube::new(io::load_cube::<S>(&pred_dir.join(name))?)?;
        let gt = HsiCube::new(io::load_cube::<S>(&gt_dir.join(name))?)?;
        let p = psnr(&pred, &gt, 1.0)?;
        let s = ssim(&pred, &gt)?;
        let stem = name.trim_end_matches(".hsc");
        for band in 0..pred.bands() {
            io::save_pgm_band(
                &previews.join(format!("{stem}_band{band:02}.pgm")),
                pred.tensor(),
                band,
            )?;
        }
        let reg = match region {
            Some(r) => parse_region(r)?,
            None => {
                let (w, h) = (gt.width(), gt.height());
                (w / 4, h / 4, 3 * w / 4, 3 * h / 4)
            }
        };
        let table = io::spectral_table(gt.tensor(), pred.tensor(), reg)?;
        std::fs::write(out.join(format!("spectral_{stem}.txt")), table)?;
        scenes.push(SceneEval {
            name: stem.to_string(),
            psnr: p,
            ssim: s,
        });
    }
    let report = EvalReport {
        scenes,
        config_hash: cfg.hash(),
        seed: cfg.train.seed,
        runtime_ms: started.elapsed().as_millis(),
    };
    io::save_report(&out.join("report.txt"), &report)?;
    print!("{}", io::report_to_text(&report));
    println!("runtime_ms={}", report.runtime_ms);
    Ok(())
}

fn gradcheck() -> Result<()> {
    let results = fmu_core::verify::gradient_suite(6)?;
    let mut worst = 0.0f64;
    for r in &results {
        println!("{:<28} max_rel_err {:>12.3e}", r.name, r.max_rel_err);
        worst = worst.max(r.max_rel_err);
    }
    println!("worst {worst:.3e} over {} checks", results.len());
    if worst > 1e-4 {
        return Err(Error::NonFinite(format!(
            "gradient suite exceeded tolerance: {worst:.3e} > 1e-4"
        )));
    }
    Ok(())
}

fn bench<S: Scalar>(cli: &Cli) -> Result<()> {
    let out = ensure_out(cli)?;
    let seed = cli.seed.unwrap_or(7);
    let cfg = match &cli.config {
        Some(path) => {
            let mut c = ExperimentConfig::from_doc(&ConfigDoc::load(path)?)?;
            if let Some(s) = cli.seed {
                c.train.seed = s;
            }
            c
        }
        None => ExperimentConfig::ablation_profile(seed),
    };

    println!("bench seed {seed}: training flow-prior pipeline");
    let p1 = training::train_phase1::<S>(&cfg)?;
    let ckpt = p1.to_checkpoint(&cfg);
    let p2 = training::train_phase2::<S>(&cfg, &ckpt)?;
    let flow_report = evaluate_split::<S>(&cfg, &p2.store, seed)?;

    println!("bench seed {seed}: training prior-free baseline");
    let mut base_cfg = cfg.clone();
    base_cfg.prior = PriorSource::None;
    base_cfg.train.epochs = 2 * cfg.train.epochs;
    let base = training::train_phase1::<S>(&base_cfg)?;
    let base_report = evaluate_split::<S>(&base_cfg, &base.store, seed)?;

    println!("\n{:<10} {:>12} {:>12} {:>9}", "scene", "flow (dB)", "baseline", "delta");
    for (f, b) in flow_report.scenes.iter().zip(&base_report.scenes) {
        let (fv, bv) = (f.psnr.as_db().unwrap_or(99.0), b.psnr.as_db().unwrap_or(99.0));
        println!("{:<10} {:>12.3} {:>12.3} {:>+9.3}", f.name, fv, bv, fv - bv);
    }
    let fm = flow_report.median_psnr().unwrap_or(0.0);
    let bm = base_report.median_psnr().unwrap_or(0.0);
    println!("median     {fm:>12.3} {bm:>12.3} {:>+9.3}", fm - bm);

    io::save_report(&out.join("bench_flow.txt"), &flow_report)?;
    io::save_report(&out.join("bench_baseline.txt"), &base_report)?;
    println!(
        "reports at {} and {}",
        out.join("bench_flow.txt").display(),
        out.join("bench_baseline.txt").display()
    );
    Ok(())
}
