use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use fourierflow::backbone::Variant;
use fourierflow::biaslab::{empirical_bias_experiment, BiasExperiment, DiffusionCoeff};
use fourierflow::fields::{compute_metrics, fieldpack_read, fieldpack_write, PackHeader};
use fourierflow::shearflow::{generate_dataset, Dataset};
use fourierflow::train::{
    self, noise_robustness, rollout_eval, sample_windows, spectra_csv, ExperimentConfig, Model, RolloutMode, RolloutPlan,
    RunOptions, DETERMINISTIC_ENV,
};

#[derive(Parser)]
#[command(name = "fourierflow", version, about = "Frequency-aware flow matching for 2D periodic flows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags layered over the JSON configuration.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// JSON experiment configuration; defaults are used for missing fields.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lr_min: Option<f64>,
    #[arg(long)]
    lr_max: Option<f64>,
    /// One of full, no_fm, no_freq_weight, vanilla_fusion, standard_attention, no_sfa, surrogate.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    mae_checkpoint: Option<PathBuf>,
    #[arg(long)]
    sample_steps: Option<usize>,
    #[arg(long)]
    input_noise: Option<f64>,
    #[arg(long)]
    eval_windows: Option<usize>,
}

impl Overrides {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::from_json_file(p)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($($f:ident => $($path:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$f.clone() { c.$($path).+ = v; })*
            };
        }
        set!(
            data_dir => data_dir,
            out_dir => out_dir,
            seed => seed,
            epochs => epochs,
            batch_size => batch_size,
            gamma => gamma,
            lr_min => lr.lr_min,
            lr_max => lr.lr_max,
            sample_steps => sample_steps,
            input_noise => input_noise,
        );
        if let Some(p) = &self.mae_checkpoint {
            c.mae_checkpoint = Some(p.clone());
        }
        if let Some(n) = self.eval_windows {
            c.eval_windows = Some(n);
        }
        if let Some(tag) = &self.variant {
            c.backbone.variant = Variant::from_tag(tag).with_context(|| format!("unknown variant {tag:?}"))?;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate shear-flow trajectories and write train/val/test windows.
    GenData {
        #[command(flatten)]
        o: Overrides,
        #[arg(long)]
        n_traj: Option<usize>,
        #[arg(long)]
        grid: Option<usize>,
    },
    /// Masked-autoencoder pretraining; writes <out_dir>/mae.fpk.
    PretrainMae {
        #[command(flatten)]
        o: Overrides,
    },
    /// Train the velocity network (or surrogate) and evaluate on the test split.
    Train {
        #[command(flatten)]
        o: Overrides,
        /// Train clean and noise-injected twins (generative and surrogate) instead.
        #[arg(long)]
        noise_robustness: Option<f64>,
    },
    /// Generate target windows for the context halves of a FieldPack.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Windows whose first frames are used as context (default: the test split).
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Chained multi-block prediction on full test trajectories.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        trajectories: Option<PathBuf>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        horizon: usize,
        #[arg(long, default_value_t = 16)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte-Carlo threshold-time experiment for a power-law spectrum.
    BiasLab {
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        #[arg(long, default_value_t = 128)]
        grid: usize,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Constant diffusion coefficient g.
        #[arg(long, default_value_t = 1.0)]
        g0: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean residual spectra of one or more checkpoints on the test split.
    Spectra {
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long, default_value_t = 16)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        eval_windows: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// MSE / nRMSE / MaxErr between two FieldPacks.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let opts = RunOptions::from_env();
    if opts.deterministic {
        // results are order-independent anyway; one thread also fixes timing-dependent logging
        rayon::ThreadPoolBuilder::new().num_threads(1).build_global().ok();
        info!("{DETERMINISTIC_ENV} set: single-threaded, no wall-clock in reports");
    }
    match Cli::parse().command {
        Command::GenData { o, n_traj, grid } => {
            let c = o.load()?;
            let mut dc = c.dataset;
            dc.seed = o.seed.unwrap_or(dc.seed);
            if let Some(n) = n_traj {
                dc.n_traj = n;
            }
            if let Some(n) = grid {
                dc.solver.n = n;
            }
            let ds = generate_dataset(&dc)?;
            ds.save(&c.data_dir)?;
            info!(
                "wrote {} train / {} val / {} test windows to {}",
                ds.manifest.windows[0],
                ds.manifest.windows[1],
                ds.manifest.windows[2],
                c.data_dir.display()
            );
        }
        Command::PretrainMae { o } => {
            let mut c = o.load()?;
            if let Some(e) = o.epochs {
                c.mae_epochs = e;
            }
            let (report, path) = train::pretrain_mae(&c, opts)?;
            info!("MAE checkpoint at {}", path.display());
            print_json(&report)?;
        }
        Command::Train { o, noise_robustness: delta } => {
            let c = o.load()?;
            match delta {
                Some(d) => print_json(&noise_robustness(&c, d, opts)?.deltas)?,
                None => {
                    let out = train::train(&c, opts)?;
                    info!("checkpoint at {}", out.checkpoint.display());
                    if let Some(e) = &out.report.eval {
                        println!(
                            "test nRMSE {:.6}  climatology {:.6}  high-band residual {:.6e}",
                            e.model.nrmse_or_nan(),
                            e.climatology.nrmse_or_nan(),
                            e.high_band_energy
                        );
                    }
                }
            }
        }
        Command::Sample {
            checkpoint,
            input,
            data_dir,
            steps,
            seed,
            out,
        } => {
            let (model, _) = Model::load(&checkpoint)?;
            let windows = match (input, data_dir) {
                (Some(p), _) => fieldpack_read(&p)?.0,
                (None, Some(d)) => Dataset::load(&d)?.test,
                (None, None) => bail!("pass --input or --data-dir"),
            };
            let k = model.backbone.cfg.frames;
            let ctx = windows.frame_range(0, k)?;
            let pred = sample_windows(&model, &ctx, steps, seed)?;
            let header = PackHeader::for_series(&pred)
                .with_channels(&["u_x", "u_y"])
                .with_seed(seed)
                .with_producer(serde_json::json!({ "command": "sample", "steps": steps }));
            fieldpack_write(&out, &pred, &header)?;
            info!("wrote {:?} to {}", pred.shape(), out.display());
        }
        Command::Rollout {
            checkpoint,
            trajectories,
            data_dir,
            horizon,
            steps,
            seed,
            out,
        } => {
            let (model, _) = Model::load(&checkpoint)?;
            let trajs = match (trajectories, data_dir) {
                (Some(p), _) => fieldpack_read(&p)?.0,
                (None, Some(d)) => Dataset::load(&d)?.test_trajectories,
                (None, None) => bail!("pass --trajectories or --data-dir"),
            };
            let mode = RolloutMode::for_variant(model.backbone.cfg.variant);
            let mut plan = RolloutPlan::new(horizon, mode);
            plan.context = model.backbone.cfg.frames;
            let blocks = rollout_eval(&model, plan, &trajs, steps, seed)?;
            println!("block,mse,nrmse,max_err");
            for (j, m) in blocks.iter().enumerate() {
                println!("{j},{:.6e},{:.6e},{:.6e}", m.mse, m.nrmse_or_nan(), m.max_err);
            }
            if let Some(p) = out {
                write_json(&p, &serde_json::json!({ "plan": plan, "blocks": blocks }))?;
            }
        }
        Command::BiasLab {
            alpha,
            gamma,
            grid,
            trials,
            seed,
            g0,
            out,
        } => {
            let exp = BiasExperiment::new(alpha, gamma, grid, trials, seed);
            let curve = empirical_bias_experiment(&exp, &DiffusionCoeff::Constant { g0 })?;
            println!("slope {:.4} (expected {:.4}), standard error {:.4}", curve.slope, -alpha, curve.slope_ci);
            match out {
                Some(p) => std::fs::write(&p, curve.to_csv())?,
                None => print!("{}", curve.to_csv()),
            }
        }
        Command::Spectra {
            checkpoint,
            data_dir,
            steps,
            seed,
            eval_windows,
            out,
        } => {
            let ds = Dataset::load(&data_dir)?;
            let mut entries = Vec::new();
            for path in &checkpoint {
                let (model, _) = Model::load(path)?;
                let k = model.backbone.cfg.frames;
                let clim = train::climatology(&ds.train, k)?;
                let summary = train::evaluate(&model, &ds.test, &clim, steps, seed, eval_windows)?;
                let tag = model.backbone.cfg.variant.tag().to_string();
                println!("{tag}: high-band residual energy {:.6e}", summary.high_band_energy);
                entries.push((tag, summary.residual_spectrum));
            }
            let full = entries.iter().find(|(t, _)| t == Variant::Full.tag());
            let no_fm = entries.iter().find(|(t, _)| t == Variant::NoFm.tag());
            if let (Some((_, f)), Some((_, n))) = (full, no_fm) {
                let (hf, hn) = (f.high_band_energy(), n.high_band_energy());
                println!("full vs no_fm high-band residual: {hf:.6e} vs {hn:.6e} ({})", if hf <= hn { "full <= no_fm" } else { "full > no_fm" });
            }
            std::fs::write(&out, spectra_csv(&entries))?;
        }
        Command::Metrics { pred, truth, out } => {
            let (p, _) = fieldpack_read(&pred)?;
            let (t, _) = fieldpack_read(&truth)?;
            let report = compute_metrics(&p, &t)?;
            println!("mse {:.6e}  nrmse {:.6e}  max_err {:.6e}", report.mse, report.nrmse_or_nan(), report.max_err);
            match out {
                Some(o) => write_json(&o, &report)?,
                None => print!("{}", report.to_csv()),
            }
        }
    }
    Ok(())
}
