use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::eval::{climatology, evaluate, EvalSummary};
use super::optim::{clip_grad_norm, AdamW};
use super::{out_path, window_pairs, write_json, ExperimentConfig, Model, Normalizer, RunOptions, WindowPair};
use crate::autodiff::{Graph, Tensor};
use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::fields::FieldSeries;
use crate::fourier::clamp_eta;
use crate::interpolant::{accumulate_grads, draw_noise, draw_time, interpolate, Schedule};
use crate::mae::{alignment_loss, init_alignment_head, project, random_mask, total_loss, Mae, MaeConfig};
use crate::params::ParamStore;
use crate::rng::{self, Rng};
use crate::shearflow::Dataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub cfm: f64,
    pub align: f64,
    pub total: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub cfm: f64,
    pub align: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: String,
    pub seed: u64,
    pub config_hash: String,
    pub gamma: f64,
    pub train_windows: usize,
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<StepLog>,
    pub eval: Option<EvalSummary>,
    /// Omitted in deterministic mode.
    pub wall_clock_secs: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: RunReport,
    pub model: Model,
    pub checkpoint: PathBuf,
}

/// Random draws for one training sample, made sequentially before the
/// parallel loss evaluation so results do not depend on scheduling.
#[derive(Debug, Clone)]
pub(crate) struct Draw {
    pub t: f64,
    pub eps: Option<Tensor>,
    pub input_noise: Option<Tensor>,
}

pub(crate) struct BatchLoss {
    pub cfm: f64,
    pub align: f64,
    pub total: f64,
    pub grads: BTreeMap<String, Tensor>,
}

pub(crate) fn draw_batch(
    pairs: &[WindowPair],
    ids: &[usize],
    generative: bool,
    input_noise: f64,
    noise_rng: &mut Rng,
    input_rng: &mut Rng,
) -> Vec<Draw> {
    ids.iter()
        .map(|&i| {
            let p = &pairs[i];
            let (t, eps) = if generative {
                let t = draw_time(noise_rng);
                (t, Some(draw_noise(noise_rng, &p.target)))
            } else {
                (0.0, None)
            };
            let input_noise = (input_noise > 0.0).then(|| {
                Tensor::from_fn(p.context.rows, p.context.cols, |_, _| input_noise * input_rng.sample::<f64, _>(StandardNormal))
            });
            Draw { t, eps, input_noise }
        })
        .collect()
}

struct SampleLoss {
    cfm: f64,
    align: f64,
    grads: BTreeMap<String, Tensor>,
}

fn sample_loss(
    bb: &Backbone,
    store: &ParamStore,
    pair: &WindowPair,
    d: &Draw,
    feature: Option<&Tensor>,
    gamma: f64,
    schedule: Schedule,
) -> Result<SampleLoss> {
    let ctx = match &d.input_noise {
        Some(n) => pair.context.zip_map(n, |a, b| a + b),
        None => pair.context.clone(),
    };
    let (rows, cols) = pair.target.shape();
    let mut g = Graph::new();
    if !bb.cfg.variant.is_generative() {
        let x = g.constant(ctx);
        let out = bb.forward(&mut g, store, x, 0.0, None)?;
        let target = g.constant(pair.target.clone());
        let loss = g.mse(out.velocity, target);
        return Ok(SampleLoss {
            cfm: g.item(loss),
            align: 0.0,
            grads: g.backward(loss).into_param_grads(store),
        });
    }
    let eps = d.eps.as_ref().ok_or_else(|| Error::arg("generative sample drawn without noise"))?;
    let (xt, v) = interpolate(&pair.target.data, &eps.data, d.t, schedule)?;
    let x = g.constant(Tensor::new(rows, cols, xt));
    let c = g.constant(ctx);
    let out = bb.forward(&mut g, store, x, d.t, Some(c))?;
    let v = g.constant(Tensor::new(rows, cols, v));
    let cfm = g.mse(out.velocity, v);
    let (align, total) = match feature {
        Some(f) => {
            let p = project(&mut g, store, out.tap);
            let f = g.constant(f.clone());
            let la = alignment_loss(&mut g, p, f)?;
            let weighted = g.scale(la, gamma);
            (g.item(la), g.add(cfm, weighted))
        }
        None => (0.0, cfm),
    };
    Ok(SampleLoss {
        cfm: g.item(cfm),
        align,
        grads: g.backward(total).into_param_grads(store),
    })
}

/// Batch-mean losses and gradients; the reduction runs in sample order.
pub(crate) fn batch_loss(
    model: &Model,
    pairs: &[WindowPair],
    ids: &[usize],
    draws: &[Draw],
    features: Option<&[Tensor]>,
    gamma: f64,
    schedule: Schedule,
) -> Result<BatchLoss> {
    let results: Vec<Result<SampleLoss>> = ids
        .par_iter()
        .zip(draws.par_iter())
        .map(|(&i, d)| sample_loss(&model.backbone, &model.store, &pairs[i], d, features.map(|f| &f[i]), gamma, schedule))
        .collect();
    let b = ids.len() as f64;
    let (mut cfm, mut align) = (0.0, 0.0);
    let mut grads = BTreeMap::new();
    for r in results {
        let s = r?;
        cfm += s.cfm;
        align += s.align;
        accumulate_grads(&mut grads, s.grads, 1.0 / b);
    }
    let (cfm, align) = (cfm / b, align / b);
    Ok(BatchLoss {
        cfm,
        align,
        total: total_loss(cfm, align, if features.is_some() { gamma } else { 0.0 })?,
        grads,
    })
}

/// A pretrained MAE with the normalisation it was trained under.
#[derive(Debug, Clone)]
pub struct MaeBundle {
    pub mae: Mae,
    pub store: ParamStore,
    pub norm: Normalizer,
}

pub fn load_mae(path: &Path) -> Result<MaeBundle> {
    let (store, meta) = ParamStore::load(path)?;
    let cfg: MaeConfig = serde_json::from_value(meta.get("mae").cloned().unwrap_or_default())
        .map_err(|e| Error::Config(format!("MAE checkpoint {}: {e}", path.display())))?;
    let norm: Normalizer = match meta.get("normalizer") {
        Some(v) => serde_json::from_value(v.clone())?,
        None => Normalizer::identity(cfg.channels),
    };
    Ok(MaeBundle {
        mae: Mae::new(cfg)?,
        store,
        norm,
    })
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn check_params(store: &ParamStore, epoch: usize, step: usize) -> Result<()> {
    if store.iter().all(|(_, t)| t.all_finite()) {
        Ok(())
    } else {
        Err(Error::NanLoss { epoch, step })
    }
}

/// Trains on in-memory windows `(B, 2k, H, W, C)`; `eval` windows, if
/// given, are scored against the climatology of the training targets.
///
/// The checkpoint `<out_dir>/checkpoint.fpk` is rewritten after every epoch;
/// a non-finite loss or parameter aborts with [`Error::NanLoss`] and leaves
/// the last good checkpoint in place.
pub fn train_on(
    cfg: &ExperimentConfig,
    train: &FieldSeries,
    eval: Option<&FieldSeries>,
    mae: Option<&MaeBundle>,
    opts: RunOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let clock = Instant::now();
    let bcfg = cfg.backbone;
    let k = bcfg.frames;
    let backbone = Backbone::new(bcfg)?;
    let norm = Normalizer::fit(train);
    let pairs = window_pairs(train, k, &norm)?;
    let n = pairs.len();
    let mut store = backbone.init_params(&mut rng::stream(cfg.seed, "init"))?;

    let features: Option<Vec<Tensor>> = if cfg.uses_alignment() {
        let m = mae.ok_or_else(|| Error::Config("alignment is on but no MAE was supplied".into()))?;
        if !m.mae.cfg.same_geometry(&bcfg) {
            return Err(Error::Config("MAE tubelet geometry differs from the backbone".into()));
        }
        init_alignment_head(&mut store, bcfg.d_model, m.mae.cfg.d_model, &mut rng::stream(cfg.seed, "align-init"));
        let feats = pairs
            .par_iter()
            .map(|p| {
                let phys = norm.denormalize(&p.target)?;
                m.mae.extract_features(&m.store, &m.norm.normalize(&phys)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Some(feats)
    } else {
        None
    };
    store.quantize_f32();
    let mut model = Model { backbone, store, norm };
    let ckpt = out_path(&cfg.out_dir, "checkpoint.fpk")?;
    let hash = cfg.hash();
    let extra = |epoch: usize| serde_json::json!({ "epoch": epoch, "config_hash": hash, "seed": cfg.seed });
    model.save_atomic(&ckpt, extra(0))?;

    let generative = bcfg.variant.is_generative();
    let mut opt = AdamW::new(cfg.optimizer);
    let mut order_rng = rng::stream(cfg.seed, "data-order");
    let mut noise_rng = rng::stream(cfg.seed, "noise");
    let mut input_rng = rng::stream(cfg.seed, "input-noise");
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut order_rng);
        let first = steps.len();
        for (s, ids) in idx.chunks(cfg.batch_size).enumerate() {
            let draws = draw_batch(&pairs, ids, generative, cfg.input_noise, &mut noise_rng, &mut input_rng);
            let mut bl = batch_loss(&model, &pairs, ids, &draws, features.as_deref(), cfg.gamma, cfg.schedule)?;
            if !bl.total.is_finite() || bl.grads.values().any(|g| !g.all_finite()) {
                warn!("non-finite loss at epoch {epoch}, step {s}; keeping {}", ckpt.display());
                return Err(Error::NanLoss { epoch, step: s });
            }
            let gn = clip_grad_norm(&mut bl.grads, cfg.optimizer.clip_norm);
            let lr = cfg.lr.at(epoch as f64 + s as f64 / steps_per_epoch as f64);
            opt.step(&mut model.store, &bl.grads, lr)?;
            clamp_eta(&mut model.store);
            model.store.quantize_f32();
            check_params(&model.store, epoch, s)?;
            steps.push(StepLog {
                epoch,
                step: s,
                lr,
                cfm: bl.cfm,
                align: bl.align,
                total: bl.total,
                grad_norm: gn,
            });
        }
        let this = &steps[first..];
        let log = EpochLog {
            epoch,
            cfm: mean(this.iter().map(|s| s.cfm)),
            align: mean(this.iter().map(|s| s.align)),
            total: mean(this.iter().map(|s| s.total)),
        };
        info!("epoch {epoch}: total {:.6} (cfm {:.6}, align {:.6})", log.total, log.cfm, log.align);
        epochs.push(log);
        model.save_atomic(&ckpt, extra(epoch + 1))?;
    }

    let eval = match eval {
        Some(test) => {
            let clim = climatology(train, k)?;
            Some(evaluate(&model, test, &clim, cfg.sample_steps, rng::derive_seed(cfg.seed, "eval"), cfg.eval_windows)?)
        }
        None => None,
    };
    let report = RunReport {
        variant: bcfg.variant.tag().to_string(),
        seed: cfg.seed,
        config_hash: hash.clone(),
        gamma: cfg.gamma,
        train_windows: n,
        epochs,
        steps,
        eval,
        wall_clock_secs: (!opts.deterministic).then(|| clock.elapsed().as_secs_f64()),
    };
    write_json(&out_path(&cfg.out_dir, "report.json")?, &report)?;
    if let Some(e) = &report.eval {
        std::fs::write(out_path(&cfg.out_dir, "metrics.csv")?, e.model.to_csv())?;
        std::fs::write(
            out_path(&cfg.out_dir, "spectrum.csv")?,
            super::spectra_csv(&[(report.variant.clone(), e.residual_spectrum.clone())]),
        )?;
    }
    Ok(TrainOutcome {
        report,
        model,
        checkpoint: ckpt,
    })
}

/// Loads the dataset (and the MAE checkpoint only when alignment is on)
/// and trains, evaluating on the test windows.
pub fn train(cfg: &ExperimentConfig, opts: RunOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    cfg.check_files()?;
    let ds = Dataset::load(&cfg.data_dir)?;
    let mae = if cfg.uses_alignment() {
        let path = cfg.mae_checkpoint.as_ref().expect("checked above");
        Some(load_mae(path)?)
    } else {
        None
    };
    train_on(cfg, &ds.train, Some(&ds.test), mae.as_ref(), opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaeReport {
    pub seed: u64,
    pub config_hash: String,
    pub epoch_losses: Vec<f64>,
    pub windows: usize,
    pub wall_clock_secs: Option<f64>,
}

/// Masked-reconstruction pretraining on the context and target halves of
/// every training window; writes `<out_dir>/mae.fpk`.
pub fn pretrain_mae_on(cfg: &ExperimentConfig, train: &FieldSeries, opts: RunOptions) -> Result<(MaeBundle, MaeReport, PathBuf)> {
    cfg.validate()?;
    let clock = Instant::now();
    let mcfg = cfg.mae_config();
    let mae = Mae::new(mcfg)?;
    let norm = Normalizer::fit(train);
    let k = mcfg.frames;
    let windows: Vec<Tensor> = window_pairs(train, k, &norm)?
        .into_iter()
        .flat_map(|p| [p.context, p.target])
        .collect();
    let mut store = mae.init_params(&mut rng::stream(cfg.seed, "mae-init"));
    store.quantize_f32();
    let mut opt = AdamW::new(cfg.optimizer);
    let mut order_rng = rng::stream(cfg.seed, "mae-order");
    let mut mask_rng = rng::stream(cfg.seed, "mask");
    let path = out_path(&cfg.out_dir, "mae.fpk")?;
    let n = windows.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let mut epoch_losses = Vec::new();
    for epoch in 0..cfg.mae_epochs {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut order_rng);
        let mut losses = Vec::new();
        for (s, ids) in idx.chunks(cfg.batch_size).enumerate() {
            let plans = ids
                .iter()
                .map(|_| random_mask(mae.tokens(), mcfg.mask_ratio, mask_rng.gen()))
                .collect::<Result<Vec<_>>>()?;
            let results: Vec<Result<(f64, BTreeMap<String, Tensor>)>> = ids
                .par_iter()
                .zip(plans.par_iter())
                .map(|(&i, plan)| mae.loss_and_grads(&store, &windows[i], plan))
                .collect();
            let mut grads = BTreeMap::new();
            let mut loss = 0.0;
            for r in results {
                let (l, g) = r?;
                loss += l / ids.len() as f64;
                accumulate_grads(&mut grads, g, 1.0 / ids.len() as f64);
            }
            if !loss.is_finite() {
                return Err(Error::NanLoss { epoch, step: s });
            }
            clip_grad_norm(&mut grads, cfg.optimizer.clip_norm);
            let lr = cfg.lr.at(epoch as f64 + s as f64 / steps_per_epoch as f64);
            opt.step(&mut store, &grads, lr)?;
            store.quantize_f32();
            check_params(&store, epoch, s)?;
            losses.push(loss);
        }
        let l = mean(losses.into_iter());
        info!("mae epoch {epoch}: masked loss {l:.6}");
        epoch_losses.push(l);
    }
    store.save(&path, serde_json::json!({ "mae": mcfg, "normalizer": norm, "seed": cfg.seed }))?;
    let report = MaeReport {
        seed: cfg.seed,
        config_hash: cfg.hash(),
        epoch_losses,
        windows: n,
        wall_clock_secs: (!opts.deterministic).then(|| clock.elapsed().as_secs_f64()),
    };
    write_json(&out_path(&cfg.out_dir, "mae_report.json")?, &report)?;
    Ok((MaeBundle { mae, store, norm }, report, path))
}

pub fn pretrain_mae(cfg: &ExperimentConfig, opts: RunOptions) -> Result<(MaeReport, PathBuf)> {
    let ds = Dataset::load(&cfg.data_dir)?;
    let (_, report, path) = pretrain_mae_on(cfg, &ds.train, opts)?;
    Ok((report, path))
}
