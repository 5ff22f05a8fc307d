//! Semi-supervised training loop, evaluation and model selection.
//!
//! Every step draws `batch_labeled` annotated and `batch_unlabeled`
//! unannotated B-scans. Annotated samples feed the supervised terms,
//! unannotated ones the anatomical priors, and all of them the style KL and
//! the masked reconstruction.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{NodeId, Tape};
use crate::checkpoint::Checkpoint;
use crate::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::kernels::FlushDenormals;
use crate::losses::{
    self, term_coefficients, total_loss, LossBreakdown, LossTerms, LossWeights, PriorConstants,
};
use crate::nn::{LayerNet, Mode, ModelConfig, SegmentationPass};
use crate::optim::{clip_grad_norm, Optimizer, OptimizerKind};
use crate::tensor::Tensor;
use crate::topo::{Grid3, SurfaceCurveSet, SurfaceProbabilityMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub learning_rate: f64,
    pub grad_clip_norm: f64,
    pub iterations: u64,
    /// Validation (and checkpoint) cadence in steps.
    pub val_every: u64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub weights: LossWeights,
    /// Column span of the slope prior.
    pub delta: usize,
    /// Spread bound of the column PMFs (pixels).
    pub t: f64,
    /// Width of the supervised Gaussian target (pixels).
    pub sigma: f64,
    /// Fixed prior constants; derived from the labeled training samples when absent.
    pub priors: Option<PriorConstants>,
    pub flip_probability: f64,
    /// Also apply the anatomical priors to annotated samples.
    pub self_losses_on_labeled: bool,
    pub disable_texture_head: bool,
    /// Zeroes the anatomical prior weights.
    pub disable_self_losses: bool,
    /// Ignores the unlabeled pool and trains on the supervised terms alone.
    pub supervised_only: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_labeled: 7,
            batch_unlabeled: 7,
            learning_rate: 1e-4,
            grad_clip_norm: 0.5,
            iterations: 300,
            val_every: 25,
            seed: 0,
            optimizer: OptimizerKind::Madgrad,
            weights: LossWeights::published(),
            delta: 10,
            t: 1.0,
            sigma: 0.5,
            priors: None,
            flip_probability: 0.3,
            self_losses_on_labeled: false,
            disable_texture_head: false,
            disable_self_losses: false,
            supervised_only: false,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_labeled == 0 {
            return Err(Error::Config("batch_labeled must be at least 1".into()));
        }
        if self.batch_unlabeled == 0 && !self.supervised_only {
            return Err(Error::Config(
                "batch_unlabeled must be at least 1 unless supervised_only is set".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.grad_clip_norm.is_nan() || self.grad_clip_norm <= 0.0 {
            return Err(Error::Config(format!(
                "grad_clip_norm {} must be positive",
                self.grad_clip_norm
            )));
        }
        if self.val_every == 0 {
            return Err(Error::Config("val_every must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Config(format!(
                "flip_probability {} outside [0, 1]",
                self.flip_probability
            )));
        }
        self.effective_weights().validate()?;
        self.effective_model().validate()
    }

    /// Loss weights after applying the ablation flags.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if self.disable_self_losses || self.supervised_only {
            w = w.without_priors();
        }
        if self.supervised_only {
            w.style_kl = 0.0;
            w.reconstruction = 0.0;
        }
        w
    }

    pub fn effective_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        if self.disable_texture_head {
            m.texture_head = false;
        }
        m
    }

    pub fn effective_batch_unlabeled(&self) -> usize {
        if self.supervised_only {
            0
        } else {
            self.batch_unlabeled
        }
    }
}

/// One training batch.
#[derive(Clone, Debug, Default)]
pub struct Batch {
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
}

/// Log row of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based index of the update.
    pub step: u64,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub clipped_grad_norm: f64,
}

impl StepRecord {
    pub const HEADER: [&'static str; 12] = [
        "step",
        "kl",
        "mse",
        "to",
        "lc",
        "ls",
        "std",
        "z_kl",
        "rec",
        "total",
        "grad_norm",
        "clipped_grad_norm",
    ];

    /// Fields in [`Self::HEADER`] order; floats use shortest round-trip form.
    pub fn csv_row(&self) -> String {
        let mut fields = vec![self.step.to_string()];
        fields.extend(self.loss.values().iter().map(|v| v.to_string()));
        fields.push(self.grad_norm.to_string());
        fields.push(self.clipped_grad_norm.to_string());
        fields.join(",")
    }
}

/// Which loss groups a sample feeds.
struct Role<'a> {
    reference: Option<&'a SurfaceCurveSet<f32>>,
    priors: bool,
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn to_f32_tensor(shape: &[usize], v: &[f64], scale: f32) -> Tensor {
    Tensor::new(
        shape.to_vec(),
        v.iter().map(|&x| x as f32 * scale).collect(),
    )
    .expect("gradient shape")
}

/// Generative-branch nodes entering the loss.
#[derive(Clone, Copy)]
struct GenerativeNodes {
    image: NodeId,
    mean: NodeId,
    logvar: NodeId,
    recon: NodeId,
}

/// Computes every loss term for the batch and registers the weighted total
/// as one scalar node whose backward distributes the per-term gradients.
fn batch_loss(
    tape: &mut Tape,
    seg: &SegmentationPass,
    gen: Option<GenerativeNodes>,
    roles: &[Role<'_>],
    priors: &PriorConstants,
    weights: &LossWeights,
) -> Result<(NodeId, LossBreakdown)> {
    let p_t = tape.value(seg.probabilities);
    let (n_b, s_n, h, w) = p_t.dims4();
    let p_all = to_f64(p_t.data());
    let raw_all = to_f64(tape.value(seg.raw_positions).data());
    let rect_all = to_f64(tape.value(seg.positions).data());
    let (grid_len, curve_len) = (s_n * h * w, s_n * w);

    let n_sup = roles.iter().filter(|r| r.reference.is_some()).count();
    let n_self = roles.iter().filter(|r| r.priors).count();
    let coef = term_coefficients(weights);
    let mut terms = LossTerms::default();
    let mut g_p = vec![0.0f64; p_all.len()];
    let mut g_raw = vec![0.0f64; raw_all.len()];
    let mut g_rect = vec![0.0f64; rect_all.len()];

    let add = |dst: &mut [f64], src: &[f64], scale: f64| {
        for (d, s) in dst.iter_mut().zip(src) {
            *d += scale * s;
        }
    };

    for (n, role) in roles.iter().enumerate() {
        let p_range = n * grid_len..(n + 1) * grid_len;
        let c_range = n * curve_len..(n + 1) * curve_len;
        let p = SurfaceProbabilityMap::new_unchecked(Grid3::new(
            s_n,
            h,
            w,
            p_all[p_range.clone()].to_vec(),
        )?);
        let raw = SurfaceCurveSet::new(s_n, w, raw_all[c_range.clone()].to_vec())?;
        let rect = SurfaceCurveSet::new(s_n, w, rect_all[c_range.clone()].to_vec())?;
        if let Some(reference) = role.reference {
            let mu: SurfaceCurveSet<f64> = reference.cast();
            let scale = 1.0 / n_sup as f64;
            let kl = losses::kl_supervised(&p, &mu, priors.sigma)?;
            terms.kl += kl.value * scale;
            add(&mut g_p[p_range.clone()], kl.grad.data(), coef.kl * scale);
            let mse = losses::mse_supervised(&rect, &mu)?;
            terms.mse += mse.value * scale;
            add(
                &mut g_rect[c_range.clone()],
                mse.grad.positions(),
                coef.mse * scale,
            );
        }
        if role.priors {
            let scale = 1.0 / n_self as f64;
            let to = losses::loss_topo(&raw);
            terms.to += to.value * scale;
            add(
                &mut g_raw[c_range.clone()],
                to.grad.positions(),
                coef.to * scale,
            );
            let lc = losses::loss_continuity(&rect, priors)?;
            terms.lc += lc.value * scale;
            add(
                &mut g_rect[c_range.clone()],
                lc.grad.positions(),
                coef.lc * scale,
            );
            let ls = losses::loss_slope(&rect, priors)?;
            terms.ls += ls.value * scale;
            add(
                &mut g_rect[c_range.clone()],
                ls.grad.positions(),
                coef.ls * scale,
            );
            let sd = losses::loss_std(&p, priors);
            terms.std += sd.value * scale;
            add(&mut g_p[p_range], sd.grad.data(), coef.std * scale);
        }
    }

    let mut inputs = vec![seg.probabilities, seg.raw_positions, seg.positions];
    let mut extra_grads: Vec<(Vec<usize>, Vec<f64>)> = Vec::new();
    if let Some(g) = gen {
        let mean = to_f64(tape.value(g.mean).data());
        let logvar = to_f64(tape.value(g.logvar).data());
        let zkl = losses::loss_vae_kl(&mean, &logvar, n_b)?;
        terms.z_kl = zkl.value;
        let g_mean: Vec<f64> = zkl.grad.mean.iter().map(|v| v * coef.z_kl).collect();
        let g_logvar: Vec<f64> = zkl.grad.logvar.iter().map(|v| v * coef.z_kl).collect();

        let image = to_f64(tape.value(g.image).data());
        let recon = to_f64(tape.value(g.recon).data());
        let mut g_recon = vec![0.0f64; recon.len()];
        let px = h * w;
        for n in 0..n_b {
            let rect = SurfaceCurveSet::new(
                s_n,
                w,
                rect_all[n * curve_len..(n + 1) * curve_len].to_vec(),
            )?;
            let range = n * px..(n + 1) * px;
            let rec = losses::loss_reconstruction_masked(
                &image[range.clone()],
                &recon[range.clone()],
                &rect,
                h,
            )?;
            terms.rec += rec.value / n_b as f64;
            add(&mut g_recon[range], &rec.grad, coef.rec / n_b as f64);
        }
        inputs.extend([g.mean, g.logvar, g.recon]);
        extra_grads.push((tape.value(g.mean).shape().to_vec(), g_mean));
        extra_grads.push((tape.value(g.logvar).shape().to_vec(), g_logvar));
        extra_grads.push((tape.value(g.recon).shape().to_vec(), g_recon));
    }

    let breakdown = total_loss(&terms, weights)?;
    let shapes = [
        tape.value(seg.probabilities).shape().to_vec(),
        tape.value(seg.raw_positions).shape().to_vec(),
        tape.value(seg.positions).shape().to_vec(),
    ];
    let mut grads: Vec<(Vec<usize>, Vec<f64>)> = vec![
        (shapes[0].clone(), g_p),
        (shapes[1].clone(), g_raw),
        (shapes[2].clone(), g_rect),
    ];
    grads.extend(extra_grads);
    let node = tape.custom(
        &inputs,
        Tensor::scalar(breakdown.total as f32),
        Box::new(move |g| {
            let scale = g.item();
            grads
                .iter()
                .map(|(shape, v)| to_f32_tensor(shape, v, scale))
                .collect()
        }),
    );
    Ok((node, breakdown))
}

/// Validation metrics of a model on a labeled dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Per surface, B-scan-averaged RMSE (pixels).
    pub per_surface_rmse: Vec<f64>,
    /// Per surface, population standard deviation of the per-B-scan RMSE.
    pub per_surface_std: Vec<f64>,
    /// Average over B-scans of the RMSE over all surfaces and columns.
    pub mean_rmse: f64,
    /// Population standard deviation of the per-B-scan RMSE.
    pub std_rmse: f64,
    /// Adjacent surface pairs out of order, summed over all columns and B-scans.
    pub ordering_violations: usize,
    /// Average over B-scans of the reconstruction MAE inside the reference retina mask.
    pub recon_mae: f64,
    pub per_sample_rmse: Vec<f64>,
}

/// RMSE statistics of `predictions` against `references`; `recon_mae` is
/// passed through.
pub fn rmse_report(
    predictions: &[SurfaceCurveSet<f32>],
    references: &[&SurfaceCurveSet<f32>],
    recon_mae: f64,
) -> Result<EvalReport> {
    if predictions.len() != references.len() || predictions.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} references",
            predictions.len(),
            references.len()
        )));
    }
    let s_n = references[0].surfaces();
    let mut per_surface: Vec<Vec<f64>> = vec![Vec::with_capacity(predictions.len()); s_n];
    let mut per_sample = Vec::with_capacity(predictions.len());
    let mut violations = 0;
    for (pred, reference) in predictions.iter().zip(references) {
        if (pred.surfaces(), pred.cols()) != (reference.surfaces(), reference.cols())
            || reference.surfaces() != s_n
        {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs reference {}x{}",
                pred.surfaces(),
                pred.cols(),
                reference.surfaces(),
                reference.cols()
            )));
        }
        let w = pred.cols() as f64;
        let mut total = 0.0;
        for (s, acc) in per_surface.iter_mut().enumerate() {
            let sq: f64 = pred
                .surface(s)
                .iter()
                .zip(reference.surface(s))
                .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                .sum();
            acc.push((sq / w).sqrt());
            total += sq;
        }
        per_sample.push((total / (w * s_n as f64)).sqrt());
        violations += pred.ordering_violations();
    }
    let (mean, std) = mean_and_std(&per_sample);
    let (per_surface_rmse, per_surface_std) = per_surface.iter().map(|v| mean_and_std(v)).unzip();
    Ok(EvalReport {
        per_surface_rmse,
        per_surface_std,
        mean_rmse: mean,
        std_rmse: std,
        ordering_violations: violations,
        recon_mae,
        per_sample_rmse: per_sample,
    })
}

/// Mean and population standard deviation.
fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Samples per inference batch in [`evaluate`].
const EVAL_CHUNK: usize = 16;

/// Predicted rectified surfaces for every sample of `dataset`.
pub fn predict(model: &LayerNet, dataset: &Dataset) -> Result<Vec<SurfaceCurveSet<f32>>> {
    let _ftz = FlushDenormals::new();
    let mut out = Vec::with_capacity(dataset.len());
    for chunk in dataset.samples.chunks(EVAL_CHUNK) {
        out.extend(model.predict_surfaces(&dataset.images_tensor(chunk))?);
    }
    Ok(out)
}

/// Evaluates `model` on a fully labeled dataset; returns the report and the predictions.
pub fn evaluate_with_predictions(
    model: &LayerNet,
    dataset: &Dataset,
) -> Result<(EvalReport, Vec<SurfaceCurveSet<f32>>)> {
    check_compatible(model.config(), dataset)?;
    let _ftz = FlushDenormals::new();
    let references: Vec<&SurfaceCurveSet<f32>> = dataset
        .samples
        .iter()
        .map(|s| {
            s.surfaces.as_ref().ok_or_else(|| {
                Error::Dataset(format!(
                    "sample {} is unlabeled; evaluation needs references",
                    s.id
                ))
            })
        })
        .collect::<Result<_>>()?;
    if references.is_empty() {
        return Err(Error::Dataset("evaluation dataset is empty".into()));
    }
    let h = dataset.height;
    let mut predictions = Vec::with_capacity(dataset.len());
    let mut mae_sum = 0.0;
    for chunk in dataset.samples.chunks(EVAL_CHUNK) {
        let images = dataset.images_tensor(chunk);
        let fwd = model.forward(&images, Mode::Inference)?;
        let recon = fwd.tape.value(fwd.recon);
        for (k, sample) in chunk.iter().enumerate() {
            let pred = fwd.positions_of(k);
            // the reference mask keeps the compared pixels fixed across checkpoints
            let reference = references[predictions.len()];
            let rec =
                losses::loss_reconstruction_masked(&sample.image, recon.sample(k), reference, h)?;
            mae_sum += rec.value as f64;
            predictions.push(pred);
        }
    }
    let report = rmse_report(&predictions, &references, mae_sum / dataset.len() as f64)?;
    Ok((report, predictions))
}

pub fn evaluate(model: &LayerNet, dataset: &Dataset) -> Result<EvalReport> {
    evaluate_with_predictions(model, dataset).map(|(r, _)| r)
}

/// Dataset dimensions must match the model.
pub fn check_compatible(model: &ModelConfig, dataset: &Dataset) -> Result<()> {
    if (model.surfaces, model.height, model.width)
        != (dataset.surfaces, dataset.height, dataset.width)
    {
        return Err(Error::Config(format!(
            "model expects S={}, {}x{} images; dataset has S={}, {}x{}",
            model.surfaces,
            model.height,
            model.width,
            dataset.surfaces,
            dataset.height,
            dataset.width
        )));
    }
    Ok(())
}

/// Index of the smallest RMSE; ties go to the earliest entry.
pub fn select_best_index(rmses: &[f64]) -> Result<usize> {
    if rmses.is_empty() {
        return Err(Error::InvalidArgument(
            "no checkpoints to select from".into(),
        ));
    }
    let mut best = 0;
    for (k, &v) in rmses.iter().enumerate() {
        if v < rmses[best] {
            best = k;
        }
    }
    Ok(best)
}

/// Evaluates each checkpoint on `val` and returns the index of the best.
pub fn select_best(checkpoints: &[Checkpoint], val: &Dataset) -> Result<usize> {
    let rmses = checkpoints
        .iter()
        .map(|c| Ok(evaluate(&c.model()?, val)?.mean_rmse))
        .collect::<Result<Vec<_>>>()?;
    select_best_index(&rmses)
}

/// Keeps annotations on `round(fraction · labeled)` samples, at least one per
/// group that had any, and drops the rest to the unlabeled pool.
pub fn subset_labels(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "label fraction {fraction} outside (0, 1]"
        )));
    }
    if fraction == 1.0 {
        return Ok(dataset.clone());
    }
    let labeled: Vec<usize> = (0..dataset.len())
        .filter(|&k| dataset.samples[k].is_labeled())
        .collect();
    let mut groups: Vec<usize> = labeled.iter().map(|&k| dataset.samples[k].group).collect();
    groups.sort_unstable();
    groups.dedup();
    let target = (fraction * labeled.len() as f64).round() as usize;
    if target < groups.len() {
        return Err(Error::InvalidArgument(format!(
            "fraction {fraction} keeps {target} of {} labels, fewer than the {} labeled groups",
            labeled.len(),
            groups.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = BTreeSet::new();
    for &g in &groups {
        let members: Vec<usize> = labeled
            .iter()
            .copied()
            .filter(|&k| dataset.samples[k].group == g)
            .collect();
        keep.insert(*members.choose(&mut rng).expect("group has members"));
    }
    let mut rest: Vec<usize> = labeled
        .iter()
        .copied()
        .filter(|k| !keep.contains(k))
        .collect();
    rest.shuffle(&mut rng);
    keep.extend(rest.into_iter().take(target - groups.len()));

    let mut out = dataset.clone();
    for (k, sample) in out.samples.iter_mut().enumerate() {
        if !keep.contains(&k) {
            sample.surfaces = None;
        }
    }
    Ok(out)
}

/// Training progress reported to [`Trainer::fit`] observers.
pub enum Event<'a> {
    Step(&'a StepRecord),
    Validation {
        step: u64,
        report: &'a EvalReport,
        improved: bool,
        /// State after this step, including optimizer buffers.
        checkpoint: &'a Checkpoint,
    },
}

/// Best validation result so far.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestSoFar {
    pub step: u64,
    pub mean_rmse: f64,
}

pub struct FitOutcome {
    pub records: Vec<StepRecord>,
    pub validations: Vec<(u64, EvalReport)>,
    pub best: Option<BestSoFar>,
    /// Checkpoint of the best validation step reached during this call.
    pub best_checkpoint: Option<Checkpoint>,
}

const EXTRA_CONFIG: &str = "train_config";
const EXTRA_PRIORS: &str = "priors";
const EXTRA_BEST: &str = "best";

pub struct Trainer {
    cfg: TrainConfig,
    model: LayerNet,
    optimizer: Optimizer,
    priors: PriorConstants,
    weights: LossWeights,
    labeled: Vec<Sample>,
    unlabeled: Vec<Sample>,
    step: u64,
    best: Option<BestSoFar>,
    supervised_ids: BTreeSet<String>,
}

impl Trainer {
    /// Splits `train` into annotated and unannotated pools and derives the
    /// prior constants from the annotated pool unless given.
    pub fn new(cfg: TrainConfig, train: &Dataset) -> Result<Self> {
        cfg.validate()?;
        let model_cfg = cfg.effective_model();
        check_compatible(&model_cfg, train)?;
        train.validate()?;
        let (labeled, unlabeled): (Vec<Sample>, Vec<Sample>) =
            train.samples.iter().cloned().partition(Sample::is_labeled);
        if labeled.is_empty() {
            return Err(Error::Dataset(
                "training needs at least one labeled sample".into(),
            ));
        }
        if unlabeled.is_empty() && cfg.effective_batch_unlabeled() > 0 {
            return Err(Error::Dataset(
                "no unlabeled samples; set supervised_only for fully labeled training".into(),
            ));
        }
        let priors = match &cfg.priors {
            Some(p) => {
                p.validate()?;
                if p.surfaces() != train.surfaces {
                    return Err(Error::Config(format!(
                        "prior constants cover {} surfaces, data has {}",
                        p.surfaces(),
                        train.surfaces
                    )));
                }
                p.clone()
            }
            None => {
                let refs: Vec<&SurfaceCurveSet<f32>> =
                    labeled.iter().filter_map(|s| s.surfaces.as_ref()).collect();
                losses::derive_constants(&refs, cfg.delta, cfg.t, cfg.sigma)?
            }
        };
        let model = LayerNet::new(model_cfg, cfg.seed)?;
        let optimizer = Optimizer::new(cfg.optimizer, model.store(), cfg.learning_rate);
        let weights = cfg.effective_weights();
        Ok(Self {
            cfg,
            model,
            optimizer,
            priors,
            weights,
            labeled,
            unlabeled,
            step: 0,
            best: None,
            supervised_ids: BTreeSet::new(),
        })
    }

    /// Restores parameters, optimizer state, step counter and best-so-far
    /// from a checkpoint written by this trainer.
    pub fn resume(cfg: TrainConfig, train: &Dataset, checkpoint: &Checkpoint) -> Result<Self> {
        let mut trainer = Self::new(cfg, train)?;
        if let Some(stored) = checkpoint.header.extra.get(EXTRA_CONFIG) {
            let mut stored: TrainConfig = serde_json::from_value(stored.clone())?;
            // extending a run is allowed
            stored.iterations = trainer.cfg.iterations;
            if stored != trainer.cfg {
                return Err(Error::Checkpoint(
                    "checkpoint was written with a different training configuration".into(),
                ));
            }
        }
        if checkpoint.header.model != trainer.model.config().clone() {
            return Err(Error::Checkpoint(
                "checkpoint model configuration differs".into(),
            ));
        }
        trainer.model = checkpoint.model()?;
        trainer.optimizer = checkpoint.optimizer(&trainer.model, trainer.cfg.learning_rate)?;
        trainer.step = checkpoint.header.step;
        if let Some(p) = checkpoint.header.extra.get(EXTRA_PRIORS) {
            trainer.priors = serde_json::from_value(p.clone())?;
        }
        trainer.best = match checkpoint.header.extra.get(EXTRA_BEST) {
            Some(b) => serde_json::from_value(b.clone())?,
            None => None,
        };
        Ok(trainer)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &LayerNet {
        &self.model
    }

    pub fn priors(&self) -> &PriorConstants {
        &self.priors
    }

    pub fn weights(&self) -> &LossWeights {
        &self.weights
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn best(&self) -> Option<BestSoFar> {
        self.best
    }

    /// Ids of every sample that has contributed to a supervised term.
    pub fn supervised_ids(&self) -> &BTreeSet<String> {
        &self.supervised_ids
    }

    pub fn labeled_pool(&self) -> &[Sample] {
        &self.labeled
    }

    pub fn unlabeled_pool(&self) -> &[Sample] {
        &self.unlabeled
    }

    /// Randomness of one step depends only on the seed and the step index,
    /// so a resumed run replays the same stream.
    fn step_rng(&self, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(step + 1);
        rng
    }

    /// `count` draws from `pool`, walking per-epoch permutations so every
    /// sample is seen once per pass.
    fn draw(&self, pool: &[Sample], salt: u64, step: u64, count: usize) -> Vec<Sample> {
        let n = pool.len() as u64;
        let mut out = Vec::with_capacity(count);
        let mut epoch_perm: Option<(u64, Vec<usize>)> = None;
        for j in 0..count as u64 {
            let k = step * count as u64 + j;
            let epoch = k / n;
            if epoch_perm.as_ref().map(|(e, _)| *e) != Some(epoch) {
                let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ salt);
                rng.set_stream(epoch);
                let mut perm: Vec<usize> = (0..pool.len()).collect();
                perm.shuffle(&mut rng);
                epoch_perm = Some((epoch, perm));
            }
            let perm = &epoch_perm.as_ref().expect("permutation").1;
            out.push(pool[perm[(k % n) as usize]].clone());
        }
        out
    }

    /// The batch used by the next call to [`Self::train_step`], before augmentation.
    pub fn next_batch(&self) -> Batch {
        let unlabeled = match self.cfg.effective_batch_unlabeled() {
            0 => Vec::new(),
            b => self.draw(&self.unlabeled, 0x756e_6c61_6265_6c00, self.step, b),
        };
        Batch {
            labeled: self.draw(
                &self.labeled,
                0x6c61_6265_6c65_6400,
                self.step,
                self.cfg.batch_labeled,
            ),
            unlabeled,
        }
    }

    /// Draws the next batch and applies one update.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let batch = self.next_batch();
        self.train_step_on(&batch)
    }

    /// One update on an explicit batch. Annotations of `batch.unlabeled` are
    /// never read.
    pub fn train_step_on(&mut self, batch: &Batch) -> Result<StepRecord> {
        let _ftz = FlushDenormals::new();
        if batch.labeled.is_empty() && batch.unlabeled.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if let Some(s) = batch.labeled.iter().find(|s| !s.is_labeled()) {
            return Err(Error::InvalidArgument(format!(
                "sample {} in the labeled part has no surfaces",
                s.id
            )));
        }
        let step = self.step + 1;
        let mut rng = self.step_rng(self.step);
        let width = self.model.config().width;
        let p = self.cfg.flip_probability;
        let labeled: Vec<Sample> = batch
            .labeled
            .iter()
            .map(|s| s.augmented(width, p, &mut rng))
            .collect();
        let unlabeled: Vec<Sample> = batch
            .unlabeled
            .iter()
            .map(|s| s.augmented(width, p, &mut rng))
            .collect();

        let cfg = self.model.config();
        let images = Tensor::new(
            [labeled.len() + unlabeled.len(), 1, cfg.height, cfg.width],
            labeled
                .iter()
                .chain(&unlabeled)
                .flat_map(|s| s.image.iter().copied())
                .collect(),
        )?;
        self.model.check_images(&images)?;
        let roles: Vec<Role<'_>> = labeled
            .iter()
            .map(|s| Role {
                reference: s.surfaces.as_ref(),
                priors: self.cfg.self_losses_on_labeled,
            })
            .chain(unlabeled.iter().map(|_| Role {
                reference: None,
                priors: true,
            }))
            .collect();

        let mut tape = Tape::new();
        let image = tape.input(images);
        let seg = self.model.segment(&mut tape, image)?;
        let gen = if self.weights.style_kl > 0.0 || self.weights.reconstruction > 0.0 {
            let (mean, logvar) = self.model.style_encode(&mut tape, image, seg.factors)?;
            let style = LayerNet::style_sample(&mut tape, mean, logvar, Mode::Train(&mut rng));
            let recon = self.model.decode(&mut tape, seg.factors, style)?;
            Some(GenerativeNodes {
                image,
                mean,
                logvar,
                recon,
            })
        } else {
            None
        };
        let (loss, breakdown) =
            batch_loss(&mut tape, &seg, gen, &roles, &self.priors, &self.weights)?;
        if let Some(term) = breakdown.non_finite_term() {
            return Err(Error::NonFiniteLoss { term, step });
        }
        for s in &labeled {
            self.supervised_ids.insert(s.id.clone());
        }
        let mut grads = tape.backward(loss);
        let (grad_norm, clipped_grad_norm) = clip_grad_norm(&mut grads, self.cfg.grad_clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                term: "gradient",
                step,
            });
        }
        self.optimizer.step(self.model.store_mut(), &grads);
        self.step = step;
        Ok(StepRecord {
            step,
            loss: breakdown,
            grad_norm,
            clipped_grad_norm,
        })
    }

    /// Current state as a checkpoint carrying the training configuration,
    /// prior constants and best-so-far.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck =
            Checkpoint::capture(&self.model, Some(&self.optimizer), self.cfg.seed, self.step);
        ck.header
            .extra
            .insert(EXTRA_CONFIG.into(), serde_json::to_value(&self.cfg)?);
        ck.header
            .extra
            .insert(EXTRA_PRIORS.into(), serde_json::to_value(&self.priors)?);
        ck.header
            .extra
            .insert(EXTRA_BEST.into(), serde_json::to_value(self.best)?);
        Ok(ck)
    }

    /// Trains up to `cfg.iterations` steps, validating every `val_every`
    /// steps and after the last one.
    pub fn fit(
        &mut self,
        val: Option<&Dataset>,
        mut observe: impl FnMut(Event<'_>) -> Result<()>,
    ) -> Result<FitOutcome> {
        let mut outcome = FitOutcome {
            records: Vec::new(),
            validations: Vec::new(),
            best: self.best,
            best_checkpoint: None,
        };
        while self.step < self.cfg.iterations {
            let record = self.train_step()?;
            observe(Event::Step(&record))?;
            outcome.records.push(record);
            let due =
                self.step.is_multiple_of(self.cfg.val_every) || self.step == self.cfg.iterations;
            if let (true, Some(val)) = (due, val) {
                let report = evaluate(&self.model, val)?;
                let improved = self.best.is_none_or(|b| report.mean_rmse < b.mean_rmse);
                if improved {
                    self.best = Some(BestSoFar {
                        step: self.step,
                        mean_rmse: report.mean_rmse,
                    });
                }
                let checkpoint = self.checkpoint()?;
                observe(Event::Validation {
                    step: self.step,
                    report: &report,
                    improved,
                    checkpoint: &checkpoint,
                })?;
                if improved {
                    outcome.best_checkpoint = Some(checkpoint);
                }
                outcome.validations.push((self.step, report));
            }
        }
        outcome.best = self.best;
        Ok(outcome)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curves(rows: &[&[f32]]) -> SurfaceCurveSet<f32> {
        SurfaceCurveSet::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn perfect_and_shifted_predictions() {
        let reference = curves(&[&[3.0, 4.0, 5.0], &[8.0, 8.5, 9.0]]);
        let exact = rmse_report(std::slice::from_ref(&reference), &[&reference], 0.0).unwrap();
        assert_eq!(exact.mean_rmse, 0.0);
        assert!(exact.per_surface_rmse.iter().all(|&v| v == 0.0));
        let mut shifted = reference.clone();
        shifted.positions_mut().iter_mut().for_each(|v| *v += 2.0);
        let r = rmse_report(&[shifted], &[&reference], 0.0).unwrap();
        assert!((r.mean_rmse - 2.0).abs() < 1e-9);
        assert!(r.per_surface_rmse.iter().all(|&v| (v - 2.0).abs() < 1e-9));
        assert_eq!(r.std_rmse, 0.0);
    }

    #[test]
    fn select_best_examples() {
        assert_eq!(select_best_index(&[4.0]).unwrap(), 0);
        assert_eq!(select_best_index(&[3.0, 2.5, 2.7]).unwrap(), 1);
        assert_eq!(select_best_index(&[2.5, 2.5]).unwrap(), 0);
        assert!(select_best_index(&[]).is_err());
    }

    #[test]
    fn ablation_flags_map_to_weights() {
        let cfg = TrainConfig {
            disable_self_losses: true,
            ..TrainConfig::default()
        };
        let w = cfg.effective_weights();
        assert_eq!(
            (w.ordering, w.continuity, w.slope, w.spread),
            (0.0, 0.0, 0.0, 0.0)
        );
        assert_eq!((w.surface_kl, w.reconstruction), (50.0, 1.0));
        let sup = TrainConfig {
            supervised_only: true,
            batch_unlabeled: 0,
            ..TrainConfig::default()
        };
        assert!(sup.validate().is_ok());
        assert_eq!(sup.effective_weights().as_array()[2..], [0.0; 6]);
        assert!(TrainConfig {
            batch_unlabeled: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn csv_row_matches_header() {
        let r = StepRecord {
            step: 3,
            loss: LossBreakdown::default(),
            grad_norm: 1.5,
            clipped_grad_norm: 0.5,
        };
        assert_eq!(r.csv_row().split(',').count(), StepRecord::HEADER.len());
    }
}
