//! Training loop, held-out evaluation and the instrumented energy pass.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::{Ablation, RunConfig};
use crate::data::{stack_images, Dataset, View};
use crate::energy::{model_report, EnergyReport, E_AC_PJ, E_MAC_PJ};
use crate::error::{Error, Result};
use crate::hral::{self, hral_loss, infonce_loss, to_array, MemoryBank};
use crate::model::{
    backbone_forward, cpe_forward, embed, head_forward, init_params, prune_for_inference, shs_forward, ssa_forward,
    update_running_stats, Forward, ModelConfig, ParamStore,
};
use crate::optim::AdamW;
use crate::retrieval::{rank_gallery, recall_at_k, Metric, RankedResult};
use crate::tensor::{Real, Tensor};

/// Tape handles produced by one pass through the full training model.
pub struct ModelOutputs {
    /// Backbone features, `2B×C×L` (drone rows first).
    pub features: Var,
    pub ssa: Option<Var>,
    pub logits: Option<Var>,
}

/// Backbone on the stacked views, then the enabled auxiliary blocks.
pub fn model_forward<T: Real>(fw: &mut Forward<'_, T>, cfg: &ModelConfig, images: Var, ablation: &Ablation) -> Result<ModelOutputs> {
    let features = backbone_forward(fw, cfg, images)?;
    let ssa = if ablation.ssa {
        let f_plus = cpe_forward(fw, features)?;
        Some(ssa_forward(fw, f_plus)?)
    } else {
        None
    };
    let logits = if ablation.shs {
        let g = cfg.grid();
        let map = shs_forward(fw, features, g, g)?;
        Some(head_forward(fw, map)?)
    } else {
        None
    };
    Ok(ModelOutputs { features, ssa, logits })
}

/// Scalar loss handles of one step.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l1: Var,
    pub l2: Var,
    pub current: Var,
    pub historical: Var,
    pub infonce: Var,
    pub l3: Var,
    pub total: Var,
}

fn flatten_rows<T: Real>(tape: &mut Tape<T>, x: Var, start: usize, end: usize) -> Result<Var> {
    let rows = tape.slice_rows(x, start, end)?;
    let per: usize = tape.shape(x)[1..].iter().product();
    tape.reshape(rows, &[end - start, per])
}

/// Full objective for `B` paired views: drone rows `0..B`, satellite rows
/// `B..2B` of `images`.
pub fn compute_losses<T: Real>(
    fw: &mut Forward<'_, T>,
    cfg: &RunConfig,
    images: Var,
    labels: &[usize],
    bank: &MemoryBank,
) -> Result<(ModelOutputs, LossVars)> {
    let b = labels.len();
    if fw.tape.shape(images)[0] != 2 * b {
        return Err(Error::shape("compute_losses", fw.tape.shape(images), &[2 * b]));
    }
    let out = model_forward(fw, &cfg.model, images, &cfg.ablation)?;
    let zero = fw.tape.constant(Tensor::scalar(T::zero()));

    let l1 = match out.ssa {
        Some(s) => {
            let d = flatten_rows(fw.tape, s, 0, b)?;
            let g = flatten_rows(fw.tape, s, b, 2 * b)?;
            hral::cosine_embedding_loss(fw.tape, d, g)?
        }
        None => zero,
    };
    let l2 = match out.logits {
        Some(logits) => {
            let both: Vec<usize> = labels.iter().chain(labels).copied().collect();
            hral::classification_loss(fw.tape, logits, &both)?
        }
        None => zero,
    };
    let q = flatten_rows(fw.tape, out.features, 0, b)?;
    let g = flatten_rows(fw.tape, out.features, b, 2 * b)?;
    let (current, historical, infonce, l3) = if cfg.ablation.hral {
        let t = hral_loss(fw.tape, q, g, bank, &cfg.loss)?;
        (t.current, t.historical, t.infonce, t.total)
    } else {
        let i = infonce_loss(fw.tape, q, g, cfg.loss.tau)?;
        (zero, zero, i, i)
    };
    let total = hral::total_loss(fw.tape, l1, l2, l3, &cfg.loss)?;
    Ok((
        out,
        LossVars {
            l1,
            l2,
            current,
            historical,
            infonce,
            l3,
            total,
        },
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: u64,
    pub l1: f64,
    pub l2: f64,
    pub current: f64,
    pub historical: f64,
    pub infonce: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_total: f64,
    pub heldout_r1: Option<f64>,
}

/// Dataset indices used for training and for the held-out check. The last
/// drone view of every class with at least two views is held out; all
/// satellites form the gallery.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub heldout: Vec<usize>,
    pub satellites: Vec<usize>,
}

pub fn split_dataset(ds: &Dataset) -> Result<Split> {
    let classes = ds.num_classes();
    let mut satellites = Vec::with_capacity(classes);
    let mut train = Vec::new();
    let mut heldout = Vec::new();
    for class in 0..classes {
        let sat = ds
            .samples
            .iter()
            .position(|s| s.class == class && s.view == View::Satellite)
            .ok_or_else(|| Error::Format(format!("class {class} has no satellite image")))?;
        satellites.push(sat);
        let mut drones: Vec<usize> = (0..ds.samples.len())
            .filter(|&i| ds.samples[i].class == class && ds.samples[i].view == View::Drone)
            .collect();
        drones.sort_by_key(|&i| ds.samples[i].index);
        if drones.is_empty() {
            return Err(Error::Format(format!("class {class} has no drone image")));
        }
        if drones.len() > 1 {
            heldout.push(drones.pop().unwrap());
        }
        train.extend(drones);
    }
    Ok(Split { train, heldout, satellites })
}

/// Batches of drone sample indices with distinct classes inside each batch.
fn epoch_batches(ds: &Dataset, train: &[usize], batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let max_view = train.iter().map(|&i| ds.samples[i].index).max().unwrap_or(0);
    let mut batches = Vec::new();
    for view in 0..=max_view {
        let mut group: Vec<usize> = train.iter().copied().filter(|&i| ds.samples[i].index == view).collect();
        group.shuffle(rng);
        batches.extend(group.chunks(batch).map(|c| c.to_vec()));
    }
    batches.shuffle(rng);
    batches
}

/// Flattened backbone embeddings of the given samples, in order.
pub fn embed_samples(cfg: &ModelConfig, params: &ParamStore<f32>, ds: &Dataset, idx: &[usize]) -> Result<Array2<f64>> {
    let mut rows = Vec::with_capacity(idx.len() * cfg.embed_dim());
    for chunk in idx.chunks(64) {
        let imgs: Vec<_> = chunk.iter().map(|&i| &ds.samples[i].image).collect();
        let x = stack_images::<f32>(&imgs)?;
        rows.extend(embed(cfg, params, &x)?.to_f64_vec());
    }
    Array2::from_shape_vec((idx.len(), cfg.embed_dim()), rows).map_err(|_| Error::shape("embed", &[idx.len()], &[cfg.embed_dim()]))
}

/// Drone→satellite R@1 on the held-out views with the pruned model.
pub fn heldout_recall(cfg: &ModelConfig, params: &ParamStore<f32>, ds: &Dataset, split: &Split) -> Result<Option<f64>> {
    if split.heldout.is_empty() {
        return Ok(None);
    }
    let pruned = prune_for_inference(params);
    let q = embed_samples(cfg, &pruned, ds, &split.heldout)?;
    let g = embed_samples(cfg, &pruned, ds, &split.satellites)?;
    let order = rank_gallery(q.view(), g.view(), Metric::Cosine)?;
    let ql: Vec<usize> = split.heldout.iter().map(|&i| ds.samples[i].class).collect();
    let gl: Vec<usize> = split.satellites.iter().map(|&i| ds.samples[i].class).collect();
    Ok(Some(recall_at_k(&RankedResult::from_labels(order, &ql, &gl), 1)))
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub params: ParamStore<f32>,
    pub opt: AdamW<f32>,
    pub bank: MemoryBank,
    rng: ChaCha8Rng,
    pub step: u64,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let params = init_params(&cfg.model, cfg.seed);
        Ok(Self::with_params(cfg, params))
    }

    pub fn with_params(cfg: RunConfig, params: ParamStore<f32>) -> Self {
        Self {
            opt: AdamW::new(cfg.optim),
            bank: MemoryBank::new(cfg.memory_capacity),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1)),
            step: 0,
            params,
            cfg,
        }
    }

    /// One optimizer step on `B` matched pairs.
    pub fn train_step(&mut self, images: Tensor<f32>, labels: &[usize], epoch: usize) -> Result<StepLog> {
        let mut tape = Tape::new();
        let (vars, losses, bn_stats, q_vals, g_vals) = {
            let mut fw = Forward::training(&mut tape, &self.params, self.cfg.model.neuron);
            let x = fw.tape.constant(images);
            let (out, losses) = compute_losses(&mut fw, &self.cfg, x, labels, &self.bank)?;
            let b = labels.len();
            let feats = fw.tape.value(out.features);
            let per = feats.numel() / (2 * b);
            let q_vals = to_array(&feats.slice_rows(0, b)?.reshape(&[b, per])?)?;
            let g_vals = to_array(&feats.slice_rows(b, 2 * b)?.reshape(&[b, per])?)?;
            (fw.param_vars().clone(), losses, std::mem::take(&mut fw.bn_batch_stats), q_vals, g_vals)
        };
        let item = |v: Var| tape.value(v).item() as f64;
        self.step += 1;
        let log = StepLog {
            epoch,
            step: self.step,
            l1: item(losses.l1),
            l2: item(losses.l2),
            current: item(losses.current),
            historical: item(losses.historical),
            infonce: item(losses.infonce),
            total: item(losses.total),
        };
        if !log.total.is_finite() {
            return Err(Error::Diverged(format!("non-finite total loss at step {}: {log:?}", self.step)));
        }
        let grads = tape.backward(losses.total)?;
        self.opt.step(&mut self.params, &vars, &grads);
        update_running_stats(&mut self.params, &bn_stats);
        if self.cfg.ablation.hral {
            self.bank.push(q_vals, g_vals);
        }
        Ok(log)
    }

    /// Runs the configured number of epochs, reporting held-out R@1 after each.
    pub fn fit(&mut self, ds: &Dataset, split: &Split, mut on_step: impl FnMut(&StepLog)) -> Result<Vec<EpochLog>> {
        let mut epochs = Vec::with_capacity(self.cfg.epochs);
        for epoch in 0..self.cfg.epochs {
            let batches = epoch_batches(ds, &split.train, self.cfg.batch_size, &mut self.rng);
            let mut sum = 0.0;
            for batch in &batches {
                let labels: Vec<usize> = batch.iter().map(|&i| ds.samples[i].class).collect();
                let mut imgs: Vec<_> = batch.iter().map(|&i| &ds.samples[i].image).collect();
                for &c in &labels {
                    imgs.push(&ds.samples[split.satellites[c]].image);
                }
                let x = stack_images::<f32>(&imgs)?;
                let log = self.train_step(x, &labels, epoch)?;
                log::debug!(
                    "step {} l1={:.4} l2={:.4} current={:.4} historical={:.4} infonce={:.4} total={:.4}",
                    log.step,
                    log.l1,
                    log.l2,
                    log.current,
                    log.historical,
                    log.infonce,
                    log.total
                );
                sum += log.total;
                on_step(&log);
            }
            let r1 = heldout_recall(&self.cfg.model, &self.params, ds, split)?;
            let e = EpochLog {
                epoch,
                mean_total: sum / batches.len().max(1) as f64,
                heldout_r1: r1,
            };
            log::info!("epoch {} mean loss {:.4} held-out R@1 {:?}", epoch + 1, e.mean_total, e.heldout_r1);
            epochs.push(e);
        }
        Ok(epochs)
    }
}

/// Instrumented inference-mode pass of the full model; returns the full
/// and the backbone-only energy reports.
pub fn energy_reports(cfg: &ModelConfig, params: &ParamStore<f32>, images: &Tensor<f32>) -> Result<(EnergyReport, EnergyReport)> {
    let mut tape = Tape::new();
    let mut fw = Forward::new(&mut tape, params, cfg.neuron).with_recorder();
    let x = fw.tape.constant(images.clone());
    model_forward(&mut fw, cfg, x, &Ablation::default())?;
    let rec = fw.recorder.take().expect("recorder attached");
    let mut full = model_report(&rec, E_AC_PJ, E_MAC_PJ)?;
    full.param_count = Some(params.param_count());
    let mut pruned = model_report(&rec.pruned(), E_AC_PJ, E_MAC_PJ)?;
    pruned.param_count = Some(prune_for_inference(params).param_count());
    Ok((full, pruned))
}
