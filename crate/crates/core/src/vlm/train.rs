//! Shared detection training loop used by pretraining and every tuning
//! method.

use std::collections::BTreeSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{BBox, Scene};
use crate::error::{Error, Result};
use crate::eval::{evaluate, DetectionMetrics};
use crate::losses::detection::{box_loss_node, focal_loss_node, mask_loss_node};
use crate::losses::{LossComponents, LossSelection};
use crate::nn::{Binder, Partition};
use crate::numeric::{clip_grad_norm, Graph, Optimizer, OptimizerConfig, Rng, Tensor, Var, GRAD_CLIP_NORM};
use crate::vlm::model::{Span, VlmModel};
use crate::vlm::prompt::Prompt;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Validation interval in steps; 0 evaluates only before and after.
    pub eval_every: usize,
    pub losses: LossSelection,
    pub warmup_steps: usize,
    pub cosine_decay: bool,
    /// Restore the best validation state at the end.
    pub select_best: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 4,
            optimizer: OptimizerConfig::default(),
            eval_every: 100,
            losses: LossSelection::DETECTION,
            warmup_steps: 0,
            cosine_decay: false,
            select_best: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.losses.require_nonempty()?;
        if self.losses.gen {
            return Err(Error::Config(
                "the generation loss applies to the denoiser path, not detection training".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        let base = self.optimizer.learning_rate;
        if step < self.warmup_steps {
            return base * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if self.cosine_decay && self.steps > self.warmup_steps {
            let p = (step - self.warmup_steps) as f64 / (self.steps - self.warmup_steps) as f64;
            return base * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()));
        }
        base
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub components: LossComponents,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub curve: Vec<StepRecord>,
    pub evals: Vec<(usize, DetectionMetrics)>,
    pub best_step: usize,
    pub best: DetectionMetrics,
    /// Scalars held by the optimizer.
    pub optimizer_scalars: usize,
    /// Model scalars the forward path depends on, including any cached
    /// trunk computation.
    pub bound_scalars: usize,
    pub text_calls: u64,
    /// Mean wall-clock seconds per optimizer step.
    pub seconds_per_step: f64,
}

/// Per-scene training targets under center-based assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneTargets {
    /// R × K one-hot rows; background regions are all zero.
    pub cls: Vec<f64>,
    pub regions: Vec<usize>,
    pub boxes: Vec<BBox>,
    /// One H·W row per assigned object.
    pub masks: Vec<f64>,
}

pub fn scene_targets(model: &VlmModel, scene: &Scene, num_classes: usize) -> Result<SceneTargets> {
    let r = model.config().regions();
    let mut cls = vec![0.0; r * num_classes];
    let mut regions = Vec::new();
    let mut boxes = Vec::new();
    let mut masks = Vec::new();
    for ((b, &label), m) in scene.boxes.iter().zip(&scene.labels).zip(&scene.masks) {
        if label >= num_classes {
            return Err(Error::InvalidArgument(format!("label {label} outside {num_classes} classes")));
        }
        let (x, y) = b.center();
        let reg = model.region_of(x, y);
        if regions.contains(&reg) {
            return Err(Error::InvalidArgument(format!("two objects share region {reg}")));
        }
        cls[reg * num_classes + label] = 1.0;
        regions.push(reg);
        boxes.push(*b);
        masks.extend(m.iter().map(|&p| if p { 1.0 } else { 0.0 }));
    }
    Ok(SceneTargets {
        cls,
        regions,
        boxes,
        masks,
    })
}

/// Selected losses of one scene; unselected components are reported as 0.
/// Also returns the temperature leaf used.
#[allow(clippy::too_many_arguments)]
pub fn scene_loss(
    model: &VlmModel,
    g: &mut Graph,
    b: &mut Binder,
    trunk: Var,
    prompt: Var,
    spans: &[Span],
    t: &SceneTargets,
    sel: &LossSelection,
) -> Result<(Var, LossComponents, Var)> {
    let h = model.heads(g, b, trunk, prompt, spans)?;
    let mut parts = Vec::new();
    let mut c = LossComponents::default();
    if sel.cls {
        let l = focal_loss_node(g, h.logits, &t.cls)?;
        c.cls = g.scalar(l);
        parts.push(l);
    }
    if sel.bbox && !t.regions.is_empty() {
        let pred = model.decode_boxes_node(g, h.boxes, &t.regions)?;
        let l = box_loss_node(g, pred, &t.boxes, model.config().image_size as f64)?;
        c.bbox = g.scalar(l);
        parts.push(l);
    }
    if sel.mask && !t.regions.is_empty() {
        let up = model.paste_masks(g, h.masks, &t.regions, &t.boxes)?;
        let l = mask_loss_node(g, up, &t.masks)?;
        c.mask = g.scalar(l);
        parts.push(l);
    }
    let mut total = match parts.first() {
        Some(&v) => v,
        None => g.scalar_constant(0.0),
    };
    for &p in parts.iter().skip(1) {
        total = g.add(total, p)?;
    }
    Ok((total, c, h.log_tau))
}

/// Trunk outputs for each scene.
pub fn trunk_cache(model: &VlmModel, scenes: &[Scene]) -> Result<Vec<Vec<f64>>> {
    scenes.iter().map(|s| model.trunk_values(&s.image)).collect()
}

fn image_frozen(model: &VlmModel) -> bool {
    model
        .params()
        .iter()
        .filter(|p| p.partition == Partition::Image)
        .all(|p| p.frozen())
}

/// Trains the unfrozen model parameters, the prompt tensor when
/// `tune_prompt`, and the temperature when `tune_tau`, on the selected
/// detection losses. Partitions that start fully frozen, and the prompt
/// tensor when not tuned, are verified bit-identical afterwards.
pub fn train_detection(
    model: &mut VlmModel,
    prompt: &mut Prompt,
    train: &[Scene],
    val: &[Scene],
    cfg: &TrainConfig,
    tune_prompt: bool,
    tune_tau: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training split".into()));
    }
    if tune_prompt && prompt.tensor.is_none() {
        return Err(Error::InvalidArgument("prompt has nothing to tune".into()));
    }
    let k = prompt.num_classes();
    let spans = prompt.spans();
    let targets: Vec<SceneTargets> = train.iter().map(|s| scene_targets(model, s, k)).collect::<Result<_>>()?;

    if let Some(t) = prompt.tensor.as_mut() {
        t.set_requires_grad(tune_prompt);
        t.clear_grad();
    }
    model.log_tau_tensor_mut().set_requires_grad(tune_tau);
    model.params_mut().clear_grads();

    let frozen_parts: Vec<(Partition, String)> = Partition::ALL
        .iter()
        .filter(|&&p| model.params().iter().filter(|q| q.partition == p).all(|q| q.frozen()))
        .map(|&p| (p, model.params().checksum(p)))
        .collect();
    let prompt_sum = prompt.tensor.as_ref().map(Tensor::checksum);
    let calls_before = model.text_calls();

    let cached = image_frozen(model);
    let train_cache = if cached { Some(trunk_cache(model, train)?) } else { None };
    let val_cache = if cached && !val.is_empty() { Some(trunk_cache(model, val)?) } else { None };

    let mut bound_ids = BTreeSet::new();
    if cached {
        let mut g = Graph::new();
        let mut b = Binder::new(model.params());
        let zero = vec![0.0; train[0].image.len()];
        model.trunk(&mut g, &mut b, &zero)?;
        bound_ids.extend(b.finish().ids());
    }

    let optimizer_scalars = model.params().unfrozen_count()
        + if tune_prompt { prompt.tunable_count() } else { 0 }
        + if tune_tau { 1 } else { 0 };
    let mut opt = Optimizer::new(cfg.optimizer.clone())?;
    let mut rng = Rng::derived(cfg.seed, 0x7a1);

    let evaluate_now = |model: &VlmModel, prompt: &Prompt| -> Result<Option<DetectionMetrics>> {
        if val.is_empty() {
            return Ok(None);
        }
        evaluate(model, prompt, val, val_cache.as_deref()).map(Some)
    };
    let mut evals = Vec::new();
    let mut best: Option<(usize, DetectionMetrics, Option<crate::nn::ParamStore>, Option<Tensor>, f64)> = None;
    let mut consider = |step: usize, m: Option<DetectionMetrics>, model: &VlmModel, prompt: &Prompt, evals: &mut Vec<_>| {
        let Some(m) = m else { return };
        evals.push((step, m));
        if best.as_ref().is_none_or(|b| m.selection_score() > b.1.selection_score()) {
            best = Some((
                step,
                m,
                cfg.select_best.then(|| model.params().clone()),
                prompt.tensor.clone(),
                model.log_tau(),
            ));
        }
    };
    consider(0, evaluate_now(model, prompt)?, model, prompt, &mut evals);

    let mut curve = Vec::with_capacity(cfg.steps);
    let started = Instant::now();
    for step in 0..cfg.steps {
        let batch: Vec<usize> = (0..cfg.batch_size).map(|_| rng.below(train.len())).collect();
        let mut g = Graph::new();
        let mut b = Binder::new(model.params());
        let pvar = prompt.tensor.as_ref().map(|t| g.leaf(t));
        let p = prompt.build(model, &mut g, &mut b, pvar)?;
        let mut total: Option<Var> = None;
        let mut comps = LossComponents::default();
        let mut tau_leaves = Vec::with_capacity(batch.len());
        for &i in &batch {
            let cache = train_cache.as_ref().map(|c| c[i].as_slice());
            let trunk = model.trunk_or_cached(&mut g, &mut b, &train[i].image, cache)?;
            let (l, c, tau) = scene_loss(model, &mut g, &mut b, trunk, p, &spans, &targets[i], &cfg.losses)?;
            comps += c;
            tau_leaves.push(tau);
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
        let scale = 1.0 / batch.len() as f64;
        let loss = g.scale(total.expect("non-empty batch"), scale);
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        let bound = b.finish();
        bound_ids.extend(bound.ids());
        g.backward(loss)?;
        bound.write_grads(&g, model.params_mut())?;
        if let (Some(v), Some(t)) = (pvar, prompt.tensor.as_mut()) {
            if let Some(gr) = g.grad(v) {
                t.accumulate_grad(gr)?;
            }
        }
        if tune_tau {
            let gr: f64 = tau_leaves.iter().filter_map(|&v| g.grad(v)).map(|x| x[0]).sum();
            model.log_tau_tensor_mut().accumulate_grad(&[gr])?;
        }
        if optimizer_scalars > 0 {
            let mut list = model.trainable_tensors_mut(tune_tau);
            if tune_prompt {
                let t = prompt.tensor.as_mut().expect("checked above");
                if t.grad().is_none() {
                    t.accumulate_grad(&vec![0.0; t.numel()])?;
                }
                list.insert(0, t);
            }
            clip_grad_norm(&mut list, GRAD_CLIP_NORM);
            opt.set_learning_rate(cfg.lr_at(step));
            opt.step(&mut list)?;
        }
        curve.push(StepRecord {
            step: step + 1,
            loss: value,
            components: comps.scaled(scale),
        });
        let done = step + 1;
        if (cfg.eval_every > 0 && done % cfg.eval_every == 0) || done == cfg.steps {
            consider(done, evaluate_now(model, prompt)?, model, prompt, &mut evals);
        }
    }
    let seconds_per_step = if cfg.steps > 0 { started.elapsed().as_secs_f64() / cfg.steps as f64 } else { 0.0 };

    let (best_step, best_metrics) = match best {
        Some((step, m, params, tensor, log_tau)) => {
            if cfg.select_best {
                if let Some(p) = params {
                    *model.params_mut() = p;
                }
                prompt.tensor = tensor;
                model.log_tau_tensor_mut().data_mut()[0] = log_tau;
            }
            (step, m)
        }
        None => (cfg.steps, DetectionMetrics::default()),
    };
    if let Some(t) = prompt.tensor.as_mut() {
        t.clear_grad();
        t.set_requires_grad(false);
    }
    model.log_tau_tensor_mut().set_requires_grad(false);

    for (p, sum) in &frozen_parts {
        if &model.params().checksum(*p) != sum {
            return Err(Error::FreezeViolation(format!("frozen partition `{}` changed", p.as_str())));
        }
    }
    if !tune_prompt && prompt.tensor.as_ref().map(Tensor::checksum) != prompt_sum {
        return Err(Error::FreezeViolation("fixed prompt embeddings changed".into()));
    }
    let bound_scalars = bound_ids.iter().map(|&i| model.params().param(i).tensor.numel()).sum();
    Ok(TrainOutcome {
        curve,
        evals,
        best_step,
        best: best_metrics,
        optimizer_scalars,
        bound_scalars,
        text_calls: model.text_calls() - calls_before,
        seconds_per_step,
    })
}
