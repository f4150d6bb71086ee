//! Reference adaptation methods: zero-shot, prompt tuning, textual
//! inversion, linear probing and full fine-tuning.

use crate::data::{DatasetSplits, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::losses::diffusion::{generation_loss, to_model_range, ToyDenoiser};
use crate::nn::Binder;
use crate::numeric::{clip_grad_norm, Graph, Optimizer, OptimizerConfig, Rng, Tensor, GRAD_CLIP_NORM};
use crate::tuning::concepts::GAUSSIAN_STD;
use crate::tuning::{record, require_frozen, require_splits, InitScheme, Method, Tuned, TuningConfig, TuningRun};
use crate::vlm::{model_id, train_detection, Prompt, VlmModel};

/// Parameters a linear probe trains.
pub const PROBE_PARAMS: [&str; 4] = ["align.v.w", "align.p.w", "box.fc2.", "mask.fc2."];

/// Class-name prompts on the untouched model.
pub fn zero_shot(model: &VlmModel, splits: &DatasetSplits) -> Result<Tuned> {
    let prompt = Prompt::class_names(&splits.vocabulary);
    let val = evaluate(model, &prompt, &splits.val, None)?;
    let tuned = model.clone();
    tuned.reset_text_calls();
    Ok(Tuned {
        run: TuningRun {
            method: Method::ZeroShot,
            base_checkpoint: model_id(model),
            losses: Default::default(),
            learning_rate: 0.0,
            steps: 0,
            tokens_per_class: 0,
            seed: 0,
            unfrozen_scalars: 0,
            bound_scalars: 0,
            text_calls: 0,
            best_step: 0,
            val,
            curve: Vec::new(),
            seconds_per_step: 0.0,
        },
        model: tuned,
        prompt,
    })
}

/// Learned rows in the token-embedding space of the text encoder.
fn input_vectors(model: &VlmModel, vocab: &Vocabulary, m: usize, cfg: &TuningConfig) -> Result<Tensor> {
    let (k, d) = (vocab.len(), model.config().embed_dim);
    let mut rng = Rng::derived(cfg.seed, 0x1e7);
    let data = match cfg.init {
        InitScheme::Gaussian => rng.normal_vec(k * m * d, 0.0, GAUSSIAN_STD),
        InitScheme::CopyText => {
            let table = &model.params().get("txt.tok")?.tensor;
            (0..k)
                .flat_map(|c| {
                    let toks = vocab.class_tokens(c);
                    (0..m).map(move |j| toks[j % toks.len()]).collect::<Vec<_>>()
                })
                .flat_map(|t| table.data()[t * d..(t + 1) * d].to_vec())
                .collect()
        }
    };
    Tensor::new(vec![k * m, d], data)
}

fn tune_prompt(model: &VlmModel, mut prompt: Prompt, splits: &DatasetSplits, cfg: &TuningConfig, method: Method) -> Result<Tuned> {
    let mut tuned = model.clone();
    tuned.reset_text_calls();
    let outcome = train_detection(
        &mut tuned,
        &mut prompt,
        &splits.train,
        &splits.val,
        &cfg.train_config(),
        true,
        false,
    )?;
    Ok(Tuned {
        run: record(method, model, cfg, outcome),
        model: tuned,
        prompt,
    })
}

/// M learned vectors around each class name, through the frozen text
/// encoder. M = 0 is the zero-shot prompt.
pub fn prompt_tuning(model: &VlmModel, splits: &DatasetSplits, cfg: &TuningConfig) -> Result<Tuned> {
    require_frozen(model)?;
    require_splits(splits)?;
    let m = cfg.tokens_per_class;
    if m == 0 {
        let mut t = zero_shot(model, splits)?;
        t.run.method = Method::PromptTuning;
        return Ok(t);
    }
    let vocab = &splits.vocabulary;
    let prompt = Prompt::prompt_tuning(vocab, m, Some(input_vectors(model, vocab, m, cfg)?))?;
    tune_prompt(model, prompt, splits, cfg, Method::PromptTuning)
}

/// M learned pseudo tokens in place of each class name, through the frozen
/// text encoder, trained with the detection losses.
pub fn textual_inversion(model: &VlmModel, splits: &DatasetSplits, cfg: &TuningConfig) -> Result<Tuned> {
    require_frozen(model)?;
    require_splits(splits)?;
    let vocab = &splits.vocabulary;
    let m = cfg.tokens_per_class;
    let prompt = Prompt::textual_inversion(vocab, m, input_vectors(model, vocab, m.max(1), cfg)?)?;
    tune_prompt(model, prompt, splits, cfg, Method::TextualInversion)
}

/// Generation-mode inversion: M pseudo tokens whose mean conditions a
/// frozen denoiser, fitted to `images` with the noise-prediction loss.
/// Returns the M × cond_dim tokens and the loss curve.
pub fn textual_inversion_generation(
    den: &ToyDenoiser,
    images: &[Vec<f64>],
    tokens: usize,
    cfg: &TuningConfig,
) -> Result<(Tensor, Vec<f64>)> {
    let c = den.config();
    let p = c.pixels();
    if images.is_empty() || images.iter().any(|x| x.len() != p) {
        return Err(Error::InvalidArgument("inversion needs images of the denoiser's size".into()));
    }
    if tokens == 0 {
        return Err(Error::InvalidArgument("inversion needs at least one token".into()));
    }
    let mut frozen = den.params().clone();
    frozen.freeze_all();
    let mut rng = Rng::derived(cfg.seed, 0x9e4);
    let mut tensor = Tensor::new(vec![tokens, c.cond_dim], rng.normal_vec(tokens * c.cond_dim, 0.0, GAUSSIAN_STD))?.with_requires_grad(true);
    let mut opt = Optimizer::new(OptimizerConfig {
        weight_decay: cfg.weight_decay,
        ..OptimizerConfig::adam(cfg.learning_rate)
    })?;
    let t_max = den.schedule().timesteps();
    let mean_row = vec![1.0 / tokens as f64; tokens];
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut x0 = Vec::with_capacity(cfg.batch_size * p);
        let mut ts = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            x0.extend(to_model_range(&images[rng.below(images.len())]));
            ts.push(1 + rng.below(t_max));
        }
        let eps = rng.normal_vec(cfg.batch_size * p, 0.0, 1.0);
        let mut g = Graph::new();
        let mut b = Binder::new(&frozen);
        let v = g.leaf(&tensor);
        let avg = g.constant(1, tokens, mean_row.clone())?;
        let cond = g.matmul(avg, v)?;
        let loss = generation_loss(&mut g, &mut b, den, &x0, cond, &ts, &eps)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        g.backward(loss)?;
        let grad = g.grad(v).map(<[f64]>::to_vec).ok_or_else(|| Error::Backward("inversion embedding received no gradient".into()))?;
        tensor.clear_grad();
        tensor.accumulate_grad(&grad)?;
        let mut list = vec![&mut tensor];
        clip_grad_norm(&mut list, GRAD_CLIP_NORM);
        opt.step(&mut list)?;
        curve.push(value);
    }
    tensor.clear_grad();
    Ok((tensor.with_requires_grad(false), curve))
}

/// Trains only the final alignment projections and the last layers of the
/// box and mask heads.
pub fn linear_probe(model: &VlmModel, splits: &DatasetSplits, cfg: &TuningConfig) -> Result<Tuned> {
    require_splits(splits)?;
    let mut tuned = model.clone();
    tuned.reset_text_calls();
    tuned
        .params_mut()
        .set_trainable_where(|p| PROBE_PARAMS.iter().any(|n| p.name == *n || (n.ends_with('.') && p.name.starts_with(n))));
    let mut prompt = Prompt::class_names(&splits.vocabulary);
    let outcome = train_detection(&mut tuned, &mut prompt, &splits.train, &splits.val, &cfg.train_config(), false, false)?;
    tuned.params_mut().freeze_all();
    Ok(Tuned {
        run: record(Method::LinearProbe, model, cfg, outcome),
        model: tuned,
        prompt,
    })
}

/// Trains every parameter, text encoder included, with class-name prompts.
pub fn full_finetune(model: &VlmModel, splits: &DatasetSplits, cfg: &TuningConfig) -> Result<Tuned> {
    require_splits(splits)?;
    let mut tuned = model.clone();
    tuned.reset_text_calls();
    tuned.params_mut().unfreeze_all();
    let mut prompt = Prompt::class_names(&splits.vocabulary);
    let outcome = train_detection(&mut tuned, &mut prompt, &splits.train, &splits.val, &cfg.train_config(), false, false)?;
    tuned.params_mut().freeze_all();
    Ok(Tuned {
        run: record(Method::FullFinetune, model, cfg, outcome),
        model: tuned,
        prompt,
    })
}
