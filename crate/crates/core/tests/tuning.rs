use std::sync::OnceLock;

use cones_core::data::{make_splits, DatasetConfig, DatasetSplits};
use cones_core::eval::detect::region_outputs;
use cones_core::losses::diffusion::{mean_color, sample_generation, train_denoiser, DenoiserConfig, ToyDenoiser};
use cones_core::losses::{combine_losses, LossComponents, LossSelection};
use cones_core::nn::{Binder, Partition};
use cones_core::numeric::{Graph, Rng};
use cones_core::tuning::{
    finetune_with_embeddings, full_finetune, init_concept_embeddings, linear_probe, prompt_tuning, search_concept_embeddings,
    textual_inversion_generation, zero_shot, InitScheme, TuningConfig,
};
use cones_core::vlm::train::{scene_loss, scene_targets};
use cones_core::vlm::{pretrain_vlm, PretrainConfig, VlmConfig, VlmModel};
use cones_core::Error;

struct Fixture {
    model: VlmModel,
    out: DatasetSplits,
}

fn small_config() -> VlmConfig {
    VlmConfig {
        embed_dim: 16,
        depth: 2,
        heads: 2,
        fusion_layers: 1,
        ..VlmConfig::default()
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let pre = make_splits(&DatasetConfig {
            train: 200,
            val: 20,
            test: 20,
            ..DatasetConfig::in_domain(0)
        })
        .unwrap();
        let pcfg = PretrainConfig {
            steps: 400,
            eval_every: 100,
            ..PretrainConfig::default()
        };
        let (ck, _) = pretrain_vlm(&small_config(), &pre, &pcfg).unwrap();
        let out = make_splits(&DatasetConfig {
            train: 40,
            val: 10,
            test: 20,
            ..DatasetConfig::out_domain(0)
        })
        .unwrap();
        Fixture { model: ck.model, out }
    })
}

fn quick(steps: usize) -> TuningConfig {
    TuningConfig {
        steps,
        eval_every: steps.max(1),
        ..TuningConfig::default()
    }
}

#[test]
fn stage_one_touches_only_the_concepts() {
    let f = fixture();
    let before = f.model.params().checksums();
    let mut rng = Rng::new(1);
    let init = init_concept_embeddings(&f.model, &f.out.vocabulary, 3, InitScheme::Gaussian, &mut rng).unwrap();
    let tuned = search_concept_embeddings(&f.model, init, &f.out, &quick(30)).unwrap();
    assert_eq!(tuned.model.params().checksums(), before);
    assert_eq!(tuned.model.log_tau().to_bits(), f.model.log_tau().to_bits());
    assert_eq!(tuned.run.text_calls, 0);
    assert_eq!(tuned.model.text_calls(), 0);
    let k = f.out.vocabulary.len();
    assert_eq!(tuned.run.unfrozen_scalars, k * 3 * small_config().embed_dim);
}

#[test]
fn stage_one_refuses_a_trainable_model() {
    let f = fixture();
    let mut model = f.model.clone();
    model.params_mut().unfreeze_all();
    let init = init_concept_embeddings(&model, &f.out.vocabulary, 3, InitScheme::Gaussian, &mut Rng::new(0)).unwrap();
    let err = search_concept_embeddings(&model, init, &f.out, &quick(2)).unwrap_err();
    assert!(matches!(err, Error::FreezeViolation(_)), "{err}");
}

#[test]
fn stage_two_keeps_concepts_and_leaves_out_the_text_encoder() {
    let f = fixture();
    let init = init_concept_embeddings(&f.model, &f.out.vocabulary, 3, InitScheme::Gaussian, &mut Rng::new(2)).unwrap();
    let s1 = search_concept_embeddings(&f.model, init, &f.out, &quick(20)).unwrap();
    let concepts = s1.prompt.tensor.as_ref().unwrap().checksum();
    let cfg = TuningConfig {
        learning_rate: 1e-3,
        select_best: false,
        ..quick(10)
    };
    let s2 = finetune_with_embeddings(&f.model, &s1.prompt, &f.out, &cfg).unwrap();
    assert_eq!(s2.prompt.tensor.as_ref().unwrap().checksum(), concepts);
    let p = f.model.params();
    assert_eq!(s2.run.unfrozen_scalars, p.total() - p.count(Partition::Text));
    assert_eq!(s2.run.text_calls, 0);
    let after = s2.model.params().checksums();
    let before = p.checksums();
    assert_eq!(after[&Partition::Text], before[&Partition::Text]);
    assert_ne!(after[&Partition::Image], before[&Partition::Image]);
}

/// Share of object regions whose arg-max class is the object's label.
fn object_region_accuracy(model: &VlmModel, prompt: &cones_core::vlm::Prompt, splits: &DatasetSplits) -> f64 {
    let k = splits.vocabulary.len();
    let outs = region_outputs(model, prompt, &splits.train, None).unwrap();
    let (mut right, mut total) = (0, 0);
    for (scene, out) in splits.train.iter().zip(&outs) {
        let t = scene_targets(model, scene, k).unwrap();
        for (&r, &label) in t.regions.iter().zip(&scene.labels) {
            let row = &out.logits[r * k..(r + 1) * k];
            let best = (0..k).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            right += (best == label) as usize;
            total += 1;
        }
    }
    right as f64 / total as f64
}

#[test]
fn single_scene_overfit_with_classification_only() {
    let f = fixture();
    let one = DatasetSplits {
        train: f.out.train[..1].to_vec(),
        val: f.out.train[..1].to_vec(),
        ..f.out.clone()
    };
    let init = init_concept_embeddings(&f.model, &one.vocabulary, 3, InitScheme::Gaussian, &mut Rng::new(3)).unwrap();
    let cfg = TuningConfig {
        learning_rate: 1e-2,
        batch_size: 1,
        losses: LossSelection {
            cls: true,
            ..Default::default()
        },
        ..quick(500)
    };
    let tuned = search_concept_embeddings(&f.model, init, &one, &cfg).unwrap();
    assert_eq!(object_region_accuracy(&tuned.model, &tuned.prompt, &one), 1.0);
}

#[test]
fn prompt_tuning_without_vectors_is_zero_shot() {
    let f = fixture();
    let zs = zero_shot(&f.model, &f.out).unwrap();
    let cfg = TuningConfig {
        tokens_per_class: 0,
        ..quick(5)
    };
    let pt = prompt_tuning(&f.model, &f.out, &cfg).unwrap();
    assert_eq!(pt.prompt, zs.prompt);
    assert_eq!(pt.evaluate(&f.out.test).unwrap(), zs.evaluate(&f.out.test).unwrap());
}

#[test]
fn head_and_full_tuning_beat_zero_shot_on_new_classes() {
    let f = fixture();
    let zs = zero_shot(&f.model, &f.out).unwrap().evaluate(&f.out.test).unwrap();
    let cfg = TuningConfig {
        learning_rate: 3e-3,
        ..quick(300)
    };
    let lp = linear_probe(&f.model, &f.out, &cfg).unwrap();
    let ft = full_finetune(&f.model, &f.out, &cfg).unwrap();
    let p = f.model.params();
    assert!(lp.run.unfrozen_scalars < p.total() - p.count(Partition::Text));
    assert!(ft.run.unfrozen_scalars >= p.total());
    for (name, t) in [("linear", lp), ("full", ft)] {
        let m = t.evaluate(&f.out.test).unwrap();
        assert!(m.ap_box > zs.ap_box, "{name}: {} vs zero-shot {}", m.ap_box, zs.ap_box);
    }
}

#[test]
fn combined_loss_is_the_sum_of_its_parts() {
    let f = fixture();
    let model = &f.model;
    let prompt = cones_core::vlm::Prompt::class_names(&f.out.vocabulary);
    let spans = prompt.spans();
    let scene = &f.out.train[0];
    let t = scene_targets(model, scene, f.out.vocabulary.len()).unwrap();
    let params = model.frozen_params();
    let eval = |sel: LossSelection| {
        let mut g = Graph::new();
        let mut b = Binder::new(&params);
        let trunk = model.trunk(&mut g, &mut b, &scene.image).unwrap();
        let p = prompt.build(model, &mut g, &mut b, None).unwrap();
        let (l, c, _) = scene_loss(model, &mut g, &mut b, trunk, p, &spans, &t, &sel).unwrap();
        (g.scalar(l), c)
    };
    let (all, parts) = eval(LossSelection::DETECTION);
    let mut sum = 0.0;
    for single in LossSelection::detection_combinations().into_iter().take(3) {
        sum += eval(single).0;
    }
    assert!((all - sum).abs() < 1e-9 * all.abs().max(1.0), "{all} vs {sum}");
    assert!((combine_losses(&LossSelection::DETECTION, &parts) - all).abs() < 1e-9);
    let none = LossComponents::default();
    assert_eq!(combine_losses(&LossSelection::DETECTION, &none), 0.0);
}

#[test]
fn inverted_embedding_moves_samples_toward_the_concept() {
    let dc = DenoiserConfig::default();
    let colors = [[0.9, 0.15, 0.15], [0.15, 0.3, 0.95]];
    let mut rng = Rng::new(4);
    let conds: Vec<Vec<f64>> = colors.iter().map(|_| rng.normal_vec(dc.cond_dim, 0.0, 1.0)).collect();
    let mut images = Vec::new();
    let mut image_conds = Vec::new();
    for (c, cond) in colors.iter().zip(&conds) {
        for _ in 0..32 {
            images.push((0..dc.side * dc.side).flat_map(|_| c.map(|v| (v + rng.normal(0.0, 0.02)).clamp(0.0, 1.0))).collect::<Vec<f64>>());
            image_conds.push(cond.clone());
        }
    }
    let mut den = ToyDenoiser::new(dc.clone(), 4).unwrap();
    train_denoiser(&mut den, &images, &image_conds, 1000, 32, 2e-3, &mut rng).unwrap();
    let red = &images[..32];
    let mut distances = Vec::new();
    for steps in [1, 30, 100, 300] {
        let cfg = TuningConfig {
            steps,
            batch_size: 32,
            learning_rate: 1e-2,
            seed: 9,
            ..TuningConfig::default()
        };
        let (tokens, _) = textual_inversion_generation(&den, red, 3, &cfg).unwrap();
        let m = tokens.rows();
        let cond: Vec<f64> = (0..dc.cond_dim).map(|j| (0..m).map(|i| tokens.data()[i * dc.cond_dim + j]).sum::<f64>() / m as f64).collect();
        let samples = sample_generation(&den, &cond, 16, &mut Rng::new(10)).unwrap();
        let mean: Vec<f64> = (0..3).map(|ch| samples.iter().map(|s| mean_color(s, 3)[ch]).sum::<f64>() / samples.len() as f64).collect();
        let d = mean.iter().zip(colors[0]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        distances.push(d);
    }
    assert!(distances.windows(2).all(|w| w[1] < w[0]), "{distances:?}");
    assert!(*distances.last().unwrap() < 0.15, "{distances:?}");
}
