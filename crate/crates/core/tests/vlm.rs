use cones_core::data::{make_splits, BBox, DatasetConfig, Vocabulary};
use cones_core::nn::{self, Binder, Partition};
use cones_core::numeric::{Graph, Rng, Tensor};
use cones_core::vlm::{load_checkpoint, pretrain_vlm, save_checkpoint, Checkpoint, PretrainConfig, Prompt, VlmConfig, VlmModel};

fn tiny(fusion: bool) -> VlmConfig {
    VlmConfig {
        embed_dim: 8,
        depth: 2,
        heads: 2,
        fusion,
        fusion_layers: 1,
        ..VlmConfig::default()
    }
}

fn image(seed: u64, cfg: &VlmConfig) -> Vec<f64> {
    let mut rng = Rng::new(seed);
    (0..cfg.pixels() * cfg.channels).map(|_| rng.uniform()).collect()
}

/// Classification logits, raw boxes and mask logits for one image.
fn forward(model: &VlmModel, prompt: &Prompt, img: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let params = model.frozen_params();
    let mut b = Binder::new(&params);
    let trunk = model.trunk(&mut g, &mut b, img).unwrap();
    let p = prompt.build(model, &mut g, &mut b, None).unwrap();
    let out = model.heads(&mut g, &mut b, trunk, p, &prompt.spans()).unwrap();
    (g.value(out.logits).to_vec(), g.value(out.boxes).to_vec(), g.value(out.masks).to_vec())
}

#[test]
fn zeroed_output_projections_make_fusion_the_identity() {
    let cfg = tiny(true);
    let mut model = VlmModel::new(cfg.clone(), 3).unwrap();
    for dir in ["i2t", "t2i"] {
        model.params_mut().tensor_mut(&format!("fuse0.{dir}.o.w")).unwrap().data_mut().fill(0.0);
    }
    let mut rng = Rng::new(11);
    let (r, t, d) = (cfg.regions(), 5, cfg.embed_dim);
    let v0 = rng.normal_vec(r * d, 0.0, 1.0);
    let p0 = rng.normal_vec(t * d, 0.0, 1.0);
    let mut g = Graph::new();
    let params = model.frozen_params();
    let mut b = Binder::new(&params);
    let v = g.constant(r, d, v0.clone()).unwrap();
    let p = g.constant(t, d, p0.clone()).unwrap();
    let out = model.deep_fuse(&mut g, &mut b, 0, v, p).unwrap();
    assert_eq!(g.value(out.v), v0.as_slice());
    assert_eq!(g.value(out.p), p0.as_slice());
}

#[test]
fn missing_fusion_layer_is_an_error() {
    let model = VlmModel::new(tiny(false), 0).unwrap();
    let mut g = Graph::new();
    let params = model.frozen_params();
    let mut b = Binder::new(&params);
    let v = g.constant(1, 8, vec![0.0; 8]).unwrap();
    assert!(model.deep_fuse(&mut g, &mut b, 0, v, v).is_err());
}

#[test]
fn single_head_attention_by_hand() {
    let mut g = Graph::new();
    let q = g.constant(1, 2, vec![1.0, 0.0]).unwrap();
    let k = g.constant(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let v = g.constant(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let (ctx, attn) = nn::attend(&mut g, q, k, v, 1).unwrap();
    let s = 1.0 / 2f64.sqrt();
    let w0 = s.exp() / (s.exp() + 1.0);
    let w1 = 1.0 - w0;
    let a = g.value(attn[0]);
    assert!((a[0] - w0).abs() < 1e-12 && (a[1] - w1).abs() < 1e-12);
    let c = g.value(ctx);
    assert!((c[0] - (w0 + 3.0 * w1)).abs() < 1e-12);
    assert!((c[1] - (2.0 * w0 + 4.0 * w1)).abs() < 1e-12);
}

#[test]
fn box_parameterization_round_trips() {
    let model = VlmModel::new(tiny(true), 0).unwrap();
    let ps = model.config().patch_size as f64;
    let mut rng = Rng::new(5);
    for r in 0..model.config().regions() {
        let (cx, cy) = model.cell_center(r);
        for _ in 0..20 {
            let x = cx + rng.uniform_range(-0.9, 0.9) * ps;
            let y = cy + rng.uniform_range(-0.9, 0.9) * ps;
            let w = ps * 8f64.powf(rng.uniform_range(-0.9, 0.9));
            let h = ps * 8f64.powf(rng.uniform_range(-0.9, 0.9));
            let bx = BBox::new(x - w / 2.0, y - h / 2.0, x + w / 2.0, y + h / 2.0);
            let back = model.decode_box(r, model.encode_box(r, &bx).unwrap());
            for (a, b) in bx.to_array().iter().zip(back.to_array()) {
                assert!((a - b).abs() < 1e-9, "region {r}: {bx:?} vs {back:?}");
            }
        }
    }
}

#[test]
fn zero_deltas_give_the_cell_and_saturation_is_bounded() {
    let model = VlmModel::new(tiny(true), 0).unwrap();
    let ps = model.config().patch_size as f64;
    let r = 9;
    let (cx, cy) = model.cell_center(r);
    let b = model.decode_box(r, [0.0; 4]);
    assert_eq!(b.center(), (cx, cy));
    assert!((b.width() - ps).abs() < 1e-12 && (b.height() - ps).abs() < 1e-12);
    assert_eq!(model.region_of(cx, cy), r);
    for u in [[1e4; 4], [-1e4; 4]] {
        let b = model.decode_box(r, u);
        let (x, y) = b.center();
        assert!((x - cx).abs() <= ps && (y - cy).abs() <= ps);
        assert!(b.width() <= 8.0 * ps + 1e-9 && b.width() >= ps / 8.0 - 1e-9);
    }
    let far = BBox::new(0.0, 0.0, 30.0, 30.0);
    assert!(model.encode_box(0, &far).is_err());
}

#[test]
fn zero_mask_logits_paste_to_one_half_inside_the_box() {
    let cfg = tiny(true);
    let model = VlmModel::new(cfg.clone(), 0).unwrap();
    let grid = vec![0.0; cfg.mask_grid * cfg.mask_grid];
    let bx = BBox::new(4.0, 8.0, 12.0, 14.0);
    let logits = model.paste_mask_values(&grid, &bx);
    assert_eq!(logits.len(), cfg.image_size * cfg.image_size);
    let inside = logits.iter().filter(|&&l| 1.0 / (1.0 + (-l).exp()) == 0.5).count();
    assert_eq!(inside, 8 * 6);
    let img = image(1, &cfg);
    let prompt = Prompt::class_names(&Vocabulary::in_domain());
    let (logits, boxes, masks) = forward(&model, &prompt, &img);
    assert_eq!(logits.len(), cfg.regions() * prompt.num_classes());
    assert_eq!(boxes.len(), cfg.regions() * 4);
    assert_eq!(masks.len(), cfg.regions() * cfg.mask_grid * cfg.mask_grid);
}

#[test]
fn same_seed_same_model_and_outputs() {
    let cfg = tiny(true);
    let a = VlmModel::new(cfg.clone(), 42).unwrap();
    let b = VlmModel::new(cfg.clone(), 42).unwrap();
    let c = VlmModel::new(cfg.clone(), 43).unwrap();
    assert_eq!(a.params().checksums(), b.params().checksums());
    assert_ne!(a.params().checksums(), c.params().checksums());
    let prompt = Prompt::class_names(&Vocabulary::in_domain());
    let img = image(2, &cfg);
    assert_eq!(forward(&a, &prompt, &img), forward(&b, &prompt, &img));
}

#[test]
fn class_order_permutes_logit_columns() {
    let cfg = VlmConfig {
        text_positional: false,
        ..tiny(true)
    };
    let model = VlmModel::new(cfg.clone(), 4).unwrap();
    let vocab = Vocabulary::in_domain();
    let mut classes = vocab.classes().to_vec();
    classes.reverse();
    let reversed = Vocabulary::new(classes).unwrap();
    let k = vocab.len();
    let img = image(3, &cfg);
    let mut rng = Rng::new(8);
    let (m, d) = (2, cfg.embed_dim);
    let data = rng.normal_vec(k * m * d, 0.0, 1.0);
    let block = m * d;
    let flipped: Vec<f64> = (0..k).rev().flat_map(|c| data[c * block..(c + 1) * block].to_vec()).collect();
    let pairs = [
        (Prompt::class_names(&vocab), Prompt::class_names(&reversed)),
        (
            Prompt::concepts(&vocab, m, Tensor::new(vec![k * m, d], data.clone()).unwrap()).unwrap(),
            Prompt::concepts(&reversed, m, Tensor::new(vec![k * m, d], flipped).unwrap()).unwrap(),
        ),
    ];
    for (fwd, rev) in pairs {
        let (a, ..) = forward(&model, &fwd, &img);
        let (b, ..) = forward(&model, &rev, &img);
        for r in 0..cfg.regions() {
            for c in 0..k {
                let x = a[r * k + c];
                let y = b[r * k + (k - 1 - c)];
                assert!((x - y).abs() < 1e-9, "region {r} class {c}: {x} vs {y}");
            }
        }
    }
}

#[test]
fn parameter_partitions_add_up() {
    for fusion in [true, false] {
        let model = VlmModel::new(tiny(fusion), 0).unwrap();
        let with = model.count_parameters(true);
        let without = model.count_parameters(false);
        assert_eq!(with.image + with.text + with.fusion + with.heads, with.total);
        assert_eq!(with.total, model.params().total());
        assert_eq!(without.total, with.total - with.text);
        assert_eq!(without.text, 0);
        assert_eq!(with.total_without_text, without.total);
        assert_eq!(with.fusion == 0, !fusion);
        assert!(with.text > 0 && with.image > 0 && with.heads > 0);
        let listed: usize = [Partition::Image, Partition::Text, Partition::Fusion, Partition::Heads]
            .iter()
            .map(|&p| model.params().count(p))
            .sum();
        assert_eq!(listed, model.params().total());
    }
}

fn tiny_splits() -> cones_core::data::DatasetSplits {
    make_splits(&DatasetConfig {
        train: 8,
        val: 4,
        test: 4,
        ..DatasetConfig::in_domain(0)
    })
    .unwrap()
}

#[test]
fn zero_step_pretraining_returns_the_initial_model() {
    let cfg = tiny(true);
    let splits = tiny_splits();
    let pcfg = PretrainConfig {
        steps: 0,
        seed: 6,
        ..PretrainConfig::default()
    };
    let (ck, _) = pretrain_vlm(&cfg, &splits, &pcfg).unwrap();
    let init = VlmModel::new(cfg, 6).unwrap();
    assert_eq!(ck.model.params().checksums(), init.params().checksums());
    assert_eq!(ck.model.log_tau(), init.log_tau());
}

#[test]
fn out_of_domain_pretraining_is_rejected() {
    let splits = make_splits(&DatasetConfig {
        train: 4,
        val: 2,
        test: 2,
        ..DatasetConfig::out_domain(0)
    })
    .unwrap();
    assert!(pretrain_vlm(&tiny(true), &splits, &PretrainConfig::default()).is_err());
}

#[test]
fn checkpoint_round_trip_keeps_forward_bit_identical() {
    let cfg = tiny(true);
    let splits = tiny_splits();
    let pcfg = PretrainConfig {
        steps: 5,
        eval_every: 5,
        warmup_steps: 1,
        ..PretrainConfig::default()
    };
    let (ck, _) = pretrain_vlm(&cfg, &splits, &pcfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&ck, dir.path()).unwrap();
    let back: Checkpoint = load_checkpoint(dir.path()).unwrap();
    let prompt = Prompt::class_names(&splits.vocabulary);
    for s in 0..3 {
        let img = &splits.test[s].image;
        assert_eq!(forward(&ck.model, &prompt, img), forward(&back.model, &prompt, img));
    }
    assert_eq!(back.model.log_tau(), ck.model.log_tau());
}
