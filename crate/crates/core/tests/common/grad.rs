//! Central finite-difference checks of every differentiable operation. Each
//! check returns the worst relative error over its instances.

use cones_core::data::BBox;
use cones_core::losses::detection::{box_loss_node, focal_loss_node, mask_loss_node};
use cones_core::losses::diffusion::{generation_loss, DenoiserConfig, ToyDenoiser};
use cones_core::nn::{Binder, ParamStore};
use cones_core::numeric::{Graph, Rng, Tensor, Var};
use cones_core::vlm::{VlmConfig, VlmModel};

pub const INSTANCES: usize = 100;
pub const TOL: f64 = 1e-4;
const H: f64 = 1e-5;

type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> Var + 'a;

/// Max over inputs of ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖).
fn rel_error(inputs: &[(usize, usize, Vec<f64>)], build: &Build) -> f64 {
    let eval = |vals: &[Vec<f64>], grad: bool| {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(vals)
            .map(|((r, c, _), v)| g.leaf(&Tensor::new(vec![*r, *c], v.clone()).unwrap().with_requires_grad(grad)))
            .collect();
        let out = build(&mut g, &vars);
        let value = g.scalar(out);
        let grads = if grad {
            g.backward(out).unwrap();
            vars.iter()
                .map(|v| g.grad(*v).map(|x| x.to_vec()).unwrap_or_else(|| vec![0.0; g.value(*v).len()]))
                .collect()
        } else {
            Vec::new()
        };
        (value, grads)
    };
    let base: Vec<Vec<f64>> = inputs.iter().map(|(_, _, v)| v.clone()).collect();
    let (_, analytic) = eval(&base, true);
    let mut worst: f64 = 0.0;
    for (k, a) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.len()];
        for j in 0..a.len() {
            let mut plus = base.clone();
            plus[k][j] += H;
            let mut minus = base.clone();
            minus[k][j] -= H;
            numeric[j] = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * H);
        }
        let diff = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(numeric.iter().map(|x| x * x).sum::<f64>().sqrt());
        if scale > 1e-10 {
            worst = worst.max(diff / scale);
        }
    }
    worst
}

fn rand_mat(rng: &mut Rng, r: usize, c: usize) -> (usize, usize, Vec<f64>) {
    (r, c, rng.normal_vec(r * c, 0.0, 1.0))
}

fn dims(rng: &mut Rng) -> (usize, usize) {
    (1 + rng.below(4), 1 + rng.below(4))
}

/// Reduces an arbitrary node to a scalar with fixed random weights so every
/// output element matters.
fn weighted(g: &mut Graph, v: Var, seed: u64) -> Var {
    let (r, c) = g.shape(v);
    let w = Rng::new(seed).normal_vec(r * c, 0.0, 1.0);
    let w = g.constant(r, c, w).unwrap();
    let p = g.mul(v, w).unwrap();
    g.sum(p)
}

fn run(name: &str, mut make: impl FnMut(&mut Rng) -> (Vec<(usize, usize, Vec<f64>)>, Box<Build<'static>>)) -> f64 {
    let mut rng = Rng::new(0x9c0 ^ name.len() as u64);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let (inputs, build) = make(&mut rng);
        worst = worst.max(rel_error(&inputs, build.as_ref()));
    }
    worst
}

macro_rules! unary {
    ($test:ident, $body:expr) => {
        pub fn $test() -> f64 {
            run(stringify!($test), |rng| {
                let (r, c) = dims(rng);
                let s = rng.next_u64();
                let f: fn(&mut Graph, Var) -> Var = $body;
                (vec![rand_mat(rng, r, c)], Box::new(move |g, v| {
                    let y = f(g, v[0]);
                    weighted(g, y, s)
                }))
            })
        }
    };
}

unary!(transpose, |g, a| g.transpose(a));
unary!(scale, |g, a| g.scale(a, -1.7));
unary!(add_scalar, |g, a| g.add_scalar(a, 0.3));
unary!(exp, |g, a| g.exp(a));
unary!(sigmoid, |g, a| g.sigmoid(a));
unary!(gelu, |g, a| g.gelu(a));
unary!(softmax, |g, a| g.softmax(a));
unary!(normalize_rows, |g, a| g.normalize_rows(a).unwrap());
unary!(sum, |g, a| g.sum(a));
unary!(mean, |g, a| g.mean(a));

pub fn layer_norm() -> f64 {
    run("layer_norm", |rng| {
        let r = 1 + rng.below(4);
        let c = 2 + rng.below(4);
        let s = rng.next_u64();
        (vec![rand_mat(rng, r, c)], Box::new(move |g, v| {
            let y = g.layer_norm(v[0]);
            weighted(g, y, s)
        }))
    })
}

macro_rules! binary_same {
    ($test:ident, $op:ident) => {
        pub fn $test() -> f64 {
            run(stringify!($test), |rng| {
                let (r, c) = dims(rng);
                let s = rng.next_u64();
                (vec![rand_mat(rng, r, c), rand_mat(rng, r, c)], Box::new(move |g, v| {
                    let y = g.$op(v[0], v[1]).unwrap();
                    weighted(g, y, s)
                }))
            })
        }
    };
}

binary_same!(add, add);
binary_same!(sub, sub);
binary_same!(mul, mul);
binary_same!(mse, mse);

pub fn matmul() -> f64 {
    run("matmul", |rng| {
        let (m, k) = dims(rng);
        let n = 1 + rng.below(4);
        let s = rng.next_u64();
        (vec![rand_mat(rng, m, k), rand_mat(rng, k, n)], Box::new(move |g, v| {
            let y = g.matmul(v[0], v[1]).unwrap();
            weighted(g, y, s)
        }))
    })
}

pub fn row_broadcasts() -> f64 {
    run("row_broadcasts", |rng| {
        let (r, c) = dims(rng);
        let s = rng.next_u64();
        (vec![rand_mat(rng, r, c), rand_mat(rng, 1, c), rand_mat(rng, 1, c)], Box::new(move |g, v| {
            let y = g.add_row(v[0], v[1]).unwrap();
            let y = g.mul_row(y, v[2]).unwrap();
            weighted(g, y, s)
        }))
    })
}

pub fn scale_by() -> f64 {
    run("scale_by", |rng| {
        let (r, c) = dims(rng);
        let s = rng.next_u64();
        (vec![rand_mat(rng, r, c), rand_mat(rng, 1, 1)], Box::new(move |g, v| {
            let y = g.scale_by(v[0], v[1]).unwrap();
            weighted(g, y, s)
        }))
    })
}

pub fn cross_entropy() -> f64 {
    run("cross_entropy", |rng| {
        let (r, c) = dims(rng);
        let targets: Vec<usize> = (0..r).map(|_| rng.below(c)).collect();
        (vec![rand_mat(rng, r, c)], Box::new(move |g, v| g.cross_entropy(v[0], &targets).unwrap()))
    })
}

pub fn embedding_and_row_gathers() -> f64 {
    run("embedding_and_row_gathers", |rng| {
        let (r, c) = dims(rng);
        let ids: Vec<usize> = (0..1 + rng.below(5)).map(|_| rng.below(r)).collect();
        let s = rng.next_u64();
        (vec![rand_mat(rng, r, c)], Box::new(move |g, v| {
            let e = g.embedding(v[0], &ids).unwrap();
            let e2 = g.gather_rows(v[0], &ids).unwrap();
            let y = g.add(e, e2).unwrap();
            weighted(g, y, s)
        }))
    })
}

pub fn concat_and_slice() -> f64 {
    run("concat_and_slice", |rng| {
        let (r, c) = dims(rng);
        let r2 = 1 + rng.below(3);
        let c2 = 1 + rng.below(3);
        let s = rng.next_u64();
        (
            vec![rand_mat(rng, r, c), rand_mat(rng, r2, c), rand_mat(rng, r, c2)],
            Box::new(move |g, v| {
                let rows = g.concat_rows(&[v[0], v[1]]).unwrap();
                let rows = g.slice_rows(rows, 1, r + r2 - 1).unwrap();
                let cols = g.concat_cols(&[v[0], v[2]]).unwrap();
                let cols = g.slice_cols(cols, 1, c + c2 - 1).unwrap();
                let a = weighted(g, rows, s);
                let b = weighted(g, cols, s + 1);
                g.add(a, b).unwrap()
            }),
        )
    })
}

pub fn gather_cols() -> f64 {
    run("gather_cols", |rng| {
        let (r, c) = dims(rng);
        let idx: Vec<usize> = (0..1 + rng.below(6)).map(|_| rng.below(c)).collect();
        let s = rng.next_u64();
        (vec![rand_mat(rng, r, c)], Box::new(move |g, v| {
            let y = g.gather_cols(v[0], &idx).unwrap();
            weighted(g, y, s)
        }))
    })
}

pub fn classification_loss() -> f64 {
    run("classification_loss", |rng| {
        let (r, c) = (2 + rng.below(6), 1 + rng.below(4));
        let targets: Vec<f64> = (0..r * c).map(|_| if rng.uniform() < 0.2 { 1.0 } else { 0.0 }).collect();
        (vec![rand_mat(rng, r, c)], Box::new(move |g, v| focal_loss_node(g, v[0], &targets).unwrap()))
    })
}

fn random_box(rng: &mut Rng) -> BBox {
    let x = rng.uniform_range(0.0, 20.0);
    let y = rng.uniform_range(0.0, 20.0);
    BBox::new(x, y, x + rng.uniform_range(2.0, 12.0), y + rng.uniform_range(2.0, 12.0))
}

pub fn box_loss() -> f64 {
    run("box_loss", |rng| {
        let n = 1 + rng.below(3);
        let gt: Vec<BBox> = (0..n).map(|_| random_box(rng)).collect();
        let pred: Vec<f64> = (0..n)
            .flat_map(|i| {
                let b = gt[i].to_array();
                let jitter: Vec<f64> = (0..4).map(|_| rng.normal(0.0, 2.0)).collect();
                let x0 = b[0] + jitter[0];
                let y0 = b[1] + jitter[1];
                [x0, y0, x0.max(b[2] + jitter[2]) + 0.5, y0.max(b[3] + jitter[3]) + 0.5]
            })
            .collect();
        (vec![(n, 4, pred)], Box::new(move |g, v| box_loss_node(g, v[0], &gt, 32.0).unwrap()))
    })
}

pub fn mask_loss() -> f64 {
    run("mask_loss", |rng| {
        let (n, p) = (1 + rng.below(3), 4 + rng.below(12));
        let targets: Vec<f64> = (0..n * p).map(|_| if rng.uniform() < 0.4 { 1.0 } else { 0.0 }).collect();
        (vec![rand_mat(rng, n, p)], Box::new(move |g, v| mask_loss_node(g, v[0], &targets).unwrap()))
    })
}

pub fn generation_loss_wrt_condition() -> f64 {
    let cfg = DenoiserConfig {
        side: 2,
        hidden: 8,
        time_dim: 4,
        cond_dim: 3,
        ..DenoiserConfig::default()
    };
    let den = ToyDenoiser::new(cfg, 5).unwrap();
    let mut frozen: ParamStore = den.params().clone();
    frozen.freeze_all();
    let den: &'static ToyDenoiser = Box::leak(Box::new(den));
    let frozen: &'static ParamStore = Box::leak(Box::new(frozen));
    run("generation_loss", |rng| {
        let b = 1 + rng.below(3);
        let x0 = rng.normal_vec(b * 12, 0.0, 0.5);
        let eps = rng.normal_vec(b * 12, 0.0, 1.0);
        let ts: Vec<usize> = (0..b).map(|_| 1 + rng.below(100)).collect();
        (vec![rand_mat(rng, 1, 3)], Box::new(move |g, v| {
            let mut bd = Binder::new(frozen);
            generation_loss(g, &mut bd, den, &x0, v[0], &ts, &eps).unwrap()
        }))
    })
}

pub fn box_decoding_chain() -> f64 {
    let model: &'static VlmModel = Box::leak(Box::new(
        VlmModel::new(
            VlmConfig {
                embed_dim: 8,
                depth: 1,
                heads: 1,
                fusion_layers: 1,
                ..VlmConfig::default()
            },
            0,
        )
        .unwrap(),
    ));
    run("box_decoding_chain", |rng| {
        let regions = vec![rng.below(64)];
        let (cx, cy) = model.cell_center(regions[0]);
        let gt = vec![BBox::new(cx - 5.0, cy - 4.0, cx + 6.0, cy + 3.0)];
        (vec![(64, 4, rng.normal_vec(256, 0.0, 0.5))], Box::new(move |g, v| {
            let pred = model.decode_boxes_node(g, v[0], &regions).unwrap();
            box_loss_node(g, pred, &gt, 32.0).unwrap()
        }))
    })
}

pub fn attention_block() -> f64 {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(1);
    cones_core::nn::add_block(&mut store, &mut rng, "b", cones_core::nn::Partition::Image, 4, 2).unwrap();
    store.freeze_all();
    let store: &'static ParamStore = Box::leak(Box::new(store));
    run("attention_block", |rng| {
        let t = 1 + rng.below(4);
        let s = rng.next_u64();
        (vec![rand_mat(rng, t, 4)], Box::new(move |g, v| {
            let mut b = Binder::new(store);
            let y = cones_core::nn::block(g, &mut b, "b", v[0], 2).unwrap();
            weighted(g, y, s)
        }))
    })
}

pub fn full_detection_loss() -> f64 {
    use cones_core::data::{generate_scene, SceneConfig, Vocabulary, Domain};
    use cones_core::losses::LossSelection;
    use cones_core::vlm::train::{scene_loss, scene_targets};
    use cones_core::vlm::Prompt;

    let mut model = VlmModel::new(
        VlmConfig {
            embed_dim: 8,
            depth: 2,
            heads: 2,
            fusion_layers: 1,
            ..VlmConfig::default()
        },
        3,
    )
    .unwrap();
    // Non-zero box head so the box path carries gradient.
    let mut rng = Rng::new(4);
    for v in model.params_mut().tensor_mut("box.fc2.w").unwrap().data_mut() {
        *v = rng.normal(0.0, 0.3);
    }
    model.params_mut().freeze_all();
    let vocab = Vocabulary::for_domain(Domain::InDomain);
    let prompt = Prompt::class_names(&vocab);
    let spans = prompt.spans();
    let model: &'static VlmModel = Box::leak(Box::new(model));
    let frozen: &'static ParamStore = Box::leak(Box::new(model.frozen_params()));
    let spans: &'static [cones_core::vlm::Span] = Box::leak(spans.into_boxed_slice());
    let mut seed = 0u64;
    let instances: Vec<_> = (0..20)
        .map(|_| loop {
            seed += 1;
            let s = generate_scene(&SceneConfig::default(), &vocab, None, seed).unwrap();
            if let Ok(t) = scene_targets(model, &s, spans.len()) {
                break t;
            }
        })
        .collect();
    let prompt_len = prompt.len();
    let mut next = instances.into_iter();
    let mut worst: f64 = 0.0;
    let mut rng = Rng::new(9);
    for t in next.by_ref() {
        let inputs = vec![rand_mat(&mut rng, 64, 8), rand_mat(&mut rng, prompt_len, 8)];
        let build = move |g: &mut Graph, v: &[Var]| {
            let mut b = Binder::new(frozen);
            scene_loss(model, g, &mut b, v[0], v[1], spans, &t, &LossSelection::DETECTION).unwrap().0
        };
        worst = worst.max(rel_error(&inputs, &build));
    }
    worst
}

pub const CASES: &[(&str, fn() -> f64)] = &[
    ("transpose", transpose),
    ("scale", scale),
    ("add_scalar", add_scalar),
    ("exp", exp),
    ("sigmoid", sigmoid),
    ("gelu", gelu),
    ("softmax", softmax),
    ("normalize_rows", normalize_rows),
    ("sum", sum),
    ("mean", mean),
    ("add", add),
    ("sub", sub),
    ("mul", mul),
    ("mse", mse),
    ("layer_norm", layer_norm),
    ("matmul", matmul),
    ("row_broadcasts", row_broadcasts),
    ("scale_by", scale_by),
    ("cross_entropy", cross_entropy),
    ("embedding_and_row_gathers", embedding_and_row_gathers),
    ("concat_and_slice", concat_and_slice),
    ("gather_cols", gather_cols),
    ("classification_loss", classification_loss),
    ("box_loss", box_loss),
    ("mask_loss", mask_loss),
    ("generation_loss_wrt_condition", generation_loss_wrt_condition),
    ("box_decoding_chain", box_decoding_chain),
    ("attention_block", attention_block),
    ("full_detection_loss", full_detection_loss),
];
