use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::data::BBox;
use crate::error::{Error, Result};
use crate::nn::{self, Binder, ParamStore, Partition};
use crate::numeric::{Graph, Rng, Tensor, Var};
use crate::vlm::config::VlmConfig;

/// Initial value of the shared classification bias, σ⁻¹(0.01).
pub const CLS_BIAS_INIT: f64 = -4.59511985013459;
/// Logit of pixels outside a region's box.
pub const MASK_OUTSIDE_LOGIT: f64 = -20.0;
/// Box side lengths are `patch · 8^δ` with δ ∈ (-1, 1).
const BOX_SCALE_LOG: f64 = 2.0794415416798357; // ln 8

/// Contiguous rows of the prompt sequence that belong to one class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

/// Result of one cross-attention fusion layer.
#[derive(Debug, Clone, Copy)]
pub struct FusionOutput {
    pub v: Var,
    pub p: Var,
    pub v_i2t: Var,
    pub p_t2i: Var,
}

/// Per-region outputs of the task heads.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutputs {
    /// R × K classification logits.
    pub logits: Var,
    /// R × 4 raw box parameters (pre-sigmoid).
    pub boxes: Var,
    /// R × S² mask logits on a grid spanning each region's box.
    pub masks: Var,
    pub v: Var,
    pub p: Var,
    pub log_tau: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub image: usize,
    pub text: usize,
    pub fusion: usize,
    pub heads: usize,
    pub total: usize,
    pub total_without_text: usize,
}

/// Image encoder, text encoder, fusion stack and task heads.
#[derive(Debug)]
pub struct VlmModel {
    config: VlmConfig,
    seed: u64,
    params: ParamStore,
    log_tau: Tensor,
    text_calls: AtomicU64,
}

impl Clone for VlmModel {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            seed: self.seed,
            params: self.params.clone(),
            log_tau: self.log_tau.clone(),
            text_calls: AtomicU64::new(self.text_calls()),
        }
    }
}

fn block_name(side: &str, i: usize) -> String {
    format!("{side}.block{i}")
}


impl VlmModel {
    pub fn new(config: VlmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::derived(seed, 0x71a);
        let mut p = ParamStore::new();
        let (d, r) = (config.embed_dim, config.regions());
        let mr = config.mlp_ratio;

        nn::add_linear(&mut p, &mut rng, "img.patch", Partition::Image, config.patch_dim(), d, true)?;
        p.add("img.pos", Partition::Image, nn::normal_tensor(&mut rng, r, d, 0.02))?;
        for i in 0..config.depth {
            nn::add_block(&mut p, &mut rng, &block_name("img", i), Partition::Image, d, mr)?;
        }
        nn::add_layer_norm(&mut p, "img.ln_f", Partition::Image, d)?;

        p.add("txt.tok", Partition::Text, nn::normal_tensor(&mut rng, config.vocab_size, d, 1.0))?;
        if config.text_positional {
            p.add("txt.pos", Partition::Text, nn::normal_tensor(&mut rng, config.max_text_len, d, 0.02))?;
        }
        for i in 0..config.depth {
            nn::add_block(&mut p, &mut rng, &block_name("txt", i), Partition::Text, d, mr)?;
        }
        nn::add_layer_norm(&mut p, "txt.ln_f", Partition::Text, d)?;

        for f in 0..config.active_fusion_layers() {
            for dir in ["i2t", "t2i"] {
                for n in ["q", "k", "v"] {
                    nn::add_linear(&mut p, &mut rng, &format!("fuse{f}.{dir}.{n}"), Partition::Fusion, d, d, false)?;
                }
                p.add(&format!("fuse{f}.{dir}.o.w"), Partition::Fusion, nn::normal_tensor(&mut rng, d, d, 0.02))?;
            }
        }

        nn::add_linear(&mut p, &mut rng, "align.v", Partition::Heads, d, d, false)?;
        nn::add_linear(&mut p, &mut rng, "align.p", Partition::Heads, d, d, false)?;
        p.add("cls_bias", Partition::Heads, Tensor::full(&[1, 1], CLS_BIAS_INIT))?;
        nn::add_linear(&mut p, &mut rng, "box.fc1", Partition::Heads, d, d, true)?;
        p.add("box.fc2.w", Partition::Heads, Tensor::zeros(&[d, 4]))?;
        p.add("box.fc2.b", Partition::Heads, Tensor::zeros(&[1, 4]))?;
        nn::add_linear(&mut p, &mut rng, "mask.fc1", Partition::Heads, d, d, true)?;
        nn::add_linear(&mut p, &mut rng, "mask.fc2", Partition::Heads, d, config.mask_grid * config.mask_grid, true)?;

        let log_tau = Tensor::full(&[1, 1], config.tau_init.ln()).with_requires_grad(false);
        Ok(Self {
            config,
            seed,
            params: p,
            log_tau,
            text_calls: AtomicU64::new(0),
        })
    }

    pub(crate) fn from_parts(config: VlmConfig, seed: u64, params: ParamStore, log_tau: f64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            seed,
            params,
            log_tau: Tensor::full(&[1, 1], log_tau).with_requires_grad(false),
            text_calls: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &VlmConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.data()[0].exp()
    }

    pub fn log_tau(&self) -> f64 {
        self.log_tau.data()[0]
    }

    /// The temperature is a buffer outside the parameter partitions; only
    /// pretraining sets it trainable.
    pub fn log_tau_tensor_mut(&mut self) -> &mut Tensor {
        &mut self.log_tau
    }

    pub fn log_tau_tensor(&self) -> &Tensor {
        &self.log_tau
    }

    /// Number of text-encoder evaluations since construction or reset.
    pub fn text_calls(&self) -> u64 {
        self.text_calls.load(Ordering::Relaxed)
    }

    pub fn reset_text_calls(&self) {
        self.text_calls.store(0, Ordering::Relaxed);
    }

    pub fn count_parameters(&self, include_text_encoder: bool) -> ParamCounts {
        let p = &self.params;
        let text = p.count(Partition::Text);
        let total = p.total();
        ParamCounts {
            image: p.count(Partition::Image),
            text: if include_text_encoder { text } else { 0 },
            fusion: p.count(Partition::Fusion),
            heads: p.count(Partition::Heads),
            total: if include_text_encoder { total } else { total - text },
            total_without_text: total - text,
        }
    }

    // ---- image side -------------------------------------------------------

    /// Splits an H×W×C image into R rows of flattened patches.
    pub fn patches(&self, image: &[f64]) -> Result<Vec<f64>> {
        let c = &self.config;
        let (s, ps, ch) = (c.image_size, c.patch_size, c.channels);
        if image.len() != s * s * ch {
            return Err(Error::shape("encode_image", &[image.len()], &[s, s, ch]));
        }
        let gr = c.grid();
        let win = c.patch_window();
        let off = (c.patch_context * ps) as isize;
        let mut out = Vec::with_capacity(c.regions() * c.patch_dim());
        for gy in 0..gr {
            for gx in 0..gr {
                for y in 0..win {
                    let py = (gy * ps + y) as isize - off;
                    for x in 0..win {
                        let px = (gx * ps + x) as isize - off;
                        if py < 0 || px < 0 || py >= s as isize || px >= s as isize {
                            out.extend(std::iter::repeat(0.0).take(ch));
                        } else {
                            let i = (py as usize * s + px as usize) * ch;
                            out.extend_from_slice(&image[i..i + ch]);
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Patch embedding, positions and the blocks before the first fusion layer.
    pub fn trunk(&self, g: &mut Graph, b: &mut Binder, image: &[f64]) -> Result<Var> {
        let c = &self.config;
        let x = g.constant(c.regions(), c.patch_dim(), self.patches(image)?)?;
        let x = nn::linear(g, b, "img.patch", x)?;
        let pos = b.var(g, "img.pos")?;
        let mut x = g.add(x, pos)?;
        for i in 0..c.trunk_depth() {
            x = nn::block(g, b, &block_name("img", i), x, c.heads)?;
        }
        Ok(x)
    }

    /// Trunk output without recording gradients.
    pub fn trunk_values(&self, image: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let mut b = Binder::new(&self.params);
        let v = self.trunk(&mut g, &mut b, image)?;
        Ok(g.value(v).to_vec())
    }

    /// Places cached trunk values in `g`, or runs the trunk.
    pub fn trunk_or_cached(&self, g: &mut Graph, b: &mut Binder, image: &[f64], cached: Option<&[f64]>) -> Result<Var> {
        match cached {
            Some(v) => g.constant(self.config.regions(), self.config.embed_dim, v.to_vec()),
            None => self.trunk(g, b, image),
        }
    }

    /// Region embeddings of the image encoder alone (no cross-attention).
    pub fn encode_image(&self, g: &mut Graph, b: &mut Binder, image: &[f64]) -> Result<Var> {
        let c = &self.config;
        let mut x = self.trunk(g, b, image)?;
        for i in c.trunk_depth()..c.depth {
            x = nn::block(g, b, &block_name("img", i), x, c.heads)?;
        }
        nn::layer_norm(g, b, "img.ln_f", x)
    }

    // ---- text side --------------------------------------------------------

    /// Rows of the token embedding table. Does not count as a text-encoder
    /// evaluation.
    pub fn token_embeddings(&self, g: &mut Graph, b: &mut Binder, ids: &[usize]) -> Result<Var> {
        let table = b.var(g, "txt.tok")?;
        g.embedding(table, ids)
    }

    pub fn encode_text(&self, g: &mut Graph, b: &mut Binder, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        let e = self.token_embeddings(g, b, ids)?;
        self.encode_text_embeds(g, b, e)
    }

    /// Runs the text encoder on a T×d sequence of input embeddings.
    pub fn encode_text_embeds(&self, g: &mut Graph, b: &mut Binder, emb: Var) -> Result<Var> {
        let c = &self.config;
        let (t, d) = g.shape(emb);
        if d != c.embed_dim {
            return Err(Error::shape("encode_text", &[t, d], &[t, c.embed_dim]));
        }
        if t > c.max_text_len {
            return Err(Error::InvalidArgument(format!(
                "prompt of {t} tokens exceeds max_text_len {}",
                c.max_text_len
            )));
        }
        self.text_calls.fetch_add(1, Ordering::Relaxed);
        let mut x = emb;
        if c.text_positional {
            let pos = b.var(g, "txt.pos")?;
            let pos = g.slice_rows(pos, 0, t)?;
            x = g.add(x, pos)?;
        }
        for i in 0..c.depth {
            x = nn::block(g, b, &block_name("txt", i), x, c.heads)?;
        }
        nn::layer_norm(g, b, "txt.ln_f", x)
    }

    // ---- fusion and heads ---------------------------------------------------

    /// Bidirectional cross-attention of fusion layer `layer`:
    /// V′ = V + V_i2t, P′ = P + P_t2i. Both inputs are normalized before
    /// attending.
    pub fn deep_fuse(&self, g: &mut Graph, b: &mut Binder, layer: usize, v: Var, p: Var) -> Result<FusionOutput> {
        if layer >= self.config.active_fusion_layers() {
            return Err(Error::Config(format!(
                "fusion layer {layer} is not present (fusion={}, layers={})",
                self.config.fusion, self.config.fusion_layers
            )));
        }
        let vn = g.layer_norm(v);
        let pn = g.layer_norm(p);
        let h = self.config.heads;
        let v_i2t = nn::attention(g, b, &format!("fuse{layer}.i2t"), vn, pn, h)?;
        let p_t2i = nn::attention(g, b, &format!("fuse{layer}.t2i"), pn, vn, h)?;
        Ok(FusionOutput {
            v: g.add(v, v_i2t)?,
            p: g.add(p, p_t2i)?,
            v_i2t,
            p_t2i,
        })
    }

    /// Fusion layers interleaved with the remaining image blocks, then the
    /// final image norm. The prompt stream is normalized on entry.
    pub fn fuse_tail(&self, g: &mut Graph, b: &mut Binder, trunk: Var, prompt: Var) -> Result<(Var, Var)> {
        let c = &self.config;
        let mut v = trunk;
        let mut p = g.layer_norm(prompt);
        for (f, i) in (c.trunk_depth()..c.depth).enumerate() {
            let out = self.deep_fuse(g, b, f, v, p)?;
            v = nn::block(g, b, &block_name("img", i), out.v, c.heads)?;
            p = out.p;
        }
        let v = nn::layer_norm(g, b, "img.ln_f", v)?;
        Ok((v, p))
    }

    /// Unit-norm region rows and span-pooled class rows of the alignment
    /// space; logits are their cosines over τ.
    pub fn alignment_features(&self, g: &mut Graph, b: &mut Binder, v: Var, p: Var, spans: &[Span]) -> Result<(Var, Var)> {
        let pooled = pool_spans(g, p, spans)?;
        let vp = nn::linear(g, b, "align.v", v)?;
        let pp = nn::linear(g, b, "align.p", pooled)?;
        Ok((g.normalize_rows(vp)?, g.normalize_rows(pp)?))
    }

    /// Alignment logits cos(W_v v_r, W_p p_k)/τ plus the shared bias.
    pub fn class_logits(&self, g: &mut Graph, b: &mut Binder, v: Var, p: Var, spans: &[Span]) -> Result<(Var, Var)> {
        let (vn, pn) = self.alignment_features(g, b, v, p, spans)?;
        let pt = g.transpose(pn);
        let cos = g.matmul(vn, pt)?;
        let lt = g.leaf(&self.log_tau);
        let neg = g.scale(lt, -1.0);
        let inv_tau = g.exp(neg);
        let logits = g.scale_by(cos, inv_tau)?;
        let bias = b.var(g, "cls_bias")?;
        let bias = g.gather_cols(bias, &vec![0; spans.len()])?;
        Ok((g.add_row(logits, bias)?, lt))
    }

    /// Full detection forward from trunk features and a T×d prompt sequence.
    pub fn heads(&self, g: &mut Graph, b: &mut Binder, trunk: Var, prompt: Var, spans: &[Span]) -> Result<HeadOutputs> {
        let (v, p) = self.fuse_tail(g, b, trunk, prompt)?;
        let (logits, log_tau) = self.class_logits(g, b, v, p, spans)?;
        let h = nn::linear(g, b, "box.fc1", v)?;
        let h = g.gelu(h);
        let boxes = nn::linear(g, b, "box.fc2", h)?;
        let h = nn::linear(g, b, "mask.fc1", v)?;
        let h = g.gelu(h);
        let masks = nn::linear(g, b, "mask.fc2", h)?;
        Ok(HeadOutputs {
            logits,
            boxes,
            masks,
            v,
            p,
            log_tau,
        })
    }

    /// Trainable parameters in store order, then the temperature if asked.
    pub fn trainable_tensors_mut(&mut self, include_tau: bool) -> Vec<&mut Tensor> {
        let mut v = self.params.trainable_mut();
        if include_tau {
            if self.log_tau.grad().is_none() {
                self.log_tau.accumulate_grad(&[0.0]).expect("scalar");
            }
            v.push(&mut self.log_tau);
        }
        v
    }

    /// Copy of the parameters with every gradient disabled.
    pub fn frozen_params(&self) -> ParamStore {
        let mut p = self.params.clone();
        p.freeze_all();
        p
    }

    // ---- box and mask geometry ---------------------------------------------

    /// Center of region `r` in pixels.
    pub fn cell_center(&self, r: usize) -> (f64, f64) {
        let (gr, ps) = (self.config.grid(), self.config.patch_size as f64);
        (((r % gr) as f64 + 0.5) * ps, ((r / gr) as f64 + 0.5) * ps)
    }

    /// Region whose cell contains the point.
    pub fn region_of(&self, x: f64, y: f64) -> usize {
        let gr = self.config.grid();
        let ps = self.config.patch_size as f64;
        let cx = ((x / ps).floor().max(0.0) as usize).min(gr - 1);
        let cy = ((y / ps).floor().max(0.0) as usize).min(gr - 1);
        cy * gr + cx
    }

    /// Box of region `r` for raw parameters `u`; unclamped.
    pub fn decode_box(&self, r: usize, u: [f64; 4]) -> BBox {
        let ps = self.config.patch_size as f64;
        let (cx, cy) = self.cell_center(r);
        let d = u.map(|x| 2.0 * sigmoid(x) - 1.0);
        let (x, y) = (cx + d[0] * ps, cy + d[1] * ps);
        let (w, h) = (ps * (d[2] * BOX_SCALE_LOG).exp(), ps * (d[3] * BOX_SCALE_LOG).exp());
        BBox::new(x - w / 2.0, y - h / 2.0, x + w / 2.0, y + h / 2.0)
    }

    /// Inverse of [`Self::decode_box`]. Fails when the box is outside the
    /// range the parameterization can express.
    pub fn encode_box(&self, r: usize, bx: &BBox) -> Result<[f64; 4]> {
        let ps = self.config.patch_size as f64;
        let (cx, cy) = self.cell_center(r);
        let (x, y) = bx.center();
        let d = [
            (x - cx) / ps,
            (y - cy) / ps,
            (bx.width() / ps).ln() / BOX_SCALE_LOG,
            (bx.height() / ps).ln() / BOX_SCALE_LOG,
        ];
        if d.iter().any(|v| !(v.abs() < 1.0)) {
            return Err(Error::InvalidArgument(format!("box {bx:?} is not expressible from region {r}")));
        }
        Ok(d.map(|v| {
            let s = (v + 1.0) / 2.0;
            (s / (1.0 - s)).ln()
        }))
    }

    /// Differentiable [`Self::decode_box`] over the rows `regions` of `raw`.
    pub fn decode_boxes_node(&self, g: &mut Graph, raw: Var, regions: &[usize]) -> Result<Var> {
        let ps = self.config.patch_size as f64;
        let u = g.gather_rows(raw, regions)?;
        let s = g.sigmoid(u);
        let s = g.scale(s, 2.0);
        let d = g.add_scalar(s, -1.0);
        let n = regions.len();
        let (cx, cy): (Vec<f64>, Vec<f64>) = regions.iter().map(|&r| self.cell_center(r)).unzip();
        let cx = g.constant(n, 1, cx)?;
        let cy = g.constant(n, 1, cy)?;
        let mut center = Vec::new();
        for (col, c) in [(0, cx), (1, cy)] {
            let dc = g.slice_cols(d, col, 1)?;
            let off = g.scale(dc, ps);
            center.push(g.add(off, c)?);
        }
        let mut half = Vec::new();
        for col in [2, 3] {
            let dc = g.slice_cols(d, col, 1)?;
            let e = g.scale(dc, BOX_SCALE_LOG);
            let e = g.exp(e);
            half.push(g.scale(e, ps / 2.0));
        }
        let x0 = g.sub(center[0], half[0])?;
        let y0 = g.sub(center[1], half[1])?;
        let x1 = g.add(center[0], half[0])?;
        let y1 = g.add(center[1], half[1])?;
        g.concat_cols(&[x0, y0, x1, y1])
    }

    /// For every pixel (row-major), the mask-grid cell of `bx` whose
    /// nearest-neighbour footprint covers the pixel center, or S² when the
    /// pixel lies outside the box.
    pub fn box_pixel_index(&self, bx: &BBox) -> Vec<usize> {
        let c = &self.config;
        let (s, m) = (c.image_size, c.mask_grid);
        let outside = m * m;
        let (w, h) = (bx.width(), bx.height());
        (0..s * s)
            .map(|i| {
                let (x, y) = ((i % s) as f64 + 0.5, (i / s) as f64 + 0.5);
                if w <= 0.0 || h <= 0.0 || x < bx.x_min || x >= bx.x_max || y < bx.y_min || y >= bx.y_max {
                    return outside;
                }
                let cx = (((x - bx.x_min) / w * m as f64) as usize).min(m - 1);
                let cy = (((y - bx.y_min) / h * m as f64) as usize).min(m - 1);
                cy * m + cx
            })
            .collect()
    }

    /// Pastes the mask grids of `regions` into their boxes: n × H·W logits,
    /// with pixels outside a box fixed at [`MASK_OUTSIDE_LOGIT`].
    pub fn paste_masks(&self, g: &mut Graph, masks: Var, regions: &[usize], boxes: &[BBox]) -> Result<Var> {
        if regions.len() != boxes.len() || regions.is_empty() {
            return Err(Error::shape("paste_masks", &[regions.len()], &[boxes.len()]));
        }
        let rows = g.gather_rows(masks, regions)?;
        let pad = g.constant(regions.len(), 1, vec![MASK_OUTSIDE_LOGIT; regions.len()])?;
        let padded = g.concat_cols(&[rows, pad])?;
        let width = self.config.mask_grid * self.config.mask_grid + 1;
        let mut out = Vec::with_capacity(regions.len());
        for (i, bx) in boxes.iter().enumerate() {
            let row = g.slice_rows(padded, i, 1)?;
            let idx = self.box_pixel_index(bx);
            debug_assert!(idx.iter().all(|&j| j < width));
            out.push(g.gather_cols(row, &idx)?);
        }
        if out.len() == 1 {
            Ok(out[0])
        } else {
            g.concat_rows(&out)
        }
    }

    /// Non-recording [`Self::paste_masks`] for one region's grid.
    pub fn paste_mask_values(&self, grid: &[f64], bx: &BBox) -> Vec<f64> {
        self.box_pixel_index(bx)
            .into_iter()
            .map(|j| grid.get(j).copied().unwrap_or(MASK_OUTSIDE_LOGIT))
            .collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// K × T mean-pooling matrix for `spans` over a sequence of length `t`.
pub fn pooling_matrix(spans: &[Span], t: usize) -> Result<Vec<f64>> {
    let mut m = vec![0.0; spans.len() * t];
    for (k, s) in spans.iter().enumerate() {
        if s.len == 0 || s.start + s.len > t {
            return Err(Error::InvalidArgument(format!("span {s:?} outside a {t}-token prompt")));
        }
        for j in s.start..s.start + s.len {
            m[k * t + j] = 1.0 / s.len as f64;
        }
    }
    Ok(m)
}

/// Per-class mean of the prompt rows in each span.
pub fn pool_spans(g: &mut Graph, p: Var, spans: &[Span]) -> Result<Var> {
    if spans.is_empty() {
        return Err(Error::InvalidArgument("no classes to score".into()));
    }
    let t = g.shape(p).0;
    let m = g.constant(spans.len(), t, pooling_matrix(spans, t)?)?;
    g.matmul(m, p)
}
