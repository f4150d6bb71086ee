use serde::{Deserialize, Serialize};

use crate::data::vocab::{ShapeKind, Vocabulary, SEP_TOKEN};
use crate::error::{Error, Result};
use crate::numeric::Rng;

/// Axis-aligned box in pixel units, `min` inclusive, `max` exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn width(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y_max - self.y_min).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    pub fn intersection(&self, o: &BBox) -> f64 {
        let w = (self.x_max.min(o.x_max) - self.x_min.max(o.x_min)).max(0.0);
        let h = (self.y_max.min(o.y_max) - self.y_min.max(o.y_min)).max(0.0);
        w * h
    }

    pub fn iou(&self, o: &BBox) -> f64 {
        let inter = self.intersection(o);
        let union = self.area() + o.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn clamp(&self, width: f64, height: f64) -> BBox {
        BBox::new(
            self.x_min.clamp(0.0, width),
            self.y_min.clamp(0.0, height),
            self.x_max.clamp(0.0, width),
            self.y_max.clamp(0.0, height),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: f64,
    pub max_size: f64,
    /// Upper bound on pairwise box IoU between objects of one scene.
    pub overlap_cap: f64,
    pub noise_std: f64,
    pub background: f64,
    /// Grid cell used to keep object centers in distinct cells; matches the
    /// model's patch size so center-based assignment is unambiguous.
    pub center_cell: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            min_objects: 1,
            max_objects: 4,
            min_size: 8.0,
            max_size: 14.0,
            overlap_cap: 0.3,
            noise_std: 0.02,
            background: 0.08,
            center_cell: 4,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_objects == 0 || self.max_objects > 4 || self.min_objects > self.max_objects {
            return Err(Error::Config("scenes hold between 1 and 4 objects".into()));
        }
        if self.min_size < 3.0 || self.max_size < self.min_size {
            return Err(Error::Config("object size range is invalid".into()));
        }
        if self.max_size > self.width.min(self.height) as f64 || self.center_cell == 0 {
            return Err(Error::Config("objects do not fit the canvas".into()));
        }
        Ok(())
    }
}

/// One rendered image with its annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// `H × W × 3`, row-major, values in `[0, 1]`.
    pub image: Vec<f64>,
    pub boxes: Vec<BBox>,
    pub labels: Vec<usize>,
    /// One `H × W` binary mask per object.
    pub masks: Vec<Vec<bool>>,
    pub caption_token_ids: Vec<usize>,
}

impl Scene {
    pub fn num_objects(&self) -> usize {
        self.boxes.len()
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let o = (y * self.width + x) * 3;
        [self.image[o], self.image[o + 1], self.image[o + 2]]
    }
}

/// Caption naming each present class once, in order of first appearance,
/// joined by the separator token.
pub fn caption_tokens(vocab: &Vocabulary, labels: &[usize]) -> Vec<usize> {
    let mut seen = Vec::new();
    for &l in labels {
        if !seen.contains(&l) {
            seen.push(l);
        }
    }
    let mut out = Vec::new();
    for (i, l) in seen.iter().enumerate() {
        if i > 0 {
            out.push(SEP_TOKEN);
        }
        out.extend(vocab.class_tokens(*l));
    }
    out
}

fn inside(shape: ShapeKind, cx: f64, cy: f64, size: f64, px: f64, py: f64) -> bool {
    let dx = px - cx;
    let dy = py - cy;
    let r = size / 2.0;
    match shape {
        ShapeKind::Circle => dx * dx + dy * dy <= r * r,
        ShapeKind::Square => dx.abs() < r && dy.abs() < r,
        ShapeKind::Triangle => {
            // apex up, base at cy + r
            if dy < -r || dy >= r {
                return false;
            }
            let t = (dy + r) / (2.0 * r);
            dx.abs() <= t * r
        }
        ShapeKind::StripedEllipse => {
            let b = 0.65 * r;
            (dx / r).powi(2) + (dy / b).powi(2) <= 1.0
        }
        ShapeKind::Ring => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= (0.5 * r) * (0.5 * r)
        }
        ShapeKind::CheckerBlob => {
            let ang = dy.atan2(dx);
            let rr = r * (0.82 + 0.18 * (3.0 * ang).cos());
            dx * dx + dy * dy <= rr * rr
        }
    }
}

fn shade(shape: ShapeKind, color: [f64; 3], x: usize, y: usize) -> [f64; 3] {
    match shape {
        ShapeKind::StripedEllipse if (x / 2) % 2 == 1 => color.map(|c| 0.35 * c),
        ShapeKind::CheckerBlob if (x / 2 + y / 2) % 2 == 1 => color.map(|c| 0.5 + 0.5 * c),
        _ => color,
    }
}

struct Placed {
    label: usize,
    shape: ShapeKind,
    color: [f64; 3],
    mask: Vec<bool>,
    bbox: BBox,
}

fn rasterize(cfg: &SceneConfig, shape: ShapeKind, cx: f64, cy: f64, size: f64) -> Option<(Vec<bool>, BBox)> {
    let (w, h) = (cfg.width, cfg.height);
    let mut mask = vec![false; w * h];
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..h {
        for x in 0..w {
            if inside(shape, cx, cy, size, x as f64 + 0.5, y as f64 + 0.5) {
                mask[y * w + x] = true;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    (x0 != usize::MAX).then(|| (mask, BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64)))
}

fn center_cell(b: &BBox, cell: usize) -> (usize, usize) {
    let (cx, cy) = b.center();
    ((cx / cell as f64) as usize, (cy / cell as f64) as usize)
}

fn try_place(
    cfg: &SceneConfig,
    vocab: &Vocabulary,
    label: usize,
    placed: &[Placed],
    rng: &mut Rng,
) -> Option<Placed> {
    let spec = vocab.class(label);
    for _ in 0..64 {
        let size = rng.uniform_range(cfg.min_size, cfg.max_size);
        let half = size / 2.0;
        let cx = rng.uniform_range(half, cfg.width as f64 - half);
        let cy = rng.uniform_range(half, cfg.height as f64 - half);
        let Some((mask, bbox)) = rasterize(cfg, spec.shape, cx, cy, size) else {
            continue;
        };
        let cell = center_cell(&bbox, cfg.center_cell);
        let ok = placed.iter().all(|p| {
            p.bbox.iou(&bbox) <= cfg.overlap_cap
                && center_cell(&p.bbox, cfg.center_cell) != cell
                && !p.mask.iter().zip(&mask).any(|(a, b)| *a && *b)
        });
        if ok {
            return Some(Placed {
                label,
                shape: spec.shape,
                color: spec.color,
                mask,
                bbox,
            });
        }
    }
    None
}

/// Renders one scene. When `classes` is given those classes are placed (in
/// order); otherwise the object count and classes are drawn from `rng`.
pub fn generate_scene(
    config: &SceneConfig,
    vocab: &Vocabulary,
    classes: Option<&[String]>,
    seed: u64,
) -> Result<Scene> {
    config.validate()?;
    if vocab.is_empty() {
        return Err(Error::Config("class palette is empty".into()));
    }
    let forced = classes
        .map(|names| names.iter().map(|n| vocab.index_of(n)).collect::<Result<Vec<_>>>())
        .transpose()?;
    if let Some(f) = &forced {
        if f.is_empty() || f.len() > config.max_objects {
            return Err(Error::Config(format!("requested {} objects", f.len())));
        }
    }
    let mut rng = Rng::new(seed);
    let placed = 'outer: loop {
        let labels: Vec<usize> = match &forced {
            Some(f) => f.clone(),
            None => {
                let n = config.min_objects + rng.below(config.max_objects - config.min_objects + 1);
                (0..n).map(|_| rng.below(vocab.len())).collect()
            }
        };
        let mut placed: Vec<Placed> = Vec::new();
        for &l in &labels {
            match try_place(config, vocab, l, &placed, &mut rng) {
                Some(p) => placed.push(p),
                None => continue 'outer,
            }
        }
        break placed;
    };

    let (w, h) = (config.width, config.height);
    let mut image = vec![config.background; w * h * 3];
    for p in &placed {
        for y in 0..h {
            for x in 0..w {
                if p.mask[y * w + x] {
                    let c = shade(p.shape, p.color, x, y);
                    image[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&c);
                }
            }
        }
    }
    for v in image.iter_mut() {
        *v = (*v + rng.normal(0.0, config.noise_std)).clamp(0.0, 1.0);
    }
    let labels: Vec<usize> = placed.iter().map(|p| p.label).collect();
    Ok(Scene {
        seed,
        height: h,
        width: w,
        image,
        caption_token_ids: caption_tokens(vocab, &labels),
        boxes: placed.iter().map(|p| p.bbox).collect(),
        labels,
        masks: placed.into_iter().map(|p| p.mask).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_square_box_is_its_bounding_rectangle() {
        let vocab = Vocabulary::in_domain();
        let cfg = SceneConfig {
            noise_std: 0.0,
            ..SceneConfig::default()
        };
        let s = generate_scene(&cfg, &vocab, Some(&["red square".to_string()]), 11).unwrap();
        let red = vocab.class(vocab.index_of("red square").unwrap()).color;
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..32 {
            for x in 0..32 {
                if s.pixel(x, y) == red {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        assert_eq!(s.boxes[0], BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64));
    }

    #[test]
    fn four_objects_respect_overlap_cap() {
        let vocab = Vocabulary::in_domain();
        let cfg = SceneConfig::default();
        let names: Vec<String> = (0..4).map(|k| vocab.class(k * 2).name.clone()).collect();
        for seed in 0..20 {
            let s = generate_scene(&cfg, &vocab, Some(&names), seed).unwrap();
            assert_eq!(s.boxes.len(), 4);
            // brute-force pixel IoU of the box rectangles
            for i in 0..4 {
                for j in i + 1..4 {
                    let (a, b) = (s.boxes[i], s.boxes[j]);
                    let (mut inter, mut uni) = (0, 0);
                    for y in 0..32 {
                        for x in 0..32 {
                            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                            let ia = px > a.x_min && px < a.x_max && py > a.y_min && py < a.y_max;
                            let ib = px > b.x_min && px < b.x_max && py > b.y_min && py < b.y_max;
                            inter += (ia && ib) as usize;
                            uni += (ia || ib) as usize;
                        }
                    }
                    assert!(inter as f64 / uni as f64 <= 0.3 + 1e-12);
                }
            }
        }
    }

    #[test]
    fn masks_lie_inside_boxes() {
        let vocab = Vocabulary::out_domain();
        for seed in 0..30 {
            let s = generate_scene(&SceneConfig::default(), &vocab, None, seed).unwrap();
            for (m, b) in s.masks.iter().zip(&s.boxes) {
                for y in 0..32 {
                    for x in 0..32 {
                        if m[y * 32 + x] {
                            let (fx, fy) = (x as f64, y as f64);
                            assert!(fx >= b.x_min && fx + 1.0 <= b.x_max);
                            assert!(fy >= b.y_min && fy + 1.0 <= b.y_max);
                        }
                    }
                }
                assert!(0.0 <= b.x_min && b.x_min < b.x_max && b.x_max <= 32.0);
            }
        }
    }

    #[test]
    fn errors_on_unknown_class_and_empty_palette() {
        let cfg = SceneConfig::default();
        let vocab = Vocabulary::in_domain();
        assert!(matches!(
            generate_scene(&cfg, &vocab, Some(&["orange ring".into()]), 0),
            Err(Error::UnknownClass(_))
        ));
        let empty = Vocabulary::new(vec![]).unwrap();
        assert!(generate_scene(&cfg, &empty, None, 0).is_err());
    }

    #[test]
    fn caption_names_exactly_present_classes() {
        let vocab = Vocabulary::in_domain();
        for seed in 0..10 {
            let s = generate_scene(&SceneConfig::default(), &vocab, None, seed).unwrap();
            let mut present: Vec<usize> = s.labels.clone();
            present.sort();
            present.dedup();
            let segments = s.caption_token_ids.split(|t| *t == SEP_TOKEN).count();
            assert_eq!(segments, present.len());
            for l in present {
                let toks = vocab.class_tokens(l);
                assert!(s.caption_token_ids.windows(toks.len()).any(|w| w == toks.as_slice()));
            }
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let vocab = Vocabulary::in_domain();
        let a = generate_scene(&SceneConfig::default(), &vocab, None, 5).unwrap();
        let b = generate_scene(&SceneConfig::default(), &vocab, None, 5).unwrap();
        assert_eq!(a, b);
    }
}
