//! Pixel-space toy diffusion: a conditional MLP noise predictor, its
//! training objective and an ancestral sampler.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Binder, ParamStore, Partition};
use crate::numeric::{clip_grad_norm, Graph, Optimizer, OptimizerConfig, Rng, Var, GRAD_CLIP_NORM};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub side: usize,
    pub channels: usize,
    pub hidden: usize,
    pub time_dim: usize,
    pub cond_dim: usize,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            side: 8,
            channels: 3,
            hidden: 128,
            time_dim: 32,
            cond_dim: 64,
            timesteps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl DenoiserConfig {
    pub fn pixels(&self) -> usize {
        self.side * self.side * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.side == 0 || self.channels == 0 || self.hidden == 0 || self.cond_dim == 0 {
            return Err(Error::Config("denoiser extents must be positive".into()));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::Config("denoiser time_dim must be even and positive".into()));
        }
        if self.timesteps == 0 || !(0.0 < self.beta_start && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return Err(Error::Config("noise schedule needs 0 < beta_start <= beta_end < 1".into()));
        }
        Ok(())
    }
}

/// Linear β schedule indexed by t ∈ [1, T].
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Self {
        let betas: Vec<f64> = (0..timesteps)
            .map(|i| {
                if timesteps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64
                }
            })
            .collect();
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Self { betas, alpha_bars }
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.betas.len() {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside [1, {}]",
                self.betas.len()
            )));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.check(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.check(t)?])
    }

    /// z_t = √ᾱ_t·x_0 + √(1−ᾱ_t)·ε.
    pub fn noise(&self, x0: &[f64], eps: &[f64], t: usize) -> Result<Vec<f64>> {
        let ab = self.alpha_bar(t)?;
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
    }
}

/// Sinusoidal embedding of timestep `t`.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    out
}

/// MLP noise predictor ε_θ(z_t, t, c). The conditioning vector is projected
/// and added to both hidden layers; a timestep-dependent gain carries z_t
/// straight to the output.
#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    config: DenoiserConfig,
    schedule: NoiseSchedule,
    params: ParamStore,
}

impl ToyDenoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::derived(seed, 0xd1ff);
        let mut params = ParamStore::new();
        let (p, h) = (config.pixels(), config.hidden);
        let part = Partition::Heads;
        nn::add_linear(&mut params, &mut rng, "in", part, p, h, true)?;
        nn::add_linear(&mut params, &mut rng, "time1", part, config.time_dim, h, false)?;
        nn::add_linear(&mut params, &mut rng, "cond1", part, config.cond_dim, h, false)?;
        nn::add_linear(&mut params, &mut rng, "hidden", part, h, h, true)?;
        nn::add_linear(&mut params, &mut rng, "time2", part, config.time_dim, h, false)?;
        nn::add_linear(&mut params, &mut rng, "cond2", part, config.cond_dim, h, false)?;
        nn::add_linear(&mut params, &mut rng, "out", part, h, p, true)?;
        nn::add_linear(&mut params, &mut rng, "skip", part, config.time_dim, 1, true)?;
        let schedule = NoiseSchedule::linear(config.timesteps, config.beta_start, config.beta_end);
        Ok(Self {
            config,
            schedule,
            params,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Records ε_θ for a batch: `z` is B×pixels, `cond` is B×cond_dim or
    /// 1×cond_dim (broadcast), `ts` has B entries.
    pub fn forward(&self, g: &mut Graph, b: &mut Binder, z: Var, ts: &[usize], cond: Var) -> Result<Var> {
        let (rows, cols) = g.shape(z);
        if cols != self.config.pixels() || ts.len() != rows {
            return Err(Error::shape("denoiser", &[rows, cols], &[ts.len(), self.config.pixels()]));
        }
        let (cr, cc) = g.shape(cond);
        if cc != self.config.cond_dim || (cr != rows && cr != 1) {
            return Err(Error::shape("denoiser cond", &[cr, cc], &[rows, self.config.cond_dim]));
        }
        let cond = if cr == 1 && rows > 1 { g.gather_rows(cond, &vec![0; rows])? } else { cond };
        for &t in ts {
            self.schedule.check(t)?;
        }
        let temb: Vec<f64> = ts.iter().flat_map(|&t| time_embedding(t, self.config.time_dim)).collect();
        let temb = g.constant(rows, self.config.time_dim, temb)?;

        let mut h = nn::linear(g, b, "in", z)?;
        for (time, cnd) in [("time1", "cond1"), ("time2", "cond2")] {
            if time == "time2" {
                h = g.gelu(h);
                h = nn::linear(g, b, "hidden", h)?;
            }
            let tp = nn::linear(g, b, time, temb)?;
            let cp = nn::linear(g, b, cnd, cond)?;
            h = g.add(h, tp)?;
            h = g.add(h, cp)?;
        }
        let h = g.gelu(h);
        let out = nn::linear(g, b, "out", h)?;
        let gain = nn::linear(g, b, "skip", temb)?;
        let ones = g.constant(1, cols, vec![1.0; cols])?;
        let gain = g.matmul(gain, ones)?;
        let carried = g.mul(gain, z)?;
        g.add(out, carried)
    }

    /// Non-recording prediction for a batch of noisy inputs.
    pub fn predict(&self, z: &[f64], ts: &[usize], cond: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let frozen = self.frozen_view();
        let mut b = Binder::new(&frozen);
        let zv = g.constant(ts.len(), self.config.pixels(), z.to_vec())?;
        let cv = g.constant(cond.len() / self.config.cond_dim.max(1), self.config.cond_dim, cond.to_vec())?;
        let out = self.forward(&mut g, &mut b, zv, ts, cv)?;
        Ok(g.value(out).to_vec())
    }

    fn frozen_view(&self) -> ParamStore {
        let mut p = self.params.clone();
        p.freeze_all();
        p
    }
}

/// ‖ε − ε_θ(z_t, t, c)‖², averaged over every pixel of the batch. `x0` and
/// `eps` are B×pixels in the model's [-1, 1] range.
#[allow(clippy::too_many_arguments)]
pub fn generation_loss(
    g: &mut Graph,
    b: &mut Binder,
    den: &ToyDenoiser,
    x0: &[f64],
    cond: Var,
    ts: &[usize],
    eps: &[f64],
) -> Result<Var> {
    let p = den.config.pixels();
    if x0.len() != ts.len() * p || eps.len() != x0.len() {
        return Err(Error::shape("generation_loss", &[x0.len()], &[ts.len(), p]));
    }
    let mut z = Vec::with_capacity(x0.len());
    for (i, &t) in ts.iter().enumerate() {
        z.extend(den.schedule.noise(&x0[i * p..(i + 1) * p], &eps[i * p..(i + 1) * p], t)?);
    }
    let zv = g.constant(ts.len(), p, z)?;
    let pred = den.forward(g, b, zv, ts, cond)?;
    let target = g.constant(ts.len(), p, eps.to_vec())?;
    g.mse(pred, target)
}

/// Maps [0,1] pixels to the model range.
pub fn to_model_range(pixels: &[f64]) -> Vec<f64> {
    pixels.iter().map(|x| 2.0 * x - 1.0).collect()
}

/// Trains every unfrozen denoiser weight on (image, conditioning) pairs.
/// Images are flattened side×side×channels in [0, 1]. Returns the loss curve.
pub fn train_denoiser(
    den: &mut ToyDenoiser,
    images: &[Vec<f64>],
    conds: &[Vec<f64>],
    steps: usize,
    batch: usize,
    learning_rate: f64,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let p = den.config.pixels();
    let dc = den.config.cond_dim;
    if images.is_empty() || images.len() != conds.len() {
        return Err(Error::InvalidArgument("need one conditioning vector per training image".into()));
    }
    if images.iter().any(|x| x.len() != p) || conds.iter().any(|c| c.len() != dc) {
        return Err(Error::InvalidArgument("training image or conditioning has the wrong size".into()));
    }
    let mut opt = Optimizer::new(OptimizerConfig {
        weight_decay: 0.0,
        ..OptimizerConfig::adam(learning_rate)
    })?;
    let t_max = den.schedule.timesteps();
    let mut curve = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut x0 = Vec::with_capacity(batch * p);
        let mut cond = Vec::with_capacity(batch * dc);
        let mut ts = Vec::with_capacity(batch);
        for _ in 0..batch {
            let i = rng.below(images.len());
            x0.extend(to_model_range(&images[i]));
            cond.extend_from_slice(&conds[i]);
            ts.push(1 + rng.below(t_max));
        }
        let eps = rng.normal_vec(batch * p, 0.0, 1.0);
        let mut g = Graph::new();
        let mut b = Binder::new(&den.params);
        let cv = g.constant(batch, dc, cond)?;
        let loss = generation_loss(&mut g, &mut b, den, &x0, cv, &ts, &eps)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        let bound = b.finish();
        g.backward(loss)?;
        bound.write_grads(&g, &mut den.params)?;
        let mut ps = den.params.trainable_mut();
        clip_grad_norm(&mut ps, GRAD_CLIP_NORM);
        opt.step(&mut ps)?;
        curve.push(value);
    }
    Ok(curve)
}

/// Ancestral reverse sampling over all T steps. The predicted clean image is
/// clipped to the data range before each posterior step; the result is in
/// [0, 1], flattened side×side×channels.
pub fn sample_generation(den: &ToyDenoiser, cond: &[f64], count: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
    let p = den.config.pixels();
    if cond.len() != den.config.cond_dim {
        return Err(Error::shape("sample_generation", &[cond.len()], &[den.config.cond_dim]));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let s = &den.schedule;
    let t_max = s.timesteps();
    let mut x = rng.normal_vec(count * p, 0.0, 1.0);
    for t in (1..=t_max).rev() {
        let eps = den.predict(&x, &vec![t; count], cond)?;
        let ab = s.alpha_bar(t)?;
        let ab_prev = if t > 1 { s.alpha_bar(t - 1)? } else { 1.0 };
        let beta = s.beta(t)?;
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let var = beta * (1.0 - ab_prev) / (1.0 - ab);
        let noise = if t > 1 { rng.normal_vec(count * p, 0.0, 1.0) } else { vec![0.0; count * p] };
        for j in 0..x.len() {
            let x0 = ((x[j] - (1.0 - ab).sqrt() * eps[j]) / ab.sqrt()).clamp(-1.0, 1.0);
            x[j] = c0 * x0 + ct * x[j] + var.sqrt() * noise[j];
        }
    }
    Ok(x.chunks(p)
        .map(|c| c.iter().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect())
        .collect())
}

/// Per-channel mean of a flattened side×side×channels image.
pub fn mean_color(image: &[f64], channels: usize) -> Vec<f64> {
    let n = (image.len() / channels) as f64;
    (0..channels)
        .map(|c| image.iter().skip(c).step_by(channels).sum::<f64>() / n)
        .collect()
}

/// Writes an 8-bit binary PPM of a side×side×3 image in [0, 1].
pub fn write_ppm(path: &Path, image: &[f64], side: usize) -> Result<()> {
    if image.len() != side * side * 3 {
        return Err(Error::shape("write_ppm", &[image.len()], &[side, side, 3]));
    }
    let mut buf = format!("P6\n{side} {side}\n255\n").into_bytes();
    buf.extend(image.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DenoiserConfig {
        DenoiserConfig {
            side: 2,
            hidden: 16,
            time_dim: 8,
            cond_dim: 4,
            ..DenoiserConfig::default()
        }
    }

    #[test]
    fn schedule_arithmetic() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02);
        assert!((s.alpha_bar(1).unwrap() - (1.0 - 1e-4)).abs() < 1e-15);
        assert!((s.beta(100).unwrap() - 0.02).abs() < 1e-15);
        assert!(s.beta(0).is_err() && s.beta(101).is_err());
        for t in 2..=100 {
            assert!(s.beta(t).unwrap() > s.beta(t - 1).unwrap());
            assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
        }
    }

    #[test]
    fn noised_unit_variance_stays_unit() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02);
        let mut rng = Rng::new(9);
        let n = 10_000;
        let x0 = rng.normal_vec(n, 0.0, 1.0);
        let eps = rng.normal_vec(n, 0.0, 1.0);
        let z = s.noise(&x0, &eps, 100).unwrap();
        let m = z.iter().sum::<f64>() / n as f64;
        let var = z.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64;
        assert!((var - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn output_shape_matches_input() {
        let den = ToyDenoiser::new(small(), 0).unwrap();
        let out = den.predict(&[0.1; 24], &[1, 50], &[0.0; 4]).unwrap();
        assert_eq!(out.len(), 24);
        assert!(den.predict(&[0.1; 12], &[0], &[0.0; 4]).is_err());
    }

    #[test]
    fn zero_output_denoiser_samples_are_finite_and_seeded() {
        let mut den = ToyDenoiser::new(small(), 0).unwrap();
        for n in ["out.w", "out.b", "skip.w", "skip.b"] {
            den.params_mut().tensor_mut(n).unwrap().data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let a = sample_generation(&den, &[0.5; 4], 3, &mut Rng::new(4)).unwrap();
        let b = sample_generation(&den, &[0.5; 4], 3, &mut Rng::new(4)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn mean_color_per_channel() {
        let img = [1.0, 0.0, 0.5, 0.0, 1.0, 0.5];
        assert_eq!(mean_color(&img, 3), vec![0.5, 0.5, 0.5]);
    }
}
