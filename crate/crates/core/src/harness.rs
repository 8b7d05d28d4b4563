//! Toy DDPM sampler, a small DiT-like graph generator and the
//! timestep-error experiment.

use std::collections::BTreeMap;

use crate::engine::{quantize_model, Bindings, EngineConfig, QuantReport, QuantizedModel};
use crate::error::{Error, Result};
use crate::graphir::{execute, ActivationFn, Axis, Graph, GraphBuilder, NodeKind, Port, LAYERNORM_DEFAULT_EPS};
use crate::numerics::{gaussian, Rng, Tensor};

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;

/// `β_t` for `t = 1..=T` with the derived `α_t` and `ᾱ_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidArgument(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(NoiseSchedule { betas, alpha_bars })
    }

    /// Evenly spaced `β` from `1e-4` to `0.02` over `steps`.
    pub fn linear(steps: usize) -> Result<Self> {
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    BETA_START
                } else {
                    BETA_START + (BETA_END - BETA_START) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::new(betas)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidArgument(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.check(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(1.0 - self.beta(t)?)
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.check(t)?])
    }

    /// Reverse-process noise scale `σ_t = √β_t`.
    pub fn sigma(&self, t: usize) -> Result<f64> {
        Ok(self.beta(t)?.sqrt())
    }
}

fn axpby(a: f64, x: &Tensor, b: f64, y: &Tensor) -> Result<Tensor> {
    if x.shape() != y.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    x.zip_map(y, |u, v| (a * u as f64 + b * v as f64) as f32)
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·noise`.
pub fn ddpm_forward(x0: &Tensor, t: usize, sched: &NoiseSchedule, noise: &Tensor) -> Result<Tensor> {
    let ab = sched.alpha_bar(t)?;
    axpby(ab.sqrt(), x0, (1.0 - ab).sqrt(), noise)
}

/// `x_{t−1} = (x_t − β_t/√(1−ᾱ_t)·ε̂)/√α_t (+ σ_t·z)`.
pub fn ddpm_reverse_step(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
    z: Option<&Tensor>,
) -> Result<Tensor> {
    let (beta, alpha, ab) = (sched.beta(t)?, sched.alpha(t)?, sched.alpha_bar(t)?);
    let inv = 1.0 / alpha.sqrt();
    let mean = axpby(inv, x_t, -inv * beta / (1.0 - ab).sqrt(), eps_hat)?;
    match z {
        Some(z) => axpby(1.0, &mean, sched.sigma(t)?, z),
        None => Ok(mean),
    }
}

pub const TIME_EMBED_DIM: usize = 16;
pub const LATENT_DIM: usize = 4;
pub const CONTEXT_DIM: usize = 12;

/// `[sin(t·f_i)…, cos(t·f_i)…]` with `f_i = 10000^(−i/(dim/2))`.
pub fn sinusoidal_embedding(t: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("embedding width {dim} must be even and positive")));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp()).collect();
    let mut data: Vec<f32> = freqs.iter().map(|f| (t as f64 * f).sin() as f32).collect();
    data.extend(freqs.iter().map(|f| (t as f64 * f).cos() as f32));
    Tensor::new(vec![1, dim], data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyModelSpec {
    pub hidden: usize,
    pub tokens: usize,
    pub seed: u64,
    pub blocks: usize,
}

impl Default for ToyModelSpec {
    fn default() -> Self {
        ToyModelSpec {
            hidden: 16,
            tokens: 8,
            seed: 0,
            blocks: 1,
        }
    }
}

/// Gains of the six modulation chunks: shift, scale, gate for the two
/// sub-blocks. Adjacent chunks differ by at least 10×.
const MODULATION_GAINS: [f32; 6] = [1.0, 0.05, 0.5, 1.0, 0.05, 0.5];
/// Gains of the latent and context rows of the input projection.
const STREAM_GAINS: [f32; 2] = [1.0, 0.05];

fn init(rng: &mut Rng, k: usize, n: usize, gain: f32) -> Result<Tensor> {
    let std = gain / (k as f32).sqrt();
    gaussian(rng, vec![k, n])?.scale(std)
}

/// Weight whose column blocks carry the given gains.
fn init_col_blocks(rng: &mut Rng, k: usize, widths: &[usize], gains: &[f32]) -> Result<Tensor> {
    let parts = widths
        .iter()
        .zip(gains)
        .map(|(&w, &g)| init(rng, k, w, g))
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat_cols(&parts.iter().collect::<Vec<_>>())
}

/// Weight whose row blocks carry the given gains.
fn init_row_blocks(rng: &mut Rng, heights: &[usize], n: usize, gains: &[f32]) -> Result<Tensor> {
    let k: usize = heights.iter().sum();
    let parts = heights
        .iter()
        .zip(gains)
        .map(|(&h, &g)| init(rng, h, n, 1.0)?.scale(g * (h as f32 / k as f32).sqrt()))
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
}

fn bias(rng: &mut Rng, n: usize, gain: f32) -> Result<Tensor> {
    gaussian(rng, vec![n])?.scale(gain)
}

/// DiT-like noise predictor without attention.
///
/// Inputs `x` `[tokens, 4]`, `ctx` `[tokens, 12]` and `temb` `[1, 16]`;
/// output `eps` `[tokens, 4]`. Time layers are prefixed `time.`, latent
/// layers `latent.`.
pub fn build_toy_dit(spec: &ToyModelSpec) -> Result<Graph> {
    if spec.hidden == 0 || spec.tokens == 0 || spec.blocks == 0 {
        return Err(Error::InvalidArgument("toy model sizes must be positive".into()));
    }
    let h = spec.hidden;
    let mut rng = Rng::new(spec.seed);
    let mut b = GraphBuilder::new();
    let x = b.input("x", LATENT_DIM);
    let ctx = b.input("ctx", CONTEXT_DIM);
    let temb = b.input("temb", TIME_EMBED_DIM);

    let t1 = b.linear("time.fc1", &temb, init(&mut rng, TIME_EMBED_DIM, h, 1.0)?, Some(bias(&mut rng, h, 0.1)?));
    let t1a = b.act("time.act1", ActivationFn::Silu, &t1);
    let t2 = b.linear("time.fc2", &t1a, init(&mut rng, h, h, 1.0)?, Some(bias(&mut rng, h, 0.1)?));
    let cond = b.act("time.act2", ActivationFn::Silu, &t2);

    let cat = b.node("latent.cat", NodeKind::Concat { axis: Axis::Features }, &[&x, &ctx]);
    let w_in = init_row_blocks(&mut rng, &[LATENT_DIM, CONTEXT_DIM], h, &STREAM_GAINS)?;
    let mut hcur = b.linear("latent.in_proj", &cat, w_in, None);

    for blk in 0..spec.blocks {
        let p = |s: &str| format!("latent.b{blk}.{s}");
        let ada_id = format!("time.b{blk}.ada");
        let ada = b.linear(
            &ada_id,
            &cond,
            init_col_blocks(&mut rng, h, &[h; 6], &MODULATION_GAINS)?,
            Some(Tensor::zeros(vec![6 * h])?),
        );
        let chunk_id = format!("time.b{blk}.chunk");
        b.node(&chunk_id, NodeKind::Chunk { count: 6, axis: Axis::Features }, &[&ada]);
        let m = |i: usize| GraphBuilder::port(&chunk_id, i);

        let ln1 = b.node(&p("ln1"), NodeKind::LayerNorm { axis: Axis::Features, eps: LAYERNORM_DEFAULT_EPS }, &[&hcur]);
        let mod1 = b.node(&p("mod1"), NodeKind::ScaleShift, &[&ln1, &m(0), &m(1)]);
        let mix = b.linear(&p("mix"), &mod1, init(&mut rng, h, h, 1.0)?, None);
        let g1 = b.node(&p("gate1"), NodeKind::Mul, &[&mix, &m(2)]);
        let h1 = b.node(&p("res1"), NodeKind::Add, &[&hcur, &g1]);

        let ln2 = b.node(&p("ln2"), NodeKind::LayerNorm { axis: Axis::Features, eps: LAYERNORM_DEFAULT_EPS }, &[&h1]);
        let mod2 = b.node(&p("mod2"), NodeKind::ScaleShift, &[&ln2, &m(3), &m(4)]);
        let f1 = b.linear(&p("ff1"), &mod2, init(&mut rng, h, 2 * h, 1.0)?, Some(bias(&mut rng, 2 * h, 0.1)?));
        let fa = b.act(&p("ff_act"), ActivationFn::Gelu, &f1);
        let f2 = b.linear(&p("ff2"), &fa, init(&mut rng, 2 * h, h, 1.0)?, None);
        let g2 = b.node(&p("gate2"), NodeKind::Mul, &[&f2, &m(5)]);
        hcur = b.node(&p("res2"), NodeKind::Add, &[&h1, &g2]);
    }

    let r = b.act("latent.skip_act", ActivationFn::Relu, &hcur);
    let skip = b.linear("latent.skip", &r, init(&mut rng, h, h, 0.5)?, None);
    let merged = b.node("latent.res_skip", NodeKind::Add, &[&hcur, &skip]);
    let out: Port = b.linear("latent.out_proj", &merged, init(&mut rng, h, LATENT_DIM, 1.0)?, None);
    b.output("eps", &out);
    b.build()
}

/// Inputs of the toy model at timestep `t`.
pub fn toy_bindings(x_t: &Tensor, ctx: &Tensor, t: usize) -> Result<Bindings> {
    Ok(BTreeMap::from([
        ("x".to_string(), x_t.clone()),
        ("ctx".to_string(), ctx.clone()),
        ("temb".to_string(), sinusoidal_embedding(t, TIME_EMBED_DIM)?),
    ]))
}

/// Calibration bindings: noised latents at timesteps spread over the schedule.
pub fn toy_calibration(spec: &ToyModelSpec, sched: &NoiseSchedule, samples: usize, seed: u64) -> Result<Vec<Bindings>> {
    let mut rng = Rng::new(seed).split(0xCA11B);
    (0..samples)
        .map(|i| {
            let t = 1 + (i * sched.steps()) / samples.max(1) % sched.steps();
            let x0 = gaussian(&mut rng, vec![spec.tokens, LATENT_DIM])?;
            let noise = gaussian(&mut rng, vec![spec.tokens, LATENT_DIM])?;
            let ctx = gaussian(&mut rng, vec![spec.tokens, CONTEXT_DIM])?;
            toy_bindings(&ddpm_forward(&x0, t, sched, &noise)?, &ctx, t)
        })
        .collect()
}

fn predict(g: &Graph, model: Option<&QuantizedModel>, x: &Tensor, ctx: &Tensor, t: usize) -> Result<Tensor> {
    let b = toy_bindings(x, ctx, t)?;
    let mut out = match model {
        Some(m) => m.run(g, &b)?,
        None => execute(g, &b)?,
    };
    out.remove("eps")
        .ok_or_else(|| Error::InvalidArgument("toy graph has no `eps` output".into()))
}

/// Run the FP32 and quantized samplers from the same `x_T` in deterministic
/// mode and record `‖ε̂_fp − ε̂_q‖_F` at every step, from `t = T` down to 1.
pub fn timestep_error_curve(
    g: &Graph,
    model: &QuantizedModel,
    sched: &NoiseSchedule,
    x_t: &Tensor,
    ctx: &Tensor,
) -> Result<Vec<(usize, f64)>> {
    let (mut xf, mut xq) = (x_t.clone(), x_t.clone());
    let mut curve = Vec::with_capacity(sched.steps());
    for t in (1..=sched.steps()).rev() {
        let ef = predict(g, None, &xf, ctx, t)?;
        let eq = predict(g, Some(model), &xq, ctx, t)?;
        curve.push((t, crate::calibstats::frobenius(&ef, &eq)?));
        xf = ddpm_reverse_step(&xf, &ef, t, sched, None)?;
        xq = ddpm_reverse_step(&xq, &eq, t, sched, None)?;
    }
    Ok(curve)
}

pub fn curve_csv(curve: &[(usize, f64)]) -> String {
    let mut s = String::from("t,frobenius\n");
    for (t, v) in curve {
        s.push_str(&format!("{t},{v}\n"));
    }
    s
}

pub struct DemoOutput {
    pub graph: Graph,
    pub model: QuantizedModel,
    pub report: QuantReport,
    /// `(file stem, curve)` pairs.
    pub curves: Vec<(String, Vec<(usize, f64)>)>,
}

/// Build the toy model, quantize it per `cfg`, and trace the error curve.
pub fn run_demo(cfg: &EngineConfig) -> Result<DemoOutput> {
    cfg.validate()?;
    let spec = ToyModelSpec {
        hidden: cfg.demo.hidden,
        tokens: cfg.demo.tokens,
        seed: cfg.seed,
        blocks: 1,
    };
    let g = build_toy_dit(&spec)?;
    let sched = NoiseSchedule::linear(cfg.demo.steps)?;
    let calib = toy_calibration(&spec, &sched, cfg.demo.calib_samples, cfg.seed)?;
    let (model, report) = quantize_model(&g, &calib, cfg)?;
    let mut rng = Rng::new(cfg.seed).split(0x5A4D);
    let x_t = gaussian(&mut rng, vec![spec.tokens, LATENT_DIM])?;
    let ctx = gaussian(&mut rng, vec![spec.tokens, CONTEXT_DIM])?;
    let mut curves = vec![("curve".to_string(), timestep_error_curve(&g, &model, &sched, &x_t, &ctx)?)];
    if cfg.demo.branches {
        for (stem, prefix) in [("curve_time", "time."), ("curve_latent", "latent.")] {
            let sub = model.restricted_to(&[prefix]);
            curves.push((stem.to_string(), timestep_error_curve(&g, &sub, &sched, &x_t, &ctx)?));
        }
    }
    Ok(DemoOutput {
        graph: g,
        model,
        report,
        curves,
    })
}
