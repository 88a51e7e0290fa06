//! Finite-difference verification of every backward pass.

use serde::Serialize;

use crate::encoder::{build_encoder, ConvSpec, EncoderConfig, NormVariant};
use crate::error::{Error, Result};
use crate::normlayers::{
    batchnorm_backward, batchnorm_forward, channel_stats, crossnorm_backward, crossnorm_forward, sample_crop,
    sample_pairing, selfnorm_backward, selfnorm_forward, BatchNormConfig, BatchNormState, CrossNormConfig, Mode,
    SelfNormConfig, SelfNormParams,
};
use crate::numcore::{
    conv2d, conv2d_backward, grad_check_coords, grad_check_piecewise, linear, linear_backward, relu,
    relu_backward, GradCheckReport, Prng, Tensor,
};

pub const SUITES: &[&str] = &[
    "conv",
    "linear",
    "relu",
    "cn_plain",
    "cn_crop",
    "sn_x",
    "sn_params",
    "bn",
    "encoder",
    "td_loss",
];

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub trials: usize,
    pub tolerance: f64,
    pub eps: f64,
    /// Subset of [`SUITES`]; empty runs all.
    pub suites: Vec<String>,
    /// Suite whose analytic gradient is scaled by 1.01 before comparison.
    pub fault: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: 20,
            tolerance: 1e-4,
            eps: 1e-5,
            suites: Vec::new(),
            fault: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub trials: usize,
    pub coords_checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    /// Shape of the trial that produced `max_rel_error`.
    pub worst_shape: String,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub suites: Vec<SuiteReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }

    /// Error naming every failing suite.
    pub fn into_result(self) -> Result<Self> {
        let failures: Vec<String> = self
            .suites
            .iter()
            .filter(|s| !s.passed)
            .map(|s| format!("{} (shape {}, max rel error {:.3e})", s.name, s.worst_shape, s.max_rel_error))
            .collect();
        if failures.is_empty() {
            Ok(self)
        } else {
            Err(Error::Verification(format!("gradient check failed: {}", failures.join("; "))))
        }
    }
}

pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    if opts.trials == 0 {
        return Err(Error::config("gradcheck needs at least one trial"));
    }
    for s in opts.suites.iter().chain(opts.fault.iter()) {
        if !SUITES.contains(&s.as_str()) {
            return Err(Error::config(format!("unknown gradcheck suite {s:?}; expected one of {SUITES:?}")));
        }
    }
    let root = Prng::new(opts.seed);
    let mut suites = Vec::new();
    for (si, &name) in SUITES.iter().enumerate() {
        if !opts.suites.is_empty() && !opts.suites.iter().any(|s| s == name) {
            continue;
        }
        let scale = if opts.fault.as_deref() == Some(name) { 1.01 } else { 1.0 };
        let mut report: Option<GradCheckReport> = None;
        let mut worst_shape = String::new();
        for t in 0..opts.trials {
            let mut rng = root.split(si as u64).split(t as u64);
            let ctx = Ctx {
                eps: opts.eps,
                scale,
            };
            let (r, shape) = run_trial(name, &ctx, &mut rng)?;
            let better = report.as_ref().is_none_or(|prev| r.max_rel_error > prev.max_rel_error);
            if better {
                worst_shape = shape;
            }
            report = Some(match report {
                None => r,
                Some(prev) => prev.merge(r),
            });
        }
        let report = report.expect("trials > 0");
        suites.push(SuiteReport {
            name: name.to_string(),
            trials: opts.trials,
            coords_checked: report.coords_checked,
            skipped: report.skipped,
            max_rel_error: report.max_rel_error,
            worst_analytic: report.analytic,
            worst_numeric: report.numeric,
            worst_shape,
            passed: report.max_rel_error < opts.tolerance && report.coords_checked > 0,
        });
    }
    Ok(GradcheckReport {
        tolerance: opts.tolerance,
        suites,
    })
}

struct Ctx {
    eps: f64,
    scale: f64,
}

impl Ctx {
    fn check<F>(&self, f: F, at: &Tensor<f64>, analytic: &Tensor<f64>, coords: &[usize]) -> Result<GradCheckReport>
    where
        F: FnMut(&Tensor<f64>) -> Result<f64>,
    {
        grad_check_coords(f, at, &analytic.map(|v| v * self.scale), self.eps, coords)
    }

    fn check_piecewise<F>(
        &self,
        f: F,
        at: &Tensor<f64>,
        analytic: &Tensor<f64>,
        coords: &[usize],
    ) -> Result<GradCheckReport>
    where
        F: FnMut(&Tensor<f64>) -> Result<(f64, u64)>,
    {
        grad_check_piecewise(f, at, &analytic.map(|v| v * self.scale), self.eps, coords)
    }
}

fn uniform(shape: &[usize], rng: &mut Prng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform_range(lo, hi))
}

/// Weighted-sum objective `sum(r * y)`.
fn dot(r: &Tensor<f64>, y: &Tensor<f64>) -> f64 {
    r.data().iter().zip(y.data()).map(|(a, b)| a * b).sum()
}

/// Every coordinate of small tensors, an evenly strided subset of large ones.
fn coords(len: usize, budget: usize, rng: &mut Prng) -> Vec<usize> {
    if len <= budget {
        (0..len).collect()
    } else {
        let mut c = rng.choose_k(len, budget);
        c.sort_unstable();
        c
    }
}

fn merge(reports: Vec<GradCheckReport>) -> GradCheckReport {
    reports.into_iter().reduce(GradCheckReport::merge).expect("at least one report")
}

fn run_trial(name: &str, ctx: &Ctx, rng: &mut Prng) -> Result<(GradCheckReport, String)> {
    match name {
        "conv" => conv_trial(ctx, rng),
        "linear" => linear_trial(ctx, rng),
        "relu" => relu_trial(ctx, rng),
        "cn_plain" => crossnorm_trial(ctx, rng, false),
        "cn_crop" => crossnorm_trial(ctx, rng, true),
        "sn_x" => selfnorm_trial(ctx, rng, false),
        "sn_params" => selfnorm_trial(ctx, rng, true),
        "bn" => batchnorm_trial(ctx, rng),
        "encoder" => encoder_trial(ctx, rng),
        "td_loss" => crate::agent::td_loss_gradcheck_trial(ctx.eps, ctx.scale, rng),
        other => Err(Error::config(format!("unknown gradcheck suite {other:?}"))),
    }
}

fn conv_trial(ctx: &Ctx, rng: &mut Prng) -> Result<(GradCheckReport, String)> {
    let n = rng.int_inclusive(1, 3);
    let cin = rng.int_inclusive(1, 3);
    let cout = rng.int_inclusive(1, 3);
    let k = rng.int_inclusive(1, 3);
    let stride = rng.int_inclusive(1, 2);
    let pad = rng.int_inclusive(0, k / 2);
    let h = rng.int_inclusive(k.max(3), 7);
    let w = rng.int_inclusive(k.max(3), 7);
    let x = uniform(&[n, cin, h, w], rng, -1.0, 1.0);
    let wt = uniform(&[cout, cin, k, k], rng, -1.0, 1.0);
    let b = uniform(&[cout], rng, -1.0, 1.0);
    let y = conv2d(&x, &wt, &b, stride, pad)?;
    let r = uniform(y.shape(), rng, -1.0, 1.0);
    let (gx, gw, gb) = conv2d_backward(&x, &wt, &r, stride, pad)?;
    let shape = format!("x[{n},{cin},{h},{w}] w[{cout},{cin},{k},{k}] s{stride} p{pad}");
    let all = |t: &Tensor<f64>| (0..t.len()).collect::<Vec<_>>();
    let reports = vec![
        ctx.check(|p| Ok(dot(&r, &conv2d(p, &wt, &b, stride, pad)?)), &x, &gx, &all(&x))?,
        ctx.check(|p| Ok(dot(&r, &conv2d(&x, p, &b, stride, pad)?)), &wt, &gw, &all(&wt))?,
        ctx.check(|p| Ok(dot(&r, &conv2d(&x, &wt, p, stride, pad)?)), &b, &gb, &all(&b))?,
    ];
    Ok((merge(reports), shape))
}

fn linear_trial(ctx: &Ctx, rng: &mut Prng) -> Result<(GradCheckReport, String)> {
    let n = rng.int_inclusive(1, 4);
    let din = rng.int_inclusive(1, 6);
    let dout = rng.int_inclusive(1, 5);
    let x = uniform(&[n, din], rng, -1.0, 1.0);
    let w = uniform(&[din, dout], rng, -1.0, 1.0);
    let b = uniform(&[dout], rng, -1.0, 1.0);
    let r = uniform(&[n, dout], rng, -1.0, 1.0);
    let (gx, gw, gb) = linear_backward(&x, &w, &r)?;
    let all = |t: &Tensor<f64>| (0..t.len()).collect::<Vec<_>>();
    let reports = vec![
        ctx.check(|p| Ok(dot(&r, &linear(p, &w, &b)?)), &x, &gx, &all(&x))?,
        ctx.check(|p| Ok(dot(&r, &linear(&x, p, &b)?)), &w, &gw, &all(&w))?,
        ctx.check(|p| Ok(dot(&r, &linear(&x, &w, p)?)), &b, &gb, &all(&b))?,
    ];
    Ok((merge(reports), format!("x[{n},{din}] w[{din},{dout}]")))
}

fn relu_trial(ctx: &Ctx, rng: &mut Prng) -> Result<(GradCheckReport, String)> {
    let shape = [rng.int_inclusive(1, 3), rng.int_inclusive(1, 3), rng.int_inclusive(2, 5), rng.int_inclusive(2, 5)];
    // Keep inputs away from the kink.
    let x = Tensor::from_fn(&shape, |_| {
        let m = rng.uniform_range(0.05, 1.0);
        if rng.bernoulli(0.5) {
            m
        } else {
            -m
        }
    });
    let r = uniform(&shape, rng, -1.0, 1.0);
    let gx = relu_backward(&x, &r);
    let all: Vec<usize> = (0..x.len()).collect();
    let report = ctx.check(|p| Ok(dot(&r, &relu(p))), &x, &gx, &all)?;
    Ok((report, format!("{shape:?}")))
}

fn crossnorm_trial(ctx: &Ctx, rng: &mut Prng, crop: bool) -> Result<(GradCheckReport, String)> {
    let n = rng.int_inclusive(2, 5);
    let c = rng.int_inclusive(1, 3);
    let h = rng.int_inclusive(2, 6);
    let w = rng.int_inclusive(2, 6);
    let cfg = CrossNormConfig {
        crop_enabled: crop,
        ..CrossNormConfig::default()
    };
    let x = Tensor::from_fn(&[n, c, h, w], |i| rng.normal() * (1.0 + (i % 3) as f64) + 0.3);
    let pairing = sample_pairing(rng, n);
    let regions = crop.then(|| (0..n).map(|_| sample_crop(rng, h, w, &cfg)).collect::<Vec<_>>());
    let (y, cache) = crossnorm_forward(&x, &pairing, regions.as_deref(), &cfg)?;
    let r = uniform(y.shape(), rng, -1.0, 1.0);
    let gx = crossnorm_backward(&cache, &r)?;
    let all: Vec<usize> = (0..x.len()).collect();
    let report = ctx.check(
        |p| Ok(dot(&r, &crossnorm_forward(p, &pairing, regions.as_deref(), &cfg)?.0)),
        &x,
        &gx,
        &all,
    )?;
    Ok((report, format!("[{n},{c},{h},{w}] partners {:?}", pairing.partners())))
}

fn selfnorm_trial(ctx: &Ctx, rng: &mut Prng, params_grad: bool) -> Result<(GradCheckReport, String)> {
    let n = rng.int_inclusive(1, 4);
    let c = rng.int_inclusive(1, 3);
    let h = rng.int_inclusive(2, 5);
    let w = rng.int_inclusive(2, 5);
    let cfg = SelfNormConfig {
        hidden: rng.int_inclusive(1, 3),
        // Keep the gates away from saturation so parameter gradients are informative.
        init_output_bias: rng.uniform_range(-1.0, 1.0),
        init_scale: 1.0,
    };
    let params: SelfNormParams<f64> = SelfNormParams::init(c, &cfg, rng);
    let x = Tensor::from_fn(&[n, c, h, w], |_| rng.normal() + 0.5);
    let forward = |x: &Tensor<f64>, p: &SelfNormParams<f64>| -> Result<Tensor<f64>> {
        let stats = channel_stats(x, None)?;
        Ok(selfnorm_forward(x, &stats, p)?.0)
    };
    let y = forward(&x, &params)?;
    let r = uniform(y.shape(), rng, -1.0, 1.0);
    let stats = channel_stats(&x, None)?;
    let (_, cache) = selfnorm_forward(&x, &stats, &params)?;
    let (gx, gp) = selfnorm_backward(&cache, &r)?;
    let shape = format!("[{n},{c},{h},{w}] hidden {}", cfg.hidden);
    if !params_grad {
        let all: Vec<usize> = (0..x.len()).collect();
        let report = ctx.check(|p| Ok(dot(&r, &forward(p, &params)?)), &x, &gx, &all)?;
        return Ok((report, shape));
    }
    let gp = gp.expect("learned gates");
    let mut reports = Vec::new();
    for (ti, (_, grad)) in gp.tensors().into_iter().enumerate() {
        let at = params.tensors()[ti].1.clone();
        let all: Vec<usize> = (0..at.len()).collect();
        reports.push(ctx.check(
            |p| {
                let mut q = params.clone();
                *q.tensors_mut()[ti] = p.clone();
                Ok(dot(&r, &forward(&x, &q)?))
            },
            &at,
            grad,
            &all,
        )?);
    }
    Ok((merge(reports), shape))
}

fn batchnorm_trial(ctx: &Ctx, rng: &mut Prng) -> Result<(GradCheckReport, String)> {
    let n = rng.int_inclusive(2, 4);
    let c = rng.int_inclusive(1, 3);
    let h = rng.int_inclusive(2, 4);
    let w = rng.int_inclusive(2, 4);
    let mut state = BatchNormState::<f64>::new(c, &BatchNormConfig::default());
    state.gamma = uniform(&[c], rng, 0.5, 1.5);
    state.beta = uniform(&[c], rng, -0.5, 0.5);
    let x = Tensor::from_fn(&[n, c, h, w], |_| rng.normal());
    let forward = |x: &Tensor<f64>, gamma: &Tensor<f64>, beta: &Tensor<f64>| -> Result<Tensor<f64>> {
        let mut s = state.clone();
        s.gamma = gamma.clone();
        s.beta = beta.clone();
        Ok(batchnorm_forward(x, &mut s, Mode::Train)?.0)
    };
    let y = forward(&x, &state.gamma, &state.beta)?;
    let r = uniform(y.shape(), rng, -1.0, 1.0);
    let (_, cache) = batchnorm_forward(&x, &mut state.clone(), Mode::Train)?;
    let (gx, gg, gb) = batchnorm_backward(&cache, &r)?;
    let all = |t: &Tensor<f64>| (0..t.len()).collect::<Vec<_>>();
    let reports = vec![
        ctx.check(|p| Ok(dot(&r, &forward(p, &state.gamma, &state.beta)?)), &x, &gx, &all(&x))?,
        ctx.check(|p| Ok(dot(&r, &forward(&x, p, &state.beta)?)), &state.gamma, &gg, &all(&state.gamma))?,
        ctx.check(|p| Ok(dot(&r, &forward(&x, &state.gamma, p)?)), &state.beta, &gb, &all(&state.beta))?,
    ];
    Ok((merge(reports), format!("[{n},{c},{h},{w}]")))
}

fn encoder_trial(ctx: &Ctx, rng: &mut Prng) -> Result<(GradCheckReport, String)> {
    let variants = [
        NormVariant::Cnsn,
        NormVariant::CnOnly,
        NormVariant::SnOnly,
        NormVariant::Bn,
        NormVariant::None,
    ];
    let norm = variants[rng.below(variants.len() as u64) as usize];
    let layers = rng.int_inclusive(1, 3);
    let specs: Vec<ConvSpec> = (0..layers)
        .map(|i| ConvSpec {
            out_channels: rng.int_inclusive(2, 3),
            kernel: 3,
            stride: if i == 0 { 2 } else { 1 },
            pad: 1,
        })
        .collect();
    let side = rng.int_inclusive(6, 9);
    let crop = rng.bernoulli(0.5);
    let mut cfg = EncoderConfig {
        input: [rng.int_inclusive(1, 3), side, side],
        layers: specs,
        norms: vec![norm; layers],
        k_active: 0,
        feature_dim: rng.int_inclusive(2, 4),
        crossnorm: CrossNormConfig {
            crop_enabled: crop,
            ..CrossNormConfig::default()
        },
        selfnorm: SelfNormConfig {
            init_output_bias: 1.0,
            init_scale: 0.5,
            ..SelfNormConfig::default()
        },
        ..EncoderConfig::default()
    };
    cfg.k_active = rng.int_inclusive(0, cfg.crossnorm_layers());
    let n = rng.int_inclusive(2, 4);
    let enc = build_encoder::<f64>(&cfg, &mut rng.split_named("init"))?;
    let mut mask_rng = rng.split_named("mask");
    let mask = crate::encoder::sample_active_mask(&mut mask_rng, &cfg);
    let draw_rng = rng.split_named("draws");
    let [c, h, w] = cfg.input;
    let obs = uniform(&[n, c, h, w], rng, -0.5, 0.5);
    let (features, cache) = enc.encode(&obs, &mask, Mode::Train, &mut draw_rng.clone())?;
    let r = uniform(features.shape(), rng, -1.0, 1.0);
    let (g_obs, grads) = enc.encode_backward(&cache, &r, true)?;
    let g_obs = g_obs.expect("requested");
    let eval = |e: &crate::encoder::EncoderState<f64>, o: &Tensor<f64>| -> Result<(f64, u64)> {
        let (f, cache) = e.encode(o, &mask, Mode::Train, &mut draw_rng.clone())?;
        Ok((dot(&r, &f), cache.activation_signature()))
    };
    let mut reports = vec![ctx.check_piecewise(|p| eval(&enc, p), &obs, &g_obs, &coords(obs.len(), 40, rng))?];
    let params: Vec<Tensor<f64>> = enc.param_tensors().into_iter().map(|(_, t)| t.clone()).collect();
    for (ti, (at, grad)) in params.iter().zip(&grads).enumerate() {
        let picks = coords(at.len(), 12, rng);
        reports.push(ctx.check_piecewise(
            |p| {
                let mut e = enc.clone();
                *e.param_tensors_mut()[ti] = p.clone();
                eval(&e, &obs)
            },
            at,
            grad,
            &picks,
        )?);
    }
    let shape = format!(
        "{norm:?} x{layers} input {:?} batch {n} k {} crop {crop}",
        cfg.input, cfg.k_active
    );
    Ok((merge(reports), shape))
}
