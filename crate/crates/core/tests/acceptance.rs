//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Failures are reported without failing the process unless
//! `SEGQUANT_ACCEPTANCE_STRICT=1` is set.

#![allow(clippy::needless_range_loop)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use segquant::calibrators::{amax_calibrate, gptq_weight, GptqConfig, LayerSchemes};
use segquant::engine::{evaluate, quantize_model, EngineConfig};
use segquant::graphir::Graph;
use segquant::harness::{ddpm_forward, ddpm_reverse_step, toy_calibration, NoiseSchedule, ToyModelSpec};
use segquant::numerics::{gaussian, Rng, Tensor};
use segquant::optimizers::{default_alpha_grid, sweep_alpha, svd_lowrank, LowRankConfig, SmoothConfig};
use segquant::quantcore::{
    dequantize, qgemm, quantize, seg_linear_forward, Granularity, Payload, QParams, QuantizedTensor, Role, Scheme,
    Segments,
};
use segquant::seginfer::{build_plan, find_act_to_linear, PlanToggles, SegmentPlan};

const DUAL_IMPROVEMENT_RATIO: f64 = 134.42669570262555;
const ABLATION_MSE: [(&str, f64); 4] = [
    ("baseline", 4.930196860153832e-5),
    ("seg", 4.903968411767068e-5),
    ("dual", 4.708154905745032e-5),
    ("seg+dual", 4.4316262226243256e-5),
];

/// Expected `(in_segments, out_segments, dual-scale source)` of a layer.
type ExpectedPlan<'a> = (Vec<usize>, Vec<usize>, Option<&'a str>);
type Criterion = (&'static str, fn() -> Outcome, Option<Duration>);

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn check(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/toy_dit")
}

fn load_fixture() -> (Graph, Vec<BTreeMap<String, Tensor>>) {
    let dir = fixture_dir();
    let g = Graph::load(&dir.join("graph.json"), &dir.join("weights.bin")).unwrap();
    let calib = segquant::cli::read_calib(&dir.join("calib.bin")).unwrap();
    (g, calib)
}

fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn matmul64(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    out
}

fn frob_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn frob(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn group_of(widths: &[usize]) -> Vec<usize> {
    widths.iter().enumerate().flat_map(|(g, &w)| std::iter::repeat_n(g, w)).collect()
}

/// Decode every code straight from its block's parameters.
fn oracle_decode(q: &QuantizedTensor) -> Vec<f64> {
    let rg = group_of(&q.layout.row_groups);
    let cg = group_of(&q.layout.col_groups);
    let ncg = q.layout.col_groups.len();
    let mut out = Vec::with_capacity(q.rows * q.cols);
    for r in 0..q.rows {
        for c in 0..q.cols {
            let p = q.params[rg[r] * ncg + cg[c]];
            let i = r * q.cols + c;
            let v = match (&q.payload, p) {
                (Payload::Int(t), QParams::Symmetric { scale, .. }) => scale as f64 * t.data()[i] as f64,
                (
                    Payload::Int(t),
                    QParams::Asymmetric {
                        scale, zero_point, ..
                    },
                ) => scale as f64 * (t.data()[i] - zero_point) as f64,
                (
                    Payload::Dual { pos, neg },
                    QParams::Dual {
                        pos_scale,
                        neg_scale,
                        ..
                    },
                ) => pos_scale as f64 * pos.data()[i] as f64 + neg_scale as f64 * neg.data()[i] as f64,
                other => panic!("unexpected payload/params pair {:?}", other.1),
            };
            out.push(v);
        }
    }
    out
}

/// `Σ_segments s_x·s_w·Σ(x̂ − z_x)(ŵ − z_w)` without the rowsum expansion.
fn unexpanded_asym(xq: &QuantizedTensor, wq: &QuantizedTensor) -> Vec<f32> {
    let (m, k, n) = (xq.rows, xq.cols, wq.cols);
    assert_eq!(xq.layout.col_groups, wq.segments.rows);
    assert_eq!(wq.layout.row_groups, wq.segments.rows);
    let (Payload::Int(xc), Payload::Int(wc)) = (&xq.payload, &wq.payload) else {
        panic!("integer payloads expected")
    };
    let xrg = group_of(&xq.layout.row_groups);
    let wcg = group_of(&wq.layout.col_groups);
    let bounds: Vec<usize> = std::iter::once(0)
        .chain(wq.segments.rows.iter().scan(0, |a, &w| {
            *a += w;
            Some(*a)
        }))
        .collect();
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f32;
            for (s, b) in bounds.windows(2).enumerate() {
                let xp = xq.params[xrg[i] * xq.layout.col_groups.len() + s];
                let wp = wq.params[s * wq.layout.col_groups.len() + wcg[j]];
                let (QParams::Asymmetric { scale: sx, zero_point: zx, .. }, QParams::Asymmetric { scale: sw, zero_point: zw, .. }) =
                    (xp, wp)
                else {
                    panic!("asymmetric parameters expected")
                };
                let dot: i64 = (b[0]..b[1])
                    .map(|c| (xc.data()[i * k + c] - zx) as i64 * (wc.data()[c * n + j] - zw) as i64)
                    .sum();
                acc += sx * (sw * dot as f32);
            }
            out.push(acc);
        }
    }
    out
}

fn random_widths(rng: &mut Rng, total: usize) -> Vec<usize> {
    let mut widths = Vec::new();
    let mut left = total;
    while left > 0 {
        let w = 1 + (rng.next_u64() as usize % left);
        widths.push(w);
        left -= w;
    }
    widths
}

fn criterion_recovery() -> Outcome {
    let mut worst = [0.0f64; 3];
    let mut bitwise_misses = 0;
    for case in 0..200u64 {
        let mut rng = Rng::new(1000 + case);
        let dim = |rng: &mut Rng| 1 + (rng.next_u64() % 8) as usize;
        let (m, k, n) = (dim(&mut rng), dim(&mut rng), dim(&mut rng));
        let bits = if rng.next_u64().is_multiple_of(2) { 8 } else { 4 };
        let segs = random_widths(&mut rng, k);
        let x = gaussian(&mut rng, vec![m, k]).unwrap().map(|v| v * 2.0 - 0.3).unwrap();
        let w = gaussian(&mut rng, vec![k, n]).unwrap();
        let xg = if rng.next_u64().is_multiple_of(2) { Granularity::PerTensor } else { Granularity::PerTokenDynamic };
        let wg = if rng.next_u64().is_multiple_of(2) { Granularity::PerTensor } else { Granularity::PerChannel };
        let xseg = Segments::columns(m, segs.clone());
        let wseg = Segments {
            rows: segs.clone(),
            cols: vec![n],
        };
        let paths = [
            (Scheme::int_sym(bits), Scheme::int_sym(bits)),
            (Scheme::int_asym(bits), Scheme::int_asym(bits)),
            (Scheme::dual(bits), Scheme::int_sym(bits)),
        ];
        for (pi, (xs, ws)) in paths.into_iter().enumerate() {
            let xq = quantize(&x, xs.with_granularity(xg), Role::Activation, &xseg).unwrap();
            let wq = quantize(&w, ws.with_granularity(wg), Role::Weight, &wseg).unwrap();
            let y = qgemm(&xq, &wq).unwrap();
            let oracle = matmul64(&oracle_decode(&xq), &oracle_decode(&wq), m, k, n);
            let norm = frob(&oracle);
            let rel = if norm == 0.0 { frob(&to_f64(&y)) } else { frob_diff(&to_f64(&y), &oracle) / norm };
            worst[pi] = worst[pi].max(rel);
            if pi == 1 {
                let plain = unexpanded_asym(&xq, &wq);
                if plain.iter().zip(y.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
                    bitwise_misses += 1;
                }
            }
        }
    }
    Outcome::check(
        worst.iter().all(|&w| w <= 1e-6) && bitwise_misses == 0,
        format!(
            "max rel err sym {:.2e}, asym {:.2e}, dual {:.2e}; asym bitwise mismatches {bitwise_misses}/200",
            worst[0], worst[1], worst[2]
        ),
    )
}

fn silu(v: f32) -> f32 {
    v / (1.0 + (-v).exp())
}

/// Round-trip with `scale = amax/q_max` on `[−q_max, q_max]`.
fn oracle_sym(x: &[f32], bits: u8) -> Vec<f32> {
    let q_max = ((1 << (bits - 1)) - 1) as f32;
    let amax = x.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1e-8);
    let s = amax / q_max;
    x.iter().map(|&v| s * (v / s).round().clamp(-q_max, q_max)).collect()
}

/// Round-trip with `s₋ = |min|/2^(b−1)` and `s₊ = max/(2^(b−1)−1)`.
fn oracle_dual(x: &[f32], bits: u8) -> Vec<f32> {
    let half = (1 << (bits - 1)) as f32;
    let min = x.iter().copied().fold(0.0f32, f32::min);
    let max = x.iter().copied().fold(0.0f32, f32::max);
    let sn = min.abs().max(1e-8) / half;
    let sp = max.max(1e-8) / (half - 1.0);
    x.iter()
        .map(|&v| {
            if v < 0.0 {
                sn * (v / sn).round().clamp(-half, 0.0)
            } else {
                sp * (v / sp).round().clamp(0.0, half - 1.0)
            }
        })
        .collect()
}

fn criterion_dual_dominance() -> Outcome {
    let (rows, cols) = (16, 64);
    let mut violating_tensors = 0;
    let mut violating_entries = 0usize;
    let mut negatives = 0usize;
    let mut strictly_lower = 0;
    let mut library_mismatch = 0;
    let mut ratio_sum = 0.0;
    let mut min_seen = 0.0f32;
    for trial in 0..100u64 {
        let mut rng = Rng::new(2000 + trial);
        let x = gaussian(&mut rng, vec![rows, cols]).unwrap().map(silu).unwrap();
        let seg = Segments::whole(rows, cols);
        let dual = dequantize(&quantize(&x, Scheme::dual(8), Role::Activation, &seg).unwrap());
        let sym = dequantize(&quantize(&x, Scheme::int_sym(8), Role::Activation, &seg).unwrap());
        if dual.data() != oracle_dual(x.data(), 8).as_slice() || sym.data() != oracle_sym(x.data(), 8).as_slice() {
            library_mismatch += 1;
        }
        min_seen = min_seen.min(x.min());
        let (mut ed, mut es, mut cnt, mut viol) = (0.0f64, 0.0f64, 0usize, 0usize);
        for ((&v, &d), &s) in x.data().iter().zip(dual.data()).zip(sym.data()) {
            if v < 0.0 {
                let (a, b) = ((d - v).abs(), (s - v).abs());
                if a > b {
                    viol += 1;
                }
                ed += (a as f64).powi(2);
                es += (b as f64).powi(2);
                cnt += 1;
            }
        }
        negatives += cnt;
        violating_entries += viol;
        if viol > 0 {
            violating_tensors += 1;
        }
        if ed < es {
            strictly_lower += 1;
        }
        ratio_sum += es / ed;
    }
    let ratio = ratio_sum / 100.0;
    let pinned = (ratio - DUAL_IMPROVEMENT_RATIO).abs() <= 1e-6 * DUAL_IMPROVEMENT_RATIO;
    Outcome::check(
        violating_tensors == 0 && strictly_lower == 100 && pinned && library_mismatch == 0,
        format!(
            "per-element dominance violated on {violating_entries}/{negatives} negative entries in {violating_tensors}/100 tensors; \
             negative MSE strictly lower in {strictly_lower}/100; mean sym/dual MSE ratio {ratio:?} (pinned {}); \
             min seen {min_seen:.4}; oracle mismatches {library_mismatch}",
            if pinned { "ok" } else { "MISMATCH" }
        ),
    )
}

fn plan_with(k: usize, n: usize, ins: &[usize], outs: &[usize]) -> SegmentPlan {
    let mut p = SegmentPlan::singleton("layer", k, n);
    p.in_segments = ins.to_vec();
    p.out_segments = outs.to_vec();
    p
}

/// Weight whose (input segment, output segment) blocks carry the given gains.
fn heterogeneous_weight(rng: &mut Rng, ins: &[usize], outs: &[usize], in_gain: &[f32], out_gain: &[f32]) -> Tensor {
    let (k, n): (usize, usize) = (ins.iter().sum(), outs.iter().sum());
    let rg = group_of(ins);
    let cg = group_of(outs);
    let base = gaussian(rng, vec![k, n]).unwrap();
    let data = base
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v * in_gain[rg[i / n]] * out_gain[cg[i % n]])
        .collect();
    Tensor::new(vec![k, n], data).unwrap()
}

fn output_error(x: &Tensor, w: &Tensor, wq: &QuantizedTensor) -> f64 {
    let (m, k, n) = (x.rows(), w.rows(), w.cols());
    let xd = to_f64(x);
    frob_diff(&matmul64(&xd, &to_f64(w), m, k, n), &matmul64(&xd, &to_f64(&dequantize(wq)), m, k, n))
}

fn criterion_seglinear() -> Outcome {
    let ins = [4usize, 12];
    let outs = [8usize, 8, 8];
    let (k, n) = (16, 24);
    let scheme = Scheme::int_sym(8).with_granularity(Granularity::PerTensor);
    let whole = SegmentPlan::singleton("layer", k, n);
    let seg = plan_with(k, n, &ins, &outs);
    let cfg = GptqConfig::default();
    let (mut amax_wins, mut gptq_wins, mut bitwise) = (0, 0, 0);
    for trial in 0..100u64 {
        let mut rng = Rng::new(3000 + trial);
        let w = heterogeneous_weight(&mut rng, &ins, &outs, &[1.0, 0.1], &[1.0, 0.1, 0.01]);
        let x = gaussian(&mut rng, vec![32, k]).unwrap();
        let schemes = LayerSchemes {
            weight: Some(scheme),
            activation: None,
        };
        let rtn = |plan: &SegmentPlan| match amax_calibrate(&w, None, plan, schemes).unwrap().weight {
            segquant::calibrators::LayerWeight::Coded(q) => q,
            _ => unreachable!(),
        };
        if output_error(&x, &w, &rtn(&seg)) < output_error(&x, &w, &rtn(&whole)) {
            amax_wins += 1;
        }
        let g_seg = gptq_weight(&w, &x, &seg, scheme, &cfg).unwrap().0;
        let g_whole = gptq_weight(&w, &x, &whole, scheme, &cfg).unwrap().0;
        if output_error(&x, &w, &g_seg) < output_error(&x, &w, &g_whole) {
            gptq_wins += 1;
        }
        let mut same = true;
        for xs in [Scheme::int_sym(8), Scheme::int_asym(8), Scheme::dual(8)] {
            let xq = quantize(&x, xs, Role::Activation, &Segments::columns(32, ins.to_vec())).unwrap();
            for wq in [rtn(&seg), g_seg.clone()] {
                let a = seg_linear_forward(&xq, &wq).unwrap();
                let b = qgemm(&xq, &wq).unwrap();
                same &= a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits());
            }
        }
        if same {
            bitwise += 1;
        }
    }
    Outcome::check(
        amax_wins == 100 && gptq_wins == 100 && bitwise == 100,
        format!("segmented strictly better: amax {amax_wins}/100, gptq {gptq_wins}/100; segment-wise == monolithic bitwise {bitwise}/100"),
    )
}

/// Exhaustive search written from the objective's definition.
fn oracle_alpha(x: &Tensor, w: &Tensor, ins: &[usize], outs: &[usize], grid: &[f32]) -> Vec<f32> {
    let (rows, n) = (x.rows(), w.cols());
    let fake_sym = |v: &[f32]| oracle_sym(v, 8);
    let mut chosen = Vec::new();
    let mut start = 0;
    for &len in ins {
        let xa: Vec<f32> = (start..start + len)
            .map(|c| (0..rows).fold(0.0f32, |m, r| m.max(x.at(r, c).abs())))
            .collect();
        let wa: Vec<f32> = (start..start + len)
            .map(|r| w.row(r).iter().fold(0.0f32, |m, v| m.max(v.abs())))
            .collect();
        let xs: Vec<f32> = (0..rows).flat_map(|r| (start..start + len).map(move |c| (r, c))).map(|(r, c)| x.at(r, c)).collect();
        let ws: Vec<f32> = (start..start + len).flat_map(|r| w.row(r).to_vec()).collect();
        let reference = matmul64(
            &xs.iter().map(|&v| v as f64).collect::<Vec<_>>(),
            &ws.iter().map(|&v| v as f64).collect::<Vec<_>>(),
            rows,
            len,
            n,
        );
        let mut best: Option<(f64, f32)> = None;
        for &alpha in grid {
            let s: Vec<f32> = xa
                .iter()
                .zip(&wa)
                .map(|(&a, &b)| a.max(1e-8).powf(alpha) / b.max(1e-8).powf(1.0 - alpha))
                .collect();
            let xsm: Vec<f32> = xs.iter().enumerate().map(|(i, &v)| v / s[i % len]).collect();
            let wsm: Vec<f32> = ws.iter().enumerate().map(|(i, &v)| v * s[i / n]).collect();
            let xq = fake_sym(&xsm);
            // Weight parameters: per output column.
            let mut wq = vec![0.0f32; len * n];
            let mut col0 = 0;
            for &ow in outs {
                for c in col0..col0 + ow {
                    let col: Vec<f32> = (0..len).map(|r| wsm[r * n + c]).collect();
                    for (r, v) in fake_sym(&col).into_iter().enumerate() {
                        wq[r * n + c] = v;
                    }
                }
                col0 += ow;
            }
            let y = matmul64(
                &xq.iter().map(|&v| v as f64).collect::<Vec<_>>(),
                &wq.iter().map(|&v| v as f64).collect::<Vec<_>>(),
                rows,
                len,
                n,
            );
            let err = reference.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64;
            if best.is_none_or(|(e, _)| err < e) {
                best = Some((err, alpha));
            }
        }
        chosen.push(best.unwrap().1);
        start += len;
    }
    chosen
}

fn criterion_alpha_sweep() -> Outcome {
    let grid = default_alpha_grid();
    let cfg = SmoothConfig::default();
    let (ins, outs) = ([4usize, 8], [6usize, 6]);
    let (k, n) = (12, 12);
    let schemes = LayerSchemes {
        weight: Some(Scheme::int_sym(8).with_granularity(Granularity::PerChannel)),
        activation: Some(Scheme::int_sym(8)),
    };
    let (mut agree, mut worst_neutral) = (0, 0.0f64);
    for trial in 0..50u64 {
        let mut rng = Rng::new(4000 + trial);
        let outlier: Vec<f32> = (0..k).map(|_| 10f32.powf(rng.uniform(-1.0, 1.5))).collect();
        let x = gaussian(&mut rng, vec![24, k])
            .unwrap()
            .zip_map(
                &Tensor::new(vec![24, k], (0..24 * k).map(|i| outlier[i % k]).collect()).unwrap(),
                |a, b| a * b,
            )
            .unwrap();
        let w = gaussian(&mut rng, vec![k, n]).unwrap();
        let plan = plan_with(k, n, &ins, &outs);
        let res = sweep_alpha(&w, std::slice::from_ref(&x), &plan, schemes, &cfg).unwrap();
        if res.alphas == oracle_alpha(&x, &w, &ins, &outs, &grid) {
            agree += 1;
        }
        let xs: Vec<f64> = x.data().iter().enumerate().map(|(i, &v)| (v / res.smoothing[i % k]) as f64).collect();
        let reference = matmul64(&to_f64(&x), &to_f64(&w), 24, k, n);
        let smoothed = matmul64(&xs, &to_f64(&res.weight), 24, k, n);
        worst_neutral = worst_neutral.max(frob_diff(&reference, &smoothed) / frob(&reference));
    }
    Outcome::check(
        agree == 50 && worst_neutral <= 1e-6,
        format!("argmin agrees {agree}/50; worst smoothing neutrality {worst_neutral:.2e}"),
    )
}

fn correlated_inputs(rng: &mut Rng, rows: usize, k: usize) -> Tensor {
    let z = gaussian(rng, vec![rows, k]).unwrap();
    let mix = gaussian(rng, vec![k, k]).unwrap();
    z.matmul(&mix).unwrap()
}

fn calib_mse(x: &Tensor, w: &Tensor, wq: &QuantizedTensor) -> f64 {
    output_error(x, w, wq).powi(2) / (x.rows() * w.cols()) as f64
}

fn criterion_gptq() -> Outcome {
    let (k, n) = (16, 8);
    let scheme = Scheme::int_sym(4).with_granularity(Granularity::PerChannel);
    let plan = SegmentPlan::singleton("layer", k, n);
    let mut wins = 0;
    let mut worst_degenerate = 0.0f32;
    for trial in 0..100u64 {
        let mut rng = Rng::new(5000 + trial);
        let x = correlated_inputs(&mut rng, 64, k);
        let w = gaussian(&mut rng, vec![k, n]).unwrap();
        let rtn = quantize(&w, scheme, Role::Weight, &Segments::whole(k, n)).unwrap();
        let (gq, _) = gptq_weight(&w, &x, &plan, scheme, &GptqConfig::default()).unwrap();
        if calib_mse(&x, &w, &gq) <= calib_mse(&x, &w, &rtn) {
            wins += 1;
        }
        let damped = GptqConfig {
            damping: 1e6,
            ..GptqConfig::default()
        };
        let (dq, _) = gptq_weight(&w, &x, &plan, scheme, &damped).unwrap();
        let diff = dequantize(&dq)
            .data()
            .iter()
            .zip(dequantize(&rtn).data())
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
        worst_degenerate = worst_degenerate.max(diff);
    }
    Outcome::check(
        wins >= 95 && worst_degenerate <= 1e-5,
        format!("gptq <= rtn in {wins}/100 layers; damping 1e6 max |Δw| vs rtn {worst_degenerate:.2e}"),
    )
}

fn criterion_svd() -> Outcome {
    let mut worst = 0.0f64;
    for trial in 0..50u64 {
        let mut rng = Rng::new(6000 + trial);
        let k = 4 + (rng.next_u64() % 13) as usize;
        let n = 4 + (rng.next_u64() % 13) as usize;
        let rank = 1 + (rng.next_u64() as usize % (k.min(n) - 1));
        let w = gaussian(&mut rng, vec![k, n]).unwrap();
        let lr = svd_lowrank(&w, &LowRankConfig { rank }).unwrap();
        let m = nalgebra::DMatrix::from_row_slice(k, n, &to_f64(&w));
        let mut eig: Vec<f64> = (m.transpose() * &m).symmetric_eigenvalues().iter().map(|&e| e.max(0.0)).collect();
        eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let tail = eig[rank..].iter().sum::<f64>().sqrt();
        worst = worst.max((lr.residual_norm() - tail).abs() / tail);
    }
    Outcome::check(worst <= 1e-5, format!("worst relative residual mismatch {worst:.2e} over 50 matrices"))
}

fn criterion_ddpm() -> Outcome {
    let steps = 10;
    let sched = NoiseSchedule::linear(steps).unwrap();
    let (mut worst_round_trip, mut worst_forward) = (0.0f64, 0.0f64);
    for trial in 0..20u64 {
        let mut rng = Rng::new(7000 + trial);
        let x0 = gaussian(&mut rng, vec![8, 4]).unwrap();
        let x0d = to_f64(&x0);

        // Iterated one-step corruption with a fresh draw per step; the closed
        // form gets the equivalent aggregated noise.
        let mut x = x0d.clone();
        let mut noise_acc = vec![0.0f64; x.len()];
        for t in 1..=steps {
            let (beta, ab) = (sched.beta(t).unwrap(), sched.alpha_bar(t).unwrap());
            let eps = gaussian(&mut rng, vec![8, 4]).unwrap();
            for i in 0..x.len() {
                x[i] = (1.0 - beta).sqrt() * x[i] + beta.sqrt() * eps.data()[i] as f64;
                noise_acc[i] = (1.0 - beta).sqrt() * noise_acc[i] + beta.sqrt() * eps.data()[i] as f64;
            }
            let n = Tensor::new(vec![8, 4], noise_acc.iter().map(|&v| (v / (1.0 - ab).sqrt()) as f32).collect()).unwrap();
            let closed = ddpm_forward(&x0, t, &sched, &n).unwrap();
            worst_forward = worst_forward.max(closed.data().iter().zip(&x).fold(0.0, |m, (&a, &b)| m.max((a as f64 - b).abs())));
        }

        let noise = gaussian(&mut rng, vec![8, 4]).unwrap();
        let mut xt = ddpm_forward(&x0, steps, &sched, &noise).unwrap();
        for t in (1..=steps).rev() {
            let ab = sched.alpha_bar(t).unwrap();
            let eps: Vec<f32> = xt
                .data()
                .iter()
                .zip(&x0d)
                .map(|(&v, &o)| ((v as f64 - ab.sqrt() * o) / (1.0 - ab).sqrt()) as f32)
                .collect();
            xt = ddpm_reverse_step(&xt, &Tensor::new(vec![8, 4], eps).unwrap(), t, &sched, None).unwrap();
        }
        worst_round_trip = worst_round_trip.max(xt.data().iter().zip(&x0d).fold(0.0, |m, (&a, &b)| m.max((a as f64 - b).abs())));
    }
    Outcome::check(
        worst_round_trip <= 1e-4 && worst_forward <= 1e-5,
        format!("reverse chain max |x0 err| {worst_round_trip:.2e}; closed form vs recursion {worst_forward:.2e}"),
    )
}

fn criterion_plans() -> Outcome {
    let (g, _) = load_fixture();
    let plan = build_plan(&g, PlanToggles::default());
    let expected: BTreeMap<&str, ExpectedPlan> = BTreeMap::from([
        ("latent.b0.ff1", (vec![16], vec![32], None)),
        ("latent.b0.ff2", (vec![32], vec![16], Some("latent.b0.ff_act"))),
        ("latent.b0.mix", (vec![16], vec![16], None)),
        ("latent.in_proj", (vec![4, 12], vec![16], None)),
        ("latent.out_proj", (vec![16], vec![4], None)),
        ("latent.skip", (vec![16], vec![16], None)),
        ("time.b0.ada", (vec![16], vec![16; 6], Some("time.act2"))),
        ("time.fc1", (vec![16], vec![16], None)),
        ("time.fc2", (vec![16], vec![16], Some("time.act1"))),
    ]);
    let mut mismatches = Vec::new();
    if plan.layers.len() != expected.len() {
        mismatches.push(format!("{} plans for {} layers", plan.layers.len(), expected.len()));
    }
    for (id, (ins, outs, src)) in &expected {
        match plan.layers.get(*id) {
            Some(p)
                if &p.in_segments == ins
                    && &p.out_segments == outs
                    && p.dualscale_eligible == src.is_some()
                    && p.provenance.dualscale_source.as_deref() == *src => {}
            _ => mismatches.push(id.to_string()),
        }
    }
    let pairs = find_act_to_linear(&g);
    let relu_excluded = pairs.iter().all(|(a, l)| a != "latent.skip_act" && l != "latent.skip");
    Outcome::check(
        mismatches.is_empty() && pairs.len() >= 2 && relu_excluded,
        format!(
            "{} layers checked, mismatches {:?}; {} act-to-linear pairs; relu path excluded: {relu_excluded}",
            expected.len(),
            mismatches,
            pairs.len()
        ),
    )
}

fn run_cli(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_segquant"))
        .args(args)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

fn criterion_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let fx = fixture_dir();
    let (graph, weights, calib, config) = (
        fx.join("graph.json"),
        fx.join("weights.bin"),
        fx.join("calib.bin"),
        fx.join("config.toml"),
    );
    let mut runs = Vec::new();
    for run in 0..2 {
        let q = tmp.path().join(format!("quantize{run}"));
        let d = tmp.path().join(format!("demo{run}"));
        let ok_q = run_cli(&[
            "quantize",
            "--graph",
            graph.to_str().unwrap(),
            "--weights",
            weights.to_str().unwrap(),
            "--calib",
            calib.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "--set",
            "calibrator.method=gptq",
            "--set",
            "optimizer.method=smooth_svd",
            "--out",
            q.to_str().unwrap(),
        ]);
        let ok_d = run_cli(&[
            "demo-ddpm",
            "--config",
            config.to_str().unwrap(),
            "--set",
            "demo.branches=true",
            "--out",
            d.to_str().unwrap(),
        ]);
        if !(ok_q && ok_d) {
            return Outcome::check(false, "a CLI run failed");
        }
        runs.push((dir_bytes(&q), dir_bytes(&d)));
    }
    let files = runs[0].0.len() + runs[0].1.len();
    Outcome::check(
        runs[0] == runs[1] && files == 7,
        format!("{files} output files compared across two runs; identical: {}", runs[0] == runs[1]),
    )
}

fn ablation_mse(inputs: &[BTreeMap<String, Tensor>]) -> BTreeMap<&'static str, f64> {
    let (g, calib) = load_fixture();
    let base = fs::read_to_string(fixture_dir().join("config.toml")).unwrap();
    let mut mse = BTreeMap::new();
    for (name, seg, dual) in [("baseline", false, false), ("seg", true, false), ("dual", false, true), ("seg+dual", true, true)] {
        let overrides = [format!("toggles.seglinear={seg}"), format!("toggles.dualscale={dual}")];
        let cfg = EngineConfig::from_toml_with(&base, &overrides).unwrap();
        let (model, _) = quantize_model(&g, &calib, &cfg).unwrap();
        let rows = evaluate(&g, &model, if inputs.is_empty() { &calib } else { inputs }).unwrap();
        let v = rows
            .iter()
            .find(|r| r.metric == segquant::calibstats::Metric::Mse)
            .unwrap()
            .value;
        mse.insert(name, v);
    }
    mse
}

fn criterion_ablation() -> Outcome {
    let mse = ablation_mse(&[]);
    let (b, s, d, sd) = (mse["baseline"], mse["seg"], mse["dual"], mse["seg+dual"]);
    let ordered = sd <= d && d <= b && sd <= s && s <= b;
    let pinned = ABLATION_MSE.iter().all(|(k, v)| (mse[k] - v).abs() <= 1e-6 * v.abs());
    // Informational only: fresh draws from the same sampler.
    let held_out = toy_calibration(&ToyModelSpec::default(), &NoiseSchedule::linear(10).unwrap(), 8, 99).unwrap();
    let h = ablation_mse(&held_out);
    Outcome::check(
        ordered && pinned,
        format!(
            "fixture MSE baseline {b:.6e}, seg {s:.6e}, dual {d:.6e}, seg+dual {sd:.6e}; ordering {}; pinned {}; \
             held-out (not gated) {:.4e}/{:.4e}/{:.4e}/{:.4e}; exact {:?}",
            if ordered { "holds" } else { "VIOLATED" },
            if pinned { "ok" } else { "MISMATCH" },
            h["baseline"], h["seg"], h["dual"], h["seg+dual"],
            [b, s, d, sd]
        ),
    )
}

fn timed(f: fn() -> Outcome) -> (Outcome, Duration) {
    let start = Instant::now();
    let out = std::panic::catch_unwind(f).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Outcome::check(false, format!("panicked: {msg}"))
    });
    (out, start.elapsed())
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("qgemm recovery equivalence", criterion_recovery, Some(Duration::from_secs(5))),
        ("dual-scale negative resolution", criterion_dual_dominance, Some(Duration::from_secs(5))),
        ("segmented weight quantization", criterion_seglinear, None),
        ("alpha sweep oracle", criterion_alpha_sweep, None),
        ("GPTQ non-inferiority", criterion_gptq, None),
        ("SVD residual identity", criterion_svd, None),
        ("DDPM round trip", criterion_ddpm, None),
        ("segment plan exactness", criterion_plans, None),
        ("end-to-end determinism", criterion_determinism, None),
        ("ablation ordering", criterion_ablation, None),
    ];
    let mut failed = 0;
    for (i, (name, f, budget)) in criteria.iter().enumerate() {
        let (mut out, took) = timed(*f);
        if let Some(b) = budget {
            if took >= *b {
                out.pass = false;
                out.detail.push_str(&format!("; runtime {took:.2?} over budget {b:?}"));
            }
        }
        if !out.pass {
            failed += 1;
        }
        println!(
            "{} {:>2} {name} ({:.2?}): {}",
            if out.pass { "PASS" } else { "FAIL" },
            i + 1,
            took,
            out.detail
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 && std::env::var("SEGQUANT_ACCEPTANCE_STRICT").as_deref() == Ok("1") {
        std::process::exit(1);
    }
}
