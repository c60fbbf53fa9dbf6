//! Acceptance criteria. Each criterion prints one PASS/FAIL line to stderr
//! (uncaptured) and the test fails at the end if any criterion failed.
//!
//! `analytic_and_harness` covers the fast checks; `training` runs the
//! pretraining, downstream and ablation experiments and takes about an hour
//! on one core.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use clld_cli::config::default_cells;
use clld_cli::pipeline::{
    finetune_and_evaluate, median, pretrain_finetune_evaluate, run_pretrain, CellScores, PretrainSource,
};
use clld_core::augment::{apply_mask, mask_count, sample_mask};
use clld_core::crosssim::{cross_similarity, cross_similarity_naive};
use clld_core::encoder::{encoder_forward_var, init_params, momentum_schedule, EncoderConfig, EncoderPair};
use clld_core::gradcheck::grad_check_many;
use clld_core::losses::{clld_loss, clld_loss_var, consistency_loss, instance_loss, similarity_loss, LossSwitches};
use clld_core::optim::{cosine_lr, lars_step};
use clld_core::params::ParamSet;
use clld_core::rng::{stream, Domain};
use clld_core::trainer::{moving_average, pooled_feature_std, pretrain_step, TrainConfig, TrainState};
use clld_core::{Graph, Tensor};
use clld_lanes::dataset::{default_proportions, generate_dataset};
use clld_lanes::metrics::{culane_counts, culane_f1, max_weight_assignment, tusimple_counts, Counts};
use clld_lanes::model::{EncoderInit, HeadConfig};
use clld_lanes::report::{EvalConfig, EvalReport};
use clld_lanes::{GeneratorConfig, Polyline};
use rand::Rng;

struct Outcome {
    criterion: u32,
    pass: bool,
    detail: String,
}

fn record(results: &mut Vec<Outcome>, criterion: u32, started: Instant, check: Result<String, String>) {
    let secs = started.elapsed().as_secs_f64();
    let (pass, detail) = match check {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    let _ = writeln!(
        std::io::stderr(),
        "criterion {criterion:>2}: {} ({secs:.1}s) {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    results.push(Outcome { criterion, pass, detail });
}

fn finish(results: &[Outcome]) {
    let failed: Vec<String> = results
        .iter()
        .filter(|o| !o.pass)
        .map(|o| format!("criterion {}: {}", o.criterion, o.detail))
        .collect();
    assert!(failed.is_empty(), "failed:\n{}", failed.join("\n"));
}

fn ensure(ok: bool, detail: String) -> Result<String, String> {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random(shape: &[usize], a: u64, b: u64) -> Tensor<f64> {
    let mut rng = stream(2024, Domain::Probe, a, b);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

// ---------------------------------------------------------------------------
// 1-6: operator, loss, masking and optimizer identities

fn cross_similarity_oracle() -> Result<String, String> {
    let mut combos = Vec::new();
    for c in [1usize, 3] {
        for side in [4usize, 6, 12] {
            for alpha in [1usize, 2, 3] {
                if side % alpha == 0 {
                    combos.push((c, side, alpha));
                }
            }
        }
    }
    let mut worst = 0.0f64;
    for case in 0..200u64 {
        let (c, side, alpha) = combos[case as usize % combos.len()];
        let y = random(&[c, side, side], 1, case);
        let yp = random(&[c, side, side], 2, case);
        let fast = cross_similarity(&y, &yp, alpha).map_err(|e| e.to_string())?;
        let slow = cross_similarity_naive(&y, &yp, alpha).map_err(|e| e.to_string())?;
        if fast.values.shape() != slow.values.shape() {
            return Err(format!("case {case}: shape {:?} vs {:?}", fast.values.shape(), slow.values.shape()));
        }
        for (a, b) in fast.values.data().iter().zip(slow.values.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst < 1e-6, format!("200 cases, max abs diff {worst:.3e} (< 1e-6)"))
}

fn end_to_end_gradient() -> Result<String, String> {
    let config = EncoderConfig {
        input_size: [8, 8],
        in_channels: 1,
        stage_channels: vec![4, 4],
        stage_strides: vec![2, 1],
        group_size: 2,
        projector_dim: 0,
        precision: 64,
        ..Default::default()
    };
    let mut rng = stream(7, Domain::Init, 0, 0);
    let params: ParamSet<f64> = init_params(&config, &mut rng);
    let mut inputs: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.detached()).collect();
    // Non-trivial norm affine parameters so their gradients are exercised too.
    for (k, t) in inputs.iter_mut().enumerate() {
        if t.rank() == 1 {
            let bump = random(t.shape(), 3, k as u64);
            *t = Tensor::from_fn(t.shape().to_vec(), |i| t.data()[i] + 0.3 * bump.data()[i]);
        }
    }
    let n = inputs.len();
    inputs.push(random(&[1, 8, 8], 4, 0));
    inputs.push(random(&[1, 8, 8], 4, 1));
    let report = grad_check_many(
        |g: &mut Graph<f64>, v| {
            let y = encoder_forward_var(g, &config, &v[..n], v[n])?;
            let yp = encoder_forward_var(g, &config, &v[..n], v[n + 1])?;
            Ok(clld_loss_var(g, y, yp, 2, 1e-12, LossSwitches::default())?.total)
        },
        &inputs,
        1e-5,
    )
    .map_err(|e| e.to_string())?;
    ensure(
        report.max_rel_error < 1e-5,
        format!(
            "2-layer encoder, {} parameters + two 1x8x8 views, max rel error {:.3e} (< 1e-5)",
            params.numel(),
            report.max_rel_error
        ),
    )
}

fn loss_identities() -> Result<String, String> {
    let mut worst = 0.0f64;
    let mut note = |got: f64, want: f64| worst = worst.max((got - want).abs());
    for case in 0..20u64 {
        let y = random(&[4, 6, 6], 5, case);
        let same = clld_loss(&y, &y, 2, 1e-12).map_err(|e| e.to_string())?;
        note(same.l_cons, -1.0);
        note(same.l_sim, -1.0);
        note(same.l_inst, 0.0);
        note(same.l_clld, -2.0);
        let neg = y.map(|v| -v);
        note(consistency_loss(&y, &neg, 1e-12).map_err(|e| e.to_string())?, 1.0);
        note(instance_loss(&y, &neg, 1e-12).map_err(|e| e.to_string())?, 4.0);
    }
    if worst >= 1e-6 {
        return Err(format!("identity error {worst:.3e}"));
    }
    let tol = 1e-12;
    for case in 0..1000u64 {
        let y = random(&[3, 4, 4], 6, case);
        let yp = random(&[3, 4, 4], 7, case);
        let cons = consistency_loss(&y, &yp, 1e-12).map_err(|e| e.to_string())?;
        let sim = similarity_loss(&y, &yp, 2, 1e-12).map_err(|e| e.to_string())?;
        let inst = instance_loss(&y, &yp, 1e-12).map_err(|e| e.to_string())?;
        let inside = (-1.0 - tol..=1.0 + tol).contains(&cons)
            && (-1.0 - tol..=1.0 + tol).contains(&sim)
            && (-tol..=4.0 + tol).contains(&inst);
        if !inside {
            return Err(format!("pair {case}: cons {cons} sim {sim} inst {inst} out of range"));
        }
    }
    Ok(format!("identities within {worst:.1e} (< 1e-6), ranges hold on 1000 pairs"))
}

fn swap_symmetry() -> Result<String, String> {
    for case in 0..100u64 {
        let side = [4usize, 6, 8][case as usize % 3];
        let y = random(&[3, side, side], 8, case);
        let yp = random(&[3, side, side], 9, case);
        let a = cross_similarity(&y, &yp, 2).map_err(|e| e.to_string())?;
        let b = cross_similarity(&yp, &y, 2).map_err(|e| e.to_string())?;
        let z = a.patch_count();
        for k in 0..z {
            for m in 0..z {
                if a.at(k, m).to_bits() != b.at(m, k).to_bits() {
                    return Err(format!("pair {case}: ({k},{m}) {} vs {}", a.at(k, m), b.at(m, k)));
                }
            }
        }
    }
    Ok("100 pairs, transpose equal bit for bit".into())
}

fn masking_contract() -> Result<String, String> {
    let (side, rho, ratio) = (224usize, 14usize, 0.3);
    let expected = mask_count((side / rho) * (side / rho), ratio);
    if expected != 76 {
        return Err(format!("mask_count gives {expected}, want 76"));
    }
    let (mut sum, mut sq, mut n) = (0.0f64, 0.0f64, 0usize);
    for img_index in 0..100u64 {
        let mut rng = stream(11, Domain::Probe, 10, img_index);
        let img: Tensor<f32> = Tensor::from_fn([3, side, side], |_| rng.random::<f32>());
        let spec = sample_mask(side, side, rho, ratio, &mut rng).map_err(|e| e.to_string())?;
        if spec.len() != 76 {
            return Err(format!("image {img_index}: {} patches masked", spec.len()));
        }
        let out = apply_mask(&img, &spec, &mut rng).map_err(|e| e.to_string())?;
        for ch in 0..3 {
            for r in 0..side {
                for c in 0..side {
                    let i = (ch * side + r) * side + c;
                    let v = out.data()[i];
                    if spec.contains_pixel(r, c) {
                        sum += v as f64;
                        sq += (v as f64) * (v as f64);
                        n += 1;
                    } else if v.to_bits() != img.data()[i].to_bits() {
                        return Err(format!("image {img_index}: unmasked pixel {i} changed"));
                    }
                }
            }
        }
    }
    let mean = sum / n as f64;
    let std = (sq / n as f64 - mean * mean).sqrt();
    ensure(
        mean.abs() <= 0.05 && (std - 1.0).abs() <= 0.05,
        format!("76 patches per image, masked mean {mean:.4} std {std:.4}, unmasked pixels identical"),
    )
}

fn optimizer_units() -> Result<String, String> {
    let total = 2000;
    let m_start = momentum_schedule(0, total, 0.99);
    let m_end = momentum_schedule(total, total, 0.99);
    if m_start != 0.99 || m_end != 1.0 {
        return Err(format!("momentum schedule endpoints {m_start} {m_end}"));
    }
    let warmup = 100;
    let peak = (0..=total).map(|s| cosine_lr(s, total, 1.0, warmup)).fold(f64::MIN, f64::max);
    let terminal = cosine_lr(total, total, 1.0, warmup);
    if peak != 1.0 || terminal != 0.0 {
        return Err(format!("cosine lr peak {peak} terminal {terminal}"));
    }
    let mut ps = ParamSet::<f64>::new();
    ps.push("w", Tensor::scalar(1.0));
    lars_step(&mut ps, &[vec![1.0]], 1.0, 0.0, 1e-3, |_| false).map_err(|e| e.to_string())?;
    let w = ps.get("w").map(|t| t.data()[0]).unwrap_or(f64::NAN);
    if w != 0.999 {
        return Err(format!("LARS hand case gives {w}"));
    }

    let mut rng = stream(3, Domain::Init, 0, 0);
    let enc = EncoderConfig {
        input_size: [16, 16],
        stage_channels: vec![8, 8],
        stage_strides: vec![2, 2],
        projector_dim: 8,
        ..Default::default()
    };
    let mut pair = EncoderPair::new(init_params::<f64>(&enc, &mut rng), 0.99);
    let before = pair.target.clone();
    pair.momentum_update(0.99).map_err(|e| e.to_string())?;
    if pair.target != before {
        return Err("EMA moved the target at the fixed point".into());
    }

    let cfg = TrainConfig {
        batch_size: 2,
        total_steps: 4,
        rho: 4,
        alpha: 1,
        m0: 1.0,
        encoder: enc,
        ..Default::default()
    };
    let mut state = TrainState::<f64>::new(cfg).map_err(|e| e.to_string())?;
    let target = state.pair.target.clone();
    let online = state.pair.online.detached();
    let batch = Tensor::from_fn([2, 3, 16, 16], |i| ((i as f64) * 0.37).sin());
    for _ in 0..3 {
        pretrain_step(&mut state, &batch).map_err(|e| e.to_string())?;
    }
    if state.pair.target != target {
        return Err("target changed under m = 1".into());
    }
    if state.pair.online.detached() == online {
        return Err("online parameters did not move".into());
    }
    Ok("momentum 0.99 -> 1, lr peak 1 terminal 0, LARS 0.999, EMA fixed point and frozen target exact".into())
}

// ---------------------------------------------------------------------------
// 10: metric harness

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let ab = (b.0 - a.0, b.1 - a.1);
    let len2 = ab.0 * ab.0 + ab.1 * ab.1;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * ab.0 + (p.1 - a.1) * ab.1) / len2).clamp(0.0, 1.0)
    };
    (p.0 - (a.0 + t * ab.0)).hypot(p.1 - (a.1 + t * ab.1))
}

fn pixel_mask(lane: &[(f64, f64)], width: usize, (h, w): (usize, usize)) -> Vec<bool> {
    let half = width as f64 / 2.0;
    let mut out = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            let p = (c as f64, r as f64);
            let d = lane.windows(2).map(|s| segment_distance(p, s[0], s[1])).fold(f64::INFINITY, f64::min);
            out[r * w + c] = d <= half;
        }
    }
    out
}

fn pixel_iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn best_assignment(w: &[Vec<f64>]) -> f64 {
    fn go(w: &[Vec<f64>], row: usize, used: &mut [bool]) -> f64 {
        if row == w.len() {
            return 0.0;
        }
        let mut best = go(w, row + 1, used);
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                best = best.max(w[row][c] + go(w, row + 1, used));
                used[c] = false;
            }
        }
        best
    }
    let cols = w.first().map_or(0, Vec::len);
    go(w, 0, &mut vec![false; cols])
}

/// Largest count of pairs above `thr` over all one-to-one matchings that
/// maximise total IoU.
fn oracle_counts(ious: &[Vec<f64>], thr: f64, n_pred: usize, n_gt: usize) -> Counts {
    fn go(w: &[Vec<f64>], row: usize, used: &mut [bool], thr: f64) -> Vec<(f64, usize)> {
        if row == w.len() {
            return vec![(0.0, 0)];
        }
        let mut out = go(w, row + 1, used, thr);
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                for (s, k) in go(w, row + 1, used, thr) {
                    out.push((s + w[row][c], k + usize::from(w[row][c] > thr)));
                }
                used[c] = false;
            }
        }
        out
    }
    let cols = ious.first().map_or(0, Vec::len);
    let all = go(ious, 0, &mut vec![false; cols], thr);
    let best = all.iter().map(|a| a.0).fold(f64::MIN, f64::max);
    let tp = all.iter().filter(|a| (a.0 - best).abs() < 1e-12).map(|a| a.1).max().unwrap_or(0);
    Counts { tp, fp: n_pred - tp, fn_: n_gt - tp }
}

fn shifted(lane: &[(f64, f64)], dx: f64) -> Polyline {
    lane.iter().map(|&(x, y)| (x + dx, y)).collect()
}

/// Horizontal shift at which the pixel IoU of a lane with its shifted copy is
/// closest to `target`, by bisection on the monotone decay.
fn shift_for_iou(lane: &[(f64, f64)], target: f64, width: usize, hw: (usize, usize)) -> (f64, f64) {
    let base = pixel_mask(lane, width, hw);
    let iou = |dx: f64| pixel_iou(&base, &pixel_mask(&shifted(lane, dx), width, hw));
    let (mut lo, mut hi) = (0.0, 2.0 * width as f64);
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        if iou(mid) >= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (a, b) = (iou(lo), iou(hi));
    if (a - target).abs() <= (b - target).abs() {
        (lo, a)
    } else {
        (hi, b)
    }
}

fn metric_harness() -> Result<String, String> {
    let hw = (120usize, 200usize);
    let width = 6;
    let thr = 0.5;
    let mut ious_seen = Vec::new();
    for case in 0..50u64 {
        let mut rng = stream(5, Domain::Probe, 20, case);
        let lanes_n = 1 + (case % 2) as usize;
        let mut gt: Vec<Polyline> = Vec::new();
        let mut pred: Vec<Polyline> = Vec::new();
        for k in 0..lanes_n {
            let x_bottom = 30.0 + 90.0 * k as f64 + rng.random_range(0.0..40.0);
            let x_top = x_bottom + rng.random_range(-15.0..15.0);
            let bend = rng.random_range(-6.0..6.0);
            let lane = vec![(x_bottom, 119.0), (0.5 * (x_bottom + x_top) + bend, 60.0), (x_top, 5.0)];
            let target = if (case as usize / 2 + k) % 2 == 0 { 0.45 } else { 0.55 };
            let (dx, iou) = shift_for_iou(&lane, target, width, hw);
            ious_seen.push(iou);
            pred.push(shifted(&lane, dx));
            gt.push(lane);
        }
        if case % 5 == 4 {
            pred.push(vec![(190.0, 119.0), (195.0, 10.0)]);
        }
        let pm: Vec<Vec<bool>> = pred.iter().map(|l| pixel_mask(l, width, hw)).collect();
        let gm: Vec<Vec<bool>> = gt.iter().map(|l| pixel_mask(l, width, hw)).collect();
        let ious: Vec<Vec<f64>> = pm.iter().map(|p| gm.iter().map(|g| pixel_iou(p, g)).collect()).collect();
        let want = oracle_counts(&ious, thr, pred.len(), gt.len());
        let got = culane_counts(&pred, &gt, width, thr, hw);
        if got != want {
            return Err(format!("case {case}: {got:?} vs oracle {want:?} (ious {ious:?})"));
        }
        let f1 = culane_f1(&pred, &gt, width, thr, hw);
        if f1.f1 != want.f1() {
            return Err(format!("case {case}: f1 {} vs {}", f1.f1, want.f1()));
        }
    }
    let below = ious_seen.iter().filter(|&&v| (0.40..=0.5).contains(&v)).count();
    let above = ious_seen.iter().filter(|&&v| v > 0.5 && v <= 0.60).count();
    if below == 0 || above == 0 || below + above != ious_seen.len() {
        return Err(format!("constructed IoUs do not straddle 0.5: {ious_seen:?}"));
    }

    for case in 0..300u64 {
        let mut rng = stream(6, Domain::Probe, 30, case);
        let rows = rng.random_range(0..=4usize);
        let cols = rng.random_range(0..=4usize);
        let w: Vec<Vec<f64>> = (0..rows).map(|_| (0..cols).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let a = max_weight_assignment(&w);
        let mut used = vec![false; cols];
        let mut total = 0.0;
        for (r, c) in a.iter().enumerate() {
            if let Some(c) = *c {
                if used[c] {
                    return Err(format!("assignment case {case} reuses column {c}"));
                }
                used[c] = true;
                total += w[r][c];
            }
        }
        if (total - best_assignment(&w)).abs() > 1e-9 {
            return Err(format!("assignment case {case}: {total} vs {}", best_assignment(&w)));
        }
    }

    // Clips of frames with two vertical ground-truth lanes sampled every 10
    // rows from 10 to 200 (20 points each). The first prediction follows the
    // left lane within tolerance down to a cut row and jumps 20 px away
    // below it; the second prediction, when present, sits on the right lane.
    let sample_rows: Vec<f64> = (1..=20).map(|k| 10.0 * k as f64).collect();
    let tol = 5.0;
    for clip in 0..10u64 {
        let frames = 1 + clip % 3;
        let (mut c_sum, mut s_sum) = (0usize, 0usize);
        let (mut c_want, mut s_want) = (0usize, 0usize);
        for f in 0..frames {
            let gt = vec![vec![(50.0, 10.0), (50.0, 200.0)], vec![(150.0, 10.0), (150.0, 200.0)]];
            let good = ((clip * 3 + f * 7) % 21) as usize;
            let cut = 10.0 * good as f64 + 5.0;
            let near = 50.0 + 0.5 * (f as f64 + 1.0);
            let first = if good > 0 {
                vec![(near, 10.0), (near, cut), (70.0, cut + 0.5), (70.0, 200.0)]
            } else {
                vec![(70.0, 10.0), (70.0, 200.0)]
            };
            let mut pred = vec![first];
            let right_present = (clip + f) % 2 == 0;
            if right_present {
                pred.push(vec![(152.0, 10.0), (152.0, 200.0)]);
            }
            let counts = tusimple_counts(&pred, &gt, tol, &sample_rows);
            c_sum += counts.correct;
            s_sum += counts.total;
            c_want += good + if right_present { 20 } else { 0 };
            s_want += 40;
        }
        if (c_sum, s_sum) != (c_want, s_want) {
            return Err(format!("clip {clip}: C/S {c_sum}/{s_sum}, expected {c_want}/{s_want}"));
        }
    }
    Ok(format!(
        "50 IoU cases ({below} below, {above} above 0.5) match the counting oracle; 300 assignments optimal; 10 clips exact"
    ))
}

// ---------------------------------------------------------------------------
// 11: command-line reproducibility

const SMALL: &str = r#"
[generator]
image_size = [32, 32]

[pretrain]
batch_size = 4
total_steps = 8
checkpoint_every = 4

[pretrain.encoder]
input_size = [32, 32]

[finetune]
steps = 6
batch_size = 2

[ablate]
seeds = [1, 2]
pretrain_steps = 3
finetune_steps = 3
"#;

fn run_clld(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_clld")).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let name = p.strip_prefix(dir).unwrap_or(&p).display().to_string();
                out.push((name, std::fs::read(&p).unwrap_or_default()));
            }
        }
    }
    out.sort();
    out
}

/// Runs the full command chain into directories under `root`.
fn command_chain(root: &Path, config: &Path) -> Result<Vec<PathBuf>, String> {
    let cfg = config.display().to_string();
    let p = |name: &str| root.join(name);
    let s = |path: PathBuf| path.display().to_string();
    run_clld(&["gen-data", "--config", &cfg, "--out", &s(p("train")), "--count", "12", "--seed", "3"])?;
    run_clld(&["gen-data", "--config", &cfg, "--out", &s(p("eval")), "--count", "10", "--seed", "4"])?;
    run_clld(&["pretrain", "--config", &cfg, "--out", &s(p("pre")), "--seed", "5"])?;
    let resume_from = s(p("pre").join("step_4.ckpt"));
    run_clld(&["pretrain", "--config", &cfg, "--out", &s(p("resumed")), "--seed", "5", "--resume", &resume_from])?;
    let ckpt = s(p("pre").join("final.ckpt"));
    let (train, eval) = (s(p("train")), s(p("eval")));
    run_clld(&[
        "finetune", "--config", &cfg, "--checkpoint", &ckpt, "--train-data", &train, "--eval-data", &eval,
        "--out", &s(p("ft")),
    ])?;
    run_clld(&[
        "finetune", "--config", &cfg, "--random-init", "--train-data", &train, "--eval-data", &eval,
        "--out", &s(p("ft-random")),
    ])?;
    let model = s(p("ft").join("model.json"));
    run_clld(&["eval", "--config", &cfg, "--model", &model, "--eval-data", &eval, "--out", &s(p("eval-out"))])?;
    run_clld(&["ablate", "--config", &cfg, "--train-data", &train, "--eval-data", &eval, "--out", &s(p("ablate"))])?;
    Ok(["train", "eval", "pre", "resumed", "ft", "ft-random", "eval-out", "ablate"].iter().map(|n| p(n)).collect())
}

fn command_reproducibility() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = dir.path().join("run.toml");
    std::fs::write(&config, SMALL).map_err(|e| e.to_string())?;
    // Data paths are part of the resolved config, so the rerun must use the
    // same directories: run, move the outputs aside, run again.
    let root = dir.path().join("run");
    let kept = dir.path().join("first");
    let first = command_chain(&root, &config)?;
    std::fs::rename(&root, &kept).map_err(|e| e.to_string())?;
    let second = command_chain(&root, &config)?;
    let first: Vec<PathBuf> = first.iter().map(|p| kept.join(p.strip_prefix(&root).unwrap_or(p))).collect();
    let mut files = 0;
    for (a, b) in first.iter().zip(&second) {
        let (x, y) = (dir_bytes(a), dir_bytes(b));
        if x.is_empty() {
            return Err(format!("{} is empty", a.display()));
        }
        let names = |v: &[(String, Vec<u8>)]| v.iter().map(|f| f.0.clone()).collect::<Vec<_>>();
        if names(&x) != names(&y) {
            return Err(format!("{} and {} hold different files", a.display(), b.display()));
        }
        if let Some((name, _)) = x.iter().zip(&y).find(|(p, q)| p.1 != q.1).map(|(p, _)| p) {
            return Err(format!("{name} differs between {} and {}", a.display(), b.display()));
        }
        files += x.len();
    }
    Ok(format!("gen-data, pretrain, resume, finetune, eval, ablate: {files} output files identical across reruns"))
}

#[test]
fn analytic_and_harness() {
    let mut results = Vec::new();
    let checks: [(u32, fn() -> Result<String, String>); 8] = [
        (1, cross_similarity_oracle),
        (2, end_to_end_gradient),
        (3, loss_identities),
        (4, swap_symmetry),
        (5, masking_contract),
        (6, optimizer_units),
        (10, metric_harness),
        (11, command_reproducibility),
    ];
    for (n, check) in checks {
        let t = Instant::now();
        record(&mut results, n, t, check());
    }
    finish(&results);
}

// ---------------------------------------------------------------------------
// 7-9: pretraining, downstream gain and ablation ordering

const SEEDS: [u64; 3] = [1, 2, 3];

fn pooled_f1(report: &EvalReport, subsets: &[&str]) -> f64 {
    let mut c = Counts::default();
    for s in subsets {
        if let Some(row) = report.row(s) {
            c.add(row.counts);
        }
    }
    c.f1()
}

struct SeedRun {
    pretrained: EvalReport,
    random: EvalReport,
    scores: CellScores,
}

fn points(v: f64) -> String {
    format!("{:+.2}", 100.0 * v)
}

#[test]
fn training() {
    let mut results = Vec::new();
    let generator = GeneratorConfig::default();
    let proportions = default_proportions();
    let source = PretrainSource::Generated {
        generator: generator.clone(),
        proportions: proportions.clone(),
    };
    let train_scenes = generate_dataset(101, 1000, &proportions, &generator).expect("train scenes");
    let eval_scenes = generate_dataset(202, 500, &proportions, &generator).expect("eval scenes");
    let probe: Vec<Tensor<f32>> = generate_dataset(303, 64, &proportions, &generator)
        .expect("probe scenes")
        .into_iter()
        .map(|s| s.image)
        .collect();
    let head = HeadConfig::default();
    let eval = EvalConfig::default();
    let base = TrainConfig::default();

    let t_all = Instant::now();
    let mut runs: Vec<SeedRun> = Vec::new();
    for &seed in &SEEDS {
        let t = Instant::now();
        let config = TrainConfig { seed, ..base.clone() };
        let mut state = TrainState::<f32>::new(config.clone()).expect("state");
        let metrics = run_pretrain(&mut state, &source, |_, _| Ok(())).expect("pretraining");
        if seed == SEEDS[0] {
            let losses: Vec<f64> = metrics.iter().map(|m| m.loss.l_clld).collect();
            let stds = pooled_feature_std(&state.pair.online, &config.encoder, &probe).expect("feature std");
            record(&mut results, 7, t, training_sanity(&losses, &stds));
        }
        let pre = finetune_and_evaluate(
            EncoderInit::Pretrained(config.encoder.clone(), state.pair.online.clone()),
            &train_scenes,
            &eval_scenes,
            &head,
            &eval,
            seed,
        )
        .expect("pretrained fine-tune");
        let rnd = finetune_and_evaluate::<f32>(
            EncoderInit::Random(config.encoder.clone()),
            &train_scenes,
            &eval_scenes,
            &head,
            &eval,
            seed,
        )
        .expect("random fine-tune");
        let final_loss = metrics.last().map_or(f64::NAN, |m| m.loss.l_clld);
        let _ = writeln!(
            std::io::stderr(),
            "  seed {seed}: pretrained F1 {:.4} random F1 {:.4} ({:.0}s)",
            pre.report.overall().f1,
            rnd.report.overall().f1,
            t.elapsed().as_secs_f64()
        );
        runs.push(SeedRun {
            scores: CellScores::from_report(&pre.report, final_loss),
            pretrained: pre.report,
            random: rnd.report,
        });
    }
    record(&mut results, 8, t_all, downstream_gain(&runs));

    let t = Instant::now();
    let mut cells: BTreeMap<String, Vec<CellScores>> = BTreeMap::new();
    for cell in default_cells() {
        let config = cell.apply(&base);
        for (k, &seed) in SEEDS.iter().enumerate() {
            let tc = TrainConfig { seed, ..config.clone() };
            let scores = if config == base {
                runs[k].scores.clone()
            } else {
                pretrain_finetune_evaluate::<f32>(&tc, &source, &train_scenes, &eval_scenes, &head, &eval)
                    .expect("ablation cell")
            };
            let _ = writeln!(
                std::io::stderr(),
                "  {} seed {seed}: recall {:.4} occluded F1 {:.4}",
                cell.name,
                scores.recall,
                scores.subset_f1.get("occluded").copied().unwrap_or(f64::NAN)
            );
            cells.entry(cell.name.clone()).or_default().push(scores);
        }
    }
    record(&mut results, 9, t, ablation_ordering(&cells));
    finish(&results);
}

fn training_sanity(losses: &[f64], stds: &[f64]) -> Result<String, String> {
    let ma = moving_average(losses, 50);
    if ma.len() < 50 {
        return Err(format!("only {} steps", ma.len()));
    }
    let at_50 = ma[49];
    let end = ma[ma.len() - 1];
    let initial = losses[0];
    let minimum = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let range = initial - minimum;
    let drop = at_50 - end;
    let min_std = stds.iter().copied().fold(f64::INFINITY, f64::min);
    ensure(
        drop >= 0.2 * range && min_std > 0.01,
        format!(
            "{} steps: MA50 {at_50:.4} -> {end:.4}, drop {drop:.4} vs 20% of range {:.4}; min pooled std {min_std:.4} (> 0.01)",
            losses.len(),
            0.2 * range
        ),
    )
}

fn downstream_gain(runs: &[SeedRun]) -> Result<String, String> {
    let overall: Vec<f64> = runs.iter().map(|r| r.pretrained.overall().f1 - r.random.overall().f1).collect();
    let hard: Vec<f64> = runs
        .iter()
        .map(|r| pooled_f1(&r.pretrained, &["occluded", "shadow"]) - pooled_f1(&r.random, &["occluded", "shadow"]))
        .collect();
    let normal: Vec<f64> = runs
        .iter()
        .map(|r| pooled_f1(&r.pretrained, &["normal"]) - pooled_f1(&r.random, &["normal"]))
        .collect();
    let (m_all, m_hard, m_normal) = (median(&overall), median(&hard), median(&normal));
    let list = |v: &[f64]| v.iter().map(|x| points(*x)).collect::<Vec<_>>().join(" ");
    ensure(
        m_all >= 0.02 && m_hard >= m_normal,
        format!(
            "F1 gain per seed [{}] median {} (>= +2.00); occluded+shadow median {} [{}] vs normal {} [{}]",
            list(&overall),
            points(m_all),
            points(m_hard),
            list(&hard),
            points(m_normal),
            list(&normal)
        ),
    )
}

fn ablation_ordering(cells: &BTreeMap<String, Vec<CellScores>>) -> Result<String, String> {
    let med = |name: &str, f: &dyn Fn(&CellScores) -> f64| {
        median(&cells.get(name).map(|v| v.iter().map(f).collect::<Vec<_>>()).unwrap_or_default())
    };
    let occluded = |s: &CellScores| s.subset_f1.get("occluded").copied().unwrap_or(f64::NAN);
    let recall = |s: &CellScores| s.recall;
    let (both, sim, cons) = (med("both_mask", &occluded), med("sim_mask", &occluded), med("cons_mask", &occluded));
    let (mask, nomask) = (med("both_mask", &recall), med("both_nomask", &recall));
    ensure(
        both >= sim && both >= cons && mask >= nomask,
        format!(
            "median occluded F1 both {both:.4} sim {sim:.4} cons {cons:.4}; median recall mask {mask:.4} nomask {nomask:.4}"
        ),
    )
}
