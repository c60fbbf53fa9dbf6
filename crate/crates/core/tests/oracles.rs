//! Fast paths checked against independent loop implementations.

use clld_core::augment::{apply_mask, mask_count, sample_mask};
use clld_core::crosssim::{cross_similarity, cross_similarity_naive};
use clld_core::gradcheck::grad_check_many;
use clld_core::losses::{clld_loss, consistency_loss, instance_loss, similarity_loss};
use clld_core::ops::{conv2d, group_norm, upsample_bilinear};
use clld_core::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn conv_loops(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let (ci, h, w) = (x.shape()[0], x.shape()[1] as isize, x.shape()[2] as isize);
    let (co, ks) = (k.shape()[0], k.shape()[2]);
    let oh = (h as usize + 2 * pad - ks) / stride + 1;
    let ow = (w as usize + 2 * pad - ks) / stride + 1;
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for r in 0..oh {
            for c in 0..ow {
                let mut s = 0.0;
                for i in 0..ci {
                    for u in 0..ks {
                        for v in 0..ks {
                            let y = (r * stride + u) as isize - pad as isize;
                            let xx = (c * stride + v) as isize - pad as isize;
                            if y >= 0 && y < h && xx >= 0 && xx < w {
                                s += x.data()[(i * h as usize + y as usize) * w as usize + xx as usize]
                                    * k.data()[((o * ci + i) * ks + u) * ks + v];
                            }
                        }
                    }
                }
                out[(o * oh + r) * ow + c] = s;
            }
        }
    }
    (vec![co, oh, ow], out)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn channel_vector(t: &Tensor<f64>, pixel: usize) -> Vec<f64> {
    let plane = t.shape()[1] * t.shape()[2];
    (0..t.shape()[0]).map(|ch| t.data()[ch * plane + pixel]).collect()
}

fn pooled(t: &Tensor<f64>) -> Vec<f64> {
    let plane = t.shape()[1] * t.shape()[2];
    t.data().chunks(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv2d_matches_loops(
        seed in any::<u64>(),
        ci in 1usize..4, co in 1usize..4,
        h in 3usize..9, w in 3usize..9,
        ks in prop::sample::select(vec![1usize, 3]),
        stride in 1usize..3, pad in 0usize..2,
    ) {
        let x = random(&[ci, h, w], seed);
        let k = random(&[co, ci, ks, ks], seed ^ 1);
        let fast = conv2d(&x, &k, stride, pad).unwrap();
        let (shape, slow) = conv_loops(&x, &k, stride, pad);
        prop_assert_eq!(fast.shape(), &shape[..]);
        for (a, b) in fast.data().iter().zip(&slow) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_similarity_matches_naive_and_transposes(
        seed in any::<u64>(),
        c in prop::sample::select(vec![1usize, 3]),
        side in prop::sample::select(vec![4usize, 6, 12]),
        alpha in 1usize..4,
    ) {
        prop_assume!(side % alpha == 0);
        let y = random(&[c, side, side], seed);
        let yp = random(&[c, side, side], seed ^ 7);
        let fast = cross_similarity(&y, &yp, alpha).unwrap();
        let slow = cross_similarity_naive(&y, &yp, alpha).unwrap();
        let diff = fast.values.data().iter().zip(slow.values.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(diff < 1e-6);
        let swapped = cross_similarity(&yp, &y, alpha).unwrap();
        let z = fast.patch_count();
        for k in 0..z {
            for m in 0..z {
                prop_assert_eq!(fast.at(k, m), swapped.at(m, k));
            }
        }
    }

    #[test]
    fn losses_match_direct_formulas(seed in any::<u64>(), c in 1usize..5, side in prop::sample::select(vec![2usize, 4, 6])) {
        let y = random(&[c, side, side], seed);
        let yp = random(&[c, side, side], seed ^ 3);
        let plane = side * side;
        let cons = -(0..plane).map(|p| cosine(&channel_vector(&y, p), &channel_vector(&yp, p))).sum::<f64>() / plane as f64;
        prop_assert!((consistency_loss(&y, &yp, 1e-12).unwrap() - cons).abs() < 1e-10);
        let inst = 2.0 - 2.0 * cosine(&pooled(&y), &pooled(&yp));
        prop_assert!((instance_loss(&y, &yp, 1e-12).unwrap() - inst).abs() < 1e-10);
        let a = cross_similarity_naive(&y, &yp, 2).unwrap();
        let b = cross_similarity_naive(&yp, &y, 2).unwrap();
        let sim = -cosine(a.values.data(), b.values.data());
        prop_assert!((similarity_loss(&y, &yp, 2, 1e-12).unwrap() - sim).abs() < 1e-10);
    }

    #[test]
    fn loss_ranges_and_scale_invariance(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let y = random(&[4, 4, 4], seed);
        let yp = random(&[4, 4, 4], seed ^ 5);
        let l = clld_loss(&y, &yp, 2, 1e-12).unwrap();
        prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&l.l_cons));
        prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&l.l_sim));
        prop_assert!((-1e-9..=4.0 + 1e-9).contains(&l.l_inst));
        let scaled = clld_loss(&y.map(|v| v * scale), &yp, 2, 1e-12).unwrap();
        prop_assert!((scaled.l_clld - l.l_clld).abs() < 1e-9);
    }

    #[test]
    fn masking_touches_only_masked_patches(seed in any::<u64>(), grid in 1usize..6, rho in 1usize..5, ratio in 0.0f64..=1.0) {
        let side = grid * rho;
        let img = random(&[3, side, side], seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = sample_mask(side, side, rho, ratio, &mut rng).unwrap();
        prop_assert_eq!(spec.len(), (ratio * (grid * grid) as f64 + 1e-9).floor() as usize);
        prop_assert_eq!(spec.len(), mask_count(grid * grid, ratio));
        let out = apply_mask(&img, &spec, &mut rng).unwrap();
        for ch in 0..3 {
            for r in 0..side {
                for col in 0..side {
                    let i = (ch * side + r) * side + col;
                    if !spec.contains_pixel(r, col) {
                        prop_assert_eq!(out.data()[i].to_bits(), img.data()[i].to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn upsample_matches_half_pixel_formula(seed in any::<u64>(), h in 1usize..5, w in 1usize..5, f in 1usize..4) {
        let x = random(&[2, h, w], seed);
        let y = upsample_bilinear(&x, f).unwrap();
        let src = |o: usize, n: usize| ((o as f64 + 0.5) / f as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        for ch in 0..2 {
            for r in 0..h * f {
                for c in 0..w * f {
                    let (sy, sx) = (src(r, h), src(c, w));
                    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                    let (dy, dx) = (sy - y0 as f64, sx - x0 as f64);
                    let at = |yy: usize, xx: usize| x.data()[(ch * h + yy) * w + xx];
                    let want = (1.0 - dy) * ((1.0 - dx) * at(y0, x0) + dx * at(y0, x1))
                        + dy * ((1.0 - dx) * at(y1, x0) + dx * at(y1, x1));
                    prop_assert!((y.data()[(ch * h * f + r) * w * f + c] - want).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn group_norm_matches_per_group_statistics() {
    let x = random(&[4, 3, 3], 11);
    let gamma = random(&[4], 12);
    let beta = random(&[4], 13);
    let y = group_norm(&x, &gamma, &beta, 2, 1e-5).unwrap();
    for group in 0..2 {
        let vals: Vec<f64> = x.data()[group * 18..(group + 1) * 18].to_vec();
        let mean = vals.iter().sum::<f64>() / 18.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 18.0;
        for (i, v) in vals.iter().enumerate() {
            let ch = group * 2 + i / 9;
            let want = (v - mean) / (var + 1e-5).sqrt() * gamma.data()[ch] + beta.data()[ch];
            assert!((y.data()[group * 18 + i] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn loss_gradients_pass_finite_differences() {
    let y = random(&[3, 4, 4], 21);
    let yp = random(&[3, 4, 4], 22);
    let report = grad_check_many(
        |g: &mut Graph<f64>, v| {
            let vars = clld_core::losses::clld_loss_var(g, v[0], v[1], 2, 1e-12, Default::default())?;
            Ok(vars.total)
        },
        &[y, yp],
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn conv_and_upsample_gradients_pass_finite_differences() {
    let x = random(&[2, 5, 5], 31);
    let k = random(&[3, 2, 3, 3], 32);
    let report = grad_check_many(
        |g: &mut Graph<f64>, v| {
            let y = g.conv2d(v[0], v[1], 2, 1)?;
            let y = g.upsample_bilinear(y, 2)?;
            let sq = g.mul(y, y)?;
            Ok(g.sum(sq))
        },
        &[x, k],
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}
