use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::error::Error;
use crate::numerics::{finite_diff_check_inputs, Graph, Tensor};
use crate::test_util::randn;

fn grid(h: usize, w: usize, c: usize) -> Tensor<f64> {
    Tensor::new(&[h, w, c], (0..h * w * c).map(|v| v as f64).collect()).unwrap()
}

#[test]
fn partition_of_counting_grid() {
    let x = grid(4, 4, 1);
    let p = window_partition(&x, 2).unwrap();
    assert_eq!(p.shape(), &[4, 4, 1]);
    assert_eq!(&p.data()[..4], &[0., 1., 4., 5.]);
    assert_eq!(&p.data()[4..8], &[2., 3., 6., 7.]);
    assert_eq!(&p.data()[8..12], &[8., 9., 12., 13.]);
    let whole = window_partition(&x, 4).unwrap();
    assert_eq!(whole.data(), x.data());
    assert_eq!(window_reverse(&p, 2, 4, 4).unwrap(), x);
}

#[test]
fn partition_rejects_bad_geometry() {
    let x = grid(4, 6, 1);
    assert!(matches!(window_partition(&x, 4), Err(Error::Shape { .. })));
    let p = window_partition(&grid(4, 4, 1), 2).unwrap();
    assert!(matches!(window_reverse(&p, 2, 4, 8), Err(Error::Shape { .. })));
}

/// Direct hybrid-group reference: each query at `(y, x)` attends the merged
/// tokens whose `M`-window index equals its `sM`-window index. Merging is a
/// literal stride-`s` sum over the kernel.
#[allow(clippy::too_many_arguments)]
fn oracle_group(
    x: &Tensor<f64>,
    wq: &Tensor<f64>,
    wk: &Tensor<f64>,
    wv: &Tensor<f64>,
    merge: Option<(&Tensor<f64>, &Tensor<f64>)>,
    s: usize,
    m: usize,
    heads: usize,
) -> Vec<f64> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let dt = wq.shape()[1];
    let d = dt / heads;
    let (hk, wk_) = (h / s, w / s);
    let xv = |y: usize, xx: usize, ch: usize| x.data()[(y * w + xx) * c + ch];
    let mut merged = vec![0.0; hk * wk_ * c];
    for y in 0..hk {
        for xx in 0..wk_ {
            for co in 0..c {
                merged[(y * wk_ + xx) * c + co] = match merge {
                    None => xv(y, xx, co),
                    Some((kern, bias)) => {
                        let mut acc = bias.data()[co];
                        for dy in 0..s {
                            for dx in 0..s {
                                for ci in 0..c {
                                    acc += xv(y * s + dy, xx * s + dx, ci)
                                        * kern.data()[((dy * s + dx) * c + ci) * c + co];
                                }
                            }
                        }
                        acc
                    }
                };
            }
        }
    }
    let proj = |src: &[f64], n: usize, wt: &Tensor<f64>| -> Vec<f64> {
        let mut out = vec![0.0; n * dt];
        for t in 0..n {
            for j in 0..dt {
                out[t * dt + j] = (0..c).map(|i| src[t * c + i] * wt.data()[i * dt + j]).sum();
            }
        }
        out
    };
    let q = proj(x.data(), h * w, wq);
    let k = proj(&merged, hk * wk_, wk);
    let v = proj(&merged, hk * wk_, wv);
    let qw = s * m;
    let mut out = vec![0.0; h * w * dt];
    for y in 0..h {
        for xx in 0..w {
            let keys: Vec<usize> = (0..hk * wk_)
                .filter(|&t| (t / wk_) / m == y / qw && (t % wk_) / m == xx / qw)
                .collect();
            let qi = y * w + xx;
            for head in 0..heads {
                let sc: Vec<f64> = keys
                    .iter()
                    .map(|&t| {
                        (0..d)
                            .map(|e| q[qi * dt + head * d + e] * k[t * dt + head * d + e])
                            .sum::<f64>()
                            / (d as f64).sqrt()
                    })
                    .collect();
                let mx = sc.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = sc.iter().map(|a| (a - mx).exp()).sum();
                for (&t, a) in keys.iter().zip(&sc) {
                    let p = (a - mx).exp() / z;
                    for e in 0..d {
                        out[qi * dt + head * d + e] += p * v[t * dt + head * d + e];
                    }
                }
            }
        }
    }
    out
}

fn linear_out(cat: &[f64], wo: &Tensor<f64>, bo: &Tensor<f64>) -> Vec<f64> {
    let (din, c) = (wo.shape()[0], wo.shape()[1]);
    let n = cat.len() / din;
    let mut y = vec![0.0; n * c];
    for t in 0..n {
        for j in 0..c {
            y[t * c + j] = bo.data()[j] + (0..din).map(|i| cat[t * din + i] * wo.data()[i * c + j]).sum::<f64>();
        }
    }
    y
}

struct GroupParams {
    spec: AttentionGroupSpec,
    wq: Tensor<f64>,
    wk: Tensor<f64>,
    wv: Tensor<f64>,
    merge: Option<(Tensor<f64>, Tensor<f64>)>,
}

fn group_params(spec: AttentionGroupSpec, c: usize, seed: u64) -> GroupParams {
    let dt = spec.channels();
    GroupParams {
        spec,
        wq: randn(&[c, dt], seed, 0.5),
        wk: randn(&[c, dt], seed + 1, 0.5),
        wv: randn(&[c, dt], seed + 2, 0.5),
        merge: (spec.scale > 1).then(|| {
            (
                randn(&[spec.scale, spec.scale, c, c], seed + 3, 0.3),
                randn(&[c], seed + 4, 0.1),
            )
        }),
    }
}

fn bind(g: &mut Graph<f64>, p: &GroupParams) -> GroupVars {
    GroupVars {
        wq: g.param(p.wq.clone()),
        wk: g.param(p.wk.clone()),
        wv: g.param(p.wv.clone()),
        merge: p.merge.as_ref().map(|(k, b)| (g.param(k.clone()), g.param(b.clone()))),
    }
}

fn run_hybrid(x: &Tensor<f64>, groups: &[GroupParams], wo: &Tensor<f64>, bo: &Tensor<f64>) -> (Tensor<f64>, HybridOutput<f64>) {
    let mut g = Graph::new();
    let s = x.shape();
    let xv = g.constant(x.clone().reshape(&[1, s[0], s[1], s[2]]).unwrap());
    let vars = HybridAttentionVars {
        groups: groups.iter().map(|p| bind(&mut g, p)).collect(),
        wo: g.param(wo.clone()),
        bo: g.param(bo.clone()),
    };
    let specs: Vec<_> = groups.iter().map(|p| p.spec).collect();
    let out = hybrid_scale_attention(&mut g, xv, &vars, &specs).unwrap();
    (g.value(out.y).clone(), out)
}

fn oracle_hybrid(x: &Tensor<f64>, groups: &[GroupParams], wo: &Tensor<f64>, bo: &Tensor<f64>) -> Vec<f64> {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let outs: Vec<Vec<f64>> = groups
        .iter()
        .map(|p| {
            oracle_group(
                x,
                &p.wq,
                &p.wk,
                &p.wv,
                p.merge.as_ref().map(|(k, b)| (k, b)),
                p.spec.scale,
                p.spec.window,
                p.spec.heads,
            )
        })
        .collect();
    let mut cat = Vec::new();
    for t in 0..h * w {
        for (p, o) in groups.iter().zip(&outs) {
            let dt = p.spec.channels();
            cat.extend_from_slice(&o[t * dt..(t + 1) * dt]);
        }
    }
    linear_out(&cat, wo, bo)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn local_group_matches_window_attention_oracle() {
    let c = 6;
    let x = randn(&[8, 8, c], 1, 1.0);
    let spec = AttentionGroupSpec { scale: 1, heads: 2, window: 2, head_dim: 3 };
    let groups = [group_params(spec, c, 10)];
    let (wo, bo) = (randn(&[6, c], 20, 0.5), randn(&[c], 21, 0.1));
    let (y, _) = run_hybrid(&x, &groups, &wo, &bo);
    assert!(max_diff(y.data(), &oracle_hybrid(&x, &groups, &wo, &bo)) < 1e-10);
}

#[test]
fn global_group_matches_dense_attention_on_merged_tokens() {
    let c = 4;
    let x = randn(&[8, 8, c], 2, 1.0);
    let spec = AttentionGroupSpec { scale: 4, heads: 2, window: 2, head_dim: 2 };
    assert!(spec.is_global(8, 8));
    let groups = [group_params(spec, c, 30)];
    let (wo, bo) = (randn(&[4, c], 40, 0.5), randn(&[c], 41, 0.1));
    let (y, _) = run_hybrid(&x, &groups, &wo, &bo);
    assert!(max_diff(y.data(), &oracle_hybrid(&x, &groups, &wo, &bo)) < 1e-10);
}

#[test]
fn two_group_layer_matches_oracle_and_keeps_shape() {
    let c = 8;
    let x = randn(&[16, 16, c], 3, 1.0);
    let groups = [
        group_params(AttentionGroupSpec { scale: 1, heads: 2, window: 2, head_dim: 2 }, c, 50),
        group_params(AttentionGroupSpec { scale: 2, heads: 2, window: 2, head_dim: 2 }, c, 60),
    ];
    let (wo, bo) = (randn(&[8, c], 70, 0.5), randn(&[c], 71, 0.1));
    let (y, out) = run_hybrid(&x, &groups, &wo, &bo);
    assert_eq!(y.shape(), &[1, 16, 16, c]);
    assert!(max_diff(y.data(), &oracle_hybrid(&x, &groups, &wo, &bo)) < 1e-10);
    assert_eq!(out.heads.len(), 4);
    let total: f64 = out.heads.iter().map(|h| h.map.sum()).sum();
    assert!((total - 4.0).abs() < 1e-4);
}

#[test]
fn single_global_head_is_vanilla_attention() {
    let c = 4;
    let x = randn(&[4, 4, c], 4, 1.0);
    let spec = AttentionGroupSpec { scale: 1, heads: 1, window: 4, head_dim: 4 };
    let groups = [group_params(spec, c, 80)];
    let (wo, bo) = (randn(&[4, c], 90, 0.5), randn(&[c], 91, 0.1));
    let (y, _) = run_hybrid(&x, &groups, &wo, &bo);
    // Vanilla single-head attention written without any windowing.
    let p = &groups[0];
    let n = 16;
    let mm = |a: &[f64], wt: &Tensor<f64>| -> Vec<f64> {
        (0..n * 4).map(|i| (0..c).map(|k| a[(i / 4) * c + k] * wt.data()[k * 4 + i % 4]).sum()).collect()
    };
    let (q, k, v) = (mm(x.data(), &p.wq), mm(x.data(), &p.wk), mm(x.data(), &p.wv));
    let mut o = vec![0.0; n * 4];
    for i in 0..n {
        let sc: Vec<f64> = (0..n).map(|j| (0..4).map(|e| q[i * 4 + e] * k[j * 4 + e]).sum::<f64>() / 2.0).collect();
        let z: f64 = sc.iter().map(|a| a.exp()).sum();
        for j in 0..n {
            for e in 0..4 {
                o[i * 4 + e] += sc[j].exp() / z * v[j * 4 + e];
            }
        }
    }
    assert!(max_diff(y.data(), &linear_out(&o, &wo, &bo)) < 1e-10);
}

#[test]
fn paper_stage_geometries_preserve_shape() {
    // Stage grids of the 224 input with the small-variant scales and M = 7.
    for (hw, scales) in [(56usize, [1usize, 8]), (28, [1, 4]), (14, [1, 2])] {
        let c = 4;
        let x = randn(&[hw, hw, c], 5, 1.0);
        let groups: Vec<_> = scales
            .iter()
            .enumerate()
            .map(|(i, &s)| group_params(AttentionGroupSpec { scale: s, heads: 1, window: 7, head_dim: 2 }, c, 100 + 10 * i as u64))
            .collect();
        assert!(groups[1].spec.is_global(hw, hw), "largest scale covers the {hw} grid");
        assert!(!groups[0].spec.is_global(hw, hw));
        let (y, out) = run_hybrid(&x, &groups, &randn(&[4, c], 7, 0.5), &Tensor::zeros(&[c]));
        assert_eq!(y.shape(), &[1, hw, hw, c]);
        for head in &out.heads {
            assert!((head.map.sum() - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn constant_values_give_constant_output() {
    let mut g = Graph::<f64>::new();
    let q = g.constant(randn(&[1, 4, 4, 2], 6, 1.0));
    let k = g.constant(randn(&[1, 2, 2, 2], 7, 1.0));
    let v = g.constant(Tensor::full(&[1, 2, 2, 2], 3.25));
    let spec = AttentionGroupSpec { scale: 2, heads: 1, window: 1, head_dim: 2 };
    let (out, atten) = scaled_window_attention(&mut g, q, k, v, &spec).unwrap();
    assert!(g.value(out).data().iter().all(|&o| (o - 3.25).abs() < 1e-12));
    assert_eq!(g.shape(atten), &[1, 4, 1, 4, 1]);
}

#[test]
fn equal_scores_average_the_values() {
    let mut g = Graph::<f64>::new();
    let q = g.constant(Tensor::from_f64(&[1, 1, 2], &[0.0, 0.0]).unwrap());
    let k = g.constant(Tensor::from_f64(&[1, 2, 2], &[1.0, 2.0, -3.0, 0.5]).unwrap());
    let v = g.constant(Tensor::from_f64(&[1, 2, 2], &[1.0, 2.0, 3.0, 6.0]).unwrap());
    let (out, _) = attend(&mut g, q, k, v).unwrap();
    assert_eq!(g.value(out).data(), &[2.0, 4.0]);
}

#[test]
fn window_count_mismatch_is_a_config_error() {
    let mut g = Graph::new();
    let q = g.constant(Tensor::<f64>::zeros(&[1, 8, 8, 2]));
    let k = g.constant(Tensor::<f64>::zeros(&[1, 8, 8, 2]));
    let spec = AttentionGroupSpec { scale: 2, heads: 1, window: 2, head_dim: 2 };
    assert!(matches!(scaled_window_attention(&mut g, q, k, k, &spec), Err(Error::Config(_))));
    let bad = AttentionGroupSpec { scale: 3, heads: 1, window: 2, head_dim: 2 };
    assert!(matches!(bad.validate(8, 8), Err(Error::Config(_))));
}

#[test]
fn merge_tokens_examples() {
    let mut g = Graph::new();
    let x = g.constant(randn::<f64>(&[1, 4, 4, 2], 8, 1.0));
    assert_eq!(merge_tokens(&mut g, x, 1, None).unwrap(), x);
    // Averaging kernel: 0.25 on the diagonal channel map.
    let mut k = Tensor::zeros(&[2, 2, 2, 2]);
    for tap in 0..4 {
        for ch in 0..2 {
            k.data_mut()[(tap * 2 + ch) * 2 + ch] = 0.25;
        }
    }
    let (kv, bv) = (g.constant(k), g.constant(Tensor::zeros(&[2])));
    let m = merge_tokens(&mut g, x, 2, Some((kv, bv))).unwrap();
    let xd = g.value(x).data().to_vec();
    for by in 0..2 {
        for bx in 0..2 {
            for ch in 0..2 {
                let mean = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|(dy, dx)| xd[((by * 2 + dy) * 4 + bx * 2 + dx) * 2 + ch])
                    .sum::<f64>()
                    / 4.0;
                assert!((g.value(m).data()[(by * 2 + bx) * 2 + ch] - mean).abs() < 1e-12);
            }
        }
    }
    let big = g.constant(Tensor::<f64>::zeros(&[1, 56, 56, 1]));
    let (k8, b8) = (g.constant(Tensor::zeros(&[8, 8, 1, 1])), g.constant(Tensor::zeros(&[1])));
    let m8 = merge_tokens(&mut g, big, 8, Some((k8, b8))).unwrap();
    assert_eq!(g.shape(m8), &[1, 7, 7, 1]);
    assert!(merge_tokens(&mut g, x, 3, Some((k8, b8))).is_err());
}

#[test]
fn significance_of_uniform_attention_is_uniform() {
    for (s, m, h) in [(1usize, 2usize, 4usize), (2, 2, 8), (2, 1, 4)] {
        let spec = AttentionGroupSpec { scale: s, heads: 1, window: m, head_dim: 1 };
        let (lq, lk) = ((s * m) * (s * m), m * m);
        let atten = Tensor::full(&[spec.windows(h, h), lq, lk], 1.0 / lk as f64);
        let map = significance_accumulate(&atten, &spec, h, h).unwrap();
        let want = 1.0 / (h * h) as f64;
        assert!(map.data().iter().all(|&v| (v - want).abs() < 1e-15));
    }
}

#[test]
fn significance_of_one_hot_attention_fills_the_key_footprint() {
    // 4x4 grid, s = 2, M = 2: one window, 16 queries, 4 merged keys. Every
    // query puts all its mass on key t = 1 (merged position (0, 1)), so the
    // column mass is 16, i.e. 1 after the 1/(hw) scale, spread over that
    // key's 2x2 footprint as 1/4 each.
    let spec = AttentionGroupSpec { scale: 2, heads: 1, window: 2, head_dim: 1 };
    let mut atten = Tensor::zeros(&[1, 16, 4]);
    for q in 0..16 {
        atten.data_mut()[q * 4 + 1] = 1.0;
    }
    let map = significance_accumulate(&atten, &spec, 4, 4).unwrap();
    #[rustfmt::skip]
    let want = [
        0., 0., 0.25, 0.25,
        0., 0., 0.25, 0.25,
        0., 0., 0., 0.,
        0., 0., 0., 0.,
    ];
    assert_eq!(map.data(), &want);
}

#[test]
fn significance_rejects_wrong_layout() {
    let spec = AttentionGroupSpec { scale: 2, heads: 1, window: 2, head_dim: 1 };
    assert!(significance_accumulate(&Tensor::<f64>::zeros(&[2, 16, 4]), &spec, 4, 4).is_err());
}

#[test]
fn attention_output_passes_gradient_check() {
    let r = finite_diff_check_inputs(
        |g, v| {
            let (o, _) = attend(g, v[0], v[1], v[2])?;
            Ok(g.sum(o))
        },
        &[randn(&[1, 4, 3], 1, 1.0), randn(&[1, 5, 3], 2, 1.0), randn(&[1, 5, 3], 3, 1.0)],
        None,
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");
}

#[test]
fn hybrid_attention_passes_gradient_check() {
    let c = 4;
    let specs = [
        AttentionGroupSpec { scale: 1, heads: 1, window: 2, head_dim: 2 },
        AttentionGroupSpec { scale: 4, heads: 1, window: 2, head_dim: 2 },
    ];
    let mut inputs = vec![randn(&[1, 8, 8, c], 11, 1.0)];
    for (i, s) in specs.iter().enumerate() {
        let p = group_params(*s, c, 200 + 10 * i as u64);
        inputs.extend([p.wq, p.wk, p.wv]);
        if let Some((k, b)) = p.merge {
            inputs.extend([k, b]);
        }
    }
    inputs.push(randn(&[4, c], 300, 0.5));
    inputs.push(randn(&[c], 301, 0.1));
    let probe = randn::<f64>(&[1, 8, 8, c], 302, 1.0);
    let r = finite_diff_check_inputs(
        |g, v| {
            let vars = HybridAttentionVars {
                groups: vec![
                    GroupVars { wq: v[1], wk: v[2], wv: v[3], merge: None },
                    GroupVars { wq: v[4], wk: v[5], wv: v[6], merge: Some((v[7], v[8])) },
                ],
                wo: v[9],
                bo: v[10],
            };
            let out = hybrid_scale_attention(g, v[0], &vars, &specs)?;
            let p = g.constant(probe.clone());
            let y = g.mul(out.y, p)?;
            Ok(g.sum(y))
        },
        &inputs,
        None,
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-4, "{r:?}");
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn partition_round_trips(hw in 1usize..4, m in 1usize..4, c in 1usize..3, seed in 0u64..1000) {
            let h = hw * m;
            let x = randn::<f64>(&[h, 2 * h, c], seed, 1.0);
            let p = window_partition(&x, m).unwrap();
            prop_assert_eq!(window_reverse(&p, m, h, 2 * h).unwrap(), x);
        }

        #[test]
        fn significance_conserves_mass(seed in 0u64..10_000, s in 1usize..3, m in 1usize..3) {
            let h = 2 * s * m;
            let spec = AttentionGroupSpec { scale: s, heads: 1, window: m, head_dim: 1 };
            let (lq, lk) = ((s * m) * (s * m), m * m);
            let mut g = Graph::new();
            let logits = g.constant(randn::<f64>(&[spec.windows(h, h), lq, lk], seed, 2.0));
            let probs = g.softmax(logits).unwrap();
            let map = significance_accumulate(g.value(probs), &spec, h, h).unwrap();
            prop_assert!(map.data().iter().all(|&v| v >= 0.0));
            prop_assert!((map.sum() - 1.0).abs() < 1e-5);
        }
    }
}

