//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 6 to 8 train the Tiny model on 8192 images several times and
//! take over an hour on one core.

use std::time::Instant;

use sgformer::cli::dispatch;
use sgformer::formats::{decode_checkpoint, decode_dataset, encode_checkpoint, encode_dataset};
use sgformer::run::{checkpoint_from_trainer, trainer_from_checkpoint, RunConfig};
use sgformer_core::attention::{
    hybrid_scale_attention, AttentionGroupSpec, GroupVars, HybridAttentionVars,
};
use sgformer_core::guided::{
    global_attention, iam, make_guidance, rank_and_group, self_guided_attention, GuidanceSource, GuidedVars,
    MhaVars, ReallocationPlan,
};
use sgformer_core::harness::{
    evaluate, gen_salient_dataset, significance_correlation, Dataset, TrainConfig, Trainer,
};
use sgformer_core::model::{build_variant, Model, ModelConfig, ScaleMode};
use sgformer_core::numerics::{finite_diff_check_inputs, Graph, Var};
use sgformer_core::rng::{self, ChaCha8Rng};
use sgformer_core::{Result, Tensor};

fn randn(shape: &[usize], r: &mut ChaCha8Rng, std: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng::normal(r) * std).collect();
    Tensor::new(shape, data).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Plain-loop oracles. Token lists are row-major `[len][c]`.

fn project(tokens: &[Vec<f64>], w: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (c, out) = (w.shape()[0], w.shape()[1]);
    tokens
        .iter()
        .map(|t| (0..out).map(|o| (0..c).map(|i| t[i] * w.data()[i * out + o]).sum()).collect())
        .collect()
}

/// Multi-head attention of `queries` over `keys`, heads concatenated.
fn oracle_attention(
    queries: &[Vec<f64>],
    keys: &[Vec<f64>],
    wq: &Tensor<f64>,
    wk: &Tensor<f64>,
    wv: &Tensor<f64>,
    heads: usize,
) -> Vec<Vec<f64>> {
    let (q, k, v) = (project(queries, wq), project(keys, wk), project(keys, wv));
    let d = wq.shape()[1] / heads;
    let mut out = vec![vec![0.0; heads * d]; queries.len()];
    for h in 0..heads {
        let lo = h * d;
        for (qi, qv) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|kv| (0..d).map(|j| qv[lo + j] * kv[lo + j]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (ki, vv) in v.iter().enumerate() {
                for j in 0..d {
                    out[qi][lo + j] += e[ki] / z * vv[lo + j];
                }
            }
        }
    }
    out
}

fn affine(tokens: &[Vec<f64>], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<Vec<f64>> {
    project(tokens, w)
        .into_iter()
        .map(|t| t.iter().zip(b.data()).map(|(x, y)| x + y).collect())
        .collect()
}

/// Image `bi` of `x [b, h, w, c]` as a raster token list.
fn tokens_of(x: &Tensor<f64>, bi: usize) -> Vec<Vec<f64>> {
    let s = x.shape();
    let (hw, c) = (s[1] * s[2], s[3]);
    (0..hw).map(|t| x.data()[(bi * hw + t) * c..(bi * hw + t + 1) * c].to_vec()).collect()
}

/// Stride-`s` `s x s` convolution of one image, as merged tokens in raster order.
fn oracle_merge(tokens: &[Vec<f64>], h: usize, w: usize, s: usize, k: &Tensor<f64>, b: &Tensor<f64>) -> Vec<Vec<f64>> {
    let c = tokens[0].len();
    let cout = k.shape()[3];
    let mut out = Vec::new();
    for my in 0..h / s {
        for mx in 0..w / s {
            let mut t = b.data().to_vec();
            for dy in 0..s {
                for dx in 0..s {
                    let src = &tokens[(my * s + dy) * w + mx * s + dx];
                    for ci in 0..c {
                        for co in 0..cout {
                            t[co] += src[ci] * k.data()[((dy * s + dx) * c + ci) * cout + co];
                        }
                    }
                }
            }
            out.push(t);
        }
    }
    out
}

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, n: usize, name: &str, pass: bool, detail: &str, start: Instant) {
        if !pass {
            self.failures += 1;
        }
        println!(
            "criterion {n} [{name}]: {} {detail} ({:.1}s)",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
}

// ---------------------------------------------------------------------------

fn criterion_1() -> (bool, String) {
    let cfg = build_variant("S").unwrap();
    let mut r = rng::seeded(1);
    let mut counts = Vec::new();
    for st in &cfg.stages[..3] {
        let plan = st.plan().unwrap();
        let (h, w) = st.grid;
        let mut g = Graph::<f64>::new();
        let x = g.constant(randn(&[1, h * w, st.dim], &mut r, 1.0));
        let s_map = randn(&[1, h * w], &mut r, 1.0);
        let params: Vec<(Var, Var)> = plan
            .rates()
            .iter()
            .map(|&rate| {
                let wv = g.param(Tensor::full(&[rate], 1.0 / rate as f64));
                let bv = g.param(Tensor::zeros(&[1]));
                (wv, bv)
            })
            .collect();
        let y = iam(&mut g, x, &s_map, &plan, &params).unwrap();
        counts.push(g.shape(y)[1]);
    }
    (counts == [60, 60, 147], format!("kv tokens {counts:?}, expected [60, 60, 147]"))
}

struct GroupParams {
    spec: AttentionGroupSpec,
    wq: Tensor<f64>,
    wk: Tensor<f64>,
    wv: Tensor<f64>,
    merge: Option<(Tensor<f64>, Tensor<f64>)>,
}

fn group_params(spec: AttentionGroupSpec, c: usize, r: &mut ChaCha8Rng) -> GroupParams {
    let gc = spec.channels();
    GroupParams {
        spec,
        wq: randn(&[c, gc], r, 0.4),
        wk: randn(&[c, gc], r, 0.4),
        wv: randn(&[c, gc], r, 0.4),
        merge: (spec.scale > 1).then(|| {
            let s = spec.scale;
            (randn(&[s, s, c, c], r, 0.3), randn(&[c], r, 0.1))
        }),
    }
}

fn bind_group(g: &mut Graph<f64>, p: &GroupParams) -> GroupVars {
    GroupVars {
        wq: g.param(p.wq.clone()),
        wk: g.param(p.wk.clone()),
        wv: g.param(p.wv.clone()),
        merge: p.merge.as_ref().map(|(k, b)| (g.param(k.clone()), g.param(b.clone()))),
    }
}

/// Hybrid layer with a single group; returns `y [b, h, w, c]`.
fn run_single_group(x: &Tensor<f64>, p: &GroupParams, wo: &Tensor<f64>, bo: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let vars = HybridAttentionVars {
        groups: vec![bind_group(&mut g, p)],
        wo: g.param(wo.clone()),
        bo: g.param(bo.clone()),
    };
    let out = hybrid_scale_attention(&mut g, xv, &vars, &[p.spec]).unwrap();
    g.value(out.y).clone()
}

fn mha_params(c: usize, r: &mut ChaCha8Rng) -> [Tensor<f64>; 5] {
    [
        randn(&[c, c], r, 0.4),
        randn(&[c, c], r, 0.4),
        randn(&[c, c], r, 0.4),
        randn(&[c, c], r, 0.4),
        randn(&[c], r, 0.1),
    ]
}

fn bind_mha(g: &mut Graph<f64>, p: &[Tensor<f64>; 5]) -> MhaVars {
    MhaVars {
        wq: g.param(p[0].clone()),
        wk: g.param(p[1].clone()),
        wv: g.param(p[2].clone()),
        wo: g.param(p[3].clone()),
        bo: g.param(p[4].clone()),
    }
}

fn criterion_2() -> (bool, String) {
    let mut r = rng::seeded(2);
    let (b, h, w, c) = (2, 8, 8, 8);
    let x = randn(&[b, h, w, c], &mut r, 1.0);
    let wo = randn(&[c, c], &mut r, 0.4);
    let bo = randn(&[c], &mut r, 0.1);

    // (a) s = 1: plain 4x4 window attention.
    let m = 4;
    let pa = group_params(AttentionGroupSpec { scale: 1, heads: 2, window: m, head_dim: 4 }, c, &mut r);
    let ya = run_single_group(&x, &pa, &wo, &bo);
    let mut want = vec![0.0; ya.len()];
    for bi in 0..b {
        let toks = tokens_of(&x, bi);
        for wy in 0..h / m {
            for wx in 0..w / m {
                let pos: Vec<usize> = (0..m * m).map(|i| (wy * m + i / m) * w + wx * m + i % m).collect();
                let win: Vec<Vec<f64>> = pos.iter().map(|&p| toks[p].clone()).collect();
                let o = affine(&oracle_attention(&win, &win, &pa.wq, &pa.wk, &pa.wv, 2), &wo, &bo);
                for (k, &p) in pos.iter().enumerate() {
                    want[(bi * h * w + p) * c..(bi * h * w + p + 1) * c].copy_from_slice(&o[k]);
                }
            }
        }
    }
    let da = max_diff(ya.data(), &want);

    // (b) s * M = grid: dense attention over the merged tokens.
    let pb = group_params(AttentionGroupSpec { scale: 2, heads: 2, window: 4, head_dim: 4 }, c, &mut r);
    let yb = run_single_group(&x, &pb, &wo, &bo);
    let mut want = Vec::new();
    for bi in 0..b {
        let toks = tokens_of(&x, bi);
        let (k, kb) = pb.merge.as_ref().unwrap();
        let merged = oracle_merge(&toks, h, w, 2, k, kb);
        let o = affine(&oracle_attention(&toks, &merged, &pb.wq, &pb.wk, &pb.wv, 2), &wo, &bo);
        want.extend(o.into_iter().flatten());
    }
    let db = max_diff(yb.data(), &want);

    // (c) one region at rate 1 with unit weight: vanilla multi-head attention.
    let heads = 2;
    let mp = mha_params(c, &mut r);
    let plan = ReallocationPlan::new(h * w, &[1]).unwrap();
    let s_map = randn(&[b, h, w], &mut r, 1.0);
    let run_guided = |plan: &ReallocationPlan, s_map: &Tensor<f64>, agg: &[(Tensor<f64>, Tensor<f64>)]| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let vars = GuidedVars {
            mha: bind_mha(&mut g, &mp),
            aggregate: agg.iter().map(|(w, b)| (g.param(w.clone()), g.param(b.clone()))).collect(),
        };
        let out = self_guided_attention(&mut g, xv, s_map, plan, &vars, heads).unwrap();
        g.value(out.y).clone()
    };
    let yc = run_guided(&plan, &s_map, &[(Tensor::full(&[1], 1.0), Tensor::zeros(&[1]))]);
    let mut want = Vec::new();
    for bi in 0..b {
        let toks = tokens_of(&x, bi);
        let o = affine(&oracle_attention(&toks, &toks, &mp[0], &mp[1], &mp[2], heads), &mp[3], &mp[4]);
        want.extend(o.into_iter().flatten());
    }
    let dc = max_diff(yc.data(), &want);
    let global = {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let vars = bind_mha(&mut g, &mp);
        let out = global_attention(&mut g, xv, &vars, heads).unwrap();
        g.value(out.y).clone()
    };
    let dc = dc.max(max_diff(global.data(), &want));

    // (d) uniform guidance: raster halves aggregated at rates 4 and 2.
    let rates = [4usize, 2];
    let plan = ReallocationPlan::new(h * w, &rates).unwrap();
    let uniform = make_guidance::<f64>(&[], GuidanceSource::Uniform, [b, h, w]).unwrap();
    let agg: Vec<(Tensor<f64>, Tensor<f64>)> =
        rates.iter().map(|&rate| (randn(&[rate], &mut r, 0.5), randn(&[1], &mut r, 0.1))).collect();
    let yd = run_guided(&plan, &uniform, &agg);
    let mut want = Vec::new();
    let half = h * w / 2;
    for bi in 0..b {
        let toks = tokens_of(&x, bi);
        let mut kv = Vec::new();
        for (region, &rate) in rates.iter().enumerate() {
            let (wr, br) = &agg[region];
            for run in 0..half / rate {
                let t: Vec<f64> = (0..c)
                    .map(|d| {
                        (0..rate).map(|j| wr.data()[j] * toks[region * half + run * rate + j][d]).sum::<f64>()
                            + br.data()[0]
                    })
                    .collect();
                kv.push(t);
            }
        }
        let o = affine(&oracle_attention(&toks, &kv, &mp[0], &mp[1], &mp[2], heads), &mp[3], &mp[4]);
        want.extend(o.into_iter().flatten());
    }
    let dd = max_diff(yd.data(), &want);

    let worst = da.max(db).max(dc).max(dd);
    (
        worst < 1e-10,
        format!("max |diff| (a) {da:.1e} (b) {db:.1e} (c) {dc:.1e} (d) {dd:.1e}"),
    )
}

/// Weighted sum with fixed random weights, so every output coordinate
/// reaches the scalar with a distinct coefficient.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = g.constant(randn(&shape, &mut rng::seeded(seed), 1.0));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn criterion_3() -> (bool, String) {
    let mut r = rng::seeded(3);
    let mut worst: (f64, &str) = (0.0, "");
    let mut check = |name: &'static str, inputs: Vec<Tensor<f64>>, f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>| {
        let rep = finite_diff_check_inputs(f, &inputs, None, 1e-5).unwrap();
        if rep.max_rel_err > worst.0 {
            worst = (rep.max_rel_err, name);
        }
    };
    let mut t = |shape: &[usize]| randn(shape, &mut r, 1.0);
    check("matmul", vec![t(&[2, 3, 4]), t(&[2, 4, 5])], &|g, v| {
        let y = g.matmul(v[0], v[1])?;
        probe(g, y, 1)
    });
    check("matmul shared", vec![t(&[2, 3, 4]), t(&[4, 5])], &|g, v| {
        let y = g.matmul(v[0], v[1])?;
        probe(g, y, 2)
    });
    check("matmul_t", vec![t(&[2, 3, 4]), t(&[2, 5, 4])], &|g, v| {
        let y = g.matmul_t(v[0], v[1])?;
        probe(g, y, 3)
    });
    check("add mul", vec![t(&[3, 4]), t(&[3, 4])], &|g, v| {
        let a = g.add(v[0], v[1])?;
        let y = g.mul(a, v[1])?;
        probe(g, y, 4)
    });
    check("bias scalar scale", vec![t(&[3, 4]), t(&[4]), t(&[1])], &|g, v| {
        let y = g.add_bias(v[0], v[1])?;
        let y = g.add_scalar(y, v[2])?;
        let y = g.scale(y, -1.3);
        let y = g.scale_outer(y, vec![0.0, 2.0, 1.1])?;
        probe(g, y, 5)
    });
    check("softmax", vec![t(&[3, 6])], &|g, v| {
        let y = g.softmax(v[0])?;
        probe(g, y, 6)
    });
    check("layer_norm", vec![t(&[4, 6]), t(&[6]), t(&[6])], &|g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
        probe(g, y, 7)
    });
    check("gelu", vec![t(&[12])], &|g, v| {
        let y = g.gelu(v[0]);
        probe(g, y, 8)
    });
    check("conv2d", vec![t(&[2, 6, 5, 2]), t(&[3, 3, 2, 3]), t(&[3])], &|g, v| {
        let y = g.conv2d(v[0], v[1], v[2], 2, 1)?;
        probe(g, y, 9)
    });
    check("depthwise_conv", vec![t(&[2, 4, 5, 3]), t(&[3, 3, 3]), t(&[3])], &|g, v| {
        let y = g.depthwise_conv(v[0], v[1], v[2])?;
        probe(g, y, 10)
    });
    check("gather concat reshape mean", vec![t(&[2, 3, 2]), t(&[2, 2, 2])], &|g, v| {
        let c = g.concat(&[v[0], v[1]], 1)?;
        let idx: Vec<usize> = (0..20).map(|i| (i * 7) % 20).collect();
        let p = g.gather(c, idx, &[5, 4])?;
        let p = g.reshape(p, &[5, 2, 2])?;
        let m = g.mean_axis(p, 1)?;
        probe(g, m, 11)
    });
    check("cross_entropy", vec![randn(&[4, 5], &mut r, 2.0)], &|g, v| g.cross_entropy(v[0], &[0, 4, 2, 2]));

    // Hybrid-scale attention: one local and one global group on an 8x8 grid.
    let c = 8;
    let specs = [
        AttentionGroupSpec { scale: 1, heads: 1, window: 2, head_dim: 4 },
        AttentionGroupSpec { scale: 4, heads: 1, window: 2, head_dim: 4 },
    ];
    let groups: Vec<GroupParams> = specs.iter().map(|&s| group_params(s, c, &mut r)).collect();
    let mut inputs = vec![randn(&[1, 8, 8, c], &mut r, 1.0), randn(&[c, c], &mut r, 0.4), randn(&[c], &mut r, 0.1)];
    for p in &groups {
        inputs.extend([p.wq.clone(), p.wk.clone(), p.wv.clone()]);
        if let Some((k, b)) = &p.merge {
            inputs.extend([k.clone(), b.clone()]);
        }
    }
    check("hybrid attention", inputs, &|g, v| {
        let mut i = 3;
        let mut gv = Vec::new();
        for spec in &specs {
            let merge = (spec.scale > 1).then(|| (v[i + 3], v[i + 4]));
            gv.push(GroupVars { wq: v[i], wk: v[i + 1], wv: v[i + 2], merge });
            i += if spec.scale > 1 { 5 } else { 3 };
        }
        let vars = HybridAttentionVars { groups: gv, wo: v[1], bo: v[2] };
        let out = hybrid_scale_attention(g, v[0], &vars, &specs)?;
        probe(g, out.y, 12)
    });

    // Self-guided attention under a hybrid-derived map.
    let plan = ReallocationPlan::new(16, &[4, 2]).unwrap();
    let s_map = {
        let mut m = randn(&[1, 4, 4], &mut r, 1.0);
        m.data_mut().iter_mut().for_each(|v| *v = v.exp());
        m
    };
    let mp = mha_params(c, &mut r);
    let mut inputs = vec![randn(&[1, 4, 4, c], &mut r, 1.0)];
    inputs.extend(mp.iter().cloned());
    inputs.extend([randn(&[4], &mut r, 0.5), randn(&[1], &mut r, 0.1), randn(&[2], &mut r, 0.5), randn(&[1], &mut r, 0.1)]);
    check("self-guided attention", inputs, &|g, v| {
        let vars = GuidedVars {
            mha: MhaVars { wq: v[1], wk: v[2], wv: v[3], wo: v[4], bo: v[5] },
            aggregate: vec![(v[6], v[7]), (v[8], v[9])],
        };
        let out = self_guided_attention(g, v[0], &s_map, &plan, &vars, 2)?;
        probe(g, out.y, 13)
    });
    let per_op = worst;

    // End to end on Tiny, double precision, random parameter subsample.
    let m = Model::<f64>::new(build_variant("Tiny").unwrap(), 31).unwrap();
    let mut params: Vec<Tensor<f64>> = m.params().to_vec();
    let mut r = rng::seeded(32);
    for t in &mut params {
        t.data_mut().iter_mut().for_each(|v| *v += 0.05 * rng::normal(&mut r));
    }
    let img = randn(&[1, 64, 64, 3], &mut r, 1.0);
    let coords: Vec<(usize, usize)> = (0..240)
        .map(|_| {
            let i = rng::below(&mut r, params.len());
            (i, rng::below(&mut r, params[i].len()))
        })
        .collect();
    let cfg = m.config().clone();
    let e2e = finite_diff_check_inputs(
        |g, v| {
            let model = Model::<f64>::from_params(cfg.clone(), params.clone())?;
            let x = g.constant(img.clone());
            let out = model.forward(g, v, x, None)?;
            g.cross_entropy(out.logits, &[7])
        },
        &params,
        Some(&coords),
        1e-6,
    )
    .unwrap();
    (
        per_op.0 < 1e-4 && e2e.max_rel_err < 1e-3 && e2e.checked >= 200,
        format!(
            "worst per-op rel err {:.1e} ({}), end-to-end Tiny {:.1e} over {} parameters",
            per_op.0, per_op.1, e2e.max_rel_err, e2e.checked
        ),
    )
}

fn criterion_4() -> (bool, String) {
    let mut r = rng::seeded(4);
    // Stage-1 geometry of the S variant: 56x56 tokens, 64 channels.
    let cfg = build_variant("S").unwrap();
    let st = &cfg.stages[0];
    let specs = st.group_specs(ScaleMode::Hybrid);
    let (h, w) = st.grid;
    let c = st.dim;
    let b = 2;
    let mut g = Graph::<f64>::new();
    let x = g.constant(randn(&[b, h, w, c], &mut r, 1.0));
    let groups: Vec<GroupVars> = specs
        .iter()
        .map(|&s| {
            let p = group_params(s, c, &mut r);
            bind_group(&mut g, &p)
        })
        .collect();
    let total: usize = specs.iter().map(|s| s.channels()).sum();
    let vars = HybridAttentionVars {
        groups,
        wo: g.param(randn(&[total, c], &mut r, 0.1)),
        bo: g.param(Tensor::zeros(&[c])),
    };
    let out = hybrid_scale_attention(&mut g, x, &vars, &specs).unwrap();
    let (mut head_err, mut negative) = (0.0f64, false);
    for head in &out.heads {
        for bi in 0..b {
            let m = &head.map.data()[bi * h * w..(bi + 1) * h * w];
            head_err = head_err.max((m.iter().sum::<f64>() - 1.0).abs());
            negative |= m.iter().any(|&v| v < 0.0);
        }
    }
    let full = make_guidance(&out.heads, GuidanceSource::Hybrid, [b, h, w]).unwrap();
    let heads = out.heads.len() as f64;
    let full_err = (0..b)
        .map(|bi| (full.data()[bi * h * w..(bi + 1) * h * w].iter().sum::<f64>() - heads).abs())
        .fold(0.0, f64::max);
    negative |= full.data().iter().any(|&v| v < 0.0);

    // Monotone grouping: every group's values sit at or below the next group's.
    let mut grouping_ok = true;
    for trial in 0..1000 {
        let n = [1, 2, 3, 4][trial % 4];
        let len = n * (1 + rng::below(&mut r, 30));
        let map: Vec<f64> = (0..len)
            .map(|_| if rng::uniform(&mut r) < 0.2 { 0.5 } else { rng::uniform(&mut r) })
            .collect();
        let groups = rank_and_group(&map, n).unwrap();
        let mut seen: Vec<usize> = groups.iter().flatten().copied().collect();
        seen.sort_unstable();
        grouping_ok &= seen == (0..len).collect::<Vec<_>>();
        grouping_ok &= groups.iter().all(|g| g.len() == len / n);
        for pair in groups.windows(2) {
            let hi = pair[0].iter().map(|&i| map[i]).fold(f64::NEG_INFINITY, f64::max);
            let lo = pair[1].iter().map(|&i| map[i]).fold(f64::INFINITY, f64::min);
            grouping_ok &= hi <= lo;
        }
    }
    (
        head_err < 1e-5 && full_err < 1e-4 && !negative && grouping_ok,
        format!(
            "per-head |sum-1| {head_err:.1e}, full |sum-{heads}| {full_err:.1e}, nonnegative {}, monotone grouping on 1000 maps {}",
            !negative, grouping_ok
        ),
    )
}

fn criterion_5() -> (bool, String) {
    let targets = [("S", 22.5e6, 4.8e9), ("M", 38.7e6, 7.5e9), ("B", 77.9e6, 15.6e9)];
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, params, flops) in targets {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = dispatch(["sgformer", "summary", "--variant", name, "--input", "224"], &mut out, &mut err);
        let text = String::from_utf8(out).unwrap();
        let field = |k: &str| -> f64 {
            text.split_whitespace()
                .find_map(|f| f.strip_prefix(k))
                .and_then(|v| v.parse().ok())
                .unwrap_or(f64::NAN)
        };
        let (p, f) = (field("params="), field("flops="));
        let (dp, df) = (p / params - 1.0, f / flops - 1.0);
        ok &= code == 0 && dp.abs() <= 0.15 && df.abs() <= 0.20;
        parts.push(format!("{name} {:.2}M ({:+.1}%) {:.2}G ({:+.1}%)", p / 1e6, dp * 100.0, f / 1e9, df * 100.0));
    }
    (ok, parts.join(", "))
}

struct TrainedRun {
    initial_loss: f64,
    final_loss: f64,
    val_acc: f64,
    corr_before: f64,
    corr_after: f64,
    first_losses: Vec<f64>,
}

fn train_tiny(data: &Dataset, val: &Dataset, seed: u64, guidance: GuidanceSource, held: &[usize]) -> TrainedRun {
    let mut cfg: ModelConfig = build_variant("Tiny").unwrap();
    cfg.guidance = guidance;
    cfg.validate().unwrap();
    let model = Model::<f32>::new(cfg, seed).unwrap();
    let corr_before = significance_correlation(&model, val, held).unwrap();
    let tc = TrainConfig { seed, ..TrainConfig::default() };
    let mut t = Trainer::new(model, tc.clone()).unwrap();
    let mut losses = Vec::new();
    let mut last = f64::NAN;
    for _ in 0..tc.epochs {
        let stats = t.run_epoch(data, |_, l| losses.push(l)).unwrap();
        last = stats.loss;
    }
    TrainedRun {
        initial_loss: losses[0],
        final_loss: last,
        val_acc: evaluate(&t.model, val, 64).unwrap(),
        corr_before,
        corr_after: significance_correlation(&t.model, val, held).unwrap(),
        first_losses: losses[..3].to_vec(),
    }
}

fn criterion_9() -> (bool, String) {
    let data = gen_salient_dataset(7, 48, 10, 64).unwrap();
    let bytes = encode_dataset(&data).unwrap();
    let back = decode_dataset(&bytes).unwrap();
    let bits = |d: &Dataset| d.images().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let data_ok = bits(&back) == bits(&data) && back.labels() == data.labels();

    let mut run = RunConfig { model: build_variant("Tiny").unwrap(), train: TrainConfig::default() };
    run.train.batch = 16;
    run.train.epochs = 4;
    run.train.warmup_epochs = 1;
    run.train.seed = 5;
    let mut a = Trainer::new(Model::<f32>::new(run.model.clone(), 5).unwrap(), run.train.clone()).unwrap();
    a.run_epoch(&data, |_, _| {}).unwrap();
    let ck = checkpoint_from_trainer(&a);
    let encoded = encode_checkpoint(&ck).unwrap();
    let decoded = decode_checkpoint(&encoded).unwrap();
    let ck_ok = decoded == ck && encode_checkpoint(&decoded).unwrap() == encoded;
    let mut b: Trainer<f32> = trainer_from_checkpoint(&decoded, &run).unwrap();
    let params_ok = b.model.params() == a.model.params() && b.step() == a.step();
    let (mut la, mut lb) = (Vec::new(), Vec::new());
    a.run_epoch(&data, |_, l| la.push(l.to_bits())).unwrap();
    b.run_epoch(&data, |_, l| lb.push(l.to_bits())).unwrap();
    let resume_ok = !la.is_empty() && la == lb && a.model.params() == b.model.params();
    (
        data_ok && ck_ok && params_ok && resume_ok,
        format!(
            "dataset bit-exact {data_ok}, checkpoint bit-exact {}, resumed next-step losses identical {resume_ok} ({} steps)",
            ck_ok && params_ok,
            la.len()
        ),
    )
}

fn main() {
    let mut report = Report { failures: 0 };
    let fast: [(usize, &str, fn() -> (bool, String)); 6] = [
        (1, "token reallocation arithmetic", criterion_1),
        (2, "oracle equivalences", criterion_2),
        (3, "gradient suite", criterion_3),
        (4, "significance conservation", criterion_4),
        (5, "parameter and FLOP audit", criterion_5),
        (9, "serialization", criterion_9),
    ];
    for (n, name, f) in fast {
        let start = Instant::now();
        let (pass, detail) = f();
        report.line(n, name, pass, &detail, start);
    }

    let start = Instant::now();
    let data = gen_salient_dataset(0, 8192, 10, 64).unwrap();
    let val = gen_salient_dataset(1, 1024, 10, 64).unwrap();
    let held: Vec<usize> = (0..64).collect();
    let main_run = train_tiny(&data, &val, 0, GuidanceSource::Hybrid, &held);
    let elapsed = start.elapsed();
    // Determinism: a fresh trainer reproduces the first steps bit for bit.
    let mut again = Trainer::new(Model::<f32>::new(build_variant("Tiny").unwrap(), 0).unwrap(), TrainConfig::default())
        .unwrap();
    let mut replay = Vec::new();
    for (indices, flips) in again.epoch_plan(data.len()).into_iter().take(3) {
        let (x, labels) = data.batch::<f32>(&indices, &flips);
        let lr = again.lr(data.len());
        replay.push(again.train_step(&x, &labels, lr).unwrap().0);
    }
    let deterministic = replay.iter().map(|v| v.to_bits()).eq(main_run.first_losses.iter().map(|v| v.to_bits()));
    let pass = main_run.final_loss < 0.5 * main_run.initial_loss
        && main_run.val_acc >= 0.60
        && elapsed.as_secs() <= 30 * 60
        && deterministic;
    report.line(
        6,
        "desk-scale learning",
        pass,
        &format!(
            "loss {:.4} -> {:.4}, held-out accuracy {:.4}, training {:.0}s, replay deterministic {deterministic}",
            main_run.initial_loss,
            main_run.final_loss,
            main_run.val_acc,
            elapsed.as_secs_f64()
        ),
        start,
    );
    let start = Instant::now();
    report.line(
        7,
        "evolving guidance",
        main_run.corr_after > main_run.corr_before,
        &format!(
            "stage-1 significance vs patch mask correlation {:.4} -> {:.4} over {} held-out images",
            main_run.corr_before,
            main_run.corr_after,
            held.len()
        ),
        start,
    );

    let start = Instant::now();
    let mut hybrid = vec![main_run.val_acc];
    let mut uniform = Vec::new();
    for seed in 0..3 {
        if seed > 0 {
            hybrid.push(train_tiny(&data, &val, seed, GuidanceSource::Hybrid, &held).val_acc);
        }
        uniform.push(train_tiny(&data, &val, seed, GuidanceSource::Uniform, &held).val_acc);
    }
    let local = train_tiny(&data, &val, 0, GuidanceSource::LocalOnly, &held).val_acc;
    let global = train_tiny(&data, &val, 0, GuidanceSource::GlobalOnly, &held).val_acc;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    report.line(
        8,
        "ablation ordering",
        mean(&hybrid) >= mean(&uniform) && start.elapsed().as_secs() <= 2 * 3600,
        &format!(
            "mean accuracy hybrid {:.4} {hybrid:?} vs uniform {:.4} {uniform:?}; seed 0 local {local:.4}, global {global:.4} (reported only)",
            mean(&hybrid),
            mean(&uniform)
        ),
        start,
    );

    if report.failures > 0 {
        println!("{} criteria failed", report.failures);
        std::process::exit(1);
    }
}
