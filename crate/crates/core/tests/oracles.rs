//! Independent scalar-loop oracles for the numeric kernels, plus
//! finite-difference checks of every differentiable op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uniavatar_core::attention::attention_with_probs;
use uniavatar_core::{
    finite_diff_check, self_attention, AttentionWeights, Graph, ParamSet, Tensor, Var,
    LAYER_NORM_EPS,
};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn conv_oracle(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, ks) = (k.shape()[0], k.shape()[2]);
    let oh = (h + 2 * pad - ks) / stride + 1;
    let ow = (w + 2 * pad - ks) / stride + 1;
    let mut out = Vec::new();
    for oc in 0..o {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ic in 0..c {
                    for ky in 0..ks {
                        for kx in 0..ks {
                            let iy = (oy * stride + ky) as i64 - pad as i64;
                            let ix = (ox * stride + kx) as i64 - pad as i64;
                            if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                continue;
                            }
                            acc += x.data()[(ic * h + iy as usize) * w + ix as usize]
                                * k.data()[((oc * c + ic) * ks + ky) * ks + kx];
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_quadruple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&mut rng, &[2, 5, 5]);
    let k = random(&mut rng, &[3, 2, 3, 3]);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let kv = g.constant(k.clone());
        let y = g.conv2d(xv, kv, stride, pad).unwrap();
        let expect = conv_oracle(&x, &k, stride, pad);
        let got = g.value(y).data();
        assert_eq!(got.len(), expect.len());
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn conv2d_stride_two_shape() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::ones(&[1, 4, 4]));
    let k = g.constant(Tensor::ones(&[1, 1, 2, 2]));
    let y = g.conv2d(x, k, 2, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 2, 2]);
}

#[test]
fn layer_norm_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random(&mut rng, &[3, 8]);
    let gain = random(&mut rng, &[8]);
    let bias = random(&mut rng, &[8]);
    let mut g = Graph::new();
    let (xv, gv, bv) = (g.constant(x.clone()), g.constant(gain.clone()), g.constant(bias.clone()));
    let y = g.layer_norm(xv, gv, bv, LAYER_NORM_EPS).unwrap();
    for r in 0..3 {
        let row = &x.data()[r * 8..(r + 1) * 8];
        let mut mean = 0.0;
        for v in row {
            mean += v;
        }
        mean /= 8.0;
        let mut var = 0.0;
        for v in row {
            var += (v - mean) * (v - mean);
        }
        var /= 8.0;
        for j in 0..8 {
            let expect = gain.data()[j] * (row[j] - mean) / (var + LAYER_NORM_EPS).sqrt() + bias.data()[j];
            let got = g.value(y).data()[r * 8 + j];
            assert!((got - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn layer_norm_unit_affine_normalizes_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random(&mut rng, &[5, 16]).map(|v| 10.0 * v + 1.0);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let gv = g.constant(Tensor::ones(&[16]));
    let bv = g.constant(Tensor::zeros(&[16]));
    let y = g.layer_norm(xv, gv, bv, LAYER_NORM_EPS).unwrap();
    for row in g.value(y).data().chunks(16) {
        let mean: f64 = row.iter().sum::<f64>() / 16.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }
}

fn attention_weights(g: &mut Graph, rng: &mut ChaCha8Rng, d: usize, heads: usize) -> (AttentionWeights, [Tensor; 4]) {
    let ts = [
        random(rng, &[d, d]),
        random(rng, &[d, d]),
        random(rng, &[d, d]),
        random(rng, &[d, d]),
    ];
    let w = AttentionWeights {
        wq: g.constant(ts[0].clone()),
        wk: g.constant(ts[1].clone()),
        wv: g.constant(ts[2].clone()),
        wo: g.constant(ts[3].clone()),
        heads,
    };
    (w, ts)
}

fn mat(a: &[f64], n: usize, k: usize, b: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            for p in 0..k {
                out[i * m + j] += a[i * k + p] * b[p * m + j];
            }
        }
    }
    out
}

#[test]
fn attention_matches_explicit_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (n, d, heads) = (4, 8, 2);
    let dh = d / heads;
    let x = random(&mut rng, &[n, d]);
    let mut g = Graph::new();
    let (w, [wq, wk, wv, wo]) = attention_weights(&mut g, &mut rng, d, heads);
    let xv = g.constant(x.clone());
    let y = self_attention(&mut g, xv, &w).unwrap();

    let q = mat(x.data(), n, d, wq.data(), d);
    let k = mat(x.data(), n, d, wk.data(), d);
    let v = mat(x.data(), n, d, wv.data(), d);
    let mut merged = vec![0.0; n * d];
    for h in 0..heads {
        for i in 0..n {
            let mut scores = vec![0.0; n];
            for j in 0..n {
                for c in 0..dh {
                    scores[j] += q[i * d + h * dh + c] * k[j * d + h * dh + c];
                }
                scores[j] /= (dh as f64).sqrt();
            }
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for j in 0..n {
                let p = (scores[j] - m).exp() / z;
                for c in 0..dh {
                    merged[i * d + h * dh + c] += p * v[j * d + h * dh + c];
                }
            }
        }
    }
    let expect = mat(&merged, n, d, wo.data(), d);
    for (a, b) in g.value(y).data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn single_token_attention_is_value_then_output_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = random(&mut rng, &[1, 6]);
    let mut g = Graph::new();
    let (w, [_, _, wv, wo]) = attention_weights(&mut g, &mut rng, 6, 3);
    let xv = g.constant(x.clone());
    let y = self_attention(&mut g, xv, &w).unwrap();
    let expect = mat(&mat(x.data(), 1, 6, wv.data(), 6), 1, 6, wo.data(), 6);
    for (a, b) in g.value(y).data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn identical_tokens_attend_uniformly() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let row = random(&mut rng, &[1, 8]);
    let x = Tensor::from_vec(&[5, 8], row.data().repeat(5));
    let mut g = Graph::new();
    let (w, _) = attention_weights(&mut g, &mut rng, 8, 2);
    let xv = g.constant(x);
    let (_, probs) = attention_with_probs(&mut g, xv, xv, &w).unwrap();
    for p in probs {
        for v in g.value(p).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }
}

#[test]
fn indivisible_heads_is_config_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut g = Graph::new();
    let (w, _) = attention_weights(&mut g, &mut rng, 6, 4);
    let x = g.constant(Tensor::ones(&[2, 6]));
    assert!(matches!(
        self_attention(&mut g, x, &w),
        Err(uniavatar_core::Error::Config(_))
    ));
}

// ---- gradient checks -----------------------------------------------------

fn check(params: ParamSet, f: impl Fn(&mut Graph, &ParamSet) -> uniavatar_core::Result<Var> + Sync, tol: f64) {
    let report = finite_diff_check(f, &params, 1e-5).unwrap();
    assert!(
        report.max_rel_error < tol,
        "max relative error {} at {:?}",
        report.max_rel_error,
        report.worst
    );
}

fn set(rng: &mut ChaCha8Rng, specs: &[(&str, &[usize])]) -> ParamSet {
    let mut p = ParamSet::new();
    for (name, shape) in specs {
        p.insert(*name, random(rng, shape));
    }
    p
}

/// Weighted sum with fixed pseudo-random weights, so gradients are not
/// trivially uniform.
fn probe(g: &mut Graph, y: Var) -> Var {
    let n = g.value(y).len();
    let shape = g.shape(y).to_vec();
    let w = Tensor::from_vec(&shape, (0..n).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect());
    let wv = g.constant(w);
    let p = g.mul(y, wv).unwrap();
    g.sum(p)
}

#[test]
fn gradients_of_elementwise_and_structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let params = set(&mut rng, &[("a", &[3, 4]), ("b", &[3, 4]), ("v", &[4]), ("c", &[2, 5, 3]), ("cv", &[2])]);
    check(
        params,
        |g, p| {
            let a = g.param(p, "a")?;
            let b = g.param(p, "b")?;
            let v = g.param(p, "v")?;
            let c = g.param(p, "c")?;
            let t = g.tanh(a);
            let s = g.silu(b);
            let m = g.mul(t, s)?;
            let d = g.sub(m, a)?;
            let r = g.bias_rows(d, v)?;
            let r = g.mul_rows(r, v)?;
            let sq = g.square(r);
            let sc = g.scale(sq, 0.7);
            let cat = g.concat_rows(&[sc, a])?;
            let sl = g.slice_rows(cat, 1, 4)?;
            let cc = g.concat_cols(&[sl, sl])?;
            let sc2 = g.slice_cols(cc, 2, 5)?;
            let sm = g.softmax(sc2);
            let cv = g.param(p, "cv")?;
            let cb = g.bias_channels(c, cv)?;
            let cb = g.transpose_last2(cb)?;
            let cb = g.permute01(cb)?;
            let cbs = g.reshape(cb, &[5, 6])?;
            let mm = g.matmul(sm, cbs)?;
            let mean = g.mean(mm);
            let pr = probe(g, mm);
            g.add(pr, mean)
        },
        1e-4,
    );
}

#[test]
fn gradients_of_conv_norm_pool_upsample() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let params = set(
        &mut rng,
        &[("x", &[2, 6, 6]), ("k", &[3, 2, 3, 3]), ("kb", &[3])],
    );
    check(
        params,
        |g, p| {
            let x = g.param(p, "x")?;
            let k = g.param(p, "k")?;
            let kb = g.param(p, "kb")?;
            let y = g.conv2d(x, k, 2, 1)?;
            let y = g.bias_channels(y, kb)?;
            let y = g.normalize_channels(y, 1e-6)?;
            let u = g.upsample(y, 2)?;
            let a = g.avg_pool(u, 3)?;
            Ok(probe(g, a))
        },
        1e-4,
    );
}

#[test]
fn gradients_of_bmm() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let params = set(&mut rng, &[("a", &[2, 3, 4]), ("b", &[2, 4, 5])]);
    check(
        params,
        |g, p| {
            let a = g.param(p, "a")?;
            let b = g.param(p, "b")?;
            let y = g.bmm(a, b)?;
            Ok(probe(g, y))
        },
        1e-4,
    );
}

#[test]
fn gradients_through_conv_layernorm_attention_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let params = set(
        &mut rng,
        &[
            ("x", &[2, 4, 4]),
            ("k", &[8, 2, 3, 3]),
            ("gain", &[8]),
            ("bias", &[8]),
            ("wq", &[8, 8]),
            ("wk", &[8, 8]),
            ("wv", &[8, 8]),
            ("wo", &[8, 8]),
        ],
    );
    check(
        params,
        |g, p| {
            let x = g.param(p, "x")?;
            let k = g.param(p, "k")?;
            let y = g.conv2d(x, k, 1, 1)?;
            let t = g.to_tokens(y)?;
            let gain = g.param(p, "gain")?;
            let bias = g.param(p, "bias")?;
            let n = g.layer_norm(t, gain, bias, LAYER_NORM_EPS)?;
            let w = AttentionWeights {
                wq: g.param(p, "wq")?,
                wk: g.param(p, "wk")?,
                wv: g.param(p, "wv")?,
                wo: g.param(p, "wo")?,
                heads: 2,
            };
            let a = self_attention(g, n, &w)?;
            Ok(probe(g, a))
        },
        1e-4,
    );
}

#[test]
fn finite_diff_on_quadratic_and_constant() {
    let mut p = ParamSet::new();
    p.insert("x", Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]));
    let quad = |g: &mut Graph, p: &ParamSet| {
        let x = g.param(p, "x")?;
        let s = g.square(x);
        Ok(g.sum(s))
    };
    let report = finite_diff_check(quad, &p, 1e-5).unwrap();
    assert!(report.max_rel_error < 1e-8);

    let constant = |g: &mut Graph, p: &ParamSet| {
        let x = g.param(p, "x")?;
        let z = g.scale(x, 0.0);
        let s = g.sum(z);
        Ok(g.offset(s, 4.2))
    };
    let report = finite_diff_check(constant, &p, 1e-5).unwrap();
    assert!(report.max_rel_error < 1e-6);
}

#[test]
fn finite_diff_flags_nondeterminism() {
    use std::sync::atomic::{AtomicU64, Ordering};
    let counter = AtomicU64::new(0);
    let mut p = ParamSet::new();
    p.insert("x", Tensor::ones(&[2]));
    let f = |g: &mut Graph, p: &ParamSet| {
        let x = g.param(p, "x")?;
        let s = g.sum(x);
        let jitter = counter.fetch_add(1, Ordering::SeqCst) as f64 * 1e-3;
        Ok(g.offset(s, jitter))
    };
    assert!(matches!(
        finite_diff_check(f, &p, 1e-5),
        Err(uniavatar_core::Error::NonDeterministic(_))
    ));
}
