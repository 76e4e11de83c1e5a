//! Independent reference implementations used by the integration tests:
//! dense-matrix forward passes for the attention modules, a finite
//! difference gradient checker and a per-frame brute-force scorer.

#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sonartrack::nn::{to_f64_vec, ParamStore};
use sonartrack::evalkit::{SequenceAnnotation, SequenceResult};
use sonartrack::srst::FrameRef;
use sonartrack::BBox;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `(1, n, c)` f64 tensor from a matrix.
pub fn tensor(m: &Mat) -> Tensor {
    let (n, c) = (m.len(), m[0].len());
    let flat: Vec<f64> = m.iter().flatten().copied().collect();
    Tensor::from_vec(flat, (1, n, c), &Device::Cpu).unwrap()
}

/// Matrix view of a `(1, n, c)` tensor.
pub fn matrix(t: &Tensor) -> Mat {
    let dims = t.dims();
    let c = *dims.last().unwrap();
    to_f64_vec(t).unwrap().chunks(c).map(|r| r.to_vec()).collect()
}

pub fn random_mat(rng: &mut ChaCha8Rng, n: usize, c: usize, scale: f64) -> Mat {
    (0..n).map(|_| (0..c).map(|_| scale * normal(rng)).collect()).collect()
}

/// Overwrites every parameter with random values: norm gains near one,
/// everything else zero-mean.
pub fn randomize(store: &ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    let names: Vec<String> = store.names().map(String::from).collect();
    for name in names {
        let var = store.get(&name).unwrap();
        let dims = var.dims().to_vec();
        let n: usize = dims.iter().product();
        let gain = name.contains("norm") && name.ends_with("weight");
        let v: Vec<f64> = (0..n)
            .map(|_| if gain { 1.0 + 0.3 * normal(rng) } else { scale * normal(rng) })
            .collect();
        let t = Tensor::from_vec(v, dims.as_slice(), &Device::Cpu).unwrap();
        store.assign(&name, &t).unwrap();
    }
}

/// A parameter as a row-major matrix `(rows, cols)`; vectors become one row.
pub fn param(store: &ParamStore, name: &str) -> Mat {
    let var = store.get(name).unwrap_or_else(|| panic!("missing {name}"));
    let dims = var.dims();
    let cols = *dims.last().unwrap();
    to_f64_vec(var.as_tensor()).unwrap().chunks(cols).map(|r| r.to_vec()).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

/// `x W^T + b` for a weight stored as `(out, in)`.
pub fn linear(x: &Mat, w: &Mat, b: Option<&[f64]>) -> Mat {
    let mut y = matmul(x, &transpose(w));
    if let Some(b) = b {
        for row in &mut y {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
    }
    y
}

pub fn layer_norm(x: &Mat, g: &[f64], b: &[f64], eps: f64) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            row.iter()
                .zip(g.iter().zip(b))
                .map(|(v, (gg, bb))| (v - mu) / (var + eps).sqrt() * gg + bb)
                .collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2))
}

pub fn softmax_rows(s: &Mat) -> Mat {
    s.iter()
        .map(|row| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        })
        .collect()
}

pub fn cols(m: &Mat, start: usize, len: usize) -> Mat {
    m.iter().map(|r| r[start..start + len].to_vec()).collect()
}

pub fn hcat(parts: &[Mat]) -> Mat {
    (0..parts[0].len())
        .map(|i| parts.iter().flat_map(|p| p[i].iter().copied()).collect())
        .collect()
}

pub fn mlp(x: &Mat, store: &ParamStore, prefix: &str) -> Mat {
    let h = linear(x, &param(store, &format!("{prefix}.fc1.weight")), Some(&param(store, &format!("{prefix}.fc1.bias"))[0]));
    let h: Mat = h.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
    linear(&h, &param(store, &format!("{prefix}.fc2.weight")), Some(&param(store, &format!("{prefix}.fc2.bias"))[0]))
}

/// Multi-head attention core: `gate(Q K^T / sqrt(d)) V` per head.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, heads: usize, relu: bool) -> Mat {
    let c = q[0].len();
    let d = c / heads;
    let per: Vec<Mat> = (0..heads)
        .map(|h| {
            let (qh, kh, vh) = (cols(q, h * d, d), cols(k, h * d, d), cols(v, h * d, d));
            let s: Mat = matmul(&qh, &transpose(&kh))
                .into_iter()
                .map(|r| r.into_iter().map(|x| x / (d as f64).sqrt()).collect())
                .collect();
            let g = if relu {
                s.into_iter().map(|r| r.into_iter().map(|x| x.max(0.0)).collect()).collect()
            } else {
                softmax_rows(&s)
            };
            matmul(&g, &vh)
        })
        .collect();
    hcat(&per)
}

/// Cross-attention stage of the module under `prefix`, returning
/// `(attn_r, attn_s)`.
pub fn sca_oracle(store: &ParamStore, prefix: &str, hr: &Mat, hs: &Mat, heads: usize, relu: bool, prenorm: bool) -> (Mat, Mat) {
    let c = hr[0].len();
    let q = |h: &Mat, m: &str| {
        if prenorm {
            layer_norm(
                h,
                &param(store, &format!("{prefix}.norm_{m}.weight"))[0],
                &param(store, &format!("{prefix}.norm_{m}.bias"))[0],
                1e-6,
            )
        } else {
            h.clone()
        }
    };
    let (qr, qs) = (q(hr, "r"), q(hs, "s"));
    let kvr = linear(&qr, &param(store, &format!("{prefix}.kv_r.weight")), None);
    let kvs = linear(&qs, &param(store, &format!("{prefix}.kv_s.weight")), None);
    let (kr, vr) = (cols(&kvr, 0, c), cols(&kvr, c, c));
    let (ks, vs) = (cols(&kvs, 0, c), cols(&kvs, c, c));
    let ar = add(&attention(&qr, &ks, &vr, heads, relu), hr);
    let as_ = add(&attention(&qs, &kr, &vs, heads, relu), hs);
    (ar, as_)
}

/// Global integration for one branch; `residual` is what gets added back.
pub fn gim_oracle(store: &ParamStore, prefix: &str, attn: &Mat, residual: &Mat, rgb: bool) -> Mat {
    let m = if rgb { "r" } else { "s" };
    add(&mlp(attn, store, &format!("{prefix}.gim_{m}")), residual)
}

/// Pre-norm transformer block with joint attention over all tokens.
pub fn block_oracle(store: &ParamStore, prefix: &str, x: &Mat, heads: usize) -> Mat {
    let c = x[0].len();
    let p = |n: &str| param(store, &format!("{prefix}.{n}"));
    let h = layer_norm(x, &p("norm1.weight")[0], &p("norm1.bias")[0], 1e-6);
    let qkv = linear(&h, &p("attn.qkv.weight"), Some(&p("attn.qkv.bias")[0]));
    let (q, k, v) = (cols(&qkv, 0, c), cols(&qkv, c, c), cols(&qkv, 2 * c, c));
    let a = attention(&q, &k, &v, heads, false);
    let x = add(x, &linear(&a, &p("attn.proj.weight"), Some(&p("attn.proj.bias")[0])));
    let h = layer_norm(&x, &p("norm2.weight")[0], &p("norm2.bias")[0], 1e-6);
    add(&x, &mlp(&h, store, &format!("{prefix}.mlp")))
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Compares the autodiff gradient of a scalar function of `vars` with
/// central differences on up to `per_var` coordinates of each variable.
/// Returns the worst relative error, measured against `max(|a|, |n|, 1)`.
pub fn grad_check(vars: &[Var], f: &dyn Fn() -> Tensor, per_var: usize, h: f64, seed: u64) -> f64 {
    let mut r = rng(seed);
    let loss = f();
    let grads = loss.backward().unwrap();
    let mut worst: f64 = 0.0;
    for var in vars {
        let analytic = grads
            .get(var)
            .map(|g| to_f64_vec(g).unwrap())
            .unwrap_or_else(|| vec![0.0; var.elem_count()]);
        let base = to_f64_vec(var.as_tensor()).unwrap();
        let dims = var.dims().to_vec();
        let picks: Vec<usize> = if base.len() <= per_var {
            (0..base.len()).collect()
        } else {
            (0..per_var).map(|_| r.random_range(0..base.len())).collect()
        };
        for i in picks {
            let eval = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, dims.as_slice(), &Device::Cpu).unwrap()).unwrap();
                f().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            var.set(&Tensor::from_vec(base.clone(), dims.as_slice(), &Device::Cpu).unwrap()).unwrap();
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Random annotation/prediction pair with integer geometry; either side is
/// absent with probability `p_absent`.
pub fn random_box(rng: &mut ChaCha8Rng, p_absent: f64) -> BBox {
    if rng.random::<f64>() < p_absent {
        return BBox::ABSENT;
    }
    let w = rng.random_range(1..40) as f64;
    let h = rng.random_range(1..40) as f64;
    BBox::new(rng.random_range(0..100) as f64, rng.random_range(0..100) as f64, w, h)
}

/// Scores one frame directly from the boxes: `(distance, norm_distance, overlap)`.
fn brute_frame(p: &BBox, g: &BBox) -> Option<(f64, f64, f64)> {
    let absent = |b: &BBox| b.x == 0.0 && b.y == 0.0 && b.w == 0.0 && b.h == 0.0;
    match (absent(p), absent(g)) {
        (true, true) => Some((0.0, 0.0, 1.0)),
        (true, false) | (false, true) => None,
        (false, false) => {
            let (pcx, pcy) = (p.x + p.w / 2.0, p.y + p.h / 2.0);
            let (gcx, gcy) = (g.x + g.w / 2.0, g.y + g.h / 2.0);
            let d = ((pcx - gcx).powi(2) + (pcy - gcy).powi(2)).sqrt();
            let nd = (((pcx - gcx) / g.w).powi(2) + ((pcy - gcy) / g.h).powi(2)).sqrt();
            let ix = ((p.x + p.w).min(g.x + g.w) - p.x.max(g.x)).max(0.0);
            let iy = ((p.y + p.h).min(g.y + g.h) - p.y.max(g.y)).max(0.0);
            let inter = ix * iy;
            let union = p.w * p.h + g.w * g.h - inter;
            Some((d, nd, if union > 0.0 { inter / union } else { 0.0 }))
        }
    }
}

/// `(SR, PR, NPR)` over all frames pooled, with correct absence scored as
/// perfect and one-sided absence as a miss, by explicit per-threshold
/// counting.
pub fn brute_scores(pairs: &[(BBox, BBox)]) -> (f64, f64, f64) {
    let n = pairs.len() as f64;
    let frames: Vec<Option<(f64, f64, f64)>> = pairs.iter().map(|(p, g)| brute_frame(p, g)).collect();
    let count = |pass: &dyn Fn(&(f64, f64, f64)) -> bool| frames.iter().filter(|f| f.as_ref().is_some_and(pass)).count() as f64 / n;

    let mut sr_sum = 0.0;
    for k in 0..=20 {
        let t = k as f64 / 20.0;
        sr_sum += if k == 20 { count(&|f| f.2 >= 1.0) } else { count(&|f| f.2 > t) };
    }
    let pr = count(&|f| f.0 <= 20.0);
    let mut npr_sum = 0.0;
    for k in 0..=50 {
        let t = k as f64 / 100.0;
        npr_sum += count(&|f| f.1 <= t);
    }
    (sr_sum / 21.0, pr, npr_sum / 51.0)
}

/// Annotation with placeholder frames, for scoring only.
pub fn annotated(name: &str, rgb: Vec<BBox>, sonar: Vec<BBox>) -> SequenceAnnotation {
    let frames = vec![FrameRef::Path("unused.png".into()); rgb.len()];
    SequenceAnnotation::new(name, frames.clone(), frames, rgb, sonar, vec![]).unwrap()
}

/// Predictions near the annotation: exact copies, jittered copies, random
/// boxes and wrong absence calls.
pub fn noisy_predictions(rng: &mut ChaCha8Rng, gt: &[BBox]) -> Vec<BBox> {
    gt.iter()
        .map(|g| match rng.random_range(0..10) {
            0 | 1 => *g,
            2 => BBox::ABSENT,
            3 | 4 => random_box(rng, 0.0),
            _ if g.is_absent() => random_box(rng, 0.5),
            _ => BBox::new(
                g.x + rng.random_range(-8..=8) as f64,
                g.y + rng.random_range(-8..=8) as f64,
                (g.w + rng.random_range(-4..=4) as f64).max(1.0),
                (g.h + rng.random_range(-4..=4) as f64).max(1.0),
            ),
        })
        .collect()
}

/// A random benchmark of `1..=4` sequences with matching noisy results.
pub fn random_benchmark(rng: &mut ChaCha8Rng) -> (Vec<SequenceAnnotation>, Vec<SequenceResult>) {
    let mut ann = Vec::new();
    let mut res = Vec::new();
    for k in 0..rng.random_range(1..=4) {
        let n = rng.random_range(1..=30);
        let rgb: Vec<BBox> = (0..n).map(|_| random_box(rng, 0.15)).collect();
        let sonar: Vec<BBox> = (0..n).map(|_| random_box(rng, 0.15)).collect();
        let name = format!("s{k}");
        res.push(SequenceResult {
            name: name.clone(),
            rgb: noisy_predictions(rng, &rgb),
            sonar: noisy_predictions(rng, &sonar),
        });
        ann.push(annotated(&name, rgb, sonar));
    }
    (ann, res)
}

/// Brute-force `(SR, PR, NPR)` of one modality over a whole benchmark.
pub fn brute_benchmark(ann: &[SequenceAnnotation], res: &[SequenceResult], rgb: bool) -> (f64, f64, f64) {
    let mut pairs = Vec::new();
    for (a, r) in ann.iter().zip(res) {
        let (g, p) = if rgb { (&a.rgb_boxes, &r.rgb) } else { (&a.sonar_boxes, &r.sonar) };
        pairs.extend(p.iter().copied().zip(g.iter().copied()));
    }
    brute_scores(&pairs)
}
