mod common;

use candle_core::{DType, Device, Tensor, Var};
use common::*;
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sonartrack::backbone::{Backbone, BackboneConfig, Block, TokenSeq};
use sonartrack::losses::{box_losses_tensor, focal_loss};
use sonartrack::nn::{to_f64_vec, Init, ParamStore};
use sonartrack::scam::{zero_gim_outputs, GimResidual, Scam, ScamConfig, ScamMode};

const MODES: [ScamMode; 4] = [ScamMode::ReluGim, ScamMode::ReluNogim, ScamMode::SoftmaxGim, ScamMode::SoftmaxNogim];

fn build_scam(cfg: &ScamConfig, c: usize, seed: u64) -> (ParamStore, Scam) {
    let mut store = ParamStore::new(DType::F64, Device::Cpu);
    let mut r = rng(seed);
    let scam = Scam::new(&mut Init::new(&mut store, &mut r).pp("scam.0"), c, cfg).unwrap();
    (store, scam)
}

fn seq(m: &Mat, n_z: usize) -> TokenSeq {
    TokenSeq::new(tensor(m), n_z, m.len() - n_z).unwrap()
}

/// Random shape: `(n, c, heads)` with `n, c <= 8` and `heads | c`.
fn random_shape(r: &mut ChaCha8Rng) -> (usize, usize, usize) {
    let heads = [1, 2, 4][r.random_range(0..3)];
    let c = heads * r.random_range(1..=8 / heads);
    (r.random_range(2..=8), c, heads)
}

fn random_cfg(r: &mut ChaCha8Rng, heads: usize) -> ScamConfig {
    ScamConfig {
        mode: MODES[r.random_range(0..4)],
        heads,
        gim_ratio: r.random_range(1..=4),
        gim_residual: if r.random_bool(0.5) { GimResidual::Input } else { GimResidual::Attn },
        prenorm: r.random_bool(0.5),
    }
}

fn scam_oracle(store: &ParamStore, cfg: &ScamConfig, hr: &Mat, hs: &Mat) -> (Mat, Mat) {
    let relu = cfg.mode.uses_relu();
    let (ar, as_) = sca_oracle(store, "scam.0", hr, hs, cfg.heads, relu, cfg.prenorm);
    if !cfg.mode.uses_gim() {
        return (ar, as_);
    }
    let (res_r, res_s) = match cfg.gim_residual {
        GimResidual::Input => (hr, hs),
        GimResidual::Attn => (&ar, &as_),
    };
    (gim_oracle(store, "scam.0", &ar, res_r, true), gim_oracle(store, "scam.0", &as_, res_s, false))
}

#[test]
fn cross_attention_module_matches_dense_oracle() {
    let mut r = rng(100);
    for case in 0..100 {
        let (n, c, heads) = random_shape(&mut r);
        let cfg = random_cfg(&mut r, heads);
        let (store, scam) = build_scam(&cfg, c, case);
        randomize(&store, &mut r, 0.5);
        let hr = random_mat(&mut r, n, c, 1.0);
        let hs = random_mat(&mut r, n, c, 1.0);
        let n_z = r.random_range(1..n);

        let (ar, as_) = scam.sca_forward(&seq(&hr, n_z), &seq(&hs, n_z)).unwrap();
        let (er, es) = sca_oracle(&store, "scam.0", &hr, &hs, heads, cfg.mode.uses_relu(), cfg.prenorm);
        assert!(max_abs_diff(&matrix(&ar.tokens), &er) < 1e-6, "case {case} {cfg:?}");
        assert!(max_abs_diff(&matrix(&as_.tokens), &es) < 1e-6, "case {case} {cfg:?}");

        let (or, os) = scam.forward(&seq(&hr, n_z), &seq(&hs, n_z)).unwrap();
        let (er, es) = scam_oracle(&store, &cfg, &hr, &hs);
        assert!(max_abs_diff(&matrix(&or.tokens), &er) < 1e-6, "case {case} {cfg:?}");
        assert!(max_abs_diff(&matrix(&os.tokens), &es) < 1e-6, "case {case} {cfg:?}");
    }
}

#[test]
fn integration_stage_matches_dense_oracle() {
    let mut r = rng(101);
    for case in 0..100 {
        let (n, c, heads) = random_shape(&mut r);
        let cfg = random_cfg(&mut r, heads);
        let (store, scam) = build_scam(&cfg, c, case);
        randomize(&store, &mut r, 0.5);
        let attn = random_mat(&mut r, n, c, 1.0);
        let orig = random_mat(&mut r, n, c, 1.0);
        for rgb in [true, false] {
            let out = scam.gim_forward(&seq(&attn, 1), &seq(&orig, 1), rgb).unwrap();
            let residual = match cfg.gim_residual {
                GimResidual::Input => &orig,
                GimResidual::Attn => &attn,
            };
            let want = gim_oracle(&store, "scam.0", &attn, residual, rgb);
            assert!(max_abs_diff(&matrix(&out.tokens), &want) < 1e-6, "case {case}");
        }
    }
}

#[test]
fn transformer_block_matches_dense_oracle() {
    let mut r = rng(102);
    for case in 0..100 {
        let (n, c, heads) = random_shape(&mut r);
        let mut store = ParamStore::new(DType::F64, Device::Cpu);
        let mut ir = rng(case);
        let block = Block::new(&mut Init::new(&mut store, &mut ir).pp("blk"), c, heads, r.random_range(1..=4)).unwrap();
        randomize(&store, &mut r, 0.5);
        let x = random_mat(&mut r, n, c, 1.0);
        let got = block.forward_tokens(&tensor(&x)).unwrap();
        let want = block_oracle(&store, "blk", &x, heads);
        assert!(max_abs_diff(&matrix(&got), &want) < 1e-6, "case {case}");
    }
}

#[test]
fn gelu_matches_exact_erf_form() {
    let xs: Vec<f64> = (-400..=400).map(|i| i as f64 / 50.0).collect();
    let t = Tensor::from_vec(xs.clone(), xs.len(), &Device::Cpu).unwrap();
    let got = to_f64_vec(&t.gelu_erf().unwrap()).unwrap();
    for (x, g) in xs.iter().zip(got) {
        assert!((g - gelu(*x)).abs() < 1e-6, "gelu({x}) = {g}");
    }
}

fn var(m: &Mat) -> Var {
    Var::from_tensor(&tensor(m)).unwrap()
}

/// Fixed random weights turning a token matrix into a scalar.
fn probe(r: &mut ChaCha8Rng, n: usize, c: usize) -> Tensor {
    tensor(&random_mat(r, n, c, 1.0))
}

#[test]
fn focal_loss_gradient_matches_finite_differences() {
    let mut r = rng(200);
    for _ in 0..10 {
        let side = 5;
        let p: Vec<f64> = (0..side * side).map(|_| r.random_range(0.05..0.95)).collect();
        let mut t: Vec<f64> = (0..side * side).map(|_| r.random_range(0.0..0.99)).collect();
        t[r.random_range(0..side * side)] = 1.0;
        let pv = Var::from_tensor(&Tensor::from_vec(p, (1, 1, side, side), &Device::Cpu).unwrap()).unwrap();
        let tt = Tensor::from_vec(t, (1, 1, side, side), &Device::Cpu).unwrap();
        let f = || focal_loss(pv.as_tensor(), &tt).unwrap();
        let err = grad_check(std::slice::from_ref(&pv), &f, 25, 1e-6, 1);
        assert!(err < 1e-4, "relative error {err}");
    }
}

#[test]
fn box_loss_gradients_match_finite_differences() {
    let mut r = rng(201);
    for _ in 0..20 {
        let rows = 3;
        let boxes = |r: &mut ChaCha8Rng| -> Vec<f64> {
            (0..rows)
                .flat_map(|_| {
                    [r.random_range(0.0..0.6), r.random_range(0.0..0.6), r.random_range(0.05..0.4), r.random_range(0.05..0.4)]
                })
                .collect()
        };
        let pv = Var::from_tensor(&Tensor::from_vec(boxes(&mut r), (rows, 4), &Device::Cpu).unwrap()).unwrap();
        let gt = Tensor::from_vec(boxes(&mut r), (rows, 4), &Device::Cpu).unwrap();
        let giou = || box_losses_tensor(pv.as_tensor(), &gt).unwrap().0;
        let l1 = || box_losses_tensor(pv.as_tensor(), &gt).unwrap().1;
        assert!(grad_check(std::slice::from_ref(&pv), &giou, 12, 1e-6, 2) < 1e-4);
        assert!(grad_check(std::slice::from_ref(&pv), &l1, 12, 1e-6, 3) < 1e-4);
    }
}

#[test]
fn cross_attention_gradients_match_finite_differences() {
    let mut r = rng(202);
    for (case, mode) in MODES.into_iter().enumerate() {
        let (n, c) = (5, 4);
        let cfg = ScamConfig {
            mode,
            heads: 2,
            gim_ratio: 2,
            prenorm: case % 2 == 1,
            ..Default::default()
        };
        let (store, scam) = build_scam(&cfg, c, case as u64);
        randomize(&store, &mut r, 0.5);
        let (xr, xs) = (var(&random_mat(&mut r, n, c, 1.0)), var(&random_mat(&mut r, n, c, 1.0)));
        let (pr, ps) = (probe(&mut r, n, c), probe(&mut r, n, c));
        let f = || {
            let hr = TokenSeq::new(xr.as_tensor().clone(), 2, n - 2).unwrap();
            let hs = TokenSeq::new(xs.as_tensor().clone(), 2, n - 2).unwrap();
            let (or, os) = scam.forward(&hr, &hs).unwrap();
            ((or.tokens * &pr).unwrap().sum_all().unwrap() + (os.tokens * &ps).unwrap().sum_all().unwrap()).unwrap()
        };
        let mut vars: Vec<Var> = store.iter().map(|(_, v)| v.clone()).collect();
        vars.extend([xr.clone(), xs.clone()]);
        let err = grad_check(&vars, &f, 6, 1e-6, case as u64);
        assert!(err < 1e-4, "{mode:?}: relative error {err}");
    }
}

#[test]
fn transformer_block_gradients_match_finite_differences() {
    let mut r = rng(203);
    let (n, c) = (5, 4);
    let mut store = ParamStore::new(DType::F64, Device::Cpu);
    let mut ir = rng(0);
    let block = Block::new(&mut Init::new(&mut store, &mut ir).pp("blk"), c, 2, 2).unwrap();
    randomize(&store, &mut r, 0.5);
    let x = var(&random_mat(&mut r, n, c, 1.0));
    let p = probe(&mut r, n, c);
    let f = || (block.forward_tokens(x.as_tensor()).unwrap() * &p).unwrap().sum_all().unwrap();
    let mut vars: Vec<Var> = store.iter().map(|(_, v)| v.clone()).collect();
    vars.push(x.clone());
    let err = grad_check(&vars, &f, 6, 1e-6, 9);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn closed_relu_gate_blocks_key_and_value_gradients() {
    let c = 4;
    let cfg = ScamConfig {
        mode: ScamMode::ReluNogim,
        ..Default::default()
    };
    let (store, scam) = build_scam(&cfg, c, 0);
    let mut r = rng(300);
    // keys are the negated inputs, so positive tokens score negatively
    // against every query
    for name in ["scam.0.kv_r.weight", "scam.0.kv_s.weight"] {
        let mut w = vec![0.0; 2 * c * c];
        for i in 0..c {
            w[i * c + i] = -1.0;
        }
        for v in &mut w[c * c..] {
            *v = normal(&mut r);
        }
        store.assign(name, &Tensor::from_vec(w, (2 * c, c), &Device::Cpu).unwrap()).unwrap();
    }
    let pos = |r: &mut ChaCha8Rng| -> Mat { (0..5).map(|_| (0..c).map(|_| r.random_range(0.1..2.0)).collect()).collect() };
    let (hr, hs) = (pos(&mut r), pos(&mut r));
    let (or, os) = scam.forward(&seq(&hr, 1), &seq(&hs, 1)).unwrap();
    assert_eq!(matrix(&or.tokens), hr);
    assert_eq!(matrix(&os.tokens), hs);
    let loss = (or.tokens.sum_all().unwrap() + os.tokens.sum_all().unwrap()).unwrap();
    let grads = loss.backward().unwrap();
    for name in ["scam.0.kv_r.weight", "scam.0.kv_s.weight"] {
        let g = grads.get(store.get(name).unwrap()).map(|g| to_f64_vec(g).unwrap());
        assert!(g.is_none_or(|g| g.iter().all(|v| *v == 0.0)), "{name} received gradient");
    }
}

#[test]
fn exchanging_modalities_mirrors_the_output() {
    let mut r = rng(400);
    for case in 0..20 {
        let (n, c, heads) = random_shape(&mut r);
        let cfg = random_cfg(&mut r, heads);
        let (store, scam) = build_scam(&cfg, c, case);
        randomize(&store, &mut r, 0.5);
        let hr = seq(&random_mat(&mut r, n, c, 1.0), 1);
        let hs = seq(&random_mat(&mut r, n, c, 1.0), 1);
        let (or, os) = scam.forward(&hr, &hs).unwrap();
        let (sr, ss) = scam.swapped().forward(&hs, &hr).unwrap();
        assert_eq!(matrix(&or.tokens), matrix(&ss.tokens));
        assert_eq!(matrix(&os.tokens), matrix(&sr.tokens));
    }
}

#[test]
fn dual_stack_is_blocks_then_modules_at_listed_layers() {
    let cfg = BackboneConfig {
        depth: 3,
        dim: 4,
        heads: 2,
        patch: 16,
        mlp_ratio: 2,
        template_size: 16,
        search_size: 32,
        scam_layers: vec![1, 3],
        share_branches: false,
    };
    let scfg = ScamConfig::default();
    let mut store = ParamStore::new(DType::F64, Device::Cpu);
    let mut ir = rng(1);
    let (bb, scams) = {
        let mut init = Init::new(&mut store, &mut ir);
        let bb = Backbone::new(&mut init.pp("bb"), &cfg).unwrap();
        let scams: Vec<Scam> = (0..2).map(|k| Scam::new(&mut init.pp(format!("scam.{k}")), 4, &scfg).unwrap()).collect();
        (bb, scams)
    };
    let mut r = rng(500);
    randomize(&store, &mut r, 0.5);
    let (mut xr, mut xs) = (random_mat(&mut r, 5, 4, 1.0), random_mat(&mut r, 5, 4, 1.0));
    let (or, os) = bb.forward_dual(&seq(&xr, 1), &seq(&xs, 1), &scams).unwrap();

    let mut next = 0;
    for layer in 1..=3 {
        xr = block_oracle(&store, &format!("bb.rgb.blocks.{}", layer - 1), &xr, 2);
        xs = block_oracle(&store, &format!("bb.sonar.blocks.{}", layer - 1), &xs, 2);
        if cfg.scam_layers.contains(&layer) {
            let p = format!("scam.{next}");
            let (ar, as_) = sca_oracle(&store, &p, &xr, &xs, 1, true, false);
            (xr, xs) = (gim_oracle(&store, &p, &ar, &xr, true), gim_oracle(&store, &p, &as_, &xs, false));
            next += 1;
        }
    }
    assert!(max_abs_diff(&matrix(&or.tokens), &xr) < 1e-6);
    assert!(max_abs_diff(&matrix(&os.tokens), &xs) < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn zeroed_integration_output_is_identity(
        seed in any::<u64>(),
        n in 2usize..9,
        heads_pow in 0u32..3,
        per_head in 1usize..3,
        mode in prop::sample::select(vec![ScamMode::ReluGim, ScamMode::SoftmaxGim]),
        prenorm in any::<bool>(),
    ) {
        let heads = 1usize << heads_pow;
        let c = heads * per_head;
        let cfg = ScamConfig { mode, heads, prenorm, ..Default::default() };
        let (store, scam) = build_scam(&cfg, c, seed);
        let mut r = rng(seed);
        randomize(&store, &mut r, 1.0);
        zero_gim_outputs(&store, "scam").unwrap();
        let hr = random_mat(&mut r, n, c, 3.0);
        let hs = random_mat(&mut r, n, c, 3.0);
        let (or, os) = scam.forward(&seq(&hr, 1), &seq(&hs, 1)).unwrap();
        prop_assert_eq!(matrix(&or.tokens), hr);
        prop_assert_eq!(matrix(&os.tokens), hs);
    }
}
