use super::*;
use crate::autodiff::{check_param_gradients, GradCheck};
use crate::rng::stream;

pub(crate) fn tiny(variant: Variant) -> BackboneConfig {
    BackboneConfig {
        frames: 2,
        context: 2,
        height: 4,
        width: 4,
        channels: 1,
        patch_h: 2,
        patch_w: 2,
        stride: 1,
        d_model: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        kappa: 2,
        mode_cap: 2,
        n_blocks: 2,
        lambda_shrink: 0.0,
        context_depth: 1,
        tap_layer: 0,
        pos_encoding: PosEncoding::Absolute,
        variant,
    }
}

/// Parameters with every zero-initialised tensor replaced by small noise so
/// that no path is trivially dead.
fn randomized(model: &Backbone, seed: u64) -> ParamStore {
    let mut rng = stream(seed, "bb-init");
    let mut s = model.init_params(&mut rng).unwrap();
    let names: Vec<String> = s.names().cloned().collect();
    for n in names {
        let t = s.get(&n).unwrap().clone();
        if n.ends_with(".eta") || n.ends_with(".beta") || n.ends_with(".alpha") {
            continue;
        }
        if t.data.iter().all(|&v| v == 0.0) {
            s.insert(n, init::normal(&mut rng, t.rows, t.cols, 0.3));
        }
    }
    s
}

fn window(cfg: &BackboneConfig, seed: u64) -> Tensor {
    init::normal(&mut stream(seed, "win"), cfg.window_rows(), cfg.channels, 1.0)
}

#[test]
fn output_shape_matches_input_for_every_variant() {
    for pe in [PosEncoding::Absolute, PosEncoding::Rotary] {
        for v in Variant::ALL {
            let mut cfg = tiny(v);
            cfg.pos_encoding = pe;
            cfg.depth = 2;
            cfg.tap_layer = 1;
            let m = Backbone::new(cfg).unwrap();
            let s = m.init_params(&mut stream(1, "x")).unwrap();
            let x = window(&cfg, 2);
            let ctx = window(&cfg, 3);
            let out = m.predict(&s, &x, 0.4, v.is_generative().then_some(&ctx)).unwrap();
            assert_eq!(out.shape(), x.shape(), "{v:?} {pe:?}");
            assert!(out.all_finite());
        }
    }
}

#[test]
fn generative_forward_requires_context() {
    let cfg = tiny(Variant::Full);
    let m = Backbone::new(cfg).unwrap();
    let s = m.init_params(&mut stream(1, "x")).unwrap();
    assert!(m.predict(&s, &window(&cfg, 1), 0.5, None).is_err());
    let wrong = Tensor::zeros(3, 1);
    assert!(m.predict(&s, &wrong, 0.5, Some(&window(&cfg, 1))).is_err());
}

#[test]
fn gate_cases() {
    let mut rng = stream(4, "gate");
    let (n, d) = (5, 3);
    let a = init::normal(&mut rng, n, d, 1.0);
    let b = init::normal(&mut rng, n, d, 1.0);
    let run = |s: &ParamStore| {
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let (gate, f) = fuse_gate(&mut g, s, "gate", av, bv);
        (g.value(gate).clone(), g.value(f).clone())
    };
    let mut s = ParamStore::new();
    s.insert("gate.w", Tensor::zeros(2 * d, 1));
    s.insert("gate.b", Tensor::zeros(1, 1));
    let (gate, f) = run(&s);
    assert!(gate.data.iter().all(|&v| v == 0.5));
    assert!(f.zip_map(&a.zip_map(&b, |x, y| (x + y) / 2.0), |x, y| (x - y).abs()).max_abs() < 1e-15);

    s.insert("gate.b", Tensor::scalar(30.0));
    let (_, f) = run(&s);
    assert!(f.zip_map(&a, |x, y| (x - y).abs()).max_abs() < 1e-9);

    // loop oracle plus convexity with random weights
    let w = init::normal(&mut rng, 2 * d, 1, 1.0);
    s.insert("gate.w", w.clone());
    s.insert("gate.b", Tensor::scalar(-0.3));
    let (gate, f) = run(&s);
    for r in 0..n {
        let z: f64 = (0..d).map(|c| a.at(r, c) * w.at(c, 0) + b.at(r, c) * w.at(d + c, 0)).sum::<f64>() - 0.3;
        let gr = 1.0 / (1.0 + (-z).exp());
        assert!((gate.at(r, 0) - gr).abs() < 1e-12);
        assert!(gr > 0.0 && gr < 1.0);
        for c in 0..d {
            let want = gr * a.at(r, c) + (1.0 - gr) * b.at(r, c);
            assert!((f.at(r, c) - want).abs() < 1e-12);
            let (lo, hi) = (a.at(r, c).min(b.at(r, c)), a.at(r, c).max(b.at(r, c)));
            assert!(f.at(r, c) >= lo - 1e-15 && f.at(r, c) <= hi + 1e-15);
        }
    }
}

#[test]
fn vanilla_fusion_is_a_sum_and_single_branches_pass_through() {
    let mut rng = stream(5, "fuse");
    let a = init::normal(&mut rng, 4, 2, 1.0);
    let b = init::normal(&mut rng, 4, 2, 1.0);
    let s = ParamStore::new();
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let (gate, f) = fuse_branches(&mut g, &s, "gate", Variant::VanillaFusion, Some(av), Some(bv));
    assert!(gate.is_none());
    assert_eq!(g.value(f), &a.zip_map(&b, |x, y| x + y));
    let (_, f) = fuse_branches(&mut g, &s, "gate", Variant::NoFm, Some(av), None);
    assert_eq!(f, av);
    let (_, f) = fuse_branches(&mut g, &s, "gate", Variant::NoSfa, None, Some(bv));
    assert_eq!(f, bv);
}

#[test]
fn zero_modulation_removes_time_dependence() {
    let cfg = tiny(Variant::Full);
    let m = Backbone::new(cfg).unwrap();
    let mut s = m.init_params(&mut stream(6, "mod")).unwrap();
    let (x, ctx) = (window(&cfg, 1), window(&cfg, 2));
    let a = m.predict(&s, &x, 0.1, Some(&ctx)).unwrap();
    let b = m.predict(&s, &x, 0.9, Some(&ctx)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, m.predict(&s, &x, 0.1, Some(&ctx)).unwrap());
    s.insert("blocks.0.ada.w", init::normal(&mut stream(7, "ada"), 8, 32, 0.5));
    let c = m.predict(&s, &x, 0.1, Some(&ctx)).unwrap();
    let d = m.predict(&s, &x, 0.9, Some(&ctx)).unwrap();
    assert!(c.zip_map(&d, |p, q| (p - q).abs()).max_abs() > 1e-6);
}

#[test]
fn no_fm_leaves_fourier_parameters_without_gradient() {
    let cfg = tiny(Variant::Full);
    let full = Backbone::new(cfg).unwrap();
    let s = randomized(&full, 8);
    let ablated = Backbone::new(cfg.with_variant(Variant::NoFm)).unwrap();
    let mut g = Graph::new();
    let x = g.constant(window(&cfg, 1));
    let ctx = g.constant(window(&cfg, 2));
    let out = ablated.forward(&mut g, &s, x, 0.3, Some(ctx)).unwrap();
    let loss = g.sum(out.velocity);
    let grads = g.backward(loss).into_param_grads(&s);
    for (name, grad) in &grads {
        let dead = name.contains(".fm.") || name.contains(".gate.");
        assert!(!dead || grad.max_abs() == 0.0, "{name}");
    }
    assert!(grads.keys().any(|n| n.contains(".sfa.")));
    assert!(!grads.keys().any(|n| n.contains(".fm.") || n.contains(".gate.")));
}

#[test]
fn variants_never_add_parameters() {
    let cfg = BackboneConfig::default();
    let base = Backbone::new(cfg).unwrap().init_params(&mut stream(9, "count")).unwrap().count();
    for v in Variant::ALL {
        let n = Backbone::new(cfg.with_variant(v)).unwrap().init_params(&mut stream(9, "count")).unwrap().count();
        assert!(n <= base, "{v:?}: {n} > {base}");
    }
}

#[test]
fn tap_has_token_geometry() {
    let cfg = tiny(Variant::Full);
    let m = Backbone::new(cfg).unwrap();
    let s = m.init_params(&mut stream(1, "x")).unwrap();
    let mut g = Graph::new();
    let x = g.constant(window(&cfg, 1));
    let ctx = g.constant(window(&cfg, 2));
    let out = m.forward(&mut g, &s, x, 0.3, Some(ctx)).unwrap();
    assert_eq!(g.shape(out.tap), (cfg.tokens(), cfg.d_model));
    assert_eq!(out.gates.len(), cfg.depth);
    assert!(out.gates.iter().all(|&gv| g.value(gv).data.iter().all(|&v| v > 0.0 && v < 1.0)));
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let cfg = tiny(Variant::Full);
    let m = Backbone::new(cfg).unwrap();
    let mut s = randomized(&m, 10);
    s.quantize_f32();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    save_checkpoint(&path, &s, &cfg, serde_json::json!({"epoch": 3})).unwrap();
    let (loaded, lcfg, extra) = load_checkpoint(&path).unwrap();
    assert_eq!(lcfg, cfg);
    assert_eq!(extra["epoch"], 3);
    assert_eq!(loaded.max_abs_diff(&s), Some(0.0));
    let (x, ctx) = (window(&cfg, 1), window(&cfg, 2));
    let a = m.predict(&s, &x, 0.3, Some(&ctx)).unwrap();
    let b = m.predict(&loaded, &x, 0.3, Some(&ctx)).unwrap();
    assert_eq!(a, b);
    let path2 = dir.path().join("ck2.bin");
    save_checkpoint(&path2, &loaded, &lcfg, extra).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
}

fn end_to_end_gradcheck(cfg: BackboneConfig) -> f64 {
    let m = Backbone::new(cfg).unwrap();
    let mut s = randomized(&m, 11);
    s.insert("input.x", window(&cfg, 1));
    s.insert("input.ctx", window(&cfg, 2));
    let weights = window(&cfg, 3);
    let report = check_param_gradients(&s, GradCheck::default(), |g, st| {
        let x = g.param(st, "input.x");
        let ctx = cfg.variant.is_generative().then(|| g.param(st, "input.ctx"));
        let out = m.forward(g, st, x, 0.37, ctx).unwrap();
        let w = g.constant(weights.clone());
        let p = g.mul(out.velocity, w);
        let a = g.sum(p);
        let t = g.mean(out.tap);
        g.add(a, t)
    });
    assert!(report.per_param.len() > 20);
    eprintln!("{:?} worst {:e} at {:?}", cfg.variant, report.worst(), report.worst_name());
    report.worst()
}

#[test]
fn depth_one_backbone_matches_finite_differences() {
    assert!(end_to_end_gradcheck(tiny(Variant::Full)) < 1e-4);
    let mut rot = tiny(Variant::Full);
    rot.pos_encoding = PosEncoding::Rotary;
    rot.lambda_shrink = 0.01;
    assert!(end_to_end_gradcheck(rot) < 1e-4);
}

#[test]
fn ablated_backbones_match_finite_differences() {
    for v in [Variant::StandardAttention, Variant::NoFreqWeight, Variant::Surrogate, Variant::VanillaFusion] {
        assert!(end_to_end_gradcheck(tiny(v)) < 1e-4, "{v:?}");
    }
}

#[test]
fn init_is_deterministic_per_seed() {
    let m = Backbone::new(tiny(Variant::Full)).unwrap();
    let a = m.init_params(&mut stream(3, "i")).unwrap();
    let b = m.init_params(&mut stream(3, "i")).unwrap();
    let c = m.init_params(&mut stream(4, "i")).unwrap();
    assert_eq!(a.max_abs_diff(&b), Some(0.0));
    assert!(a.max_abs_diff(&c).unwrap() > 0.0);
}

#[test]
fn config_validation() {
    let mut c = tiny(Variant::Full);
    c.tap_layer = 1;
    assert!(c.validate().is_err());
    let mut c = tiny(Variant::Full);
    c.context = 3;
    assert!(c.validate().is_err());
    assert!(BackboneConfig::default().validate().is_ok());
    assert_eq!(Variant::from_tag("no_fm").unwrap(), Variant::NoFm);
    assert!(Variant::from_tag("nope").is_err());
}
