use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use scenepose_core::skeleton::{self, KinematicTree};
use scenepose_model::grouping::{build_hierarchy, HierarchyConfig};
use scenepose_model::kinematics::{anchored_positions, forward_kinematics, TreeTensors};
use scenepose_model::nn::{named_vars, parameter_hash, sigmoid};
use scenepose_model::stage1::*;
use scenepose_model::stage2::*;

const DEV: Device = Device::Cpu;

fn t(data: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(data, shape, &DEV).unwrap()
}

fn v(x: &Tensor) -> Vec<f64> {
    x.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap()
}

fn random(n: usize, seed: u64, scale: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn set(map: &VarMap, name: &str, value: Tensor) {
    map.data().lock().unwrap()[name].set(&value).unwrap();
}

fn zero_matching(map: &VarMap, needle: &str) {
    for (name, var) in named_vars(map, &[]) {
        if name.contains(needle) {
            var.set(&var.as_tensor().zeros_like().unwrap()).unwrap();
        }
    }
}

fn small_stage1(map: &VarMap) -> Stage1 {
    let cfg = Stage1Config {
        d_model: 32,
        layers: 2,
        heads: 8,
        ..Default::default()
    };
    Stage1::new(cfg, VarBuilder::from_varmap(map, DType::F64, &DEV).pp("s1")).unwrap()
}

fn inputs(b: usize, frames: usize, seed: u64) -> (Tensor, Tensor) {
    (
        t(random(b * frames * 36, seed, 1.0), &[b, frames, 36]),
        t(random(b * frames * 132, seed + 1, 1.0), &[b, frames, 132]),
    )
}

#[test]
fn embedding_is_linear_per_stream() {
    let map = VarMap::new();
    let s1 = small_stage1(&map);
    let (x, h) = inputs(1, 40, 1);
    let z = s1.embed_inputs(&x, &h).unwrap();
    assert_eq!(z.dims(), &[1, 40, 32]);
    zero_matching(&map, "bias");
    let zero = s1.embed_inputs(&x.zeros_like().unwrap(), &h.zeros_like().unwrap()).unwrap();
    assert!(v(&zero).iter().all(|&a| a == 0.0));
    let one = s1.embed_inputs(&x, &h).unwrap();
    let two = s1.embed_inputs(&(&x * 2.0).unwrap(), &h).unwrap();
    let a = v(&one.narrow(2, 0, 16).unwrap());
    let b = v(&two.narrow(2, 0, 16).unwrap());
    assert!(a.iter().zip(&b).all(|(p, q)| (2.0 * p - q).abs() < 1e-12));
    assert_eq!(v(&one.narrow(2, 16, 16).unwrap()), v(&two.narrow(2, 16, 16).unwrap()));
}

#[test]
fn encoder_shapes_normalization_and_order_sensitivity() {
    let map = VarMap::new();
    let s1 = small_stage1(&map);
    let (x, h) = inputs(2, 40, 3);
    let z = s1.embed_inputs(&x, &h).unwrap();
    let (out, attn) = s1.encode_with_attention(&z).unwrap();
    assert_eq!(out.dims(), &[2, 40, 32]);
    assert_eq!(attn.len(), 2);
    for w in &attn {
        assert_eq!(w.dims(), &[2, 8, 40, 40]);
        let rows = v(&w.sum(3).unwrap());
        assert!(rows.iter().all(|r| (r - 1.0).abs() < 1e-6));
    }
    // Reversing time does not simply reverse the output.
    let idx = Tensor::from_vec((0..40u32).rev().collect::<Vec<_>>(), 40, &DEV).unwrap();
    let rev = s1.encode(&z.index_select(&idx, 1).unwrap()).unwrap().index_select(&idx, 1).unwrap();
    assert!(max_abs_diff(&v(&rev), &v(&out)) > 1e-3);

    let a = s1.forward(&x, &h).unwrap();
    let b = s1.forward(&x, &h).unwrap();
    assert_eq!(v(&a.theta_mean), v(&b.theta_mean));
    assert_eq!(v(&a.delta), v(&b.delta));
    assert_eq!(a.theta_mean.dims(), &[2, 40, 132]);
}

#[test]
fn heads_and_uncertainty_floor() {
    let map = VarMap::new();
    let s1 = small_stage1(&map);
    let z = t(random(40 * 32, 5, 1.0), &[1, 40, 32]);
    zero_matching(&map, "pose_head");
    assert!(v(&s1.regress_pose(&z).unwrap()).iter().all(|&a| a == 0.0));
    let d0 = v(&uncertainty_from_raw(&t(vec![0.0], &[1])).unwrap())[0];
    assert!((d0 - (std::f64::consts::LN_2 + 1e-3)).abs() < 1e-12);
    let low = v(&uncertainty_from_raw(&t(vec![-1e4], &[1])).unwrap())[0];
    assert!((low - DELTA_MIN).abs() < 1e-15);
    let raws = t(random(1000, 6, 50.0), &[1000]);
    assert!(v(&uncertainty_from_raw(&raws).unwrap()).iter().all(|&d| d >= DELTA_MIN));
}

#[test]
fn pose_head_gradient_matches_finite_differences() {
    let map = VarMap::new();
    let s1 = small_stage1(&map);
    let z0 = random(2 * 32, 7, 1.0);
    let w = t(random(2 * 132, 8, 1.0), &[1, 2, 132]);
    let f = |z: &Tensor| (s1.regress_pose(z).unwrap() * &w).unwrap().sum_all().unwrap();
    let var = Var::from_tensor(&t(z0.clone(), &[1, 2, 32])).unwrap();
    let g = f(var.as_tensor()).backward().unwrap();
    let analytic = v(g.get(var.as_tensor()).unwrap());
    let h = 1e-6;
    let mut num = Vec::new();
    for i in 0..z0.len() {
        let mut p = z0.clone();
        let mut m = z0.clone();
        p[i] += h;
        m[i] -= h;
        num.push((v(&f(&t(p, &[1, 2, 32])))[0] - v(&f(&t(m, &[1, 2, 32])))[0]) / (2.0 * h));
    }
    let err = max_abs_diff(&analytic, &num) / analytic.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    assert!(err < 1e-4, "{err}");
}

#[test]
fn sampling_statistics() {
    let mean = t(random(4, 9, 1.0), &[1, 1, 4]);
    let delta = t(vec![0.1, 0.5, 1.0, 2.0], &[1, 1, 4]);
    assert_eq!(v(&sample_pose(&mean, &delta, &mean.zeros_like().unwrap()).unwrap()), v(&mean));
    let plus = sample_pose(&mean, &delta, &mean.ones_like().unwrap()).unwrap();
    assert_eq!(v(&plus), v(&(&mean + &delta).unwrap()));

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let n = 10_000;
    let mut sums = [0.0; 4];
    let mut sq = [0.0; 4];
    for _ in 0..n {
        let eps: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
        let draw = v(&sample_pose(&mean, &delta, &t(eps, &[1, 1, 4])).unwrap());
        for c in 0..4 {
            sums[c] += draw[c];
            sq[c] += draw[c] * draw[c];
        }
    }
    let d = v(&delta);
    for c in 0..4 {
        let m = sums[c] / n as f64;
        let std = (sq[c] / n as f64 - m * m).sqrt();
        assert!((std - d[c]).abs() / d[c] < 0.05, "channel {c}: {std} vs {}", d[c]);
    }
}

#[test]
fn stage1_loss_closed_forms() {
    let gt = t(random(40 * 132, 11, 1.0), &[1, 40, 132]);
    let ones = gt.ones_like().unwrap();
    let l = loss_stage1(&gt, &ones, &gt, 1.0, 0.001, UncertaintyLoss::Literal).unwrap();
    assert_eq!(v(&l.l_m)[0], 0.0);
    assert!((v(&l.l_delta)[0] - 5280f64.sqrt().ln()).abs() < 1e-6);
    assert!((v(&l.l_delta)[0] - 4.2859).abs() < 1e-4);
    assert!((v(&l.total)[0] - 0.001 * 5280f64.sqrt().ln()).abs() < 1e-9);
    assert!(loss_stage1(&gt, &ones.zeros_like().unwrap(), &gt, 1.0, 0.001, UncertaintyLoss::Literal).is_err());
}

#[test]
fn stage1_loss_gradients_match_finite_differences() {
    let shape = [1, 2, 24];
    let mean0 = random(48, 12, 1.0);
    let delta0: Vec<f64> = random(48, 13, 0.4).iter().map(|d| 0.6 + d).collect();
    let gt = t(random(48, 14, 1.0), &shape);
    for kind in [UncertaintyLoss::Literal, UncertaintyLoss::GaussianNll] {
        let eval = |m: &[f64], d: &[f64]| {
            let l = loss_stage1(&t(m.to_vec(), &shape), &t(d.to_vec(), &shape), &gt, 1.0, 0.001, kind).unwrap();
            (v(&l.l_m)[0], v(&l.l_delta)[0], v(&l.total)[0])
        };
        let vm = Var::from_tensor(&t(mean0.clone(), &shape)).unwrap();
        let vd = Var::from_tensor(&t(delta0.clone(), &shape)).unwrap();
        for pick in 0..3 {
            let l = loss_stage1(vm.as_tensor(), vd.as_tensor(), &gt, 1.0, 0.001, kind).unwrap();
            let target = [&l.l_m, &l.l_delta, &l.total][pick];
            let g = target.backward().unwrap();
            let mut analytic = v(g.get(vm.as_tensor()).unwrap());
            if pick > 0 {
                analytic.extend(v(g.get(vd.as_tensor()).unwrap()));
            }
            let h = 1e-6;
            let mut num = Vec::new();
            let scalar = |m: &[f64], d: &[f64]| {
                let r = eval(m, d);
                [r.0, r.1, r.2][pick]
            };
            for i in 0..48 {
                let (mut p, mut m) = (mean0.clone(), mean0.clone());
                p[i] += h;
                m[i] -= h;
                num.push((scalar(&p, &delta0) - scalar(&m, &delta0)) / (2.0 * h));
            }
            if pick > 0 {
                for i in 0..48 {
                    let (mut p, mut m) = (delta0.clone(), delta0.clone());
                    p[i] += h;
                    m[i] -= h;
                    num.push((scalar(&mean0, &p) - scalar(&mean0, &m)) / (2.0 * h));
                }
            }
            let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
            let diff: Vec<f64> = analytic.iter().zip(&num).map(|(a, b)| a - b).collect();
            assert!(norm(&diff) / norm(&analytic).max(norm(&num)) < 1e-4, "{kind:?} term {pick}");
        }
    }
}

#[test]
fn uncertainty_loss_has_an_interior_minimum_in_delta() {
    let gt = t(vec![0.0], &[1, 1, 1]);
    let mean = t(vec![0.3], &[1, 1, 1]);
    for kind in [UncertaintyLoss::Literal, UncertaintyLoss::GaussianNll] {
        let scan: Vec<(f64, f64)> = (1..400)
            .map(|k| {
                let d = k as f64 * 0.005;
                let l = loss_stage1(&mean, &t(vec![d], &[1, 1, 1]), &gt, 1.0, 1.0, kind).unwrap();
                (d, v(&l.l_delta)[0])
            })
            .collect();
        let best = scan.iter().cloned().fold((0.0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
        assert!(best.0 > 0.005 && best.0 < 1.99, "{kind:?} minimum at the scan boundary");
        // |r|/δ + log δ is minimal at δ = |r|; the per-element form at δ = |r| too.
        assert!((best.0 - 0.3).abs() < 0.01, "{kind:?}: {}", best.0);
    }
}

#[test]
fn history_teacher_forcing_alignment() {
    let poses: Vec<f64> = (0..10).flat_map(|f| vec![f as f64; 2]).collect();
    let rest = [9.0, 9.0];
    assert_eq!(history_window(&poses, 2, 0, 3, 1, &rest), vec![9.0, 9.0, 0.0, 0.0, 1.0, 1.0]);
    let w = history_window(&poses, 2, 4, 4, 1, &rest);
    for k in 0..4 {
        assert_eq!(w[2 * k], (4 + k - 1) as f64);
    }
    assert_eq!(history_window(&poses, 2, 0, 4, 4, &rest), vec![9.0; 8]);
}

fn tiny_stage2_config(encoder: EnvEncoderKind) -> Stage2Config {
    Stage2Config {
        d_model: 8,
        env_dim: 8,
        attn_dim: 8,
        crop_points: 8,
        encoder,
        flat_width: 8,
        hierarchy: HierarchyConfig {
            centers1: 4,
            radius1: 2.0,
            neighbors1: 3,
            centers2: 2,
            radius2: 3.0,
            neighbors2: 2,
            width1: 4,
            width2: 6,
        },
        salience_hidden: 4,
        ..Default::default()
    }
}

struct Stage2Case {
    theta: Tensor,
    head: Tensor,
    x_new: Tensor,
    env: EnvBatch,
    salience: Tensor,
}

fn stage2_case(cfg: &Stage2Config, b: usize, frames: usize, seed: u64) -> Stage2Case {
    let n = cfg.crop_points;
    let pts = random(b * n * 3, seed, 1.0);
    let hierarchies = (0..b)
        .map(|k| {
            let p: Vec<[f32; 3]> = (0..n).map(|i| [0, 1, 2].map(|c| pts[(k * n + i) * 3 + c] as f32)).collect();
            build_hierarchy(&p, &cfg.hierarchy)
        })
        .collect();
    Stage2Case {
        theta: t(random(b * frames * 132, seed + 1, 1.0), &[b, frames, 132]),
        head: t(random(b * frames * 3, seed + 2, 1.0), &[b, frames, 3]),
        x_new: t(random(b * frames * 40, seed + 3, 1.0), &[b, frames, 40]),
        env: EnvBatch { points: t(pts, &[b, n, 3]), hierarchies },
        salience: t(random(b * n * 4, seed + 4, 1.0), &[b, n, 4]),
    }
}

fn build_stage2(cfg: Stage2Config, map: &VarMap) -> Stage2 {
    Stage2::new(cfg, VarBuilder::from_varmap(map, DType::F64, &DEV).pp("s2")).unwrap()
}

#[test]
fn published_widths() {
    let cfg = Stage2Config::default();
    assert_eq!(cfg.motion_concat_dim(), 175);
    assert_eq!((cfg.d_model, cfg.crop_points), (256, 1000));
    let map = VarMap::new();
    let s2 = build_stage2(Stage2Config { encoder: EnvEncoderKind::Flat, ..cfg }, &map);
    let c = stage2_case(&s2.config, 1, 40, 20);
    let z = s2.embed_motion(&c.theta, &c.head, &c.x_new).unwrap();
    assert_eq!(z.dims(), &[1, 40, 256]);
    assert_eq!(s2.encode_environment(&c.env).unwrap().dims(), &[1, 1000, 256]);
    let zero = s2.embed_motion(&c.theta.zeros_like().unwrap(), &c.head.zeros_like().unwrap(), &c.x_new.zeros_like().unwrap()).unwrap();
    let bias = v(&map.data().lock().unwrap()["s2.motion_embed.bias"].as_tensor().clone());
    let zero = v(&zero);
    for k in 0..40 {
        assert_eq!(&zero[k * 256..(k + 1) * 256], &bias[..]);
    }
}

#[test]
fn environment_encoders_are_deterministic() {
    for encoder in [EnvEncoderKind::Flat, EnvEncoderKind::Hierarchical] {
        let map = VarMap::new();
        let s2 = build_stage2(tiny_stage2_config(encoder), &map);
        let c = stage2_case(&s2.config, 2, 2, 21);
        assert_eq!(v(&s2.encode_environment(&c.env).unwrap()), v(&s2.encode_environment(&c.env).unwrap()));
        assert_eq!(s2.encode_environment(&c.env).unwrap().dims(), &[2, 8, 8]);
    }
    let map = VarMap::new();
    let s2 = build_stage2(tiny_stage2_config(EnvEncoderKind::Flat), &map);
    let mut pts = random(8 * 3, 22, 1.0);
    pts.copy_within(0..3, 9);
    let env = EnvBatch { points: t(pts, &[1, 8, 3]), hierarchies: vec![] };
    let tok = v(&s2.encode_environment(&env).unwrap());
    assert_eq!(&tok[0..8], &tok[24..32]);
    // Flat variant is permutation equivariant.
    let perm: Vec<u32> = vec![3, 1, 7, 0, 2, 6, 5, 4];
    let idx = Tensor::from_vec(perm.clone(), 8, &DEV).unwrap();
    let permuted = EnvBatch { points: env.points.index_select(&idx, 1).unwrap(), hierarchies: vec![] };
    let a = v(&s2.encode_environment(&permuted).unwrap());
    for (row, &src) in perm.iter().enumerate() {
        assert!(max_abs_diff(&a[row * 8..row * 8 + 8], &tok[src as usize * 8..src as usize * 8 + 8]) < 1e-12);
    }
    let short = EnvBatch { points: t(vec![0.0; 15], &[1, 5, 3]), hierarchies: vec![] };
    assert!(s2.encode_environment(&short).is_err());
}

fn weight(map: &VarMap, name: &str) -> Vec<f64> {
    v(map.data().lock().unwrap()[name].as_tensor())
}

#[test]
fn zero_salience_is_plain_cross_attention() {
    let map = VarMap::new();
    let s2 = build_stage2(tiny_stage2_config(EnvEncoderKind::Flat), &map);
    let c = stage2_case(&s2.config, 1, 3, 23);
    let z_m = t(random(3 * 8, 24, 1.0), &[1, 3, 8]);
    let tokens = t(random(8 * 8, 25, 1.0), &[1, 8, 8]);
    // The salience map starts at zero output.
    let got = v(&s2.cross_attend(&z_m, &tokens, &c.salience).unwrap());
    let rows = v(&s2.attention_weights(&z_m, &tokens).unwrap().sum(2).unwrap());
    assert!(rows.iter().all(|r| (r - 1.0).abs() < 1e-6));

    let (wq, wk, wv) = (weight(&map, "s2.wq.weight"), weight(&map, "s2.wk.weight"), weight(&map, "s2.wv.weight"));
    let zm = v(&z_m);
    let tk = v(&tokens);
    let lin = |w: &[f64], x: &[f64], out: usize, inp: usize| -> Vec<f64> { (0..out).map(|o| (0..inp).map(|i| w[o * inp + i] * x[i]).sum()).collect() };
    let keys: Vec<Vec<f64>> = (0..8).map(|n| lin(&wk, &tk[n * 8..n * 8 + 8], 8, 8)).collect();
    let vals: Vec<Vec<f64>> = (0..8).map(|n| lin(&wv, &tk[n * 8..n * 8 + 8], 8, 8)).collect();
    let mut expected = Vec::new();
    for f in 0..3 {
        let q = lin(&wq, &zm[f * 8..f * 8 + 8], 8, 8);
        let logits: Vec<f64> = keys.iter().map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / 8f64.sqrt()).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for d in 0..8 {
            expected.push((0..8).map(|n| e[n] / z * vals[n][d]).sum::<f64>());
        }
    }
    assert!(max_abs_diff(&got, &expected) < 1e-5);
}

#[test]
fn constant_tokens_and_uniform_salience_scale_the_value() {
    let map = VarMap::new();
    let s2 = build_stage2(tiny_stage2_config(EnvEncoderKind::Flat), &map);
    let s0 = 0.013;
    set(&map, "s2.salience.l2.bias", t(vec![s0], &[1]));
    let row = random(8, 26, 1.0);
    let tokens = t(row.iter().cloned().cycle().take(64).collect(), &[1, 8, 8]);
    let z_m = t(random(2 * 8, 27, 1.0), &[1, 2, 8]);
    let sal = t(random(8 * 4, 28, 1.0), &[1, 8, 4]);
    let got = v(&s2.cross_attend(&z_m, &tokens, &sal).unwrap());
    let wv = weight(&map, "s2.wv.weight");
    let vbar: Vec<f64> = (0..8).map(|o| (0..8).map(|i| wv[o * 8 + i] * row[i]).sum()).collect();
    for f in 0..2 {
        for d in 0..8 {
            let expected = (1.0 + 8.0 * s0) * vbar[d];
            assert!((got[f * 8 + d] - expected).abs() < 1e-10);
        }
    }
    // Pre-softmax bias keeps rows stochastic, so the result is exactly v̄.
    let map = VarMap::new();
    let s2 = build_stage2(Stage2Config { salience: SalienceMode::PreSoftmaxBias, ..tiny_stage2_config(EnvEncoderKind::Flat) }, &map);
    set(&map, "s2.salience.l2.bias", t(vec![s0], &[1]));
    let wv = weight(&map, "s2.wv.weight");
    let vbar: Vec<f64> = (0..8).map(|o| (0..8).map(|i| wv[o * 8 + i] * row[i]).sum()).collect();
    let got = v(&s2.cross_attend(&z_m, &tokens, &sal).unwrap());
    assert!(max_abs_diff(&got[..8], &vbar) < 1e-10);
}

#[test]
fn contact_head_range_and_perfect_logits() {
    let map = VarMap::new();
    let s2 = build_stage2(tiny_stage2_config(EnvEncoderKind::Flat), &map);
    let c = stage2_case(&s2.config, 1, 40, 29);
    let out = s2.forward(&c.theta, &c.head, &c.x_new, &c.env, &c.salience, Stage2Switches::default()).unwrap();
    assert_eq!(out.contact_probs.dims(), &[1, 40, 22]);
    assert_eq!(out.theta_final.dims(), &[1, 40, 132]);
    assert!(v(&out.contact_probs).iter().all(|&p| p > 0.0 && p < 1.0));
    zero_matching(&map, "contact.l2");
    let (p, _) = s2.predict_contact(&c.x_new, &t(vec![0.0; 40 * 8], &[1, 40, 8])).unwrap();
    assert!(v(&p).iter().all(|&x| x == 0.5));
    let logits = v(&sigmoid(&t(vec![-3.0, 0.0, 2.0], &[3])).unwrap());
    assert!(logits[0] < logits[1] && logits[1] < logits[2]);
    let gt: Vec<f64> = (0..22).map(|i| (i % 2) as f64).collect();
    let perfect: Vec<f64> = gt.iter().map(|&g| if g > 0.5 { 20.0 } else { -20.0 }).collect();
    let bce = scenepose_model::objectives::contact_loss_logits(&t(perfect, &[1, 1, 22]), &t(gt, &[1, 1, 22])).unwrap();
    assert!(v(&bce)[0] < 1e-3);
}

#[test]
fn stage2_forward_is_deterministic_and_switchable() {
    let map = VarMap::new();
    let s2 = build_stage2(tiny_stage2_config(EnvEncoderKind::Hierarchical), &map);
    let c = stage2_case(&s2.config, 2, 4, 30);
    let run = |sw| s2.forward(&c.theta, &c.head, &c.x_new, &c.env, &c.salience, sw).unwrap();
    let a = run(Stage2Switches::default());
    let b = run(Stage2Switches::default());
    assert_eq!(v(&a.theta_final), v(&b.theta_final));
    let off = run(Stage2Switches { env_semantic: false, contact_head: true });
    assert!(max_abs_diff(&v(&off.theta_final), &v(&a.theta_final)) > 0.0);
    let no_contact = run(Stage2Switches { env_semantic: true, contact_head: false });
    assert_eq!(v(&no_contact.contact_probs), v(&a.contact_probs));
    assert!(max_abs_diff(&v(&no_contact.theta_final), &v(&a.theta_final)) > 0.0);
}

#[test]
fn stage2_parameter_gradients_match_finite_differences() {
    for encoder in [EnvEncoderKind::Flat, EnvEncoderKind::Hierarchical] {
        let map = VarMap::new();
        let s2 = build_stage2(tiny_stage2_config(encoder), &map);
        // Give the salience map a live output layer so its path carries gradient.
        set(&map, "s2.salience.l2.weight", t(random(4, 31, 0.3), &[1, 4]));
        let c = stage2_case(&s2.config, 1, 2, 32);
        let w = t(random(2 * 132, 33, 1.0), &[1, 2, 132]);
        let wc = t(random(2 * 22, 34, 1.0), &[1, 2, 22]);
        let loss = || {
            let out = s2.forward(&c.theta, &c.head, &c.x_new, &c.env, &c.salience, Stage2Switches::default()).unwrap();
            ((out.theta_final * &w).unwrap().sum_all().unwrap() + (out.contact_probs * &wc).unwrap().sum_all().unwrap()).unwrap()
        };
        let grads = loss().backward().unwrap();
        let vars = named_vars(&map, &[]);
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        for (name, var) in &vars {
            let g = v(grads.get(var.as_tensor()).unwrap_or_else(|| panic!("no gradient for {name}")));
            assert!(g.iter().any(|&x| x != 0.0), "dead parameter group {name}");
            let base = v(var.as_tensor());
            let shape = var.as_tensor().dims().to_vec();
            for _ in 0..3 {
                let i = rng.gen_range(0..base.len());
                let h = 1e-6;
                let mut p = base.clone();
                p[i] += h;
                var.set(&t(p, &shape)).unwrap();
                let lp = v(&loss())[0];
                let mut m = base.clone();
                m[i] -= h;
                var.set(&t(m, &shape)).unwrap();
                let lm = v(&loss())[0];
                var.set(&t(base.clone(), &shape)).unwrap();
                let num = (lp - lm) / (2.0 * h);
                let err = (num - g[i]).abs() / num.abs().max(g[i].abs()).max(1e-6);
                assert!(err < 1e-3, "{encoder:?} {name}[{i}]: {} vs {num}", g[i]);
            }
        }
    }
}

#[test]
fn stage1_parameter_hash_tracks_changes() {
    let map = VarMap::new();
    let _s1 = small_stage1(&map);
    let head = named_vars(&map, &["s1.unc_head"]);
    let rest: Vec<_> = named_vars(&map, &[]).into_iter().filter(|(n, _)| !n.starts_with("s1.unc_head")).collect();
    assert!(!head.is_empty() && !rest.is_empty());
    let h0 = parameter_hash(&rest).unwrap();
    zero_matching(&map, "unc_head");
    assert_eq!(parameter_hash(&rest).unwrap(), h0);
    zero_matching(&map, "pose_head");
    assert_ne!(parameter_hash(&rest).unwrap(), h0);
}

#[test]
fn tensor_kinematics_gradient_and_anchor() {
    let tree = KinematicTree::smpl_lite();
    let tt = TreeTensors::new(&tree, DType::F64, &DEV).unwrap();
    let mut pose = skeleton::identity_pose(2, 22);
    for (i, p) in random(pose.len(), 36, 0.3).into_iter().enumerate() {
        pose[i] += p;
    }
    let anchor_pos = t(random(6, 37, 1.0), &[1, 2, 3]);
    let placed = anchored_positions(&t(pose.clone(), &[1, 2, 132]), skeleton::HEAD, &anchor_pos, &tt).unwrap();
    let head = v(&placed.narrow(2, skeleton::HEAD, 1).unwrap());
    assert!(max_abs_diff(&head, &v(&anchor_pos)) < 1e-12);

    let w = t(random(2 * 22 * 3, 38, 1.0), &[1, 2, 22, 3]);
    let root = t(vec![0.0; 6], &[1, 2, 3]);
    let f = |p: &Tensor| (forward_kinematics(p, &root, &tt).unwrap().0 * &w).unwrap().sum_all().unwrap();
    let var = Var::from_tensor(&t(pose.clone(), &[1, 2, 132])).unwrap();
    let g = v(f(var.as_tensor()).backward().unwrap().get(var.as_tensor()).unwrap());
    let h = 1e-6;
    let num: Vec<f64> = (0..pose.len())
        .map(|i| {
            let (mut p, mut m) = (pose.clone(), pose.clone());
            p[i] += h;
            m[i] -= h;
            (v(&f(&t(p, &[1, 2, 132])))[0] - v(&f(&t(m, &[1, 2, 132])))[0]) / (2.0 * h)
        })
        .collect();
    let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let diff: Vec<f64> = g.iter().zip(&num).map(|(a, b)| a - b).collect();
    assert!(norm(&diff) / norm(&num) < 1e-4);
}
