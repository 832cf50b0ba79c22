use std::f64::consts::PI;

use mamp::numerics::{lr_at, AdamW, AdamWConfig, ScheduleConfig, Tape, Var};
use mamp::DenseArray;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> DenseArray {
    DenseArray::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// A small composite of public ops reduced to a scalar.
fn composite<'t>(x: Var<'t>, w: Var<'t>, g: Var<'t>, b: Var<'t>, weights: &DenseArray) -> Var<'t> {
    let h = x.matmul(w).unwrap().gelu().layer_norm(g, b, 1e-6).unwrap().softmax_rows();
    h.mul(x.tape().constant(weights.clone())).unwrap().sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn element_count_must_match_extents(dims in prop::collection::vec(0usize..4, 0..4), extra in 0usize..3) {
        let n: usize = dims.iter().product();
        prop_assert!(DenseArray::new(dims.clone(), vec![0.0; n]).is_ok());
        if extra > 0 {
            prop_assert!(DenseArray::new(dims, vec![0.0; n + extra]).is_err());
        }
    }

    #[test]
    fn composite_gradients_match_finite_differences(rows in 1usize..4, inner in 1usize..4, cols in 2usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![
            random(&[rows, inner], &mut rng),
            random(&[inner, cols], &mut rng),
            random(&[cols], &mut rng),
            random(&[cols], &mut rng),
        ];
        let weights = random(&[rows, cols], &mut rng);
        let eval = |vals: &[DenseArray]| {
            let tape = Tape::new();
            let v: Vec<Var> = vals.iter().map(|a| tape.param(a.clone())).collect();
            composite(v[0], v[1], v[2], v[3], &weights).value().item()
        };
        let tape = Tape::new();
        let v: Vec<Var> = inputs.iter().map(|a| tape.param(a.clone())).collect();
        let loss = composite(v[0], v[1], v[2], v[3], &weights);
        let grads = tape.backward(loss).unwrap();
        let h = 1e-5;
        for (k, var) in v.iter().enumerate() {
            let g = grads.wrt(*var);
            prop_assert_eq!(g.shape(), inputs[k].shape());
            for i in 0..inputs[k].len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= h;
                let num = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let ana = g.data()[i];
                let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-4);
                prop_assert!(err < 1e-4, "input {k}[{i}]: {ana} vs {num}");
            }
        }
    }

    #[test]
    fn backward_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[3, 4], &mut rng);
        let w = random(&[4, 2], &mut rng);
        let grad_of = |ca: f64, cb: f64| {
            let tape = Tape::new();
            let (xv, wv) = (tape.param(x.clone()), tape.param(w.clone()));
            let f = xv.matmul(wv).unwrap().gelu().sum();
            let g = xv.mul(xv).unwrap().sum();
            let loss = f.scale(ca).add(g.scale(cb)).unwrap();
            tape.backward(loss).unwrap().wrt(xv)
        };
        let (gf, gg, combined) = (grad_of(1.0, 0.0), grad_of(0.0, 1.0), grad_of(a, b));
        for i in 0..combined.len() {
            let want = a * gf.data()[i] + b * gg.data()[i];
            prop_assert!((combined.data()[i] - want).abs() < 1e-12 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn adamw_is_deterministic_and_counts_steps(seed in any::<u64>(), steps in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = [vec![2, 3], vec![4]];
        let params: Vec<DenseArray> = shapes.iter().map(|s| random(s, &mut rng)).collect();
        let grads: Vec<Vec<DenseArray>> =
            (0..steps).map(|_| shapes.iter().map(|s| random(s, &mut rng)).collect()).collect();
        let run = || {
            let mut p = params.clone();
            let mut opt = AdamW::new(AdamWConfig::default(), shapes.iter().map(|s| s.as_slice()));
            let mut counters = Vec::new();
            for g in &grads {
                let mut refs: Vec<&mut DenseArray> = p.iter_mut().collect();
                opt.step(&mut refs, &g.iter().collect::<Vec<_>>(), 1e-3, None).unwrap();
                counters.push(opt.step);
            }
            (p, opt, counters)
        };
        let (p1, opt1, counters) = run();
        let (p2, opt2, _) = run();
        prop_assert_eq!(&p1, &p2);
        prop_assert_eq!(&opt1, &opt2);
        prop_assert!(counters.windows(2).all(|w| w[1] > w[0]));
        for (m, s) in opt1.first_moment.iter().zip(&shapes) {
            prop_assert_eq!(m.shape(), s.as_slice());
        }
        prop_assert!(p1.iter().all(|a| a.data().iter().all(|v| v.is_finite())));
    }

    #[test]
    fn schedule_steps_are_bounded(
        warmup in 1usize..5, extra in 1usize..20, per_epoch in 1usize..10,
        peak in 1e-4f64..1.0, floor_frac in 0.0f64..=1.0,
    ) {
        let cfg = ScheduleConfig {
            warmup_epochs: warmup,
            total_epochs: warmup + extra,
            steps_per_epoch: per_epoch,
            peak_lr: peak,
            floor_lr: peak * floor_frac,
        };
        let bound = cfg.peak_lr * (1.0 / cfg.warmup_steps() as f64 + PI / cfg.total_steps() as f64);
        for k in 0..cfg.total_steps() {
            let d = (lr_at(k + 1, &cfg).unwrap() - lr_at(k, &cfg).unwrap()).abs();
            prop_assert!(d <= bound * (1.0 + 1e-12));
        }
        prop_assert_eq!(lr_at(cfg.total_steps(), &cfg).unwrap(), cfg.floor_lr);
    }
}
