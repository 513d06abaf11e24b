use iclfgd::data::assemble_prompt;
use iclfgd::linalg::{sym_eig, Mat, Rng};
use iclfgd::transformer::{activation_apply, forward, forward_unmasked, predict_at_layer, Activation, TfParams};
use proptest::prelude::*;

fn activation() -> impl Strategy<Value = Activation> {
    prop::sample::select(Activation::ALL.to_vec())
}

/// Random `Z_0` with `N(0, 1/d)` covariates and standard-normal labels.
fn random_prompt(d: usize, n: usize, rng: &mut Rng) -> iclfgd::data::Prompt {
    let s = 1.0 / (d as f64).sqrt();
    let x = Mat::from_fn(d, n + 1, |_, _| s * rng.normal());
    assemble_prompt(x, rng.normals(n + 1)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn query_never_influences_demonstration_columns(
        act in activation(), d in 1usize..5, n in 1usize..8, layers in 1usize..4, seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed);
        let params = TfParams::gaussian(d, layers, false, 0.5, &mut rng);
        let p = random_prompt(d, n, &mut rng);
        let mut moved = p.z0.clone();
        for i in 0..d {
            moved[(i, n)] += rng.normal();
        }
        let a = forward(&params, act, &p.z0).unwrap();
        let b = forward(&params, act, &moved).unwrap();
        for (za, zb) in a.zs.iter().zip(&b.zs) {
            for i in 0..=d {
                prop_assert_eq!(&za.row(i)[..n], &zb.row(i)[..n]);
            }
        }
    }

    #[test]
    fn duplicated_query_differs_by_its_label(
        act in activation(), d in 1usize..5, n in 1usize..8, layers in 1usize..4, seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed);
        let params = TfParams::gaussian(d, layers, false, 0.5, &mut rng);
        let mut p = random_prompt(d, n, &mut rng);
        let i = rng.below(n);
        for r in 0..d {
            p.z0[(r, n)] = p.z0[(r, i)];
        }
        let traj = forward(&params, act, &p.z0).unwrap();
        for l in 0..traj.zs.len() {
            let z = &traj.zs[l];
            prop_assert!((z[(d, i)] - z[(d, n)] - p.y[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn unmasked_trajectory_carries_the_query_label(
        act in activation(), d in 1usize..5, n in 1usize..8, layers in 1usize..4, seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed);
        let params = TfParams::gaussian(d, layers, false, 0.5, &mut rng);
        let p = random_prompt(d, n, &mut rng);
        let masked = forward(&params, act, &p.z0).unwrap();
        let bar = forward_unmasked(&params, act, &p.x, &p.y).unwrap();
        for l in 0..masked.zs.len() {
            let (ym, yb) = (masked.y(l), bar.y(l));
            for j in 0..n {
                prop_assert!((yb[j] - ym[j]).abs() < 1e-10);
            }
            prop_assert!((yb[n] - ym[n] - p.y[n]).abs() < 1e-10);
        }
    }

    #[test]
    fn masked_softmax_columns_are_stochastic(d in 1usize..5, n in 1usize..10, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let u = Mat::from_fn(d, n + 1, |_, _| 2.0 * rng.normal());
        let w = Mat::from_fn(d, n + 1, |_, _| 2.0 * rng.normal());
        let h = activation_apply(Activation::MaskedSoftmax, &u, &w).unwrap();
        for j in 0..=n {
            let total: f64 = (0..n).map(|i| h[(i, j)]).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert_eq!(h[(n, j)], 0.0);
        }
    }

    #[test]
    fn zero_params_predict_zero(act in activation(), d in 1usize..5, n in 1usize..8, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let params = TfParams::zeros(d, 3, true);
        let p = random_prompt(d, n, &mut rng);
        let traj = forward(&params, act, &p.z0).unwrap();
        for l in 0..traj.zs.len() {
            prop_assert_eq!(&traj.zs[l], &p.z0);
            prop_assert_eq!(predict_at_layer(&traj, l).unwrap(), 0.0);
        }
    }
}

#[test]
fn eigendecomposition_reconstructs_random_symmetric_matrices() {
    let mut rng = Rng::new(17);
    for _ in 0..1000 {
        let g = Mat::from_fn(6, 6, |_, _| rng.normal());
        let m = g.add(&g.transpose()).unwrap().scale(0.5);
        let eig = sym_eig(&m).unwrap();
        let err = eig.reassemble(|v| v).dist_frobenius(&m);
        assert!(err <= 1e-9 * (1.0 + m.frobenius()), "reconstruction error {err}");
    }
}

#[test]
fn rng_streams_replay() {
    let (mut a, mut b) = (Rng::new(2024), Rng::new(2024));
    for _ in 0..100_000 {
        assert_eq!(a.normal().to_bits(), b.normal().to_bits());
    }
}
