mod common;

use common::{dot, rng, uniform_vec, DensePhi};
use proptest::prelude::*;
use rdfnet_core::optics::{
    adjoint, forward, forward_factored, initial_cube, shear, simulate, unshear, DispersionSpec, InitMode, Mask, MaskStack, Measurement, SpectralCube,
};
use rdfnet_core::tensor::LinearOperator;

fn instance(seed: u64, nx: usize, ny: usize, l: usize, step: usize) -> (MaskStack, Vec<f64>) {
    let mut r = rng(seed);
    let m = uniform_vec(&mut r, nx * ny, 0.0, 1.0);
    let masks = MaskStack::new(Mask::new(nx, ny, m.clone()).unwrap(), DispersionSpec { step_px: step, ref_band: 0 }, l).unwrap();
    (masks, m)
}

#[test]
fn forward_and_adjoint_match_dense_matrix() {
    for seed in 0..20 {
        let (nx, ny, l, step) = (4, 4, 3, 1 + (seed as usize % 2));
        let (masks, m) = instance(seed, nx, ny, l, step);
        let phi = DensePhi::build(&m, nx, ny, l, step);
        let mut r = rng(1000 + seed);
        let x = uniform_vec(&mut r, phi.cols, -1.0, 1.0);
        let y = uniform_vec(&mut r, phi.rows, -1.0, 1.0);
        let cube = SpectralCube::new(nx, ny, l, x.clone()).unwrap();
        let meas = Measurement::new(nx, masks.ny_ext(), y.clone()).unwrap();
        let fx = forward(&cube, &masks).unwrap();
        let aty = adjoint(&meas, &masks).unwrap();
        for (a, b) in fx.data().iter().zip(phi.apply(&x)) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in aty.data().iter().zip(phi.apply_t(&y)) {
            assert!((a - b).abs() < 1e-12);
        }
        let lhs = dot(fx.data(), &y);
        let rhs = dot(&x, aty.data());
        assert!((lhs - rhs).abs() <= 1e-10, "seed {seed}: {lhs} vs {rhs}");
    }
}

#[test]
fn phi_phi_t_is_the_detector_gain() {
    let (nx, ny, l, step) = (3, 4, 3, 2);
    let (masks, m) = instance(5, nx, ny, l, step);
    let phi = DensePhi::build(&m, nx, ny, l, step);
    let gain = masks.detector_gain();
    for i in 0..phi.rows {
        for j in 0..phi.rows {
            let v: f64 = (0..phi.cols).map(|c| phi.a[i * phi.cols + c] * phi.a[j * phi.cols + c]).sum();
            let expected = if i == j { gain[i] } else { 0.0 };
            assert!((v - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn operator_handles_batches() {
    let (masks, _) = instance(3, 4, 5, 3, 1);
    let op = masks.operator();
    let mut r = rng(4);
    let cubes: Vec<SpectralCube> = (0..2).map(|_| SpectralCube::new(4, 5, 3, uniform_vec(&mut r, 60, 0.0, 1.0)).unwrap()).collect();
    let batch = SpectralCube::stack(&cubes.iter().collect::<Vec<_>>()).unwrap();
    let y = op.apply(&batch).unwrap();
    assert_eq!(y.shape(), &[2, 1, 4, 7]);
    for (i, c) in cubes.iter().enumerate() {
        let single = forward(c, &masks).unwrap();
        assert_eq!(&y.data()[i * 28..(i + 1) * 28], single.data());
    }
}

#[test]
fn normalized_init_recovers_band_constant_scene() {
    let (nx, ny, l) = (3, 6, 4);
    let masks = MaskStack::new(Mask::new(nx, ny, vec![1.0; nx * ny]).unwrap(), DispersionSpec::default(), l).unwrap();
    let plane: Vec<f64> = (0..nx * ny).map(|i| 0.1 + i as f64 / 40.0).collect();
    let cube = SpectralCube::new(nx, ny, l, plane.repeat(l)).unwrap();
    let y = forward(&cube, &masks).unwrap();
    let x0 = initial_cube(&y, &masks, InitMode::Normalized).unwrap();
    // Each detector column sums `gain` neighbouring pixels; the centre column
    // of band 0 sees exactly columns 0..gain of the scene row.
    let gain = masks.detector_gain();
    for x in 0..nx {
        let col = l - 1;
        let g = gain[x * masks.ny_ext() + col];
        assert_eq!(g, l as f64);
        let expected: f64 = (0..l).map(|b| plane[x * ny + col - b]).sum::<f64>() / g;
        assert!((x0.get(x, col, 0) - expected).abs() < 1e-12);
    }
}

#[test]
fn simulate_is_forward_when_noiseless() {
    let (masks, _) = instance(9, 5, 5, 3, 1);
    let mut r = rng(9);
    let cube = SpectralCube::new(5, 5, 3, uniform_vec(&mut r, 75, 0.0, 1.0)).unwrap();
    let y = simulate(&cube, &masks, 0.0, &mut r).unwrap();
    assert_eq!(y, forward(&cube, &masks).unwrap());
    assert!(simulate(&cube, &masks, -1.0, &mut r).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn forward_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let (masks, _) = instance(seed, 3, 4, 3, 1);
        let mut r = rng(seed + 7);
        let x1 = SpectralCube::new(3, 4, 3, uniform_vec(&mut r, 36, -1.0, 1.0)).unwrap();
        let x2 = SpectralCube::new(3, 4, 3, uniform_vec(&mut r, 36, -1.0, 1.0)).unwrap();
        let combo = x1.scaled(a).axpy(b, &x2).unwrap();
        let lhs = forward(&combo, &masks).unwrap();
        let f1 = forward(&x1, &masks).unwrap();
        let f2 = forward(&x2, &masks).unwrap();
        for i in 0..lhs.data().len() {
            prop_assert!((lhs.data()[i] - (a * f1.data()[i] + b * f2.data()[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn shear_round_trip_is_exact(nx in 1usize..5, ny in 1usize..6, l in 1usize..5, step in 1usize..3, seed in 0u64..100) {
        let mut r = rng(seed);
        let cube = SpectralCube::new(nx, ny, l, uniform_vec(&mut r, nx * ny * l, -1.0, 1.0)).unwrap();
        let disp = DispersionSpec { step_px: step, ref_band: seed as usize % l };
        let back = unshear(&shear(&cube, &disp).unwrap(), &disp).unwrap();
        prop_assert_eq!(back, cube);
    }

    #[test]
    fn factored_and_shifted_mask_forms_agree(seed in 0u64..500) {
        let (masks, _) = instance(seed, 4, 3, 4, 1 + seed as usize % 3);
        let mut r = rng(seed);
        let cube = SpectralCube::new(4, 3, 4, uniform_vec(&mut r, 48, -1.0, 1.0)).unwrap();
        let a = forward(&cube, &masks).unwrap();
        let b = forward_factored(&cube, &masks).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }
}
