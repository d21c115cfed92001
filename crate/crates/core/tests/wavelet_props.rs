use proptest::prelude::*;
use wavescore_core::wavelet::{build_pyramid, collapse_pyramid, haar_analysis_step, haar_synthesis_step};
use wavescore_core::Tensor;

fn image(side: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-4.0f64..4.0, side * side)
        .prop_map(move |v| Tensor::from_vec(&[1, side, side], v).unwrap())
}

fn sized_image() -> impl Strategy<Value = (usize, Tensor<f64>)> {
    (1usize..=3, 0usize..=2).prop_flat_map(|(depth, extra)| {
        let side = (1 << depth) * (1 + extra);
        image(side).prop_map(move |x| (depth, x))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pyramid_inverts_and_preserves_energy((depth, x) in sized_image()) {
        let p = build_pyramid(&x, depth).unwrap();
        let back = collapse_pyramid(&p).unwrap();
        prop_assert!(back.sub(&x).unwrap().max_abs() < 1e-12);
        let e = x.sum_sq();
        prop_assert!((p.energy() - e).abs() <= 1e-12 * e.max(1.0));
    }

    #[test]
    fn analysis_is_linear(x in image(8), y in image(8), a in -3.0f64..3.0) {
        let (dx, lx) = haar_analysis_step(&x).unwrap();
        let (dy, ly) = haar_analysis_step(&y).unwrap();
        let mut z = x.clone();
        z.axpy(a, &y).unwrap();
        let (dz, lz) = haar_analysis_step(&z).unwrap();
        let mut de = dx.clone();
        de.axpy(a, &dy).unwrap();
        let mut le = lx.clone();
        le.axpy(a, &ly).unwrap();
        prop_assert!(dz.sub(&de).unwrap().max_abs() < 1e-12);
        prop_assert!(lz.sub(&le).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn synthesis_is_adjoint_of_analysis(x in image(8), d in image(4), l in image(4)) {
        // <W x, (d, l)> = <x, W^T (d, l)> with d reused across the three channels.
        let d3 = Tensor::concat0(&[&d, &d.scale(-0.5), &d.scale(2.0)]).unwrap();
        let (dx, lx) = haar_analysis_step(&x).unwrap();
        let lhs = dx.dot(&d3).unwrap() + lx.dot(&l).unwrap();
        let rhs = x.dot(&haar_synthesis_step(&d3, &l).unwrap()).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-10);
    }
}

#[test]
fn odd_or_too_small_sides_are_dimension_errors() {
    let x = Tensor::<f64>::zeros(&[1, 6, 6]);
    assert!(build_pyramid(&x, 2).is_err());
    assert!(build_pyramid(&Tensor::<f64>::zeros(&[1, 5, 5]), 1).is_err());
}
