use nicomp::composition::{
    compose_values, count_params, expand_to_full, full_bilinear_values, CompositionParams,
};
use nicomp::Tensor;
use proptest::prelude::*;

/// Strategy: (n_parts, part_width, rank, d_out, positions, seed) with Nd <= 12.
fn dims() -> impl Strategy<Value = (usize, usize, usize, usize, usize, u64)> {
    (1usize..=3, 1usize..=4)
        .prop_flat_map(|(n, w)| (Just(n), Just(w), 1..=n * w, 1usize..=4, 1usize..=3, any::<u64>()))
}

fn instance(n: usize, w: usize, r: usize, d_out: usize, pos: usize, seed: u64, extended: bool) -> (CompositionParams, Tensor) {
    let mut g = nicomp::rng::rng(seed, 0);
    let mut params = CompositionParams::init(n, w, r, d_out, extended, &mut g).unwrap();
    params.p = Tensor::randn(params.p.shape(), 1.0, &mut g);
    let rep = Tensor::randn(&[pos, n * w], 1.0, &mut g);
    (params, rep)
}

/// y_i = Σ_{a,b} R⁺_a R⁺_b Σ_k P_ki U_ak V_bk, evaluated with plain loops.
fn naive_bilinear(rep: &Tensor, p: &CompositionParams) -> Vec<f64> {
    let nd = p.input_width();
    let rows = nd + p.extended as usize;
    let (r, d_out) = (p.rank, p.d_out());
    let mut out = Vec::new();
    for pos in 0..rep.rows() {
        let mut x = rep.row(pos).to_vec();
        if p.extended {
            x.push(1.0);
        }
        for i in 0..d_out {
            let mut y = 0.0;
            for a in 0..rows {
                for b in 0..rows {
                    let w: f64 = (0..r)
                        .map(|k| p.p.data()[k * d_out + i] * p.u.data()[a * r + k] * p.v.data()[b * r + k])
                        .sum();
                    y += x[a] * x[b] * w;
                }
            }
            out.push(y);
        }
    }
    out
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn low_rank_matches_plain_loop_oracle((n, w, r, d_out, pos, seed) in dims(), extended in any::<bool>()) {
        let (params, rep) = instance(n, w, r, d_out, pos, seed, extended);
        let got = compose_values(&rep, &params).unwrap();
        prop_assert!(max_diff(got.data(), &naive_bilinear(&rep, &params)) < 1e-10);
    }

    #[test]
    fn expanded_weight_reproduces_low_rank((n, w, r, d_out, pos, seed) in dims()) {
        let (params, rep) = instance(n, w, r, d_out, pos, seed, false);
        let low = compose_values(&rep, &params).unwrap();
        let full = full_bilinear_values(&rep, n, &expand_to_full(&params).unwrap()).unwrap();
        prop_assert!(low.max_abs_diff(&full) < 1e-10);
    }

    #[test]
    fn even_and_degree_two_without_extension((n, w, r, d_out, pos, seed) in dims(), alpha in -3.0f64..3.0) {
        let (params, rep) = instance(n, w, r, d_out, pos, seed, false);
        let base = compose_values(&rep, &params).unwrap();
        let neg = compose_values(&rep.map(|x| -x), &params).unwrap();
        prop_assert_eq!(base.data(), neg.data());
        let scaled = compose_values(&rep.map(|x| alpha * x), &params).unwrap();
        let expect = base.map(|x| alpha * alpha * x);
        prop_assert!(scaled.max_abs_diff(&expect) <= 1e-9 * expect.max_abs().max(1e-300));
    }

    #[test]
    fn param_count_is_closed_form((n, w, r, d_out, _pos, _seed) in dims(), extended in any::<bool>()) {
        let p = CompositionParams::zeros(n, w, r, d_out, extended).unwrap();
        let formula = 2 * (n * w + extended as usize) * r + r * d_out;
        prop_assert_eq!(p.count_params(), formula);
        prop_assert_eq!(p.materialized_len(), formula);
        prop_assert_eq!(count_params(n * w, r, d_out, extended), formula);
    }
}

#[test]
fn odd_part_recovers_first_order_terms() {
    // U, V put the constant row against the inputs: the odd part is exactly
    // the linear map R ↦ R·(U_R V_1ᵀ + V_R U_1ᵀ)ᵀ P-weighted.
    let u = Tensor::from_rows(&[&[1.0], &[0.0]]);
    let v = Tensor::from_rows(&[&[0.0], &[1.0]]);
    let p = Tensor::from_rows(&[&[1.0]]);
    let params = CompositionParams::from_factors(u, v, p, 1, 1, true).unwrap();
    for x in [-2.0, 0.5, 3.0] {
        let out = compose_values(&Tensor::from_rows(&[&[x]]), &params).unwrap();
        assert_eq!(out.data(), &[x]);
    }
}

#[test]
fn rank_zero_and_above_bound_rejected() {
    assert!(CompositionParams::zeros(2, 3, 0, 4, false).is_err());
    assert!(CompositionParams::zeros(2, 3, 7, 4, false).is_err());
    assert!(CompositionParams::zeros(2, 3, 6, 4, false).is_ok());
}
