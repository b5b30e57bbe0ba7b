use ccdo::compression::{
    bits_per_message, q1_compress, q2_compress, q3_compress, ChannelCodec, CompressorSpec,
    ScalingSchedule,
};
use ccdo::engine::{AlgorithmParams, Mode, Simulation};
use ccdo::graph::{build_weight_matrix, Topology, WeightScheme};
use ccdo::problem::{
    build_dispatch_instance, kkt_oracle, DispatchRow, LocalCost, QuadraticCost,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Cyclic Jacobi rotations; returns the eigenvalues of a symmetric matrix, ascending.
#[allow(clippy::needless_range_loop)]
fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(f64::total_cmp);
    ev
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

fn dispatch_rows() -> impl Strategy<Value = Vec<DispatchRow>> {
    prop::collection::vec((0.01f64..1.0, 0.0f64..10.0), 2..12)
        .prop_map(|v| v.into_iter().map(|(a, beta)| DispatchRow { a, beta, c: 0.0 }).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn lazy_metropolis_on_random_graphs(m in 2usize..20, p in 0.0f64..0.6, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let topo = Topology::random_connected(m, p, &mut rng).unwrap();
        let w = build_weight_matrix(&topo, WeightScheme::LazyMetropolis).unwrap();
        let e = w.entries();
        for i in 0..m {
            let row: f64 = (0..m).map(|j| e[(i, j)]).sum();
            prop_assert!((row - 1.0).abs() <= 1e-12);
            for j in 0..m {
                prop_assert_eq!(e[(i, j)], e[(j, i)]);
                if i != j {
                    prop_assert_eq!(e[(i, j)] != 0.0, topo.has_edge(i, j));
                }
            }
        }
        let oracle = jacobi_eigenvalues(rows_of(e));
        for (got, want) in w.eigenvalues().iter().zip(&oracle) {
            prop_assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
        prop_assert!(oracle[0] > 0.0);
        let centred = e - DMatrix::from_element(m, m, 1.0 / m as f64);
        let eta = jacobi_eigenvalues(rows_of(&centred)).iter().map(|v| v.abs()).fold(0.0, f64::max);
        prop_assert!((w.eta() - eta).abs() < 1e-10);
        prop_assert!(w.eta() < 1.0);
    }

    #[test]
    fn oracle_satisfies_kkt(rows in dispatch_rows(), demand in 1.0f64..1000.0) {
        let spec = build_dispatch_instance(&rows, demand).unwrap();
        let sol = kkt_oracle(&spec).unwrap();
        let total: f64 = sol.z_star.iter().map(|z| z[0]).sum();
        prop_assert!((total - demand).abs() < 1e-9);
        for (r, z) in rows.iter().zip(&sol.z_star) {
            let marginal = 2.0 * r.a * z[0] + r.beta;
            prop_assert!((marginal - sol.lambda_star[0]).abs() < 1e-9);
        }
    }

    #[test]
    fn oracle_commutes_with_relabelling(rows in dispatch_rows(), demand in 1.0f64..1000.0, shift in 0usize..12) {
        let m = rows.len();
        let mut rotated = rows.clone();
        rotated.rotate_left(shift % m);
        let a = kkt_oracle(&build_dispatch_instance(&rows, demand).unwrap()).unwrap();
        let b = kkt_oracle(&build_dispatch_instance(&rotated, demand).unwrap()).unwrap();
        prop_assert!((a.lambda_star[0] - b.lambda_star[0]).abs() < 1e-9);
        for i in 0..m {
            let j = (i + m - shift % m) % m;
            prop_assert!((b.z_star[j][0] - a.z_star[i][0]).abs() < 1e-9);
        }
    }

    #[test]
    fn q3_error_below_one_cell(x in -1e6f64..1e6, delta_p in 1u32..64) {
        let q = q3_compress(&DVector::from_element(1, x), delta_p)[0];
        prop_assert!((q - x).abs() < 1.0 / f64::from(delta_p));
        prop_assert!(q <= x);
        let idx = q * f64::from(delta_p);
        prop_assert!((idx - idx.round()).abs() <= 1e-9 * (1.0 + idx.abs()));
    }

    #[test]
    fn q1_lands_on_adjacent_grid_points(x in prop::collection::vec(-1e3f64..1e3, 1..8), delta_p in 1u32..32, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = DVector::from_vec(x);
        let q = q1_compress(&v, delta_p, &mut rng).unwrap();
        let s = f64::from(delta_p);
        for (qi, xi) in q.iter().zip(v.iter()) {
            prop_assert!((qi - xi).abs() <= 1.0 / s + 1e-9);
            prop_assert!(((qi * s).round() - qi * s).abs() <= 1e-9 * (1.0 + (qi * s).abs()));
        }
    }

    #[test]
    fn q2_error_within_variance_bound(x in prop::collection::vec(-1e3f64..1e3, 1..8), bits in 1u32..16, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = DVector::from_vec(x);
        let q = q2_compress(&v, bits, &mut rng);
        let n = v.len() as f64;
        let bound = n / 4f64.powi(bits as i32 - 1) * v.norm_squared();
        prop_assert!((&q - &v).norm_squared() <= bound * (1.0 + 1e-12));
    }

    #[test]
    fn quadratic_gradient_matches_finite_difference(
        a in 0.01f64..5.0,
        beta in prop::collection::vec(-10.0f64..10.0, 1..5),
        seed: u64,
    ) {
        let n = beta.len();
        let cost = QuadraticCost::new(a, DVector::from_vec(beta), 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let z = DVector::from_fn(n, |_, _| rng.random_range(-50.0..50.0));
        let g = cost.gradient(&z);
        let h = 1e-5;
        for i in 0..n {
            let mut up = z.clone();
            let mut down = z.clone();
            up[i] += h;
            down[i] -= h;
            let fd = (cost.value(&up) - cost.value(&down)) / (2.0 * h);
            prop_assert!((fd - g[i]).abs() < 1e-5 * (1.0 + g[i].abs()), "{fd} vs {}", g[i]);
        }
    }

    #[test]
    fn receivers_reproduce_broadcasts(
        x in prop::collection::vec(-100.0f64..100.0, 1..6),
        offset in -5.0f64..5.0,
        r in 1e-6f64..10.0,
        which in 0usize..4,
        param in 1u32..9,
        seed: u64,
    ) {
        let spec = [
            CompressorSpec::Identity,
            CompressorSpec::Q1 { delta_p: param },
            CompressorSpec::Q2 { bits: param },
            CompressorSpec::Q3 { delta_p: param },
        ][which];
        let codec = ChannelCodec::new(spec, 7.0).unwrap();
        let x = DVector::from_vec(x);
        let h = x.add_scalar(offset);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x_hat, msg) = codec.encode(&x, &h, r, &mut rng).unwrap();
        prop_assert_eq!(codec.decode(&h.clone(), r, &msg), x_hat);
        prop_assert_eq!(msg.bits, bits_per_message(spec, x.len(), 7.0).unwrap());
        prop_assert!(msg.saturations <= x.len());
    }

    #[test]
    fn schedule_is_non_increasing(h0 in 1e-6f64..1e6, xi in 0.01f64..=1.0, r_min in 1e-15f64..1e-3) {
        let s = ScalingSchedule::new(h0, xi, r_min).unwrap();
        let mut prev = f64::INFINITY;
        for k in 0..500 {
            let r = s.factor(k);
            prop_assert!(r <= prev && r >= r_min);
            prev = r;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn resource_sum_conserved_under_random_settings(
        rows in dispatch_rows(),
        demand in 1.0f64..1000.0,
        gamma_frac in 0.05f64..0.95,
        alpha in 0.05f64..0.95,
        which in 0usize..4,
        seed: u64,
    ) {
        let spec = build_dispatch_instance(&rows, demand).unwrap();
        let topo = Topology::ring(rows.len()).unwrap();
        let w = build_weight_matrix(&topo, WeightScheme::LazyMetropolis).unwrap();
        let defaults = AlgorithmParams::defaults(&spec, &w, ScalingSchedule::default(), Mode::Compressed);
        // the identity holds algebraically; float rounding scales with |y|, so stay in the stable range
        let gamma = gamma_frac * defaults.gamma() / 0.9;
        let params = AlgorithmParams::new(gamma, defaults.tau(), defaults.psi(), alpha, defaults.schedule(), Mode::Compressed).unwrap();
        let kind = [
            CompressorSpec::Identity,
            CompressorSpec::Q1 { delta_p: 1 },
            CompressorSpec::Q2 { bits: 2 },
            CompressorSpec::Q3 { delta_p: 1 },
        ][which];
        let sim = Simulation::new(&spec, &topo, &w, params, ChannelCodec::new(kind, 7.0).unwrap())
            .unwrap()
            .skip_validation(true);
        let trace = sim.run(200, seed).map_err(|e| TestCaseError::fail(e.to_string()))?;
        for r in &trace.records {
            prop_assert!(r.conservation_error <= 1e-9 * (1.0 + demand), "k={} {:e}", r.k, r.conservation_error);
        }
    }
}
