use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn close(a: &Mat3, b: &Mat3, tol: f64) -> bool {
    (0..3).all(|i| (0..3).all(|j| (a[i][j] - b[i][j]).abs() <= tol))
}

fn random_raw(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect()
}

#[test]
fn euler_zero_is_identity() {
    let r = euler_to_matrix(&EulerAngles { alpha: 0.0, beta: 0.0, gamma: 0.0 });
    assert_eq!(r, RotationMatrix::IDENTITY);
}

#[test]
fn euler_quarter_turn_maps_x_to_y() {
    let r = euler_to_matrix(&EulerAngles { alpha: PI / 2.0, beta: 0.0, gamma: 0.0 });
    let v = r.apply([1.0, 0.0, 0.0]);
    assert!((v[0]).abs() < 1e-15 && (v[1] - 1.0).abs() < 1e-15 && v[2].abs() < 1e-15);
}

#[test]
fn euler_matches_composed_axis_angle_quaternions() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let (a, b, c) = (rng.gen_range(-PI..PI), rng.gen_range(0.0..PI), rng.gen_range(-PI..PI));
        let qa = UnitQuaternion::from_axis_angle([0.0, 0.0, 1.0], a);
        let qb = UnitQuaternion::from_axis_angle([0.0, 1.0, 0.0], b);
        let qc = UnitQuaternion::from_axis_angle([0.0, 0.0, 1.0], c);
        let via_q = quaternion_to_matrix(&qa.mul(&qb).mul(&qc));
        let via_e = euler_to_matrix(&EulerAngles { alpha: a, beta: b, gamma: c });
        assert!(close(via_q.matrix(), via_e.matrix(), 1e-12));
    }
}

#[test]
fn raw3_zero_is_identity_quaternion() {
    assert_eq!(raw3_to_quaternion([0.0; 3]).components(), [1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn raw3_quarter_turn_about_z() {
    let q = raw3_to_quaternion([0.0, 0.0, PI / 2.0]).components();
    let h = core::f64::consts::FRAC_PI_4;
    let expect = [libm::cos(h), 0.0, 0.0, libm::sin(h)];
    for k in 0..4 {
        assert!((q[k] - expect[k]).abs() < 1e-15);
    }
}

#[test]
fn expmap_series_is_continuous_across_threshold() {
    // |v|^2 just below and above the series cutoff
    for t2 in [0.999e-6, 1.001e-6, 1e-10] {
        let t = libm::sqrt(t2);
        let v = [t, 0.0, 0.0];
        let q = expmap_g(v);
        assert!((q[0] - libm::cos(t / 2.0)).abs() < 1e-16);
        assert!((q[1] - libm::sin(t / 2.0)).abs() < 1e-16);
    }
}

#[test]
fn quaternion_identity_and_quarter_turn_by_conjugation() {
    assert_eq!(
        quaternion_to_matrix(&UnitQuaternion::new([1.0, 0.0, 0.0, 0.0]).unwrap()),
        RotationMatrix::IDENTITY
    );
    let h = core::f64::consts::FRAC_PI_4;
    let q = UnitQuaternion::new([libm::cos(h), 0.0, 0.0, libm::sin(h)]).unwrap();
    let r = quaternion_to_matrix(&q);
    let conj = UnitQuaternion::normalized({
        let c = q.components();
        [c[0], -c[1], -c[2], -c[3]]
    });
    for e in 0..3 {
        let mut basis = [0.0; 4];
        basis[e + 1] = 1.0;
        // q v q* computed with the raw Hamilton product
        let v = UnitQuaternion(basis);
        let rotated = q.mul(&v).mul(&conj).components();
        let col = r.apply(core::array::from_fn(|i| if i == e { 1.0 } else { 0.0 }));
        for i in 0..3 {
            assert!((rotated[i + 1] - col[i]).abs() < 1e-15);
        }
    }
    assert!((r.apply([1.0, 0.0, 0.0])[1] - 1.0).abs() < 1e-15);
}

#[test]
fn quaternion_rejects_non_unit() {
    assert!(matches!(
        UnitQuaternion::new([1.0, 0.1, 0.0, 0.0]),
        Err(So3Error::NonUnitQuaternion { .. })
    ));
    assert!(UnitQuaternion::new([1.0 + 5e-7, 0.0, 0.0, 0.0]).is_ok());
}

#[test]
fn stored_quaternions_keep_their_bits() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let q = sample_uniform_rotation(&mut rng).to_quaternion().components();
        assert_eq!(UnitQuaternion::from_stored(q).unwrap().components(), q);
    }
    let off = UnitQuaternion::from_stored([1.0 + 5e-7, 0.0, 0.0, 0.0]).unwrap();
    assert_eq!(off.components(), [1.0, 0.0, 0.0, 0.0]);
    assert!(UnitQuaternion::from_stored([1.0, 0.1, 0.0, 0.0]).is_err());
}

#[test]
fn quaternion_double_cover_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let q = sample_uniform_rotation(&mut rng).to_quaternion();
        assert_eq!(quaternion_to_matrix(&q), quaternion_to_matrix(&q.neg()));
    }
}

#[test]
fn s2s2_basis_is_identity() {
    let p = S2S2Param { v1: [1.0, 0.0, 0.0], v2: [0.0, 1.0, 0.0] };
    assert_eq!(s2s2_to_matrix(&p).unwrap(), RotationMatrix::IDENTITY);
}

#[test]
fn s2s2_degenerate_inputs_are_rejected() {
    let zero = S2S2Param { v1: [0.0; 3], v2: [0.0, 1.0, 0.0] };
    let collinear = S2S2Param { v1: [1.0, 2.0, 3.0], v2: [2.0, 4.0, 6.0] };
    assert_eq!(s2s2_to_matrix(&zero), Err(So3Error::Degenerate));
    assert_eq!(s2s2_to_matrix(&collinear), Err(So3Error::Degenerate));
}

#[test]
fn all_heads_produce_valid_rotations_on_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for kind in HeadKind::ALL {
        for _ in 0..10_000 {
            let raw = random_raw(&mut rng, kind.raw_dim());
            let r = RotationMatrix(head_matrix(kind, &raw).unwrap());
            assert!(r.is_valid(1e-9), "{kind:?} produced {r:?}");
        }
    }
}

#[test]
fn head_jacobians_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for kind in HeadKind::ALL {
        for _ in 0..20 {
            let raw = random_raw(&mut rng, kind.raw_dim());
            let k = raw.len();
            let j = head_jacobian(kind, &raw).unwrap();
            for p in 0..k {
                let h = 1e-6;
                let mut up = raw.clone();
                let mut dn = raw.clone();
                up[p] += h;
                dn[p] -= h;
                let mu = head_matrix(kind, &up).unwrap();
                let md = head_matrix(kind, &dn).unwrap();
                for o in 0..9 {
                    let fd = (mu[o / 3][o % 3] - md[o / 3][o % 3]) / (2.0 * h);
                    assert!((fd - j[o * k + p]).abs() < 1e-7, "{kind:?} d{o}/d{p}");
                }
            }
        }
    }
}

#[test]
fn quaternion_head_jacobian_is_finite_at_zero() {
    let j = head_jacobian(HeadKind::Quaternion, &[0.0, 0.0, 0.0]).unwrap();
    assert!(j.iter().all(|x| x.is_finite()));
    // d R / d v_z at the identity is the generator of rotations about z
    assert!((j[3 * 3 + 2] - 1.0).abs() < 1e-12); // dR[1][0]/dv_z
    assert!((j[3 + 2] + 1.0).abs() < 1e-12); // dR[0][1]/dv_z
}

#[test]
fn haar_sample_mean_is_near_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 100_000;
    let mut mean = [[0.0; 3]; 3];
    for _ in 0..n {
        let r = sample_uniform_rotation(&mut rng);
        for i in 0..3 {
            for j in 0..3 {
                mean[i][j] += r.matrix()[i][j] / n as f64;
            }
        }
    }
    assert!(mean.iter().flatten().all(|x| x.abs() < 0.02), "{mean:?}");
}

/// Chi-square p-value of sampled rotation angles against the Haar density
/// `(1 - cos w) / pi`.
pub(crate) fn haar_angle_pvalue(angles: &[f64], bins: usize) -> f64 {
    let cdf = |w: f64| (w - libm::sin(w)) / PI;
    let mut counts = vec![0usize; bins];
    for &w in angles {
        let b = ((w / PI) * bins as f64) as usize;
        counts[b.min(bins - 1)] += 1;
    }
    let n = angles.len() as f64;
    let chi2: f64 = (0..bins)
        .map(|b| {
            let lo = PI * b as f64 / bins as f64;
            let hi = PI * (b + 1) as f64 / bins as f64;
            let expect = n * (cdf(hi) - cdf(lo));
            let d = counts[b] as f64 - expect;
            d * d / expect
        })
        .sum();
    1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(chi2)
}

#[test]
fn haar_angle_density_passes_chi_square() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let angles: Vec<f64> = (0..50_000)
        .map(|_| geodesic_distance(&RotationMatrix::IDENTITY, &sample_uniform_rotation(&mut rng)))
        .collect();
    let p = haar_angle_pvalue(&angles, 30);
    assert!(p > 0.01, "p = {p}");
}

#[test]
fn haar_angle_test_rejects_a_biased_sampler() {
    // Uniform axis-angle with uniform angle is NOT Haar.
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let angles: Vec<f64> = (0..50_000).map(|_| rng.gen_range(0.0..PI)).collect();
    assert!(haar_angle_pvalue(&angles, 30) < 1e-6);
}

#[test]
fn sampler_is_reproducible() {
    let a: Vec<_> = {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        (0..10).map(|_| sample_uniform_rotation(&mut rng)).collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let b: Vec<_> = (0..10).map(|_| sample_uniform_rotation(&mut rng)).collect();
    assert_eq!(a, b);
}

#[test]
fn geodesic_basics() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let r = sample_uniform_rotation(&mut rng);
    assert!(geodesic_distance(&r, &r).abs() < 1e-15);
    let d = geodesic_distance(&RotationMatrix::IDENTITY, &RotationMatrix::about_z(PI));
    assert!((d - PI).abs() < 1e-15);
    for _ in 0..100 {
        let a = sample_uniform_rotation(&mut rng);
        let b = sample_uniform_rotation(&mut rng);
        assert_eq!(geodesic_distance(&a, &b), geodesic_distance(&b, &a));
        let rel = a.transpose().compose(&b);
        let m = rel.matrix();
        let arccos = libm::acos(((m[0][0] + m[1][1] + m[2][2] - 1.0) / 2.0).clamp(-1.0, 1.0));
        assert!((geodesic_distance(&a, &b) - arccos).abs() < 1e-7);
    }
}

#[test]
fn align_identical_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let gt: Vec<_> = (0..20).map(|_| sample_uniform_rotation(&mut rng)).collect();
    let (g, mae) = align_pose_sets(&gt, &gt).unwrap();
    assert!(close(g.matrix(), RotationMatrix::IDENTITY.matrix(), 1e-12));
    assert!(mae < 1e-9);
}

#[test]
fn align_recovers_constructed_gauge() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let g0 = sample_uniform_rotation(&mut rng);
    let gt: Vec<_> = (0..50).map(|_| sample_uniform_rotation(&mut rng)).collect();
    let est: Vec<_> = gt.iter().map(|r| r.compose(&g0)).collect();
    let (g, mae) = align_pose_sets(&est, &gt).unwrap();
    assert!(close(g.matrix(), g0.transpose().matrix(), 1e-10));
    assert!(mae < 1e-6);
}

#[test]
fn align_with_single_flipped_outlier() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let n = 40;
    let gt: Vec<_> = (0..n).map(|_| sample_uniform_rotation(&mut rng)).collect();
    let mut est = gt.clone();
    est[7] = gt[7].compose(&RotationMatrix::about_z(PI));
    let (_, mae) = align_pose_sets(&est, &gt).unwrap();
    let expect = 180.0 / n as f64;
    assert!((mae - expect).abs() < 0.1 * expect, "mae {mae} expect {expect}");
}

#[test]
fn align_errors() {
    assert_eq!(align_pose_sets(&[], &[]), Err(So3Error::EmptyPoseSet));
    assert!(matches!(
        align_pose_sets(&[RotationMatrix::IDENTITY], &[]),
        Err(So3Error::LengthMismatch { .. })
    ));
}

#[test]
fn to_quaternion_roundtrips() {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    for _ in 0..1000 {
        let r = sample_uniform_rotation(&mut rng);
        let back = quaternion_to_matrix(&r.to_quaternion());
        assert!(close(r.matrix(), back.matrix(), 1e-12));
        assert!(r.to_quaternion().components()[0] >= 0.0);
    }
}

#[test]
fn mirror_conjugate_is_involution_and_proper() {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let r = sample_uniform_rotation(&mut rng);
    let m = mirror_conjugate(&r);
    assert!(m.is_valid(1e-12));
    assert_eq!(mirror_conjugate(&m), r);
}

fn vec3() -> impl Strategy<Value = [f64; 3]> {
    prop::array::uniform3(-5.0f64..5.0)
}

proptest! {
    #[test]
    fn s2s2_scale_and_shear_invariance(v1 in vec3(), v2 in vec3(), a in 0.1f64..10.0, b in 0.1f64..10.0, c in -5.0f64..5.0) {
        let base = S2S2Param { v1, v2 };
        prop_assume!(s2s2_to_matrix(&base).is_ok());
        let n1 = libm::sqrt(v1.iter().map(|x| x * x).sum::<f64>());
        let cr = [v1[1]*v2[2]-v1[2]*v2[1], v1[2]*v2[0]-v1[0]*v2[2], v1[0]*v2[1]-v1[1]*v2[0]];
        let ncr = libm::sqrt(cr.iter().map(|x| x * x).sum::<f64>());
        // well-conditioned inputs only; near-collinear pairs amplify rounding
        prop_assume!(n1 > 0.5 && ncr > 0.5 * n1);
        let scaled = S2S2Param {
            v1: v1.map(|x| a * x),
            v2: core::array::from_fn(|i| b * v2[i] + c * v1[i]),
        };
        let r0 = s2s2_to_matrix(&base).unwrap();
        let r1 = s2s2_to_matrix(&scaled).unwrap();
        prop_assert!(close(r0.matrix(), r1.matrix(), 1e-12), "{:?} vs {:?}", r0, r1);
    }

    #[test]
    fn raw3_is_unit_norm(v in vec3()) {
        let q = raw3_to_quaternion(v).components();
        let n: f64 = q.iter().map(|x| x * x).sum();
        prop_assert!((n - 1.0).abs() < 1e-12);
    }
}
