//! Feasible-set invariants checked against independent constructions.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tdoa_core::geometry::{
    classify_triple, reduced_pair_feasible, relation_space_dimension, simplified_distance,
    tdoa_map, theta2_membership, zsc_plane_distance, Alignment, PlanarTripleGeometry, TripleGroup,
};
use tdoa_core::simharness::ArrayPreset;
use tdoa_core::stattests::acceptance_margin;
use tdoa_core::{Point3, SensorArray};

/// Feasibility of `(τ_ji, τ_ki)` by direct inversion of the range equations.
///
/// With `y = x − m_i`, `r = ‖y‖`, the equations `‖y − a‖ = r + τ_j` and
/// `‖y − b‖ = r + τ_k` are linear in `y` for fixed `r`; the out-of-plane
/// component must then have nonnegative squared length. Returns `None` when
/// the point is too close to the boundary for a confident verdict.
fn oracle_feasible(
    array: &SensorArray,
    i: usize,
    j: usize,
    k: usize,
    tau: (f64, f64),
) -> Option<bool> {
    let a = array.position(j) - array.position(i);
    let b = array.position(k) - array.position(i);
    let (tj, tk) = tau;
    let r0 = 0f64.max(-tj).max(-tk);
    let p = Vector2::new(
        (a.norm_squared() - tj * tj) / 2.0,
        (b.norm_squared() - tk * tk) / 2.0,
    );
    let s = Vector2::new(-tj, -tk);
    let scale = a.norm().max(b.norm());
    let gram = Matrix2::new(a.dot(&a), a.dot(&b), a.dot(&b), b.dot(&b));
    let det = gram.determinant();
    let eps = 1e-9 * scale * scale;

    if det > 1e-9 * scale.powi(4) {
        // q(r) = A r² + B r + C must be >= 0 for some r >= r0.
        let gi = gram.try_inverse().unwrap();
        let a2 = 1.0 - s.dot(&(gi * s));
        let b1 = -2.0 * s.dot(&(gi * p));
        let c0 = -p.dot(&(gi * p));
        let q = |r: f64| a2 * r * r + b1 * r + c0;
        if a2.abs() < 1e-9 {
            return None;
        }
        if a2 > 0.0 {
            return Some(true);
        }
        let vertex = (-b1 / (2.0 * a2)).max(r0);
        let best = q(vertex).max(q(r0));
        if best.abs() < eps {
            None
        } else {
            Some(best > 0.0)
        }
    } else {
        // Collinear sensors: y = u·e + h·n, two linear equations in (u, r).
        let e = a.normalize();
        let (ae, be) = (a.dot(&e), b.dot(&e));
        let m = Matrix2::new(ae, tj, be, tk);
        let d = m.determinant();
        if d.abs() < 1e-6 * scale * scale {
            return None;
        }
        let sol = m.try_inverse().unwrap() * p;
        let (u, r) = (sol[0], sol[1]);
        let margin = (r - r0).min(r * r - u * u);
        if margin.abs() < eps {
            None
        } else {
            Some(margin > 0.0)
        }
    }
}

fn random_array(rng: &mut ChaCha8Rng, sensors: usize) -> SensorArray {
    loop {
        let pts: Vec<Point3> = (0..sensors)
            .map(|_| {
                Point3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        if let Ok(a) = SensorArray::new(pts) {
            return a;
        }
    }
}

fn ball_point(rng: &mut ChaCha8Rng, radius: f64) -> Point3 {
    loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if v.norm_squared() <= 1.0 {
            return v * radius;
        }
    }
}

fn ordered_triples(n: usize) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..n {
            for k in (j + 1)..n {
                if i != j && i != k {
                    out.push((i, j, k));
                }
            }
        }
    }
    out
}

#[test]
fn membership_agrees_with_inversion_oracle_on_tau_grid() {
    let fig5 =
        SensorArray::from_coords(&[[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]]).unwrap();
    let fig4 =
        SensorArray::from_coords(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut arrays = vec![
        fig5,
        fig4,
        ArrayPreset::Linear7.array(),
        ArrayPreset::Cross7.array(),
    ];
    arrays.push(random_array(&mut rng, 4));

    let mut checked = 0usize;
    let mut skipped = 0usize;
    for array in &arrays {
        let triples = ordered_triples(array.len());
        for &(i, j, k) in triples.iter().step_by(7) {
            let geom = classify_triple(i, j, k, array, 1e-9).unwrap();
            let group = TripleGroup::shared_pair(i, j, k).unwrap();
            let (dj, dk) = (geom.d_ji, geom.d_ki);
            for a in 0..100 {
                for b in 0..100 {
                    let t0 = -1.05 * dj + 2.1 * dj * (a as f64 + 0.5) / 100.0;
                    let t1 = -1.05 * dk + 2.1 * dk * (b as f64 + 0.5) / 100.0;
                    let tau = Vector2::new(t0, t1);
                    match oracle_feasible(array, i, j, k, (t0, t1)) {
                        None => skipped += 1,
                        Some(expected) => {
                            checked += 1;
                            let got = theta2_membership(&group, &tau, &geom).unwrap();
                            assert_eq!(
                                got, expected,
                                "triple ({i}; {j}, {k}) {:?} at {tau:?}",
                                geom.alignment
                            );
                        }
                    }
                }
            }
        }
    }
    assert!(
        skipped * 50 < checked,
        "skipped {skipped} of {}",
        checked + skipped
    );
}

#[test]
fn image_points_are_members_over_source_grid() {
    for preset in [ArrayPreset::Linear7, ArrayPreset::Cross7] {
        let array = preset.array();
        let geoms: Vec<(TripleGroup, PlanarTripleGeometry)> = ordered_triples(array.len())
            .into_iter()
            .map(|(i, j, k)| {
                (
                    TripleGroup::shared_pair(i, j, k).unwrap(),
                    classify_triple(i, j, k, &array, 1e-9).unwrap(),
                )
            })
            .collect();
        // 10⁴ sources on a 25 × 20 × 20 grid spanning ±2 m.
        for a in 0..25 {
            for b in 0..20 {
                for c in 0..20 {
                    let x = Point3::new(
                        -2.0 + 4.0 * a as f64 / 24.0,
                        -2.0 + 4.0 * b as f64 / 19.0,
                        -2.0 + 4.0 * c as f64 / 19.0,
                    );
                    let set = tdoa_map(&x, &array);
                    for (group, geom) in &geoms {
                        let v = group.oriented_values(&set).unwrap();
                        let tau = Vector2::new(v[0], v[1]);
                        assert!(theta2_membership(group, &tau, geom).unwrap(), "{x:?}");
                    }
                }
            }
        }
    }
}

#[test]
fn simplified_distance_lower_bounds_sampled_distance() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let sigma = 0.05;
    let cov = Matrix2::new(
        sigma * sigma,
        0.3 * sigma * sigma,
        0.3 * sigma * sigma,
        sigma * sigma,
    );
    let cov_inv = cov.try_inverse().unwrap();
    let gamma = acceptance_margin(sigma, 0.05).unwrap();
    let arrays = [
        SensorArray::from_coords(&[[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]]).unwrap(),
        SensorArray::from_coords(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]).unwrap(),
        SensorArray::from_coords(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.5, 0.0, 0.0]]).unwrap(),
        SensorArray::from_coords(&[[0.0, 0.0, 0.0], [0.8, 0.1, 0.0], [0.2, 0.9, 0.4]]).unwrap(),
    ];
    for array in &arrays {
        for (i, j, k) in ordered_triples(3) {
            let geom = classify_triple(i, j, k, array, 1e-9).unwrap();
            let group = TripleGroup::shared_pair(i, j, k).unwrap();
            // Dense sample of the feasible set: sources at log-spaced radii.
            let mut image = Vec::new();
            for _ in 0..40_000 {
                let dir = ball_point(&mut rng, 1.0);
                if dir.norm() < 1e-3 {
                    continue;
                }
                let radius = 10f64.powf(rng.random_range(-2.0..3.0));
                let x = array.position(i) + dir.normalize() * radius;
                let v = group.oriented_values(&tdoa_map(&x, array)).unwrap();
                image.push(Vector2::new(v[0], v[1]));
            }
            for _ in 0..300 {
                let tau = Vector2::new(
                    rng.random_range(-(geom.d_ji + gamma)..(geom.d_ji + gamma)),
                    rng.random_range(-(geom.d_ki + gamma)..(geom.d_ki + gamma)),
                );
                let f = simplified_distance(&tau, &geom, &cov).unwrap();
                let brute = image
                    .iter()
                    .map(|p| {
                        let e = tau - p;
                        (e.transpose() * cov_inv * e)[(0, 0)].sqrt()
                    })
                    .fold(f64::INFINITY, f64::min);
                assert!(
                    f <= brute + 1e-6,
                    "{:?}: f {f} > {brute} at {tau:?}",
                    geom.alignment
                );
                if reduced_pair_feasible(&tau, &geom) {
                    assert_eq!(f, 0.0);
                }
            }
        }
    }
}

#[test]
fn preset_triples_are_classified_exactly() {
    let lin = ArrayPreset::Linear7.array();
    for (i, j, k) in ordered_triples(7) {
        let g = classify_triple(i, j, k, &lin, 1e-9).unwrap();
        assert!(g.alignment.is_aligned());
        let between = (i > j.min(k)) && (i < j.max(k));
        assert_eq!(g.alignment == Alignment::AlignedSharedBetween, between);
    }
    let cross = ArrayPreset::Cross7.array();
    let aligned = ordered_triples(7)
        .into_iter()
        .filter(|&(i, j, k)| {
            classify_triple(i, j, k, &cross, 1e-9)
                .unwrap()
                .alignment
                .is_aligned()
        })
        .count();
    // Three axes, three orderings of the shared sensor each.
    assert_eq!(aligned, 9);
}

#[test]
fn relation_space_has_dimension_q_minus_n() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for n in 2..=6 {
        let array = random_array(&mut rng, n + 1);
        let q = n * (n + 1) / 2;
        assert_eq!(
            relation_space_dimension(&array, 200, n as u64).unwrap(),
            q - n
        );
    }
}

proptest! {
    #[test]
    fn tdoa_map_is_bounded_and_zero_sum(
        seed in any::<u64>(),
        sensors in 3usize..8,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let array = random_array(&mut rng, sensors);
        let x = ball_point(&mut rng, 5.0);
        let set = tdoa_map(&x, &array);
        for (p, v) in set.iter() {
            prop_assert!(v.abs() <= array.distance(p.j, p.i) + 1e-12);
        }
        for i in 0..sensors {
            for j in (i + 1)..sensors {
                for k in (j + 1)..sensors {
                    let g = TripleGroup::triple(i, j, k).unwrap();
                    let v = g.oriented_values(&set).unwrap();
                    prop_assert!((v[0] - v[1] + v[2]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn distances_are_scale_free(
        seed in any::<u64>(),
        s in 0.01f64..100.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let array = random_array(&mut rng, 3);
        let scaled = array.scaled(s).unwrap();
        let sigma = 0.02;
        let cov2 = Matrix2::identity() * sigma * sigma;
        let cov3 = Matrix3::identity() * sigma * sigma;
        let x = ball_point(&mut rng, 3.0);
        let set = tdoa_map(&x, &array);
        let noisy: Vec<f64> = set.iter().map(|(_, v)| v + rng.random_range(-0.05..0.05)).collect();
        for (i, j, k) in ordered_triples(3) {
            let g = classify_triple(i, j, k, &array, 1e-9).unwrap();
            let gs = classify_triple(i, j, k, &scaled, 1e-9).unwrap();
            let group = TripleGroup::shared_pair(i, j, k).unwrap();
            let mut tmp = tdoa_core::TdoaSet::new();
            for ((p, _), v) in set.iter().zip(&noisy) {
                tmp.insert(p, *v);
            }
            let v = group.oriented_values(&tmp).unwrap();
            let tau = Vector2::new(v[0], v[1]);
            let a = simplified_distance(&tau, &g, &cov2).unwrap();
            let b = simplified_distance(&(tau * s), &gs, &(cov2 * s * s)).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
        }
        let t = Vector3::new(noisy[0], noisy[1], noisy[2]);
        let a = zsc_plane_distance(&t, &cov3).unwrap();
        let b = zsc_plane_distance(&(t * s), &(cov3 * s * s)).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
    }

    #[test]
    fn zsc_distance_ignores_in_plane_shifts(
        t in prop::array::uniform3(-1.0f64..1.0),
        w1 in -1.0f64..1.0,
        w2 in -1.0f64..1.0,
        sigma in 0.001f64..1.0,
    ) {
        let cov = Matrix3::identity() * sigma * sigma;
        let tau = Vector3::from(t);
        let w = Vector3::new(w1, w2, w2 - w1);
        let a = zsc_plane_distance(&tau, &cov).unwrap();
        let b = zsc_plane_distance(&(tau + w), &cov).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a));
    }
}
