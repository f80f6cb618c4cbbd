use bhm_core::envelope::{contact_set, FieldTag, GridField, GridSpec};
use bhm_core::gain::dome_gain;
use bhm_core::geometry::Point;
use bhm_core::harmonic::{poisson_ball_eval, radial_annulus_harmonic, scale_coordinate, scale_inverse, BoundaryData};
use bhm_core::hull::{hull_values, upper_hull};
use bhm_core::oracle::concave_majorant_halfline;
use proptest::prelude::*;
use std::sync::Arc;

fn sorted_samples() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    prop::collection::vec((0.001f64..1.0, -1.0f64..1.0), 2..60).prop_map(|mut v| {
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v.dedup_by(|a, b| (a.0 - b.0).abs() < 1e-9);
        v.into_iter().unzip()
    })
}

proptest! {
    #[test]
    fn scale_coordinate_round_trips(r in 1e-3f64..1.0, d in 2usize..6) {
        let t = scale_coordinate(r, d);
        prop_assert!(t <= 0.0);
        prop_assert!((scale_inverse(t, d) - r).abs() < 1e-12 * r.max(1.0));
    }

    #[test]
    fn annulus_harmonic_hits_its_end_values(a in 0.01f64..0.5, w in 0.01f64..0.5, va in 0.0f64..1.0, vb in 0.0f64..1.0, d in 2usize..5) {
        let b = (a + w).min(1.0);
        prop_assert!((radial_annulus_harmonic(a, b, va, vb, a, d).unwrap() - va).abs() < 1e-12);
        prop_assert!((radial_annulus_harmonic(a, b, va, vb, b, d).unwrap() - vb).abs() < 1e-12);
        let mid = radial_annulus_harmonic(a, b, va, vb, 0.5 * (a + b), d).unwrap();
        prop_assert!(mid >= va.min(vb) - 1e-12 && mid <= va.max(vb) + 1e-12);
    }

    #[test]
    fn upper_hull_majorises_and_is_concave((xs, ys) in sorted_samples()) {
        prop_assume!(xs.len() >= 2);
        let verts = upper_hull(&xs, &ys);
        let hv = hull_values(&xs, &ys, &verts);
        for (i, &(_, v)) in hv.iter().enumerate() {
            prop_assert!(v >= ys[i] - 1e-12);
        }
        for w in verts.windows(3) {
            let s1 = (ys[w[1]] - ys[w[0]]) / (xs[w[1]] - xs[w[0]]);
            let s2 = (ys[w[2]] - ys[w[1]]) / (xs[w[2]] - xs[w[1]]);
            prop_assert!(s2 <= s1 + 1e-9);
        }
    }

    #[test]
    fn halfline_majorant_is_nonincreasing((xs, ys) in sorted_samples()) {
        prop_assume!(xs.len() >= 2);
        let m = concave_majorant_halfline(&xs, &ys);
        for i in 0..xs.len() {
            prop_assert!(m[i] >= ys[i] - 1e-12);
        }
        for w in m.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn poisson_reproduces_affine_data(cx in -0.3f64..0.3, cy in -0.3f64..0.3, rho in 0.05f64..0.6, s in 0.0f64..0.95, th in 0.0f64..6.283, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let c = Point::xy(cx, cy);
        let x = c + Point::xy(rho * s * th.cos(), rho * s * th.sin());
        let f = BoundaryData::new(move |p: &Point| 1.0 + a * p.x() + b * p.y());
        let exact = 1.0 + a * x.x() + b * x.y();
        prop_assert!((poisson_ball_eval(c, rho, &f, x) - exact).abs() < 1e-9);
    }

    #[test]
    fn lifting_the_envelope_clears_contact(lift in prop::collection::vec(0.0f64..0.1, 64), zeros in prop::collection::vec(any::<bool>(), 64)) {
        let grid = Arc::new(GridSpec::Radial { nodes: 64, r_min: 1e-3 }.build(2).unwrap());
        let g = dome_gain(1.0, 0.5, Point::origin(2)).unwrap();
        let gv = grid.sample(&g).unwrap();
        let raised: Vec<f64> = (0..64).map(|k| if zeros[k] { gv[k] } else { gv[k] + lift[k] }).collect();
        let w = GridField::new(grid.clone(), raised, FieldTag::Envelope(1)).unwrap();
        let c = contact_set(&w, &g, 1e-10).unwrap();
        for k in 0..64 {
            let lifted = !zeros[k] && lift[k] > 1e-10;
            prop_assert_eq!(c.contact[k], !lifted);
        }
    }
}
