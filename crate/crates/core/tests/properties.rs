use proptest::prelude::*;

use vecheart::flowgen::{pgk_centers, pgk_encode};
use vecheart::geometry::{contact_regions, iou_grid, sdf_to_grid, vec3, AnalyticPart, Bounds, Point};
use vecheart::phantom::generate_phantom;
use vecheart::slicer::{drop_lax, make_protocol, perturb_slices, Protocol};
use vecheart::tensor::Segment;
use vecheart::{Graph, Tensor};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, rows * cols)
}

fn attend(q: &[f64], k: &[f64], v: &[f64], rows_q: usize, rows_k: usize, d: usize, heads: usize) -> Vec<f64> {
    let mut g = Graph::<f64>::new();
    let q = g.leaf(Tensor::new([rows_q, d], q.to_vec()).unwrap());
    let k = g.leaf(Tensor::new([rows_k, d], k.to_vec()).unwrap());
    let v = g.leaf(Tensor::new([rows_k, d], v.to_vec()).unwrap());
    let o = g.attention(q, k, v, heads, &[Segment::full(rows_q, rows_k)]).unwrap();
    g.value(o).to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attention_ignores_key_order(q in matrix(3, 4), k in matrix(5, 4), v in matrix(5, 4), rot in 1usize..5) {
        let base = attend(&q, &k, &v, 3, 5, 4, 2);
        let mut kp = k.clone();
        let mut vp = v.clone();
        kp.rotate_left(rot * 4);
        vp.rotate_left(rot * 4);
        let perm = attend(&q, &kp, &vp, 3, 5, 4, 2);
        for (a, b) in base.iter().zip(&perm) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    // Equal value rows come back unchanged only if each weight row sums to 1.
    #[test]
    fn attention_weights_sum_to_one(q in matrix(4, 4), k in matrix(6, 4), row in matrix(1, 4)) {
        let v: Vec<f64> = row.iter().copied().cycle().take(24).collect();
        let out = attend(&q, &k, &v, 4, 6, 4, 2);
        for (i, o) in out.iter().enumerate() {
            prop_assert!((o - row[i % 4]).abs() < 1e-6);
        }
    }

    #[test]
    fn contacts_are_input_subset(pts in prop::collection::vec(prop::array::uniform3(-3.0f64..3.0), 1..200),
                                 gap in 0.0f64..1.0, tau in 0.05f64..0.8) {
        let parts = [
            AnalyticPart::sphere([-1.0 - gap / 2.0, 0.0, 0.0], 1.0),
            AnalyticPart::sphere([1.0 + gap / 2.0, 0.0, 0.0], 1.0),
            AnalyticPart::sphere([0.0, 1.5, 0.0], 0.8),
        ];
        let c = contact_regions(&parts, &pts, tau).unwrap();
        prop_assert_eq!(c.points.len(), c.parts.len());
        for (p, near) in c.points.iter().zip(&c.parts) {
            prop_assert!(pts.contains(p));
            let close = parts.iter().filter(|s| s.sdf(*p).abs() < tau).count();
            prop_assert!(close >= 2);
            prop_assert_eq!(close, near.len());
        }
    }

    #[test]
    fn pgk_is_periodic_and_peaks_at_centers(t in 0.0f64..1.0, n in 2usize..12, s in 0.05f64..1.0) {
        let c = pgk_centers(n);
        let a = pgk_encode(t, &c, s);
        for (x, y) in a.iter().zip(pgk_encode(t + 1.0, &c, s)) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        for (i, &mu) in c.iter().enumerate() {
            let peak = pgk_encode(mu, &c, s)[i];
            prop_assert!((peak - 1.0).abs() < 1e-12);
            prop_assert!(a[i] <= peak);
        }
    }

    #[test]
    fn iou_of_grid_with_itself_is_one(r in 0.2f64..0.9, res in 4usize..20) {
        let s = AnalyticPart::sphere([0.0; 3], r);
        let g = sdf_to_grid(|p| s.sdf(p), res, Bounds::cube(1.0)).unwrap();
        prop_assert_eq!(iou_grid(&g, &g).unwrap(), 1.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn slicer_contracts(seed in 0u64..50, noise_seed in any::<u64>(), lambda in 0.5f64..6.0, p in 0.0f64..1.0) {
        let spec = generate_phantom(seed, 100.0).unwrap();
        let stack = make_protocol(&spec, Protocol::SaxLax, 24);
        for (pl, pts) in stack.planes.iter().zip(&stack.points) {
            for (part, cloud) in pts.iter().enumerate() {
                for q in cloud {
                    prop_assert!(spec.parts[part].sdf(*q).abs() < 1e-4);
                    prop_assert!(pl.height(*q).abs() < 1e-6);
                }
            }
        }

        let moved = perturb_slices(&spec, &stack, lambda, noise_seed);
        prop_assert_eq!(&moved, &perturb_slices(&spec, &stack, lambda, noise_seed));
        for ((a, b), (pa, pb)) in stack.planes.iter().zip(&moved.planes).zip(stack.points.iter().zip(&moved.points)) {
            prop_assert_eq!(a.normal, b.normal);
            // Every point moves by the same in-plane offset as its plane.
            let shift: Point = vec3::add(vec3::scale(b.u, b.displacement[0]), vec3::scale(b.v, b.displacement[1]));
            for (ca, cb) in pa.iter().zip(pb) {
                for (x, y) in ca.iter().zip(cb) {
                    prop_assert!(vec3::norm(vec3::sub(vec3::sub(*y, *x), shift)) < 1e-9);
                }
            }
        }

        let dropped = drop_lax(&moved, p, noise_seed);
        prop_assert_eq!(&dropped, &drop_lax(&moved, p, noise_seed));
        let sax = |s: &vecheart::slicer::SliceStack| {
            s.planes.iter().zip(&s.points).filter(|(pl, _)| !pl.kind.is_lax()).map(|(pl, pts)| (*pl, pts.clone())).collect::<Vec<_>>()
        };
        prop_assert_eq!(sax(&moved), sax(&dropped));
    }
}
