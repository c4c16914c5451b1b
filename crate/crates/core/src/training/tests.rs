use proptest::prelude::*;

use super::*;
use crate::model::{ModelConfig, Provenance, VecHeart};
use crate::phantom::generate_phantom;
use crate::tensor::Tensor;

fn latent(values: &[f32]) -> LatentSet {
    LatentSet {
        codes: values.iter().map(|&v| Tensor::from_fn([2, 3], |_| v)).collect(),
        provenance: [Provenance::Surface; NUM_PARTS],
    }
}

#[test]
fn sdf_trivial_cases() {
    let a = vec![[0.1, -0.2, 0.3, 0.0, 1.0]; 7];
    assert_eq!(loss_sdf(&a, &a).unwrap(), 0.0);
    let b: Vec<_> = a.iter().map(|r| r.map(|v| v + 1.0)).collect();
    assert!((loss_sdf(&b, &a).unwrap() - 1.0).abs() < 1e-12);
    assert!(loss_sdf(&a, &a[..3]).is_err());
}

proptest! {
    #[test]
    fn sdf_matches_double_loop(rows in prop::collection::vec(prop::array::uniform5(-2.0f64..2.0), 1..40),
                               shift in prop::collection::vec(prop::array::uniform5(-1.0f64..1.0), 40)) {
        let gt: Vec<[f64; 5]> = rows.iter().zip(&shift).map(|(r, s)| std::array::from_fn(|p| r[p] + s[p])).collect();
        let mut acc = 0.0;
        for p in 0..NUM_PARTS {
            let mut part = 0.0;
            for q in 0..rows.len() {
                part += (rows[q][p] - gt[q][p]).abs();
            }
            acc += part / rows.len() as f64;
        }
        prop_assert!((loss_sdf(&rows, &gt).unwrap() - acc / NUM_PARTS as f64).abs() < 1e-12);
    }

    #[test]
    fn inter_bounds(preds in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 2..4), 0..30)) {
        let l = loss_inter(&preds, 50.0);
        let n: usize = preds.iter().map(Vec::len).sum();
        prop_assert!(l >= 0.0 && l <= n as f64);
        let pos: Vec<Vec<f64>> = preds.iter().map(|v| v.iter().map(|x| x.abs()).collect()).collect();
        prop_assert_eq!(loss_inter(&pos, 50.0), 0.0);
    }

    #[test]
    fn alignment_shift_invariant(a in prop::array::uniform5(-3.0f32..3.0), b in prop::array::uniform5(-3.0f32..3.0), d in -5.0f32..5.0) {
        let (x, y) = (latent(&a), latent(&b));
        let l0 = loss_latent_align(&x, &y).unwrap();
        let xs = latent(&a.map(|v| v + d));
        let ys = latent(&b.map(|v| v + d));
        prop_assert!((loss_latent_align(&xs, &ys).unwrap() - l0).abs() < 1e-4 * (1.0 + l0));
    }
}

#[test]
fn inter_scalar_example() {
    assert_eq!(loss_inter(&[], 50.0), 0.0);
    assert!((loss_inter(&[vec![-0.1]], 50.0) - 0.999_909_2).abs() < 1e-7);
    assert_eq!(loss_inter(&[vec![0.0, 0.3]], 50.0), 0.0);
}

#[test]
fn alignment_example() {
    let a = latent(&[0.0; 5]);
    assert_eq!(loss_latent_align(&a, &a).unwrap(), 0.0);
    let mut b = a.clone();
    // Six entries of √1.5 give a Frobenius norm of 3.
    b.codes[2] = Tensor::from_fn([2, 3], |_| 1.5f32.sqrt());
    assert!((loss_latent_align(&b, &a).unwrap() - 0.6).abs() < 1e-6);
}

#[test]
fn config_checks() {
    assert!(TrainConfig::default().validate().is_ok());
    assert_eq!(TrainConfig::full().epochs_stage1, 1000);
    assert_eq!(TrainConfig::full().epochs_stage2, 500);
    let c = TrainConfig::default();
    assert_eq!((c.sigma, c.lambda_la, c.lax_drop_p), (50.0, 0.001, 0.5));
    for bad in [
        TrainConfig { sigma: 0.0, ..c.clone() },
        TrainConfig { lambda_la: -1.0, ..c.clone() },
        TrainConfig { lax_drop_p: 1.5, ..c.clone() },
    ] {
        assert!(bad.validate().is_err());
    }
}

fn tiny_data(n: u64) -> Vec<PhantomData> {
    (0..n)
        .map(|s| PhantomData::new(generate_phantom(s, 100.0).unwrap(), 64).unwrap())
        .collect()
}

fn tiny_cfg() -> TrainConfig {
    TrainConfig {
        near_queries: 48,
        uniform_queries: 16,
        contact_batch: 16,
        slice_samples: 12,
        lr: 3e-3,
        ..TrainConfig::default()
    }
}

#[test]
fn cache_has_contacts_and_normalized_pools() {
    let d = &tiny_data(1)[0];
    assert_eq!(d.surface.len(), NUM_PARTS);
    assert!(d.contacts.len() > 100);
    for (p, pool) in d.surface.iter().enumerate() {
        for q in pool.iter().take(50) {
            assert!(d.gt_sdf(p, *q).abs() < 1e-3);
            assert!(q.iter().all(|c| c.abs() <= 1.0));
        }
    }
}

#[test]
fn stage1_lowers_sdf_and_is_deterministic() {
    let data = tiny_data(2);
    let cfg = TrainConfig { epochs_stage1: 100, ..tiny_cfg() };
    let mut m = VecHeart::new(ModelConfig::tiny(), 5).unwrap();
    let rep = train_stage1(&mut m, &data, &cfg).unwrap();
    assert_eq!(rep.steps, 200);
    let first = rep.first().unwrap().l_sdf;
    let last = rep.last().unwrap().l_sdf;
    assert!(last < 0.6 * first, "{first} -> {last}");
    let mut m2 = VecHeart::new(ModelConfig::tiny(), 5).unwrap();
    train_stage1(&mut m2, &data, &cfg).unwrap();
    assert_eq!(m.params.checksum(""), m2.params.checksum(""));
}

#[test]
fn stage2_freezes_stage1_params() {
    let data = tiny_data(2);
    let cfg = TrainConfig { epochs_stage2: 3, ..tiny_cfg() };
    let mut m = VecHeart::new(ModelConfig::tiny(), 2).unwrap();
    let before = m.stage1_checksum();
    let slice_before = m.params.checksum_where(VecHeart::is_slice_param);
    let la0 = validation_latent_alignment(&{
        let mut c = m.clone();
        c.init_slice_branch().unwrap();
        c
    }, &data, &cfg)
    .unwrap();
    let rep = train_stage2(&mut m, &data, &cfg).unwrap();
    assert_eq!(m.stage1_checksum(), before);
    assert_ne!(m.params.checksum_where(VecHeart::is_slice_param), slice_before);
    assert!(rep.curve.iter().all(|r| r.loss.l_la >= 0.0 && r.loss.is_finite()));
    let la1 = validation_latent_alignment(&m, &data, &cfg).unwrap();
    assert!(la0.is_finite() && la1.is_finite());
}

#[test]
fn loss_csv_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("l.csv");
    let curve = vec![EpochRecord {
        epoch: 0,
        loss: LossReport { l_sdf: 0.5, total: 0.5, ..Default::default() },
    }];
    write_loss_csv(&path, &curve).unwrap();
    let s = std::fs::read_to_string(&path).unwrap();
    assert!(s.starts_with("epoch,l_sdf,l_inter,l_la,total"));
    assert_eq!(s.lines().count(), 2);
}

#[test]
fn cosine_schedule_endpoints() {
    let c = TrainConfig { lr: 1e-3, lr_final_ratio: 0.1, ..TrainConfig::default() };
    assert_eq!(c.lr_at(0, 100), 1e-3);
    assert!((c.lr_at(99, 100) - 1e-4).abs() < 1e-15);
    assert!((c.lr_at(50, 101) - 5.5e-4).abs() < 1e-12);
    let flat = TrainConfig { lr_final_ratio: 1.0, ..c };
    assert!((0..10).all(|s| flat.lr_at(s, 10) == 1e-3));
    assert!(TrainConfig { lr_final_ratio: 0.0, ..TrainConfig::default() }.validate().is_err());
}
