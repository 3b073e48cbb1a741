use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn small_full() -> ModelConfig {
    ModelConfig {
        c1: 4,
        c2: 5,
        ce: 3,
        point_hidden: 6,
        pos_hidden: 4,
        decoder_hidden: 6,
        decoder_blocks: 2,
        ..ModelConfig::full([6, 5, 7])
    }
}

fn small_lite() -> ModelConfig {
    ModelConfig {
        c1: 4,
        c2: 5,
        ce: 3,
        point_hidden: 6,
        pos_hidden: 4,
        decoder_hidden: 6,
        ..ModelConfig::lite([5, 5, 5])
    }
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, half: f64) -> PointCloud {
    PointCloud::new(
        (0..n)
            .map(|_| Vec3::from_fn(|_, _| rng.random_range(-half..half)))
            .collect(),
    )
    .unwrap()
}

/// Query away from voxel planes, where the trilinear field has kinks.
fn smooth_query(rng: &mut ChaCha8Rng, dims: [usize; 3], margin: f64) -> Vec3 {
    loop {
        let q = Vec3::from_fn(|_, _| rng.random_range(-0.45..0.45));
        let ok = (0..3).all(|a| {
            let u = (q[a] + 0.5) * (dims[a] - 1) as f64;
            (u - u.round()).abs() * (1.0 / (dims[a] - 1) as f64) > margin
        });
        if ok {
            return q;
        }
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// `sum_i w_o[i] occ(q_i) + w_s[i] sal(q_i)` through encode and decode.
fn objective(model: &FieldModel, cloud: &PointCloud, queries: &[Vec3], w_o: &[f64], w_s: &[f64]) -> f64 {
    let samples = model.evaluate_field(FieldSource::Cloud(cloud), queries).unwrap();
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| w_o[i] * s.occupancy + w_s[i] * s.saliency)
        .sum()
}

fn analytic(model: &FieldModel, cloud: &PointCloud, queries: &[Vec3], w_o: &[f64], w_s: &[f64]) -> (Vec<f64>, Vec<Vec3>) {
    let enc = model.encode_traced(cloud).unwrap();
    let trace = model.query_traced(&enc.volume, queries, Heads::BOTH).unwrap();
    let mut grads = vec![0.0; model.num_params()];
    let mut d_vol = vec![0.0; enc.volume.values().len()];
    let dq = model
        .query_backward(&enc.volume, &trace, Some(w_o), Some(w_s), Some(&mut grads), Some(&mut d_vol), true)
        .unwrap();
    model.encode_backward(&enc, &d_vol, &mut grads);
    (grads, dq)
}

fn check_gradients(config: ModelConfig, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = FieldModel::new(config.clone(), seed).unwrap();
    let cloud = random_cloud(&mut rng, 40, 0.5);
    let queries: Vec<Vec3> = (0..6).map(|_| smooth_query(&mut rng, config.volume_resolution, 2e-3)).collect();
    let w_o: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w_s: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (grads, dq) = analytic(&model, &cloud, &queries, &w_o, &w_s);
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let i = rng.random_range(0..model.num_params());
        let mut m = model.clone();
        m.params_mut()[i] += h;
        let hi = objective(&m, &cloud, &queries, &w_o, &w_s);
        m.params_mut()[i] -= 2.0 * h;
        let lo = objective(&m, &cloud, &queries, &w_o, &w_s);
        worst = worst.max(rel_err((hi - lo) / (2.0 * h), grads[i]));
    }
    assert!(worst < 1e-3, "parameter gradient rel err {worst}");
    for (k, q) in queries.iter().enumerate() {
        for a in 0..3 {
            let mut qs = queries.clone();
            qs[k][a] = q[a] + h;
            let hi = objective(&model, &cloud, &qs, &w_o, &w_s);
            qs[k][a] = q[a] - h;
            let lo = objective(&model, &cloud, &qs, &w_o, &w_s);
            let fd = (hi - lo) / (2.0 * h);
            assert!(rel_err(fd, dq[k][a]) < 1e-3, "query {k} axis {a}: {fd} vs {}", dq[k][a]);
        }
    }
}

#[test]
fn lite_gradients_match_differences() {
    check_gradients(small_lite(), 3);
}

#[test]
fn full_gradients_match_differences() {
    check_gradients(small_full(), 5);
}

#[test]
fn positional_jacobian_matches_differences() {
    let model = FieldModel::new(ModelConfig::lite([4, 4, 4]), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-4;
    for _ in 0..20 {
        let q = Vec3::from_fn(|_, _| rng.random_range(-0.5..0.5));
        let trace = model.pos.forward(model.params(), &[q.x, q.y, q.z], 1);
        assert_eq!(trace.output.len(), 32);
        for out in 0..32 {
            let mut d = vec![0.0; 32];
            d[out] = 1.0;
            let jac_row = model.pos.backward(model.params(), &trace, &d, None, true).unwrap();
            for a in 0..3 {
                let mut qp = q;
                qp[a] += h;
                let hi = model.positional_encode(&[qp]).unwrap()[out];
                qp[a] -= 2.0 * h;
                let lo = model.positional_encode(&[qp]).unwrap()[out];
                assert!(rel_err((hi - lo) / (2.0 * h), jac_row[a]) < 1e-3);
            }
        }
    }
}

#[test]
fn positional_code_is_deterministic() {
    let model = FieldModel::new(ModelConfig::lite([4, 4, 4]), 1).unwrap();
    let q = [Vec3::new(0.1, -0.2, 0.3)];
    assert_eq!(model.positional_encode(&q).unwrap(), model.positional_encode(&q).unwrap());
}

#[test]
fn encoding_ignores_point_order() {
    for config in [small_lite(), small_full()] {
        let model = FieldModel::new(config, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cloud = random_cloud(&mut rng, 300, 0.5);
        let mut pts = cloud.points().to_vec();
        pts.reverse();
        pts.swap(3, 100);
        let a = model.encode(&cloud).unwrap();
        let b = model.encode(&PointCloud::new(pts).unwrap()).unwrap();
        let diff = a
            .values()
            .iter()
            .zip(b.values())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-5, "{diff}");
    }
}

#[test]
fn sparse_cloud_gives_finite_features() {
    let model = FieldModel::new(ModelConfig::full([16, 16, 16]), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cloud = random_cloud(&mut rng, 10, 0.5);
    let vol = model.encode(&cloud).unwrap();
    assert_eq!(vol.channels(), 32);
    assert!(vol.values().iter().all(|v| v.is_finite()));
}

#[test]
fn untrained_outputs_are_open_unit_interval() {
    let model = FieldModel::new(small_full(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cloud = random_cloud(&mut rng, 50, 0.5);
    let queries: Vec<Vec3> = (0..200).map(|_| Vec3::from_fn(|_, _| rng.random_range(-2.0..2.0))).collect();
    for s in model.evaluate_field(FieldSource::Cloud(&cloud), &queries).unwrap() {
        assert!(s.occupancy > 0.0 && s.occupancy < 1.0);
        assert!(s.saliency > 0.0 && s.saliency < 1.0);
    }
}

#[test]
fn batched_decoding_matches_single_rows() {
    let model = FieldModel::new(ModelConfig::lite([4, 4, 4]), 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rows = 512;
    let q_e: Vec<f64> = (0..rows * 32).map(|_| rng.random_range(-1.0..1.0)).collect();
    let g_q: Vec<f64> = (0..rows * 32).map(|_| rng.random_range(-1.0..1.0)).collect();
    let occ = model.decode_occupancy(&q_e, &g_q).unwrap();
    let sal = model.decode_saliency(&q_e, &g_q).unwrap();
    for r in 0..rows {
        let qe = &q_e[r * 32..(r + 1) * 32];
        let gq = &g_q[r * 32..(r + 1) * 32];
        assert!((model.decode_occupancy(qe, gq).unwrap()[0] - occ[r]).abs() < 1e-6);
        assert!((model.decode_saliency(qe, gq).unwrap()[0] - sal[r]).abs() < 1e-6);
    }
}

#[test]
fn decode_rejects_width_mismatch() {
    let model = FieldModel::new(ModelConfig::lite([4, 4, 4]), 8).unwrap();
    assert!(model.decode_occupancy(&[0.0; 32], &[0.0; 31]).is_err());
    assert!(model.decode_saliency(&[0.0; 31], &[0.0; 32]).is_err());
}

#[test]
fn cached_volume_matches_fresh_encoding() {
    let model = FieldModel::new(small_full(), 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cloud = random_cloud(&mut rng, 100, 0.5);
    let queries: Vec<Vec3> = (0..256).map(|_| Vec3::from_fn(|_, _| rng.random_range(-0.5..0.5))).collect();
    let vol = model.encode(&cloud).unwrap();
    let cached = model.evaluate_field(FieldSource::Volume(&vol), &queries).unwrap();
    let fresh = model.evaluate_field(FieldSource::Cloud(&cloud), &queries).unwrap();
    for (a, b) in cached.iter().zip(&fresh) {
        assert!((a.occupancy - b.occupancy).abs() < 1e-6);
        assert!((a.saliency - b.saliency).abs() < 1e-6);
    }
    assert!(model.evaluate_field(FieldSource::Volume(&vol), &[]).unwrap().is_empty());
}

#[test]
fn traced_pass_matches_untraced() {
    let model = FieldModel::new(small_full(), 13).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let cloud = random_cloud(&mut rng, 60, 0.5);
    let enc = model.encode_traced(&cloud).unwrap();
    assert_eq!(enc.volume, model.encode(&cloud).unwrap());
    let queries: Vec<Vec3> = (0..30).map(|_| Vec3::from_fn(|_, _| rng.random_range(-0.5..0.5))).collect();
    let t = model.query_traced(&enc.volume, &queries, Heads::BOTH).unwrap();
    let (occ, sal) = model.query_volume(&enc.volume, &queries, Heads::BOTH).unwrap();
    assert_eq!(t.occupancy, occ);
    assert_eq!(t.saliency, sal);
}

#[test]
fn encode_rejects_far_points() {
    let model = FieldModel::new(small_lite(), 1).unwrap();
    let cloud = PointCloud::new(vec![Vec3::zeros(), Vec3::new(0.0, 1.6, 0.0)]).unwrap();
    assert!(matches!(model.encode(&cloud), Err(Error::OutsideCanonical { index: 1, .. })));
}

#[test]
fn query_rejects_non_finite() {
    let model = FieldModel::new(small_lite(), 1).unwrap();
    let vol = model.encode(&PointCloud::new(vec![Vec3::zeros()]).unwrap()).unwrap();
    let q = [Vec3::zeros(), Vec3::new(f64::NAN, 0.0, 0.0)];
    assert!(matches!(model.query_volume(&vol, &q, Heads::BOTH), Err(Error::NonFinite { index: 1 })));
}

#[test]
fn heads_have_disjoint_parameters() {
    let model = FieldModel::new(small_lite(), 1).unwrap();
    let occ: Vec<_> = model.layout().sections().iter().filter(|s| s.name.starts_with("occupancy_head")).collect();
    let sal: Vec<_> = model.layout().sections().iter().filter(|s| s.name.starts_with("saliency_head")).collect();
    assert!(!occ.is_empty() && occ.len() == sal.len());
    for a in &occ {
        for b in &sal {
            assert!(a.offset + a.len <= b.offset || b.offset + b.len <= a.offset);
        }
    }
}

#[test]
fn with_params_checks_length() {
    let cfg = small_lite();
    let m = FieldModel::new(cfg.clone(), 1).unwrap();
    assert_eq!(FieldModel::with_params(cfg.clone(), m.params().to_vec()).unwrap(), m);
    assert!(FieldModel::with_params(cfg, vec![0.0; 3]).is_err());
}

#[test]
fn config_validation() {
    let mut cfg = small_lite();
    cfg.c2 = 0;
    assert!(FieldModel::new(cfg, 0).is_err());
    let mut cfg = small_full();
    cfg.volume_resolution = [1, 4, 4];
    assert!(FieldModel::new(cfg, 0).is_err());
}

#[test]
fn modelnet_scale_volume_shape() {
    let model = FieldModel::new(ModelConfig::full([64, 64, 64]), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cloud = random_cloud(&mut rng, 5000, 0.5);
    let vol = model.encode(&cloud).unwrap();
    assert_eq!((vol.channels(), vol.dims()), (32, [64, 64, 64]));
    let queries: Vec<Vec3> = (0..1000).map(|_| Vec3::from_fn(|_, _| rng.random_range(-0.5..0.5))).collect();
    let samples = model.evaluate_field(FieldSource::Volume(&vol), &queries).unwrap();
    assert!(samples.iter().all(|s| s.occupancy.is_finite() && s.saliency.is_finite()));
}
