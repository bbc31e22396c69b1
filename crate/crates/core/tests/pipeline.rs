use std::io::Cursor;

use lpf_core::world::{read_jsonl, write_jsonl};
use lpf_core::{
    build_world, ece, estimate_factors, spn_aggregate, uncertainty_decomposition,
    uniform_aggregate, LabelDist, Stream, WorldConfig,
};

#[test]
fn pooling_more_evidence_sharpens_calibration() {
    let world = build_world(WorldConfig {
        k_max: 10,
        ..WorldConfig::default()
    })
    .unwrap();
    let dec = world.decoder();
    let root = Stream::new(11);
    let mut by_k = Vec::new();
    for k in [1, 10] {
        let (preds, labels): (Vec<LabelDist>, Vec<usize>) = (0..200u64)
            .map(|j| {
                let e = world.sample_entity(k, j).unwrap();
                let f = estimate_factors(&dec, &e.evidence, 16, &root.child(j)).unwrap();
                (spn_aggregate(&f).unwrap().dist, e.label)
            })
            .unzip();
        by_k.push(ece(&preds, &labels, 10).unwrap().ece);
    }
    assert!(by_k[1] < by_k[0], "{by_k:?}");
}

#[test]
fn single_item_spn_is_the_tempered_factor() {
    let world = build_world(WorldConfig::default()).unwrap();
    let e = world.sample_entity(1, 0).unwrap();
    let f = estimate_factors(&world.decoder(), &e.evidence, 32, &Stream::new(1)).unwrap();
    let (a, b) = (spn_aggregate(&f).unwrap(), uniform_aggregate(&f).unwrap());
    let tempered: Vec<f64> = f[0]
        .dist
        .probs()
        .iter()
        .map(|p| p.powf(f[0].weight))
        .collect();
    let z: f64 = tempered.iter().sum();
    for (x, t) in a.dist.probs().iter().zip(&tempered) {
        assert!((x - t / z).abs() < 1e-12);
    }
    assert_eq!(b.dist, f[0].dist);
    assert_eq!(a.dist.argmax(), b.dist.argmax());
    assert_eq!(a.k_eff, 1.0);
}

#[test]
fn jsonl_round_trip_preserves_entities() {
    let world = build_world(WorldConfig::default()).unwrap();
    let entities: Vec<_> = (0..20)
        .map(|j| world.sample_entity(3, j).unwrap())
        .collect();
    let mut buf = Vec::new();
    write_jsonl(&entities, &mut buf).unwrap();
    let back = read_jsonl(Cursor::new(buf)).unwrap();
    assert_eq!(back, entities);
}

#[test]
fn decomposition_identity_on_world_entities() {
    let world = build_world(WorldConfig::default()).unwrap();
    let dec = world.decoder();
    for j in 0..10u64 {
        let e = world.sample_entity(4, j).unwrap();
        let w = vec![1.0; e.k()];
        let u = uncertainty_decomposition(&dec, &e.evidence, &w, 200, &mut Stream::new(j)).unwrap();
        assert!((u.total - u.epistemic - u.aleatoric).abs() < 1e-12);
        assert!(u.epistemic >= 0.0 && u.aleatoric >= 0.0);
    }
}
