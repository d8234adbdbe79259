use infilmap_core::grid::FlipSet;
use infilmap_core::labelgen::zones_from_segmentation;
use infilmap_core::netref::FeatureMap;
use infilmap_core::phantom::{generate_phantom, OraclePredictor, PhantomSpec};
use infilmap_core::pipeline::{
    evaluate_patient, postprocess, sliding_window_infer, tta_predict, zscore_normalize, EvalFlags, InferConfig, PostProcConfig,
};

#[test]
fn oracle_predictor_scores_perfectly() {
    for seed in 0..4 {
        let p = generate_phantom(&PhantomSpec::random(seed, 30)).unwrap();
        let truth = zones_from_segmentation(&p.seg, &p.volume, p.spec.dataset).unwrap();
        let oracle = OraclePredictor::new(truth.clone());
        let infer = InferConfig {
            window: 16,
            batch: 3,
            ..Default::default()
        };
        for flags in [EvalFlags { tta: true, postproc: true }, EvalFlags { tta: false, postproc: false }] {
            let pp = PostProcConfig {
                min_component_voxels: 1,
                ..Default::default()
            };
            let r = evaluate_patient(&p.volume, &truth, &oracle, &infer, &pp, flags).unwrap();
            assert_eq!(r.raw_zones, truth);
            assert_eq!(r.report.mean.dsc, Some(1.0));
            assert_eq!(r.report.mean.hd95_mm, Some(0.0));
        }
    }
}

#[test]
fn tta_collapses_for_equivariant_predictor() {
    let p = generate_phantom(&PhantomSpec::random(9, 28)).unwrap();
    let oracle = OraclePredictor::new(p.zones.clone());
    let x = FeatureMap::from_volume(&zscore_normalize(&p.volume));
    let cfg = InferConfig {
        window: 12,
        overlap: 0.25,
        ..Default::default()
    };
    let base = sliding_window_infer(&x, &oracle, &cfg, FlipSet::NONE).unwrap();
    let tta = tta_predict(&x, &|v, f| sliding_window_infer(v, &oracle, &cfg, f)).unwrap();
    let err = base.data().iter().zip(tta.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-6, "{err}");
}

#[test]
fn postprocess_is_idempotent_on_phantom_zones() {
    let p = generate_phantom(&PhantomSpec::random(2, 32)).unwrap();
    let cfg = PostProcConfig::default();
    let once = postprocess(&p.zones, &cfg);
    assert_eq!(postprocess(&once, &cfg), once);
}
