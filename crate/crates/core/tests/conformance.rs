use infilmap_core::grid::FlipSet;
use infilmap_core::losses::LossWeights;
use infilmap_core::netref::{ModelConfig, AUX_FACTORS};
use infilmap_core::pipeline::{InferConfig, PatchConfig, PostProcConfig};

#[test]
fn defaults_carry_the_published_constants() {
    let w = LossWeights::default();
    assert_eq!(w.class_weights, [0.1, 1.0, 1.5, 2.0]);
    assert_eq!((w.lambda_boundary, w.lambda_aux, w.boundary_extra), (0.3, 0.3, 0.5));
    let p = PatchConfig::default();
    assert_eq!((p.size, p.per_volume), (96, 2));
    let i = InferConfig::default();
    assert_eq!((i.window, i.overlap, i.tta), (96, 0.5, true));
    assert_eq!(FlipSet::all_subsets().len(), 8);
    assert_eq!(PostProcConfig::default().min_component_voxels, 500);
    let m = ModelConfig::default();
    assert_eq!(m.cnn_channels(), [32, 32, 64, 128, 256]);
    assert_eq!(m.global_channels(), [24, 48, 96, 192]);
    assert_eq!(AUX_FACTORS, [2, 4, 8]);
}
