mod common;

use bsa::geometry::{sample_shape, ShapeParams};

#[test]
fn sampled_points_lie_on_their_surfaces() {
    let worst = common::max_residual(10_000).unwrap();
    assert!(worst <= 1e-6, "worst residual {worst:e}");
}

#[test]
fn cube_faces_are_hit_uniformly() {
    let (freq, chi2) = common::cube_faces(60_000, 3).unwrap();
    for f in freq {
        assert!((f - 1.0 / 6.0).abs() <= 0.02, "face frequency {f}");
    }
    assert!(chi2 < common::CHI2_DF5_99, "chi-square {chi2}");
}

#[test]
fn sampling_is_deterministic() {
    for p in common::all_shape_params() {
        let a = sample_shape(&p, 500, 9).unwrap();
        let b = sample_shape(&p, 500, 9).unwrap();
        assert_eq!(a, b, "{p:?}");
    }
}

#[test]
fn cylinder_heights_cover_the_lateral_band() {
    let p = ShapeParams::Cylinder { radius: 0.5, height: 2.0 };
    let pc = sample_shape(&p, 20_000, 1).unwrap();
    // uniform h on [-1, 1]: a quarter of the points in each quarter band
    let low = pc.points.iter().filter(|q| q[2] < -0.5).count() as f64 / 20_000.0;
    assert!((low - 0.25).abs() < 0.02, "{low}");
}
