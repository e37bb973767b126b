use proptest::prelude::*;

use super::*;
use crate::exec::Exec;
use crate::geometry::{dist2, norm, Vec3};
use crate::rng::stream;

fn spec(family: Family, seed: u64) -> ShapeSpec {
    ShapeSpec { family, points: 500, seed }
}

#[test]
fn sphere_points_lie_on_the_surface() {
    let c = generate(&spec(Family::Sphere { radius: 0.7 }, 1)).unwrap();
    for (p, n) in c.coords.iter().zip(c.normals.as_ref().unwrap()) {
        assert!((norm(*p) - 0.7).abs() < 1e-9);
        let radial = crate::geometry::normalized(*p);
        assert!((0..3).all(|a| (radial[a] - n[a]).abs() < 1e-9));
    }
}

#[test]
fn cube_points_have_one_coordinate_on_a_face() {
    let c = generate(&spec(
        Family::Cube {
            half_extent: 1.0,
            per_face_labels: true,
        },
        2,
    ))
    .unwrap();
    for (i, p) in c.coords.iter().enumerate() {
        let on_face = p.iter().filter(|v| (v.abs() - 1.0).abs() < 1e-9).count();
        assert_eq!(on_face, 1);
        let n = c.normals.as_ref().unwrap()[i];
        let axis = (0..3).find(|&a| n[a] != 0.0).unwrap();
        assert_eq!(p[axis], n[axis]);
        assert!(c.point_labels.as_ref().unwrap()[i] < 6);
    }
}

#[test]
fn cube_faces_are_sampled_uniformly() {
    let n = 600;
    let p = 1.0 / 6.0;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for seed in 0..50 {
        let c = generate(&ShapeSpec {
            family: Family::Cube {
                half_extent: 1.0,
                per_face_labels: true,
            },
            points: n,
            seed,
        })
        .unwrap();
        let mut counts = [0usize; 6];
        for &l in c.point_labels.as_ref().unwrap() {
            counts[l] += 1;
        }
        for &k in &counts {
            assert!((k as f64 - n as f64 * p).abs() < 4.0 * sigma, "seed {seed}: {counts:?}");
        }
    }
}

#[test]
fn every_family_has_exact_unit_normals_and_valid_parts() {
    for name in ["sphere", "cube", "cylinder", "cone", "torus"] {
        let family = Family::random(name, &mut stream(3, &[])).unwrap();
        let c = generate(&spec(family, 4)).unwrap();
        for n in c.normals.as_ref().unwrap() {
            assert!((norm(*n) - 1.0).abs() < 1e-9, "{name}");
        }
        let parts = family.num_parts();
        assert!(c.point_labels.as_ref().unwrap().iter().all(|&l| l < parts));
    }
}

#[test]
fn cylinder_and_cone_surfaces_and_parts() {
    let c = generate(&spec(Family::Cylinder { radius: 0.5, height: 2.0 }, 5)).unwrap();
    let labels = c.point_labels.as_ref().unwrap();
    for (p, &l) in c.coords.iter().zip(labels) {
        let r = p[0].hypot(p[2]);
        if l == 0 {
            assert!((r - 0.5).abs() < 1e-9 && p[1].abs() <= 1.0);
        } else {
            assert!((p[1].abs() - 1.0).abs() < 1e-12 && r <= 0.5);
        }
    }
    assert!(labels.contains(&0) && labels.contains(&1));

    let c = generate(&spec(Family::Cone { radius: 0.5, height: 1.0 }, 6)).unwrap();
    for ((p, n), &l) in c.coords.iter().zip(c.normals.as_ref().unwrap()).zip(c.point_labels.as_ref().unwrap()) {
        let r = p[0].hypot(p[2]);
        if l == 0 {
            // Radius shrinks linearly to the apex; the normal is orthogonal
            // to the slant line through the point.
            assert!((r - 0.5 * (0.5 - p[1])).abs() < 1e-9);
            let slant: Vec3 = [p[0], p[1] - 0.5, p[2]];
            assert!(crate::geometry::dot(slant, *n).abs() < 1e-9);
        } else {
            assert_eq!(p[1], -0.5);
        }
    }
}

#[test]
fn torus_points_sit_on_the_tube() {
    let c = generate(&spec(Family::Torus { major: 0.7, minor: 0.2 }, 7)).unwrap();
    for p in &c.coords {
        let ring = p[0].hypot(p[2]) - 0.7;
        assert!((ring.hypot(p[1]) - 0.2).abs() < 1e-9);
    }
}

#[test]
fn generator_rejects_bad_specs() {
    assert!(generate(&ShapeSpec {
        family: Family::Sphere { radius: 1.0 },
        points: 7,
        seed: 0
    })
    .is_err());
    assert!(generate(&spec(Family::Sphere { radius: -1.0 }, 0)).is_err());
    assert!(generate(&spec(Family::Torus { major: 0.2, minor: 0.3 }, 0)).is_err());
    assert!(Family::random("pyramid", &mut stream(0, &[])).is_err());
}

#[test]
fn generation_is_deterministic() {
    let s = spec(Family::Cone { radius: 0.4, height: 1.2 }, 8);
    assert_eq!(generate(&s).unwrap(), generate(&s).unwrap());
}

#[test]
fn identity_augmentation_is_exact() {
    let c = generate(&spec(Family::Sphere { radius: 1.0 }, 9)).unwrap();
    let a = augment(&c, &AugmentationConfig::identity(), &mut stream(1, &[]));
    assert_eq!(a, c);
}

#[test]
fn translation_only_preserves_distances() {
    let c = generate(&spec(Family::Cylinder { radius: 0.5, height: 1.0 }, 10)).unwrap();
    let config = AugmentationConfig {
        translation_range: 0.2,
        ..AugmentationConfig::identity()
    };
    let a = augment(&c, &config, &mut stream(2, &[]));
    assert_ne!(a.coords, c.coords);
    for i in 0..20 {
        for j in 0..20 {
            assert!((dist2(a.coords[i], a.coords[j]) - dist2(c.coords[i], c.coords[j])).abs() < 1e-12);
        }
    }
}

#[test]
fn anisotropic_scale_doubles_the_x_extent() {
    let c = generate(&spec(
        Family::Cube {
            half_extent: 0.5,
            per_face_labels: false,
        },
        11,
    ))
    .unwrap();
    let extent = |c: &crate::geometry::PointCloud, a: usize| {
        let vals = c.coords.iter().map(|p| p[a]);
        vals.clone().fold(f64::NEG_INFINITY, f64::max) - vals.fold(f64::INFINITY, f64::min)
    };
    let mut rng = stream(3, &[]);
    // Draw scales until x lands near 2 and the others near 1 is not
    // practical, so scale by hand through the same code path.
    let config = AugmentationConfig {
        aniso_scale_low: 2.0,
        aniso_scale_high: 2.0,
        ..AugmentationConfig::identity()
    };
    let a = augment(&c, &config, &mut rng);
    assert_eq!(extent(&a, 0), 2.0 * extent(&c, 0));
    // Normals of the scaled cube still point along the face axes.
    for n in a.normals.as_ref().unwrap() {
        assert!((norm(*n) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn inverse_transpose_keeps_normals_orthogonal_to_the_surface() {
    let c = generate(&spec(Family::Sphere { radius: 1.0 }, 12)).unwrap();
    let config = AugmentationConfig {
        translation_range: 0.0,
        ..AugmentationConfig::default()
    };
    let a = augment(&c, &config, &mut stream(4, &[]));
    // On an ellipsoid x²/a² + … = 1 the normal is ∝ (x/a², y/b², z/c²).
    let s: Vec<f64> = (0..3).map(|ax| a.coords[0][ax] / c.coords[0][ax]).collect();
    for (p, n) in a.coords.iter().zip(a.normals.as_ref().unwrap()) {
        let g = crate::geometry::normalized([p[0] / (s[0] * s[0]), p[1] / (s[1] * s[1]), p[2] / (s[2] * s[2])]);
        assert!((0..3).all(|ax| (g[ax] - n[ax]).abs() < 1e-9));
    }
}

#[test]
fn augmentation_config_validation() {
    AugmentationConfig::default().validate().unwrap();
    let bad = [
        AugmentationConfig {
            aniso_scale_low: -0.66,
            ..AugmentationConfig::default()
        },
        AugmentationConfig {
            aniso_scale_low: 2.0,
            ..AugmentationConfig::default()
        },
        AugmentationConfig {
            translation_range: -0.1,
            ..AugmentationConfig::default()
        },
        AugmentationConfig {
            input_dropout: 1.0,
            ..AugmentationConfig::default()
        },
    ];
    for b in bad {
        assert!(b.validate().is_err());
    }
}

#[test]
fn density_dropout_edge_cases_and_membership() {
    let c = generate(&spec(Family::Torus { major: 0.7, minor: 0.2 }, 13)).unwrap();
    let all = density_dropout(&c, c.len(), &mut stream(5, &[])).unwrap();
    assert_eq!(all, c);
    let one = density_dropout(&c, 1, &mut stream(5, &[])).unwrap();
    assert_eq!(one.len(), 1);
    one.validate().unwrap();
    let some = density_dropout(&c, 64, &mut stream(6, &[])).unwrap();
    for (p, l) in some.coords.iter().zip(some.point_labels.as_ref().unwrap()) {
        let i = c.coords.iter().position(|q| q == p).unwrap();
        assert_eq!(c.point_labels.as_ref().unwrap()[i], *l);
    }
    assert!(density_dropout(&c, 0, &mut stream(5, &[])).is_err());
    assert!(density_dropout(&c, c.len() + 1, &mut stream(5, &[])).is_err());
}

#[test]
fn input_dropout_keeps_size_and_copies_the_first_point() {
    let c = generate(&spec(Family::Sphere { radius: 1.0 }, 14)).unwrap();
    let d = input_dropout(&c, 0.875, &mut stream(7, &[]));
    assert_eq!(d.len(), c.len());
    for (i, p) in d.coords.iter().enumerate() {
        assert!(*p == c.coords[i] || *p == c.coords[0]);
    }
    assert_eq!(input_dropout(&c, 0.0, &mut stream(7, &[])), c);
}

#[test]
fn dataset_splits_are_disjoint_and_labelled() {
    let spec = DatasetSpec {
        families: vec!["sphere".into(), "cone".into()],
        train_per_class: 3,
        test_per_class: 2,
        points: 32,
        seed: 5,
    };
    let train = generate_dataset(&spec, Split::Train, Exec::Sequential).unwrap();
    let test = generate_dataset(&spec, Split::Test, Exec::Parallel).unwrap();
    assert_eq!(train.len(), 6);
    assert_eq!(test.len(), 4);
    assert_eq!(train.iter().map(|c| c.shape_label.unwrap()).collect::<Vec<_>>(), vec![0, 0, 0, 1, 1, 1]);
    for a in &train {
        assert!(test.iter().all(|b| a.coords != b.coords));
        assert!(a.coords.iter().all(|p| norm(*p) <= 1.0 + 1e-9));
    }
    assert_eq!(train, generate_dataset(&spec, Split::Train, Exec::Parallel).unwrap());
}

#[test]
fn manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = DatasetSpec {
        families: vec!["cube".into(), "torus".into()],
        train_per_class: 2,
        test_per_class: 1,
        points: 16,
        seed: 6,
    };
    let clouds = generate_dataset(&spec, Split::Train, Exec::Sequential).unwrap();
    let manifest = write_dataset(dir.path(), "train", &clouds).unwrap();
    let text = std::fs::read_to_string(&manifest).unwrap();
    assert!(text.starts_with(MANIFEST_HEADER));
    assert_eq!(read_manifest(&manifest).unwrap(), clouds);
}

#[test]
fn malformed_manifests_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.manifest");
    for text in ["", "wrong header\n", "RSCNN-MANIFEST v1\n", "RSCNN-MANIFEST v1\na.pts\n", "RSCNN-MANIFEST v1\na.pts x\n", "RSCNN-MANIFEST v1\nmissing.pts 0\n"] {
        std::fs::write(&p, text).unwrap();
        assert!(read_manifest(&p).is_err(), "{text:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn augmentation_never_touches_labels(seed in 0u64..10_000, drop in 0.0f64..0.9) {
        let mut c = generate(&spec(Family::Cone { radius: 0.5, height: 1.0 }, seed)).unwrap();
        c.shape_label = Some(3);
        let config = AugmentationConfig { input_dropout: drop, ..AugmentationConfig::default() };
        let mut rng = stream(seed, &[1]);
        let a = augment(&c, &config, &mut rng);
        prop_assert_eq!(&a.point_labels, &c.point_labels);
        prop_assert_eq!(a.shape_label, Some(3));
        let d = density_dropout(&a, 40, &mut rng).unwrap();
        prop_assert_eq!(d.shape_label, Some(3));
        let i = input_dropout(&a, drop, &mut rng);
        prop_assert_eq!(i.shape_label, Some(3));
    }

    #[test]
    fn augmented_normals_stay_unit(seed in 0u64..10_000) {
        let c = generate(&spec(Family::Torus { major: 0.6, minor: 0.2 }, seed)).unwrap();
        let a = augment(&c, &AugmentationConfig::default(), &mut stream(seed, &[2]));
        for n in a.normals.as_ref().unwrap() {
            prop_assert!((norm(*n) - 1.0).abs() < 1e-12);
        }
    }
}
