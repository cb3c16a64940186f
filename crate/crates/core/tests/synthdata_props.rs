use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rfmpose::geometry::Vec3;
use rfmpose::synthdata::{
    build_dataset, denormalize_translation, generate_canonical, load_dataset, normalize_instance, split_key,
    split_ranges, Category, DataError, DatasetConfig, DatasetFile, Split,
};
use rfmpose::Exec;

fn within_three_sigma(count: usize, n: usize, p: f64) -> bool {
    let mean = n as f64 * p;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    (count as f64 - mean).abs() <= 3.0 * sd
}

#[test]
fn box_face_counts_follow_area() {
    let ext = [1.0, 0.6, 0.3];
    let areas = [ext[1] * ext[2], ext[0] * ext[2], ext[0] * ext[1]];
    let total = 2.0 * areas.iter().sum::<f64>();
    let n = 6000;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = generate_canonical(Category::Box, &ext, n, &mut rng).unwrap();
        for axis in 0..3 {
            for sign in [1.0, -1.0] {
                let count = pts.iter().filter(|sp| sp.normal[axis] == sign).count();
                assert!(
                    within_three_sigma(count, n, areas[axis] / total),
                    "seed {seed} axis {axis} sign {sign}: {count}"
                );
            }
        }
    }
}

#[test]
fn cylinder_patch_counts_follow_area() {
    let (r, h) = (0.3, 1.0);
    let lateral = std::f64::consts::TAU * r * h;
    let cap = std::f64::consts::PI * r * r;
    let total = lateral + 2.0 * cap;
    let n = 6000;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let pts = generate_canonical(Category::Cylinder, &[r, h], n, &mut rng).unwrap();
        let top = pts.iter().filter(|sp| sp.normal.z == 1.0).count();
        let bottom = pts.iter().filter(|sp| sp.normal.z == -1.0).count();
        assert!(within_three_sigma(top, n, cap / total));
        assert!(within_three_sigma(bottom, n, cap / total));
        assert!(within_three_sigma(n - top - bottom, n, lateral / total));
    }
}

proptest! {
    #[test]
    fn normalize_then_denormalize_is_exact(
        pts in prop::collection::vec(prop::array::uniform3(-3.0f64..3.0), 3..40),
        t in prop::array::uniform3(-2.0f64..2.0),
    ) {
        let cloud: Vec<Vec3> = pts.iter().map(|p| Vec3::from(*p)).collect();
        let t = Vec3::from(t);
        let n = match normalize_instance(&cloud, &t) {
            Ok(n) => n,
            Err(DataError::DegenerateCloud(_)) => return Ok(()),
            Err(e) => panic!("{e}"),
        };
        let back = denormalize_translation(&n.translation, &n.centroid, n.scale);
        prop_assert!((back - t).norm() <= 1e-12);
        let c = n.points.iter().fold(Vec3::zeros(), |a, p| a + p) / n.points.len() as f64;
        prop_assert!(c.norm() <= 1e-9);
        let r = n.points.iter().map(|p| p.norm()).fold(0.0, f64::max);
        prop_assert!((r - 1.0).abs() <= 1e-12);
    }
}

fn small_config(split: Split) -> DatasetConfig {
    DatasetConfig {
        count: 60,
        n_points: 64,
        categories: vec![Category::Box, Category::Cylinder, Category::MugLike],
        split,
        ..DatasetConfig::default()
    }
}

fn to_bytes(file: &DatasetFile) -> Vec<u8> {
    let mut buf = Vec::new();
    file.write_to(&mut buf).unwrap();
    buf
}

#[test]
fn dataset_invariants_hold_on_every_record() {
    let file = build_dataset(&small_config(Split::Train), 7, Exec::default()).unwrap();
    assert_eq!(file.instances.len(), 60);
    for inst in &file.instances {
        assert_eq!(inst.points.len(), 64);
        let c = inst.points.iter().fold(Vec3::zeros(), |a, p| a + Vec3::from(*p)) / 64.0;
        assert!(c.norm() <= 1e-9);
        let r = inst.points.iter().map(|p| Vec3::from(*p).norm()).fold(0.0, f64::max);
        assert!((r - 1.0).abs() <= 1e-12);
        let q = inst.quaternion;
        assert!(((q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt() - 1.0).abs() <= 1e-9);
        match inst.category {
            Category::Box => assert!(inst.symmetry_axis().is_none() && !inst.handle_occluded),
            Category::Cylinder => assert_eq!(inst.symmetry_axis(), Some(Vec3::z())),
            Category::MugLike => assert_eq!(inst.symmetry_axis().is_some(), inst.handle_occluded),
        }
        // Translation recovers a camera-frame position in front of the camera.
        let world = inst.denormalize(&inst.translation());
        assert!(world.z > 0.6 && world.z < 1.2);
    }
}

#[test]
fn test_shapes_never_fall_in_train_ranges() {
    let test = build_dataset(&small_config(Split::Test), 11, Exec::default()).unwrap();
    for inst in &test.instances {
        let key = split_key(inst.category, &inst.shape_params);
        let train = split_ranges(inst.category, Split::Train);
        assert!(train.iter().all(|(lo, hi)| key < *lo || key >= *hi), "{key} in train range");
        assert!(split_ranges(inst.category, Split::Test).iter().any(|(lo, hi)| key >= *lo && key < *hi));
    }
}

#[test]
fn same_seed_gives_byte_identical_files_in_both_modes() {
    let cfg = small_config(Split::Train);
    let a = to_bytes(&build_dataset(&cfg, 3, Exec::Sequential).unwrap());
    let b = to_bytes(&build_dataset(&cfg, 3, Exec::Parallel).unwrap());
    let c = to_bytes(&build_dataset(&cfg, 4, Exec::Parallel).unwrap());
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn files_round_trip_bit_exactly() {
    let file = build_dataset(&small_config(Split::Train), 5, Exec::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    file.save(&path).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(back, file);
    let bits = |f: &DatasetFile| -> Vec<u64> {
        f.instances.iter().flat_map(|i| i.points.iter().flatten().map(|v| v.to_bits())).collect()
    };
    assert_eq!(bits(&back), bits(&file));
}

#[test]
fn version_mismatch_and_missing_files_are_reported() {
    let file = build_dataset(&DatasetConfig { count: 2, ..small_config(Split::Train) }, 1, Exec::default()).unwrap();
    let text = String::from_utf8(to_bytes(&file)).unwrap().replacen("\"version\":1", "\"version\":9", 1);
    assert!(matches!(
        DatasetFile::read_from(text.as_bytes()),
        Err(DataError::FormatVersionMismatch { found: 9, expected: 1 })
    ));
    assert!(matches!(load_dataset(std::path::Path::new("/nonexistent/x.jsonl")), Err(DataError::Io(_))));
}

#[test]
fn full_size_config_has_expected_shape() {
    let cfg = DatasetConfig { count: 500, n_points: 128, categories: vec![Category::Box], ..DatasetConfig::default() };
    let file = build_dataset(&cfg, 1, Exec::default()).unwrap();
    assert_eq!(file.instances.len(), 500);
    assert!(file.instances.iter().all(|i| i.points.len() == 128));
}
