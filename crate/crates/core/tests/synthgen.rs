use stereoseg::data::{load_manifest, Dataset, Split};
use stereoseg::geometry::{ssim_map, warp_horizontal, Direction};
use stereoseg::grid::Class;
use stereoseg::losses::{appearance_loss, Side};
use stereoseg::synthgen::{
    emit_dataset, knee_scene, render, routine_scene, Degradation, EmitOptions, Lighting, Primitive, SceneSpec, Shape,
    SyntheticSample, Texture,
};

fn plane_spec(planes: &[(f64, Option<[f64; 4]>)], size: usize) -> SceneSpec {
    SceneSpec {
        scene_id: "planes".into(),
        group_id: "g".into(),
        frame_index: 0,
        focal_px: 40.0,
        baseline_m: 0.1,
        image_size: [size, size],
        primitives: planes
            .iter()
            .enumerate()
            .map(|(i, &(z, extent))| Primitive {
                shape: Shape::FrontoPlane { z },
                extent,
                texture: Texture { seed: i as u64, albedo: [0.8, 0.6, 0.4], frequency: 10.0, octaves: 2, contrast: 0.7 },
                class: Class::from_index(i).unwrap(),
            })
            .collect(),
        lighting: Lighting::default(),
        d_max: 0.3,
    }
}

/// Mean absolute error between the left view and the right view warped
/// by the ground truth, over valid pixels.
fn valid_warp_mae(s: &SyntheticSample) -> f64 {
    let recon = warp_horizontal(&s.stereo.right, &s.gt_disparity_left, Direction::Plus).unwrap();
    let (h, w, c) = recon.shape();
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            if s.valid[y * w + x] {
                for ch in 0..c {
                    sum += (recon.get(y, x, ch) - s.stereo.left.get(y, x, ch)).abs();
                    n += 1;
                }
            }
        }
    }
    sum / n as f64
}

/// Masked appearance error at disparity field `d`.
fn valid_appearance(s: &SyntheticSample, d: &stereoseg::grid::DisparityMap) -> f64 {
    let recon = warp_horizontal(&s.stereo.right, d, Direction::Plus).unwrap();
    let ssim = ssim_map(&s.stereo.left, &recon).unwrap();
    let (h, w, c) = recon.shape();
    let mut sum = 0.0;
    let mut n = 0;
    for y in 0..h {
        for x in 0..w {
            if !s.valid[y * w + x] {
                continue;
            }
            let l1: f64 = (0..c).map(|ch| (recon.get(y, x, ch) - s.stereo.left.get(y, x, ch)).abs()).sum::<f64>() / c as f64;
            sum += 0.85 * (1.0 - ssim.get(y, x, 0)) / 2.0 + 0.15 * l1;
            n += 1;
        }
    }
    sum / n as f64
}

#[test]
fn fronto_plane_at_fb_has_one_pixel_disparity() {
    let spec = plane_spec(&[(40.0 * 0.1, None)], 32);
    let s = render(&spec, 0).unwrap();
    for &d in s.gt_disparity_left.data() {
        assert!((d - 1.0 / 32.0).abs() < 1e-15);
    }
}

#[test]
fn two_planes_have_disparity_ratio_two() {
    // the nearer plane only covers the left half of the world
    let spec = plane_spec(&[(2.0, None), (1.0, Some([-10.0, -0.2, -10.0, 10.0]))], 32);
    let s = render(&spec, 0).unwrap();
    let d = &s.gt_disparity_left;
    let mut near = None;
    let mut far = None;
    for y in 0..32 {
        for x in 0..32 {
            match s.mask_left.get(y, x) {
                1 => near = Some(d.get(y, x)),
                0 => far = Some(d.get(y, x)),
                _ => unreachable!(),
            }
        }
    }
    assert_eq!(near.unwrap() / far.unwrap(), 2.0);
}

#[test]
fn ground_truth_warp_reconstructs_left_view() {
    for i in 0..6 {
        for s in [render(&routine_scene(48, 11, i), 0).unwrap(), render(&knee_scene(48, 11, i % 3, i), 0).unwrap()] {
            assert!(s.valid_count() > 48 * 48 / 2);
            let mae = valid_warp_mae(&s);
            assert!(mae <= 0.02, "{}: warp MAE {mae}", s.stereo.scene_id);
        }
    }
}

#[test]
fn ground_truth_beats_zero_disparity_photometrically() {
    for i in 0..6 {
        let s = render(&routine_scene(32, 5, i), 0).unwrap();
        let zero = stereoseg::grid::DisparityMap::filled(32, 32, 0.0);
        assert!(valid_appearance(&s, &s.gt_disparity_left) < valid_appearance(&s, &zero));
        let full_gt = appearance_loss(&s.stereo.left, &s.stereo.right, &s.gt_disparity_left, Side::Left, 0.85).unwrap();
        let full_zero = appearance_loss(&s.stereo.left, &s.stereo.right, &zero, Side::Left, 0.85).unwrap();
        assert!(full_gt < full_zero);
    }
}

#[test]
fn halving_depths_doubles_disparity() {
    let spec = routine_scene(32, 9, 3);
    let mut half = spec.clone();
    for p in &mut half.primitives {
        p.shape = match p.shape {
            Shape::FrontoPlane { z } => Shape::FrontoPlane { z: z / 2.0 },
            Shape::SlantedPlane { z0, slope_x, slope_y } => Shape::SlantedPlane { z0: z0 / 2.0, slope_x, slope_y },
            Shape::Sphere { center, radius } => Shape::Sphere { center: center.map(|c| c / 2.0), radius: radius / 2.0 },
        };
        p.texture.frequency *= 2.0;
    }
    let a = render(&spec, 0).unwrap();
    let b = render(&half, 0).unwrap();
    assert_eq!(a.mask_left, b.mask_left);
    for (da, db) in a.gt_disparity_left.data().iter().zip(b.gt_disparity_left.data()) {
        assert!((2.0 * da - db).abs() < 1e-12 * db.abs());
    }
}

#[test]
fn rendering_is_deterministic_and_validated() {
    let spec = knee_scene(32, 4, 1, 2);
    assert_eq!(render(&spec, 3).unwrap(), render(&spec, 3).unwrap());
    let mut noisy = spec.clone();
    noisy.lighting.noise_std = 0.01;
    assert_eq!(render(&noisy, 3).unwrap(), render(&noisy, 3).unwrap());
    assert_ne!(render(&noisy, 3).unwrap().stereo.left, render(&noisy, 4).unwrap().stereo.left);

    // a plane at 0.1 m gives 0.5 * W pixels of disparity
    let too_close = plane_spec(&[(0.1 * 40.0 / 16.0, None)], 32);
    assert!(render(&too_close, 0).is_err());
}

#[test]
fn knee_scenes_contain_every_structure_often() {
    let mut seen = [0usize; 5];
    for i in 0..20 {
        let s = render(&knee_scene(32, 2, i % 5, i), 0).unwrap();
        for c in Class::ALL {
            if s.mask_left.contains(c) {
                seen[c.index()] += 1;
            }
        }
    }
    assert!(seen.iter().all(|&n| n >= 10), "{seen:?}");
}

#[test]
fn emitted_dataset_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let specs: Vec<_> = (0..10).map(|i| knee_scene(32, 1, i % 2, i)).collect();
    let opts = EmitOptions { degradations: vec![Degradation::Blur { sigma_px: 1.0 }], ..Default::default() };
    let written = emit_dataset(&specs, dir.path(), [0.8, 0.2], &opts).unwrap();
    let loaded = load_manifest(dir.path()).unwrap();
    assert_eq!(loaded, written);
    let ds = Dataset::open(dir.path()).unwrap();
    // 10 clean + 10 blurred stereo records; splits follow the clean scene
    assert_eq!(ds.manifest.stereo.len(), 20);
    assert_eq!(ds.manifest.stereo_indices(Split::Train).len(), 16);
    assert_eq!(ds.manifest.seg_indices(Split::Test).len(), 4);
    assert_eq!(ds.manifest.seg_groups(), vec!["knee0".to_string(), "knee1".to_string()]);

    let first = render(&specs[0], 0).unwrap();
    let s = ds.load_stereo(0).unwrap();
    assert_eq!(s.left, first.stereo.left);
    assert_eq!(s.right, first.stereo.right);
    let l = ds.load_labeled(0).unwrap();
    assert_eq!(l.mask, first.mask_left);
    let (gt, valid) = ds.load_ground_truth(0).unwrap().unwrap();
    assert_eq!(valid, first.valid);
    for (a, b) in gt.data().iter().zip(first.gt_disparity_left.data()) {
        assert_eq!(*a, *b as f32 as f64);
    }
    // the corrupted copy points at the same ground truth
    assert_eq!(ds.manifest.stereo[1].gt_disparity, ds.manifest.stereo[0].gt_disparity);
    assert_ne!(ds.load_stereo(1).unwrap().left, first.stereo.left);
}

#[test]
fn corrupted_files_are_itemised() {
    let dir = tempfile::tempdir().unwrap();
    let specs: Vec<_> = (0..3).map(|i| routine_scene(32, 1, i)).collect();
    let m = emit_dataset(&specs, dir.path(), [1.0, 0.0], &EmitOptions::default()).unwrap();
    std::fs::write(dir.path().join(&m.stereo[0].left), b"not a png").unwrap();
    std::fs::remove_file(dir.path().join(&m.seg[2].mask)).unwrap();
    let err = load_manifest(dir.path()).unwrap_err();
    match err {
        stereoseg::Error::Data(items) => {
            assert_eq!(items.len(), 2, "{items:?}");
            assert!(items[0].contains(&m.stereo[0].left));
            assert!(items[1].contains(&m.seg[2].mask));
        }
        other => panic!("unexpected {other}"),
    }
}
