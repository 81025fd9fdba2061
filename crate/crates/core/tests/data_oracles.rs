//! Procedural dataset checked against independent pixel counts and hashes.

use std::collections::BTreeMap;
use std::path::Path;

use fia_vton::data_model::{validate_sample, Joint, JointName, PoseKeypoints};
use fia_vton::dataset_io::write_split;
use fia_vton::flow_guider::resize_flow;
use fia_vton::synthetic_data::{
    canonical_pose, derive_agnostic_mask, generate_dataset, generate_sample, quantize, render_skeleton, swap_garment,
    MASK_DILATION_PX,
};
use fia_vton::ModelConfig;
use sha2::{Digest, Sha256};

#[test]
fn flow_at_the_wrong_resolution_is_reported() {
    let config = ModelConfig {
        codec_factor: 8,
        ..ModelConfig::desk()
    };
    let mut s = generate_sample(0, &config, 4).unwrap();
    assert!(validate_sample(&s, &config).is_empty());
    let gt = s.flow_gt.take().unwrap();
    assert_eq!((gt.height(), gt.width()), (8, 6));
    s.flow_gt = Some(resize_flow(&gt, 16, 12).unwrap());
    assert_eq!(validate_sample(&s, &config), vec!["flow_gt shape mismatch".to_string()]);
}

fn pose(shift_left_shoulder: f64) -> PoseKeypoints {
    let joints = canonical_pose()
        .into_iter()
        .map(|(name, (x, y))| Joint {
            name,
            x: (x + if name == JointName::LeftShoulder { shift_left_shoulder } else { 0.0 }) as f32,
            y: y as f32,
            visible: true,
        })
        .collect();
    PoseKeypoints::new(joints).unwrap()
}

/// Mean column of the pixels painted exactly in `color`.
fn colour_centroid_x(img: &fia_vton::data_model::ImageTensor, color: [f32; 3]) -> f64 {
    let (h, w) = (img.height(), img.width());
    let (mut sum, mut n) = (0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            if (0..3).all(|c| img.array().get(c, y, x) == color[c]) {
                sum += x as f64;
                n += 1;
            }
        }
    }
    assert!(n > 0, "colour {color:?} not found");
    sum / n as f64
}

#[test]
fn shoulder_marker_follows_the_joint() {
    // the left-shoulder disc is the only element drawn in this colour
    let color = [1.0, quantize(0.67), 0.0];
    for (h, w) in [(64, 48), (128, 96)] {
        let before = render_skeleton(&pose(0.0), (h, w)).unwrap();
        let after = render_skeleton(&pose(0.1), (h, w)).unwrap();
        let shift = colour_centroid_x(after.image(), color) - colour_centroid_x(before.image(), color);
        let expected = 0.1 * w as f64;
        assert!((shift - expected).abs() <= 1.0, "{h}x{w}: shifted {shift}, expected {expected}");
    }
}

#[test]
fn quarter_rectangle_mask_matches_the_dilated_area() {
    let rect = [(0.25, 0.25), (0.75, 0.25), (0.75, 0.75), (0.25, 0.75)];
    let (h, w) = (128, 96);
    let mask = derive_agnostic_mask(&rect, (h, w)).unwrap();
    let count = mask.data().iter().filter(|v| **v == 1.0).count();
    // pixel centres inside the rectangle, grown by the square dilation
    let d = 2 * MASK_DILATION_PX;
    assert_eq!(count, (h / 2 + d) * (w / 2 + d));
    let frac = count as f64 / (h * w) as f64;
    assert!((0.25..=0.30).contains(&frac), "area fraction {frac}");
}

#[test]
fn full_frame_polygon_gives_all_ones() {
    let full = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
    let m = derive_agnostic_mask(&full, (32, 24)).unwrap();
    assert!(m.data().iter().all(|v| *v == 1.0));
    assert!(derive_agnostic_mask(&[], (32, 24)).is_err());
}

fn file_hashes(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, hex::encode(Sha256::digest(std::fs::read(&p).unwrap())));
            }
        }
    }
    out
}

#[test]
fn fixed_seed_serializes_to_identical_files() {
    let config = ModelConfig::desk();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_split(a.path(), "train", &generate_dataset(6, &config, 21).unwrap()).unwrap();
    write_split(b.path(), "train", &generate_dataset(6, &config, 21).unwrap()).unwrap();
    let (ha, hb) = (file_hashes(a.path()), file_hashes(b.path()));
    assert_eq!(ha.len(), 6 * 6);
    assert_eq!(ha, hb);

    let c = tempfile::tempdir().unwrap();
    write_split(c.path(), "train", &generate_dataset(6, &config, 22).unwrap()).unwrap();
    assert_ne!(ha, file_hashes(c.path()));
}

#[test]
fn swapped_garments_form_valid_unpaired_samples() {
    let config = ModelConfig::desk();
    let d = generate_dataset(3, &config, 8).unwrap();
    let s = swap_garment(&d[0], &d[2]);
    assert!(s.target.is_none());
    assert_eq!(s.garment, d[0].garment);
    assert_eq!(s.person, d[2].person);
    assert_eq!(s.mask, d[2].mask);
    assert!(validate_sample(&s, &config).is_empty());
}

#[test]
fn different_seeds_draw_disjoint_samples() {
    let config = ModelConfig::desk();
    let a = generate_dataset(16, &config, 1).unwrap();
    let b = generate_dataset(16, &config, 2).unwrap();
    for s in &a {
        assert!(b.iter().all(|t| t.garment != s.garment));
    }
}
