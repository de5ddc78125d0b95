use std::path::{Path, PathBuf};

use dadt::bev::{pool_object, rasterize, GridSpec};
use dadt::distill::checkpoint::{decode_checkpoint, encode_checkpoint};
use dadt::distill::eval::in_grid;
use dadt::distill::recipe::simulate_frames;
use dadt::distill::{Frame, ModelState};
use dadt::export::{context_heatmap, decode_pgm, encode_pgm, features_csv, features_csv_header};
use dadt::simlidar::ObjectClass;

fn fixture() -> (Vec<u8>, PathBuf) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/teacher.ckpt");
    (std::fs::read(&path).unwrap(), path)
}

fn teacher() -> ModelState {
    let (bytes, path) = fixture();
    decode_checkpoint(&bytes, &path).unwrap().model
}

#[test]
fn checkpoint_reencodes_byte_identically() {
    let (bytes, path) = fixture();
    let ck = decode_checkpoint(&bytes, &path).unwrap();
    assert_eq!(ck.header.mode, "vanilla");
    assert_eq!(ck.header.d, 16);
    assert_eq!(encode_checkpoint(&ck.header, &ck.model).unwrap(), bytes);
}

#[test]
fn damaged_checkpoints_are_format_errors() {
    let (bytes, _) = fixture();
    let p = Path::new("x.ckpt");
    for cut in [0, 4, 20, bytes.len() - 1] {
        let err = decode_checkpoint(&bytes[..cut], p).unwrap_err();
        assert!(err.is_io(), "{err}");
    }
    let mut nan = bytes.clone();
    let n = nan.len();
    nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
    assert!(decode_checkpoint(&nan, p).is_err());
}

#[test]
fn features_csv_matches_direct_pooling() {
    let model = teacher();
    let spec = GridSpec::default();
    let frames = simulate_frames(32, 2, 8).unwrap();
    let csv = features_csv(&model, &frames, &spec).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), features_csv_header(16));
    let mut want = Vec::new();
    for fr in &frames {
        let f = model.features(&rasterize(&fr.cloud, &spec)).unwrap();
        for b in in_grid(&fr.labels, &spec) {
            want.push((
                fr.id.clone(),
                b.class.to_string(),
                pool_object(&f, &b, &spec).unwrap(),
            ));
        }
    }
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), want.len());
    assert!(!rows.is_empty());
    for (row, (id, class, z)) in rows.iter().zip(&want) {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells.len(), 2 + 16);
        assert_eq!((cells[0], cells[1]), (id.as_str(), class.as_str()));
        let parsed: Vec<f64> = cells[2..].iter().map(|c| c.parse().unwrap()).collect();
        assert_eq!(&parsed, z);
    }
}

#[test]
fn features_csv_without_objects_is_header_only() {
    let mut frames = simulate_frames(16, 1, 2).unwrap();
    frames[0].labels.clear();
    let csv = features_csv(&teacher(), &frames, &GridSpec::default()).unwrap();
    assert_eq!(csv, format!("{}\n", features_csv_header(16)));
}

fn frame_with(class: ObjectClass) -> Frame {
    simulate_frames(64, 6, 3)
        .unwrap()
        .into_iter()
        .find(|f| {
            in_grid(&f.labels, &GridSpec::default())
                .iter()
                .any(|b| b.class == class)
        })
        .expect("a frame with the class")
}

#[test]
fn heatmap_is_hotter_inside_boxes() {
    let spec = GridSpec::default();
    let fr = frame_with(ObjectClass::Vehicle);
    let (map, n) = context_heatmap(
        &teacher(),
        &fr.cloud,
        &fr.labels,
        ObjectClass::Vehicle,
        &spec,
        0.25,
    )
    .unwrap();
    assert!(n >= 1);
    let boxes: Vec<_> = in_grid(&fr.labels, &spec)
        .into_iter()
        .filter(|b| b.class == ObjectClass::Vehicle)
        .collect();
    let (mut inside, mut outside) = (Vec::new(), Vec::new());
    for i in 0..map.h {
        for j in 0..map.w {
            let (x, y) = spec.cell_center(i, j);
            let v = map.values[i * map.w + j];
            if boxes.iter().any(|b| b.contains_bev(x, y)) {
                inside.push(v);
            } else {
                outside.push(v);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(!inside.is_empty());
    assert!(
        mean(&inside) > mean(&outside),
        "{} vs {}",
        mean(&inside),
        mean(&outside)
    );
}

#[test]
fn heatmap_pixels_ignore_positive_scale() {
    let spec = GridSpec::default();
    let fr = frame_with(ObjectClass::Vehicle);
    let t = teacher();
    let (a, _) =
        context_heatmap(&t, &fr.cloud, &fr.labels, ObjectClass::Vehicle, &spec, 0.25).unwrap();
    let (b, _) =
        context_heatmap(&t, &fr.cloud, &fr.labels, ObjectClass::Vehicle, &spec, 1.0).unwrap();
    let (pa, lo, hi) = encode_pgm(&a);
    let (pb, _, _) = encode_pgm(&b);
    assert!(hi > lo);
    let (w, h, px) = decode_pgm(&pa, Path::new("a.pgm")).unwrap();
    assert_eq!((w, h), (64, 64));
    assert_eq!(px.iter().max(), Some(&255));
    assert_eq!(px.iter().min(), Some(&0));
    let diff = pa
        .iter()
        .zip(&pb)
        .filter(|(x, y)| x.abs_diff(**y) > 1)
        .count();
    assert_eq!(diff, 0);
}

#[test]
fn heatmap_rejects_absent_class() {
    let mut fr = frame_with(ObjectClass::Vehicle);
    fr.labels.retain(|b| b.class != ObjectClass::Cyclist);
    let r = context_heatmap(
        &teacher(),
        &fr.cloud,
        &fr.labels,
        ObjectClass::Cyclist,
        &GridSpec::default(),
        1.0,
    );
    assert!(r.is_err());
}
