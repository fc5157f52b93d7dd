use std::io::Write;

use stratgeo::tensorio::{load_bundle, save_bundle, BundleError, TensorBundle};

fn sample() -> TensorBundle {
    let mut b = TensorBundle::new();
    let resid: Vec<f32> = (0..2 * 3 * 4).map(|i| i as f32 * 0.5 - 3.0).collect();
    b.insert_f32("resid", &[2, 3, 4], &resid).unwrap();
    b.insert_u8("mask", &[2, 3], &[1, 1, 0, 1, 0, 1]).unwrap();
    b.insert_i64("ids", &[3], &[-1, 0, i64::MAX]).unwrap();
    b.set_metadata("model", "toy");
    b
}

#[test]
fn file_round_trip_preserves_everything() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.bundle");
    let b = sample();
    save_bundle(&b, &path).unwrap();
    let back = load_bundle(&path).unwrap();
    assert_eq!(back.to_bytes().unwrap(), b.to_bytes().unwrap());
    assert_eq!(back.metadata().get("model").map(String::as_str), Some("toy"));
    assert_eq!(back.i64_array("ids").unwrap().1, vec![-1, 0, i64::MAX]);

    let x = back.activation_tensor("resid", "mask").unwrap();
    assert_eq!(x.shape(), [2, 3, 4]);
    assert_eq!(x.n_masked(), 4);
    assert_eq!(x.masked_rows()[(0, 0)], -3.0);
}

#[test]
fn truncated_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let bytes = sample().to_bytes().unwrap();
    for cut in [4, 15, 40, bytes.len() - 1] {
        let path = dir.path().join(format!("cut{cut}.bundle"));
        std::fs::File::create(&path).unwrap().write_all(&bytes[..cut]).unwrap();
        assert!(load_bundle(&path).is_err(), "cut at {cut}");
    }
}

#[test]
fn foreign_file_is_not_a_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.npy");
    std::fs::write(&path, b"\x93NUMPY\x01\x00 plus some bytes").unwrap();
    assert!(matches!(load_bundle(&path), Err(BundleError::MagicMismatch)));
    assert!(matches!(load_bundle(dir.path().join("absent")), Err(BundleError::Io(_))));
}
