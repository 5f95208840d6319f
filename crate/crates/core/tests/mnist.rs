use std::path::{Path, PathBuf};

use epk_core::data::{load_mnist, parse_idx_labels};

fn fixture() -> (PathBuf, PathBuf) {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data");
    (dir.join("digits-images.idx"), dir.join("digits-labels.idx"))
}

#[test]
fn fixture_subset_is_balanced_and_scaled() {
    let (images, labels) = fixture();
    let d = load_mnist(&images, &labels, 50, Some(14)).unwrap();
    assert_eq!(d.len(), 500);
    assert_eq!(d.dim(), 196);
    assert_eq!(d.classes(), 10);
    for c in 0..10 {
        assert_eq!(d.labels().iter().filter(|&&l| l == c).count(), 50);
    }
    assert!(d.inputs().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(d.inputs().iter().any(|v| *v > 0.5));
    let full = load_mnist(&images, &labels, 10, None).unwrap();
    assert_eq!(full.dim(), 784);
    assert_eq!(full.len(), 100);
    assert!(load_mnist(&images, &labels, 71, Some(14)).is_err());
}

/// Runs against the published training labels when `EPK_MNIST_DIR` points
/// at a directory holding `train-labels-idx1-ubyte`.
#[test]
fn canonical_training_labels_start_with_five() {
    let Some(dir) = std::env::var_os("EPK_MNIST_DIR") else {
        eprintln!("EPK_MNIST_DIR not set; skipping");
        return;
    };
    let path = Path::new(&dir).join("train-labels-idx1-ubyte");
    let Ok(bytes) = std::fs::read(&path) else {
        eprintln!("{} not found; skipping", path.display());
        return;
    };
    let labels = parse_idx_labels(&bytes).unwrap();
    assert_eq!(labels[0], 5);
}

#[test]
fn held_out_slice_is_disjoint() {
    let (images, labels) = fixture();
    let all = load_mnist(&images, &labels, 70, Some(14)).unwrap();
    let rest = epk_core::data::load_mnist_slice(&images, &labels, 50, 20, Some(14)).unwrap();
    assert_eq!(rest.len(), 200);
    let tail = all.subset(&(500..700).collect::<Vec<_>>()).unwrap();
    assert_eq!(rest.fingerprint(), tail.fingerprint());
}
