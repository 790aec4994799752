use std::fs;
use std::path::PathBuf;

use nnchip::idx::{image_header, load_images, load_labels, load_mnist, IdxError, IMAGE_MAGIC};

fn mnist(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist").join(name)
}

fn be(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

#[test]
fn train_header_matches_raw_bytes() {
    let path = mnist("train-images-idx3-ubyte");
    let raw = fs::read(&path).unwrap();
    assert_eq!(be(&raw, 0), 2051);
    assert_eq!(image_header(&path).unwrap(), (be(&raw, 4) as usize, be(&raw, 8) as usize, be(&raw, 12) as usize));
    assert_eq!(image_header(&path).unwrap(), (60_000, 28, 28));
}

#[test]
fn first_test_label_is_seven() {
    let labels = load_labels(&mnist("t10k-labels-idx1-ubyte")).unwrap();
    assert_eq!(labels.len(), 10_000);
    assert_eq!(labels[0], 7);
    assert_eq!(labels[0], fs::read(mnist("t10k-labels-idx1-ubyte")).unwrap()[8] as usize);
}

#[test]
fn pixels_are_scaled_bytes() {
    let path = mnist("t10k-images-idx3-ubyte");
    let raw = fs::read(&path).unwrap();
    let x = load_images(&path).unwrap();
    assert_eq!(x.shape(), &[10_000, 784]);
    for i in [0, 200, 783, 784 * 9_999 + 400] {
        assert_eq!(x.data()[i], raw[16 + i] as f64 / 255.0);
    }
    assert!(x.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn images_passed_as_labels_is_bad_magic() {
    match load_labels(&mnist("t10k-images-idx3-ubyte")) {
        Err(IdxError::Magic { found, .. }) => assert_eq!(found, IMAGE_MAGIC),
        other => panic!("expected a magic error, got {other:?}"),
    }
}

#[test]
fn truncated_and_mismatched_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let raw = fs::read(mnist("t10k-images-idx3-ubyte")).unwrap();
    let short = dir.path().join("short");
    fs::write(&short, &raw[..16 + 784 * 3 + 10]).unwrap();
    assert!(matches!(load_images(&short), Err(IdxError::Truncated { .. })));

    // Two images against ten thousand labels.
    let mut two = raw[..16 + 784 * 2].to_vec();
    two[4..8].copy_from_slice(&2u32.to_be_bytes());
    let imgs = dir.path().join("two");
    fs::write(&imgs, two).unwrap();
    let err = load_mnist(&imgs, &mnist("t10k-labels-idx1-ubyte")).unwrap_err();
    assert!(matches!(err, IdxError::Count { images: 2, labels: 10_000 }));
}
