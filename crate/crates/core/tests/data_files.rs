use std::path::PathBuf;

use biper::data::{load_idx, load_mnist};

fn mnist_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist10k")
}

#[test]
fn mnist_subset_headers() {
    let images = load_idx(&mnist_dir().join("images-idx3-ubyte.gz")).unwrap();
    assert_eq!(images.magic(), 0x0000_0803);
    assert_eq!(images.dims, vec![10_000, 28, 28]);
    let labels = load_idx(&mnist_dir().join("labels-idx1-ubyte.gz")).unwrap();
    assert_eq!(labels.magic(), 0x0000_0801);
    assert_eq!(labels.dims, vec![10_000]);
}

#[test]
fn mnist_subset_loads_with_known_class_counts() {
    let d = load_mnist(
        &mnist_dir().join("images-idx3-ubyte.gz"),
        &mnist_dir().join("labels-idx1-ubyte.gz"),
    )
    .unwrap();
    assert_eq!(d.len(), 10_000);
    assert_eq!(d.sample_shape(), &[1, 28, 28]);
    assert_eq!(d.classes, 10);
    let mut counts = [0usize; 10];
    for &l in &d.labels {
        counts[l] += 1;
    }
    assert_eq!(counts, [1001, 1127, 991, 1032, 980, 863, 1014, 1070, 944, 978]);
    let px = d.images.data();
    assert!(px.iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert!(px.iter().any(|&v| v == 1.0));
}
