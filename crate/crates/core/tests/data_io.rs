use std::fs;
use std::path::{Path, PathBuf};

use mmgcd::data::{generate, load_features, load_features_with, write_features, DatasetSpec};
use mmgcd::numerics::RngSeed;
use mmgcd::Error;

fn small_spec(seed: u64) -> DatasetSpec {
    DatasetSpec {
        k_total: 4,
        k_old: 2,
        d: 3,
        n_per_class: 10,
        mean_separation: 1.0,
        r_range: (0.2, 0.8),
        labeled_fraction: 0.5,
        cov_condition: 5.0,
        seed: RngSeed(seed),
    }
}

fn paths(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (dir.join("x.csv"), dir.join("y.csv"), dir.join("labels.csv"))
}

#[test]
fn round_trip_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let (x, y, l) = paths(dir.path());
    let (ds, _) = generate(&small_spec(3)).unwrap();
    write_features(&ds, &x, &y, &l).unwrap();
    let back = load_features(&x, &y, &l).unwrap();
    assert_eq!(back, ds);
}

#[test]
fn f32_payload_survives() {
    let dir = tempfile::tempdir().unwrap();
    let (x, y, l) = paths(dir.path());
    let (mut ds, _) = generate(&small_spec(4)).unwrap();
    for s in &mut ds.samples {
        s.x.iter_mut().chain(s.y.iter_mut()).for_each(|v| *v = *v as f32 as f64);
    }
    write_features(&ds, &x, &y, &l).unwrap();
    let back = load_features(&x, &y, &l).unwrap();
    for (a, b) in ds.samples.iter().zip(&back.samples) {
        let bits = |v: &[f64]| v.iter().map(|f| (*f as f32).to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.x), bits(&b.x));
        assert_eq!(bits(&a.y), bits(&b.y));
    }
}

#[test]
fn three_row_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let (x, y, l) = paths(dir.path());
    fs::write(&x, "0.5,1.0\n-1.25,2.0\n3.0,0.0\n").unwrap();
    fs::write(&y, "1.0,1.0\n2.0,2.0\n3.0,3.0\n").unwrap();
    fs::write(&l, "index,label,is_labeled\n0,0,1\n1,1,0\n2,-1,0\n").unwrap();
    let ds = load_features(&x, &y, &l).unwrap();
    assert_eq!(ds.len(), 3);
    assert_eq!(ds.dims, (2, 2));
    assert_eq!(ds.num_old, 1);
    assert_eq!(ds.num_new, 1);
    assert_eq!(ds.samples[1].x, vec![-1.25, 2.0]);
    assert_eq!(ds.samples[2].label, None);
    assert!(ds.samples[0].is_labeled && !ds.samples[1].is_labeled);

    let explicit = load_features_with(&x, &y, &l, Some(2)).unwrap();
    assert_eq!((explicit.num_old, explicit.num_new), (2, 0));
}

#[test]
fn mismatched_row_counts_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (x, y, l) = paths(dir.path());
    fs::write(&x, "1,2\n3,4\n").unwrap();
    fs::write(&y, "1,2\n").unwrap();
    fs::write(&l, "index,label,is_labeled\n0,0,1\n1,0,0\n").unwrap();
    assert!(matches!(load_features(&x, &y, &l), Err(Error::Format { .. })));

    fs::write(&y, "1,2\n3,4\n").unwrap();
    fs::write(&l, "index,label,is_labeled\n0,0,1\n").unwrap();
    assert!(matches!(load_features(&x, &y, &l), Err(Error::Format { .. })));
}

#[test]
fn malformed_files_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (x, y, l) = paths(dir.path());
    fs::write(&x, "1,2\n3,4\n").unwrap();
    fs::write(&y, "1,2\n3,4\n").unwrap();
    for labels in [
        "idx,label,is_labeled\n0,0,1\n1,0,0\n",
        "index,label,is_labeled\n0,0,1\n1,0,2\n",
        "index,label,is_labeled\n0,-1,1\n1,0,0\n",
        "index,label,is_labeled\n1,0,1\n0,0,0\n",
        "index,label,is_labeled\n0,x,1\n1,0,0\n",
    ] {
        fs::write(&l, labels).unwrap();
        assert!(
            matches!(load_features(&x, &y, &l), Err(Error::Format { .. })),
            "accepted {labels:?}"
        );
    }
    fs::write(&l, "index,label,is_labeled\n0,0,1\n1,0,0\n").unwrap();
    fs::write(&x, "1,2\n3,nan-ish\n").unwrap();
    assert!(load_features(&x, &y, &l).is_err());
}

#[test]
fn missing_file_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let (x, y, l) = paths(dir.path());
    assert!(matches!(load_features(&x, &y, &l), Err(Error::Io { .. })));
}
