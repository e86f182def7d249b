use std::fs;

use super::*;
use crate::error::Error;

fn small(seed: u64) -> CorpusConfig {
    CorpusConfig {
        num_images: 4,
        size: 128,
        num_classes: 8,
        min_objects: 2,
        max_objects: 4,
        seed,
    }
}

fn dir_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(root.join("img"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.push(root.join("manifest.json"));
    files.push(root.join(corpus::LAYOUT_FILE));
    files.sort();
    files
        .into_iter()
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn generation_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_corpus(&small(7), a.path()).unwrap();
    generate_corpus(&small(7), b.path()).unwrap();
    assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));

    let c = tempfile::tempdir().unwrap();
    generate_corpus(&small(8), c.path()).unwrap();
    assert_ne!(dir_bytes(a.path()), dir_bytes(c.path()));
}

#[test]
fn label_counts_respect_bounds() {
    let cfg = CorpusConfig { num_images: 300, ..small(7) };
    for im in CorpusLayout::from_config(&cfg).images {
        let labels = corpus::labels_of(&im.objects);
        assert!((2..=4).contains(&labels.len()));
        let mut dedup = labels.clone();
        dedup.dedup();
        assert_eq!(dedup, labels, "classes within an image are distinct");
        for o in &im.objects {
            assert!(o.diameter >= 0.15 * 128.0 - 1e-9 && o.diameter <= 0.35 * 128.0 + 1e-9);
            let (t, l, b, r) = o.bbox();
            assert!(t >= -1e-9 && l >= -1e-9 && b <= 128.0 + 1e-9 && r <= 128.0 + 1e-9);
        }
    }
}

#[test]
fn class_frequencies_are_near_uniform() {
    let cfg = CorpusConfig { num_images: 10_000, ..small(7) };
    let mut counts = vec![0usize; cfg.num_classes];
    let mut total = 0;
    for id in 1..=cfg.num_images as u64 {
        for o in corpus::layout(&cfg, id) {
            counts[o.class] += 1;
            total += 1;
        }
    }
    let expected = total as f64 / cfg.num_classes as f64;
    for (c, &n) in counts.iter().enumerate() {
        let dev = (n as f64 - expected).abs() / expected;
        assert!(dev < 0.10, "class {c}: {n} vs {expected:.0}");
    }
}

#[test]
fn unsatisfiable_configs_are_rejected() {
    let bad = CorpusConfig { max_objects: 9, ..small(1) };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    assert!(CorpusConfig { size: 32, ..small(1) }.validate().is_err());
    assert!(CorpusConfig { num_classes: 17, max_objects: 4, ..small(1) }.validate().is_err());
    assert!(CorpusConfig { min_objects: 0, ..small(1) }.validate().is_err());
    assert!(CorpusConfig { min_objects: 5, ..small(1) }.validate().is_err());
}

#[test]
fn load_round_trip_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_corpus(&small(3), dir.path()).unwrap();
    let loaded = load_dataset(&dir.path().join("manifest.json")).unwrap();
    let (memory, _) = synthesize(&small(3)).unwrap();
    assert_eq!(loaded, memory);
    assert_eq!(loaded.len(), manifest.entries.len());
    for (s, e) in loaded.iter().zip(&manifest.entries) {
        assert_eq!(s.id, e.id);
        assert_eq!(s.labels, e.labels);
        assert_eq!(s.pixels.shape(), &[3, 128, 128]);
        assert!(s.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn label_index_out_of_range_fails_load() {
    let dir = tempfile::tempdir().unwrap();
    let mut manifest = generate_corpus(&small(3), dir.path()).unwrap();
    manifest.entries[1].labels.push(8);
    let path = dir.path().join("manifest.json");
    manifest.write(&path).unwrap();
    let err = load_dataset(&path).unwrap_err();
    assert!(matches!(err, Error::Load { .. }));
    assert!(err.to_string().contains("img/000002.ppm"), "{err}");
}

#[test]
fn truncated_image_fails_load_naming_path() {
    let dir = tempfile::tempdir().unwrap();
    generate_corpus(&small(3), dir.path()).unwrap();
    let victim = dir.path().join("img/000003.ppm");
    let bytes = fs::read(&victim).unwrap();
    fs::write(&victim, &bytes[..bytes.len() / 2]).unwrap();
    let err = load_dataset(&dir.path().join("manifest.json")).unwrap_err();
    assert!(err.to_string().contains("000003.ppm"), "{err}");
}

#[test]
fn missing_image_fails_load() {
    let dir = tempfile::tempdir().unwrap();
    generate_corpus(&small(3), dir.path()).unwrap();
    fs::remove_file(dir.path().join("img/000001.ppm")).unwrap();
    let err = load_dataset(&dir.path().join("manifest.json")).unwrap_err();
    assert!(err.to_string().contains("000001.ppm"), "{err}");
}

#[test]
fn background_is_never_constant() {
    let (samples, _) = synthesize(&CorpusConfig { num_images: 2, size: 64, ..small(5) }).unwrap();
    for s in samples {
        let d = s.pixels.data();
        let first = d[0];
        assert!(d.iter().any(|&v| (v - first).abs() > 1.0 / 255.0));
    }
}
