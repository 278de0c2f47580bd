use std::path::Path;

use vesselpatch::io;
use vesselpatch::synth::{self, DomainParams, DATASET_MANIFEST};

fn small(p: DomainParams) -> DomainParams {
    DomainParams {
        width: 96,
        height: 96,
        vessel_count: 4,
        ..p
    }
}

fn histogram(dir: &Path, ids: &[String]) -> [f64; 256] {
    let mut h = [0.0; 256];
    let mut n = 0.0;
    for id in ids {
        let img = io::read_pgm(&dir.join(format!("{id}.pgm"))).unwrap();
        for &v in &img.data {
            h[v as usize] += 1.0;
            n += 1.0;
        }
    }
    h.iter_mut().for_each(|v| *v /= n);
    h
}

#[test]
fn dataset_layout_and_domain_shift() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("data");
    let manifest = synth::gen_dataset(
        &small(DomainParams::source_default()),
        &small(DomainParams::target_default()),
        (5, 10),
        &out,
    )
    .unwrap();
    assert_eq!(
        (
            manifest.target.train.len(),
            manifest.target.val.len(),
            manifest.target.test.len()
        ),
        (6, 2, 2)
    );
    assert_eq!(
        (
            manifest.source.train.len(),
            manifest.source.val.len(),
            manifest.source.test.len()
        ),
        (3, 1, 1)
    );
    assert!(out.join(DATASET_MANIFEST).is_file());
    for id in &manifest.target.train {
        let split = out.join("target/train");
        let img = io::read_pgm(&split.join("images").join(format!("{id}.pgm"))).unwrap();
        let mask = io::read_mask(&split.join("masks").join(format!("{id}.pgm"))).unwrap();
        let logits = io::read_logit_map(&split.join("maps").join(format!("{id}.fmap"))).unwrap();
        assert_eq!((img.width, img.height), (96, 96));
        assert_eq!((mask.width(), mask.height()), (96, 96));
        assert_eq!(
            (logits.width(), logits.height(), logits.channels()),
            (96, 96, 2)
        );
        assert!(mask.count_ones() > 0, "{id} has no vessels");
    }
    assert!(!out.join("source/train/maps").exists());

    // Total variation distance between the intensity histograms.
    let hs = histogram(&out.join("source/train/images"), &manifest.source.train);
    let ht = histogram(&out.join("target/train/images"), &manifest.target.train);
    let tv: f64 = hs.iter().zip(&ht).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
    assert!(tv > 0.3, "source and target histograms too close: {tv}");
}

#[test]
fn dataset_generation_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let gen = |name: &str| {
        let dir = tmp.path().join(name);
        synth::gen_dataset(
            &small(DomainParams::source_default()),
            &small(DomainParams::target_default()),
            (5, 5),
            &dir,
        )
        .unwrap();
        dir
    };
    let (a, b) = (gen("a"), gen("b"));
    for rel in [
        "dataset.json",
        "target/train/images/target_000.pgm",
        "target/train/masks/target_001.pgm",
        "target/train/maps/target_000.fmap",
        "source/test/images/source_004.pgm",
    ] {
        assert_eq!(
            std::fs::read(a.join(rel)).unwrap(),
            std::fs::read(b.join(rel)).unwrap(),
            "{rel}"
        );
    }
}

#[test]
fn image_streams_are_independent_of_count() {
    // Image i depends only on the domain seed and i, not on how many images
    // are generated.
    let p = small(DomainParams::target_default());
    let (img3, mask3) = synth::gen_vessel_image(&synth::image_params(&p, 3)).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    synth::gen_dataset(
        &small(DomainParams::source_default()),
        &p,
        (5, 10),
        tmp.path(),
    )
    .unwrap();
    let split = tmp.path().join("target/train");
    assert_eq!(
        io::read_pgm(&split.join("images/target_003.pgm")).unwrap(),
        img3
    );
    assert_eq!(
        io::read_mask(&split.join("masks/target_003.pgm")).unwrap(),
        mask3
    );
}
