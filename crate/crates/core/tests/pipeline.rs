//! Cross-module flows: dataset round trip, source training, checkpointing,
//! adaptation and evaluation on a tiny synthetic corpus.

use sfuda_core::adapt::{adapt_pipeline, froc_on, AdaptConfig, Steps};
use sfuda_core::data::{assign_splits, gen_synth_scan, Dataset, ManifestEntry, ScanRecord, Split, SynthDomainSpec};
use sfuda_core::detector::{read_checkpoint, train_source, write_checkpoint, DetectorConfig, SourceTrainConfig};

fn corpus(spec: &SynthDomainSpec, domain: &str, n: usize) -> Vec<(ManifestEntry, ScanRecord)> {
    assign_splits(n)
        .into_iter()
        .enumerate()
        .map(|(i, split)| {
            let mut scan = gen_synth_scan(spec, i as u64).unwrap();
            scan.id = format!("{domain}_{i:04}");
            (ManifestEntry { id: scan.id.clone(), domain: domain.into(), split }, scan)
        })
        .collect()
}

fn tiny() -> (SynthDomainSpec, SynthDomainSpec, DetectorConfig) {
    let src = SynthDomainSpec { side: 36, ..SynthDomainSpec::source_default() };
    let tgt = SynthDomainSpec { side: 36, ..SynthDomainSpec::target_default() };
    (src, tgt, DetectorConfig { patch_side: 36, ..DetectorConfig::default() })
}

#[test]
fn dataset_round_trip_preserves_scans_and_annotations() {
    let (src, tgt, _) = tiny();
    let mut entries = corpus(&src, "source", 10);
    entries.extend(corpus(&tgt, "target", 10));
    let dir = tempfile::tempdir().unwrap();
    Dataset::write(dir.path(), &entries).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    assert_eq!(ds.manifest.scans.len(), 20);
    for (domain, split, n) in [("source", Split::Train, 7), ("target", Split::Val, 1), ("target", Split::Test, 2)] {
        let loaded = ds.load(domain, split, true).unwrap();
        assert_eq!(loaded.len(), n);
        for scan in &loaded {
            let original = &entries.iter().find(|(e, _)| e.id == scan.id).unwrap().1;
            assert_eq!(scan, original);
        }
    }
    // unlabeled loading drops annotations but keeps voxels
    let bare = ds.load("target", Split::Train, false).unwrap();
    assert!(bare.iter().all(|s| s.annotations.is_empty()));
}

#[test]
fn training_and_adaptation_are_reproducible() {
    let (src, tgt, det) = tiny();
    let scans = |spec, domain, split| -> Vec<ScanRecord> {
        corpus(spec, domain, 10).into_iter().filter(|(e, _)| e.split == split).map(|(_, s)| s).collect()
    };
    let s_train = scans(&src, "source", Split::Train);
    let t_train: Vec<ScanRecord> = scans(&tgt, "target", Split::Train)
        .into_iter()
        .map(|s| ScanRecord { annotations: Vec::new(), ..s })
        .collect();
    let t_test = scans(&tgt, "target", Split::Test);

    let tc = SourceTrainConfig { epochs: 2, ..SourceTrainConfig::default() };
    let mut epochs_seen = 0;
    let (a, ha) = train_source(&s_train, &det, &tc, 5, |_, _, _| {
        epochs_seen += 1;
        Ok(())
    })
    .unwrap();
    let (b, hb) = train_source(&s_train, &det, &tc, 5, |_, _, _| Ok(())).unwrap();
    assert_eq!(epochs_seen, 2);
    assert_eq!(a, b);
    assert_eq!(ha.epoch_losses, hb.epoch_losses);
    assert!(ha.epoch_losses.iter().all(|l| l.is_finite()));

    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("source.ckpt");
    write_checkpoint(&ckpt, &a).unwrap();
    let source = read_checkpoint(&ckpt).unwrap();
    assert_eq!(source, a);

    let cfg = AdaptConfig { step1_epochs: 1, step2_epochs: 1, ..AdaptConfig::default() };
    let run = || adapt_pipeline(&source, &t_train, &cfg, &det, Steps::All, 9, None, Some(&t_test)).unwrap();
    let (p1, r1) = run();
    let (p2, r2) = run();
    assert_eq!(p1, p2);
    assert_eq!(serde_json::to_string(&r1).unwrap(), serde_json::to_string(&r2).unwrap());
    assert_eq!(r1.step2.as_ref().unwrap().pseudo_counts.len(), 1);
    // snapshots before adapting and after each step
    assert_eq!(r1.froc.len(), 3);
    assert_eq!(r1.froc[0].froc, froc_on(&source, &t_test, &det).unwrap());
    assert_eq!(r1.froc[2].froc, froc_on(&p1, &t_test, &det).unwrap());
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ckpt");
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(read_checkpoint(&path).is_err());
    assert!(read_checkpoint(&dir.path().join("missing.ckpt")).is_err());
}
