use oodbench::detectors::{fit_mahalanobis, Detector, Method};
use oodbench::experiments::{prepare_features, FeaturePair, MethodConfig, RegimeSpec};
use oodbench::io::{
    ingest_as_model, read_feature_file, write_feature_file, FeatureCatalog, FeatureMeta, FeatureSet, Preprocessing,
    Role, FLAG_LABELS, FLAG_LOGITS, MAGIC, VERSION,
};
use oodbench::metrics::{auroc, ScoredPopulations};
use oodbench::numkit::Prng;
use oodbench::Error;

fn meta(dataset: &str, role: Role) -> FeatureMeta {
    FeatureMeta {
        dataset: dataset.into(),
        role,
        preprocessing: Preprocessing::None,
    }
}

fn with_logits(mut fs: FeatureSet, logits: Vec<f32>, c: usize) -> FeatureSet {
    fs.c = Some(c);
    fs.logits = Some(logits);
    fs
}

#[test]
fn minimal_fixture_scores_four_points() {
    let pts = vec![vec![0.0, 0.1], vec![0.2, -0.1], vec![3.0, 3.1], vec![2.9, 3.2]];
    let logits = vec![2.0, -1.0, 1.5, -0.5, -1.0, 2.5, -0.8, 1.9];
    let train = with_logits(
        FeatureSet::from_points(meta("mini", Role::IdTrain), &pts, Some((&[0, 0, 1, 1], 2))).unwrap(),
        logits.clone(),
        2,
    );
    let test = with_logits(FeatureSet::from_points(meta("mini", Role::IdTest), &pts, None).unwrap(), logits, 2);
    let ing = ingest_as_model::<f64>(&train, &[&test]).unwrap();
    let maha = Detector::Mahalanobis(fit_mahalanobis(&ing.model, &ing.train, 0.0).unwrap());
    for det in [Detector::Msp, maha] {
        let r = det.score_all(&ing.model, &ing.tests[0]).unwrap();
        assert_eq!(r.scores.len(), 4);
        assert!(r.scores.iter().all(|s| s.is_finite()));
    }
}

#[test]
fn separable_gaussian_features_give_high_mahalanobis_auroc() {
    let mut p = Prng::new(17);
    let mut draw = |centre: f64, n: usize| -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..8).map(|_| centre + p.gaussian(0.0, 1.0)).collect()).collect()
    };
    let (a, b) = (draw(-6.0, 60), draw(6.0, 60));
    let train_pts: Vec<Vec<f64>> = a[..40].iter().chain(&b[..40]).cloned().collect();
    let labels: Vec<usize> = (0..80).map(|i| i / 40).collect();
    let id_pts: Vec<Vec<f64>> = a[40..].iter().chain(&b[40..]).cloned().collect();
    let ood_pts = draw(30.0, 40);
    let train = FeatureSet::from_points(meta("gauss", Role::IdTrain), &train_pts, Some((&labels, 2))).unwrap();
    let id = FeatureSet::from_points(meta("gauss", Role::IdTest), &id_pts, None).unwrap();
    let ood = FeatureSet::from_points(meta("far", Role::OodTest), &ood_pts, None).unwrap();
    let ing = ingest_as_model::<f64>(&train, &[&id, &ood]).unwrap();
    let det = Detector::Mahalanobis(fit_mahalanobis(&ing.model, &ing.train, 0.0).unwrap());
    let s_id = det.score_all(&ing.model, &ing.tests[0]).unwrap().scores;
    let s_ood = det.score_all(&ing.model, &ing.tests[1]).unwrap().scores;
    assert!(auroc(&ScoredPopulations::new(s_id, s_ood).unwrap()) > 0.99);

    // without logits a linear classifier is fitted on the embeddings
    let prepared = prepare_features(&train, &id, &ood, &RegimeSpec::FULL).unwrap();
    assert!(prepared.model.supports_input_gradient());
}

#[test]
fn missing_variant_is_reported() {
    let pts = vec![vec![0.0], vec![1.0]];
    let logits = vec![1.0, 0.0, 0.0, 1.0];
    let train = with_logits(
        FeatureSet::from_points(meta("d", Role::IdTrain), &pts, Some((&[0, 1], 2))).unwrap(),
        logits.clone(),
        2,
    );
    let id = with_logits(FeatureSet::from_points(meta("d", Role::IdTest), &pts, None).unwrap(), logits.clone(), 2);
    let ood = with_logits(FeatureSet::from_points(meta("o", Role::OodTest), &pts, None).unwrap(), logits, 2);
    let catalog = FeatureCatalog::new(vec![train, id, ood]);
    assert!(matches!(
        catalog.variant("d", Role::IdTest, Method::Odin, 1000.0, 0.0014),
        Err(Error::MissingPreprocessedVariant { .. })
    ));
    // ε = 0 resolves to the untagged set
    assert!(catalog.variant("d", Role::IdTest, Method::Odin, 1000.0, 0.0).is_ok());
    let pair = FeaturePair {
        catalog: &catalog,
        id: "d",
        ood: "o",
    };
    let cfg = MethodConfig {
        epsilon: 0.0014,
        ..MethodConfig::fixed(Method::Odin)
    };
    assert!(matches!(pair.run_cell(&cfg, &RegimeSpec::FULL, 0), Err(Error::MissingPreprocessedVariant { .. })));
}

#[test]
fn test_sets_must_match_training_dimensions() {
    let train = FeatureSet::from_points(meta("d", Role::IdTrain), &[vec![0.0, 1.0]], Some((&[0], 1))).unwrap();
    let test = FeatureSet::from_points(meta("d", Role::IdTest), &[vec![0.0, 1.0, 2.0]], None).unwrap();
    assert!(matches!(ingest_as_model::<f64>(&train, &[&test]), Err(Error::DimensionMismatch { .. })));
    let unlabeled = FeatureSet {
        labels: None,
        ..train.clone()
    };
    assert!(ingest_as_model::<f64>(&unlabeled, &[]).is_err());
}

#[test]
fn byte_layout_is_pinned() {
    let fs = with_logits(
        FeatureSet::from_points(meta("x", Role::IdTrain), &[vec![1.5f64, -2.0]], Some((&[1], 2))).unwrap(),
        vec![0.25, 4.0],
        2,
    );
    let bytes = fs.to_bytes().unwrap();
    assert_eq!(&bytes[..4], MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + hlen]).unwrap();
    assert_eq!(header["n"], 1);
    assert_eq!(header["e"], 2);
    assert_eq!(header["c"], 2);
    assert_eq!(header["flags"], FLAG_LOGITS | FLAG_LABELS);
    assert_eq!(header["meta"]["role"], "id_train");
    assert_eq!(header["meta"]["preprocessing"], "none");
    let body = &bytes[12 + hlen..bytes.len() - 8];
    let words: Vec<[u8; 4]> = body.chunks_exact(4).map(|c| c.try_into().unwrap()).collect();
    assert_eq!(
        words,
        vec![1.5f32.to_le_bytes(), (-2.0f32).to_le_bytes(), 0.25f32.to_le_bytes(), 4.0f32.to_le_bytes(), 1u32.to_le_bytes()]
    );
    let crc = crc::Crc::<u64>::new(&crc::CRC_64_XZ).checksum(&bytes[..bytes.len() - 8]);
    assert_eq!(u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap()), crc);
}

#[test]
fn tagged_variant_header_and_file_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut fs = FeatureSet::from_points(meta("x", Role::OodTest), &[vec![0.5f64]], None).unwrap();
    fs.meta.preprocessing = Preprocessing::for_request(Method::Odin, 1000.0, 0.0014);
    let path = dir.path().join("v.oodf");
    write_feature_file(&fs, &path).unwrap();
    assert_eq!(read_feature_file(&path).unwrap(), fs);
    let bytes = fs.to_bytes().unwrap();
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + hlen]).unwrap();
    assert_eq!(header["meta"]["preprocessing"]["method"], "odin");
    assert_eq!(header["meta"]["preprocessing"]["T"], 1000.0);
    assert_eq!(header["meta"]["preprocessing"]["epsilon"], 0.0014);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(FeatureSet::from_bytes(&bad), Err(Error::BadMagic)));
    let mut bad = bytes.clone();
    bad[4] = 2;
    assert!(matches!(FeatureSet::from_bytes(&bad), Err(Error::VersionMismatch { found: 2, .. })));
    assert!(matches!(read_feature_file(&dir.path().join("absent.oodf")), Err(Error::Io { .. })));
    let empty = FeatureSet::from_points::<f64>(meta("x", Role::IdTest), &[], None);
    assert!(matches!(empty, Err(Error::InconsistentHeader(_))));
}
