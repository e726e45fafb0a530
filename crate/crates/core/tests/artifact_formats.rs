//! On-disk artifacts: region feature files, dataset manifests, and
//! checkpoints, plus the synthetic corpus generator that feeds them.
//!
//! Binary formats are checked for byte-identical round trips and for
//! precise failure reporting when files are truncated or corrupted.
//! The generator is checked for determinism and, with the noise turned
//! off, against a concept-overlap oracle that recovers every pairing.

use std::collections::BTreeSet;
use std::fs;
use std::fs::OpenOptions;
use std::io::{Seek, SeekFrom, Write};

use ndarray::{arr1, arr2, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use tempfile::TempDir;
use xmatch_core::checkpoint::{Checkpoint, RngState, TensorEntry};
use xmatch_core::data::{
    generate_synthetic, load_features, nearest_concept, token_features, write_features,
    concept_table, DatasetManifest, FeatureReader, RegionSet, SentenceSet, SyntheticSpec,
    END_TOKEN, FIRST_CONTENT_TOKEN, START_TOKEN,
};
use xmatch_core::Error;

fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

fn random_sets(n: usize, k: usize, d_raw: usize, rng: &mut ChaCha12Rng) -> Vec<RegionSet> {
    (0..n)
        .map(|i| {
            let m = Array2::from_shape_fn((k, d_raw), |_| rng.gen_range(-1.0f32..1.0));
            RegionSet::new(format!("i{i:05}"), m).unwrap()
        })
        .collect()
}

fn spec(num_pairs: usize, noise: f64, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        num_pairs,
        k: 4,
        l: 5,
        d: 16,
        latent_concept_count: 12,
        noise_scale: noise,
        seed,
    }
}

#[test]
fn feature_files_echo_their_header_and_shapes() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("regions.xmrf");
    let mut r = rng(71);
    let sets = random_sets(5, 7, 33, &mut r);
    write_features(&path, &sets).unwrap();

    let reader = FeatureReader::open(&path).unwrap();
    assert_eq!(reader.len(), 5);
    assert_eq!(reader.k(), 7);
    assert_eq!(reader.d_raw(), 33);

    let loaded = load_features(&path).unwrap();
    assert_eq!(loaded.len(), 5);
    for (i, set) in loaded.iter().enumerate() {
        assert_eq!(set.image_id(), i.to_string());
        assert_eq!(set.features(), sets[i].features());
    }
}

#[test]
fn feature_round_trips_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let mut r = rng(72);
    for (n, k, d_raw) in [(1, 1, 1), (3, 4, 9), (2, 11, 5)] {
        let first = dir.path().join(format!("a-{n}-{k}-{d_raw}.xmrf"));
        let second = dir.path().join(format!("b-{n}-{k}-{d_raw}.xmrf"));
        let sets = random_sets(n, k, d_raw, &mut r);
        write_features(&first, &sets).unwrap();
        let loaded = load_features(&first).unwrap();
        write_features(&second, &loaded).unwrap();
        assert_eq!(
            fs::read(&first).unwrap(),
            fs::read(&second).unwrap(),
            "shape ({n}, {k}, {d_raw})"
        );
    }
}

#[test]
fn truncated_feature_files_name_the_broken_record() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("cut.xmrf");
    let mut r = rng(73);
    write_features(&path, &random_sets(3, 2, 3, &mut r)).unwrap();
    // Header is 20 bytes, each record 24; keep record 0 and half of 1.
    let file = OpenOptions::new().write(true).open(&path).unwrap();
    file.set_len(20 + 24 + 12).unwrap();
    drop(file);

    let err = load_features(&path).unwrap_err();
    assert!(matches!(err, Error::Format(_)));
    assert!(
        err.to_string().contains("truncated in record 1"),
        "unexpected message: {err}"
    );
}

#[test]
fn corrupted_headers_are_format_errors() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("bad.xmrf");
    let mut r = rng(74);
    write_features(&path, &random_sets(2, 2, 2, &mut r)).unwrap();

    let mut bytes = fs::read(&path).unwrap();
    bytes[0] = b'Y';
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(
        FeatureReader::open(&path),
        Err(Error::Format(_))
    ));

    let mut bytes = fs::read(&path).unwrap();
    bytes[0] = b'X';
    bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(
        FeatureReader::open(&path),
        Err(Error::Format(_))
    ));
}

#[test]
fn non_finite_payloads_name_the_record_they_sit_in() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("nan.xmrf");
    let mut r = rng(75);
    write_features(&path, &random_sets(3, 2, 3, &mut r)).unwrap();

    let mut file = OpenOptions::new().write(true).open(&path).unwrap();
    // Second value of record 1: header 20, record 0 spans 24, skip one f32.
    file.seek(SeekFrom::Start(20 + 24 + 4)).unwrap();
    file.write_all(&f32::NAN.to_le_bytes()).unwrap();
    drop(file);

    let err = load_features(&path).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
    assert!(
        err.to_string().contains("record 1") && err.to_string().contains("offset 1"),
        "unexpected message: {err}"
    );
}

#[test]
fn writing_needs_consistent_non_empty_input() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("none.xmrf");
    assert!(matches!(
        write_features(&path, &[]),
        Err(Error::Config(_))
    ));

    let mut r = rng(76);
    let mut sets = random_sets(2, 2, 3, &mut r);
    sets.push(RegionSet::new("odd", Array2::from_elem((2, 4), 1.0f32)).unwrap());
    assert!(matches!(
        write_features(&path, &sets),
        Err(Error::Config(_))
    ));
}

#[test]
fn manifests_round_trip_through_text_and_disk() {
    let pairs = vec![
        ("img-a".to_string(), "cap-a1".to_string()),
        ("img-a".to_string(), "cap-a2".to_string()),
        ("img-b".to_string(), "cap-b1".to_string()),
        ("img-b".to_string(), "cap-b2".to_string()),
    ];
    let manifest = DatasetManifest::new("dev", 2, pairs).unwrap();
    let back = DatasetManifest::from_text(&manifest.to_text()).unwrap();
    assert_eq!(back, manifest);

    let dir = TempDir::new().unwrap();
    let path = dir.path().join("split.manifest");
    manifest.write(&path).unwrap();
    assert_eq!(DatasetManifest::read(&path).unwrap(), manifest);

    assert_eq!(manifest.split(), "dev");
    assert_eq!(manifest.captions_per_image(), 2);
    assert_eq!(manifest.images(), ["img-a".to_string(), "img-b".to_string()]);
    assert_eq!(manifest.image_of("cap-b2"), Some("img-b"));
    assert_eq!(manifest.image_of("cap-zz"), None);
    assert_eq!(manifest.captions_of("img-a"), ["cap-a1", "cap-a2"]);
    for caption in manifest.captions() {
        assert!(manifest.image_of(caption).is_some());
    }
}

#[test]
fn manifest_construction_rejects_inconsistent_pairings() {
    let dup = vec![
        ("img-a".to_string(), "cap-1".to_string()),
        ("img-b".to_string(), "cap-1".to_string()),
    ];
    let err = DatasetManifest::new("dev", 1, dup).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
    assert!(err.to_string().contains("cap-1"));

    let uneven = vec![
        ("img-a".to_string(), "cap-1".to_string()),
        ("img-a".to_string(), "cap-2".to_string()),
        ("img-b".to_string(), "cap-3".to_string()),
    ];
    assert!(matches!(
        DatasetManifest::new("dev", 2, uneven),
        Err(Error::Data(_))
    ));

    assert!(matches!(
        DatasetManifest::new("bad split", 0, vec![("i".into(), "c".into())]),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        DatasetManifest::new("", 1, vec![("i".into(), "c".into())]),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        DatasetManifest::new("dev", 1, vec![]),
        Err(Error::Config(_))
    ));
}

#[test]
fn malformed_manifest_text_is_a_format_error() {
    for text in [
        "split=dev\ncaptions_per_image=not-a-number\nimg\tcap\n",
        "split=dev\nimg\tcap\n",
        "captions_per_image=1\nimg\tcap\n",
        "split=dev\ncaptions_per_image=1\nimg cap\n",
        "split=dev\ncaptions_per_image=1\nflavor=salty\nimg\tcap\n",
        "just one line",
    ] {
        assert!(
            matches!(DatasetManifest::from_text(text), Err(Error::Format(_))),
            "accepted: {text:?}"
        );
    }
}

#[test]
fn generation_is_deterministic_in_the_seed() {
    let s = spec(12, 0.3, 901);
    let (r1, c1, m1) = generate_synthetic(&s).unwrap();
    let (r2, c2, m2) = generate_synthetic(&s).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(c1, c2);
    assert_eq!(m1, m2);

    let (r3, _, _) = generate_synthetic(&spec(12, 0.3, 902)).unwrap();
    assert_ne!(r1, r3);
}

#[test]
fn generated_shapes_and_ids_follow_the_request() {
    let s = SyntheticSpec {
        num_pairs: 64,
        k: 8,
        l: 6,
        d: 24,
        latent_concept_count: 20,
        noise_scale: 0.1,
        seed: 77,
    };
    let (regions, sentences, manifest) = generate_synthetic(&s).unwrap();
    assert_eq!(regions.len(), 64);
    assert_eq!(sentences.len(), 64);
    assert_eq!(manifest.pairs().len(), 64);
    assert_eq!(manifest.captions_per_image(), 1);
    for (idx, (r, c)) in regions.iter().zip(&sentences).enumerate() {
        assert_eq!(r.k(), 8);
        assert_eq!(r.d_raw(), 24);
        assert_eq!(r.image_id(), format!("i{idx:05}"));
        assert_eq!(c.caption_id(), format!("c{idx:05}"));
        assert_eq!(c.image_id(), r.image_id());
        assert_eq!(c.len(), 8);
        assert_eq!(c.content_len(), 6);
        assert_eq!(c.token_ids()[0], START_TOKEN);
        assert_eq!(*c.token_ids().last().unwrap(), END_TOKEN);
        assert_eq!(manifest.image_of(c.caption_id()), Some(r.image_id()));
    }
}

#[test]
fn noiseless_pairs_are_recovered_by_concept_overlap() {
    let s = spec(24, 0.0, 78);
    let table = concept_table(&s).unwrap();
    let (regions, sentences, _) = generate_synthetic(&s).unwrap();

    let region_concepts: Vec<BTreeSet<usize>> = regions
        .iter()
        .map(|r| {
            let f = r.features_f64();
            (0..f.nrows())
                .map(|i| nearest_concept(&f.row(i).to_owned(), &table))
                .collect()
        })
        .collect();
    let caption_concepts: Vec<BTreeSet<usize>> = sentences
        .iter()
        .map(|c| {
            c.token_ids()
                .iter()
                .filter(|id| **id >= FIRST_CONTENT_TOKEN)
                .map(|id| (*id - FIRST_CONTENT_TOKEN) as usize)
                .collect()
        })
        .collect();

    let overlap = |p: usize, q: usize| region_concepts[p].intersection(&caption_concepts[q]).count();
    for p in 0..24 {
        for q in 0..24 {
            if q != p {
                assert!(
                    overlap(p, p) > overlap(p, q),
                    "image {p} does not prefer its own caption over {q}"
                );
                assert!(
                    overlap(q, q) > overlap(p, q),
                    "caption {q} does not prefer its own image over {p}"
                );
            }
        }
        assert_eq!(overlap(p, p), s.concepts_per_pair());
    }
}

#[test]
fn spec_validation_rejects_impossible_requests() {
    assert!(matches!(
        spec(0, 0.1, 1).validate(),
        Err(Error::Config(_))
    ));

    let mut zero_d = spec(4, 0.1, 1);
    zero_d.d = 0;
    assert!(matches!(zero_d.validate(), Err(Error::Config(_))));

    let mut no_concepts = spec(4, 0.1, 1);
    no_concepts.latent_concept_count = 0;
    assert!(matches!(no_concepts.validate(), Err(Error::Config(_))));

    let mut scarce = spec(4, 0.1, 1);
    scarce.latent_concept_count = 3; // below min(k, l) = 4
    assert!(matches!(scarce.validate(), Err(Error::Config(_))));

    let mut negative = spec(4, -0.1, 1);
    assert!(matches!(negative.validate(), Err(Error::Config(_))));
    negative.noise_scale = f64::NAN;
    assert!(matches!(negative.validate(), Err(Error::Config(_))));

    // More distinct concept sets demanded than exist: 4 pairs need 4
    // distinct singleton sets but only 1 concept is available.
    let cramped = SyntheticSpec {
        num_pairs: 4,
        k: 1,
        l: 1,
        d: 4,
        latent_concept_count: 1,
        noise_scale: 0.0,
        seed: 5,
    };
    assert!(matches!(
        generate_synthetic(&cramped),
        Err(Error::Config(_))
    ));
}

#[test]
fn concept_tables_are_unit_rows_keyed_by_seed() {
    let s = spec(4, 0.2, 301);
    let table = concept_table(&s).unwrap();
    assert_eq!(table.dim(), (14, 16));
    for (t, row) in table.outer_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        assert!((norm - 1.0).abs() <= 1e-12, "row {t}: norm {norm}");
    }
    assert_eq!(concept_table(&s).unwrap(), table);

    let other = concept_table(&spec(4, 0.2, 302)).unwrap();
    assert_ne!(other, table);

    // The table ignores fields that do not shape it.
    let more_pairs = concept_table(&spec(9, 0.7, 301)).unwrap();
    assert_eq!(more_pairs, table);
}

#[test]
fn token_features_copy_table_rows_in_sentence_order() {
    let s = spec(4, 0.0, 55);
    let table = concept_table(&s).unwrap();
    let ids = vec![START_TOKEN, 5, 3, 9, END_TOKEN];
    let sent = SentenceSet::new("c00000", "i00000", ids.clone(), s.vocab_size(), None).unwrap();
    let feats = token_features(&sent, &table).unwrap();
    assert_eq!(feats.dim(), (5, 16));
    for (j, id) in ids.iter().enumerate() {
        assert_eq!(feats.row(j), table.row(*id as usize));
    }

    let alien = SentenceSet::new("c00001", "i00001", vec![0, 200, 1], 300, None).unwrap();
    assert!(matches!(
        token_features(&alien, &table),
        Err(Error::Data(_))
    ));
}

#[test]
fn container_constructors_reject_malformed_input() {
    assert!(matches!(
        RegionSet::new("i0", Array2::<f32>::zeros((0, 3))),
        Err(Error::Data(_))
    ));
    let mut nan = Array2::<f32>::from_elem((2, 2), 1.0);
    nan[[1, 0]] = f32::NAN;
    let err = RegionSet::new("i1", nan).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
    assert!(err.to_string().contains("region 1"));
    let mut hollow = Array2::<f32>::from_elem((2, 2), 1.0);
    hollow.row_mut(0).fill(0.0);
    assert!(matches!(
        RegionSet::new("i2", hollow),
        Err(Error::Data(_))
    ));

    assert!(matches!(
        SentenceSet::new("c0", "i0", vec![START_TOKEN, END_TOKEN], 10, None),
        Err(Error::Data(_))
    ));
    assert!(matches!(
        SentenceSet::new("c1", "i0", vec![5, 4, END_TOKEN], 10, None),
        Err(Error::Data(_))
    ));
    assert!(matches!(
        SentenceSet::new("c2", "i0", vec![START_TOKEN, 4, 5], 10, None),
        Err(Error::Data(_))
    ));
    assert!(matches!(
        SentenceSet::new("c3", "i0", vec![START_TOKEN, 12, END_TOKEN], 10, None),
        Err(Error::Data(_))
    ));
    assert!(matches!(
        SentenceSet::new(
            "c4",
            "i0",
            vec![START_TOKEN, 4, END_TOKEN],
            10,
            Some(vec!["content".into()]),
        ),
        Err(Error::Data(_))
    ));
}

#[test]
fn checkpoints_round_trip_exactly() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("model.ck");
    let again = dir.path().join("model2.ck");

    let mut ck = Checkpoint::new();
    ck.set_meta("mode", "rcar");
    ck.set_meta("epoch", "17");
    ck.rng = Some(RngState {
        seed: 42,
        stream: 3,
        word_pos: 123_456_789_012_345,
    });
    ck.push_matrix("w_a", &arr2(&[[1.5, -2.25], [0.0, 4.125]]));
    ck.push_vector("w_s", &arr1(&[0.5, -0.5, 9.0]));
    ck.push_tensor("cube", vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]);

    ck.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ck);
    assert_eq!(
        loaded.meta,
        vec![
            ("mode".to_string(), "rcar".to_string()),
            ("epoch".to_string(), "17".to_string()),
        ]
    );
    assert_eq!(loaded.get_meta("epoch"), Some("17"));
    assert_eq!(
        loaded.tensors.iter().map(|t| t.name.as_str()).collect::<Vec<_>>(),
        ["w_a", "w_s", "cube"]
    );
    assert_eq!(loaded.matrix("w_a").unwrap(), arr2(&[[1.5, -2.25], [0.0, 4.125]]));
    assert_eq!(loaded.vector("w_s").unwrap(), arr1(&[0.5, -0.5, 9.0]));

    loaded.save(&again).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn repeated_meta_keys_keep_the_last_value() {
    let mut ck = Checkpoint::new();
    ck.set_meta("epoch", "1");
    ck.set_meta("epoch", "2");
    assert_eq!(ck.get_meta("epoch"), Some("2"));
    assert_eq!(ck.meta.len(), 1);
}

#[test]
fn checkpoint_corruption_is_a_format_error() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("model.ck");
    let mut ck = Checkpoint::new();
    ck.set_meta("mode", "rcr");
    ck.push_vector("w", &arr1(&[1.0, 2.0]));
    ck.save(&path).unwrap();

    let original = fs::read(&path).unwrap();

    let mut bad = original.clone();
    bad[0] = b'Z';
    fs::write(&path, &bad).unwrap();
    let err = Checkpoint::load(&path).unwrap_err();
    assert!(matches!(err, Error::Format(_)));
    assert!(err.to_string().contains("not a checkpoint"));

    let mut cut = original.clone();
    cut.truncate(original.len() - 3);
    fs::write(&path, &cut).unwrap();
    let err = Checkpoint::load(&path).unwrap_err();
    assert!(matches!(err, Error::Format(_)), "got: {err}");

    let mut versioned = original;
    versioned[4..8].copy_from_slice(&9u32.to_le_bytes());
    fs::write(&path, &versioned).unwrap();
    let err = Checkpoint::load(&path).unwrap_err();
    assert!(matches!(err, Error::Format(_)));
    assert!(err.to_string().contains("version"));
}

#[test]
fn tensor_accessors_check_names_and_ranks() {
    let mut ck = Checkpoint::new();
    ck.push_matrix("grid", &arr2(&[[1.0, 2.0], [3.0, 4.0]]));
    ck.push_vector("line", &arr1(&[5.0, 6.0]));

    let err = ck.tensor("ghost").unwrap_err();
    assert!(err.to_string().contains("ghost"));
    assert!(ck.matrix("line").is_err());
    assert!(ck.vector("grid").is_err());

    assert_eq!(ck.tensor("grid").unwrap().dims, vec![2, 2]);
    assert_eq!(ck.tensor("grid").unwrap().len(), 4);
    assert!(!ck.tensor("grid").unwrap().is_empty());
    let entry = TensorEntry {
        name: "void".into(),
        dims: vec![0, 3],
        data: vec![],
    };
    assert!(entry.is_empty());
}
