//! Feature encoders against hand-rolled forward passes.
//!
//! The image side is a plain affine map per region, so an identity
//! weight must reproduce the raw features and a random weight must
//! match a triple loop. The text side runs a bidirectional recurrent
//! cell; the oracle re-implements the cell equations step by step on
//! the looked-up embeddings, including the reversed sweep, and checks
//! that word features are the arithmetic mean of the two directions.

use ndarray::{arr1, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use xmatch_core::data::{RegionSet, SentenceSet, END_TOKEN, START_TOKEN};
use xmatch_core::encoders::{GruDirection, ImageProjector, TextEncoder};
use xmatch_core::Error;

fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

fn random_matrix(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha12Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(lo..hi))
}

fn sentence(content: &[u32], vocab: u32) -> SentenceSet {
    let mut ids = vec![START_TOKEN];
    ids.extend_from_slice(content);
    ids.push(END_TOKEN);
    SentenceSet::new("c00000", "i00000", ids, vocab, None).unwrap()
}

#[test]
fn an_identity_projector_passes_features_through() {
    let features = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f32 * 0.25 - 1.0);
    let regions = RegionSet::new("i00000", features).unwrap();
    let projector = ImageProjector::new(Array2::eye(4), Array1::zeros(4)).unwrap();
    let encoded = projector.encode_image(&regions).unwrap();
    assert_eq!(encoded, regions.features_f64());
}

#[test]
fn a_zero_weight_broadcasts_the_bias_to_every_region() {
    let features = Array2::from_elem((5, 3), 0.5f32);
    let regions = RegionSet::new("i00001", features).unwrap();
    let bias = arr1(&[0.25, -0.75]);
    let projector = ImageProjector::new(Array2::zeros((3, 2)), bias.clone()).unwrap();
    let encoded = projector.encode_image(&regions).unwrap();
    for i in 0..5 {
        for c in 0..2 {
            assert_eq!(encoded[[i, c]], bias[c]);
        }
    }
}

#[test]
fn projection_matches_the_triple_loop_oracle() {
    let mut r = rng(61);
    let raw = Array2::from_shape_fn((3, 4), |_| r.gen_range(-1.0f32..1.0));
    let regions = RegionSet::new("i00002", raw.clone()).unwrap();
    let weight = random_matrix(4, 2, -1.0, 1.0, &mut r);
    let bias = arr1(&[r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)]);
    let projector = ImageProjector::new(weight.clone(), bias.clone()).unwrap();
    let encoded = projector.encode_image(&regions).unwrap();
    for i in 0..3 {
        for c in 0..2 {
            let mut want = bias[c];
            for j in 0..4 {
                want += raw[[i, j]] as f64 * weight[[j, c]];
            }
            assert!(
                (encoded[[i, c]] - want).abs() <= 1e-12,
                "region {i} coord {c}: {} vs {want}",
                encoded[[i, c]]
            );
        }
    }
}

#[test]
fn projector_validation_rejects_bad_shapes_and_values() {
    assert!(matches!(
        ImageProjector::new(Array2::zeros((3, 2)), Array1::zeros(3)),
        Err(Error::Config(_))
    ));
    let mut weight = Array2::<f64>::zeros((3, 2));
    weight[[0, 0]] = f64::NAN;
    assert!(matches!(
        ImageProjector::new(weight, Array1::zeros(2)),
        Err(Error::Config(_))
    ));

    let projector = ImageProjector::new(Array2::eye(3), Array1::zeros(3)).unwrap();
    let wide = RegionSet::new("i00003", Array2::from_elem((2, 4), 1.0f32)).unwrap();
    assert!(matches!(
        projector.encode_image(&wide),
        Err(Error::Config(_))
    ));
}

#[test]
fn word_features_are_the_mean_of_the_direction_states() {
    let mut r = rng(62);
    let encoder = TextEncoder::init(12, 5, 4, &mut r);
    let s = sentence(&[3, 7, 5, 9], 12);
    let (mean, fwd, bwd) = encoder.encode_text_with_states(&s).unwrap();
    assert_eq!(mean.dim(), (6, 4));
    for j in 0..6 {
        for c in 0..4 {
            let half = 0.5 * (fwd[[j, c]] + bwd[[j, c]]);
            assert_eq!(mean[[j, c]].to_bits(), half.to_bits());
            let recovered = 2.0 * mean[[j, c]] - fwd[[j, c]];
            assert!((recovered - bwd[[j, c]]).abs() <= 1e-12);
        }
    }
    assert_eq!(encoder.encode_text(&s).unwrap(), mean);
}

/// One recurrent sweep re-implemented with scalar loops: reset and
/// update gates from sigmoids, candidate state from a tanh with the
/// reset gate applied to the hidden contribution, then a convex blend.
fn oracle_sweep(gru: &GruDirection, inputs: &Array2<f64>) -> Array2<f64> {
    let hidden = gru.hidden();
    let mut h = vec![0.0f64; hidden];
    let mut states = Array2::zeros((inputs.nrows(), hidden));
    let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
    for (j, x) in inputs.outer_iter().enumerate() {
        let mut next = vec![0.0f64; hidden];
        for c in 0..hidden {
            let mut r = gru.b_ir[c] + gru.b_hr[c];
            let mut z = gru.b_iz[c] + gru.b_hz[c];
            let mut n_in = gru.b_in[c];
            let mut n_hid = gru.b_hn[c];
            for i in 0..gru.input() {
                r += x[i] * gru.w_ir[[i, c]];
                z += x[i] * gru.w_iz[[i, c]];
                n_in += x[i] * gru.w_in[[i, c]];
            }
            for i in 0..hidden {
                r += h[i] * gru.w_hr[[i, c]];
                z += h[i] * gru.w_hz[[i, c]];
                n_hid += h[i] * gru.w_hn[[i, c]];
            }
            let r = sigmoid(r);
            let z = sigmoid(z);
            let n = (n_in + r * n_hid).tanh();
            next[c] = (1.0 - z) * n + z * h[c];
        }
        h = next;
        for c in 0..hidden {
            states[[j, c]] = h[c];
        }
    }
    states
}

#[test]
fn text_encoding_matches_the_cell_level_oracle() {
    let mut r = rng(63);
    let vocab = 16u32;
    let encoder = TextEncoder::init(vocab as usize, 6, 5, &mut r);
    let s = sentence(&[4, 11, 2, 9, 6], vocab);
    let got = encoder.encode_text(&s).unwrap();

    let len = s.len();
    let mut embedded = Array2::zeros((len, 6));
    for (j, id) in s.token_ids().iter().enumerate() {
        embedded
            .row_mut(j)
            .assign(&encoder.embedding().row(*id as usize));
    }
    let fwd = oracle_sweep(encoder.forward_params(), &embedded);
    let mut reversed = Array2::zeros(embedded.dim());
    for j in 0..len {
        reversed.row_mut(j).assign(&embedded.row(len - 1 - j));
    }
    let bwd_rev = oracle_sweep(encoder.backward_params(), &reversed);

    for j in 0..len {
        for c in 0..5 {
            let want = 0.5 * (fwd[[j, c]] + bwd_rev[[len - 1 - j, c]]);
            assert!(
                (got[[j, c]] - want).abs() <= 1e-9,
                "position {j} coord {c}: {} vs {want}",
                got[[j, c]]
            );
        }
    }
}

#[test]
fn a_late_token_change_reaches_the_first_word_feature() {
    // Only the backward direction can carry information from the end of
    // the sentence to position zero, so this exercises the reversal.
    let mut r = rng(64);
    let encoder = TextEncoder::init(10, 4, 3, &mut r);
    let a = sentence(&[3, 4, 5], 10);
    let b = sentence(&[3, 4, 6], 10);
    let ea = encoder.encode_text(&a).unwrap();
    let eb = encoder.encode_text(&b).unwrap();
    let first_differs = (0..3).any(|c| ea[[0, c]] != eb[[0, c]]);
    assert!(first_differs, "backward sweep did not propagate the change");
}

#[test]
fn tokens_outside_the_vocabulary_are_a_data_error() {
    let mut r = rng(65);
    // The sentence is valid against a vocabulary of 10, but the encoder
    // only has 8 embedding rows.
    let encoder = TextEncoder::init(8, 4, 3, &mut r);
    let s = sentence(&[9], 10);
    let err = encoder.encode_text(&s).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
    assert!(err.to_string().contains("token id 9"));
}

#[test]
fn encoder_construction_checks_width_agreement() {
    let mut r = rng(66);
    let embedding = random_matrix(8, 5, -0.1, 0.1, &mut r);

    let narrow = GruDirection::init(4, 3, &mut r);
    let ok = GruDirection::init(5, 3, &mut r);
    assert!(matches!(
        TextEncoder::new(embedding.clone(), narrow, ok.clone()),
        Err(Error::Config(_))
    ));

    let tall = GruDirection::init(5, 4, &mut r);
    assert!(matches!(
        TextEncoder::new(embedding.clone(), ok.clone(), tall),
        Err(Error::Config(_))
    ));

    let mut bad = embedding.clone();
    bad[[0, 0]] = f64::NAN;
    assert!(matches!(
        TextEncoder::new(bad, ok.clone(), ok.clone()),
        Err(Error::Config(_))
    ));

    let encoder = TextEncoder::new(embedding, ok.clone(), ok).unwrap();
    assert_eq!(encoder.vocab_size(), 8);
    assert_eq!(encoder.d(), 3);
}
