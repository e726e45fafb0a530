//! Temporary timing probe. Not part of the suite; deleted after use.

use std::time::Instant;

use ndarray::Array2;
use xmatch_core::data::{concept_table, generate_synthetic, token_features, SyntheticSpec};
use xmatch_core::eval::recall_at_k;
use xmatch_core::pipeline::{score_matrix, Mode, ModelParams, PipelineConfig};
use xmatch_core::training::{train, TrainConfig, TrainSchedule};

fn dataset(spec: &SyntheticSpec) -> (Vec<Array2<f64>>, Vec<Array2<f64>>) {
    let (regions, sentences, _) = generate_synthetic(spec).unwrap();
    let table = concept_table(spec).unwrap();
    let images: Vec<Array2<f64>> = regions.iter().map(|r| r.features_f64()).collect();
    let captions: Vec<Array2<f64>> = sentences
        .iter()
        .map(|s| token_features(s, &table).unwrap())
        .collect();
    (images, captions)
}

fn r1_both(
    images: &[Array2<f64>],
    captions: &[Array2<f64>],
    config: &PipelineConfig,
    params: Option<&ModelParams>,
) -> (f64, f64) {
    let sim = score_matrix(images, captions, config, params).unwrap();
    let truth: Vec<Vec<usize>> = (0..images.len()).map(|i| vec![i]).collect();
    let i2t = recall_at_k(sim.view(), &truth, 1).unwrap();
    let t2i = recall_at_k(sim.t(), &truth, 1).unwrap();
    (i2t, t2i)
}

#[test]
#[ignore]
fn probe_overfit() {
    let spec = SyntheticSpec {
        num_pairs: 64,
        k: 8,
        l: 6,
        d: 64,
        latent_concept_count: 24,
        noise_scale: 0.1,
        seed: 4242,
    };
    let (images, captions) = dataset(&spec);

    let pipeline = PipelineConfig::rcar(64, 32, 2);
    let t0 = Instant::now();
    let mut r = rand_chacha::ChaCha12Rng::seed_from_u64(1);
    use rand::SeedableRng;
    let p0 = ModelParams::init_with_hidden(64, 32, 64, 16, &mut r);
    let (i0, t0r) = r1_both(&images, &captions, &pipeline, Some(&p0));
    println!("untrained rcar r@1: {i0:.3}/{t0r:.3}  eval took {:?}", t0.elapsed());

    let base = PipelineConfig::baseline(64);
    let (bi, bt) = r1_both(&images, &captions, &base, None);
    println!("baseline r@1: {bi:.3}/{bt:.3}");

    let mut config = TrainConfig::new(pipeline.clone());
    config.loss.batch_size = 32;
    config.schedule = TrainSchedule::constant(10, 1e-3);
    config.e_hidden = 64;
    config.lambda_hidden = 16;
    config.seed = 99;

    let start = Instant::now();
    let mut params: Option<ModelParams> = None;
    let mut epochs_done = 0;
    while epochs_done < 200 {
        let mut log = Vec::new();
        let outcome = train(
            &config,
            &images,
            &captions,
            None,
            params.as_ref(),
            None,
            &mut log,
        )
        .unwrap();
        params = Some(outcome.params);
        epochs_done += 10;
        let (i2t, t2i) = r1_both(&images, &captions, &pipeline, params.as_ref());
        println!(
            "epoch {epochs_done}: r@1 {i2t:.3}/{t2i:.3}  loss {:>9.4}  elapsed {:?}",
            outcome.epoch_losses.last().unwrap(),
            start.elapsed()
        );
        if i2t >= 0.95 && t2i >= 0.95 {
            break;
        }
    }
    println!("total {:?}", start.elapsed());
}

#[test]
#[ignore]
fn probe_median() {
    let spec = SyntheticSpec {
        num_pairs: 640,
        k: 6,
        l: 5,
        d: 64,
        latent_concept_count: 12,
        noise_scale: 1.6,
        seed: 7007,
    };
    let (images, captions) = dataset(&spec);
    let (train_i, test_i) = images.split_at(512);
    let (train_c, test_c) = captions.split_at(512);
    let (fit_i, val_i) = train_i.split_at(448);
    let (fit_c, val_c) = train_c.split_at(448);

    let base = PipelineConfig::baseline(64);
    let (bi, bt) = r1_both(test_i, test_c, &base, None);
    println!("baseline test r@1 {bi:.4}/{bt:.4}");

    let pipeline = PipelineConfig::rcar(64, 24, 2);
    let total = Instant::now();
    let mut results = Vec::new();
    for seed in [11u64, 22, 33, 44, 55] {
        let mut config = TrainConfig::new(pipeline.clone());
        config.loss.batch_size = 16;
        config.schedule = TrainSchedule::constant(16, 1e-3);
        config.e_hidden = 64;
        config.lambda_hidden = 8;
        config.unshare_alignment = true;
        config.seed = seed;
        let start = Instant::now();
        let mut log = Vec::new();
        let outcome = train(
            &config,
            fit_i,
            fit_c,
            Some((val_i, val_c)),
            None,
            None,
            &mut log,
        )
        .unwrap();
        let ck = outcome.best_checkpoint.as_ref().unwrap();
        let best_params = ModelParams::read_from(ck).unwrap();
        let (i2t, t2i) = r1_both(test_i, test_c, &pipeline, Some(&best_params));
        let (li, lt) = r1_both(test_i, test_c, &pipeline, Some(&outcome.params));
        println!(
            "seed {seed}: best epoch {:?} -> test r@1 {i2t:.4}/{t2i:.4} (last {li:.4}/{lt:.4})  {:?}",
            outcome.best,
            start.elapsed()
        );
        results.push((i2t, t2i));
    }
    let mut i2ts: Vec<f64> = results.iter().map(|r| r.0).collect();
    let mut t2is: Vec<f64> = results.iter().map(|r| r.1).collect();
    i2ts.sort_by(f64::total_cmp);
    t2is.sort_by(f64::total_cmp);
    println!(
        "median rcar {:.4}/{:.4} vs baseline {bi:.4}/{bt:.4}  total {:?}",
        i2ts[2],
        t2is[2],
        total.elapsed()
    );
}

#[test]
#[ignore]
fn probe_trend() {
    let noise: f64 = std::env::var("NOISE")
        .unwrap_or_else(|_| "2.0".into())
        .parse()
        .unwrap();
    let epochs: usize = std::env::var("EPOCHS")
        .unwrap_or_else(|_| "10".into())
        .parse()
        .unwrap();
    let concepts: usize = std::env::var("CONCEPTS")
        .unwrap_or_else(|_| "48".into())
        .parse()
        .unwrap();
    let lr: f64 = std::env::var("LR")
        .unwrap_or_else(|_| "1e-3".into())
        .parse()
        .unwrap();
    let k: usize = std::env::var("K").unwrap_or_else(|_| "6".into()).parse().unwrap();
    let l: usize = std::env::var("L").unwrap_or_else(|_| "5".into()).parse().unwrap();
    let d: usize = std::env::var("D").unwrap_or_else(|_| "32".into()).parse().unwrap();
    let m: usize = std::env::var("M").unwrap_or_else(|_| "16".into()).parse().unwrap();
    let dseed: u64 = std::env::var("DSEED")
        .unwrap_or_else(|_| "7001".into())
        .parse()
        .unwrap();
    let spec = SyntheticSpec {
        num_pairs: 640,
        k,
        l,
        d,
        latent_concept_count: concepts,
        noise_scale: noise,
        seed: dseed,
    };
    let (images, captions) = dataset(&spec);
    let (train_i, test_i) = images.split_at(512);
    let (train_c, test_c) = captions.split_at(512);

    let dir = if std::env::var("I2TDIR").is_ok() {
        xmatch_core::pipeline::DirectionTag::I2t
    } else {
        xmatch_core::pipeline::DirectionTag::T2i
    };
    let base = PipelineConfig::baseline(d).with_direction(dir);
    let t0 = Instant::now();
    let (bi, bt) = r1_both(test_i, test_c, &base, None);
    println!("noise {noise} k {k} l {l} d {d} concepts {concepts}: baseline test r@1 {bi:.4}/{bt:.4}  eval {:?}", t0.elapsed());
    if epochs == 0 {
        return;
    }

    let batch: usize = std::env::var("BATCH").unwrap_or_else(|_| "64".into()).parse().unwrap();
    let pipeline = PipelineConfig::rcar(d, m, 2).with_direction(dir);
    let mut config = TrainConfig::new(pipeline.clone());
    config.loss.batch_size = batch;
    config.schedule = TrainSchedule::constant(2, lr);
    config.e_hidden = std::env::var("EHID")
        .unwrap_or_else(|_| d.max(16).to_string())
        .parse()
        .unwrap();
    config.lambda_hidden = 8;
    config.unshare_alignment = std::env::var("UNSHARE").is_ok();
    config.seed = 11;
    let start = Instant::now();
    let mut params: Option<ModelParams> = None;
    let mut done = 0;
    while done < epochs {
        let mut log = Vec::new();
        let outcome = train(
            &config,
            train_i,
            train_c,
            None,
            params.as_ref(),
            None,
            &mut log,
        )
        .unwrap();
        params = Some(outcome.params);
        done += 2;
        let (i2t, t2i) = r1_both(test_i, test_c, &pipeline, params.as_ref());
        println!(
            "epoch {done}: test r@1 {i2t:.4}/{t2i:.4}  loss {:>9.4}  elapsed {:?}",
            outcome.epoch_losses.last().unwrap(),
            start.elapsed()
        );
    }
}
