use diffgap::contrastive::{
    contrastive_loss_value, generate_corpus, train_contrastive, ConceptSpec, ContrastiveConfig,
};
use diffgap::corpus::{Modality, PairedCorpus};
use diffgap::denoiser::DenoiserConfig;
use diffgap::error::Error;
use diffgap::eval::rank_report;
use diffgap::trainer::{encode_checkpoint, train, Direction, TrainConfig};

fn small_base(dim: usize) -> DenoiserConfig {
    DenoiserConfig {
        embed_dim: dim,
        cond_dim: dim,
        time_embed_dim: 8,
        hidden_dim: 32,
        hidden_layers: 2,
    }
}

fn small_corpus(dim: usize, count: usize, seed: u64) -> PairedCorpus {
    generate_corpus(&ConceptSpec {
        concept_dim: 4,
        dim_a: dim,
        dim_v: dim,
        count,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn default_model_loss_falls_within_five_hundred_iterations() {
    let (mut first, mut later) = (0.0, 0.0);
    for seed in 0..3 {
        let corpus = generate_corpus(&ConceptSpec {
            count: 5000,
            seed,
            ..Default::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs: 7,
            seed,
            ..Default::default()
        };
        let h = train(&corpus, &DenoiserConfig::default(), &cfg).unwrap().history;
        assert!(h.len() >= 500);
        first += h[0].loss;
        later += h[499].loss;
    }
    assert!(later < first, "iteration 500 loss {} vs iteration 1 loss {}", later / 3.0, first / 3.0);
}

#[test]
fn both_directions_improve_under_split_training() {
    let corpus = small_corpus(8, 640, 2);
    let cfg = TrainConfig {
        epochs: 40,
        interval: Some(50),
        learning_rate: 1e-3,
        ..Default::default()
    };
    let h = train(&corpus, &small_base(8), &cfg).unwrap().history;
    for d in [Direction::CondVDenoiseA, Direction::CondADenoiseV] {
        let losses: Vec<f64> = h.iter().filter(|r| r.direction == d).map(|r| r.loss).collect();
        let (head, tail) = (mean(losses[..20].iter().copied()), mean(losses[losses.len() - 20..].iter().copied()));
        assert!(tail < head, "{d}: {head} -> {tail}");
    }
}

#[test]
fn training_is_reproducible_byte_for_byte() {
    let corpus = small_corpus(6, 100, 3);
    let cfg = TrainConfig {
        epochs: 3,
        interval: Some(4),
        seed: 17,
        ..Default::default()
    };
    let a = encode_checkpoint(&train(&corpus, &small_base(6), &cfg).unwrap().checkpoint).unwrap();
    let b = encode_checkpoint(&train(&corpus, &small_base(6), &cfg).unwrap().checkpoint).unwrap();
    assert_eq!(a, b);
}

#[test]
fn without_switching_the_reverse_denoiser_keeps_its_init() {
    let corpus = small_corpus(6, 100, 4);
    let trained = TrainConfig {
        epochs: 2,
        interval: None,
        ..Default::default()
    };
    let untouched = TrainConfig { epochs: 0, ..trained };
    let ck = train(&corpus, &small_base(6), &trained).unwrap().checkpoint;
    let init = train(&corpus, &small_base(6), &untouched).unwrap().checkpoint;
    assert_eq!(ck.av, init.av);
    assert_ne!(ck.va, init.va);
    assert_eq!(ck.toggles, 0);
    assert_eq!(ck.adam_av.t, 0);
}

#[test]
fn checkpoint_dims_guard_evaluation_corpus() {
    let corpus = small_corpus(8, 64, 5);
    let cfg = TrainConfig {
        epochs: 1,
        ..Default::default()
    };
    let ck = train(&corpus, &small_base(8), &cfg).unwrap().checkpoint;
    assert!(ck.check_dims(8, 8).is_ok());
    assert!(matches!(ck.check_dims(4, 4), Err(Error::Config(_))));
}

#[test]
fn training_rejects_empty_corpus_and_mismatched_dims() {
    let corpus = small_corpus(8, 10, 6);
    let cfg = TrainConfig::default();
    assert!(train(&corpus.subset(&[]), &small_base(8), &cfg).is_err());
    assert!(train(&corpus, &small_base(4), &cfg).is_err());
}

fn contrastive_spec(sigma: f64, seed: u64) -> ConceptSpec {
    ConceptSpec {
        concept_dim: 8,
        raw_dim: 32,
        dim_a: 32,
        dim_v: 32,
        sigma_a: sigma,
        sigma_v: sigma,
        count: 640,
        seed,
        ..Default::default()
    }
}

#[test]
fn contrastive_training_reduces_loss_and_beats_chance() {
    let cfg = ContrastiveConfig {
        epochs: 8,
        ..Default::default()
    };
    let out = train_contrastive(&contrastive_spec(0.7, 1), &cfg).unwrap();
    let l = &out.epoch_losses;
    assert!(l.last().unwrap() < l.first().unwrap(), "{l:?}");
    // In-batch retrieval over batches of B: chance is 1/B.
    let b = cfg.batch_size;
    let mut acc = 0.0;
    let batches = out.corpus.count() / b;
    for k in 0..batches {
        let idx: Vec<usize> = (k * b..(k + 1) * b).collect();
        let part = out.corpus.subset(&idx);
        let r = rank_report(&part.matrix(Modality::A), &part.matrix(Modality::V), "a->v", 0, 0).unwrap();
        acc += r.at(1).unwrap() / 100.0;
    }
    acc /= batches as f64;
    assert!(acc > 1.0 / b as f64, "accuracy {acc}");
}

#[test]
fn lower_noise_never_converges_to_a_worse_loss() {
    let cfg = ContrastiveConfig {
        epochs: 8,
        ..Default::default()
    };
    let converged = |sigma: f64| {
        mean((0..3).map(|seed| {
            let out = train_contrastive(&contrastive_spec(sigma, seed), &cfg).unwrap();
            *out.epoch_losses.last().unwrap()
        }))
    };
    let losses: Vec<f64> = [0.0, 0.5, 1.0].iter().map(|&s| converged(s)).collect();
    assert!(losses[0] <= losses[1] && losses[1] <= losses[2], "{losses:?}");
}

#[test]
fn encoded_corpus_rows_are_unit_norm() {
    let out = train_contrastive(&contrastive_spec(0.3, 2), &ContrastiveConfig { epochs: 3, ..Default::default() }).unwrap();
    let idx: Vec<usize> = (0..64).collect();
    let part = out.corpus.subset(&idx);
    let l = contrastive_loss_value(&part.matrix(Modality::A), &part.matrix(Modality::V), 0.07).unwrap();
    assert!(l.is_finite() && l >= 0.0);
    assert!(out.corpus.max_norm_deviation() < 1e-9);
}
