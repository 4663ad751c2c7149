use adr_core::encoding::{decode_spans, SpanLabel, TagLabel};
use adr_core::eval::{prf, score_model};
use adr_core::model::{AdrTagger, ModelConfig, Phase};
use adr_core::numerics::Parameterized;
use adr_core::pipeline::{encode_drug_examples, encode_tagged};
use adr_core::synthetic::{memorization_set, transfer_corpus, TransferSpec};
use adr_core::training::{pretrain, train_supervised, EncodedTaggedExample, TrainConfig, TrainingLog};

fn memorization_data() -> Vec<EncodedTaggedExample> {
    memorization_set(5, 20, 30)
        .into_iter()
        .enumerate()
        .map(|(i, (tokens, tags))| EncodedTaggedExample {
            id: format!("m{i}"),
            tokens,
            tags,
        })
        .collect()
}

fn memorize(hidden: usize, seed: u64) -> (AdrTagger, TrainingLog) {
    let mut model = AdrTagger::new(ModelConfig::new(30, 16, hidden, 2), seed).unwrap();
    let mut cfg = TrainConfig::supervised(seed);
    cfg.epochs = 200;
    cfg.adam.learning_rate = 0.01;
    let log = train_supervised(&mut model, &memorization_data(), &cfg).unwrap();
    (model, log)
}

#[test]
fn loss_is_non_increasing_late_in_memorization() {
    for seed in 1..=3 {
        let (_, log) = memorize(32, seed);
        let second_half = &log.records[log.records.len() / 2..];
        for w in second_half.windows(2) {
            assert!(
                w[1].mean_loss <= w[0].mean_loss + 1e-3,
                "seed {seed} epoch {} loss {} after {}",
                w[1].epoch,
                w[1].mean_loss,
                w[0].mean_loss
            );
        }
    }
}

#[test]
fn memorized_model_scores_perfectly() {
    let data = memorization_data();
    let (model, _) = memorize(16, 1);
    let counts = score_model(&model, &data, 40, false).unwrap();
    let gold: usize = data
        .iter()
        .map(|ex| decode_spans(&ex.tags).iter().filter(|s| s.label == SpanLabel::Adr).count())
        .sum();
    assert_eq!(counts.gold, gold);
    assert!(gold > 0);
    assert_eq!(prf(counts).f1, 1.0);
}

#[test]
fn all_outside_model_scores_zero() {
    let data = memorization_data();
    let mut model = AdrTagger::new(ModelConfig::new(30, 4, 3, 2), 0).unwrap();
    model.tag_head.weight.value.fill(0.0);
    model.tag_head.bias.value.fill(0.0);
    model.tag_head.bias.value.set(TagLabel::O.index(), 0, 5.0);
    for ex in &data {
        assert!(model.predict_tags(&ex.tokens).unwrap().iter().all(|t| *t == TagLabel::O));
    }
    let counts = score_model(&model, &data, 40, false).unwrap();
    assert!(counts.gold > 0);
    let s = prf(counts);
    assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
}

#[test]
fn phases_share_the_encoder_and_keep_their_own_heads() {
    let spec = TransferSpec::default();
    let corpus = transfer_corpus(&spec, 2, 60, 10, 1);
    let start = AdrTagger::new(ModelConfig::new(corpus.vocab.len(), 6, 5, spec.drugs), 3).unwrap();

    let mut after_pretrain = start.clone();
    let mut cfg = TrainConfig::pretrain(3);
    cfg.epochs = 1;
    cfg.batch_size = 8;
    pretrain(&mut after_pretrain, &encode_drug_examples(&corpus.pretrain, &corpus.vocab), &cfg).unwrap();
    assert_ne!(after_pretrain.encoder, start.encoder);
    assert_ne!(after_pretrain.drug_head, start.drug_head);
    assert_eq!(after_pretrain.tag_head, start.tag_head);
    assert_eq!(after_pretrain.embeddings.value, start.embeddings.value);

    let mut after_supervised = after_pretrain.clone();
    let mut cfg = TrainConfig::supervised(3);
    cfg.epochs = 1;
    train_supervised(&mut after_supervised, &encode_tagged(&corpus.train, &corpus.vocab), &cfg).unwrap();
    assert_ne!(after_supervised.encoder, after_pretrain.encoder);
    assert_ne!(after_supervised.tag_head, after_pretrain.tag_head);
    assert_eq!(after_supervised.drug_head, after_pretrain.drug_head);

    let mut names: Vec<String> = after_supervised
        .phase_parameters_mut(Phase::Pretrain)
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    names.retain(|n| n.starts_with("encoder."));
    let supervised: Vec<String> = after_supervised
        .phase_parameters_mut(Phase::Supervised)
        .into_iter()
        .map(|(n, _)| n)
        .filter(|n| n.starts_with("encoder."))
        .collect();
    assert_eq!(names, supervised);
    assert_eq!(names.len(), 24);
    assert!(after_supervised.parameters().iter().all(|(_, p)| p.value.is_finite()));
}
