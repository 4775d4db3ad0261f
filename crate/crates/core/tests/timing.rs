//! Decode time grows linearly with the number of sentences.

use mcseg::corpus::{Corpus, DomainRegistry};
use mcseg::encoder::EncoderConfig;
use mcseg::eval::speed_bench;
use mcseg::model::{Criterion, Model};
use mcseg::synthetic::{generate, SyntheticConfig};
use mcseg::trainer::build_vocab;

#[test]
fn doubling_sentences_doubles_time() {
    let synth = generate(&SyntheticConfig {
        sentences: 800,
        seed: 9,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let sentences: Vec<Vec<char>> = synth.fine.iter().map(|s| s.concat().chars().collect()).collect();
    let reg = DomainRegistry::from_names(&["fine"]).unwrap();
    let vocab = build_vocab(&[Corpus::from_words(reg.domains()[0].clone(), &synth.fine).unwrap()]);
    let model = Model::new(EncoderConfig::desk(vocab.len(), 2), vocab, reg, true, 1).unwrap();
    let time = |s: &[Vec<char>]| speed_bench(&model, s, Criterion::Domain(0), &[32], 1, 7).unwrap().rows[0].median_secs;
    let half = &sentences[..400];
    let doubled: Vec<Vec<char>> = half.iter().chain(half).cloned().collect();
    let (t1, t2) = (time(half), time(&doubled));
    let ratio = t2 / t1;
    assert!(
        (ratio - 2.0).abs() <= 0.5,
        "time ratio {ratio:.3} for twice the sentences"
    );
}
