#![allow(dead_code)]

use threem::features::{apply_cmvn, CmvnStats, FeatureSequence, SpecAugment, SyntheticSpec};

/// The 50-utterance, 10-token synthetic corpus split 45/5 and normalized
/// with training-split CMVN.
pub fn desk_corpus(seed: u64) -> (Vec<FeatureSequence>, Vec<FeatureSequence>) {
    let seqs = SyntheticSpec::new(50, 10, seed).generate();
    let (train, dev) = seqs.split_at(45);
    let stats = CmvnStats::compute(train.iter().map(|s| &s.feats)).unwrap();
    let norm = |xs: &[FeatureSequence]| xs.iter().map(|s| apply_cmvn(s, &stats).unwrap()).collect::<Vec<_>>();
    (norm(train), norm(dev))
}

/// Time masks scaled to utterances of ~80 frames.
pub fn desk_spec_augment() -> SpecAugment {
    SpecAugment {
        max_time: 10,
        ..SpecAugment::default()
    }
}
