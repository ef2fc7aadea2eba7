use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use threem::decoder::{aed_loss, multi_level_aed, DecoderBlock, MultiLevelSet, TransformerDecoder};
use threem::nn::causal_mask;
use threem::tensor::{finite_diff_check, Graph, ParamStore, Tensor};
use threem::ModelConfig;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn cfg(levels: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 6,
        d_att: 8,
        dec_d_ff: 16,
        dec_heads: 2,
        heads: 2,
        dec_blocks: 2,
        num_blocks: 6,
        levels,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

fn decoder(seed: u64) -> (ParamStore, TransformerDecoder) {
    let mut store = ParamStore::new(seed);
    let dec = TransformerDecoder::new(&mut store, "dec", &cfg(1));
    (store, dec)
}

fn log_probs(dec: &TransformerDecoder, store: &ParamStore, enc: &Tensor, tokens: &[usize]) -> Tensor {
    let mut g = Graph::new();
    let e = g.constant(enc.clone());
    let lp = dec.decode_teacher_forced(&mut g, store, e, tokens).unwrap();
    g.value(lp).clone()
}

/// Per-position smoothed cross-entropy, written out directly.
fn aed_oracle(lp: &Tensor, targets: &[usize], eps: f64) -> f64 {
    let v = lp.cols();
    let mut total = 0.0;
    for (t, &y) in targets.iter().enumerate() {
        let mut row = 0.0;
        for k in 0..v {
            let q = if k == y { 1.0 - eps } else { eps / (v - 1) as f64 };
            row -= q * lp.at(t, k);
        }
        total += row;
    }
    total / targets.len() as f64
}

#[test]
fn rows_are_log_distributions() {
    let (store, dec) = decoder(1);
    let lp = log_probs(&dec, &store, &random(&[5, 8], 2), &[1, 4, 2]);
    assert_eq!(lp.shape(), &[4, 7]);
    for r in 0..lp.rows() {
        let s: f64 = lp.row(r).iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() <= 1e-10);
    }
}

#[test]
fn rejects_out_of_vocabulary_tokens() {
    let (store, dec) = decoder(1);
    let mut g = Graph::new();
    let e = g.constant(random(&[5, 8], 2));
    assert!(dec.decode_teacher_forced(&mut g, &store, e, &[1, 7]).is_err());
}

#[test]
fn future_tokens_do_not_leak() {
    let (store, dec) = decoder(3);
    let enc = random(&[6, 8], 4);
    let base = log_probs(&dec, &store, &enc, &[0, 1, 2, 3, 4]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for t in 0..5 {
        let mut changed = vec![0, 1, 2, 3, 4];
        for tok in changed.iter_mut().skip(t) {
            *tok = rng.random_range(0..7);
        }
        let other = log_probs(&dec, &store, &enc, &changed);
        for r in 0..=t {
            assert_eq!(base.row(r), other.row(r), "position {r} saw tokens from {t} on");
        }
    }
}

#[test]
fn decoder_block_gradient_matches_finite_differences() {
    let mut store = ParamStore::new(6);
    let block = DecoderBlock::new(&mut store, "blk", 8, 16, 2, 0.0);
    let x = random(&[4, 8], 7);
    let enc = random(&[5, 8], 8);
    let proj = random(&[4, 8], 9);
    let mask = causal_mask(4);
    let report = finite_diff_check(&mut store, 1e-5, None, |g, s| {
        let xv = g.constant(x.clone());
        let ev = g.constant(enc.clone());
        let y = block.forward(g, s, xv, ev, &mask)?;
        let w = g.constant(proj.clone());
        let p = g.mul(y, w)?;
        g.sum(p)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn aed_loss_examples() {
    let mut g = Graph::new();
    // one-hot-correct: target log-prob 0, others very negative
    let mut data = vec![-50.0; 3 * 5];
    for (t, y) in [2usize, 0, 4].iter().enumerate() {
        data[t * 5 + y] = 0.0;
    }
    let lp = g.constant(Tensor::matrix(3, 5, data).unwrap());
    let l = aed_loss(&mut g, lp, &[2, 0, 4], 0.0).unwrap();
    assert_eq!(g.value(l).item(), 0.0);

    let v = 7;
    let uniform = g.constant(Tensor::full(&[4, v], -(v as f64).ln()));
    for eps in [0.0, 0.1] {
        let l = aed_loss(&mut g, uniform, &[1, 2, 3, 6], eps).unwrap();
        assert!((g.value(l).item() - (v as f64).ln()).abs() <= 1e-12);
    }
}

#[test]
fn aed_loss_matches_loop_oracle() {
    let (store, dec) = decoder(10);
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = rng.random_range(0..6);
        let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(0..6)).collect();
        let enc = random(&[rng.random_range(1..8), 8], seed + 50);
        for eps in [0.0, 0.1] {
            let mut g = Graph::new();
            let e = g.constant(enc.clone());
            let lp = dec.decode_teacher_forced(&mut g, &store, e, &tokens).unwrap();
            let targets = dec.targets(&tokens);
            let l = aed_loss(&mut g, lp, &targets, eps).unwrap();
            let oracle = aed_oracle(g.value(lp), &targets, eps);
            assert!((g.value(l).item() - oracle).abs() <= 1e-12);
        }
    }
}

#[test]
fn single_level_equals_main_decoder_loss() {
    let mut store = ParamStore::new(11);
    let set = MultiLevelSet::new(&mut store, &cfg(1));
    assert_eq!(set.levels(), 1);
    let mut g = Graph::new();
    let enc = g.constant(random(&[5, 8], 12));
    let levels = set.losses(&mut g, &store, enc, &BTreeMap::new(), &[1, 2], 0.1).unwrap();
    let total = multi_level_aed(&mut g, &levels).unwrap();
    let single = set.main.loss(&mut g, &store, enc, &[1, 2], 0.1).unwrap();
    assert_eq!(g.value(total).item(), g.value(single).item());
}

#[test]
fn identical_levels_triple_the_loss() {
    let mut store = ParamStore::new(12);
    let set = MultiLevelSet::new(&mut store, &cfg(3));
    assert_eq!(set.aux.iter().map(|(t, _)| *t).collect::<Vec<_>>(), vec![2, 4]);
    // copy the main decoder's weights into both auxiliaries
    let names: Vec<String> = store.ids().map(|id| store.name(id).to_string()).collect();
    for name in names.iter().filter(|n| n.starts_with("dec.")) {
        let v = store.get(store.id(name).unwrap()).clone();
        for j in 0..2 {
            let id = store.id(&format!("aux_dec.{j}.{}", &name[4..])).unwrap();
            store.set(id, v.clone()).unwrap();
        }
    }
    let mut g = Graph::new();
    let enc = g.constant(random(&[5, 8], 13));
    let taps = BTreeMap::from([(2, enc), (4, enc)]);
    let levels = set.losses(&mut g, &store, enc, &taps, &[3, 1, 5], 0.1).unwrap();
    let total = multi_level_aed(&mut g, &levels).unwrap();
    let total = g.value(total).item();
    let single = g.value(levels[2]).item();
    assert!((total - 3.0 * single).abs() <= 1e-12);
    let sum: f64 = levels.iter().map(|&l| g.value(l).item()).sum();
    assert!((total - sum).abs() <= 1e-12);
}

#[test]
fn missing_tap_is_an_error() {
    let mut store = ParamStore::new(13);
    let set = MultiLevelSet::new(&mut store, &cfg(3));
    let mut g = Graph::new();
    let enc = g.constant(random(&[5, 8], 14));
    let taps = BTreeMap::from([(2, enc)]);
    assert!(set.losses(&mut g, &store, enc, &taps, &[1], 0.0).is_err());
}

#[test]
fn rescore_is_sum_of_gathered_log_probs() {
    let (store, dec) = decoder(14);
    let enc = random(&[6, 8], 15);
    let mut g = Graph::new();
    let e = g.constant(enc.clone());
    let empty = dec.rescore(&mut g, &store, e, &[]).unwrap();
    let lp = log_probs(&dec, &store, &enc, &[]);
    assert_eq!(empty, lp.at(0, dec.sos_eos));

    let hyp = [4, 0, 2];
    let score = dec.rescore(&mut g, &store, e, &hyp).unwrap();
    let lp = log_probs(&dec, &store, &enc, &hyp);
    let gathered: f64 = dec.targets(&hyp).iter().enumerate().map(|(t, &y)| lp.at(t, y)).sum();
    assert_eq!(score, gathered);
}

#[test]
fn appending_a_token_adds_its_conditional() {
    let (store, dec) = decoder(15);
    let enc = random(&[6, 8], 16);
    let mut g = Graph::new();
    let e = g.constant(enc.clone());
    let prefix = vec![1, 3];
    for next in 0..6 {
        let mut longer = prefix.clone();
        longer.push(next);
        let s_short = dec.rescore(&mut g, &store, e, &prefix).unwrap();
        let s_long = dec.rescore(&mut g, &store, e, &longer).unwrap();
        let lp_short = log_probs(&dec, &store, &enc, &prefix);
        let lp_long = log_probs(&dec, &store, &enc, &longer);
        // drop ⟨eos⟩ after the prefix, add the token and the new ⟨eos⟩
        let expect = s_short - lp_short.at(2, dec.sos_eos) + lp_long.at(2, next) + lp_long.at(3, dec.sos_eos);
        assert!((s_long - expect).abs() <= 1e-12);
    }
}
