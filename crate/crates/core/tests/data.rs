use normformer_core::data::{
    detokenize, eval_batches, make_clm_batches, make_mlm_batches, synthetic_text, tokenize_bytes, Corpus, MASK,
    VOCAB_SIZE,
};
use normformer_core::Error;
use proptest::prelude::*;

#[test]
fn mlm_selection_frequency_over_a_million_positions() {
    let tokens: Vec<usize> = (0..50_000).map(|i| (i * 31 + 7) % 256).collect();
    let (mut positions, mut selected, mut masked, mut kept) = (0usize, 0usize, 0usize, 0usize);
    for b in make_mlm_batches(&tokens, 16, 125, 0.15, 99).unwrap() {
        for i in 0..b.inputs.len() {
            positions += 1;
            if b.loss_mask[i] {
                selected += 1;
                if b.inputs[i] == MASK {
                    masked += 1;
                } else if b.inputs[i] == b.targets[i] {
                    kept += 1;
                }
            } else {
                assert_eq!(b.inputs[i], b.targets[i]);
            }
        }
        if positions >= 1_000_000 {
            break;
        }
    }
    let freq = selected as f64 / positions as f64;
    assert!((freq - 0.15).abs() < 0.005, "selection frequency {freq}");
    let mask_share = masked as f64 / selected as f64;
    assert!((mask_share - 0.8).abs() < 0.01, "MASK share {mask_share}");
    // random replacements coincide with the original 1/256 of the time
    let kept_share = kept as f64 / selected as f64;
    assert!(
        (kept_share - (0.1 + 0.1 / 256.0)).abs() < 0.01,
        "unchanged share {kept_share}"
    );
}

#[test]
fn zero_mask_prob_selects_nothing() {
    let tokens: Vec<usize> = (0..1000).map(|i| i % 256).collect();
    for b in make_mlm_batches(&tokens, 4, 10, 0.0, 3).unwrap().take(50) {
        assert_eq!(b.masked_count(), 0);
        assert_eq!(b.inputs, b.targets);
    }
}

#[test]
fn clm_epoch_covers_every_usable_position_once() {
    let tokens: Vec<usize> = (0..1000).map(|i| i % 251).collect();
    let seq = 7;
    let it = make_clm_batches(&tokens, 5, seq, 11).unwrap();
    let per_epoch = it.batches_per_epoch();
    let chunks = it.chunks_per_epoch();
    assert_eq!(chunks, 999 / seq);
    let mut hits = vec![0usize; tokens.len()];
    let mut windows = 0;
    for b in it.take(per_epoch) {
        for row in 0..b.batch_size {
            // locate the window by its content: every window starts at a
            // multiple of seq and the corpus has period 251
            let first = b.inputs[row * seq];
            let start = (0..chunks)
                .map(|c| c * seq)
                .find(|&s| tokens[s] == first && tokens[s..s + seq] == b.inputs[row * seq..row * seq + seq]);
            let start = start.unwrap();
            for p in start..start + seq {
                hits[p] += 1;
            }
            windows += 1;
        }
    }
    assert_eq!(windows, chunks);
    let usable = chunks * seq;
    assert!(hits[..usable].iter().all(|&h| h == 1));
    assert!(hits[usable..].iter().all(|&h| h == 0));
}

#[test]
fn corpus_errors_and_split() {
    assert!(matches!(
        make_clm_batches(&[1, 2, 3], 1, 3, 0),
        Err(Error::CorpusTooSmall { needed: 4, have: 3 })
    ));
    let text = synthetic_text(20_000, 5);
    let c = Corpus::from_bytes(&text, 0.9).unwrap();
    assert_eq!(c.train_tokens.len() + c.valid_tokens.len(), text.len());
    assert_eq!(c.train_tokens.len(), 18_000);
    assert_eq!(c.vocab_size, VOCAB_SIZE);
    assert_eq!(detokenize(&c.train_tokens), &text[..18_000]);
}

#[test]
fn synthetic_corpus_is_deterministic_and_large() {
    let a = synthetic_text(1 << 20, 7);
    assert_eq!(a.len(), 1 << 20);
    assert_eq!(a, synthetic_text(1 << 20, 7));
    assert_ne!(a[..4096], synthetic_text(1 << 20, 8)[..4096]);
    assert!(a.iter().all(|b| b.is_ascii()));
}

#[test]
fn eval_batches_are_fixed() {
    let tokens: Vec<usize> = (0..5000).map(|i| (i * 13) % 256).collect();
    let a = eval_batches(&tokens, 4, 16, 3, None).unwrap();
    assert_eq!(a, eval_batches(&tokens, 4, 16, 3, None).unwrap());
    assert_eq!(a.len(), 3);
    let m = eval_batches(&tokens, 4, 16, 3, Some((0.15, 1))).unwrap();
    assert_eq!(m, eval_batches(&tokens, 4, 16, 3, Some((0.15, 1))).unwrap());
}

proptest! {
    #[test]
    fn tokenize_round_trips(bytes in proptest::collection::vec(any::<u8>(), 0..300)) {
        let t = tokenize_bytes(&bytes);
        prop_assert!(t.iter().all(|&id| id < 256));
        prop_assert_eq!(detokenize(&t), bytes);
    }

    #[test]
    fn clm_targets_are_inputs_shifted(len in 20usize..400, bs in 1usize..5, seq in 1usize..10, seed in any::<u64>()) {
        let tokens: Vec<usize> = (0..len).map(|i| (i * 7 + 3) % 256).collect();
        prop_assume!(len > seq);
        for b in make_clm_batches(&tokens, bs, seq, seed).unwrap().take(12) {
            prop_assert_eq!(b.inputs.len(), b.batch_size * seq);
            prop_assert!(b.loss_mask.iter().all(|&m| m));
            for r in 0..b.batch_size {
                let row = &b.inputs[r * seq..(r + 1) * seq];
                let tgt = &b.targets[r * seq..(r + 1) * seq];
                prop_assert_eq!(&row[1..], &tgt[..seq - 1]);
                // the corpus steps by 7 mod 256 so the last target is known
                prop_assert_eq!(tgt[seq - 1], (row[seq - 1] + 7) % 256);
            }
        }
    }

    #[test]
    fn batch_streams_are_deterministic(seed in any::<u64>()) {
        let tokens: Vec<usize> = (0..600).map(|i| (i * 11) % 256).collect();
        let a: Vec<_> = make_clm_batches(&tokens, 3, 8, seed).unwrap().take(40).collect();
        let b: Vec<_> = make_clm_batches(&tokens, 3, 8, seed).unwrap().take(40).collect();
        prop_assert_eq!(a, b);
        let a: Vec<_> = make_mlm_batches(&tokens, 3, 8, 0.15, seed).unwrap().take(40).collect();
        let b: Vec<_> = make_mlm_batches(&tokens, 3, 8, 0.15, seed).unwrap().take(40).collect();
        prop_assert_eq!(a, b);
    }
}
