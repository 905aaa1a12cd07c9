use gdr_core::data::{
    gen_synthetic, make_batches, Example, SyntheticSpec, Task, Vocab, BOS, EOS, NUM_RESERVED, PAD, UNK,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn example(seed: usize) -> Example {
    let n = 1 + seed % 7;
    let mut src: Vec<usize> = (0..n).map(|i| NUM_RESERVED + (seed + i) % 5).collect();
    let mut tgt: Vec<usize> = (0..1 + (seed / 3) % 6).map(|i| NUM_RESERVED + (seed * 7 + i) % 5).collect();
    src.push(EOS);
    tgt.push(EOS);
    Example { src, tgt }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn an_epoch_covers_every_pair_once(n in 1usize..40, budget in 1usize..64, seed in any::<u64>()) {
        let examples: Vec<Example> = (0..n).map(example).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batches = make_batches(&examples, budget, &mut rng).unwrap();
        let mut seen: Vec<Example> = Vec::new();
        for b in &batches {
            let longest = b.src_len.max(b.tgt_len);
            prop_assert!(b.batch == 1 || b.batch * longest <= budget);
            for r in 0..b.batch {
                let src: Vec<usize> = (0..b.src_len).filter(|&i| b.src_mask[r * b.src_len + i]).map(|i| b.src_ids[r * b.src_len + i]).collect();
                let tgt: Vec<usize> = (0..b.tgt_len).filter(|&t| b.tgt_mask[r * b.tgt_len + t]).map(|t| b.tgt_out[r * b.tgt_len + t]).collect();
                prop_assert_eq!(b.tgt_in[r * b.tgt_len], BOS);
                for t in 1..tgt.len() {
                    prop_assert_eq!(b.tgt_in[r * b.tgt_len + t], tgt[t - 1]);
                }
                for t in tgt.len()..b.tgt_len {
                    prop_assert_eq!(b.tgt_out[r * b.tgt_len + t], PAD);
                }
                seen.push(Example { src, tgt });
            }
        }
        let mut want = examples.clone();
        want.sort_by(|a, b| (&a.src, &a.tgt).cmp(&(&b.src, &b.tgt)));
        seen.sort_by(|a, b| (&a.src, &a.tgt).cmp(&(&b.src, &b.tgt)));
        prop_assert_eq!(seen, want);
    }

    #[test]
    fn synthetic_alignments_are_consistent(
        task in prop_oneof![Just(Task::Copy), Just(Task::Reverse), Just(Task::Lexicon)],
        vocab in 2usize..30,
        max_len in 1usize..15,
        seed in any::<u64>(),
        filler in prop_oneof![Just(0.0), Just(0.3)],
    ) {
        let mut spec = SyntheticSpec::new(task, vocab, 1, max_len, 5, seed);
        if task == Task::Lexicon {
            spec.filler_rate = filler;
        }
        let table = spec.translation_table();
        for p in gen_synthetic(&spec).unwrap() {
            prop_assert!(!p.source.is_empty() && p.source.len() <= max_len);
            let mut hit = vec![false; p.target.len()];
            for (i, a) in p.alignment.iter().enumerate() {
                match a {
                    Some(t) => {
                        prop_assert!(!hit[*t]);
                        hit[*t] = true;
                        let want = match task {
                            Task::Lexicon => table[&p.source[i]].clone(),
                            _ => p.source[i].clone(),
                        };
                        prop_assert_eq!(&p.target[*t], &want);
                    }
                    None => prop_assert!(p.source[i].starts_with('f')),
                }
            }
            prop_assert!(hit.into_iter().all(|h| h));
        }
    }

    #[test]
    fn vocab_round_trip(words in proptest::collection::vec("[a-e]{1,3}", 1..20)) {
        let line = words.join(" ");
        let v = Vocab::build([line.as_str()], 1000).unwrap();
        let ids = v.encode(&line);
        prop_assert!(ids.iter().all(|&i| i >= NUM_RESERVED && i != UNK));
        prop_assert_eq!(v.decode(&ids).join(" "), line);
        let v2 = Vocab::from_tokens(v.tokens()[NUM_RESERVED..].iter().cloned()).unwrap();
        prop_assert_eq!(v2.tokens(), v.tokens());
    }
}
