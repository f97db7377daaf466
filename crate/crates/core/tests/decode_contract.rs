mod common;

use docnmt::decode::{beam_search, beam_search_outcome, BeamConfig, InferMode, NeuralTranslator};
use docnmt::tokenizer::{EOS, SEN};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn source(rng: &mut ChaCha8Rng, v: u32, len: usize) -> Vec<u32> {
    (0..len).map(|_| if rng.gen_bool(0.15) { SEN } else { rng.gen_range(5..v) }).collect()
}

#[test]
fn beam_one_is_greedy() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..20 {
        let params = common::micro_model(30, seed);
        let src = source(&mut rng, 30, 6);
        let required = rng.gen_range(1..4);
        let config = BeamConfig { beam: 1, max_len: Some(12), ..BeamConfig::default() };
        let hyp = beam_search(&params, &src, 0, &config, required).unwrap();
        let (ids, finished) = common::greedy(&params, &src, 0, 12, required);
        assert_eq!(hyp.ids, ids, "seed {seed}");
        assert_eq!(hyp.finished, finished);
        assert_eq!(hyp.forced_stop, !finished);
    }
}

#[test]
fn covering_beam_is_exhaustive() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (i, (v, max_len)) in [(7usize, 5usize), (8, 4), (10, 4), (12, 3)].into_iter().enumerate() {
        let params = common::micro_model(v, i as u64);
        let src = source(&mut rng, v as u32, 4);
        let required = 1 + i % 2;
        let all = common::exhaustive(&params, &src, 0, max_len, required, 0.6);
        let (best_ids, best) = all.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap().clone();
        let model = NeuralTranslator { params: &params, lang: 0 };
        let covering = BeamConfig { beam: 100_000, max_len: Some(max_len), mode: InferMode::Doc, ..BeamConfig::default() };
        let out = beam_search_outcome(&model, &src, &covering, required).unwrap();
        assert_eq!(out.finished.len(), all.len());
        assert!((out.best.score - best).abs() < 1e-4, "{} vs {best}", out.best.score);
        assert_eq!(out.best.ids, best_ids);

        let narrow = BeamConfig { beam: v, ..covering };
        let out = beam_search_outcome(&model, &src, &narrow, required).unwrap();
        for h in &out.finished {
            let oracle = all.iter().find(|(ids, _)| ids == &h.ids).expect("finished output is admissible").1;
            assert!((h.score - oracle).abs() < 1e-4);
            assert!(h.score <= out.best.score);
            assert_eq!(h.ids.last(), Some(&EOS));
        }
        if out.best.finished {
            assert!(out.best.score <= best + 1e-4);
        } else {
            assert!(out.finished.is_empty() && out.best.forced_stop);
        }
    }
}
