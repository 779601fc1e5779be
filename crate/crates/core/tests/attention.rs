mod common;

use common::{oracle_encoder_block, oracle_multihead, Mat};
use proptest::prelude::*;
use pst_core::attention::{
    encoder_block, multihead_attention, pma_pool, EncoderBlockParams, MultiheadParams, PmaParams,
    Regime,
};
use pst_core::diffarray::{Mode, Tape, Tensor};
use pst_core::params::ParamStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Worst deviation of the multi-head path from the loop oracle.
pub fn multihead_gap(seed: u64, n: usize, m: usize, d: usize, heads: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    MultiheadParams::declare(&mut store, "a", d, &mut rng);
    let xq = random(&[n, d], &mut rng);
    let xkv = random(&[m, d], &mut rng);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let p = MultiheadParams::bind(&bound, "a", heads).unwrap();
    let (q, kv) = (tape.constant(xq.clone()), tape.constant(xkv.clone()));
    let y = multihead_attention(&mut tape, q, kv, &p).unwrap();
    let want = oracle_multihead(&store, "a", &Mat::from_tensor(&xq), &Mat::from_tensor(&xkv), heads);
    max_abs(tape.value(y), &want.data)
}

pub fn encoder_gap(seed: u64, m: usize, d: usize, heads: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    EncoderBlockParams::declare(&mut store, "b", d, &mut rng);
    let x = random(&[m, d], &mut rng);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let p = EncoderBlockParams::bind(&bound, "b", heads).unwrap();
    let xv = tape.constant(x.clone());
    let mut regime = Regime {
        mode: Mode::Eval,
        dropout: 0.1,
        rng: &mut rng,
    };
    let y = encoder_block(&mut tape, xv, &p, &mut regime).unwrap();
    let want = oracle_encoder_block(&store, "b", &Mat::from_tensor(&x), heads);
    max_abs(tape.value(y), &want.data)
}

#[test]
fn multihead_matches_loop_oracle() {
    for seed in 0..20 {
        for (n, m, d, heads) in [(1, 1, 2, 1), (3, 4, 8, 2), (2, 3, 8, 4), (4, 2, 6, 3)] {
            let gap = multihead_gap(seed, n, m, d, heads);
            assert!(gap < 1e-12, "seed {seed} n={n} m={m} d={d} h={heads}: {gap}");
        }
    }
}

#[test]
fn encoder_block_matches_loop_oracle() {
    for seed in 0..20 {
        for (m, d, heads) in [(1, 4, 1), (4, 8, 2), (3, 8, 8)] {
            let gap = encoder_gap(seed, m, d, heads);
            assert!(gap < 1e-12, "seed {seed}: {gap}");
        }
    }
}

#[test]
fn batched_sets_do_not_interact() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::<f64>::new();
    PmaParams::declare(&mut store, "p", 8, &mut rng);
    let x = random(&[3, 5, 8], &mut rng);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let p = PmaParams::bind(&bound, "p", 2).unwrap();
    let xv = tape.constant(x.clone());
    let all = pma_pool(&mut tape, xv, &p).unwrap();
    let all = tape.value(all).to_vec();
    for b in 0..3 {
        let one = Tensor::new(vec![5, 8], x.data()[b * 40..(b + 1) * 40].to_vec()).unwrap();
        let v = tape.constant(one);
        let y = pma_pool(&mut tape, v, &p).unwrap();
        assert!(max_abs(tape.value(y), &all[b * 8..(b + 1) * 8]) < 1e-12);
    }
}

#[test]
fn empty_sets_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f64>::new();
    PmaParams::declare(&mut store, "p", 4, &mut rng);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let p = PmaParams::bind(&bound, "p", 2).unwrap();
    let x = tape.constant(Tensor::zeros(vec![2, 0, 4]));
    assert!(matches!(pma_pool(&mut tape, x, &p), Err(pst_core::Error::EmptySet(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pooling_ignores_element_order(seed in any::<u64>(), m in 1usize..12, swaps in prop::collection::vec((0usize..12, 0usize..12), 0..20)) {
        let d = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        PmaParams::declare(&mut store, "p", d, &mut rng);
        let x = random(&[m, d], &mut rng);
        let mut order: Vec<usize> = (0..m).collect();
        for (a, b) in swaps {
            order.swap(a % m, b % m);
        }
        let shuffled = Tensor::new(vec![m, d], order.iter().flat_map(|&i| x.data()[i * d..(i + 1) * d].to_vec()).collect()).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let p = PmaParams::bind(&bound, "p", 2).unwrap();
        let (a, b) = (tape.constant(x), tape.constant(shuffled));
        let ya = pma_pool(&mut tape, a, &p).unwrap();
        let yb = pma_pool(&mut tape, b, &p).unwrap();
        prop_assert!(max_abs(tape.value(ya), tape.value(yb)) < 1e-12);
    }

    #[test]
    fn encoder_is_order_equivariant(seed in any::<u64>(), m in 1usize..8) {
        let d = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        EncoderBlockParams::declare(&mut store, "b", d, &mut rng);
        let x = random(&[m, d], &mut rng);
        let reversed: Vec<f64> = (0..m).rev().flat_map(|i| x.data()[i * d..(i + 1) * d].to_vec()).collect();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let p = EncoderBlockParams::bind(&bound, "b", 4).unwrap();
        let a = tape.constant(x);
        let b = tape.constant(Tensor::new(vec![m, d], reversed).unwrap());
        let mut regime = Regime { mode: Mode::Eval, dropout: 0.1, rng: &mut rng };
        let ya = encoder_block(&mut tape, a, &p, &mut regime).unwrap();
        let yb = encoder_block(&mut tape, b, &p, &mut regime).unwrap();
        let (ya, yb) = (tape.value(ya), tape.value(yb));
        for i in 0..m {
            let j = m - 1 - i;
            prop_assert!(max_abs(&ya[i * d..(i + 1) * d], &yb[j * d..(j + 1) * d]) < 1e-12);
        }
    }
}
