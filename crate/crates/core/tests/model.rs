mod common;

use proptest::prelude::*;
use pst_core::diffarray::{Mode, Tape};
use pst_core::model::{Batch, Fusion, ModelConfig, PhotoSample, PsTransformer};
use pst_core::objective::graph_loss;
use pst_core::synthdata::{render_sample, sample_lights, SceneSpec, SurfaceKind};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config() -> ModelConfig {
    ModelConfig {
        channels: 1,
        d: 16,
        heads: 4,
        blocks: 2,
        feat: 8,
        dropout: 0.1,
    }
}

fn scene(size: usize, m: usize, seed: u64) -> PhotoSample {
    let mut spec = SceneSpec::lambertian_sphere(size, seed);
    spec.kind = SurfaceKind::Blob;
    spec.specular = 0.3;
    let lights = sample_lights(m, 0.2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    render_sample(&spec, &lights).unwrap()
}

fn max_abs(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max)
}

/// Largest output change when the lights of `sample` are shuffled.
pub fn reorder_gap(model: &PsTransformer<f32>, sample: &PhotoSample, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..sample.light_count()).collect();
    order.shuffle(&mut rng);
    let shuffled = sample.select_lights(&order).unwrap();
    let a = model.forward(sample, Mode::Eval, &mut rng).unwrap();
    let b = model.forward(&shuffled, Mode::Eval, &mut rng).unwrap();
    max_abs(&a.normal.flat(), &b.normal.flat())
        .max(max_abs(a.pooled1.data(), b.pooled1.data()))
        .max(max_abs(a.pooled2.data(), b.pooled2.data()))
}

#[test]
fn light_order_does_not_matter() {
    let model = PsTransformer::<f32>::new(small_config(), 3).unwrap();
    for seed in 0..5 {
        let gap = reorder_gap(&model, &scene(8, 10, seed), seed);
        assert!(gap < 1e-5, "seed {seed}: {gap}");
    }
}

#[test]
fn single_predictions_follow_their_image() {
    let model = PsTransformer::<f32>::new(small_config(), 3).unwrap();
    let s = scene(8, 4, 1);
    let order = [2, 0, 3, 1];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = model.forward(&s, Mode::Eval, &mut rng).unwrap();
    let b = model.forward(&s.select_lights(&order).unwrap(), Mode::Eval, &mut rng).unwrap();
    for (k, &j) in order.iter().enumerate() {
        assert!(max_abs(&a.single[j].flat(), &b.single[k].flat()) < 1e-5);
    }
}

#[test]
fn any_set_size_gives_unit_normals() {
    let model = PsTransformer::<f32>::new(small_config(), 5).unwrap();
    let full = scene(8, 32, 2);
    for m in [1, 3, 5, 10, 16, 32] {
        let s = full.select_lights(&(0..m).collect::<Vec<_>>()).unwrap();
        let out = model.forward(&s, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out.single.len(), m);
        for (n, &inside) in out.normal.normals.iter().zip(&out.normal.mask) {
            let len = n.iter().map(|v| v * v).sum::<f32>().sqrt();
            if inside {
                assert!((len - 1.0).abs() < 1e-5 && n.iter().all(|v| v.is_finite()), "m={m}: {n:?}");
            }
        }
    }
}

#[test]
fn every_head_receives_gradient() {
    let model = PsTransformer::<f64>::new(ModelConfig::tiny(), 2).unwrap();
    let s = scene(4, 3, 7);
    let batch = Batch::<f64>::from_samples(&[&s]).unwrap();
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let g = model.build_graph(&mut tape, &bound, &batch, Mode::Train, Fusion::Both, &mut rng).unwrap();
    let loss = graph_loss(&mut tape, &g, &batch).unwrap();
    let norm = |term, prefix: &str, tape: &Tape<f64>| {
        let grads = tape.backward(term).unwrap();
        bound
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, &v)| grads.wrt(v).data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
    };
    for prefix in ["branch1.", "branch2.", "psi.", "head.single.", "head.agg1.", "head.agg2."] {
        assert!(norm(loss.total, prefix, &tape) > 0.0, "{prefix} gets no gradient");
    }
    // each auxiliary term trains its own head and nothing on the other side
    assert!(norm(loss.single, "head.single.", &tape) > 0.0);
    assert_eq!(norm(loss.single, "branch1.", &tape), 0.0);
    assert!(norm(loss.agg1, "head.agg1.", &tape) > 0.0);
    assert_eq!(norm(loss.agg1, "branch2.", &tape), 0.0);
    assert!(norm(loss.agg2, "head.agg2.", &tape) > 0.0);
    assert_eq!(norm(loss.agg2, "branch1.", &tape), 0.0);
    assert_eq!(norm(loss.main, "head.", &tape), 0.0);
}

#[test]
fn disabling_a_branch_removes_its_influence() {
    let model = PsTransformer::<f32>::new(small_config(), 9).unwrap();
    let s = scene(8, 5, 3);
    let mut other = model.clone();
    let names: Vec<String> = model.params.names().filter(|n| n.starts_with("branch2.")).cloned().collect();
    for name in names {
        let t = other.params.get_mut(&name).unwrap();
        t.data_mut().iter_mut().for_each(|v| *v = *v * -1.5 + 0.01);
    }
    let run = |m: &PsTransformer<f32>, f| {
        m.forward_batch(&[&s], Mode::Eval, f, &mut ChaCha8Rng::seed_from_u64(0)).unwrap().remove(0)
    };
    let (a, b) = (run(&model, Fusion::PixelOnly), run(&other, Fusion::PixelOnly));
    assert_eq!(a.normal, b.normal);
    let (a, b) = (run(&model, Fusion::Both), run(&other, Fusion::Both));
    assert_ne!(a.normal, b.normal);
}

#[test]
fn eval_mode_is_deterministic_and_train_mode_uses_dropout() {
    let model = PsTransformer::<f32>::new(small_config(), 1).unwrap();
    let s = scene(8, 5, 3);
    let a = model.forward(&s, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = model.forward(&s, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(a.normal, b.normal);
    let c = model.forward(&s, Mode::Train, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let d = model.forward(&s, Mode::Train, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_ne!(c.normal, d.normal);
}

#[test]
fn batched_forward_matches_single_forward_in_eval() {
    let model = PsTransformer::<f32>::new(small_config(), 4).unwrap();
    let (s1, s2) = (scene(8, 4, 1), scene(8, 4, 2));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let both = model.forward_batch(&[&s1, &s2], Mode::Eval, Fusion::Both, &mut rng).unwrap();
    let one = model.forward(&s2, Mode::Eval, &mut rng).unwrap();
    assert!(max_abs(&both[1].normal.flat(), &one.normal.flat()) < 1e-5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn reordering_never_changes_outputs(seed in any::<u64>(), m in 1usize..12) {
        let model = PsTransformer::<f32>::new(ModelConfig { d: 8, heads: 2, blocks: 1, feat: 4, ..small_config() }, seed).unwrap();
        let s = scene(6, m, seed);
        prop_assert!(reorder_gap(&model, &s, seed) < 1e-5);
    }
}
