//! Finite-difference checks of every differentiable op and the reduced model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    encoder_block, multihead_attention, pma_pool, EncoderBlockParams, MultiheadParams, PmaParams,
    Regime,
};
use crate::diffarray::{grad_check, Mode, RunningStats, Tape, Tensor, Var};
use crate::model::{Batch, Fusion, ModelConfig, PhotoSample, PsTransformer};
use crate::objective::graph_loss;
use crate::params::{grad_check_store, ParamStore};
use crate::synthdata::{render_sample, sample_lights, SceneSpec};
use crate::Result;

/// Tolerance for single operations.
pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
/// Tolerance for the assembled network.
pub const MODEL_TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.error < self.tolerance
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Reduces `y` to a scalar with fixed random weights so every output
/// element carries a distinct gradient.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = tape.value(y).len();
    tape.weighted_sum(y, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

type Case = (&'static str, Vec<Vec<usize>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>);

fn primitive_cases() -> Vec<Case> {
    fn case(
        name: &'static str,
        shapes: &[&[usize]],
        f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
    ) -> Case {
        (name, shapes.iter().map(|s| s.to_vec()).collect(), Box::new(f))
    }
    vec![
        case("add", &[&[3, 4], &[3, 4]], |t, v| t.add(v[0], v[1])),
        case("sub", &[&[3, 4], &[3, 4]], |t, v| t.sub(v[0], v[1])),
        case("mul", &[&[3, 4], &[3, 4]], |t, v| t.mul(v[0], v[1])),
        case("scale", &[&[5]], |t, v| Ok(t.scale(v[0], 1.7))),
        case("square", &[&[5]], |t, v| Ok(t.square(v[0]))),
        case("add_bias", &[&[2, 3, 4], &[4]], |t, v| t.add_bias(v[0], v[1])),
        case("add_channel_bias", &[&[2, 3, 2, 2], &[3]], |t, v| {
            t.add_channel_bias(v[0], v[1])
        }),
        case("mul_const", &[&[6]], |t, v| {
            t.mul_const(v[0], vec![0.5, -1.0, 2.0, 0.0, 3.0, -0.25])
        }),
        case("sum", &[&[2, 3]], |t, v| Ok(t.sum(v[0]))),
        case("mean", &[&[2, 3]], |t, v| Ok(t.mean(v[0]))),
        case("reshape", &[&[2, 6]], |t, v| t.reshape(v[0], &[3, 4])),
        case("permute", &[&[2, 3, 4]], |t, v| t.permute(v[0], &[2, 0, 1])),
        case("transpose_last", &[&[2, 3, 4]], |t, v| t.transpose_last(v[0])),
        case("concat", &[&[2, 3], &[2, 2]], |t, v| t.concat(&[v[0], v[1]], 1)),
        case("leaky_relu", &[&[12]], |t, v| Ok(t.leaky_relu(v[0]))),
        case("gelu", &[&[12]], |t, v| Ok(t.gelu(v[0]))),
        case("dropout", &[&[12]], |t, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            t.dropout(v[0], 0.3, Mode::Train, &mut rng)
        }),
        case("softmax", &[&[3, 5]], |t, v| t.softmax(v[0], 1)),
        case("l2_normalize", &[&[4, 3]], |t, v| t.l2_normalize(v[0], 1e-12)),
        case("matmul", &[&[2, 3, 4], &[4, 5]], |t, v| t.matmul(v[0], v[1])),
        case("linear", &[&[3, 4], &[4, 2], &[2]], |t, v| t.linear(v[0], v[1], v[2])),
        case("conv2d_3x3", &[&[2, 2, 4, 5], &[3, 2, 3, 3], &[3]], |t, v| {
            t.conv2d_3x3(v[0], v[1], v[2])
        }),
        case("batchnorm2d_train", &[&[3, 2, 3, 3], &[2], &[2]], |t, v| {
            Ok(t.batchnorm2d(v[0], v[1], v[2], &RunningStats::new(2), Mode::Train)?.0)
        }),
        case("batchnorm2d_eval", &[&[3, 2, 3, 3], &[2], &[2]], |t, v| {
            let stats = RunningStats {
                mean: vec![0.1, -0.2],
                var: vec![0.5, 2.0],
            };
            Ok(t.batchnorm2d(v[0], v[1], v[2], &stats, Mode::Eval)?.0)
        }),
    ]
}

fn attention_cases() -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let d = 8;
    let mut out = Vec::new();

    let mut store = ParamStore::<f64>::new();
    MultiheadParams::declare(&mut store, "mha", d, &mut rng);
    let xq = random(&[2, 3, d], &mut rng);
    let xkv = random(&[2, 4, d], &mut rng);
    let error = grad_check_store(&store, &[xq, xkv], EPS, |tape, bound, x| {
        let p = MultiheadParams::bind(bound, "mha", 2)?;
        let y = multihead_attention(tape, x[0], x[1], &p)?;
        project(tape, y, 1)
    })?;
    out.push(outcome("multihead_attention", error, PRIMITIVE_TOLERANCE));

    let mut store = ParamStore::<f64>::new();
    EncoderBlockParams::declare(&mut store, "block", d, &mut rng);
    let x = random(&[2, 3, d], &mut rng);
    let error = grad_check_store(&store, &[x], EPS, |tape, bound, x| {
        let p = EncoderBlockParams::bind(bound, "block", 2)?;
        let mut drop_rng = ChaCha8Rng::seed_from_u64(8);
        let mut regime = Regime {
            mode: Mode::Train,
            dropout: 0.1,
            rng: &mut drop_rng,
        };
        let y = encoder_block(tape, x[0], &p, &mut regime)?;
        project(tape, y, 2)
    })?;
    out.push(outcome("encoder_block", error, PRIMITIVE_TOLERANCE));

    let mut store = ParamStore::<f64>::new();
    PmaParams::declare(&mut store, "pool", d, &mut rng);
    let x = random(&[3, 4, d], &mut rng);
    let error = grad_check_store(&store, &[x], EPS, |tape, bound, x| {
        let p = PmaParams::bind(bound, "pool", 2)?;
        let y = pma_pool(tape, x[0], &p)?;
        project(tape, y, 3)
    })?;
    out.push(outcome("pma_pool", error, PRIMITIVE_TOLERANCE));
    Ok(out)
}

fn outcome(name: &str, error: f64, tolerance: f64) -> CheckOutcome {
    CheckOutcome {
        name: name.to_string(),
        error,
        tolerance,
    }
}

/// A rendered 4x4 patch with three lights and ground-truth normals.
pub fn reduced_sample(seed: u64) -> Result<PhotoSample> {
    let mut spec = SceneSpec::lambertian_sphere(4, seed);
    spec.specular = 0.3;
    let lights = sample_lights(3, 0.3, &mut ChaCha8Rng::seed_from_u64(seed))?;
    render_sample(&spec, &lights)
}

/// Full-network check of the total loss on a 4x4 patch, `m = 3`, `d = 8`,
/// two heads, in f64 and train mode.
pub fn model_check(seed: u64) -> Result<f64> {
    let model = PsTransformer::<f64>::new(ModelConfig::tiny(), seed)?;
    let sample = reduced_sample(seed)?;
    let batch = Batch::<f64>::from_samples(&[&sample])?;
    grad_check_store(&model.params, &[], EPS, |tape, bound, _| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = model.build_graph(tape, bound, &batch, Mode::Train, Fusion::Both, &mut rng)?;
        Ok(graph_loss(tape, &g, &batch)?.total)
    })
}

/// Every primitive, the attention components and the reduced model.
pub fn run_gradient_suite() -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut out = Vec::new();
    for (i, (name, shapes, f)) in primitive_cases().into_iter().enumerate() {
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random(s, &mut rng)).collect();
        let error = grad_check(
            |tape, vars| {
                let y = f(tape, vars)?;
                project(tape, y, 100 + i as u64)
            },
            &inputs,
            EPS,
        )?;
        out.push(outcome(name, error, PRIMITIVE_TOLERANCE));
    }
    out.extend(attention_cases()?);
    out.push(outcome("full_model", model_check(5)?, MODEL_TOLERANCE));
    Ok(out)
}
