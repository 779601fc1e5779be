//! The dual-branch network.
//!
//! Branch 1 aggregates raw `[intensity, light]` observations per pixel.
//! Branch 2 first runs a shared CNN over each image (with the object mask as
//! an extra channel), appends the light direction to every pixel of the
//! resulting feature map, and aggregates those per pixel. Both aggregations
//! are an embedding, a stack of encoder blocks, and attention pooling. The
//! pooled features and the mask are concatenated per pixel and decoded to a
//! normal map by a CNN. Three auxiliary heads predict normals from the
//! single-image features and from each branch's pooled feature.

mod checkpoint;
mod sample;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{encode, pma_pool, EncoderParams, Linear, PmaParams, Regime};
use crate::diffarray::{Float, Mode, RunningStats, Tape, Tensor, Var};
use crate::params::{Bound, ParamStore};
use crate::{Error, Result};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint};
pub use sample::{normalize_normals, NormalMap, PhotoSample};

const PHI_LAYERS: usize = 6;
const SINGLE_LAYERS: usize = 6;
const PSI_LAYERS: usize = 5;
const NORMALIZE_EPS: f64 = 1e-12;

/// Network widths. Defaults follow the published architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Colour channels per image.
    pub channels: usize,
    /// Attention width.
    pub d: usize,
    pub heads: usize,
    /// Encoder blocks per branch.
    pub blocks: usize,
    /// Width of the per-image CNN feature map.
    pub feat: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 3,
            d: 256,
            heads: 8,
            blocks: 3,
            feat: 64,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    /// Small widths for finite-difference checks.
    pub fn tiny() -> Self {
        ModelConfig {
            channels: 1,
            d: 8,
            heads: 2,
            blocks: 3,
            feat: 4,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.d == 0 || self.feat == 0 || self.blocks == 0 {
            return Err(Error::Config(format!("all widths must be positive: {self:?}")));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Width of branch-2 per-image features after the light map is appended.
    pub fn single_width(&self) -> usize {
        self.feat + 3
    }

    /// Per-pixel width entering the normal predictor: both pooled features and the mask.
    pub fn fused_width(&self) -> usize {
        2 * self.d + 1
    }
}

/// Which pooled features reach the normal predictor; the other is replaced by zeros.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    Both,
    PixelOnly,
    ImageOnly,
}

/// Same-sized samples stacked for one graph.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub size: usize,
    pub lights_per_sample: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `[B, m, h, w, c]`
    pub images: Vec<T>,
    /// `[B, m, 3]`
    pub lights: Vec<T>,
    /// `[B, h, w]`
    pub mask: Vec<T>,
    /// `[B, h, w, 3]`
    pub normals: Option<Vec<T>>,
}

impl<T: Float> Batch<T> {
    pub fn from_samples(samples: &[&PhotoSample]) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::EmptySet("batch of zero samples".into()));
        };
        let (m, h, w, c) = (first.light_count(), first.height, first.width, first.channels);
        if m == 0 {
            return Err(Error::EmptySet("sample has no lights".into()));
        }
        if h < 3 || w < 3 {
            return Err(Error::PatchTooSmall { h, w });
        }
        for s in samples {
            if (s.light_count(), s.height, s.width, s.channels) != (m, h, w, c) {
                return Err(Error::Shape(format!(
                    "batch mixes {}x{}x{} with {} lights and {}x{}x{} with {} lights",
                    h,
                    w,
                    c,
                    m,
                    s.height,
                    s.width,
                    s.channels,
                    s.light_count()
                )));
            }
        }
        let lit = |v: &f32| T::lit(*v as f64);
        let normals = if samples.iter().all(|s| s.normals.is_some()) {
            Some(
                samples
                    .iter()
                    .flat_map(|s| s.normals.as_ref().unwrap().iter().map(lit))
                    .collect(),
            )
        } else {
            None
        };
        Ok(Batch {
            size: samples.len(),
            lights_per_sample: m,
            height: h,
            width: w,
            channels: c,
            images: samples.iter().flat_map(|s| s.images.iter().map(lit)).collect(),
            lights: samples
                .iter()
                .flat_map(|s| s.lights.iter().flatten().map(lit))
                .collect(),
            mask: samples.iter().flat_map(|s| s.mask.iter().map(lit)).collect(),
            normals,
        })
    }

    fn pixels(&self) -> usize {
        self.size * self.height * self.width
    }
}

/// Per-pixel observation sets `[I_j, l_j]` as `[h*w, m, c+3]`.
pub fn build_pixel_inputs(sample: &PhotoSample) -> Result<Tensor<f32>> {
    let batch = Batch::<f32>::from_samples_unchecked(sample);
    Ok(pixel_inputs(&batch))
}

impl<T: Float> Batch<T> {
    fn from_samples_unchecked(sample: &PhotoSample) -> Self {
        let lit = |v: &f32| T::lit(*v as f64);
        Batch {
            size: 1,
            lights_per_sample: sample.light_count(),
            height: sample.height,
            width: sample.width,
            channels: sample.channels,
            images: sample.images.iter().map(lit).collect(),
            lights: sample.lights.iter().flatten().map(lit).collect(),
            mask: sample.mask.iter().map(lit).collect(),
            normals: sample.normals.as_ref().map(|n| n.iter().map(lit).collect()),
        }
    }
}

fn pixel_inputs<T: Float>(batch: &Batch<T>) -> Tensor<T> {
    let (b, m, h, w, c) = (
        batch.size,
        batch.lights_per_sample,
        batch.height,
        batch.width,
        batch.channels,
    );
    let hw = h * w;
    let width = c + 3;
    let mut data = Vec::with_capacity(b * hw * m * width);
    for bi in 0..b {
        for p in 0..hw {
            for j in 0..m {
                let img = ((bi * m + j) * hw + p) * c;
                data.extend_from_slice(&batch.images[img..img + c]);
                let l = (bi * m + j) * 3;
                data.extend_from_slice(&batch.lights[l..l + 3]);
            }
        }
    }
    Tensor::new(vec![b * hw, m, width], data).expect("pixel input extents")
}

/// `[B*m, c+1, h, w]`: each image channels-first with the mask appended.
fn cnn_inputs<T: Float>(batch: &Batch<T>) -> Tensor<T> {
    let (b, m, h, w, c) = (
        batch.size,
        batch.lights_per_sample,
        batch.height,
        batch.width,
        batch.channels,
    );
    let hw = h * w;
    let mut data = vec![T::zero(); b * m * (c + 1) * hw];
    for bi in 0..b {
        for j in 0..m {
            let out = &mut data[(bi * m + j) * (c + 1) * hw..][..(c + 1) * hw];
            let img = &batch.images[(bi * m + j) * hw * c..][..hw * c];
            for p in 0..hw {
                for ch in 0..c {
                    out[ch * hw + p] = img[p * c + ch];
                }
                out[c * hw + p] = batch.mask[bi * hw + p];
            }
        }
    }
    Tensor::new(vec![b * m, c + 1, h, w], data).expect("cnn input extents")
}

/// `[B*m, 3, h, w]` with every pixel holding its image's light direction.
fn light_maps<T: Float>(batch: &Batch<T>) -> Tensor<T> {
    let (bm, hw) = (batch.size * batch.lights_per_sample, batch.height * batch.width);
    let mut data = Vec::with_capacity(bm * 3 * hw);
    for img in 0..bm {
        for axis in 0..3 {
            data.extend(std::iter::repeat(batch.lights[img * 3 + axis]).take(hw));
        }
    }
    Tensor::new(vec![bm, 3, batch.height, batch.width], data).expect("light map extents")
}

/// Graph handles produced by [`PsTransformer::build_graph`].
pub struct Graph<T> {
    /// `[B, h, w, 3]`, unit rows.
    pub normal: Var,
    /// `[B, m, h, w, 3]`, unit rows.
    pub single: Var,
    pub agg1: Var,
    pub agg2: Var,
    /// `[B*h*w, d]` pooled per-pixel features of each branch.
    pub pooled1: Var,
    pub pooled2: Var,
    /// `[B, 2d+1, h, w]` input of the normal predictor.
    pub fused: Var,
    /// `[B*m, feat+3, h, w]` single-image features with the light map.
    pub single_features: Var,
    /// Running statistics after a train-mode pass, by layer name.
    pub bn_updates: Vec<(String, RunningStats<T>)>,
}

/// Materialized predictions for one sample.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub normal: NormalMap,
    pub single: Vec<NormalMap>,
    pub agg1: NormalMap,
    pub agg2: NormalMap,
    /// `[h, w, d]`
    pub pooled1: Tensor<f32>,
    pub pooled2: Tensor<f32>,
    pub fused_width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PsTransformer<T: Float> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

struct ConvStack {
    convs: Vec<Linear>,
    norms: Vec<Option<(Var, Var, String)>>,
}

impl<T: Float> PsTransformer<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (c, d, feat) = (config.channels, config.d, config.feat);

        EncoderParams::declare(&mut store, "branch1.encoder", c + 3, d, config.blocks, &mut rng);
        PmaParams::declare(&mut store, "branch1.pool", d, &mut rng);

        for l in 0..PHI_LAYERS {
            let cin = if l == 0 { c + 1 } else { feat };
            store.declare_conv(&format!("branch2.phi.conv{l}"), cin, feat, &mut rng);
            if l + 1 < PHI_LAYERS {
                store.declare_batchnorm(&format!("branch2.phi.bn{l}"), feat);
            }
        }
        EncoderParams::declare(
            &mut store,
            "branch2.encoder",
            config.single_width(),
            d,
            config.blocks,
            &mut rng,
        );
        PmaParams::declare(&mut store, "branch2.pool", d, &mut rng);

        let fw = config.fused_width();
        for l in 0..PSI_LAYERS {
            let cout = if l + 1 == PSI_LAYERS { 3 } else { fw };
            store.declare_conv(&format!("psi.conv{l}"), fw, cout, &mut rng);
        }

        let sw = config.single_width();
        for l in 0..SINGLE_LAYERS {
            let cout = if l + 1 == SINGLE_LAYERS { 3 } else { sw };
            store.declare_conv(&format!("head.single.conv{l}"), sw, cout, &mut rng);
            if l + 1 < SINGLE_LAYERS {
                store.declare_batchnorm(&format!("head.single.bn{l}"), sw);
            }
        }
        for head in ["head.agg1", "head.agg2"] {
            store.declare_linear(&format!("{head}.fc0"), d, d, &mut rng);
            store.declare_linear(&format!("{head}.fc1"), d, 3, &mut rng);
        }

        Ok(PsTransformer {
            config,
            params: store,
        })
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let reference = PsTransformer::<T>::new(config.clone(), 0)?;
        for (name, t) in reference.params.params() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Contract(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Contract(format!("missing parameter {name}"))),
            }
        }
        for (name, _) in reference.params.buffers() {
            if params.buffer(name).is_none() {
                return Err(Error::Contract(format!("missing buffer {name}")));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Contract(format!(
                "{} parameters, expected {}",
                params.len(),
                reference.params.len()
            )));
        }
        Ok(PsTransformer { config, params })
    }

    fn conv_stack(&self, bound: &Bound, prefix: &str, layers: usize, normed: bool) -> Result<ConvStack> {
        let mut convs = Vec::with_capacity(layers);
        let mut norms = Vec::with_capacity(layers);
        for l in 0..layers {
            convs.push(Linear::bind(bound, &format!("{prefix}.conv{l}"))?);
            norms.push(if normed && l + 1 < layers {
                let name = format!("{prefix}.bn{l}");
                Some((
                    bound.get(&format!("{name}.gamma"))?,
                    bound.get(&format!("{name}.beta"))?,
                    name,
                ))
            } else {
                None
            });
        }
        Ok(ConvStack { convs, norms })
    }

    /// Conv layers with leaky ReLU (after batch norm, when present) between them
    /// and nothing after the last.
    fn run_stack(
        &self,
        tape: &mut Tape<T>,
        stack: &ConvStack,
        mut x: Var,
        mode: Mode,
        updates: &mut Vec<(String, RunningStats<T>)>,
    ) -> Result<Var> {
        let last = stack.convs.len() - 1;
        for (l, conv) in stack.convs.iter().enumerate() {
            x = tape.conv2d_3x3(x, conv.weight, conv.bias)?;
            if l == last {
                break;
            }
            if let Some((gamma, beta, name)) = &stack.norms[l] {
                let stats = self.params.running_stats(name)?;
                let (y, upd) = tape.batchnorm2d(x, *gamma, *beta, &stats, mode)?;
                if let Some(upd) = upd {
                    updates.push((name.clone(), upd));
                }
                x = y;
            }
            x = tape.leaky_relu(x);
        }
        Ok(x)
    }

    fn point_head(&self, tape: &mut Tape<T>, bound: &Bound, name: &str, f: Var) -> Result<Var> {
        let fc0 = Linear::bind(bound, &format!("{name}.fc0"))?;
        let fc1 = Linear::bind(bound, &format!("{name}.fc1"))?;
        let x = fc0.apply(tape, f)?;
        let x = tape.leaky_relu(x);
        fc1.apply(tape, x)
    }

    /// Records the whole network on `tape` for a batch.
    pub fn build_graph<R: Rng>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        batch: &Batch<T>,
        mode: Mode,
        fusion: Fusion,
        rng: &mut R,
    ) -> Result<Graph<T>> {
        let cfg = &self.config;
        if batch.lights_per_sample == 0 {
            return Err(Error::EmptySet("forward with zero lights".into()));
        }
        if batch.height < 3 || batch.width < 3 {
            return Err(Error::PatchTooSmall {
                h: batch.height,
                w: batch.width,
            });
        }
        if batch.channels != cfg.channels {
            return Err(Error::Shape(format!(
                "model expects {} channels, batch has {}",
                cfg.channels, batch.channels
            )));
        }
        let (b, m, h, w) = (batch.size, batch.lights_per_sample, batch.height, batch.width);
        let (d, sw, fw) = (cfg.d, cfg.single_width(), cfg.fused_width());
        let px = batch.pixels();
        let mut regime = Regime {
            mode,
            dropout: cfg.dropout,
            rng,
        };
        let mut bn_updates = Vec::new();

        // branch 1: raw observations
        let x1 = tape.constant(pixel_inputs(batch));
        let enc1 = EncoderParams::bind(bound, "branch1.encoder", cfg.blocks, cfg.heads)?;
        let pool1 = PmaParams::bind(bound, "branch1.pool", cfg.heads)?;
        let f1 = encode(tape, x1, &enc1, &mut regime)?;
        let pooled1 = pma_pool(tape, f1, &pool1)?;

        // branch 2: per-image CNN features with the light map appended
        let phi = self.conv_stack(bound, "branch2.phi", PHI_LAYERS, true)?;
        let img = tape.constant(cnn_inputs(batch));
        let feat = self.run_stack(tape, &phi, img, mode, &mut bn_updates)?;
        let lmap = tape.constant(light_maps(batch));
        let single_features = tape.concat(&[feat, lmap], 1)?;
        let x2 = tape.reshape(single_features, &[b, m, sw, h, w])?;
        let x2 = tape.permute(x2, &[0, 3, 4, 1, 2])?;
        let x2 = tape.reshape(x2, &[px, m, sw])?;
        let enc2 = EncoderParams::bind(bound, "branch2.encoder", cfg.blocks, cfg.heads)?;
        let pool2 = PmaParams::bind(bound, "branch2.pool", cfg.heads)?;
        let f2 = encode(tape, x2, &enc2, &mut regime)?;
        let pooled2 = pma_pool(tape, f2, &pool2)?;

        // fusion and normal prediction
        let zeros = |tape: &mut Tape<T>| tape.constant(Tensor::zeros(vec![px, d]));
        let (p1, p2) = match fusion {
            Fusion::Both => (pooled1, pooled2),
            Fusion::PixelOnly => (pooled1, zeros(tape)),
            Fusion::ImageOnly => (zeros(tape), pooled2),
        };
        let mask = tape.constant(Tensor::new(vec![px, 1], batch.mask.clone())?);
        let fused = tape.concat(&[p1, p2, mask], 1)?;
        let fused = tape.reshape(fused, &[b, h, w, fw])?;
        let fused = tape.permute(fused, &[0, 3, 1, 2])?;
        let psi = self.conv_stack(bound, "psi", PSI_LAYERS, false)?;
        let raw = self.run_stack(tape, &psi, fused, mode, &mut bn_updates)?;
        let raw = tape.permute(raw, &[0, 2, 3, 1])?;
        let normal = tape.l2_normalize(raw, T::lit(NORMALIZE_EPS))?;

        // intermediate heads
        let head = self.conv_stack(bound, "head.single", SINGLE_LAYERS, true)?;
        let raw = self.run_stack(tape, &head, single_features, mode, &mut bn_updates)?;
        let raw = tape.reshape(raw, &[b, m, 3, h, w])?;
        let raw = tape.permute(raw, &[0, 1, 3, 4, 2])?;
        let single = tape.l2_normalize(raw, T::lit(NORMALIZE_EPS))?;

        let mut agg = Vec::with_capacity(2);
        for (name, f) in [("head.agg1", pooled1), ("head.agg2", pooled2)] {
            let raw = self.point_head(tape, bound, name, f)?;
            let raw = tape.reshape(raw, &[b, h, w, 3])?;
            agg.push(tape.l2_normalize(raw, T::lit(NORMALIZE_EPS))?);
        }

        Ok(Graph {
            normal,
            single,
            agg1: agg[0],
            agg2: agg[1],
            pooled1,
            pooled2,
            fused,
            single_features,
            bn_updates,
        })
    }

    /// Predictions for each sample of a batch.
    pub fn forward_batch<R: Rng>(
        &self,
        samples: &[&PhotoSample],
        mode: Mode,
        fusion: Fusion,
        rng: &mut R,
    ) -> Result<Vec<ForwardOutput>> {
        let batch = Batch::from_samples(samples)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let g = self.build_graph(&mut tape, &bound, &batch, mode, fusion, rng)?;
        let (m, h, w, d) = (batch.lights_per_sample, batch.height, batch.width, self.config.d);
        let hw = h * w;
        let to_f32 = |v: &[T]| v.iter().map(|x| x.as_f64() as f32).collect::<Vec<f32>>();
        let normal = to_f32(tape.value(g.normal));
        let single = to_f32(tape.value(g.single));
        let agg1 = to_f32(tape.value(g.agg1));
        let agg2 = to_f32(tape.value(g.agg2));
        let pooled1 = to_f32(tape.value(g.pooled1));
        let pooled2 = to_f32(tape.value(g.pooled2));
        Ok(samples
            .iter()
            .enumerate()
            .map(|(bi, s)| {
                let mask: Vec<bool> = s.mask.iter().map(|&v| v > 0.5).collect();
                let map = |src: &[f32], at: usize| normalize_normals(&src[at * 3..(at + hw) * 3], &mask, h, w);
                let pooled = |src: &[f32]| {
                    Tensor::new(vec![h, w, d], src[bi * hw * d..(bi + 1) * hw * d].to_vec())
                        .expect("pooled extents")
                };
                ForwardOutput {
                    normal: map(&normal, bi * hw),
                    single: (0..m).map(|j| map(&single, (bi * m + j) * hw)).collect(),
                    agg1: map(&agg1, bi * hw),
                    agg2: map(&agg2, bi * hw),
                    pooled1: pooled(&pooled1),
                    pooled2: pooled(&pooled2),
                    fused_width: self.config.fused_width(),
                }
            })
            .collect())
    }

    pub fn forward<R: Rng>(&self, sample: &PhotoSample, mode: Mode, rng: &mut R) -> Result<ForwardOutput> {
        Ok(self
            .forward_batch(&[sample], mode, Fusion::Both, rng)?
            .pop()
            .expect("one output per sample"))
    }

    pub fn apply_bn_updates(&mut self, updates: &[(String, RunningStats<T>)]) -> Result<()> {
        for (name, stats) in updates {
            self.params.set_running_stats(name, stats)?;
        }
        Ok(())
    }

    pub fn cast<U: Float>(&self) -> PsTransformer<U> {
        PsTransformer {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }
}
