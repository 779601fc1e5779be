//! Set encoding by self-attention: scaled dot-product and multi-head
//! attention, the residual encoder block, and pooling by multi-head
//! attention onto a learnable seed.
//!
//! Every function accepts arrays with any number of leading batch axes;
//! the last two axes are (set element, feature). Elements of a set never
//! interact with other sets in the batch.

use rand::Rng;

use crate::diffarray::{Float, Mode, Tape, Var};
use crate::params::{Bound, ParamStore};
use crate::{Error, Result};

/// Affine map applied to the last axis; `weight` is `[in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn bind(bound: &Bound, name: &str) -> Result<Self> {
        Ok(Linear {
            weight: bound.get(&format!("{name}.weight"))?,
            bias: bound.get(&format!("{name}.bias"))?,
        })
    }

    pub fn apply<T: Float>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.linear(x, self.weight, self.bias)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MultiheadParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiheadParams {
    pub fn declare<T: Float>(store: &mut ParamStore<T>, name: &str, d: usize, rng: &mut impl Rng) {
        for proj in ["q", "k", "v", "o"] {
            store.declare_linear(&format!("{name}.{proj}"), d, d, rng);
        }
    }

    pub fn bind(bound: &Bound, name: &str, heads: usize) -> Result<Self> {
        Ok(MultiheadParams {
            q: Linear::bind(bound, &format!("{name}.q"))?,
            k: Linear::bind(bound, &format!("{name}.k"))?,
            v: Linear::bind(bound, &format!("{name}.v"))?,
            o: Linear::bind(bound, &format!("{name}.o"))?,
            heads,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderBlockParams {
    pub attn: MultiheadParams,
    pub ffn1: Linear,
    pub ffn2: Linear,
}

impl EncoderBlockParams {
    pub fn declare<T: Float>(store: &mut ParamStore<T>, name: &str, d: usize, rng: &mut impl Rng) {
        MultiheadParams::declare(store, &format!("{name}.attn"), d, rng);
        store.declare_linear(&format!("{name}.ffn1"), d, d, rng);
        store.declare_linear(&format!("{name}.ffn2"), d, d, rng);
    }

    pub fn bind(bound: &Bound, name: &str, heads: usize) -> Result<Self> {
        Ok(EncoderBlockParams {
            attn: MultiheadParams::bind(bound, &format!("{name}.attn"), heads)?,
            ffn1: Linear::bind(bound, &format!("{name}.ffn1"))?,
            ffn2: Linear::bind(bound, &format!("{name}.ffn2"))?,
        })
    }
}

/// Input embedding followed by a stack of encoder blocks.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub embed: Linear,
    pub blocks: Vec<EncoderBlockParams>,
}

impl EncoderParams {
    pub fn declare<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d: usize,
        blocks: usize,
        rng: &mut impl Rng,
    ) {
        store.declare_linear(&format!("{name}.embed"), d_in, d, rng);
        for b in 0..blocks {
            EncoderBlockParams::declare(store, &format!("{name}.block{b}"), d, rng);
        }
    }

    pub fn bind(bound: &Bound, name: &str, blocks: usize, heads: usize) -> Result<Self> {
        Ok(EncoderParams {
            embed: Linear::bind(bound, &format!("{name}.embed"))?,
            blocks: (0..blocks)
                .map(|b| EncoderBlockParams::bind(bound, &format!("{name}.block{b}"), heads))
                .collect::<Result<_>>()?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PmaParams {
    /// Learnable `[1, d]` seed used as the single query.
    pub seed: Var,
    pub attn: MultiheadParams,
}

impl PmaParams {
    pub fn declare<T: Float>(store: &mut ParamStore<T>, name: &str, d: usize, rng: &mut impl Rng) {
        let bound = 1.0 / (d as f64).sqrt();
        store.insert(
            format!("{name}.seed"),
            crate::diffarray::Tensor::from_fn(vec![1, d], |_| T::lit(rng.gen_range(-bound..bound))),
        );
        MultiheadParams::declare(store, &format!("{name}.attn"), d, rng);
    }

    pub fn bind(bound: &Bound, name: &str, heads: usize) -> Result<Self> {
        Ok(PmaParams {
            seed: bound.get(&format!("{name}.seed"))?,
            attn: MultiheadParams::bind(bound, &format!("{name}.attn"), heads)?,
        })
    }
}

/// Per-call randomness and dropout settings.
pub struct Regime<'a, R> {
    pub mode: Mode,
    pub dropout: f64,
    pub rng: &'a mut R,
}

/// `softmax(Q K^T / sqrt(d_k))` over the key axis.
pub fn attention_weights<T: Float>(tape: &mut Tape<T>, q: Var, k: Var) -> Result<Var> {
    let (qs, ks) = (tape.shape(q).to_vec(), tape.shape(k).to_vec());
    if qs.len() < 2 || ks.len() < 2 || qs.last() != ks.last() {
        return Err(Error::Shape(format!(
            "attention: query {:?} and key {:?} widths differ",
            qs, ks
        )));
    }
    if ks[ks.len() - 2] == 0 {
        return Err(Error::EmptySet("attention over zero keys".into()));
    }
    let dk = *ks.last().unwrap();
    let kt = tape.transpose_last(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, T::one() / T::lit(dk as f64).sqrt());
    let axis = tape.shape(scores).len() - 1;
    tape.softmax(scores, axis)
}

/// `softmax(Q K^T / sqrt(d_k)) V`; each output row is a convex combination of `V` rows.
pub fn scaled_dot_attention<T: Float>(tape: &mut Tape<T>, q: Var, k: Var, v: Var) -> Result<Var> {
    let (ks, vs) = (tape.shape(k).to_vec(), tape.shape(v).to_vec());
    if vs.len() < 2 || ks[..ks.len() - 1] != vs[..vs.len() - 1] {
        return Err(Error::Shape(format!(
            "attention: keys {:?} and values {:?} disagree on set size",
            ks, vs
        )));
    }
    let w = attention_weights(tape, q, k)?;
    tape.matmul(w, v)
}

/// `[.., m, d]` -> `[.., h, m, d/h]`
fn split_heads<T: Float>(tape: &mut Tape<T>, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let r = s.len();
    let d = s[r - 1];
    let mut split = s[..r - 1].to_vec();
    split.extend([heads, d / heads]);
    let x = tape.reshape(x, &split)?;
    let mut axes: Vec<usize> = (0..r - 2).collect();
    axes.extend([r - 1, r - 2, r]);
    tape.permute(x, &axes)
}

/// `[.., h, m, d/h]` -> `[.., m, d]`
fn merge_heads<T: Float>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let r = s.len();
    let mut axes: Vec<usize> = (0..r - 3).collect();
    axes.extend([r - 2, r - 3, r - 1]);
    let x = tape.permute(x, &axes)?;
    let mut merged = s[..r - 3].to_vec();
    merged.extend([s[r - 2], s[r - 3] * s[r - 1]]);
    tape.reshape(x, &merged)
}

fn check_heads(d: usize, heads: usize) -> Result<()> {
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "width {d} is not divisible by {heads} heads"
        )));
    }
    Ok(())
}

/// Attention over already-projected `Q, K, V`, head by head, followed by `W_O`.
fn attend_projected<T: Float>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    p: &MultiheadParams,
) -> Result<Var> {
    let d = *tape.shape(q).last().unwrap();
    check_heads(d, p.heads)?;
    let qh = split_heads(tape, q, p.heads)?;
    let kh = split_heads(tape, k, p.heads)?;
    let vh = split_heads(tape, v, p.heads)?;
    let heads = scaled_dot_attention(tape, qh, kh, vh)?;
    let joined = merge_heads(tape, heads)?;
    p.o.apply(tape, joined)
}

/// Multi-head attention of `x_q` onto the set `x_kv`.
pub fn multihead_attention<T: Float>(
    tape: &mut Tape<T>,
    x_q: Var,
    x_kv: Var,
    p: &MultiheadParams,
) -> Result<Var> {
    let d = *tape.shape(p.q.weight).last().unwrap();
    check_heads(d, p.heads)?;
    let q = p.q.apply(tape, x_q)?;
    let k = p.k.apply(tape, x_kv)?;
    let v = p.v.apply(tape, x_kv)?;
    attend_projected(tape, q, k, v, p)
}

/// One residual block without normalization:
/// `H = Q + MHA(Q, K, V)`, `out = FFN2(dropout(GeLU(FFN1(H)))) + H`.
pub fn encoder_block<T: Float, R: Rng>(
    tape: &mut Tape<T>,
    f: Var,
    p: &EncoderBlockParams,
    regime: &mut Regime<'_, R>,
) -> Result<Var> {
    let q = p.attn.q.apply(tape, f)?;
    let k = p.attn.k.apply(tape, f)?;
    let v = p.attn.v.apply(tape, f)?;
    let a = attend_projected(tape, q, k, v, &p.attn)?;
    let h = tape.add(q, a)?;
    let hidden = p.ffn1.apply(tape, h)?;
    let hidden = tape.gelu(hidden);
    let hidden = tape.dropout(hidden, regime.dropout, regime.mode, regime.rng)?;
    let out = p.ffn2.apply(tape, hidden)?;
    tape.add(out, h)
}

/// Embeds a `[.., m, d_in]` set to width `d` and runs the block stack.
pub fn encode<T: Float, R: Rng>(
    tape: &mut Tape<T>,
    x: Var,
    p: &EncoderParams,
    regime: &mut Regime<'_, R>,
) -> Result<Var> {
    let s = tape.shape(x);
    if s.len() < 2 || s[s.len() - 2] == 0 {
        return Err(Error::EmptySet(format!("encoder input {:?} has no elements", s)));
    }
    let mut f = p.embed.apply(tape, x)?;
    for block in &p.blocks {
        f = encoder_block(tape, f, block, regime)?;
    }
    Ok(f)
}

/// Pools a `[.., m, d]` set to `[.., d]` by attending from the learnable seed.
pub fn pma_pool<T: Float>(tape: &mut Tape<T>, f: Var, p: &PmaParams) -> Result<Var> {
    let s = tape.shape(f).to_vec();
    if s.len() < 2 || s[s.len() - 2] == 0 {
        return Err(Error::EmptySet(format!("pooling input {:?} has no elements", s)));
    }
    let d = s[s.len() - 1];
    let lead = &s[..s.len() - 2];
    // seed [1, d] gets singleton batch axes so it broadcasts over every set
    let mut seed_shape = vec![1; lead.len()];
    seed_shape.extend([1, d]);
    let seed = tape.reshape(p.seed, &seed_shape)?;
    let pooled = multihead_attention(tape, seed, f, &p.attn)?;
    let mut out = lead.to_vec();
    out.push(d);
    tape.reshape(pooled, &out)
}
