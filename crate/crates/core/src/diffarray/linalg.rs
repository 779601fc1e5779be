use super::tape::{Tape, Var};
use super::{shape_err, Float};
use crate::Result;

/// Row-major matrix view: `rows x cols` starting at `offset`, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatView {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl MatView {
    pub fn new(offset: usize, rows: usize, cols: usize) -> Self {
        MatView {
            offset,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        MatView {
            transposed: !self.transposed,
            ..self
        }
    }

    /// (logical rows, logical cols, row stride, col stride)
    fn layout(self) -> (usize, usize, isize, isize) {
        if self.transposed {
            (self.cols, self.rows, 1, self.cols as isize)
        } else {
            (self.rows, self.cols, self.cols as isize, 1)
        }
    }
}

/// Products up to this many multiply-adds skip the packed kernel.
const SMALL_GEMM: usize = 4096;

/// `c[cv] = a[av] * b[bv] + beta * c[cv]` with bounds checked up front.
pub(crate) fn gemm<T: Float>(
    a: &[T],
    av: MatView,
    b: &[T],
    bv: MatView,
    c: &mut [T],
    cv: MatView,
    beta: T,
) {
    let (m, k, rsa, csa) = av.layout();
    let (k2, n, rsb, csb) = bv.layout();
    assert_eq!(k, k2, "gemm inner extents");
    assert_eq!((cv.rows, cv.cols), (m, n), "gemm output extents");
    assert!(!cv.transposed);
    assert!(av.offset + av.rows * av.cols <= a.len());
    assert!(bv.offset + bv.rows * bv.cols <= b.len());
    assert!(cv.offset + m * n <= c.len());
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[cv.offset..cv.offset + m * n] {
            *v = *v * beta;
        }
        return;
    }
    if m * n * k <= SMALL_GEMM {
        let (a, b) = (&a[av.offset..], &b[bv.offset..]);
        let (rsa, csa, rsb, csb) = (rsa as usize, csa as usize, rsb as usize, csb as usize);
        for i in 0..m {
            let row = &mut c[cv.offset + i * n..cv.offset + (i + 1) * n];
            for (j, out) in row.iter_mut().enumerate() {
                let mut acc = T::zero();
                for p in 0..k {
                    acc += a[i * rsa + p * csa] * b[p * rsb + j * csb];
                }
                *out = if beta == T::zero() { acc } else { acc + beta * *out };
            }
        }
        return;
    }
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.as_ptr().add(av.offset),
            rsa,
            csa,
            b.as_ptr().add(bv.offset),
            rsb,
            csb,
            beta,
            c.as_mut_ptr().add(cv.offset),
            n as isize,
            1,
        );
    }
}

fn broadcast_batch(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Flat index into a (possibly smaller, broadcast) batch for each output batch entry.
fn batch_offsets(src: &[usize], out: &[usize]) -> Vec<usize> {
    let total: usize = out.iter().product();
    let pad = out.len() - src.len();
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; out.len()];
    for _ in 0..total {
        let mut flat = 0;
        for (d, &e) in src.iter().enumerate() {
            let i = if e == 1 { 0 } else { idx[d + pad] };
            flat = flat * e + i;
        }
        offsets.push(flat);
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    offsets
}

impl<T: Float> Tape<T> {
    /// Matrix product over the last two axes with broadcast leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return shape_err(format!("matmul: {:?} x {:?}", sa, sb));
        }
        let (p, q) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let r = sb[sb.len() - 1];
        let ba = sa[..sa.len() - 2].to_vec();
        let bb = sb[..sb.len() - 2].to_vec();
        let Some(batch) = broadcast_batch(&ba, &bb) else {
            return shape_err(format!("matmul: batch extents of {:?} and {:?}", sa, sb));
        };
        let offs_a = batch_offsets(&ba, &batch);
        let offs_b = batch_offsets(&bb, &batch);
        let nb = offs_a.len();
        let mut value = vec![T::zero(); nb * p * r];
        {
            let (va, vb) = (self.value(a), self.value(b));
            for i in 0..nb {
                gemm(
                    va,
                    MatView::new(offs_a[i] * p * q, p, q),
                    vb,
                    MatView::new(offs_b[i] * q * r, q, r),
                    &mut value,
                    MatView::new(i * p * r, p, r),
                    T::zero(),
                );
            }
        }
        let mut shape = batch;
        shape.extend([p, r]);
        Ok(self.record(
            "matmul",
            &[a, b],
            shape,
            value,
            Box::new(move |ctx| {
                let (va, vb) = (ctx.inputs[0], ctx.inputs[1]);
                let ga = ctx.needs[0].then(|| {
                    let mut g = vec![T::zero(); va.len()];
                    for i in 0..nb {
                        // dA += dC * B^T
                        gemm(
                            ctx.grad,
                            MatView::new(i * p * r, p, r),
                            vb,
                            MatView::new(offs_b[i] * q * r, q, r).t(),
                            &mut g,
                            MatView::new(offs_a[i] * p * q, p, q),
                            T::one(),
                        );
                    }
                    g
                });
                let gb = ctx.needs[1].then(|| {
                    let mut g = vec![T::zero(); vb.len()];
                    for i in 0..nb {
                        // dB += A^T * dC
                        gemm(
                            va,
                            MatView::new(offs_a[i] * p * q, p, q).t(),
                            ctx.grad,
                            MatView::new(i * p * r, p, r),
                            &mut g,
                            MatView::new(offs_b[i] * q * r, q, r),
                            T::one(),
                        );
                    }
                    g
                });
                vec![ga, gb]
            }),
        ))
    }

    /// `x W + b` applied to the last axis of `x`; `weight` is `[in, out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return shape_err(format!("linear: input {:?} with weight {:?}", xs, ws));
        }
        let rows: usize = xs[..xs.len() - 1].iter().product();
        let flat = self.reshape(x, &[rows, ws[0]])?;
        let y = self.matmul(flat, weight)?;
        let y = self.add_bias(y, bias)?;
        let mut out = xs;
        *out.last_mut().unwrap() = ws[1];
        self.reshape(y, &out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffarray::{grad_check, Tensor};
    use crate::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    fn triple_loop(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
        let mut c = vec![0.0; p * r];
        for i in 0..p {
            for j in 0..r {
                for k in 0..q {
                    c[i * r + j] += a[i * q + k] * b[k * r + j];
                }
            }
        }
        c
    }

    #[test]
    fn identity_and_dot() {
        let mut tape = Tape::<f64>::new();
        let i = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let v = tape.constant(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
        let y = tape.matmul(i, v).unwrap();
        assert_eq!(tape.value(y), &[3.0, 4.0]);
        let r = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let y = tape.matmul(r, v).unwrap();
        assert_eq!(tape.shape(y), &[1, 1]);
        assert_eq!(tape.value(y), &[11.0]);
    }

    #[test]
    fn random_matches_triple_loop() {
        let a = random(&[4, 5], 1);
        let b = random(&[5, 6], 2);
        let want = triple_loop(a.data(), b.data(), 4, 5, 6);
        let mut tape = Tape::<f32>::new();
        let va = tape.constant(a.cast());
        let vb = tape.constant(b.cast());
        let y = tape.matmul(va, vb).unwrap();
        for (got, want) in tape.value(y).iter().zip(&want) {
            let rel = (*got as f64 - want).abs() / want.abs().max(1.0);
            assert!(rel < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn broadcast_batch_matches_per_slice_loop() {
        let a = random(&[1, 3, 2, 4], 5);
        let b = random(&[2, 1, 4, 3], 6);
        let mut tape = Tape::<f64>::new();
        let va = tape.constant(a.clone());
        let vb = tape.constant(b.clone());
        let y = tape.matmul(va, vb).unwrap();
        assert_eq!(tape.shape(y), &[2, 3, 2, 3]);
        let y = tape.tensor(y);
        for i in 0..2 {
            for j in 0..3 {
                let sa = &a.data()[j * 8..j * 8 + 8];
                let sb = &b.data()[i * 12..i * 12 + 12];
                let want = triple_loop(sa, sb, 2, 4, 3);
                let got = &y.data()[(i * 3 + j) * 6..(i * 3 + j) * 6 + 6];
                for (g, w) in got.iter().zip(&want) {
                    assert!((g - w).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn shape_error_names_both() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![4, 2]));
        match tape.matmul(a, b) {
            Err(Error::Shape(msg)) => assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]")),
            other => panic!("{:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn sum_of_matmul_grad_check() {
        let err = grad_check(
            |tape, v| {
                let y = tape.matmul(v[0], v[1])?;
                Ok(tape.sum(y))
            },
            &[random(&[3, 4], 8), random(&[4, 2], 9)],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn broadcast_and_linear_grad_check() {
        let err = grad_check(
            |tape, v| {
                let y = tape.matmul(v[0], v[1])?;
                let y = tape.linear(y, v[2], v[3])?;
                let y = tape.square(y);
                Ok(tape.sum(y))
            },
            &[
                random(&[2, 1, 3, 4], 1),
                random(&[3, 4, 2], 2),
                random(&[2, 5], 3),
                random(&[5], 4),
            ],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
