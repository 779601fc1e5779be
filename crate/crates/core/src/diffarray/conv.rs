use rayon::prelude::*;

use super::linalg::{gemm, MatView};
use super::tape::{Tape, Var};
use super::{shape_err, Float};
use crate::Result;

/// Unfolds one `[c, h, w]` image into `[c*9, h*w]` patch columns (zero padding 1).
fn im2col<T: Float>(img: &[T], c: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &img[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for x in 0..w {
                        let sx = x as isize + kx as isize - 1;
                        dst[x] = if sx < 0 || sx >= w as isize {
                            T::zero()
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back into the image.
fn col2im<T: Float>(cols: &[T], c: usize, h: usize, w: usize, img: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut img[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let sx = x as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            plane[sy as usize * w + sx as usize] += row[y * w + x];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Float> Tape<T> {
    /// 3x3 cross-correlation with zero padding 1, stride 1.
    ///
    /// `x: [n, c_in, h, w]`, `weight: [c_out, c_in, 3, 3]`, `bias: [c_out]`.
    pub fn conv2d_3x3(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != 3 || ws[3] != 3 {
            return shape_err(format!("conv2d_3x3: input {:?}, weight {:?}", xs, ws));
        }
        let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let cout = ws[0];
        if ws[1] != cin {
            return shape_err(format!(
                "conv2d_3x3: weight expects {} input channels, input has {} ({:?} vs {:?})",
                ws[1], cin, ws, xs
            ));
        }
        if bs != [cout] {
            return shape_err(format!("conv2d_3x3: bias {:?} for {} filters", bs, cout));
        }
        if h == 0 || w == 0 {
            return shape_err(format!("conv2d_3x3: empty spatial extent {:?}", xs));
        }
        let hw = h * w;
        let k = cin * 9;
        let mut value = vec![T::zero(); n * cout * hw];
        {
            let input = self.value(x);
            let wt = self.value(weight);
            let b = self.value(bias);
            value
                .par_chunks_mut(cout * hw)
                .enumerate()
                .for_each(|(i, out)| {
                    for (co, plane) in out.chunks_mut(hw).enumerate() {
                        plane.fill(b[co]);
                    }
                    let mut cols = vec![T::zero(); k * hw];
                    im2col(&input[i * cin * hw..(i + 1) * cin * hw], cin, h, w, &mut cols);
                    gemm(
                        wt,
                        MatView::new(0, cout, k),
                        &cols,
                        MatView::new(0, k, hw),
                        out,
                        MatView::new(0, cout, hw),
                        T::one(),
                    );
                });
        }
        Ok(self.record(
            "conv2d_3x3",
            &[x, weight, bias],
            vec![n, cout, h, w],
            value,
            Box::new(move |ctx| {
                let (input, wt) = (ctx.inputs[0], ctx.inputs[1]);
                let grad = ctx.grad;
                let gx = ctx.needs[0].then(|| {
                    let mut gx = vec![T::zero(); input.len()];
                    gx.par_chunks_mut(cin * hw).enumerate().for_each(|(i, gimg)| {
                        let mut gcols = vec![T::zero(); k * hw];
                        gemm(
                            wt,
                            MatView::new(0, cout, k).t(),
                            grad,
                            MatView::new(i * cout * hw, cout, hw),
                            &mut gcols,
                            MatView::new(0, k, hw),
                            T::zero(),
                        );
                        col2im(&gcols, cin, h, w, gimg);
                    });
                    gx
                });
                let gw = ctx.needs[1].then(|| {
                    let mut gw = vec![T::zero(); wt.len()];
                    let mut cols = vec![T::zero(); k * hw];
                    for i in 0..n {
                        im2col(&input[i * cin * hw..(i + 1) * cin * hw], cin, h, w, &mut cols);
                        gemm(
                            grad,
                            MatView::new(i * cout * hw, cout, hw),
                            &cols,
                            MatView::new(0, k, hw).t(),
                            &mut gw,
                            MatView::new(0, cout, k),
                            T::one(),
                        );
                    }
                    gw
                });
                let gb = ctx.needs[2].then(|| {
                    let mut gb = vec![T::zero(); cout];
                    for (j, plane) in grad.chunks(hw).enumerate() {
                        gb[j % cout] += plane.iter().copied().sum::<T>();
                    }
                    gb
                });
                vec![gx, gw, gb]
            }),
        ))
    }
}
