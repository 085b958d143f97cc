//! 2-D convolution on `[H, W, C]` tensors via im2col.

use super::graph::{Graph, Var};
use super::ops::gemm;
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    /// Visits `(column row, column offset, input offset)` for every in-bounds
    /// tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let patch = self.patch();
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let row = oy * self.ow + ox;
                for ky in 0..self.kh {
                    let iy = (oy * self.stride + ky) as isize - self.ph as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..self.kw {
                        let ix = (ox * self.stride + kx) as isize - self.pw as isize;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        let col = (ky * self.kw + kx) * self.cin;
                        let src = (iy as usize * self.w + ix as usize) * self.cin;
                        f(row * patch + col, src, self.cin);
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let mut cols = vec![0.0; self.oh * self.ow * self.patch()];
        self.for_each_tap(|dst, src, n| cols[dst..dst + n].copy_from_slice(&x[src..src + n]));
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.h * self.w * self.cin];
        self.for_each_tap(|dst, src, n| {
            x[src..src + n]
                .iter_mut()
                .zip(&cols[dst..dst + n])
                .for_each(|(a, b)| *a += b)
        });
        x
    }
}

impl Graph {
    /// Convolution of `x: [H, W, Cin]` with `w: [kh, kw, Cin, Cout]`, zero
    /// padding `(pad_h, pad_w)` and an optional bias `[Cout]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: (usize, usize),
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 4 || sw[2] != sx[2] || stride == 0 {
            return Err(Error::dim("conv2d", format!("x {sx:?}, kernel {sw:?}, stride {stride}")));
        }
        let (h, wd, cin) = (sx[0], sx[1], sx[2]);
        let (kh, kw, cout) = (sw[0], sw[1], sw[3]);
        if h + 2 * pad.0 < kh || wd + 2 * pad.1 < kw {
            return Err(Error::dim("conv2d", format!("x {sx:?} smaller than kernel {sw:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::dim("conv2d", format!("kernel {sw:?}, bias {:?}", self.shape(b))));
            }
        }
        let g = ConvGeom {
            h,
            w: wd,
            cin,
            kh,
            kw,
            stride,
            ph: pad.0,
            pw: pad.1,
            oh: (h + 2 * pad.0 - kh) / stride + 1,
            ow: (wd + 2 * pad.1 - kw) / stride + 1,
        };
        let rows = g.oh * g.ow;
        let patch = g.patch();
        let cols = g.im2col(self.value(x).data());
        let mut out = vec![0.0; rows * cout];
        if let Some(b) = b {
            for r in out.chunks_mut(cout) {
                r.copy_from_slice(self.value(b).data());
            }
        }
        gemm(rows, patch, cout, &cols, false, self.value(w).data(), false, &mut out, b.is_some());
        let parents: Vec<Var> = [x, w].into_iter().chain(b).collect();
        let out = Tensor::from_parts(vec![g.oh, g.ow, cout], out);
        Ok(self.custom(out, &parents, move |ctx| {
            let wv = ctx.input(1).data();
            let gx = ctx.needs(0).then(|| {
                let mut gcols = vec![0.0; rows * patch];
                gemm(rows, cout, patch, ctx.grad, false, wv, true, &mut gcols, false);
                g.col2im(&gcols)
            });
            let gw = ctx.needs(1).then(|| {
                let mut gw = vec![0.0; patch * cout];
                gemm(patch, rows, cout, &cols, true, ctx.grad, false, &mut gw, false);
                gw
            });
            let mut grads = vec![gx, gw];
            if ctx.num_inputs() == 3 {
                let mut gb = vec![0.0; cout];
                for r in ctx.grad.chunks(cout) {
                    gb.iter_mut().zip(r).for_each(|(s, v)| *s += v);
                }
                grads.push(Some(gb));
            }
            grads
        }))
    }
}
