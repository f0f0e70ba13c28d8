//! Raw forward/backward kernels over flat slices. Shapes are validated by the
//! tape before these are called.

use crate::parallel::map_items;

pub(crate) fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

/// Dot product with eight fixed lanes, so the reduction order never depends
/// on the caller.
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let (ca, cb) = (&a[i * 8..i * 8 + 8], &b[i * 8..i * 8 + 8]);
        for l in 0..8 {
            lanes[l] += ca[l] * cb[l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    let pairs = [
        lanes[0] + lanes[4],
        lanes[1] + lanes[5],
        lanes[2] + lanes[6],
        lanes[3] + lanes[7],
    ];
    (pairs[0] + pairs[2]) + (pairs[1] + pairs[3]) + tail
}

fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.oh * self.ow
    }

    fn in_len(&self) -> usize {
        self.c * self.h * self.w
    }

    fn im2col(&self, x: &[f32], cols: &mut [f32]) {
        let (ohw, ow) = (self.out_len(), self.ow);
        for c in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = &mut cols[((c * self.kh + i) * self.kw + j) * ohw..][..ohw];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + i) as isize - self.pad as isize;
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + j) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f32], gx: &mut [f32]) {
        let (ohw, ow) = (self.out_len(), self.ow);
        for c in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = &cols[((c * self.kh + i) * self.kw + j) * ohw..][..ohw];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + i) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut gx[(c * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + j) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f32], kernel: &[f32], bias: &[f32]) -> Vec<f32> {
    let (pl, ohw) = (g.patch_len(), g.out_len());
    let items = map_items(g.n, |b| {
        let mut cols = vec![0.0f32; pl * ohw];
        g.im2col(&x[b * g.in_len()..(b + 1) * g.in_len()], &mut cols);
        let mut out = vec![0.0f32; g.k * ohw];
        for k in 0..g.k {
            let orow = &mut out[k * ohw..(k + 1) * ohw];
            orow.fill(bias[k]);
            let wrow = &kernel[k * pl..(k + 1) * pl];
            for (r, &wv) in wrow.iter().enumerate() {
                axpy(wv, &cols[r * ohw..(r + 1) * ohw], orow);
            }
        }
        out
    });
    items.concat()
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f32>>,
    pub kernel: Vec<f32>,
    pub bias: Vec<f32>,
}

pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f32],
    kernel: &[f32],
    gout: &[f32],
    need_input: bool,
) -> ConvGrads {
    let (pl, ohw) = (g.patch_len(), g.out_len());
    let items = map_items(g.n, |b| {
        let mut cols = vec![0.0f32; pl * ohw];
        g.im2col(&x[b * g.in_len()..(b + 1) * g.in_len()], &mut cols);
        let go = &gout[b * g.k * ohw..(b + 1) * g.k * ohw];
        let mut gk = vec![0.0f32; g.k * pl];
        let mut gb = vec![0.0f32; g.k];
        for k in 0..g.k {
            let grow = &go[k * ohw..(k + 1) * ohw];
            gb[k] = grow.iter().map(|&v| v as f64).sum::<f64>() as f32;
            for r in 0..pl {
                gk[k * pl + r] = dot(grow, &cols[r * ohw..(r + 1) * ohw]);
            }
        }
        let gx = need_input.then(|| {
            let mut gcols = vec![0.0f32; pl * ohw];
            for r in 0..pl {
                let dst = &mut gcols[r * ohw..(r + 1) * ohw];
                for k in 0..g.k {
                    axpy(kernel[k * pl + r], &go[k * ohw..(k + 1) * ohw], dst);
                }
            }
            let mut gx = vec![0.0f32; g.in_len()];
            g.col2im_add(&gcols, &mut gx);
            gx
        });
        (gk, gb, gx)
    });
    let mut kernel_grad = vec![0.0f32; g.k * pl];
    let mut bias_grad = vec![0.0f32; g.k];
    let mut input_grad = need_input.then(|| Vec::with_capacity(g.n * g.in_len()));
    for (gk, gb, gx) in items {
        for (a, b) in kernel_grad.iter_mut().zip(&gk) {
            *a += b;
        }
        for (a, b) in bias_grad.iter_mut().zip(&gb) {
            *a += b;
        }
        if let (Some(acc), Some(gx)) = (input_grad.as_mut(), gx) {
            acc.extend_from_slice(&gx);
        }
    }
    ConvGrads {
        input: input_grad,
        kernel: kernel_grad,
        bias: bias_grad,
    }
}

pub(crate) fn linear_forward(x: &[f32], w: &[f32], b: &[f32], n: usize, d: usize, e: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; n * e];
    let mut acc = vec![0.0f64; e];
    for row in 0..n {
        for (a, &bv) in acc.iter_mut().zip(b) {
            *a = bv as f64;
        }
        for k in 0..d {
            let xv = x[row * d + k] as f64;
            for (a, &wv) in acc.iter_mut().zip(&w[k * e..(k + 1) * e]) {
                *a += xv * wv as f64;
            }
        }
        for (o, &a) in out[row * e..(row + 1) * e].iter_mut().zip(&acc) {
            *o = a as f32;
        }
    }
    out
}

pub(crate) fn linear_backward(
    x: &[f32],
    w: &[f32],
    gout: &[f32],
    n: usize,
    d: usize,
    e: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut gx = vec![0.0f32; n * d];
    for row in 0..n {
        let g = &gout[row * e..(row + 1) * e];
        for k in 0..d {
            gx[row * d + k] = g
                .iter()
                .zip(&w[k * e..(k + 1) * e])
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum::<f64>() as f32;
        }
    }
    let mut gw = vec![0.0f64; d * e];
    let mut gb = vec![0.0f64; e];
    for row in 0..n {
        let g = &gout[row * e..(row + 1) * e];
        for (a, &gv) in gb.iter_mut().zip(g) {
            *a += gv as f64;
        }
        for k in 0..d {
            let xv = x[row * d + k] as f64;
            for (a, &gv) in gw[k * e..(k + 1) * e].iter_mut().zip(g) {
                *a += xv * gv as f64;
            }
        }
    }
    (
        gx,
        gw.into_iter().map(|v| v as f32).collect(),
        gb.into_iter().map(|v| v as f32).collect(),
    )
}

pub(crate) fn gap_forward(x: &[f32], nc: usize, hw: usize) -> Vec<f32> {
    (0..nc)
        .map(|i| (x[i * hw..(i + 1) * hw].iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
        .collect()
}

pub(crate) fn gap_backward(gout: &[f32], hw: usize) -> Vec<f32> {
    let scale = 1.0 / hw as f64;
    gout.iter()
        .flat_map(|&g| std::iter::repeat_n((g as f64 * scale) as f32, hw))
        .collect()
}

pub(crate) fn upsample2x_forward(x: &[f32], nc: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0f32; nc * oh * ow];
    for p in 0..nc {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward(gout: &[f32], nc: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut gx = vec![0.0f32; nc * h * w];
    for p in 0..nc {
        let src = &gout[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let a = src[(2 * y) * ow + 2 * xx] + src[(2 * y) * ow + 2 * xx + 1];
                let b = src[(2 * y + 1) * ow + 2 * xx] + src[(2 * y + 1) * ow + 2 * xx + 1];
                dst[y * w + xx] = a + b;
            }
        }
    }
    gx
}
