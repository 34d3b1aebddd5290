//! Cross-correlation kernels via im2col and `sgemm`.

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        input: &Tensor,
        weight: &Tensor,
        bias: &Tensor,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (n, cin, h, w) = input.nchw("conv2d")?;
        let (cout, wcin, kh, kw) = weight.nchw("conv2d")?;
        if wcin != cin {
            return Err(Error::Dimension {
                op: "conv2d",
                axis: "in_channels",
                expected: cin,
                got: wcin,
            });
        }
        if kh != kw {
            return Err(Error::Dimension {
                op: "conv2d",
                axis: "kernel_width",
                expected: kh,
                got: kw,
            });
        }
        if kh % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel extent {kh} must be odd"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        if bias.numel() != cout || bias.dims().len() != 1 {
            return Err(Error::Dimension {
                op: "conv2d",
                axis: "out_channels",
                expected: cout,
                got: bias.numel(),
            });
        }
        if h + 2 * pad < kh {
            return Err(Error::Dimension {
                op: "conv2d",
                axis: "height",
                expected: kh,
                got: h + 2 * pad,
            });
        }
        if w + 2 * pad < kh {
            return Err(Error::Dimension {
                op: "conv2d",
                axis: "width",
                expected: kh,
                got: w + 2 * pad,
            });
        }
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            k: kh,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (w + 2 * pad - kh) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    pub fn out_dims(&self) -> [usize; 4] {
        [self.n, self.cout, self.ho, self.wo]
    }

    /// Source coordinate for an output position and kernel offset, if inside the image.
    #[inline]
    fn src(&self, o: usize, kk: usize, extent: usize) -> Option<usize> {
        let s = (o * self.stride + kk) as isize - self.pad as isize;
        (s >= 0 && (s as usize) < extent).then_some(s as usize)
    }
}

fn im2col(g: &ConvGeom, x: &[f32], col: &mut [f32]) {
    let p = g.positions();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &mut col[((c * g.k + ky) * g.k + kx) * p..][..p];
                for oy in 0..g.ho {
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    match g.src(oy, ky, g.h) {
                        None => dst.fill(0.0),
                        Some(sy) => {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d = g.src(ox, kx, g.w).map_or(0.0, |sx| plane[sy * g.w + sx]);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, col: &[f32], dx: &mut [f32]) {
    let p = g.positions();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &col[((c * g.k + ky) * g.k + kx) * p..][..p];
                for oy in 0..g.ho {
                    let Some(sy) = g.src(oy, ky, g.h) else {
                        continue;
                    };
                    for ox in 0..g.wo {
                        if let Some(sx) = g.src(ox, kx, g.w) {
                            plane[sy * g.w + sx] += row[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c (m x n) = alpha * a (m x k) * b (k x n) + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the slices cover every index reachable from the given strides
    // and extents; callers pass dense row- or column-major views.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn forward(g: &ConvGeom, x: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let (kl, p) = (g.patch_len(), g.positions());
    let mut col = vec![0.0; kl * p];
    let mut out = vec![0.0; g.n * g.cout * p];
    let in_len = g.cin * g.h * g.w;
    for (xn, yn) in x
        .data()
        .chunks_exact(in_len)
        .zip(out.chunks_exact_mut(g.cout * p))
    {
        im2col(g, xn, &mut col);
        for (yc, &b) in yn.chunks_exact_mut(p).zip(bias.data()) {
            yc.fill(b);
        }
        gemm(
            g.cout,
            kl,
            p,
            weight.data(),
            (kl as isize, 1),
            &col,
            (p as isize, 1),
            1.0,
            yn,
        );
    }
    Tensor::new(g.out_dims().to_vec(), out).expect("conv output extent")
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f32>>,
    pub weight: Option<Vec<f32>>,
    pub bias: Option<Vec<f32>>,
}

pub(crate) fn backward(
    g: &ConvGeom,
    x: &Tensor,
    weight: &Tensor,
    grad_out: &[f32],
    need: (bool, bool, bool),
) -> ConvGrads {
    let (kl, p) = (g.patch_len(), g.positions());
    let in_len = g.cin * g.h * g.w;
    let mut dx = need.0.then(|| vec![0.0; g.n * in_len]);
    let mut dw = need.1.then(|| vec![0.0; g.cout * kl]);
    let mut db = need.2.then(|| vec![0.0f64; g.cout]);
    let mut col = vec![0.0; kl * p];
    let mut dcol = vec![0.0; kl * p];
    for n in 0..g.n {
        let gy = &grad_out[n * g.cout * p..(n + 1) * g.cout * p];
        if let Some(db) = db.as_mut() {
            for (acc, row) in db.iter_mut().zip(gy.chunks_exact(p)) {
                *acc += row.iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            im2col(g, &x.data()[n * in_len..(n + 1) * in_len], &mut col);
            gemm(
                g.cout,
                p,
                kl,
                gy,
                (p as isize, 1),
                &col,
                (1, p as isize),
                1.0,
                dw,
            );
        }
        if let Some(dx) = dx.as_mut() {
            gemm(
                kl,
                g.cout,
                p,
                weight.data(),
                (1, kl as isize),
                gy,
                (p as isize, 1),
                0.0,
                &mut dcol,
            );
            col2im(g, &dcol, &mut dx[n * in_len..(n + 1) * in_len]);
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db.map(|v| v.into_iter().map(|s| s as f32).collect()),
    }
}
