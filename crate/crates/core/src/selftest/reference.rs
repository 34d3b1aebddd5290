//! Plain `f64` re-implementation of the student forward pass and its four
//! loss terms. It shares no code with the tape, so central differences taken
//! here at a tiny step serve as an independent gradient reference.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::autodiff::Tensor;
use crate::error::Result;
use crate::net::{ParamSet, TapPoint, DRN_EPS};

/// A single `[C, H, W]` feature map.
#[derive(Clone, Debug)]
pub(super) struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Map {
    pub fn from_tensor(t: &Tensor) -> Self {
        let d = t.dims();
        let (c, h, w) = (d[d.len() - 3], d[d.len() - 2], d[d.len() - 1]);
        assert_eq!(t.numel(), c * h * w, "reference maps hold one sample");
        Self {
            c,
            h,
            w,
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    fn zip(&self, other: &Map, f: impl Fn(f64, f64) -> f64) -> Map {
        Map {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            ..*self
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Map {
        Map {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }
}

fn f64s(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn conv3x3(x: &Map, w: &[f64], b: &[f64], stride: usize) -> Map {
    let cout = b.len();
    let (ho, wo) = ((x.h + 2 - 3) / stride + 1, (x.w + 2 - 3) / stride + 1);
    let mut data = vec![0.0; cout * ho * wo];
    for o in 0..cout {
        for y in 0..ho {
            for xx in 0..wo {
                let mut acc = b[o];
                for i in 0..x.c {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (sy, sx) = (
                                (y * stride + ky) as isize - 1,
                                (xx * stride + kx) as isize - 1,
                            );
                            if sy < 0 || sx < 0 || sy >= x.h as isize || sx >= x.w as isize {
                                continue;
                            }
                            acc += w[((o * x.c + i) * 3 + ky) * 3 + kx]
                                * x.at(i, sy as usize, sx as usize);
                        }
                    }
                }
                data[(o * ho + y) * wo + xx] = acc;
            }
        }
    }
    Map {
        c: cout,
        h: ho,
        w: wo,
        data,
    }
}

fn upsample2x(x: &Map) -> Map {
    let taps = |n: usize, o: usize| {
        let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n - 1);
        (i0, (i0 + 1).min(n - 1), src - i0 as f64)
    };
    let (h, w) = (2 * x.h, 2 * x.w);
    let mut data = Vec::with_capacity(x.c * h * w);
    for c in 0..x.c {
        for y in 0..h {
            let (y0, y1, fy) = taps(x.h, y);
            for xx in 0..w {
                let (x0, x1, fx) = taps(x.w, xx);
                let top = x.at(c, y0, x0) * (1.0 - fx) + x.at(c, y0, x1) * fx;
                let bottom = x.at(c, y1, x0) * (1.0 - fx) + x.at(c, y1, x1) * fx;
                data.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Map { c: x.c, h, w, data }
}

fn drn(x: &Map, w: &[f64], b: &[f64]) -> Map {
    let plane = x.h * x.w;
    let mut cat = Vec::with_capacity(3 * x.data.len());
    let (mut mus, mut sigmas) = (Vec::new(), Vec::new());
    for c in 0..x.c {
        let p = &x.data[c * plane..(c + 1) * plane];
        let mu = p.iter().sum::<f64>() / plane as f64;
        let var = p.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / plane as f64;
        let sigma = (var + DRN_EPS as f64).sqrt();
        cat.extend(p.iter().map(|v| v - (v - mu) / sigma));
        mus.push(mu);
        sigmas.push(sigma);
    }
    let res = Map {
        data: cat.clone(),
        ..*x
    };
    for stat in [&mus, &sigmas] {
        for &s in stat.iter() {
            cat.extend(std::iter::repeat_n(s, plane));
        }
    }
    let cat = Map {
        c: 3 * x.c,
        h: x.h,
        w: x.w,
        data: cat,
    };
    let dv = conv3x3(&cat, w, b, 1);
    x.zip(&dv.zip(&res, |d, r| d - r), |a, d| a + d)
}

/// Source weights plus DRN weights, with DRN biases supplied separately.
pub(super) struct Student<'a> {
    pub source: &'a ParamSet,
    pub drn: &'a ParamSet,
}

impl Student<'_> {
    fn conv(&self, name: &str, x: &Map, stride: usize) -> Result<Map> {
        let w = f64s(self.source.get(&format!("{name}.weight"))?);
        let b = f64s(self.source.get(&format!("{name}.bias"))?);
        Ok(conv3x3(x, &w, &b, stride))
    }

    fn tap(&self, point: TapPoint, x: Map, biases: &[(String, Vec<f64>)]) -> Result<Map> {
        let w = f64s(self.drn.get(&format!("{}.weight", point.name()))?);
        let name = format!("{}.bias", point.name());
        let b = match biases.iter().find(|(n, _)| *n == name) {
            Some((_, b)) => b.clone(),
            None => f64s(self.drn.get(&name)?),
        };
        Ok(drn(&x, &w, &b))
    }

    /// Output and the three tapped feature maps, with DRN modules at every tap.
    pub fn forward(&self, x: &Map, biases: &[(String, Vec<f64>)]) -> Result<(Map, Vec<Map>)> {
        let relu = |m: Map| m.map(|v| v.max(0.0));
        let e1 = self.tap(TapPoint::Enc1, relu(self.conv("enc1", x, 2)?), biases)?;
        let e2 = self.tap(TapPoint::Enc2, relu(self.conv("enc2", &e1, 2)?), biases)?;
        let mut body = e2.clone();
        let mut i = 0;
        while self.source.get(&format!("body.{i}.conv1.weight")).is_ok() {
            let r = relu(self.conv(&format!("body.{i}.conv1"), &body, 1)?);
            let r = self.conv(&format!("body.{i}.conv2"), &r, 1)?;
            body = body.zip(&r, |a, b| a + b);
            i += 1;
        }
        let body = self.tap(TapPoint::Body, body, biases)?;
        let d1 = relu(self.conv("dec1", &upsample2x(&body), 1)?).zip(&e1, |a, b| a + b);
        let d2 = self.conv("dec2", &upsample2x(&d1), 1)?;
        Ok((x.zip(&d2, |a, b| a + b), vec![e1, e2, body]))
    }
}

/// Amplitude and principal phase in `(-pi, pi]` of every bin of every plane.
/// Bins that are their own conjugate are treated as exactly real.
fn polar_spectrum(x: &Map) -> (Vec<f64>, Vec<f64>) {
    let mut planner = FftPlanner::<f64>::new();
    let (row, col) = (planner.plan_fft_forward(x.w), planner.plan_fft_forward(x.h));
    let (mut amp, mut phase) = (Vec::new(), Vec::new());
    for plane in x.data.chunks_exact(x.h * x.w) {
        let mut buf: Vec<Complex<f64>> = plane.iter().map(|&v| Complex::new(v, 0.0)).collect();
        for r in buf.chunks_exact_mut(x.w) {
            row.process(r);
        }
        for v in 0..x.w {
            let mut column: Vec<Complex<f64>> = (0..x.h).map(|u| buf[u * x.w + v]).collect();
            col.process(&mut column);
            for (u, z) in column.into_iter().enumerate() {
                buf[u * x.w + v] = z;
            }
        }
        for (k, z) in buf.iter().enumerate() {
            let (u, v) = (k / x.w, k % x.w);
            let im = if (2 * u) % x.h == 0 && (2 * v) % x.w == 0 {
                0.0
            } else {
                z.im
            };
            amp.push(z.re.hypot(im));
            let p = if z.re == 0.0 && im == 0.0 {
                0.0
            } else {
                im.atan2(z.re)
            };
            phase.push(if p <= -std::f64::consts::PI {
                std::f64::consts::PI
            } else {
                p
            });
        }
    }
    (amp, phase)
}

/// `2 / (U V C)` times the L1 distance over rows `u < U/2`.
fn half_l1(shape: &Map, a: &[f64], b: &[f64]) -> f64 {
    let (h, w) = (shape.h, shape.w);
    let mut s = 0.0;
    for (k, (x, y)) in a.iter().zip(b).enumerate() {
        if (k / w) % h < h / 2 {
            s += (x - y).abs();
        }
    }
    s * 2.0 / (h * w * shape.c) as f64
}

fn dark_mean(x: &Map, patch: usize) -> f64 {
    let r = patch / 2;
    let mins: Vec<f64> = (0..x.h * x.w)
        .map(|p| {
            (0..x.c)
                .map(|c| x.data[c * x.h * x.w + p])
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let mut s = 0.0;
    for y in 0..x.h {
        for xx in 0..x.w {
            let mut m = f64::INFINITY;
            for yy in y.saturating_sub(r)..=(y + r).min(x.h - 1) {
                for xs in xx.saturating_sub(r)..=(xx + r).min(x.w - 1) {
                    m = m.min(mins[yy * x.w + xs]);
                }
            }
            s += m;
        }
    }
    s / (x.h * x.w) as f64
}

fn cap_mean(x: &Map) -> f64 {
    let plane = x.h * x.w;
    let s: f64 = (0..plane)
        .map(|p| {
            let px: Vec<f64> = (0..x.c).map(|c| x.data[c * plane + p]).collect();
            let v = px.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lo = px.iter().cloned().fold(f64::INFINITY, f64::min);
            let sat = if v == 0.0 { 0.0 } else { (v - lo) / v };
            (v - sat).abs()
        })
        .sum();
    s / plane as f64
}

/// Which single loss term [`loss_on_map`] evaluates.
#[derive(Clone, Copy, Debug)]
pub(super) enum Term {
    Phase,
    Amplitude,
    Dcp(usize),
    Cap,
}

/// One loss term of `x`, scored against `reference` where the term has one.
pub(super) fn loss_on_map(term: Term, x: &Map, reference: &Map) -> f64 {
    match term {
        Term::Phase => half_l1(x, &polar_spectrum(x).1, &polar_spectrum(reference).1),
        Term::Amplitude => half_l1(x, &polar_spectrum(x).0, &polar_spectrum(reference).0),
        Term::Dcp(patch) => dark_mean(x, patch),
        Term::Cap => cap_mean(x),
    }
}

/// Teacher constants the student is scored against.
pub(super) struct References {
    pub output: Map,
    pub taps: Vec<Map>,
    pub clahe: Map,
}

/// Phase, amplitude, dark channel and colour attenuation terms, in that order.
pub(super) fn losses(out: &Map, taps: &[Map], refs: &References, dcp_patch: usize) -> [f64; 4] {
    let phase_term = |s: &Map, t: &Map| half_l1(s, &polar_spectrum(s).1, &polar_spectrum(t).1);
    let mut phase = phase_term(out, &refs.output);
    for (s, t) in taps.iter().zip(&refs.taps) {
        phase += phase_term(s, t);
    }
    phase /= (1 + taps.len()) as f64;
    let amplitude = half_l1(out, &polar_spectrum(out).0, &polar_spectrum(&refs.clahe).0);
    let clamped = out.map(|v| v.clamp(0.0, 1.0));
    [
        phase,
        amplitude,
        dark_mean(&clamped, dcp_patch),
        cap_mean(&clamped),
    ]
}
