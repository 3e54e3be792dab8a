// Direct-loop convolution oracle against the im2col/GEMM path, forward and
// backward, over a spread of kernel/stride/padding geometries.

use logonet_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Case {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Case {
    fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }
}

fn at(x: &[f64], dims: [usize; 4], i: [usize; 4]) -> f64 {
    x[((i[0] * dims[1] + i[1]) * dims[2] + i[2]) * dims[3] + i[3]]
}

/// Returns (out, d_input, d_weight, d_bias) for loss = sum(out * r).
fn naive(c: &Case, x: &[f64], wt: &[f64], b: &[f64], r: &[f64]) -> [Vec<f64>; 4] {
    let (oh, ow) = c.out_hw();
    let xd = [c.n, c.c_in, c.h, c.w];
    let wd = [c.c_out, c.c_in, c.k, c.k];
    let mut out = vec![0.0; c.n * c.c_out * oh * ow];
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; wt.len()];
    let mut db = vec![0.0; b.len()];
    for n in 0..c.n {
        for co in 0..c.c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = ((n * c.c_out + co) * oh + oy) * ow + ox;
                    let mut acc = b[co];
                    db[co] += r[o];
                    for ci in 0..c.c_in {
                        for ki in 0..c.k {
                            for kj in 0..c.k {
                                let iy = (oy * c.stride + ki) as isize - c.pad as isize;
                                let ix = (ox * c.stride + kj) as isize - c.pad as isize;
                                if iy < 0 || ix < 0 || iy >= c.h as isize || ix >= c.w as isize {
                                    continue;
                                }
                                let xi = [n, ci, iy as usize, ix as usize];
                                let wi = [co, ci, ki, kj];
                                let xv = at(x, xd, xi);
                                let wv = at(wt, wd, wi);
                                acc += xv * wv;
                                dx[((n * c.c_in + ci) * c.h + xi[2]) * c.w + xi[3]] += wv * r[o];
                                dw[((co * c.c_in + ci) * c.k + ki) * c.k + kj] += xv * r[o];
                            }
                        }
                    }
                    out[o] = acc;
                }
            }
        }
    }
    [out, dx, dw, db]
}

fn cases() -> Vec<Case> {
    let mut v = Vec::new();
    for k in 1..=7 {
        for stride in 1..=3 {
            for pad in [0, k / 2, k] {
                v.push(Case {
                    n: 2,
                    c_in: 3,
                    h: 9,
                    w: 11,
                    c_out: 4,
                    k,
                    stride,
                    pad,
                });
            }
        }
    }
    // wide, deep patches: the output is processed in several row bands,
    // the last one partial
    for (k, stride, pad) in [(5, 1, 2), (3, 2, 1), (4, 1, 0)] {
        v.push(Case {
            n: 2,
            c_in: 16,
            h: 11,
            w: 40,
            c_out: 4,
            k,
            stride,
            pad,
        });
    }
    v
}

fn random(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn run_tape<T: logonet_core::Real>(
    c: &Case,
    x: &[f64],
    wt: &[f64],
    b: &[f64],
    r: &[f64],
) -> [Vec<f64>; 4] {
    let (oh, ow) = c.out_hw();
    let mut tape = Tape::<T>::new();
    let xv = tape.param(Tensor::from_f64(&[c.n, c.c_in, c.h, c.w], x).unwrap());
    let wv = tape.param(Tensor::from_f64(&[c.c_out, c.c_in, c.k, c.k], wt).unwrap());
    let bv = tape.param(Tensor::from_f64(&[c.c_out], b).unwrap());
    let rv = tape.constant(Tensor::from_f64(&[c.n, c.c_out, oh, ow], r).unwrap());
    let out = tape.conv2d(xv, wv, bv, c.stride, c.pad).unwrap();
    let weighted = tape.mul_broadcast(out, rv).unwrap();
    let loss = tape.sum(weighted);
    tape.backward(loss).unwrap();
    let to64 = |s: &[T]| s.iter().map(|v| v.to_f64().unwrap()).collect::<Vec<_>>();
    [
        to64(tape.value(out).data()),
        to64(tape.grad(xv).unwrap()),
        to64(tape.grad(wv).unwrap()),
        to64(tape.grad(bv).unwrap()),
    ]
}

/// `tol` bounds the error of sums of up to `TERMS` products; longer sums
/// get a proportionally larger bound, since rounding grows with length.
const TERMS: f64 = 300.0;

fn check<T: logonet_core::Real>(tol: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for c in cases() {
        let (oh, ow) = c.out_hw();
        let x = random(&mut rng, c.n * c.c_in * c.h * c.w);
        let wt = random(&mut rng, c.c_out * c.c_in * c.k * c.k);
        let b = random(&mut rng, c.c_out);
        let r = random(&mut rng, c.n * c.c_out * oh * ow);
        let want = naive(&c, &x, &wt, &b, &r);
        let got = run_tape::<T>(&c, &x, &wt, &b, &r);
        let terms = [
            c.c_in * c.k * c.k,
            c.c_out * c.k * c.k,
            c.n * oh * ow,
            c.n * oh * ow,
        ];
        for ((name, (g, w)), n) in ["out", "d_input", "d_weight", "d_bias"]
            .iter()
            .zip(got.iter().zip(&want))
            .zip(terms)
        {
            let err = max_abs_diff(g, w);
            let bound = tol * (n as f64 / TERMS).max(1.0);
            assert!(
                err <= bound,
                "{name} k={} stride={} pad={}: max abs diff {err:e}",
                c.k,
                c.stride,
                c.pad
            );
        }
    }
}

#[test]
fn conv_matches_direct_loops_f64() {
    check::<f64>(1e-10);
}

#[test]
fn conv_matches_direct_loops_f32() {
    check::<f32>(1e-5);
}
