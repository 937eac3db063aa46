#![allow(dead_code)]

pub mod gradsuite;

use pairedit::numerics::{grad_check, Axis, GradCheckOptions, Graph, ParamStore, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Contract a tensor node to a scalar against fixed random weights, so every
/// output entry contributes a distinct gradient.
pub fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed ^ 0x5eed);
    let w = randn(&mut r, g.shape(out));
    let w = g.input(w)?;
    let p = g.mul(out, w)?;
    g.sum(p)
}

/// Worst result per case over all instances.
#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: String,
    pub instances: usize,
    pub worst_rel_err: f64,
    pub pass: bool,
}

type Builder = fn(&mut ChaCha8Rng) -> (ParamStore<f64>, Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>>);

fn dims(r: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    r.random_range(lo..=hi)
}

fn store_with(shapes: &[(&str, Vec<usize>)], r: &mut ChaCha8Rng) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (name, shape) in shapes {
        s.add(*name, randn(r, shape)).unwrap();
    }
    s
}

macro_rules! pid {
    ($s:expr, $g:expr, $name:expr) => {
        $g.param($s, $s.find($name).unwrap())
    };
}

pub fn primitive_cases() -> Vec<(&'static str, Builder)> {
    vec![
        ("add", |r| {
            let sh = vec![dims(r, 1, 4), dims(r, 1, 5)];
            let s = store_with(&[("a", sh.clone()), ("b", sh)], r);
            (
                s,
                Box::new(|g, s| {
                    let (a, b) = (pid!(s, g, "a"), pid!(s, g, "b"));
                    let o = g.add(a, b)?;
                    project(g, o, 1)
                }),
            )
        }),
        ("sub", |r| {
            let sh = vec![dims(r, 1, 4), dims(r, 1, 5)];
            let s = store_with(&[("a", sh.clone()), ("b", sh)], r);
            (
                s,
                Box::new(|g, s| {
                    let (a, b) = (pid!(s, g, "a"), pid!(s, g, "b"));
                    let o = g.sub(a, b)?;
                    project(g, o, 2)
                }),
            )
        }),
        ("mul", |r| {
            let sh = vec![dims(r, 1, 4), dims(r, 1, 5)];
            let s = store_with(&[("a", sh.clone()), ("b", sh)], r);
            (
                s,
                Box::new(|g, s| {
                    let (a, b) = (pid!(s, g, "a"), pid!(s, g, "b"));
                    let o = g.mul(a, b)?;
                    project(g, o, 3)
                }),
            )
        }),
        ("scale", |r| {
            let s = store_with(&[("a", vec![dims(r, 1, 6)])], r);
            (
                s,
                Box::new(|g, s| {
                    let a = pid!(s, g, "a");
                    let o = g.scale(a, -1.7)?;
                    project(g, o, 4)
                }),
            )
        }),
        ("mul_scalar", |r| {
            let s = store_with(&[("a", vec![dims(r, 1, 3), dims(r, 1, 4)]), ("s", vec![1])], r);
            (
                s,
                Box::new(|g, s| {
                    let (a, k) = (pid!(s, g, "a"), pid!(s, g, "s"));
                    let o = g.mul_scalar(a, k)?;
                    project(g, o, 5)
                }),
            )
        }),
        ("add_bias_first", |r| {
            let c = dims(r, 1, 4);
            let s = store_with(&[("x", vec![c, dims(r, 1, 3), dims(r, 1, 3)]), ("b", vec![c])], r);
            (
                s,
                Box::new(|g, s| {
                    let (x, b) = (pid!(s, g, "x"), pid!(s, g, "b"));
                    let o = g.add_bias(x, b, Axis::First)?;
                    project(g, o, 6)
                }),
            )
        }),
        ("add_bias_last", |r| {
            let d = dims(r, 1, 5);
            let s = store_with(&[("x", vec![dims(r, 1, 4), d]), ("b", vec![d])], r);
            (
                s,
                Box::new(|g, s| {
                    let (x, b) = (pid!(s, g, "x"), pid!(s, g, "b"));
                    let o = g.add_bias(x, b, Axis::Last)?;
                    project(g, o, 7)
                }),
            )
        }),
        ("mul_vec_first", |r| {
            let c = dims(r, 1, 4);
            let s = store_with(&[("x", vec![c, dims(r, 1, 3), dims(r, 1, 3)]), ("g", vec![c])], r);
            (
                s,
                Box::new(|g, s| {
                    let (x, v) = (pid!(s, g, "x"), pid!(s, g, "g"));
                    let o = g.mul_vec(x, v, Axis::First)?;
                    project(g, o, 8)
                }),
            )
        }),
        ("mul_vec_last", |r| {
            let d = dims(r, 1, 5);
            let s = store_with(&[("x", vec![dims(r, 1, 4), d]), ("g", vec![d])], r);
            (
                s,
                Box::new(|g, s| {
                    let (x, v) = (pid!(s, g, "x"), pid!(s, g, "g"));
                    let o = g.mul_vec(x, v, Axis::Last)?;
                    project(g, o, 9)
                }),
            )
        }),
        ("matmul", |r| {
            let (m, k, n) = (dims(r, 1, 4), dims(r, 1, 5), dims(r, 1, 4));
            let (ta, tb) = (r.random_bool(0.5), r.random_bool(0.5));
            let sa = if ta { vec![k, m] } else { vec![m, k] };
            let sb = if tb { vec![n, k] } else { vec![k, n] };
            let s = store_with(&[("a", sa), ("b", sb)], r);
            (
                s,
                Box::new(move |g, s| {
                    let (a, b) = (pid!(s, g, "a"), pid!(s, g, "b"));
                    let o = g.matmul(a, b, ta, tb)?;
                    project(g, o, 10)
                }),
            )
        }),
        ("bmm", |r| {
            let (bs, m, k, n) = (dims(r, 1, 3), dims(r, 1, 4), dims(r, 1, 4), dims(r, 1, 4));
            let tb = r.random_bool(0.5);
            let sb = if tb { vec![bs, n, k] } else { vec![bs, k, n] };
            let s = store_with(&[("a", vec![bs, m, k]), ("b", sb)], r);
            (
                s,
                Box::new(move |g, s| {
                    let (a, b) = (pid!(s, g, "a"), pid!(s, g, "b"));
                    let o = g.bmm(a, b, tb)?;
                    project(g, o, 11)
                }),
            )
        }),
        ("conv2d", |r| {
            let (cin, cout) = (dims(r, 1, 3), dims(r, 1, 3));
            let k = [1usize, 3][r.random_range(0..2)];
            let stride = dims(r, 1, 2);
            let pad = if k == 3 { dims(r, 0, 1) } else { 0 };
            let (h, w) = (dims(r, 3, 7), dims(r, 3, 7));
            let s = store_with(&[("x", vec![cin, h, w]), ("w", vec![cout, cin, k, k])], r);
            (
                s,
                Box::new(move |g, s| {
                    let (x, w) = (pid!(s, g, "x"), pid!(s, g, "w"));
                    let o = g.conv2d(x, w, stride, pad)?;
                    project(g, o, 12)
                }),
            )
        }),
        ("softmax", |r| {
            let s = store_with(&[("x", vec![dims(r, 1, 4), dims(r, 1, 6)])], r);
            (
                s,
                Box::new(|g, s| {
                    let x = pid!(s, g, "x");
                    let o = g.softmax(x)?;
                    project(g, o, 13)
                }),
            )
        }),
        ("normalize_rows", |r| {
            let rows = dims(r, 1, 4);
            let s = store_with(&[("x", vec![rows, dims(r, 2, 6)])], r);
            (
                s,
                Box::new(move |g, s| {
                    let x = pid!(s, g, "x");
                    let o = g.normalize_rows(x, rows, 1e-5)?;
                    project(g, o, 14)
                }),
            )
        }),
        ("silu", |r| {
            let s = store_with(&[("x", vec![dims(r, 1, 8)])], r);
            (
                s,
                Box::new(|g, s| {
                    let x = pid!(s, g, "x");
                    let o = g.silu(x)?;
                    project(g, o, 15)
                }),
            )
        }),
        ("exp", |r| {
            let s = store_with(&[("x", vec![dims(r, 1, 8)])], r);
            (
                s,
                Box::new(|g, s| {
                    let x = pid!(s, g, "x");
                    let o = g.exp(x)?;
                    project(g, o, 24)
                }),
            )
        }),
        ("gelu", |r| {
            let s = store_with(&[("x", vec![dims(r, 1, 8)])], r);
            (
                s,
                Box::new(|g, s| {
                    let x = pid!(s, g, "x");
                    let o = g.gelu(x)?;
                    project(g, o, 16)
                }),
            )
        }),
        ("reshape", |r| {
            let (a, b) = (dims(r, 1, 4), dims(r, 1, 4));
            let s = store_with(&[("x", vec![a, b])], r);
            (
                s,
                Box::new(move |g, s| {
                    let x = pid!(s, g, "x");
                    let o = g.reshape(x, &[b, a])?;
                    project(g, o, 17)
                }),
            )
        }),
        ("permute", |r| {
            let s = store_with(&[("x", vec![dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 3)])], r);
            let axes = [[0, 2, 1], [1, 0, 2], [2, 0, 1], [1, 2, 0]][r.random_range(0..4)];
            (
                s,
                Box::new(move |g, s| {
                    let x = pid!(s, g, "x");
                    let o = g.permute(x, &axes)?;
                    project(g, o, 18)
                }),
            )
        }),
        ("concat0", |r| {
            let d = dims(r, 1, 4);
            let s = store_with(&[("a", vec![dims(r, 1, 3), d]), ("b", vec![dims(r, 1, 3), d])], r);
            (
                s,
                Box::new(|g, s| {
                    let (a, b) = (pid!(s, g, "a"), pid!(s, g, "b"));
                    let o = g.concat0(&[a, b, a])?;
                    project(g, o, 19)
                }),
            )
        }),
        ("slice0", |r| {
            let n = dims(r, 2, 5);
            let start = r.random_range(0..n - 1);
            let end = r.random_range(start + 1..=n);
            let s = store_with(&[("x", vec![n, dims(r, 1, 3)])], r);
            (
                s,
                Box::new(move |g, s| {
                    let x = pid!(s, g, "x");
                    let o = g.slice0(x, start, end)?;
                    project(g, o, 20)
                }),
            )
        }),
        ("sum", |r| {
            let s = store_with(&[("x", vec![dims(r, 1, 4), dims(r, 1, 4)])], r);
            (
                s,
                Box::new(|g, s| {
                    let x = pid!(s, g, "x");
                    let sq = g.mul(x, x)?;
                    g.sum(sq)
                }),
            )
        }),
        ("mean", |r| {
            let s = store_with(&[("x", vec![dims(r, 1, 4), dims(r, 1, 4)])], r);
            (
                s,
                Box::new(|g, s| {
                    let x = pid!(s, g, "x");
                    let sq = g.mul(x, x)?;
                    g.mean(sq)
                }),
            )
        }),
        ("mean0", |r| {
            let s = store_with(&[("x", vec![dims(r, 2, 4), dims(r, 1, 3), dims(r, 1, 3)])], r);
            (
                s,
                Box::new(|g, s| {
                    let x = pid!(s, g, "x");
                    let o = g.mean0(x)?;
                    project(g, o, 21)
                }),
            )
        }),
        ("masked_sq_err", |r| {
            let (n, d) = (dims(r, 1, 5), dims(r, 1, 5));
            let target = randn(r, &[n, d]);
            let mask: Vec<f64> = (0..n).map(|_| if r.random_bool(0.6) { 1.0 } else { 0.0 }).collect();
            let s = store_with(&[("x", vec![n, d])], r);
            (
                s,
                Box::new(move |g, s| {
                    let x = pid!(s, g, "x");
                    g.masked_sq_err(x, &target, Some(&mask))
                }),
            )
        }),
        ("upsample2x", |r| {
            let s = store_with(&[("x", vec![dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 3)])], r);
            (
                s,
                Box::new(|g, s| {
                    let x = pid!(s, g, "x");
                    let o = g.upsample2x(x)?;
                    project(g, o, 22)
                }),
            )
        }),
        ("add_rows", |r| {
            let (n, d) = (dims(r, 2, 5), dims(r, 1, 3));
            let pairs: Vec<(usize, usize)> = (0..dims(r, 0, 4)).map(|_| (r.random_range(0..n), r.random_range(0..n))).collect();
            let s = store_with(&[("dst", vec![n, d]), ("src", vec![n, d])], r);
            (
                s,
                Box::new(move |g, s| {
                    let (a, b) = (pid!(s, g, "dst"), pid!(s, g, "src"));
                    let o = g.add_rows(a, b, &pairs)?;
                    project(g, o, 23)
                }),
            )
        }),
    ]
}

/// Gradient-check every primitive on `instances` random instances.
pub fn run_primitive_suite(instances: usize, tolerance: f64) -> Vec<CaseResult> {
    primitive_cases()
        .into_iter()
        .enumerate()
        .map(|(ci, (name, build))| {
            let mut worst = 0.0f64;
            let mut pass = true;
            for i in 0..instances {
                let mut r = rng(1000 * ci as u64 + i as u64);
                let (mut store, f) = build(&mut r);
                let reports = grad_check(&mut store, |g, s| f(g, s), &GradCheckOptions::with_tolerance(tolerance)).unwrap();
                for rep in reports {
                    worst = worst.max(rep.max_rel_err);
                    pass &= rep.pass;
                }
            }
            CaseResult { name: name.to_string(), instances, worst_rel_err: worst, pass }
        })
        .collect()
}
