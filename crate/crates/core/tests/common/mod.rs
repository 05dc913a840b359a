//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::HashMap;

use mople::Dataset;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// `y = x beta + sin(2 pi u) + N(0, 0.25)` with `x, u ~ U(0, 1)`.
pub fn partial_linear<R: Rng>(n: usize, beta: &[f64], rng: &mut R) -> Dataset {
    let p = beta.len();
    let noise = Normal::new(0.0, 0.5).unwrap();
    let mut x = DMatrix::zeros(n, p);
    let mut u = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let mut mean = 0.0;
        for (j, b) in beta.iter().enumerate() {
            let v: f64 = rng.random();
            x[(i, j)] = v;
            mean += v * b;
        }
        let ui: f64 = rng.random();
        u.push(ui);
        y.push(mean + (2.0 * std::f64::consts::PI * ui).sin() + noise.sample(rng));
    }
    Dataset::new(y, x, u).unwrap()
}

fn epanechnikov(t: f64) -> f64 {
    if t.abs() <= 1.0 {
        0.75 * (1.0 - t * t)
    } else {
        0.0
    }
}

/// Dense smoother with unit weights: row `j` holds the normalised kernel
/// weights of every observation at `u_j`.
pub fn dense_smoother(u: &[f64], h: f64) -> DMatrix<f64> {
    let n = u.len();
    let mut s = DMatrix::zeros(n, n);
    for j in 0..n {
        let w: Vec<f64> = u.iter().map(|ui| epanechnikov((ui - u[j]) / h)).collect();
        let total: f64 = w.iter().sum();
        for i in 0..n {
            s[(j, i)] = w[i] / total;
        }
    }
    s
}

/// One-shot profile estimator: regress `(I - S) y` on `(I - S) X`.
pub fn profile_beta(data: &Dataset, h: f64) -> DVector<f64> {
    let s = dense_smoother(&data.u, h);
    let y = DVector::from_vec(data.y.clone());
    let xt = &data.x - &s * &data.x;
    let yt = &y - &s * &y;
    let lhs = xt.transpose() * &xt;
    let rhs = xt.transpose() * yt;
    lhs.lu().solve(&rhs).expect("full-rank profile design")
}

/// Ordinary least squares of `y` on `(1, X)`; intercept first.
pub fn ols_with_intercept(data: &Dataset) -> DVector<f64> {
    let n = data.n();
    let mut d = DMatrix::from_element(n, data.p() + 1, 1.0);
    d.view_mut((0, 1), (n, data.p())).copy_from(&data.x);
    let y = DVector::from_vec(data.y.clone());
    (d.transpose() * &d).lu().solve(&(d.transpose() * y)).unwrap()
}

/// All set partitions of `n` elements as restricted growth strings.
pub fn set_partitions(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, n: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        let next = prefix.iter().max().map_or(0, |m| m + 1);
        for v in 0..=next {
            prefix.push(v);
            rec(prefix, n, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if n > 0 {
        rec(&mut vec![0], n, &mut out);
    }
    out
}

/// ARI by counting agreements over all pairs.
pub fn pair_counting_ari(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let (mut both, mut only_a, mut only_b, mut pairs) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            let sa = a[i] == a[j];
            let sb = b[i] == b[j];
            pairs += 1.0;
            if sa && sb {
                both += 1.0;
            }
            if sa {
                only_a += 1.0;
            }
            if sb {
                only_b += 1.0;
            }
        }
    }
    let expected = only_a * only_b / pairs;
    let max = 0.5 * (only_a + only_b);
    if max == expected {
        if same_partition(a, b) {
            1.0
        } else {
            0.0
        }
    } else {
        (both - expected) / (max - expected)
    }
}

pub fn same_partition(a: &[usize], b: &[usize]) -> bool {
    let mut ab = HashMap::new();
    let mut ba = HashMap::new();
    a.iter()
        .zip(b)
        .all(|(x, y)| *ab.entry(x).or_insert(y) == y && *ba.entry(y).or_insert(x) == x)
}

fn counts(a: &[usize]) -> HashMap<usize, f64> {
    let mut m = HashMap::new();
    for v in a {
        *m.entry(*v).or_insert(0.0) += 1.0;
    }
    m
}

pub fn entropy(a: &[usize]) -> f64 {
    let n = a.len() as f64;
    counts(a)
        .values()
        .map(|c| {
            let p = c / n;
            -p * p.ln()
        })
        .sum()
}

pub fn mutual_information(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let ca = counts(a);
    let cb = counts(b);
    let mut joint: HashMap<(usize, usize), f64> = HashMap::new();
    for (x, y) in a.iter().zip(b) {
        *joint.entry((*x, *y)).or_insert(0.0) += 1.0;
    }
    joint
        .iter()
        .map(|((x, y), nij)| nij / n * (n * nij / (ca[x] * cb[y])).ln())
        .sum()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for rest in permutations(n - 1) {
        for pos in 0..n {
            let mut p = rest.clone();
            p.insert(pos, n - 1);
            out.push(p);
        }
    }
    out
}

fn size_signature(a: &[usize]) -> Vec<usize> {
    let mut s: Vec<usize> = counts(a).values().map(|c| *c as usize).collect();
    s.sort_unstable();
    s
}

/// Expected MI under the permutation model, averaged over all `n!`
/// relabelings of the observations and cached by cluster-size signature.
pub struct ExhaustiveEmi {
    cache: HashMap<(Vec<usize>, Vec<usize>), f64>,
}

impl ExhaustiveEmi {
    pub fn new() -> Self {
        ExhaustiveEmi { cache: HashMap::new() }
    }

    pub fn expected(&mut self, a: &[usize], b: &[usize]) -> f64 {
        let key = (size_signature(a), size_signature(b));
        if let Some(v) = self.cache.get(&key) {
            return *v;
        }
        let perms = permutations(a.len());
        let total: f64 = perms
            .iter()
            .map(|p| {
                let shuffled: Vec<usize> = p.iter().map(|&i| b[i]).collect();
                mutual_information(a, &shuffled)
            })
            .sum();
        let v = total / perms.len() as f64;
        self.cache.insert(key, v);
        v
    }

    /// Max-normalised adjusted mutual information.
    pub fn ami(&mut self, a: &[usize], b: &[usize]) -> f64 {
        let emi = self.expected(a, b);
        let denom = entropy(a).max(entropy(b)) - emi;
        if denom.abs() < 1e-15 {
            if same_partition(a, b) {
                1.0
            } else {
                0.0
            }
        } else {
            (mutual_information(a, b) - emi) / denom
        }
    }
}

/// Composite Simpson rule on `[a, b]` with `m` (even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, m: usize) -> f64 {
    let h = (b - a) / m as f64;
    let mut s = f(a) + f(b);
    for k in 1..m {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + k as f64 * h);
    }
    s * h / 3.0
}

pub fn kernel(t: f64) -> f64 {
    epanechnikov(t)
}
