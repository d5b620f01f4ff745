//! Reference implementations used by the integration tests. Each one is
//! written from the definition, by brute force, and shares no code with the
//! library routine it checks.

#![allow(dead_code)]

use mtkd::tensor::{Tape, Tensor, TensorError, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

// ------------------------------------------------------------------ gradients

pub const FD_STEP: f64 = 1e-5;
/// Central differences carry about 1e-10 of rounding noise here, so gradients
/// that are identically zero (an attention key bias) are compared absolutely.
const FD_FLOOR: f64 = 1e-4;

fn forward<F>(inputs: &[Tensor], f: &F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars).expect("forward");
    let v = tape.value(out);
    assert!(v.is_scalar(), "gradient check needs a scalar output, got {:?}", v.shape());
    v.item()
}

/// Largest norm-wise relative error between backprop and central differences
/// over all inputs: `|g - n| / max(|g|, |n|, floor)`.
pub fn fd_check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars).expect("forward");
    tape.backward(out).expect("backward");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let mut work = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..inputs.len() {
        let mut diff2 = 0.0;
        let (mut a2, mut n2) = (0.0, 0.0);
        for j in 0..inputs[i].numel() {
            let x = work[i].data()[j];
            work[i].data_mut()[j] = x + FD_STEP;
            let up = forward(&work, &f);
            work[i].data_mut()[j] = x - FD_STEP;
            let down = forward(&work, &f);
            work[i].data_mut()[j] = x;
            let n = (up - down) / (2.0 * FD_STEP);
            let a = analytic[i][j];
            diff2 += (a - n) * (a - n);
            a2 += a * a;
            n2 += n * n;
        }
        let rel = diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(FD_FLOOR);
        worst = worst.max(rel);
    }
    worst
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Values bounded away from zero, for ops with a kink there.
pub fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(lo..hi);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

// ------------------------------------------------------------------ transducer

fn log_sum(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn walk(lp: &Tensor, y: &[usize], t: usize, u: usize, acc: f64, out: &mut Vec<f64>) {
    let (tn, un, vn) = (lp.shape()[0], lp.shape()[1], lp.shape()[2]);
    let at = |t: usize, u: usize, k: usize| lp.data()[(t * un + u) * vn + k];
    if u < y.len() {
        walk(lp, y, t, u + 1, acc + at(t, u, y[u]), out);
    }
    let blank = acc + at(t, u, 0);
    if t + 1 < tn {
        walk(lp, y, t + 1, u, blank, out);
    } else if u == y.len() {
        out.push(blank);
    }
}

/// `-log` of the sum over every monotone alignment path, each enumerated
/// explicitly. `lp` is `[T x (U+1) x (V+1)]`, blank at index 0.
pub fn transducer_brute_force(lp: &Tensor, y: &[usize]) -> f64 {
    let mut paths = Vec::new();
    walk(lp, y, 0, 0, 0.0, &mut paths);
    -log_sum(&paths)
}

pub fn count_alignments(t: usize, u: usize) -> usize {
    // C(T - 1 + U, U): place U labels among T - 1 internal blanks
    let (n, k) = (t - 1 + u, u);
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

// ------------------------------------------------------------------ WER

fn scripts(r: &[usize], h: &[usize], cost: usize, best: &mut usize) {
    if cost >= *best {
        return;
    }
    match (r.split_first(), h.split_first()) {
        (None, None) => *best = cost,
        (Some(_), None) => scripts(&r[1..], h, cost + 1, best),
        (None, Some(_)) => scripts(r, &h[1..], cost + 1, best),
        (Some((a, rt)), Some((b, ht))) => {
            scripts(rt, ht, cost + usize::from(a != b), best);
            scripts(rt, h, cost + 1, best);
            scripts(r, ht, cost + 1, best);
        }
    }
}

/// Minimum number of substitutions, deletions and insertions over all edit
/// scripts turning `reference` into `hyp`.
pub fn edit_distance_brute(reference: &[usize], hyp: &[usize]) -> usize {
    let mut best = reference.len() + hyp.len();
    scripts(reference, hyp, 0, &mut best);
    best
}

// ------------------------------------------------------------------ mAP

/// Average precision by walking each positive's rank; ties rank the lower
/// sample index first.
pub fn average_precision_rank_walk(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let rank = |i: usize| {
        1 + (0..scores.len())
            .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
            .count()
    };
    let pos: Vec<usize> = (0..scores.len()).filter(|&i| positive[i]).collect();
    if pos.is_empty() {
        return None;
    }
    let total: f64 = pos
        .iter()
        .map(|&i| {
            let r = rank(i);
            let above = pos.iter().filter(|&&j| rank(j) <= r).count();
            above as f64 / r as f64
        })
        .sum();
    Some(total / pos.len() as f64)
}

pub fn map_rank_walk(scores: &[Vec<f64>], labels: &[Vec<f64>]) -> f64 {
    let k = scores[0].len();
    let aps: Vec<f64> = (0..k)
        .filter_map(|c| {
            let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            let p: Vec<bool> = labels.iter().map(|r| r[c] == 1.0).collect();
            average_precision_rank_walk(&s, &p)
        })
        .collect();
    aps.iter().sum::<f64>() / aps.len() as f64
}

// ------------------------------------------------------------------ EER

/// Sweeps every candidate threshold (each distinct score and +inf), accepting
/// trials with `score >= threshold`, and linearly interpolates FAR and FRR at
/// the first threshold where FRR catches up with FAR.
pub fn eer_sweep(scores: &[(f64, bool)]) -> f64 {
    let mut cands: Vec<f64> = scores.iter().map(|s| s.0).collect();
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    cands.push(f64::INFINITY);
    let n_tgt = scores.iter().filter(|s| s.1).count() as f64;
    let n_non = scores.len() as f64 - n_tgt;
    let rates = |th: f64| {
        let fa = scores.iter().filter(|s| !s.1 && s.0 >= th).count() as f64 / n_non;
        let fr = scores.iter().filter(|s| s.1 && s.0 < th).count() as f64 / n_tgt;
        (fa, fr)
    };
    let pts: Vec<(f64, f64)> = cands.iter().map(|&th| rates(th)).collect();
    let k = pts.iter().position(|(fa, fr)| fa <= fr).expect("FAR reaches 0 at +inf");
    let (fa, fr) = pts[k];
    if fa == fr {
        return fa;
    }
    let (pfa, pfr) = pts[k - 1];
    let a = (pfa - pfr) / ((pfa - pfr) - (fa - fr));
    pfa + a * (fa - pfa)
}

// ------------------------------------------------------------------ statistics

/// Upper-tail probability of a chi-square variable with `df` degrees of freedom.
pub fn chi2_sf(x: f64, df: f64) -> f64 {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    ChiSquared::new(df).expect("positive df").sf(x)
}
