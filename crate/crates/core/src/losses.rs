//! Training objectives. Every loss is recorded on the tape so gradients flow
//! back into the heads and encoder; teacher targets enter as constants.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::task::Task;
use crate::tensor::{log_add_exp, CustomBackward, Tape, Tensor, TensorError, Var};

/// Probability floor applied before every BCE logarithm.
pub const PROB_FLOOR: f64 = 1e-7;
/// Student-norm floor in the cosine loss.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid label: {0}")]
    InvalidLabel(String),
    #[error("no task present in batch")]
    EmptyBatch,
    #[error("all loss weights are zero for the tasks present ({0})")]
    ZeroWeights(String),
    #[error("invalid loss weights: {0}")]
    BadWeights(String),
}

pub type Result<T> = std::result::Result<T, LossError>;

fn same_shape(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(TensorError::ShapeMismatch {
            op,
            left: tape.shape(a).to_vec(),
            right: tape.shape(b).to_vec(),
        }
        .into());
    }
    Ok(())
}

/// Mean absolute error over all elements.
pub fn kd_asr_l1(tape: &mut Tape, teacher: &Tensor, student: Var) -> Result<Var> {
    let t = tape.constant(teacher.clone());
    same_shape(tape, "kd_asr_l1", t, student)?;
    let d = tape.sub(student, t)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

/// Mean BCE of sigmoid(student) against target probabilities `p`.
///
/// `log q` and `log(1 - q)` are taken as `log sigmoid(s)` and `log sigmoid(-s)`,
/// each floored at [`PROB_FLOOR`], so saturated but correct logits keep their
/// tiny true loss.
fn bce(tape: &mut Tape, op: &'static str, p: &[f64], student: Var) -> Result<Var> {
    if tape.shape(student) != [p.len()] {
        return Err(TensorError::ShapeMismatch {
            op,
            left: vec![p.len()],
            right: tape.shape(student).to_vec(),
        }
        .into());
    }
    let q = tape.sigmoid(student);
    let q = tape.clamp_min(q, PROB_FLOOR);
    let log_q = tape.log(q)?;
    let neg = tape.neg(student);
    let nq = tape.sigmoid(neg);
    let nq = tape.clamp_min(nq, PROB_FLOOR);
    let log_nq = tape.log(nq)?;
    let pv = tape.constant(Tensor::vector(p.to_vec()));
    let npv = tape.constant(Tensor::vector(p.iter().map(|x| 1.0 - x).collect()));
    let a = tape.mul(pv, log_q)?;
    let b = tape.mul(npv, log_nq)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s);
    Ok(tape.neg(m))
}

pub fn kd_at_bce(tape: &mut Tape, teacher_logits: &Tensor, student: Var) -> Result<Var> {
    let p: Vec<f64> = teacher_logits.data().iter().map(|&z| sigmoid(z)).collect();
    bce(tape, "kd_at_bce", &p, student)
}

pub fn at_bce_supervised(tape: &mut Tape, student: Var, label: &[f64]) -> Result<Var> {
    if let Some(bad) = label.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(LossError::InvalidLabel(format!("multi-hot entry {bad} is not 0 or 1")));
    }
    bce(tape, "at_bce_supervised", label, student)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `1 - cos(teacher, student)`, with `cos = <t, s> / sqrt(|t|^2 |s|^2)`.
///
/// Both squared norms and the dot product use the same summation order, and
/// `sqrt(x * x) == x` in IEEE arithmetic, so parallel, anti-parallel and
/// disjoint-support pairs give exactly 0, 2 and 1.
pub fn kd_sv_cosine(tape: &mut Tape, teacher: &Tensor, student: Var) -> Result<Var> {
    let tsq = teacher.data().iter().map(|v| v * v).fold(0.0, |a, b| a + b);
    if tsq == 0.0 || !tsq.is_finite() {
        return Err(LossError::InvalidLabel("teacher speaker vector has zero or non-finite norm".into()));
    }
    let t = tape.constant(teacher.clone());
    same_shape(tape, "kd_sv_cosine", t, student)?;
    let dot = tape.mul(t, student)?;
    let dot = tape.sum(dot);
    let sq = tape.mul(student, student)?;
    let sq = tape.sum(sq);
    let sq = tape.clamp_min(sq, NORM_FLOOR * NORM_FLOOR);
    let denom = tape.scale(sq, tsq);
    let denom = tape.sqrt(denom)?;
    let cos = tape.div(dot, denom)?;
    Ok(tape.affine(cos, -1.0, 1.0))
}

pub fn sv_cross_entropy(tape: &mut Tape, logits: Var, speaker: usize) -> Result<Var> {
    let s = tape.value(logits).numel();
    if tape.shape(logits).len() != 1 {
        return Err(TensorError::ShapeMismatch {
            op: "sv_cross_entropy",
            left: tape.shape(logits).to_vec(),
            right: vec![s],
        }
        .into());
    }
    if speaker >= s {
        return Err(TensorError::IndexOutOfRange {
            op: "sv_cross_entropy",
            index: speaker,
            len: s,
        }
        .into());
    }
    let lp = tape.log_softmax(logits);
    let picked = tape.gather_flat(lp, &[speaker])?;
    let picked = tape.sum(picked);
    Ok(tape.neg(picked))
}

// ------------------------------------------------------------------ transducer

struct TransducerRule {
    t: usize,
    u1: usize,
    v1: usize,
    targets: Vec<usize>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    log_p: f64,
}

impl CustomBackward for TransducerRule {
    fn name(&self) -> &'static str {
        "transducer_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let lp = inputs[0].data();
        let (t_len, u1, v1) = (self.t, self.u1, self.v1);
        let g = grad_out[0];
        let mut grad = vec![0.0; lp.len()];
        let at = |t: usize, u: usize| t * u1 + u;
        let idx = |t: usize, u: usize, k: usize| (t * u1 + u) * v1 + k;
        for t in 0..t_len {
            for u in 0..u1 {
                let a = self.alpha[at(t, u)];
                // blank
                let next = if t + 1 < t_len {
                    Some(self.beta[at(t + 1, u)])
                } else if u + 1 == u1 {
                    Some(0.0)
                } else {
                    None
                };
                if let Some(b) = next {
                    let i = idx(t, u, 0);
                    grad[i] = -g * (a + lp[i] + b - self.log_p).exp();
                }
                if u + 1 < u1 {
                    let i = idx(t, u, self.targets[u]);
                    grad[i] = -g * (a + lp[i] + self.beta[at(t, u + 1)] - self.log_p).exp();
                }
            }
        }
        vec![Some(grad)]
    }
}

/// Negative log-likelihood of `targets` summed over all monotone alignments.
///
/// `log_probs` is `[T x (U+1) x (V+1)]` with index 0 as blank; targets are in `1..=V`.
pub fn transducer_loss(tape: &mut Tape, log_probs: Var, targets: &[usize]) -> Result<Var> {
    let shape = tape.shape(log_probs).to_vec();
    let u1 = targets.len() + 1;
    if shape.len() != 3 || shape[1] != u1 || shape[2] < 2 {
        return Err(TensorError::ShapeMismatch {
            op: "transducer_loss",
            left: shape,
            right: vec![0, u1, 0],
        }
        .into());
    }
    let (t_len, v1) = (shape[0], shape[2]);
    if t_len == 0 {
        return Err(TensorError::SequenceTooShort {
            op: "transducer_loss",
            len: 0,
            needed: 1,
        }
        .into());
    }
    if let Some(&bad) = targets.iter().find(|&&y| y == 0 || y >= v1) {
        return Err(LossError::InvalidLabel(format!(
            "target token {bad} outside vocabulary 1..={}",
            v1 - 1
        )));
    }
    let lp = tape.value(log_probs).data();
    let at = |t: usize, u: usize| t * u1 + u;
    let idx = |t: usize, u: usize, k: usize| (t * u1 + u) * v1 + k;

    let mut alpha = vec![f64::NEG_INFINITY; t_len * u1];
    alpha[0] = 0.0;
    for t in 0..t_len {
        for u in 0..u1 {
            if t == 0 && u == 0 {
                continue;
            }
            let mut acc = f64::NEG_INFINITY;
            if t > 0 {
                acc = alpha[at(t - 1, u)] + lp[idx(t - 1, u, 0)];
            }
            if u > 0 {
                acc = log_add_exp(acc, alpha[at(t, u - 1)] + lp[idx(t, u - 1, targets[u - 1])]);
            }
            alpha[at(t, u)] = acc;
        }
    }
    let log_p = alpha[at(t_len - 1, u1 - 1)] + lp[idx(t_len - 1, u1 - 1, 0)];

    let mut beta = vec![f64::NEG_INFINITY; t_len * u1];
    for t in (0..t_len).rev() {
        for u in (0..u1).rev() {
            beta[at(t, u)] = if t + 1 == t_len && u + 1 == u1 {
                lp[idx(t, u, 0)]
            } else {
                let mut acc = f64::NEG_INFINITY;
                if t + 1 < t_len {
                    acc = beta[at(t + 1, u)] + lp[idx(t, u, 0)];
                }
                if u + 1 < u1 {
                    acc = log_add_exp(acc, beta[at(t, u + 1)] + lp[idx(t, u, targets[u])]);
                }
                acc
            };
        }
    }
    if !log_p.is_finite() {
        return Err(TensorError::Domain {
            op: "transducer_loss",
            detail: "alignment lattice has zero probability".into(),
        }
        .into());
    }
    let rule = TransducerRule {
        t: t_len,
        u1,
        v1,
        targets: targets.to_vec(),
        alpha,
        beta,
        log_p,
    };
    Ok(tape.custom(&[log_probs], Tensor::scalar(-log_p), Box::new(rule)))
}

// ------------------------------------------------------------------ aggregation

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub asr: f64,
    pub at: f64,
    pub sv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            asr: 1.0,
            at: 1.0,
            sv: 1.0,
        }
    }
}

impl LossWeights {
    pub fn get(&self, task: Task) -> f64 {
        match task {
            Task::Asr => self.asr,
            Task::At => self.at,
            Task::Sv => self.sv,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for t in Task::ALL {
            let w = self.get(t);
            if !(w >= 0.0 && w.is_finite()) {
                return Err(LossError::BadWeights(format!("weight for {t} is {w}")));
            }
        }
        if Task::ALL.iter().all(|&t| self.get(t) == 0.0) {
            return Err(LossError::BadWeights("all weights are zero".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskLoss {
    pub value: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub per_task: BTreeMap<Task, TaskLoss>,
}

/// Averages per-sample losses within each task (in sample order) and sums the
/// task means weighted by `w`. Returns the tape node of the total.
pub fn combine(tape: &mut Tape, samples: &[(Task, Var)], w: &LossWeights) -> Result<(Var, LossReport)> {
    w.validate()?;
    if samples.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let mut by_task: BTreeMap<Task, Vec<Var>> = BTreeMap::new();
    for &(task, v) in samples {
        if !tape.value(v).is_scalar() {
            return Err(TensorError::Contract(format!("per-sample {task} loss is not a scalar")).into());
        }
        by_task.entry(task).or_default().push(v);
    }
    if by_task.keys().all(|&t| w.get(t) == 0.0) {
        let present: Vec<String> = by_task.keys().map(|t| t.to_string()).collect();
        return Err(LossError::ZeroWeights(present.join(",")));
    }
    let mut per_task = BTreeMap::new();
    let mut total: Option<Var> = None;
    for (task, vars) in &by_task {
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = tape.add(acc, v)?;
        }
        let mean = tape.scale(acc, 1.0 / vars.len() as f64);
        per_task.insert(
            *task,
            TaskLoss {
                value: tape.value(mean).item(),
                count: vars.len(),
            },
        );
        let weighted = tape.scale(mean, w.get(*task));
        total = Some(match total {
            None => weighted,
            Some(t) => tape.add(t, weighted)?,
        });
    }
    let total = total.expect("non-empty");
    let total = tape.reshape(total, &[])?;
    let report = LossReport {
        total: tape.value(total).item(),
        per_task,
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::gradcheck;
    use rand::Rng;

    fn rand_vec(n: usize, seed: u64, scale: f64) -> Vec<f64> {
        let mut r = rng::stream(seed, &[3]);
        (0..n).map(|_| r.gen_range(-scale..scale)).collect()
    }

    fn eval(f: impl FnOnce(&mut Tape) -> Result<Var>) -> f64 {
        let mut tape = Tape::new();
        let v = f(&mut tape).unwrap();
        tape.value(v).item()
    }

    fn bce_oracle(p: &[f64], s: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (&p, &s) in p.iter().zip(s) {
            let q = 1.0 / (1.0 + (-s).exp());
            acc -= p * q.ln() + (1.0 - p) * (1.0 - q).ln();
        }
        acc / p.len() as f64
    }

    #[test]
    fn l1_cases() {
        let t = Tensor::from_rows(&[vec![1.0, 0.0]]);
        let s = Tensor::from_rows(&[vec![0.0, 0.0]]);
        assert_eq!(eval(|tp| { let v = tp.param(s.clone()); kd_asr_l1(tp, &t, v) }), 0.5);
        assert_eq!(eval(|tp| { let v = tp.param(t.clone()); kd_asr_l1(tp, &t, v) }), 0.0);
        let a = Tensor::new(vec![3, 4], rand_vec(12, 1, 2.0)).unwrap();
        let b = Tensor::new(vec![3, 4], rand_vec(12, 2, 2.0)).unwrap();
        let oracle: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / 12.0;
        let got = eval(|tp| { let v = tp.param(b.clone()); kd_asr_l1(tp, &a, v) });
        assert!((got - oracle).abs() < 1e-14);
        let mut tape = Tape::new();
        let bad = tape.param(Tensor::zeros(&[2, 4]));
        assert!(matches!(kd_asr_l1(&mut tape, &a, bad), Err(LossError::Tensor(TensorError::ShapeMismatch { .. }))));
    }

    #[test]
    fn bce_cases() {
        let z = Tensor::vector(vec![0.0; 3]);
        let got = eval(|tp| { let v = tp.param(z.clone()); kd_at_bce(tp, &z, v) });
        assert!((got - std::f64::consts::LN_2).abs() < 1e-15);

        let t = Tensor::vector(rand_vec(6, 3, 4.0));
        let s = rand_vec(6, 4, 4.0);
        let p: Vec<f64> = t.data().iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect();
        let got = eval(|tp| { let v = tp.param(Tensor::vector(s.clone())); kd_at_bce(tp, &t, v) });
        assert!((got - bce_oracle(&p, &s)).abs() < 1e-12);

        // teacher == student gives the binary entropy, which is the minimum
        let entropy: f64 = p.iter().map(|&p| -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())).sum::<f64>() / 6.0;
        let at_z = eval(|tp| { let v = tp.param(t.clone()); kd_at_bce(tp, &t, v) });
        assert!((at_z - entropy).abs() < 1e-12);
        for seed in 0..20 {
            let r = rand_vec(6, 100 + seed, 1.0);
            let moved: Vec<f64> = t.data().iter().zip(&r).map(|(a, b)| a + 1e-3 * b).collect();
            let l = eval(|tp| { let v = tp.param(Tensor::vector(moved.clone())); kd_at_bce(tp, &t, v) });
            assert!(at_z <= l);
        }
    }

    #[test]
    fn supervised_bce_cases() {
        let sat = eval(|tp| { let v = tp.param(Tensor::vector(vec![20.0])); at_bce_supervised(tp, v, &[1.0]) });
        assert!((sat - (-20f64).exp()).abs() < 1e-15, "{sat}");
        assert!(sat > 0.0 && sat < 3e-9);
        let zero = eval(|tp| { let v = tp.param(Tensor::vector(vec![0.0])); at_bce_supervised(tp, v, &[0.0]) });
        assert!((zero - std::f64::consts::LN_2).abs() < 1e-15);
        // floor: a confidently wrong logit costs at most -ln(1e-7)
        let wrong = eval(|tp| { let v = tp.param(Tensor::vector(vec![-100.0])); at_bce_supervised(tp, v, &[1.0]) });
        assert!((wrong + PROB_FLOOR.ln()).abs() < 1e-12);

        let s = rand_vec(5, 5, 3.0);
        let y = vec![1.0, 0.0, 0.0, 1.0, 1.0];
        let got = eval(|tp| { let v = tp.param(Tensor::vector(s.clone())); at_bce_supervised(tp, v, &y) });
        assert!((got - bce_oracle(&y, &s)).abs() < 1e-12);
        let mut tape = Tape::new();
        let v = tape.param(Tensor::vector(s));
        assert!(matches!(at_bce_supervised(&mut tape, v, &[0.5; 5]), Err(LossError::InvalidLabel(_))));
    }

    #[test]
    fn cosine_cases() {
        let v = Tensor::vector(vec![1.0, 2.0, -0.5]);
        let cos = |u: &Tensor, s: Vec<f64>| eval(|tp| { let x = tp.param(Tensor::vector(s)); kd_sv_cosine(tp, u, x) });
        assert!(cos(&v, v.data().to_vec()).abs() < 1e-15);
        assert!((cos(&v, v.data().iter().map(|x| -x).collect()) - 2.0).abs() < 1e-15);
        let e1 = Tensor::vector(vec![1.0, 0.0, 0.0]);
        assert!((cos(&e1, vec![0.0, 3.0, 0.0]) - 1.0).abs() < 1e-15);
        assert!((cos(&e1, vec![0.0; 3]) - 1.0).abs() < 1e-15);
        // scale invariance
        let a = rand_vec(8, 6, 1.0);
        let b = rand_vec(8, 7, 1.0);
        let base = cos(&Tensor::vector(a.clone()), b.clone());
        let scaled = cos(&Tensor::vector(a.iter().map(|x| 3.5 * x).collect()), b.iter().map(|x| 0.2 * x).collect());
        assert!((base - scaled).abs() < 1e-10);
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((base - (1.0 - dot / (na * nb))).abs() < 1e-14);
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0; 3]));
        assert!(matches!(kd_sv_cosine(&mut tape, &Tensor::zeros(&[3]), x), Err(LossError::InvalidLabel(_))));
    }

    #[test]
    fn cross_entropy_cases() {
        let u = eval(|tp| { let v = tp.param(Tensor::vector(vec![0.3; 4])); sv_cross_entropy(tp, v, 2) });
        assert!((u - 4f64.ln()).abs() < 1e-15);
        let d = eval(|tp| { let v = tp.param(Tensor::vector(vec![0.0, 20.0, 0.0])); sv_cross_entropy(tp, v, 1) });
        assert!(d < 5e-9);
        let s = rand_vec(5, 8, 3.0);
        let lse = s.iter().map(|x| x.exp()).sum::<f64>().ln();
        let got = eval(|tp| { let v = tp.param(Tensor::vector(s.clone())); sv_cross_entropy(tp, v, 3) });
        assert!((got - (lse - s[3])).abs() < 1e-14);
        let mut tape = Tape::new();
        let v = tape.param(Tensor::vector(s));
        assert!(matches!(
            sv_cross_entropy(&mut tape, v, 5),
            Err(LossError::Tensor(TensorError::IndexOutOfRange { .. }))
        ));
    }

    /// Random normalised lattice `[T x (U+1) x (V+1)]`.
    fn lattice(t: usize, u1: usize, v1: usize, seed: u64) -> Tensor {
        let raw = rand_vec(t * u1 * v1, seed, 2.0);
        let mut out = Vec::with_capacity(raw.len());
        for row in raw.chunks(v1) {
            let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|x| x - lse));
        }
        Tensor::new(vec![t, u1, v1], out).unwrap()
    }

    /// Enumerates every alignment path explicitly.
    fn brute_force(lp: &Tensor, targets: &[usize]) -> f64 {
        let (t_len, u1, v1) = (lp.shape()[0], lp.shape()[1], lp.shape()[2]);
        let p = |t: usize, u: usize, k: usize| lp.data()[(t * u1 + u) * v1 + k].exp();
        fn walk(t: usize, u: usize, t_len: usize, u1: usize, targets: &[usize], p: &dyn Fn(usize, usize, usize) -> f64) -> f64 {
            let mut total = 0.0;
            // blank: advance time, or finish from the last node
            if t + 1 == t_len && u + 1 == u1 {
                total += p(t, u, 0);
            } else if t + 1 < t_len {
                total += p(t, u, 0) * walk(t + 1, u, t_len, u1, targets, p);
            }
            if u + 1 < u1 {
                total += p(t, u, targets[u]) * walk(t, u + 1, t_len, u1, targets, p);
            }
            total
        }
        -walk(0, 0, t_len, u1, targets, &p).ln()
    }

    #[test]
    fn transducer_trivial_lattice() {
        let lp = lattice(1, 1, 3, 9);
        let got = eval(|tp| { let v = tp.param(lp.clone()); transducer_loss(tp, v, &[]) });
        assert!((got + lp.data()[0]).abs() < 1e-15);
    }

    #[test]
    fn transducer_two_paths() {
        let lp = lattice(2, 2, 3, 10);
        let e = |t: usize, u: usize, k: usize| lp.data()[(t * 2 + u) * 3 + k].exp();
        // emit at t=0 then blank, blank; or blank, emit at t=1, blank
        let paths = e(0, 0, 2) * e(0, 1, 0) * e(1, 1, 0) + e(0, 0, 0) * e(1, 0, 2) * e(1, 1, 0);
        let got = eval(|tp| { let v = tp.param(lp.clone()); transducer_loss(tp, v, &[2]) });
        assert!((got + paths.ln()).abs() < 1e-12);
    }

    #[test]
    fn transducer_matches_enumeration() {
        let mut seed = 20;
        for t in 1..=4 {
            for u in 0..=3 {
                for v in 1..=3 {
                    seed += 1;
                    let lp = lattice(t, u + 1, v + 1, seed);
                    let targets: Vec<usize> = (0..u).map(|i| 1 + (i * 7 + seed as usize) % v).collect();
                    let got = eval(|tp| { let x = tp.param(lp.clone()); transducer_loss(tp, x, &targets) });
                    let want = brute_force(&lp, &targets);
                    assert!((got - want).abs() < 1e-10, "T={t} U={u} V={v}: {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn transducer_gradient() {
        for (t, targets, seed) in [(3usize, vec![1usize, 2], 40u64), (4, vec![3], 41), (2, vec![], 42)] {
            let u1 = targets.len() + 1;
            let raw = Tensor::new(vec![t * u1, 4], rand_vec(t * u1 * 4, seed, 1.5)).unwrap();
            let chk = gradcheck::check(&[raw], |tp, x| {
                let lp = tp.log_softmax(x[0]);
                let lp = tp.reshape(lp, &[t, u1, 4])?;
                transducer_loss(tp, lp, &targets).map_err(|e| match e {
                    LossError::Tensor(e) => e,
                    other => TensorError::Contract(other.to_string()),
                })
            })
            .unwrap();
            assert!(chk.max_rel_error() < 1e-4, "{:?}", chk.rel_errors);
        }
    }

    #[test]
    fn transducer_errors() {
        let mut tape = Tape::new();
        let lp = tape.param(lattice(2, 2, 3, 50));
        assert!(matches!(transducer_loss(&mut tape, lp, &[3]), Err(LossError::InvalidLabel(_))));
        assert!(matches!(transducer_loss(&mut tape, lp, &[0]), Err(LossError::InvalidLabel(_))));
        assert!(transducer_loss(&mut tape, lp, &[1, 1]).is_err());
        let empty = tape.param(Tensor::zeros(&[0, 1, 3]));
        assert!(transducer_loss(&mut tape, empty, &[]).is_err());
    }

    #[test]
    fn other_loss_gradients() {
        let t = Tensor::vector(rand_vec(5, 60, 2.0));
        let y = [1.0, 0.0, 1.0, 0.0, 0.0];
        let chk = gradcheck::check(&[Tensor::vector(rand_vec(5, 61, 2.0))], |tp, x| {
            let a = kd_at_bce(tp, &t, x[0]).map_err(|e| TensorError::Contract(e.to_string()))?;
            let b = at_bce_supervised(tp, x[0], &y).map_err(|e| TensorError::Contract(e.to_string()))?;
            let c = kd_sv_cosine(tp, &t, x[0]).map_err(|e| TensorError::Contract(e.to_string()))?;
            let d = sv_cross_entropy(tp, x[0], 2).map_err(|e| TensorError::Contract(e.to_string()))?;
            let s = tp.add(a, b)?;
            let s = tp.add(s, c)?;
            tp.add(s, d)
        })
        .unwrap();
        assert!(chk.max_rel_error() < 1e-4, "{:?}", chk.rel_errors);
    }

    fn scalars(tape: &mut Tape, vals: &[(Task, f64)]) -> Vec<(Task, Var)> {
        vals.iter().map(|&(t, v)| (t, tape.param(Tensor::scalar(v)))).collect()
    }

    #[test]
    fn combine_cases() {
        let only_asr = LossWeights { asr: 0.7, at: 0.0, sv: 0.0 };
        let mut tape = Tape::new();
        let s = scalars(&mut tape, &[(Task::Asr, 2.0), (Task::Asr, 4.0)]);
        let (_, r) = combine(&mut tape, &s, &only_asr).unwrap();
        assert_eq!(r.total, 0.7 * 3.0);
        assert_eq!(r.per_task[&Task::Asr], TaskLoss { value: 3.0, count: 2 });

        let mut tape = Tape::new();
        let s = scalars(&mut tape, &[(Task::Asr, 0.5), (Task::At, 0.25), (Task::Sv, 0.125)]);
        let (_, r) = combine(&mut tape, &s, &LossWeights::default()).unwrap();
        assert_eq!(r.total, 0.875);

        // mixed batch, recomputed by hand
        let vals = [(Task::Sv, 0.3), (Task::Asr, 1.1), (Task::Sv, 0.9), (Task::At, 0.4), (Task::Asr, 0.5), (Task::Asr, 0.2)];
        let w = LossWeights { asr: 0.5, at: 2.0, sv: 1.5 };
        let mut tape = Tape::new();
        let s = scalars(&mut tape, &vals);
        let (total, r) = combine(&mut tape, &s, &w).unwrap();
        let want = 0.5 * (1.1 + 0.5 + 0.2) / 3.0 + 2.0 * 0.4 + 1.5 * (0.3 + 0.9) / 2.0;
        assert!((r.total - want).abs() < 1e-15);
        tape.backward(total).unwrap();
        assert!((tape.grad(s[0].1).unwrap()[0] - 0.75).abs() < 1e-15);
        assert!((tape.grad(s[1].1).unwrap()[0] - 0.5 / 3.0).abs() < 1e-15);

        // doubling a weight doubles that contribution exactly
        let w2 = LossWeights { at: 4.0, ..w };
        let mut tape = Tape::new();
        let s = scalars(&mut tape, &vals);
        let (_, r2) = combine(&mut tape, &s, &w2).unwrap();
        let at_part = 2.0 * r.per_task[&Task::At].value;
        assert!(((r2.total - r.total) - at_part).abs() < 1e-15);

        let mut tape = Tape::new();
        let s = scalars(&mut tape, &[(Task::At, 1.0)]);
        assert!(matches!(combine(&mut tape, &s, &only_asr), Err(LossError::ZeroWeights(_))));
        assert!(matches!(combine(&mut tape, &[], &only_asr), Err(LossError::EmptyBatch)));
        let neg = LossWeights { asr: -1.0, ..only_asr };
        assert!(matches!(combine(&mut tape, &s, &neg), Err(LossError::BadWeights(_))));
    }
}
