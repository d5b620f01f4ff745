//! Evaluation metrics: WER, mAP, EER and the KD L1 distance, plus greedy
//! transducer search.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("empty input: {0}")]
    Empty(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("unknown id '{0}'")]
    UnknownId(String),
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Edit counts of one or more hypotheses against their references.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct WerCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_tokens: usize,
}

impl WerCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn rate(&self) -> f64 {
        if self.ref_tokens == 0 {
            return 0.0;
        }
        self.errors() as f64 / self.ref_tokens as f64
    }

    pub fn add(&mut self, other: WerCounts) {
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
        self.ref_tokens += other.ref_tokens;
    }
}

/// Minimum-edit alignment with unit costs. Among optimal alignments the
/// backtrace prefers match/substitution, then deletion, then insertion.
pub fn wer<T: PartialEq>(reference: &[T], hyp: &[T]) -> Result<WerCounts> {
    if reference.is_empty() {
        return Err(MetricError::Empty("WER reference".into()));
    }
    let (n, m) = (reference.len(), hyp.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut c = WerCounts {
        ref_tokens: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let diff = usize::from(reference[i - 1] != hyp[j - 1]);
            if d[i][j] == d[i - 1][j - 1] + diff {
                c.substitutions += diff;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            c.deletions += 1;
            i -= 1;
        } else {
            c.insertions += 1;
            j -= 1;
        }
    }
    Ok(c)
}

/// Corpus-level WER: counts summed over utterances, then divided.
pub fn corpus_wer(pairs: &[(Vec<usize>, Vec<usize>)]) -> Result<WerCounts> {
    if pairs.is_empty() {
        return Err(MetricError::Empty("no utterances to score".into()));
    }
    let mut total = WerCounts::default();
    for (r, h) in pairs {
        total.add(wer(r, h)?);
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub mean: f64,
    /// `None` for classes without a positive.
    pub per_class: Vec<Option<f64>>,
}

/// Average precision of one class: mean precision at the rank of each positive,
/// ranking by descending score with ties broken by ascending sample index.
fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let (mut hits, mut sum) = (0usize, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if positive[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Macro mAP over classes that have at least one positive.
/// `scores` and `labels` are `[N][K]`; labels are 0/1.
pub fn mean_average_precision(scores: &[Vec<f64>], labels: &[Vec<f64>]) -> Result<MapReport> {
    if scores.is_empty() {
        return Err(MetricError::Empty("mAP needs at least one sample".into()));
    }
    if scores.len() != labels.len() {
        return Err(MetricError::Invalid(format!("{} score rows vs {} label rows", scores.len(), labels.len())));
    }
    let k = scores[0].len();
    for (i, (s, l)) in scores.iter().zip(labels).enumerate() {
        if s.len() != k || l.len() != k {
            return Err(MetricError::Invalid(format!("row {i} does not have {k} classes")));
        }
        if s.iter().any(|x| !x.is_finite()) {
            return Err(MetricError::Invalid(format!("row {i} has a non-finite score")));
        }
        if l.iter().any(|&x| x != 0.0 && x != 1.0) {
            return Err(MetricError::Invalid(format!("row {i} labels are not 0/1")));
        }
    }
    let per_class: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let col: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            let pos: Vec<bool> = labels.iter().map(|r| r[c] == 1.0).collect();
            average_precision(&col, &pos)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(MetricError::Empty("no class has a positive sample".into()));
    }
    Ok(MapReport {
        mean: present.iter().sum::<f64>() / present.len() as f64,
        per_class,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredTrial {
    pub score: f64,
    pub is_target: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EerReport {
    pub rate: f64,
    /// Interpolated operating threshold; `None` when the crossing lies past
    /// the highest score.
    pub threshold: Option<f64>,
}

/// Equal error rate. A trial is accepted when `score >= threshold`; the sweep
/// visits every distinct score and then +inf, and the FAR = FRR point is
/// linearly interpolated between the two sweep points bracketing the sign
/// change of FAR - FRR.
pub fn eer(trials: &[ScoredTrial]) -> Result<EerReport> {
    let n_tgt = trials.iter().filter(|t| t.is_target).count();
    let n_non = trials.len() - n_tgt;
    if n_tgt == 0 || n_non == 0 {
        return Err(MetricError::Invalid("EER needs both target and non-target trials".into()));
    }
    if trials.iter().any(|t| !t.score.is_finite()) {
        return Err(MetricError::Invalid("non-finite trial score".into()));
    }
    let mut sorted: Vec<ScoredTrial> = trials.to_vec();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));

    // at the lowest threshold everything is accepted
    let (mut rejected_tgt, mut rejected_non) = (0usize, 0usize);
    let point = |rt: usize, rn: usize| {
        let far = (n_non - rn) as f64 / n_non as f64;
        let frr = rt as f64 / n_tgt as f64;
        (far, frr)
    };
    let mut prev: Option<(f64, f64, f64)> = None;
    let mut i = 0;
    loop {
        let theta = if i < sorted.len() { sorted[i].score } else { f64::INFINITY };
        let (far, frr) = point(rejected_tgt, rejected_non);
        let d = far - frr;
        if d <= 0.0 {
            if d == 0.0 {
                return Ok(EerReport {
                    rate: far,
                    threshold: theta.is_finite().then_some(theta),
                });
            }
            let (pfar, pfrr, ptheta) = prev.expect("first sweep point has FAR = 1 >= FRR = 0");
            let pd = pfar - pfrr;
            let a = pd / (pd - d);
            return Ok(EerReport {
                rate: pfar + a * (far - pfar),
                threshold: theta.is_finite().then_some(ptheta + a * (theta - ptheta)),
            });
        }
        prev = Some((far, frr, theta));
        // raise the threshold past every trial scoring exactly `theta`
        while i < sorted.len() && sorted[i].score == theta {
            if sorted[i].is_target {
                rejected_tgt += 1;
            } else {
                rejected_non += 1;
            }
            i += 1;
        }
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(MetricError::Invalid(format!("embedding sizes {} and {} differ", a.len(), b.len())));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(MetricError::Invalid("zero-norm embedding".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Cosine-scored trials from `(enrol id, test id, is_target)` pairs.
pub fn sv_trials_build(embeddings: &HashMap<String, Vec<f64>>, pairs: &[(String, String, bool)]) -> Result<Vec<ScoredTrial>> {
    let get = |id: &String| embeddings.get(id).ok_or_else(|| MetricError::UnknownId(id.clone()));
    pairs
        .iter()
        .map(|(a, b, tgt)| {
            Ok(ScoredTrial {
                score: cosine(get(a)?, get(b)?)?,
                is_target: *tgt,
            })
        })
        .collect()
}

/// Every unordered pair of distinct utterances, target when speakers match.
pub fn all_pairs(ids: &[(String, usize)]) -> Vec<(String, String, bool)> {
    let mut out = Vec::new();
    for i in 0..ids.len() {
        for j in i + 1..ids.len() {
            out.push((ids[i].0.clone(), ids[j].0.clone(), ids[i].1 == ids[j].1));
        }
    }
    out
}

/// Frame-weighted mean of per-utterance L1 values `(value, frames)`.
pub fn kd_l1_aggregate(per_utt: &[(f64, usize)]) -> Result<f64> {
    let frames: usize = per_utt.iter().map(|p| p.1).sum();
    if frames == 0 {
        return Err(MetricError::Empty("no frames for KD L1".into()));
    }
    Ok(per_utt.iter().map(|&(v, n)| v * n as f64).sum::<f64>() / frames as f64)
}

/// Greedy transducer search. `step(t, prev)` returns the `V + 1` joint
/// log-probabilities (index 0 = blank) at frame `t` given the last emitted
/// token (`0` before any emission). Emits the argmax (lowest index on ties);
/// blank advances the frame. At most `2 * frames` tokens are emitted.
pub fn greedy_search<E>(
    frames: usize,
    vocab: usize,
    step: &mut impl FnMut(usize, usize) -> std::result::Result<Vec<f64>, E>,
) -> std::result::Result<Vec<usize>, E> {
    let cap = 2 * frames;
    let mut hyp = Vec::new();
    let mut prev = 0;
    let mut t = 0;
    while t < frames && hyp.len() < cap {
        let lp = step(t, prev)?;
        debug_assert_eq!(lp.len(), vocab + 1);
        let mut best = 0;
        for (k, &x) in lp.iter().enumerate() {
            if x > lp[best] {
                best = k;
            }
        }
        if best == 0 {
            t += 1;
        } else {
            hyp.push(best);
            prev = best;
        }
    }
    Ok(hyp)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WerReport {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_tokens: usize,
    pub rate: f64,
}

impl From<WerCounts> for WerReport {
    fn from(c: WerCounts) -> Self {
        WerReport {
            substitutions: c.substitutions,
            deletions: c.deletions,
            insertions: c.insertions,
            ref_tokens: c.ref_tokens,
            rate: c.rate(),
        }
    }
}

/// Only the requested metrics are present.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wer: Option<WerReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<MapReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eer: Option<EerReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kd_l1: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trials(tgt: &[f64], non: &[f64]) -> Vec<ScoredTrial> {
        tgt.iter()
            .map(|&s| ScoredTrial { score: s, is_target: true })
            .chain(non.iter().map(|&s| ScoredTrial { score: s, is_target: false }))
            .collect()
    }

    #[test]
    fn wer_examples() {
        assert_eq!(wer(&[1, 2, 3], &[1, 2, 3]).unwrap().rate(), 0.0);
        let c = wer(&[1, 2, 3], &[1, 9, 3]).unwrap();
        assert_eq!((c.substitutions, c.deletions, c.insertions), (1, 0, 0));
        assert!((c.rate() - 1.0 / 3.0).abs() < 1e-15);
        let c = wer(&[1], &[2, 3, 4]).unwrap();
        assert_eq!(c.errors(), 3);
        assert_eq!(c.rate(), 3.0);
        assert_eq!(wer(&[1, 2], &[]).unwrap().deletions, 2);
        assert!(wer::<u8>(&[], &[1]).is_err());
    }

    #[test]
    fn corpus_wer_pools_counts() {
        let c = corpus_wer(&[(vec![1, 2, 3, 4], vec![1, 2, 3, 4]), (vec![5, 6], vec![5])]).unwrap();
        assert!((c.rate() - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn map_examples() {
        let m = mean_average_precision(&[vec![0.9], vec![0.8], vec![0.1]], &[vec![1.0], vec![1.0], vec![0.0]]).unwrap();
        assert_eq!(m.mean, 1.0);
        let m = mean_average_precision(&[vec![0.9], vec![0.2]], &[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(m.mean, 0.5);
        // tie: the lower index ranks first
        let m = mean_average_precision(&[vec![0.5], vec![0.5]], &[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(m.mean, 0.5);
        let m = mean_average_precision(&[vec![0.1, 0.3], vec![0.2, 0.4]], &[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(m.per_class, vec![Some(0.5), None]);
        assert_eq!(m.mean, 0.5);
        assert!(mean_average_precision(&[vec![0.1]], &[vec![0.0]]).is_err());
    }

    #[test]
    fn eer_examples() {
        assert_eq!(eer(&trials(&[0.9, 0.9], &[0.1, 0.1])).unwrap().rate, 0.0);
        assert_eq!(eer(&trials(&[0.9, 0.1], &[0.8, 0.2])).unwrap().rate, 0.5);
        // fully inverted
        assert_eq!(eer(&trials(&[0.1], &[0.9])).unwrap().rate, 1.0);
        assert!(eer(&trials(&[0.3], &[])).is_err());
        let r = eer(&trials(&[0.9, 0.7, 0.3], &[0.6, 0.2, 0.1, 0.8])).unwrap();
        assert!((0.0..=1.0).contains(&r.rate));
    }

    #[test]
    fn eer_monotone_transform_invariant() {
        let t = trials(&[0.9, 0.35, 0.6, 0.1], &[0.5, 0.2, 0.4, 0.7, 0.05]);
        let base = eer(&t).unwrap().rate;
        let moved: Vec<ScoredTrial> = t
            .iter()
            .map(|x| ScoredTrial {
                score: (3.0 * x.score).exp() - 7.0,
                ..*x
            })
            .collect();
        assert_eq!(eer(&moved).unwrap().rate, base);
    }

    #[test]
    fn trial_scores() {
        let mut e = HashMap::new();
        e.insert("a".to_string(), vec![1.0, 0.0]);
        e.insert("b".to_string(), vec![0.0, 2.0]);
        e.insert("z".to_string(), vec![0.0, 0.0]);
        let t = sv_trials_build(&e, &[("a".into(), "a".into(), true), ("a".into(), "b".into(), false)]).unwrap();
        assert_eq!(t[0].score, 1.0);
        assert_eq!(t[1].score, 0.0);
        assert!(sv_trials_build(&e, &[("a".into(), "q".into(), true)]).is_err());
        assert!(sv_trials_build(&e, &[("a".into(), "z".into(), true)]).is_err());
        let pairs = all_pairs(&[("x".into(), 1), ("y".into(), 1), ("w".into(), 2)]);
        assert_eq!(pairs.len(), 3);
        assert_eq!(pairs.iter().filter(|p| p.2).count(), 1);
    }

    #[test]
    fn kd_l1_weighting() {
        assert_eq!(kd_l1_aggregate(&[(0.5, 10)]).unwrap(), 0.5);
        assert!((kd_l1_aggregate(&[(1.0, 10), (4.0, 30)]).unwrap() - 3.25).abs() < 1e-15);
        assert!(kd_l1_aggregate(&[]).is_err());
    }

    #[test]
    fn greedy_always_blank_and_scripted() {
        let mut blank = |_t: usize, _p: usize| -> std::result::Result<Vec<f64>, ()> { Ok(vec![0.0, -1.0, -2.0]) };
        assert!(greedy_search(5, 2, &mut blank).unwrap().is_empty());

        // emit 2 then 1 at frame 0, blank afterwards
        let script = [2usize, 1];
        let mut emitted = 0;
        let mut rigged = |_t: usize, _p: usize| -> std::result::Result<Vec<f64>, ()> {
            let mut lp = vec![-5.0; 3];
            if emitted < script.len() {
                lp[script[emitted]] = 0.0;
                emitted += 1;
            } else {
                lp[0] = 0.0;
            }
            Ok(lp)
        };
        assert_eq!(greedy_search(3, 2, &mut rigged).unwrap(), vec![2, 1]);

        let mut never_blank = |_t: usize, _p: usize| -> std::result::Result<Vec<f64>, ()> { Ok(vec![-1.0, 0.0]) };
        assert_eq!(greedy_search(3, 1, &mut never_blank).unwrap().len(), 6);
    }
}
