//! Evaluation metrics and cross-validation splits.

use rand::Rng;

use crate::error::{Error, Result};
use crate::msvq::shuffled;

/// Harrell's concordance index. A pair is comparable when the earlier
/// of two times is an observed event; the earlier one should carry the
/// higher risk. Tied risks count one half, tied times are skipped.
pub fn cindex(times: &[f64], events: &[bool], risks: &[f64]) -> Result<f64> {
    let n = times.len();
    if events.len() != n || risks.len() != n {
        return Err(Error::Data(format!("c-index inputs differ in length: {n}, {}, {}", events.len(), risks.len())));
    }
    if times.iter().chain(risks).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("c-index input"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let (mut concordant, mut pairs) = (0.0, 0u64);
    for (pos, &i) in order.iter().enumerate() {
        if !events[i] {
            continue;
        }
        for &j in &order[pos + 1..] {
            if times[j] <= times[i] {
                continue;
            }
            pairs += 1;
            concordant += match risks[i].partial_cmp(&risks[j]) {
                Some(std::cmp::Ordering::Greater) => 1.0,
                Some(std::cmp::Ordering::Equal) => 0.5,
                _ => 0.0,
            };
        }
    }
    if pairs == 0 {
        return Err(Error::Data("no comparable pairs for the c-index".into()));
    }
    Ok(concordant / pairs as f64)
}

/// Index of the largest score in each row.
pub fn argmax_rows(scores: &[Vec<f64>]) -> Vec<usize> {
    scores
        .iter()
        .map(|row| row.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best }).0)
        .collect()
}

/// Unweighted mean of per-class F1 over the classes that occur in
/// either labels or predictions.
pub fn macro_f1(labels: &[usize], predicted: &[usize], classes: usize) -> Result<f64> {
    if labels.len() != predicted.len() || labels.is_empty() {
        return Err(Error::Data("macro F1 needs equal, non-empty label and prediction lists".into()));
    }
    if let Some(&c) = labels.iter().chain(predicted).find(|&&c| c >= classes) {
        return Err(Error::Data(format!("class {c} out of range for {classes} classes")));
    }
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fneg = vec![0usize; classes];
    for (&y, &p) in labels.iter().zip(predicted) {
        if y == p {
            tp[y] += 1;
        } else {
            fp[p] += 1;
            fneg[y] += 1;
        }
    }
    let scores: Vec<f64> = (0..classes)
        .filter(|&c| tp[c] + fp[c] + fneg[c] > 0)
        .map(|c| 2.0 * tp[c] as f64 / (2 * tp[c] + fp[c] + fneg[c]) as f64)
        .collect();
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Area under the ROC curve of `scores` for `positive`, through the rank
/// sum. Tied scores share their average rank, which counts a tied
/// positive/negative pair as one half.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Data("AUC scores and labels differ in length".into()));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("AUC score"));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data("AUC needs both positive and negative examples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // 1-based ranks start+1..=end share their mean
        let avg = (start + 1 + end) as f64 / 2.0;
        rank_sum += avg * order[start..end].iter().filter(|&&i| positive[i]).count() as f64;
        start = end;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// One-vs-rest AUC averaged over classes present in `labels`. With two
/// classes this is the plain binary AUC of the positive-class score.
pub fn macro_auc(labels: &[usize], scores: &[Vec<f64>], classes: usize) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::Data("AUC labels and score rows differ in length".into()));
    }
    if scores.iter().any(|r| r.len() != classes) {
        return Err(Error::Data(format!("AUC score rows must have {classes} entries")));
    }
    if classes == 2 {
        let s: Vec<f64> = scores.iter().map(|r| r[1]).collect();
        let pos: Vec<bool> = labels.iter().map(|&y| y == 1).collect();
        return binary_auc(&s, &pos);
    }
    let mut aucs = Vec::new();
    for c in 0..classes {
        let pos: Vec<bool> = labels.iter().map(|&y| y == c).collect();
        if pos.iter().all(|&p| p) || !pos.iter().any(|&p| p) {
            continue;
        }
        let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        aucs.push(binary_auc(&s, &pos)?);
    }
    if aucs.is_empty() {
        return Err(Error::Data("AUC needs at least two classes in the labels".into()));
    }
    Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified `k`-fold split: members of each stratum are shuffled and
/// dealt round-robin over the folds.
pub fn stratified_folds(strata: &[usize], k: usize, rng: &mut impl Rng) -> Result<Vec<Fold>> {
    if k < 2 || strata.len() < k {
        return Err(Error::Config(format!("cannot split {} examples into {k} folds", strata.len())));
    }
    let groups = strata.iter().max().map_or(0, |&m| m + 1);
    let mut assignment = vec![0usize; strata.len()];
    let mut next = 0;
    for s in 0..groups {
        let members: Vec<usize> = (0..strata.len()).filter(|&i| strata[i] == s).collect();
        for &p in &shuffled(members.len(), rng) {
            assignment[members[p]] = next % k;
            next += 1;
        }
    }
    Ok((0..k)
        .map(|f| Fold {
            train: (0..strata.len()).filter(|&i| assignment[i] != f).collect(),
            test: (0..strata.len()).filter(|&i| assignment[i] == f).collect(),
        })
        .collect())
}
