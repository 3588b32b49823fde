//! Rank correlation, inter-annotator agreement and human consistency scores.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::annotation::{Label, LabelRecord};
use crate::error::{Error, Result};

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        // Positions start..end hold ranks start+1..=end.
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Stats(format!("length mismatch: {} vs {} values", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::Stats(format!("correlation needs at least 3 observations, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Stats("non-finite value in correlation input".into()));
    }
    Ok(())
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        let which = if sxx == 0.0 { "first" } else { "second" };
        return Err(Error::Stats(format!("zero variance in {which} input")));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rho: Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Fleiss' kappa over an items x categories count matrix where every row
/// sums to the same number of raters.
pub fn fleiss_kappa(counts: &[Vec<usize>]) -> Result<f64> {
    let Some(first) = counts.first() else {
        return Err(Error::Stats("no items to compute kappa over".into()));
    };
    let k = first.len();
    let r: usize = first.iter().sum();
    if r < 2 {
        return Err(Error::Stats(format!("kappa needs at least 2 ratings per item, got {r}")));
    }
    for (i, row) in counts.iter().enumerate() {
        if row.len() != k {
            return Err(Error::Stats(format!("item {i} has {} categories, expected {k}", row.len())));
        }
        let s: usize = row.iter().sum();
        if s != r {
            return Err(Error::Stats(format!("item {i} has {s} ratings, expected {r}")));
        }
    }
    let n = counts.len() as f64;
    let rf = r as f64;
    let p_bar = counts
        .iter()
        .map(|row| {
            let sq: usize = row.iter().map(|c| c * c).sum();
            (sq - r) as f64 / (rf * (rf - 1.0))
        })
        .sum::<f64>()
        / n;
    let p_e: f64 = (0..k)
        .map(|j| {
            let pj = counts.iter().map(|row| row[j]).sum::<usize>() as f64 / (n * rf);
            pj * pj
        })
        .sum();
    if p_e >= 1.0 {
        return Ok(1.0);
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}

/// Kappa from (item, category) assignments, one per rating.
pub fn fleiss_kappa_from<I: Ord, C: Ord>(ratings: impl IntoIterator<Item = (I, C)>) -> Result<f64> {
    let mut per_item: BTreeMap<I, Vec<C>> = BTreeMap::new();
    for (i, c) in ratings {
        per_item.entry(i).or_default().push(c);
    }
    let categories: BTreeSet<&C> = per_item.values().flatten().collect();
    let index: BTreeMap<&C, usize> = categories.into_iter().enumerate().map(|(j, c)| (c, j)).collect();
    let counts: Vec<Vec<usize>> = per_item
        .values()
        .map(|cs| {
            let mut row = vec![0; index.len()];
            for c in cs {
                row[index[c]] += 1;
            }
            row
        })
        .collect();
    fleiss_kappa(&counts)
}

/// Kappa over a label file, treating each pair as an item.
pub fn label_kappa(labels: &[LabelRecord]) -> Result<f64> {
    fleiss_kappa_from(labels.iter().map(|l| (l.pair_id.as_str(), l.label)))
}

/// Majority verdict per pair (true = consistent). Every pair must be
/// labeled by every annotator, and the annotator count must be odd.
pub fn majority_verdicts(labels: &[LabelRecord]) -> Result<BTreeMap<String, bool>> {
    let annotators: BTreeSet<&str> = labels.iter().map(|l| l.annotator_id.as_str()).collect();
    if annotators.len().is_multiple_of(2) {
        return Err(Error::Stats(format!(
            "majority vote needs an odd number of annotators, found {}",
            annotators.len()
        )));
    }
    let mut per_pair: BTreeMap<&str, BTreeMap<&str, Label>> = BTreeMap::new();
    for l in labels {
        let prev = per_pair
            .entry(l.pair_id.as_str())
            .or_default()
            .insert(l.annotator_id.as_str(), l.label);
        if prev.is_some() {
            return Err(Error::Stats(format!("annotator {} labeled pair {} twice", l.annotator_id, l.pair_id)));
        }
    }
    per_pair
        .into_iter()
        .map(|(pair, votes)| {
            if votes.len() != annotators.len() {
                return Err(Error::Stats(format!(
                    "pair {pair} has {} of {} annotator labels",
                    votes.len(),
                    annotators.len()
                )));
            }
            let yes = votes.values().filter(|l| **l == Label::Consistent).count();
            Ok((pair.to_owned(), 2 * yes > votes.len()))
        })
        .collect()
}

/// Per question: the fraction of its pairs whose majority verdict is
/// consistent. `pair_index` maps pair id to question id.
pub fn human_question_scores(labels: &[LabelRecord], pair_index: &HashMap<String, String>) -> Result<BTreeMap<String, f64>> {
    let verdicts = majority_verdicts(labels)?;
    for pair in pair_index.keys() {
        if !verdicts.contains_key(pair) {
            return Err(Error::Stats(format!("pair {pair} has no labels")));
        }
    }
    let mut tally: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (pair, consistent) in &verdicts {
        let q = pair_index
            .get(pair)
            .ok_or_else(|| Error::Alignment(format!("labeled pair {pair} is not in the pair index")))?;
        let t = tally.entry(q.as_str()).or_default();
        t.0 += usize::from(*consistent);
        t.1 += 1;
    }
    Ok(tally
        .into_iter()
        .map(|(q, (yes, total))| (q.to_owned(), yes as f64 / total as f64))
        .collect())
}

/// Symmetric Spearman matrix. A cell is `None` when a vector has zero
/// variance.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    pub names: Vec<String>,
    pub cells: Vec<Vec<Option<f64>>>,
}

impl CorrelationMatrix {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.names.iter().position(|n| n == a)?;
        let j = self.names.iter().position(|n| n == b)?;
        self.cells[i][j]
    }
}

/// Correlates per-key score vectors (keys are question ids, or pair ids
/// for pair-level analysis). Every vector must cover the same keys.
pub fn correlation_matrix(vectors: &[(String, BTreeMap<String, f64>)]) -> Result<CorrelationMatrix> {
    let names: Vec<String> = vectors.iter().map(|(n, _)| n.clone()).collect();
    let Some((first_name, first)) = vectors.first() else {
        return Ok(CorrelationMatrix { names, cells: Vec::new() });
    };
    for (name, v) in &vectors[1..] {
        if let Some(k) = first.keys().find(|k| !v.contains_key(*k)) {
            return Err(Error::Alignment(format!("{name} has no score for {k} (present in {first_name})")));
        }
        if let Some(k) = v.keys().find(|k| !first.contains_key(*k)) {
            return Err(Error::Alignment(format!("{first_name} has no score for {k} (present in {name})")));
        }
    }
    if first.len() < 3 {
        return Err(Error::Stats(format!("correlation needs at least 3 aligned items, got {}", first.len())));
    }
    let columns: Vec<Vec<f64>> = vectors.iter().map(|(_, v)| v.values().copied().collect()).collect();
    let m = vectors.len();
    let mut cells = vec![vec![None; m]; m];
    for i in 0..m {
        cells[i][i] = Some(1.0);
        for j in i + 1..m {
            let rho = match spearman(&columns[i], &columns[j]) {
                Ok(r) => Some(r),
                Err(Error::Stats(msg)) if msg.starts_with("zero variance") => None,
                Err(e) => return Err(e),
            };
            cells[i][j] = rho;
            cells[j][i] = rho;
        }
    }
    Ok(CorrelationMatrix { names, cells })
}
