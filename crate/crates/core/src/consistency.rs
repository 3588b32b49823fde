//! Consistency of an answer set: the mean agreement over all `n(n-1)`
//! ordered pairs of distinct answers.
//!
//! ```text
//! Cons(Y) = 1 / (n(n-1)) * sum_{i != j} f(y_i, y_j)
//! ```
//!
//! With `f` the exact-equality indicator this is the classic lexical
//! consistency measure; [`lexical_consistency`] computes that case directly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::agreement::{self, Agreement};
use crate::dataset::Record;
use crate::error::{Error, Result};

pub const PP_PLUS_ACC: &str = "pp_plus_acc";

/// Agreement value for one ordered answer pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub question_id: String,
    pub i: usize,
    pub j: usize,
    pub fn_name: String,
    pub value: f64,
}

impl Record for PairScore {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.i == self.j {
            return Err(format!("pair score for {} has i == j == {}", self.question_id, self.i));
        }
        if !(0.0..=1.0).contains(&self.value) {
            return Err(format!("pair score {} outside [0, 1]", self.value));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyResult {
    pub question_id: String,
    pub fn_name: String,
    pub n: usize,
    pub score: f64,
}

impl Record for ConsistencyResult {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.n < 2 {
            return Err(format!("consistency for {} has n = {}", self.question_id, self.n));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(format!("consistency {} outside [0, 1]", self.score));
        }
        Ok(())
    }
}

/// Agreement values `f(y_i, y_j)` for every ordered pair of one answer set.
#[derive(Debug, Clone, PartialEq)]
pub struct PairMatrix {
    n: usize,
    values: Vec<f64>,
}

impl PairMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    /// Mean over ordered pairs, summed in row-major order.
    pub fn consistency(&self) -> Result<f64> {
        self.consistency_over(&(0..self.n).collect::<Vec<_>>())
    }

    /// Mean over ordered pairs drawn from `subset` (indices into the set).
    pub fn consistency_over(&self, subset: &[usize]) -> Result<f64> {
        let n = subset.len();
        if n < 2 {
            return Err(Error::UndefinedConsistency { n });
        }
        let mut sum = 0.0;
        for &i in subset {
            for &j in subset {
                if i != j {
                    sum += self.get(i, j);
                }
            }
        }
        Ok(sum / (n * (n - 1)) as f64)
    }

    /// Rebuilds a matrix from stored scores, which must cover every ordered
    /// pair of `n` answers exactly once.
    pub fn from_pair_scores<'a>(n: usize, scores: impl IntoIterator<Item = &'a PairScore>) -> Result<Self> {
        let mut values = vec![f64::NAN; n * n];
        let mut filled = 0;
        for s in scores {
            if s.i >= n || s.j >= n || s.i == s.j {
                return Err(Error::Alignment(format!(
                    "pair ({}, {}) of {} is out of range for {n} answers",
                    s.i, s.j, s.question_id
                )));
            }
            let slot = &mut values[s.i * n + s.j];
            if !slot.is_nan() {
                return Err(Error::Alignment(format!("pair ({}, {}) of {} scored twice", s.i, s.j, s.question_id)));
            }
            *slot = s.value;
            filled += 1;
        }
        if filled != n * n.saturating_sub(1) {
            return Err(Error::Alignment(format!(
                "{filled} stored pair scores for {} ordered pairs",
                n * n.saturating_sub(1)
            )));
        }
        for i in 0..n {
            values[i * n + i] = 0.0;
        }
        Ok(Self { n, values })
    }

    pub fn pair_scores(&self, question_id: &str, fn_name: &str) -> Vec<PairScore> {
        let mut out = Vec::with_capacity(self.n * self.n.saturating_sub(1));
        for i in 0..self.n {
            for j in 0..self.n {
                if i != j {
                    out.push(PairScore {
                        question_id: question_id.to_owned(),
                        i,
                        j,
                        fn_name: fn_name.to_owned(),
                        value: self.get(i, j),
                    });
                }
            }
        }
        out
    }
}

/// Evaluates `f` on every answer set in one batched call.
///
/// Symmetric functions are evaluated once per unordered pair and the value is
/// mirrored, so both triangle entries are identical.
pub fn pair_matrices(sets: &[Vec<&str>], f: &dyn Agreement) -> Result<Vec<PairMatrix>> {
    let mut requests: Vec<(&str, &str)> = Vec::new();
    for set in sets {
        let n = set.len();
        for i in 0..n {
            for j in 0..n {
                if i != j && (!f.symmetric() || i < j) {
                    requests.push((set[i], set[j]));
                }
            }
        }
    }
    let values = f.score_pairs(&requests)?;
    if values.len() != requests.len() {
        return Err(Error::Alignment(format!(
            "agreement {} returned {} values for {} pairs",
            f.name(),
            values.len(),
            requests.len()
        )));
    }
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Validation(format!("agreement {} produced {v} outside [0, 1]", f.name())));
    }

    let mut it = values.into_iter();
    let mut out = Vec::with_capacity(sets.len());
    for set in sets {
        let n = set.len();
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                if !f.symmetric() || i < j {
                    values[i * n + j] = it.next().expect("value per requested pair");
                } else {
                    values[i * n + j] = values[j * n + i];
                }
            }
        }
        out.push(PairMatrix { n, values });
    }
    Ok(out)
}

pub fn consistency(question_id: &str, answers: &[&str], f: &dyn Agreement) -> Result<ConsistencyResult> {
    let n = answers.len();
    if n < 2 {
        return Err(Error::UndefinedConsistency { n });
    }
    let matrix = pair_matrices(&[answers.to_vec()], f)?.pop().expect("one matrix");
    Ok(ConsistencyResult {
        question_id: question_id.to_owned(),
        fn_name: f.name().to_owned(),
        n,
        score: matrix.consistency()?,
    })
}

/// Fraction of ordered pairs whose normalized texts are identical.
pub fn lexical_consistency(question_id: &str, answers: &[&str]) -> Result<ConsistencyResult> {
    let n = answers.len();
    if n < 2 {
        return Err(Error::UndefinedConsistency { n });
    }
    let mut agreeing = 0usize;
    for (i, a) in answers.iter().enumerate() {
        for (j, b) in answers.iter().enumerate() {
            if i != j && agreement::equality(a, b) == 1.0 {
                agreeing += 1;
            }
        }
    }
    Ok(ConsistencyResult {
        question_id: question_id.to_owned(),
        fn_name: agreement::AgreementName::Equality.as_str().to_owned(),
        n,
        score: agreeing as f64 / (n * (n - 1)) as f64,
    })
}

/// Paraphrase consistency restricted to the answers flagged accurate.
///
/// `Ok(None)` when fewer than two answers are accurate.
pub fn pp_plus_acc(
    question_id: &str,
    answers: &[&str],
    accurate: &[bool],
    paraphrase: &dyn Agreement,
) -> Result<Option<ConsistencyResult>> {
    if answers.len() != accurate.len() {
        return Err(Error::Alignment(format!(
            "question {question_id}: {} answers but {} accuracy flags",
            answers.len(),
            accurate.len()
        )));
    }
    let subset: Vec<&str> = answers
        .iter()
        .zip(accurate)
        .filter_map(|(a, ok)| ok.then_some(*a))
        .collect();
    if subset.len() < 2 {
        return Ok(None);
    }
    let mut r = consistency(question_id, &subset, paraphrase)?;
    r.fn_name = PP_PLUS_ACC.to_owned();
    Ok(Some(r))
}

/// Unweighted mean score per function name over the questions that have one.
pub fn aggregate(results: &[ConsistencyResult]) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in results {
        let e = acc.entry(r.fn_name.clone()).or_insert((0.0, 0));
        e.0 += r.score;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(k, (sum, count))| (k, sum / count as f64))
        .collect()
}

/// `fraction * 100` rounded to one decimal, ties to even.
pub fn percent(fraction: f64) -> f64 {
    let scaled = fraction * 1000.0;
    scaled.round_ties_even() / 10.0
}

/// One-decimal percentage cell; absent values render as `-`.
pub fn format_percent(fraction: Option<f64>) -> String {
    match fraction {
        Some(f) => format!("{:.1}", percent(f)),
        None => "-".to_owned(),
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::agreement::Equality;

    struct Table<'a> {
        symmetric: bool,
        f: &'a (dyn Fn(&str, &str) -> f64 + Sync),
    }

    impl Agreement for Table<'_> {
        fn name(&self) -> &str {
            "table"
        }
        fn symmetric(&self) -> bool {
            self.symmetric
        }
        fn binary(&self) -> bool {
            false
        }
        fn score_pairs(&self, pairs: &[(&str, &str)]) -> Result<Vec<f64>> {
            Ok(pairs.iter().map(|(a, b)| (self.f)(a, b)).collect())
        }
    }

    fn brute_force(answers: &[&str], f: &dyn Fn(&str, &str) -> f64) -> f64 {
        let n = answers.len();
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    total += f(answers[i], answers[j]);
                }
            }
        }
        total / (n * (n - 1)) as f64
    }

    #[test]
    fn identical_pair_is_fully_consistent() {
        assert_eq!(consistency("q", &["a", "a"], &Equality).unwrap().score, 1.0);
    }

    #[test]
    fn one_of_three_differs() {
        let r = consistency("q", &["a", "a", "b"], &Equality).unwrap();
        assert_eq!(r.score, 1.0 / 3.0);
        assert_eq!(r.n, 3);
        assert_eq!(lexical_consistency("q", &["a", "a", "b"]).unwrap().score, 1.0 / 3.0);
    }

    #[test]
    fn stored_scores_rebuild_the_matrix() {
        let answers = ["a", "b", "ab"];
        let f = |x: &str, y: &str| if y.contains(x) { 0.75 } else { 0.25 };
        let m = pair_matrices(&[answers.to_vec()], &Table { symmetric: false, f: &f }).unwrap().pop().unwrap();
        let stored = m.pair_scores("q", "table");
        let rebuilt = PairMatrix::from_pair_scores(3, &stored).unwrap();
        assert_eq!(rebuilt, m);
        assert_eq!(rebuilt.consistency().unwrap(), brute_force(&answers, &f));
        assert!(PairMatrix::from_pair_scores(3, &stored[1..]).is_err());
        assert!(PairMatrix::from_pair_scores(2, &stored).is_err());
    }

    #[test]
    fn undefined_below_two() {
        assert!(matches!(consistency("q", &["a"], &Equality), Err(Error::UndefinedConsistency { n: 1 })));
        assert!(matches!(lexical_consistency("q", &[]), Err(Error::UndefinedConsistency { n: 0 })));
    }

    #[test]
    fn lexical_extremes() {
        assert_eq!(lexical_consistency("q", &["a", "b", "c", "d", "e"]).unwrap().score, 0.0);
        assert_eq!(lexical_consistency("q", &["a"; 5]).unwrap().score, 1.0);
    }

    #[test]
    fn asymmetric_four_answers_match_enumeration() {
        let f = |a: &str, b: &str| ((a.len() * 7 + b.len() * 3) % 10) as f64 / 10.0;
        let answers = ["x", "yy", "zzz", "wwww"];
        let r = consistency("q", &answers, &Table { symmetric: false, f: &f }).unwrap();
        assert!((r.score - brute_force(&answers, &f)).abs() < 1e-12);
    }

    #[test]
    fn symmetric_fast_path_is_bit_identical() {
        let f = |a: &str, b: &str| {
            let (x, y) = (a.len() as f64, b.len() as f64);
            (x * y).sqrt() / (1.0 + x.max(y))
        };
        let answers = ["a", "bb", "ccc", "dddd", "eeeee", "ff"];
        let fast = consistency("q", &answers, &Table { symmetric: true, f: &f }).unwrap();
        let slow = consistency("q", &answers, &Table { symmetric: false, f: &f }).unwrap();
        assert_eq!(fast.score.to_bits(), slow.score.to_bits());
        assert_eq!(fast.score.to_bits(), brute_force(&answers, &f).to_bits());
    }

    #[test]
    fn pp_plus_acc_cases() {
        let lookup = |a: &str, b: &str| {
            // Accurate answers (prefix "ok") agree; everything else disagrees,
            // except "bad1" -> "ok1" in that direction only.
            if (a.starts_with("ok") && b.starts_with("ok")) || (a == "bad1" && b == "ok1") {
                1.0
            } else {
                0.0
            }
        };
        let pp = Table { symmetric: false, f: &lookup };
        let answers = ["ok1", "bad1", "ok2", "bad2"];
        let flags = [true, false, true, false];

        // Ordered pairs agreeing in the full set: (ok1,ok2), (ok2,ok1), (bad1,ok1) = 3 of 12.
        let full = consistency("q", &answers, &pp).unwrap().score;
        assert_eq!(full, 3.0 / 12.0);
        let cond = pp_plus_acc("q", &answers, &flags, &pp).unwrap().unwrap();
        assert_eq!(cond.score, 1.0);
        assert_eq!(cond.fn_name, PP_PLUS_ACC);
        assert!(cond.score > full);

        let all = pp_plus_acc("q", &answers, &[true; 4], &pp).unwrap().unwrap();
        assert_eq!(all.score, full);

        assert!(pp_plus_acc("q", &answers, &[true, false, false, false], &pp).unwrap().is_none());
        assert!(matches!(pp_plus_acc("q", &answers, &[true], &pp), Err(Error::Alignment(_))));
    }

    fn result(q: &str, f: &str, score: f64) -> ConsistencyResult {
        ConsistencyResult { question_id: q.into(), fn_name: f.into(), n: 3, score }
    }

    #[test]
    fn aggregation() {
        let agg = aggregate(&[result("a", "pp", 0.2), result("b", "pp", 0.4)]);
        assert_eq!(format_percent(agg.get("pp").copied()), "30.0");

        let agg = aggregate(&[result("a", "pp", 0.376), result("b", "pp", 0.376)]);
        assert_eq!(format_percent(agg.get("pp").copied()), "37.6");

        // Undefined PP+acc (no record) for the third question is skipped.
        let agg = aggregate(&[result("a", PP_PLUS_ACC, 0.5), result("b", PP_PLUS_ACC, 1.0)]);
        assert_eq!(agg[PP_PLUS_ACC], 0.75);
        assert_eq!(format_percent(agg.get("missing").copied()), "-");
    }

    #[test]
    fn rounding_is_half_even() {
        assert_eq!(format_percent(Some(0.3765)), "37.6");
        assert_eq!(format_percent(Some(0.3775)), "37.8");
        assert_eq!(format_percent(Some(0.00125)), "0.1");
        assert_eq!(format_percent(Some(1.0)), "100.0");
        assert_eq!(format_percent(Some(0.0)), "0.0");
    }

    #[test]
    fn pair_score_records() {
        let m = pair_matrices(&[vec!["a", "b", "a"]], &Equality).unwrap().pop().unwrap();
        let scores = m.pair_scores("q", "equality");
        assert_eq!(scores.len(), 6);
        assert!(scores.iter().all(|s| s.validate().is_ok()));
        assert_eq!(scores.iter().filter(|s| s.value == 1.0).count(), 2);
    }

    fn answer_set() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]).prop_map(str::to_owned), 2..=8)
    }

    proptest! {
        #[test]
        fn range_and_permutation_invariance(ys in answer_set(), seed in any::<u64>()) {
            let f = |a: &str, b: &str| ((a.as_bytes()[0] as u64 * 31 + b.as_bytes()[0] as u64 * 17) % 11) as f64 / 10.0;
            let t = Table { symmetric: false, f: &f };
            let refs: Vec<&str> = ys.iter().map(String::as_str).collect();
            let base = consistency("q", &refs, &t).unwrap().score;
            prop_assert!((0.0..=1.0).contains(&base));

            let mut shuffled = refs.clone();
            let k = (seed as usize) % shuffled.len();
            shuffled.rotate_left(k);
            shuffled.reverse();
            let other = consistency("q", &shuffled, &t).unwrap().score;
            prop_assert!((base - other).abs() < 1e-12);
        }

        #[test]
        fn monotone_in_f(ys in answer_set(), bump in 0.0f64..0.5) {
            let lo = |a: &str, b: &str| if a == b { 0.5 } else { 0.1 };
            let hi = |a: &str, b: &str| (lo(a, b) + bump).min(1.0);
            let refs: Vec<&str> = ys.iter().map(String::as_str).collect();
            let a = consistency("q", &refs, &Table { symmetric: true, f: &lo }).unwrap().score;
            let b = consistency("q", &refs, &Table { symmetric: true, f: &hi }).unwrap().score;
            prop_assert!(b >= a);
        }

        #[test]
        fn general_form_recovers_lexical(ys in answer_set()) {
            let refs: Vec<&str> = ys.iter().map(String::as_str).collect();
            let a = consistency("q", &refs, &Equality).unwrap().score;
            let b = lexical_consistency("q", &refs).unwrap().score;
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
