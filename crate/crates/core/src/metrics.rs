//! Evaluation metrics: classification accuracy and ROC-AUC, the
//! product-limit survival estimator, the two-sample log-rank test, and the
//! concordance index. All functions here are pure f64 computations over
//! immutable inputs; nothing touches the tape.

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("metric input is empty")]
    EmptyInput,
    #[error("score count {got} does not match label count {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("log-rank needs two non-empty groups")]
    EmptyGroup,
    #[error("no comparable pairs: need one subject with an event observed strictly before another subject's time")]
    NoComparablePairs,
}

/// One subject's model risk score, event indicator, and follow-up time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurvivalRecord {
    pub risk: f64,
    pub event: bool,
    pub period: f64,
}

impl SurvivalRecord {
    pub fn new(risk: f64, event: bool, period: f64) -> SurvivalRecord {
        SurvivalRecord { risk, event, period }
    }
}

/// One product-limit step: the survival probability just after `time`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KmStep {
    pub time: f64,
    pub survival: f64,
    pub at_risk: usize,
    pub events: usize,
}

/// Kaplan-Meier curve over the distinct event times of a cohort. With no
/// events the curve is flat at 1 and `steps` is empty.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KmCurve {
    pub steps: Vec<KmStep>,
}

impl KmCurve {
    /// Survival probability at time `t` (right-continuous step function).
    pub fn survival_at(&self, t: f64) -> f64 {
        self.steps
            .iter()
            .take_while(|s| s.time <= t)
            .last()
            .map(|s| s.survival)
            .unwrap_or(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRankResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Accuracy at the 0.5 threshold and ROC-AUC for a binary label.
///
/// `scores` are positive-class probabilities; a score above 0.5 predicts
/// the positive class, so an exact 0.5 falls to the negative class like an
/// argmax that prefers the earlier column. AUC is the Mann-Whitney
/// statistic with ties counted 0.5, computed through midranks; it is absent
/// when only one class is present.
pub fn accuracy_and_auc(
    scores: &[f64],
    labels: &[bool],
) -> Result<(f64, Option<f64>), MetricError> {
    if scores.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch { expected: labels.len(), got: scores.len() });
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s > 0.5) == l)
        .count();
    let accuracy = hits as f64 / scores.len() as f64;

    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Ok((accuracy, None));
    }
    // Midrank assignment: tied scores share the average of their ranks.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            if labels[k] {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let np = positives as f64;
    let auc = (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * negatives as f64);
    Ok((accuracy, Some(auc)))
}

/// Product-limit estimator S(t) = prod over event times t_i <= t of
/// (1 - d_i / n_i), with d_i events at t_i out of n_i still at risk.
pub fn kaplan_meier(records: &[SurvivalRecord]) -> Result<KmCurve, MetricError> {
    if records.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let mut event_times: Vec<f64> = records
        .iter()
        .filter(|r| r.event)
        .map(|r| r.period)
        .collect();
    event_times.sort_by(f64::total_cmp);
    event_times.dedup();
    let mut survival = 1.0;
    let mut steps = Vec::with_capacity(event_times.len());
    for t in event_times {
        let at_risk = records.iter().filter(|r| r.period >= t).count();
        let events = records.iter().filter(|r| r.event && r.period == t).count();
        survival *= 1.0 - events as f64 / at_risk as f64;
        steps.push(KmStep { time: t, survival, at_risk, events });
    }
    Ok(KmCurve { steps })
}

/// Two-sample log-rank test. At each distinct pooled event time the
/// observed events in group A are compared with the hypergeometric
/// expectation; the statistic is (sum of O-E)^2 / (sum of variances) and
/// the p-value comes from the chi-square(1) tail. Zero total variance
/// (for instance, no events at all) reports statistic 0 with p = 1.
pub fn log_rank(
    group_a: &[SurvivalRecord],
    group_b: &[SurvivalRecord],
) -> Result<LogRankResult, MetricError> {
    if group_a.is_empty() || group_b.is_empty() {
        return Err(MetricError::EmptyGroup);
    }
    let mut event_times: Vec<f64> = group_a
        .iter()
        .chain(group_b)
        .filter(|r| r.event)
        .map(|r| r.period)
        .collect();
    event_times.sort_by(f64::total_cmp);
    event_times.dedup();
    let mut o_minus_e = 0f64;
    let mut variance = 0f64;
    for t in event_times {
        let n_a = group_a.iter().filter(|r| r.period >= t).count() as f64;
        let n_b = group_b.iter().filter(|r| r.period >= t).count() as f64;
        let d_a = group_a.iter().filter(|r| r.event && r.period == t).count() as f64;
        let d_b = group_b.iter().filter(|r| r.event && r.period == t).count() as f64;
        let n = n_a + n_b;
        let d = d_a + d_b;
        o_minus_e += d_a - d * n_a / n;
        if n > 1.0 {
            variance += d * (n_a / n) * (n_b / n) * (n - d) / (n - 1.0);
        }
    }
    if variance == 0.0 {
        return Ok(LogRankResult { statistic: 0.0, p_value: 1.0 });
    }
    let statistic = o_minus_e * o_minus_e / variance;
    Ok(LogRankResult { statistic, p_value: chi2_sf1(statistic) })
}

/// Concordance index. Comparable pairs are (i, j) with period_i < period_j
/// and an event observed for i; the pair is concordant when the earlier
/// failure carries the higher risk, and risk ties count 0.5.
pub fn c_index(records: &[SurvivalRecord]) -> Result<f64, MetricError> {
    let mut comparable = 0u64;
    let mut concordant = 0f64;
    for i in records {
        if !i.event {
            continue;
        }
        for j in records {
            if i.period < j.period {
                comparable += 1;
                if i.risk > j.risk {
                    concordant += 1.0;
                } else if i.risk == j.risk {
                    concordant += 0.5;
                }
            }
        }
    }
    if comparable == 0 {
        return Err(MetricError::NoComparablePairs);
    }
    Ok(concordant / comparable as f64)
}

/// Chi-square(1) survival function: S(x) = erfc(sqrt(x / 2)).
pub fn chi2_sf1(x: f64) -> f64 {
    erfc((x / 2.0).sqrt())
}

/// Complementary error function, accurate to about 1e-14: Maclaurin series
/// of erf below 2, Lentz-evaluated continued fraction above.
pub fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    const INV_SQRT_PI: f64 = 0.5641895835477563;
    if x < 2.0 {
        // erf(x) = 2/sqrt(pi) * sum (-1)^n x^(2n+1) / (n! (2n+1))
        let xx = x * x;
        let mut term = x;
        let mut sum = 0.0;
        let mut n = 0u32;
        loop {
            let contribution = term / (2 * n + 1) as f64;
            sum += if n % 2 == 0 { contribution } else { -contribution };
            n += 1;
            term *= xx / n as f64;
            if contribution.abs() < 1e-18 || n > 200 {
                break;
            }
        }
        1.0 - 2.0 * INV_SQRT_PI * sum
    } else {
        // erfc(x) = exp(-x^2)/sqrt(pi) / (x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))
        let tiny = 1e-300;
        let mut f = x;
        let mut c = f;
        let mut d = 0.0;
        for k in 1..200 {
            let a = k as f64 / 2.0;
            d = x + a * d;
            if d == 0.0 {
                d = tiny;
            }
            c = x + a / c;
            if c == 0.0 {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = c * d;
            f *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        (-x * x).exp() * INV_SQRT_PI / f
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rec(risk: f64, event: bool, period: f64) -> SurvivalRecord {
        SurvivalRecord::new(risk, event, period)
    }

    // Independent Mann-Whitney oracle: exhaustive pair counting.
    fn auc_by_pairs(scores: &[f64], labels: &[bool]) -> f64 {
        let mut pairs = 0f64;
        let mut wins = 0f64;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn separated_scores_give_auc_one() {
        let scores = [0.9, 0.8, 0.2, 0.1];
        let labels = [true, true, false, false];
        let (acc, auc) = accuracy_and_auc(&scores, &labels).unwrap();
        assert_eq!(acc, 1.0);
        assert_eq!(auc, Some(1.0));
    }

    #[test]
    fn identical_scores_give_auc_half() {
        let scores = [0.4; 6];
        let labels = [true, false, true, false, false, true];
        let (acc, auc) = accuracy_and_auc(&scores, &labels).unwrap();
        assert_eq!(auc, Some(0.5));
        // 0.4 <= 0.5 predicts negative, so only the negatives are hits.
        assert!((acc - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_class_has_no_auc() {
        let (acc, auc) = accuracy_and_auc(&[0.7, 0.9], &[true, true]).unwrap();
        assert_eq!(acc, 1.0);
        assert_eq!(auc, None);
    }

    #[test]
    fn exact_half_score_predicts_negative() {
        let (acc, _) = accuracy_and_auc(&[0.5, 0.5], &[false, true]).unwrap();
        assert_eq!(acc, 0.5);
    }

    #[test]
    fn auc_matches_exhaustive_pair_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let n = rng.gen_range(2..25);
            // Quantized scores force plenty of ties.
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..10) as f64 / 10.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            labels[0] = true;
            if n > 1 {
                labels[1] = false;
            }
            let (_, auc) = accuracy_and_auc(&scores, &labels).unwrap();
            let oracle = auc_by_pairs(&scores, &labels);
            assert!((auc.unwrap() - oracle).abs() < 1e-12, "{scores:?} {labels:?}");
        }
    }

    #[test]
    fn auc_is_invariant_under_monotone_transforms() {
        let scores = [0.1, 0.7, 0.3, 0.3, 0.9, 0.5];
        let labels = [false, true, false, true, true, false];
        let (_, base) = accuracy_and_auc(&scores, &labels).unwrap();
        let affine: Vec<f64> = scores.iter().map(|s| 2.0 * s + 3.0).collect();
        let cubic: Vec<f64> = scores.iter().map(|s| s * s * s + s).collect();
        assert_eq!(accuracy_and_auc(&affine, &labels).unwrap().1, base);
        assert_eq!(accuracy_and_auc(&cubic, &labels).unwrap().1, base);
    }

    #[test]
    fn km_with_no_events_is_flat_one() {
        let curve = kaplan_meier(&[rec(0.0, false, 1.0), rec(0.0, false, 2.0)]).unwrap();
        assert!(curve.steps.is_empty());
        assert_eq!(curve.survival_at(100.0), 1.0);
    }

    #[test]
    fn km_hand_example() {
        // Event at 1, censoring at 2, event at 3:
        // S(1) = 1 - 1/3 = 2/3, S(3) = (2/3) * (1 - 1/1) = 0.
        let curve = kaplan_meier(&[
            rec(0.0, true, 1.0),
            rec(0.0, false, 2.0),
            rec(0.0, true, 3.0),
        ])
        .unwrap();
        assert_eq!(curve.steps.len(), 2);
        assert!((curve.steps[0].survival - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(curve.steps[0].at_risk, 3);
        assert_eq!(curve.steps[1].survival, 0.0);
        assert_eq!(curve.steps[1].at_risk, 1);
        assert!((curve.survival_at(2.5) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn km_without_censoring_equals_empirical_survival() {
        let n = 7;
        let records: Vec<SurvivalRecord> =
            (0..n).map(|i| rec(0.0, true, (i + 1) as f64)).collect();
        let curve = kaplan_meier(&records).unwrap();
        assert_eq!(curve.steps.len(), n);
        for (k, step) in curve.steps.iter().enumerate() {
            let empirical = (n - k - 1) as f64 / n as f64;
            assert!((step.survival - empirical).abs() < 1e-12);
        }
    }

    #[test]
    fn km_is_non_increasing_on_random_cohorts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.gen_range(1..30);
            let records: Vec<SurvivalRecord> = (0..n)
                .map(|_| rec(0.0, rng.gen_bool(0.6), rng.gen_range(1..10) as f64))
                .collect();
            let curve = kaplan_meier(&records).unwrap();
            let mut prev = 1.0;
            for step in &curve.steps {
                assert!(step.survival <= prev + 1e-15);
                assert!(step.survival >= -1e-15);
                prev = step.survival;
            }
        }
    }

    #[test]
    fn log_rank_identical_groups_is_null() {
        let g: Vec<SurvivalRecord> =
            vec![rec(0.0, true, 1.0), rec(0.0, false, 2.0), rec(0.0, true, 3.0)];
        let result = log_rank(&g, &g.clone()).unwrap();
        assert!(result.statistic.abs() < 1e-12);
        assert!((result.p_value - 1.0).abs() < 1e-9);
    }

    #[test]
    fn log_rank_zero_variance_reports_null() {
        let a = vec![rec(0.0, false, 1.0)];
        let b = vec![rec(0.0, false, 2.0)];
        let result = log_rank(&a, &b).unwrap();
        assert_eq!(result.statistic, 0.0);
        assert_eq!(result.p_value, 1.0);
    }

    #[test]
    fn log_rank_rejects_empty_group() {
        let a = vec![rec(0.0, true, 1.0)];
        assert!(matches!(log_rank(&a, &[]), Err(MetricError::EmptyGroup)));
    }

    #[test]
    fn log_rank_matches_direct_hypergeometric_sums() {
        // Group A events at 1, 2, 3; group B events at 4, 5, 6.
        let a = vec![rec(0.0, true, 1.0), rec(0.0, true, 2.0), rec(0.0, true, 3.0)];
        let b = vec![rec(0.0, true, 4.0), rec(0.0, true, 5.0), rec(0.0, true, 6.0)];
        // Direct evaluation of the O/E/V table:
        // t=1: nA=3, n=6, E=1/2,  V=(3*3*5)/(36*5)=1/4
        // t=2: nA=2, n=5, E=2/5,  V=(2*3*4)/(25*4)=6/25
        // t=3: nA=1, n=4, E=1/4,  V=(1*3*3)/(16*3)=3/16
        // t=4,5,6: nA=0, E=0, V=0
        let o_minus_e = (1.0 - 0.5) + (1.0 - 0.4) + (1.0 - 0.25);
        let variance = 0.25 + 6.0 / 25.0 + 3.0 / 16.0;
        let expected = o_minus_e * o_minus_e / variance;
        let result = log_rank(&a, &b).unwrap();
        assert!((result.statistic - expected).abs() < 1e-12, "{result:?}");
        assert!(result.p_value < 0.05);
    }

    #[test]
    fn chi2_tail_at_classic_critical_value() {
        assert!((chi2_sf1(3.841) - 0.05).abs() < 1e-3);
    }

    #[test]
    fn erfc_frozen_values() {
        assert!((erfc(0.5) - 0.4795001221869535).abs() < 1e-12);
        assert!((erfc(1.0) - 0.15729920705028513).abs() < 1e-12);
        assert!((erfc(2.0) - 0.004677734981063127).abs() < 1e-12);
        assert!((erfc(0.0) - 1.0).abs() < 1e-15);
        assert!((erfc(-1.0) - 1.8427007929497148).abs() < 1e-12);
        // The two evaluation branches agree where they meet.
        assert!((erfc(2.0 - 1e-13) - erfc(2.0 + 1e-13)).abs() < 1e-12);
    }

    #[test]
    fn c_index_perfect_concordance_and_discordance() {
        let with_risks = |risks: &[f64]| -> Vec<SurvivalRecord> {
            risks
                .iter()
                .enumerate()
                .map(|(i, &r)| rec(r, true, (i + 1) as f64))
                .collect()
        };
        // Risk reverse-ordered to time: earliest failure has highest risk.
        assert_eq!(c_index(&with_risks(&[3.0, 2.0, 1.0])).unwrap(), 1.0);
        assert_eq!(c_index(&with_risks(&[1.0, 2.0, 3.0])).unwrap(), 0.0);
        assert_eq!(c_index(&with_risks(&[1.0, 1.0, 1.0])).unwrap(), 0.5);
    }

    #[test]
    fn c_index_censored_hand_instance() {
        // Censored subject at time 2 is not comparable as the earlier
        // member of a pair, but remains the later member of (event@1, ...).
        let records = [
            rec(2.0, true, 1.0),
            rec(1.5, false, 2.0),
            rec(1.0, true, 3.0),
        ];
        // Pairs: (1->2): 2.0 > 1.5 concordant; (1->3): 2.0 > 1.0 concordant;
        // (3->?) none later; censored @2 contributes no pairs as "i".
        assert_eq!(c_index(&records).unwrap(), 1.0);
    }

    #[test]
    fn c_index_rejects_incomparable_sets() {
        // All censored.
        let records = [rec(1.0, false, 1.0), rec(2.0, false, 2.0)];
        assert!(matches!(c_index(&records), Err(MetricError::NoComparablePairs)));
        // Single event at the latest time.
        let records = [rec(1.0, false, 1.0), rec(2.0, true, 2.0)];
        assert!(matches!(c_index(&records), Err(MetricError::NoComparablePairs)));
    }

    #[test]
    fn c_index_is_invariant_under_monotone_risk_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let n = rng.gen_range(3..10);
            let records: Vec<SurvivalRecord> = (0..n)
                .map(|_| {
                    rec(
                        rng.gen_range(-4..5) as f64 / 2.0,
                        rng.gen_bool(0.7),
                        rng.gen_range(1..6) as f64,
                    )
                })
                .collect();
            let Ok(base) = c_index(&records) else { continue };
            let affine: Vec<SurvivalRecord> = records
                .iter()
                .map(|r| rec(2.0 * r.risk + 3.0, r.event, r.period))
                .collect();
            let cubic: Vec<SurvivalRecord> = records
                .iter()
                .map(|r| rec(r.risk.powi(3) + r.risk, r.event, r.period))
                .collect();
            assert_eq!(c_index(&affine).unwrap(), base);
            assert_eq!(c_index(&cubic).unwrap(), base);
        }
    }
}
