//! Diagnostics: chi-square independence, paired sign-flip permutation test,
//! inter/intra cluster-distance ratio and accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Rng};

/// Above this length the permutation test switches from exhaustive
/// enumeration to Monte-Carlo sampling.
pub const EXHAUSTIVE_MAX_N: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContingencyTable {
    counts: Vec<Vec<u64>>,
}

impl ContingencyTable {
    pub fn new(counts: Vec<Vec<u64>>) -> Result<Self> {
        let cols = counts.first().map_or(0, Vec::len);
        if counts.is_empty() || cols == 0 {
            return Err(Error::DegenerateTable("table is empty".into()));
        }
        if counts.iter().any(|r| r.len() != cols) {
            return Err(Error::DegenerateTable("ragged rows".into()));
        }
        if counts.iter().flatten().sum::<u64>() == 0 {
            return Err(Error::DegenerateTable("grand total is zero".into()));
        }
        Ok(ContingencyTable { counts })
    }

    /// Cross-tabulates two categorical sequences of equal length.
    pub fn from_pairs(rows: &[usize], cols: &[usize], n_rows: usize, n_cols: usize) -> Result<Self> {
        if rows.len() != cols.len() {
            return Err(Error::shape("from_pairs", (rows.len(), 1), (cols.len(), 1)));
        }
        let mut counts = vec![vec![0u64; n_cols]; n_rows];
        for (&r, &c) in rows.iter().zip(cols) {
            if r >= n_rows || c >= n_cols {
                return Err(Error::Range(format!("category ({r}, {c}) outside {n_rows}x{n_cols}")));
            }
            counts[r][c] += 1;
        }
        Self::new(counts)
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    /// Drops all-zero rows and columns.
    pub fn compact(&self) -> Self {
        let keep_cols: Vec<usize> = (0..self.counts[0].len())
            .filter(|&c| self.counts.iter().any(|r| r[c] > 0))
            .collect();
        let counts = self
            .counts
            .iter()
            .filter(|r| r.iter().any(|&v| v > 0))
            .map(|r| keep_cols.iter().map(|&c| r[c]).collect())
            .collect();
        ContingencyTable { counts }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMethod {
    ChiSquare,
    PermutationExhaustive,
    PermutationMonteCarlo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub method: TestMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub df: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_permutations: Option<u64>,
}

/// Pearson chi-square test of independence, no continuity correction.
///
/// Logs a warning when any expected count is below 5.
pub fn chi_square_independence(table: &ContingencyTable) -> Result<TestResult> {
    let counts = &table.counts;
    let r = counts.len();
    let c = counts[0].len();
    let row_tot: Vec<f64> = counts.iter().map(|row| row.iter().sum::<u64>() as f64).collect();
    let col_tot: Vec<f64> = (0..c).map(|j| counts.iter().map(|row| row[j]).sum::<u64>() as f64).collect();
    if let Some(i) = row_tot.iter().position(|&t| t == 0.0) {
        return Err(Error::DegenerateTable(format!("row {i} is all zero")));
    }
    if let Some(j) = col_tot.iter().position(|&t| t == 0.0) {
        return Err(Error::DegenerateTable(format!("column {j} is all zero")));
    }
    if r < 2 || c < 2 {
        return Err(Error::DegenerateTable(format!("need at least 2x2, got {r}x{c}")));
    }
    let total: f64 = row_tot.iter().sum();
    let mut stat = 0.0;
    let mut small = false;
    for (i, row) in counts.iter().enumerate() {
        for (j, &o) in row.iter().enumerate() {
            let e = row_tot[i] * col_tot[j] / total;
            small |= e < 5.0;
            let d = o as f64 - e;
            stat += d * d / e;
        }
    }
    if small {
        log::warn!("chi-square: some expected counts are below 5; the approximation may be poor");
    }
    let df = (r - 1) * (c - 1);
    Ok(TestResult {
        statistic: stat,
        p_value: chi_square_sf(stat, df as f64).clamp(0.0, 1.0),
        method: TestMethod::ChiSquare,
        df: Some(df),
        n_permutations: None,
    })
}

/// Upper tail `P(X ≥ x)` for a chi-square variable with `df` degrees of freedom.
pub fn chi_square_sf(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    regularized_gamma_q(df / 2.0, x / 2.0)
}

/// Regularized upper incomplete gamma `Q(a, x) = Γ(a, x) / Γ(a)`.
///
/// Series for `x < a + 1`, Lentz continued fraction otherwise.
pub fn regularized_gamma_q(a: f64, x: f64) -> f64 {
    assert!(a > 0.0, "shape must be positive");
    if x <= 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        1.0 - gamma_p_series(a, x)
    } else {
        gamma_q_continued_fraction(a, x)
    }
}

const EPS: f64 = 1e-16;
const TINY: f64 = 1e-300;
const MAX_ITER: usize = 10_000;

fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut ap = a;
    let mut term = 1.0 / a;
    let mut sum = term;
    for _ in 0..MAX_ITER {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * EPS {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

fn gamma_q_continued_fraction(a: f64, x: f64) -> f64 {
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

/// Natural log of the gamma function (Lanczos, g = 7, n = 9), with reflection
/// below 0.5.
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).abs().ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// One-sided paired sign-flip test that classifier `b` beats classifier `a`.
///
/// The statistic is the mean of `d_i = b_i − a_i` over per-example
/// correctness. For `n ≤ 20` every one of the `2ⁿ` sign patterns is
/// enumerated and `p = #{flips with mean ≥ observed} / 2ⁿ`. Larger inputs draw
/// `n_perm` random flips and report `(1 + #{≥}) / (1 + n_perm)`.
pub fn permutation_test(correct_a: &[u8], correct_b: &[u8], n_perm: u64, rng: &mut Rng) -> Result<TestResult> {
    if correct_a.len() <= EXHAUSTIVE_MAX_N {
        permutation_test_exhaustive(correct_a, correct_b)
    } else {
        permutation_test_monte_carlo(correct_a, correct_b, n_perm, rng)
    }
}

fn paired_differences(correct_a: &[u8], correct_b: &[u8]) -> Result<Vec<i64>> {
    if correct_a.len() != correct_b.len() {
        return Err(Error::shape(
            "permutation_test",
            (correct_a.len(), 1),
            (correct_b.len(), 1),
        ));
    }
    if correct_a.is_empty() {
        return Err(Error::Parameter("permutation test needs at least one pair".into()));
    }
    correct_a
        .iter()
        .zip(correct_b)
        .enumerate()
        .map(|(i, (&a, &b))| {
            if a > 1 || b > 1 {
                return Err(Error::Value {
                    line: i,
                    msg: "correctness entries must be 0 or 1".into(),
                });
            }
            Ok(b as i64 - a as i64)
        })
        .collect()
}

/// Enumerates all `2ⁿ` sign patterns. Limited to `n ≤ 32`.
pub fn permutation_test_exhaustive(correct_a: &[u8], correct_b: &[u8]) -> Result<TestResult> {
    // d ∈ {−1, 0, 1}; integer sums keep tie comparisons exact
    let diffs = paired_differences(correct_a, correct_b)?;
    let n = diffs.len();
    if n > 32 {
        return Err(Error::Parameter(format!("exhaustive permutation test is limited to 32 pairs, got {n}")));
    }
    let observed: i64 = diffs.iter().sum();
    let total = 1u64 << n;
    let mut hits = 0u64;
    for mask in 0..total {
        let s: i64 = diffs
            .iter()
            .enumerate()
            .map(|(i, &d)| if mask >> i & 1 == 1 { -d } else { d })
            .sum();
        if s >= observed {
            hits += 1;
        }
    }
    Ok(TestResult {
        statistic: observed as f64 / n as f64,
        p_value: hits as f64 / total as f64,
        method: TestMethod::PermutationExhaustive,
        df: None,
        n_permutations: Some(total),
    })
}

/// `n_perm` random sign patterns, `p = (1 + #{≥}) / (1 + n_perm)`.
pub fn permutation_test_monte_carlo(
    correct_a: &[u8],
    correct_b: &[u8],
    n_perm: u64,
    rng: &mut Rng,
) -> Result<TestResult> {
    let diffs = paired_differences(correct_a, correct_b)?;
    let n = diffs.len();
    if n_perm == 0 {
        return Err(Error::Parameter("Monte-Carlo permutation test needs n_perm >= 1".into()));
    }
    let observed: i64 = diffs.iter().sum();
    let nonzero: Vec<i64> = diffs.into_iter().filter(|&d| d != 0).collect();
    let mut hits = 0u64;
    for _ in 0..n_perm {
        let mut s = 0i64;
        let mut bits = 0u64;
        for (i, &d) in nonzero.iter().enumerate() {
            if i % 64 == 0 {
                bits = rng.next_u64();
            }
            s += if bits >> (i % 64) & 1 == 1 { -d } else { d };
        }
        if s >= observed {
            hits += 1;
        }
    }
    Ok(TestResult {
        statistic: observed as f64 / n as f64,
        p_value: (1 + hits) as f64 / (1 + n_perm) as f64,
        method: TestMethod::PermutationMonteCarlo,
        df: None,
        n_permutations: Some(n_perm),
    })
}

/// Mean pairwise distance between cluster centroids divided by the mean
/// distance of points to their own centroid. Cluster ids may be sparse;
/// only ids that occur are clusters.
pub fn cluster_ratio(points: &Matrix<f64>, cluster_ids: &[usize]) -> Result<f64> {
    if points.rows() != cluster_ids.len() {
        return Err(Error::shape("cluster_ratio", points.shape(), (cluster_ids.len(), 1)));
    }
    let mut ids: Vec<usize> = cluster_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::DegenerateClusters(format!("need at least 2 clusters, got {}", ids.len())));
    }
    let d = points.cols();
    let slot = |id: usize| ids.binary_search(&id).expect("id collected above");
    let mut centroids = vec![vec![0.0; d]; ids.len()];
    let mut sizes = vec![0usize; ids.len()];
    for (row, &id) in points.iter_rows().zip(cluster_ids) {
        let k = slot(id);
        sizes[k] += 1;
        for (c, &v) in centroids[k].iter_mut().zip(row) {
            *c += v;
        }
    }
    for (c, &s) in centroids.iter_mut().zip(&sizes) {
        for v in c.iter_mut() {
            *v /= s as f64;
        }
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();

    let intra = points
        .iter_rows()
        .zip(cluster_ids)
        .map(|(row, &id)| dist(row, &centroids[slot(id)]))
        .sum::<f64>()
        / points.rows() as f64;

    let mut inter = 0.0;
    let mut pairs = 0usize;
    for i in 0..centroids.len() {
        for j in i + 1..centroids.len() {
            inter += dist(&centroids[i], &centroids[j]);
            pairs += 1;
        }
    }
    inter /= pairs as f64;

    if intra < 1e-12 {
        return Err(Error::DegenerateClusters(format!("intra-cluster distance {intra:e} is ~0")));
    }
    Ok(inter / intra)
}

pub fn accuracy(pred: &[u8], truth: &[u8]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape("accuracy", (pred.len(), 1), (truth.len(), 1)));
    }
    if pred.is_empty() {
        return Err(Error::Parameter("accuracy of an empty set".into()));
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Per-example correctness as 0/1.
pub fn correctness(pred: &[u8], truth: &[u8]) -> Vec<u8> {
    pred.iter().zip(truth).map(|(p, t)| u8::from(p == t)).collect()
}

/// Median of a non-empty slice; the mean of the middle pair for even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 0 {
        0.5 * (v[mid - 1] + v[mid])
    } else {
        v[mid]
    })
}
