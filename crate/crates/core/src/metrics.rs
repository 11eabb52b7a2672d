//! Alignment score, task metrics, the transfer gap and Spearman correlation.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::model::tensor::dot;
use crate::model::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferResult {
    pub task: String,
    pub b_s: f64,
    pub b_z: f64,
    pub delta: f64,
}

pub fn transfer_delta(task: &str, b_s: f64, b_z: f64) -> TransferResult {
    TransferResult {
        task: task.to_string(),
        b_s,
        b_z,
        delta: b_s - b_z,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    /// 100 or 0 per evaluated L1 token, in correspondence order.
    pub indicators: Vec<f64>,
    pub mean: f64,
}

fn unit_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let n = dot(row, row).sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

/// For each `(i, j)` in `correspondence`, 100 when L2 row `j` is strictly
/// the most cosine-similar row of `l2` to L1 row `i`, else 0. A tie with
/// another row counts as a miss.
pub fn alignment_score(l1: &Tensor, l2: &Tensor, correspondence: &[(usize, usize)]) -> Result<AlignmentReport> {
    if correspondence.is_empty() {
        return Err(Error::Stats("alignment score needs at least one token pair".into()));
    }
    if l1.cols != l2.cols {
        return Err(Error::Shape(format!("embedding widths {} and {}", l1.cols, l2.cols)));
    }
    if let Some(&(i, j)) = correspondence.iter().find(|&&(i, j)| i >= l1.rows || j >= l2.rows) {
        return Err(Error::Shape(format!("correspondence ({i}, {j}) outside the embedding tables")));
    }
    let (u1, u2) = (unit_rows(l1), unit_rows(l2));
    let indicators: Vec<f64> = correspondence
        .iter()
        .map(|&(i, j)| {
            let q = u1.row(i);
            let target = dot(q, u2.row(j));
            let beaten = (0..u2.rows).any(|k| k != j && dot(q, u2.row(k)) >= target);
            if beaten {
                0.0
            } else {
                100.0
            }
        })
        .collect();
    let mean = indicators.iter().sum::<f64>() / indicators.len() as f64;
    Ok(AlignmentReport { indicators, mean })
}

/// Alignment score on one shared embedding table: L1 tokens are the first
/// elements of `pairs`, and the candidate set is `l2_vocab`, which must
/// contain every second element.
pub fn alignment_on_table(table: &Tensor, pairs: &[(u32, u32)], l2_vocab: &[u32]) -> Result<AlignmentReport> {
    let pick = |ids: &mut dyn Iterator<Item = u32>| -> Result<Tensor> {
        let mut data = Vec::new();
        let mut n = 0;
        for id in ids {
            if id as usize >= table.rows {
                return Err(Error::InvalidTokenId(id));
            }
            data.extend_from_slice(table.row(id as usize));
            n += 1;
        }
        Ok(Tensor::from_vec(n, table.cols, data))
    };
    let l1 = pick(&mut pairs.iter().map(|p| p.0))?;
    let l2 = pick(&mut l2_vocab.iter().copied())?;
    let pos: std::collections::HashMap<u32, usize> = l2_vocab.iter().enumerate().map(|(k, &id)| (id, k)).collect();
    let corr = pairs
        .iter()
        .enumerate()
        .map(|(i, &(_, b))| {
            pos.get(&b)
                .map(|&k| (i, k))
                .ok_or_else(|| Error::Stats(format!("token {b} is not in the L2 candidate set")))
        })
        .collect::<Result<Vec<_>>>()?;
    alignment_score(&l1, &l2, &corr)
}

fn same_len<A, B>(a: &[A], b: &[B]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} predictions for {} gold labels", a.len(), b.len())));
    }
    Ok(())
}

/// Percentage of exact matches.
pub fn task_accuracy<T: PartialEq>(preds: &[T], golds: &[T]) -> Result<f64> {
    same_len(preds, golds)?;
    if golds.is_empty() {
        return Err(Error::Stats("accuracy of an empty set".into()));
    }
    let hit = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(100.0 * hit as f64 / golds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn f1_from(tp: usize, n_pred: usize, n_gold: usize) -> F1 {
    let precision = if n_pred == 0 { 0.0 } else { tp as f64 / n_pred as f64 };
    let recall = if n_gold == 0 { 0.0 } else { tp as f64 / n_gold as f64 };
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    F1 { precision, recall, f1 }
}

/// `(type, start, end_exclusive)` spans of a BIO sequence. An `I-x` that
/// does not continue an `x` span opens a new one.
pub fn bio_spans<S: AsRef<str>>(tags: &[S]) -> Vec<(String, usize, usize)> {
    let mut spans = Vec::new();
    let mut open: Option<(String, usize)> = None;
    for (i, t) in tags.iter().enumerate() {
        let t = t.as_ref();
        let (begin, ty) = if let Some(ty) = t.strip_prefix("B-") {
            (true, Some(ty))
        } else if let Some(ty) = t.strip_prefix("I-") {
            (false, Some(ty))
        } else {
            (false, None)
        };
        let continues = matches!((&open, ty), (Some((o, _)), Some(ty)) if !begin && o == ty);
        if !continues {
            if let Some((o, s)) = open.take() {
                spans.push((o, s, i));
            }
            if let Some(ty) = ty {
                open = Some((ty.to_string(), i));
            }
        }
    }
    if let Some((o, s)) = open {
        spans.push((o, s, tags.len()));
    }
    spans
}

/// Exact-match span F1 over a set of sentences.
pub fn span_f1<S: AsRef<str>>(preds: &[Vec<S>], golds: &[Vec<S>]) -> Result<F1> {
    same_len(preds, golds)?;
    let (mut tp, mut np, mut ng) = (0, 0, 0);
    for (p, g) in preds.iter().zip(golds) {
        same_len(p, g)?;
        let ps = bio_spans(p);
        let gs = bio_spans(g);
        tp += ps.iter().filter(|s| gs.contains(s)).count();
        np += ps.len();
        ng += gs.len();
    }
    Ok(f1_from(tp, np, ng))
}

/// Micro-averaged token F1. With one prediction per gold token this equals
/// accuracy as a fraction.
pub fn token_f1<S: AsRef<str>>(preds: &[Vec<S>], golds: &[Vec<S>]) -> Result<F1> {
    same_len(preds, golds)?;
    let (mut tp, mut n) = (0, 0);
    for (p, g) in preds.iter().zip(golds) {
        same_len(p, g)?;
        tp += p.iter().zip(g).filter(|(a, b)| a.as_ref() == b.as_ref()).count();
        n += g.len();
    }
    Ok(f1_from(tp, n, n))
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Largest sample size for which the p-value is computed exactly by
/// enumerating all permutations.
pub const EXACT_PERMUTATION_MAX_N: usize = 10;

/// Spearman's ρ with a two-tailed p-value: exact permutation distribution
/// for n ≤ 10, Student's t approximation with n − 2 degrees of freedom
/// otherwise.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    same_len(xs, ys)?;
    let n = xs.len();
    if n < 3 {
        return Err(Error::Stats(format!("Spearman correlation needs at least 3 points, got {n}")));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::Stats("non-finite input".into()));
    }
    let constant = |v: &[f64]| v.iter().all(|x| *x == v[0]);
    if constant(xs) || constant(ys) {
        return Err(Error::Stats("Spearman correlation is undefined for a constant input".into()));
    }
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let rho = pearson(&rx, &ry);
    let p = if n <= EXACT_PERMUTATION_MAX_N {
        exact_p(&rx, &ry, rho)
    } else {
        t_p(rho, n)
    };
    Ok((rho, p))
}

fn t_p(rho: f64, n: usize) -> f64 {
    let df = (n - 2) as f64;
    if rho.abs() >= 1.0 {
        return 0.0;
    }
    let t = rho * (df / (1.0 - rho * rho)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("df is positive");
    (2.0 * (1.0 - dist.cdf(t.abs()))).min(1.0)
}

fn exact_p(rx: &[f64], ry: &[f64], rho: f64) -> f64 {
    // Heap's algorithm over permutations of ry.
    let n = ry.len();
    let mut perm = ry.to_vec();
    let mut c = vec![0usize; n];
    let thresh = rho.abs() - 1e-12;
    let (mut hits, mut total) = (0u64, 0u64);
    let mut visit = |p: &[f64]| {
        total += 1;
        if pearson(rx, p).abs() >= thresh {
            hits += 1;
        }
    };
    visit(&perm);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            visit(&perm);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    hits as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force(l1: &Tensor, l2: &Tensor, corr: &[(usize, usize)]) -> f64 {
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            d / (na * nb)
        };
        let mut hits = 0;
        for &(i, j) in corr {
            let sims: Vec<f64> = (0..l2.rows).map(|k| cos(l1.row(i), l2.row(k))).collect();
            let best = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let argmax: Vec<usize> = (0..l2.rows).filter(|&k| sims[k] == best).collect();
            if argmax == [j] {
                hits += 1;
            }
        }
        100.0 * hits as f64 / corr.len() as f64
    }

    #[test]
    fn alignment_examples() {
        let e = Tensor::from_vec(3, 2, vec![1.0, 0.1, 0.2, 1.0, -1.0, 0.3]);
        let corr = [(0, 0), (1, 1), (2, 2)];
        assert_eq!(alignment_score(&e, &e, &corr).unwrap().mean, 100.0);

        // Token 2's partner sits next to token 0's vector.
        let l2 = Tensor::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.2]);
        let l1 = Tensor::from_vec(3, 2, vec![1.0, 0.05, 0.0, 1.0, -1.0, 0.0]);
        let r = alignment_score(&l1, &l2, &corr).unwrap();
        assert_eq!(r.indicators, vec![100.0, 100.0, 0.0]);
        assert!((r.mean - 200.0 / 3.0).abs() < 1e-12);
        assert!((r.mean - brute_force(&l1, &l2, &corr)).abs() < 1e-12);

        // A tie with a duplicate vector is a miss.
        let dup = Tensor::from_vec(2, 2, vec![1.0, 0.0, 2.0, 0.0]);
        assert_eq!(alignment_score(&dup, &dup, &[(0, 0)]).unwrap().mean, 0.0);
        assert!(alignment_score(&e, &e, &[]).is_err());
    }

    #[test]
    fn random_embeddings_sit_at_chance() {
        use rand::{Rng, SeedableRng};
        let mut total = 0.0;
        let seeds = 40;
        for s in 0..seeds {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(s);
            let mut gen = |n: usize| Tensor::from_vec(n, 16, (0..n * 16).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let (a, b) = (gen(50), gen(50));
            let corr: Vec<_> = (0..50).map(|i| (i, i)).collect();
            total += alignment_score(&a, &b, &corr).unwrap().mean;
        }
        let mean = total / seeds as f64;
        // Each indicator is Bernoulli(1/50); 2000 draws give sd ≈ 0.31 points.
        assert!((mean - 2.0).abs() < 1.3, "{mean}");
    }

    #[test]
    fn accuracy_and_f1_examples() {
        assert_eq!(task_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 100.0);
        assert_eq!(task_accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert!(task_accuracy(&[1], &[1, 2]).is_err());

        let g = vec![vec!["B-PER", "I-PER", "O", "B-LOC"]];
        assert_eq!(span_f1(&g, &g).unwrap().f1, 1.0);
        let p = vec![vec!["B-PER", "I-PER", "O", "B-ORG"]];
        let f = span_f1(&p, &g).unwrap();
        assert_eq!((f.precision, f.recall, f.f1), (0.5, 0.5, 0.5));
        assert_eq!(token_f1(&g, &g).unwrap().f1, 1.0);
        let wrong = vec![vec!["X", "X", "X", "X"]];
        assert_eq!(token_f1(&wrong, &g).unwrap().f1, 0.0);
    }

    #[test]
    fn spans_follow_conll_rules() {
        assert_eq!(
            bio_spans(&["I-A", "I-A", "B-A", "I-B", "O"]),
            vec![("A".into(), 0, 2), ("A".into(), 2, 3), ("B".into(), 3, 4)]
        );
    }

    #[test]
    fn delta_examples() {
        assert!((transfer_delta("xnli", 76.4, 74.9).delta - 1.5).abs() < 1e-9);
        assert!((transfer_delta("pos", 95.0, 92.0).delta - 3.0).abs() < 1e-9);
        assert_eq!(transfer_delta("t", 50.0, 50.0).delta, 0.0);
    }

    #[test]
    fn spearman_examples() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let (r, p) = spearman(&xs, &[2.0, 4.0, 8.0, 16.0, 32.0]).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        // Only the identity and the full reversal reach |ρ| = 1: 2/120.
        assert!((p - 2.0 / 120.0).abs() < 1e-12);
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((spearman(&xs, &neg).unwrap().0 + 1.0).abs() < 1e-12);
        assert!(spearman(&xs, &[1.0; 5]).is_err());
        assert!(spearman(&xs[..2], &xs[..2]).is_err());
    }

    #[test]
    fn spearman_reproduces_published_xnli_correlation() {
        let alignment = [90.0, 0.3, 57.3, 97.7, 85.6, 98.6, 95.7, 64.2, 93.7, 98.4, 95.2, 98.2];
        let delta = [1.5, 17.2, 4.5, -0.2, 8.2, 1.9, 1.1, 9.2, 2.2, -0.5, 6.7, 3.6];
        let neg: Vec<f64> = delta.iter().map(|d| -d).collect();
        let (rho, p) = spearman(&alignment, &neg).unwrap();
        // Recomputed independently from the table values: 0.72727...
        assert!((rho - 0.727_272_727).abs() < 1e-6, "{rho}");
        assert!(p < 0.01 && p > 0.001, "{p}");
    }

    #[test]
    fn t_approximation_matches_reference() {
        // ρ = 0.5, n = 12: t = 0.5·sqrt(10/0.75) = 1.8257; two-tailed p ≈ 0.0980.
        assert!((t_p(0.5, 12) - 0.0980).abs() < 5e-4);
    }

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    proptest! {
        #[test]
        fn alignment_matches_brute_force(seed in 0u64..500, v in 2usize..40, d in 1usize..6) {
            let corr: Vec<_> = (0..v).map(|i| (i, (i * 7 + 3) % v)).collect();
            let g = Tensor::from_vec(v, d, (0..v * d).map(|i| ((i as f64 + seed as f64) * 1.618).sin()).collect());
            let h = Tensor::from_vec(v, d, (0..v * d).map(|i| ((i as f64 * 0.7 + seed as f64) * 2.1).cos()).collect());
            prop_assert_eq!(alignment_score(&g, &h, &corr).unwrap().mean, brute_force(&g, &h, &corr));
        }

        #[test]
        fn alignment_ignores_rotation_and_scale(seed in 0u64..200, angle in 0.0f64..6.28, s1 in 0.1f64..10.0, s2 in 0.1f64..10.0) {
            let v = 12;
            let mk = |k: f64| Tensor::from_vec(v, 2, (0..v * 2).map(|i| ((i as f64 + seed as f64) * k).sin()).collect());
            let (a, b) = (mk(1.3), mk(0.9));
            let rot = |t: &Tensor, s: f64| {
                let (c, sn) = (angle.cos(), angle.sin());
                Tensor::from_vec(t.rows, 2, (0..t.rows).flat_map(|r| {
                    let (x, y) = (t.row(r)[0], t.row(r)[1]);
                    [s * (c * x - sn * y), s * (sn * x + c * y)]
                }).collect())
            };
            let corr: Vec<_> = (0..v).map(|i| (i, i)).collect();
            let base = alignment_score(&a, &b, &corr).unwrap().mean;
            prop_assert_eq!(alignment_score(&rot(&a, s1), &rot(&b, s2), &corr).unwrap().mean, base);
        }

        #[test]
        fn spearman_is_rank_based(xs in proptest::collection::vec(-100.0f64..100.0, 12..20), k in 0.5f64..3.0) {
            let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x * 0.3 + (i as f64 * 1.7).sin() * 40.0).collect();
            prop_assume!(xs.iter().any(|x| *x != xs[0]));
            let (r1, _) = spearman(&xs, &ys).unwrap();
            let warped: Vec<f64> = xs.iter().map(|x| (x * k).exp().ln_1p() + x.powi(3)).collect();
            let (r2, _) = spearman(&warped, &ys).unwrap();
            prop_assert!((r1 - r2).abs() < 1e-9);
        }

        #[test]
        fn span_f1_swaps_precision_and_recall(
            p in proptest::collection::vec(0usize..5, 1..12),
            g in proptest::collection::vec(0usize..5, 1..12),
        ) {
            let tags = ["O", "B-A", "I-A", "B-B", "I-B"];
            let n = p.len().min(g.len());
            let a = vec![p[..n].iter().map(|&i| tags[i]).collect::<Vec<_>>()];
            let b = vec![g[..n].iter().map(|&i| tags[i]).collect::<Vec<_>>()];
            let (x, y) = (span_f1(&a, &b).unwrap(), span_f1(&b, &a).unwrap());
            prop_assert_eq!(x.precision, y.recall);
            prop_assert_eq!(x.recall, y.precision);
            prop_assert_eq!(x.f1, y.f1);
        }
    }
}
