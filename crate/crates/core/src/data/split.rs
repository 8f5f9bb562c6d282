//! Stratified k-fold cross-validation and the label-balanced holdout.
//!
//! Test sets rotate over k disjoint shards. Shards are filled by dealing the
//! members of each label, ordered by stratum (sex, age tercile) and then
//! randomly, round-robin across the shards, so every stratum spreads evenly.
//! For fold `f`, shard `f` is the test set; validation samples are taken
//! label-proportionally from the following shards and the rest is training.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::manifest::Manifest;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitProfile {
    pub size: usize,
    pub labels: BTreeMap<usize, usize>,
    pub sex: BTreeMap<String, usize>,
    pub age_bins: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StratificationReport {
    pub train: SplitProfile,
    pub validation: SplitProfile,
    pub test: SplitProfile,
    /// Strata with fewer than k members that were folded into a neighbour.
    pub merged_strata: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub report: StratificationReport,
}

struct Subject {
    label: usize,
    sex: String,
    age_bin: usize,
}

const UNKNOWN_AGE_BIN: usize = 3;

fn tercile_bins(ages: &[Option<f64>]) -> Vec<usize> {
    let mut known: Vec<f64> = ages.iter().flatten().copied().collect();
    known.sort_by(f64::total_cmp);
    if known.is_empty() {
        return vec![UNKNOWN_AGE_BIN; ages.len()];
    }
    let q = |p: f64| known[((known.len() - 1) as f64 * p).round() as usize];
    let (t1, t2) = (q(1.0 / 3.0), q(2.0 / 3.0));
    ages.iter()
        .map(|a| match a {
            None => UNKNOWN_AGE_BIN,
            Some(a) if *a <= t1 => 0,
            Some(a) if *a <= t2 => 1,
            Some(_) => 2,
        })
        .collect()
}

/// Folds strata smaller than `k` into the nearest age bin with the same
/// label and sex. Returns the number of merged strata.
fn merge_small_strata(subjects: &mut [Subject], k: usize) -> usize {
    let mut merged = 0;
    loop {
        let mut counts: BTreeMap<(usize, String, usize), usize> = BTreeMap::new();
        for s in subjects.iter() {
            *counts.entry((s.label, s.sex.clone(), s.age_bin)).or_default() += 1;
        }
        let small = counts.iter().find(|&((label, sex, bin), &c)| {
            c < k && counts.keys().any(|(l, s, b)| l == label && s == sex && b != bin)
        });
        let Some(((label, sex, bin), _)) = small else {
            return merged;
        };
        let (label, sex, bin) = (*label, sex.clone(), *bin);
        let target = counts
            .keys()
            .filter(|(l, s, b)| *l == label && *s == sex && *b != bin)
            .min_by_key(|(_, _, b)| (b.abs_diff(bin), *b))
            .map(|(_, _, b)| *b)
            .expect("neighbour exists");
        for s in subjects.iter_mut() {
            if s.label == label && s.sex == sex && s.age_bin == bin {
                s.age_bin = target;
            }
        }
        merged += 1;
    }
}

/// Validation size `v` keeping validation and train each within one sample
/// of their target share given a test set of size `t`.
fn validation_size(n: usize, t: usize, val_ratio: f64, train_ratio: f64) -> usize {
    let target = val_ratio * n as f64;
    let train_target = train_ratio * n as f64;
    let lo = target.floor().max(0.0) as usize;
    let mut best = lo;
    let mut best_err = f64::INFINITY;
    for v in lo.saturating_sub(1)..=lo + 2 {
        if v + t > n {
            break;
        }
        let err = (v as f64 - target).abs().max(((n - t - v) as f64 - train_target).abs());
        if err < best_err - 1e-12 {
            best = v;
            best_err = err;
        }
    }
    best
}

/// Splits largest-remainder style: `total` apportioned by `weights`, each
/// share capped by `caps`.
fn apportion(total: usize, weights: &[usize], caps: &[usize]) -> Vec<usize> {
    let sum: usize = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|&w| total as f64 * w as f64 / sum as f64).collect();
    let mut out: Vec<usize> = exact.iter().zip(caps).map(|(e, &c)| (e.floor() as usize).min(c)).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut remaining = total.saturating_sub(out.iter().sum());
    while remaining > 0 {
        let before = remaining;
        for &i in &order {
            if remaining > 0 && out[i] < caps[i] {
                out[i] += 1;
                remaining -= 1;
            }
        }
        if remaining == before {
            break;
        }
    }
    out
}

/// Largest number of extra-member placements examined by `shard_quotas`.
const QUOTA_SEARCH_LIMIT: u64 = 200_000;

/// Per-label, per-shard member counts. Each label is spread as evenly as
/// possible; which shards receive a label's remainder is chosen to keep shard
/// sizes within one of n/k and then to minimise the worst deviation of any
/// shard's label mix from the overall mix. Falls back to plain round-robin
/// when the placements are too many to enumerate.
fn shard_quotas(label_counts: &[usize], k: usize) -> Vec<Vec<usize>> {
    let n: usize = label_counts.iter().sum();
    let extras: Vec<usize> = label_counts.iter().map(|&c| c % k).collect();

    let mut round_robin = Vec::with_capacity(label_counts.len());
    let mut offset = 0;
    for &c in label_counts {
        round_robin.push((0..k).map(|s| c / k + usize::from((s + k - offset % k) % k < c % k)).collect::<Vec<_>>());
        offset += c;
    }

    if k > 16 {
        return round_robin;
    }
    let choices: Vec<Vec<u64>> = extras.iter().map(|&r| subsets(k, r)).collect();
    let space = choices.iter().try_fold(1u64, |acc, c| acc.checked_mul(c.len() as u64));
    if space.is_none_or(|s| s > QUOTA_SEARCH_LIMIT) {
        return round_robin;
    }
    let score = |quotas: &[Vec<usize>]| -> (bool, f64) {
        let mut worst = 0.0f64;
        let mut sizes_ok = true;
        for s in 0..k {
            let size: usize = quotas.iter().map(|q| q[s]).sum();
            sizes_ok &= (size as f64 - n as f64 / k as f64).abs() <= 1.0;
            if size > 0 {
                for (q, &c) in quotas.iter().zip(label_counts) {
                    worst = worst.max((q[s] as f64 / size as f64 - c as f64 / n as f64).abs());
                }
            }
        }
        (!sizes_ok, worst)
    };
    let mut best = score(&round_robin);
    let mut best_quotas = round_robin;
    let mut pick = vec![0usize; choices.len()];
    loop {
        let quotas: Vec<Vec<usize>> = label_counts
            .iter()
            .zip(&pick)
            .zip(&choices)
            .map(|((&c, &p), mask)| (0..k).map(|s| c / k + usize::from(mask[p] >> s & 1 == 1)).collect())
            .collect();
        let sc = score(&quotas);
        if sc.0 < best.0 || (sc.0 == best.0 && sc.1 < best.1 - 1e-12) {
            best = sc;
            best_quotas = quotas;
        }
        // odometer over the placement choices
        let mut i = 0;
        loop {
            if i == pick.len() {
                return best_quotas;
            }
            pick[i] += 1;
            if pick[i] < choices[i].len() {
                break;
            }
            pick[i] = 0;
            i += 1;
        }
    }
}

/// Bit masks of all `r`-element subsets of `0..k`, in increasing order.
fn subsets(k: usize, r: usize) -> Vec<u64> {
    (0u64..1 << k).filter(|m| m.count_ones() as usize == r).collect()
}

fn profile(indices: &[usize], subjects: &[Subject]) -> SplitProfile {
    let mut p = SplitProfile {
        size: indices.len(),
        ..Default::default()
    };
    for &i in indices {
        let s = &subjects[i];
        *p.labels.entry(s.label).or_default() += 1;
        *p.sex.entry(s.sex.clone()).or_default() += 1;
        *p.age_bins.entry(s.age_bin).or_default() += 1;
    }
    p
}

/// Stratified k-fold split of a labeled manifest.
///
/// `ratios` are the train / validation / test shares; the test share is
/// implied by `k` (one shard per fold) and only used for validation sizing.
pub fn stratified_kfold<R: Rng + ?Sized>(
    manifest: &Manifest,
    k: usize,
    ratios: [f64; 3],
    rng: &mut R,
) -> Result<Vec<FoldSplit>> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold split needs k >= 2, got {k}")));
    }
    let n = manifest.len();
    if n < k {
        return Err(Error::Config(format!("{n} samples cannot be split into {k} folds")));
    }
    let recs = manifest.records();
    let mut missing = Vec::new();
    for (i, r) in recs.iter().enumerate() {
        if r.label.is_none() {
            missing.push(format!("row {} ({}) has no label", i + 2, r.subject_id));
        }
    }
    if !missing.is_empty() {
        return Err(Error::Manifest(missing.join("; ")));
    }
    if recs.iter().any(|r| r.age.is_none() || r.sex.is_none()) {
        log::warn!("some records lack age or sex; they are stratified as 'unknown'");
    }
    let bins = tercile_bins(&recs.iter().map(|r| r.age).collect::<Vec<_>>());
    let mut subjects: Vec<Subject> = recs
        .iter()
        .zip(&bins)
        .map(|(r, &b)| Subject {
            label: r.label.expect("checked"),
            sex: r.sex.clone().unwrap_or_else(|| "unknown".into()),
            age_bin: b,
        })
        .collect();
    let merged = merge_small_strata(&mut subjects, k);
    if merged > 0 {
        log::warn!("{merged} stratum/strata smaller than {k} merged into a neighbouring age bin");
    }

    // Deal subjects into k shards, label by label.
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut labels: Vec<usize> = subjects.iter().map(|s| s.label).collect();
    labels.sort_unstable();
    labels.dedup();
    let label_counts: Vec<usize> = labels.iter().map(|&l| subjects.iter().filter(|s| s.label == l).count()).collect();
    let quotas = shard_quotas(&label_counts, k);
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut counter = 0usize;
    for (li, &label) in labels.iter().enumerate() {
        let mut members: Vec<(usize, usize)> = order
            .iter()
            .enumerate()
            .filter(|&(_, &i)| subjects[i].label == label)
            .map(|(rank, &i)| (rank, i))
            .collect();
        members.sort_by(|a, b| {
            let (sa, sb) = (&subjects[a.1], &subjects[b.1]);
            (&sa.sex, sa.age_bin, a.0).cmp(&(&sb.sex, sb.age_bin, b.0))
        });
        let mut filled = vec![0usize; k];
        for (_, i) in members {
            while filled[counter % k] >= quotas[li][counter % k] {
                counter += 1;
            }
            shards[counter % k].push(i);
            filled[counter % k] += 1;
            counter += 1;
        }
    }

    let mut folds = Vec::with_capacity(k);
    for f in 0..k {
        let test = shards[f].clone();
        let v = validation_size(n, test.len(), ratios[1], ratios[0]);
        let available: Vec<usize> = labels
            .iter()
            .zip(&label_counts)
            .map(|(&l, &c)| c - test.iter().filter(|&&i| subjects[i].label == l).count())
            .collect();
        let quotas = apportion(v, &label_counts, &available);
        let mut taken = vec![0usize; labels.len()];
        let mut validation = Vec::with_capacity(v);
        let mut train = Vec::with_capacity(n - test.len() - v);
        for step in 1..k {
            for &i in &shards[(f + step) % k] {
                let li = labels.binary_search(&subjects[i].label).expect("known label");
                if taken[li] < quotas[li] {
                    taken[li] += 1;
                    validation.push(i);
                } else {
                    train.push(i);
                }
            }
        }
        let report = StratificationReport {
            train: profile(&train, &subjects),
            validation: profile(&validation, &subjects),
            test: profile(&test, &subjects),
            merged_strata: merged,
        };
        folds.push(FoldSplit {
            fold: f,
            train,
            validation,
            test,
            report,
        });
    }
    Ok(folds)
}

/// Label-balanced holdout: the same number of samples from every class,
/// about `fraction` of the labeled records in total. Returns
/// `(remaining, holdout)` index lists.
pub fn balanced_holdout<R: Rng + ?Sized>(
    labels: &[Option<usize>],
    fraction: f64,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("holdout fraction must lie in [0, 1), got {fraction}")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        let l = l.ok_or_else(|| Error::Manifest(format!("record {i} has no label")))?;
        by_class.entry(l).or_default().push(i);
    }
    if by_class.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let smallest = by_class.values().map(Vec::len).min().unwrap_or(0);
    let per_class = ((fraction * labels.len() as f64 / by_class.len() as f64).round() as usize).min(smallest);
    let mut holdout = Vec::new();
    let mut rest = Vec::new();
    for members in by_class.values_mut() {
        members.shuffle(rng);
        holdout.extend_from_slice(&members[..per_class]);
        rest.extend_from_slice(&members[per_class..]);
    }
    holdout.sort_unstable();
    rest.sort_unstable();
    Ok((rest, holdout))
}
