use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::PackingError;
use crate::seed::derive_rng;

/// The fields stratified draws need from a manifest line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub token_count: u64,
    #[serde(default)]
    pub domain: Option<String>,
}

/// Draws `quotas[i]` samples uniformly without replacement from the samples
/// whose token count falls in `bounds[i]` (half-open). Each returned list is
/// sorted by id.
pub fn stratify_by_length(
    manifest: &[ManifestEntry],
    bounds: &[Range<u64>],
    quotas: &[usize],
    seed: u64,
) -> Result<Vec<Vec<String>>, PackingError> {
    if bounds.len() != quotas.len() {
        return Err(PackingError::Stratify(format!(
            "{} bounds but {} quotas",
            bounds.len(),
            quotas.len()
        )));
    }
    for (i, a) in bounds.iter().enumerate() {
        if a.start >= a.end {
            return Err(PackingError::Stratify(format!("stratum {i} is empty: {a:?}")));
        }
        for b in &bounds[i + 1..] {
            if a.start < b.end && b.start < a.end {
                return Err(PackingError::Stratify(format!("strata {a:?} and {b:?} overlap")));
            }
        }
    }
    bounds
        .iter()
        .zip(quotas)
        .enumerate()
        .map(|(i, (range, &quota))| {
            let ids: Vec<&str> = manifest
                .iter()
                .filter(|e| range.contains(&e.token_count))
                .map(|e| e.id.as_str())
                .collect();
            draw(ids, quota, seed, "stratify-length", i as u64).map_err(|available| {
                PackingError::QuotaExceeded {
                    stratum: format!("{range:?}"),
                    quota,
                    available,
                }
            })
        })
        .collect()
}

/// Per-domain draw of `round_half_up(fraction * n_domain)` samples. The result
/// is sorted by id.
pub fn stratified_subset(
    manifest: &[ManifestEntry],
    fraction: f64,
    seed: u64,
) -> Result<Vec<String>, PackingError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(PackingError::Stratify(format!("fraction {fraction} outside (0, 1]")));
    }
    let mut domains: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for e in manifest {
        let domain = e
            .domain
            .as_deref()
            .ok_or_else(|| PackingError::Untagged(e.id.clone()))?;
        domains.entry(domain).or_default().push(e.id.as_str());
    }
    let mut out = Vec::new();
    for (i, (_, ids)) in domains.into_iter().enumerate() {
        let n = round_half_up(fraction * ids.len() as f64);
        out.extend(draw(ids, n, seed, "stratified-subset", i as u64).expect("n <= population"));
    }
    out.sort();
    Ok(out)
}

pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Uniform draw of `k` ids; the population is put in id order first so the
/// result does not depend on manifest order. Returns the population size on
/// shortfall.
fn draw(mut ids: Vec<&str>, k: usize, seed: u64, label: &str, stream: u64) -> Result<Vec<String>, usize> {
    if k > ids.len() {
        return Err(ids.len());
    }
    ids.sort_unstable();
    let mut rng = derive_rng(seed, label, stream);
    let mut picked: Vec<String> = rand::seq::index::sample(&mut rng, ids.len(), k)
        .into_iter()
        .map(|i| ids[i].to_string())
        .collect();
    picked.sort();
    Ok(picked)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: usize, tokens: u64, domain: Option<&str>) -> ManifestEntry {
        ManifestEntry {
            id: format!("s{id:05}"),
            token_count: tokens,
            domain: domain.map(str::to_string),
        }
    }

    #[test]
    fn length_strata_quotas() {
        let manifest: Vec<_> = (0..100).map(|i| entry(i, (i as u64) * 10, None)).collect();
        let drawn = stratify_by_length(&manifest, &[0..500, 500..1000], &[10, 50], 3).unwrap();
        assert_eq!(drawn[0].len(), 10);
        assert_eq!(drawn[1].len(), 50);
        let lookup: BTreeMap<_, _> = manifest.iter().map(|e| (e.id.clone(), e.token_count)).collect();
        assert!(drawn[0].iter().all(|id| lookup[id] < 500));
        assert!(drawn[1].iter().all(|id| lookup[id] >= 500));
        assert_eq!(drawn, stratify_by_length(&manifest, &[0..500, 500..1000], &[10, 50], 3).unwrap());
    }

    #[test]
    fn zero_and_full_quota() {
        let manifest: Vec<_> = (0..5).rev().map(|i| entry(i, 1, None)).collect();
        let drawn = stratify_by_length(&manifest, &[0..2], &[0], 1).unwrap();
        assert!(drawn[0].is_empty());
        let drawn = stratify_by_length(&manifest, &[0..2], &[5], 1).unwrap();
        assert_eq!(drawn[0], vec!["s00000", "s00001", "s00002", "s00003", "s00004"]);
    }

    #[test]
    fn stratify_errors() {
        let manifest: Vec<_> = (0..5).map(|i| entry(i, 1, None)).collect();
        assert!(matches!(
            stratify_by_length(&manifest, &[0..2], &[6], 1),
            Err(PackingError::QuotaExceeded { quota: 6, available: 5, .. })
        ));
        assert!(stratify_by_length(&manifest, &[0..10, 5..20], &[0, 0], 1).is_err());
        assert!(stratify_by_length(&manifest, &[0..10], &[0, 0], 1).is_err());
    }

    #[test]
    fn subset_sizes_round_half_up() {
        let mut manifest: Vec<_> = (0..400).map(|i| entry(i, 1, Some("math"))).collect();
        manifest.extend((400..600).map(|i| entry(i, 1, Some("code"))));
        manifest.push(entry(600, 1, Some("tiny")));
        let subset = stratified_subset(&manifest, 0.25, 9).unwrap();
        let count = |lo: usize, hi: usize| {
            subset
                .iter()
                .filter(|id| (lo..hi).contains(&id[1..].parse::<usize>().unwrap()))
                .count()
        };
        assert_eq!((count(0, 400), count(400, 600), count(600, 601)), (100, 50, 0));

        let two: Vec<_> = (0..2).map(|i| entry(i, 1, Some("d"))).collect();
        assert_eq!(stratified_subset(&two, 0.25, 0).unwrap().len(), 1);
        assert_eq!(stratified_subset(&manifest, 1.0, 0).unwrap().len(), manifest.len());
    }

    #[test]
    fn subset_errors() {
        let manifest = vec![entry(0, 1, None)];
        assert!(matches!(stratified_subset(&manifest, 0.5, 0), Err(PackingError::Untagged(_))));
        assert!(stratified_subset(&[], 0.0, 0).is_err());
        assert!(stratified_subset(&[], 1.5, 0).is_err());
    }
}
