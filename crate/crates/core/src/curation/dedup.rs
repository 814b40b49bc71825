use std::borrow::Borrow;
use std::collections::HashMap;

use super::{canonical_tokens, CurationError, Sample, Verdict};

pub const EXACT_STAGE: &str = "exact_dedup";
pub const NEAR_STAGE: &str = "near_dedup";
pub const DEFAULT_SHINGLE_SIZE: usize = 5;
pub const DEFAULT_NEAR_THRESHOLD: f64 = 0.8;

/// Key under which two samples count as identical: canonical text plus the
/// images it refers to.
fn exact_key(sample: &Sample) -> String {
    let mut key = sample.canonical();
    for p in &sample.image_paths {
        key.push('\0');
        key.push_str(p);
    }
    key
}

/// First occurrence of each canonical form survives.
pub fn exact_dedup<S: Borrow<Sample>>(samples: &[S]) -> Vec<Verdict> {
    let mut first: HashMap<String, &str> = HashMap::with_capacity(samples.len());
    samples
        .iter()
        .map(|s| s.borrow())
        .map(|s| match first.get(&exact_key(s)) {
            Some(orig) => Verdict::fail(EXACT_STAGE, format!("exact-duplicate-of:{orig}")),
            None => {
                first.insert(exact_key(s), &s.id);
                Verdict::pass(EXACT_STAGE)
            }
        })
        .collect()
}

/// Distinct word n-grams of `tokens`, joined by single spaces.
pub fn shingle_set(tokens: &[&str], n: usize) -> Vec<String> {
    let mut out: Vec<String> = tokens.windows(n).map(|w| w.join(" ")).collect();
    out.sort_unstable();
    out.dedup();
    out
}

pub fn jaccard(a: &[String], b: &[String]) -> f64 {
    use std::collections::HashSet;
    let a: HashSet<&String> = a.iter().collect();
    let b: HashSet<&String> = b.iter().collect();
    let inter = a.intersection(&b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Default)]
struct ShingleIndex {
    /// shingle id -> survivors containing it
    postings: Vec<Vec<u32>>,
    /// survivor -> (sample index, shingle count)
    survivors: Vec<(usize, usize)>,
}

/// Greedy pass in input order: a sample fails when the exact Jaccard
/// similarity of its shingle set with an earlier survivor reaches
/// `threshold`. Samples are only compared with samples that reference the
/// same images. Samples with fewer than `n` tokens pass, flagged.
pub fn near_dedup<S: Borrow<Sample>>(samples: &[S], n: usize, threshold: f64) -> Result<Vec<Verdict>, CurationError> {
    if n == 0 {
        return Err(CurationError::InvalidConfig("shingle size must be at least 1".into()));
    }
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(CurationError::InvalidConfig(format!("Jaccard threshold {threshold} outside (0, 1]")));
    }
    let mut ids: HashMap<String, u32> = HashMap::new();
    let mut groups: HashMap<Vec<String>, ShingleIndex> = HashMap::new();
    let mut verdicts = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().map(Borrow::borrow).enumerate() {
        let canonical = s.canonical();
        let tokens = canonical_tokens(&canonical);
        if tokens.len() < n {
            verdicts.push(Verdict::pass(NEAR_STAGE).with_reason("too-short-for-shingling"));
            continue;
        }
        let mut set: Vec<u32> = tokens
            .windows(n)
            .map(|w| {
                let next = ids.len() as u32;
                *ids.entry(w.join(" ")).or_insert(next)
            })
            .collect();
        set.sort_unstable();
        set.dedup();
        let index = groups.entry(s.image_paths.clone()).or_default();
        let mut overlap: HashMap<u32, usize> = HashMap::new();
        for &sh in &set {
            if let Some(p) = index.postings.get(sh as usize) {
                for &sv in p {
                    *overlap.entry(sv).or_default() += 1;
                }
            }
        }
        // best match; ties go to the earliest survivor
        let best = overlap
            .into_iter()
            .map(|(sv, inter)| {
                let (_, len) = index.survivors[sv as usize];
                (sv, inter as f64 / (set.len() + len - inter) as f64)
            })
            .filter(|&(_, j)| j >= threshold)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        match best {
            Some((sv, j)) => {
                let orig = &samples[index.survivors[sv as usize].0].borrow().id;
                verdicts.push(Verdict::fail(NEAR_STAGE, format!("near-duplicate-of:{orig}")).with_score(j));
            }
            None => {
                let sv = index.survivors.len() as u32;
                index.survivors.push((i, set.len()));
                for &sh in &set {
                    let sh = sh as usize;
                    if index.postings.len() <= sh {
                        index.postings.resize_with(sh + 1, Vec::new);
                    }
                    index.postings[sh].push(sv);
                }
                verdicts.push(Verdict::pass(NEAR_STAGE));
            }
        }
    }
    Ok(verdicts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples(texts: &[&str]) -> Vec<Sample> {
        texts.iter().enumerate().map(|(i, t)| Sample::text(format!("s{}", i + 1), *t)).collect()
    }

    #[test]
    fn exact_duplicates() {
        let v = exact_dedup(&samples(&["a", "a", "b"]));
        assert!(v[0].pass && !v[1].pass && v[2].pass);
        assert_eq!(v[1].reason, "exact-duplicate-of:s1");
        let v = exact_dedup(&samples(&["a ", "A"]));
        assert!(!v[1].pass);
        assert!(exact_dedup(&samples(&["x", "y", "z"])).iter().all(|v| v.pass));
    }

    #[test]
    fn same_text_different_images_is_not_a_duplicate() {
        let mut s = samples(&["how many?", "how many?"]);
        s[0].image_paths = vec!["a.png".into()];
        s[1].image_paths = vec!["b.png".into()];
        assert!(exact_dedup(&s).iter().all(|v| v.pass));
        assert!(near_dedup(&s, 1, 0.5).unwrap().iter().all(|v| v.pass));
    }

    #[test]
    fn nine_of_eleven_shingles() {
        // 14 tokens give 10 unigram-5 shingles; changing the last token
        // swaps exactly one shingle: J = 9 / 11.
        let a: Vec<String> = (0..14).map(|i| format!("w{i}")).collect();
        let mut b = a.clone();
        b[13] = "other".into();
        let s = samples(&[&a.join(" "), &b.join(" ")]);
        let v = near_dedup(&s, 5, 0.8).unwrap();
        assert!(v[0].pass && !v[1].pass);
        assert_eq!(v[1].reason, "near-duplicate-of:s1");
        assert!((v[1].score.unwrap() - 9.0 / 11.0).abs() < 1e-15);
        let ta: Vec<&str> = a.iter().map(String::as_str).collect();
        let tb: Vec<&str> = b.iter().map(String::as_str).collect();
        assert_eq!(jaccard(&shingle_set(&ta, 5), &shingle_set(&tb, 5)), 9.0 / 11.0);
    }

    #[test]
    fn identical_and_disjoint() {
        let text = "one two three four five six";
        let v = near_dedup(&samples(&[text, text]), 5, 1.0).unwrap();
        assert!(!v[1].pass);
        assert_eq!(v[1].score, Some(1.0));
        let v = near_dedup(&samples(&[text, "seven eight nine ten eleven"]), 5, 0.8).unwrap();
        assert!(v.iter().all(|v| v.pass));
    }

    #[test]
    fn short_samples_pass_flagged() {
        let v = near_dedup(&samples(&["too short", "too short"]), 5, 0.8).unwrap();
        assert!(v.iter().all(|v| v.pass && v.reason == "too-short-for-shingling"));
        assert!(near_dedup::<Sample>(&[], 0, 0.8).is_err());
        assert!(near_dedup::<Sample>(&[], 5, 0.0).is_err());
    }

    #[test]
    fn failed_samples_are_not_indexed() {
        // c is close to b but b was removed as a near duplicate of a, so c
        // is compared against a only.
        let a = "a b c d e f g h i j";
        let b = "a b c d e f g h i x";
        let c = "q b c d e f g h i x";
        let v = near_dedup(&samples(&[a, b, c]), 2, 0.8).unwrap();
        assert_eq!(v.iter().map(|v| v.pass).collect::<Vec<_>>(), [true, false, true]);
    }
}
