use std::borrow::Borrow;
use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;

use super::{canonical_tokens, canonicalize, CurationError, Sample, Verdict};

pub const DECONTAM_STAGE: &str = "decontaminate";
pub const DEFAULT_DECONTAM_N: usize = 13;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchmarkPrompt {
    /// `<file stem>:<line number>`
    pub id: String,
    pub text: String,
}

/// Reads one prompt per line. A tab separates an optional reference answer,
/// which is appended to the prompt only when `include_answers` is set.
pub fn load_benchmark_file(path: &Path, include_answers: bool) -> Result<Vec<BenchmarkPrompt>, CurationError> {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let (prompt, answer) = line.split_once('\t').unwrap_or((line, ""));
            let text = if include_answers && !answer.is_empty() {
                format!("{prompt} {answer}")
            } else {
                prompt.to_string()
            };
            BenchmarkPrompt { id: format!("{stem}:{}", i + 1), text }
        })
        .collect())
}

/// Every canonical n-gram of the benchmark prompts, mapped to the first
/// prompt containing it.
#[derive(Debug, Clone)]
pub struct DecontamIndex {
    n: usize,
    ngrams: HashMap<String, usize>,
    ids: Vec<String>,
}

impl DecontamIndex {
    pub fn build(prompts: &[BenchmarkPrompt], n: usize) -> Result<Self, CurationError> {
        if n == 0 {
            return Err(CurationError::InvalidConfig("decontamination n-gram size must be at least 1".into()));
        }
        let mut ngrams = HashMap::new();
        for (i, p) in prompts.iter().enumerate() {
            let canonical = canonicalize(&p.text);
            for w in canonical_tokens(&canonical).windows(n) {
                ngrams.entry(w.join(" ")).or_insert(i);
            }
        }
        Ok(Self { n, ngrams, ids: prompts.iter().map(|p| p.id.clone()).collect() })
    }

    pub fn len(&self) -> usize {
        self.ngrams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ngrams.is_empty()
    }

    /// Benchmark id of the first overlapping n-gram in sample order.
    pub fn find(&self, text: &str) -> Option<&str> {
        if self.ngrams.is_empty() {
            return None;
        }
        let canonical = canonicalize(text);
        canonical_tokens(&canonical)
            .windows(self.n)
            .find_map(|w| self.ngrams.get(&w.join(" ")))
            .map(|&i| self.ids[i].as_str())
    }

    pub fn check(&self, sample: &Sample) -> Verdict {
        match self.find(&sample.text) {
            Some(id) => Verdict::fail(DECONTAM_STAGE, format!("benchmark-overlap:{id}")),
            None => Verdict::pass(DECONTAM_STAGE),
        }
    }
}

pub fn decontaminate<S: Borrow<Sample> + Sync>(samples: &[S], prompts: &[BenchmarkPrompt], n: usize) -> Result<Vec<Verdict>, CurationError> {
    let index = DecontamIndex::build(prompts, n)?;
    Ok(samples.par_iter().map(|s| index.check(s.borrow())).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    #[test]
    fn planted_span_is_found() {
        let bench = words("b", 30);
        let prompts = [
            BenchmarkPrompt { id: "other:1".into(), text: "unrelated".into() },
            BenchmarkPrompt { id: "gsm:7".into(), text: bench.join(" ") },
        ];
        let planted = format!("lead in {} trailing", bench[5..18].join(" ").to_uppercase());
        let v = decontaminate(&[Sample::text("x", planted)], &prompts, 13).unwrap();
        assert_eq!(v[0].reason, "benchmark-overlap:gsm:7");

        // two 12-token spans separated by a foreign token never form a 13-gram
        let near = format!("{} gap {}", bench[0..12].join(" "), bench[12..24].join(" "));
        assert!(decontaminate(&[Sample::text("y", near)], &prompts, 13).unwrap()[0].pass);
    }

    #[test]
    fn empty_benchmarks_pass_everything() {
        let v = decontaminate(&[Sample::text("a", words("w", 20).join(" "))], &[], 13).unwrap();
        assert!(v[0].pass);
        assert!(decontaminate::<Sample>(&[], &[], 0).is_err());
    }

    #[test]
    fn benchmark_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mathbench.txt");
        std::fs::write(&path, "what is two plus two\tfour\n\nname a prime\n").unwrap();
        let p = load_benchmark_file(&path, false).unwrap();
        assert_eq!(p[0], BenchmarkPrompt { id: "mathbench:1".into(), text: "what is two plus two".into() });
        assert_eq!(p[1].id, "mathbench:3");
        let with = load_benchmark_file(&path, true).unwrap();
        assert_eq!(with[0].text, "what is two plus two four");
    }
}
