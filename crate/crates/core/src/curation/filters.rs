use std::collections::{BTreeMap, HashSet};

use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};

use super::{canonical_tokens, canonicalize, CurationError, ExpectedFormat, Sample, Verdict};

pub const HEURISTIC_STAGE: &str = "heuristic";
pub const FORMAT_STAGE: &str = "format";
pub const CONTENT_STAGE: &str = "content";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleKind {
    MinTokenCount,
    MaxTokenCount,
    MaxRepeatedNgramFraction,
    MaxNonPrintableFraction,
    MinAlphanumericFraction,
}

impl RuleKind {
    pub const ALL: [RuleKind; 5] = [
        RuleKind::MinTokenCount,
        RuleKind::MaxTokenCount,
        RuleKind::MaxRepeatedNgramFraction,
        RuleKind::MaxNonPrintableFraction,
        RuleKind::MinAlphanumericFraction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RuleKind::MinTokenCount => "min-token-count",
            RuleKind::MaxTokenCount => "max-token-count",
            RuleKind::MaxRepeatedNgramFraction => "max-repeated-ngram-fraction",
            RuleKind::MaxNonPrintableFraction => "max-non-printable-fraction",
            RuleKind::MinAlphanumericFraction => "min-alphanumeric-fraction",
        }
    }

    pub fn parse(name: &str) -> Result<Self, CurationError> {
        RuleKind::ALL
            .into_iter()
            .find(|r| r.name() == name)
            .ok_or_else(|| CurationError::UnknownRule(name.to_string()))
    }
}

/// Heuristic thresholds, keyed by rule name in config files. Rules are always
/// evaluated in [`RuleKind::ALL`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, f64>", into = "BTreeMap<String, f64>")]
pub struct HeuristicRules {
    pub rules: BTreeMap<RuleKind, f64>,
    /// n-gram size for the repetition rule.
    pub repeated_ngram_n: usize,
}

const NGRAM_KEY: &str = "repeated-ngram-size";

impl Default for HeuristicRules {
    fn default() -> Self {
        Self {
            rules: BTreeMap::from([
                (RuleKind::MinTokenCount, 3.0),
                (RuleKind::MaxTokenCount, 100_000.0),
                (RuleKind::MaxRepeatedNgramFraction, 0.5),
                (RuleKind::MaxNonPrintableFraction, 0.01),
                (RuleKind::MinAlphanumericFraction, 0.5),
            ]),
            repeated_ngram_n: 2,
        }
    }
}

impl TryFrom<BTreeMap<String, f64>> for HeuristicRules {
    type Error = CurationError;

    fn try_from(map: BTreeMap<String, f64>) -> Result<Self, Self::Error> {
        let mut out = HeuristicRules { rules: BTreeMap::new(), repeated_ngram_n: 2 };
        for (k, v) in map {
            if k == NGRAM_KEY {
                if v < 1.0 || v.fract() != 0.0 {
                    return Err(CurationError::InvalidConfig(format!("{NGRAM_KEY} must be a positive integer")));
                }
                out.repeated_ngram_n = v as usize;
            } else {
                out.rules.insert(RuleKind::parse(&k)?, v);
            }
        }
        Ok(out)
    }
}

impl From<HeuristicRules> for BTreeMap<String, f64> {
    fn from(r: HeuristicRules) -> Self {
        let mut m: BTreeMap<String, f64> = r.rules.into_iter().map(|(k, v)| (k.name().to_string(), v)).collect();
        m.insert(NGRAM_KEY.into(), r.repeated_ngram_n as f64);
        m
    }
}

/// `1 - distinct / total` over word n-grams; 0 when there are none.
pub fn repeated_ngram_fraction(tokens: &[&str], n: usize) -> f64 {
    if n == 0 || tokens.len() < n {
        return 0.0;
    }
    let total = tokens.len() - n + 1;
    let distinct: HashSet<&[&str]> = tokens.windows(n).collect();
    1.0 - distinct.len() as f64 / total as f64
}

fn is_non_printable(c: char) -> bool {
    c.is_control() && !matches!(c, '\n' | '\t' | '\r') || c == '\u{fffd}'
}

/// Fraction of characters that are control characters (other than common
/// whitespace) or replacement characters.
pub fn non_printable_fraction(text: &str) -> f64 {
    let total = text.chars().count();
    if total == 0 {
        return 0.0;
    }
    text.chars().filter(|&c| is_non_printable(c)).count() as f64 / total as f64
}

/// Alphanumeric characters over non-whitespace characters.
pub fn alphanumeric_fraction(text: &str) -> f64 {
    let visible: Vec<char> = text.chars().filter(|c| !c.is_whitespace()).collect();
    if visible.is_empty() {
        return 0.0;
    }
    visible.iter().filter(|c| c.is_alphanumeric()).count() as f64 / visible.len() as f64
}

/// Reports the first violated rule.
pub fn heuristic_filter(sample: &Sample, rules: &HeuristicRules) -> Verdict {
    let canonical = canonicalize(&sample.text);
    let tokens = canonical_tokens(&canonical);
    for (&rule, &limit) in &rules.rules {
        let ok = match rule {
            RuleKind::MinTokenCount => tokens.len() as f64 >= limit,
            RuleKind::MaxTokenCount => tokens.len() as f64 <= limit,
            RuleKind::MaxRepeatedNgramFraction => {
                repeated_ngram_fraction(&tokens, rules.repeated_ngram_n) <= limit
            }
            RuleKind::MaxNonPrintableFraction => non_printable_fraction(&sample.text) <= limit,
            RuleKind::MinAlphanumericFraction => alphanumeric_fraction(&sample.text) >= limit,
        };
        if !ok {
            return Verdict::fail(HEURISTIC_STAGE, rule.name());
        }
    }
    Verdict::pass(HEURISTIC_STAGE)
}

pub fn format_check(response: &str, expected: ExpectedFormat) -> Verdict {
    match expected {
        ExpectedFormat::None => Verdict::pass(FORMAT_STAGE),
        ExpectedFormat::Json => match serde_json::from_str::<serde_json::Value>(response) {
            Ok(_) => Verdict::pass(FORMAT_STAGE),
            Err(_) => Verdict::fail(FORMAT_STAGE, "invalid-json"),
        },
        ExpectedFormat::Xml => match roxmltree::Document::parse(response.trim()) {
            Ok(_) => Verdict::pass(FORMAT_STAGE),
            Err(_) => Verdict::fail(FORMAT_STAGE, "invalid-xml"),
        },
    }
}

/// Case-insensitive regex blocklist; the first matching pattern is reported.
#[derive(Debug, Clone)]
pub struct Blocklist {
    patterns: Vec<(String, Regex)>,
}

impl Blocklist {
    pub fn new<S: AsRef<str>>(patterns: &[S]) -> Result<Self, CurationError> {
        let patterns = patterns
            .iter()
            .map(|p| {
                let p = p.as_ref();
                RegexBuilder::new(p)
                    .case_insensitive(true)
                    .build()
                    .map(|re| (p.to_string(), re))
                    .map_err(|e| CurationError::BadPattern { pattern: p.to_string(), reason: e.to_string() })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { patterns })
    }

    /// One pattern per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, CurationError> {
        let lines: Vec<&str> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect();
        Self::new(&lines)
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn check(&self, sample: &Sample) -> Verdict {
        match self.patterns.iter().find(|(_, re)| re.is_match(&sample.text)) {
            Some((p, _)) => Verdict::fail(CONTENT_STAGE, format!("blocklist:{p}")),
            None => Verdict::pass(CONTENT_STAGE),
        }
    }
}
