use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    ExactDedup,
    NearDedup,
    Heuristic,
    Content,
    Format,
    Rejection,
    Decontaminate,
}

impl Stage {
    pub const DEFAULT_ORDER: [Stage; 6] = [
        Stage::ExactDedup,
        Stage::NearDedup,
        Stage::Heuristic,
        Stage::Format,
        Stage::Rejection,
        Stage::Decontaminate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::ExactDedup => EXACT_STAGE,
            Stage::NearDedup => NEAR_STAGE,
            Stage::Heuristic => HEURISTIC_STAGE,
            Stage::Content => CONTENT_STAGE,
            Stage::Format => FORMAT_STAGE,
            Stage::Rejection => REJECTION_STAGE,
            Stage::Decontaminate => DECONTAM_STAGE,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = CurationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Stage::Content]
            .into_iter()
            .chain(Stage::DEFAULT_ORDER)
            .find(|st| st.name() == s)
            .ok_or_else(|| CurationError::UnknownStage(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurationConfig {
    pub stages: Vec<Stage>,
    pub shingle_size: usize,
    pub near_threshold: f64,
    pub heuristics: HeuristicRules,
    pub decontam_n: usize,
    /// Append reference answers to benchmark prompts before indexing.
    pub include_answers: bool,
    /// Benchmark prompt files, or directories of `.txt` files.
    pub benchmarks: Vec<PathBuf>,
    /// Regex patterns for the content stage.
    pub blocklist: Vec<String>,
    pub verifier: VerifierConfig,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            stages: Stage::DEFAULT_ORDER.to_vec(),
            shingle_size: DEFAULT_SHINGLE_SIZE,
            near_threshold: DEFAULT_NEAR_THRESHOLD,
            heuristics: HeuristicRules::default(),
            decontam_n: DEFAULT_DECONTAM_N,
            include_answers: false,
            benchmarks: Vec::new(),
            blocklist: Vec::new(),
            verifier: VerifierConfig::Stub,
        }
    }
}

impl CurationConfig {
    pub fn from_json_file(path: &Path) -> Result<Self, CurationError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| CurationError::InvalidConfig(e.to_string()))
    }

    pub fn load_benchmarks(&self) -> Result<Vec<BenchmarkPrompt>, CurationError> {
        let mut prompts = Vec::new();
        for path in &self.benchmarks {
            let files = if path.is_dir() {
                let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
                    .map(|e| e.map(|e| e.path()))
                    .collect::<Result<_, _>>()?;
                files.retain(|p| p.extension().is_some_and(|e| e == "txt"));
                files.sort();
                files
            } else {
                vec![path.clone()]
            };
            for f in files {
                prompts.extend(load_benchmark_file(&f, self.include_answers)?);
            }
        }
        Ok(prompts)
    }
}

/// A configured pipeline with its benchmark index and verifier built once.
pub struct Pipeline {
    config: CurationConfig,
    verifier: Box<dyn Verifier>,
    decontam: DecontamIndex,
    blocklist: Blocklist,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    /// One record per input sample, in input order.
    pub records: Vec<CurationRecord>,
    /// Indices of surviving samples, in input order.
    pub survivors: Vec<usize>,
}

impl Pipeline {
    pub fn new(config: CurationConfig) -> Result<Self, CurationError> {
        let prompts = config.load_benchmarks()?;
        Self::with_benchmarks(config, &prompts)
    }

    pub fn with_benchmarks(config: CurationConfig, prompts: &[BenchmarkPrompt]) -> Result<Self, CurationError> {
        let decontam = DecontamIndex::build(prompts, config.decontam_n)?;
        let blocklist = Blocklist::new(&config.blocklist)?;
        // fail on bad near-dedup settings before touching data
        near_dedup::<Sample>(&[], config.shingle_size, config.near_threshold)?;
        let verifier = config.verifier.build();
        Ok(Self { config, verifier, decontam, blocklist })
    }

    pub fn with_verifier(mut self, verifier: Box<dyn Verifier>) -> Self {
        self.verifier = verifier;
        self
    }

    pub fn config(&self) -> &CurationConfig {
        &self.config
    }

    fn run_stage(&self, stage: Stage, samples: &[&Sample]) -> Result<Vec<Verdict>, CurationError> {
        Ok(match stage {
            Stage::ExactDedup => exact_dedup(samples),
            Stage::NearDedup => near_dedup(samples, self.config.shingle_size, self.config.near_threshold)?,
            Stage::Heuristic => samples.par_iter().map(|s| heuristic_filter(s, &self.config.heuristics)).collect(),
            Stage::Content => samples.par_iter().map(|s| self.blocklist.check(s)).collect(),
            Stage::Format => samples.par_iter().map(|s| format_check(&s.response, s.expected_format)).collect(),
            Stage::Rejection => samples
                .par_iter()
                .map(|s| rejection_sample(s, self.verifier.as_ref()))
                .collect::<Result<_, _>>()?,
            Stage::Decontaminate => samples.par_iter().map(|s| self.decontam.check(s)).collect(),
        })
    }

    /// Applies the stages in order; each stage sees only the survivors of
    /// the previous one.
    pub fn run(&self, samples: &[Sample]) -> Result<PipelineOutput, CurationError> {
        let mut records: Vec<CurationRecord> = samples
            .iter()
            .map(|s| CurationRecord { sample_id: s.id.clone(), verdicts: Vec::new(), surviving: true })
            .collect();
        let mut active: Vec<usize> = (0..samples.len()).collect();
        for &stage in &self.config.stages {
            let view: Vec<&Sample> = active.iter().map(|&i| &samples[i]).collect();
            let verdicts = self.run_stage(stage, &view)?;
            let mut next = Vec::with_capacity(active.len());
            for (i, v) in active.into_iter().zip(verdicts) {
                if v.pass {
                    next.push(i);
                } else {
                    records[i].surviving = false;
                }
                records[i].verdicts.push(v);
            }
            active = next;
        }
        Ok(PipelineOutput { records, survivors: active })
    }
}

pub fn run_pipeline(samples: &[Sample], config: &CurationConfig) -> Result<PipelineOutput, CurationError> {
    Pipeline::new(config.clone())?.run(samples)
}

pub fn read_manifest(path: &Path) -> Result<Vec<Sample>, CurationError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| CurationError::BadRecord { line: i + 1, reason: e.to_string() })?;
        out.push(Sample::from_record(record, i + 1)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CurationSummary {
    pub inputs: usize,
    pub survivors: usize,
    /// Removed samples per stage, in pipeline order.
    pub removed: Vec<(String, usize)>,
}

/// Curates a JSONL manifest: survivors (original records, input order) go to
/// `output`, one [`CurationRecord`] per input goes to `log`.
pub fn curate_files(pipeline: &Pipeline, input: &Path, output: &Path, log: &Path) -> Result<CurationSummary, CurationError> {
    let samples = read_manifest(input)?;
    let result = pipeline.run(&samples)?;
    let mut out = BufWriter::new(File::create(output)?);
    for &i in &result.survivors {
        serde_json::to_writer(&mut out, &samples[i].record).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    let mut log_out = BufWriter::new(File::create(log)?);
    for r in &result.records {
        serde_json::to_writer(&mut log_out, r).map_err(std::io::Error::from)?;
        log_out.write_all(b"\n")?;
    }
    log_out.flush()?;
    let removed = pipeline
        .config()
        .stages
        .iter()
        .map(|st| {
            let n = result
                .records
                .iter()
                .filter(|r| r.verdicts.last().is_some_and(|v| !v.pass && v.stage == st.name()))
                .count();
            (st.name().to_string(), n)
        })
        .collect();
    Ok(CurationSummary { inputs: samples.len(), survivors: result.survivors.len(), removed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn prose(i: usize) -> String {
        format!(
            "sample number {i} discusses topic {} with detail {} and closes with remark {}",
            i * 7,
            i * 13,
            i * 31
        )
    }

    #[test]
    fn removes_exactly_the_planted_samples() {
        let bench: Vec<String> = (0..20).map(|i| format!("bench{i}")).collect();
        let mut samples: Vec<Sample> = (0..6).map(|i| Sample::text(format!("c{i}"), prose(i))).collect();
        samples.push(Sample::text("dup", prose(2).to_uppercase()));
        samples.push(Sample::text("leak", format!("{} then {}", prose(40), bench[2..15].join(" "))));
        samples.push(Sample::text("short", "tiny"));
        let prompts = [BenchmarkPrompt { id: "bench:1".into(), text: bench.join(" ") }];
        let p = Pipeline::with_benchmarks(CurationConfig::default(), &prompts).unwrap();
        let out = p.run(&samples).unwrap();
        assert_eq!(out.survivors, (0..6).collect::<Vec<_>>());
        let last = |i: usize| out.records[i].verdicts.last().unwrap().clone();
        assert_eq!(last(6).reason, "exact-duplicate-of:c2");
        assert_eq!(last(7).reason, "benchmark-overlap:bench:1");
        assert_eq!(last(8).reason, "min-token-count");
        for r in &out.records {
            assert_eq!(r.surviving, r.verdicts.iter().all(|v| v.pass));
        }
        assert_eq!(out.records[0].verdicts.iter().map(|v| v.stage.as_str()).collect::<Vec<_>>(),
            Stage::DEFAULT_ORDER.map(Stage::name));
    }

    #[test]
    fn empty_and_clean() {
        let out = run_pipeline(&[], &CurationConfig::default()).unwrap();
        assert!(out.records.is_empty() && out.survivors.is_empty());
        let clean: Vec<Sample> = (0..10).map(|i| Sample::text(format!("c{i}"), prose(i))).collect();
        assert_eq!(run_pipeline(&clean, &CurationConfig::default()).unwrap().survivors.len(), 10);
    }

    #[test]
    fn format_and_content_stages() {
        let bad_json = Sample::from_record(
            json!({"id": "j", "expected_format": "json", "turns": [
                {"role": "user", "content": "give me json for the record please"},
                {"role": "assistant", "content": "{\"a\": 1"}
            ]}),
            1,
        )
        .unwrap();
        let mut cfg = CurationConfig::default();
        cfg.stages.insert(3, Stage::Content);
        cfg.blocklist = vec!["closes with remark 31$".into()];
        let out = run_pipeline(&[Sample::text("c1", prose(1)), bad_json], &cfg).unwrap();
        assert!(out.survivors.is_empty());
        assert_eq!(out.records[0].verdicts.last().unwrap().reason, "blocklist:closes with remark 31$");
        assert_eq!(out.records[1].verdicts.last().unwrap().reason, "invalid-json");
    }

    #[test]
    fn config_parsing() {
        let cfg: CurationConfig = serde_json::from_str(r#"{"stages": ["heuristic", "exact_dedup"], "near_threshold": 0.9}"#).unwrap();
        assert_eq!(cfg.stages, [Stage::Heuristic, Stage::ExactDedup]);
        assert_eq!(cfg.shingle_size, 5);
        assert!(serde_json::from_str::<CurationConfig>(r#"{"stagez": []}"#).is_err());
        assert!("rejection".parse::<Stage>().is_ok());
        assert!("semantic".parse::<Stage>().is_err());
    }

    #[test]
    fn files() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.jsonl");
        std::fs::write(&input, format!("{}\n{}\n", json!({"id": "a", "text": prose(1)}), json!({"id": "b", "text": prose(1)}))).unwrap();
        let p = Pipeline::new(CurationConfig::default()).unwrap();
        let s = curate_files(&p, &input, &dir.path().join("out.jsonl"), &dir.path().join("log.jsonl")).unwrap();
        assert_eq!((s.inputs, s.survivors), (2, 1));
        assert_eq!(s.removed[0], ("exact_dedup".to_string(), 1));
        let log = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 2);
    }
}
