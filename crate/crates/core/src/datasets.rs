//! Dataset loading (JSONL / CSV, local or remote) and task preprocessing.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{DatasetSpec, Sample};

/// Environment variable overriding the cache root.
pub const CACHE_DIR_ENV: &str = "EVAL_CACHE_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordSet {
    pub spec: DatasetSpec,
    pub samples: Vec<Sample>,
}

impl RecordSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Jsonl,
    Csv,
}

impl Format {
    fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "jsonl" | "ndjson" => Some(Format::Jsonl),
            "csv" => Some(Format::Csv),
            _ => None,
        }
    }
}

/// Loads datasets, caching remote sources under
/// `<cache_root>/datasets/<sha256>/<file>`.
#[derive(Debug, Clone)]
pub struct DatasetLoader {
    cache_root: PathBuf,
    base_dir: Option<PathBuf>,
}

impl DatasetLoader {
    pub fn new(cache_root: impl Into<PathBuf>) -> Self {
        Self { cache_root: cache_root.into(), base_dir: None }
    }

    /// Resolves relative local sources against `dir` instead of the
    /// working directory.
    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = Some(dir.into());
        self
    }

    /// Cache root from `EVAL_CACHE_DIR`, falling back to `default`.
    pub fn from_env(default: impl Into<PathBuf>) -> Self {
        match std::env::var_os(CACHE_DIR_ENV) {
            Some(dir) if !dir.is_empty() => Self::new(dir),
            _ => Self::new(default),
        }
    }

    pub fn cache_root(&self) -> &Path {
        &self.cache_root
    }

    pub fn load(&self, spec: &DatasetSpec) -> Result<RecordSet> {
        let issues = spec.issues();
        if !issues.is_empty() {
            return Err(Error::Invalid(issues));
        }
        let path = self.resolve(spec)?;
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if let Some(expected) = &spec.checksum {
            let actual = sha256_hex(&bytes);
            if !actual.eq_ignore_ascii_case(expected) {
                return Err(Error::Integrity { path, expected: expected.clone(), actual });
            }
        }
        let format = Format::from_path(&path)
            .ok_or_else(|| Error::Config(format!("unsupported dataset format: {}", path.display())))?;
        let text = String::from_utf8(bytes).map_err(|e| Error::Schema {
            source_name: path.display().to_string(),
            row: 0,
            message: format!("file is not valid UTF-8: {e}"),
        })?;
        let source_name = path.display().to_string();
        let samples = match format {
            Format::Jsonl => parse_jsonl(&text, spec, &source_name)?,
            Format::Csv => parse_csv(&text, spec, &source_name)?,
        };
        check_unique(&samples, &source_name)?;
        if samples.is_empty() {
            log::warn!("dataset '{}' at {} contains no samples", spec.name, source_name);
        }
        Ok(RecordSet { spec: spec.clone(), samples })
    }

    fn resolve(&self, spec: &DatasetSpec) -> Result<PathBuf> {
        if spec.source.starts_with("http://") || spec.source.starts_with("https://") {
            return self.fetch(spec);
        }
        let path = match &self.base_dir {
            Some(base) => base.join(&spec.source),
            None => PathBuf::from(&spec.source),
        };
        if path.is_dir() {
            for ext in ["jsonl", "csv"] {
                let candidate = path.join(format!("{}.{}.{ext}", spec.name, spec.split));
                if candidate.is_file() {
                    return Ok(candidate);
                }
            }
            return Err(Error::io(
                path.join(format!("{}.{}.jsonl", spec.name, spec.split)),
                std::io::Error::new(std::io::ErrorKind::NotFound, "no split file found in dataset directory"),
            ));
        }
        if !path.exists() {
            return Err(Error::io(
                &path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "dataset source not found"),
            ));
        }
        Ok(path)
    }

    fn fetch(&self, spec: &DatasetSpec) -> Result<PathBuf> {
        let url = &spec.source;
        let address = match &spec.checksum {
            Some(sum) => sum.to_ascii_lowercase(),
            None => sha256_hex(url.as_bytes()),
        };
        let file_name = url
            .split(['?', '#'])
            .next()
            .and_then(|u| u.rsplit('/').next())
            .filter(|n| !n.is_empty())
            .unwrap_or("data.jsonl");
        let dir = self.cache_root.join("datasets").join(address);
        let target = dir.join(file_name);
        if target.is_file() {
            log::debug!("dataset cache hit: {}", target.display());
            return Ok(target);
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let response =
            ureq::get(url).call().map_err(|e| Error::Download { url: url.clone(), message: e.to_string() })?;
        let mut bytes = Vec::new();
        response
            .into_reader()
            .read_to_end(&mut bytes)
            .map_err(|e| Error::Download { url: url.clone(), message: e.to_string() })?;
        let tmp = dir.join(format!(".{file_name}.part"));
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &target).map_err(|e| Error::io(&target, e))?;
        Ok(target)
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn value_to_text(v: &Value) -> Option<String> {
    match v {
        Value::Null => None,
        Value::String(s) => Some(s.clone()),
        other => Some(other.to_string()),
    }
}

fn build_sample(
    mut fields: BTreeMap<String, String>,
    spec: &DatasetSpec,
    source_name: &str,
    row: usize,
) -> Result<Sample> {
    let fm = &spec.field_map;
    let missing = |field: &str| Error::Schema {
        source_name: source_name.to_string(),
        row,
        message: format!("missing field '{field}'"),
    };
    let id = fields.remove(&fm.id_field).filter(|s| !s.is_empty()).ok_or_else(|| missing(&fm.id_field))?;
    let input_text = fields.remove(&fm.input_field).ok_or_else(|| missing(&fm.input_field))?;
    if input_text.is_empty() {
        return Err(Error::Schema {
            source_name: source_name.to_string(),
            row,
            message: format!("field '{}' is empty", fm.input_field),
        });
    }
    let reference_text = match &fm.reference_field {
        Some(name) => fields.remove(name).filter(|s| !s.is_empty()),
        None => None,
    };
    Ok(Sample { id, input_text, reference_text, meta: fields })
}

fn parse_jsonl(text: &str, spec: &DatasetSpec, source_name: &str) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let row = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(line).map_err(|e| Error::Schema {
            source_name: source_name.to_string(),
            row,
            message: format!("invalid JSON: {e}"),
        })?;
        let Value::Object(map) = value else {
            return Err(Error::Schema {
                source_name: source_name.to_string(),
                row,
                message: "expected a JSON object".into(),
            });
        };
        let fields = map.iter().filter_map(|(k, v)| value_to_text(v).map(|t| (k.clone(), t))).collect();
        out.push(build_sample(fields, spec, source_name, row)?);
    }
    Ok(out)
}

fn parse_csv(text: &str, spec: &DatasetSpec, source_name: &str) -> Result<Vec<Sample>> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let fields = headers.iter().zip(record.iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect();
        out.push(build_sample(fields, spec, source_name, i + 1)?);
    }
    Ok(out)
}

fn check_unique(samples: &[Sample], source_name: &str) -> Result<()> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for s in samples {
        *counts.entry(&s.id).or_default() += 1;
    }
    let mut dups: Vec<String> = counts.into_iter().filter(|(_, n)| *n > 1).map(|(id, _)| id.to_string()).collect();
    if dups.is_empty() {
        return Ok(());
    }
    dups.sort();
    Err(Error::DuplicateIds { source_name: source_name.to_string(), ids: dups })
}

/// A task preprocessing function. Returning `None` drops the sample.
pub type PreprocessFn = Arc<dyn Fn(Sample) -> Option<Sample> + Send + Sync>;

#[derive(Clone)]
pub struct PreprocessorRegistry {
    entries: BTreeMap<String, PreprocessFn>,
}

impl Default for PreprocessorRegistry {
    fn default() -> Self {
        let mut reg = Self { entries: BTreeMap::new() };
        reg.register("identity", Some);
        reg.register("normalize_whitespace", |mut s: Sample| {
            s.input_text = collapse_whitespace(&s.input_text);
            s.reference_text = s.reference_text.map(|r| collapse_whitespace(&r));
            Some(s)
        });
        reg.register("require_reference", |s: Sample| s.reference_text.is_some().then_some(s));
        reg
    }
}

impl std::fmt::Debug for PreprocessorRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.entries.keys()).finish()
    }
}

fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl PreprocessorRegistry {
    pub fn register<F>(&mut self, name: &str, f: F)
    where
        F: Fn(Sample) -> Option<Sample> + Send + Sync + 'static,
    {
        self.entries.insert(name.to_string(), Arc::new(f));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }

    pub fn preprocess(&self, records: RecordSet, name: &str) -> Result<RecordSet> {
        if name == "identity" {
            return Ok(records);
        }
        let f = self.entries.get(name).ok_or_else(|| {
            Error::Config(format!("unknown preprocessor '{name}'; registered: {}", self.names().join(", ")))
        })?;
        let RecordSet { spec, samples } = records;
        let samples = samples.into_iter().filter_map(|s| f(s)).collect();
        Ok(RecordSet { spec, samples })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FieldMap;

    fn spec(source: &Path) -> DatasetSpec {
        DatasetSpec {
            name: "aci".into(),
            version: "1".into(),
            source: source.display().to_string(),
            checksum: None,
            split: "test".into(),
            field_map: FieldMap {
                id_field: "encounter_id".into(),
                input_field: "dialogue".into(),
                reference_field: Some("note".into()),
            },
        }
    }

    const JSONL: &str = concat!(
        r#"{"encounter_id":"D2N001","dialogue":"[doctor] hi","note":"CC: cough","dataset":"virtassist"}"#,
        "\n",
        r#"{"encounter_id":"D2N002","dialogue":"[doctor] hello","note":"CC: fever"}"#,
        "\n\n",
        r#"{"encounter_id":3,"dialogue":"[doctor] hey"}"#,
        "\n"
    );

    #[test]
    fn loads_jsonl_in_file_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("aci.jsonl");
        fs::write(&path, JSONL).unwrap();
        let loader = DatasetLoader::new(dir.path().join("cache"));
        let rs = loader.load(&spec(&path)).unwrap();
        let ids: Vec<&str> = rs.samples.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["D2N001", "D2N002", "3"]);
        assert_eq!(rs.samples[0].reference_text.as_deref(), Some("CC: cough"));
        assert_eq!(rs.samples[0].meta.get("dataset").map(String::as_str), Some("virtassist"));
        assert_eq!(rs.samples[2].reference_text, None);
        assert_eq!(rs, loader.load(&spec(&path)).unwrap());
    }

    #[test]
    fn split_directory_convention() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("aci.test.jsonl"), JSONL).unwrap();
        let rs = DatasetLoader::new(dir.path()).load(&spec(dir.path())).unwrap();
        assert_eq!(rs.len(), 3);
        let mut s = spec(dir.path());
        s.split = "train".into();
        assert!(matches!(DatasetLoader::new(dir.path()).load(&s), Err(Error::Io { .. })));
    }

    #[test]
    fn empty_file_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        fs::write(&path, "").unwrap();
        assert!(DatasetLoader::new(dir.path()).load(&spec(&path)).unwrap().is_empty());
        let path = dir.path().join("empty.csv");
        fs::write(&path, "").unwrap();
        assert!(DatasetLoader::new(dir.path()).load(&spec(&path)).unwrap().is_empty());
    }

    #[test]
    fn csv_duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dup.csv");
        fs::write(&path, "encounter_id,dialogue,note\na,x,n1\nb,y,n2\na,z,n3\n").unwrap();
        match DatasetLoader::new(dir.path()).load(&spec(&path)) {
            Err(Error::DuplicateIds { ids, .. }) => assert_eq!(ids, vec!["a".to_string()]),
            other => panic!("expected duplicate error, got {other:?}"),
        }
    }

    #[test]
    fn missing_column_reports_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(&path, "{\"encounter_id\":\"a\",\"dialogue\":\"x\"}\n{\"encounter_id\":\"b\"}\n").unwrap();
        match DatasetLoader::new(dir.path()).load(&spec(&path)) {
            Err(Error::Schema { row, message, .. }) => {
                assert_eq!(row, 2);
                assert!(message.contains("dialogue"));
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn checksum_verified() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("aci.jsonl");
        fs::write(&path, JSONL).unwrap();
        let mut s = spec(&path);
        s.checksum = Some(sha256_hex(JSONL.as_bytes()));
        assert!(DatasetLoader::new(dir.path()).load(&s).is_ok());
        s.checksum = Some("0".repeat(64));
        assert!(matches!(DatasetLoader::new(dir.path()).load(&s), Err(Error::Integrity { .. })));
    }

    #[test]
    fn unreadable_source_is_io_error() {
        let s = spec(Path::new("/definitely/not/here.jsonl"));
        let err = DatasetLoader::new("/tmp").load(&s).unwrap_err();
        assert!(err.is_environmental());
    }

    fn five_samples() -> RecordSet {
        let samples = (0..5)
            .map(|i| {
                let s = Sample::new(format!("s{i}"), format!("a  b {i}"));
                if i % 2 == 0 {
                    s.with_reference("ref")
                } else {
                    s
                }
            })
            .collect::<Vec<_>>();
        // two samples lack a reference: s1, s3
        RecordSet { spec: spec(Path::new("x.jsonl")), samples }
    }

    #[test]
    fn identity_is_fixpoint() {
        let reg = PreprocessorRegistry::default();
        let rs = five_samples();
        assert_eq!(reg.preprocess(rs.clone(), "identity").unwrap(), rs);
    }

    #[test]
    fn whitespace_normalizer() {
        let reg = PreprocessorRegistry::default();
        let mut rs = five_samples();
        rs.samples.truncate(1);
        rs.samples[0].input_text = "a  b".into();
        let out = reg.preprocess(rs, "normalize_whitespace").unwrap();
        assert_eq!(out.samples[0].input_text, "a b");
    }

    #[test]
    fn dropping_preprocessor() {
        let reg = PreprocessorRegistry::default();
        let out = reg.preprocess(five_samples(), "require_reference").unwrap();
        let ids: Vec<&str> = out.samples.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["s0", "s2", "s4"]);
    }

    #[test]
    fn custom_and_unknown_preprocessors() {
        let mut reg = PreprocessorRegistry::default();
        reg.register("upper", |mut s: Sample| {
            s.input_text = s.input_text.to_uppercase();
            Some(s)
        });
        let out = reg.preprocess(five_samples(), "upper").unwrap();
        assert_eq!(out.samples[0].input_text, "A  B 0");
        let err = reg.preprocess(five_samples(), "nope").unwrap_err().to_string();
        assert!(err.contains("nope") && err.contains("identity"), "{err}");
    }
}
