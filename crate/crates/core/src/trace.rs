//! Trace directories: plan files, exported features and ablation outcomes,
//! and a backend that answers from them.
//!
//! Layout of a trace directory (see `docs/trace-format.md`):
//!
//! * `manifest.json` - format version, model info, per-example spans and file names;
//! * `features_<id>_<target>.bin` - little-endian `f32`, row-major `[|S|, L, H]`;
//! * `ablations_<id>.jsonl` - one `{"logprob", "target", "v"}` object per line.
//!
//! All JSON is canonical: object keys sorted, compact separators, floats in
//! shortest round-trip form, one trailing newline per document or line.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::ablation::{eval_f, AblationPlan, PlanEntry};
use crate::backend::{AttributableModel, ModelInfo};
use crate::error::{Error, Result};
use crate::types::{AblationVector, AttnFeatures, Example, ExampleText, Span};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

fn sorted(value: Value) -> Value {
    match value {
        Value::Object(map) => {
            let mut entries: Vec<(String, Value)> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Object(entries.into_iter().map(|(k, v)| (k, sorted(v))).collect())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sorted).collect()),
        other => other,
    }
}

/// Compact JSON with recursively sorted object keys, without a trailing newline.
pub fn canonical_json_line<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("trace types serialize to JSON");
    serde_json::to_string(&sorted(v)).expect("JSON values always print")
}

/// [`canonical_json_line`] followed by a newline.
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    let mut s = canonical_json_line(value);
    s.push('\n');
    s
}

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "example id {id:?} must be non-empty ASCII alphanumerics, '-', '_' or '.'"
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanFile {
    format_version: u32,
    seed: u64,
    m: usize,
    entries: Vec<PlanEntry>,
}

/// Writes the explicit ablation bitstrings for every (example, target).
pub fn write_plan(plan: &AblationPlan, path: &Path) -> Result<()> {
    let file = PlanFile {
        format_version: FORMAT_VERSION,
        seed: plan.seed,
        m: plan.m,
        entries: plan.entries.clone(),
    };
    write_atomic(path, canonical_json(&file).as_bytes())
}

pub fn read_plan(path: &Path) -> Result<AblationPlan> {
    let file: PlanFile = read_json(path)?;
    if file.format_version != FORMAT_VERSION {
        return Err(Error::Format {
            path: path.into(),
            offset: 0,
            message: format!("unsupported format_version {}", file.format_version),
        });
    }
    Ok(AblationPlan {
        seed: file.seed,
        m: file.m,
        entries: file.entries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestExample {
    pub id: String,
    pub x_len: usize,
    pub sources: Vec<Span>,
    pub targets: Vec<Span>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<ExampleText>,
    /// One features file per target, relative to the trace directory.
    pub features: Vec<String>,
    /// The ablation-record file, relative to the trace directory.
    pub ablations: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceManifest {
    pub format_version: u32,
    pub model: ModelInfo,
    pub examples: Vec<ManifestExample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationRecord {
    pub logprob: f64,
    pub target: usize,
    pub v: AblationVector,
}

pub fn features_file_name(id: &str, target: usize) -> String {
    format!("features_{id}_{target}.bin")
}

pub fn ablations_file_name(id: &str) -> String {
    format!("ablations_{id}.jsonl")
}

pub fn encode_features(features: &AttnFeatures) -> Vec<u8> {
    features
        .values()
        .iter()
        .flat_map(|v| v.to_le_bytes())
        .collect()
}

/// Evaluates `backend` on every planned ablation and writes a trace to `dir`.
pub fn export_trace(
    backend: &dyn AttributableModel,
    dataset: &[Example],
    plan: &AblationPlan,
    dir: &Path,
) -> Result<TraceManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut examples = Vec::with_capacity(dataset.len());
    for ex in dataset {
        check_id(&ex.id)?;
        let mut feature_files = Vec::with_capacity(ex.targets.len());
        let mut lines = String::new();
        for t in 0..ex.targets.len() {
            let entry = plan.entry(&ex.id, t).ok_or_else(|| {
                Error::InvalidInput(format!("plan has no entry for example {:?} target {t}", ex.id))
            })?;
            let features = backend.aggregated_attention(ex, t)?;
            let name = features_file_name(&ex.id, t);
            write_atomic(&dir.join(&name), &encode_features(&features))?;
            feature_files.push(name);
            for v in &entry.ablations {
                let record = AblationRecord {
                    logprob: eval_f(backend, ex, t, v)?,
                    target: t,
                    v: v.clone(),
                };
                lines.push_str(&canonical_json(&record));
            }
        }
        let ablations = ablations_file_name(&ex.id);
        write_atomic(&dir.join(&ablations), lines.as_bytes())?;
        examples.push(ManifestExample {
            id: ex.id.clone(),
            x_len: ex.x.len(),
            sources: ex.sources.0.clone(),
            targets: ex.targets.clone(),
            text: ex.text.clone(),
            features: feature_files,
            ablations,
        });
    }
    let manifest = TraceManifest {
        format_version: FORMAT_VERSION,
        model: backend.info(),
        examples,
    };
    write_atomic(&dir.join(MANIFEST_FILE), canonical_json(&manifest).as_bytes())?;
    Ok(manifest)
}

#[derive(Debug, Clone)]
struct TraceTarget {
    features: AttnFeatures,
    order: Vec<AblationVector>,
    outcomes: HashMap<AblationVector, f64>,
}

#[derive(Debug, Clone)]
struct TraceExample {
    n_sources: usize,
    targets: Vec<TraceTarget>,
}

/// Backend answering from a trace directory. Only recorded ablations can
/// be evaluated; anything else is [`Error::UnrecordedAblation`].
#[derive(Debug, Clone)]
pub struct TraceBackend {
    manifest: TraceManifest,
    examples: HashMap<String, TraceExample>,
}

fn format_err(path: &Path, offset: u64, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        message: message.into(),
    }
}

fn decode_features(path: &Path, bytes: &[u8], n_sources: usize, info: &ModelInfo) -> Result<AttnFeatures> {
    let expected = 4 * n_sources * info.n_layers * info.n_heads;
    if bytes.len() != expected {
        return Err(format_err(
            path,
            bytes.len().min(expected) as u64,
            format!("features file has {} bytes, expected {expected}", bytes.len()),
        ));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
        return Err(format_err(
            path,
            4 * i as u64,
            format!("feature value {} is negative or non-finite", values[i]),
        ));
    }
    AttnFeatures::new(n_sources, info.n_layers, info.n_heads, values)
}

/// Opens a trace directory, validating every file against the manifest.
pub fn read_trace(dir: &Path) -> Result<TraceBackend> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: TraceManifest = read_json(&manifest_path)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(format_err(
            &manifest_path,
            0,
            format!("unsupported format_version {}", manifest.format_version),
        ));
    }
    manifest.model.validate()?;
    let mut examples = HashMap::with_capacity(manifest.examples.len());
    for me in &manifest.examples {
        let n_sources = me.sources.len();
        crate::types::SourceSet(me.sources.clone())
            .validate(me.x_len)
            .map_err(|e| format_err(&manifest_path, 0, format!("example {:?}: {e}", me.id)))?;
        if me.features.len() != me.targets.len() {
            return Err(format_err(
                &manifest_path,
                0,
                format!("example {:?} lists {} feature files for {} targets", me.id, me.features.len(), me.targets.len()),
            ));
        }
        let mut targets = Vec::with_capacity(me.targets.len());
        for file in &me.features {
            let path = dir.join(file);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            targets.push(TraceTarget {
                features: decode_features(&path, &bytes, n_sources, &manifest.model)?,
                order: Vec::new(),
                outcomes: HashMap::new(),
            });
        }

        let path = dir.join(&me.ablations);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut offset = 0u64;
        for line in text.split_inclusive('\n') {
            let body = line.trim_end_matches('\n');
            if !body.is_empty() {
                let record: AblationRecord = serde_json::from_str(body)
                    .map_err(|e| format_err(&path, offset, e.to_string()))?;
                if record.v.len() != n_sources {
                    return Err(format_err(
                        &path,
                        offset,
                        format!("ablation has {} bits for {n_sources} sources", record.v.len()),
                    ));
                }
                if !(record.logprob <= 0.0) {
                    return Err(format_err(
                        &path,
                        offset,
                        format!("logprob {} must be <= 0", record.logprob),
                    ));
                }
                let slot = targets.get_mut(record.target).ok_or_else(|| {
                    format_err(&path, offset, format!("target {} out of range", record.target))
                })?;
                // The plan may repeat a vector; its outcomes must agree.
                let seen = *slot.outcomes.entry(record.v.clone()).or_insert(record.logprob);
                if seen.to_bits() != record.logprob.to_bits() {
                    return Err(format_err(
                        &path,
                        offset,
                        format!("ablation {} recorded twice with different logprobs", record.v.to_bitstring()),
                    ));
                }
                slot.order.push(record.v);
            }
            offset += line.len() as u64;
        }
        if examples
            .insert(me.id.clone(), TraceExample { n_sources, targets })
            .is_some()
        {
            return Err(format_err(&manifest_path, 0, format!("duplicate example id {:?}", me.id)));
        }
    }
    Ok(TraceBackend { manifest, examples })
}

impl TraceBackend {
    pub fn manifest(&self) -> &TraceManifest {
        &self.manifest
    }

    fn target(&self, example: &Example, target: usize) -> Result<&TraceTarget> {
        let entry = self
            .examples
            .get(&example.id)
            .ok_or_else(|| Error::UnknownExample(example.id.clone()))?;
        if entry.n_sources != example.n_sources() {
            return Err(Error::LengthMismatch {
                expected: entry.n_sources,
                got: example.n_sources(),
            });
        }
        entry.targets.get(target).ok_or(Error::NoSuchTarget {
            index: target,
            count: entry.targets.len(),
        })
    }
}

impl AttributableModel for TraceBackend {
    fn name(&self) -> &'static str {
        "trace"
    }

    fn info(&self) -> ModelInfo {
        self.manifest.model
    }

    fn logprob_under_ablation(
        &self,
        example: &Example,
        target: usize,
        v: &AblationVector,
    ) -> Result<f64> {
        self.target(example, target)?
            .outcomes
            .get(v)
            .copied()
            .ok_or_else(|| Error::UnrecordedAblation {
                id: example.id.clone(),
                target,
                bits: v.to_bitstring(),
            })
    }

    fn aggregated_attention(&self, example: &Example, target: usize) -> Result<AttnFeatures> {
        Ok(self.target(example, target)?.features.clone())
    }

    fn recorded_ablations(&self, example: &Example, target: usize) -> Option<Vec<AblationVector>> {
        self.target(example, target).ok().map(|t| t.order.clone())
    }
}

/// Paths of every file in a trace directory, manifest first.
pub fn trace_files(manifest: &TraceManifest) -> Vec<PathBuf> {
    let mut out = vec![PathBuf::from(MANIFEST_FILE)];
    for e in &manifest.examples {
        out.extend(e.features.iter().map(PathBuf::from));
        out.push(PathBuf::from(&e.ablations));
    }
    out
}
