//! Graph manifests: `<stem>.nng.json` holds structure and attributes,
//! `<stem>.nng.bin` the parameter tensors as little-endian floats.
//!
//! Inside a vertex kind, every parameter tensor is replaced by a reference
//! `{"$tensor": "<name>"}` into the manifest's tensor table. Tensors are
//! stored as `f32` whenever that is lossless; compiled graphs carry trained
//! decoders that are not, and those tensors use `f64` so a round-trip stays
//! bit-exact.

use std::fs;
use std::path::{Path, PathBuf};

use nnchip_core::graph::{CompGraph, GraphError, Stage};
use nnchip_core::Tensor;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use serde_json::{Map, Value};

pub const FORMAT: &str = "nng";
pub const VERSION: u32 = 1;
const REF: &str = "$tensor";

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed manifest: {field} at byte {offset}: {detail}")]
    Malformed { field: String, offset: usize, detail: String },
    #[error("tensor {tensor:?}: blob bytes {start}..{end} missing ({available} bytes available)")]
    MissingBlob {
        tensor: String,
        start: usize,
        end: usize,
        available: usize,
    },
    #[error("tensor {tensor:?}: blob_len {got} but shape {shape:?} as {dtype} needs {expected}")]
    BlobLength {
        tensor: String,
        shape: Vec<usize>,
        dtype: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("vertex {vertex} references unknown tensor {tensor:?}")]
    UnknownTensor { vertex: usize, tensor: String },
    #[error("loaded graph is invalid: {0}")]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub blob_offset: usize,
    pub blob_len: usize,
}

#[derive(Serialize)]
struct VertexOut {
    id: usize,
    inputs: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    origin: Option<usize>,
    kind: Value,
}

#[derive(Serialize)]
struct ManifestOut<'a> {
    format: &'a str,
    version: u32,
    stage: Stage,
    outputs: &'a [usize],
    vertices: Vec<VertexOut>,
    tensors: Vec<TensorEntry>,
}

#[derive(Deserialize)]
struct VertexIn<'a> {
    id: usize,
    inputs: Vec<usize>,
    #[serde(default)]
    origin: Option<usize>,
    #[serde(borrow)]
    kind: &'a RawValue,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestIn<'a> {
    format: String,
    version: u32,
    stage: Stage,
    outputs: Vec<usize>,
    #[serde(borrow)]
    vertices: Vec<VertexIn<'a>>,
    tensors: Vec<TensorEntry>,
}

/// `<stem>.nng.json` and `<stem>.nng.bin`.
pub fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    let s = stem.as_os_str().to_string_lossy();
    let s = s.strip_suffix(".nng.json").or_else(|| s.strip_suffix(".nng.bin")).unwrap_or(&s);
    (PathBuf::from(format!("{s}.nng.json")), PathBuf::from(format!("{s}.nng.bin")))
}

/// Manifest text and blob bytes of `graph`.
pub fn to_bytes(graph: &CompGraph) -> (String, Vec<u8>) {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    let mut vertices = Vec::with_capacity(graph.len());
    for v in &graph.vertices {
        let mut kind = serde_json::to_value(&v.kind).expect("vertex kinds serialize");
        for (field, t) in v.kind.tensors() {
            let name = format!("v{}.{field}", v.id);
            let lossless = t.data().iter().all(|&x| (x as f32) as f64 == x);
            let dtype = if lossless { Dtype::F32 } else { Dtype::F64 };
            let start = blob.len();
            for &x in t.data() {
                match dtype {
                    Dtype::F32 => blob.extend_from_slice(&(x as f32).to_le_bytes()),
                    Dtype::F64 => blob.extend_from_slice(&x.to_le_bytes()),
                }
            }
            kind[field] = serde_json::json!({ REF: name });
            tensors.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                dtype,
                blob_offset: start,
                blob_len: blob.len() - start,
            });
        }
        vertices.push(VertexOut {
            id: v.id,
            inputs: v.inputs.clone(),
            origin: v.origin,
            kind,
        });
    }
    let m = ManifestOut {
        format: FORMAT,
        version: VERSION,
        stage: graph.stage,
        outputs: &graph.outputs,
        vertices,
        tensors,
    };
    let mut text = serde_json::to_string_pretty(&m).expect("manifest serializes");
    text.push('\n');
    (text, blob)
}

pub fn save(graph: &CompGraph, stem: &Path) -> Result<(), ManifestError> {
    let (json, bin) = paths(stem);
    let (text, blob) = to_bytes(graph);
    if let Some(dir) = json.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| ManifestError::Io { path: dir.into(), source })?;
    }
    fs::write(&json, text).map_err(|source| ManifestError::Io { path: json, source })?;
    fs::write(&bin, blob).map_err(|source| ManifestError::Io { path: bin, source })?;
    Ok(())
}

pub fn load(stem: &Path) -> Result<CompGraph, ManifestError> {
    let (json, bin) = paths(stem);
    let text = fs::read_to_string(&json).map_err(|source| ManifestError::Io { path: json, source })?;
    let blob = match fs::read(&bin) {
        Ok(b) => b,
        // A graph without parameters needs no blob; otherwise the first
        // tensor is reported missing below.
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(source) => return Err(ManifestError::Io { path: bin, source }),
    };
    from_bytes(&text, &blob)
}

/// Byte offset of a serde_json error position within `text`.
fn offset_of(text: &str, line: usize, column: usize) -> usize {
    let start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (start + column.saturating_sub(1)).min(text.len())
}

fn malformed(field: impl Into<String>, offset: usize, detail: impl ToString) -> ManifestError {
    ManifestError::Malformed {
        field: field.into(),
        offset,
        detail: detail.to_string(),
    }
}

pub fn from_bytes(text: &str, blob: &[u8]) -> Result<CompGraph, ManifestError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let m: ManifestIn = serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        let inner = e.into_inner();
        malformed(field, offset_of(text, inner.line(), inner.column()), inner)
    })?;
    if m.format != FORMAT || m.version != VERSION {
        let at = text.find("\"format\"").unwrap_or(0);
        return Err(malformed(
            "format",
            at,
            format!("expected {FORMAT} v{VERSION}, found {} v{}", m.format, m.version),
        ));
    }

    let mut table = std::collections::HashMap::new();
    for t in &m.tensors {
        let count: usize = t.shape.iter().product();
        let expected = count * t.dtype.size();
        if t.blob_len != expected {
            return Err(ManifestError::BlobLength {
                tensor: t.name.clone(),
                shape: t.shape.clone(),
                dtype: t.dtype.name(),
                expected,
                got: t.blob_len,
            });
        }
        let end = t.blob_offset.checked_add(t.blob_len).unwrap_or(usize::MAX);
        let Some(bytes) = blob.get(t.blob_offset..end) else {
            return Err(ManifestError::MissingBlob {
                tensor: t.name.clone(),
                start: t.blob_offset,
                end,
                available: blob.len(),
            });
        };
        let data: Vec<f64> = match t.dtype {
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            Dtype::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        let tensor = Tensor::new(t.shape.clone(), data).expect("length checked above");
        table.insert(t.name.as_str(), serde_json::to_value(tensor).expect("tensors serialize"));
    }

    let mut vertices = Vec::with_capacity(m.vertices.len());
    for (i, v) in m.vertices.iter().enumerate() {
        let base = v.kind.get().as_ptr() as usize - text.as_ptr() as usize;
        let field = format!("vertices[{i}].kind");
        if v.id != i {
            return Err(malformed(format!("vertices[{i}].id"), base, format!("id {} out of order", v.id)));
        }
        let mut kind: Map<String, Value> = serde_json::from_str(v.kind.get())
            .map_err(|e| malformed(&field, base + offset_of(v.kind.get(), e.line(), e.column()), e))?;
        for value in kind.values_mut() {
            let name = match value {
                Value::Object(o) if o.len() == 1 => match o.get(REF) {
                    Some(Value::String(s)) => s.clone(),
                    _ => continue,
                },
                _ => continue,
            };
            *value = table
                .get(name.as_str())
                .cloned()
                .ok_or(ManifestError::UnknownTensor { vertex: i, tensor: name })?;
        }
        let mut obj = Map::new();
        obj.insert("id".into(), v.id.into());
        obj.insert("inputs".into(), serde_json::to_value(&v.inputs).expect("ids serialize"));
        if let Some(o) = v.origin {
            obj.insert("origin".into(), o.into());
        }
        obj.insert("kind".into(), Value::Object(kind));
        vertices.push(Value::Object(obj));
    }
    let graph_value = serde_json::json!({
        "stage": m.stage,
        "outputs": m.outputs,
        "vertices": vertices,
    });
    let graph: CompGraph = serde_path_to_error::deserialize(graph_value).map_err(|e| {
        let path = e.path().to_string();
        // Point at the vertex the failing field belongs to.
        let offset = path
            .strip_prefix("vertices[")
            .and_then(|r| r.split(']').next())
            .and_then(|i| i.parse::<usize>().ok())
            .and_then(|i| m.vertices.get(i))
            .map_or(0, |v| v.kind.get().as_ptr() as usize - text.as_ptr() as usize);
        malformed(path, offset, e.into_inner())
    })?;
    if !graph.is_empty() {
        graph.validate()?;
    }
    Ok(graph)
}
