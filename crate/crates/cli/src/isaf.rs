//! ISAF v1 container: magic, a u32-length-prefixed JSON header, then
//! little-endian f32 payloads in header order.

use std::fs;
use std::path::Path;

use hoi_core::data::{BBox, ClipFixture, DetectionFixture, EmbeddingTable};
use hoi_core::Tensor;
use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 6] = b"ISAF1\0";
pub const DEFAULT_DIM: usize = 512;

#[derive(Debug, thiserror::Error)]
pub enum IsafError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: not an ISAF v1 file")]
    BadMagic,
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("trailing data: {0} bytes after the last tensor")]
    TrailingData(u64),
    #[error("dimension mismatch in `{tensor}`: expected {expected}, found {found}")]
    DimMismatch { tensor: String, expected: usize, found: usize },
    #[error("non-finite value in `{tensor}` at element {index}")]
    NonFinite { tensor: String, index: usize },
    #[error("bad header: {0}")]
    Header(String),
    #[error("expected a `{expected}` file, found `{found}`")]
    WrongKind { expected: Kind, found: Kind },
}

pub type Result<T, E = IsafError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Detection,
    Clip,
    Embedding,
    Checkpoint,
}

impl std::fmt::Display for Kind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Kind::Detection => "detection",
            Kind::Clip => "clip",
            Kind::Embedding => "embedding",
            Kind::Checkpoint => "checkpoint",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: Kind,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompts: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<usize>>,
    /// `(width, height)` in pixels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_size: Option<(f64, f64)>,
    /// `(H, W)` of the backbone token grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl Header {
    pub fn new(kind: Kind) -> Self {
        Self {
            kind,
            tensors: Vec::new(),
            name: None,
            prompts: None,
            labels: None,
            image_size: None,
            grid: None,
            config: None,
        }
    }
}

/// A decoded container: header plus one payload per header tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct IsafFile {
    pub header: Header,
    pub payloads: Vec<Vec<f32>>,
}

impl IsafFile {
    pub fn new(kind: Kind) -> Self {
        Self {
            header: Header::new(kind),
            payloads: Vec::new(),
        }
    }

    /// Appends a tensor, rounding to f32.
    pub fn push(&mut self, name: &str, shape: &[usize], data: &[f64]) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.header.tensors.push(TensorEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
        });
        self.payloads.push(data.iter().map(|&x| x as f32).collect());
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header).map_err(|e| IsafError::Header(e.to_string()))?;
        let len = u32::try_from(header.len()).map_err(|_| IsafError::Header("header too large".into()))?;
        let payload: usize = self.payloads.iter().map(Vec::len).sum();
        let mut out = Vec::with_capacity(MAGIC.len() + 4 + header.len() + 4 * payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&header);
        for p in &self.payloads {
            for x in p {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(IsafError::BadMagic);
        }
        let rest = &bytes[MAGIC.len()..];
        if rest.len() < 4 {
            return Err(IsafError::Truncated {
                expected: 4,
                found: rest.len() as u64,
            });
        }
        let len = u32::from_le_bytes(rest[..4].try_into().expect("4 bytes")) as usize;
        let rest = &rest[4..];
        if rest.len() < len {
            return Err(IsafError::Truncated {
                expected: len as u64,
                found: rest.len() as u64,
            });
        }
        let header: Header = serde_json::from_slice(&rest[..len]).map_err(|e| IsafError::Header(e.to_string()))?;
        let rest = &rest[len..];
        let expected: u64 = header.tensors.iter().map(|t| 4 * t.numel() as u64).sum();
        let found = rest.len() as u64;
        if found < expected {
            return Err(IsafError::Truncated { expected, found });
        }
        if found > expected {
            return Err(IsafError::TrailingData(found - expected));
        }
        let mut payloads = Vec::with_capacity(header.tensors.len());
        let mut offset = 0;
        for t in &header.tensors {
            let n = t.numel();
            let p: Vec<f32> = rest[offset..offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if let Some(index) = p.iter().position(|x| !x.is_finite()) {
                return Err(IsafError::NonFinite {
                    tensor: t.name.clone(),
                    index,
                });
            }
            offset += 4 * n;
            payloads.push(p);
        }
        Ok(Self { header, payloads })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn expect_kind(&self, kind: Kind) -> Result<()> {
        if self.header.kind != kind {
            return Err(IsafError::WrongKind {
                expected: kind,
                found: self.header.kind,
            });
        }
        Ok(())
    }

    /// Payload and shape of the tensor called `name`, widened to f64.
    pub fn tensor(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let k = self
            .header
            .tensors
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| IsafError::Header(format!("missing tensor `{name}`")))?;
        let data = self.payloads[k].iter().map(|&x| f64::from(x)).collect();
        Ok((self.header.tensors[k].shape.clone(), data))
    }

    /// A rank-2 tensor whose second extent must equal `dim`.
    fn matrix(&self, name: &str, dim: usize) -> Result<(usize, Vec<f64>)> {
        let (shape, data) = self.tensor(name)?;
        if shape.len() != 2 {
            return Err(IsafError::Header(format!("`{name}` must be rank 2, has shape {shape:?}")));
        }
        if shape[1] != dim {
            return Err(IsafError::DimMismatch {
                tensor: name.to_string(),
                expected: dim,
                found: shape[1],
            });
        }
        Ok((shape[0], data))
    }
}

fn tensor_of(rows: usize, cols: usize, data: Vec<f64>, name: &str) -> Result<Tensor> {
    Tensor::matrix(rows, cols, data).map_err(|e| IsafError::Header(format!("`{name}`: {e}")))
}

fn required<T>(v: Option<T>, what: &str) -> Result<T> {
    v.ok_or_else(|| IsafError::Header(format!("missing `{what}`")))
}

pub fn detection_to_isaf(det: &DetectionFixture) -> IsafFile {
    let n = det.len();
    let mut f = IsafFile::new(Kind::Detection);
    f.header.labels = Some(det.labels.clone());
    f.header.image_size = Some(det.image_size);
    f.header.grid = Some(det.grid);
    let boxes: Vec<f64> = det.boxes.iter().flat_map(|b| b.to_array()).collect();
    f.push("boxes", &[n, 4], &boxes);
    f.push("scores", &[n], &det.scores);
    f.push("appearance", &[n, det.dim], &det.appearance);
    f.push("feature_map", det.feature_map.shape(), det.feature_map.data());
    f
}

pub fn detection_from_isaf(f: &IsafFile, dim: usize) -> Result<DetectionFixture> {
    f.expect_kind(Kind::Detection)?;
    let labels = required(f.header.labels.clone(), "labels")?;
    let image_size = required(f.header.image_size, "image_size")?;
    let grid = required(f.header.grid, "grid")?;
    let n = labels.len();
    let (bshape, boxes) = f.tensor("boxes")?;
    let (sshape, scores) = f.tensor("scores")?;
    if bshape != [n, 4] || sshape != [n] {
        return Err(IsafError::Header(format!(
            "{n} labels but boxes {bshape:?} and scores {sshape:?}"
        )));
    }
    let (rows, appearance) = f.matrix("appearance", dim)?;
    if rows != n {
        return Err(IsafError::Header(format!("{n} labels but {rows} appearance rows")));
    }
    let (tokens, fm) = f.matrix("feature_map", dim)?;
    if tokens != grid.0 * grid.1 {
        return Err(IsafError::Header(format!("grid {grid:?} but {tokens} feature tokens")));
    }
    Ok(DetectionFixture {
        image_size,
        boxes: boxes.chunks_exact(4).map(|c| BBox::new(c[0], c[1], c[2], c[3])).collect(),
        labels,
        scores,
        appearance,
        feature_map: tensor_of(tokens, dim, fm, "feature_map")?,
        grid,
        dim,
    })
}

pub fn clip_to_isaf(clip: &ClipFixture) -> IsafFile {
    let mut f = IsafFile::new(Kind::Clip);
    f.push("global", &[1, clip.global.len()], &clip.global);
    f.push("patches", clip.patches.shape(), clip.patches.data());
    f
}

pub fn clip_from_isaf(f: &IsafFile, dim: usize) -> Result<ClipFixture> {
    f.expect_kind(Kind::Clip)?;
    let (g, global) = f.matrix("global", dim)?;
    if g != 1 {
        return Err(IsafError::Header(format!("global token has {g} rows")));
    }
    let (p, patches) = f.matrix("patches", dim)?;
    Ok(ClipFixture {
        global,
        patches: tensor_of(p, dim, patches, "patches")?,
    })
}

pub fn embedding_to_isaf(table: &EmbeddingTable) -> IsafFile {
    let mut f = IsafFile::new(Kind::Embedding);
    f.header.name = Some(table.name.clone());
    f.header.prompts = Some(table.prompts.clone());
    f.push("matrix", table.matrix.shape(), table.matrix.data());
    f
}

pub fn embedding_from_isaf(f: &IsafFile, dim: usize) -> Result<EmbeddingTable> {
    f.expect_kind(Kind::Embedding)?;
    let prompts = required(f.header.prompts.clone(), "prompts")?;
    let (rows, data) = f.matrix("matrix", dim)?;
    if rows != prompts.len() {
        return Err(IsafError::Header(format!("{} prompts but {rows} rows", prompts.len())));
    }
    Ok(EmbeddingTable {
        name: f.header.name.clone().unwrap_or_default(),
        prompts,
        matrix: tensor_of(rows, dim, data, "matrix")?,
    })
}

pub fn load_detection(path: &Path, dim: usize) -> Result<DetectionFixture> {
    detection_from_isaf(&IsafFile::read(path)?, dim)
}

pub fn load_clip(path: &Path, dim: usize) -> Result<ClipFixture> {
    clip_from_isaf(&IsafFile::read(path)?, dim)
}

pub fn load_embedding(path: &Path, dim: usize) -> Result<EmbeddingTable> {
    embedding_from_isaf(&IsafFile::read(path)?, dim)
}
