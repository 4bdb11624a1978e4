//! Named parameter collections, their initialization and on-disk format.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use crate::tape::{Tape, Var};
use crate::{Float, Tensor};

const META_KEY: &str = "meta";

#[derive(Debug, thiserror::Error)]
pub enum ParamError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed parameter file: {0}")]
    Format(String),
    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter {0} missing from file")]
    Missing(String),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    /// Uniform on `±sqrt(6 / fan_in)`.
    HeUniform { fan_in: usize },
    Constant(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Ordered list of parameter declarations for one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamLayout {
    specs: Vec<ParamSpec>,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Declare a parameter and return its index.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> usize {
        let name = name.into();
        assert!(
            self.specs.iter().all(|s| s.name != name),
            "duplicate parameter name {name}"
        );
        self.specs.push(ParamSpec {
            name,
            shape: shape.to_vec(),
            init,
        });
        self.specs.len() - 1
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn init<F: Float, R: Rng>(&self, rng: &mut R) -> ParamSet<F> {
        let entries = self
            .specs
            .iter()
            .map(|s| {
                let len: usize = s.shape.iter().product();
                let data = match s.init {
                    Init::HeUniform { fan_in } => {
                        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                        (0..len)
                            .map(|_| F::from_f64_lossy(rng.gen_range(-bound..bound)))
                            .collect()
                    }
                    Init::Constant(c) => vec![F::from_f64_lossy(c); len],
                };
                (s.name.clone(), Tensor::new(s.shape.clone(), data))
            })
            .collect();
        ParamSet { entries }
    }

    /// Verify that `params` has exactly this layout's names and shapes.
    pub fn check<F: Float>(&self, params: &ParamSet<F>) -> Result<(), ParamError> {
        for (i, spec) in self.specs.iter().enumerate() {
            let Some((name, t)) = params.entries.get(i) else {
                return Err(ParamError::Missing(spec.name.clone()));
            };
            if name != &spec.name {
                return Err(ParamError::Missing(spec.name.clone()));
            }
            if t.shape() != spec.shape.as_slice() {
                return Err(ParamError::Shape {
                    name: name.clone(),
                    expected: spec.shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        if params.entries.len() != self.specs.len() {
            return Err(ParamError::Format(format!(
                "expected {} parameters, found {}",
                self.specs.len(),
                params.entries.len()
            )));
        }
        Ok(())
    }
}

/// Concrete parameter values in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<F> {
    entries: Vec<(String, Tensor<F>)>,
}

impl<F: Float> ParamSet<F> {
    pub fn from_entries(entries: Vec<(String, Tensor<F>)>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tensor(&self, i: usize) -> &Tensor<F> {
        &self.entries[i].1
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<F> {
        &mut self.entries[i].1
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Record every parameter on `tape`, trainable or frozen.
    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, t)| tape.leaf(t.clone(), trainable))
            .collect()
    }

    pub fn cast<G: Float>(&self) -> ParamSet<G> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }

    /// Prefix every name, e.g. to merge several sets into one file.
    pub fn prefixed(&self, prefix: &str) -> Vec<(String, Tensor<F>)> {
        self.entries
            .iter()
            .map(|(n, t)| (format!("{prefix}{n}"), t.clone()))
            .collect()
    }
}

fn dtype_of<F: Float>() -> Dtype {
    match F::DTYPE {
        "f64" => Dtype::F64,
        _ => Dtype::F32,
    }
}

fn to_bytes<F: Float>(t: &Tensor<F>) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.len() * std::mem::size_of::<F>());
    for &v in t.data() {
        match F::DTYPE {
            "f64" => out.extend_from_slice(&v.to_f64_lossy().to_le_bytes()),
            _ => out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes()),
        }
    }
    out
}

/// Serialize named tensors plus string metadata into a safetensors buffer.
///
/// Tensor order in the file is canonical (sorted by the format); layout order
/// is restored from the metadata on load.
pub fn serialize<F: Float>(
    tensors: &[(String, Tensor<F>)],
    meta: &BTreeMap<String, String>,
) -> Result<Vec<u8>, ParamError> {
    let bytes: Vec<Vec<u8>> = tensors.iter().map(|(_, t)| to_bytes(t)).collect();
    let views = tensors
        .iter()
        .zip(&bytes)
        .map(|((n, t), b)| {
            TensorView::new(dtype_of::<F>(), t.shape().to_vec(), b)
                .map(|v| (n.clone(), v))
                .map_err(|e| ParamError::Format(e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut meta = meta.clone();
    let order: Vec<&str> = tensors.iter().map(|(n, _)| n.as_str()).collect();
    meta.insert("__order__".into(), order.join(","));
    // A single entry keeps the header byte-stable (the format stores a hash map).
    let mut info = HashMap::new();
    let encoded = serde_json::to_string(&meta).map_err(|e| ParamError::Format(e.to_string()))?;
    info.insert(META_KEY.to_string(), encoded);
    safetensors::serialize(views, &Some(info)).map_err(|e| ParamError::Format(e.to_string()))
}

/// Parse a buffer written by [`serialize`]: tensors in their original order
/// plus the user metadata.
#[allow(clippy::type_complexity)]
pub fn deserialize<F: Float>(
    buf: &[u8],
) -> Result<(Vec<(String, Tensor<F>)>, BTreeMap<String, String>), ParamError> {
    let (_, header) =
        SafeTensors::read_metadata(buf).map_err(|e| ParamError::Format(e.to_string()))?;
    let mut meta: BTreeMap<String, String> = match header.metadata().as_ref().and_then(|m| m.get(META_KEY)) {
        Some(s) => serde_json::from_str(s).map_err(|e| ParamError::Format(e.to_string()))?,
        None => BTreeMap::new(),
    };
    let st = SafeTensors::deserialize(buf).map_err(|e| ParamError::Format(e.to_string()))?;
    let order = meta.remove("__order__").unwrap_or_default();
    let names: Vec<String> = if order.is_empty() {
        let mut n: Vec<String> = st.names().into_iter().cloned().collect();
        n.sort();
        n
    } else {
        order.split(',').map(str::to_string).collect()
    };
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let view = st
            .tensor(&name)
            .map_err(|_| ParamError::Missing(name.clone()))?;
        let raw = view.data();
        let data: Vec<F> = match view.dtype() {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| F::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect(),
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| F::from_f64_lossy(f64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
            other => {
                return Err(ParamError::Format(format!(
                    "unsupported dtype {other:?} for {name}"
                )))
            }
        };
        out.push((name, Tensor::new(view.shape().to_vec(), data)));
    }
    Ok((out, meta))
}

pub fn save_file<F: Float>(
    path: &Path,
    tensors: &[(String, Tensor<F>)],
    meta: &BTreeMap<String, String>,
) -> Result<(), ParamError> {
    let buf = serialize(tensors, meta)?;
    std::fs::write(path, buf).map_err(|source| ParamError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[allow(clippy::type_complexity)]
pub fn load_file<F: Float>(
    path: &Path,
) -> Result<(Vec<(String, Tensor<F>)>, BTreeMap<String, String>), ParamError> {
    let buf = std::fs::read(path).map_err(|source| ParamError::Io {
        path: path.display().to_string(),
        source,
    })?;
    deserialize(&buf)
}

/// Split entries carrying `prefix` off a merged list, stripping the prefix.
pub fn take_prefixed<F: Float>(entries: &[(String, Tensor<F>)], prefix: &str) -> ParamSet<F> {
    ParamSet::from_entries(
        entries
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect(),
    )
}
