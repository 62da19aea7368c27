//! Named trainable weights, their gradient accumulators, and checkpoint I/O.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::error::{HglError, Result};
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Insertion-ordered parameter table. Iteration order is registration order,
/// which keeps optimizer updates and checkpoints deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

/// Gradients produced by one backward pass, keyed by parameter.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    pub(crate) by_param: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(HglError::DuplicateParameter(name));
        }
        let id = self.params.len();
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| HglError::MissingParameter(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(HglError::dim("set_parameter", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds `scale * grads` into the accumulators. Parameters absent from
    /// `grads` were not on the tape and keep their accumulator unchanged.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (id, g) in grads.iter() {
            self.params[id.0].grad.add_scaled_assign(g, scale);
        }
    }

    /// Sets every parameter to zero, including biases.
    pub fn zero_all(&mut self) {
        for p in &mut self.params {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn save(&self, path: &Path, meta: &[(String, String)]) -> Result<()> {
        let bytes = self.to_checkpoint_bytes(meta)?;
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| HglError::io(parent, e))?;
            }
        }
        let mut f = fs::File::create(path).map_err(|e| HglError::io(path, e))?;
        f.write_all(&bytes).map_err(|e| HglError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(ParameterStore, Vec<(String, String)>)> {
        let bytes = fs::read(path).map_err(|e| HglError::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }

    /// Serializes into the checkpoint container: a text header with one
    /// `param <name> <shape> <offset>` line per parameter, then the values as
    /// little-endian `f64`.
    pub fn to_checkpoint_bytes(&self, meta: &[(String, String)]) -> Result<Vec<u8>> {
        let mut header = String::from("HGL-CHECKPOINT 1\n");
        for (k, v) in meta {
            if k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(HglError::Checkpoint(format!("unencodable meta entry `{k}`")));
            }
            header.push_str(&format!("meta {k} {v}\n"));
        }
        let mut offset = 0usize;
        for p in &self.params {
            if p.name.contains(char::is_whitespace) {
                return Err(HglError::Checkpoint(format!(
                    "parameter name `{}` contains whitespace",
                    p.name
                )));
            }
            let shape: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("param {} {} {}\n", p.name, shape.join("x"), offset));
            offset += p.value.len() * 8;
        }
        header.push_str(&format!("data {offset}\n"));
        let mut out = header.into_bytes();
        out.reserve(offset);
        for p in &self.params {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<(ParameterStore, Vec<(String, String)>)> {
        let bad = |m: String| HglError::Checkpoint(m);
        let mut pos = 0usize;
        let next_line = |pos: &mut usize| -> Result<String> {
            let rest = &bytes[*pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header".into()))?;
            let line = std::str::from_utf8(&rest[..end])
                .map_err(|_| bad("header is not utf-8".into()))?
                .to_string();
            *pos += end + 1;
            Ok(line)
        };
        if next_line(&mut pos)? != "HGL-CHECKPOINT 1" {
            return Err(bad("missing magic line".into()));
        }
        let mut meta = Vec::new();
        let mut entries: Vec<(String, Vec<usize>, usize)> = Vec::new();
        let total;
        loop {
            let line = next_line(&mut pos)?;
            let mut parts = line.splitn(2, ' ');
            let kind = parts.next().unwrap_or("");
            let rest = parts.next().unwrap_or("");
            match kind {
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    meta.push((k.to_string(), v.to_string()));
                }
                "param" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    if f.len() != 3 {
                        return Err(bad(format!("malformed param line `{line}`")));
                    }
                    let shape = f[1]
                        .split('x')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| bad(format!("bad shape in `{line}`")))?;
                    let off = f[2]
                        .parse::<usize>()
                        .map_err(|_| bad(format!("bad offset in `{line}`")))?;
                    entries.push((f[0].to_string(), shape, off));
                }
                "data" => {
                    total = rest
                        .parse::<usize>()
                        .map_err(|_| bad(format!("bad data length `{rest}`")))?;
                    break;
                }
                _ => return Err(bad(format!("unexpected header line `{line}`"))),
            }
        }
        let body = &bytes[pos..];
        if body.len() != total {
            return Err(bad(format!(
                "expected {total} data bytes, found {}",
                body.len()
            )));
        }
        let mut store = ParameterStore::new();
        for (name, shape, off) in entries {
            let n: usize = shape.iter().product();
            let end = off + n * 8;
            if end > body.len() {
                return Err(bad(format!("parameter `{name}` overruns the data block")));
            }
            let data = body[off..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            store.add(name, Tensor::new(shape, data)?)?;
        }
        Ok((store, meta))
    }
}

/// Glorot-uniform initialization for a `fan_in × fan_out` weight.
pub fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, &[fan_in, fan_out], limit)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], limit: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..=limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}
