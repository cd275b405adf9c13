//! Named trainable tensors and their per-pass graph bindings.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{AtdError, Result};
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::{Fill, Tensor};
use crate::tensor_file::{read_tensor_file, write_tensor_file};

/// Ordered collection of named parameters. Order is insertion order and is
/// what persistence and the optimizer iterate over.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(AtdError::contract("ParamStore::insert", format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor.with_requires_grad(true)));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Registers every parameter as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let vars = self.entries.iter().map(|(_, t)| g.param(t.clone())).collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }

    /// Rounds every value to the nearest `f32`, matching what the on-disk
    /// tensor format can hold.
    pub fn quantize_f32(&mut self) {
        for (_, t) in &mut self.entries {
            for v in t.data_mut() {
                *v = f64::from(*v as f32);
            }
        }
    }

    /// FNV-1a over names, shapes and value bits; used to prove a pass left the
    /// parameters untouched.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, t) in &self.entries {
            eat(name.as_bytes());
            for &d in t.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Graph handles for a [`ParamStore`], valid for one graph.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| AtdError::contract("Bound::get", format!("no parameter named {name}")))
    }

    /// Handles in store order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Points `name` at a different node, e.g. a perturbed copy.
    pub fn set(&mut self, name: &str, var: Var) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| AtdError::contract("Bound::set", format!("no parameter named {name}")))?;
        self.vars[i] = var;
        Ok(())
    }
}

/// Weights drawn from `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn init_weight(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Result<Tensor> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::create(
        shape,
        Fill::Uniform {
            rng,
            lo: -bound,
            hi: bound,
        },
    )
}

/// File name of the parameter index inside a parameter directory.
pub const PARAM_INDEX: &str = "index.txt";

/// Writes one ATDT file per parameter into `dir` plus an index of
/// `name=file` lines in store order. Returns the index path.
pub fn save_params(dir: impl AsRef<Path>, store: &ParamStore) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| AtdError::io(dir, e))?;
    let mut index = String::new();
    for (name, t) in store.iter() {
        let file = format!("{name}.atdt");
        write_tensor_file(dir.join(&file), t)?;
        writeln!(index, "{name}={file}").unwrap();
    }
    let path = dir.join(PARAM_INDEX);
    fs::write(&path, index).map_err(|e| AtdError::io(&path, e))?;
    Ok(path)
}

/// Reads a parameter set back from its index. File names resolve against
/// the index's directory.
pub fn load_params(index_path: impl AsRef<Path>) -> Result<ParamStore> {
    let index_path = index_path.as_ref();
    let text = fs::read_to_string(index_path).map_err(|e| AtdError::io(index_path, e))?;
    let base = index_path.parent().unwrap_or(Path::new("."));
    let mut store = ParamStore::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (name, file) = line.split_once('=').ok_or_else(|| AtdError::Parse {
            path: index_path.to_path_buf(),
            line: i + 1,
            column: None,
            msg: "expected name=file".into(),
        })?;
        if file.contains('/') || file.contains('\\') || file == ".." {
            return Err(AtdError::Parse {
                path: index_path.to_path_buf(),
                line: i + 1,
                column: None,
                msg: format!("parameter file {file:?} must be a plain file name"),
            });
        }
        store.insert(name, read_tensor_file(base.join(file))?)?;
    }
    Ok(store)
}
