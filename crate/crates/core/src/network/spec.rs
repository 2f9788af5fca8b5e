use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, TensorArchive};

#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub heads: usize,
    pub causal: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModuleKind {
    /// `y = x Wᵀ`, `W` is `out × in`.
    Linear(Matrix),
    RmsNorm(Vec<f64>),
    Relu2,
    ResidualBegin(String),
    ResidualEnd(String),
    Attention(Box<Attention>),
}

impl ModuleKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModuleKind::Linear(_) => "linear",
            ModuleKind::RmsNorm(_) => "rmsnorm",
            ModuleKind::Relu2 => "relu2",
            ModuleKind::ResidualBegin(_) => "residual_begin",
            ModuleKind::ResidualEnd(_) => "residual_end",
            ModuleKind::Attention(_) => "attention",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModuleSpec {
    pub kind: ModuleKind,
    pub quantize: bool,
}

impl ModuleSpec {
    pub fn new(kind: ModuleKind, quantize: bool) -> Self {
        Self { kind, quantize }
    }

    pub fn plain(kind: ModuleKind) -> Self {
        Self::new(kind, false)
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        match &self.kind {
            ModuleKind::Linear(w) => w.len(),
            ModuleKind::RmsNorm(g) => g.len(),
            ModuleKind::Attention(a) => a.wq.len() + a.wk.len() + a.wv.len() + a.wo.len(),
            _ => 0,
        }
    }
}

/// An ordered module list. `input_width` is the column count of the input
/// (equal to `width` unless the first module is an embedding projection).
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub modules: Vec<ModuleSpec>,
    pub width: usize,
    pub seq_len: usize,
    pub input_width: usize,
}

impl NetworkSpec {
    pub fn new(modules: Vec<ModuleSpec>, width: usize, seq_len: usize) -> Result<Self> {
        Self::with_input_width(modules, width, seq_len, width)
    }

    pub fn with_input_width(
        modules: Vec<ModuleSpec>,
        width: usize,
        seq_len: usize,
        input_width: usize,
    ) -> Result<Self> {
        let net = Self {
            modules,
            width,
            seq_len,
            input_width,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn len(&self) -> usize {
        self.modules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modules.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.modules.iter().map(ModuleSpec::param_count).sum()
    }

    /// Output column count, assuming the spec is valid.
    pub fn output_width(&self) -> usize {
        self.widths().last().copied().unwrap_or(self.input_width)
    }

    /// Activation width after each module.
    fn widths(&self) -> Vec<usize> {
        let mut d = self.input_width;
        self.modules
            .iter()
            .map(|m| {
                if let ModuleKind::Linear(w) = &m.kind {
                    d = w.rows();
                }
                d
            })
            .collect()
    }

    /// Checks that dimensions compose, residual tags pair and nest, and only
    /// linear and attention modules request quantization.
    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.input_width == 0 {
            return Err(Error::Shape("seq_len and input_width must be positive".into()));
        }
        let mut d = self.input_width;
        let mut stack: Vec<(&str, usize)> = Vec::new();
        let mut used_tags = HashSet::new();
        for (i, m) in self.modules.iter().enumerate() {
            let at = |msg: String| Error::Shape(format!("module {i} ({}): {msg}", m.kind.name()));
            match &m.kind {
                ModuleKind::Linear(w) => {
                    if w.cols() != d {
                        return Err(at(format!("weight has {} inputs, activation width is {d}", w.cols())));
                    }
                    if w.rows() == 0 {
                        return Err(at("weight has no outputs".into()));
                    }
                    w.ensure_finite("linear weight")?;
                    d = w.rows();
                }
                ModuleKind::RmsNorm(g) => {
                    if g.len() != d {
                        return Err(at(format!("gamma has {} entries, width is {d}", g.len())));
                    }
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite("rmsnorm gamma".into()));
                    }
                }
                ModuleKind::Relu2 => {}
                ModuleKind::ResidualBegin(tag) => {
                    if !used_tags.insert(tag.as_str()) {
                        return Err(at(format!("residual tag '{tag}' reused")));
                    }
                    stack.push((tag, d));
                }
                ModuleKind::ResidualEnd(tag) => match stack.pop() {
                    Some((open, width)) if open == tag => {
                        if width != d {
                            return Err(at(format!("skip width {width} vs branch width {d}")));
                        }
                    }
                    Some((open, _)) => {
                        return Err(at(format!("closes '{tag}' but '{open}' is open")));
                    }
                    None => return Err(at(format!("closes '{tag}' with nothing open"))),
                },
                ModuleKind::Attention(a) => {
                    for (name, w) in [("wq", &a.wq), ("wk", &a.wk), ("wv", &a.wv), ("wo", &a.wo)] {
                        if w.shape() != (d, d) {
                            return Err(at(format!("{name} is {:?}, expected {d}x{d}", w.shape())));
                        }
                        w.ensure_finite(name)?;
                    }
                    if a.heads == 0 || d % a.heads != 0 {
                        return Err(at(format!("{} heads do not divide width {d}", a.heads)));
                    }
                }
            }
            if m.quantize && !matches!(m.kind, ModuleKind::Linear(_) | ModuleKind::Attention(_)) {
                return Err(Error::Config(format!(
                    "module {i} ({}) cannot be quantized",
                    m.kind.name()
                )));
            }
        }
        if let Some((tag, _)) = stack.pop() {
            return Err(Error::Shape(format!("residual '{tag}' never closed")));
        }
        Ok(())
    }

    pub fn ensure_input(&self, x: &Matrix) -> Result<()> {
        if x.shape() != (self.seq_len, self.input_width) {
            return Err(Error::Shape(format!(
                "input is {:?}, network expects {}x{}",
                x.shape(),
                self.seq_len,
                self.input_width
            )));
        }
        x.ensure_finite("network input")
    }

    pub fn to_manifest(&self) -> (NetworkManifest, TensorArchive) {
        let mut archive = TensorArchive::new();
        let mut entries = Vec::with_capacity(self.modules.len());
        for (i, m) in self.modules.iter().enumerate() {
            let key = |s: &str| format!("m{i}.{s}");
            let entry = match &m.kind {
                ModuleKind::Linear(w) => {
                    archive.insert(key("weight"), w.clone());
                    ModuleEntry::Linear {
                        weight: key("weight"),
                        quantize: m.quantize,
                    }
                }
                ModuleKind::RmsNorm(g) => {
                    archive.insert(key("gamma"), Matrix::from_vec(1, g.len(), g.clone()).expect("row"));
                    ModuleEntry::Rmsnorm { gamma: key("gamma") }
                }
                ModuleKind::Relu2 => ModuleEntry::Relu2,
                ModuleKind::ResidualBegin(t) => ModuleEntry::ResidualBegin { tag: t.clone() },
                ModuleKind::ResidualEnd(t) => ModuleEntry::ResidualEnd { tag: t.clone() },
                ModuleKind::Attention(a) => {
                    for (s, w) in [("wq", &a.wq), ("wk", &a.wk), ("wv", &a.wv), ("wo", &a.wo)] {
                        archive.insert(key(s), w.clone());
                    }
                    ModuleEntry::Attention {
                        wq: key("wq"),
                        wk: key("wk"),
                        wv: key("wv"),
                        wo: key("wo"),
                        heads: a.heads,
                        causal: a.causal,
                        quantize: m.quantize,
                    }
                }
            };
            entries.push(entry);
        }
        (
            NetworkManifest {
                width: self.width,
                seq_len: self.seq_len,
                input_width: Some(self.input_width),
                modules: entries,
            },
            archive,
        )
    }

    pub fn from_manifest(manifest: &NetworkManifest, archive: &TensorArchive) -> Result<Self> {
        let mut modules = Vec::with_capacity(manifest.modules.len());
        for e in &manifest.modules {
            let m = match e {
                ModuleEntry::Linear { weight, quantize } => {
                    ModuleSpec::new(ModuleKind::Linear(archive.require(weight)?.clone()), *quantize)
                }
                ModuleEntry::Rmsnorm { gamma } => {
                    let g = archive.require(gamma)?;
                    if g.rows() != 1 {
                        return Err(Error::Parse(format!("gamma '{gamma}' must be a single row")));
                    }
                    ModuleSpec::plain(ModuleKind::RmsNorm(g.data().to_vec()))
                }
                ModuleEntry::Relu2 => ModuleSpec::plain(ModuleKind::Relu2),
                ModuleEntry::ResidualBegin { tag } => {
                    ModuleSpec::plain(ModuleKind::ResidualBegin(tag.clone()))
                }
                ModuleEntry::ResidualEnd { tag } => ModuleSpec::plain(ModuleKind::ResidualEnd(tag.clone())),
                ModuleEntry::Attention {
                    wq,
                    wk,
                    wv,
                    wo,
                    heads,
                    causal,
                    quantize,
                } => ModuleSpec::new(
                    ModuleKind::Attention(Box::new(Attention {
                        wq: archive.require(wq)?.clone(),
                        wk: archive.require(wk)?.clone(),
                        wv: archive.require(wv)?.clone(),
                        wo: archive.require(wo)?.clone(),
                        heads: *heads,
                        causal: *causal,
                    })),
                    *quantize,
                ),
            };
            modules.push(m);
        }
        Self::with_input_width(
            modules,
            manifest.width,
            manifest.seq_len,
            manifest.input_width.unwrap_or(manifest.width),
        )
    }

    /// Writes `<path>` (manifest), `<path stem>.weights.json` (archive
    /// index) and its `.bin` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (manifest, archive) = self.to_manifest();
        archive.write(&weights_path_for(path))?;
        std::fs::write(path, serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }

    /// Loads a manifest and its archive. `weights` overrides the default
    /// archive location next to the manifest.
    pub fn load(path: &Path, weights: Option<&Path>) -> Result<Self> {
        let manifest = NetworkManifest::parse(&std::fs::read_to_string(path)?)?;
        let index = match weights {
            Some(w) => w.to_path_buf(),
            None => weights_path_for(path),
        };
        let archive = TensorArchive::read(&index)?;
        Self::from_manifest(&manifest, &archive)
    }
}

pub fn weights_path_for(manifest: &Path) -> std::path::PathBuf {
    let stem = manifest
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("model");
    manifest.with_file_name(format!("{stem}.weights.json"))
}

/// On-disk network description; tensors are referenced by archive name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkManifest {
    pub width: usize,
    pub seq_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_width: Option<usize>,
    pub modules: Vec<ModuleEntry>,
}

impl NetworkManifest {
    pub fn parse(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| Error::Parse(format!("network manifest: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModuleEntry {
    Linear {
        weight: String,
        #[serde(default)]
        quantize: bool,
    },
    Rmsnorm {
        gamma: String,
    },
    Relu2,
    ResidualBegin {
        tag: String,
    },
    ResidualEnd {
        tag: String,
    },
    Attention {
        wq: String,
        wk: String,
        wv: String,
        wo: String,
        heads: usize,
        #[serde(default)]
        causal: bool,
        #[serde(default)]
        quantize: bool,
    },
}
