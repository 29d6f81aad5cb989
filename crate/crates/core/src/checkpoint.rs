//! Binary checkpoint container with a plain-text sidecar manifest.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "PADCKPT\0"
//! version    u32
//! dtype      u8       4 = f32, 8 = f64
//! sections   u32
//! per section:
//!   tag      str      (u32 length + UTF-8)
//!   config   str      TOML
//!   tensors  u32
//!   per tensor: name str, rank u32, dims u32 * rank
//! payload: every tensor's values in manifest order
//! ```
//!
//! The sidecar `<file>.manifest` lists the same sections and tensor shapes
//! for humans and external tools.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::{Classifier, Standardizer, SvmModel};
use crate::error::{Error, Result};
use crate::layers::{BatchNormLayer, Parameterized};
use crate::networks::{ExtractorConfig, ExtractorNet, GeneratorConfig, GeneratorNet, Pipeline};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PADCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

pub const GENERATOR_TAG: &str = "generator";
pub const EXTRACTOR_TAG: &str = "extractor";
pub const CLASSIFIER_TAG: &str = "classifier";

/// Storage precision of tensor values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    fn code(self) -> u8 {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            4 => Ok(Precision::F32),
            8 => Ok(Precision::F64),
            other => Err(Error::Checkpoint {
                field: "dtype".into(),
                reason: format!("unknown dtype code {other}"),
            }),
        }
    }
}

/// One named group of tensors with its architecture description.
#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub tag: String,
    pub config: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Section {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint {
                field: format!("{}.{name}", self.tag),
                reason: "tensor missing".into(),
            })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointFile {
    pub precision: Precision,
    pub sections: Vec<Section>,
}

impl CheckpointFile {
    pub fn section(&self, tag: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.tag == tag)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.precision.code());
        put_u32(&mut out, self.sections.len());
        for s in &self.sections {
            put_str(&mut out, &s.tag);
            put_str(&mut out, &s.config);
            put_u32(&mut out, s.tensors.len());
            for (name, t) in &s.tensors {
                put_str(&mut out, name);
                put_u32(&mut out, t.rank());
                for &d in t.shape() {
                    put_u32(&mut out, d);
                }
            }
        }
        for s in &self.sections {
            for (_, t) in &s.tensors {
                for &v in t.data() {
                    match self.precision {
                        Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                        Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Checkpoint {
                field: "magic".into(),
                reason: "not a checkpoint file".into(),
            });
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint {
                field: "version".into(),
                reason: format!("format version {version}, expected {FORMAT_VERSION}"),
            });
        }
        let precision = Precision::from_code(r.take(1, "dtype")?[0])?;
        let count = r.u32("sections")?;
        let mut manifest = Vec::with_capacity(count as usize);
        for i in 0..count {
            let tag = r.string(&format!("section {i} tag"))?;
            let config = r.string(&format!("{tag}.config"))?;
            let n = r.u32(&format!("{tag}.tensor_count"))?;
            let mut shapes = Vec::new();
            for k in 0..n {
                let name = r.string(&format!("{tag}.tensor {k} name"))?;
                let field = format!("{tag}.{name}");
                let rank = r.u32(&format!("{field}.rank"))?;
                let dims = (0..rank)
                    .map(|_| r.u32(&format!("{field}.shape")).map(|d| d as usize))
                    .collect::<Result<Vec<_>>>()?;
                if dims.contains(&0) || rank == 0 {
                    return Err(Error::Checkpoint {
                        field: format!("{field}.shape"),
                        reason: format!("invalid shape {dims:?}"),
                    });
                }
                shapes.push((name, dims));
            }
            manifest.push((tag, config, shapes));
        }
        let width = precision.code() as usize;
        let mut sections = Vec::with_capacity(manifest.len());
        for (tag, config, shapes) in manifest {
            let mut tensors = Vec::with_capacity(shapes.len());
            for (name, dims) in shapes {
                let field = format!("{tag}.{name}");
                let len: usize = dims.iter().product();
                let raw = r.take(len * width, &field)?;
                let data = raw
                    .chunks_exact(width)
                    .map(|c| match precision {
                        Precision::F32 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
                        Precision::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
                    })
                    .collect();
                tensors.push((name, Tensor::new(dims, data)?));
            }
            sections.push(Section { tag, config, tensors });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint {
                field: "payload".into(),
                reason: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Self { precision, sections })
    }

    pub fn manifest_text(&self) -> String {
        let mut out = format!(
            "format {FORMAT_VERSION}\ndtype {}\n",
            match self.precision {
                Precision::F32 => "f32",
                Precision::F64 => "f64",
            }
        );
        for s in &self.sections {
            out.push_str(&format!("\n[section {}]\n", s.tag));
            for line in s.config.lines() {
                out.push_str(&format!("config {line}\n"));
            }
            for (name, t) in &s.tensors {
                let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
                out.push_str(&format!("tensor {name} {}\n", dims.join("x")));
            }
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        std::fs::write(manifest_path(path), self.manifest_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint {
                field: field.to_string(),
                reason: format!(
                    "truncated: need {n} bytes at offset {}, {} left",
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self, field: &str) -> Result<String> {
        let n = self.u32(field)? as usize;
        String::from_utf8(self.take(n, field)?.to_vec()).map_err(|_| Error::Checkpoint {
            field: field.to_string(),
            reason: "invalid UTF-8".into(),
        })
    }
}

fn generator_bn_names(net: &GeneratorNet) -> Vec<String> {
    let mut names = Vec::new();
    for i in 0..net.blocks.len() {
        names.push(format!("blocks.{i}.bn1"));
        names.push(format!("blocks.{i}.bn2"));
    }
    names.push("post_bn".into());
    names
}

fn extractor_bn_names(net: &ExtractorNet) -> Vec<String> {
    net.stages
        .iter()
        .enumerate()
        .filter(|(_, s)| s.bn.is_some())
        .map(|(i, _)| format!("stages.{i}.bn"))
        .collect()
}

fn bn_state(layers: Vec<&BatchNormLayer>, names: &[String]) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for (bn, name) in layers.into_iter().zip(names) {
        out.push((format!("{name}.running_mean"), bn.running_mean.clone()));
        out.push((format!("{name}.running_var"), bn.running_var.clone()));
    }
    out
}

fn param_state(net: &mut impl Parameterized) -> Vec<(String, Tensor)> {
    net.params_mut()
        .into_iter()
        .map(|(n, p)| (n, p.value.clone()))
        .collect()
}

/// Parameters then BN running statistics, in declaration order.
pub fn generator_state(net: &mut GeneratorNet) -> Vec<(String, Tensor)> {
    let mut out = param_state(net);
    out.extend(bn_state(net.bn_layers(), &generator_bn_names(net)));
    out
}

pub fn extractor_state(net: &mut ExtractorNet) -> Vec<(String, Tensor)> {
    let mut out = param_state(net);
    out.extend(bn_state(net.bn_layers(), &extractor_bn_names(net)));
    out
}

/// Checks that `section` holds exactly the tensors `expected` names, with
/// matching shapes.
fn check_manifest(section: &Section, expected: &[(String, Tensor)]) -> Result<()> {
    let tag = &section.tag;
    if section.tensors.len() != expected.len() {
        return Err(Error::ArchitectureMismatch(format!(
            "{tag}: checkpoint holds {} tensors, network has {}",
            section.tensors.len(),
            expected.len()
        )));
    }
    for ((name, t), (want_name, want)) in section.tensors.iter().zip(expected) {
        if name != want_name || t.shape() != want.shape() {
            return Err(Error::ArchitectureMismatch(format!(
                "{tag}: checkpoint has {name} {:?} where the network has {want_name} {:?}",
                t.shape(),
                want.shape()
            )));
        }
    }
    Ok(())
}

fn restore_params(net: &mut impl Parameterized, section: &Section) -> Result<()> {
    for (name, p) in net.params_mut() {
        p.value = section.tensor(&name)?.clone();
    }
    Ok(())
}

fn restore_bn(layers: Vec<&mut BatchNormLayer>, names: &[String], section: &Section) -> Result<()> {
    for (bn, name) in layers.into_iter().zip(names) {
        bn.running_mean = section.tensor(&format!("{name}.running_mean"))?.clone();
        bn.running_var = section.tensor(&format!("{name}.running_var"))?.clone();
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ExtractorSpec {
    image_height: usize,
    image_width: usize,
    trainable: bool,
    #[serde(flatten)]
    config: ExtractorConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ClassifierSpec {
    c_param: f64,
    bias_feature: f64,
    epochs: usize,
    converged: bool,
}

fn to_toml<T: Serialize>(value: &T) -> String {
    toml::to_string(value).expect("config types serialize to TOML")
}

fn from_toml<T: for<'de> Deserialize<'de>>(tag: &str, text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Checkpoint {
        field: format!("{tag}.config"),
        reason: e.to_string(),
    })
}

/// Networks and optional classifier as stored in one checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub pipeline: Pipeline,
    pub classifier: Option<Classifier>,
}

pub fn to_checkpoint_file(pipeline: &mut Pipeline, classifier: Option<&Classifier>, precision: Precision) -> CheckpointFile {
    let extractor_spec = ExtractorSpec {
        image_height: pipeline.extractor.image_size.0,
        image_width: pipeline.extractor.image_size.1,
        trainable: pipeline.extractor.trainable,
        config: pipeline.extractor.config.clone(),
    };
    let mut sections = vec![
        Section {
            tag: GENERATOR_TAG.into(),
            config: to_toml(&pipeline.generator.config),
            tensors: generator_state(&mut pipeline.generator),
        },
        Section {
            tag: EXTRACTOR_TAG.into(),
            config: to_toml(&extractor_spec),
            tensors: extractor_state(&mut pipeline.extractor),
        },
    ];
    if let Some(c) = classifier {
        let dim = c.svm.dim();
        sections.push(Section {
            tag: CLASSIFIER_TAG.into(),
            config: to_toml(&ClassifierSpec {
                c_param: c.svm.c_param,
                bias_feature: c.svm.bias_feature,
                epochs: c.svm.epochs,
                converged: c.svm.converged,
            }),
            tensors: vec![
                ("weights".into(), c.svm.weights.clone()),
                ("bias".into(), Tensor::scalar(c.svm.bias)),
                ("standardizer.mean".into(), Tensor::new(vec![dim], c.standardizer.mean.clone()).expect("dim")),
                ("standardizer.std".into(), Tensor::new(vec![dim], c.standardizer.std.clone()).expect("dim")),
            ],
        });
    }
    CheckpointFile { precision, sections }
}

pub fn save_checkpoint(path: &Path, pipeline: &mut Pipeline, classifier: Option<&Classifier>) -> Result<()> {
    to_checkpoint_file(pipeline, classifier, Precision::F64).write(path)
}

fn required<'a>(file: &'a CheckpointFile, tag: &str) -> Result<&'a Section> {
    file.section(tag).ok_or_else(|| Error::Checkpoint {
        field: tag.to_string(),
        reason: "section missing".into(),
    })
}

/// Copies stored tensors into existing networks of the same architecture.
pub fn restore_into(file: &CheckpointFile, pipeline: &mut Pipeline) -> Result<()> {
    let gen = required(file, GENERATOR_TAG)?;
    let ext = required(file, EXTRACTOR_TAG)?;
    check_manifest(gen, &generator_state(&mut pipeline.generator))?;
    check_manifest(ext, &extractor_state(&mut pipeline.extractor))?;
    restore_params(&mut pipeline.generator, gen)?;
    let names = generator_bn_names(&pipeline.generator);
    restore_bn(pipeline.generator.bn_layers_mut(), &names, gen)?;
    restore_params(&mut pipeline.extractor, ext)?;
    let names = extractor_bn_names(&pipeline.extractor);
    restore_bn(pipeline.extractor.bn_layers_mut(), &names, ext)?;
    pipeline.bump_version();
    pipeline.clear_caches();
    Ok(())
}

fn classifier_from(section: &Section) -> Result<Classifier> {
    let spec: ClassifierSpec = from_toml(&section.tag, &section.config)?;
    let weights = section.tensor("weights")?.clone();
    let dim = weights.len();
    let vector = |name: &str| -> Result<Vec<f64>> {
        let t = section.tensor(name)?;
        if t.len() != dim {
            return Err(Error::Checkpoint {
                field: format!("{}.{name}", section.tag),
                reason: format!("length {} does not match weight length {dim}", t.len()),
            });
        }
        Ok(t.data().to_vec())
    };
    Ok(Classifier {
        standardizer: Standardizer {
            mean: vector("standardizer.mean")?,
            std: vector("standardizer.std")?,
        },
        svm: SvmModel {
            bias: section.tensor("bias")?.data()[0],
            weights,
            c_param: spec.c_param,
            bias_feature: spec.bias_feature,
            epochs: spec.epochs,
            converged: spec.converged,
            objective_history: Vec::new(),
        },
    })
}

/// Rebuilds networks from the stored architecture, then loads their tensors.
pub fn from_checkpoint_file(file: &CheckpointFile) -> Result<Checkpoint> {
    let gen = required(file, GENERATOR_TAG)?;
    let ext = required(file, EXTRACTOR_TAG)?;
    let gen_config: GeneratorConfig = from_toml(GENERATOR_TAG, &gen.config)?;
    let spec: ExtractorSpec = from_toml(EXTRACTOR_TAG, &ext.config)?;
    let generator = GeneratorNet::new(gen_config, 0)?;
    let mut extractor = ExtractorNet::new(spec.config, (spec.image_height, spec.image_width), 0)?;
    extractor.trainable = spec.trainable;
    let mut pipeline = Pipeline::new(generator, extractor);
    restore_into(file, &mut pipeline)?;
    let classifier = file.section(CLASSIFIER_TAG).map(classifier_from).transpose()?;
    Ok(Checkpoint { pipeline, classifier })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    from_checkpoint_file(&CheckpointFile::read(path)?)
}
