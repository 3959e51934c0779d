//! Binary checkpoints.
//!
//! Layout: `b"TART"`, `u32` version, `u32` section count, then per section a
//! `u16` name length, the UTF-8 name, a `u8` rank, `rank` `u32` dims and the
//! little-endian `f64` payload. A trailing `u32` CRC32 covers every byte
//! before it. All integers are little-endian.

use std::path::Path;

use crate::alignment::{AlignmentModel, Direction};
use crate::autoencoder::{AutoencoderParams, ParamSet};
use crate::error::{Error, Result};
use crate::quantizer::MultiHeadCodebook;
use crate::tensor::Matrix;
use crate::tokenize::{Modality, SegmentMode};
use crate::training::{BundleConfig, TokenizerBundle};

pub const MAGIC: &[u8; 4] = b"TART";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f64>,
}

impl Section {
    pub fn new(name: impl Into<String>, dims: Vec<u32>, data: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            dims,
            data,
        }
    }

    pub fn matrix(name: impl Into<String>, m: &Matrix) -> Self {
        Self::new(name, vec![m.rows as u32, m.cols as u32], m.data.clone())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub sections: Vec<Section>,
}

impl Checkpoint {
    pub fn push(&mut self, section: Section) {
        self.sections.push(section);
    }

    pub fn get(&self, name: &str) -> Result<&Section> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing section {name}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            let name = s.name.as_bytes();
            let len = u16::try_from(name.len())
                .map_err(|_| Error::InvalidArgument(format!("section name {} too long", s.name)))?;
            let rank = u8::try_from(s.dims.len())
                .map_err(|_| Error::InvalidArgument(format!("section {} has too many dims", s.name)))?;
            let expected: u64 = s.dims.iter().map(|&d| d as u64).product();
            if expected != s.data.len() as u64 {
                return Err(Error::InvalidArgument(format!(
                    "section {} has {} values for dims {:?}",
                    s.name,
                    s.data.len(),
                    s.dims
                )));
            }
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(rank);
            for d in &s.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &s.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::CorruptCheckpoint("missing TART magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::VersionUnsupported(version));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
            return Err(Error::ChecksumMismatch);
        }
        let mut r = Reader { buf: body, pos: 8 };
        let count = r.u32()?;
        let mut sections = Vec::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::CorruptCheckpoint("section name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().map(|&d| d as usize).product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::CorruptCheckpoint("payload size".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            sections.push(Section { name, dims, data });
        }
        if r.pos != body.len() {
            return Err(Error::CorruptCheckpoint("trailing bytes after sections".into()));
        }
        Ok(Self { sections })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::CorruptCheckpoint("truncated section".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    super::write_atomic(path, &ckpt.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

fn matrix_from(section: &Section, rows: usize, cols: usize) -> Result<Matrix> {
    if section.dims != [rows as u32, cols as u32] {
        return Err(Error::CorruptCheckpoint(format!(
            "section {} has dims {:?}, expected [{rows}, {cols}]",
            section.name, section.dims
        )));
    }
    Matrix::from_vec(rows, cols, section.data.clone())
}

fn load_tensors<P: ParamSet>(params: &mut P, prefix: &str, ckpt: &Checkpoint) -> Result<()> {
    let names: Vec<(String, usize, usize)> = params
        .tensors()
        .into_iter()
        .map(|(n, m)| (n, m.rows, m.cols))
        .collect();
    for ((name, rows, cols), slot) in names.into_iter().zip(params.tensors_mut()) {
        *slot = matrix_from(ckpt.get(&format!("{prefix}{name}"))?, rows, cols)?;
    }
    Ok(())
}

fn push_tensors<P: ParamSet>(params: &P, prefix: &str, ckpt: &mut Checkpoint) {
    for (name, m) in params.tensors() {
        ckpt.push(Section::matrix(format!("{prefix}{name}"), m));
    }
}

fn config_values(c: &BundleConfig, frozen: bool) -> Vec<f64> {
    [
        c.image_height,
        c.image_width,
        c.channels,
        c.patch,
        c.series_len,
        c.segment,
        (c.mode == SegmentMode::Lenient) as usize,
        c.dim,
        c.heads,
        c.codes,
        c.depth,
        frozen as usize,
    ]
    .iter()
    .map(|&v| v as f64)
    .collect()
}

fn as_count(v: f64, what: &str) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64 {
        Ok(v as usize)
    } else {
        Err(Error::CorruptCheckpoint(format!("{what} = {v} is not a count")))
    }
}

pub fn bundle_to_checkpoint(bundle: &TokenizerBundle) -> Checkpoint {
    let mut ckpt = Checkpoint::default();
    ckpt.push(Section::new("bundle.config", vec![12], config_values(&bundle.config, bundle.frozen)));
    push_tensors(&bundle.visual, "visual.", &mut ckpt);
    push_tensors(&bundle.temporal, "temporal.", &mut ckpt);
    let b = &bundle.codebook;
    ckpt.push(Section::new(
        "codebook",
        vec![b.heads as u32, b.codes as u32, b.sub_dim as u32],
        b.data.clone(),
    ));
    ckpt
}

pub fn bundle_from_checkpoint(ckpt: &Checkpoint) -> Result<TokenizerBundle> {
    let meta = ckpt.get("bundle.config")?;
    if meta.data.len() != 12 {
        return Err(Error::CorruptCheckpoint("bundle.config must hold 12 values".into()));
    }
    let v: Vec<usize> = meta
        .data
        .iter()
        .map(|&x| as_count(x, "bundle.config"))
        .collect::<Result<_>>()?;
    let config = BundleConfig {
        image_height: v[0],
        image_width: v[1],
        channels: v[2],
        patch: v[3],
        series_len: v[4],
        segment: v[5],
        mode: if v[6] == 1 { SegmentMode::Lenient } else { SegmentMode::Strict },
        dim: v[7],
        heads: v[8],
        codes: v[9],
        depth: v[10],
    };
    config.validate().map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let mut visual = AutoencoderParams::init(Modality::Visual, config.ae_shape(Modality::Visual), &mut rng);
    let mut temporal = AutoencoderParams::init(Modality::Temporal, config.ae_shape(Modality::Temporal), &mut rng);
    load_tensors(&mut visual, "visual.", ckpt)?;
    load_tensors(&mut temporal, "temporal.", ckpt)?;
    let cb = ckpt.get("codebook")?;
    if cb.dims != [config.heads as u32, config.codes as u32, (config.dim / config.heads) as u32] {
        return Err(Error::CorruptCheckpoint(format!("codebook dims {:?}", cb.dims)));
    }
    let codebook = MultiHeadCodebook::new(config.heads, config.codes, config.dim / config.heads, cb.data.clone())?;
    let mut bundle = TokenizerBundle::from_parts(config, visual, temporal, codebook)?;
    bundle.frozen = v[11] == 1;
    Ok(bundle)
}

pub fn model_to_checkpoint(model: &AlignmentModel) -> Checkpoint {
    let mut ckpt = Checkpoint::default();
    ckpt.push(Section::new(
        "align.meta",
        vec![5],
        vec![
            model.direction.tag() as f64,
            model.tokens as f64,
            model.heads as f64,
            model.codes as f64,
            model.width() as f64,
        ],
    ));
    push_tensors(model, "", &mut ckpt);
    ckpt
}

pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<AlignmentModel> {
    let meta = ckpt.get("align.meta")?;
    if meta.data.len() != 5 {
        return Err(Error::CorruptCheckpoint("align.meta must hold 5 values".into()));
    }
    let v: Vec<usize> = meta
        .data
        .iter()
        .map(|&x| as_count(x, "align.meta"))
        .collect::<Result<_>>()?;
    let direction = Direction::from_tag(v[0] as u8)?;
    let mut model = AlignmentModel::zeros(direction, v[1], v[2], v[3], v[4]);
    load_tensors(&mut model, "", ckpt)?;
    Ok(model)
}
