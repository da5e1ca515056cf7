//! Versioned little-endian binary checkpoint: vocabulary, scalars, and every
//! parameter matrix with its shape. Floats are stored as raw bits, so a
//! load of a save is bitwise identical.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use super::params::ToyModelParams;
use super::vocab::Vocab;
use crate::contrastive::ProjectionParams;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"VLITCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub vocab: Vocab,
    pub model: ToyModelParams,
    pub projection: ProjectionParams,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn matrix<'a>(&mut self, name: &str, rows: usize, cols: usize, data: impl Iterator<Item = &'a f64>) {
        self.str(name);
        self.u64(rows as u64);
        self.u64(cols as u64);
        for v in data {
            self.f64(*v);
        }
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
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }
    fn matrix(&mut self, name: &str) -> Result<Array2<f64>> {
        let got = self.str()?;
        if got != name {
            return Err(Error::Checkpoint(format!("expected matrix {name}, found {got}")));
        }
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let len = rows
            .checked_mul(cols)
            .filter(|&n| n.saturating_mul(8) <= self.buf.len() - self.pos)
            .ok_or_else(|| Error::Checkpoint(format!("matrix {name} larger than file")))?;
        let data = (0..len).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

fn column(a: Array2<f64>) -> Array1<f64> {
    let n = a.len();
    a.into_shape_with_order(n).expect("contiguous")
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u32(self.vocab.len() as u32);
        for t in self.vocab.tokens() {
            w.str(t);
        }
        let m = &self.model;
        w.u64(m.context_window as u64);
        w.f64(m.learning_rate);
        w.u64(m.step);
        w.u64(m.seed);
        let (d, v) = m.token_embeddings.dim();
        w.matrix("token_embeddings", d, v, m.token_embeddings.iter());
        let (pr, pc) = m.image_projection.dim();
        w.matrix("image_projection", pr, pc, m.image_projection.iter());
        w.matrix("null_image_feature", m.null_image_feature.len(), 1, m.null_image_feature.iter());
        let (hr, hc) = m.output_head.dim();
        w.matrix("output_head", hr, hc, m.output_head.iter());
        let (wr, wc) = self.projection.weight.dim();
        w.matrix("projection_weight", wr, wc, self.projection.weight.iter());
        w.matrix("projection_bias", self.projection.bias.len(), 1, self.projection.bias.iter());
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let n = r.u32()? as usize;
        let tokens = (0..n).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let vocab = Vocab::from_tokens(tokens)?;
        let context_window = r.u64()? as usize;
        let learning_rate = r.f64()?;
        let step = r.u64()?;
        let seed = r.u64()?;
        let model = ToyModelParams {
            token_embeddings: r.matrix("token_embeddings")?,
            image_projection: r.matrix("image_projection")?,
            null_image_feature: column(r.matrix("null_image_feature")?),
            output_head: r.matrix("output_head")?,
            context_window,
            learning_rate,
            step,
            seed,
        };
        let projection = ProjectionParams {
            weight: r.matrix("projection_weight")?,
            bias: column(r.matrix("projection_bias")?),
        };
        if r.pos != buf.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        model.validate()?;
        projection.validate()?;
        if vocab.len() != model.token_embeddings.ncols() || projection.dim() != model.token_embeddings.nrows() {
            return Err(Error::Checkpoint("vocabulary or projection does not fit the model".into()));
        }
        Ok(Checkpoint {
            vocab,
            model,
            projection,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}
