//! Binary checkpoint format (all integers and floats little-endian):
//!
//! ```text
//! magic        4 bytes  "GUMC"
//! version      u32      1
//! kind         u8       0 = classifier, 1 = attack model
//! input_dim    u64
//! classes      u64
//! hidden_count u64
//! hidden[i]    u64 × hidden_count
//! per layer, input to output:
//!   weight     f64 × fan_in·fan_out   (row-major [fan_in, fan_out])
//!   bias       f64 × fan_out
//! ```
//!
//! Floats are stored as raw IEEE-754 bits, so a round trip is bit-exact.

use std::path::Path;

use super::{Layer, MlpArchitecture, ModelParams};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

const MAGIC: &[u8; 4] = b"GUMC";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    Classifier,
    Attack,
}

impl CheckpointKind {
    fn tag(self) -> u8 {
        match self {
            CheckpointKind::Classifier => 0,
            CheckpointKind::Attack => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub model: ModelParams,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let arch = self.model.architecture();
        let mut out = Vec::with_capacity(40 + 8 * self.model.param_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind.tag());
        for v in [arch.input_dim, arch.classes, arch.hidden.len()] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for &w in &arch.hidden {
            out.extend_from_slice(&(w as u64).to_le_bytes());
        }
        for l in self.model.layers() {
            for v in l.weight.data().iter().chain(l.bias.data()) {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let kind = match r.take(1)?[0] {
            0 => CheckpointKind::Classifier,
            1 => CheckpointKind::Attack,
            t => return Err(Error::Checkpoint(format!("unknown kind tag {t}"))),
        };
        let input_dim = r.usize()?;
        let classes = r.usize()?;
        let hidden_count = r.usize()?;
        if hidden_count > 1024 {
            return Err(Error::Checkpoint(format!("implausible hidden layer count {hidden_count}")));
        }
        let hidden = (0..hidden_count).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let arch = MlpArchitecture::new(input_dim, hidden, classes)?;
        let widths = arch.widths();
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for w in widths.windows(2) {
            let weight = Tensor::matrix(w[0], w[1], r.f64s(w[0] * w[1])?)?;
            let bias = Tensor::vector(r.f64s(w[1])?);
            layers.push(Layer { weight, bias });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            kind,
            model: ModelParams::from_layers(arch, layers)?,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn usize(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} overflows usize")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect())
    }
}

pub fn save_checkpoint(path: &Path, model: &ModelParams, kind: CheckpointKind) -> Result<()> {
    let ck = Checkpoint {
        kind,
        model: model.clone(),
    };
    crate::io::write_atomic(path, &ck.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}
