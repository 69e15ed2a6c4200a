//! Network weights of the renderer and their on-disk checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "NRFATK01"
//! version  u32      1
//! arch     4 x u32  enc_hidden, c_feat, mlp_hidden, d_sigma
//! count    u32
//! count x { name_len u32, name utf-8, ndim u32, dims ndim x u64, values f64 x prod(dims) }
//! ```

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ad::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"NRFATK01";
const VERSION: u32 = 1;

/// Layer widths of the encoder `E`, colour network `f` and ray transformer `T`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RendererArch {
    pub enc_hidden: usize,
    pub c_feat: usize,
    pub mlp_hidden: usize,
    pub d_sigma: usize,
}

impl Default for RendererArch {
    fn default() -> Self {
        RendererArch { enc_hidden: 16, c_feat: 16, mlp_hidden: 64, d_sigma: 16 }
    }
}

/// Positions of each tensor in [`RendererParams::tensors`].
pub(crate) mod idx {
    pub const ENC1_W: usize = 0;
    pub const ENC1_B: usize = 1;
    pub const ENC2_W: usize = 2;
    pub const ENC2_B: usize = 3;
    pub const ENC3_W: usize = 4;
    pub const ENC3_B: usize = 5;
    pub const F1_W: usize = 6;
    pub const F1_B: usize = 7;
    pub const F2_W: usize = 8;
    pub const F2_B: usize = 9;
    pub const F3_W: usize = 10;
    pub const F3_B: usize = 11;
    pub const F4_W: usize = 12;
    pub const F4_B: usize = 13;
    pub const T_Q: usize = 14;
    pub const T_K: usize = 15;
    pub const T_V: usize = 16;
    pub const HEAD_W: usize = 17;
    pub const HEAD_B: usize = 18;
    pub const COUNT: usize = 19;
}

const NAMES: [&str; idx::COUNT] = [
    "enc1.weight",
    "enc1.bias",
    "enc2.weight",
    "enc2.bias",
    "enc3.weight",
    "enc3.bias",
    "f1.weight",
    "f1.bias",
    "f2.weight",
    "f2.bias",
    "f3.weight",
    "f3.bias",
    "f4.weight",
    "f4.bias",
    "attn.query",
    "attn.key",
    "attn.value",
    "sigma.weight",
    "sigma.bias",
];

impl RendererArch {
    /// Expected shape of every named tensor, in checkpoint order.
    pub fn layout(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (e, c, m, d) = (self.enc_hidden, self.c_feat, self.mlp_hidden, self.d_sigma);
        let shapes = vec![
            vec![e, 3, 3, 3],
            vec![e],
            vec![e, e, 3, 3],
            vec![e],
            vec![c, e, 3, 3],
            vec![c],
            vec![2 * c, m],
            vec![m],
            vec![m, m],
            vec![m],
            vec![m, m],
            vec![m],
            vec![m, 3 + d],
            vec![3 + d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d, 1],
            vec![1],
        ];
        NAMES.iter().copied().zip(shapes).collect()
    }

    fn validate(&self) -> Result<()> {
        if [self.enc_hidden, self.c_feat, self.mlp_hidden, self.d_sigma].contains(&0) {
            return Err(Error::Contract(format!("architecture widths must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// All learnable tensors of the renderer.
#[derive(Clone, Debug, PartialEq)]
pub struct RendererParams {
    arch: RendererArch,
    tensors: Vec<Tensor>,
}

impl RendererParams {
    /// Uniform fan-in scaled initialisation with zero biases, except the
    /// density head which starts slightly transparent.
    pub fn init(arch: RendererArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = arch
            .layout()
            .into_iter()
            .enumerate()
            .map(|(i, (_, shape))| {
                if shape.len() == 1 {
                    let fill = if i == idx::HEAD_B { -1.0 } else { 0.0 };
                    return Tensor::full(&shape, fill);
                }
                let fan_in: usize = if shape.len() == 4 { shape[1..].iter().product() } else { shape[0] };
                let limit = (6.0 / fan_in as f64).sqrt();
                Tensor::from_fn(&shape, |_| rng.gen_range(-limit..limit))
            })
            .collect();
        Ok(RendererParams { arch, tensors })
    }

    /// Every tensor set to zero.
    pub fn zeros(arch: RendererArch) -> Result<Self> {
        arch.validate()?;
        let tensors = arch.layout().into_iter().map(|(_, s)| Tensor::zeros(&s)).collect();
        Ok(RendererParams { arch, tensors })
    }

    pub fn from_tensors(arch: RendererArch, tensors: Vec<Tensor>) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        if tensors.len() != layout.len() {
            return Err(Error::shape("renderer params", &[tensors.len()], &[layout.len()]));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Contract(format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape())));
            }
            if !t.all_finite() {
                return Err(Error::Contract(format!("tensor {name} is not finite")));
            }
        }
        Ok(RendererParams { arch, tensors })
    }

    pub fn arch(&self) -> RendererArch {
        self.arch
    }

    pub fn names() -> &'static [&'static str] {
        &NAMES
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        NAMES.iter().position(|n| *n == name).map(|i| &self.tensors[i])
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.num_values());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let a = self.arch;
        for v in [a.enc_hidden, a.c_feat, a.mlp_hidden, a.d_sigma] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in NAMES.iter().zip(&self.tensors) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint; `file` only labels errors.
    pub fn from_bytes(bytes: &[u8], file: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, file };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::format(file, "magic", "not a renderer checkpoint"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format(file, "version", format!("unsupported version {version}")));
        }
        let arch = RendererArch {
            enc_hidden: r.u32("arch")? as usize,
            c_feat: r.u32("arch")? as usize,
            mlp_hidden: r.u32("arch")? as usize,
            d_sigma: r.u32("arch")? as usize,
        };
        arch.validate().map_err(|e| Error::format(file, "arch", e.to_string()))?;
        let layout = arch.layout();
        let count = r.u32("count")? as usize;
        if count != layout.len() {
            return Err(Error::format(file, "count", format!("expected {} tensors, found {count}", layout.len())));
        }
        let mut tensors = Vec::with_capacity(count);
        for (name, shape) in &layout {
            let len = r.u32("name")? as usize;
            let got = String::from_utf8_lossy(r.take(len, "name")?).into_owned();
            if got != *name {
                return Err(Error::format(file, "name", format!("expected {name}, found {got:?}")));
            }
            let ndim = r.u32(name)? as usize;
            let dims = (0..ndim).map(|_| r.u64(name).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if dims != *shape {
                return Err(Error::format(file, *name, format!("shape {dims:?}, architecture expects {shape:?}")));
            }
            let n: usize = dims.iter().product();
            let raw = r.take(n * 8, name)?;
            let data: Vec<f64> =
                raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            if !data.iter().all(|v| v.is_finite()) {
                return Err(Error::format(file, *name, "non-finite value"));
            }
            tensors.push(Tensor::new(dims, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(file, "trailer", format!("{} unexpected bytes", bytes.len() - r.pos)));
        }
        Ok(RendererParams { arch, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format(self.file, field, "truncated file"));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }
}
