//! Binary checkpoint files.
//!
//! Layout, little-endian:
//!
//! ```text
//! "DMSDCKPT" | u32 version | u32 entry count
//! per entry: u16 name length | name (UTF-8) | u32 ndim | u32 dims[ndim] | f32 values
//! u64 step counter
//! ```
//!
//! Parameters are stored as 32-bit floats, so a loaded model equals the
//! saved one rounded to `f32`. A save of a loaded checkpoint reproduces
//! the file byte for byte.

use std::path::Path;

use super::config::Config;
use crate::codec::EncoderParams;
use crate::error::{Error, Result};
use crate::heads::HeadParams;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 8] = b"DMSDCKPT";
pub const CKPT_VERSION: u32 = 1;

const SHAPE_ENTRY: &str = "config.shape";

/// Everything a later stage needs: student encoder and decoder, the teacher
/// mixer, the classifier head, the frame count the model was trained on and
/// the number of optimizer steps taken so far.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub dte: EncoderParams,
    pub dtd: EncoderParams,
    pub dme: EncoderParams,
    pub head: HeadParams,
    pub frames: usize,
    pub step: u64,
}

impl Checkpoint {
    pub fn new(
        dte: EncoderParams,
        dtd: EncoderParams,
        dme: EncoderParams,
        head: HeadParams,
        frames: usize,
        step: u64,
    ) -> Result<Self> {
        let c = Self { dte, dtd, dme, head, frames, step };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.dme.store().check_congruent(self.dte.store())?;
        self.dtd.store().check_congruent(self.dte.store())?;
        if self.head.dim() != self.dte.dim() {
            return Err(Error::Structural(format!(
                "head expects {}-dim features, encoder produces {}",
                self.head.dim(),
                self.dte.dim()
            )));
        }
        Ok(())
    }

    /// Structural error unless the model matches the configured shapes.
    pub fn check_config(&self, config: &Config, source_classes: Option<usize>) -> Result<()> {
        let mismatch = |what: &str, have: usize, want: usize| {
            Err(Error::Structural(format!("checkpoint has {what}={have}, config expects {want}")))
        };
        if self.dte.dim() != config.dim {
            return mismatch("dim", self.dte.dim(), config.dim);
        }
        if self.dte.hidden() != config.hidden {
            return mismatch("hidden", self.dte.hidden(), config.hidden);
        }
        if self.frames != config.frames {
            return mismatch("frames", self.frames, config.frames);
        }
        if let Some(n) = source_classes.or(config.source_classes) {
            if self.head.num_classes() != n {
                return mismatch("source_classes", self.head.num_classes(), n);
            }
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, store) in [
            ("dte.", self.dte.store()),
            ("dtd.", self.dtd.store()),
            ("dme.", self.dme.store()),
            ("head.", self.head.store()),
        ] {
            out.extend(store.iter().map(|(k, t)| (format!("{prefix}{k}"), t)));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let shape = Tensor::vector(vec![
            self.frames as f64,
            self.dte.dim() as f64,
            self.dte.hidden() as f64,
            self.head.num_classes() as f64,
        ])?;
        let mut entries = self.entries();
        entries.push((SHAPE_ENTRY.to_string(), &shape));

        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, t) in entries {
            let len =
                u16::try_from(name.len()).map_err(|_| Error::Structural(format!("entry name `{name}` is too long")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, "magic")?;
        if magic != CKPT_MAGIC {
            return Err(Error::Format { offset: 0, msg: format!("bad magic {magic:?}, expected DMSDCKPT") });
        }
        let at = r.pos;
        let version = r.u32("version")?;
        if version != CKPT_VERSION {
            return Err(Error::Format { offset: at, msg: format!("unsupported version {version}") });
        }
        let count = r.u32("entry count")?;
        let mut stores: [ParamStore; 4] = Default::default();
        let mut shape: Option<Vec<f64>> = None;
        for _ in 0..count {
            let at = r.pos;
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Format { offset: at + 2, msg: "entry name is not UTF-8".into() })?
                .to_string();
            let ndim = r.u32("ndim")? as usize;
            if ndim > 8 {
                return Err(Error::Format { offset: r.pos - 4, msg: format!("implausible ndim {ndim}") });
            }
            let dims = (0..ndim).map(|_| r.u32("dim").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = match n {
                Some(n) if n.checked_mul(4).is_some_and(|b| b <= r.remaining()) => n,
                _ => {
                    return Err(Error::Format {
                        offset: r.pos,
                        msg: format!("entry `{name}` with dims {dims:?} overruns the file"),
                    })
                }
            };
            let raw = r.take(4 * n, "values")?;
            let data: Vec<f64> =
                raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
            let tensor = Tensor::new(dims, data)?;
            if name == SHAPE_ENTRY {
                shape = Some(tensor.into_data());
                continue;
            }
            let slot = match name.split_once('.') {
                Some(("dte", _)) => 0,
                Some(("dtd", _)) => 1,
                Some(("dme", _)) => 2,
                Some(("head", _)) => 3,
                _ => return Err(Error::Format { offset: at, msg: format!("unknown entry `{name}`") }),
            };
            let key = name.split_once('.').expect("matched above").1;
            if stores[slot].get(key).is_ok() {
                return Err(Error::Format { offset: at, msg: format!("duplicate entry `{name}`") });
            }
            stores[slot].insert(key, tensor);
        }
        let step = r.u64("step counter")?;
        if r.remaining() != 0 {
            return Err(Error::Format { offset: r.pos, msg: format!("{} trailing bytes", r.remaining()) });
        }
        let shape = shape.ok_or_else(|| Error::Structural(format!("missing `{SHAPE_ENTRY}` entry")))?;
        if shape.len() != 4 {
            return Err(Error::Structural(format!("`{SHAPE_ENTRY}` must hold 4 values")));
        }
        let [dte, dtd, dme, head] = stores;
        let ckpt = Self {
            dte: EncoderParams::from_store(dte)?,
            dtd: EncoderParams::from_store(dtd)?,
            dme: EncoderParams::from_store(dme)?,
            head: HeadParams::from_store(head)?,
            frames: shape[0] as usize,
            step,
        };
        ckpt.validate()?;
        let want = [ckpt.frames, ckpt.dte.dim(), ckpt.dte.hidden(), ckpt.head.num_classes()];
        if shape.iter().zip(want).any(|(&s, w)| s != w as f64) {
            return Err(Error::Structural(format!("recorded shape {shape:?} disagrees with the parameters {want:?}")));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format {
                offset: self.pos,
                msg: format!("truncated {what}: need {n} bytes, {} left", self.remaining()),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dte = EncoderParams::init(4, 8, &mut rng);
        let dtd = EncoderParams::init(4, 8, &mut rng);
        let head = HeadParams::init(4, 3, &mut rng);
        Checkpoint::new(dte.clone(), dtd, dte, head, 5, 42).unwrap()
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let bytes = sample().to_bytes().unwrap();
        let loaded = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(loaded.step, 42);
        assert_eq!(loaded.frames, 5);
        assert_eq!(loaded.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corruption_is_reported() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[8] = 7;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { offset: 8, .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format { .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::Format { .. })));
    }

    #[test]
    fn config_mismatch_is_structural() {
        let c = Config { dim: 8, hidden: 16, ..Config::default() };
        assert!(matches!(sample().check_config(&c, None), Err(Error::Structural(_))));
        let c = Config { dim: 4, hidden: 8, frames: 5, ..Config::default() };
        sample().check_config(&c, Some(3)).unwrap();
        assert!(sample().check_config(&c, Some(4)).is_err());
    }
}
