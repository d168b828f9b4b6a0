//! Binary snapshot container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "EVPS" | version u32 | section count u32
//! per section:
//!   tag [u8; 4] | tensor count u32
//!   manifest: per tensor, name len u32, name bytes, rank u32, dims u64 * rank
//!   data: every tensor's values as f64, in manifest order
//!   sha256 of the data bytes [u8; 32]
//! ```

use std::io::{Read, Write};

use sha2::{Digest, Sha256};

use crate::encoder::FrozenEncoder;
use crate::mpp::PromptProjector;
use crate::numcore::{ParamStore, Tensor};
use crate::Error;

pub const MAGIC: &[u8; 4] = b"EVPS";
pub const VERSION: u32 = 1;
pub const TAG_ENCODER: [u8; 4] = *b"ENCD";
pub const TAG_TRAINABLE: [u8; 4] = *b"TRNS";
pub const TAG_HISTORY: [u8; 4] = *b"HIST";

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub tag: [u8; 4],
    pub tensors: Vec<(String, Tensor)>,
}

impl Section {
    pub fn encoder(enc: &FrozenEncoder) -> Self {
        let tensors = enc.named_tensors().into_iter().map(|(n, t)| (n, t.detached())).collect();
        Self { tag: TAG_ENCODER, tensors }
    }

    pub fn trainable(store: &ParamStore) -> Self {
        let tensors = store.iter().map(|(_, n, t)| (n.to_string(), t.detached())).collect();
        Self { tag: TAG_TRAINABLE, tensors }
    }

    /// Frozen directions, named `direction.{layer}.{modality}.{origin}`.
    pub fn history(projector: &PromptProjector) -> Self {
        let mut tensors = Vec::new();
        for st in projector.evolving_adapters() {
            for d in st.history() {
                let name = format!("direction.{}.{}.{}", st.layer, st.modality.tag(), d.epoch);
                tensors.push((name, d.direction.detached()));
            }
        }
        Self { tag: TAG_HISTORY, tensors }
    }
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<(), Error> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn len_u32(n: usize, what: &str) -> Result<u32, Error> {
    u32::try_from(n).map_err(|_| Error::Input(format!("{what} too large for snapshot: {n}")))
}

pub fn write_snapshot<W: Write>(mut w: W, sections: &[Section]) -> Result<(), Error> {
    w.write_all(MAGIC)?;
    put_u32(&mut w, VERSION)?;
    put_u32(&mut w, len_u32(sections.len(), "section count")?)?;
    for s in sections {
        w.write_all(&s.tag)?;
        put_u32(&mut w, len_u32(s.tensors.len(), "tensor count")?)?;
        for (name, t) in &s.tensors {
            put_u32(&mut w, len_u32(name.len(), "name")?)?;
            w.write_all(name.as_bytes())?;
            put_u32(&mut w, len_u32(t.shape().len(), "rank")?)?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
        }
        let mut hasher = Sha256::new();
        for (_, t) in &s.tensors {
            for v in t.values() {
                let b = v.to_le_bytes();
                hasher.update(b);
                w.write_all(&b)?;
            }
        }
        w.write_all(&hasher.finalize())?;
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N], Error> {
        let mut b = [0u8; N];
        self.inner.read_exact(&mut b).map_err(|e| Error::Input(format!("truncated snapshot: {e}")))?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<usize, Error> {
        Ok(u32::from_le_bytes(self.bytes()?) as usize)
    }

    fn u64(&mut self) -> Result<usize, Error> {
        usize::try_from(u64::from_le_bytes(self.bytes()?)).map_err(|_| Error::Input("dimension overflows usize".into()))
    }
}

pub fn read_snapshot<R: Read>(r: R) -> Result<Vec<Section>, Error> {
    let mut r = Reader { inner: r };
    if &r.bytes::<4>()? != MAGIC {
        return Err(Error::Input("not a snapshot file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Input(format!("unsupported snapshot version {version}")));
    }
    let count = r.u32()?;
    let mut sections = Vec::with_capacity(count.min(16));
    for _ in 0..count {
        let tag = r.bytes::<4>()?;
        let n = r.u32()?;
        let mut manifest = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let len = r.u32()?;
            let mut name = vec![0u8; len];
            r.inner.read_exact(&mut name).map_err(|e| Error::Input(format!("truncated snapshot: {e}")))?;
            let name = String::from_utf8(name).map_err(|_| Error::Input("tensor name is not UTF-8".into()))?;
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>, _>>()?;
            manifest.push((name, shape));
        }
        let mut hasher = Sha256::new();
        let mut tensors = Vec::with_capacity(manifest.len());
        for (name, shape) in manifest {
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Input(format!("shape of {name} overflows")))?;
            let mut values = Vec::with_capacity(len.min(1 << 20));
            for _ in 0..len {
                let b = r.bytes::<8>()?;
                hasher.update(b);
                values.push(f64::from_le_bytes(b));
            }
            tensors.push((name, Tensor::new(shape, values)?));
        }
        if r.bytes::<32>()?[..] != hasher.finalize()[..] {
            return Err(Error::Input(format!("checksum mismatch in section {}", String::from_utf8_lossy(&tag))));
        }
        sections.push(Section { tag, tensors });
    }
    Ok(sections)
}

pub fn find(sections: &[Section], tag: [u8; 4]) -> Option<&Section> {
    sections.iter().find(|s| s.tag == tag)
}
