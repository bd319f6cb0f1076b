//! `RGCK` checkpoints: a flat list of named tensors.
//!
//! Layout: magic `RGCK`, u32 version (1), u32 count, then per tensor a u16
//! name length, the UTF-8 name, and a tensor body (u8 dtype, u8 rank,
//! rank x u64 extents, payload), all little-endian.

use std::io::Write;
use std::path::Path;

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::generators::{GeneratorConfig, GeneratorPair};
use crate::reversible::RetentionMode;
use crate::scalar::{DType, Scalar};
use crate::tensor::{write_tensor_body, AnyTensor, Cursor};

pub const MAGIC: &[u8; 4] = b"RGCK";
pub const VERSION: u32 = 1;

pub type Entries = Vec<(String, AnyTensor)>;

pub fn encode_rgck(entries: &[(String, AnyTensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(entries.len()).map_err(|_| Error::invalid("too many tensors for one checkpoint"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in entries {
        let len = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        write_tensor_body(t, &mut out);
    }
    Ok(out)
}

pub fn decode_rgck(bytes: &[u8]) -> Result<Entries> {
    let mut cur = Cursor::new(bytes);
    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "bad magic, expected RGCK".into(),
        });
    }
    let at = cur.pos;
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::Parse {
            offset: at,
            message: format!("unsupported checkpoint version {version}"),
        });
    }
    let count = cur.u32("tensor count")?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let len = cur.u16("name length")? as usize;
        let at = cur.pos;
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|_| Error::Parse {
                offset: at,
                message: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        entries.push((name, cur.tensor_body()?));
    }
    if cur.pos != bytes.len() {
        return Err(cur.err("trailing bytes after last tensor"));
    }
    Ok(entries)
}

/// Writes to a temporary sibling and renames it over `path`.
pub fn write_rgck(path: &Path, entries: &[(String, AnyTensor)]) -> Result<()> {
    let bytes = encode_rgck(entries)?;
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()
    };
    write().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_rgck(path: &Path) -> Result<Entries> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_rgck(&bytes)
}

/// Architecture recovered from tensor names and shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointInfo {
    pub dtype: DType,
    pub generator: GeneratorConfig,
    /// Base width of `d_x`, when the checkpoint holds discriminators.
    pub disc_width: Option<usize>,
    /// Completed iterations, when recorded.
    pub iter: Option<usize>,
}

fn find<'a>(entries: &'a [(String, AnyTensor)], name: &str) -> Option<&'a AnyTensor> {
    entries.iter().find(|(k, _)| k == name).map(|(_, t)| t)
}

fn meta(entries: &[(String, AnyTensor)], name: &str) -> Option<usize> {
    let v = find(entries, name)?.to::<f64>().item();
    (v >= 0.0 && v.fract() == 0.0).then_some(v as usize)
}

/// Infers the generator layout: width and channels from the first encoder
/// convs, depth from the block count, trailing subnet convs from their
/// presence, and the image extent from `meta.image_size`.
pub fn inspect(entries: &[(String, AnyTensor)]) -> Result<CheckpointInfo> {
    let need = |name: &str| find(entries, name).ok_or_else(|| Error::invalid(format!("checkpoint lacks {name}")));
    let ex = need("genpair.enc_x.conv1.weight")?;
    let ey = need("genpair.enc_y.conv1.weight")?;
    let (&[k, cx, ..], &[_, cy, ..]) = (ex.shape(), ey.shape()) else {
        return Err(Error::invalid("encoder weights are not rank 4"));
    };
    let depth = (0..)
        .take_while(|i| find(entries, &format!("genpair.core.block{i}.nn1.conv1.weight")).is_some())
        .count();
    let trailing = find(entries, "genpair.core.block0.nn1.conv2.weight").is_some();
    let image_size =
        meta(entries, "meta.image_size").ok_or_else(|| Error::invalid("checkpoint lacks meta.image_size"))?;
    Ok(CheckpointInfo {
        dtype: ex.dtype(),
        generator: GeneratorConfig {
            width: k,
            depth,
            channels_x: cx,
            channels_y: cy,
            image_size,
            zero_init: trailing,
            mode: RetentionMode::Recompute,
        },
        disc_width: find(entries, "d_x.conv1.weight").and_then(|t| t.shape().first().copied()),
        iter: meta(entries, "meta.iter"),
    })
}

/// Rebuilds the generator pair stored in a checkpoint.
pub fn load_generator_pair<T: Scalar>(entries: &[(String, AnyTensor)]) -> Result<(GeneratorPair, ParamStore<T>)> {
    let info = inspect(entries)?;
    let mut store = ParamStore::new();
    let pair = GeneratorPair::register(&mut store, &info.generator)?;
    for id in pair.param_ids() {
        let name = store.get(id).name.clone();
        let t = find(entries, &name).ok_or_else(|| Error::invalid(format!("checkpoint lacks {name}")))?;
        if t.dtype() != T::DTYPE {
            return Err(Error::invalid(format!(
                "{name} is {:?}, expected {:?}",
                t.dtype(),
                T::DTYPE
            )));
        }
        store.set_value(id, t.to())?;
    }
    let extra = entries
        .iter()
        .find(|(k, _)| k.starts_with("genpair.") && store.id(k).is_none());
    if let Some((k, _)) = extra {
        return Err(Error::invalid(format!(
            "checkpoint has unexpected generator tensor {k}"
        )));
    }
    Ok((pair, store))
}
