//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.json
//! <root>/trainA/0000.ppm ...
//! <root>/trainB/0000.ppm ...
//! <root>/labelsB/0000.pgm ...   (optional)
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ppm::{read_raster, write_raster};
use super::{Dataset, Pairing, Raster};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub kind: String,
    pub n: usize,
    pub size: usize,
    pub seed: u64,
    pub pairing: Pairing,
}

const MANIFEST: &str = "manifest.json";

fn file_name(i: usize, ext: &str) -> String {
    format!("{i:04}.{ext}")
}

/// True if `dir` exists and holds at least one entry.
pub fn is_nonempty_dir(dir: &Path) -> Result<bool> {
    match std::fs::read_dir(dir) {
        Ok(mut it) => Ok(it.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(Error::io(dir, e)),
    }
}

/// Writes `ds` under `root`. A non-empty `root` is refused unless `force`.
pub fn write_dataset(ds: &Dataset, manifest: &Manifest, root: &Path, force: bool) -> Result<()> {
    ds.validate()?;
    if !force && is_nonempty_dir(root)? {
        return Err(Error::invalid(format!(
            "{} exists and is not empty (use --force to overwrite)",
            root.display()
        )));
    }
    let sub = |name: &str| -> Result<PathBuf> {
        let d = root.join(name);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        Ok(d)
    };
    let (da, db) = (sub("trainA")?, sub("trainB")?);
    for (i, r) in ds.a.iter().enumerate() {
        write_raster(&da.join(file_name(i, "ppm")), r)?;
    }
    for (i, r) in ds.b.iter().enumerate() {
        write_raster(&db.join(file_name(i, "ppm")), r)?;
    }
    if let Some(labels) = &ds.labels {
        let dl = sub("labelsB")?;
        for (i, r) in labels.iter().enumerate() {
            write_raster(&dl.join(file_name(i, "pgm")), r)?;
        }
    }
    let path = root.join(MANIFEST);
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

fn read_sorted(dir: &Path, ext: &str) -> Result<Vec<Raster>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == ext));
    paths.sort();
    paths.iter().map(|p| read_raster(p)).collect()
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
}

/// Reads a dataset written by [`write_dataset`] (or laid out the same way).
pub fn read_dataset(root: &Path) -> Result<(Dataset, Manifest)> {
    let manifest = read_manifest(root)?;
    let a = read_sorted(&root.join("trainA"), "ppm")?;
    let b = read_sorted(&root.join("trainB"), "ppm")?;
    let ldir = root.join("labelsB");
    let labels = if ldir.is_dir() {
        Some(read_sorted(&ldir, "pgm")?)
    } else {
        None
    };
    let ds = Dataset {
        a,
        b,
        labels,
        pairing: manifest.pairing,
    };
    ds.validate()?;
    if let Some(l) = &ds.labels {
        if l.len() != ds.b.len() || l.iter().any(|r| r.channels != 1) {
            return Err(Error::invalid("labelsB must hold one single-channel map per B image"));
        }
    }
    Ok((ds, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_toy_dataset, ToyKind};

    #[test]
    fn round_trip_and_force() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().join("ds");
        let ds = make_toy_dataset(ToyKind::ColormapSeg, 3, 8, 2).unwrap();
        let m = Manifest {
            kind: "colormap-seg".into(),
            n: 3,
            size: 8,
            seed: 2,
            pairing: Pairing::Paired,
        };
        write_dataset(&ds, &m, &root, false).unwrap();
        assert!(root.join("labelsB/0002.pgm").is_file());
        let (back, m2) = read_dataset(&root).unwrap();
        assert_eq!(back, ds);
        assert_eq!(m2, m);
        assert!(matches!(
            write_dataset(&ds, &m, &root, false),
            Err(Error::InvalidArgument(_))
        ));
        write_dataset(&ds, &m, &root, true).unwrap();
    }
}
