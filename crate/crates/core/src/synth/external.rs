//! Paired images from disk: `<id>_<k>_clean.pgm` and `<id>_<k>_masked.pgm`.

use std::collections::BTreeMap;
use std::path::Path;

use super::{read_pgm, FaceSample, PairBatch, Result, SynthError};

fn parse_name(name: &str) -> Option<(usize, usize, bool)> {
    let stem = name.strip_suffix(".pgm")?;
    let (rest, masked) = if let Some(r) = stem.strip_suffix("_clean") {
        (r, false)
    } else {
        (stem.strip_suffix("_masked")?, true)
    };
    let (id, k) = rest.split_once('_')?;
    Some((id.parse().ok()?, k.parse().ok()?, masked))
}

/// Loads every complete pair in `dir`, ordered by (identity, index).
/// Files that do not follow the naming scheme are ignored; a pair missing
/// one side is an error.
pub fn load_pair_directory(dir: &Path) -> Result<PairBatch> {
    let io = |source| SynthError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut found: BTreeMap<(usize, usize), [Option<std::path::PathBuf>; 2]> = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(io)? {
        let entry = entry.map_err(io)?;
        let name = entry.file_name();
        let Some((id, k, masked)) = name.to_str().and_then(parse_name) else {
            continue;
        };
        found.entry((id, k)).or_default()[masked as usize] = Some(entry.path());
    }
    let mut batch = PairBatch {
        clean: Vec::new(),
        masked: Vec::new(),
    };
    for ((id, k), [clean, masked]) in found {
        let (Some(c), Some(m)) = (clean, masked) else {
            return Err(SynthError::Usage(format!(
                "{}: pair {id}_{k} is incomplete",
                dir.display()
            )));
        };
        let (ci, mi) = (read_pgm(&c)?, read_pgm(&m)?);
        if ci.shape() != mi.shape() {
            return Err(SynthError::Usage(format!("pair {id}_{k}: image sizes differ")));
        }
        let sample = |image, masked| FaceSample {
            image,
            identity: id,
            masked,
            mask_type: None,
            aug_seed: k as u64,
        };
        batch.clean.push(sample(ci, false));
        batch.masked.push(sample(mi, true));
    }
    Ok(batch)
}
