//! Dataset manifest: one CSV row per sample.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{
    apply_mask, mask_seed, render_sample, Augment, DataConfig, FaceSample, IdentitySpec, MaskFill, MaskType, Result,
    SynthError,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub sample_id: usize,
    pub identity: usize,
    /// 0 for mask-free, 1 for masked.
    pub masked: u8,
    /// Empty for mask-free samples.
    pub mask_type: String,
    pub seed: u64,
}

fn bad(detail: impl Into<String>) -> SynthError {
    SynthError::Format {
        what: "manifest",
        detail: detail.into(),
    }
}

impl ManifestRow {
    pub fn from_sample(sample_id: usize, s: &FaceSample) -> Self {
        Self {
            sample_id,
            identity: s.identity,
            masked: s.masked as u8,
            mask_type: s.mask_type.map(|m| m.name().to_string()).unwrap_or_default(),
            seed: s.aug_seed,
        }
    }

    fn check(&self) -> Result<Option<MaskType>> {
        match (self.masked, self.mask_type.as_str()) {
            (0, "") => Ok(None),
            (0, t) => Err(bad(format!(
                "sample {}: mask-free row has mask type {t}",
                self.sample_id
            ))),
            (1, t) => MaskType::parse(t)
                .map(Some)
                .ok_or_else(|| bad(format!("sample {}: unknown mask type {t:?}", self.sample_id))),
            (m, _) => Err(bad(format!("sample {}: mask flag {m} is not 0 or 1", self.sample_id))),
        }
    }

    /// Regenerates the sample this row describes.
    pub fn render(&self, config: &DataConfig) -> Result<FaceSample> {
        let kind = self.check()?;
        let spec = IdentitySpec::new(self.identity, config.seed);
        let clean = render_sample(&spec, self.seed, config.image_size, Augment::from(config));
        match kind {
            None => Ok(clean),
            Some(k) => {
                let masked = apply_mask(&clean, MaskFill::Random, mask_seed(self.seed))?;
                if masked.mask_type != Some(k) {
                    return Err(bad(format!(
                        "sample {}: recorded mask type {} does not match its seed",
                        self.sample_id,
                        k.name()
                    )));
                }
                Ok(masked)
            }
        }
    }
}

/// Parses and validates manifest rows. Lines starting with `#` are
/// comments.
pub fn read_manifest(reader: impl Read) -> Result<Vec<ManifestRow>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
    let mut rows = Vec::new();
    for rec in rdr.deserialize() {
        let row: ManifestRow = rec.map_err(|e| bad(e.to_string()))?;
        row.check()?;
        rows.push(row);
    }
    Ok(rows)
}

/// Writes `rows`, preceded by a `# config <hash>` line when a hash is given.
pub fn write_manifest(mut writer: impl Write, rows: &[ManifestRow], config_hash: Option<&str>) -> Result<()> {
    let io = |source| SynthError::Io {
        path: "<manifest>".into(),
        source,
    };
    if let Some(h) = config_hash {
        writeln!(writer, "# config {h}").map_err(io)?;
    }
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r).map_err(|e| bad(e.to_string()))?;
    }
    w.flush().map_err(io)
}
