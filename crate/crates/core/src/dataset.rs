//! Dataset export/import: a directory of PNG pairs plus a JSON-lines index.
//!
//! Layout: `x_00000.png` (clean), `y_00000.png` (degraded), one JSON object
//! per line in `index.jsonl` carrying label, generator parameters, and the
//! seed that produced the pair. Images are written as 16-bit PNG, which keeps
//! the 1/256 storage grid exact across a round trip, so the residual identity
//! `x = y + r_d` holds bitwise for loaded data just as for freshly
//! synthesized data.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::img::ImageBuf;
use crate::weather_synth::{quantize_store, DegradedSample, WeatherLabel};

pub const INDEX_FILE: &str = "index.jsonl";

/// One line of `index.jsonl`. `clean`/`degraded` are file names relative to
/// the dataset directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexEntry {
    pub index: usize,
    pub seed: u64,
    pub label: WeatherLabel,
    pub params: String,
    pub clean: String,
    pub degraded: String,
}

/// A loaded pair plus the provenance recorded at export time.
#[derive(Debug, Clone)]
pub struct DatasetEntry {
    pub sample: DegradedSample,
    pub index: usize,
    pub seed: u64,
}

/// Writes `samples` (produced under `seed`) to `dir`, creating it if needed.
/// Existing files with clashing names are overwritten.
pub fn export_dataset(dir: &Path, samples: &[DegradedSample], seed: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut index = BufWriter::new(File::create(dir.join(INDEX_FILE))?);
    for (i, s) in samples.iter().enumerate() {
        let clean = format!("x_{i:05}.png");
        let degraded = format!("y_{i:05}.png");
        s.x.save_png16(&dir.join(&clean))?;
        s.y.save_png16(&dir.join(&degraded))?;
        let entry = IndexEntry {
            index: i,
            seed,
            label: s.label,
            params: s.params.clone(),
            clean,
            degraded,
        };
        let line = serde_json::to_string(&entry)
            .map_err(|e| Error::Dataset(format!("index entry {i}: {e}")))?;
        writeln!(index, "{line}")?;
    }
    Ok(())
}

/// Reads every entry of `dir`'s index. Loaded images are re-quantized onto
/// the storage grid and the residual recomputed, so the identity
/// `x = y + r_d` holds for the returned samples. The write mask is
/// reconstructed as the support of the residual (generator masks are not
/// part of the on-disk format).
pub fn load_dataset(dir: &Path) -> Result<Vec<DatasetEntry>> {
    let index_path = dir.join(INDEX_FILE);
    if !index_path.exists() {
        return Err(Error::Dataset(format!("missing index {}", index_path.display())));
    }
    let reader = BufReader::new(File::open(&index_path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: IndexEntry = serde_json::from_str(&line)
            .map_err(|e| Error::Dataset(format!("{}:{}: {e}", index_path.display(), lineno + 1)))?;
        let x = ImageBuf::load_png(&dir.join(&entry.clean))?;
        let y = ImageBuf::load_png(&dir.join(&entry.degraded))?;
        if x.h != y.h || x.w != y.w {
            return Err(Error::Dataset(format!(
                "entry {}: clean is {}x{} but degraded is {}x{}",
                entry.index, x.h, x.w, y.h, y.w
            )));
        }
        let mask = vec![1u8; x.h * x.w];
        let sample = DegradedSample::assemble(x, y, entry.label, entry.params.clone(), mask);
        out.push(DatasetEntry { sample, index: entry.index, seed: entry.seed });
    }
    Ok(out)
}

/// Clean-image ingestion for real photos: loads every `.png` in `dir`
/// (sorted by file name), clamped to [0,1] and quantized onto the storage
/// grid. Returns (file stem, image) pairs.
pub fn ingest_image_folder(dir: &Path) -> Result<Vec<(String, ImageBuf)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Dataset(format!("no .png files in {}", dir.display())));
    }
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let mut img = ImageBuf::load_png(&p)?;
        img.clamp01();
        for v in &mut img.data {
            *v = quantize_store(*v);
        }
        let stem = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        out.push((stem, img));
    }
    Ok(out)
}
