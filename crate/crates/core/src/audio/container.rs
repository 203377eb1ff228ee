//! Flat float32 matrix files and the dataset cache directory.
//!
//! Matrix file: 16-byte header (`b"UFSDMAT1"`, rows: u32 LE, cols: u32 LE)
//! followed by `rows * cols` little-endian f32 values, row-major.
//!
//! Dataset directory: `manifest.txt` with `key=value` lines plus one matrix
//! file per item under `items/`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::logmel::LogMelSpec;
use super::dataset::{DatasetItem, LabeledDataset, Split};
use crate::error::{Error, Result};

pub const MATRIX_MAGIC: &[u8; 8] = b"UFSDMAT1";
pub const DATASET_FORMAT: &str = "unfused-dataset-v1";

pub fn encode_matrix(rows: usize, cols: usize, values: &[f32]) -> Vec<u8> {
    assert_eq!(values.len(), rows * cols);
    let mut out = Vec::with_capacity(16 + 4 * values.len());
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_matrix(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<f32>), String> {
    if bytes.len() < 16 || &bytes[..8] != MATRIX_MAGIC {
        return Err("missing matrix header".into());
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() != 4 * rows * cols {
        return Err(format!(
            "payload is {} bytes, header says {rows}×{cols}",
            body.len()
        ));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((rows, cols, values))
}

pub fn write_matrix(path: impl AsRef<Path>, rows: usize, cols: usize, values: &[f32]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_matrix(rows, cols, values)).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<f32>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_matrix(&bytes).map_err(|reason| Error::Integrity {
        path: path.to_path_buf(),
        reason,
    })
}

pub fn save_dataset(ds: &LabeledDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let items_dir = dir.join("items");
    fs::create_dir_all(&items_dir).map_err(|e| Error::io(&items_dir, e))?;
    let mut manifest = String::new();
    writeln!(manifest, "format={DATASET_FORMAT}").unwrap();
    writeln!(manifest, "class_count={}", ds.class_count).unwrap();
    writeln!(manifest, "item_count={}", ds.items.len()).unwrap();
    for (i, item) in ds.items.iter().enumerate() {
        let file = format!("items/{i:05}.f32");
        write_matrix(
            dir.join(&file),
            item.spec.frames,
            item.spec.mel_bins,
            &item.spec.values,
        )?;
        let label = item.label.map_or("-".to_string(), |l| l.to_string());
        writeln!(
            manifest,
            "item={} {} {} {} {}",
            item.id,
            label,
            item.split.as_str(),
            item.spec.frame_hop,
            file
        )
        .unwrap();
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<LabeledDataset> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let bad = |reason: String| Error::Integrity {
        path: path.clone(),
        reason,
    };
    let mut class_count = None;
    let mut item_count = None;
    let mut items = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("malformed line `{line}`")))?;
        match key {
            "format" if value == DATASET_FORMAT => {}
            "format" => return Err(bad(format!("unknown format `{value}`"))),
            "class_count" => class_count = value.parse::<usize>().ok(),
            "item_count" => item_count = value.parse::<usize>().ok(),
            "item" => {
                let f: Vec<&str> = value.split(' ').collect();
                if f.len() != 5 {
                    return Err(bad(format!("malformed item `{value}`")));
                }
                let label = match f[1] {
                    "-" => None,
                    l => Some(l.parse().map_err(|_| bad(format!("bad label `{l}`")))?),
                };
                let split = Split::parse(f[2]).ok_or_else(|| bad(format!("bad split `{}`", f[2])))?;
                let frame_hop: f64 = f[3].parse().map_err(|_| bad(format!("bad hop `{}`", f[3])))?;
                let (rows, cols, values) = read_matrix(dir.join(f[4]))?;
                items.push(DatasetItem {
                    id: f[0].to_string(),
                    spec: LogMelSpec::new(values, rows, cols, frame_hop)?,
                    label,
                    split,
                });
            }
            other => return Err(bad(format!("unknown key `{other}`"))),
        }
    }
    let class_count = class_count.ok_or_else(|| bad("missing class_count".into()))?;
    if item_count != Some(items.len()) {
        return Err(bad(format!("item_count does not match {} items", items.len())));
    }
    LabeledDataset::new(items, class_count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::synth::generate_synthetic_dataset;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn matrix_round_trip(rows in 0usize..6, cols in 0usize..6, seed in any::<u32>()) {
            let values: Vec<f32> = (0..rows * cols)
                .map(|i| (i as f32 + seed as f32).sin() * 1e3)
                .collect();
            let bytes = encode_matrix(rows, cols, &values);
            prop_assert_eq!(bytes.len(), 16 + 4 * rows * cols);
            let (r, c, v) = decode_matrix(&bytes).unwrap();
            prop_assert_eq!((r, c), (rows, cols));
            prop_assert_eq!(v, values);
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode_matrix(2, 3, &[0.0; 6]);
        assert_eq!(&bytes[..8], b"UFSDMAT1");
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &3u32.to_le_bytes());
        assert!(decode_matrix(&bytes[..20]).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let ds = generate_synthetic_dataset(2, 8, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
    }
}
