//! Dataset manifests: one `index,path_R,path_T,path_GT` line per sample,
//! paths relative to the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use crate::datakit::pgm::{read_pgm, write_pgm};
use crate::error::{Error, Result};
use crate::network::Sample;
use crate::tensor::Tensor;

pub const MANIFEST_HEADER: &str = "index,path_R,path_T,path_GT";

/// Writes every sample as three PGMs under `dir` plus `dir/manifest.txt`.
pub fn write_dataset(samples: &[Sample], dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut text = String::from(MANIFEST_HEADER);
    text.push('\n');
    for (i, s) in samples.iter().enumerate() {
        let names = [
            format!("{i:05}_R.pgm"),
            format!("{i:05}_T.pgm"),
            format!("{i:05}_GT.pgm"),
        ];
        for (img, name) in [&s.image_r, &s.image_t, &s.gt].into_iter().zip(&names) {
            write_pgm(img, &dir.join(name))?;
        }
        text.push_str(&format!("{i},{},{},{}\n", names[0], names[1], names[2]));
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Loads every sample of a manifest. Ground truth is binarized at 0.5.
pub fn read_manifest(path: &Path) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line == MANIFEST_HEADER {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 || fields[0].parse::<usize>().is_err() {
            return Err(Error::format("manifest", format!("line {}: `{line}`", n + 1)));
        }
        let image_r = read_pgm(&base.join(fields[1]))?;
        let image_t = read_pgm(&base.join(fields[2]))?;
        let gt = read_pgm(&base.join(fields[3]))?;
        let gt = Tensor::new(
            gt.shape().to_vec(),
            gt.data().iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect(),
        )?;
        samples.push(Sample::new(image_r, image_t, gt)?);
    }
    if samples.is_empty() {
        return Err(Error::format("manifest", "no samples listed"));
    }
    Ok(samples)
}
