//! Dataset ingestion: class-foldered image trees and packed binary arrays.

use super::{ImageTensor, LabeledImage};
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

/// Magic bytes opening a packed dataset file.
pub const PACKED_MAGIC: &[u8; 8] = b"AFPKDS01";

/// Where a dataset comes from.
///
/// * `ClassDirs`: a directory tree `root/<class_name>/<image files>`,
///   8-bit PNG/JPEG decoded to unit range; class index follows the sorted
///   order of the class directory names.
/// * `Packed`: a single binary file: magic bytes, then H, W, N as u32 LE,
///   then N records of H·W·3 image bytes followed by 1 label byte. An
///   optional JSON index sidecar `<file>.idx.json` lists class names.
#[derive(Debug, Clone)]
pub enum DatasetSource {
    ClassDirs(PathBuf),
    Packed(PathBuf),
}

impl DatasetSource {
    /// Guess the layout from the path: directories are class trees, files
    /// are packed arrays.
    pub fn infer(path: &Path) -> Result<Self> {
        if path.is_dir() {
            Ok(DatasetSource::ClassDirs(path.to_path_buf()))
        } else if path.is_file() {
            Ok(DatasetSource::Packed(path.to_path_buf()))
        } else {
            Err(Error::MissingArtifact(format!(
                "dataset source {}",
                path.display()
            )))
        }
    }

    pub fn path(&self) -> &Path {
        match self {
            DatasetSource::ClassDirs(p) | DatasetSource::Packed(p) => p,
        }
    }
}

/// Load a deterministic subset of a dataset.
///
/// With class folders the sample is balanced per class; a packed file is
/// sampled uniformly. Corrupt image files are skipped with a warning, and
/// more than 1% skipped is an error.
pub fn load_dataset(
    source: &DatasetSource,
    subset_size: usize,
    seed: u64,
) -> Result<Vec<LabeledImage>> {
    if subset_size == 0 {
        return Ok(Vec::new());
    }
    match source {
        DatasetSource::ClassDirs(root) => load_class_dirs(root, subset_size, seed),
        DatasetSource::Packed(path) => load_packed_subset(path, subset_size, seed),
    }
}

fn load_class_dirs(root: &Path, subset_size: usize, seed: u64) -> Result<Vec<LabeledImage>> {
    if !root.is_dir() {
        return Err(Error::MissingArtifact(format!("{}", root.display())));
    }
    let mut class_dirs: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Dataset(format!(
            "no class directories under {}",
            root.display()
        )));
    }
    let k = class_dirs.len();
    // balanced split: subset_size/k each, remainder to the first classes
    let base = subset_size / k;
    let rem = subset_size % k;

    let mut out = Vec::with_capacity(subset_size);
    let mut skipped = 0usize;
    for (label, dir) in class_dirs.iter().enumerate() {
        let want = base + usize::from(label < rem);
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        if files.len() < want {
            return Err(Error::Dataset(format!(
                "class {} has {} images, need {want}",
                dir.display(),
                files.len()
            )));
        }
        let mut rng = crate::nn::seed_rng(seed, &format!("load-class-{label}"));
        files.shuffle(&mut rng);
        let mut taken = 0usize;
        for f in &files {
            if taken == want {
                break;
            }
            match decode_image(f) {
                Ok(image) => {
                    out.push(LabeledImage { image, label });
                    taken += 1;
                }
                Err(e) => {
                    eprintln!("warning: skipping corrupt image {}: {e}", f.display());
                    skipped += 1;
                }
            }
        }
        if taken < want {
            return Err(Error::Dataset(format!(
                "class {} ran out of decodable images",
                dir.display()
            )));
        }
    }
    if skipped * 100 > subset_size {
        return Err(Error::Dataset(format!(
            "{skipped} corrupt images exceeds 1% of requested {subset_size}"
        )));
    }
    Ok(out)
}

fn decode_image(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    ImageTensor::from_u8(img.as_raw(), h as usize, w as usize)
}

/// A packed dataset held fully in memory.
pub struct PackedDataset {
    pub h: usize,
    pub w: usize,
    pub records: Vec<(Vec<u8>, u8)>,
    pub classes: Vec<String>,
}

impl PackedDataset {
    pub fn num_classes(&self) -> usize {
        if !self.classes.is_empty() {
            self.classes.len()
        } else {
            self.records.iter().map(|(_, l)| *l as usize + 1).max().unwrap_or(0)
        }
    }
}

pub fn read_packed(path: &Path) -> Result<PackedDataset> {
    let mut f = std::fs::File::open(path).map_err(|_| {
        Error::MissingArtifact(format!("packed dataset {}", path.display()))
    })?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != PACKED_MAGIC {
        return Err(Error::Dataset(format!(
            "bad magic in {}: {:02x?}",
            path.display(),
            magic
        )));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |f: &mut std::fs::File| -> Result<u32> {
        f.read_exact(&mut u32buf)?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let h = read_u32(&mut f)? as usize;
    let w = read_u32(&mut f)? as usize;
    let n = read_u32(&mut f)? as usize;
    let rec_len = h * w * 3;
    let mut records = Vec::with_capacity(n);
    let mut buf = vec![0u8; rec_len + 1];
    for _ in 0..n {
        f.read_exact(&mut buf)?;
        records.push((buf[..rec_len].to_vec(), buf[rec_len]));
    }
    let classes = read_sidecar(path).unwrap_or_default();
    Ok(PackedDataset {
        h,
        w,
        records,
        classes,
    })
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".idx.json");
    PathBuf::from(os)
}

fn read_sidecar(path: &Path) -> Option<Vec<String>> {
    let text = std::fs::read_to_string(sidecar_path(path)).ok()?;
    let v: serde_json::Value = serde_json::from_str(&text).ok()?;
    v.get("classes")?
        .as_array()?
        .iter()
        .map(|s| s.as_str().map(String::from))
        .collect()
}

pub fn write_packed(
    path: &Path,
    h: usize,
    w: usize,
    records: &[(Vec<u8>, u8)],
    classes: &[String],
) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(PACKED_MAGIC)?;
    f.write_all(&(h as u32).to_le_bytes())?;
    f.write_all(&(w as u32).to_le_bytes())?;
    f.write_all(&(records.len() as u32).to_le_bytes())?;
    for (img, label) in records {
        debug_assert_eq!(img.len(), h * w * 3);
        f.write_all(img)?;
        f.write_all(&[*label])?;
    }
    f.flush()?;
    let sidecar = serde_json::json!({
        "classes": classes,
        "height": h,
        "width": w,
        "count": records.len(),
    });
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

fn load_packed_subset(path: &Path, subset_size: usize, seed: u64) -> Result<Vec<LabeledImage>> {
    let ds = read_packed(path)?;
    if subset_size > ds.records.len() {
        return Err(Error::Dataset(format!(
            "requested {subset_size} images, packed file has {}",
            ds.records.len()
        )));
    }
    let mut idx: Vec<usize> = (0..ds.records.len()).collect();
    let mut rng = crate::nn::seed_rng(seed, "load-packed");
    idx.shuffle(&mut rng);
    idx.truncate(subset_size);
    idx.iter()
        .map(|&i| {
            let (bytes, label) = &ds.records[i];
            Ok(LabeledImage {
                image: ImageTensor::from_u8(bytes, ds.h, ds.w)?,
                label: *label as usize,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(path: &Path, h: u32, w: u32, seed: u8) {
        let img = image::RgbImage::from_fn(w, h, |x, y| {
            image::Rgb([(x as u8).wrapping_mul(seed), y as u8, seed])
        });
        img.save(path).unwrap();
    }

    #[test]
    fn class_dirs_balanced_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        for class in ["alpha", "beta"] {
            let cdir = dir.path().join(class);
            std::fs::create_dir(&cdir).unwrap();
            for i in 0..6 {
                write_png(&cdir.join(format!("img{i}.png")), 16, 16, i as u8 + 1);
            }
        }
        let src = DatasetSource::ClassDirs(dir.path().to_path_buf());
        let a = load_dataset(&src, 8, 7).unwrap();
        assert_eq!(a.len(), 8);
        assert_eq!(a.iter().filter(|r| r.label == 0).count(), 4);
        assert_eq!(a.iter().filter(|r| r.label == 1).count(), 4);
        let b = load_dataset(&src, 8, 7).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.label, y.label);
            assert_eq!(x.image, y.image);
        }
        assert!(load_dataset(&src, 0, 7).unwrap().is_empty());
        assert!(load_dataset(&src, 100, 7).is_err());
    }

    #[test]
    fn corrupt_images_are_skipped_with_replacement() {
        let dir = tempfile::tempdir().unwrap();
        let cdir = dir.path().join("only");
        std::fs::create_dir(&cdir).unwrap();
        for i in 0..100 {
            write_png(&cdir.join(format!("img{i:03}.png")), 8, 8, (i % 200) as u8 + 1);
        }
        std::fs::write(cdir.join("broken.png"), b"not a png").unwrap();
        let src = DatasetSource::ClassDirs(dir.path().to_path_buf());
        // 100 of 101 files: if the corrupt one is drawn it is skipped
        // (1 of 100 = 1%, not over the 1% limit) and replaced by the spare
        let got = load_dataset(&src, 100, 3).unwrap();
        assert_eq!(got.len(), 100);
    }

    #[test]
    fn packed_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.bin");
        let records: Vec<(Vec<u8>, u8)> = (0..10)
            .map(|i| {
                let img: Vec<u8> = (0..8 * 8 * 3).map(|j| ((i * 37 + j) % 256) as u8).collect();
                (img, (i % 3) as u8)
            })
            .collect();
        let classes: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        write_packed(&path, 8, 8, &records, &classes).unwrap();
        let ds = read_packed(&path).unwrap();
        assert_eq!(ds.records, records);
        assert_eq!(ds.classes, classes);
        assert_eq!(ds.num_classes(), 3);
        let subset = load_dataset(&DatasetSource::Packed(path), 4, 9).unwrap();
        assert_eq!(subset.len(), 4);
    }
}
