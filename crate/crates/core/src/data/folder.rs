use std::fs;
use std::path::{Path, PathBuf};

use super::pgm::{encode_pgm, read_pgm};
use super::LabeledDataset;
use crate::error::{Error, Result};

/// Files of a `root/<class>/<file>` tree, sorted by class then file name.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FolderListing {
    pub class_names: Vec<String>,
    pub files: Vec<(PathBuf, usize)>,
}

impl FolderListing {
    /// Up to `n` files taken round-robin across classes (first file of every
    /// class, then the second, ...), so small samples stay balanced.
    pub fn round_robin(&self, n: usize) -> Vec<(PathBuf, usize)> {
        let mut per_class: Vec<Vec<&(PathBuf, usize)>> = vec![Vec::new(); self.class_names.len()];
        for f in &self.files {
            per_class[f.1].push(f);
        }
        let depth = per_class.iter().map(Vec::len).max().unwrap_or(0);
        (0..depth)
            .flat_map(|i| per_class.iter().filter_map(move |c| c.get(i)))
            .take(n)
            .map(|&f| f.clone())
            .collect()
    }
}

fn visible(name: &str) -> bool {
    !name.starts_with('.')
}

pub fn list_folder(root: impl AsRef<Path>) -> Result<FolderListing> {
    let root = root.as_ref();
    let mut classes: Vec<(String, PathBuf)> = fs::read_dir(root)
        .map_err(|e| Error::dataset(root, e.to_string()))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| {
            let name = e.file_name().to_str()?.to_owned();
            visible(&name).then(|| (name, e.path()))
        })
        .collect();
    if classes.is_empty() {
        return Err(Error::dataset(root, "no class subdirectories"));
    }
    classes.sort();
    let mut files = Vec::new();
    for (label, (name, dir)) in classes.iter().enumerate() {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_file())
            .filter(|e| e.file_name().to_str().is_some_and(visible))
            .map(|e| e.path())
            .collect();
        if entries.is_empty() {
            log::warn!("class `{name}` in {} has no images", root.display());
        }
        entries.sort();
        files.extend(entries.into_iter().map(|p| (p, label)));
    }
    Ok(FolderListing {
        class_names: classes.into_iter().map(|(n, _)| n).collect(),
        files,
    })
}

/// Loads every image under `root/<class>/`. All images must share one size.
pub fn load_folder(root: impl AsRef<Path>) -> Result<LabeledDataset> {
    let listing = list_folder(root)?;
    let mut items = Vec::with_capacity(listing.files.len());
    for (path, label) in &listing.files {
        let img = read_pgm(path)?;
        if let Some((first, _)) = items.first() {
            let first: &crate::tensor::Tensor<f32> = first;
            if first.shape() != img.shape() {
                return Err(Error::dataset(
                    path,
                    format!("image is {:?} but earlier images are {:?}", img.shape(), first.shape()),
                ));
            }
        }
        items.push((img, *label));
    }
    Ok(LabeledDataset {
        items,
        class_names: listing.class_names,
    })
}

/// Writes a dataset as `root/<class>/<index>.pgm`, one directory per class
/// (created even when empty).
pub fn save_folder(ds: &LabeledDataset, root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    for name in &ds.class_names {
        fs::create_dir_all(root.join(name))?;
    }
    for (i, (img, label)) in ds.items.iter().enumerate() {
        let path = root.join(&ds.class_names[*label]).join(format!("{i:06}.pgm"));
        fs::write(path, encode_pgm(img)?)?;
    }
    Ok(())
}
