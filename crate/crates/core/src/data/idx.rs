use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Reads a file, transparently gunzipping `*.gz`.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::dataset(path, e.to_string()))?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::dataset(path, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::dataset(path, format!("truncated IDX header at byte {offset}")))
}

/// Parses `(dims, payload)` from an IDX container with the given magic.
fn parse_idx<'a>(bytes: &'a [u8], magic: u32, path: &Path) -> Result<(Vec<usize>, &'a [u8])> {
    let found = be_u32(bytes, 0, path)?;
    if found != magic {
        return Err(Error::dataset(
            path,
            format!("bad IDX magic {found:#010x}, expected {magic:#010x}"),
        ));
    }
    let rank = (magic & 0xff) as usize;
    let dims = (0..rank)
        .map(|i| be_u32(bytes, 4 + 4 * i, path).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * rank;
    let len: usize = dims.iter().product();
    let payload = &bytes[start..];
    if payload.len() != len {
        return Err(Error::dataset(
            path,
            format!("header declares {len} bytes of data, found {}", payload.len()),
        ));
    }
    Ok((dims, payload))
}

/// Loads an IDX image/label pair (optionally gzipped). Pixels are scaled by
/// 1/255; the class list is `"0"..=max_label`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let (images_path, labels_path) = (images_path.as_ref(), labels_path.as_ref());
    let image_bytes = read_maybe_gz(images_path)?;
    let label_bytes = read_maybe_gz(labels_path)?;
    let (idims, pixels) = parse_idx(&image_bytes, IMAGES_MAGIC, images_path)?;
    let (ldims, labels) = parse_idx(&label_bytes, LABELS_MAGIC, labels_path)?;
    if idims[0] != ldims[0] {
        return Err(Error::dataset(
            labels_path,
            format!("{} labels for {} images", ldims[0], idims[0]),
        ));
    }
    let (h, w) = (idims[1], idims[2]);
    if h == 0 || w == 0 {
        return Err(Error::dataset(images_path, "zero-sized images"));
    }
    let num_classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    let items = pixels
        .chunks_exact(h * w)
        .zip(labels)
        .map(|(px, &label)| {
            let data: Vec<f32> = px.iter().map(|&p| p as f32 / 255.0).collect();
            (Tensor::from_parts(vec![h, w, 1], data), label as usize)
        })
        .collect();
    Ok(LabeledDataset {
        items,
        class_names: (0..num_classes).map(|c| c.to_string()).collect(),
    })
}

/// Finds the single `*images-idx3-ubyte[.gz]` file in `dir` and its matching
/// `*labels-idx1-ubyte[.gz]` sibling.
pub fn load_idx_dir(dir: impl AsRef<Path>) -> Result<LabeledDataset> {
    let dir = dir.as_ref();
    let images = find_images(dir)?.ok_or_else(|| Error::dataset(dir, "no *images-idx3-ubyte file found"))?;
    let name = images.file_name().unwrap().to_string_lossy();
    let labels = dir.join(name.replace("images-idx3", "labels-idx1"));
    load_idx(&images, &labels)
}

pub(crate) fn find_images(dir: &Path) -> Result<Option<PathBuf>> {
    let mut found: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.ends_with("images-idx3-ubyte") || n.ends_with("images-idx3-ubyte.gz"))
        })
        .collect();
    found.sort();
    match found.len() {
        0 => Ok(None),
        1 => Ok(found.pop()),
        _ => Err(Error::dataset(
            dir,
            "more than one IDX image file; pass the paths explicitly",
        )),
    }
}
