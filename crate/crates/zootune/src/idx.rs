//! IDX files: big-endian magic `0x0000 08 NN` (unsigned bytes, `NN`
//! dimensions), one big-endian `u32` per dimension, then the raw bytes.
//! Images are `N×H×W` (single channel) or `N×C×H×W`.

use std::path::Path;

use zootune_core::data::Dataset;

use crate::atomic::Outputs;
use crate::error::{Error, Result};

pub const UBYTE: u8 = 0x08;

pub fn encode(dims: &[usize], data: &[u8]) -> Result<Vec<u8>> {
    if dims.iter().product::<usize>() != data.len() {
        return Err(Error::Format(format!("{} bytes do not fill dimensions {dims:?}", data.len())));
    }
    let mut out = vec![0, 0, UBYTE, dims.len() as u8];
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} too large")))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(data);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(Vec<usize>, &[u8])> {
    let need = |offset: usize, needed: usize| {
        if bytes.len() < offset + needed {
            Err(Error::Length { offset, needed, available: bytes.len().saturating_sub(offset) })
        } else {
            Ok(())
        }
    };
    need(0, 4)?;
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != UBYTE {
        return Err(Error::Format(format!("bad IDX magic {:02x?}", &bytes[..4])));
    }
    let rank = bytes[3] as usize;
    need(4, 4 * rank)?;
    let dims: Vec<usize> = (0..rank)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let start = 4 + 4 * rank;
    let n: usize = dims.iter().product();
    need(start, n)?;
    if bytes.len() != start + n {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - start - n)));
    }
    Ok((dims, &bytes[start..]))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn in_file(path: &Path, e: Error) -> Error {
    match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    }
}

/// Builds a dataset from image and label bytes. Without `classes` the
/// class count is one more than the largest label.
pub fn dataset_from_bytes(images: &[u8], labels: &[u8], classes: Option<usize>, provenance: &str) -> Result<Dataset> {
    let (idims, pixels) = decode(images)?;
    let (channels, side) = match idims.as_slice() {
        [_, h, w] if h == w => (1, *h),
        [_, c, h, w] if h == w => (*c, *h),
        _ => return Err(Error::Format(format!("image dimensions {idims:?} are not N×H×W or N×C×H×W with H = W"))),
    };
    let (ldims, labels) = decode(labels)?;
    if ldims.len() != 1 {
        return Err(Error::Format(format!("label dimensions {ldims:?} are not one-dimensional")));
    }
    if ldims[0] != idims[0] {
        return Err(Error::Format(format!("{} images but {} labels", idims[0], ldims[0])));
    }
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |&m| m + 1));
    Ok(Dataset::new(pixels.to_vec(), labels, channels, side, classes, provenance)?)
}

pub fn load_idx(images: &Path, labels: &Path, classes: Option<usize>) -> Result<Dataset> {
    let (ib, lb) = (read(images)?, read(labels)?);
    dataset_from_bytes(&ib, &lb, classes, &images.display().to_string()).map_err(|e| in_file(images, e))
}

/// `(images, labels)` IDX bytes of a dataset; images are written with four
/// dimensions.
pub fn dataset_to_bytes(d: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let labels: Vec<u8> = d
        .labels
        .iter()
        .map(|&l| u8::try_from(l).map_err(|_| Error::Format(format!("label {l} does not fit a byte"))))
        .collect::<Result<_>>()?;
    Ok((encode(&[d.len(), d.channels, d.side, d.side], &d.pixels)?, encode(&[d.len()], &labels)?))
}

pub fn save_idx(d: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let (ib, lb) = dataset_to_bytes(d)?;
    let mut out = Outputs::default();
    out.add(images, ib);
    out.add(labels, lb);
    out.commit()
}

/// File names of one split inside a data directory.
pub fn split_paths(dir: &Path, split: &str) -> (std::path::PathBuf, std::path::PathBuf) {
    (dir.join(format!("{split}-images.idx")), dir.join(format!("{split}-labels.idx")))
}

/// Loads `train` and `test` splits with a shared class count.
pub fn load_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let (ti, tl) = split_paths(dir, "train");
    let (vi, vl) = split_paths(dir, "test");
    let mut train = load_idx(&ti, &tl, None)?;
    let mut test = load_idx(&vi, &vl, None)?;
    let classes = train.classes.max(test.classes);
    train.classes = classes;
    test.classes = classes;
    Ok((train, test))
}
