//! Dataset loaders and the portable `SDSH` container.
//!
//! SDSH layout, all integers little-endian u32:
//! `"SDSH"`, version, n, then `d` (version 1, tabular) or `H, W, C`
//! (version 2, images), then the class count; `n * dims` binary32 features
//! row-major (images in HWC order), then `n` u8 labels.
//! In memory images are held as `[C, H, W]`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};

pub const SDSH_MAGIC: &[u8; 4] = b"SDSH";
pub const SDSH_TABULAR: u32 = 1;
pub const SDSH_IMAGE: u32 = 2;

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::Decode(format!("truncated header: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u32_be(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::Decode(format!("truncated header: {e}")))?;
    Ok(u32::from_be_bytes(b))
}

fn hwc_to_chw(src: &[f32], h: usize, w: usize, c: usize) -> Vec<f32> {
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[(ch * h + y) * w + x] = src[(y * w + x) * c + ch];
            }
        }
    }
    out
}

fn chw_to_hwc(src: &[f32], h: usize, w: usize, c: usize) -> Vec<f32> {
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[(y * w + x) * c + ch] = src[(ch * h + y) * w + x];
            }
        }
    }
    out
}

pub fn write_sdsh(path: &Path, data: &Dataset) -> Result<()> {
    if data.classes() > 256 {
        return Err(Error::InvalidArgument(format!("{} classes do not fit u8 labels", data.classes())));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(SDSH_MAGIC)?;
    let shape = data.sample_shape();
    let image = match shape.len() {
        1 => false,
        3 => true,
        _ => return Err(Error::Shape(format!("sample shape {shape:?} is neither [d] nor [c, h, w]"))),
    };
    let to_u32 = |v: usize| u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} exceeds u32")));
    w.write_all(&(if image { SDSH_IMAGE } else { SDSH_TABULAR }).to_le_bytes())?;
    w.write_all(&to_u32(data.len())?.to_le_bytes())?;
    if image {
        let (c, h, wd) = (shape[0], shape[1], shape[2]);
        for v in [h, wd, c] {
            w.write_all(&to_u32(v)?.to_le_bytes())?;
        }
    } else {
        w.write_all(&to_u32(shape[0])?.to_le_bytes())?;
    }
    w.write_all(&to_u32(data.classes())?.to_le_bytes())?;
    for i in 0..data.len() {
        let row = if image {
            chw_to_hwc(data.sample(i), shape[1], shape[2], shape[0])
        } else {
            data.sample(i).to_vec()
        };
        for v in row {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    let labels: Vec<u8> = data.labels().iter().map(|&y| y as u8).collect();
    w.write_all(&labels)?;
    w.flush()?;
    Ok(())
}

pub fn read_sdsh(path: &Path) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::Decode(format!("truncated header: {e}")))?;
    if &magic != SDSH_MAGIC {
        return Err(Error::Decode(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    let n = read_u32(&mut r)? as usize;
    let shape = match version {
        SDSH_TABULAR => vec![read_u32(&mut r)? as usize],
        SDSH_IMAGE => {
            let h = read_u32(&mut r)? as usize;
            let w = read_u32(&mut r)? as usize;
            let c = read_u32(&mut r)? as usize;
            vec![c, h, w]
        }
        v => return Err(Error::Decode(format!("unsupported SDSH version {v}"))),
    };
    let classes = read_u32(&mut r)? as usize;
    let width: usize = shape.iter().product();
    let total = n
        .checked_mul(width)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::Decode("feature block size overflows".into()))?;
    let mut raw = vec![0u8; total];
    r.read_exact(&mut raw).map_err(|e| Error::Decode(format!("truncated features: {e}")))?;
    let mut labels_raw = vec![0u8; n];
    r.read_exact(&mut labels_raw).map_err(|e| Error::Decode(format!("truncated labels: {e}")))?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Decode("trailing bytes after labels".into()));
    }
    let mut features: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    if version == SDSH_IMAGE {
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        features = features.chunks_exact(width.max(1)).flat_map(|s| hwc_to_chw(s, h, w, c)).collect();
    }
    Dataset::new(features, shape, labels_raw.into_iter().map(usize::from).collect(), classes)
}

/// Tabular CSV with a header row; the column named `label` holds class
/// indices and every other column is a numeric feature. When `classes` is
/// `None` it is inferred as `max(label) + 1`.
pub fn read_csv(path: &Path, classes: Option<usize>) -> Result<Dataset> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Decode(e.to_string()))?;
    let headers = rdr.headers().map_err(|e| Error::Decode(e.to_string()))?.clone();
    let label_col = headers
        .iter()
        .position(|h| h.trim() == "label")
        .ok_or_else(|| Error::Decode("no column named \"label\"".into()))?;
    let d = headers.len() - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Decode(e.to_string()))?;
        for (j, field) in record.iter().enumerate() {
            let field = field.trim();
            if j == label_col {
                let y: usize = field
                    .parse()
                    .map_err(|_| Error::Decode(format!("row {}: label {field:?} is not a class index", line + 1)))?;
                labels.push(y);
            } else {
                let v: f32 = field
                    .parse()
                    .map_err(|_| Error::Decode(format!("row {}: {field:?} is not a number", line + 1)))?;
                features.push(v);
            }
        }
    }
    let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    Dataset::new(features, vec![d], labels, classes)
}

/// MNIST-style IDX pair: u8 images (`0x00000803`) and u8 labels
/// (`0x00000801`), big-endian headers. Pixels are scaled to `[0, 1]` and the
/// first `limit` samples are kept.
pub fn read_idx(images: &Path, labels: &Path, limit: Option<usize>) -> Result<Dataset> {
    let mut ri = BufReader::new(File::open(images)?);
    if read_u32_be(&mut ri)? != 0x0803 {
        return Err(Error::Decode("image file magic is not 0x00000803".into()));
    }
    let n = read_u32_be(&mut ri)? as usize;
    let h = read_u32_be(&mut ri)? as usize;
    let w = read_u32_be(&mut ri)? as usize;
    let mut rl = BufReader::new(File::open(labels)?);
    if read_u32_be(&mut rl)? != 0x0801 {
        return Err(Error::Decode("label file magic is not 0x00000801".into()));
    }
    if read_u32_be(&mut rl)? as usize != n {
        return Err(Error::Decode("image and label counts differ".into()));
    }
    let keep = limit.map_or(n, |l| l.min(n));
    let mut pixels = vec![0u8; keep * h * w];
    ri.read_exact(&mut pixels).map_err(|e| Error::Decode(format!("truncated images: {e}")))?;
    let mut ys = vec![0u8; keep];
    rl.read_exact(&mut ys).map_err(|e| Error::Decode(format!("truncated labels: {e}")))?;
    let features = pixels.into_iter().map(|p| f32::from(p) / 255.0).collect();
    let labels: Vec<usize> = ys.into_iter().map(usize::from).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    Dataset::new(features, vec![1, h, w], labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;

    #[test]
    fn tabular_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.sdsh");
        let d = synth_blobs(50, 3, 7, 2.0, 1).unwrap();
        write_sdsh(&p, &d).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 4 + 4 * 4 + 50 * 7 * 4 + 50);
        assert_eq!(&bytes[..4], b"SDSH");
        assert_eq!(read_sdsh(&p).unwrap(), d);
    }

    #[test]
    fn image_round_trip_converts_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.sdsh");
        // one 2x2 image with 3 channels; value encodes (c, y, x)
        let chw: Vec<f32> = (0..3).flat_map(|c| (0..4).map(move |i| (c * 10 + i) as f32)).collect();
        let d = Dataset::new(chw, vec![3, 2, 2], vec![1], 2).unwrap();
        write_sdsh(&p, &d).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let first_pixel: Vec<f32> = bytes[28..40].chunks(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        assert_eq!(first_pixel, vec![0.0, 10.0, 20.0]);
        assert_eq!(read_sdsh(&p).unwrap(), d);
    }

    #[test]
    fn corrupt_containers_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.sdsh");
        std::fs::write(&p, b"SDSX\x01\0\0\0").unwrap();
        assert!(matches!(read_sdsh(&p), Err(Error::Decode(_))));
        let d = synth_blobs(4, 2, 2, 1.0, 0).unwrap();
        write_sdsh(&p, &d).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.pop();
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_sdsh(&p), Err(Error::Decode(_))));
    }

    #[test]
    fn csv_uses_label_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "a,label,b\n1.5,0,2\n-1,2,0.25\n").unwrap();
        let d = read_csv(&p, None).unwrap();
        assert_eq!(d.sample_shape(), &[2]);
        assert_eq!(d.features(), &[1.5, 2.0, -1.0, 0.25]);
        assert_eq!(d.labels(), &[0, 2]);
        assert_eq!(d.classes(), 3);
        std::fs::write(&p, "a,b\n1,2\n").unwrap();
        assert!(read_csv(&p, None).is_err());
    }

    #[test]
    fn idx_pair_loads() {
        let dir = tempfile::tempdir().unwrap();
        let (pi, pl) = (dir.path().join("img"), dir.path().join("lbl"));
        let mut img = Vec::new();
        for v in [0x0803u32, 2, 2, 2] {
            img.extend_from_slice(&v.to_be_bytes());
        }
        img.extend_from_slice(&[0, 255, 51, 0, 1, 2, 3, 4]);
        let mut lbl = Vec::new();
        for v in [0x0801u32, 2] {
            lbl.extend_from_slice(&v.to_be_bytes());
        }
        lbl.extend_from_slice(&[7, 3]);
        std::fs::write(&pi, img).unwrap();
        std::fs::write(&pl, lbl).unwrap();
        let d = read_idx(&pi, &pl, Some(1)).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.sample_shape(), &[1, 2, 2]);
        assert_eq!(d.sample(0), &[0.0, 1.0, 0.2, 0.0]);
        assert_eq!(d.labels(), &[7]);
    }
}
