//! Dataset files: IDX, CIFAR-10 binary batches, and a raw f64 array format.
//!
//! Raw-array layout (integers little-endian):
//!
//! ```text
//! magic     8 bytes "DFARAW01"
//! n, channels, height, width, n_classes   5 × u32
//! labels    n × u32
//! pixels    n × channels × height × width × f64, row-major, in [0, 1]
//! ```

use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::data::{synthetic, Dataset, SyntheticConfig, SyntheticKind};
use crate::error::{DfaError, Result};
use crate::model::ImageShape;

pub const RAW_MAGIC: &[u8; 8] = b"DFARAW01";
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Auto,
    Idx,
    CifarBinary,
    RawArray,
}

impl std::str::FromStr for DatasetFormat {
    type Err = DfaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(DatasetFormat::Auto),
            "idx" => Ok(DatasetFormat::Idx),
            "cifar-binary" => Ok(DatasetFormat::CifarBinary),
            "raw-array" => Ok(DatasetFormat::RawArray),
            other => Err(DfaError::Config(format!("unknown dataset format `{other}`"))),
        }
    }
}

/// Sequential big/little-endian reader that reports byte offsets on truncation.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, pos: 0, path }
    }

    fn fail(&self, offset: usize, reason: impl Into<String>) -> DfaError {
        DfaError::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(self.fail(self.bytes.len(), format!("truncated while reading {what} ({n} bytes needed at {})", self.pos))),
        }
    }

    fn u32_be(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u32_le(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.fail(self.pos, format!("{} unexpected trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| DfaError::io(path, e))
}

fn n_classes_of(labels: &[usize]) -> usize {
    labels.iter().max().map_or(0, |&m| m + 1)
}

/// Label file next to an IDX image file: `*-images-idx3-ubyte` → `*-labels-idx1-ubyte`.
pub fn idx_labels_path(images: &Path) -> Option<PathBuf> {
    let name = images.file_name()?.to_str()?;
    let swapped = name.replace("images", "labels").replace("idx3", "idx1");
    (swapped != name).then(|| images.with_file_name(swapped))
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let bytes = read(images)?;
    let mut c = Cursor::new(&bytes, images);
    let magic = c.u32_be("magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(c.fail(0, format!("magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let n = c.u32_be("image count")? as usize;
    let h = c.u32_be("rows")? as usize;
    let w = c.u32_be("columns")? as usize;
    let pixels = c.take(n * h * w, "pixels")?;
    c.finish()?;

    let lbytes = read(labels)?;
    let mut lc = Cursor::new(&lbytes, labels);
    let magic = lc.u32_be("magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(lc.fail(0, format!("magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let ln = lc.u32_be("label count")? as usize;
    if ln != n {
        return Err(lc.fail(4, format!("{ln} labels for {n} images")));
    }
    let label_bytes = lc.take(n, "labels")?;
    lc.finish()?;

    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let images = Array2::from_shape_vec((n, h * w), pixels.iter().map(|&p| p as f64 / 255.0).collect())
        .expect("sized from header");
    let k = n_classes_of(&labels);
    Dataset::new(images, labels, ImageShape::new(1, h, w), k)
}

/// One or more CIFAR-10 binary batch files, concatenated in order.
pub fn load_cifar_binary(paths: &[PathBuf]) -> Result<Dataset> {
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for path in paths {
        let bytes = read(path)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            let offset = bytes.len() - bytes.len() % CIFAR_RECORD;
            return Err(DfaError::Format {
                path: path.clone(),
                offset: offset as u64,
                reason: format!("partial record: {} of {CIFAR_RECORD} bytes", bytes.len() % CIFAR_RECORD),
            });
        }
        for (r, record) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            if record[0] >= 10 {
                return Err(DfaError::Format {
                    path: path.clone(),
                    offset: (r * CIFAR_RECORD) as u64,
                    reason: format!("label {} outside 0..10", record[0]),
                });
            }
            labels.push(record[0] as usize);
            pixels.extend(record[1..].iter().map(|&p| p as f64 / 255.0));
        }
    }
    let n = labels.len();
    let images = Array2::from_shape_vec((n, CIFAR_RECORD - 1), pixels).expect("whole records");
    Dataset::new(images, labels, ImageShape::new(3, 32, 32), 10)
}

pub fn load_raw_array(path: &Path) -> Result<Dataset> {
    let bytes = read(path)?;
    let mut c = Cursor::new(&bytes, path);
    if c.take(8, "magic")? != RAW_MAGIC {
        return Err(c.fail(0, "not a raw-array file"));
    }
    let mut dims = [0usize; 5];
    for (d, what) in dims.iter_mut().zip(["count", "channels", "height", "width", "classes"]) {
        *d = c.u32_le(what)? as usize;
    }
    let [n, ch, h, w, k] = dims;
    let label_start = c.pos;
    let labels: Vec<usize> = c.take(4 * n, "labels")?.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().expect("4")) as usize).collect();
    if let Some(i) = labels.iter().position(|&l| l >= k) {
        return Err(c.fail(label_start + 4 * i, format!("label {} outside 0..{k}", labels[i])));
    }
    let len = n * ch * h * w;
    let pixel_start = c.pos;
    let values: Vec<f64> = c.take(8 * len, "pixels")?.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8"))).collect();
    c.finish()?;
    if let Some(i) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(c.fail(pixel_start + 8 * i, format!("pixel {} outside [0, 1]", values[i])));
    }
    let images = Array2::from_shape_vec((n, ch * h * w), values).expect("sized from header");
    Dataset::new(images, labels, ImageShape::new(ch, h, w), k)
}

pub fn encode_raw_array(data: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(28 + 4 * data.len() + 8 * data.images.len());
    out.extend_from_slice(RAW_MAGIC);
    let s = data.shape;
    for v in [data.len(), s.channels, s.height, s.width, data.n_classes] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &l in &data.labels {
        out.extend_from_slice(&(l as u32).to_le_bytes());
    }
    for &p in data.images.iter() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn save_raw_array(data: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, encode_raw_array(data)).map_err(|e| DfaError::io(path, e))
}

/// Writes a single-channel dataset as an IDX image file and label file,
/// quantizing pixels to bytes.
pub fn save_idx(data: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    if data.shape.channels != 1 {
        return Err(DfaError::Config("IDX image files hold single-channel images".into()));
    }
    let mut img = Vec::new();
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for v in [data.len(), data.shape.height, data.shape.width] {
        img.extend_from_slice(&(v as u32).to_be_bytes());
    }
    img.extend(data.images.iter().map(|&p| (p * 255.0).round() as u8));
    let mut lab = Vec::new();
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(data.len() as u32).to_be_bytes());
    lab.extend(data.labels.iter().map(|&l| l as u8));
    std::fs::write(images, img).map_err(|e| DfaError::io(images, e))?;
    std::fs::write(labels, lab).map_err(|e| DfaError::io(labels, e))
}

fn sniff(path: &Path) -> Result<DatasetFormat> {
    let bytes = read(path)?;
    if bytes.starts_with(RAW_MAGIC) {
        Ok(DatasetFormat::RawArray)
    } else if bytes.len() >= 4 && u32::from_be_bytes(bytes[..4].try_into().expect("4")) == IDX_IMAGES_MAGIC {
        Ok(DatasetFormat::Idx)
    } else if !bytes.is_empty() && bytes.len() % CIFAR_RECORD == 0 {
        Ok(DatasetFormat::CifarBinary)
    } else {
        Err(DfaError::Format {
            path: path.to_path_buf(),
            offset: 0,
            reason: "unrecognized dataset format".into(),
        })
    }
}

/// `synthetic:<glyphs|gratings>[:key=value,...]` with keys `classes`,
/// `per_class`, `side`, `noise`, `contrast`, `template_seed`, `sample_seed`.
pub fn parse_synthetic(spec: &str) -> Result<Option<SyntheticConfig>> {
    let Some(rest) = spec.strip_prefix("synthetic:") else {
        return Ok(None);
    };
    let (kind, opts) = rest.split_once(':').unwrap_or((rest, ""));
    let mut cfg = SyntheticConfig {
        kind: match kind {
            "glyphs" => SyntheticKind::Glyphs,
            "gratings" => SyntheticKind::Gratings,
            other => return Err(DfaError::Config(format!("unknown synthetic family `{other}`"))),
        },
        ..Default::default()
    };
    for opt in opts.split(',').filter(|s| !s.is_empty()) {
        let (k, v) = opt
            .split_once('=')
            .ok_or_else(|| DfaError::Config(format!("synthetic option `{opt}` is not key=value")))?;
        let int = || v.parse::<u64>().map_err(|_| DfaError::Config(format!("synthetic {k}: `{v}` is not an integer")));
        let real = || v.parse::<f64>().map_err(|_| DfaError::Config(format!("synthetic {k}: `{v}` is not a number")));
        match k {
            "classes" => cfg.n_classes = int()? as usize,
            "per_class" => cfg.per_class = int()? as usize,
            "side" => cfg.side = int()? as usize,
            "noise" => cfg.noise = real()?,
            "contrast" => cfg.contrast = real()?,
            "template_seed" => cfg.template_seed = int()?,
            "sample_seed" => cfg.sample_seed = int()?,
            other => return Err(DfaError::Config(format!("unknown synthetic option `{other}`"))),
        }
    }
    Ok(Some(cfg))
}

/// Loads a dataset file (or synthetic spec). CIFAR paths may be comma-separated.
pub fn load_dataset(source: &str, format: DatasetFormat, labels: Option<&Path>) -> Result<Dataset> {
    if let Some(cfg) = parse_synthetic(source)? {
        return synthetic(&cfg);
    }
    let paths: Vec<PathBuf> = source.split(',').map(PathBuf::from).collect();
    let format = match format {
        DatasetFormat::Auto => sniff(&paths[0])?,
        f => f,
    };
    match format {
        DatasetFormat::CifarBinary => load_cifar_binary(&paths),
        _ if paths.len() > 1 => Err(DfaError::Config("only CIFAR batches can be concatenated".into())),
        DatasetFormat::RawArray => load_raw_array(&paths[0]),
        DatasetFormat::Idx => {
            let labels = match labels {
                Some(l) => l.to_path_buf(),
                None => idx_labels_path(&paths[0])
                    .ok_or_else(|| DfaError::Config("cannot derive the IDX label path; set the labels key".into()))?,
            };
            load_idx(&paths[0], &labels)
        }
        DatasetFormat::Auto => unreachable!("resolved above"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn small() -> Dataset {
        synthetic(&SyntheticConfig {
            n_classes: 3,
            per_class: 4,
            side: 5,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn raw_array_round_trips_bit_exactly() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.raw");
        let data = small();
        save_raw_array(&data, &path).unwrap();
        let back = load_dataset(path.to_str().unwrap(), DatasetFormat::Auto, None).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn truncated_raw_array_reports_the_offset() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.raw");
        let bytes = encode_raw_array(&small());
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        match load_raw_array(&path) {
            Err(DfaError::Format { offset, .. }) => assert_eq!(offset as usize, bytes.len() - 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn idx_files_match_the_header_contract() {
        let dir = tempdir().unwrap();
        let images = dir.path().join("t10k-images-idx3-ubyte");
        let labels = dir.path().join("t10k-labels-idx1-ubyte");
        let data = small();
        save_idx(&data, &images, &labels).unwrap();
        let bytes = std::fs::read(&images).unwrap();
        assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
        let back = load_dataset(images.to_str().unwrap(), DatasetFormat::Auto, None).unwrap();
        assert_eq!(back.len(), 12);
        assert_eq!(back.shape, ImageShape::new(1, 5, 5));
        assert_eq!(back.labels, data.labels);
        let max_err = back.images.iter().zip(data.images.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max_err <= 0.5 / 255.0 + 1e-12);

        std::fs::write(&images, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(load_idx(&images, &labels), Err(DfaError::Format { .. })));
        let mut wrong = bytes.clone();
        wrong[3] = 1;
        std::fs::write(&images, &wrong).unwrap();
        assert!(matches!(load_idx(&images, &labels), Err(DfaError::Format { offset: 0, .. })));
    }

    #[test]
    fn cifar_records_are_label_plus_3072_bytes() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("data_batch_1.bin");
        let mut bytes = Vec::new();
        for r in 0..3u8 {
            bytes.push(r);
            bytes.extend(std::iter::repeat_n(r * 100, 3072));
        }
        std::fs::write(&path, &bytes).unwrap();
        let d = load_dataset(path.to_str().unwrap(), DatasetFormat::Auto, None).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.shape, ImageShape::new(3, 32, 32));
        assert_eq!(d.labels, vec![0, 1, 2]);
        assert_eq!(d.images[[2, 0]], 200.0 / 255.0);

        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        match load_cifar_binary(std::slice::from_ref(&path)) {
            Err(DfaError::Format { offset, .. }) => assert_eq!(offset as usize, 2 * CIFAR_RECORD),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn synthetic_specs_parse() {
        let cfg = parse_synthetic("synthetic:gratings:per_class=7,contrast=0.5").unwrap().unwrap();
        assert_eq!(cfg.kind, SyntheticKind::Gratings);
        assert_eq!(cfg.per_class, 7);
        assert_eq!(cfg.contrast, 0.5);
        assert!(parse_synthetic("data/train.bin").unwrap().is_none());
        assert!(parse_synthetic("synthetic:faces").is_err());
        assert!(parse_synthetic("synthetic:glyphs:colour=red").is_err());
    }
}
