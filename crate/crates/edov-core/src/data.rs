//! Canonical dataset representation, ingestion, stratified splitting, and
//! value-range conversion.
//!
//! Pixels live as unit-range `f32` in C×H×W order; 8-bit sources convert as
//! value/255. Sample ids are stable across reloads so marked-index sets and
//! probe sets survive round trips through the packed on-disk format.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array3, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"EDOVDS01";

/// One image: unit-range reals, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub pixels: Array3<f32>,
    /// Whether the source material was 8-bit (loaded from disk) rather than
    /// synthesized directly in unit range.
    pub eight_bit_source: bool,
}

impl Image {
    pub fn new(pixels: Array3<f32>) -> Self {
        debug_assert!(pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        Image {
            pixels,
            eight_bit_source: false,
        }
    }

    pub fn from_u8(bytes: &[u8], c: usize, h: usize, w: usize) -> Result<Self> {
        if bytes.len() != c * h * w {
            return Err(Error::ShapeMismatch(format!(
                "expected {} bytes for {}x{}x{}, got {}",
                c * h * w,
                c,
                h,
                w,
                bytes.len()
            )));
        }
        let pixels = Array3::from_shape_vec(
            (c, h, w),
            bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        )
        .expect("shape checked above");
        Ok(Image {
            pixels,
            eight_bit_source: true,
        })
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let s = self.pixels.shape();
        (s[0], s[1], s[2])
    }
}

/// Images with integer class labels over K classes and stable sample ids.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub ids: Vec<u64>,
}

impl LabeledDataset {
    pub fn new(
        images: Vec<Image>,
        labels: Vec<usize>,
        class_names: Vec<String>,
        ids: Vec<u64>,
    ) -> Result<Self> {
        if images.len() != labels.len() || images.len() != ids.len() {
            return Err(Error::ShapeMismatch(format!(
                "images/labels/ids length mismatch: {}/{}/{}",
                images.len(),
                labels.len(),
                ids.len()
            )));
        }
        let k = class_names.len();
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Precondition(format!(
                "label {bad} out of range for K={k}"
            )));
        }
        if let Some(first) = images.first() {
            let shape = first.shape();
            if images.iter().any(|img| img.shape() != shape) {
                return Err(Error::ShapeMismatch(
                    "all images in a dataset must share one shape".into(),
                ));
            }
        }
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != ids.len() {
            return Err(Error::Precondition("sample ids must be unique".into()));
        }
        Ok(LabeledDataset {
            images,
            labels,
            class_names,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn k(&self) -> usize {
        self.class_names.len()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.images
            .first()
            .map(Image::shape)
            .unwrap_or((0, 0, 0))
    }

    /// Copy the listed samples into a dense N×C×H×W batch.
    pub fn gather_batch(&self, indices: &[usize]) -> Array4<f32> {
        let (c, h, w) = self.shape();
        let mut out = Array4::zeros((indices.len(), c, h, w));
        for (row, &idx) in indices.iter().enumerate() {
            out.index_axis_mut(ndarray::Axis(0), row)
                .assign(&self.images[idx].pixels);
        }
        out
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
        }
    }

    /// Sample positions grouped by label, in ascending position order.
    pub fn per_class_indices(&self) -> Vec<Vec<usize>> {
        let mut bins = vec![Vec::new(); self.k()];
        for (i, &l) in self.labels.iter().enumerate() {
            bins[l].push(i);
        }
        bins
    }

    pub fn index_of_id(&self, id: u64) -> Option<usize> {
        self.ids.iter().position(|&x| x == id)
    }
}

/// Deterministic stratified split request.
#[derive(Debug, Clone)]
pub struct SplitSpec {
    pub seed: u64,
    pub fractions: Vec<f64>,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.fractions.is_empty() {
            return Err(Error::Precondition("split needs at least one fraction".into()));
        }
        if self.fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return Err(Error::Precondition(
                "split fractions must lie in (0,1]".into(),
            ));
        }
        let sum: f64 = self.fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Precondition(format!(
                "split fractions must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct SplitOutcome {
    pub parts: Vec<LabeledDataset>,
    pub warnings: Vec<String>,
}

/// Stratified split: per-class proportions land within one sample of the
/// requested fractions, and the parts form a disjoint cover of the input.
pub fn split(dataset: &LabeledDataset, spec: &SplitSpec) -> Result<SplitOutcome> {
    spec.validate()?;
    if dataset.is_empty() {
        return Err(Error::Precondition("cannot split an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut part_indices: Vec<Vec<usize>> = vec![Vec::new(); spec.fractions.len()];
    let mut warnings = Vec::new();
    for (class, mut members) in dataset.per_class_indices().into_iter().enumerate() {
        members.shuffle(&mut rng);
        let n = members.len();
        let mut cum = 0.0;
        let mut taken = 0usize;
        for (pi, &frac) in spec.fractions.iter().enumerate() {
            cum += frac;
            let boundary = if pi + 1 == spec.fractions.len() {
                n
            } else {
                (cum * n as f64).round() as usize
            };
            let count = boundary.saturating_sub(taken).min(n - taken);
            if count == 0 && n > 0 {
                warnings.push(format!(
                    "class {class} produced an empty stratum for fraction index {pi}"
                ));
            }
            part_indices[pi].extend(&members[taken..taken + count]);
            taken += count;
        }
    }
    let parts = part_indices
        .into_iter()
        .map(|mut idxs| {
            idxs.sort_unstable();
            dataset.subset(&idxs)
        })
        .collect();
    Ok(SplitOutcome { parts, warnings })
}

/// On-disk layouts understood by `load_dataset`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    FolderPerClass,
    PackedBinary,
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<LabeledDataset> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    match format {
        DatasetFormat::FolderPerClass => load_folder_per_class(path),
        DatasetFormat::PackedBinary => load_packed(path),
    }
}

fn load_folder_per_class(root: &Path) -> Result<LabeledDataset> {
    let mut class_dirs: Vec<_> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::ZeroClasses(root.to_path_buf()));
    }
    let class_names: Vec<String> = class_dirs
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();

    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut expected_shape: Option<(usize, usize, usize)> = None;
    for (label, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.extension()
                    .map(|e| e.eq_ignore_ascii_case("png"))
                    .unwrap_or(false)
            })
            .collect();
        files.sort();
        for file in files {
            let img = load_png(&file)?;
            match expected_shape {
                None => expected_shape = Some(img.shape()),
                Some(s) if s != img.shape() => {
                    return Err(Error::ShapeMismatch(format!(
                        "{} has shape {:?}, dataset uses {:?}",
                        file.display(),
                        img.shape(),
                        s
                    )))
                }
                _ => {}
            }
            images.push(img);
            labels.push(label);
        }
    }
    let ids = (0..images.len() as u64).collect();
    LabeledDataset::new(images, labels, class_names, ids)
}

fn load_png(path: &Path) -> Result<Image> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => {
            return Err(Error::Format(format!(
                "{}: unsupported png color type {other:?}",
                path.display()
            )))
        }
    };
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format(format!(
            "{}: only 8-bit png supported",
            path.display()
        )));
    }
    // Drop any alpha channel; transpose HWC -> CHW.
    let c_out = channels.min(3);
    let mut pixels = Array3::zeros((c_out, h, w));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c_out {
                pixels[[ch, y, x]] = buf[(y * w + x) * channels + ch] as f32 / 255.0;
            }
        }
    }
    Ok(Image {
        pixels,
        eight_bit_source: true,
    })
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::io(path, e))
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}

fn load_packed(path: &Path) -> Result<LabeledDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, path)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad dataset magic {:?}",
            path.display(),
            magic
        )));
    }
    let n = read_u32(&mut r, path)? as usize;
    let k = read_u32(&mut r, path)? as usize;
    let c = read_u32(&mut r, path)? as usize;
    let h = read_u32(&mut r, path)? as usize;
    let w = read_u32(&mut r, path)? as usize;
    if k == 0 {
        return Err(Error::ZeroClasses(path.to_path_buf()));
    }
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n);
    let mut pixel_buf = vec![0u8; c * h * w];
    for _ in 0..n {
        let mut id_b = [0u8; 8];
        read_exact(&mut r, &mut id_b, path)?;
        let mut label_b = [0u8; 2];
        read_exact(&mut r, &mut label_b, path)?;
        read_exact(&mut r, &mut pixel_buf, path)?;
        ids.push(u64::from_le_bytes(id_b));
        labels.push(u16::from_le_bytes(label_b) as usize);
        images.push(Image::from_u8(&pixel_buf, c, h, w)?);
    }
    let class_names = (0..k).map(|i| format!("class_{i}")).collect();
    LabeledDataset::new(images, labels, class_names, ids)
}

/// Write the packed-binary layout. Pixels quantize to 8 bits; a reload
/// changes no pixel by more than 1/255.
pub fn save_packed(dataset: &LabeledDataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let (c, hh, ww) = dataset.shape();
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    write(DATASET_MAGIC)?;
    write(&(dataset.len() as u32).to_le_bytes())?;
    write(&(dataset.k() as u32).to_le_bytes())?;
    write(&(c as u32).to_le_bytes())?;
    write(&(hh as u32).to_le_bytes())?;
    write(&(ww as u32).to_le_bytes())?;
    for i in 0..dataset.len() {
        write(&dataset.ids[i].to_le_bytes())?;
        write(&(dataset.labels[i] as u16).to_le_bytes())?;
        write(&dataset.images[i].to_u8())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy_dataset(n_per_class: usize, k: usize) -> LabeledDataset {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for class in 0..k {
            for i in 0..n_per_class {
                let v = ((class * n_per_class + i) % 256) as f32 / 255.0;
                images.push(Image::new(Array3::from_elem((3, 4, 4), v)));
                labels.push(class);
            }
        }
        let ids = (0..images.len() as u64).collect();
        let class_names = (0..k).map(|i| format!("class_{i}")).collect();
        LabeledDataset::new(images, labels, class_names, ids).unwrap()
    }

    #[test]
    fn unit_range_conversion() {
        let img = Image::from_u8(&[255, 0, 128], 3, 1, 1).unwrap();
        assert_eq!(img.pixels[[0, 0, 0]], 1.0);
        assert_eq!(img.pixels[[1, 0, 0]], 0.0);
    }

    #[test]
    fn stratified_split_counts() {
        let ds = toy_dataset(10, 10); // n=100, K=10 balanced
        let spec = SplitSpec {
            seed: 7,
            fractions: vec![0.8, 0.2],
        };
        let out = split(&ds, &spec).unwrap();
        assert_eq!(out.parts[0].len(), 80);
        assert_eq!(out.parts[1].len(), 20);
        for part in &out.parts {
            let bins = part.per_class_indices();
            let expect = part.len() / 10;
            for b in bins {
                assert!((b.len() as isize - expect as isize).abs() <= 1);
            }
        }
    }

    #[test]
    fn identity_split() {
        let ds = toy_dataset(3, 2);
        let out = split(
            &ds,
            &SplitSpec {
                seed: 1,
                fractions: vec![1.0],
            },
        )
        .unwrap();
        assert_eq!(out.parts.len(), 1);
        assert_eq!(out.parts[0].len(), ds.len());
    }

    #[test]
    fn split_is_deterministic_partition() {
        let ds = toy_dataset(7, 3);
        let spec = SplitSpec {
            seed: 42,
            fractions: vec![0.5, 0.3, 0.2],
        };
        let a = split(&ds, &spec).unwrap();
        let b = split(&ds, &spec).unwrap();
        for (pa, pb) in a.parts.iter().zip(&b.parts) {
            assert_eq!(pa.ids, pb.ids);
        }
        let mut all: Vec<u64> = a.parts.iter().flat_map(|p| p.ids.clone()).collect();
        all.sort_unstable();
        let mut orig = ds.ids.clone();
        orig.sort_unstable();
        assert_eq!(all, orig);
    }

    #[test]
    fn packed_roundtrip_ids_and_labels() {
        let ds = toy_dataset(4, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.bin");
        save_packed(&ds, &path).unwrap();
        let re = load_dataset(&path, DatasetFormat::PackedBinary).unwrap();
        assert_eq!(re.ids, ds.ids);
        assert_eq!(re.labels, ds.labels);
        let re2 = load_dataset(&path, DatasetFormat::PackedBinary).unwrap();
        assert_eq!(re2.ids, re.ids);
    }

    #[test]
    fn packed_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"NOTMAGIC____").unwrap();
        assert!(matches!(
            load_dataset(&path, DatasetFormat::PackedBinary),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn missing_path_error() {
        assert!(matches!(
            load_dataset(Path::new("/nonexistent/xyz"), DatasetFormat::FolderPerClass),
            Err(Error::MissingPath(_))
        ));
    }

    proptest! {
        #[test]
        fn quantization_roundtrip_within_one_step(vals in proptest::collection::vec(0.0f32..=1.0, 12)) {
            let img = Image::new(Array3::from_shape_vec((3, 2, 2), vals.clone()).unwrap());
            let back = Image::from_u8(&img.to_u8(), 3, 2, 2).unwrap();
            for (a, b) in img.pixels.iter().zip(back.pixels.iter()) {
                prop_assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6);
            }
        }
    }
}
