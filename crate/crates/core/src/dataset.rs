//! Image datasets: IDX container I/O, stratified subsampling and synthetic
//! Gaussian blobs for fast tests.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::oracle::{rng, standard_normal};
use crate::tensor::Tensor;

const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;

/// Images scaled to [0, 1] with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: String,
    /// `[N, D]` pixel matrix.
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Height and width of each image; `rows * cols == D`.
    pub image_shape: (usize, usize),
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.images.row_len()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Sub-dataset made of the listed rows, in the listed order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            split: self.split.clone(),
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            image_shape: self.image_shape,
        }
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn fail(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Idx {
            path: self.path.to_path_buf(),
            offset,
            message: message.into(),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| self.fail(self.bytes.len(), "truncated header"))?;
        self.pos = end;
        Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
    }

    fn payload(&mut self, len: usize) -> Result<&[u8]> {
        let end = self.pos + len;
        if self.bytes.len() < end {
            return Err(self.fail(
                self.bytes.len(),
                format!("truncated payload: expected {len} bytes after offset {}", self.pos),
            ));
        }
        if self.bytes.len() > end {
            return Err(self.fail(end, "trailing bytes after payload"));
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
}

fn read_images(path: &Path) -> Result<(usize, (usize, usize), Vec<f64>)> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        path,
        bytes: &bytes,
        pos: 0,
    };
    let magic = r.u32()?;
    if magic != IMAGE_MAGIC {
        return Err(r.fail(0, format!("image magic {magic}, expected {IMAGE_MAGIC}")));
    }
    let n = r.u32()? as usize;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(r.fail(4, "zero extent in image header"));
    }
    let pixels = r.payload(n * rows * cols)?;
    Ok((n, (rows, cols), pixels.iter().map(|&p| p as f64 / 255.0).collect()))
}

fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        path,
        bytes: &bytes,
        pos: 0,
    };
    let magic = r.u32()?;
    if magic != LABEL_MAGIC {
        return Err(r.fail(0, format!("label magic {magic}, expected {LABEL_MAGIC}")));
    }
    let n = r.u32()? as usize;
    Ok(r.payload(n)?.iter().map(|&l| l as usize).collect())
}

/// Reads an image/label IDX file pair; pixels are scaled by 1/255.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let (n, shape, pixels) = read_images(images)?;
    let labels_v = read_labels(labels)?;
    if labels_v.len() != n {
        return Err(Error::Idx {
            path: labels.to_path_buf(),
            offset: 4,
            message: format!("{} labels for {n} images", labels_v.len()),
        });
    }
    let name = images
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Dataset {
        name,
        split: String::new(),
        images: Tensor::matrix(n, shape.0 * shape.1, pixels)?,
        labels: labels_v,
        image_shape: shape,
    })
}

/// Writes a dataset as an IDX pair. Pixels are rounded to the nearest k/255.
pub fn write_idx(ds: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let (rows, cols) = ds.image_shape;
    if rows * cols != ds.dim() {
        return Err(Error::InvalidParameter("image shape does not match row length".into()));
    }
    if ds.labels.iter().any(|&l| l > 255) {
        return Err(Error::InvalidParameter("IDX labels must fit in a byte".into()));
    }
    let mut out = Vec::with_capacity(16 + ds.images.numel());
    for v in [IMAGE_MAGIC, ds.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(
        ds.images
            .data()
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    fs::write(images, out)?;

    let mut out = Vec::with_capacity(8 + ds.len());
    for v in [LABEL_MAGIC, ds.len() as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(ds.labels.iter().map(|&l| l as u8));
    fs::write(labels, out)?;
    Ok(())
}

/// Which standard split to read from a dataset directory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn file_names(self) -> (&'static str, &'static str) {
        match self {
            Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
            Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Paths of the image and label files for `split` inside `dir`.
pub fn split_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let (i, l) = split.file_names();
    (dir.join(i), dir.join(l))
}

/// Loads one split of an MNIST-family dataset stored under the standard
/// file names in `dir`.
pub fn load_split(name: &str, dir: &Path, split: Split) -> Result<Dataset> {
    let (images, labels) = split_paths(dir, split);
    let mut ds = load_idx(&images, &labels)?;
    ds.name = name.to_string();
    ds.split = split.tag().to_string();
    Ok(ds)
}

/// Class-stratified subsample of `n` rows. Each class receives its
/// proportional share, with leftover slots assigned by largest remainder
/// (ties to the smaller class id). Returned rows keep their original order.
pub fn subsample(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n > ds.len() {
        return Err(Error::InvalidParameter(format!(
            "cannot take {n} rows from a dataset of {}",
            ds.len()
        )));
    }
    let k = ds.num_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let total = ds.len();
    let mut quota: Vec<usize> = by_class.iter().map(|c| c.len() * n / total).collect();
    let mut leftover = n - quota.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..k).collect();
    // remainder of c.len()·n / total, compared exactly in integers
    order.sort_by_key(|&c| std::cmp::Reverse(by_class[c].len() * n % total));
    for &c in order.iter().cycle() {
        if leftover == 0 {
            break;
        }
        if quota[c] < by_class[c].len() {
            quota[c] += 1;
            leftover -= 1;
        }
    }

    let mut r = rng(seed);
    let mut picked = Vec::with_capacity(n);
    for (c, rows) in by_class.iter_mut().enumerate() {
        rows.shuffle(&mut r);
        picked.extend_from_slice(&rows[..quota[c]]);
    }
    picked.sort_unstable();
    Ok(ds.select(&picked))
}

/// `k` Gaussian blobs of `per_class` points in `[0,1]^dim`. Class centers are
/// `0.5 + separation·u_c` with `u_c ~ U(−½, ½)^dim`; points add `N(0, 0.1²)`
/// noise and are clipped to [0, 1].
pub fn synth_blobs(k: usize, per_class: usize, dim: usize, separation: f64, seed: u64) -> Dataset {
    assert!(k >= 1 && per_class >= 1 && dim >= 1);
    let mut r = rng(seed);
    let centers: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..dim).map(|_| 0.5 + separation * r.random_range(-0.5..0.5)).collect())
        .collect();
    let mut data = Vec::with_capacity(k * per_class * dim);
    let mut labels = Vec::with_capacity(k * per_class);
    for i in 0..k * per_class {
        let c = i % k;
        labels.push(c);
        for &m in &centers[c] {
            data.push((m + 0.1 * standard_normal(&mut r)).clamp(0.0, 1.0));
        }
    }
    Dataset {
        name: "synth".into(),
        split: String::new(),
        images: Tensor::matrix(k * per_class, dim, data).expect("blob shape"),
        labels,
        image_shape: (1, dim),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_raw(dir: &Path, images: &[u8], labels: &[u8]) -> (PathBuf, PathBuf) {
        let (i, l) = (dir.join("img"), dir.join("lbl"));
        fs::write(&i, images).unwrap();
        fs::write(&l, labels).unwrap();
        (i, l)
    }

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v
    }

    #[test]
    fn zero_images_load() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = header(2051, &[10, 2, 3]);
        img.extend(std::iter::repeat_n(0u8, 60));
        let mut lbl = header(2049, &[10]);
        lbl.extend((0..10u8).map(|i| i % 3));
        let (i, l) = write_raw(dir.path(), &img, &lbl);
        let ds = load_idx(&i, &l).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.dim(), 6);
        assert!(ds.images.data().iter().all(|&p| p == 0.0));
        assert_eq!(ds.num_classes(), 3);
    }

    #[test]
    fn truncated_payload_names_offset() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = header(2051, &[2, 2, 2]);
        img.extend([1u8, 2, 3]);
        let lbl = [header(2049, &[2]), vec![0, 1]].concat();
        let (i, l) = write_raw(dir.path(), &img, &lbl);
        match load_idx(&i, &l) {
            Err(Error::Idx { offset, .. }) => assert_eq!(offset, 19),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_magic_and_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let img = [header(2049, &[1, 1, 1]), vec![0]].concat();
        let lbl = [header(2049, &[1]), vec![0]].concat();
        let (i, l) = write_raw(dir.path(), &img, &lbl);
        assert!(matches!(load_idx(&i, &l), Err(Error::Idx { offset: 0, .. })));

        let img = [header(2051, &[2, 1, 1]), vec![0, 0]].concat();
        let (i, l) = write_raw(dir.path(), &img, &lbl);
        assert!(matches!(load_idx(&i, &l), Err(Error::Idx { .. })));
    }

    #[test]
    fn balanced_stratification() {
        let ds = synth_blobs(10, 300, 4, 1.0, 1);
        let sub = subsample(&ds, 1000, 7).unwrap();
        for c in 0..10 {
            assert_eq!(sub.labels.iter().filter(|&&l| l == c).count(), 100);
        }
        assert_eq!(sub, subsample(&ds, 1000, 7).unwrap());
        assert_eq!(subsample(&ds, ds.len(), 3).unwrap(), ds);
        assert!(subsample(&ds, ds.len() + 1, 3).is_err());
    }

    #[test]
    fn blobs_stay_in_unit_range() {
        let ds = synth_blobs(3, 50, 8, 5.0, 2);
        assert!(ds.images.data().iter().all(|p| (0.0..=1.0).contains(p)));
        assert_eq!(ds.len(), 150);
    }

    proptest! {
        #[test]
        fn idx_round_trip(pixels in prop::collection::vec(0u8..=255, 12), labels in prop::collection::vec(0u8..4, 3)) {
            let ds = Dataset {
                name: "t".into(),
                split: String::new(),
                images: Tensor::matrix(3, 4, pixels.iter().map(|&p| p as f64 / 255.0).collect()).unwrap(),
                labels: labels.iter().map(|&l| l as usize).collect(),
                image_shape: (2, 2),
            };
            let dir = tempfile::tempdir().unwrap();
            let (i, l) = (dir.path().join("i"), dir.path().join("l"));
            write_idx(&ds, &i, &l).unwrap();
            let mut back = load_idx(&i, &l).unwrap();
            back.name = "t".into();
            prop_assert_eq!(back, ds);
        }

        #[test]
        fn stratified_within_one_per_class(n in 1usize..200, seed in 0u64..50) {
            let mut ds = synth_blobs(4, 60, 2, 1.0, 3);
            // unbalance the classes
            let keep: Vec<usize> = (0..ds.len()).filter(|i| ds.labels[*i] != 3 || i % 3 == 0).collect();
            ds = ds.select(&keep);
            let sub = subsample(&ds, n, seed).unwrap();
            prop_assert_eq!(sub.len(), n);
            for c in 0..4 {
                let have = ds.labels.iter().filter(|&&l| l == c).count() as f64;
                let got = sub.labels.iter().filter(|&&l| l == c).count() as f64;
                prop_assert!((got - have * n as f64 / ds.len() as f64).abs() <= 1.0);
            }
        }
    }
}
