//! Dataset parsing, normalization, and seeded sampling.
//!
//! Raw digit corpora arrive as IDX files (the MNIST container format).
//! Everything is normalized to 16x16 single-channel tensors in `[0,1]` and
//! stored in a small binary archive format that round-trips bit-exactly.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_SIDE: usize = 16;
pub const NUM_CLASSES: usize = 10;

/// Batchable labeled examples; implemented by both dataset kinds so the
/// pairing and training code is agnostic to image-versus-vector inputs.
pub trait Examples {
    fn len(&self) -> usize;
    fn labels(&self) -> &[u8];
    /// Model-ready input batch for the given rows.
    fn gather_inputs(&self, rows: &[u32]) -> Result<Tensor<f32>>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows grouped by class label, dataset order preserved.
    fn by_class(&self) -> Vec<Vec<u32>> {
        group_by_class(self.labels())
    }
}

pub fn group_by_class(labels: &[u8]) -> Vec<Vec<u32>> {
    let mut by_class = vec![Vec::new(); NUM_CLASSES];
    for (i, &l) in labels.iter().enumerate() {
        by_class[usize::from(l)].push(i as u32);
    }
    by_class
}

impl Examples for ImageDataset {
    fn len(&self) -> usize {
        self.labels.len()
    }
    fn labels(&self) -> &[u8] {
        &self.labels
    }
    fn gather_inputs(&self, rows: &[u32]) -> Result<Tensor<f32>> {
        self.images.gather_rows(rows)
    }
}

impl Examples for VectorDataset {
    fn len(&self) -> usize {
        self.labels.len()
    }
    fn labels(&self) -> &[u8] {
        &self.labels
    }
    fn gather_inputs(&self, rows: &[u32]) -> Result<Tensor<f32>> {
        self.features.gather_rows(rows)
    }
}

/// Labeled single-channel images, normalized to `[0,1]` at 16x16.
#[derive(Clone, Debug)]
pub struct ImageDataset {
    images: Tensor<f32>,
    labels: Vec<u8>,
    pub domain_tag: String,
    pub provenance: String,
}

impl ImageDataset {
    pub fn new(
        images: Tensor<f32>,
        labels: Vec<u8>,
        domain_tag: impl Into<String>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != 1 || shape[2] != IMAGE_SIDE || shape[3] != IMAGE_SIDE {
            return Err(Error::shape(
                "image_dataset",
                format!("expected [N,1,{0},{0}], got {shape:?}", IMAGE_SIDE),
            ));
        }
        if shape[0] != labels.len() {
            return Err(Error::shape(
                "image_dataset",
                format!("{} images vs {} labels", shape[0], labels.len()),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| usize::from(l) >= NUM_CLASSES) {
            return Err(Error::invalid("image_dataset", format!("label {bad} out of range")));
        }
        if let Some(bad) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid("image_dataset", format!("pixel {bad} outside [0,1]")));
        }
        Ok(ImageDataset {
            images,
            labels,
            domain_tag: domain_tag.into(),
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    /// Rows grouped by class, preserving dataset order within each class.
    pub fn class_indices(&self) -> Vec<Vec<u32>> {
        group_by_class(&self.labels)
    }

    /// Image batch for the given rows, shape `[B,1,16,16]`.
    pub fn gather(&self, rows: &[u32]) -> Result<Tensor<f32>> {
        self.images.gather_rows(rows)
    }

    pub fn gather_labels(&self, rows: &[u32]) -> Vec<u8> {
        rows.iter().map(|&r| self.labels[r as usize]).collect()
    }

    /// New dataset from a row subset (in the given order).
    pub fn subset(&self, rows: &[u32], provenance: impl Into<String>) -> Result<ImageDataset> {
        ImageDataset::new(
            self.images.gather_rows(rows)?,
            self.gather_labels(rows),
            self.domain_tag.clone(),
            provenance,
        )
    }
}

/// Labeled feature vectors, for corpora that ship as precomputed embeddings
/// rather than raw images.
#[derive(Clone, Debug)]
pub struct VectorDataset {
    features: Tensor<f32>,
    labels: Vec<u8>,
    pub domain_tag: String,
}

impl VectorDataset {
    pub fn new(features: Tensor<f32>, labels: Vec<u8>, domain_tag: impl Into<String>) -> Result<Self> {
        let (n, _) = features.dims2("vector_dataset")?;
        if n != labels.len() {
            return Err(Error::shape(
                "vector_dataset",
                format!("{} rows vs {} labels", n, labels.len()),
            ));
        }
        Ok(VectorDataset { features, labels, domain_tag: domain_tag.into() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn features(&self) -> &Tensor<f32> {
        &self.features
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }
}

// ---------------------------------------------------------------------------
// IDX container
// ---------------------------------------------------------------------------

const IDX_MAGIC_LABELS: u32 = 0x0000_0801;
const IDX_MAGIC_IMAGES: u32 = 0x0000_0803;

/// Contents of one IDX file.
#[derive(Debug, Clone, PartialEq)]
pub enum IdxFile {
    /// `n` images of `h` x `w` bytes, row-major.
    Images { n: usize, h: usize, w: usize, pixels: Vec<u8> },
    Labels(Vec<u8>),
}

fn read_be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Idx { offset, detail: format!("truncated while reading {what}") });
    }
    Ok(u32::from_be_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]]))
}

/// Parses an IDX byte stream (big-endian headers, u8 payload).
pub fn parse_idx(bytes: &[u8]) -> Result<IdxFile> {
    let magic = read_be_u32(bytes, 0, "magic")?;
    match magic {
        IDX_MAGIC_LABELS => {
            let n = read_be_u32(bytes, 4, "label count")? as usize;
            let expected = 8 + n;
            if bytes.len() < expected {
                return Err(Error::Idx {
                    offset: bytes.len(),
                    detail: format!("label payload ends early, expected {expected} bytes"),
                });
            }
            Ok(IdxFile::Labels(bytes[8..8 + n].to_vec()))
        }
        IDX_MAGIC_IMAGES => {
            let n = read_be_u32(bytes, 4, "image count")? as usize;
            let h = read_be_u32(bytes, 8, "rows")? as usize;
            let w = read_be_u32(bytes, 12, "cols")? as usize;
            let expected = 16 + n * h * w;
            if bytes.len() < expected {
                return Err(Error::Idx {
                    offset: bytes.len(),
                    detail: format!("image payload ends early, expected {expected} bytes"),
                });
            }
            Ok(IdxFile::Images { n, h, w, pixels: bytes[16..expected].to_vec() })
        }
        other => Err(Error::Idx {
            offset: 0,
            detail: format!("unrecognized magic 0x{other:08x} (want 0x00000801 or 0x00000803)"),
        }),
    }
}

// ---------------------------------------------------------------------------
// Pixel transforms
// ---------------------------------------------------------------------------

/// Bilinear resize of one channel to 16x16 with corner-aligned sampling
/// (`scale = (in-1)/(out-1)`); a 16x16 input passes through unchanged.
pub fn resize_bilinear(img: &[f32], h: usize, w: usize) -> Result<Vec<f32>> {
    if h < 2 || w < 2 {
        return Err(Error::invalid("resize_bilinear", format!("degenerate input {h}x{w}")));
    }
    if img.len() != h * w {
        return Err(Error::shape("resize_bilinear", format!("{h}x{w} vs {} pixels", img.len())));
    }
    let out = IMAGE_SIDE;
    let sy = (h - 1) as f32 / (out - 1) as f32;
    let sx = (w - 1) as f32 / (out - 1) as f32;
    let mut res = vec![0.0f32; out * out];
    for oy in 0..out {
        let fy = oy as f32 * sy;
        let y0 = (fy.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let dy = fy - y0 as f32;
        for ox in 0..out {
            let fx = ox as f32 * sx;
            let x0 = (fx.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let dx = fx - x0 as f32;
            let top = img[y0 * w + x0] * (1.0 - dx) + img[y0 * w + x1] * dx;
            let bot = img[y1 * w + x0] * (1.0 - dx) + img[y1 * w + x1] * dx;
            res[oy * out + ox] = top * (1.0 - dy) + bot * dy;
        }
    }
    Ok(res)
}

/// Luminance conversion `0.299 R + 0.587 G + 0.114 B` of a `[3,H,W]` image.
pub fn rgb_to_gray(img: &[f32], channels: usize, h: usize, w: usize) -> Result<Vec<f32>> {
    if channels != 3 {
        return Err(Error::invalid("rgb_to_gray", format!("expected 3 channels, got {channels}")));
    }
    if img.len() != 3 * h * w {
        return Err(Error::shape("rgb_to_gray", format!("3x{h}x{w} vs {} values", img.len())));
    }
    let plane = h * w;
    let mut out = vec![0.0f32; plane];
    for i in 0..plane {
        out[i] = 0.299 * img[i] + 0.587 * img[plane + i] + 0.114 * img[2 * plane + i];
    }
    Ok(out)
}

/// Decoded IDX images -> normalized dataset (divide by 255, resize to 16x16).
pub fn idx_to_dataset(
    images: &IdxFile,
    labels: &IdxFile,
    domain_tag: &str,
    provenance: &str,
) -> Result<ImageDataset> {
    let (n, h, w, pixels) = match images {
        IdxFile::Images { n, h, w, pixels } => (*n, *h, *w, pixels),
        IdxFile::Labels(_) => return Err(Error::invalid("idx_to_dataset", "images argument holds labels")),
    };
    let labels = match labels {
        IdxFile::Labels(l) => l,
        IdxFile::Images { .. } => {
            return Err(Error::invalid("idx_to_dataset", "labels argument holds images"))
        }
    };
    if labels.len() != n {
        return Err(Error::shape("idx_to_dataset", format!("{} images vs {} labels", n, labels.len())));
    }
    let mut data = Vec::with_capacity(n * IMAGE_SIDE * IMAGE_SIDE);
    let mut scratch = vec![0.0f32; h * w];
    for i in 0..n {
        let src = &pixels[i * h * w..(i + 1) * h * w];
        for (s, &p) in scratch.iter_mut().zip(src) {
            *s = f32::from(p) / 255.0;
        }
        if h == IMAGE_SIDE && w == IMAGE_SIDE {
            data.extend_from_slice(&scratch);
        } else {
            data.extend_from_slice(&resize_bilinear(&scratch, h, w)?);
        }
    }
    ImageDataset::new(
        Tensor::new(vec![n, 1, IMAGE_SIDE, IMAGE_SIDE], data)?,
        labels.clone(),
        domain_tag,
        provenance,
    )
}

// ---------------------------------------------------------------------------
// Canonical archive (on-disk format)
// ---------------------------------------------------------------------------

const ARCHIVE_MAGIC: &[u8; 4] = b"FADA";
const ARCHIVE_VERSION: u8 = 0x01;

/// Raw archive contents: `N x C x H x W` little-endian f32 values plus one
/// label byte per item. Vector data uses `H = W = 1` with `C` as the width.
#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalArchive {
    pub n: u32,
    pub c: u32,
    pub h: u32,
    pub w: u32,
    pub values: Vec<f32>,
    pub labels: Vec<u8>,
}

impl CanonicalArchive {
    pub fn from_image_dataset(ds: &ImageDataset) -> Self {
        CanonicalArchive {
            n: ds.len() as u32,
            c: 1,
            h: IMAGE_SIDE as u32,
            w: IMAGE_SIDE as u32,
            values: ds.images().data().to_vec(),
            labels: ds.labels().to_vec(),
        }
    }

    pub fn from_vector_dataset(ds: &VectorDataset) -> Self {
        CanonicalArchive {
            n: ds.len() as u32,
            c: ds.dim() as u32,
            h: 1,
            w: 1,
            values: ds.features().data().to_vec(),
            labels: ds.labels().to_vec(),
        }
    }

    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        let count = self.n as usize * self.c as usize * self.h as usize * self.w as usize;
        if count != self.values.len() || self.n as usize != self.labels.len() {
            return Err(Error::Archive(format!(
                "inconsistent archive: {}x{}x{}x{} vs {} values, {} labels",
                self.n,
                self.c,
                self.h,
                self.w,
                self.values.len(),
                self.labels.len()
            )));
        }
        out.write_all(ARCHIVE_MAGIC)?;
        out.write_all(&[ARCHIVE_VERSION])?;
        for field in [self.n, self.c, self.h, self.w] {
            out.write_all(&field.to_le_bytes())?;
        }
        for v in &self.values {
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(&self.labels)?;
        Ok(())
    }

    pub fn read_from(input: &mut impl Read) -> Result<Self> {
        let mut head = [0u8; 21];
        input.read_exact(&mut head).map_err(|e| Error::Archive(format!("header: {e}")))?;
        if &head[0..4] != ARCHIVE_MAGIC {
            return Err(Error::Archive(format!("bad magic {:?}", &head[0..4])));
        }
        if head[4] != ARCHIVE_VERSION {
            return Err(Error::Archive(format!("unsupported version {}", head[4])));
        }
        let read_u32 =
            |i: usize| u32::from_le_bytes([head[5 + 4 * i], head[6 + 4 * i], head[7 + 4 * i], head[8 + 4 * i]]);
        let (n, c, h, w) = (read_u32(0), read_u32(1), read_u32(2), read_u32(3));
        let count = n as usize * c as usize * h as usize * w as usize;
        let mut raw = vec![0u8; count * 4];
        input.read_exact(&mut raw).map_err(|e| Error::Archive(format!("values: {e}")))?;
        let values = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let mut labels = vec![0u8; n as usize];
        input.read_exact(&mut labels).map_err(|e| Error::Archive(format!("labels: {e}")))?;
        Ok(CanonicalArchive { n, c, h, w, values, labels })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }

    /// Interprets the archive as normalized 16x16 single-channel images.
    pub fn to_image_dataset(&self, domain_tag: &str, provenance: &str) -> Result<ImageDataset> {
        if self.c != 1 || self.h != IMAGE_SIDE as u32 || self.w != IMAGE_SIDE as u32 {
            return Err(Error::Archive(format!(
                "archive is {}x{}x{}, expected 1x{side}x{side}; run convert first",
                self.c,
                self.h,
                self.w,
                side = IMAGE_SIDE
            )));
        }
        ImageDataset::new(
            Tensor::new(
                vec![self.n as usize, 1, IMAGE_SIDE, IMAGE_SIDE],
                self.values.clone(),
            )?,
            self.labels.clone(),
            domain_tag,
            provenance,
        )
    }

    /// Interprets a `H = W = 1` archive as feature vectors of width `C`.
    pub fn to_vector_dataset(&self, domain_tag: &str) -> Result<VectorDataset> {
        if self.h != 1 || self.w != 1 {
            return Err(Error::Archive(format!(
                "archive is {}x{}x{}, expected Cx1x1 for vector data",
                self.c, self.h, self.w
            )));
        }
        VectorDataset::new(
            Tensor::new(vec![self.n as usize, self.c as usize], self.values.clone())?,
            self.labels.clone(),
            domain_tag,
        )
    }
}

// ---------------------------------------------------------------------------
// Seeded sampling
// ---------------------------------------------------------------------------

/// First `k` entries of a seeded partial Fisher-Yates shuffle of `0..n`.
fn sample_without_replacement(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<u32> {
    let mut pool: Vec<u32> = (0..n as u32).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// Uniform subsample of `count` items without replacement.
pub fn sample_source_subset(ds: &ImageDataset, count: usize, seed: u64) -> Result<ImageDataset> {
    if count > ds.len() {
        return Err(Error::invalid(
            "sample_source_subset",
            format!("requested {count} of {}", ds.len()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = sample_without_replacement(&mut rng, ds.len(), count);
    ds.subset(&rows, format!("{} subset {count} seed {seed}", ds.provenance))
}

/// Splits off up to `n_per_class` samples per class for few-shot training;
/// the rest form the held-out complement. Classes absent from the dataset
/// are permitted and reported with a warning.
pub fn sample_few_shot_target(
    ds: &ImageDataset,
    n_per_class: usize,
    seed: u64,
) -> Result<(ImageDataset, ImageDataset)> {
    if n_per_class < 1 {
        return Err(Error::invalid("sample_few_shot_target", "n must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let by_class = ds.class_indices();
    let absent: Vec<usize> = (0..NUM_CLASSES).filter(|&c| by_class[c].is_empty()).collect();
    if !absent.is_empty() {
        log::warn!(
            "few-shot split of {}: no samples at all for classes {:?}",
            ds.domain_tag,
            absent
        );
    }
    let mut picked = vec![false; ds.len()];
    for rows in &by_class {
        if rows.is_empty() {
            continue;
        }
        let take = n_per_class.min(rows.len());
        let chosen = sample_without_replacement(&mut rng, rows.len(), take);
        for &c in &chosen {
            picked[rows[c as usize] as usize] = true;
        }
    }
    let train_rows: Vec<u32> = (0..ds.len() as u32).filter(|&i| picked[i as usize]).collect();
    let heldout_rows: Vec<u32> = (0..ds.len() as u32).filter(|&i| !picked[i as usize]).collect();
    let train = ds.subset(
        &train_rows,
        format!("{} {}-shot train seed {seed}", ds.provenance, n_per_class),
    )?;
    let heldout = ds.subset(
        &heldout_rows,
        format!("{} {}-shot heldout seed {seed}", ds.provenance, n_per_class),
    )?;
    Ok((train, heldout))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_image_bytes(n: usize, h: usize, w: usize, pixels: &[u8]) -> Vec<u8> {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IDX_MAGIC_IMAGES.to_be_bytes());
        bytes.extend_from_slice(&(n as u32).to_be_bytes());
        bytes.extend_from_slice(&(h as u32).to_be_bytes());
        bytes.extend_from_slice(&(w as u32).to_be_bytes());
        bytes.extend_from_slice(pixels);
        bytes
    }

    fn idx_label_bytes(labels: &[u8]) -> Vec<u8> {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IDX_MAGIC_LABELS.to_be_bytes());
        bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        bytes.extend_from_slice(labels);
        bytes
    }

    fn tiny_dataset(labels: &[u8]) -> ImageDataset {
        let n = labels.len();
        let images =
            Tensor::from_fn(vec![n, 1, IMAGE_SIDE, IMAGE_SIDE], |i| ((i % 7) as f32) / 7.0);
        ImageDataset::new(images, labels.to_vec(), "toy", "synthetic").unwrap()
    }

    #[test]
    fn parse_idx_hand_built_images() {
        let pixels: Vec<u8> = (0u8..18).collect();
        let parsed = parse_idx(&idx_image_bytes(2, 3, 3, &pixels)).unwrap();
        assert_eq!(parsed, IdxFile::Images { n: 2, h: 3, w: 3, pixels });
    }

    #[test]
    fn parse_idx_hand_built_labels() {
        let parsed = parse_idx(&idx_label_bytes(&[7, 2])).unwrap();
        assert_eq!(parsed, IdxFile::Labels(vec![7, 2]));
    }

    #[test]
    fn parse_idx_rejects_empty_and_reports_offset() {
        match parse_idx(&[]) {
            Err(Error::Idx { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected idx error, got {other:?}"),
        }
    }

    #[test]
    fn parse_idx_rejects_wrong_magic() {
        let mut bytes = idx_label_bytes(&[1]);
        bytes[3] = 0x99;
        assert!(matches!(parse_idx(&bytes), Err(Error::Idx { offset: 0, .. })));
    }

    #[test]
    fn parse_idx_rejects_truncated_payload() {
        let pixels: Vec<u8> = (0u8..18).collect();
        let mut bytes = idx_image_bytes(2, 3, 3, &pixels);
        bytes.truncate(bytes.len() - 4);
        match parse_idx(&bytes) {
            Err(Error::Idx { offset, detail }) => {
                assert_eq!(offset, 30);
                assert!(detail.contains("34"), "expected total in report: {detail}");
            }
            other => panic!("expected idx error, got {other:?}"),
        }
    }

    #[test]
    fn resize_constant_stays_constant() {
        let img = vec![0.4f32; 20 * 11];
        let out = resize_bilinear(&img, 20, 11).unwrap();
        assert!(out.iter().all(|&v| (v - 0.4).abs() < 1e-6));
    }

    #[test]
    fn resize_identity_at_16() {
        let img: Vec<f32> = (0..256).map(|i| (i as f32) / 255.0).collect();
        let out = resize_bilinear(&img, 16, 16).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn resize_ramp_keeps_endpoints_and_linearity() {
        // horizontal ramp over 32 columns: v = x/31, so the corner-aligned
        // resample at x = ox*31/15 gives exactly ox/15.
        let img: Vec<f32> = (0..32 * 32).map(|i| (i % 32) as f32 / 31.0).collect();
        let out = resize_bilinear(&img, 32, 32).unwrap();
        for oy in 0..16 {
            for ox in 0..16 {
                let expect = ox as f32 / 15.0;
                assert!(
                    (out[oy * 16 + ox] - expect).abs() < 1e-5,
                    "({oy},{ox}): {} vs {expect}",
                    out[oy * 16 + ox]
                );
            }
        }
        assert!((out[0] - 0.0).abs() < 1e-6);
        assert!((out[15] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn resize_rejects_degenerate() {
        assert!(resize_bilinear(&[1.0], 1, 1).is_err());
        assert!(resize_bilinear(&[1.0, 2.0], 1, 2).is_err());
    }

    #[test]
    fn gray_white_is_one_red_is_0299() {
        let white = vec![1.0f32; 3 * 2 * 2];
        let out = rgb_to_gray(&white, 3, 2, 2).unwrap();
        assert!(out.iter().all(|&v| (v - 1.0).abs() < 1e-6));

        let mut red = vec![0.0f32; 3 * 2 * 2];
        red[..4].fill(1.0);
        let out = rgb_to_gray(&red, 3, 2, 2).unwrap();
        assert!(out.iter().all(|&v| (v - 0.299).abs() < 1e-6));
    }

    #[test]
    fn gray_preserves_replicated_gray() {
        let plane: Vec<f32> = (0..4).map(|i| i as f32 / 5.0).collect();
        let mut img = plane.clone();
        img.extend_from_slice(&plane);
        img.extend_from_slice(&plane);
        let out = rgb_to_gray(&img, 3, 2, 2).unwrap();
        for (o, e) in out.iter().zip(&plane) {
            assert!((o - e).abs() < 1e-6);
        }
    }

    #[test]
    fn gray_rejects_wrong_channel_count() {
        assert!(rgb_to_gray(&[0.0; 8], 2, 2, 2).is_err());
    }

    #[test]
    fn archive_roundtrip_is_bit_exact() {
        let ds = tiny_dataset(&[3, 1, 4, 1, 5]);
        let arch = CanonicalArchive::from_image_dataset(&ds);
        let mut buf = Vec::new();
        arch.write_to(&mut buf).unwrap();
        let back = CanonicalArchive::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(arch, back);
        let mut buf2 = Vec::new();
        back.write_to(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn archive_rejects_bad_magic() {
        let ds = tiny_dataset(&[0]);
        let mut buf = Vec::new();
        CanonicalArchive::from_image_dataset(&ds).write_to(&mut buf).unwrap();
        buf[0] = b'X';
        assert!(CanonicalArchive::read_from(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn vector_archive_roundtrips_through_dataset() {
        let ds = VectorDataset::new(
            Tensor::from_fn(vec![4, 7], |i| i as f32 * 0.5),
            vec![0, 1, 2, 3],
            "decaf",
        )
        .unwrap();
        let arch = CanonicalArchive::from_vector_dataset(&ds);
        let back = arch.to_vector_dataset("decaf").unwrap();
        assert_eq!(back.features().data(), ds.features().data());
        assert_eq!(back.labels(), ds.labels());
        assert!(arch.to_image_dataset("x", "y").is_err());
    }

    #[test]
    fn source_subset_full_count_is_permutation() {
        let ds = tiny_dataset(&[0, 1, 2, 3, 4, 5, 6]);
        let sub = sample_source_subset(&ds, 7, 11).unwrap();
        let mut labels = sub.labels().to_vec();
        labels.sort_unstable();
        assert_eq!(labels, vec![0, 1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn source_subset_is_seed_deterministic() {
        let ds = tiny_dataset(&[0, 1, 2, 3, 4, 5, 6, 7, 8, 9]);
        let a = sample_source_subset(&ds, 4, 42).unwrap();
        let b = sample_source_subset(&ds, 4, 42).unwrap();
        assert_eq!(a.labels(), b.labels());
        assert_eq!(a.images().data(), b.images().data());
        let c = sample_source_subset(&ds, 4, 43).unwrap();
        assert!(a.labels() != c.labels() || a.images().data() != c.images().data());
    }

    #[test]
    fn source_subset_rejects_overdraw() {
        let ds = tiny_dataset(&[0, 1]);
        assert!(sample_source_subset(&ds, 3, 0).is_err());
    }

    #[test]
    fn few_shot_n1_takes_one_per_class() {
        let labels: Vec<u8> = (0..30).map(|i| (i % 10) as u8).collect();
        let ds = tiny_dataset(&labels);
        let (train, heldout) = sample_few_shot_target(&ds, 1, 5).unwrap();
        assert_eq!(train.len(), 10);
        assert_eq!(heldout.len(), 20);
        let mut seen = train.labels().to_vec();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<u8>>());
    }

    #[test]
    fn few_shot_large_n_takes_everything() {
        let ds = tiny_dataset(&[0, 0, 1, 2]);
        let (train, heldout) = sample_few_shot_target(&ds, 50, 5).unwrap();
        assert_eq!(train.len(), 4);
        assert_eq!(heldout.len(), 0);
    }

    #[test]
    fn few_shot_is_a_partition() {
        let labels: Vec<u8> = (0..53).map(|i| (i % 7) as u8).collect();
        let ds = tiny_dataset(&labels);
        let (train, heldout) = sample_few_shot_target(&ds, 3, 9).unwrap();
        assert_eq!(train.len() + heldout.len(), ds.len());
        for c in 0..10u8 {
            let total = labels.iter().filter(|&&l| l == c).count();
            let t = train.labels().iter().filter(|&&l| l == c).count();
            let h = heldout.labels().iter().filter(|&&l| l == c).count();
            assert_eq!(t + h, total);
            assert!(t <= 3);
        }
    }

    #[test]
    fn few_shot_rejects_zero_n() {
        let ds = tiny_dataset(&[0]);
        assert!(sample_few_shot_target(&ds, 0, 1).is_err());
    }
}
