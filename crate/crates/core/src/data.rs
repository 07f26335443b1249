//! Patch datasets on disk: 8-bit RGB PNG images, a labels CSV with one column
//! per class code, and optional 8-bit grayscale label masks.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::taxonomy::{self, CLASSES, NUM_CLASSES};
use crate::tensor::Tensor;

pub const IMAGES_DIR: &str = "images";
pub const MASKS_DIR: &str = "masks";
pub const LABELS_FILE: &str = "labels.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct PatchRecord {
    pub name: String,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    pub labels: [bool; NUM_CLASSES],
    pub mask: Option<LabelMask>,
}

impl PatchRecord {
    /// Labels as a 0/1 tensor of length 27.
    pub fn targets(&self) -> Tensor {
        Tensor::from_fn(vec![NUM_CLASSES], |j| if self.labels[j] { 1.0 } else { 0.0 })
    }

    pub fn label_indices(&self) -> Vec<usize> {
        (0..NUM_CLASSES).filter(|&j| self.labels[j]).collect()
    }
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))?
        .to_rgb8();
    Ok(rgb_to_tensor(&img))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(vec![3, h, w], |k| {
        let (c, p) = (k / (h * w), k % (h * w));
        raw[p * 3 + c] as f32 / 255.0
    })
}

/// Quantizes a `[3, H, W]` tensor in `[0, 1]` to 8-bit RGB.
pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    t.expect_rank(3, "tensor_to_rgb")?;
    if t.shape()[0] != 3 {
        return Err(Error::shape(
            "tensor_to_rgb",
            format!("expected 3 channels, got {:?}", t.shape()),
        ));
    }
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let d = t.data();
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        Rgb([0, 1, 2].map(|c| quantize(d[c * h * w + p])))
    }))
}

/// `round(255 · v)` with clamping to `[0, 1]`.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_png_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    img.save(path)
        .map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))
}

/// Grayscale PNG of a `[H, W]` map in `[0, 1]`.
pub fn write_map_png(path: &Path, map: &Tensor) -> Result<()> {
    map.expect_rank(2, "write_map_png")?;
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let img: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([quantize(map.data()[y as usize * w + x as usize])])
    });
    img.save(path)
        .map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))
}

pub fn write_mask_png(path: &Path, mask: &LabelMask) -> Result<()> {
    let img: GrayImage = ImageBuffer::from_raw(mask.width() as u32, mask.height() as u32, mask.data().to_vec())
        .ok_or_else(|| Error::Data("mask buffer size".into()))?;
    img.save(path)
        .map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))
}

pub fn read_mask_png(path: &Path) -> Result<LabelMask> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    LabelMask::new(h, w, img.into_raw()).map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))
}

fn header() -> Vec<String> {
    std::iter::once("filename".to_string())
        .chain(CLASSES.iter().map(|c| c.code.to_string()))
        .collect()
}

/// Parses a labels CSV. Any malformed row aborts with its 1-based line number.
pub fn read_labels_csv(path: &Path) -> Result<Vec<(String, [bool; NUM_CLASSES])>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))?;
    let head = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))?
        .clone();
    if head.get(0) != Some("filename") || head.len() != NUM_CLASSES + 1 {
        return Err(Error::Data(format!(
            "{}: header must be filename followed by {} class codes",
            path.display(),
            NUM_CLASSES
        )));
    }
    // columns may come in any order; map each to its taxonomy index
    let mut columns = Vec::with_capacity(NUM_CLASSES);
    for code in head.iter().skip(1) {
        let j = taxonomy::index_of(code)
            .ok()
            .filter(|&j| j < NUM_CLASSES)
            .ok_or_else(|| Error::Data(format!("{}: unknown class column {:?}", path.display(), code)))?;
        if columns.contains(&j) {
            return Err(Error::Data(format!(
                "{}: duplicate class column {:?}",
                path.display(),
                code
            )));
        }
        columns.push(j);
    }
    let mut out = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let line = row + 2;
        let rec = rec.map_err(|e| Error::Data(format!("{} line {}: {}", path.display(), line, e)))?;
        let mut labels = [false; NUM_CLASSES];
        for (k, &j) in columns.iter().enumerate() {
            labels[j] = match rec.get(k + 1).map(str::trim) {
                Some("0") => false,
                Some("1") => true,
                other => {
                    return Err(Error::Data(format!(
                        "{} line {}: flag for {} must be 0 or 1, got {:?}",
                        path.display(),
                        line,
                        CLASSES[j].code,
                        other.unwrap_or("")
                    )))
                }
            };
        }
        out.push((rec.get(0).unwrap_or("").to_string(), labels));
    }
    Ok(out)
}

pub fn write_labels_csv(path: &Path, rows: &[(String, [bool; NUM_CLASSES])]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))?;
    let err = |e: csv::Error| Error::Data(format!("{}: {}", path.display(), e));
    w.write_record(header()).map_err(err)?;
    for (name, labels) in rows {
        let mut rec = vec![name.clone()];
        rec.extend(labels.iter().map(|&l| if l { "1" } else { "0" }.to_string()));
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads `images_dir/<filename>` for every CSV row, in row order, with masks
/// from `masks_dir/<filename>` when given.
pub fn load_dataset(images_dir: &Path, labels_csv: &Path, masks_dir: Option<&Path>) -> Result<Vec<PatchRecord>> {
    let rows = read_labels_csv(labels_csv)?;
    let mut out = Vec::with_capacity(rows.len());
    for (line, (name, labels)) in rows.into_iter().enumerate() {
        let path = images_dir.join(&name);
        if !path.is_file() {
            return Err(Error::Data(format!(
                "{} line {}: missing image {}",
                labels_csv.display(),
                line + 2,
                path.display()
            )));
        }
        let image = read_image(&path)?;
        let mask = match masks_dir {
            Some(dir) => Some(read_mask_png(&dir.join(&name))?),
            None => None,
        };
        out.push(PatchRecord {
            name,
            image,
            labels,
            mask,
        });
    }
    Ok(out)
}

/// Standard layout under `root`.
pub fn load_dataset_dir(root: &Path) -> Result<Vec<PatchRecord>> {
    let masks = root.join(MASKS_DIR);
    load_dataset(
        &root.join(IMAGES_DIR),
        &root.join(LABELS_FILE),
        masks.is_dir().then_some(masks.as_path()),
    )
}

pub fn save_dataset_dir(root: &Path, records: &[PatchRecord]) -> Result<()> {
    let images = root.join(IMAGES_DIR);
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let masks = root.join(MASKS_DIR);
    if records.iter().any(|r| r.mask.is_some()) {
        fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
    }
    for r in records {
        write_png_rgb(&images.join(&r.name), &tensor_to_rgb(&r.image)?)?;
        if let Some(m) = &r.mask {
            write_mask_png(&masks.join(&r.name), m)?;
        }
    }
    let rows: Vec<_> = records.iter().map(|r| (r.name.clone(), r.labels)).collect();
    write_labels_csv(&root.join(LABELS_FILE), &rows)
}

/// PNG files in a directory, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(path: &Path, body: &str) {
        fs::write(path, body).unwrap();
    }

    fn csv_row(name: &str, ones: &[usize], bad: Option<&str>) -> String {
        let mut cells = vec![name.to_string()];
        for j in 0..NUM_CLASSES {
            cells.push(if ones.contains(&j) { "1".into() } else { "0".into() });
        }
        if let Some(b) = bad {
            cells[5] = b.to_string();
        }
        cells.join(",")
    }

    #[test]
    fn two_rows_load_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::from_pixel(4, 4, Rgb([255, 0, 51]));
        for n in ["b.png", "a.png"] {
            img.save(dir.path().join(n)).unwrap();
        }
        let csv = dir.path().join("l.csv");
        write(
            &csv,
            &format!(
                "{}\n{}\n{}\n",
                header().join(","),
                csv_row("b.png", &[1], None),
                csv_row("a.png", &[0, 26], None)
            ),
        );
        let recs = load_dataset(dir.path(), &csv, None).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].name, "b.png");
        assert_eq!(recs[1].label_indices(), vec![0, 26]);
        assert_eq!(recs[0].image.shape(), &[3, 4, 4]);
        assert!((recs[0].image.data()[32] - 0.2).abs() < 1e-6);
    }

    #[test]
    fn non_binary_flag_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("l.csv");
        write(
            &csv,
            &format!(
                "{}\n{}\n{}\n",
                header().join(","),
                csv_row("a.png", &[], None),
                csv_row("b.png", &[], Some("2"))
            ),
        );
        let err = read_labels_csv(&csv).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{}", err);
    }

    #[test]
    fn missing_image_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("l.csv");
        write(
            &csv,
            &format!("{}\n{}\n", header().join(","), csv_row("nope.png", &[], None)),
        );
        assert!(matches!(load_dataset(dir.path(), &csv, None), Err(Error::Data(_))));
    }
}
