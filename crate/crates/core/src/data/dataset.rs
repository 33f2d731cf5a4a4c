use std::path::{Path, PathBuf};

use crate::exec::{self, Parallelism};

use super::image::write_file;
use super::labels::{format_label_line, parse_label_line};
use super::{ClassTable, DataError, GroundTruthBox, Image};

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// File stem; also the image id in detection output.
    pub name: String,
    pub image: Image,
    pub boxes: Vec<GroundTruthBox>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: String,
    pub samples: Vec<Sample>,
    pub classes: ClassTable,
    /// Recoverable problems met while loading (missing label files, malformed lines).
    pub issues: Vec<String>,
}

impl Dataset {
    pub fn new(split: impl Into<String>, classes: ClassTable) -> Self {
        Self {
            split: split.into(),
            samples: Vec::new(),
            classes,
            issues: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn instance_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for gt in self.samples.iter().flat_map(|s| &s.boxes) {
            counts[gt.class_id] += 1;
        }
        counts
    }

    /// Splits off the trailing `fraction` of samples as a second dataset.
    pub fn split_tail(mut self, fraction: f64, tail_name: &str) -> (Dataset, Dataset) {
        let n = self.samples.len();
        let tail = ((n as f64) * fraction.clamp(0.0, 1.0)).round() as usize;
        let tail = tail.min(n.saturating_sub(1));
        let samples = self.samples.split_off(n - tail);
        let other = Dataset {
            split: tail_name.to_string(),
            samples,
            classes: self.classes.clone(),
            issues: Vec::new(),
        };
        (self, other)
    }
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("ppm" | "png")
    )
}

/// Loads images and YOLO-format labels matched by file stem, in lexicographic
/// stem order.
pub fn load_dataset(
    images_dir: &Path,
    labels_dir: &Path,
    classes_path: &Path,
) -> Result<Dataset, DataError> {
    let classes = ClassTable::load(classes_path)?;
    load_with_table(images_dir, labels_dir, classes)
}

/// Loads `DIR/images`, `DIR/labels` with `classes` (default `DIR/classes.json`).
pub fn load_dir(dir: &Path, classes: Option<&Path>) -> Result<Dataset, DataError> {
    let default = dir.join("classes.json");
    let classes_path = classes.unwrap_or(&default);
    let mut ds = load_dataset(&dir.join("images"), &dir.join("labels"), classes_path)?;
    ds.split = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(ds)
}

fn load_with_table(
    images_dir: &Path,
    labels_dir: &Path,
    classes: ClassTable,
) -> Result<Dataset, DataError> {
    let entries = std::fs::read_dir(images_dir).map_err(|e| DataError::io(images_dir, e))?;
    let mut files: Vec<(String, PathBuf)> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| DataError::io(images_dir, e))?.path();
        if is_image(&path) {
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            files.push((stem, path));
        }
    }
    files.sort();
    if let Some(w) = files.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(DataError::format(
            &w[1].1,
            format!("two images share the stem {:?}", w[0].0),
        ));
    }
    let loaded = exec::try_map(Parallelism::default(), &files, |(stem, path)| {
        load_sample(stem, path, labels_dir, &classes)
    })?;
    let mut ds = Dataset::new(
        images_dir
            .parent()
            .and_then(|p| p.file_name())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        classes,
    );
    for (sample, issues) in loaded {
        ds.samples.push(sample);
        ds.issues.extend(issues);
    }
    for issue in &ds.issues {
        log::warn!("{issue}");
    }
    Ok(ds)
}

fn load_sample(
    stem: &str,
    image_path: &Path,
    labels_dir: &Path,
    classes: &ClassTable,
) -> Result<(Sample, Vec<String>), DataError> {
    let image = Image::read(image_path)?;
    let label_path = labels_dir.join(format!("{stem}.txt"));
    let mut issues = Vec::new();
    let mut boxes = Vec::new();
    match std::fs::read_to_string(&label_path) {
        Ok(text) => {
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                match parse_label_line(line) {
                    Ok(gt) if gt.class_id >= classes.len() => {
                        return Err(DataError::UnknownClass {
                            file: label_path,
                            line: i + 1,
                            class_id: gt.class_id,
                            classes: classes.len(),
                        })
                    }
                    Ok(gt) => boxes.push(gt),
                    Err(e) => issues.push(format!("{}:{}: {e}", label_path.display(), i + 1)),
                }
            }
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            issues.push(format!("{}: no label file, treated as empty", label_path.display()));
        }
        Err(e) => return Err(DataError::io(label_path, e)),
    }
    Ok((
        Sample {
            name: stem.to_string(),
            image,
            boxes,
        },
        issues,
    ))
}

/// Writes `images/*.ppm`, `labels/*.txt` and `classes.json` under `dir`.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<(), DataError> {
    let images = dir.join("images");
    let labels = dir.join("labels");
    for d in [&images, &labels] {
        std::fs::create_dir_all(d).map_err(|e| DataError::io(d, e))?;
    }
    write_file(&dir.join("classes.json"), ds.classes.to_json().as_bytes())?;
    for s in &ds.samples {
        s.image.write_ppm(&images.join(format!("{}.ppm", s.name)))?;
        let mut text = String::new();
        for gt in &s.boxes {
            text.push_str(&format_label_line(gt));
            text.push('\n');
        }
        write_file(&labels.join(format!("{}.txt", s.name)), text.as_bytes())?;
    }
    Ok(())
}
