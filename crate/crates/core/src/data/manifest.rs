use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::TaskSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        }
    }
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitTag {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(SplitTag::Train),
            "val" | "valid" | "validation" => Ok(SplitTag::Val),
            "test" => Ok(SplitTag::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(usize),
    Score(f64),
}

impl Label {
    pub fn score(self) -> Option<f64> {
        match self {
            Label::Score(s) => Some(s),
            Label::Class(_) => None,
        }
    }

    pub fn class(self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(c),
            Label::Score(_) => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Class(c) => write!(f, "{c}"),
            Label::Score(s) => write!(f, "{s}"),
        }
    }
}

/// One labelled image of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub image_path: PathBuf,
    pub label: Label,
    pub dataset_id: String,
    pub reference_id: Option<String>,
    pub split_tag: Option<SplitTag>,
}

impl Sample {
    /// Decodes the image as 8-bit RGB: alpha is dropped, grayscale is
    /// replicated across channels.
    pub fn load_image(&self) -> Result<RgbImage> {
        load_rgb(&self.image_path)
    }

    /// Stable identifier used in reports: the file stem.
    pub fn image_id(&self) -> String {
        self.image_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.image_path.display().to_string())
    }
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?;
    Ok(img.to_rgb8())
}

/// A manifest loaded for one task.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub id: String,
    pub task: TaskSpec,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn load(path: &Path, id: impl Into<String>, task: TaskSpec) -> Result<Self> {
        let id = id.into();
        let samples = load_manifest(path, &id, &task)?;
        Ok(Self { id, task, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn has_references(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.reference_id.is_some())
    }

    pub fn subset(&self, indices: &[usize]) -> Vec<Sample> {
        indices.iter().map(|&i| self.samples[i].clone()).collect()
    }
}

struct Columns {
    path: usize,
    label: usize,
    split: Option<usize>,
    reference: Option<usize>,
}

fn columns(path: &Path, headers: &csv::StringRecord) -> Result<Columns> {
    let find = |names: &[&str]| {
        headers
            .iter()
            .position(|h| names.contains(&h.trim().to_ascii_lowercase().as_str()))
    };
    let missing = |col: &str| Error::Manifest {
        path: path.to_path_buf(),
        row: 1,
        message: format!("missing `{col}` column"),
    };
    Ok(Columns {
        path: find(&["path"]).ok_or_else(|| missing("path"))?,
        label: find(&["label"]).ok_or_else(|| missing("label"))?,
        split: find(&["split", "split_tag"]),
        reference: find(&["reference_id"]),
    })
}

fn parse_label(raw: &str, task: &TaskSpec) -> std::result::Result<Label, Error> {
    let raw = raw.trim();
    if task.kind.is_classification() {
        if let Ok(c) = raw.parse::<usize>() {
            if let Some(n) = task.num_classes {
                if c >= n {
                    return Err(Error::Data(format!("class {c} out of range for {n} classes")));
                }
            }
            return Ok(Label::Class(c));
        }
        if raw.parse::<f64>().is_ok() {
            return Err(Error::TaskMismatch(format!(
                "label `{raw}` is a real-valued score but the task is classification"
            )));
        }
        return Err(Error::Data(format!("label `{raw}` is not a class index")));
    }
    match raw.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Label::Score(v)),
        Ok(_) => Err(Error::Data(format!("label `{raw}` is not finite"))),
        Err(_) => Err(Error::Data(format!("label `{raw}` is not numeric"))),
    }
}

/// Reads a `path,label[,split,reference_id]` CSV.
///
/// Relative image paths resolve against the manifest's directory. Images
/// are not opened here; unreadable files surface on first access. Rows are
/// numbered from 1 with the header as row 1.
pub fn load_manifest(path: &Path, dataset_id: &str, task: &TaskSpec) -> Result<Vec<Sample>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let cols = columns(path, reader.headers()?)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record?;
        let at = |message: String| Error::Manifest {
            path: path.to_path_buf(),
            row,
            message,
        };
        let get = |idx: usize| record.get(idx).unwrap_or("").trim();
        let image = get(cols.path);
        if image.is_empty() {
            return Err(at("empty path".into()));
        }
        let label = match parse_label(get(cols.label), task) {
            Ok(l) => l,
            Err(Error::TaskMismatch(m)) => {
                return Err(Error::TaskMismatch(format!("{}: row {row}: {m}", path.display())))
            }
            Err(e) => return Err(at(e.to_string())),
        };
        let split_tag = match cols.split.map(get).filter(|s| !s.is_empty()) {
            Some(s) => Some(s.parse::<SplitTag>().map_err(at)?),
            None => None,
        };
        let reference_id = cols
            .reference
            .map(get)
            .filter(|s| !s.is_empty())
            .map(str::to_owned);
        samples.push(Sample {
            image_path: base.join(image),
            label,
            dataset_id: dataset_id.to_owned(),
            reference_id,
            split_tag,
        });
    }
    Ok(samples)
}

/// Writes samples back as a manifest, paths relative to `path`'s directory
/// where possible.
pub fn write_manifest(path: &Path, samples: &[Sample]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let base = std::path::absolute(base).map_err(|e| Error::io(base, e))?;
    let mut w = csv::Writer::from_path(path)?;
    let with_ref = samples.iter().any(|s| s.reference_id.is_some());
    let mut header = vec!["path", "label", "split"];
    if with_ref {
        header.push("reference_id");
    }
    w.write_record(&header)?;
    for s in samples {
        let abs = std::path::absolute(&s.image_path).map_err(|e| Error::io(&s.image_path, e))?;
        let rel = abs.strip_prefix(&base).map(Path::to_path_buf).unwrap_or(abs);
        let mut rec = vec![
            rel.to_string_lossy().into_owned(),
            s.label.to_string(),
            s.split_tag.map(|t| t.to_string()).unwrap_or_default(),
        ];
        if with_ref {
            rec.push(s.reference_id.clone().unwrap_or_default());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
