use crate::audit::BoxAnnotation;
use crate::error::{Error, Result};
use crate::vit::write_atomic;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// A box without the image id, which the owning row supplies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowBox {
    pub finding: String,
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub boxes: Vec<RowBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sex: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age: Option<f64>,
    pub split: Split,
}

impl ManifestRow {
    pub fn new(image: impl Into<PathBuf>, split: Split) -> Self {
        ManifestRow { image: image.into(), labels: None, mask: None, boxes: Vec::new(), sex: None, age: None, split }
    }

    /// Stable identifier used by feature caches and box annotations.
    pub fn id(&self) -> String {
        self.image.to_string_lossy().into_owned()
    }

    /// Group attribute by key: `sex` or `age` (binned Young/Middle/Elder).
    pub fn group(&self, key: &str) -> Result<Option<String>> {
        match key {
            "sex" => Ok(self.sex.clone()),
            "age" => self.age.map(|a| crate::audit::AgeBin::of(a).map(|b| b.name().to_string())).transpose(),
            _ => Err(Error::invalid(format!("unknown group key {}", key))),
        }
    }

    pub fn box_annotations(&self) -> Vec<BoxAnnotation> {
        self.boxes
            .iter()
            .map(|b| BoxAnnotation {
                image_id: self.id(),
                finding: b.finding.clone(),
                x: b.x,
                y: b.y,
                width: b.width,
                height: b.height,
            })
            .collect()
    }
}

/// Rows of images with optional labels, masks, boxes and demographics.
///
/// CSV columns (header required, order free): `image`, `split`, and
/// optionally `labels` (`;`-separated numbers), `mask`, `sex`, `age`.
/// Boxes need the JSON-lines form, one serialized [`ManifestRow`] per line.
/// Relative paths are resolved against the manifest's directory by
/// [`load_manifest`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub rows: Vec<ManifestRow>,
}

pub const CSV_COLUMNS: [&str; 6] = ["image", "labels", "mask", "split", "sex", "age"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ManifestFormat {
    Csv,
    JsonLines,
}

impl ManifestFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("ndjson") => ManifestFormat::JsonLines,
            _ => ManifestFormat::Csv,
        }
    }
}

fn row_err(path: &Path, row: usize, column: &str, detail: impl Into<String>) -> Error {
    Error::Manifest { path: path.to_path_buf(), row, column: column.to_string(), detail: detail.into() }
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn split(&self, split: Split) -> Vec<usize> {
        (0..self.rows.len()).filter(|&i| self.rows[i].split == split).collect()
    }

    pub fn label_width(&self) -> Option<usize> {
        self.rows.iter().find_map(|r| r.labels.as_ref().map(Vec::len))
    }

    /// Checks label widths and box geometry. Row numbers in errors are
    /// 1-based data rows.
    pub fn validate(&self, path: &Path) -> Result<()> {
        let width = self.label_width();
        for (i, r) in self.rows.iter().enumerate() {
            if let (Some(w), Some(l)) = (width, &r.labels) {
                if l.len() != w {
                    return Err(row_err(path, i + 1, "labels", format!("expected {} labels, found {}", w, l.len())));
                }
                if l.iter().any(|v| !v.is_finite()) {
                    return Err(row_err(path, i + 1, "labels", "non-finite label"));
                }
            }
            if let Some(a) = r.age {
                if !(a >= 0.0 && a.is_finite()) {
                    return Err(row_err(path, i + 1, "age", format!("invalid age {}", a)));
                }
            }
            if r.boxes.iter().any(|b| !(b.width > 0.0 && b.height > 0.0 && b.x >= 0.0 && b.y >= 0.0)) {
                return Err(row_err(path, i + 1, "boxes", "boxes need nonnegative origin and positive extent"));
            }
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        if self.rows.iter().any(|r| !r.boxes.is_empty()) {
            return Err(Error::invalid("boxes need the JSON-lines manifest form"));
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_COLUMNS)?;
        for r in &self.rows {
            let labels = r
                .labels
                .as_ref()
                .map(|l| l.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";"))
                .unwrap_or_default();
            w.write_record([
                r.id(),
                labels,
                r.mask.as_ref().map(|m| m.to_string_lossy().into_owned()).unwrap_or_default(),
                r.split.to_string(),
                r.sex.clone().unwrap_or_default(),
                r.age.map(|a| a.to_string()).unwrap_or_default(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn to_jsonl_string(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Parses CSV text; `path` only labels error messages.
    pub fn from_csv_str(text: &str, path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let headers = rdr.headers()?.clone();
        let col: BTreeMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h.trim(), i)).collect();
        for required in ["image", "split"] {
            if !col.contains_key(required) {
                return Err(row_err(path, 0, required, "missing column"));
            }
        }
        if let Some(unknown) = col.keys().find(|k| !CSV_COLUMNS.contains(k)) {
            return Err(row_err(path, 0, unknown, "unknown column"));
        }
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row = i + 1;
            let field = |name: &str| col.get(name).and_then(|&c| rec.get(c)).map(str::trim).unwrap_or("");
            let image = field("image");
            if image.is_empty() {
                return Err(row_err(path, row, "image", "empty image path"));
            }
            let split = Split::parse(field("split"))
                .ok_or_else(|| row_err(path, row, "split", format!("unknown split {:?}; expected train, val or test", field("split"))))?;
            let labels = match field("labels") {
                "" => None,
                s => Some(
                    s.split(';')
                        .map(|v| v.trim().parse::<f64>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|e| row_err(path, row, "labels", e.to_string()))?,
                ),
            };
            let age = match field("age") {
                "" => None,
                s => Some(s.parse::<f64>().map_err(|e| row_err(path, row, "age", e.to_string()))?),
            };
            let opt = |s: &str| (!s.is_empty()).then(|| s.to_string());
            rows.push(ManifestRow {
                image: PathBuf::from(image),
                labels,
                mask: opt(field("mask")).map(PathBuf::from),
                boxes: Vec::new(),
                sex: opt(field("sex")),
                age,
                split,
            });
        }
        let m = DatasetManifest { rows };
        m.validate(path)?;
        Ok(m)
    }

    pub fn from_jsonl_str(text: &str, path: &Path) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let value: serde_json::Value =
                serde_json::from_str(line).map_err(|e| row_err(path, i + 1, "-", e.to_string()))?;
            if let Some(s) = value.get("split").and_then(|s| s.as_str()) {
                if Split::parse(s).is_none() {
                    return Err(row_err(path, i + 1, "split", format!("unknown split {:?}; expected train, val or test", s)));
                }
            }
            let row: ManifestRow = serde_json::from_value(value).map_err(|e| row_err(path, i + 1, "-", e.to_string()))?;
            rows.push(row);
        }
        let m = DatasetManifest { rows };
        m.validate(path)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = match ManifestFormat::from_path(path) {
            ManifestFormat::Csv => self.to_csv_string()?,
            ManifestFormat::JsonLines => self.to_jsonl_string()?,
        };
        write_atomic(path, text.as_bytes())
    }

    /// Rebases relative image and mask paths onto `base`.
    pub fn resolve(&mut self, base: &Path) {
        for r in &mut self.rows {
            if r.image.is_relative() {
                r.image = base.join(&r.image);
            }
            if let Some(m) = &mut r.mask {
                if m.is_relative() {
                    *m = base.join(&*m);
                }
            }
        }
    }
}

/// Reads a manifest without touching the referenced files; paths stay as
/// written.
pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match ManifestFormat::from_path(path) {
        ManifestFormat::Csv => DatasetManifest::from_csv_str(&text, path),
        ManifestFormat::JsonLines => DatasetManifest::from_jsonl_str(&text, path),
    }
}

/// Reads, resolves relative paths, and checks that every image and mask
/// exists.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let mut m = read_manifest(path)?;
    m.resolve(path.parent().unwrap_or(Path::new(".")));
    for (i, r) in m.rows.iter().enumerate() {
        if !r.image.exists() {
            return Err(row_err(path, i + 1, "image", format!("{} does not exist", r.image.display())));
        }
        if let Some(mask) = &r.mask {
            if !mask.exists() {
                return Err(row_err(path, i + 1, "mask", format!("{} does not exist", mask.display())));
            }
        }
    }
    Ok(m)
}
