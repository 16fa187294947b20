//! Annotation ingestion: COCO-style JSON and a two-column TSV form.
//!
//! Both parsers produce an [`AnnotationDataset`] whose categories are densely
//! indexed `0..N` in first-seen order. The statistics layer only looks at
//! [`presence_sets`]; boxes are kept for joins with region features.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnnotError {
    #[error("malformed JSON: {0}")]
    MalformedJson(String),
    #[error("missing field `{field}` in {array}{}", index.map(|i| format!("[{i}]")).unwrap_or_default())]
    MissingField {
        array: &'static str,
        index: Option<usize>,
        field: &'static str,
    },
    #[error("invalid field `{field}` in {array}[{index}]: {reason}")]
    InvalidField {
        array: &'static str,
        index: usize,
        field: &'static str,
        reason: String,
    },
    #[error("annotations[{index}] references unknown {kind} id {id}")]
    DanglingReference {
        index: usize,
        kind: &'static str,
        id: i64,
    },
    #[error("duplicate {kind} `{key}`")]
    Duplicate { kind: &'static str, key: String },
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Category taxonomy with a bijection between file ids and dense indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CategoryTable {
    ids: Vec<i64>,
    names: Vec<String>,
    by_id: HashMap<i64, usize>,
    by_name: HashMap<String, usize>,
}

impl CategoryTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a category and returns its dense index.
    pub fn push(&mut self, id: i64, name: &str) -> Result<usize, AnnotError> {
        if self.by_id.contains_key(&id) {
            return Err(AnnotError::Duplicate {
                kind: "category id",
                key: id.to_string(),
            });
        }
        if self.by_name.contains_key(name) {
            return Err(AnnotError::Duplicate {
                kind: "category name",
                key: name.to_string(),
            });
        }
        let idx = self.ids.len();
        self.ids.push(id);
        self.names.push(name.to_string());
        self.by_id.insert(id, idx);
        self.by_name.insert(name.to_string(), idx);
        Ok(idx)
    }

    /// Builds a table whose ids equal the dense indices.
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self, AnnotError> {
        let mut t = Self::new();
        for (i, n) in names.iter().enumerate() {
            t.push(i as i64, n.as_ref())?;
        }
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of_id(&self, id: i64) -> Option<usize> {
        self.by_id.get(&id).copied()
    }

    pub fn index_of_name(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn id(&self, index: usize) -> i64 {
        self.ids[index]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub region_id: u32,
    /// Dense category index.
    pub category: usize,
    /// `(x, y, w, h)` in pixels.
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: u64,
    pub regions: Vec<Region>,
}

impl ImageRecord {
    pub fn distinct_categories(&self) -> BTreeSet<usize> {
        self.regions.iter().map(|r| r.category).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Provenance {
    pub source: String,
    pub min_distinct: usize,
    /// Images dropped because they had fewer than `min_distinct` categories.
    pub excluded_images: usize,
    /// Annotations dropped for a non-positive box width or height.
    pub dropped_regions: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationDataset {
    pub categories: CategoryTable,
    pub images: Vec<ImageRecord>,
    pub provenance: Provenance,
}

impl AnnotationDataset {
    pub fn n_categories(&self) -> usize {
        self.categories.len()
    }

    /// Drops images with fewer than `min_distinct` distinct categories.
    pub fn filtered(mut self, min_distinct: usize) -> Self {
        let before = self.images.len();
        self.images
            .retain(|im| im.distinct_categories().len() >= min_distinct);
        self.provenance.excluded_images += before - self.images.len();
        self.provenance.min_distinct = self.provenance.min_distinct.max(min_distinct);
        self
    }

    /// Serializes to the TSV form, one line per region.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for im in &self.images {
            for r in &im.regions {
                let _ = writeln!(out, "{}\t{}", im.image_id, self.categories.name(r.category));
            }
        }
        out
    }
}

pub fn read_annotations(path: &Path, format: Format) -> Result<AnnotationDataset, AnnotError> {
    let bytes = std::fs::read(path).map_err(|source| AnnotError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut ds = match format {
        Format::Coco => parse_coco(&bytes)?,
        Format::Tsv => parse_tsv(&bytes)?,
    };
    ds.provenance.source = path.display().to_string();
    Ok(ds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Coco,
    Tsv,
}

fn get_array<'a>(root: &'a Value, field: &'static str) -> Result<&'a Vec<Value>, AnnotError> {
    match root.get(field) {
        Some(Value::Array(a)) => Ok(a),
        Some(_) => Err(AnnotError::MalformedJson(format!("`{field}` is not an array"))),
        None => Err(AnnotError::MissingField {
            array: "root",
            index: None,
            field,
        }),
    }
}

fn get_int(
    v: &Value,
    array: &'static str,
    index: usize,
    field: &'static str,
) -> Result<i64, AnnotError> {
    match v.get(field) {
        None | Some(Value::Null) => Err(AnnotError::MissingField {
            array,
            index: Some(index),
            field,
        }),
        Some(x) => x
            .as_i64()
            .or_else(|| x.as_f64().filter(|f| f.fract() == 0.0).map(|f| f as i64))
            .ok_or_else(|| AnnotError::InvalidField {
                array,
                index,
                field,
                reason: format!("expected integer, got {x}"),
            }),
    }
}

/// Parses the COCO subset `images[{id}]`, `categories[{id,name}]`,
/// `annotations[{image_id,category_id,bbox}]`. Unknown fields are ignored.
///
/// Images keep the order of the `images` array and regions keep annotation
/// order. Images left without any region are excluded and counted.
pub fn parse_coco(bytes: &[u8]) -> Result<AnnotationDataset, AnnotError> {
    let root: Value =
        serde_json::from_slice(bytes).map_err(|e| AnnotError::MalformedJson(e.to_string()))?;
    if !root.is_object() {
        return Err(AnnotError::MalformedJson("top level is not an object".into()));
    }
    let images = get_array(&root, "images")?;
    let annotations = get_array(&root, "annotations")?;
    let categories = get_array(&root, "categories")?;

    let mut table = CategoryTable::new();
    for (i, c) in categories.iter().enumerate() {
        let id = get_int(c, "categories", i, "id")?;
        let name = match c.get("name") {
            Some(Value::String(s)) => s.as_str(),
            Some(other) => {
                return Err(AnnotError::InvalidField {
                    array: "categories",
                    index: i,
                    field: "name",
                    reason: format!("expected string, got {other}"),
                })
            }
            None => {
                return Err(AnnotError::MissingField {
                    array: "categories",
                    index: Some(i),
                    field: "name",
                })
            }
        };
        table.push(id, name)?;
    }

    let mut records: Vec<ImageRecord> = Vec::with_capacity(images.len());
    let mut image_slot: HashMap<i64, usize> = HashMap::with_capacity(images.len());
    for (i, im) in images.iter().enumerate() {
        let id = get_int(im, "images", i, "id")?;
        if id < 0 {
            return Err(AnnotError::InvalidField {
                array: "images",
                index: i,
                field: "id",
                reason: "negative image id".into(),
            });
        }
        if image_slot.insert(id, records.len()).is_some() {
            return Err(AnnotError::Duplicate {
                kind: "image id",
                key: id.to_string(),
            });
        }
        records.push(ImageRecord {
            image_id: id as u64,
            regions: Vec::new(),
        });
    }

    let mut dropped = 0usize;
    for (i, a) in annotations.iter().enumerate() {
        let image_id = get_int(a, "annotations", i, "image_id")?;
        let category_id = get_int(a, "annotations", i, "category_id")?;
        let bbox = match a.get("bbox") {
            Some(Value::Array(b)) if b.len() == 4 => {
                let mut out = [0.0; 4];
                for (o, v) in out.iter_mut().zip(b) {
                    *o = v.as_f64().ok_or_else(|| AnnotError::InvalidField {
                        array: "annotations",
                        index: i,
                        field: "bbox",
                        reason: format!("non-numeric entry {v}"),
                    })?;
                }
                out
            }
            Some(other) => {
                return Err(AnnotError::InvalidField {
                    array: "annotations",
                    index: i,
                    field: "bbox",
                    reason: format!("expected [x, y, w, h], got {other}"),
                })
            }
            None => {
                return Err(AnnotError::MissingField {
                    array: "annotations",
                    index: Some(i),
                    field: "bbox",
                })
            }
        };
        let slot = *image_slot
            .get(&image_id)
            .ok_or(AnnotError::DanglingReference {
                index: i,
                kind: "image",
                id: image_id,
            })?;
        let category = table
            .index_of_id(category_id)
            .ok_or(AnnotError::DanglingReference {
                index: i,
                kind: "category",
                id: category_id,
            })?;
        if !(bbox[2] > 0.0 && bbox[3] > 0.0) {
            dropped += 1;
            continue;
        }
        let region_id = match a.get("id").and_then(Value::as_u64) {
            Some(id) => u32::try_from(id).map_err(|_| AnnotError::InvalidField {
                array: "annotations",
                index: i,
                field: "id",
                reason: "does not fit in 32 bits".into(),
            })?,
            None => records[slot].regions.len() as u32,
        };
        records[slot].regions.push(Region {
            region_id,
            category,
            bbox,
        });
    }

    let ds = AnnotationDataset {
        categories: table,
        images: records,
        provenance: Provenance {
            dropped_regions: dropped,
            ..Provenance::default()
        },
    };
    Ok(ds.filtered(1))
}

/// Parses `image_id<TAB>category_name` lines. Blank lines and lines starting
/// with `#` are skipped. Each line becomes one region with box `(0,0,1,1)`.
pub fn parse_tsv(bytes: &[u8]) -> Result<AnnotationDataset, AnnotError> {
    let text = std::str::from_utf8(bytes).map_err(|e| AnnotError::MalformedLine {
        line: 1 + bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count(),
        reason: "invalid UTF-8".into(),
    })?;
    let mut table = CategoryTable::new();
    let mut records: Vec<ImageRecord> = Vec::new();
    let mut slot: HashMap<u64, usize> = HashMap::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(AnnotError::MalformedLine {
                line: ln + 1,
                reason: format!("expected 2 tab-separated fields, got {}", fields.len()),
            });
        }
        let image_id: u64 = fields[0].trim().parse().map_err(|_| AnnotError::MalformedLine {
            line: ln + 1,
            reason: format!("bad image id `{}`", fields[0]),
        })?;
        let name = fields[1].trim();
        if name.is_empty() {
            return Err(AnnotError::MalformedLine {
                line: ln + 1,
                reason: "empty category name".into(),
            });
        }
        let category = match table.index_of_name(name) {
            Some(c) => c,
            None => table.push(table.len() as i64, name)?,
        };
        let s = *slot.entry(image_id).or_insert_with(|| {
            records.push(ImageRecord {
                image_id,
                regions: Vec::new(),
            });
            records.len() - 1
        });
        let rec = &mut records[s];
        rec.regions.push(Region {
            region_id: rec.regions.len() as u32,
            category,
            bbox: [0.0, 0.0, 1.0, 1.0],
        });
    }
    Ok(AnnotationDataset {
        categories: table,
        images: records,
        provenance: Provenance {
            min_distinct: 1,
            ..Provenance::default()
        },
    })
}

/// One image's set of distinct present categories.
pub type PresenceSet = BTreeSet<usize>;

/// Per-image distinct category sets, omitting images with fewer than
/// `min_distinct` categories.
pub fn presence_sets(ds: &AnnotationDataset, min_distinct: usize) -> Vec<(u64, PresenceSet)> {
    let min_distinct = min_distinct.max(1);
    ds.images
        .iter()
        .map(|im| (im.image_id, im.distinct_categories()))
        .filter(|(_, s)| s.len() >= min_distinct)
        .collect()
}
