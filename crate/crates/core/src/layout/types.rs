use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for `x + w <= 1` and `y + h <= 1`.
pub const BBOX_EPS: f64 = 1e-6;

pub const DEFAULT_MAX_OBJECTS: usize = 10;

/// `(x, y, w, h)`, top-left anchored, canvas-normalized.
pub type BBox = [f64; 4];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayoutObject {
    pub category: usize,
    pub bbox: BBox,
    pub stop: bool,
}

impl LayoutObject {
    pub fn new(category: usize, bbox: BBox) -> Self {
        LayoutObject {
            category,
            bbox,
            stop: false,
        }
    }

    pub fn x(&self) -> f64 {
        self.bbox[0]
    }
    pub fn y(&self) -> f64 {
        self.bbox[1]
    }
    pub fn w(&self) -> f64 {
        self.bbox[2]
    }
    pub fn h(&self) -> f64 {
        self.bbox[3]
    }
}

/// Checks range constraints on a single box.
pub fn bbox_problem(b: &BBox) -> Option<String> {
    if b.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
        return Some(format!("bbox {b:?} outside [0,1]"));
    }
    if b[0] + b[2] > 1.0 + BBOX_EPS || b[1] + b[3] > 1.0 + BBOX_EPS {
        return Some(format!("bbox {b:?} overflows the canvas"));
    }
    None
}

/// Pulls a box back inside the canvas: components into `[0,1]`, then the
/// origin so that `x + w <= 1` and `y + h <= 1`.
pub fn clamp_bbox(b: BBox) -> BBox {
    let w = b[2].clamp(0.0, 1.0);
    let h = b[3].clamp(0.0, 1.0);
    let x = b[0].clamp(0.0, 1.0 - w);
    let y = b[1].clamp(0.0, 1.0 - h);
    [x, y, w, h]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Canvas {
    /// width / height
    pub aspect: f64,
}

impl Default for Canvas {
    fn default() -> Self {
        Canvas { aspect: 0.75 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub objects: Vec<LayoutObject>,
    pub canvas: Canvas,
    pub source: String,
}

impl Layout {
    /// Builds a layout and assigns the stop flag to the last object only.
    pub fn new(objects: Vec<LayoutObject>, canvas: Canvas, source: impl Into<String>) -> Self {
        let mut l = Layout {
            objects,
            canvas,
            source: source.into(),
        };
        l.reassign_stop();
        l
    }

    pub fn reassign_stop(&mut self) {
        let n = self.objects.len();
        for (i, o) in self.objects.iter_mut().enumerate() {
            o.stop = i + 1 == n;
        }
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn categories(&self) -> Vec<usize> {
        self.objects.iter().map(|o| o.category).collect()
    }

    /// First violated invariant, if any.
    pub fn problem(&self, max_objects: usize, vocab_len: usize) -> Option<String> {
        let n = self.objects.len();
        if n == 0 || n > max_objects {
            return Some(format!("{n} objects, allowed 1..={max_objects}"));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.category >= vocab_len {
                return Some(format!("object {i}: category index {}", o.category));
            }
            if let Some(p) = bbox_problem(&o.bbox) {
                return Some(format!("object {i}: {p}"));
            }
            if o.stop != (i + 1 == n) {
                return Some(format!("object {i}: misplaced stop flag"));
            }
        }
        None
    }

    pub fn validate(&self, max_objects: usize, vocab_len: usize) -> Result<()> {
        match self.problem(max_objects, vocab_len) {
            Some(p) => Err(Error::InvalidLayout(p)),
            None => Ok(()),
        }
    }
}

/// Ordered, unique category names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryVocabulary {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl CategoryVocabulary {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::Config("empty category vocabulary".into()));
        }
        let mut index = HashMap::new();
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() {
                return Err(Error::Config("empty category name".into()));
            }
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate category `{n}`")));
            }
        }
        Ok(CategoryVocabulary { names, index })
    }

    /// Reads a JSON array of names.
    pub fn from_file(path: &Path) -> Result<Self> {
        let names: Vec<String> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::new(names)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> Result<&str> {
        self.names
            .get(index)
            .map(String::as_str)
            .ok_or(Error::CategoryIndex {
                index,
                len: self.names.len(),
            })
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownCategory(name.to_owned()))
    }

    pub fn one_hot(&self, index: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.names.len()];
        v[index] = 1.0;
        v
    }
}

impl Serialize for CategoryVocabulary {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.names.serialize(s)
    }
}

impl<'de> Deserialize<'de> for CategoryVocabulary {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let names = Vec::<String>::deserialize(d)?;
        CategoryVocabulary::new(names).map_err(serde::de::Error::custom)
    }
}

/// Wire form of one object: `{"category": "toolbar", "bbox": [x, y, w, h]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireObject {
    pub category: String,
    pub bbox: BBox,
}

/// Wire form of one layout, one per JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireLayout {
    #[serde(default)]
    pub canvas: Canvas,
    pub objects: Vec<WireObject>,
}

impl WireObject {
    pub fn from_object(o: &LayoutObject, vocab: &CategoryVocabulary) -> Result<Self> {
        Ok(WireObject {
            category: vocab.name(o.category)?.to_owned(),
            bbox: o.bbox,
        })
    }

    pub fn to_object(&self, vocab: &CategoryVocabulary) -> Result<LayoutObject> {
        Ok(LayoutObject::new(vocab.index_of(&self.category)?, self.bbox))
    }
}

impl WireLayout {
    pub fn from_layout(l: &Layout, vocab: &CategoryVocabulary) -> Result<Self> {
        Ok(WireLayout {
            canvas: l.canvas,
            objects: l
                .objects
                .iter()
                .map(|o| WireObject::from_object(o, vocab))
                .collect::<Result<_>>()?,
        })
    }

    pub fn to_layout(&self, vocab: &CategoryVocabulary, source: &str) -> Result<Layout> {
        let objects = self
            .objects
            .iter()
            .map(|o| o.to_object(vocab))
            .collect::<Result<_>>()?;
        Ok(Layout::new(objects, self.canvas, source))
    }
}
