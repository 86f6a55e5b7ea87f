//! COCO-style annotation subset.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::BBox;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub images: Vec<ImageInfo>,
    pub annotations: Vec<Annotation>,
    pub categories: Vec<Category>,
}

/// A geometric defect found by [`AnnotationSet::violations`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub annotation_id: u64,
    pub image_id: u64,
    pub problem: String,
}

impl AnnotationSet {
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let set: AnnotationSet = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            column: e.column(),
            detail: e.to_string(),
        })?;
        set.check_integrity()?;
        Ok(set)
    }

    /// Reads, parses and integrity-checks an annotation file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn to_json_bytes(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec_pretty(self).expect("annotation sets serialize");
        v.push(b'\n');
        v
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Unique ids and resolvable references.
    pub fn check_integrity(&self) -> Result<()> {
        let mut images = HashSet::new();
        for im in &self.images {
            if !images.insert(im.id) {
                return Err(Error::Integrity(format!("duplicate image id {}", im.id)));
            }
        }
        let mut cats = HashSet::new();
        for c in &self.categories {
            if !cats.insert(c.id) {
                return Err(Error::Integrity(format!("duplicate category id {}", c.id)));
            }
        }
        let mut anns = HashSet::new();
        for a in &self.annotations {
            if !anns.insert(a.id) {
                return Err(Error::Integrity(format!("duplicate annotation id {}", a.id)));
            }
            if !images.contains(&a.image_id) {
                return Err(Error::Integrity(format!(
                    "annotation {} references missing image_id {}",
                    a.id, a.image_id
                )));
            }
            if !cats.contains(&a.category_id) {
                return Err(Error::Integrity(format!(
                    "annotation {} references missing category_id {}",
                    a.id, a.category_id
                )));
            }
        }
        Ok(())
    }

    /// Boxes with non-positive size, non-finite coordinates or extent
    /// outside their image.
    pub fn violations(&self) -> Vec<Violation> {
        let dims: HashMap<u64, (f64, f64)> = self.images.iter().map(|i| (i.id, (i.width as f64, i.height as f64))).collect();
        let mut out = Vec::new();
        for a in &self.annotations {
            let [x, y, w, h] = a.bbox;
            let mut flag = |problem: String| {
                out.push(Violation {
                    annotation_id: a.id,
                    image_id: a.image_id,
                    problem,
                })
            };
            if a.bbox.iter().any(|v| !v.is_finite()) {
                flag("non-finite bbox".into());
                continue;
            }
            if !(w > 0.0 && h > 0.0) {
                flag(format!("non-positive size {w}x{h}"));
            }
            if let Some(&(iw, ih)) = dims.get(&a.image_id) {
                if x < 0.0 || y < 0.0 || x + w > iw || y + h > ih {
                    flag(format!("box [{x}, {y}, {w}, {h}] exceeds {iw}x{ih} image"));
                }
            }
        }
        out
    }

    /// Category ids sorted ascending; a category's position is its class index.
    pub fn class_ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.categories.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        ids
    }

    pub fn annotations_by_image(&self) -> HashMap<u64, Vec<&Annotation>> {
        let mut m: HashMap<u64, Vec<&Annotation>> = self.images.iter().map(|i| (i.id, Vec::new())).collect();
        for a in &self.annotations {
            m.entry(a.image_id).or_default().push(a);
        }
        m
    }

    /// Boxes of one image with class indices resolved through [`Self::class_ids`].
    pub fn boxes_for(&self, image_id: u64) -> Vec<BBox> {
        let ids = self.class_ids();
        self.annotations
            .iter()
            .filter(|a| a.image_id == image_id)
            .map(|a| {
                let k = ids.binary_search(&a.category_id).expect("integrity-checked category");
                let [x, y, w, h] = a.bbox;
                BBox::new(x, y, w, h, k)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("mem.json")
    }

    #[test]
    fn empty_file() {
        let s = AnnotationSet::from_json(r#"{"images":[],"annotations":[],"categories":[]}"#, p()).unwrap();
        assert_eq!(s, AnnotationSet::default());
    }

    #[test]
    fn missing_image_is_named() {
        let text = r#"{"images":[{"id":1,"file_name":"a.pgm","width":4,"height":4}],
            "annotations":[{"id":7,"image_id":9,"category_id":0,"bbox":[0,0,1,1]}],
            "categories":[{"id":0,"name":"c"}]}"#;
        let err = AnnotationSet::from_json(text, p()).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)));
        assert!(err.to_string().contains("image_id 9"));
    }

    #[test]
    fn parse_error_has_position() {
        let err = AnnotationSet::from_json("{\n  \"images\": [,]\n}", p()).unwrap_err();
        match err {
            Error::Parse { line, column, .. } => assert_eq!((line, column), (2, 14)),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn violations_are_collected() {
        let text = r#"{"images":[{"id":1,"file_name":"a.pgm","width":10,"height":10}],
            "annotations":[{"id":1,"image_id":1,"category_id":0,"bbox":[8,0,4,2]},
                           {"id":2,"image_id":1,"category_id":0,"bbox":[0,0,0,2]},
                           {"id":3,"image_id":1,"category_id":0,"bbox":[0,0,10,10]}],
            "categories":[{"id":0,"name":"c"}]}"#;
        let v = AnnotationSet::from_json(text, p()).unwrap().violations();
        assert_eq!(v.iter().map(|x| x.annotation_id).collect::<Vec<_>>(), vec![1, 2]);
    }
}
