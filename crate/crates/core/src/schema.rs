//! Semantic class schema.
//!
//! The schema fixes the number of classes `K`, their order and which of them
//! are composited as transparent overlays. Class 0 is always the background.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticClass {
    pub id: usize,
    pub name: String,
    #[serde(default)]
    pub transparent: bool,
    #[serde(default)]
    pub color: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticSchema {
    classes: Vec<SemanticClass>,
}

impl SemanticSchema {
    /// Builds a schema, checking ids are `0..K` in order, names are unique and
    /// the background is opaque.
    pub fn new(classes: Vec<SemanticClass>) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::Schema(format!(
                "need at least 2 classes, got {}",
                classes.len()
            )));
        }
        let mut seen_ids = HashSet::new();
        let mut seen_names = HashSet::new();
        for class in &classes {
            if !seen_ids.insert(class.id) {
                return Err(Error::Schema(format!("duplicate class id {}", class.id)));
            }
            if !seen_names.insert(class.name.as_str()) {
                return Err(Error::Schema(format!("duplicate class name `{}`", class.name)));
            }
            if class.name.is_empty() || class.name.contains('.') {
                return Err(Error::Schema(format!(
                    "class name `{}` must be non-empty and contain no '.'",
                    class.name
                )));
            }
        }
        for (position, class) in classes.iter().enumerate() {
            if class.id != position {
                return Err(Error::Schema(format!(
                    "class ids must be 0..{} in file order; found id {} at position {}",
                    classes.len(),
                    class.id,
                    position
                )));
            }
        }
        if classes[0].transparent {
            return Err(Error::Schema("background cannot be transparent".into()));
        }
        Ok(Self { classes })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: SemanticSchemaFile =
            serde_json::from_str(text).map_err(|e| Error::json("schema", e))?;
        Self::new(raw.classes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Number of classes `K`.
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[SemanticClass] {
        &self.classes
    }

    pub fn class(&self, id: usize) -> Result<&SemanticClass> {
        self.classes.get(id).ok_or(Error::UnknownClass(id))
    }

    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.name == name)
    }

    pub fn transparent_flags(&self) -> Vec<bool> {
        self.classes.iter().map(|c| c.transparent).collect()
    }

    pub fn transparent_names(&self) -> Vec<&str> {
        self.classes
            .iter()
            .filter(|c| c.transparent)
            .map(|c| c.name.as_str())
            .collect()
    }

    pub fn palette(&self) -> Vec<[u8; 3]> {
        self.classes.iter().map(|c| c.color).collect()
    }

    /// The six-class scene used by the procedural toy dataset.
    pub fn toy() -> Self {
        let class = |id, name: &str, transparent, color| SemanticClass {
            id,
            name: name.to_string(),
            transparent,
            color,
        };
        Self::new(vec![
            class(0, "background", false, [0, 0, 0]),
            class(1, "face", false, [230, 180, 140]),
            class(2, "eyes", false, [40, 90, 220]),
            class(3, "mouth", false, [220, 40, 60]),
            class(4, "hair", false, [110, 70, 30]),
            class(5, "glasses", true, [60, 220, 200]),
        ])
        .expect("toy schema is valid")
    }
}

#[derive(Deserialize)]
struct SemanticSchemaFile {
    classes: Vec<SemanticClass>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_two_class_schema() {
        let s = SemanticSchema::from_json(
            r#"{"classes":[{"id":0,"name":"background","transparent":false,"color":[0,0,0]},
                           {"id":1,"name":"face","transparent":false,"color":[255,200,150]}]}"#,
        )
        .unwrap();
        assert_eq!(s.num_classes(), 2);
        assert!(s.transparent_names().is_empty());
    }

    #[test]
    fn transparent_background_rejected() {
        let err = SemanticSchema::from_json(
            r#"{"classes":[{"id":0,"name":"background","transparent":true},
                           {"id":1,"name":"face"}]}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("background cannot be transparent"));
    }

    #[test]
    fn face_schema_with_transparent_accessories() {
        let s = SemanticSchema::from_json(
            r#"{"classes":[
                {"id":0,"name":"background"},
                {"id":1,"name":"skin"},
                {"id":2,"name":"hair"},
                {"id":3,"name":"glasses","transparent":true},
                {"id":4,"name":"earrings","transparent":true}]}"#,
        )
        .unwrap();
        assert_eq!(s.transparent_names(), vec!["glasses", "earrings"]);
        assert_eq!(s.transparent_flags(), vec![false, false, false, true, true]);
    }

    #[test]
    fn gaps_and_duplicates_rejected() {
        let dup = r#"{"classes":[{"id":0,"name":"a"},{"id":0,"name":"b"}]}"#;
        assert!(SemanticSchema::from_json(dup).is_err());
        let gap = r#"{"classes":[{"id":0,"name":"a"},{"id":2,"name":"b"}]}"#;
        assert!(SemanticSchema::from_json(gap).is_err());
        let single = r#"{"classes":[{"id":0,"name":"a"}]}"#;
        assert!(SemanticSchema::from_json(single).is_err());
        assert!(SemanticSchema::from_json("{not json").is_err());
    }

    #[test]
    fn round_trip() {
        let s = SemanticSchema::toy();
        let again = SemanticSchema::from_json(&s.to_json()).unwrap();
        assert_eq!(s, again);
    }
}
