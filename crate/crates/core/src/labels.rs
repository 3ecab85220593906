//! Tag and relation alphabets, and their plain-text manifest.
//!
//! Tag ids follow a fixed BIO layout: `0 = O`, `2t + 1 = B-t`, `2t + 2 = I-t`.
//!
//! Manifest format, one entry per line (`#` starts a comment):
//!
//! ```text
//! tag 0 O
//! tag 1 B-PER
//! relation 0 None
//! ```

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{invalid, Error, Result};

pub const OUTSIDE: usize = 0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Tag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TagSet {
    entity_types: Vec<String>,
}

impl TagSet {
    pub fn new(entity_types: Vec<String>) -> Result<Self> {
        if entity_types.is_empty() {
            return Err(invalid!("tag set needs at least one entity type"));
        }
        for (i, t) in entity_types.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) || entity_types[..i].contains(t) {
                return Err(invalid!("bad or duplicate entity type {t:?}"));
            }
        }
        Ok(TagSet { entity_types })
    }

    pub fn entity_types(&self) -> &[String] {
        &self.entity_types
    }

    pub fn num_types(&self) -> usize {
        self.entity_types.len()
    }

    /// `2 * types + 1`.
    pub fn num_tags(&self) -> usize {
        2 * self.entity_types.len() + 1
    }

    pub fn begin(&self, entity: usize) -> usize {
        2 * entity + 1
    }

    pub fn inside(&self, entity: usize) -> usize {
        2 * entity + 2
    }

    /// Entity index of a B-/I- tag, `None` for `O`.
    pub fn entity_of(&self, tag: usize) -> Option<usize> {
        (tag != OUTSIDE).then(|| (tag - 1) / 2)
    }

    pub fn is_begin(&self, tag: usize) -> bool {
        tag != OUTSIDE && tag % 2 == 1
    }

    pub fn is_inside(&self, tag: usize) -> bool {
        tag != OUTSIDE && tag % 2 == 0
    }

    pub fn decode(&self, tag: usize) -> Result<Tag<'_>> {
        if tag >= self.num_tags() {
            return Err(invalid!("unknown tag id {tag}"));
        }
        Ok(match self.entity_of(tag) {
            None => Tag::Outside,
            Some(e) if self.is_begin(tag) => Tag::Begin(&self.entity_types[e]),
            Some(e) => Tag::Inside(&self.entity_types[e]),
        })
    }

    pub fn name(&self, tag: usize) -> Result<String> {
        Ok(match self.decode(tag)? {
            Tag::Outside => "O".to_owned(),
            Tag::Begin(t) => format!("B-{t}"),
            Tag::Inside(t) => format!("I-{t}"),
        })
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        if name == "O" {
            return Ok(OUTSIDE);
        }
        let (prefix, ty) = name
            .split_once('-')
            .ok_or_else(|| invalid!("malformed tag {name:?}"))?;
        let e = self
            .entity_types
            .iter()
            .position(|t| t == ty)
            .ok_or_else(|| invalid!("unknown entity type in tag {name:?}"))?;
        match prefix {
            "B" => Ok(self.begin(e)),
            "I" => Ok(self.inside(e)),
            _ => Err(invalid!("malformed tag {name:?}")),
        }
    }

    /// Whether `to` may directly follow `from` (`None` = sequence start).
    pub fn transition_allowed(&self, from: Option<usize>, to: usize) -> bool {
        if !self.is_inside(to) {
            return true;
        }
        match from {
            Some(f) if f != OUTSIDE => self.entity_of(f) == self.entity_of(to),
            _ => false,
        }
    }

    /// Strict BIO validity: every `I-X` continues a `B-X` or `I-X`.
    pub fn is_valid(&self, tags: &[usize]) -> bool {
        let mut prev = None;
        for &t in tags {
            if t >= self.num_tags() || !self.transition_allowed(prev, t) {
                return false;
            }
            prev = Some(t);
        }
        true
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationSet {
    names: Vec<String>,
}

impl RelationSet {
    pub const NONE: &'static str = "None";

    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() < 2 {
            return Err(invalid!("relation set needs at least two relations"));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n.contains(char::is_whitespace) || names[..i].contains(n) {
                return Err(invalid!("bad or duplicate relation name {n:?}"));
            }
        }
        Ok(RelationSet { names })
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

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    /// Index of the designated no-relation class, if the set has one.
    pub fn none_id(&self) -> Option<usize> {
        self.names.iter().position(|n| n == Self::NONE)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelManifest {
    pub tags: Option<TagSet>,
    pub relations: Option<RelationSet>,
}

impl LabelManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::from("# label manifest: <kind> <id> <name>\n");
        if let Some(tags) = &self.tags {
            for id in 0..tags.num_tags() {
                let _ = writeln!(s, "tag {id} {}", tags.name(id).expect("in range"));
            }
        }
        if let Some(rels) = &self.relations {
            for (id, n) in rels.names().iter().enumerate() {
                let _ = writeln!(s, "relation {id} {n}");
            }
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: path.to_owned(),
            line,
            msg,
        };
        let mut tags: Vec<String> = Vec::new();
        let mut rels: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [kind, id, name] = parts[..] else {
                return Err(err(i + 1, format!("expected `<kind> <id> <name>`, got {line:?}")));
            };
            let id: usize = id.parse().map_err(|_| err(i + 1, format!("bad id {id:?}")))?;
            let list = match kind {
                "tag" => &mut tags,
                "relation" => &mut rels,
                other => return Err(err(i + 1, format!("unknown entry kind {other:?}"))),
            };
            if id != list.len() {
                return Err(err(i + 1, format!("ids must be consecutive from 0, got {id}")));
            }
            list.push(name.to_owned());
        }
        let tags = if tags.is_empty() {
            None
        } else {
            let mut types = Vec::new();
            for (id, name) in tags.iter().enumerate().skip(1) {
                if id % 2 == 1 {
                    match name.strip_prefix("B-") {
                        Some(t) => types.push(t.to_owned()),
                        None => return Err(err(0, format!("tag {id} should be a B- tag, got {name}"))),
                    }
                }
            }
            let set = TagSet::new(types).map_err(|e| err(0, e.to_string()))?;
            let expected: Vec<String> = (0..set.num_tags()).map(|i| set.name(i).unwrap()).collect();
            if expected != tags {
                return Err(err(0, "tag table does not follow the O, B-X, I-X layout".into()));
            }
            Some(set)
        };
        let relations = if rels.is_empty() {
            None
        } else {
            Some(RelationSet::new(rels).map_err(|e| err(0, e.to_string()))?)
        };
        Ok(LabelManifest { tags, relations })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}
