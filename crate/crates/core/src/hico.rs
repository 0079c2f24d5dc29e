//! The HICO-DET category universe: 80 objects, 117 verbs, 600 (object, verb) HOIs.
//!
//! Object ids follow the 80-class COCO detector order (person = 0), verb ids the
//! alphabetical HICO order, HOI ids the official HICO order.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};

const OBJECTS: &str = include_str!("../data/objects.txt");
const VERBS: &str = include_str!("../data/verbs.txt");
const HOI_TABLE: &str = include_str!("../data/hoi_table.txt");
const UNSEEN_OBJECTS: &str = include_str!("../data/unseen_objects.txt");
const UNSEEN_VERBS: &str = include_str!("../data/unseen_verbs.txt");

pub const NUM_OBJECTS: usize = 80;
pub const NUM_VERBS: usize = 117;
pub const NUM_HOIS: usize = 600;
pub const PERSON: usize = 0;

fn lines(s: &'static str) -> impl Iterator<Item = &'static str> {
    s.lines().map(str::trim).filter(|l| !l.is_empty())
}

pub fn object_names() -> Vec<&'static str> {
    lines(OBJECTS).collect()
}

pub fn verb_names() -> Vec<&'static str> {
    lines(VERBS).collect()
}

fn index_of(names: &[&str], name: &str) -> usize {
    names
        .iter()
        .position(|n| *n == name)
        .unwrap_or_else(|| panic!("bundled data names unknown entry `{name}`"))
}

pub fn object_id(name: &str) -> Option<usize> {
    object_names().iter().position(|n| *n == name)
}

pub fn verb_id(name: &str) -> Option<usize> {
    verb_names().iter().position(|n| *n == name)
}

/// The 12 object ids whose HOIs are unseen in the unseen-object split.
pub fn unseen_object_ids() -> Vec<usize> {
    let names = object_names();
    lines(UNSEEN_OBJECTS).map(|n| index_of(&names, n)).collect()
}

/// The 20 verb ids whose HOIs are unseen in the unseen-verb split.
pub fn unseen_verb_ids() -> Vec<usize> {
    let names = verb_names();
    lines(UNSEEN_VERBS).map(|n| index_of(&names, n)).collect()
}

/// Mapping between HOI ids and (object, verb) pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HoiTable {
    rows: Vec<(usize, usize)>,
    num_objects: usize,
    num_verbs: usize,
    lookup: BTreeMap<(usize, usize), usize>,
}

impl HoiTable {
    /// `rows[h] = (object, verb)` for HOI id `h`. Pairs must be unique and in range.
    pub fn new(rows: Vec<(usize, usize)>, num_objects: usize, num_verbs: usize) -> Result<Self> {
        let mut lookup = BTreeMap::new();
        for (h, &(o, v)) in rows.iter().enumerate() {
            if o >= num_objects {
                return Err(Error::OutOfRange {
                    what: "object",
                    index: o,
                    len: num_objects,
                });
            }
            if v >= num_verbs {
                return Err(Error::OutOfRange {
                    what: "verb",
                    index: v,
                    len: num_verbs,
                });
            }
            if lookup.insert((o, v), h).is_some() {
                return Err(Error::Config(format!("HOI table repeats (object {o}, verb {v})")));
            }
        }
        Ok(Self {
            rows,
            num_objects,
            num_verbs,
            lookup,
        })
    }

    /// The official 600-category table.
    pub fn hico() -> Self {
        let objects = object_names();
        let verbs = verb_names();
        let mut rows = Vec::with_capacity(NUM_HOIS);
        for line in lines(HOI_TABLE) {
            let mut parts = line.split_whitespace();
            let o = index_of(&objects, parts.next().unwrap_or_default());
            rows.extend(parts.map(|v| (o, index_of(&verbs, v))));
        }
        Self::new(rows, NUM_OBJECTS, NUM_VERBS).expect("bundled HOI table is consistent")
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn num_objects(&self) -> usize {
        self.num_objects
    }

    pub fn num_verbs(&self) -> usize {
        self.num_verbs
    }

    pub fn rows(&self) -> &[(usize, usize)] {
        &self.rows
    }

    pub fn object_of(&self, hoi: usize) -> usize {
        self.rows[hoi].0
    }

    pub fn verb_of(&self, hoi: usize) -> usize {
        self.rows[hoi].1
    }

    pub fn hoi_id(&self, object: usize, verb: usize) -> Option<usize> {
        self.lookup.get(&(object, verb)).copied()
    }

    pub fn has(&self, object: usize, verb: usize) -> bool {
        self.lookup.contains_key(&(object, verb))
    }

    /// Verb ids that form a valid HOI with `object`, ascending.
    pub fn verbs_for_object(&self, object: usize) -> Vec<usize> {
        self.lookup.range((object, 0)..(object + 1, 0)).map(|(&(_, v), _)| v).collect()
    }
}
