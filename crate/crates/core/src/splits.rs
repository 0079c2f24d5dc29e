//! Rare/non-rare partitions and the zero-shot seen/unseen splits.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::hico::{self, HoiTable, NUM_HOIS};

pub const RARE_THRESHOLD: u64 = 10;
pub const UC_UNSEEN: usize = 120;
pub const UO_UNSEEN: usize = 100;
pub const UV_UNSEEN: usize = 84;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum SplitKind {
    Regular,
    NfUc,
    RfUc,
    Uo,
    Uv,
}

impl SplitKind {
    pub const ALL: [SplitKind; 5] = [Self::Regular, Self::NfUc, Self::RfUc, Self::Uo, Self::Uv];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Regular => "regular",
            Self::NfUc => "nf-uc",
            Self::RfUc => "rf-uc",
            Self::Uo => "uo",
            Self::Uv => "uv",
        }
    }

    pub fn is_zero_shot(self) -> bool {
        self != Self::Regular
    }
}

impl fmt::Display for SplitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown split kind `{s}`")))
    }
}

/// A seen/unseen partition of the HOI ids.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SplitSpec {
    pub kind: SplitKind,
    pub unseen: Vec<usize>,
    pub seen: Vec<usize>,
}

impl SplitSpec {
    fn from_unseen(kind: SplitKind, num_hois: usize, mut unseen: Vec<usize>) -> Self {
        unseen.sort_unstable();
        unseen.dedup();
        let mut flag = vec![false; num_hois];
        for &h in &unseen {
            flag[h] = true;
        }
        let seen = (0..num_hois).filter(|&h| !flag[h]).collect();
        Self { kind, unseen, seen }
    }

    pub fn regular(num_hois: usize) -> Self {
        Self::from_unseen(SplitKind::Regular, num_hois, Vec::new())
    }

    /// `flags[h]` is true when HOI `h` is unseen.
    pub fn unseen_flags(&self) -> Vec<bool> {
        let n = self.unseen.len() + self.seen.len();
        let mut flags = vec![false; n];
        for &h in &self.unseen {
            flags[h] = true;
        }
        flags
    }

    /// Checks that seen and unseen partition `0..num_hois`.
    pub fn validate(&self, num_hois: usize) -> Result<()> {
        let mut hits = vec![0u8; num_hois];
        for &h in self.unseen.iter().chain(&self.seen) {
            if h >= num_hois {
                return Err(Error::Split(format!("HOI id {h} outside 0..{num_hois}")));
            }
            hits[h] += 1;
        }
        if let Some(h) = hits.iter().position(|&c| c != 1) {
            return Err(Error::Split(format!("HOI id {h} is not in exactly one partition")));
        }
        Ok(())
    }
}

fn check_counts(counts: &[u64], num_hois: usize) -> Result<()> {
    if counts.len() != num_hois {
        return Err(Error::Split(format!(
            "expected training counts for {num_hois} categories, got {}",
            counts.len()
        )));
    }
    Ok(())
}

/// Annotation count per HOI category; interactions outside the table are ignored.
pub fn count_hois<G>(table: &HoiTable, gt: impl IntoIterator<Item = G>) -> Vec<u64>
where
    G: core::borrow::Borrow<crate::data::GtInteraction>,
{
    let mut counts = vec![0u64; table.len()];
    for g in gt {
        let g = g.borrow();
        if let Some(h) = table.hoi_id(g.object_class, g.verb) {
            counts[h] += 1;
        }
    }
    counts
}

/// `(rare, non_rare)`: rare categories have fewer than 10 training instances.
pub fn rare_split(counts: &[u64], num_hois: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    check_counts(counts, num_hois)?;
    Ok((0..num_hois).partition(|&h| counts[h] < RARE_THRESHOLD))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UcVariant {
    /// Unseen drawn from the most frequent categories.
    NonRareFirst,
    /// Unseen drawn from the least frequent categories.
    RareFirst,
}

/// Unseen-composition split of `target` categories.
///
/// Categories are visited by descending (non-rare first) or ascending (rare first)
/// count, ties by ascending id. A category is taken unless removing it would leave
/// its object or its verb without any seen category; skipped ones stay seen.
pub fn make_uc(table: &HoiTable, counts: &[u64], variant: UcVariant, target: usize) -> Result<SplitSpec> {
    let n = table.len();
    check_counts(counts, n)?;
    let mut order: Vec<usize> = (0..n).collect();
    match variant {
        UcVariant::NonRareFirst => order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b))),
        UcVariant::RareFirst => order.sort_by(|&a, &b| counts[a].cmp(&counts[b]).then(a.cmp(&b))),
    }
    let mut per_object = vec![0usize; table.num_objects()];
    let mut per_verb = vec![0usize; table.num_verbs()];
    for &(o, v) in table.rows() {
        per_object[o] += 1;
        per_verb[v] += 1;
    }
    let mut unseen = Vec::with_capacity(target);
    for h in order {
        if unseen.len() == target {
            break;
        }
        let (o, v) = table.rows()[h];
        if per_object[o] > 1 && per_verb[v] > 1 {
            per_object[o] -= 1;
            per_verb[v] -= 1;
            unseen.push(h);
        }
    }
    if unseen.len() != target {
        return Err(Error::Split(format!(
            "only {} categories can be unseen while keeping every object and verb seen",
            unseen.len()
        )));
    }
    let kind = match variant {
        UcVariant::NonRareFirst => SplitKind::NfUc,
        UcVariant::RareFirst => SplitKind::RfUc,
    };
    Ok(SplitSpec::from_unseen(kind, n, unseen))
}

/// Every category whose object is in `objects` becomes unseen.
pub fn unseen_by_objects(table: &HoiTable, objects: &[usize]) -> SplitSpec {
    let unseen = (0..table.len()).filter(|&h| objects.contains(&table.object_of(h))).collect();
    SplitSpec::from_unseen(SplitKind::Uo, table.len(), unseen)
}

/// Every category whose verb is in `verbs` becomes unseen.
pub fn unseen_by_verbs(table: &HoiTable, verbs: &[usize]) -> SplitSpec {
    let unseen = (0..table.len()).filter(|&h| verbs.contains(&table.verb_of(h))).collect();
    SplitSpec::from_unseen(SplitKind::Uv, table.len(), unseen)
}

fn expect_size(spec: SplitSpec, unseen: usize) -> Result<SplitSpec> {
    if spec.unseen.len() != unseen || spec.seen.len() != NUM_HOIS - unseen {
        return Err(Error::Split(format!(
            "{} split has {}/{} unseen/seen, expected {}/{}",
            spec.kind,
            spec.unseen.len(),
            spec.seen.len(),
            unseen,
            NUM_HOIS - unseen
        )));
    }
    Ok(spec)
}

/// Unseen-object split from the bundled 12-object list; 100 unseen of 600.
pub fn make_uo(table: &HoiTable) -> Result<SplitSpec> {
    expect_size(unseen_by_objects(table, &hico::unseen_object_ids()), UO_UNSEEN)
}

/// Unseen-verb split from the bundled 20-verb list; 84 unseen of 600.
pub fn make_uv(table: &HoiTable) -> Result<SplitSpec> {
    expect_size(unseen_by_verbs(table, &hico::unseen_verb_ids()), UV_UNSEEN)
}

/// Builds any split kind over the official table. `counts` is needed for the UC kinds.
pub fn make_split(kind: SplitKind, table: &HoiTable, counts: Option<&[u64]>) -> Result<SplitSpec> {
    let need = || counts.ok_or_else(|| Error::Split(String::from("training counts are required for UC splits")));
    match kind {
        SplitKind::Regular => Ok(SplitSpec::regular(table.len())),
        SplitKind::NfUc => make_uc(table, need()?, UcVariant::NonRareFirst, UC_UNSEEN),
        SplitKind::RfUc => make_uc(table, need()?, UcVariant::RareFirst, UC_UNSEEN),
        SplitKind::Uo => make_uo(table),
        SplitKind::Uv => make_uv(table),
    }
}
