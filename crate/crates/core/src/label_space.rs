//! Class taxonomies and many-to-one projections between them.
//!
//! A [`LabelSpace`] is read from an `id,name` CSV; a [`MappingTable`] from a
//! `source_id,source_name,target_id,target_name` CSV, where ids are
//! authoritative and names are informational only. Tables compile to a dense
//! [`ProjectionLut`] that remaps whole [`MaskImage`]s in a single pass.
//!
//! In the unified 256-class space, class 0 is the unlabeled/void class and
//! masks are stored with 8 bits per pixel, so there is no separate 255-ignore
//! value. A class is treated as void when its name is one of [`VOID_NAMES`]
//! (first match wins) unless the space is built with an explicit void id.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::error::{Error, Result, UnknownId};
use crate::mask::MaskImage;
use crate::par::Execution;

/// Class names recognised as the void class when parsing a label space.
pub const VOID_NAMES: &[&str] = &["void", "unlabeled", "unlabelled", "ignore"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClassDef {
    pub id: u32,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSpace {
    name: String,
    classes: Vec<ClassDef>,
    void_id: Option<u32>,
    index: BTreeMap<u32, usize>,
}

impl LabelSpace {
    pub fn new(
        name: impl Into<String>,
        classes: Vec<ClassDef>,
        void_id: Option<u32>,
    ) -> Result<Self> {
        let name = name.into();
        if classes.is_empty() {
            return Err(Error::Argument(format!("label space {name} has no classes")));
        }
        let mut index = BTreeMap::new();
        for (i, c) in classes.iter().enumerate() {
            if c.name.trim().is_empty() {
                return Err(Error::Argument(format!(
                    "label space {name}: class {} has an empty name",
                    c.id
                )));
            }
            if index.insert(c.id, i).is_some() {
                return Err(Error::Argument(format!(
                    "label space {name}: duplicate class id {}",
                    c.id
                )));
            }
        }
        if let Some(v) = void_id {
            if !index.contains_key(&v) {
                return Err(Error::Argument(format!(
                    "label space {name}: void id {v} is not a class"
                )));
            }
        }
        Ok(Self {
            name,
            classes,
            void_id,
            index,
        })
    }

    /// Space with ids `0..n` named `class_<id>`, void at `void_id`.
    pub fn sequential(name: impl Into<String>, n: u32, void_id: Option<u32>) -> Result<Self> {
        let classes = (0..n)
            .map(|id| ClassDef {
                id,
                name: if Some(id) == void_id {
                    "void".to_string()
                } else {
                    format!("class_{id}")
                },
            })
            .collect();
        Self::new(name, classes, void_id)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn classes(&self) -> &[ClassDef] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn void_id(&self) -> Option<u32> {
        self.void_id
    }

    pub fn with_void(self, void_id: Option<u32>) -> Result<Self> {
        Self::new(self.name, self.classes, void_id)
    }

    pub fn contains(&self, id: u32) -> bool {
        self.index.contains_key(&id)
    }

    pub fn class(&self, id: u32) -> Option<&ClassDef> {
        self.index.get(&id).map(|&i| &self.classes[i])
    }

    pub fn max_id(&self) -> u32 {
        *self.index.keys().next_back().expect("non-empty space")
    }

    /// Ids in ascending order.
    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.index.keys().copied()
    }

    /// Number of classes excluding void.
    pub fn non_void_len(&self) -> usize {
        self.classes.len() - usize::from(self.void_id.is_some())
    }
}

fn parse_error(origin: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        origin: origin.to_string(),
        line,
        message: message.into(),
    }
}

fn csv_records(origin: &str, text: &str, header: &[&str]) -> Result<Vec<(usize, Vec<String>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    let mut saw_header = false;
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            parse_error(origin, line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        if !saw_header {
            let got: Vec<String> = rec.iter().map(|f| f.to_ascii_lowercase()).collect();
            if got != header {
                return Err(parse_error(
                    origin,
                    line,
                    format!("expected header `{}`", header.join(",")),
                ));
            }
            saw_header = true;
            continue;
        }
        if rec.len() != header.len() {
            return Err(parse_error(
                origin,
                line,
                format!("expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        out.push((line, rec.iter().map(str::to_string).collect()));
    }
    if !saw_header {
        return Err(parse_error(origin, 1, "empty file"));
    }
    Ok(out)
}

fn parse_id(origin: &str, line: usize, field: &str, what: &str) -> Result<u32> {
    field
        .parse::<u32>()
        .map_err(|_| parse_error(origin, line, format!("{what} `{field}` is not a non-negative integer")))
}

/// Parse an `id,name` CSV into a label space called `name`.
pub fn parse_label_space(name: &str, text: &str) -> Result<LabelSpace> {
    let rows = csv_records(name, text, &["id", "name"])?;
    if rows.is_empty() {
        return Err(parse_error(name, 2, "no classes"));
    }
    let mut seen = BTreeMap::new();
    let mut classes = Vec::with_capacity(rows.len());
    for (line, f) in rows {
        let id = parse_id(name, line, &f[0], "id")?;
        if f[1].is_empty() {
            return Err(parse_error(name, line, "empty class name"));
        }
        if let Some(prev) = seen.insert(id, line) {
            return Err(parse_error(
                name,
                line,
                format!("duplicate id {id} (first defined on line {prev})"),
            ));
        }
        classes.push(ClassDef {
            id,
            name: f[1].clone(),
        });
    }
    let void_id = classes
        .iter()
        .find(|c| VOID_NAMES.contains(&c.name.to_ascii_lowercase().as_str()))
        .map(|c| c.id);
    LabelSpace::new(name, classes, void_id)
}

/// One data row of a mapping CSV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MappingRow {
    pub line: usize,
    pub source_id: u32,
    pub source_name: String,
    pub target_id: u32,
    pub target_name: String,
}

/// Parse mapping rows without consulting any label space.
///
/// Fails on malformed rows and on a source id listed twice.
pub fn parse_mapping_rows(origin: &str, text: &str) -> Result<Vec<MappingRow>> {
    let recs = csv_records(
        origin,
        text,
        &["source_id", "source_name", "target_id", "target_name"],
    )?;
    let mut seen = BTreeMap::new();
    let mut rows = Vec::with_capacity(recs.len());
    for (line, f) in recs {
        let source_id = parse_id(origin, line, &f[0], "source_id")?;
        let target_id = parse_id(origin, line, &f[2], "target_id")?;
        if let Some(prev) = seen.insert(source_id, line) {
            return Err(parse_error(
                origin,
                line,
                format!("source id {source_id} already mapped on line {prev}"),
            ));
        }
        rows.push(MappingRow {
            line,
            source_id,
            source_name: f[1].clone(),
            target_id,
            target_name: f[3].clone(),
        });
    }
    Ok(rows)
}

/// Label space reconstructed from one side of a mapping file's rows.
///
/// Used when no label-space CSV is at hand; void is detected by name.
pub fn space_from_rows(name: &str, rows: &[MappingRow], target_side: bool) -> Result<LabelSpace> {
    let mut by_id: BTreeMap<u32, String> = BTreeMap::new();
    for r in rows {
        let (id, n) = if target_side {
            (r.target_id, &r.target_name)
        } else {
            (r.source_id, &r.source_name)
        };
        let n = if n.is_empty() { format!("class_{id}") } else { n.clone() };
        by_id.entry(id).or_insert(n);
    }
    let classes: Vec<ClassDef> = by_id
        .into_iter()
        .map(|(id, name)| ClassDef { id, name })
        .collect();
    let void_id = classes
        .iter()
        .find(|c| VOID_NAMES.contains(&c.name.to_ascii_lowercase().as_str()))
        .map(|c| c.id);
    LabelSpace::new(name, classes, void_id)
}

/// Size of the unified label space.
pub const UNIFIED_CLASSES: u32 = 256;

/// The full `0..256` unified space, named from the target side of `rows`
/// where they mention an id. Void is found by name, falling back to id 0.
pub fn unified_space_from_rows(name: &str, rows: &[MappingRow]) -> Result<LabelSpace> {
    let mut names: BTreeMap<u32, String> = BTreeMap::new();
    for r in rows {
        if r.target_id >= UNIFIED_CLASSES {
            return Err(Error::Argument(format!(
                "target id {} outside the {UNIFIED_CLASSES}-class unified space",
                r.target_id
            )));
        }
        if !r.target_name.is_empty() {
            names.entry(r.target_id).or_insert_with(|| r.target_name.clone());
        }
    }
    let classes: Vec<ClassDef> = (0..UNIFIED_CLASSES)
        .map(|id| ClassDef {
            id,
            name: names.remove(&id).unwrap_or_else(|| format!("class_{id}")),
        })
        .collect();
    let void_id = classes
        .iter()
        .find(|c| VOID_NAMES.contains(&c.name.to_ascii_lowercase().as_str()))
        .map_or(0, |c| c.id);
    LabelSpace::new(name, classes, Some(void_id))
}

/// A (possibly partial) function from source class ids to target class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MappingTable {
    source: LabelSpace,
    target: LabelSpace,
    entries: BTreeMap<u32, u32>,
}

impl MappingTable {
    pub fn new(
        source: LabelSpace,
        target: LabelSpace,
        entries: impl IntoIterator<Item = (u32, u32)>,
    ) -> Result<Self> {
        let mut map = BTreeMap::new();
        let mut unknown = Vec::new();
        for (s, t) in entries {
            if map.insert(s, t).is_some() {
                return Err(Error::Argument(format!("source id {s} mapped twice")));
            }
            if !source.contains(s) {
                unknown.push(UnknownId {
                    line: 0,
                    id: s,
                    side: "source",
                });
            }
            if !target.contains(t) {
                unknown.push(UnknownId {
                    line: 0,
                    id: t,
                    side: "target",
                });
            }
        }
        if !unknown.is_empty() {
            return Err(Error::UnknownIds {
                mapping: format!("{}->{}", source.name(), target.name()),
                rows: unknown,
            });
        }
        Ok(Self {
            source,
            target,
            entries: map,
        })
    }

    pub fn identity(space: &LabelSpace) -> Self {
        Self {
            source: space.clone(),
            target: space.clone(),
            entries: space.ids().map(|i| (i, i)).collect(),
        }
    }

    pub fn source(&self) -> &LabelSpace {
        &self.source
    }

    pub fn target(&self) -> &LabelSpace {
        &self.target
    }

    pub fn entries(&self) -> &BTreeMap<u32, u32> {
        &self.entries
    }

    pub fn get(&self, source_id: u32) -> Option<u32> {
        self.entries.get(&source_id).copied()
    }

    /// Apply correction rows on top of this table, entry by entry.
    pub fn with_overlay(&self, overlay: &[MappingRow]) -> Result<Self> {
        let unknown = unknown_ids(overlay, &self.source, &self.target);
        if !unknown.is_empty() {
            return Err(Error::UnknownIds {
                mapping: format!("{}->{} overlay", self.source.name(), self.target.name()),
                rows: unknown,
            });
        }
        let mut entries = self.entries.clone();
        for r in overlay {
            entries.insert(r.source_id, r.target_id);
        }
        Ok(Self {
            source: self.source.clone(),
            target: self.target.clone(),
            entries,
        })
    }

    /// Distinct non-void target ids reached by the table.
    pub fn projected_class_count(&self) -> usize {
        let void = self.target.void_id();
        self.entries
            .values()
            .filter(|&&t| Some(t) != void)
            .collect::<BTreeSet<_>>()
            .len()
    }

    pub fn build_lut(&self) -> ProjectionLut {
        let extent = self.source.max_id() as usize + 1;
        let mut table = vec![ProjectionLut::VOID; extent];
        for (&s, &t) in &self.entries {
            table[s as usize] = t;
        }
        ProjectionLut {
            source: self.source.name().to_string(),
            target: self.target.name().to_string(),
            source_void: self.source.void_id(),
            target_void: self.target.void_id(),
            table,
        }
    }

    /// Preimages of each target id, sources ascending.
    pub fn preimages(&self) -> BTreeMap<u32, Vec<u32>> {
        let mut pre: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for (&s, &t) in &self.entries {
            pre.entry(t).or_default().push(s);
        }
        pre
    }

    /// Inverse table from the target space back to the source space.
    ///
    /// Target ids with a single preimage map back to it. Target void and
    /// target ids without any preimage map to the source void class when the
    /// source has one, and stay unmapped otherwise. Collisions follow
    /// `policy`.
    pub fn invert(&self, policy: InversionPolicy) -> Result<MappingTable> {
        let pre = self.preimages();
        let source_void = self.source.void_id();
        let target_void = self.target.void_id();
        let mut collisions = Vec::new();
        let mut inv = BTreeMap::new();
        for t in self.target.ids() {
            let sources = pre.get(&t).map(Vec::as_slice).unwrap_or(&[]);
            let back = if Some(t) == target_void {
                source_void.or_else(|| sources.first().copied().filter(|_| sources.len() == 1))
            } else {
                match sources {
                    [] => source_void,
                    [s] => Some(*s),
                    many => match policy {
                        InversionPolicy::Strict => {
                            collisions.push(t);
                            None
                        }
                        InversionPolicy::FirstListed => Some(many[0]),
                        InversionPolicy::ToVoid => source_void,
                    },
                }
            };
            if let Some(s) = back {
                inv.insert(t, s);
            }
        }
        if !collisions.is_empty() {
            return Err(Error::Collision { ids: collisions });
        }
        Ok(MappingTable {
            source: self.target.clone(),
            target: self.source.clone(),
            entries: inv,
        })
    }
}

/// Resolution of many-to-one collisions when inverting a mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InversionPolicy {
    /// Any collision is an error.
    Strict,
    /// The lowest source id wins.
    #[default]
    FirstListed,
    /// Colliding target ids map to the source void class.
    ToVoid,
}

impl std::str::FromStr for InversionPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strict" => Ok(Self::Strict),
            "first-listed" => Ok(Self::FirstListed),
            "to-void" => Ok(Self::ToVoid),
            other => Err(Error::Argument(format!("unknown inversion policy `{other}`"))),
        }
    }
}

fn unknown_ids(rows: &[MappingRow], source: &LabelSpace, target: &LabelSpace) -> Vec<UnknownId> {
    let mut unknown = Vec::new();
    for r in rows {
        if !source.contains(r.source_id) {
            unknown.push(UnknownId {
                line: r.line,
                id: r.source_id,
                side: "source",
            });
        }
        if !target.contains(r.target_id) {
            unknown.push(UnknownId {
                line: r.line,
                id: r.target_id,
                side: "target",
            });
        }
    }
    unknown
}

/// Parse a mapping CSV against already-parsed spaces.
pub fn parse_mapping(text: &str, source: &LabelSpace, target: &LabelSpace) -> Result<MappingTable> {
    let origin = format!("{}->{}", source.name(), target.name());
    let rows = parse_mapping_rows(&origin, text)?;
    table_from_rows(&rows, source, target)
}

pub fn table_from_rows(
    rows: &[MappingRow],
    source: &LabelSpace,
    target: &LabelSpace,
) -> Result<MappingTable> {
    let unknown = unknown_ids(rows, source, target);
    if !unknown.is_empty() {
        return Err(Error::UnknownIds {
            mapping: format!("{}->{}", source.name(), target.name()),
            rows: unknown,
        });
    }
    MappingTable::new(
        source.clone(),
        target.clone(),
        rows.iter().map(|r| (r.source_id, r.target_id)),
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CollisionGroup {
    pub target: u32,
    pub sources: Vec<u32>,
}

/// Diagnostics for a mapping against its two spaces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub source: String,
    pub target: String,
    pub original_classes: usize,
    pub distinct_targets: usize,
    pub unmapped_sources: Vec<u32>,
    pub collisions: Vec<CollisionGroup>,
    #[serde(skip)]
    pub unknown: Vec<UnknownId>,
    pub ok: bool,
}

/// Inspect mapping rows: unknown ids, unmapped source classes (void
/// excluded), distinct non-void targets and many-to-one groups onto non-void
/// targets. `ok` holds exactly when no row references an unknown id.
pub fn validate_mapping(
    rows: &[MappingRow],
    source: &LabelSpace,
    target: &LabelSpace,
) -> ValidationReport {
    let unknown = unknown_ids(rows, source, target);
    let mapped: BTreeSet<u32> = rows.iter().map(|r| r.source_id).collect();
    let unmapped_sources = source
        .ids()
        .filter(|id| !mapped.contains(id) && Some(*id) != source.void_id())
        .collect();
    let mut pre: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for r in rows.iter().filter(|r| target.contains(r.target_id)) {
        pre.entry(r.target_id).or_default().push(r.source_id);
    }
    let void = target.void_id();
    let distinct_targets = pre.keys().filter(|&&t| Some(t) != void).count();
    let collisions = pre
        .into_iter()
        .filter(|(t, s)| s.len() > 1 && Some(*t) != void)
        .map(|(target, mut sources)| {
            sources.sort_unstable();
            CollisionGroup { target, sources }
        })
        .collect();
    ValidationReport {
        source: source.name().to_string(),
        target: target.name().to_string(),
        original_classes: source.len(),
        distinct_targets,
        unmapped_sources,
        collisions,
        ok: unknown.is_empty(),
        unknown,
    }
}

/// Dense source-id indexed projection table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProjectionLut {
    source: String,
    target: String,
    source_void: Option<u32>,
    target_void: Option<u32>,
    table: Vec<u32>,
}

/// Compiled lookup over all 256 byte values; entries above 255 are misses.
struct ByteLut([u16; 256]);

const MISS: u16 = 0x100;

impl ProjectionLut {
    /// In-memory marker for "no target"; never written to files.
    pub const VOID: u32 = u32::MAX;

    pub fn table(&self) -> &[u32] {
        &self.table
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn target(&self) -> &str {
        &self.target
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// Target id for a source pixel value, with void handling applied.
    pub fn lookup(&self, value: u32) -> Option<u32> {
        match self.table.get(value as usize) {
            Some(&t) if t != Self::VOID => Some(t),
            Some(_) => self.target_void,
            None if Some(value) == self.source_void => self.target_void,
            None => None,
        }
    }

    fn compile(&self) -> Result<ByteLut> {
        let mut lut = [MISS; 256];
        for (v, slot) in lut.iter_mut().enumerate() {
            if let Some(t) = self.lookup(v as u32) {
                if t > 255 {
                    return Err(Error::Argument(format!(
                        "target id {t} does not fit an 8-bit mask"
                    )));
                }
                *slot = t as u16;
            }
        }
        Ok(ByteLut(lut))
    }

    /// Remap every pixel of `mask` into the target space.
    pub fn project(&self, mask: &MaskImage) -> Result<MaskImage> {
        self.project_with(mask, Execution::Sequential)
    }

    /// Like [`project`](Self::project), splitting the rows of a single mask
    /// across threads when `exec` is parallel.
    pub fn project_with(&self, mask: &MaskImage, exec: Execution) -> Result<MaskImage> {
        if mask.space() != self.source {
            return Err(Error::Argument(format!(
                "mask is in space `{}`, table projects from `{}`",
                mask.space(),
                self.source
            )));
        }
        let lut = self.compile()?;
        let src = mask.data();
        let mut out = vec![0u8; src.len()];
        let chunk = (mask.width() as usize).max(1) * 64;
        exec.for_each_chunk_mut(&mut out, chunk, |i, dst| {
            let start = i * chunk;
            remap_slice(&lut, &src[start..start + dst.len()], dst);
        });
        // Misses were written as 0; find the first one if any.
        if let Some(i) = src.iter().position(|&v| lut.0[v as usize] == MISS) {
            let (x, y) = mask.coord(i);
            return Err(Error::InvalidPixel {
                context: format!("projection {} -> {}", self.source, self.target),
                x,
                y,
                value: src[i] as u32,
            });
        }
        MaskImage::new(mask.width(), mask.height(), out, self.target.clone())
    }

    /// Project many masks, one task per mask.
    pub fn project_all(&self, masks: &[MaskImage], exec: Execution) -> Result<Vec<MaskImage>> {
        exec.try_map(masks, |m| self.project(m))
    }
}

#[inline]
fn remap_slice(lut: &ByteLut, src: &[u8], dst: &mut [u8]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = lut.0[s as usize] as u8;
    }
}

/// Free-function form of [`ProjectionLut::project`].
pub fn project_mask(mask: &MaskImage, lut: &ProjectionLut) -> Result<MaskImage> {
    lut.project(mask)
}
