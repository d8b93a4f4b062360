//! Procedural shape/view/caption corpus.
//!
//! Each shape has a main part (seat, top or shade) and one or two secondary
//! parts. Views are 4x4 patch grids; viewpoints seen from above hide the parts
//! underneath the object and viewpoints from below hide the upper accessory
//! parts, so a single view rarely shows everything the caption mentions.
//!
//! Splits: a shape goes to the test split when the FNV-1a hash of its id modulo
//! 100 is below [`TEST_PERCENT`].

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{FeatureSpace, Patch, Vocabulary, ViewPatchGrid};
use crate::error::{invalid, Error, Result};
use crate::rng::{derive_seed, rng_from_seed};

pub const GRID_SIDE: usize = 4;
pub const TEST_PERCENT: u64 = 20;
pub const DEFAULT_CAPTION_LEN: usize = 16;

pub const COLORS: [&str; 8] = ["red", "blue", "green", "black", "white", "brown", "gray", "yellow"];
pub const MATERIALS: [&str; 6] = ["wooden", "metal", "plastic", "leather", "fabric", "glass"];
pub const TEXTURES: [&str; 4] = ["smooth", "striped", "dotted", "glossy"];
const FUNCTION_WORDS: [&str; 4] = ["a", "with", "and", "having"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Chair,
    Table,
    Lamp,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Chair, Category::Table, Category::Lamp];

    pub fn word(self) -> &'static str {
        match self {
            Category::Chair => "chair",
            Category::Table => "table",
            Category::Lamp => "lamp",
        }
    }

    pub fn main_part(self) -> PartKind {
        match self {
            Category::Chair => PartKind::Seat,
            Category::Table => PartKind::Top,
            Category::Lamp => PartKind::Shade,
        }
    }

    pub fn secondary_parts(self) -> &'static [PartKind] {
        match self {
            Category::Chair => &[PartKind::Back, PartKind::Leg, PartKind::Arm, PartKind::Wheel],
            Category::Table => &[PartKind::Leg, PartKind::Drawer, PartKind::Shelf],
            Category::Lamp => &[PartKind::Pole, PartKind::Base],
        }
    }

    pub fn allows(self, kind: PartKind) -> bool {
        kind == self.main_part() || self.secondary_parts().contains(&kind)
    }

    /// Grid cells `(row, col)` occupied by `kind` in the canonical (unmirrored) layout.
    pub fn layout(self, kind: PartKind) -> &'static [(usize, usize)] {
        use PartKind::*;
        match (self, kind) {
            (Category::Chair, Back) => &[(0, 1), (0, 2)],
            (Category::Chair, Seat) => &[(1, 1), (1, 2)],
            (Category::Chair, Arm) => &[(1, 0), (1, 3)],
            (Category::Chair, Leg) => &[(2, 0), (2, 3), (3, 0), (3, 3)],
            (Category::Chair, Wheel) => &[(3, 1), (3, 2)],
            (Category::Table, Top) => &[(1, 0), (1, 1), (1, 2), (1, 3)],
            (Category::Table, Drawer) => &[(2, 1), (2, 2)],
            (Category::Table, Shelf) => &[(3, 1), (3, 2)],
            (Category::Table, Leg) => &[(2, 0), (2, 3), (3, 0), (3, 3)],
            (Category::Lamp, Shade) => &[(0, 1), (0, 2), (1, 1), (1, 2)],
            (Category::Lamp, Pole) => &[(2, 1), (2, 2)],
            (Category::Lamp, Base) => &[(3, 0), (3, 1), (3, 2), (3, 3)],
            _ => &[],
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartKind {
    Seat,
    Back,
    Leg,
    Arm,
    Wheel,
    Top,
    Drawer,
    Shelf,
    Shade,
    Pole,
    Base,
}

impl PartKind {
    pub const ALL: [PartKind; 11] = [
        PartKind::Seat,
        PartKind::Back,
        PartKind::Leg,
        PartKind::Arm,
        PartKind::Wheel,
        PartKind::Top,
        PartKind::Drawer,
        PartKind::Shelf,
        PartKind::Shade,
        PartKind::Pole,
        PartKind::Base,
    ];

    pub fn id(self) -> u32 {
        Self::ALL.iter().position(|&k| k == self).unwrap() as u32
    }

    pub fn from_id(id: u32) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    /// Caption word for the part.
    pub fn word(self) -> &'static str {
        match self {
            PartKind::Seat => "seat",
            PartKind::Back => "back",
            PartKind::Leg => "legs",
            PartKind::Arm => "arms",
            PartKind::Wheel => "wheels",
            PartKind::Top => "top",
            PartKind::Drawer => "drawer",
            PartKind::Shelf => "shelf",
            PartKind::Shade => "shade",
            PartKind::Pole => "pole",
            PartKind::Base => "base",
        }
    }
}

impl fmt::Display for PartKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

impl FromStr for PartKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        PartKind::ALL
            .into_iter()
            .find(|k| k.word() == s || k.word().trim_end_matches('s') == s)
            .ok_or_else(|| invalid(format!("unknown part kind '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Part {
    pub kind: PartKind,
    pub color: u32,
    pub material: u32,
    pub texture: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub shape_id: String,
    pub category: Category,
    /// Main part first, then secondary parts in canonical kind order.
    pub parts: Vec<Part>,
}

impl ShapeSpec {
    pub fn new(shape_id: impl Into<String>, category: Category, parts: Vec<Part>) -> Result<Self> {
        let spec = Self { shape_id: shape_id.into(), category, parts };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let mut occupied = [[false; GRID_SIDE]; GRID_SIDE];
        for (i, p) in self.parts.iter().enumerate() {
            if !self.category.allows(p.kind) {
                return Err(invalid(format!("{} cannot have a {}", self.category, p.kind)));
            }
            if self.parts[..i].iter().any(|q| q.kind == p.kind) {
                return Err(invalid(format!("duplicate part {}", p.kind)));
            }
            if p.color as usize >= COLORS.len() || p.material as usize >= MATERIALS.len() || p.texture as usize >= TEXTURES.len() {
                return Err(Error::OutOfRange(format!("attribute id out of range on {}", p.kind)));
            }
            for &(r, c) in self.category.layout(p.kind) {
                if occupied[r][c] {
                    return Err(invalid(format!("layout collision at ({r}, {c}) for {}", p.kind)));
                }
                occupied[r][c] = true;
            }
        }
        if self.parts.first().map(|p| p.kind) != Some(self.category.main_part()) {
            return Err(invalid(format!("{} must start with its {}", self.shape_id, self.category.main_part())));
        }
        Ok(())
    }

    pub fn part(&self, kind: PartKind) -> Option<&Part> {
        self.parts.iter().find(|p| p.kind == kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Elevation {
    Level,
    Above,
    Below,
}

impl Elevation {
    pub fn degrees(self) -> i32 {
        match self {
            Elevation::Level => 0,
            Elevation::Above => 30,
            Elevation::Below => -30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Viewpoint {
    pub elevation: Elevation,
    pub azimuth_deg: f64,
    pub hidden: Vec<PartKind>,
    /// Mirror the layout horizontally.
    pub mirrored: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewSpec {
    pub viewpoints: Vec<Viewpoint>,
}

impl ViewSpec {
    /// `count` viewpoints cycling elevation above / level / below with evenly
    /// spaced azimuths. Views from above hide parts under the object; views
    /// from below hide the upper accessories.
    pub fn standard(count: usize) -> Result<Self> {
        if count == 0 {
            return Err(invalid("at least one viewpoint is required"));
        }
        let viewpoints = (0..count)
            .map(|i| {
                let elevation = [Elevation::Above, Elevation::Level, Elevation::Below][i % 3];
                let hidden = match elevation {
                    Elevation::Above => vec![PartKind::Leg, PartKind::Wheel, PartKind::Shelf, PartKind::Pole, PartKind::Base],
                    Elevation::Below => vec![PartKind::Back, PartKind::Arm, PartKind::Drawer],
                    Elevation::Level => Vec::new(),
                };
                Viewpoint { elevation, azimuth_deg: 360.0 * i as f64 / count as f64, hidden, mirrored: i % 2 == 1 }
            })
            .collect();
        let spec = Self { viewpoints };
        spec.validate()?;
        Ok(spec)
    }

    pub fn len(&self) -> usize {
        self.viewpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.viewpoints.is_empty()
    }

    /// Every part kind must be visible from at least one viewpoint.
    pub fn validate(&self) -> Result<()> {
        if self.viewpoints.is_empty() {
            return Err(invalid("at least one viewpoint is required"));
        }
        for kind in PartKind::ALL {
            if self.viewpoints.iter().all(|v| v.hidden.contains(&kind)) {
                return Err(invalid(format!("{kind} is hidden from every viewpoint")));
            }
        }
        Ok(())
    }
}

pub fn feature_space() -> FeatureSpace {
    FeatureSpace {
        n_parts: PartKind::ALL.len(),
        n_colors: COLORS.len(),
        n_materials: MATERIALS.len(),
        n_textures: TEXTURES.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionGrammar {
    /// Caption slots including BOS and EOS.
    pub cap_len: usize,
    /// References realized per shape (1 or 2 templates).
    pub captions_per_shape: usize,
}

impl Default for CaptionGrammar {
    fn default() -> Self {
        Self { cap_len: DEFAULT_CAPTION_LEN, captions_per_shape: 1 }
    }
}

impl CaptionGrammar {
    pub const TEMPLATES: usize = 2;

    pub fn vocabulary(&self) -> Vocabulary {
        let words = FUNCTION_WORDS
            .iter()
            .copied()
            .chain(Category::ALL.iter().map(|c| c.word()))
            .chain(COLORS)
            .chain(MATERIALS)
            .chain(TEXTURES)
            .chain(PartKind::ALL.iter().map(|k| k.word()));
        Vocabulary::new(words)
    }

    /// Realizes template `variant` for `shape`.
    ///
    /// * 0: `a <texture> <color> <material> <category> with <color> <material> <part> [and ...]`
    /// * 1: `a <color> <material> <texture> <category> having <color> <material> <part> [and ...]`
    pub fn realize(&self, shape: &ShapeSpec, variant: usize) -> Result<Vec<&'static str>> {
        let main = shape.parts.first().ok_or_else(|| invalid("shape has no parts"))?;
        let (c, m, t) = (COLORS[main.color as usize], MATERIALS[main.material as usize], TEXTURES[main.texture as usize]);
        let mut words = match variant % Self::TEMPLATES {
            0 => vec!["a", t, c, m, shape.category.word(), "with"],
            _ => vec!["a", c, m, t, shape.category.word(), "having"],
        };
        for (i, p) in shape.parts.iter().skip(1).enumerate() {
            if i > 0 {
                words.push("and");
            }
            words.extend([COLORS[p.color as usize], MATERIALS[p.material as usize], p.kind.word()]);
        }
        if words.len() + 2 > self.cap_len {
            return Err(invalid(format!(
                "{}: caption of {} words overflows {} slots",
                shape.shape_id,
                words.len(),
                self.cap_len
            )));
        }
        Ok(words)
    }

    pub fn captions(&self, shape: &ShapeSpec) -> Result<Vec<String>> {
        let n = self.captions_per_shape.clamp(1, Self::TEMPLATES);
        (0..n).map(|v| self.realize(shape, v).map(|w| w.join(" "))).collect()
    }

    /// Stable digest of the grammar configuration and its vocabulary.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("grammar serializes"));
        h.update(self.vocabulary().to_file_string().as_bytes());
        hex::encode(&h.finalize()[..8])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

pub fn split_for(shape_id: &str) -> Split {
    // FNV-1a, 64 bit.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in shape_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    if h % 100 < TEST_PERCENT {
        Split::Test
    } else {
        Split::Train
    }
}

/// One JSONL line of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeRecord {
    pub shape_id: String,
    pub category: Category,
    pub parts: Vec<Part>,
    pub views: Vec<ViewPatchGrid>,
    pub captions: Vec<String>,
    pub split: Split,
}

impl ShapeRecord {
    pub fn spec(&self) -> Result<ShapeSpec> {
        ShapeSpec::new(self.shape_id.clone(), self.category, self.parts.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub records: Vec<ShapeRecord>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ShapeRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn find(&self, shape_id: &str) -> Option<&ShapeRecord> {
        self.records.iter().find(|r| r.shape_id == shape_id)
    }

    pub fn view_count(&self) -> usize {
        self.records.iter().map(|r| r.views.len()).sum()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory cannot fail");
        buf
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: ShapeRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("dataset line {}: {e}", i + 1)))?;
            records.push(r);
        }
        Ok(Self { records })
    }
}

pub fn render_views(shape: &ShapeSpec, views: &ViewSpec) -> Result<Vec<ViewPatchGrid>> {
    shape.validate()?;
    Ok(views
        .viewpoints
        .iter()
        .map(|vp| {
            let mut grid = ViewPatchGrid::empty(GRID_SIDE);
            for p in &shape.parts {
                if vp.hidden.contains(&p.kind) {
                    continue;
                }
                for &(r, c) in shape.category.layout(p.kind) {
                    let c = if vp.mirrored { GRID_SIDE - 1 - c } else { c };
                    grid.set(r, c, Patch::new(p.kind.id(), p.color, p.material, p.texture));
                }
            }
            grid
        })
        .collect())
}

pub fn random_shape(shape_id: impl Into<String>, seed: u64) -> Result<ShapeSpec> {
    let mut rng = rng_from_seed(seed);
    let category = *Category::ALL.choose(&mut rng).unwrap();
    let random_part = |kind: PartKind, rng: &mut crate::rng::Rng| Part {
        kind,
        color: rng.random_range(0..COLORS.len() as u32),
        material: rng.random_range(0..MATERIALS.len() as u32),
        texture: rng.random_range(0..TEXTURES.len() as u32),
    };
    let mut parts = vec![random_part(category.main_part(), &mut rng)];
    let options = category.secondary_parts();
    let count = if options.len() > 1 && rng.random_bool(0.7) { 2 } else { 1 };
    let mut chosen: Vec<PartKind> = options.choose_multiple(&mut rng, count).copied().collect();
    chosen.sort();
    for kind in chosen {
        parts.push(random_part(kind, &mut rng));
    }
    ShapeSpec::new(shape_id, category, parts)
}

pub fn generate_corpus(n_shapes: usize, views: &ViewSpec, grammar: &CaptionGrammar, seed: u64) -> Result<Dataset> {
    if n_shapes == 0 {
        return Err(invalid("n_shapes must be at least 1"));
    }
    views.validate()?;
    let mut records = Vec::with_capacity(n_shapes);
    for i in 0..n_shapes {
        let shape_id = format!("shape-{i:05}");
        let shape = random_shape(shape_id.clone(), derive_seed(seed, &[i as u64]))?;
        let captions = grammar.captions(&shape)?;
        let grids = render_views(&shape, views)?;
        records.push(ShapeRecord {
            split: split_for(&shape_id),
            shape_id,
            category: shape.category,
            parts: shape.parts,
            views: grids,
            captions,
        });
    }
    Ok(Dataset { records })
}

/// Removes every cell of `kind` from the view.
pub fn drop_patches(view: &ViewPatchGrid, kind: PartKind) -> ViewPatchGrid {
    let mut out = view.clone();
    for (i, p) in view.cells().iter().enumerate() {
        if p.present && p.part == kind.id() {
            out.set_index(i, Patch::ABSENT);
        }
    }
    out
}

/// Replaces the `kind` cells of `a` with the `kind` cells of `b`, slot by slot.
/// Cells of `b` that would land on another part of `a` are skipped.
pub fn mix_patches(a: &ViewPatchGrid, b: &ViewPatchGrid, kind: PartKind) -> Result<ViewPatchGrid> {
    if a.side() != b.side() {
        return Err(invalid(format!("grid sizes differ: {} vs {}", a.side(), b.side())));
    }
    let mut out = drop_patches(a, kind);
    for (i, p) in b.cells().iter().enumerate() {
        if p.present && p.part == kind.id() && !out.cells()[i].present {
            out.set_index(i, *p);
        }
    }
    Ok(out)
}
