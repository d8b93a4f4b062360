//! Shared latent space for view patches and caption tokens.
//!
//! A caption row of a latent sequence is `token_row(w) + modality[cap] + position[k]`
//! and an image row is `one_hot(patch) * patch_projector + modality[img] + position[j]`.
//! Rounding compares a caption row against every token placed at the same slot,
//! so `round(embed(w)) = w` whenever token rows are pairwise distinct.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{standard_normal, Rng};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

pub const IMAGE_SEGMENT: usize = 0;
pub const CAPTION_SEGMENT: usize = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary with the reserved tokens first, followed by `words`
    /// in order (duplicates skipped).
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, u32> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        for w in words {
            let w = w.as_ref();
            if !index.contains_key(w) {
                index.insert(w.to_string(), tokens.len() as u32);
                tokens.push(w.to_string());
            }
        }
        Self { tokens, index }
    }

    /// Vocabulary from a complete token list whose first four entries are the
    /// reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Format("vocabulary must start with <pad> <bos> <eos> <unk>".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Format(format!("invalid token on line {}", i + 1)));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("duplicate token '{t}'")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Reads a UTF-8 file with one token per line; the line number is the id.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn to_file_string(&self) -> String {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        out
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or(RESERVED[UNK as usize])
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// `BOS w_1 .. w_n EOS PAD ..` framed to exactly `cap_len` ids.
    pub fn encode(&self, words: &[&str], cap_len: usize) -> Result<Vec<u32>> {
        if words.len() + 2 > cap_len {
            return Err(invalid(format!(
                "caption of {} words does not fit {cap_len} slots",
                words.len()
            )));
        }
        let mut ids = Vec::with_capacity(cap_len);
        ids.push(BOS);
        ids.extend(words.iter().map(|w| self.id(w)));
        ids.push(EOS);
        ids.resize(cap_len, PAD);
        Ok(ids)
    }

    /// Words between the leading BOS and the first EOS, with reserved ids dropped.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        let mut words = Vec::new();
        for (i, &id) in ids.iter().enumerate() {
            match id {
                BOS if i == 0 => continue,
                EOS => break,
                PAD | BOS | UNK => continue,
                _ => words.push(self.token(id).to_string()),
            }
        }
        words
    }
}

/// Sizes of the categorical patch features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpace {
    pub n_parts: usize,
    pub n_colors: usize,
    pub n_materials: usize,
    pub n_textures: usize,
}

impl FeatureSpace {
    /// Length of the one-hot patch vector (the trailing slot is the present flag).
    pub fn width(&self) -> usize {
        self.n_parts + self.n_colors + self.n_materials + self.n_textures + 1
    }
}

/// One grid cell. Serialized as `[part, color, material, texture, present]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(from = "[u32; 5]", into = "[u32; 5]")]
pub struct Patch {
    pub part: u32,
    pub color: u32,
    pub material: u32,
    pub texture: u32,
    pub present: bool,
}

impl Patch {
    pub const ABSENT: Patch = Patch { part: 0, color: 0, material: 0, texture: 0, present: false };

    pub fn new(part: u32, color: u32, material: u32, texture: u32) -> Self {
        Self { part, color, material, texture, present: true }
    }
}

impl From<[u32; 5]> for Patch {
    fn from(v: [u32; 5]) -> Self {
        Self { part: v[0], color: v[1], material: v[2], texture: v[3], present: v[4] != 0 }
    }
}

impl From<Patch> for [u32; 5] {
    fn from(p: Patch) -> Self {
        [p.part, p.color, p.material, p.texture, p.present as u32]
    }
}

/// Symbolic stand-in for a rendered view: a square grid of patches, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Patch>", into = "Vec<Patch>")]
pub struct ViewPatchGrid {
    side: usize,
    cells: Vec<Patch>,
}

impl TryFrom<Vec<Patch>> for ViewPatchGrid {
    type Error = Error;

    fn try_from(cells: Vec<Patch>) -> Result<Self> {
        let side = (cells.len() as f64).sqrt().round() as usize;
        if side == 0 || side * side != cells.len() {
            return Err(Error::Format(format!("{} cells do not form a square grid", cells.len())));
        }
        Ok(Self { side, cells })
    }
}

impl From<ViewPatchGrid> for Vec<Patch> {
    fn from(g: ViewPatchGrid) -> Self {
        g.cells
    }
}

impl ViewPatchGrid {
    pub fn empty(side: usize) -> Self {
        Self { side, cells: vec![Patch::ABSENT; side * side] }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cells(&self) -> &[Patch] {
        &self.cells
    }

    pub fn cell(&self, row: usize, col: usize) -> Patch {
        self.cells[row * self.side + col]
    }

    pub fn set(&mut self, row: usize, col: usize, patch: Patch) {
        self.cells[row * self.side + col] = patch;
    }

    pub fn set_index(&mut self, index: usize, patch: Patch) {
        self.cells[index] = patch;
    }

    pub fn validate(&self, space: &FeatureSpace) -> Result<()> {
        for (i, p) in self.cells.iter().enumerate() {
            if !p.present {
                if *p != Patch::ABSENT {
                    return Err(Error::OutOfRange(format!("absent patch {i} carries features")));
                }
                continue;
            }
            let checks = [
                (p.part, space.n_parts, "part"),
                (p.color, space.n_colors, "color"),
                (p.material, space.n_materials, "material"),
                (p.texture, space.n_textures, "texture"),
            ];
            for (value, limit, name) in checks {
                if value as usize >= limit {
                    return Err(Error::OutOfRange(format!("patch {i}: {name} id {value} >= {limit}")));
                }
            }
        }
        Ok(())
    }

    /// One-hot feature matrix, one row per cell. Absent cells are all zeros.
    pub fn one_hot(&self, space: &FeatureSpace) -> Array2<f64> {
        let mut out = Array2::zeros((self.cells.len(), space.width()));
        for (i, p) in self.cells.iter().enumerate() {
            for col in Self::hot_columns(p, space).into_iter().flatten() {
                out[[i, col]] = 1.0;
            }
        }
        out
    }

    fn hot_columns(p: &Patch, space: &FeatureSpace) -> [Option<usize>; 5] {
        if !p.present {
            return [None; 5];
        }
        let mut base = 0;
        let mut cols = [None; 5];
        for (slot, (value, size)) in [
            (p.part, space.n_parts),
            (p.color, space.n_colors),
            (p.material, space.n_materials),
            (p.texture, space.n_textures),
        ]
        .into_iter()
        .enumerate()
        {
            cols[slot] = Some(base + value as usize);
            base += size;
        }
        cols[4] = Some(base);
        cols
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputPair {
    pub view: ViewPatchGrid,
    pub caption: Vec<u32>,
}

/// Joint latent: image rows first, then caption rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    pub values: Array2<f64>,
    pub img_len: usize,
    pub cap_len: usize,
}

impl LatentSequence {
    pub fn new(values: Array2<f64>, img_len: usize, cap_len: usize) -> Result<Self> {
        if values.nrows() != img_len + cap_len {
            return Err(Error::Shape(format!(
                "{} rows for segments {img_len} + {cap_len}",
                values.nrows()
            )));
        }
        Ok(Self { values, img_len, cap_len })
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn image(&self) -> ArrayView2<'_, f64> {
        self.values.slice(s![..self.img_len, ..])
    }

    pub fn caption(&self) -> ArrayView2<'_, f64> {
        self.values.slice(s![self.img_len.., ..])
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Learned embedding parameters: `EMB` for tokens and patches plus the additive
/// segment and slot vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    /// vocab_size x H
    pub tokens: Array2<f64>,
    /// feature_width x H
    pub patch_projector: Array2<f64>,
    /// 2 x H, row 0 image, row 1 caption
    pub modality: Array2<f64>,
    /// max(L_img, L_cap) x H
    pub positions: Array2<f64>,
}

impl EmbeddingTable {
    pub fn zeros(vocab_size: usize, feature_width: usize, max_len: usize, dim: usize) -> Self {
        Self {
            tokens: Array2::zeros((vocab_size, dim)),
            patch_projector: Array2::zeros((feature_width, dim)),
            modality: Array2::zeros((2, dim)),
            positions: Array2::zeros((max_len, dim)),
        }
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn token_row(&self, id: u32) -> ArrayView2<'_, f64> {
        self.tokens.slice(s![id as usize..id as usize + 1, ..])
    }

    /// Additive offset of caption slot `k`: `modality[cap] + position[k]`.
    pub fn caption_offsets(&self, cap_len: usize) -> Array2<f64> {
        let mut out = self.positions.slice(s![..cap_len, ..]).to_owned();
        out += &self.modality.row(CAPTION_SEGMENT);
        out
    }

    pub fn image_offsets(&self, img_len: usize) -> Array2<f64> {
        let mut out = self.positions.slice(s![..img_len, ..]).to_owned();
        out += &self.modality.row(IMAGE_SEGMENT);
        out
    }

    pub fn embed_view(&self, view: &ViewPatchGrid, space: &FeatureSpace) -> Result<Array2<f64>> {
        view.validate(space)?;
        if space.width() != self.patch_projector.nrows() {
            return Err(Error::Shape(format!(
                "feature width {} but projector has {} rows",
                space.width(),
                self.patch_projector.nrows()
            )));
        }
        if view.len() > self.positions.nrows() {
            return Err(Error::Shape(format!("{} patches exceed {} positions", view.len(), self.positions.nrows())));
        }
        Ok(view.one_hot(space).dot(&self.patch_projector) + self.image_offsets(view.len()))
    }

    pub fn embed_caption(&self, caption: &[u32]) -> Result<Array2<f64>> {
        if caption.len() > self.positions.nrows() {
            return Err(Error::Shape(format!("{} tokens exceed {} positions", caption.len(), self.positions.nrows())));
        }
        let mut out = self.caption_offsets(caption.len());
        for (k, &id) in caption.iter().enumerate() {
            if id as usize >= self.vocab_size() {
                return Err(Error::OutOfRange(format!("token id {id} >= vocabulary size {}", self.vocab_size())));
            }
            let mut row = out.row_mut(k);
            row += &self.tokens.row(id as usize);
        }
        Ok(out)
    }

    /// Deterministic joint embedding `EMB(w_img ++ w_cap)`.
    pub fn embed_pair(&self, pair: &InputPair, space: &FeatureSpace) -> Result<LatentSequence> {
        let img = self.embed_view(&pair.view, space)?;
        let cap = self.embed_caption(&pair.caption)?;
        let values = ndarray::concatenate(Axis(0), &[img.view(), cap.view()])
            .map_err(|e| Error::Shape(e.to_string()))?;
        LatentSequence::new(values, pair.view.len(), pair.caption.len())
    }

    /// Draws `x_0 ~ N(EMB(pair), beta0 I)` over both segments.
    pub fn sample_x0(&self, pair: &InputPair, space: &FeatureSpace, beta0: f64, rng: &mut Rng) -> Result<LatentSequence> {
        if !(beta0 > 0.0 && beta0 < 1.0) {
            return Err(invalid(format!("beta0 = {beta0} outside (0, 1)")));
        }
        let mut x = self.embed_pair(pair, space)?;
        let sd = beta0.sqrt();
        x.values.mapv_inplace(|v| v + sd * standard_normal(rng));
        Ok(x)
    }

    /// Rounding logits `-||x_k - embed(v at slot k)||^2` and their argmax,
    /// ties going to the smaller id.
    pub fn round_to_tokens(&self, cap_latent: ArrayView2<'_, f64>) -> Result<(Vec<u32>, Array2<f64>)> {
        self.check_caption_latent(cap_latent)?;
        let logits = self.rounding_logits(cap_latent);
        let tokens = logits.rows().into_iter().map(|row| argmax_first(row.iter().copied())).collect();
        Ok((tokens, logits))
    }

    pub(crate) fn rounding_logits(&self, cap_latent: ArrayView2<'_, f64>) -> Array2<f64> {
        let cap_len = cap_latent.nrows();
        let centered = &cap_latent - &self.caption_offsets(cap_len);
        let mut logits = Array2::zeros((cap_len, self.vocab_size()));
        for (k, x) in centered.rows().into_iter().enumerate() {
            for (v, tok) in self.tokens.rows().into_iter().enumerate() {
                let d: f64 = x.iter().zip(tok.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                logits[[k, v]] = -d;
            }
        }
        logits
    }

    /// Snaps every caption row onto the nearest token embedding of its slot.
    pub fn clamp_to_embedding(&self, cap_latent: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let (tokens, _) = self.round_to_tokens(cap_latent)?;
        self.embed_caption(&tokens)
    }

    fn check_caption_latent(&self, cap_latent: ArrayView2<'_, f64>) -> Result<()> {
        if cap_latent.ncols() != self.dim() {
            return Err(Error::Shape(format!("latent width {} != embedding dim {}", cap_latent.ncols(), self.dim())));
        }
        if cap_latent.nrows() > self.positions.nrows() {
            return Err(Error::Shape("caption latent longer than the position table".into()));
        }
        if cap_latent.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: 0, what: "caption latent".into() });
        }
        Ok(())
    }
}

pub(crate) fn argmax_first(values: impl Iterator<Item = f64>) -> u32 {
    let mut best = f64::NEG_INFINITY;
    let mut best_i = 0u32;
    for (i, v) in values.enumerate() {
        if v > best {
            best = v;
            best_i = i as u32;
        }
    }
    best_i
}
