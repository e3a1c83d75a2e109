//! Location vocabularies: the bidirectional mapping between physical places
//! (cell towers or grid cells) and dense integer tokens, plus the PAD/MASK
//! specials appended after the place tokens.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{GeoPoint, Projection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Cdr,
    Gps,
}

impl Modality {
    pub fn index(self) -> usize {
        match self {
            Modality::Cdr => 0,
            Modality::Gps => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VocabEntry {
    pub token: TokenId,
    pub place_id: String,
    pub centroid: GeoPoint,
}

/// Geometry of a regular grid over a bbox; cells are `cell_size_m` squares in
/// the local projection, indexed row-major from the south-west corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lat_min: f64,
    pub lon_min: f64,
    pub lat_max: f64,
    pub lon_max: f64,
    pub cell_size_m: f64,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone)]
pub struct LocationVocab {
    modality: Modality,
    entries: Vec<VocabEntry>,
    by_place: HashMap<String, TokenId>,
    grid: Option<GridSpec>,
    projection: Projection,
}

/// Cell counts guard against float noise in the projected extent: an extent
/// that is a whole multiple of the cell size must not gain a phantom cell.
fn cell_count(extent_m: f64, cell_m: f64) -> usize {
    (((extent_m - 1e-6) / cell_m).ceil().max(1.0)) as usize
}

pub fn grid_place_id(row: usize, col: usize) -> String {
    format!("r{row:03}_c{col:03}")
}

impl LocationVocab {
    /// Grid vocabulary covering `sw..ne` with square cells of `cell_size_m`.
    pub fn build_grid_vocab(sw: GeoPoint, ne: GeoPoint, cell_size_m: f64) -> Result<Self> {
        sw.validate()?;
        ne.validate()?;
        if !(cell_size_m > 0.0) {
            return Err(Error::config(format!("cell_size_m must be > 0, got {cell_size_m}")));
        }
        let projection = Projection::for_bbox(sw, ne);
        let (width_m, height_m) = projection.to_meters(ne);
        if width_m <= 1e-6 || height_m <= 1e-6 {
            return Err(Error::config(format!(
                "degenerate bbox: projected extent {width_m:.3}m x {height_m:.3}m has zero area"
            )));
        }
        let rows = cell_count(height_m, cell_size_m);
        let cols = cell_count(width_m, cell_size_m);
        let mut entries = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let cx = (c as f64 + 0.5) * cell_size_m;
                let cy = (r as f64 + 0.5) * cell_size_m;
                entries.push(VocabEntry {
                    token: TokenId((r * cols + c) as u32),
                    place_id: grid_place_id(r, c),
                    centroid: projection.to_geo(cx, cy),
                });
            }
        }
        let grid = GridSpec {
            lat_min: sw.lat,
            lon_min: sw.lon,
            lat_max: ne.lat,
            lon_max: ne.lon,
            cell_size_m,
            rows,
            cols,
        };
        Self::assemble(Modality::Gps, entries, Some(grid), projection)
    }

    /// Tower vocabulary from an explicit (place_id, location) list, in order.
    pub fn build_tower_vocab(towers: Vec<(String, GeoPoint)>) -> Result<Self> {
        if towers.is_empty() {
            return Err(Error::data("tower vocabulary is empty"));
        }
        let mut lat = (f64::MAX, f64::MIN);
        let mut lon = (f64::MAX, f64::MIN);
        for (_, p) in &towers {
            p.validate()?;
            lat = (lat.0.min(p.lat), lat.1.max(p.lat));
            lon = (lon.0.min(p.lon), lon.1.max(p.lon));
        }
        let sw = GeoPoint { lat: lat.0, lon: lon.0 };
        let ne = GeoPoint { lat: lat.1, lon: lon.1 };
        let projection = Projection::for_bbox(sw, ne);
        let entries = towers
            .into_iter()
            .enumerate()
            .map(|(i, (place_id, centroid))| VocabEntry {
                token: TokenId(i as u32),
                place_id,
                centroid,
            })
            .collect();
        Self::assemble(Modality::Cdr, entries, None, projection)
    }

    /// Placeless vocabulary, the form an empty dataset file denotes.
    pub fn empty() -> Self {
        LocationVocab {
            modality: Modality::Cdr,
            entries: Vec::new(),
            by_place: HashMap::new(),
            grid: None,
            projection: Projection::new(GeoPoint { lat: 0.0, lon: 0.0 }, 0.0),
        }
    }

    #[cfg(test)]
    pub(crate) fn entries_mut(&mut self) -> &mut Vec<VocabEntry> {
        &mut self.entries
    }

    fn assemble(
        modality: Modality,
        entries: Vec<VocabEntry>,
        grid: Option<GridSpec>,
        projection: Projection,
    ) -> Result<Self> {
        let mut by_place = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.token.index() != i {
                return Err(Error::data(format!(
                    "token ids must be dense and ordered; entry {i} has id {}",
                    e.token.0
                )));
            }
            if by_place.insert(e.place_id.clone(), e.token).is_some() {
                return Err(Error::data(format!("duplicate place_id `{}`", e.place_id)));
            }
        }
        Ok(LocationVocab { modality, entries, by_place, grid, projection })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    /// Number of place tokens (specials excluded).
    pub fn n_places(&self) -> usize {
        self.entries.len()
    }

    /// Total token count including PAD and MASK.
    pub fn n_tokens(&self) -> usize {
        self.entries.len() + 2
    }

    pub fn pad_token(&self) -> TokenId {
        TokenId(self.entries.len() as u32)
    }

    pub fn mask_token(&self) -> TokenId {
        TokenId(self.entries.len() as u32 + 1)
    }

    pub fn is_place(&self, t: TokenId) -> bool {
        t.index() < self.entries.len()
    }

    pub fn token_of(&self, place_id: &str) -> Option<TokenId> {
        self.by_place.get(place_id).copied()
    }

    pub fn place_of(&self, t: TokenId) -> Option<&str> {
        self.entries.get(t.index()).map(|e| e.place_id.as_str())
    }

    pub fn centroid(&self, t: TokenId) -> Option<GeoPoint> {
        self.entries.get(t.index()).map(|e| e.centroid)
    }

    pub fn entries(&self) -> &[VocabEntry] {
        &self.entries
    }

    pub fn grid(&self) -> Option<&GridSpec> {
        self.grid.as_ref()
    }

    pub fn projection(&self) -> &Projection {
        &self.projection
    }

    /// Tokens of the (up to 8) grid cells adjacent to `t`. Empty for towers.
    pub fn grid_neighbors(&self, t: TokenId) -> Vec<TokenId> {
        let Some(grid) = &self.grid else { return Vec::new() };
        let idx = t.index();
        if idx >= self.entries.len() {
            return Vec::new();
        }
        let (r, c) = (idx / grid.cols, idx % grid.cols);
        let mut out = Vec::with_capacity(8);
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                if dr == 0 && dc == 0 {
                    continue;
                }
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if nr >= 0 && nc >= 0 && (nr as usize) < grid.rows && (nc as usize) < grid.cols {
                    out.push(TokenId((nr as usize * grid.cols + nc as usize) as u32));
                }
            }
        }
        out
    }
}
