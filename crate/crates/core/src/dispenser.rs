//! Compartment grid, article loading and orifice control.
//!
//! The dispenser body is a `rows x cols` grid of unit cells. Removing walls
//! merges an axis-aligned rectangle of cells into one compartment region.
//! A region is identified by the row-major index of its top-left cell and
//! holds at most one article.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mission::{SafeDropToken, TokenKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Article {
    pub id: String,
    #[serde(default)]
    pub destination: String,
    pub width_cells: u32,
    pub length_cells: u32,
    pub mass_kg: f64,
    #[serde(default)]
    pub sensitive: bool,
    #[serde(default)]
    pub ballast: bool,
    #[serde(default)]
    pub contraband: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sender: Option<String>,
}

impl Article {
    pub fn area(&self) -> u32 {
        self.width_cells * self.length_cells
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Screening {
    Accepted,
    Rejected,
}

/// Load-time contraband screen. Rejected articles never reach a manifest.
pub fn screen_article(article: &Article) -> Screening {
    if article.contraband {
        Screening::Rejected
    } else {
        Screening::Accepted
    }
}

/// Splits a batch into (accepted, rejected), preserving order.
pub fn screen_batch(articles: &[Article]) -> (Vec<Article>, Vec<Article>) {
    articles
        .iter()
        .cloned()
        .partition(|a| screen_article(a) == Screening::Accepted)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orifice {
    Closed,
    Open,
}

pub type RegionId = u32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub id: RegionId,
    pub row: u32,
    pub col: u32,
    /// Extent in rows (an article's `length_cells`).
    pub rows: u32,
    /// Extent in columns (an article's `width_cells`).
    pub cols: u32,
    pub article: Option<String>,
    pub orifice: Orifice,
}

impl Region {
    pub fn is_merged(&self) -> bool {
        self.rows * self.cols > 1
    }

    pub fn fits(&self, article: &Article) -> bool {
        self.cols >= article.width_cells && self.rows >= article.length_cells
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellState {
    Empty,
    Holds(String),
    MergedInto(RegionId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub row: u32,
    pub col: u32,
    pub rows: u32,
    pub cols: u32,
}

impl Rect {
    pub fn overlaps(&self, other: &Rect) -> bool {
        self.row < other.row + other.rows
            && other.row < self.row + self.rows
            && self.col < other.col + other.cols
            && other.col < self.col + self.cols
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum DispenserError {
    #[error("orifice open requested without a valid safe-drop token")]
    GuardViolation,
    #[error("region {0} does not exist")]
    UnknownRegion(RegionId),
    #[error("region {0} is occupied")]
    RegionOccupied(RegionId),
    #[error("region {0} is too small for the article")]
    RegionTooSmall(RegionId),
    #[error("region {0} holds no article")]
    RegionEmpty(RegionId),
    #[error("orifice of region {0} is closed")]
    OrificeClosed(RegionId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompartmentGrid {
    rows: u32,
    cols: u32,
    regions: BTreeMap<RegionId, Region>,
}

impl CompartmentGrid {
    /// A grid with every wall in place: one region per cell.
    pub fn new(rows: u32, cols: u32) -> Self {
        assert!(rows > 0 && cols > 0, "grid dimensions must be positive");
        let mut regions = BTreeMap::new();
        for row in 0..rows {
            for col in 0..cols {
                let id = row * cols + col;
                regions.insert(
                    id,
                    Region {
                        id,
                        row,
                        col,
                        rows: 1,
                        cols: 1,
                        article: None,
                        orifice: Orifice::Closed,
                    },
                );
            }
        }
        Self { rows, cols, regions }
    }

    pub fn rows(&self) -> u32 {
        self.rows
    }

    pub fn cols(&self) -> u32 {
        self.cols
    }

    pub fn region(&self, id: RegionId) -> Option<&Region> {
        self.regions.get(&id)
    }

    pub fn regions(&self) -> impl Iterator<Item = &Region> {
        self.regions.values()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.values().all(|r| r.article.is_none())
    }

    pub fn occupied_count(&self) -> usize {
        self.regions.values().filter(|r| r.article.is_some()).count()
    }

    /// Rectangles of regions spanning more than one cell.
    pub fn merges(&self) -> Vec<Rect> {
        self.regions
            .values()
            .filter(|r| r.is_merged())
            .map(|r| Rect {
                row: r.row,
                col: r.col,
                rows: r.rows,
                cols: r.cols,
            })
            .collect()
    }

    /// Per-cell view, row-major.
    pub fn cell_states(&self) -> Vec<CellState> {
        let mut cells = vec![CellState::Empty; (self.rows * self.cols) as usize];
        for r in self.regions.values() {
            for dr in 0..r.rows {
                for dc in 0..r.cols {
                    let idx = ((r.row + dr) * self.cols + r.col + dc) as usize;
                    cells[idx] = if dr == 0 && dc == 0 {
                        match &r.article {
                            Some(a) => CellState::Holds(a.clone()),
                            None => CellState::Empty,
                        }
                    } else {
                        CellState::MergedInto(r.id)
                    };
                }
            }
        }
        cells
    }

    pub fn region_of_article(&self, article: &str) -> Option<RegionId> {
        self.regions
            .values()
            .find(|r| r.article.as_deref() == Some(article))
            .map(|r| r.id)
    }

    pub fn open_orifices(&self) -> Vec<RegionId> {
        self.regions
            .values()
            .filter(|r| r.orifice == Orifice::Open)
            .map(|r| r.id)
            .collect()
    }

    fn cell_is_free(&self, row: u32, col: u32) -> bool {
        // A free cell is an unmerged, empty, single-cell region.
        match self.regions.get(&(row * self.cols + col)) {
            Some(r) => !r.is_merged() && r.article.is_none(),
            None => false,
        }
    }

    /// First row-major anchor where a `rows x cols` block of free cells fits.
    pub fn find_free_block(&self, rows: u32, cols: u32) -> Option<(u32, u32)> {
        if rows > self.rows || cols > self.cols {
            return None;
        }
        for row in 0..=self.rows - rows {
            for col in 0..=self.cols - cols {
                let all_free = (0..rows).all(|dr| (0..cols).all(|dc| self.cell_is_free(row + dr, col + dc)));
                if all_free {
                    return Some((row, col));
                }
            }
        }
        None
    }

    /// Removes the walls inside a block of free cells, yielding one region.
    fn merge_block(&mut self, row: u32, col: u32, rows: u32, cols: u32) -> RegionId {
        let id = row * self.cols + col;
        for dr in 0..rows {
            for dc in 0..cols {
                self.regions.remove(&((row + dr) * self.cols + col + dc));
            }
        }
        self.regions.insert(
            id,
            Region {
                id,
                row,
                col,
                rows,
                cols,
                article: None,
                orifice: Orifice::Closed,
            },
        );
        id
    }

    /// A region able to take `article`: an existing empty region that is large
    /// enough (lowest id first), otherwise a new merge of free cells.
    pub fn make_room(&mut self, article: &Article) -> Option<RegionId> {
        let existing = self
            .regions
            .values()
            .find(|r| r.article.is_none() && r.fits(article))
            .map(|r| r.id);
        if existing.is_some() {
            return existing;
        }
        let (row, col) = self.find_free_block(article.length_cells, article.width_cells)?;
        if article.area() == 1 {
            return Some(row * self.cols + col);
        }
        Some(self.merge_block(row, col, article.length_cells, article.width_cells))
    }

    pub fn set_orifice(
        &mut self,
        region: RegionId,
        desired: Orifice,
        guard: Option<&SafeDropToken>,
    ) -> Result<(), DispenserError> {
        let r = self.regions.get_mut(&region).ok_or(DispenserError::UnknownRegion(region))?;
        if desired == Orifice::Open && guard.is_none() {
            return Err(DispenserError::GuardViolation);
        }
        r.orifice = desired;
        Ok(())
    }

    /// Lands an article in a region from above. Requires a landed token; the
    /// orifice cycles open then closed.
    pub fn top_load(
        &mut self,
        article: &Article,
        region: RegionId,
        token: &SafeDropToken,
    ) -> Result<ManifestEntry, DispenserError> {
        if token.kind() != TokenKind::Landed {
            return Err(DispenserError::GuardViolation);
        }
        let r = self.regions.get(&region).ok_or(DispenserError::UnknownRegion(region))?;
        if r.article.is_some() {
            return Err(DispenserError::RegionOccupied(region));
        }
        if !r.fits(article) {
            return Err(DispenserError::RegionTooSmall(region));
        }
        self.set_orifice(region, Orifice::Open, Some(token))?;
        let r = self.regions.get_mut(&region).expect("checked above");
        r.article = Some(article.id.clone());
        self.set_orifice(region, Orifice::Closed, None)?;
        Ok(ManifestEntry {
            region,
            article: article.id.clone(),
            destination: article.destination.clone(),
        })
    }

    /// Releases the article of a region through its open orifice.
    pub fn dispense(&mut self, region: RegionId) -> Result<String, DispenserError> {
        let r = self.regions.get_mut(&region).ok_or(DispenserError::UnknownRegion(region))?;
        if r.orifice != Orifice::Open {
            return Err(DispenserError::OrificeClosed(region));
        }
        r.article.take().ok_or(DispenserError::RegionEmpty(region))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub article: String,
    pub region: RegionId,
    pub row: u32,
    pub col: u32,
    pub rows: u32,
    pub cols: u32,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Assignment {
    pub placements: Vec<Placement>,
    pub unplaced: Vec<String>,
}

/// FFD order: footprint area descending, then width descending, then id.
pub fn ffd_order(articles: &[Article]) -> Vec<&Article> {
    let mut order: Vec<&Article> = articles.iter().collect();
    order.sort_by(|a, b| {
        b.area()
            .cmp(&a.area())
            .then(b.width_cells.cmp(&a.width_cells))
            .then(a.id.cmp(&b.id))
    });
    order
}

/// First-fit-decreasing placement into an empty grid. Each article takes
/// the first row-major block of free cells matching its footprint exactly;
/// articles that do not fit are reported as unplaced.
pub fn assign_articles(articles: &[Article], grid: &mut CompartmentGrid) -> Assignment {
    debug_assert!(grid.is_empty(), "assign_articles expects an empty grid");
    let mut out = Assignment::default();
    for art in ffd_order(articles) {
        match grid.find_free_block(art.length_cells, art.width_cells) {
            Some((row, col)) => {
                let region = if art.area() == 1 {
                    row * grid.cols + col
                } else {
                    grid.merge_block(row, col, art.length_cells, art.width_cells)
                };
                grid.regions.get_mut(&region).expect("region exists").article = Some(art.id.clone());
                out.placements.push(Placement {
                    article: art.id.clone(),
                    region,
                    row,
                    col,
                    rows: art.length_cells,
                    cols: art.width_cells,
                });
            }
            None => out.unplaced.push(art.id.clone()),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub region: RegionId,
    pub article: String,
    pub destination: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn destinations(&self) -> Vec<String> {
        let mut d: Vec<String> = self.entries.iter().map(|e| e.destination.clone()).collect();
        d.sort();
        d.dedup();
        d
    }
}

/// Reads every occupied compartment's tag. `articles` supplies the records
/// the tags refer to.
pub fn read_manifest(grid: &CompartmentGrid, articles: &[Article]) -> Manifest {
    let entries = grid
        .regions
        .values()
        .filter_map(|r| {
            let id = r.article.as_ref()?;
            let art = articles.iter().find(|a| &a.id == id)?;
            Some(ManifestEntry {
                region: r.id,
                article: id.clone(),
                destination: art.destination.clone(),
            })
        })
        .collect();
    Manifest { entries }
}
