//! Layout data model: elements, category codes, flat layout vectors,
//! synthetic lattice datasets, and JSON dataset files.
//!
//! A layout is an unordered set of axis-aligned boxes. For the numeric
//! core each layout is flattened into a fixed-size vector of `Nmax`
//! element slots, element-major: `[g¹, ã¹, g², ã², ...]` where `g` is
//! `(cx, cy, w, h)` and `ã` is the category's analog-bit code in
//! `{-1, +1}^B`. Unused slots are padding and hold exactly `0.0`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{s, Scalar};

/// Geometry dimensions per element slot (`cx, cy, w, h`).
pub const GEOMETRY_DIMS: usize = 4;

/// One box: center, size (all normalized to `[0, 1]`) and a category id.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Element {
    pub category: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Element {
    /// Box edges as `(left, top, right, bottom)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// An unordered set of elements. Order in the vec carries no meaning.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Layout {
    pub elements: Vec<Element>,
}

impl Layout {
    pub fn new(elements: Vec<Element>) -> Self {
        Layout { elements }
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }
}

/// The closed set of element categories and the analog-bit budget that
/// encodes them: `B = max(1, ceil(log2(C)))`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategorySet {
    names: Vec<String>,
    bits: usize,
}

impl CategorySet {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::domain("category set must not be empty"));
        }
        let bits = bits_for(names.len());
        Ok(CategorySet { names, bits })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(|n| n.as_str())
    }

    /// Re-checks the `bits`/`names` relation after deserialization.
    pub fn validate(&self) -> Result<()> {
        if self.names.is_empty() {
            return Err(Error::format("category set must not be empty"));
        }
        if self.bits != bits_for(self.names.len()) {
            return Err(Error::format(format!(
                "category set claims {} bits for {} categories",
                self.bits,
                self.names.len()
            )));
        }
        Ok(())
    }
}

fn bits_for(num_categories: usize) -> usize {
    let mut bits = 0;
    while (1usize << bits) < num_categories {
        bits += 1;
    }
    bits.max(1)
}

/// Encode a category id as signed analog bits, most significant first.
/// Bit 1 maps to `+1.0`, bit 0 to `-1.0`.
pub fn encode_analog_bits<S: Scalar>(category: usize, bits: usize) -> Result<Vec<S>> {
    if bits == 0 || bits >= usize::BITS as usize {
        return Err(Error::domain(format!("unsupported bit width {bits}")));
    }
    if category >= (1usize << bits) {
        return Err(Error::domain(format!(
            "category {category} does not fit in {bits} analog bits"
        )));
    }
    Ok((0..bits)
        .map(|i| {
            let bit = (category >> (bits - 1 - i)) & 1;
            if bit == 1 {
                S::one()
            } else {
                -S::one()
            }
        })
        .collect())
}

/// Decode analog bits back to a category id: each coordinate thresholds
/// at zero (`>= 0` reads as bit 1), and out-of-range codes clamp to the
/// last valid category.
pub fn decode_analog_bits<S: Scalar>(code: &[S], num_categories: usize) -> Result<usize> {
    if num_categories == 0 {
        return Err(Error::domain("cannot decode against zero categories"));
    }
    let mut id = 0usize;
    for &c in code {
        if !c.is_finite() {
            return Err(Error::domain("non-finite analog bit"));
        }
        id = (id << 1) | usize::from(c >= S::zero());
    }
    Ok(id.min(num_categories - 1))
}

/// A layout flattened to `(4 + B) * Nmax` scalars plus a padding mask
/// (`true` marks a real element). Padded slots hold exactly `0.0`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowVector<S> {
    data: Vec<S>,
    pad_mask: Vec<bool>,
    bits: usize,
}

impl<S: Scalar> FlowVector<S> {
    /// Builds a vector, zeroing any padded slot so the padding invariant
    /// holds by construction. At least one slot must be real.
    pub fn new(data: Vec<S>, pad_mask: Vec<bool>, bits: usize) -> Result<Self> {
        let dims = GEOMETRY_DIMS + bits;
        if data.len() != dims * pad_mask.len() {
            return Err(Error::contract(format!(
                "vector length {} does not match {} slots of {} dims",
                data.len(),
                pad_mask.len(),
                dims
            )));
        }
        if !pad_mask.iter().any(|&m| m) {
            return Err(Error::domain("flow vector needs at least one real slot"));
        }
        let mut v = FlowVector { data, pad_mask, bits };
        v.zero_padding();
        Ok(v)
    }

    /// All-real vector of zeros.
    pub fn zeros(nmax: usize, bits: usize) -> Result<Self> {
        if nmax == 0 {
            return Err(Error::domain("flow vector needs at least one slot"));
        }
        Ok(FlowVector {
            data: vec![S::zero(); (GEOMETRY_DIMS + bits) * nmax],
            pad_mask: vec![true; nmax],
            bits,
        })
    }

    pub fn nmax(&self) -> usize {
        self.pad_mask.len()
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    /// Scalars per element slot (`4 + B`).
    pub fn dims_per_element(&self) -> usize {
        GEOMETRY_DIMS + self.bits
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn pad_mask(&self) -> &[bool] {
        &self.pad_mask
    }

    pub fn is_real(&self, slot: usize) -> bool {
        self.pad_mask[slot]
    }

    pub fn n_real(&self) -> usize {
        self.pad_mask.iter().filter(|&&m| m).count()
    }

    pub fn element(&self, slot: usize) -> &[S] {
        let d = self.dims_per_element();
        &self.data[slot * d..(slot + 1) * d]
    }

    /// True when the flat index addresses one of the four geometry dims.
    pub fn is_geometry_dim(&self, dim: usize) -> bool {
        dim % self.dims_per_element() < GEOMETRY_DIMS
    }

    /// Raw mutable storage. Library operations keep padded slots zeroed;
    /// writes into padded slots are ignored by the model and dropped by
    /// the next trajectory or decode step.
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// Narrows the padding mask to `other`'s (must not revive slots) and
    /// re-zeroes padding. Used to align prior draws with a data vector.
    pub fn masked_like(&self, other: &FlowVector<S>) -> Result<FlowVector<S>> {
        if self.nmax() != other.nmax() || self.bits != other.bits {
            return Err(Error::contract("flow vector shapes differ"));
        }
        let mut out = self.clone();
        out.pad_mask = other.pad_mask.clone();
        out.zero_padding();
        Ok(out)
    }

    pub(crate) fn zero_padding(&mut self) {
        let d = self.dims_per_element();
        for (slot, &real) in self.pad_mask.iter().enumerate() {
            if !real {
                self.data[slot * d..(slot + 1) * d].fill(S::zero());
            }
        }
    }

    /// Checks shape compatibility with another vector.
    pub fn same_shape(&self, other: &FlowVector<S>) -> bool {
        self.nmax() == other.nmax() && self.bits == other.bits
    }
}

/// Flattens a layout into the first `N` slots of a flow vector.
pub fn layout_to_vector<S: Scalar>(
    layout: &Layout,
    categories: &CategorySet,
    nmax: usize,
) -> Result<FlowVector<S>> {
    let n = layout.len();
    if n == 0 {
        return Err(Error::domain("cannot encode an empty layout"));
    }
    if n > nmax {
        return Err(Error::capacity(format!(
            "layout has {n} elements but the vector holds at most {nmax}"
        )));
    }
    let bits = categories.bits();
    let dims = GEOMETRY_DIMS + bits;
    let mut data = vec![S::zero(); dims * nmax];
    for (i, e) in layout.elements.iter().enumerate() {
        if e.category >= categories.len() {
            return Err(Error::domain(format!(
                "element {} has category {} outside the {}-category set",
                i,
                e.category,
                categories.len()
            )));
        }
        let base = i * dims;
        data[base] = s(e.cx);
        data[base + 1] = s(e.cy);
        data[base + 2] = s(e.w);
        data[base + 3] = s(e.h);
        let code = encode_analog_bits::<S>(e.category, bits)?;
        data[base + GEOMETRY_DIMS..base + dims].copy_from_slice(&code);
    }
    let mut pad_mask = vec![false; nmax];
    pad_mask[..n].fill(true);
    FlowVector::new(data, pad_mask, bits)
}

/// Reads a layout back out of a flow vector. Total on any finite input:
/// geometry clamps into `[0, 1]` and category codes clamp to the set.
pub fn vector_to_layout<S: Scalar>(
    vector: &FlowVector<S>,
    categories: &CategorySet,
) -> Result<Layout> {
    if vector.bits() != categories.bits() {
        return Err(Error::contract(format!(
            "vector carries {} analog bits, category set expects {}",
            vector.bits(),
            categories.bits()
        )));
    }
    let dims = vector.dims_per_element();
    let mut elements = Vec::with_capacity(vector.n_real());
    for slot in 0..vector.nmax() {
        if !vector.is_real(slot) {
            continue;
        }
        let e = vector.element(slot);
        for &v in &e[..GEOMETRY_DIMS] {
            if !v.is_finite() {
                return Err(Error::domain(format!(
                    "non-finite geometry in slot {slot}"
                )));
            }
        }
        let category = decode_analog_bits(&e[GEOMETRY_DIMS..dims], categories.len())?;
        elements.push(Element {
            category,
            cx: e[0].as_f64().clamp(0.0, 1.0),
            cy: e[1].as_f64().clamp(0.0, 1.0),
            w: e[2].as_f64().clamp(0.0, 1.0),
            h: e[3].as_f64().clamp(0.0, 1.0),
        });
    }
    Ok(Layout::new(elements))
}

/// A set of layouts sharing one category set. The element-count
/// histogram (`histogram[n]` = number of layouts with `n` elements) is
/// derived on construction and drives unconditional element-count draws.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub layouts: Vec<Layout>,
    pub categories: CategorySet,
    histogram: Vec<usize>,
}

impl Dataset {
    pub fn new(layouts: Vec<Layout>, categories: CategorySet) -> Result<Self> {
        if layouts.is_empty() {
            return Err(Error::domain("dataset must contain at least one layout"));
        }
        for (i, l) in layouts.iter().enumerate() {
            if l.is_empty() {
                return Err(Error::domain(format!("layout {i} is empty")));
            }
            for e in &l.elements {
                if e.category >= categories.len() {
                    return Err(Error::domain(format!(
                        "layout {i} uses category {} outside the {}-category set",
                        e.category,
                        categories.len()
                    )));
                }
            }
        }
        let histogram = element_histogram(&layouts);
        Ok(Dataset { layouts, categories, histogram })
    }

    pub fn len(&self) -> usize {
        self.layouts.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `histogram[n]` counts layouts with exactly `n` elements.
    pub fn histogram(&self) -> &[usize] {
        &self.histogram
    }

    pub fn max_elements(&self) -> usize {
        self.histogram.len().saturating_sub(1)
    }

    pub fn layouts(&self) -> &[Layout] {
        &self.layouts
    }

    pub fn categories(&self) -> &CategorySet {
        &self.categories
    }
}

fn element_histogram(layouts: &[Layout]) -> Vec<usize> {
    let max_n = layouts.iter().map(Layout::len).max().unwrap_or(0);
    let mut histogram = vec![0usize; max_n + 1];
    for l in layouts {
        histogram[l.len()] += 1;
    }
    histogram
}

/// Configuration for the synthetic lattice generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_layouts: usize,
    pub num_categories: usize,
    pub nmax: usize,
    /// Lattice resolution; every box snaps to a `grid x grid` lattice.
    pub grid: usize,
    pub seed: u64,
}

/// Generates non-overlapping lattice layouts: every layout is a prefix
/// of one fixed, spatially spread-out sequence of disjoint lattice
/// spans, with a size drawn per layout. Edges and sizes are exact
/// multiples of `1/grid`, overlap is exactly zero, and the shared
/// lattice lines give the set strong alignment structure. Categories
/// follow the span shape (wide, tall, small square, large square) so
/// they correlate with geometry.
pub fn generate_synthetic_dataset(cfg: &SyntheticConfig) -> Result<Dataset> {
    if cfg.grid < 2 {
        return Err(Error::domain("synthetic grid must be at least 2"));
    }
    if cfg.num_layouts == 0 || cfg.nmax == 0 || cfg.num_categories == 0 {
        return Err(Error::domain(
            "synthetic generator needs layouts, categories and capacity",
        ));
    }
    let names = (0..cfg.num_categories)
        .map(|i| match i {
            0 => "wide".to_string(),
            1 => "tall".to_string(),
            2 => "small".to_string(),
            3 => "large".to_string(),
            _ => format!("class{i}"),
        })
        .collect();
    let categories = CategorySet::new(names)?;
    let slots = slot_sequence(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let layouts = (0..cfg.num_layouts)
        .map(|_| synth_layout(cfg, &slots, &mut rng))
        .collect();
    Dataset::new(layouts, categories)
}

fn span_center(&(col, row, w, h): &(usize, usize, usize, usize)) -> (f64, f64) {
    (col as f64 + w as f64 / 2.0, row as f64 + h as f64 / 2.0)
}

/// The fixed slot sequence all layouts draw from: `min(nmax, grid²)`
/// disjoint lattice spans in a repeating small/wide/small/tall shape
/// cycle, each placed as far as possible from the slots already chosen
/// (same-shape distance first, so look-alike slots end up in different
/// regions of the canvas). Layouts are prefixes of this sequence, which
/// keeps every pair of elements disjoint regardless of element count.
fn slot_sequence(cfg: &SyntheticConfig) -> Vec<(usize, usize, usize, usize)> {
    let g = cfg.grid;
    let cap = cfg.nmax.min(g * g);
    let shape_cycle = [(1usize, 1usize), (2, 1), (1, 1), (1, 2)];
    let mut chosen: Vec<(usize, usize, usize, usize)> = Vec::with_capacity(cap);
    let mut occupied = vec![false; g * g];
    let free = |occupied: &[bool], col: usize, row: usize, w: usize, h: usize| {
        col + w <= g
            && row + h <= g
            && (0..h).all(|dr| (0..w).all(|dc| !occupied[(row + dr) * g + col + dc]))
    };
    while chosen.len() < cap {
        let want = shape_cycle[chosen.len() % shape_cycle.len()];
        // Fall back to a single cell when the preferred shape no longer
        // fits anywhere.
        let shapes = if (0..g * g)
            .any(|c| free(&occupied, c % g, c / g, want.0, want.1))
        {
            vec![want]
        } else {
            vec![(1, 1)]
        };
        let mut best: Option<((f64, f64), (usize, usize, usize, usize))> = None;
        for &(w, h) in &shapes {
            for row in 0..g {
                for col in 0..g {
                    if !free(&occupied, col, row, w, h) {
                        continue;
                    }
                    let cand = (col, row, w, h);
                    let (cx, cy) = span_center(&cand);
                    let mut near_same = f64::INFINITY;
                    let mut near_any = f64::INFINITY;
                    for s in &chosen {
                        let (ox, oy) = span_center(s);
                        let d = (cx - ox).powi(2) + (cy - oy).powi(2);
                        near_any = near_any.min(d);
                        if (s.2, s.3) == (w, h) {
                            near_same = near_same.min(d);
                        }
                    }
                    let key = (near_same, near_any);
                    if best.as_ref().is_none_or(|(bk, _)| key > *bk) {
                        best = Some((key, cand));
                    }
                }
            }
        }
        let Some((_, (col, row, w, h))) = best else { break };
        for dr in 0..h {
            for dc in 0..w {
                occupied[(row + dr) * g + col + dc] = true;
            }
        }
        chosen.push((col, row, w, h));
    }
    chosen
}

fn synth_layout(
    cfg: &SyntheticConfig,
    slots: &[(usize, usize, usize, usize)],
    rng: &mut ChaCha8Rng,
) -> Layout {
    // Triangular count distribution: sparse layouts are the common case,
    // dense ones the tail, mirroring real document collections.
    let cap = slots.len();
    let total = cap * (cap + 1) / 2;
    let mut draw = rng.random_range(0..total);
    let mut target = 1;
    for n in 1..=cap {
        let weight = cap + 1 - n;
        if draw < weight {
            target = n;
            break;
        }
        draw -= weight;
    }
    let gf = cfg.grid as f64;
    let mut chosen: Vec<_> = slots[..target].to_vec();
    chosen.sort_unstable_by_key(|&(col, row, _, _)| (row, col));
    let elements = chosen
        .into_iter()
        .map(|(col, row, w_cells, h_cells)| {
            let (w, h) = (w_cells as f64 / gf, h_cells as f64 / gf);
            Element {
                category: span_category(w_cells, h_cells, cfg.num_categories),
                cx: col as f64 / gf + w / 2.0,
                cy: row as f64 / gf + h / 2.0,
                w,
                h,
            }
        })
        .collect();
    Layout::new(elements)
}

fn span_category(w_cells: usize, h_cells: usize, num_categories: usize) -> usize {
    let class = if w_cells > h_cells {
        0 // wide
    } else if h_cells > w_cells {
        1 // tall
    } else if w_cells == 1 {
        2 // small square
    } else {
        3 // large square
    };
    class % num_categories
}

// --- dataset files -------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CanvasRecord {
    width: u32,
    height: u32,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    canvas: CanvasRecord,
    categories: Vec<String>,
    layouts: Vec<Vec<Element>>,
}

/// A loaded dataset plus the number of records that were skipped
/// (empty layouts or layouts over the capacity).
#[derive(Debug)]
pub struct LoadedDataset {
    pub dataset: Dataset,
    pub skipped: usize,
}

/// Loads a dataset file. Coordinates are divided by the canvas size
/// (so files storing pixel boxes and files already in `[0, 1]` under a
/// `1x1` canvas both work) and clamped into range. Layouts with more
/// than `nmax` elements (or none) are skipped and counted.
pub fn load_dataset(path: &Path, nmax: usize) -> Result<LoadedDataset> {
    let text = std::fs::read_to_string(path)?;
    let file: DatasetFile = serde_json::from_str(&text)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    if file.canvas.width == 0 || file.canvas.height == 0 {
        return Err(Error::format("canvas dimensions must be positive"));
    }
    let categories = CategorySet::new(file.categories)
        .map_err(|_| Error::format("dataset declares no categories"))?;
    let (cw, ch) = (f64::from(file.canvas.width), f64::from(file.canvas.height));
    let mut layouts = Vec::new();
    let mut skipped = 0usize;
    for (i, records) in file.layouts.into_iter().enumerate() {
        if records.is_empty() || records.len() > nmax {
            skipped += 1;
            continue;
        }
        let mut elements = Vec::with_capacity(records.len());
        for (j, r) in records.into_iter().enumerate() {
            if ![r.cx, r.cy, r.w, r.h].iter().all(|v| v.is_finite()) {
                return Err(Error::format(format!(
                    "layout {i}, element {j}: non-finite geometry"
                )));
            }
            if r.category >= categories.len() {
                return Err(Error::format(format!(
                    "layout {i}, element {j}: category {} out of range",
                    r.category
                )));
            }
            elements.push(Element {
                category: r.category,
                cx: (r.cx / cw).clamp(0.0, 1.0),
                cy: (r.cy / ch).clamp(0.0, 1.0),
                w: (r.w / cw).clamp(0.0, 1.0),
                h: (r.h / ch).clamp(0.0, 1.0),
            });
        }
        layouts.push(Layout::new(elements));
    }
    if layouts.is_empty() {
        return Err(Error::domain(format!(
            "{}: no usable layouts (skipped {skipped})",
            path.display()
        )));
    }
    let dataset = Dataset::new(layouts, categories)?;
    Ok(LoadedDataset { dataset, skipped })
}

/// Writes a dataset in canonical form: a `1x1` canvas with coordinates
/// already normalized, so a save/load round trip is exact.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = DatasetFile {
        canvas: CanvasRecord { width: 1, height: 1 },
        categories: dataset.categories.names().to_vec(),
        layouts: dataset.layouts.iter().map(|l| l.elements.clone()).collect(),
    };
    let text = serde_json::to_string(&file)?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Per-category element counts over a set of layouts, as a map from
/// category id to count. Handy for audits and the CLI.
pub fn category_counts(layouts: &[Layout]) -> BTreeMap<usize, usize> {
    let mut counts = BTreeMap::new();
    for l in layouts {
        for e in &l.elements {
            *counts.entry(e.category).or_insert(0) += 1;
        }
    }
    counts
}
