//! Trait data model and the latent-to-observed threshold mapping.
//!
//! Every trait owns a contiguous block of latent columns: one for a
//! continuous or binary trait, `m - 1` for a categorical trait with `m`
//! classes. Observed data turn each latent coordinate of each taxon into a
//! [`LatentRole`]; the resulting [`ConstraintMap`] is what the samplers
//! bounce against.

use std::collections::HashMap;
use std::io::Read;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Literal used for missing values in trait files.
pub const MISSING: &str = "NA";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraitKind {
    Continuous,
    Binary,
    /// Ordered class labels; the first one is the reference class.
    Categorical { classes: Vec<String> },
}

impl TraitKind {
    /// Number of latent columns this trait occupies.
    pub fn width(&self) -> usize {
        match self {
            TraitKind::Continuous | TraitKind::Binary => 1,
            TraitKind::Categorical { classes } => classes.len() - 1,
        }
    }

    pub fn is_discrete(&self) -> bool {
        !matches!(self, TraitKind::Continuous)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraitDef {
    pub name: String,
    pub kind: TraitKind,
}

impl TraitDef {
    pub fn continuous(name: impl Into<String>) -> Self {
        Self { name: name.into(), kind: TraitKind::Continuous }
    }

    pub fn binary(name: impl Into<String>) -> Self {
        Self { name: name.into(), kind: TraitKind::Binary }
    }

    pub fn categorical<S: Into<String>>(name: impl Into<String>, classes: impl IntoIterator<Item = S>) -> Self {
        Self {
            name: name.into(),
            kind: TraitKind::Categorical { classes: classes.into_iter().map(Into::into).collect() },
        }
    }
}

/// Ordered list of traits observed on every taxon.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraitSpec {
    traits: Vec<TraitDef>,
}

impl TraitSpec {
    pub fn new(traits: Vec<TraitDef>) -> Result<Self> {
        if traits.is_empty() {
            return Err(Error::Spec("at least one trait is required".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for t in &traits {
            if !seen.insert(t.name.as_str()) {
                return Err(Error::Spec(format!("duplicate trait name `{}`", t.name)));
            }
            if let TraitKind::Categorical { classes } = &t.kind {
                if classes.len() < 3 {
                    return Err(Error::Spec(format!(
                        "categorical trait `{}` has {} classes; two-class traits must be declared binary",
                        t.name,
                        classes.len()
                    )));
                }
                let mut labels = std::collections::HashSet::new();
                for c in classes {
                    if !labels.insert(c.as_str()) {
                        return Err(Error::Spec(format!("trait `{}` repeats class `{c}`", t.name)));
                    }
                }
            }
        }
        Ok(Self { traits })
    }

    pub fn traits(&self) -> &[TraitDef] {
        &self.traits
    }

    /// Reads `{"traits": [{"name": .., "kind": "continuous" | "binary" | "categorical", "classes": [..]}]}`.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: SpecDocument = serde_json::from_str(text).map_err(|e| Error::Spec(e.to_string()))?;
        let traits = doc
            .traits
            .into_iter()
            .map(|t| match (t.kind, t.classes) {
                (KindTag::Continuous, None) => Ok(TraitDef::continuous(t.name)),
                (KindTag::Binary, None) => Ok(TraitDef::binary(t.name)),
                (KindTag::Categorical, Some(classes)) => Ok(TraitDef::categorical(t.name, classes)),
                (KindTag::Categorical, None) => Err(Error::Spec(format!("categorical trait `{}` needs `classes`", t.name))),
                (_, Some(_)) => Err(Error::Spec(format!("trait `{}` is not categorical but lists classes", t.name))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(traits)
    }

    pub fn to_json(&self) -> String {
        let doc = SpecDocument {
            traits: self
                .traits
                .iter()
                .map(|t| match &t.kind {
                    TraitKind::Continuous => TraitEntry { name: t.name.clone(), kind: KindTag::Continuous, classes: None },
                    TraitKind::Binary => TraitEntry { name: t.name.clone(), kind: KindTag::Binary, classes: None },
                    TraitKind::Categorical { classes } => TraitEntry { name: t.name.clone(), kind: KindTag::Categorical, classes: Some(classes.clone()) },
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("plain data serializes")
    }

    pub fn len(&self) -> usize {
        self.traits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traits.is_empty()
    }

    pub fn layout(&self) -> Layout {
        let mut ranges = Vec::with_capacity(self.traits.len());
        let mut owner = Vec::new();
        let mut start = 0;
        for (j, t) in self.traits.iter().enumerate() {
            let w = t.kind.width();
            ranges.push(start..start + w);
            owner.extend(std::iter::repeat_n(j, w));
            start += w;
        }
        Layout { q: start, ranges, owner }
    }

    /// Latent columns whose scale is pinned for identifiability.
    pub fn discrete_columns(&self) -> Vec<bool> {
        let layout = self.layout();
        (0..layout.q).map(|c| self.traits[layout.owner[c]].kind.is_discrete()).collect()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecDocument {
    traits: Vec<TraitEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraitEntry {
    name: String,
    kind: KindTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    classes: Option<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum KindTag {
    Continuous,
    Binary,
    Categorical,
}

/// Latent column bookkeeping induced by a [`TraitSpec`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub q: usize,
    pub ranges: Vec<Range<usize>>,
    pub owner: Vec<usize>,
}

/// Computes the latent dimension and per-trait column ranges.
pub fn layout(spec: &TraitSpec) -> Layout {
    spec.layout()
}

/// One observed trait value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Observed {
    Continuous(f64),
    /// Stored as -1 or +1.
    Binary(i8),
    /// Zero-based index into the trait's class list.
    Category(usize),
    Missing,
}

/// Applies the threshold/choice model to a latent row.
pub fn map_latent(x_row: &[f64], spec: &TraitSpec) -> Result<Vec<Observed>> {
    let layout = spec.layout();
    if x_row.len() != layout.q {
        return Err(Error::Data(format!("latent row has {} entries, layout needs {}", x_row.len(), layout.q)));
    }
    spec.traits
        .iter()
        .enumerate()
        .map(|(j, t)| {
            let slots = &x_row[layout.ranges[j].clone()];
            match &t.kind {
                TraitKind::Continuous => Ok(Observed::Continuous(slots[0])),
                TraitKind::Binary => {
                    let x = slots[0];
                    if x > 0.0 {
                        Ok(Observed::Binary(1))
                    } else if x < 0.0 {
                        Ok(Observed::Binary(-1))
                    } else {
                        Err(Error::Boundary { trait_index: j })
                    }
                }
                TraitKind::Categorical { .. } => categorical_class(slots).ok_or(Error::Boundary { trait_index: j }).map(Observed::Category),
            }
        })
        .collect()
}

/// Class index for a block of categorical slots, `None` on a measure-zero tie.
fn categorical_class(slots: &[f64]) -> Option<usize> {
    let mut best = 0;
    for (i, &s) in slots.iter().enumerate().skip(1) {
        if s > slots[best] {
            best = i;
        }
    }
    let max = slots[best];
    if max < 0.0 {
        return Some(0);
    }
    if max == 0.0 || slots.iter().enumerate().any(|(i, &s)| i != best && s == max) {
        return None;
    }
    Some(best + 1)
}

/// Observed trait table: one row per taxon, one column per trait.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedTraits {
    pub taxa: Vec<String>,
    pub values: Vec<Vec<Observed>>,
}

impl ObservedTraits {
    pub fn n_taxa(&self) -> usize {
        self.taxa.len()
    }

    /// Reads a trait CSV: first column `taxon`, then one column per trait
    /// named in `spec` (any order), `NA` for missing.
    pub fn read_csv<R: Read>(reader: R, spec: &TraitSpec) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.get(0) != Some("taxon") {
            return Err(Error::Data("first column of the trait file must be `taxon`".into()));
        }
        let mut col_of = Vec::with_capacity(spec.len());
        for t in spec.traits() {
            let idx = headers
                .iter()
                .position(|h| h == t.name)
                .ok_or_else(|| Error::Data(format!("trait column `{}` not found", t.name)))?;
            col_of.push(idx);
        }
        let mut taxa = Vec::new();
        let mut values = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let taxon = rec.get(0).unwrap_or_default().to_string();
            let mut row = Vec::with_capacity(spec.len());
            for (t, &c) in spec.traits().iter().zip(&col_of) {
                let raw = rec.get(c).unwrap_or(MISSING);
                row.push(parse_value(raw, &t.kind).map_err(|m| {
                    Error::Data(format!("row {} ({taxon}), trait `{}`: {m}", line + 2, t.name))
                })?);
            }
            taxa.push(taxon);
            values.push(row);
        }
        let mut seen = std::collections::HashSet::new();
        for t in &taxa {
            if !seen.insert(t) {
                return Err(Error::Data(format!("taxon `{t}` appears twice in the trait file")));
            }
        }
        Ok(Self { taxa, values })
    }

    /// Reorders rows to follow `order` (typically the tree's tip order).
    pub fn reordered(&self, order: &[String]) -> Result<Self> {
        let index: HashMap<&str, usize> = self.taxa.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
        if order.len() != self.taxa.len() {
            return Err(Error::Data(format!("tree has {} tips but trait file has {} taxa", order.len(), self.taxa.len())));
        }
        let mut values = Vec::with_capacity(order.len());
        for name in order {
            let &i = index.get(name.as_str()).ok_or_else(|| Error::Data(format!("tip `{name}` missing from trait file")))?;
            values.push(self.values[i].clone());
        }
        Ok(Self { taxa: order.to_vec(), values })
    }
}

fn parse_value(raw: &str, kind: &TraitKind) -> std::result::Result<Observed, String> {
    if raw == MISSING || raw.is_empty() {
        return Ok(Observed::Missing);
    }
    match kind {
        TraitKind::Continuous => raw.parse::<f64>().map(Observed::Continuous).map_err(|e| e.to_string()),
        TraitKind::Binary => match raw {
            "0" | "-1" => Ok(Observed::Binary(-1)),
            "1" | "+1" => Ok(Observed::Binary(1)),
            other => Err(format!("binary value must be 0 or 1, got `{other}`")),
        },
        TraitKind::Categorical { classes } => classes
            .iter()
            .position(|c| c == raw)
            .map(Observed::Category)
            .ok_or_else(|| format!("unknown class `{raw}`")),
    }
}

/// Per-coordinate wall role of the flattened latent vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LatentRole {
    /// Unconstrained (missing data).
    Free,
    /// Observed continuous value; never moves.
    Fixed(f64),
    /// Must keep this sign (+1 or -1).
    BinarySign(i8),
    /// Member of categorical group `group`.
    CategoricalSlot { group: usize, slot: usize },
}

/// Slots of one observed categorical value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoricalGroup {
    /// Flat coordinate indices, contiguous and in slot order.
    pub dims: Vec<usize>,
    /// Observed class index; 0 is the reference class.
    pub class: usize,
    pub trait_index: usize,
}

impl CategoricalGroup {
    /// Flat index of the slot that must be the positive maximum.
    pub fn winner(&self) -> Option<usize> {
        (self.class > 0).then(|| self.dims[self.class - 1])
    }
}

/// Wall bookkeeping for a flattened `n x q` latent vector (row-major,
/// flat index `taxon * q + column`).
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintMap {
    roles: Vec<LatentRole>,
    groups: Vec<CategoricalGroup>,
    /// Trait index owning each coordinate (0 when built without a spec).
    owners: Vec<usize>,
}

impl ConstraintMap {
    pub fn from_observed(spec: &TraitSpec, data: &ObservedTraits) -> Result<Self> {
        let layout = spec.layout();
        let q = layout.q;
        let n = data.n_taxa();
        let mut roles = vec![LatentRole::Free; n * q];
        let mut owners = vec![0; n * q];
        let mut groups = Vec::new();
        for (i, row) in data.values.iter().enumerate() {
            if row.len() != spec.len() {
                return Err(Error::Data(format!("taxon {i} has {} traits, expected {}", row.len(), spec.len())));
            }
            for (j, (t, obs)) in spec.traits().iter().zip(row).enumerate() {
                let range = layout.ranges[j].clone();
                for c in range.clone() {
                    owners[i * q + c] = j;
                }
                let base = i * q + range.start;
                match (&t.kind, obs) {
                    (_, Observed::Missing) => {}
                    (TraitKind::Continuous, Observed::Continuous(v)) => roles[base] = LatentRole::Fixed(*v),
                    (TraitKind::Binary, Observed::Binary(s)) => roles[base] = LatentRole::BinarySign(*s),
                    (TraitKind::Categorical { classes }, Observed::Category(k)) => {
                        if *k >= classes.len() {
                            return Err(Error::Data(format!("class index {k} out of range for trait `{}`", t.name)));
                        }
                        let g = groups.len();
                        let dims: Vec<usize> = (base..base + range.len()).collect();
                        for (slot, &d) in dims.iter().enumerate() {
                            roles[d] = LatentRole::CategoricalSlot { group: g, slot };
                        }
                        groups.push(CategoricalGroup { dims, class: *k, trait_index: j });
                    }
                    (_, other) => {
                        return Err(Error::Data(format!("value {other:?} does not match the kind of trait `{}`", t.name)));
                    }
                }
            }
        }
        Ok(Self { roles, groups, owners })
    }

    /// Every coordinate constrained positive.
    pub fn orthant(d: usize) -> Self {
        Self::from_roles(vec![LatentRole::BinarySign(1); d], Vec::new())
    }

    pub fn unconstrained(d: usize) -> Self {
        Self::from_roles(vec![LatentRole::Free; d], Vec::new())
    }

    /// Builds a map directly from roles and groups; group slot roles are
    /// written from `groups`.
    pub fn from_roles(mut roles: Vec<LatentRole>, groups: Vec<CategoricalGroup>) -> Self {
        for (g, grp) in groups.iter().enumerate() {
            for (slot, &d) in grp.dims.iter().enumerate() {
                roles[d] = LatentRole::CategoricalSlot { group: g, slot };
            }
        }
        let owners = vec![0; roles.len()];
        Self { roles, groups, owners }
    }

    pub fn dim(&self) -> usize {
        self.roles.len()
    }

    pub fn roles(&self) -> &[LatentRole] {
        &self.roles
    }

    pub fn role(&self, i: usize) -> LatentRole {
        self.roles[i]
    }

    pub fn groups(&self) -> &[CategoricalGroup] {
        &self.groups
    }

    pub fn owner(&self, i: usize) -> usize {
        self.owners[i]
    }

    pub fn is_fixed(&self, i: usize) -> bool {
        matches!(self.roles[i], LatentRole::Fixed(_))
    }

    /// Mask of coordinates that move (everything but observed continuous values).
    pub fn free_mask(&self) -> Vec<bool> {
        self.roles.iter().map(|r| !matches!(r, LatentRole::Fixed(_))).collect()
    }

    pub fn n_free(&self) -> usize {
        self.roles.iter().filter(|r| !matches!(r, LatentRole::Fixed(_))).count()
    }

    /// The observation indicator: true iff `x` reproduces the data.
    pub fn is_consistent(&self, x: &[f64]) -> bool {
        if x.len() != self.roles.len() {
            return false;
        }
        let scalar_ok = self.roles.iter().zip(x).all(|(r, &v)| match *r {
            LatentRole::Free | LatentRole::CategoricalSlot { .. } => v.is_finite(),
            LatentRole::Fixed(obs) => v == obs,
            LatentRole::BinarySign(s) => v * f64::from(s) > 0.0,
        });
        scalar_ok && self.groups.iter().all(|g| group_consistent(g, x))
    }

    /// Moves `x` to a consistent point with minimal edits: walls are
    /// satisfied by reflection, exact zeros nudged by `1e-8`.
    pub fn project_consistent(&self, x: &mut [f64]) {
        const NUDGE: f64 = 1e-8;
        for (i, r) in self.roles.iter().enumerate() {
            match *r {
                LatentRole::Fixed(v) => x[i] = v,
                LatentRole::BinarySign(s) => {
                    let s = f64::from(s);
                    x[i] = s * x[i].abs().max(NUDGE);
                }
                LatentRole::Free => {
                    if x[i] == 0.0 {
                        x[i] = NUDGE;
                    }
                }
                LatentRole::CategoricalSlot { .. } => {}
            }
        }
        for g in &self.groups {
            match g.winner() {
                None => {
                    for &d in &g.dims {
                        x[d] = -x[d].abs().max(NUDGE);
                    }
                }
                Some(w) => {
                    x[w] = x[w].abs().max(NUDGE);
                    let others_max = g.dims.iter().filter(|&&d| d != w).map(|&d| x[d]).fold(f64::NEG_INFINITY, f64::max);
                    if others_max >= x[w] {
                        // swap roles so the winner dominates, then separate ties
                        let top = g.dims.iter().copied().filter(|&d| d != w).max_by(|&a, &b| x[a].total_cmp(&x[b])).unwrap();
                        x.swap(w, top);
                        x[w] = x[w].abs().max(NUDGE);
                        for &d in &g.dims {
                            if d != w && x[d] >= x[w] {
                                x[d] = x[w] - NUDGE * (1.0 + x[w].abs());
                            }
                        }
                    }
                }
            }
        }
    }
}

fn group_consistent(g: &CategoricalGroup, x: &[f64]) -> bool {
    match g.winner() {
        None => g.dims.iter().all(|&d| x[d] < 0.0),
        Some(w) => x[w] > 0.0 && g.dims.iter().all(|&d| d == w || x[d] < x[w]),
    }
}

/// `n x q` latent matrix stored row-major; rows follow the tree's tip order.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMatrix {
    pub n: usize,
    pub q: usize,
    pub data: Vec<f64>,
}

impl LatentMatrix {
    pub fn zeros(n: usize, q: usize) -> Self {
        Self { n, q, data: vec![0.0; n * q] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let q = rows.first().map_or(0, Vec::len);
        Self { n, q, data: rows.iter().flatten().copied().collect() }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.q..(i + 1) * self.q]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.q..(i + 1) * self.q]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.q + j]
    }
}

/// Checks `map_latent(X_i) = Y_i` row by row; missing entries impose nothing.
pub fn check_consistency(x: &LatentMatrix, y: &ObservedTraits, spec: &TraitSpec) -> bool {
    if x.n != y.n_taxa() || x.q != spec.layout().q {
        return false;
    }
    ConstraintMap::from_observed(spec, y).is_ok_and(|c| c.is_consistent(&x.data))
}
