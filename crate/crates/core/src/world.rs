// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic extra-linguistic world: countries with capitals, landmarks on a
//! grid with founding years, and colors in a three-dimensional coordinate box.
//!
//! Everything here is a pure function of its inputs. The world is the source
//! of ground truth for the truth-tracking success metric and one of the two
//! candidate targets of a structural correspondence.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::correspondence::DissimilarityMatrix;
use crate::error::{invalid, Error, Result};

/// Schema tag embedded in serialized worlds.
pub const WORLD_SCHEMA: &str = "structcorr.world/v1";

/// Upper bound of every color coordinate.
pub const COLOR_MAX: f64 = 100.0;

pub type EntityId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Country,
    City,
    Color,
    Landmark,
}

impl EntityKind {
    pub fn label(self) -> &'static str {
        match self {
            EntityKind::Country => "country",
            EntityKind::City => "city",
            EntityKind::Color => "color",
            EntityKind::Landmark => "landmark",
        }
    }

    fn name_prefix(self) -> &'static str {
        match self {
            EntityKind::Country => "count",
            EntityKind::City => "city",
            EntityKind::Color => "color",
            EntityKind::Landmark => "land",
        }
    }
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: EntityId,
    /// Single vocabulary token.
    pub name: String,
    pub kind: EntityKind,
}

/// Grid cell of a landmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GridPos {
    pub row: u32,
    pub col: u32,
}

impl GridPos {
    pub fn distance(self, other: GridPos) -> f64 {
        let dr = self.row as f64 - other.row as f64;
        let dc = self.col as f64 - other.col as f64;
        (dr * dr + dc * dc).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub n_countries: usize,
    pub n_cities: usize,
    pub n_colors: usize,
    pub n_landmarks: usize,
    pub grid_size: u32,
    pub year_min: i32,
    pub year_max: i32,
    /// Number of equal-width year bins ("eras") used in text.
    pub n_eras: u32,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_countries: 20,
            n_cities: 30,
            n_colors: 12,
            n_landmarks: 24,
            grid_size: 8,
            year_min: 1000,
            year_max: 1799,
            n_eras: 8,
        }
    }
}

/// Relation families that yield a dissimilarity structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Position,
    ColorCoord,
    FoundedYear,
}

impl Relation {
    pub fn kind(self) -> EntityKind {
        match self {
            Relation::Position | Relation::FoundedYear => EntityKind::Landmark,
            Relation::ColorCoord => EntityKind::Color,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Relation::Position => "position",
            Relation::ColorCoord => "color_coord",
            Relation::FoundedYear => "founded_year",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldStructure {
    pub schema: String,
    pub seed: u64,
    pub config: WorldConfig,
    /// Sorted by id; `entities[i].id == i`.
    pub entities: Vec<Entity>,
    pub position: BTreeMap<EntityId, GridPos>,
    pub color_coord: BTreeMap<EntityId, [f64; 3]>,
    /// country -> city, injective.
    pub capital_of: BTreeMap<EntityId, EntityId>,
    pub founded_year: BTreeMap<EntityId, i32>,
    pub semantic_category: BTreeMap<EntityId, String>,
}

/// Spreadsheet-style suffix: 0 -> "A", 25 -> "Z", 26 -> "AA".
fn letters(mut i: usize) -> String {
    let mut out = Vec::new();
    loop {
        out.push(b'A' + (i % 26) as u8);
        if i < 26 {
            break;
        }
        i = i / 26 - 1;
    }
    out.reverse();
    String::from_utf8(out).expect("ascii")
}

/// Build a world from a seed and a configuration.
pub fn generate_world(seed: u64, config: &WorldConfig) -> Result<WorldStructure> {
    let counts = [
        ("countries", config.n_countries),
        ("cities", config.n_cities),
        ("colors", config.n_colors),
        ("landmarks", config.n_landmarks),
    ];
    for (what, n) in counts {
        if n < 2 {
            return Err(Error::Infeasible(format!("need at least 2 {what}, got {n}")));
        }
    }
    if config.n_cities < config.n_countries {
        return Err(Error::Infeasible(format!(
            "{} countries need distinct capitals but only {} cities exist",
            config.n_countries, config.n_cities
        )));
    }
    let cells = config.grid_size as usize * config.grid_size as usize;
    if config.n_landmarks > cells {
        return Err(Error::Infeasible(format!(
            "grid exhausted: {} landmarks on a {}x{} grid",
            config.n_landmarks, config.grid_size, config.grid_size
        )));
    }
    if config.year_max < config.year_min {
        return Err(invalid("year_max < year_min"));
    }
    let span = (config.year_max - config.year_min + 1) as usize;
    if config.n_landmarks > span {
        return Err(Error::Infeasible(format!(
            "{} landmarks need distinct years but the range holds {span}",
            config.n_landmarks
        )));
    }
    if config.n_eras == 0 || config.n_eras as usize > span {
        return Err(invalid(format!("n_eras must lie in 1..={span}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entities = Vec::new();
    let ids_of = |kind: EntityKind, n: usize, entities: &mut Vec<Entity>| -> Vec<EntityId> {
        (0..n)
            .map(|i| {
                let id = entities.len();
                entities.push(Entity {
                    id,
                    name: format!("{}{}", kind.name_prefix(), letters(i)),
                    kind,
                });
                id
            })
            .collect()
    };
    let countries = ids_of(EntityKind::Country, config.n_countries, &mut entities);
    let cities = ids_of(EntityKind::City, config.n_cities, &mut entities);
    let colors = ids_of(EntityKind::Color, config.n_colors, &mut entities);
    let landmarks = ids_of(EntityKind::Landmark, config.n_landmarks, &mut entities);

    let mut shuffled_cities = cities.clone();
    shuffled_cities.shuffle(&mut rng);
    let capital_of: BTreeMap<_, _> = countries
        .iter()
        .copied()
        .zip(shuffled_cities.iter().copied())
        .collect();

    let color_coord = colors
        .iter()
        .map(|&c| {
            let coords = [
                rng.random_range(0.0..=COLOR_MAX),
                rng.random_range(0.0..=COLOR_MAX),
                rng.random_range(0.0..=COLOR_MAX),
            ];
            (c, coords)
        })
        .collect();

    let cell_idx = rand::seq::index::sample(&mut rng, cells, config.n_landmarks);
    let position = landmarks
        .iter()
        .zip(cell_idx.iter())
        .map(|(&l, cell)| {
            let g = config.grid_size as usize;
            (l, GridPos { row: (cell / g) as u32, col: (cell % g) as u32 })
        })
        .collect();

    let year_idx = rand::seq::index::sample(&mut rng, span, config.n_landmarks);
    let founded_year = landmarks
        .iter()
        .zip(year_idx.iter())
        .map(|(&l, off)| (l, config.year_min + off as i32))
        .collect();

    let semantic_category = entities
        .iter()
        .map(|e| (e.id, e.kind.label().to_string()))
        .collect();

    let world = WorldStructure {
        schema: WORLD_SCHEMA.to_string(),
        seed,
        config: config.clone(),
        entities,
        position,
        color_coord,
        capital_of,
        founded_year,
        semantic_category,
    };
    world.validate()?;
    Ok(world)
}

impl WorldStructure {
    /// Check every structural invariant of the world.
    pub fn validate(&self) -> Result<()> {
        if self.schema != WORLD_SCHEMA {
            return Err(Error::Schema(format!("expected {WORLD_SCHEMA}, found {}", self.schema)));
        }
        let mut names = std::collections::HashSet::new();
        for (i, e) in self.entities.iter().enumerate() {
            if e.id != i {
                return Err(invalid(format!("entity {} out of canonical order", e.name)));
            }
            if e.name.is_empty() || e.name.chars().any(char::is_whitespace) {
                return Err(invalid(format!("entity name {:?} is not a single token", e.name)));
            }
            if !names.insert(e.name.as_str()) {
                return Err(invalid(format!("duplicate entity name {}", e.name)));
            }
        }
        let kind_of = |id: EntityId| self.entities.get(id).map(|e| e.kind);
        let mut capitals = std::collections::HashSet::new();
        for country in self.entities_of_kind(EntityKind::Country) {
            let city = self
                .capital_of
                .get(&country)
                .ok_or_else(|| invalid(format!("country {country} has no capital")))?;
            if kind_of(*city) != Some(EntityKind::City) {
                return Err(invalid(format!("capital of {country} is not a city")));
            }
            if !capitals.insert(*city) {
                return Err(invalid("capitalOf is not injective"));
            }
        }
        if self.capital_of.len() != self.entities_of_kind(EntityKind::Country).len() {
            return Err(invalid("capitalOf has keys that are not countries"));
        }
        let g = self.config.grid_size;
        let mut cells = std::collections::HashSet::new();
        for l in self.entities_of_kind(EntityKind::Landmark) {
            let p = self
                .position
                .get(&l)
                .ok_or_else(|| invalid(format!("landmark {l} has no position")))?;
            if p.row >= g || p.col >= g {
                return Err(invalid(format!("landmark {l} off the grid")));
            }
            if !cells.insert(*p) {
                return Err(invalid("two landmarks share a position"));
            }
            let y = self
                .founded_year
                .get(&l)
                .ok_or_else(|| invalid(format!("landmark {l} has no founding year")))?;
            if *y < self.config.year_min || *y > self.config.year_max {
                return Err(invalid(format!("landmark {l} year out of range")));
            }
        }
        for c in self.entities_of_kind(EntityKind::Color) {
            let coords = self
                .color_coord
                .get(&c)
                .ok_or_else(|| invalid(format!("color {c} has no coordinates")))?;
            if coords.iter().any(|v| !(0.0..=COLOR_MAX).contains(v)) {
                return Err(invalid(format!("color {c} coordinates out of bounds")));
            }
        }
        Ok(())
    }

    pub fn entity(&self, id: EntityId) -> Result<&Entity> {
        self.entities
            .get(id)
            .ok_or_else(|| Error::UnknownEntity(format!("id {id}")))
    }

    pub fn entity_by_name(&self, name: &str) -> Result<&Entity> {
        self.entities
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::UnknownEntity(name.to_string()))
    }

    pub fn entities_of_kind(&self, kind: EntityKind) -> Vec<EntityId> {
        self.entities.iter().filter(|e| e.kind == kind).map(|e| e.id).collect()
    }

    pub fn names(&self, ids: &[EntityId]) -> Result<Vec<String>> {
        ids.iter().map(|&id| Ok(self.entity(id)?.name.clone())).collect()
    }

    pub fn capital(&self, country: EntityId) -> Result<EntityId> {
        self.capital_of
            .get(&country)
            .copied()
            .ok_or_else(|| Error::UnknownEntity(format!("country id {country}")))
    }

    /// Cities that are nobody's capital, in id order.
    pub fn non_capital_cities(&self) -> Vec<EntityId> {
        let capitals: std::collections::HashSet<_> = self.capital_of.values().copied().collect();
        self.entities_of_kind(EntityKind::City)
            .into_iter()
            .filter(|c| !capitals.contains(c))
            .collect()
    }

    /// Era bin of a landmark's founding year.
    pub fn era(&self, landmark: EntityId) -> Result<u32> {
        let year = *self
            .founded_year
            .get(&landmark)
            .ok_or_else(|| Error::UnknownEntity(format!("landmark id {landmark}")))?;
        let span = (self.config.year_max - self.config.year_min + 1) as i64;
        let off = (year - self.config.year_min) as i64;
        Ok((off * self.config.n_eras as i64 / span) as u32)
    }

    /// Other entities of the same kind sorted by distance under `relation`,
    /// ties broken by id.
    pub fn neighbors(&self, id: EntityId, relation: Relation) -> Result<Vec<EntityId>> {
        let kind = relation.kind();
        if self.entity(id)?.kind != kind {
            return Err(invalid(format!("entity {id} is not a {kind}")));
        }
        let mut others: Vec<(f64, EntityId)> = self
            .entities_of_kind(kind)
            .into_iter()
            .filter(|&o| o != id)
            .map(|o| Ok((self.attribute_distance(id, o, relation)?, o)))
            .collect::<Result<_>>()?;
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Ok(others.into_iter().map(|(_, o)| o).collect())
    }

    /// Attribute vector of an entity under a relation.
    pub fn attribute(&self, id: EntityId, relation: Relation) -> Result<Vec<f64>> {
        let missing = || {
            Error::InvalidArgument(format!(
                "entity {id} has no {} attribute",
                relation.label()
            ))
        };
        match relation {
            Relation::Position => {
                let p = self.position.get(&id).ok_or_else(missing)?;
                Ok(vec![p.row as f64, p.col as f64])
            }
            Relation::ColorCoord => Ok(self.color_coord.get(&id).ok_or_else(missing)?.to_vec()),
            Relation::FoundedYear => Ok(vec![*self.founded_year.get(&id).ok_or_else(missing)? as f64]),
        }
    }

    fn attribute_distance(&self, a: EntityId, b: EntityId, relation: Relation) -> Result<f64> {
        let (x, y) = (self.attribute(a, relation)?, self.attribute(b, relation)?);
        Ok(match relation {
            Relation::FoundedYear => (x[0] - y[0]).abs(),
            _ => x.iter().zip(&y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt(),
        })
    }

    /// Byte-deterministic JSON serialization.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let world: WorldStructure = serde_json::from_str(text)?;
        world.validate()?;
        Ok(world)
    }
}

/// Pairwise dissimilarity of a same-kind entity subset under a relation.
///
/// Euclidean for positions and color coordinates, absolute difference for
/// founding years.
pub fn world_dissimilarity(
    world: &WorldStructure,
    entities: &[EntityId],
    relation: Relation,
) -> Result<DissimilarityMatrix> {
    if let Some(first) = entities.first() {
        let kind = world.entity(*first)?.kind;
        for &e in entities {
            if world.entity(e)?.kind != kind {
                return Err(invalid("entity subset mixes kinds"));
            }
        }
    }
    let attrs: Vec<Vec<f64>> = entities
        .iter()
        .map(|&e| world.attribute(e, relation))
        .collect::<Result<_>>()?;
    let labels = world.names(entities)?;
    Ok(DissimilarityMatrix::from_fn(labels, |i, j| match relation {
        Relation::FoundedYear => (attrs[i][0] - attrs[j][0]).abs(),
        _ => attrs[i]
            .iter()
            .zip(&attrs[j])
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
            .sqrt(),
    }))
}

/// Return a world in which `country`'s capital is `new_capital`.
///
/// If `new_capital` already serves another country the two countries swap
/// capitals, so the capital map stays injective.
pub fn shift_world(
    world: &WorldStructure,
    country: EntityId,
    new_capital: EntityId,
) -> Result<WorldStructure> {
    let c = world.entity(country)?;
    if c.kind != EntityKind::Country {
        return Err(Error::UnknownEntity(format!("{} is not a country in this world", c.name)));
    }
    let city = world.entity(new_capital)?;
    if city.kind != EntityKind::City {
        return Err(invalid(format!("{} is not a city", city.name)));
    }
    let mut shifted = world.clone();
    let old = world.capital(country)?;
    let holder = world
        .capital_of
        .iter()
        .find(|(_, &cap)| cap == new_capital)
        .map(|(&k, _)| k);
    if let Some(other) = holder {
        shifted.capital_of.insert(other, old);
    }
    shifted.capital_of.insert(country, new_capital);
    shifted.validate()?;
    Ok(shifted)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldConfig {
        WorldConfig { n_countries: 20, n_colors: 12, grid_size: 8, ..WorldConfig::default() }
    }

    #[test]
    fn generated_world_satisfies_invariants() {
        let w = generate_world(7, &small()).unwrap();
        assert_eq!(w.capital_of.len(), 20);
        let caps: std::collections::HashSet<_> = w.capital_of.values().collect();
        assert_eq!(caps.len(), 20);
        assert_eq!(w.entities_of_kind(EntityKind::Color).len(), 12);
        w.validate().unwrap();
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_world(7, &small()).unwrap();
        let b = generate_world(7, &small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let c = generate_world(8, &small()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn too_many_landmarks_exhausts_grid() {
        let cfg = WorldConfig { n_landmarks: 100, ..small() };
        let err = generate_world(1, &cfg).unwrap_err();
        assert!(err.to_string().contains("grid exhausted"), "{err}");
    }

    #[test]
    fn too_few_entities_rejected() {
        let cfg = WorldConfig { n_colors: 1, ..small() };
        assert!(generate_world(1, &cfg).is_err());
    }

    #[test]
    fn names_are_unique_single_tokens() {
        assert_eq!(letters(0), "A");
        assert_eq!(letters(25), "Z");
        assert_eq!(letters(26), "AA");
        assert_eq!(letters(27), "AB");
        let w = generate_world(3, &WorldConfig { n_cities: 40, ..small() }).unwrap();
        assert!(w.entities.iter().all(|e| !e.name.contains(' ')));
    }

    fn hand_world() -> WorldStructure {
        let mut w = generate_world(1, &WorldConfig { n_landmarks: 3, ..small() }).unwrap();
        let ls = w.entities_of_kind(EntityKind::Landmark);
        w.position.insert(ls[0], GridPos { row: 0, col: 0 });
        w.position.insert(ls[1], GridPos { row: 0, col: 1 });
        w.position.insert(ls[2], GridPos { row: 0, col: 3 });
        w
    }

    #[test]
    fn hand_positions_give_expected_distances() {
        let w = hand_world();
        let ls = w.entities_of_kind(EntityKind::Landmark);
        let d = world_dissimilarity(&w, &ls, Relation::Position).unwrap();
        assert_eq!(d.get(0, 1), 1.0);
        assert_eq!(d.get(0, 2), 3.0);
        assert_eq!(d.get(1, 2), 2.0);
    }

    #[test]
    fn single_entity_gives_zero_matrix() {
        let w = hand_world();
        let ls = w.entities_of_kind(EntityKind::Landmark);
        let d = world_dissimilarity(&w, &ls[..1], Relation::Position).unwrap();
        assert_eq!(d.n(), 1);
        assert_eq!(d.get(0, 0), 0.0);
    }

    #[test]
    fn color_matrix_matches_double_loop() {
        let w = generate_world(11, &small()).unwrap();
        let cs = w.entities_of_kind(EntityKind::Color);
        let d = world_dissimilarity(&w, &cs, Relation::ColorCoord).unwrap();
        for (i, a) in cs.iter().enumerate() {
            for (j, b) in cs.iter().enumerate() {
                let (p, q) = (w.color_coord[a], w.color_coord[b]);
                let mut s = 0.0;
                for k in 0..3 {
                    s += (p[k] - q[k]) * (p[k] - q[k]);
                }
                assert!((d.get(i, j) - s.sqrt()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn year_matrix_uses_absolute_difference() {
        let w = generate_world(5, &small()).unwrap();
        let ls = w.entities_of_kind(EntityKind::Landmark);
        let d = world_dissimilarity(&w, &ls, Relation::FoundedYear).unwrap();
        let y0 = w.founded_year[&ls[0]];
        let y1 = w.founded_year[&ls[1]];
        assert_eq!(d.get(0, 1), (y0 - y1).abs() as f64);
    }

    #[test]
    fn mixed_kind_subset_rejected() {
        let w = generate_world(5, &small()).unwrap();
        let mixed = [w.entities_of_kind(EntityKind::Landmark)[0], w.entities_of_kind(EntityKind::Color)[0]];
        assert!(world_dissimilarity(&w, &mixed, Relation::Position).is_err());
    }

    #[test]
    fn position_matrices_obey_triangle_inequality() {
        let w = generate_world(9, &small()).unwrap();
        let ls = w.entities_of_kind(EntityKind::Landmark);
        let d = world_dissimilarity(&w, &ls, Relation::Position).unwrap();
        let n = d.n();
        for i in 0..n {
            for j in 0..n {
                assert_eq!(d.get(i, j), d.get(j, i));
                for k in 0..n {
                    assert!(d.get(i, k) <= d.get(i, j) + d.get(j, k) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn shift_sets_new_capital_and_is_undone_by_shifting_back() {
        let w = generate_world(7, &small()).unwrap();
        let country = w.entities_of_kind(EntityKind::Country)[0];
        let old = w.capital(country).unwrap();
        let free = w.non_capital_cities()[0];
        let shifted = shift_world(&w, country, free).unwrap();
        assert_eq!(shifted.capital(country).unwrap(), free);
        let back = shift_world(&shifted, country, old).unwrap();
        assert_eq!(back, w);
        // original untouched
        assert_eq!(w.capital(country).unwrap(), old);
    }

    #[test]
    fn shift_onto_assigned_city_swaps_and_stays_injective() {
        let w = generate_world(7, &small()).unwrap();
        let countries = w.entities_of_kind(EntityKind::Country);
        for &a in &countries {
            for &b in &countries {
                if a == b {
                    continue;
                }
                let cap_a = w.capital(a).unwrap();
                let cap_b = w.capital(b).unwrap();
                let s = shift_world(&w, a, cap_b).unwrap();
                assert_eq!(s.capital(a).unwrap(), cap_b);
                assert_eq!(s.capital(b).unwrap(), cap_a);
                let caps: std::collections::HashSet<_> = s.capital_of.values().collect();
                assert_eq!(caps.len(), countries.len());
                let changed: Vec<_> = countries
                    .iter()
                    .filter(|c| s.capital_of[c] != w.capital_of[c])
                    .collect();
                assert_eq!(changed.len(), 2);
            }
        }
    }

    #[test]
    fn shift_of_non_country_is_an_error() {
        let w = generate_world(7, &small()).unwrap();
        let city = w.entities_of_kind(EntityKind::City)[0];
        assert!(shift_world(&w, city, city).is_err());
        assert!(shift_world(&w, 10_000, city).is_err());
    }

    #[test]
    fn json_round_trip() {
        let w = generate_world(2, &small()).unwrap();
        let text = w.to_json().unwrap();
        assert_eq!(WorldStructure::from_json(&text).unwrap(), w);
        assert!(text.contains(WORLD_SCHEMA));
    }

    #[test]
    fn eras_partition_the_year_range() {
        let w = generate_world(2, &small()).unwrap();
        for l in w.entities_of_kind(EntityKind::Landmark) {
            assert!(w.era(l).unwrap() < w.config.n_eras);
        }
    }
}
