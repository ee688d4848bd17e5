//! Hierarchical type taxonomy: slash-delimited type paths, coarse/fine
//! levels, ontology statistics and gold-set validation.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OntologyError {
    #[error("malformed type `{text}`: {reason}")]
    MalformedType { text: String, reason: &'static str },
    #[error("taxonomy is empty")]
    EmptyTaxonomy,
    #[error("duplicate type `{0}` in taxonomy")]
    DuplicateType(String),
    #[error("taxonomy line {line}: {source}")]
    Line {
        line: usize,
        #[source]
        source: Box<OntologyError>,
    },
    #[error("reading taxonomy: {0}")]
    Io(String),
}

/// A hierarchical type such as `/person/actor`.
///
/// Ordering and equality follow the canonical text, so sorted collections of
/// paths are lexicographic by `canonical_text`.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TypePath {
    canonical: String,
}

impl TypePath {
    pub fn segments(&self) -> impl Iterator<Item = &str> {
        self.canonical[1..].split('/')
    }

    pub fn canonical_text(&self) -> &str {
        &self.canonical
    }

    /// Number of segments; 1 is coarse, 2 and deeper is fine.
    pub fn level(&self) -> usize {
        self.canonical.matches('/').count()
    }

    pub fn is_coarse(&self) -> bool {
        self.level() == 1
    }

    pub fn is_fine(&self) -> bool {
        self.level() >= 2
    }

    pub fn last_segment(&self) -> &str {
        self.canonical.rsplit('/').next().unwrap_or_default()
    }

    pub fn first_segment(&self) -> &str {
        self.segments().next().unwrap_or_default()
    }

    /// The level-(k-1) prefix, or `None` for coarse types.
    pub fn parent(&self) -> Option<TypePath> {
        if self.is_coarse() {
            return None;
        }
        let cut = self.canonical.rfind('/')?;
        Some(TypePath {
            canonical: self.canonical[..cut].to_string(),
        })
    }

    pub(crate) fn from_segments<'a>(segments: impl IntoIterator<Item = &'a str>) -> TypePath {
        let mut canonical = String::new();
        for s in segments {
            canonical.push('/');
            canonical.push_str(s);
        }
        TypePath { canonical }
    }
}

impl fmt::Display for TypePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical)
    }
}

impl fmt::Debug for TypePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TypePath({})", self.canonical)
    }
}

impl FromStr for TypePath {
    type Err = OntologyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_type(s)
    }
}

impl Serialize for TypePath {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.canonical)
    }
}

impl<'de> Deserialize<'de> for TypePath {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        parse_type(&text).map_err(serde::de::Error::custom)
    }
}

/// Parses a slash path after trimming and lowercasing it.
pub fn parse_type(text: &str) -> Result<TypePath, OntologyError> {
    let malformed = |reason| OntologyError::MalformedType {
        text: text.to_string(),
        reason,
    };
    let normalized = text.trim().to_lowercase();
    let Some(body) = normalized.strip_prefix('/') else {
        return Err(malformed("missing leading slash"));
    };
    if body.is_empty() {
        return Err(malformed("no segments"));
    }
    for seg in body.split('/') {
        if seg.is_empty() {
            return Err(malformed("empty segment"));
        }
        if seg.chars().any(char::is_whitespace) {
            return Err(malformed("embedded whitespace"));
        }
    }
    Ok(TypePath {
        canonical: normalized,
    })
}

/// The level-1 ancestor of `t`; identity on coarse types.
pub fn coarse_of(t: &TypePath) -> TypePath {
    TypePath::from_segments([t.first_segment()])
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Warning {
    /// A fine type whose coarse ancestor is not in the same set.
    MissingAncestor(TypePath),
    /// A type absent from the taxonomy.
    UnknownType(TypePath),
}

impl fmt::Display for Warning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Warning::MissingAncestor(t) => write!(f, "missing ancestor {t}"),
            Warning::UnknownType(t) => write!(f, "unknown type {t}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaxonomyOptions {
    /// Remove `/other` and everything under it.
    pub drop_other_type: bool,
}

impl Default for TaxonomyOptions {
    fn default() -> Self {
        Self {
            drop_other_type: true,
        }
    }
}

/// True when `t` belongs to the `/other` branch.
pub fn is_other_type(t: &TypePath) -> bool {
    t.first_segment() == "other"
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Taxonomy {
    types: BTreeSet<TypePath>,
    drop_other_type: bool,
    closure_warnings: Vec<Warning>,
}

impl Taxonomy {
    /// Builds a taxonomy. Duplicates are rejected; missing ancestors are
    /// recorded as warnings only.
    pub fn new(
        types: impl IntoIterator<Item = TypePath>,
        opts: TaxonomyOptions,
    ) -> Result<Self, OntologyError> {
        let mut set = BTreeSet::new();
        for t in types {
            if opts.drop_other_type && is_other_type(&t) {
                continue;
            }
            if !set.insert(t.clone()) {
                return Err(OntologyError::DuplicateType(t.to_string()));
            }
        }
        let mut closure_warnings = Vec::new();
        for t in &set {
            if let Some(p) = t.parent() {
                if !set.contains(&p) {
                    closure_warnings.push(Warning::MissingAncestor(p));
                }
            }
        }
        closure_warnings.sort();
        closure_warnings.dedup();
        for w in &closure_warnings {
            log::warn!("taxonomy not ancestor-closed: {w}");
        }
        Ok(Self {
            types: set,
            drop_other_type: opts.drop_other_type,
            closure_warnings,
        })
    }

    pub fn parse(text: &str, opts: TaxonomyOptions) -> Result<Self, OntologyError> {
        let mut types = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let t = parse_type(line).map_err(|e| OntologyError::Line {
                line: i + 1,
                source: Box::new(e),
            })?;
            types.push(t);
        }
        Self::new(types, opts)
    }

    pub fn load(path: impl AsRef<Path>, opts: TaxonomyOptions) -> Result<Self, OntologyError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| OntologyError::Io(format!("{}: {e}", path.as_ref().display())))?;
        Self::parse(&text, opts)
    }

    /// One canonical path per line, lexicographic order.
    pub fn to_file_text(&self) -> String {
        let mut out = String::new();
        for t in &self.types {
            out.push_str(t.canonical_text());
            out.push('\n');
        }
        out
    }

    pub fn contains(&self, t: &TypePath) -> bool {
        self.types.contains(t)
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn max_depth(&self) -> usize {
        self.types.iter().map(TypePath::level).max().unwrap_or(0)
    }

    pub fn drops_other(&self) -> bool {
        self.drop_other_type
    }

    /// Types in their frozen index order (lexicographic by canonical text).
    pub fn types(&self) -> impl ExactSizeIterator<Item = &TypePath> {
        self.types.iter()
    }

    pub fn type_index(&self, t: &TypePath) -> Option<usize> {
        self.types.iter().position(|x| x == t)
    }

    pub fn fine_types(&self) -> impl Iterator<Item = &TypePath> {
        self.types.iter().filter(|t| t.is_fine())
    }

    pub fn coarse_types(&self) -> impl Iterator<Item = &TypePath> {
        self.types.iter().filter(|t| t.is_coarse())
    }

    pub fn closure_warnings(&self) -> &[Warning] {
        &self.closure_warnings
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaxonomyStats {
    pub coarse_count: usize,
    pub fine_count: usize,
    /// fine / coarse, rounded to one decimal.
    pub ratio: f64,
}

pub fn taxonomy_stats(tax: &Taxonomy) -> Result<TaxonomyStats, OntologyError> {
    if tax.is_empty() {
        return Err(OntologyError::EmptyTaxonomy);
    }
    let coarse_count = tax.coarse_types().count();
    let fine_count = tax.fine_types().count();
    let ratio = if coarse_count == 0 {
        0.0
    } else {
        (fine_count as f64 / coarse_count as f64 * 10.0).round() / 10.0
    };
    Ok(TaxonomyStats {
        coarse_count,
        fine_count,
        ratio,
    })
}

/// Advisory checks on a gold (or predicted) type set. Never mutates labels.
pub fn validate_example_types(tax: &Taxonomy, types: &BTreeSet<TypePath>) -> Vec<Warning> {
    let mut out = BTreeSet::new();
    for t in types {
        if !tax.contains(t) {
            out.insert(Warning::UnknownType(t.clone()));
        }
        if t.is_fine() {
            let c = coarse_of(t);
            if !types.contains(&c) {
                out.insert(Warning::MissingAncestor(c));
            }
        }
    }
    out.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tp(s: &str) -> TypePath {
        parse_type(s).unwrap()
    }

    fn set(xs: &[&str]) -> BTreeSet<TypePath> {
        xs.iter().map(|s| tp(s)).collect()
    }

    #[test]
    fn parses_two_level_path() {
        let t = tp("/person/actor");
        assert_eq!(t.segments().collect::<Vec<_>>(), ["person", "actor"]);
        assert_eq!(t.level(), 2);
        assert!(t.is_fine());
    }

    #[test]
    fn parses_coarse_path() {
        let t = tp("/person");
        assert_eq!(t.segments().collect::<Vec<_>>(), ["person"]);
        assert_eq!(t.level(), 1);
    }

    #[test]
    fn normalizes_case_and_whitespace() {
        assert_eq!(tp("  /Person/Actor \n").canonical_text(), "/person/actor");
    }

    #[test]
    fn rejects_malformed() {
        for bad in ["person/actor", "/", "", "/person//actor", "/person/", "/per son", "/a/b c"] {
            assert!(
                matches!(parse_type(bad), Err(OntologyError::MalformedType { .. })),
                "{bad:?}"
            );
        }
    }

    #[test]
    fn coarse_of_examples() {
        assert_eq!(coarse_of(&tp("/person/actor")), tp("/person"));
        assert_eq!(coarse_of(&tp("/person")), tp("/person"));
        assert_eq!(coarse_of(&tp("/organization/sports_team")), tp("/organization"));
        assert_eq!(coarse_of(&tp("/location/structure/airport")), tp("/location"));
    }

    #[test]
    fn stats_without_fine_types() {
        let tax = Taxonomy::parse("/a\n", TaxonomyOptions::default()).unwrap();
        let s = taxonomy_stats(&tax).unwrap();
        assert_eq!((s.coarse_count, s.fine_count, s.ratio), (1, 0, 0.0));
    }

    #[test]
    fn stats_on_empty_taxonomy() {
        let tax = Taxonomy::parse("# nothing\n\n", TaxonomyOptions::default()).unwrap();
        assert_eq!(taxonomy_stats(&tax), Err(OntologyError::EmptyTaxonomy));
    }

    #[test]
    fn duplicate_types_rejected() {
        let err = Taxonomy::parse("/a\n/A\n", TaxonomyOptions::default()).unwrap_err();
        assert_eq!(err, OntologyError::DuplicateType("/a".into()));
    }

    #[test]
    fn closure_violation_is_a_warning() {
        let tax = Taxonomy::parse("/a/b\n", TaxonomyOptions::default()).unwrap();
        assert_eq!(tax.closure_warnings(), &[Warning::MissingAncestor(tp("/a"))]);
    }

    #[test]
    fn other_branch_dropped_by_default() {
        let text = "/other\n/other/art\n/person\n";
        let tax = Taxonomy::parse(text, TaxonomyOptions::default()).unwrap();
        assert_eq!(tax.len(), 1);
        let kept = Taxonomy::parse(
            text,
            TaxonomyOptions {
                drop_other_type: false,
            },
        )
        .unwrap();
        assert_eq!(kept.len(), 3);
    }

    #[test]
    fn line_numbers_in_parse_errors() {
        let err = Taxonomy::parse("/a\n# c\nbad\n", TaxonomyOptions::default()).unwrap_err();
        assert!(matches!(err, OntologyError::Line { line: 3, .. }));
    }

    #[test]
    fn validate_examples() {
        let tax = Taxonomy::parse(
            "/person\n/person/actor\n/organization\n/organization/sports_team\n",
            TaxonomyOptions::default(),
        )
        .unwrap();
        assert!(validate_example_types(&tax, &set(&["/person", "/person/actor"])).is_empty());
        assert_eq!(
            validate_example_types(&tax, &set(&["/organization/sports_team"])),
            vec![Warning::MissingAncestor(tp("/organization"))]
        );
        assert_eq!(
            validate_example_types(&tax, &set(&["/alien"])),
            vec![Warning::UnknownType(tp("/alien"))]
        );
    }

    fn arb_type() -> impl Strategy<Value = TypePath> {
        prop::collection::vec("[a-z_]{1,6}", 1..4)
            .prop_map(|segs| TypePath::from_segments(segs.iter().map(String::as_str)))
    }

    proptest! {
        #[test]
        fn round_trip(t in arb_type()) {
            prop_assert_eq!(parse_type(t.canonical_text()).unwrap(), t.clone());
            prop_assert_eq!(t.canonical_text().matches('/').count(), t.segments().count());
        }

        #[test]
        fn coarse_of_idempotent(t in arb_type()) {
            let c = coarse_of(&t);
            prop_assert_eq!(coarse_of(&c), c);
        }

        #[test]
        fn stats_partition_types(ts in prop::collection::btree_set(arb_type(), 1..20)) {
            let tax = Taxonomy::new(ts.iter().cloned(), TaxonomyOptions { drop_other_type: false }).unwrap();
            let s = taxonomy_stats(&tax).unwrap();
            prop_assert_eq!(s.coarse_count + s.fine_count, tax.len());
        }

        #[test]
        fn validate_empty_iff_closed_and_known(
            tax_types in prop::collection::btree_set(arb_type(), 1..12),
            picks in prop::collection::vec(any::<prop::sample::Index>(), 1..5),
            extra in prop::option::of(arb_type()),
        ) {
            let tax = Taxonomy::new(tax_types.iter().cloned(), TaxonomyOptions { drop_other_type: false }).unwrap();
            let all: Vec<_> = tax_types.iter().cloned().collect();
            let mut gold: BTreeSet<TypePath> = picks.iter().map(|i| i.get(&all).clone()).collect();
            if let Some(e) = extra { gold.insert(e); }
            let closed = gold.iter().all(|t| !t.is_fine() || gold.contains(&coarse_of(t)));
            let known = gold.iter().all(|t| tax.contains(t));
            prop_assert_eq!(validate_example_types(&tax, &gold).is_empty(), closed && known);
        }
    }
}
