//! Deterministic synthetic typing corpora.
//!
//! Every fine type owns one cue token and every coarse type one shared cue
//! token. Cues are the type's own words (the coarse name, the last word of
//! the fine name), the way real contexts mention words close to their
//! type labels. Each of the two cues is placed in a sentence independently with
//! probability `cue_strength`; a missing cue is replaced by a neutral
//! distractor, so at strength 0 sentences carry no type information at all.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusError, Example, TypeDescription};
use crate::ontology::{Taxonomy, TaxonomyOptions, TypePath};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_coarse: usize,
    pub n_fine_per_coarse: usize,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub cue_strength: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 1,
            n_coarse: 2,
            n_fine_per_coarse: 3,
            n_train: 600,
            n_dev: 100,
            n_test: 100,
            cue_strength: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
    pub taxonomy: Taxonomy,
    pub descriptions: Vec<TypeDescription>,
}

const COARSE_NAMES: &[&str] = &[
    "person",
    "location",
    "organization",
    "event",
    "product",
    "facility",
];

const FINE_NAMES: &[&[&str]] = &[
    &["actor", "coach", "athlete", "author", "politician"],
    &["city", "country", "river", "island", "region"],
    &["company", "university", "sports_team", "government", "hospital"],
    &["war", "election", "hurricane", "festival", "protest"],
    &["vehicle", "weapon", "software", "instrument", "food_item"],
    &["airport", "bridge", "stadium", "hotel", "museum"],
];

const FILLER: &[&str] = &[
    "the", "said", "on", "with", "at", "from", "was", "after", "before", "during", "new", "old",
    "report", "today", "yesterday", "group", "people", "many", "local", "national", "also",
    "first", "last", "year",
];

const N_NAMES: usize = 120;
const N_NOISE: usize = 16;

fn coarse_name(c: usize) -> String {
    COARSE_NAMES
        .get(c)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("coarse{c}"))
}

fn fine_name(c: usize, k: usize) -> String {
    FINE_NAMES
        .get(c)
        .and_then(|names| names.get(k))
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("{}kind{k}", coarse_name(c)))
}

pub fn coarse_cue(coarse: &str) -> String {
    coarse.to_string()
}

/// Last underscore-separated word of a fine name.
pub fn fine_cue(fine: &str) -> String {
    fine.rsplit('_').next().unwrap_or(fine).to_string()
}

struct FineType {
    coarse: TypePath,
    fine: TypePath,
    coarse_cue: String,
    fine_cue: String,
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthCorpus, CorpusError> {
    let invalid = |m: &str| Err(CorpusError::InvalidSpec(m.to_string()));
    if spec.n_coarse == 0 || spec.n_fine_per_coarse == 0 {
        return invalid("type counts must be at least 1");
    }
    if !(0.0..=1.0).contains(&spec.cue_strength) {
        return invalid("cue_strength must lie in [0, 1]");
    }
    let n_fine = spec.n_coarse * spec.n_fine_per_coarse;
    for (name, n) in [("n_train", spec.n_train), ("n_dev", spec.n_dev), ("n_test", spec.n_test)] {
        if n < n_fine {
            return Err(CorpusError::InvalidSpec(format!(
                "{name} = {n} is smaller than the number of fine types ({n_fine})"
            )));
        }
    }

    let mut fines = Vec::with_capacity(n_fine);
    let mut all_types = Vec::new();
    for c in 0..spec.n_coarse {
        let cname = coarse_name(c);
        let coarse = TypePath::from_segments([cname.as_str()]);
        all_types.push(coarse.clone());
        for k in 0..spec.n_fine_per_coarse {
            let fname = fine_name(c, k);
            let fine = TypePath::from_segments([cname.as_str(), fname.as_str()]);
            all_types.push(fine.clone());
            fines.push(FineType {
                coarse: coarse.clone(),
                fine,
                coarse_cue: coarse_cue(&cname),
                fine_cue: fine_cue(&fname),
            });
        }
    }
    let taxonomy = Taxonomy::new(all_types, TaxonomyOptions::default())
        .expect("generated type names are unique");

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let train = split(&mut rng, "train", spec.n_train, &fines, spec.cue_strength);
    let dev = split(&mut rng, "dev", spec.n_dev, &fines, spec.cue_strength);
    let test = split(&mut rng, "test", spec.n_test, &fines, spec.cue_strength);

    let descriptions = fines
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let cname = f.coarse.last_segment().to_string();
            let mut descriptions = vec![
                vec!["a".into(), cname.clone(), "known".into(), "for".into(), f.fine_cue.clone()],
                vec![
                    f.coarse_cue.clone(),
                    "kind".into(),
                    "with".into(),
                    f.fine_cue.clone(),
                    "traits".into(),
                ],
            ];
            if i % 2 == 0 {
                descriptions.push(vec![
                    "someone".into(),
                    "or".into(),
                    "something".into(),
                    "called".into(),
                    f.fine_cue.clone(),
                ]);
            }
            TypeDescription {
                type_path: f.fine.clone(),
                descriptions,
            }
        })
        .collect();

    Ok(SynthCorpus {
        train,
        dev,
        test,
        taxonomy,
        descriptions,
    })
}

fn split(
    rng: &mut ChaCha8Rng,
    prefix: &str,
    n: usize,
    fines: &[FineType],
    cue_strength: f64,
) -> Vec<Example> {
    (0..n)
        .map(|i| {
            // the first |fines| examples cycle through every fine type once
            let f = if i < fines.len() {
                &fines[i]
            } else {
                &fines[rng.gen_range(0..fines.len())]
            };
            let mut context: Vec<String> = (0..rng.gen_range(4..=7))
                .map(|_| FILLER[rng.gen_range(0..FILLER.len())].to_string())
                .collect();
            for cue in [&f.coarse_cue, &f.fine_cue] {
                // gen_bool(1.0) always fires, gen_bool(0.0) never
                if rng.gen_bool(cue_strength) {
                    context.push(cue.clone());
                } else {
                    context.push(format!("noise_{}", rng.gen_range(0..N_NOISE)));
                }
            }
            context.shuffle(rng);
            let entity: Vec<String> = (0..rng.gen_range(1..=2))
                .map(|_| format!("name_{}", rng.gen_range(0..N_NAMES)))
                .collect();
            let at = rng.gen_range(0..=context.len());
            let mut tokens = context[..at].to_vec();
            tokens.extend(entity.iter().cloned());
            tokens.extend(context[at..].iter().cloned());
            Example {
                id: format!("{prefix}-{:05}", i + 1),
                tokens,
                entity_start: at,
                entity_end: at + entity.len(),
                gold_types: BTreeSet::from([f.coarse.clone(), f.fine.clone()]),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{write_descriptions, write_examples};
    use crate::ontology::coarse_of;
    use std::collections::{BTreeMap, HashSet};

    fn bytes(c: &SynthCorpus) -> Vec<u8> {
        let mut buf = Vec::new();
        for s in [&c.train, &c.dev, &c.test] {
            write_examples(&mut buf, s).unwrap();
        }
        write_descriptions(&mut buf, &c.descriptions).unwrap();
        buf.extend(c.taxonomy.to_file_text().bytes());
        buf
    }

    fn spec(seed: u64, cue: f64) -> SynthSpec {
        SynthSpec {
            seed,
            cue_strength: cue,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic(&spec(1, 1.0)).unwrap();
        let b = generate_synthetic(&spec(1, 1.0)).unwrap();
        assert_eq!(bytes(&a), bytes(&b));
        let c = generate_synthetic(&spec(2, 1.0)).unwrap();
        assert_ne!(bytes(&a), bytes(&c));
    }

    #[test]
    fn split_sizes_ids_and_coverage() {
        let c = generate_synthetic(&spec(3, 0.5)).unwrap();
        assert_eq!((c.train.len(), c.dev.len(), c.test.len()), (600, 100, 100));
        let mut ids = HashSet::new();
        for ex in c.train.iter().chain(&c.dev).chain(&c.test) {
            assert!(ids.insert(ex.id.clone()));
            for t in &ex.gold_types {
                assert!(c.taxonomy.contains(t));
                assert!(ex.gold_types.contains(&coarse_of(t)), "gold set not closed");
            }
        }
        for s in [&c.train, &c.dev, &c.test] {
            let seen: BTreeSet<_> = s.iter().flat_map(|e| e.fine_types().cloned()).collect();
            assert_eq!(seen.len(), 6);
        }
        assert_eq!(c.descriptions.len(), 6);
    }

    #[test]
    fn full_strength_is_separable_by_cues() {
        let c = generate_synthetic(&spec(5, 1.0)).unwrap();
        let all_cues: HashSet<String> = c
            .taxonomy
            .types()
            .map(|t| if t.is_coarse() { coarse_cue(t.last_segment()) } else { fine_cue(t.last_segment()) })
            .collect();
        assert_eq!(all_cues.len(), 8);
        for ex in c.train.iter().chain(&c.test) {
            let fine = ex.fine_types().next().unwrap();
            let coarse = coarse_of(fine);
            assert!(ex.tokens.contains(&fine_cue(fine.last_segment())));
            assert!(ex.tokens.contains(&coarse_cue(coarse.last_segment())));
            let cues = ex.tokens.iter().filter(|t| all_cues.contains(t.as_str())).count();
            assert_eq!(cues, 2);
        }
    }

    #[test]
    fn siblings_share_the_coarse_cue() {
        let c = generate_synthetic(&spec(5, 1.0)).unwrap();
        let mut by_coarse: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for ex in &c.train {
            let cue = ex.tokens.iter().find(|t| COARSE_NAMES.contains(&t.as_str())).unwrap();
            let fine = ex.fine_types().next().unwrap().to_string();
            by_coarse.entry(cue.clone()).or_default().insert(fine);
        }
        assert_eq!(by_coarse.len(), 2);
        assert!(by_coarse.values().all(|f| f.len() == 3));
    }

    #[test]
    fn invalid_specs() {
        for bad in [
            SynthSpec { n_fine_per_coarse: 0, ..SynthSpec::default() },
            SynthSpec { n_coarse: 0, ..SynthSpec::default() },
            SynthSpec { cue_strength: 1.5, ..SynthSpec::default() },
            SynthSpec { n_dev: 5, ..SynthSpec::default() },
        ] {
            assert!(matches!(generate_synthetic(&bad), Err(CorpusError::InvalidSpec(_))));
        }
    }
}
