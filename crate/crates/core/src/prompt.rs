//! Prompt-guided expressions and the word-level vocabulary they index into.
//!
//! Layouts (with the default `EntPosition::BeforePrompt`):
//!
//! ```text
//! type-scarce:       [CLS] x_1 .. x_t [ENT] e_l .. e_r is a [MASK] . [SEP]
//! type-rich:         [CLS] x_1 .. x_t [ENT] e_l .. e_r is an actor . [SEP]
//! description-rich:  [CLS] [VENT] d_1 .. d_k [ENT] [VENT] is an actor . [SEP]
//! ```
//!
//! With `EntPosition::AfterCls` the `[ENT]` marker moves to index 1 and is
//! removed from the prompt tail.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Example, TypeDescription};
use crate::ontology::{coarse_of, Taxonomy, TypePath};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const ENT: &str = "[ENT]";
pub const MASK: &str = "[MASK]";
pub const VENT: &str = "[VENT]";

pub const SPECIALS: [&str; 6] = [PAD, UNK, CLS, SEP, ENT, MASK];
pub const PROMPT_WORDS: [&str; 5] = ["is", "a", "an", "and", "."];

pub const DEFAULT_MAX_LEN: usize = 128;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("example `{0}` has no fine-grained gold type")]
    NoFineType(String),
    #[error("max_len {0} cannot hold the prompt tail")]
    MaxLenTooSmall(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EntPosition {
    #[default]
    BeforePrompt,
    AfterCls,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExpressionKind {
    TypeScarce,
    TypeRich,
    DescriptionRich,
}

impl ExpressionKind {
    pub fn short_name(self) -> &'static str {
        match self {
            ExpressionKind::TypeScarce => "ts",
            ExpressionKind::TypeRich => "tr",
            ExpressionKind::DescriptionRich => "desc",
        }
    }

    pub fn from_short_name(s: &str) -> Option<Self> {
        match s {
            "ts" => Some(ExpressionKind::TypeScarce),
            "tr" => Some(ExpressionKind::TypeRich),
            "desc" => Some(ExpressionKind::DescriptionRich),
            _ => None,
        }
    }
}

/// Special tokens occupy ids 0..6 in `SPECIALS` order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub const PAD_ID: usize = 0;
    pub const UNK_ID: usize = 1;
    pub const CLS_ID: usize = 2;
    pub const SEP_ID: usize = 3;
    pub const ENT_ID: usize = 4;
    pub const MASK_ID: usize = 5;

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, String> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err("vocabulary must start with the special tokens".into());
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(format!("duplicate vocabulary token `{t}`"));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(Self::UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(UNK)
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }
}

/// Words of a type's phrase: last path segment split on underscores.
pub fn type_phrase_words(t: &TypePath) -> Vec<String> {
    t.last_segment()
        .split('_')
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// Phrase for several fine types, lexicographic by canonical text, joined by "and".
pub fn joined_type_phrase<'a>(types: impl IntoIterator<Item = &'a TypePath>) -> Vec<String> {
    let sorted: BTreeSet<&TypePath> = types.into_iter().collect();
    let mut out = Vec::new();
    for (i, t) in sorted.into_iter().enumerate() {
        if i > 0 {
            out.push("and".to_string());
        }
        out.extend(type_phrase_words(t));
    }
    out
}

pub fn article_for(phrase: &[String]) -> &'static str {
    match phrase.first().and_then(|w| w.chars().next()) {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

/// Vocabulary over specials, `[VENT]`, prompt words, every type-phrase word,
/// description tokens, and corpus tokens seen at least `min_count` times.
/// Non-special ids are assigned by descending frequency, then lexicographically.
pub fn build_vocab(
    corpus: &[Example],
    descs: &[TypeDescription],
    tax: &Taxonomy,
    min_count: usize,
) -> Vocabulary {
    let mut freq: HashMap<&str, usize> = HashMap::new();
    for ex in corpus {
        for t in &ex.tokens {
            *freq.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut forced: BTreeSet<String> = PROMPT_WORDS.iter().map(|s| s.to_string()).collect();
    for t in tax.types() {
        forced.extend(type_phrase_words(t));
    }
    for d in descs {
        forced.extend(type_phrase_words(&d.type_path));
        for desc in &d.descriptions {
            forced.extend(desc.iter().cloned());
        }
    }
    let mut words: BTreeSet<&str> = freq
        .iter()
        .filter(|(_, &c)| c >= min_count)
        .map(|(w, _)| *w)
        .collect();
    words.extend(forced.iter().map(String::as_str));
    for s in SPECIALS.iter().chain([&VENT]) {
        words.remove(s);
    }
    let mut ordered: Vec<&str> = words.into_iter().collect();
    ordered.sort_by(|a, b| {
        let fa = freq.get(a).copied().unwrap_or(0);
        let fb = freq.get(b).copied().unwrap_or(0);
        fb.cmp(&fa).then_with(|| a.cmp(b))
    });
    let tokens = SPECIALS
        .iter()
        .chain([&VENT])
        .copied()
        .chain(ordered)
        .map(str::to_string)
        .collect();
    Vocabulary::from_tokens(tokens).expect("vocabulary tokens are unique")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Expression {
    pub kind: ExpressionKind,
    pub token_ids: Vec<usize>,
    pub cls_pos: usize,
    pub ent_pos: usize,
    pub mask_pos: Option<usize>,
    pub source_example_id: Option<String>,
    pub carried_fine_types: BTreeSet<TypePath>,
    pub carried_coarse_types: BTreeSet<TypePath>,
}

impl Expression {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Stable key used to order expressions inside a batch.
    pub fn sort_key(&self, ordinal: usize) -> String {
        match &self.source_example_id {
            Some(id) => format!("{id}\u{1}{}", self.kind.short_name()),
            None => format!(
                "\u{2}{}\u{1}{}\u{1}{ordinal:04}",
                self.carried_fine_types
                    .iter()
                    .map(TypePath::canonical_text)
                    .collect::<Vec<_>>()
                    .join(","),
                self.kind.short_name()
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptOptions {
    pub ent_position: EntPosition,
    pub max_len: usize,
}

impl Default for PromptOptions {
    fn default() -> Self {
        Self {
            ent_position: EntPosition::BeforePrompt,
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

/// What fills the slot after "is": a masked placeholder or a type phrase.
enum Slot<'a> {
    Mask,
    Phrase(&'a [String]),
}

/// Lays out `[CLS] ([ENT]) context [ENT]? subject is <article> <slot> . [SEP]`,
/// dropping context tokens from the left when the result would exceed `max_len`.
fn assemble(
    vocab: &Vocabulary,
    context: &[usize],
    subject: &[usize],
    slot: Slot<'_>,
    opts: PromptOptions,
) -> Result<(Vec<usize>, usize, Option<usize>), PromptError> {
    let mut tail = Vec::new();
    if opts.ent_position == EntPosition::BeforePrompt {
        tail.push(Vocabulary::ENT_ID);
    }
    tail.extend_from_slice(subject);
    tail.push(vocab.id("is"));
    let mut mask_offset = None;
    match slot {
        Slot::Mask => {
            tail.push(vocab.id("a"));
            mask_offset = Some(tail.len());
            tail.push(Vocabulary::MASK_ID);
        }
        Slot::Phrase(words) => {
            tail.push(vocab.id(article_for(words)));
            tail.extend(words.iter().map(|w| vocab.id(w)));
        }
    }
    tail.push(vocab.id("."));
    tail.push(Vocabulary::SEP_ID);

    let head = match opts.ent_position {
        EntPosition::BeforePrompt => vec![Vocabulary::CLS_ID],
        EntPosition::AfterCls => vec![Vocabulary::CLS_ID, Vocabulary::ENT_ID],
    };
    let budget = opts
        .max_len
        .checked_sub(head.len() + tail.len())
        .ok_or(PromptError::MaxLenTooSmall(opts.max_len))?;
    let kept = &context[context.len().saturating_sub(budget)..];

    let mut ids = head;
    ids.extend_from_slice(kept);
    let ent_pos = match opts.ent_position {
        EntPosition::AfterCls => 1,
        EntPosition::BeforePrompt => ids.len(),
    };
    let tail_start = ids.len();
    ids.extend(tail);
    Ok((ids, ent_pos, mask_offset.map(|o| tail_start + o)))
}

fn corpus_types(ex: &Example) -> (BTreeSet<TypePath>, BTreeSet<TypePath>) {
    let fine = ex.fine_types().cloned().collect();
    let coarse = ex.gold_types.iter().map(coarse_of).collect();
    (fine, coarse)
}

pub fn build_type_scarce(ex: &Example, vocab: &Vocabulary, opts: PromptOptions) -> Expression {
    let context: Vec<usize> = ex.tokens.iter().map(|t| vocab.id(t)).collect();
    let subject: Vec<usize> = ex.entity_tokens().iter().map(|t| vocab.id(t)).collect();
    let (token_ids, ent_pos, mask_pos) = assemble(vocab, &context, &subject, Slot::Mask, opts)
        .unwrap_or_else(|e| panic!("{e}"));
    let (carried_fine_types, carried_coarse_types) = corpus_types(ex);
    Expression {
        kind: ExpressionKind::TypeScarce,
        token_ids,
        cls_pos: 0,
        ent_pos,
        mask_pos,
        source_example_id: Some(ex.id.clone()),
        carried_fine_types,
        carried_coarse_types,
    }
}

pub fn build_type_rich(
    ex: &Example,
    vocab: &Vocabulary,
    opts: PromptOptions,
) -> Result<Expression, PromptError> {
    let (fine, coarse) = corpus_types(ex);
    if fine.is_empty() {
        return Err(PromptError::NoFineType(ex.id.clone()));
    }
    let phrase = joined_type_phrase(&fine);
    let context: Vec<usize> = ex.tokens.iter().map(|t| vocab.id(t)).collect();
    let subject: Vec<usize> = ex.entity_tokens().iter().map(|t| vocab.id(t)).collect();
    let (token_ids, ent_pos, _) = assemble(vocab, &context, &subject, Slot::Phrase(&phrase), opts)?;
    Ok(Expression {
        kind: ExpressionKind::TypeRich,
        token_ids,
        cls_pos: 0,
        ent_pos,
        mask_pos: None,
        source_example_id: Some(ex.id.clone()),
        carried_fine_types: fine,
        carried_coarse_types: coarse,
    })
}

/// One expression per description of `desc`, all carrying the described type.
pub fn build_description_rich(
    desc: &TypeDescription,
    vocab: &Vocabulary,
    opts: PromptOptions,
) -> Vec<Expression> {
    let phrase = type_phrase_words(&desc.type_path);
    let vent = vocab.id(VENT);
    let fine = BTreeSet::from([desc.type_path.clone()]);
    let coarse = BTreeSet::from([coarse_of(&desc.type_path)]);
    desc.descriptions
        .iter()
        .map(|d| {
            let context: Vec<usize> = std::iter::once(vent)
                .chain(d.iter().map(|t| vocab.id(t)))
                .collect();
            let (token_ids, ent_pos, _) =
                assemble(vocab, &context, &[vent], Slot::Phrase(&phrase), opts)
                    .unwrap_or_else(|e| panic!("{e}"));
            Expression {
                kind: ExpressionKind::DescriptionRich,
                token_ids,
                cls_pos: 0,
                ent_pos,
                mask_pos: None,
                source_example_id: None,
                carried_fine_types: fine.clone(),
                carried_coarse_types: coarse.clone(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::{parse_type, TaxonomyOptions};

    fn tp(s: &str) -> TypePath {
        parse_type(s).unwrap()
    }

    fn example(tokens: &[&str], span: (usize, usize), types: &[&str]) -> Example {
        Example {
            id: "ex".into(),
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            entity_start: span.0,
            entity_end: span.1,
            gold_types: types.iter().map(|s| tp(s)).collect(),
        }
    }

    fn tax() -> Taxonomy {
        Taxonomy::parse(
            "/person\n/person/actor\n/person/coach\n/organization\n/organization/sports_team\n",
            TaxonomyOptions::default(),
        )
        .unwrap()
    }

    fn leigh() -> Example {
        example(
            &["Vivien", "Leigh", "won", "an", "Oscar"],
            (0, 2),
            &["/person", "/person/actor"],
        )
    }

    fn vocab_for(exs: &[Example]) -> Vocabulary {
        build_vocab(exs, &[], &tax(), 1)
    }

    #[test]
    fn specials_occupy_first_ids() {
        let v = vocab_for(&[leigh()]);
        for (i, s) in SPECIALS.iter().enumerate() {
            assert_eq!(v.get(s), Some(i));
        }
        assert_eq!(v.get(VENT), Some(6));
        for w in PROMPT_WORDS.iter().chain(&["actor", "coach", "sports", "team"]) {
            assert!(v.get(w).is_some(), "{w}");
        }
    }

    #[test]
    fn type_scarce_surface_form() {
        let v = vocab_for(&[leigh()]);
        let e = build_type_scarce(&leigh(), &v, PromptOptions::default());
        assert_eq!(
            v.decode(&e.token_ids),
            "[CLS] Vivien Leigh won an Oscar [ENT] Vivien Leigh is a [MASK] . [SEP]"
        );
        assert_eq!(e.ent_pos, 6);
        assert_eq!(e.mask_pos, Some(11));
    }

    #[test]
    fn type_scarce_minimal_sentence() {
        let ex = example(&["w"], (0, 1), &["/person"]);
        let v = vocab_for(&[ex.clone()]);
        let e = build_type_scarce(&ex, &v, PromptOptions::default());
        assert_eq!(v.decode(&e.token_ids), "[CLS] w [ENT] w is a [MASK] . [SEP]");
    }

    #[test]
    fn ent_after_cls() {
        let v = vocab_for(&[leigh()]);
        let opts = PromptOptions {
            ent_position: EntPosition::AfterCls,
            ..Default::default()
        };
        let e = build_type_scarce(&leigh(), &v, opts);
        assert_eq!(e.ent_pos, 1);
        assert_eq!(
            v.decode(&e.token_ids),
            "[CLS] [ENT] Vivien Leigh won an Oscar Vivien Leigh is a [MASK] . [SEP]"
        );
    }

    #[test]
    fn type_rich_single_and_multi() {
        let v = vocab_for(&[leigh()]);
        let e = build_type_rich(&leigh(), &v, PromptOptions::default()).unwrap();
        assert!(v.decode(&e.token_ids).ends_with("is an actor . [SEP]"));
        let multi = example(&["x"], (0, 1), &["/person/coach", "/person/actor"]);
        let e = build_type_rich(&multi, &v, PromptOptions::default()).unwrap();
        assert!(v.decode(&e.token_ids).ends_with("is an actor and coach . [SEP]"));
        assert_eq!(e.carried_coarse_types, BTreeSet::from([tp("/person")]));
    }

    #[test]
    fn type_rich_requires_fine_type() {
        let v = vocab_for(&[leigh()]);
        let coarse_only = example(&["x"], (0, 1), &["/person"]);
        assert_eq!(
            build_type_rich(&coarse_only, &v, PromptOptions::default()),
            Err(PromptError::NoFineType("ex".into()))
        );
    }

    #[test]
    fn description_rich_layout() {
        let desc = TypeDescription {
            type_path: tp("/person/actor"),
            descriptions: vec![
                vec!["person".into(), "who".into(), "can".into(), "perform".into()],
                vec!["performer".into()],
            ],
        };
        let v = build_vocab(&[leigh()], std::slice::from_ref(&desc), &tax(), 1);
        let es = build_description_rich(&desc, &v, PromptOptions::default());
        assert_eq!(es.len(), 2);
        assert_eq!(
            v.decode(&es[0].token_ids),
            "[CLS] [VENT] person who can perform [ENT] [VENT] is an actor . [SEP]"
        );
        assert_eq!(es[0].carried_fine_types, es[1].carried_fine_types);
        assert_eq!(es[0].carried_coarse_types, BTreeSet::from([tp("/person")]));
    }

    #[test]
    fn type_phrase_table() {
        // (type, phrase, article) for every fixture type used above
        let table = [
            ("/person/actor", "actor", "an"),
            ("/person/coach", "coach", "a"),
            ("/organization/sports_team", "sports team", "a"),
            ("/location/island", "island", "an"),
            ("/event/election", "election", "an"),
            ("/product/food_item", "food item", "a"),
            ("/organization/university", "university", "an"),
        ];
        for (t, phrase, art) in table {
            let words = type_phrase_words(&tp(t));
            assert_eq!(words.join(" "), phrase);
            assert_eq!(article_for(&words), art);
        }
    }

    #[test]
    fn min_count_maps_rare_tokens_to_unk() {
        let a = example(&["common", "rare"], (0, 1), &["/person"]);
        let b = example(&["common"], (0, 1), &["/person"]);
        let v = build_vocab(&[a.clone(), b], &[], &tax(), 2);
        assert!(v.get("rare").is_none());
        let e = build_type_scarce(&a, &v, PromptOptions::default());
        assert_eq!(e.token_ids[2], Vocabulary::UNK_ID);
    }

    #[test]
    fn frequency_then_lexicographic_ids() {
        let a = example(&["b", "b", "c", "zz"], (0, 1), &["/person"]);
        let v = build_vocab(&[a], &[], &tax(), 1);
        assert_eq!(v.get("b"), Some(7));
        // then frequency-1 corpus tokens, then unseen forced words, each lexicographic
        let rest: Vec<&str> = v.tokens()[8..].iter().map(String::as_str).collect();
        assert_eq!(&rest[..2], ["c", "zz"]);
        let mut sorted = rest[2..].to_vec();
        sorted.sort();
        assert_eq!(rest[2..], sorted);
    }

    #[test]
    fn truncation_keeps_prompt_tail() {
        let long: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
        let refs: Vec<&str> = long.iter().map(String::as_str).collect();
        let ex = example(&refs, (38, 40), &["/person", "/person/actor"]);
        let v = vocab_for(&[ex.clone()]);
        let opts = PromptOptions {
            max_len: 16,
            ..Default::default()
        };
        let e = build_type_rich(&ex, &v, opts).unwrap();
        assert_eq!(e.len(), 16);
        assert_eq!(
            v.decode(&e.token_ids),
            "[CLS] w33 w34 w35 w36 w37 w38 w39 [ENT] w38 w39 is an actor . [SEP]"
        );
        assert_eq!(e.token_ids[e.ent_pos], Vocabulary::ENT_ID);
    }
}
