//! Synthetic closed-world facts, the LM training corpus, and edit benchmarks.
//!
//! A world is a set of functional (subject, relation) → object triples over
//! pronounceable synthetic entities, with ≥3 surface templates per relation.
//! Benchmarks flip one fact per request and carry rephrase, locality and
//! portability probes so every metric is oracle-checkable by pure lookup.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::CounterRng;

pub type TokenId = u32;
pub type EntityId = u32;
pub type RelationId = u32;

pub const END_WORD: &str = "<end>";
pub const SEP_WORD: &str = "<sep>";

// ── Vocabulary ───────────────────────────────────────────────────────

/// Closed word-level vocabulary. Token ids are dense and stable for a world.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    pub fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as TokenId))
            .collect();
        Vocab { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn end_id(&self) -> TokenId {
        self.index[END_WORD]
    }

    pub fn sep_id(&self) -> TokenId {
        self.index[SEP_WORD]
    }

    pub fn id(&self, word: &str) -> Result<TokenId> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::UnknownToken(word.to_string()))
    }

    pub fn word(&self, id: TokenId) -> &str {
        &self.words[id as usize]
    }

    /// Whitespace tokenization over the closed vocabulary.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .map(|&t| self.word(t))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

// ── Templates ────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
enum Piece {
    Word(String),
    Subject,
}

/// A surface template: glue words around a subject slot, object last.
/// The question form is the statement minus the trailing object.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pieces: Vec<Piece>,
}

impl Template {
    pub fn parse(s: &str) -> Self {
        let pieces = s
            .split_whitespace()
            .map(|w| {
                if w == "<subject>" {
                    Piece::Subject
                } else {
                    Piece::Word(w.to_string())
                }
            })
            .collect();
        Template { pieces }
    }

    pub fn pattern(&self) -> String {
        self.pieces
            .iter()
            .map(|p| match p {
                Piece::Word(w) => w.as_str(),
                Piece::Subject => "<subject>",
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Words of the question form, subject slot filled by possibly several words.
    pub fn question_words(&self, subject: &[&str]) -> Vec<String> {
        let mut out = Vec::new();
        for p in &self.pieces {
            match p {
                Piece::Word(w) => out.push(w.clone()),
                Piece::Subject => out.extend(subject.iter().map(|s| s.to_string())),
            }
        }
        out
    }

    /// Word index where the subject slot starts (single-word subject).
    pub fn subject_index(&self) -> usize {
        self.pieces
            .iter()
            .position(|p| matches!(p, Piece::Subject))
            .expect("template has a subject slot")
    }

    pub fn len_words(&self) -> usize {
        self.pieces.len()
    }

    /// Matches a question word sequence against this template; returns the
    /// subject word if every glue position agrees.
    fn match_question<'a>(&self, words: &'a [&'a str]) -> Option<&'a str> {
        if words.len() != self.pieces.len() {
            return None;
        }
        let mut subject = None;
        for (p, w) in self.pieces.iter().zip(words) {
            match p {
                Piece::Word(g) if g == w => {}
                Piece::Word(_) => return None,
                Piece::Subject => subject = Some(*w),
            }
        }
        subject
    }
}

const TEMPLATE_PATTERNS: [&str; 4] = [
    "the {r} of <subject> is",
    "<subject> keeps the {r} set to",
    "for <subject> the {r} reads",
    "ask <subject> about the {r} and hear",
];

fn glue_words() -> Vec<&'static str> {
    vec![
        "the", "of", "is", "keeps", "set", "to", "for", "reads", "ask", "about", "and", "hear",
    ]
}

// ── World types ──────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct Entity {
    pub name: String,
    pub class: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Relation {
    pub word: String,
    pub templates: Vec<Template>,
    /// Relations usable as the second hop of a composition through this
    /// relation's objects.
    pub partners: Vec<RelationId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FactTriple {
    pub subject: EntityId,
    pub relation: RelationId,
    pub object: EntityId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactWorld {
    pub entities: Vec<Entity>,
    pub relations: Vec<Relation>,
    pub facts: Vec<FactTriple>,
    pub seed: u64,
}

// ── Edit requests ────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct EditRequest {
    /// x_e
    pub edit_prompt: Vec<TokenId>,
    /// y_e
    pub target: Vec<TokenId>,
    /// Token index range [start, end) of the subject within `edit_prompt`.
    pub subject_span: (usize, usize),
    /// Pre-edit answer.
    pub old_target: Vec<TokenId>,
    /// Samples of I(x_e).
    pub rephrases: Vec<Vec<TokenId>>,
    /// Samples of O(x_e): (prompt, expected base-model answer).
    pub locality_probes: Vec<(Vec<TokenId>, Vec<TokenId>)>,
    /// (prompt, answer entailed by the new fact) pairs.
    pub portability_probes: Vec<(Vec<TokenId>, Vec<TokenId>)>,
}

/// In-scope and out-of-scope prompt sets for one request.
#[derive(Debug, Clone, PartialEq)]
pub struct EditScope {
    pub in_scope: Vec<Vec<TokenId>>,
    pub out_of_scope: Vec<Vec<TokenId>>,
}

impl EditRequest {
    pub fn scope(&self) -> EditScope {
        EditScope {
            in_scope: self.rephrases.clone(),
            out_of_scope: self
                .locality_probes
                .iter()
                .map(|(p, _)| p.clone())
                .collect(),
        }
    }
}

// ── Name generation ──────────────────────────────────────────────────

const ONSETS: [&str; 12] = ["k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "b", "d"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

fn syllable_name(rng: &mut CounterRng, syllables: usize) -> String {
    let mut s = String::new();
    for _ in 0..syllables {
        s.push_str(ONSETS[rng.below(ONSETS.len())]);
        s.push_str(VOWELS[rng.below(VOWELS.len())]);
    }
    s
}

fn unique_name(rng: &mut CounterRng, taken: &HashSet<String>, syllables: usize) -> String {
    loop {
        let name = syllable_name(rng, syllables);
        if !taken.contains(&name) {
            return name;
        }
    }
}

// ── Generation ───────────────────────────────────────────────────────

fn n_classes(n_entities: usize, n_relations: usize) -> u32 {
    (n_relations.clamp(2, 4).min(n_entities)) as u32
}

impl FactWorld {
    pub fn n_classes(&self) -> u32 {
        self.entities.iter().map(|e| e.class).max().unwrap_or(0) + 1
    }

    pub fn range_class(&self, r: RelationId) -> u32 {
        r % self.n_classes()
    }

    pub fn object_of(&self, s: EntityId, r: RelationId) -> Option<EntityId> {
        self.facts
            .iter()
            .find(|f| f.subject == s && f.relation == r)
            .map(|f| f.object)
    }

    pub fn entity_id(&self, name: &str) -> Option<EntityId> {
        self.entities
            .iter()
            .position(|e| e.name == name)
            .map(|i| i as EntityId)
    }

    pub fn relation_id(&self, word: &str) -> Option<RelationId> {
        self.relations
            .iter()
            .position(|r| r.word == word)
            .map(|i| i as RelationId)
    }

    /// Deterministic vocabulary: specials, glue, relation words, entities.
    pub fn vocab(&self) -> Vocab {
        let mut words = vec![END_WORD.to_string(), SEP_WORD.to_string()];
        words.extend(glue_words().into_iter().map(str::to_string));
        words.extend(self.relations.iter().map(|r| r.word.clone()));
        words.extend(self.entities.iter().map(|e| e.name.clone()));
        Vocab::from_words(words)
    }
}

pub fn generate_world(
    n_entities: usize,
    n_relations: usize,
    n_facts: usize,
    seed: u64,
) -> Result<FactWorld> {
    let max_facts = n_entities.saturating_mul(n_relations);
    if n_facts > max_facts {
        return Err(Error::Capacity(format!(
            "requested {n_facts} facts but n_entities * n_relations admits at most {max_facts}"
        )));
    }
    if n_entities < 4 {
        return Err(Error::Capacity(format!(
            "n_entities = {n_entities} below the minimum of 4"
        )));
    }
    if n_relations < 2 {
        return Err(Error::Capacity(format!(
            "n_relations = {n_relations} below the minimum of 2"
        )));
    }

    let mut rng = CounterRng::seed(seed);
    let classes = n_classes(n_entities, n_relations);

    let mut taken: HashSet<String> = glue_words().iter().map(|s| s.to_string()).collect();
    taken.insert(END_WORD.to_string());
    taken.insert(SEP_WORD.to_string());

    let mut entities = Vec::with_capacity(n_entities);
    for i in 0..n_entities {
        let syllables = 2 + rng.below(2);
        let name = unique_name(&mut rng, &taken, syllables);
        taken.insert(name.clone());
        entities.push(Entity {
            name,
            class: (i as u32) % classes,
        });
    }

    let mut relations = Vec::with_capacity(n_relations);
    for _ in 0..n_relations {
        let word = unique_name(&mut rng, &taken, 3);
        taken.insert(word.clone());
        let templates = TEMPLATE_PATTERNS
            .iter()
            .map(|p| Template::parse(&p.replace("{r}", &word)))
            .collect();
        relations.push(Relation {
            word,
            templates,
            // Subjects are unconstrained, so any relation can provide the
            // second hop of a composition.
            partners: (0..n_relations as RelationId).collect(),
        });
    }

    let world_skeleton = FactWorld {
        entities,
        relations,
        facts: Vec::new(),
        seed,
    };

    // All (subject, relation) pairs, shuffled; objects drawn from the
    // relation's range class, never equal to the subject.
    let mut pairs: Vec<(EntityId, RelationId)> = (0..n_entities as EntityId)
        .flat_map(|s| (0..n_relations as RelationId).map(move |r| (s, r)))
        .collect();
    rng.shuffle(&mut pairs);

    let mut facts = Vec::with_capacity(n_facts);
    for (s, r) in pairs {
        if facts.len() == n_facts {
            break;
        }
        let class = world_skeleton.range_class(r);
        let candidates: Vec<EntityId> = world_skeleton
            .entities
            .iter()
            .enumerate()
            .filter(|(i, e)| e.class == class && *i as EntityId != s)
            .map(|(i, _)| i as EntityId)
            .collect();
        if candidates.is_empty() {
            continue;
        }
        let object = candidates[rng.below(candidates.len())];
        facts.push(FactTriple {
            subject: s,
            relation: r,
            object,
        });
    }
    if facts.len() < n_facts {
        return Err(Error::Capacity(format!(
            "only {} of {n_facts} facts satisfiable: subject != object rules out some pairs",
            facts.len()
        )));
    }

    Ok(FactWorld {
        facts,
        ..world_skeleton
    })
}

// ── Rendering ────────────────────────────────────────────────────────

impl FactWorld {
    pub fn question_tokens(&self, s: EntityId, r: RelationId, template: usize) -> Vec<TokenId> {
        let vocab = self.vocab();
        let words = self.relations[r as usize].templates[template]
            .question_words(&[&self.entities[s as usize].name]);
        words.iter().map(|w| vocab.id(w).unwrap()).collect()
    }

    pub fn statement_tokens(
        &self,
        s: EntityId,
        r: RelationId,
        o: EntityId,
        template: usize,
    ) -> Vec<TokenId> {
        let vocab = self.vocab();
        let mut tokens = self.question_tokens(s, r, template);
        tokens.push(vocab.id(&self.entities[o as usize].name).unwrap());
        tokens
    }

    /// Question for "the r2 of (the r1 of s)", whose answer is r2(r1(s)).
    pub fn composed_question_tokens(
        &self,
        r2: RelationId,
        r1: RelationId,
        s: EntityId,
    ) -> Vec<TokenId> {
        let vocab = self.vocab();
        let inner: Vec<String> = {
            // Inner phrase uses the base template's question form without
            // its trailing copula: "the r1 of s".
            vec![
                "the".to_string(),
                self.relations[r1 as usize].word.clone(),
                "of".to_string(),
                self.entities[s as usize].name.clone(),
            ]
        };
        let inner_refs: Vec<&str> = inner.iter().map(|s| s.as_str()).collect();
        let words = self.relations[r2 as usize].templates[0].question_words(&inner_refs);
        words.iter().map(|w| vocab.id(w).unwrap()).collect()
    }

    /// Recovers (relation, subject) from a single-template question prompt.
    pub fn parse_question(&self, tokens: &[TokenId]) -> Option<(RelationId, EntityId)> {
        let vocab = self.vocab();
        let words: Vec<&str> = tokens.iter().map(|&t| vocab.word(t)).collect();
        for (ri, rel) in self.relations.iter().enumerate() {
            for t in &rel.templates {
                if let Some(subject) = t.match_question(&words) {
                    if let Some(ei) = self.entity_id(subject) {
                        return Some((ri as RelationId, ei));
                    }
                }
            }
        }
        None
    }
}

// ── Training corpus ──────────────────────────────────────────────────

/// One plain statement per (fact, template), plus a 30% mixture of
/// context-reading items of the form
/// `<statement> <sep> <question> <answer> <end>` whose stated object is
/// drawn freshly, so the answer is only predictable by reading the context.
pub fn emit_training_corpus(world: &FactWorld, seed: u64) -> Vec<Vec<TokenId>> {
    let vocab = world.vocab();
    let end = vocab.end_id();
    let sep = vocab.sep_id();
    let mut rng = CounterRng::seed(seed ^ 0x51u64.wrapping_mul(0x9e37_79b9));

    let mut items: Vec<Vec<TokenId>> = Vec::new();
    for f in &world.facts {
        let n_templates = world.relations[f.relation as usize].templates.len();
        for t in 0..n_templates {
            let mut seq = world.statement_tokens(f.subject, f.relation, f.object, t);
            seq.push(end);
            items.push(seq);
        }
    }

    let plain = items.len();
    let context_items = plain.saturating_mul(3).div_ceil(7).max(1);
    for _ in 0..context_items {
        let f = world.facts[rng.below(world.facts.len())];
        let class = world.range_class(f.relation);
        // Half the stated objects are counterfactual so copying is the only
        // strategy that explains the answers; half restate the true fact so
        // statement prefixes disagree with plain items less often.
        let stated = if rng.below(2) == 0 {
            f.object
        } else {
            let candidates: Vec<EntityId> = world
                .entities
                .iter()
                .enumerate()
                .filter(|(i, e)| e.class == class && *i as EntityId != f.subject)
                .map(|(i, _)| i as EntityId)
                .collect();
            candidates[rng.below(candidates.len())]
        };
        let n_templates = world.relations[f.relation as usize].templates.len();
        let ts = rng.below(n_templates);
        let tq = rng.below(n_templates);
        let mut seq = world.statement_tokens(f.subject, f.relation, stated, ts);
        seq.push(sep);
        seq.extend(world.question_tokens(f.subject, f.relation, tq));
        seq.push(vocab.id(&world.entities[stated as usize].name).unwrap());
        seq.push(end);
        items.push(seq);
    }

    rng.shuffle(&mut items);
    items
}

/// (statement, question, answer) items for demonstration stores.
pub struct DemoItem {
    pub statement: Vec<TokenId>,
    pub question: Vec<TokenId>,
    pub answer: TokenId,
}

pub fn demo_items(world: &FactWorld) -> Vec<DemoItem> {
    let vocab = world.vocab();
    let mut out = Vec::new();
    for f in &world.facts {
        let answer = vocab
            .id(&world.entities[f.object as usize].name)
            .unwrap();
        out.push(DemoItem {
            statement: world.statement_tokens(f.subject, f.relation, f.object, 0),
            question: world.question_tokens(f.subject, f.relation, 0),
            answer,
        });
    }
    out
}

// ── Benchmark generation ─────────────────────────────────────────────

const MIN_LOCALITY_PROBES: usize = 4;

pub fn generate_edit_benchmark(
    world: &FactWorld,
    n_edits: usize,
    seed: u64,
) -> Result<Vec<EditRequest>> {
    if n_edits > world.facts.len() {
        return Err(Error::Contract(format!(
            "n_edits {n_edits} exceeds {} facts",
            world.facts.len()
        )));
    }
    let vocab = world.vocab();
    let mut rng = CounterRng::seed(seed ^ 0xbe_u64.wrapping_mul(0x9e37_79b9));

    // Objects already used with each subject, to keep o* collision-free.
    let mut objects_of_subject: HashMap<EntityId, HashSet<EntityId>> = HashMap::new();
    for f in &world.facts {
        objects_of_subject
            .entry(f.subject)
            .or_default()
            .insert(f.object);
    }

    let mut fact_order: Vec<usize> = (0..world.facts.len()).collect();
    rng.shuffle(&mut fact_order);

    // Choose the edited facts first so locality probes can avoid all of them.
    let mut chosen: Vec<(usize, EntityId)> = Vec::new(); // (fact index, o*)
    let mut cursor = 0usize;
    while chosen.len() < n_edits && cursor < fact_order.len() {
        let fi = fact_order[cursor];
        cursor += 1;
        let f = world.facts[fi];
        let class = world.range_class(f.relation);
        let used = &objects_of_subject[&f.subject];
        let candidates: Vec<EntityId> = world
            .entities
            .iter()
            .enumerate()
            .map(|(i, e)| (i as EntityId, e))
            .filter(|(i, e)| {
                e.class == class
                    && *i != f.subject
                    && *i != f.object
                    && !used.contains(i)
                    && world
                        .relations
                        .iter()
                        .enumerate()
                        .any(|(r2, _)| world.object_of(*i, r2 as RelationId).is_some())
            })
            .map(|(i, _)| i)
            .collect();
        if candidates.is_empty() {
            continue;
        }
        let o_star = candidates[rng.below(candidates.len())];
        chosen.push((fi, o_star));
    }
    if chosen.len() < n_edits {
        let r = world.facts[fact_order[cursor.saturating_sub(1)]].relation;
        return Err(Error::Generation(format!(
            "could not build {n_edits} requests: relation `{}` lacks composable new objects",
            world.relations[r as usize].word
        )));
    }

    let edited_facts: HashSet<usize> = chosen.iter().map(|(fi, _)| *fi).collect();
    let untouched: Vec<usize> = (0..world.facts.len())
        .filter(|fi| !edited_facts.contains(fi))
        .collect();
    if untouched.len() < MIN_LOCALITY_PROBES {
        return Err(Error::Generation(format!(
            "world leaves only {} untouched facts for locality probes (need {MIN_LOCALITY_PROBES})",
            untouched.len()
        )));
    }

    let mut requests = Vec::with_capacity(n_edits);
    for (fi, o_star) in chosen {
        let f = world.facts[fi];
        let rel = &world.relations[f.relation as usize];

        let edit_prompt = world.question_tokens(f.subject, f.relation, 0);
        let subj_idx = rel.templates[0].subject_index();
        let subject_span = (subj_idx, subj_idx + 1);

        let target = vec![vocab.id(&world.entities[o_star as usize].name).unwrap()];
        let old_target = vec![vocab.id(&world.entities[f.object as usize].name).unwrap()];

        let rephrases: Vec<Vec<TokenId>> = (1..rel.templates.len())
            .map(|t| world.question_tokens(f.subject, f.relation, t))
            .collect();

        let probe_facts = {
            let mut pool = untouched.clone();
            rng.shuffle(&mut pool);
            pool.truncate(MIN_LOCALITY_PROBES);
            pool
        };
        let locality_probes: Vec<(Vec<TokenId>, Vec<TokenId>)> = probe_facts
            .iter()
            .map(|&pi| {
                let p = world.facts[pi];
                let t = rng.below(world.relations[p.relation as usize].templates.len());
                (
                    world.question_tokens(p.subject, p.relation, t),
                    vec![vocab.id(&world.entities[p.object as usize].name).unwrap()],
                )
            })
            .collect();

        // One-hop portability: (s, r∘r2) answered by r2(o*).
        let hop_candidates: Vec<(RelationId, EntityId)> = rel
            .partners
            .iter()
            .filter_map(|&r2| world.object_of(o_star, r2).map(|w| (r2, w)))
            .collect();
        if hop_candidates.is_empty() {
            return Err(Error::Generation(format!(
                "relation `{}` has no composition partner with facts about the new object",
                rel.word
            )));
        }
        let (r2, w) = hop_candidates[rng.below(hop_candidates.len())];
        let portability_probes = vec![(
            world.composed_question_tokens(r2, f.relation, f.subject),
            vec![vocab.id(&world.entities[w as usize].name).unwrap()],
        )];

        requests.push(EditRequest {
            edit_prompt,
            target,
            subject_span,
            old_target,
            rephrases,
            locality_probes,
            portability_probes,
        });
    }
    Ok(requests)
}

/// Builds one edit request flipping the existing fact (s, r) to `o_star`,
/// with probes drawn from the rest of the world. Portability probes are
/// included when the new object has composable facts; interactive callers
/// may receive an empty set.
pub fn build_request(
    world: &FactWorld,
    subject: EntityId,
    relation: RelationId,
    o_star: EntityId,
    seed: u64,
) -> Result<EditRequest> {
    let vocab = world.vocab();
    let old_object = world.object_of(subject, relation).ok_or_else(|| {
        Error::Generation(format!(
            "no fact ({}, {}) in the world",
            world.entities[subject as usize].name, world.relations[relation as usize].word
        ))
    })?;
    if o_star == old_object {
        return Err(Error::Generation("new object equals the old object".into()));
    }
    let mut rng = CounterRng::seed(seed ^ 0x0b5e_55ed);
    let rel = &world.relations[relation as usize];

    let edit_prompt = world.question_tokens(subject, relation, 0);
    let subj_idx = rel.templates[0].subject_index();
    let rephrases = (1..rel.templates.len())
        .map(|t| world.question_tokens(subject, relation, t))
        .collect();

    let mut untouched: Vec<&FactTriple> = world
        .facts
        .iter()
        .filter(|f| !(f.subject == subject && f.relation == relation))
        .collect();
    if untouched.len() < MIN_LOCALITY_PROBES {
        return Err(Error::Generation("world too small for locality probes".into()));
    }
    rng.shuffle(&mut untouched);
    let locality_probes = untouched[..MIN_LOCALITY_PROBES]
        .iter()
        .map(|f| {
            let t = rng.below(world.relations[f.relation as usize].templates.len());
            (
                world.question_tokens(f.subject, f.relation, t),
                vec![vocab.id(&world.entities[f.object as usize].name).unwrap()],
            )
        })
        .collect();

    let portability_probes = (0..world.relations.len() as RelationId)
        .find_map(|r2| world.object_of(o_star, r2).map(|w| (r2, w)))
        .map(|(r2, w)| {
            vec![(
                world.composed_question_tokens(r2, relation, subject),
                vec![vocab.id(&world.entities[w as usize].name).unwrap()],
            )]
        })
        .unwrap_or_default();

    Ok(EditRequest {
        edit_prompt,
        target: vec![vocab.id(&world.entities[o_star as usize].name).unwrap()],
        subject_span: (subj_idx, subj_idx + 1),
        old_target: vec![vocab.id(&world.entities[old_object as usize].name).unwrap()],
        rephrases,
        locality_probes,
        portability_probes,
    })
}

// ── Serialization ────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct SeedLine {
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct EntityLine {
    entity: String,
    class: u32,
}

#[derive(Serialize, Deserialize)]
struct RelationLine {
    relation: String,
    templates: Vec<String>,
    partners: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct FactLine {
    subject: String,
    relation: String,
    object: String,
}

impl FactWorld {
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        out.push_str(&serde_json::to_string(&SeedLine { seed: self.seed }).unwrap());
        out.push('\n');
        for e in &self.entities {
            let line = EntityLine {
                entity: e.name.clone(),
                class: e.class,
            };
            out.push_str(&serde_json::to_string(&line).unwrap());
            out.push('\n');
        }
        for r in &self.relations {
            let line = RelationLine {
                relation: r.word.clone(),
                templates: r.templates.iter().map(|t| t.pattern()).collect(),
                partners: r
                    .partners
                    .iter()
                    .map(|&p| self.relations[p as usize].word.clone())
                    .collect(),
            };
            out.push_str(&serde_json::to_string(&line).unwrap());
            out.push('\n');
        }
        for f in &self.facts {
            let line = FactLine {
                subject: self.entities[f.subject as usize].name.clone(),
                relation: self.relations[f.relation as usize].word.clone(),
                object: self.entities[f.object as usize].name.clone(),
            };
            out.push_str(&serde_json::to_string(&line).unwrap());
            out.push('\n');
        }
        out
    }

    pub fn from_lines(text: &str) -> Result<FactWorld> {
        let mut seed = 0u64;
        let mut entities: Vec<Entity> = Vec::new();
        let mut relation_lines: Vec<RelationLine> = Vec::new();
        let mut fact_lines: Vec<FactLine> = Vec::new();

        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let v: serde_json::Value = serde_json::from_str(line)
                .map_err(|e| Error::Parse(format!("world line: {e}")))?;
            if v.get("seed").is_some() {
                let s: SeedLine = serde_json::from_value(v).unwrap();
                seed = s.seed;
            } else if v.get("entity").is_some() {
                let e: EntityLine =
                    serde_json::from_value(v).map_err(|e| Error::Parse(e.to_string()))?;
                entities.push(Entity {
                    name: e.entity,
                    class: e.class,
                });
            } else if v.get("templates").is_some() {
                relation_lines
                    .push(serde_json::from_value(v).map_err(|e| Error::Parse(e.to_string()))?);
            } else if v.get("subject").is_some() {
                fact_lines
                    .push(serde_json::from_value(v).map_err(|e| Error::Parse(e.to_string()))?);
            } else {
                return Err(Error::Parse(format!("unrecognized world line: {line}")));
            }
        }

        let rel_index: HashMap<String, RelationId> = relation_lines
            .iter()
            .enumerate()
            .map(|(i, r)| (r.relation.clone(), i as RelationId))
            .collect();
        let ent_index: HashMap<String, EntityId> = entities
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.clone(), i as EntityId))
            .collect();

        let relations: Vec<Relation> = relation_lines
            .iter()
            .map(|r| {
                Ok(Relation {
                    word: r.relation.clone(),
                    templates: r.templates.iter().map(|t| Template::parse(t)).collect(),
                    partners: r
                        .partners
                        .iter()
                        .map(|p| {
                            rel_index
                                .get(p)
                                .copied()
                                .ok_or_else(|| Error::Parse(format!("unknown partner {p}")))
                        })
                        .collect::<Result<Vec<_>>>()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let facts: Vec<FactTriple> = fact_lines
            .iter()
            .map(|f| {
                Ok(FactTriple {
                    subject: *ent_index
                        .get(&f.subject)
                        .ok_or_else(|| Error::Parse(format!("unknown entity {}", f.subject)))?,
                    relation: *rel_index
                        .get(&f.relation)
                        .ok_or_else(|| Error::Parse(format!("unknown relation {}", f.relation)))?,
                    object: *ent_index
                        .get(&f.object)
                        .ok_or_else(|| Error::Parse(format!("unknown entity {}", f.object)))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        Ok(FactWorld {
            entities,
            relations,
            facts,
            seed,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct RequestLine {
    edit_prompt: String,
    target: String,
    old_target: String,
    subject_span: (usize, usize),
    rephrases: Vec<String>,
    locality_probes: Vec<(String, String)>,
    portability_probes: Vec<(String, String)>,
}

pub fn benchmark_to_lines(world: &FactWorld, requests: &[EditRequest]) -> String {
    let vocab = world.vocab();
    let mut out = String::new();
    for r in requests {
        let line = RequestLine {
            edit_prompt: vocab.decode(&r.edit_prompt),
            target: vocab.decode(&r.target),
            old_target: vocab.decode(&r.old_target),
            subject_span: r.subject_span,
            rephrases: r.rephrases.iter().map(|p| vocab.decode(p)).collect(),
            locality_probes: r
                .locality_probes
                .iter()
                .map(|(p, e)| (vocab.decode(p), vocab.decode(e)))
                .collect(),
            portability_probes: r
                .portability_probes
                .iter()
                .map(|(p, e)| (vocab.decode(p), vocab.decode(e)))
                .collect(),
        };
        out.push_str(&serde_json::to_string(&line).unwrap());
        out.push('\n');
    }
    out
}

pub fn benchmark_from_lines(world: &FactWorld, text: &str) -> Result<Vec<EditRequest>> {
    let vocab = world.vocab();
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let r: RequestLine =
            serde_json::from_str(line).map_err(|e| Error::Parse(format!("benchmark line: {e}")))?;
        out.push(EditRequest {
            edit_prompt: vocab.encode(&r.edit_prompt)?,
            target: vocab.encode(&r.target)?,
            old_target: vocab.encode(&r.old_target)?,
            subject_span: r.subject_span,
            rephrases: r
                .rephrases
                .iter()
                .map(|p| vocab.encode(p))
                .collect::<Result<Vec<_>>>()?,
            locality_probes: r
                .locality_probes
                .iter()
                .map(|(p, e)| Ok((vocab.encode(p)?, vocab.encode(e)?)))
                .collect::<Result<Vec<_>>>()?,
            portability_probes: r
                .portability_probes
                .iter()
                .map(|(p, e)| Ok((vocab.encode(p)?, vocab.encode(e)?)))
                .collect::<Result<Vec<_>>>()?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = generate_world(4, 2, 8, 7).unwrap();
        let b = generate_world(4, 2, 8, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_lines(), b.to_lines());
    }

    #[test]
    fn default_sized_world_has_unique_pairs() {
        let w = generate_world(100, 6, 200, 1).unwrap();
        assert_eq!(w.facts.len(), 200);
        // Oracle: uniqueness check over the output.
        let mut seen = HashSet::new();
        for f in &w.facts {
            assert!(seen.insert((f.subject, f.relation)), "duplicate (s, r)");
            assert_ne!(f.subject, f.object);
        }
        for r in &w.relations {
            assert!(r.templates.len() >= 3);
            assert!(!r.partners.is_empty());
        }
    }

    #[test]
    fn infeasible_counts_are_capacity_errors() {
        let err = generate_world(2, 1, 5, 0).unwrap_err();
        match err {
            Error::Capacity(msg) => assert!(msg.contains("at most 2"), "{msg}"),
            other => panic!("expected capacity error, got {other:?}"),
        }
    }

    #[test]
    fn world_round_trips_through_lines() {
        let w = generate_world(10, 3, 20, 3).unwrap();
        let text = w.to_lines();
        let back = FactWorld::from_lines(&text).unwrap();
        assert_eq!(w, back);
    }

    #[test]
    fn corpus_counts_and_determinism() {
        let w = generate_world(4, 2, 1, 5).unwrap();
        let corpus = emit_training_corpus(&w, 11);
        let n_templates = w.relations[w.facts[0].relation as usize].templates.len();
        assert!(corpus.len() >= n_templates + 1, "plain + context items");
        let again = emit_training_corpus(&w, 11);
        assert_eq!(corpus, again);
        let other = emit_training_corpus(&w, 12);
        assert_ne!(corpus, other, "different seed should shuffle differently");
    }

    #[test]
    fn corpus_sequences_fit_default_context() {
        let w = generate_world(100, 6, 200, 1).unwrap();
        for seq in emit_training_corpus(&w, 2) {
            assert!(seq.len() <= 64, "sequence of {} tokens", seq.len());
        }
    }

    #[test]
    fn benchmark_requests_satisfy_invariants() {
        let w = generate_world(100, 6, 200, 1).unwrap();
        let reqs = generate_edit_benchmark(&w, 10, 4).unwrap();
        assert_eq!(reqs.len(), 10);
        let vocab = w.vocab();
        for r in &reqs {
            assert_ne!(r.target, r.old_target);
            assert!(r.rephrases.len() >= 2);
            assert!(r.locality_probes.len() >= 4);
            assert!(!r.portability_probes.is_empty());

            // Locality probes answered correctly by the fact list, and they
            // never mention the edited (subject, relation) pair.
            let (er, es) = w.parse_question(&r.edit_prompt).unwrap();
            for (probe, expected) in &r.locality_probes {
                let (pr, ps) = w.parse_question(probe).unwrap();
                assert!((pr, ps) != (er, es));
                let obj = w.object_of(ps, pr).unwrap();
                assert_eq!(expected, &vec![vocab.id(&w.entities[obj as usize].name).unwrap()]);
            }

            // Subject span points at the subject token.
            let subj_word = vocab.word(r.edit_prompt[r.subject_span.0]);
            assert_eq!(w.entity_id(subj_word), Some(es));

            // Scope sets are disjoint.
            let scope = r.scope();
            for p in &scope.in_scope {
                assert!(!scope.out_of_scope.contains(p));
            }
        }
    }

    #[test]
    fn portability_answers_follow_one_hop_composition() {
        let w = generate_world(100, 6, 200, 1).unwrap();
        let reqs = generate_edit_benchmark(&w, 10, 9).unwrap();
        let vocab = w.vocab();
        for r in &reqs {
            let o_star = w
                .entity_id(vocab.word(r.target[0]))
                .expect("target is an entity");
            for (_, answer) in &r.portability_probes {
                // Brute-force composition oracle: some relation applied to o*
                // yields exactly this answer.
                let found = (0..w.relations.len() as RelationId).any(|r2| {
                    w.object_of(o_star, r2)
                        .map(|obj| vec![vocab.id(&w.entities[obj as usize].name).unwrap()] == *answer)
                        .unwrap_or(false)
                });
                assert!(found, "portability answer not derivable by one hop");
            }
        }
    }

    #[test]
    fn benchmark_is_pure_function_of_inputs() {
        let w = generate_world(30, 4, 60, 2).unwrap();
        let a = generate_edit_benchmark(&w, 5, 8).unwrap();
        let b = generate_edit_benchmark(&w, 5, 8).unwrap();
        assert_eq!(a, b);
        let text_a = benchmark_to_lines(&w, &a);
        let back = benchmark_from_lines(&w, &text_a).unwrap();
        assert_eq!(a, back);
    }

    #[test]
    fn parse_question_inverts_rendering() {
        let w = generate_world(12, 3, 20, 6).unwrap();
        for f in &w.facts {
            for t in 0..w.relations[f.relation as usize].templates.len() {
                let q = w.question_tokens(f.subject, f.relation, t);
                assert_eq!(w.parse_question(&q), Some((f.relation, f.subject)));
            }
        }
    }

    #[test]
    fn composed_questions_do_not_parse_as_single_relation() {
        let w = generate_world(12, 3, 30, 6).unwrap();
        let reqs = generate_edit_benchmark(&w, 3, 1).unwrap();
        for r in &reqs {
            for (p, _) in &r.portability_probes {
                assert_eq!(w.parse_question(p), None);
            }
        }
    }
}
