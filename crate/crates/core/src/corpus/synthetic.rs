//! Templated multi-domain dialogue generator used as a desk-scale corpus.
//!
//! Every newly set or updated value is mentioned literally in the user query of
//! its turn. A share of dialogues is forced to contain a confusion pair: two
//! slots of different domains with overlapping value sets, set in different
//! turns (the classic restaurant-area early / hotel-area later case).

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Dialogue, Ontology, Turn, DONTCARE_VALUE, NONE_VALUE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotSpec {
    pub name: String,
    pub values: Vec<String>,
    /// Surface templates containing `{v}`; `{slot}` expands to the slot name.
    #[serde(default)]
    pub phrases: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub slots: Vec<SlotSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OntologySpec {
    pub domains: Vec<DomainSpec>,
    /// Chance that a set/update turn is phrased as a rejected offer followed by the real value.
    #[serde(default = "default_distractor_rate")]
    pub distractor_rate: f64,
    /// Chance that a dialogue is built around a cross-domain confusion pair.
    #[serde(default = "default_confusion_rate")]
    pub forced_confusion_rate: f64,
}

fn default_distractor_rate() -> f64 {
    0.1
}

fn default_confusion_rate() -> f64 {
    0.35
}

fn slot(name: &str, values: &[&str], phrases: &[&str]) -> SlotSpec {
    SlotSpec {
        name: name.into(),
        values: values.iter().map(|s| s.to_string()).collect(),
        phrases: phrases.iter().map(|s| s.to_string()).collect(),
    }
}

impl Default for OntologySpec {
    /// Three domains with three slots each.
    fn default() -> Self {
        let areas = ["north", "south", "east", "west", "centre"];
        let prices = ["cheap", "moderate", "expensive", "premium"];
        let cities = ["cambridge", "london", "ely", "norwich", "stevenage"];
        OntologySpec {
            domains: vec![
                DomainSpec {
                    name: "restaurant".into(),
                    slots: vec![
                        slot(
                            "area",
                            &areas,
                            &["in the {v}", "on the {v} side", "in the {v} of town"],
                        ),
                        slot(
                            "food",
                            &["indian", "chinese", "italian", "british", "thai"],
                            &["serving {v} food", "that serves {v} food", "with {v} food"],
                        ),
                        slot(
                            "pricerange",
                            &prices,
                            &["in the {v} price range", "that is {v}", "with {v} prices"],
                        ),
                    ],
                },
                DomainSpec {
                    name: "hotel".into(),
                    slots: vec![
                        slot(
                            "area",
                            &areas,
                            &["in the {v}", "located in the {v}", "on the {v} side"],
                        ),
                        slot(
                            "pricerange",
                            &prices,
                            &["in the {v} price range", "that is {v}", "with {v} prices"],
                        ),
                        slot(
                            "stars",
                            &["1", "2", "3", "4", "5"],
                            &["with {v} stars", "rated {v} stars", "of {v} stars"],
                        ),
                    ],
                },
                DomainSpec {
                    name: "train".into(),
                    slots: vec![
                        slot(
                            "day",
                            &["monday", "tuesday", "wednesday", "thursday", "friday"],
                            &["on {v}", "for {v}", "that runs on {v}"],
                        ),
                        slot(
                            "departure",
                            &cities,
                            &["from {v}", "departing from {v}", "leaving from {v}"],
                        ),
                        slot(
                            "destination",
                            &cities,
                            &["to {v}", "going to {v}", "arriving in {v}"],
                        ),
                    ],
                },
            ],
            distractor_rate: default_distractor_rate(),
            forced_confusion_rate: default_confusion_rate(),
        }
    }
}

impl OntologySpec {
    pub fn validate(&self) -> Result<()> {
        if self.domains.len() < 2 {
            return Err(Error::Config(
                "synthetic ontology needs at least 2 domains".into(),
            ));
        }
        let mut names = BTreeSet::new();
        for d in &self.domains {
            if d.slots.len() < 3 {
                return Err(Error::Config(format!(
                    "domain `{}` needs at least 3 slots",
                    d.name
                )));
            }
            for s in &d.slots {
                let full = format!("{}-{}", d.name, s.name);
                if !names.insert(full.clone()) {
                    return Err(Error::Config(format!("duplicate slot `{full}`")));
                }
                let distinct: BTreeSet<&String> = s.values.iter().collect();
                if distinct.len() < 4 || distinct.len() != s.values.len() {
                    return Err(Error::Config(format!(
                        "slot `{full}` needs at least 4 distinct values"
                    )));
                }
                if s.values
                    .iter()
                    .any(|v| v == NONE_VALUE || v == DONTCARE_VALUE || v.trim().is_empty())
                {
                    return Err(Error::Config(format!(
                        "slot `{full}` lists a reserved or empty value"
                    )));
                }
                if s.phrases.iter().any(|p| !p.contains("{v}")) {
                    return Err(Error::Config(format!(
                        "slot `{full}` has a phrase without `{{v}}`"
                    )));
                }
            }
        }
        for (field, v) in [
            ("distractor_rate", self.distractor_rate),
            ("forced_confusion_rate", self.forced_confusion_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("`{field}` must lie in [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn ontology(&self) -> Result<Ontology> {
        let map = self
            .domains
            .iter()
            .flat_map(|d| {
                d.slots
                    .iter()
                    .map(move |s| (format!("{}-{}", d.name, s.name), s.values.clone()))
            })
            .collect();
        Ontology::new(map)
    }
}

struct SlotInfo<'a> {
    full: String,
    domain: usize,
    spec: &'a SlotSpec,
}

impl SlotInfo<'_> {
    fn phrase<R: Rng>(&self, rng: &mut R, value: &str) -> String {
        let template = self
            .spec
            .phrases
            .choose(rng)
            .map(String::as_str)
            .unwrap_or("with the {slot} {v}");
        template
            .replace("{slot}", &self.spec.name)
            .replace("{v}", value)
    }

    fn other_value<R: Rng>(&self, rng: &mut R, avoid: &[&str]) -> String {
        let pool: Vec<&String> = self
            .spec
            .values
            .iter()
            .filter(|v| !avoid.contains(&v.as_str()))
            .collect();
        pool.choose(rng)
            .map(|s| s.to_string())
            .unwrap_or_else(|| self.spec.values[0].clone())
    }
}

fn shared_values(a: &SlotSpec, b: &SlotSpec) -> bool {
    a.values.iter().any(|v| b.values.contains(v))
}

const OPENERS: [&str; 5] = [
    "i need",
    "i am looking for",
    "can you find me",
    "i would like",
    "please help me find",
];
const FOLLOW_UPS: [&str; 3] = ["i also want the", "make sure the", "and i want the"];
const SYSTEM_GENERIC: [&str; 5] = [
    "what else can i do for you ?",
    "i have found a few options .",
    "sure , is there anything else ?",
    "okay , noted .",
    "there are several options available .",
];
const CHIT_CHAT: [&str; 4] = [
    "thank you .",
    "that sounds good .",
    "great , thanks .",
    "okay .",
];

struct Generator<'a> {
    spec: &'a OntologySpec,
    slots: Vec<SlotInfo<'a>>,
    by_domain: Vec<Vec<usize>>,
    pairs: Vec<(usize, usize)>,
}

impl<'a> Generator<'a> {
    fn new(spec: &'a OntologySpec) -> Self {
        let mut slots = Vec::new();
        let mut by_domain = vec![Vec::new(); spec.domains.len()];
        for (di, d) in spec.domains.iter().enumerate() {
            for s in &d.slots {
                by_domain[di].push(slots.len());
                slots.push(SlotInfo {
                    full: format!("{}-{}", d.name, s.name),
                    domain: di,
                    spec: s,
                });
            }
        }
        let mut pairs = Vec::new();
        for a in 0..slots.len() {
            for b in 0..slots.len() {
                if slots[a].domain != slots[b].domain && shared_values(slots[a].spec, slots[b].spec)
                {
                    pairs.push((a, b));
                }
            }
        }
        Generator {
            spec,
            slots,
            by_domain,
            pairs,
        }
    }

    fn dialogue<R: Rng>(&self, rng: &mut R, id: String) -> Dialogue {
        let total_turns = rng.random_range(3..=8usize);
        let n_domains = self.spec.domains.len();
        let forced = if !self.pairs.is_empty() && rng.random_bool(self.spec.forced_confusion_rate) {
            self.pairs.choose(rng).copied()
        } else {
            None
        };
        let mut order: Vec<usize> = (0..n_domains).collect();
        order.shuffle(rng);
        let max_domains = n_domains.min(3).min(total_turns);
        let mut count = rng.random_range(1..=max_domains);
        if let Some((a, b)) = forced {
            let (da, db) = (self.slots[a].domain, self.slots[b].domain);
            order.retain(|&d| d != da && d != db);
            order.insert(0, db);
            order.insert(0, da);
            count = count.max(2);
        }
        order.truncate(count);
        // split the turns into one contiguous non-empty block per domain
        let mut cuts: Vec<usize> = (1..total_turns).collect();
        cuts.shuffle(rng);
        let mut cuts: Vec<usize> = cuts.into_iter().take(count - 1).collect();
        cuts.sort_unstable();
        let mut bounds = vec![0];
        bounds.extend(cuts);
        bounds.push(total_turns);

        let mut state: BTreeMap<String, String> = BTreeMap::new();
        let mut turns = Vec::with_capacity(total_turns);
        for (bi, &domain) in order.iter().enumerate() {
            let must = forced.and_then(|(a, b)| {
                if self.slots[a].domain == domain {
                    Some(a)
                } else if self.slots[b].domain == domain {
                    Some(b)
                } else {
                    None
                }
            });
            for k in bounds[bi]..bounds[bi + 1] {
                let first_in_block = k == bounds[bi];
                let (system, user) = self.turn_text(rng, domain, first_in_block, must, &mut state);
                let system = if k == 0 {
                    "hello , how can i help you ?".to_string()
                } else {
                    system
                };
                turns.push(Turn {
                    index: k + 1,
                    system,
                    user,
                    state: state.clone(),
                });
            }
        }
        let domains = order
            .iter()
            .map(|&d| self.spec.domains[d].name.clone())
            .collect();
        Dialogue { id, turns, domains }
    }

    fn turn_text<R: Rng>(
        &self,
        rng: &mut R,
        domain: usize,
        first_in_block: bool,
        must: Option<usize>,
        state: &mut BTreeMap<String, String>,
    ) -> (String, String) {
        let dname = &self.spec.domains[domain].name;
        let unset: Vec<usize> = self.by_domain[domain]
            .iter()
            .copied()
            .filter(|&s| !state.contains_key(&self.slots[s].full))
            .collect();
        let set: Vec<usize> = self.by_domain[domain]
            .iter()
            .copied()
            .filter(|&s| state.contains_key(&self.slots[s].full))
            .collect();
        let generic = SYSTEM_GENERIC.choose(rng).expect("non-empty").to_string();

        #[derive(Clone, Copy, PartialEq)]
        enum Action {
            Set,
            Update,
            Chat,
        }
        let action = if first_in_block && !unset.is_empty() {
            Action::Set
        } else {
            let mut options = vec![(Action::Chat, 0.2)];
            if !unset.is_empty() {
                options.push((Action::Set, 0.5));
            }
            if !set.is_empty() {
                options.push((Action::Update, 0.3));
            }
            options
                .choose_weighted(rng, |o| o.1)
                .map(|o| o.0)
                .expect("non-empty options")
        };
        match action {
            Action::Chat => (
                generic,
                CHIT_CHAT.choose(rng).expect("non-empty").to_string(),
            ),
            Action::Set => {
                let limit = if first_in_block { 3 } else { 2 };
                let mut pool = unset.clone();
                pool.shuffle(rng);
                let n = rng.random_range(1..=limit.min(pool.len()));
                let mut chosen: Vec<usize> = pool.into_iter().take(n).collect();
                if let Some(m) = must.filter(|m| unset.contains(m) && !chosen.contains(m)) {
                    chosen[0] = m;
                }
                let values: Vec<String> = chosen
                    .iter()
                    .map(|&s| self.slots[s].other_value(rng, &[]))
                    .collect();
                if chosen.len() == 1
                    && !first_in_block
                    && rng.random_bool(self.spec.distractor_rate)
                {
                    let s = &self.slots[chosen[0]];
                    let bad = s.other_value(rng, &[&values[0]]);
                    state.insert(s.full.clone(), values[0].clone());
                    let system = format!("sorry , there is no {dname} {} .", s.phrase(rng, &bad));
                    return (
                        system,
                        format!("what about one {} ?", s.phrase(rng, &values[0])),
                    );
                }
                let phrases: Vec<String> = chosen
                    .iter()
                    .zip(&values)
                    .map(|(&s, v)| self.slots[s].phrase(rng, v))
                    .collect();
                for (&s, v) in chosen.iter().zip(&values) {
                    state.insert(self.slots[s].full.clone(), v.clone());
                }
                let user = if first_in_block {
                    let opener = OPENERS.choose(rng).expect("non-empty");
                    format!("{opener} a {dname} {} .", phrases.join(" and "))
                } else {
                    let lead = FOLLOW_UPS.choose(rng).expect("non-empty");
                    format!("{lead} {dname} {} .", phrases.join(" and "))
                };
                (generic, user)
            }
            Action::Update => {
                let s = &self.slots[*set.choose(rng).expect("non-empty")];
                let current = state[&s.full].clone();
                let new = s.other_value(rng, &[&current]);
                state.insert(s.full.clone(), new.clone());
                if rng.random_bool(self.spec.distractor_rate) {
                    let bad = s.other_value(rng, &[&current, &new]);
                    let system = format!("sorry , there is no {dname} {} .", s.phrase(rng, &bad));
                    (system, format!("what about one {} ?", s.phrase(rng, &new)))
                } else {
                    (
                        generic,
                        format!(
                            "actually , i want the {dname} {} instead .",
                            s.phrase(rng, &new)
                        ),
                    )
                }
            }
        }
    }
}

/// Deterministic corpus of `n` dialogues (3–8 turns each) over `spec`.
pub fn generate_synthetic_corpus(
    seed: u64,
    n: usize,
    spec: &OntologySpec,
) -> Result<(Vec<Dialogue>, Ontology)> {
    spec.validate()?;
    let ontology = spec.ontology()?;
    let generator = Generator::new(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dialogues = (0..n)
        .map(|i| generator.dialogue(&mut rng, format!("syn-{seed}-{i:05}")))
        .collect();
    Ok((dialogues, ontology))
}

/// True if two slots of different domains with overlapping candidate values
/// were first set in different turns.
pub fn has_confusion_pair(dialogue: &Dialogue, ontology: &Ontology) -> bool {
    let mut first_set: BTreeMap<&str, usize> = BTreeMap::new();
    for turn in &dialogue.turns {
        for slot in turn.state.keys() {
            first_set.entry(slot.as_str()).or_insert(turn.index);
        }
    }
    let real = |j: usize| -> BTreeSet<&String> {
        ontology
            .candidates(j)
            .iter()
            .filter(|v| *v != NONE_VALUE && *v != DONTCARE_VALUE)
            .collect()
    };
    let set: Vec<(&str, usize)> = first_set.into_iter().collect();
    for (i, &(a, ta)) in set.iter().enumerate() {
        for &(b, tb) in &set[i + 1..] {
            if ta == tb || super::slot_domain(a) == super::slot_domain(b) {
                continue;
            }
            let (Some(ja), Some(jb)) = (ontology.slot_index(a), ontology.slot_index(b)) else {
                continue;
            };
            if !real(ja).is_disjoint(&real(jb)) {
                return true;
            }
        }
    }
    false
}
