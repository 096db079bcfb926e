//! Reader and writer for the clean MultiWOZ-2.2-like corpus schema:
//!
//! ```text
//! corpus.json   { "dialogues": [ { "id", "turns": [ { "system", "user", "state": {slot: value} } ] } ] }
//! ontology.json { slot: [values] }
//! ```
//!
//! `state` is cumulative; slots missing from it are "none".

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{slot_domain, Dialogue, Ontology, Turn, DONTCARE_VALUE, NONE_VALUE};

pub const CORPUS_FILE: &str = "corpus.json";
pub const ONTOLOGY_FILE: &str = "ontology.json";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusRecord {
    dialogues: Vec<DialogueRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DialogueRecord {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    domains: Option<Vec<String>>,
    turns: Vec<TurnRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TurnRecord {
    system: String,
    user: String,
    #[serde(default)]
    state: BTreeMap<String, String>,
}

pub fn parse_ontology(json: &str, context: &str) -> Result<Ontology> {
    let map: BTreeMap<String, Vec<String>> =
        serde_json::from_str(json).map_err(|e| Error::json(context, &e))?;
    Ontology::new(map)
}

pub fn parse_corpus(json: &str, ontology: &Ontology, context: &str) -> Result<Vec<Dialogue>> {
    let record: CorpusRecord = serde_json::from_str(json).map_err(|e| Error::json(context, &e))?;
    record
        .dialogues
        .into_iter()
        .map(|d| convert_dialogue(d, ontology))
        .collect()
}

fn convert_dialogue(d: DialogueRecord, ontology: &Ontology) -> Result<Dialogue> {
    let mut turns = Vec::with_capacity(d.turns.len());
    let mut domains: BTreeSet<String> = d.domains.unwrap_or_default().into_iter().collect();
    for (k, t) in d.turns.into_iter().enumerate() {
        let mut state = BTreeMap::new();
        for (slot, value) in t.state {
            let Some(j) = ontology.slot_index(&slot) else {
                return Err(Error::Schema(format!(
                    "dialogue `{}` turn {}: unknown slot `{slot}`",
                    d.id,
                    k + 1
                )));
            };
            let value = value.trim().to_string();
            if value == NONE_VALUE {
                continue;
            }
            if value != DONTCARE_VALUE && ontology.value_index(j, &value).is_none() {
                return Err(Error::Schema(format!(
                    "dialogue `{}` turn {}: value `{value}` is not a candidate of `{slot}`",
                    d.id,
                    k + 1
                )));
            }
            domains.insert(slot_domain(&slot).to_string());
            state.insert(slot, value);
        }
        turns.push(Turn {
            index: k + 1,
            system: t.system,
            user: t.user,
            state,
        });
    }
    Ok(Dialogue {
        id: d.id,
        turns,
        domains,
    })
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Loads a corpus file and the ontology it is validated against.
pub fn load_multiwoz(corpus: &Path, ontology: &Path) -> Result<(Vec<Dialogue>, Ontology)> {
    let onto = parse_ontology(&read(ontology)?, &ontology.display().to_string())?;
    let dialogues = parse_corpus(&read(corpus)?, &onto, &corpus.display().to_string())?;
    Ok((dialogues, onto))
}

pub fn corpus_to_json(dialogues: &[Dialogue]) -> String {
    let record = CorpusRecord {
        dialogues: dialogues
            .iter()
            .map(|d| DialogueRecord {
                id: d.id.clone(),
                domains: Some(d.domains.iter().cloned().collect()),
                turns: d
                    .turns
                    .iter()
                    .map(|t| TurnRecord {
                        system: t.system.clone(),
                        user: t.user.clone(),
                        state: t.state.clone(),
                    })
                    .collect(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&record).expect("corpus serializes")
}

pub fn ontology_to_json(ontology: &Ontology) -> String {
    serde_json::to_string_pretty(&ontology.to_map()).expect("ontology serializes")
}

/// Writes `corpus.json` and `ontology.json` into `dir`.
pub fn save_corpus(dir: &Path, dialogues: &[Dialogue], ontology: &Ontology) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let c = dir.join(CORPUS_FILE);
    fs::write(&c, corpus_to_json(dialogues)).map_err(|e| Error::io(&c, e))?;
    let o = dir.join(ONTOLOGY_FILE);
    fs::write(&o, ontology_to_json(ontology)).map_err(|e| Error::io(&o, e))?;
    Ok(())
}
