use serde::{Deserialize, Serialize};

use super::{AlignTarget, AlignmentLabel, Dialogue, Ontology, SlotOrder, NONE_VALUE};

/// Which update a still-set slot aligns to when its value changed more than once.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignPolicy {
    /// Most recent turn that changed the value.
    #[default]
    LastChange,
    /// First turn of the current uninterrupted non-"none" run.
    FirstChange,
}

/// One label per turn: slot `j` at turn `t` targets the turn of its latest value
/// change (under `LastChange`), or BLANK when its value at `t` is "none".
pub fn derive_alignment_labels(
    dialogue: &Dialogue,
    ontology: &Ontology,
    policy: AlignPolicy,
) -> Vec<AlignmentLabel> {
    let j = ontology.num_slots();
    let mut prev: Vec<&str> = vec![NONE_VALUE; j];
    let mut last_change: Vec<Option<usize>> = vec![None; j];
    let mut run_start: Vec<Option<usize>> = vec![None; j];
    let mut labels = Vec::with_capacity(dialogue.num_turns());
    for t in 1..=dialogue.num_turns() {
        let cur = dialogue.state_vector(t, ontology);
        let mut targets = Vec::with_capacity(j);
        for s in 0..j {
            if cur[s] == NONE_VALUE {
                last_change[s] = None;
                run_start[s] = None;
                targets.push(AlignTarget::Blank);
                continue;
            }
            if cur[s] != prev[s] {
                last_change[s] = Some(t);
                if prev[s] == NONE_VALUE {
                    run_start[s] = Some(t);
                }
            }
            let turn = match policy {
                AlignPolicy::LastChange => last_change[s],
                AlignPolicy::FirstChange => run_start[s],
            }
            .expect("a set slot has a recorded change");
            targets.push(AlignTarget::Turn(turn));
        }
        labels.push(AlignmentLabel { turn: t, targets });
        prev = cur;
    }
    labels
}

/// Slots grouped by aligned turn (earliest first, lexicographic within a
/// turn), followed by the BLANK-aligned slots in lexicographic order.
pub fn order_slots(label: &AlignmentLabel, ontology: &Ontology) -> SlotOrder {
    let names = ontology.slots();
    let mut order = Vec::with_capacity(names.len());
    for turn in 1..=label.turn {
        let mut here: Vec<usize> = (0..names.len())
            .filter(|&s| label.targets[s] == AlignTarget::Turn(turn))
            .collect();
        here.sort_by(|&a, &b| names[a].cmp(&names[b]));
        order.extend(here);
    }
    let mut blank: Vec<usize> = (0..names.len())
        .filter(|&s| label.targets[s] == AlignTarget::Blank)
        .collect();
    blank.sort_by(|&a, &b| names[a].cmp(&names[b]));
    order.extend(blank);
    SlotOrder(order)
}
