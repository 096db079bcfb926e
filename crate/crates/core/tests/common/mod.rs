//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use luna_core::corpus::AlignTarget;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Literal transcription of the ordering procedure: walk turns, collect each
/// turn's slots, sort them, then append every slot not yet placed.
pub fn algorithm1(targets: &[AlignTarget], names: &[String], t: usize) -> Vec<usize> {
    let mut o: Vec<usize> = Vec::new();
    for turn in 1..=t {
        let mut l: Vec<&String> = Vec::new();
        for (j, target) in targets.iter().enumerate() {
            if *target == AlignTarget::Turn(turn) {
                l.push(&names[j]);
            }
        }
        l.sort();
        for name in l {
            o.push(names.iter().position(|n| n == name).unwrap());
        }
    }
    let mut rest: Vec<&String> = names
        .iter()
        .enumerate()
        .filter(|(j, _)| !o.contains(j))
        .map(|(_, n)| n)
        .collect();
    rest.sort();
    for name in rest {
        o.push(names.iter().position(|n| n == name).unwrap());
    }
    o
}

/// Plackett–Luce probability of `perm`, computed from raw exponentials.
pub fn pl_probability(scores: &[f64], perm: &[usize]) -> f64 {
    let mut p = 1.0;
    for k in 0..perm.len() {
        let denom: f64 = perm[k..].iter().map(|&i| scores[i].exp()).sum();
        p *= scores[perm[k]].exp() / denom;
    }
    p
}

pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Naive recount by explicit index loops.
pub fn naive(pred: &[Vec<usize>], gold: &[Vec<usize>]) -> (f64, f64) {
    let mut turns_ok = 0;
    let mut pairs_ok = 0;
    let mut pairs = 0;
    for i in 0..gold.len() {
        let mut all = true;
        for j in 0..gold[i].len() {
            pairs += 1;
            if pred[i][j] == gold[i][j] {
                pairs_ok += 1;
            } else {
                all = false;
            }
        }
        if all {
            turns_ok += 1;
        }
    }
    (
        turns_ok as f64 / gold.len() as f64,
        pairs_ok as f64 / pairs as f64,
    )
}

pub fn random_fixture(rng: &mut ChaCha8Rng) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let turns = rng.random_range(1..30);
    let slots = rng.random_range(1..6);
    let gold: Vec<Vec<usize>> = (0..turns)
        .map(|_| (0..slots).map(|_| rng.random_range(0..4)).collect())
        .collect();
    let pred = gold
        .iter()
        .map(|row| {
            row.iter()
                .map(|&v| {
                    if rng.random_bool(0.15) {
                        rng.random_range(0..4)
                    } else {
                        v
                    }
                })
                .collect()
        })
        .collect();
    (pred, gold)
}
