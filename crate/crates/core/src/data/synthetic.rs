// SPDX-License-Identifier: MIT OR Apache-2.0

//! Slot-filled template samples.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use super::ContrastiveSample;
use crate::error::{invalid, Result, SekaError};

/// Minimum entries per word bank.
pub const WORD_BANK_MIN: usize = 40;

const AGENTS: [&str; 40] = [
    "the committee", "the engineer", "the librarian", "the pilot", "the chemist",
    "the gardener", "the auditor", "the surgeon", "the architect", "the farmer",
    "the journalist", "the curator", "the sailor", "the baker", "the teacher",
    "the mayor", "the geologist", "the painter", "the mechanic", "the nurse",
    "the captain", "the violinist", "the translator", "the ranger", "the banker",
    "the tailor", "the courier", "the astronomer", "the plumber", "the judge",
    "the poet", "the shepherd", "the chef", "the diplomat", "the potter",
    "the dentist", "the clerk", "the miner", "the editor", "the sculptor",
];

/// (third person, base form).
const VERBS: [(&str, &str); 40] = [
    ("reviews", "review"), ("repairs", "repair"), ("inspects", "inspect"),
    ("delivers", "deliver"), ("studies", "study"), ("paints", "paint"),
    ("measures", "measure"), ("builds", "build"), ("cleans", "clean"),
    ("sorts", "sort"), ("records", "record"), ("tests", "test"),
    ("prepares", "prepare"), ("collects", "collect"), ("designs", "design"),
    ("polishes", "polish"), ("labels", "label"), ("packs", "pack"),
    ("weighs", "weigh"), ("sketches", "sketch"), ("guards", "guard"),
    ("signs", "sign"), ("moves", "move"), ("checks", "check"),
    ("carries", "carry"), ("examines", "examine"), ("orders", "order"),
    ("restores", "restore"), ("counts", "count"), ("ships", "ship"),
    ("prints", "print"), ("borrows", "borrow"), ("paints over", "paint over"),
    ("catalogs", "catalog"), ("photographs", "photograph"), ("mends", "mend"),
    ("stores", "store"), ("plants", "plant"), ("drafts", "draft"),
    ("tunes", "tune"),
];

const OBJECTS: [&str; 40] = [
    "a copper kettle", "an old map", "a silver compass", "a wooden crate",
    "a glass lantern", "a leather satchel", "a brass telescope", "a marble bust",
    "a cedar chest", "a paper kite", "an iron gate", "a velvet curtain",
    "a clay vase", "a steel bridge", "a wool blanket", "a stone fountain",
    "a tin whistle", "an ivory chess set", "a bamboo flute", "a granite bench",
    "a crystal goblet", "a canvas tent", "a bronze bell", "a porcelain teapot",
    "a rusty anchor", "a feather quill", "a linen tablecloth", "an oak desk",
    "a pewter mug", "a rope ladder", "a cotton banner", "a slate roof",
    "a jade pendant", "a wicker basket", "a tidal chart", "a seed catalog",
    "a weather balloon", "a pocket watch", "a mosaic tile", "a rowing boat",
];

const SETTINGS: [&str; 40] = [
    "in the morning", "at the harbor", "near the river", "after lunch",
    "in the workshop", "before sunrise", "at the museum", "during the storm",
    "on the rooftop", "in the basement", "at the market", "beside the lake",
    "in the archive", "on the platform", "during the festival", "at midnight",
    "in the greenhouse", "under the bridge", "in the courtyard", "at the station",
    "on the island", "in the valley", "after the meeting", "before the exam",
    "in the laboratory", "at the border", "on the hillside", "in the cellar",
    "at the airfield", "during the winter", "in the observatory", "by the canal",
    "at the quarry", "in the orchard", "on the pier", "in the attic",
    "at the studio", "during the parade", "in the desert", "at dawn",
];

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
struct Slots {
    agent: usize,
    verb: usize,
    object: usize,
    setting: usize,
}

impl Slots {
    fn draw(rng: &mut Xoshiro256PlusPlus) -> Self {
        Self {
            agent: rng.gen_range(0..AGENTS.len()),
            verb: rng.gen_range(0..VERBS.len()),
            object: rng.gen_range(0..OBJECTS.len()),
            setting: rng.gen_range(0..SETTINGS.len()),
        }
    }

    fn context(&self) -> String {
        let mut s = format!(
            "{} {} {} {}.",
            AGENTS[self.agent], VERBS[self.verb].0, OBJECTS[self.object], SETTINGS[self.setting]
        );
        s[..1].make_ascii_uppercase();
        s
    }

    fn question(&self) -> String {
        format!(
            "What does {} {} {}?",
            AGENTS[self.agent], VERBS[self.verb].1, SETTINGS[self.setting]
        )
    }

    fn answer(&self) -> &'static str {
        OBJECTS[self.object]
    }
}

fn capacity() -> usize {
    AGENTS.len() * VERBS.len() * OBJECTS.len() * SETTINGS.len() / 2
}

/// `n` samples drawn deterministically from `seed`. Every context across
/// the whole batch is distinct and each answer occurs exactly once in its
/// context.
pub fn generate_synthetic(n: usize, seed: u64) -> Result<Vec<ContrastiveSample>> {
    if n == 0 {
        return Err(invalid("generate_synthetic needs n >= 1"));
    }
    if n > capacity() {
        return Err(SekaError::Capacity(format!(
            "{n} samples requested but templates support at most {}",
            capacity()
        )));
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut used: HashSet<Slots> = HashSet::with_capacity(2 * n);
    let draw_fresh = |rng: &mut Xoshiro256PlusPlus, used: &mut HashSet<Slots>| loop {
        let s = Slots::draw(rng);
        if s.context().matches(s.answer()).count() == 1 && used.insert(s) {
            return s;
        }
    };
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let a = draw_fresh(&mut rng, &mut used);
        let b = loop {
            let b = draw_fresh(&mut rng, &mut used);
            if b.question() != a.question() {
                break b;
            }
            used.remove(&b);
        };
        out.push(ContrastiveSample {
            context1: a.context(),
            context2: b.context(),
            question1: a.question(),
            answer1: a.answer().to_string(),
            question2: b.question(),
            answer2: b.answer().to_string(),
        });
    }
    Ok(out)
}
