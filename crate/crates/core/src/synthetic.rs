//! Generated dialogues whose later answers can only be found through the
//! earlier ones.
//!
//! Each paragraph lists where a few people live and which pet each has, in
//! shuffled order. Turn 1 asks who lives in a city. Turn 2 asks for "that
//! person's" pet, which needs the turn-1 answer. Turn 3 asks where the owner
//! of that pet lives.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Corpus, Dialogue, Turn};
use crate::model::{AnswerType, DatasetMode};

const NAMES: [&str; 12] = [
    "alice", "bruno", "chloe", "daniel", "elena", "farid", "greta", "hiro", "ines", "jonas", "kira", "luca",
];
const CITIES: [&str; 12] = [
    "paris", "rome", "oslo", "lima", "cairo", "delhi", "quito", "tunis", "sofia", "perth", "dakar", "hanoi",
];
const PETS: [&str; 8] = ["cat", "dog", "parrot", "rabbit", "turtle", "hamster", "goldfish", "pony"];

/// `dialogues` dialogues of `turns` (1 to 3) turns, `people` per paragraph.
pub fn coreference_corpus(dialogues: usize, turns: usize, people: usize, seed: u64) -> Corpus {
    assert!((1..=3).contains(&turns), "turns must be 1, 2 or 3");
    assert!((2..=PETS.len()).contains(&people), "people must be between 2 and {}", PETS.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dialogues = (0..dialogues)
        .map(|i| dialogue(&mut rng, format!("syn-{seed}-{i}"), turns, people))
        .collect();
    Corpus {
        mode: DatasetMode::Coqa,
        dialogues,
    }
}

enum Fact {
    Lives(usize),
    Has(usize),
}

/// Appends `text` and returns its byte range.
fn put(text: &str, p: &mut String) -> (usize, usize) {
    let b = p.len();
    p.push_str(text);
    (b, p.len())
}

fn dialogue(rng: &mut ChaCha8Rng, id: String, turns: usize, people: usize) -> Dialogue {
    let names: Vec<&str> = NAMES.choose_multiple(rng, people).copied().collect();
    let cities: Vec<&str> = CITIES.choose_multiple(rng, people).copied().collect();
    let pets: Vec<&str> = PETS.choose_multiple(rng, people).copied().collect();
    let mut facts: Vec<Fact> = (0..people).map(Fact::Lives).chain((0..people).map(Fact::Has)).collect();
    facts.shuffle(rng);

    let mut paragraph = String::new();
    // Byte spans of the name and city in "lives" facts, and the pet in "has".
    let mut name_at = vec![(0, 0); people];
    let mut city_at = vec![(0, 0); people];
    let mut pet_at = vec![(0, 0); people];
    for fact in &facts {
        if !paragraph.is_empty() {
            paragraph.push(' ');
        }
        match *fact {
            Fact::Lives(j) => {
                name_at[j] = put(names[j], &mut paragraph);
                paragraph.push_str(" lives in ");
                city_at[j] = put(cities[j], &mut paragraph);
                paragraph.push_str(" .");
            }
            Fact::Has(j) => {
                put(names[j], &mut paragraph);
                paragraph.push_str(" has a ");
                pet_at[j] = put(pets[j], &mut paragraph);
                paragraph.push_str(" .");
            }
        }
    }

    let who = rng.gen_range(0..people);
    let turn = |question: String, text: &str, span: (usize, usize)| Turn {
        question,
        answers: vec![text.to_string()],
        span: Some(span),
        answer_type: AnswerType::Span,
        human_f1: None,
    };
    let all = [
        turn(format!("who lives in {} ?", cities[who]), names[who], name_at[who]),
        turn("what pet does that person have ?".into(), pets[who], pet_at[who]),
        turn("where does its owner live ?".into(), cities[who], city_at[who]),
    ];
    Dialogue {
        id,
        domain: "synthetic".into(),
        paragraph,
        turns: all.into_iter().take(turns).collect(),
    }
}
