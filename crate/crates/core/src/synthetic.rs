//! A small templated NLU corpus with BIO slot tags, for tests and demos.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Annotation, Dataset, Example, Split, Utterance};

/// A template piece: literal words, or a slot filled from a value list.
enum Piece {
    Words(&'static str),
    Slot(&'static str, &'static [&'static str]),
}

use Piece::{Slot, Words};

const CITIES: &[&str] = &["boston", "denver", "new york", "san francisco", "dallas", "atlanta", "seattle"];
const DAYS: &[&str] = &["monday", "tuesday", "friday", "tomorrow", "next week"];
const ARTISTS: &[&str] = &["the beatles", "miles davis", "adele", "queen", "nina simone"];
const TIMES: &[&str] = &["seven am", "noon", "six thirty", "midnight", "eight pm"];
const DISHES: &[&str] = &["pizza", "sushi", "pad thai", "tacos", "ramen"];

fn templates() -> Vec<(&'static str, Vec<Piece>)> {
    vec![
        (
            "book_flight",
            vec![Words("book a flight from"), Slot("from_city", CITIES), Words("to"), Slot("to_city", CITIES)],
        ),
        (
            "book_flight",
            vec![Words("i need a flight to"), Slot("to_city", CITIES), Words("on"), Slot("date", DAYS)],
        ),
        ("get_weather", vec![Words("what is the weather in"), Slot("city", CITIES)]),
        (
            "get_weather",
            vec![Words("will it rain in"), Slot("city", CITIES), Slot("date", DAYS)],
        ),
        ("play_music", vec![Words("play something by"), Slot("artist", ARTISTS)]),
        ("play_music", vec![Words("put on"), Slot("artist", ARTISTS), Words("please")]),
        ("set_alarm", vec![Words("wake me up at"), Slot("time", TIMES)]),
        ("set_alarm", vec![Words("set an alarm for"), Slot("time", TIMES), Slot("date", DAYS)]),
        ("order_food", vec![Words("order some"), Slot("dish", DISHES)]),
        (
            "order_food",
            vec![Words("i want"), Slot("dish", DISHES), Words("delivered at"), Slot("time", TIMES)],
        ),
    ]
}

fn render(intent: &str, pieces: &[Piece], rng: &mut impl Rng) -> (Vec<String>, Annotation) {
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    for piece in pieces {
        match piece {
            Words(w) => {
                for t in w.split_whitespace() {
                    tokens.push(t.to_owned());
                    tags.push("O".to_owned());
                }
            }
            Slot(name, values) => {
                let value = values.choose(rng).expect("nonempty value list");
                for (i, t) in value.split_whitespace().enumerate() {
                    tokens.push(t.to_owned());
                    tags.push(format!("{}-{name}", if i == 0 { "B" } else { "I" }));
                }
            }
        }
    }
    (
        tokens,
        Annotation {
            intent: intent.to_owned(),
            slots: tags,
        },
    )
}

/// `n` labeled examples with ids `0..n`. Every intent appears once `n ≥ 10`.
pub fn examples(n: usize, seed: u64) -> Vec<Example> {
    examples_in(n, seed, Split::Train)
}

pub fn examples_in(n: usize, seed: u64, split: Split) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates = templates();
    (0..n)
        .map(|id| {
            let (intent, pieces) = &templates[if id < templates.len() { id } else { rng.random_range(0..templates.len()) }];
            let (tokens, annotation) = render(intent, pieces, &mut rng);
            Example {
                utterance: Utterance::new(id, tokens).expect("templates are nonempty"),
                annotation: Some(annotation),
                split,
            }
        })
        .collect()
}

/// A complete dataset with independent train, dev and test draws.
pub fn dataset(train: usize, dev: usize, test: usize, seed: u64) -> Dataset {
    Dataset {
        name: "synthetic".into(),
        train: examples_in(train, seed, Split::Train),
        dev: examples_in(dev, seed.wrapping_add(1), Split::Dev),
        test: examples_in(test, seed.wrapping_add(2), Split::Test),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_align_and_all_intents_appear() {
        let data = examples(40, 3);
        let mut intents = std::collections::BTreeSet::new();
        for ex in &data {
            let ann = ex.annotation.as_ref().unwrap();
            assert_eq!(ann.slots.len(), ex.tokens().len());
            intents.insert(ann.intent.clone());
        }
        assert_eq!(intents.len(), 5);
        assert_eq!(examples(40, 3), data);
    }
}
