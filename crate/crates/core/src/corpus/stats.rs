use std::collections::HashSet;

use serde::Serialize;

use super::text::{split_sentences, tokenize};
use super::Corpus;
use crate::VARIANTS_PER_IMAGE;

/// Version tag of the entity gazetteer and relation lexicon below.
pub const LEXICON_VERSION: &str = "rs-lexicon-v1";

/// Remote-sensing object and land-cover terms counted as entities.
const GAZETTEER: &[&str] = &[
    "airplane",
    "airport",
    "apron",
    "bareland",
    "baseball",
    "basketball",
    "beach",
    "boat",
    "bridge",
    "building",
    "car",
    "center",
    "church",
    "commercial",
    "court",
    "crop",
    "cropland",
    "dam",
    "desert",
    "farmland",
    "field",
    "forest",
    "grass",
    "grassland",
    "harbor",
    "highway",
    "house",
    "industrial",
    "intersection",
    "island",
    "lake",
    "meadow",
    "mountain",
    "overpass",
    "park",
    "parking",
    "plane",
    "playground",
    "pond",
    "pool",
    "port",
    "railway",
    "residential",
    "river",
    "road",
    "roof",
    "roundabout",
    "runway",
    "school",
    "sea",
    "ship",
    "square",
    "stadium",
    "station",
    "storage",
    "street",
    "tank",
    "tennis",
    "terminal",
    "track",
    "tree",
    "truck",
    "vegetation",
    "vehicle",
    "viaduct",
    "village",
    "warehouse",
    "water",
    "wetland",
];

/// Spatial relation phrases, matched on token sequences.
const RELATIONS: &[&[&str]] = &[
    &["left", "of"],
    &["right", "of"],
    &["next", "to"],
    &["close", "to"],
    &["adjacent", "to"],
    &["in", "front", "of"],
    &["on", "top", "of"],
    &["surrounded", "by"],
    &["lined", "with"],
    &["parallel", "to"],
    &["above"],
    &["below"],
    &["beside"],
    &["between"],
    &["along"],
    &["across"],
    &["around"],
    &["near"],
    &["behind"],
    &["beneath"],
    &["alongside"],
    &["opposite"],
];

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CorpusStats {
    pub total_images: usize,
    pub total_caption_sets: usize,
    pub vocabulary_size: usize,
    pub total_sentences: usize,
    pub avg_sentences_per_caption: f64,
    pub avg_caption_length_words: f64,
    pub avg_relations_per_image: f64,
    pub avg_entities_per_image: f64,
}

fn entity_term(token: &str) -> Option<&'static str> {
    let candidates = [
        Some(token),
        token.strip_suffix("es"),
        token.strip_suffix('s'),
    ];
    candidates
        .into_iter()
        .flatten()
        .find_map(|c| GAZETTEER.iter().copied().find(|g| *g == c))
}

fn count_relations(tokens: &[String]) -> usize {
    (0..tokens.len())
        .map(|i| {
            RELATIONS
                .iter()
                .filter(|phrase| {
                    tokens.len() - i >= phrase.len()
                        && phrase.iter().zip(&tokens[i..]).all(|(p, t)| p == t)
                })
                .count()
        })
        .sum()
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Summary statistics over a corpus.
///
/// Averages per caption divide by the number of caption variants; averages
/// per image divide by the number of images. Entities are distinct gazetteer
/// terms across an image's variants; relations count every lexicon match.
pub fn compute_stats(corpus: &Corpus) -> CorpusStats {
    let mut vocab = HashSet::new();
    let mut total_sentences = 0;
    let mut total_words = 0;
    let mut total_captions = 0;
    let mut total_relations = 0;
    let mut total_entities = 0;

    for entry in corpus.entries() {
        let mut entities = HashSet::new();
        for text in entry.texts() {
            total_captions += 1;
            total_sentences += split_sentences(text).len();
            let tokens = tokenize(text);
            total_words += tokens.len();
            total_relations += count_relations(&tokens);
            entities.extend(tokens.iter().filter_map(|t| entity_term(t)));
            vocab.extend(tokens);
        }
        total_entities += entities.len();
    }

    let images = corpus.len();
    debug_assert_eq!(total_captions, VARIANTS_PER_IMAGE * images);
    CorpusStats {
        total_images: images,
        total_caption_sets: total_captions,
        vocabulary_size: vocab.len(),
        total_sentences,
        avg_sentences_per_caption: ratio(total_sentences, total_captions),
        avg_caption_length_words: ratio(total_words, total_captions),
        avg_relations_per_image: ratio(total_relations, images),
        avg_entities_per_image: ratio(total_entities, images),
    }
}
