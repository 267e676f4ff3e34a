#![allow(dead_code)]

use std::collections::BTreeMap;

use captionret::corpus::{
    CaptionSet, CaptionVariant, Corpus, CorpusEntry, ImageRecord, SourceDataset, Split, VariantKind,
};
use captionret::index::VectorIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const WORDS: &[&str] = &[
    "airport",
    "runway",
    "plane",
    "terminal",
    "apron",
    "harbor",
    "boat",
    "ship",
    "pier",
    "crane",
    "forest",
    "tree",
    "river",
    "lake",
    "pond",
    "bridge",
    "road",
    "highway",
    "car",
    "truck",
    "parking",
    "lot",
    "building",
    "house",
    "roof",
    "residential",
    "dense",
    "sparse",
    "industrial",
    "factory",
    "tank",
    "farmland",
    "field",
    "crop",
    "meadow",
    "grass",
    "desert",
    "sand",
    "dune",
    "mountain",
    "hill",
    "beach",
    "sea",
    "wave",
    "island",
    "church",
    "school",
    "playground",
    "stadium",
    "track",
    "court",
    "tennis",
    "baseball",
    "pool",
    "park",
    "square",
    "railway",
    "station",
    "train",
    "viaduct",
    "overpass",
    "intersection",
    "roundabout",
    "center",
    "commercial",
    "storage",
    "warehouse",
    "bareland",
    "wetland",
    "village",
    "white",
    "red",
    "green",
    "blue",
    "gray",
    "large",
    "small",
    "long",
    "wide",
    "narrow",
    "curved",
    "straight",
    "many",
    "few",
    "two",
    "three",
    "several",
    "near",
    "beside",
    "along",
    "between",
    "around",
    "left",
    "right",
    "north",
    "south",
    "east",
    "west",
    "middle",
    "edge",
];

pub const KINDS: [VariantKind; 5] = [
    VariantKind::Summary,
    VariantKind::FeatureList,
    VariantKind::Detailed,
    VariantKind::Other,
    VariantKind::Other,
];

pub fn entry(id: &str, texts: [String; 5]) -> CorpusEntry {
    CorpusEntry {
        record: ImageRecord {
            image_id: id.to_owned(),
            source_dataset: SourceDataset::Rsitmd,
            split: Split::Test,
            image_path: Some(format!("images/{id}.png")),
            meta: None,
        },
        captions: CaptionSet {
            image_id: id.to_owned(),
            variants: texts
                .into_iter()
                .zip(KINDS)
                .enumerate()
                .map(|(i, (text, kind))| CaptionVariant {
                    variant_id: i as u8 + 1,
                    kind,
                    text,
                })
                .collect(),
        },
    }
}

fn sentence(rng: &mut ChaCha8Rng, tag: &str) -> String {
    let n = rng.random_range(5..12);
    let mut words: Vec<&str> = (0..n)
        .map(|_| WORDS[rng.random_range(0..WORDS.len())])
        .collect();
    words.insert(rng.random_range(0..=words.len()), tag);
    let mut s = words.join(" ");
    s.push('.');
    s
}

/// `n` images, each variant mixing a per-image tag with random shared words.
pub fn synthetic_corpus(n: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = (0..n)
        .map(|i| {
            let id = format!("img{i:05}");
            let tag = format!("tag{i}z");
            let texts: [String; 5] = std::array::from_fn(|_| {
                let k = rng.random_range(1..4);
                (0..k)
                    .map(|_| sentence(&mut rng, &tag))
                    .collect::<Vec<_>>()
                    .join(" ")
            });
            entry(&id, texts)
        })
        .collect();
    Corpus::new(entries, BTreeMap::new()).unwrap()
}

/// Random index with components uniform in [-1, 1]; some images repeat an
/// earlier image's block so that exact ties occur.
pub fn random_index(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> VectorIndex<f64> {
    let mut flat: Vec<f64> = Vec::with_capacity(n * 5 * dim);
    for i in 0..n {
        if i > 0 && rng.random_bool(0.05) {
            let src = rng.random_range(0..i);
            let block = flat[src * 5 * dim..(src + 1) * 5 * dim].to_vec();
            flat.extend(block);
        } else {
            flat.extend((0..5 * dim).map(|_| rng.random_range(-1.0..1.0)));
        }
    }
    let ids = (0..n).map(|i| format!("r{i}")).collect();
    VectorIndex::from_vectors("random", dim, ids, &flat).unwrap()
}

pub fn random_query(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        if v.iter().any(|x| x.abs() > 1e-3) {
            return v;
        }
    }
}

fn naive_cos(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for i in 0..a.len() {
        ab += a[i] * b[i];
    }
    for x in a {
        aa += x * x;
    }
    for x in b {
        bb += x * x;
    }
    (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0)
}

/// Full double-loop scan: every image, every variant, then a stable sort by
/// descending score with ascending ordinal on ties.
pub fn oracle_rank(index: &VectorIndex<f64>, query: &[f64]) -> Vec<(String, f64, u8)> {
    let mut all = Vec::new();
    for (ordinal, id) in index.image_ids().iter().enumerate() {
        let mut best = f64::NEG_INFINITY;
        let mut best_v = 0u8;
        for v in 1..=5u8 {
            let s = naive_cos(query, index.vector(ordinal, v));
            if s > best {
                best = s;
                best_v = v;
            }
        }
        all.push((id.clone(), best, best_v));
    }
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    all
}

/// Independent FNV-1a-64 bag-of-tokens cosine.
pub fn oracle_bag_cosine(a: &str, b: &str, dim: usize) -> f64 {
    fn counts(text: &str, dim: usize) -> Vec<f64> {
        let mut c = vec![0.0; dim];
        let lower = text.to_lowercase();
        let mut token = String::new();
        let flush = |token: &mut String, c: &mut Vec<f64>| {
            if !token.is_empty() {
                let mut h: u64 = 14695981039346656037;
                for byte in token.bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(1099511628211);
                }
                c[(h % dim as u64) as usize] += 1.0;
                token.clear();
            }
        };
        for ch in lower.chars() {
            if ch.is_alphanumeric() {
                token.push(ch);
            } else {
                flush(&mut token, &mut c);
            }
        }
        flush(&mut token, &mut c);
        c
    }
    naive_cos(&counts(a, dim), &counts(b, dim))
}
