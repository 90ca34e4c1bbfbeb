//! Seeded synthetic image-caption data for desk-scale training.
//!
//! Each caption describes one scene: its content words come mostly from that
//! scene's word lists, so words co-occur topically as in real captions. Each
//! content word owns a random feature vector; a caption's visual target is the
//! tanh of the mean feature of its content words.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

const DETERMINERS: &[&str] = &["a", "the", "two", "some"];
const ADJECTIVES: &[&str] = &[
    "red", "blue", "green", "white", "black", "yellow", "small", "large", "old", "young", "wooden", "tall", "brown", "empty",
];
const NOUNS: &[&str] = &[
    "dog", "cat", "man", "woman", "child", "horse", "bird", "cow", "sheep", "elephant", "giraffe", "zebra", "bear",
    "pizza", "sandwich", "cake", "banana", "apple", "donut", "plate", "bowl", "cup", "car", "bus", "train", "truck",
    "bike", "boat", "plane", "kite", "ball", "umbrella", "clock", "laptop", "phone", "chair", "bench", "sign",
    "skateboard", "surfboard",
];
const VERBS: &[&str] = &[
    "sits", "stands", "eats", "holds", "rides", "walks", "runs", "lies", "flies", "waits", "plays", "looks", "parks",
];
const PREPOSITIONS: &[&str] = &["on", "in", "near", "under", "beside", "behind", "with", "at"];
const PLACES: &[&str] = &[
    "table", "street", "field", "kitchen", "beach", "road", "grass", "water", "snow", "park", "room", "sky", "station",
];
const GLUE: &[&str] = &["and", "of", "is", "are", "next", "to", "while"];

/// Topical word lists; every entry is also in the global lists above.
struct Scene {
    adjectives: &'static [&'static str],
    nouns: &'static [&'static str],
    verbs: &'static [&'static str],
    places: &'static [&'static str],
}

const SCENES: &[Scene] = &[
    Scene {
        adjectives: &["red", "green", "yellow", "small", "large", "empty", "white"],
        nouns: &["pizza", "sandwich", "cake", "banana", "apple", "donut", "plate", "bowl", "cup"],
        verbs: &["sits", "eats", "holds", "lies"],
        places: &["table", "kitchen", "room"],
    },
    Scene {
        adjectives: &["red", "blue", "black", "white", "old", "tall", "large"],
        nouns: &["car", "bus", "train", "truck", "bike", "sign", "clock", "man", "woman"],
        verbs: &["parks", "waits", "rides", "stands", "walks"],
        places: &["street", "road", "station"],
    },
    Scene {
        adjectives: &["young", "small", "large", "brown", "black", "white", "tall"],
        nouns: &["dog", "cat", "horse", "bird", "cow", "sheep", "elephant", "giraffe", "zebra", "bear"],
        verbs: &["runs", "walks", "stands", "eats", "lies", "looks"],
        places: &["field", "grass", "park", "snow"],
    },
    Scene {
        adjectives: &["blue", "yellow", "young", "wooden", "tall"],
        nouns: &["boat", "kite", "ball", "surfboard", "skateboard", "umbrella", "child", "plane"],
        verbs: &["flies", "rides", "plays", "runs", "holds"],
        places: &["beach", "water", "sky"],
    },
    Scene {
        adjectives: &["wooden", "old", "empty", "small", "white", "black"],
        nouns: &["laptop", "phone", "chair", "bench", "clock", "cup", "cat", "child"],
        verbs: &["sits", "looks", "lies", "holds", "waits", "plays"],
        places: &["room", "kitchen", "table"],
    },
];

/// Probability that a content word is drawn from the caption's scene.
const ON_TOPIC: f64 = 0.85;

/// Every word the generator can emit, in vocabulary order.
pub fn lexicon() -> Vec<&'static str> {
    [DETERMINERS, ADJECTIVES, NOUNS, VERBS, PREPOSITIONS, PLACES, GLUE].concat()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub sentences: usize,
    pub visual: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { sentences: 2000, visual: 8, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub vocab: Vocabulary,
    pub captions: Vec<String>,
    pub sequences: Vec<Vec<usize>>,
    pub visual: Vec<Vec<f64>>,
}

impl SynthCorpus {
    /// Captions one per line, newline-terminated.
    pub fn caption_text(&self) -> String {
        self.captions.iter().map(|c| format!("{c}\n")).collect()
    }
}

fn caption<R: Rng>(rng: &mut R) -> Vec<&'static str> {
    let scene = SCENES.choose(rng).expect("nonempty scene list");
    let pick = |rng: &mut R, xs: &[&'static str]| *xs.choose(rng).expect("nonempty word list");
    let topical = |rng: &mut R, local: &[&'static str], global: &[&'static str]| {
        let xs = if rng.random_bool(ON_TOPIC) { local } else { global };
        *xs.choose(rng).expect("nonempty word list")
    };
    let adj = |rng: &mut R| topical(rng, scene.adjectives, ADJECTIVES);
    let noun = |rng: &mut R| topical(rng, scene.nouns, NOUNS);
    let verb = |rng: &mut R| topical(rng, scene.verbs, VERBS);
    let place = |rng: &mut R| topical(rng, scene.places, PLACES);
    let mut out = Vec::new();
    match rng.random_range(0..5) {
        0 => {
            // det adj noun verb prep det place
            out.extend([pick(rng, DETERMINERS), adj(rng), noun(rng), verb(rng)]);
            out.extend([pick(rng, PREPOSITIONS), "the", place(rng)]);
        }
        1 => {
            // det noun and det noun prep det place
            out.extend([pick(rng, DETERMINERS), noun(rng), "and", pick(rng, DETERMINERS), noun(rng)]);
            out.extend([pick(rng, PREPOSITIONS), "a", place(rng)]);
        }
        2 => {
            // det noun verb next to det adj noun
            out.extend([pick(rng, DETERMINERS), noun(rng), verb(rng), "next", "to"]);
            out.extend([pick(rng, DETERMINERS), adj(rng), noun(rng)]);
        }
        3 => {
            // det adj plate of noun and noun
            out.extend([pick(rng, DETERMINERS), adj(rng), "plate", "of", noun(rng)]);
            out.extend(["and", noun(rng)]);
        }
        _ => {
            // det noun verb while det noun verb prep place
            out.extend([pick(rng, DETERMINERS), noun(rng), verb(rng), "while"]);
            out.extend([pick(rng, DETERMINERS), noun(rng), verb(rng), pick(rng, PREPOSITIONS)]);
            out.push(place(rng));
        }
    }
    out
}

/// Deterministic in `cfg`.
pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    if cfg.sentences == 0 || cfg.visual == 0 {
        return Err(Error::InvalidArgument("synthetic corpus needs sentences and visual width".into()));
    }
    let words = lexicon();
    let vocab = Vocabulary::new(words.iter().copied())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Row per vocabulary index; function words keep a zero feature.
    let content: Vec<&str> = [ADJECTIVES, NOUNS, VERBS, PLACES].concat();
    let features: Vec<Vec<f64>> = (0..vocab.len())
        .map(|i| {
            let tok = vocab.token(i).unwrap_or("");
            if content.contains(&tok) {
                (0..cfg.visual).map(|_| StandardNormal.sample(&mut rng)).collect()
            } else {
                vec![0.0; cfg.visual]
            }
        })
        .collect();

    let mut captions = Vec::with_capacity(cfg.sentences);
    let mut sequences = Vec::with_capacity(cfg.sentences);
    let mut visual = Vec::with_capacity(cfg.sentences);
    for _ in 0..cfg.sentences {
        let toks = caption(&mut rng);
        let seq: Vec<usize> = toks.iter().map(|t| vocab.index(t).expect("lexicon word")).collect();
        let mut v = vec![0.0; cfg.visual];
        let mut count = 0usize;
        for &i in &seq {
            if content.contains(&vocab.token(i).unwrap_or("")) {
                count += 1;
                for (acc, f) in v.iter_mut().zip(&features[i]) {
                    *acc += f;
                }
            }
        }
        let scale = 1.0 / count.max(1) as f64;
        visual.push(v.into_iter().map(|x| (x * scale).tanh()).collect());
        captions.push(toks.join(" "));
        sequences.push(seq);
    }
    Ok(SynthCorpus { vocab, captions, sequences, visual })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_is_one_hundred_with_padding() {
        let words = lexicon();
        let mut sorted = words.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), words.len(), "duplicate lexicon entries");
        assert_eq!(words.len() + 1, 100);
    }

    #[test]
    fn scenes_use_lexicon_words() {
        let words = lexicon();
        for scene in SCENES {
            for w in [scene.adjectives, scene.nouns, scene.verbs, scene.places].concat() {
                assert!(words.contains(&w), "{w}");
            }
        }
    }

    #[test]
    fn deterministic_and_consistent() {
        let cfg = SynthConfig { sentences: 50, visual: 4, seed: 3 };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.captions, b.captions);
        assert_eq!(a.visual, b.visual);
        for (c, s) in a.captions.iter().zip(&a.sequences) {
            assert_eq!(&a.vocab.render(s), c);
            assert!(s.len() >= 7);
        }
        assert!(a.visual.iter().flatten().all(|v| v.abs() < 1.0));
    }
}
