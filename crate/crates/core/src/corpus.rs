//! Byte-level tokenization, corpus ingestion and the bundled synthetic corpus.
//!
//! Tokens 0..=255 are raw bytes; 256/257/258 are BOS/EOS/PAD.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
pub const VOCAB_SIZE: usize = 259;

/// Size the bundled corpus is grown to.
pub const BUNDLED_MIN_BYTES: usize = 1_050_000;
const BUNDLED_SEED: u64 = 0x4854_4331;

pub fn encode(text: &[u8]) -> Vec<u32> {
    text.iter().map(|&b| u32::from(b)).collect()
}

/// Bytes back to text; special tokens are dropped.
pub fn decode(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Concatenates every regular file under `dir` (sorted by path), each
/// followed by EOS.
pub fn ingest_dir(dir: impl AsRef<Path>) -> Result<Vec<u32>> {
    let mut files = Vec::new();
    collect_files(dir.as_ref(), &mut files)?;
    files.sort();
    if files.is_empty() {
        return Err(Error::Invalid(format!("no files under {}", dir.as_ref().display())));
    }
    let mut tokens = Vec::new();
    for f in files {
        let bytes = fs::read(&f).map_err(|e| Error::path(&f, e))?;
        tokens.extend(encode(&bytes));
        tokens.push(EOS);
    }
    Ok(tokens)
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::path(dir, e))? {
        let path = entry.map_err(|e| Error::path(dir, e))?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else if path.is_file() {
            out.push(path);
        }
    }
    Ok(())
}

/// Tokens of the bundled corpus: documents separated by EOS.
pub fn bundled_tokens() -> Vec<u32> {
    let mut tokens = Vec::new();
    for doc in bundled_documents() {
        tokens.extend(encode(doc.as_bytes()));
        tokens.push(EOS);
    }
    tokens
}

/// Bundled corpus as plain text, documents separated by blank lines.
pub fn bundled_text() -> String {
    bundled_documents().join("\n\n")
}

/// Splits off the trailing `fraction` as a held-out shard.
pub fn split_heldout(tokens: &[u32], fraction: f64) -> (&[u32], &[u32]) {
    let held = ((tokens.len() as f64) * fraction.clamp(0.0, 1.0)).round() as usize;
    tokens.split_at(tokens.len() - held)
}

const NAMES: &[&str] = &[
    "Alice", "Bruno", "Chen", "Dara", "Elena", "Farid", "Grace", "Hugo", "Ines", "Jonas", "Kira", "Liam", "Maya", "Nadia", "Omar", "Priya",
    "Quinn", "Rosa", "Sami", "Tara",
];
const ANIMALS: &[&str] = &["cat", "dog", "fox", "owl", "horse", "rabbit", "goat", "sparrow", "otter", "turtle"];
const ITEMS: &[&str] = &[
    "apples", "books", "pencils", "marbles", "cookies", "stamps", "coins", "shells", "cards", "eggs",
];
const ADJECTIVES: &[&str] = &[
    "quiet", "bright", "small", "old", "green", "busy", "gentle", "tall", "warm", "curious",
];
const PLACES: &[&str] = &[
    "garden", "market", "library", "river", "station", "kitchen", "forest", "harbor", "school", "village",
];
const VERBS: &[(&str, &str)] = &[
    ("walks", "walked"),
    ("reads", "read"),
    ("sings", "sang"),
    ("waits", "waited"),
    ("works", "worked"),
    ("plays", "played"),
    ("rests", "rested"),
    ("paints", "painted"),
];
const COUNTRIES: &[(&str, &str, &str)] = &[
    ("France", "Paris", "French"),
    ("Spain", "Madrid", "Spanish"),
    ("Italy", "Rome", "Italian"),
    ("Japan", "Tokyo", "Japanese"),
    ("Egypt", "Cairo", "Arabic"),
    ("Brazil", "Brasilia", "Portuguese"),
    ("Kenya", "Nairobi", "Swahili"),
    ("Canada", "Ottawa", "English"),
    ("Norway", "Oslo", "Norwegian"),
    ("Peru", "Lima", "Spanish"),
    ("Greece", "Athens", "Greek"),
    ("Poland", "Warsaw", "Polish"),
];
const WEEKDAYS: &[&str] = &["Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday", "Sunday"];

fn pick<'a, R: Rng>(rng: &mut R, xs: &'a [&'a str]) -> &'a str {
    xs.choose(rng).copied().unwrap_or("")
}

fn story<R: Rng>(rng: &mut R) -> String {
    let name = pick(rng, NAMES);
    let animal = pick(rng, ANIMALS);
    let place = pick(rng, PLACES);
    let adj = pick(rng, ADJECTIVES);
    let day = pick(rng, WEEKDAYS);
    let (verb, past) = VERBS[rng.random_range(0..VERBS.len())];
    let mut s = format!("On {day}, {name} went to the {adj} {place} with a {animal}. ");
    let n = rng.random_range(2..5);
    for _ in 0..n {
        let other = pick(rng, NAMES);
        let place2 = pick(rng, PLACES);
        match rng.random_range(0..4) {
            0 => s += &format!("The {animal} {verb} near the {place2}. "),
            1 => s += &format!("{name} {past} with {other} at the {place2}. "),
            2 => s += &format!("{other} said that the {place} was very {}. ", pick(rng, ADJECTIVES)),
            _ => s += &format!("Then the {animal} and {name} {past} until the evening. "),
        }
    }
    s += &format!("In the end, {name} and the {animal} went home from the {place}.");
    s
}

fn arithmetic<R: Rng>(rng: &mut R) -> String {
    let name = pick(rng, NAMES);
    let item = pick(rng, ITEMS);
    let a = rng.random_range(2..60);
    let b = rng.random_range(1..40);
    if rng.random_bool(0.5) {
        format!(
            "Question: {name} has {a} {item}. {name} buys {b} more {item}. How many {item} does {name} have now?\nAnswer: {name} has {a} + {b} = {} {item}. The answer is {}.",
            a + b,
            a + b
        )
    } else {
        let (hi, lo) = (a.max(b), a.min(b));
        format!(
            "Question: {name} has {hi} {item}. {name} gives away {lo} {item}. How many {item} are left?\nAnswer: {name} has {hi} - {lo} = {} {item} left. The answer is {}.",
            hi - lo,
            hi - lo
        )
    }
}

fn facts<R: Rng>(rng: &mut R) -> String {
    let mut lines = Vec::new();
    for _ in 0..rng.random_range(2..5) {
        let (country, capital, language) = COUNTRIES[rng.random_range(0..COUNTRIES.len())];
        lines.push(match rng.random_range(0..3) {
            0 => format!("The capital of {country} is {capital}."),
            1 => format!("People in {country} often speak {language}."),
            _ => format!("country: {country}; capital: {capital}; language: {language};"),
        });
    }
    lines.join("\n")
}

fn summary<R: Rng>(rng: &mut R) -> String {
    let name = pick(rng, NAMES);
    let place = pick(rng, PLACES);
    let adj = pick(rng, ADJECTIVES);
    let (_, past) = VERBS[rng.random_range(0..VERBS.len())];
    format!(
        "Article: The {place} in the village was {adj} this week. {name} {past} there every morning and met many friends. Many people said the {place} was the best place to spend the day.\nSummary: {name} {past} at the {adj} {place} every morning."
    )
}

fn bundled_documents() -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(BUNDLED_SEED);
    let mut docs = Vec::new();
    let mut size = 0;
    while size < BUNDLED_MIN_BYTES {
        let doc = match rng.random_range(0..4) {
            0 => story(&mut rng),
            1 => arithmetic(&mut rng),
            2 => facts(&mut rng),
            _ => summary(&mut rng),
        };
        size += doc.len() + 1;
        docs.push(doc);
    }
    docs
}
