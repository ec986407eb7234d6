//! Synthetic keyword-and-colour sentiment data.
//!
//! Each example reads `<name> <filler> <keyword> <filler>` about the target
//! `<name>` over a noisy solid-colour image. A polar keyword decides the
//! label by itself; with a neutral keyword the colour decides it (red
//! negative, grey neutral, green positive). Labels are balanced.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::Label;
use crate::image::RgbImage;
use crate::rng::{self, tag};
use crate::{Error, Result};

pub const NEGATIVE_WORDS: [&str; 24] = [
    "awful", "broken", "sad", "terrible", "angry", "worst", "gloomy", "ruined", "horrible", "dreadful", "miserable",
    "bitter", "hopeless", "nasty", "painful", "upset", "furious", "grim", "lousy", "tragic", "dismal", "hateful",
    "wretched", "bleak",
];
pub const POSITIVE_WORDS: [&str; 24] = [
    "great", "happy", "lovely", "superb", "joyful", "best", "bright", "thrilled", "wonderful", "cheerful", "delighted",
    "amazing", "glad", "brilliant", "fantastic", "proud", "excellent", "charming", "splendid", "gorgeous", "radiant",
    "blessed", "elated", "marvelous",
];
pub const NEUTRAL_WORDS: [&str; 8] = ["today", "again", "here", "later", "there", "around", "now", "also"];
pub const NAMES: [&str; 8] = ["alice", "bob", "carol", "dave", "erin", "frank", "grace", "heidi"];
pub const FILLERS: [&str; 12] = [
    "says", "thinks", "looks", "feels", "seems", "was", "is", "sounds", "appears", "stays", "got", "became",
];
pub const COLORS: [[u8; 3]; 3] = [[200, 40, 40], [128, 128, 128], [40, 200, 40]];
pub const IMAGE_SIZE: usize = 40;
const NOISE: i16 = 24;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticExample {
    pub id: String,
    pub text: String,
    pub target: String,
    pub label: Label,
    pub image: RgbImage,
    /// Whether the keyword, rather than the colour, determines the label.
    pub keyword_decides: bool,
}

/// Label implied by the generator's rule.
pub fn rule_label(keyword: &str, color: usize) -> Label {
    if NEGATIVE_WORDS.contains(&keyword) {
        Label::Negative
    } else if POSITIVE_WORDS.contains(&keyword) {
        Label::Positive
    } else {
        Label::ALL[color]
    }
}

pub fn make_synthetic_fixture(n: usize, seed: u64) -> Result<Vec<SyntheticExample>> {
    if n < 10 {
        return Err(Error::TooFewExamples { min: 10, got: n });
    }
    let mut labels: Vec<Label> = (0..n).map(|i| Label::ALL[i % 3]).collect();
    labels.shuffle(&mut rng::stream(seed, &[tag::FIXTURE]));
    let mut out = Vec::with_capacity(n);
    for (i, &label) in labels.iter().enumerate() {
        let mut r = rng::stream(seed, &[tag::FIXTURE, i as u64 + 1]);
        let keyword_decides = label != Label::Neutral && r.gen_bool(0.5);
        let (keyword, color) = if keyword_decides {
            let words = if label == Label::Negative {
                &NEGATIVE_WORDS
            } else {
                &POSITIVE_WORDS
            };
            (*words.choose(&mut r).expect("non-empty"), r.gen_range(0..3))
        } else {
            (*NEUTRAL_WORDS.choose(&mut r).expect("non-empty"), label.index())
        };
        let name = *NAMES.choose(&mut r).expect("non-empty");
        let f1 = *FILLERS.choose(&mut r).expect("non-empty");
        let f2 = *FILLERS.choose(&mut r).expect("non-empty");
        let mut data = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE * 3);
        for _ in 0..IMAGE_SIZE * IMAGE_SIZE {
            for &c in &COLORS[color] {
                let v = c as i16 + r.gen_range(-NOISE..=NOISE);
                data.push(v.clamp(0, 255) as u8);
            }
        }
        debug_assert_eq!(rule_label(keyword, color), label);
        out.push(SyntheticExample {
            id: format!("syn{i:05}"),
            text: format!("{name} {f1} {keyword} {f2}"),
            target: String::from(name),
            label,
            image: RgbImage::new(IMAGE_SIZE, IMAGE_SIZE, data)?,
            keyword_decides,
        });
    }
    Ok(out)
}
