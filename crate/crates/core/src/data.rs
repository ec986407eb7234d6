//! Examples, annotator label aggregation and seeded 8:1:1 splits.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::rng::{self, tag};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    Negative = 0,
    Neutral = 1,
    Positive = 2,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Negative, Label::Neutral, Label::Positive];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Label::ALL.get(i).copied()
    }
}

impl TryFrom<u8> for Label {
    type Error = Error;

    fn try_from(v: u8) -> Result<Label> {
        Label::from_index(v as usize).ok_or(Error::ClassOutOfRange {
            value: v as usize,
            classes: 3,
        })
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l as u8
    }
}

impl core::fmt::Display for Label {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            Label::Negative => "negative",
            Label::Neutral => "neutral",
            Label::Positive => "positive",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultimodalExample {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    pub label: Label,
    pub image_path: String,
}

/// One annotator's text and image sentiment for a post.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AnnotatedPair {
    pub text: Label,
    pub image: Label,
}

impl AnnotatedPair {
    /// Agreement keeps the label, a neutral side defers to the other side,
    /// and positive against negative discards the vote.
    pub fn merged(self) -> Option<Label> {
        use Label::*;
        match (self.text, self.image) {
            (a, b) if a == b => Some(a),
            (Neutral, x) | (x, Neutral) => Some(x),
            _ => None,
        }
    }
}

/// Merges each annotator's pair, then keeps a label only if more than half of
/// the annotators voted for it.
pub fn aggregate_labels(annotators: &[AnnotatedPair]) -> Option<Label> {
    let mut votes = [0usize; 3];
    for v in annotators.iter().filter_map(|a| a.merged()) {
        votes[v.index()] += 1;
    }
    Label::ALL
        .into_iter()
        .find(|l| 2 * votes[l.index()] > annotators.len())
}

/// Sizes of the validation and test splits for `n` examples.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let held = n / 10;
    (n - 2 * held, held, held)
}

/// Seeded shuffle into `(train, val, test)`; validation and test each get
/// `floor(n / 10)` items.
pub fn split<T>(items: Vec<T>, seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let n = items.len();
    if n < 10 {
        return Err(Error::TooFewExamples { min: 10, got: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[tag::SPLIT]));
    let (_, n_val, _) = split_sizes(n);
    let mut slots: Vec<Option<T>> = items.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<T> { idx.iter().map(|&i| slots[i].take().expect("each index once")).collect() };
    let val = take(&order[..n_val]);
    let test = take(&order[n_val..2 * n_val]);
    let train = take(&order[2 * n_val..]);
    Ok((train, val, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;
    use Label::*;

    fn pair(text: Label, image: Label) -> AnnotatedPair {
        AnnotatedPair { text, image }
    }

    #[test]
    fn merge_and_vote() {
        assert_eq!(aggregate_labels(&[pair(Positive, Positive)]), Some(Positive));
        assert_eq!(aggregate_labels(&[pair(Positive, Negative)]), None);
        assert_eq!(aggregate_labels(&[pair(Neutral, Negative)]), Some(Negative));
        let three = [pair(Positive, Neutral), pair(Positive, Positive), pair(Negative, Neutral)];
        assert_eq!(aggregate_labels(&three), Some(Positive));
        let split_vote = [pair(Positive, Positive), pair(Negative, Negative), pair(Neutral, Neutral)];
        assert_eq!(aggregate_labels(&split_vote), None);
        let discarded = [pair(Positive, Negative); 3];
        assert_eq!(aggregate_labels(&discarded), None);
    }

    #[test]
    fn split_sizes_follow_floor_rule() {
        let (tr, va, te) = split((0..10).collect::<Vec<_>>(), 0).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (8, 1, 1));
        let (tr, va, te) = split((0..25).collect::<Vec<_>>(), 0).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (21, 2, 2));
        assert_eq!(split((0..9).collect::<Vec<_>>(), 0), Err(Error::TooFewExamples { min: 10, got: 9 }));
    }

    #[test]
    fn labels_serialize_as_integers() {
        assert_eq!(Label::try_from(2u8), Ok(Positive));
        assert!(Label::try_from(3u8).is_err());
        assert_eq!(u8::from(Neutral), 1);
    }

    proptest! {
        #[test]
        fn split_is_a_seeded_partition(n in 10usize..200, seed in any::<u64>()) {
            let a = split((0..n).collect::<Vec<_>>(), seed).unwrap();
            let b = split((0..n).collect::<Vec<_>>(), seed).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.1.len(), n / 10);
            prop_assert_eq!(a.2.len(), n / 10);
            let mut all: Vec<usize> = a.0.iter().chain(&a.1).chain(&a.2).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn no_label_when_every_vote_is_discarded(k in prop::sample::select(vec![1usize, 3])) {
            let votes = alloc::vec![pair(Negative, Positive); k];
            prop_assert_eq!(aggregate_labels(&votes), None);
        }
    }
}
