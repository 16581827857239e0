//! Stochastic template grammars standing in for real layout corpora.
//!
//! Every profile has at least one point where the same partial layout admits
//! two distinct placements, so a single regression head would average them.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::types::{Canvas, CategoryVocabulary, Layout, LayoutObject};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    SingleColumnDoc,
    DoubleColumnDoc,
    MobileApp,
}

pub const DOC_CATEGORIES: [&str; 5] = ["text", "title", "figure", "table", "list"];
pub const MOBILE_CATEGORIES: [&str; 13] = [
    "toolbar",
    "image",
    "text",
    "icon",
    "button",
    "input",
    "list_item",
    "advertisement",
    "page_indicator",
    "web_view",
    "background_image",
    "drawer",
    "modal",
];

const TEXT: usize = 0;
const TITLE: usize = 1;
const FIGURE: usize = 2;

const M_TOOLBAR: usize = 0;
const M_IMAGE: usize = 1;
const M_TEXT: usize = 2;
const M_BUTTON: usize = 4;
const M_INPUT: usize = 5;
const M_LIST_ITEM: usize = 6;

impl Profile {
    pub const ALL: [Profile; 3] = [
        Profile::SingleColumnDoc,
        Profile::DoubleColumnDoc,
        Profile::MobileApp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Profile::SingleColumnDoc => "single-column-doc",
            Profile::DoubleColumnDoc => "double-column-doc",
            Profile::MobileApp => "mobile-app",
        }
    }

    pub fn vocabulary(self) -> CategoryVocabulary {
        let names: &[&str] = match self {
            Profile::SingleColumnDoc | Profile::DoubleColumnDoc => &DOC_CATEGORIES,
            Profile::MobileApp => &MOBILE_CATEGORIES,
        };
        CategoryVocabulary::new(names.iter().copied()).expect("static vocabulary")
    }

    pub fn canvas(self) -> Canvas {
        match self {
            Profile::MobileApp => Canvas { aspect: 0.5625 },
            _ => Canvas { aspect: 0.7727 },
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Profile::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown profile `{s}`")))
    }
}

/// `n` layouts drawn deterministically from `seed`.
pub fn synth_grammar(seed: u64, n: usize, profile: Profile) -> Vec<Layout> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let objects = match profile {
                Profile::SingleColumnDoc => single_column(&mut rng),
                Profile::DoubleColumnDoc => double_column(&mut rng),
                Profile::MobileApp => mobile_app(&mut rng),
            };
            Layout::new(objects, profile.canvas(), profile.name())
        })
        .collect()
}

fn jit(rng: &mut impl Rng, amp: f64) -> f64 {
    rng.gen_range(-amp..=amp)
}

/// Title, text, a figure that is either wide and short or narrow and tall, text.
fn single_column(rng: &mut impl Rng) -> Vec<LayoutObject> {
    let title = [0.1 + jit(rng, 0.005), 0.05 + jit(rng, 0.005), 0.8, 0.06];
    let text_y = 0.15 + jit(rng, 0.005);
    let text_h = 0.2 + jit(rng, 0.005);
    let fig_y = text_y + text_h + 0.03;
    let figure = if rng.gen_bool(0.5) {
        [0.1 + jit(rng, 0.005), fig_y, 0.8, 0.3 + jit(rng, 0.005)]
    } else {
        [0.3 + jit(rng, 0.005), fig_y, 0.4, 0.4 + jit(rng, 0.005)]
    };
    let tail_y = figure[1] + figure[3] + 0.03;
    vec![
        LayoutObject::new(TITLE, title),
        LayoutObject::new(TEXT, [0.1, text_y, 0.8, text_h]),
        LayoutObject::new(FIGURE, figure),
        LayoutObject::new(TEXT, [0.1, tail_y, 0.8, 0.12]),
    ]
}

/// Title then three two-column bands. The figure is either top-right (first
/// band tall) or bottom-left (last band tall); the other two bands hold
/// side-by-side text blocks.
fn double_column(rng: &mut impl Rng) -> Vec<LayoutObject> {
    const TALL: f64 = 0.34;
    const SHORT: f64 = 0.2;
    const GAP: f64 = 0.03;
    let figure_top = rng.gen_bool(0.5);

    let title = [0.05 + jit(rng, 0.004), 0.04 + jit(rng, 0.004), 0.9, 0.06];
    let mut objects = vec![LayoutObject::new(TITLE, title)];
    let mut top = title[1] + title[3] + GAP;
    for band in 0..3 {
        let tall = (figure_top && band == 0) || (!figure_top && band == 2);
        let h = if tall { TALL } else { SHORT } + jit(rng, 0.01);
        let left = [0.05 + jit(rng, 0.004), top, 0.42 + jit(rng, 0.004), h];
        let right = [0.53 + jit(rng, 0.004), top, 0.42 + jit(rng, 0.004), h];
        let (lc, rc) = match (tall, figure_top) {
            (true, true) => (TEXT, FIGURE),
            (true, false) => (FIGURE, TEXT),
            _ => (TEXT, TEXT),
        };
        objects.push(LayoutObject::new(lc, left));
        objects.push(LayoutObject::new(rc, right));
        top += h + GAP;
    }
    objects
}

/// Toolbar pinned at the top, then either a hero image or a search input,
/// a run of list items and sometimes a bottom button.
fn mobile_app(rng: &mut impl Rng) -> Vec<LayoutObject> {
    let bar_h = 0.08;
    let mut objects = vec![LayoutObject::new(M_TOOLBAR, [0.0, 0.0, 1.0, bar_h])];
    let mut top = bar_h + 0.01;
    if rng.gen_bool(0.5) {
        let h = 0.3 + jit(rng, 0.01);
        objects.push(LayoutObject::new(M_IMAGE, [0.0, top, 1.0, h]));
        top += h + 0.01;
        objects.push(LayoutObject::new(M_TEXT, [0.05, top, 0.9, 0.06]));
        top += 0.07;
    } else {
        objects.push(LayoutObject::new(M_INPUT, [0.05, top + 0.01, 0.9, 0.06]));
        top += 0.09;
    }
    let items = rng.gen_range(2..=4);
    for _ in 0..items {
        let h = 0.1 + jit(rng, 0.005);
        objects.push(LayoutObject::new(M_LIST_ITEM, [0.0, top, 1.0, h]));
        top += h + 0.005;
    }
    if rng.gen_bool(0.5) && top < 0.85 {
        objects.push(LayoutObject::new(M_BUTTON, [0.25, 0.88, 0.5, 0.07]));
    }
    objects
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::order::reading_order;
    use crate::layout::types::DEFAULT_MAX_OBJECTS;

    #[test]
    fn deterministic_and_valid() {
        for p in Profile::ALL {
            let a = synth_grammar(7, 100, p);
            assert_eq!(a.len(), 100);
            assert_eq!(a, synth_grammar(7, 100, p));
            let vocab = p.vocabulary();
            for l in &a {
                l.validate(DEFAULT_MAX_OBJECTS, vocab.len()).unwrap();
                assert_eq!(&reading_order(l, 0.02), l, "{p} not in reading order");
            }
        }
    }

    #[test]
    fn double_column_has_two_text_bands() {
        for l in synth_grammar(3, 200, Profile::DoubleColumnDoc) {
            let pairs = l.objects[1..]
                .chunks(2)
                .filter(|b| {
                    b[0].category == TEXT
                        && b[1].category == TEXT
                        && b[0].y() == b[1].y()
                        && b[0].x() < b[1].x()
                })
                .count();
            assert_eq!(pairs, 2);
        }
    }

    #[test]
    fn double_column_modes_balanced() {
        let layouts = synth_grammar(11, 1000, Profile::DoubleColumnDoc);
        let top = layouts.iter().filter(|l| l.objects[2].category == FIGURE).count();
        assert!((400..=600).contains(&top), "{top}");
    }

    #[test]
    fn mobile_starts_with_toolbar() {
        for l in synth_grammar(5, 200, Profile::MobileApp) {
            assert_eq!(l.objects[0].category, M_TOOLBAR);
            assert!(l.objects[0].y().abs() < 1e-9);
        }
    }

    #[test]
    fn profile_parsing() {
        assert_eq!("mobile-app".parse::<Profile>().unwrap(), Profile::MobileApp);
        assert!("poster".parse::<Profile>().is_err());
    }
}
