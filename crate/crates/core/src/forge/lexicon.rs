//! The fixed keyword lexicon shared by scene forging, keyword extraction and
//! the mock analyzers.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    Weather,
    Foreground,
    Background,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Weather, Category::Foreground, Category::Background];

    pub fn label(self) -> &'static str {
        match self {
            Category::Weather => "Weather",
            Category::Foreground => "Foreground",
            Category::Background => "Background",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.label().eq_ignore_ascii_case(s.trim()))
    }
}

pub struct LexEntry {
    pub keyword: &'static str,
    pub category: Category,
    /// Lowercase surface forms (single words or space-separated phrases).
    pub surfaces: &'static [&'static str],
}

macro_rules! lex {
    ($kw:literal, $cat:ident, [$($s:literal),*]) => {
        LexEntry { keyword: $kw, category: Category::$cat, surfaces: &[$kw, $($s),*] }
    };
}

pub const LEXICON: &[LexEntry] = &[
    lex!("night", Weather, ["nighttime", "dark", "darkness", "unlit"]),
    lex!("low_visibility", Weather, ["low visibility", "reduced visibility", "poor visibility", "visibility"]),
    lex!("rain", Weather, ["rainy", "raining", "rainfall", "downpour"]),
    lex!("fog", Weather, ["foggy", "mist", "haze"]),
    lex!("wet_road", Weather, ["wet road", "wet", "slippery"]),
    lex!("glare", Weather, ["sun glare", "dazzle"]),
    lex!("day", Weather, ["daytime", "daylight"]),
    lex!("clear", Weather, ["sunny", "clear weather"]),
    lex!("pedestrian", Foreground, ["pedestrians", "walker", "person"]),
    lex!("vehicle", Foreground, ["vehicles", "car", "cars", "truck"]),
    lex!("cut_in", Foreground, ["cut in", "cutting in", "cuts in", "cut-in"]),
    lex!("lane_change", Foreground, ["lane change", "changes lane", "merging"]),
    lex!("dense_traffic", Foreground, ["dense traffic", "heavy traffic", "congestion", "dense"]),
    lex!("slow_vehicle", Foreground, ["slow vehicle", "slow car", "slow-moving vehicle"]),
    lex!("stopped_vehicle", Foreground, ["stopped vehicle", "stalled vehicle", "parked car", "stopped car"]),
    lex!("cyclist", Foreground, ["cyclists", "bicycle", "bike"]),
    lex!("sparse", Foreground, ["sparse traffic", "light traffic", "empty road"]),
    lex!("moderate", Foreground, ["moderate traffic"]),
    lex!("barrier", Background, ["barriers", "bollard", "cone", "cones"]),
    lex!("construction", Background, ["construction zone", "roadwork", "roadworks", "work zone"]),
    lex!("crossing", Background, ["crosswalk", "zebra crossing", "pedestrian crossing"]),
    lex!("curb", Background, ["kerb", "curbs"]),
    lex!("road_edge", Background, ["road edge", "roadside", "shoulder", "lane edge", "lane boundary"]),
    lex!("intersection", Background, ["junction", "crossroads"]),
    lex!("lane_follow", Background, ["lane following", "lane keeping", "straight road"]),
];

pub fn entry(keyword: &str) -> Option<&'static LexEntry> {
    LEXICON.iter().find(|e| e.keyword == keyword)
}

pub fn category_of(keyword: &str) -> Option<Category> {
    entry(keyword).map(|e| e.category)
}

pub fn is_keyword(keyword: &str) -> bool {
    entry(keyword).is_some()
}

pub fn vocabulary() -> BTreeSet<&'static str> {
    LEXICON.iter().map(|e| e.keyword).collect()
}

/// Lowercase alphanumeric tokens; `_` and `-` split words.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_ascii_lowercase())
        .collect()
}

/// Longest-match phrase lookup over the lexicon, optionally restricted to
/// some categories. Tokens that start no phrase are skipped.
pub fn extract(text: &str, only: Option<&[Category]>) -> BTreeSet<String> {
    let tokens = tokenize(text);
    let phrases: Vec<(Vec<String>, &LexEntry)> = LEXICON
        .iter()
        .filter(|e| only.is_none_or(|cats| cats.contains(&e.category)))
        .flat_map(|e| e.surfaces.iter().map(move |s| (tokenize(s), e)))
        .collect();
    let max_len = phrases.iter().map(|(p, _)| p.len()).max().unwrap_or(1);
    let mut out = BTreeSet::new();
    let mut i = 0;
    while i < tokens.len() {
        let mut matched = 0;
        for n in (1..=max_len.min(tokens.len() - i)).rev() {
            let window = &tokens[i..i + n];
            if let Some((_, e)) = phrases.iter().find(|(p, _)| p.as_slice() == window) {
                out.insert(e.keyword.to_string());
                matched = n;
                break;
            }
        }
        i += matched.max(1);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phrase_matching_prefers_longest() {
        let kws = extract("heavy rain at night reduced visibility", None);
        let want: BTreeSet<String> = ["rain", "night", "low_visibility"].iter().map(|s| s.to_string()).collect();
        assert_eq!(kws, want);
        let kws = extract("a slow vehicle in dense traffic", None);
        assert!(kws.contains("slow_vehicle") && kws.contains("dense_traffic"));
        assert!(!kws.contains("vehicle"));
    }

    #[test]
    fn category_filter_and_empty_input() {
        assert!(extract("", None).is_empty());
        let kws = extract("pedestrian at night", Some(&[Category::Weather]));
        assert_eq!(kws.into_iter().collect::<Vec<_>>(), vec!["night".to_string()]);
    }

    #[test]
    fn every_surface_maps_back_to_its_keyword() {
        for e in LEXICON {
            for s in e.surfaces {
                assert!(extract(s, None).contains(e.keyword), "{s} -> {}", e.keyword);
            }
        }
    }
}
