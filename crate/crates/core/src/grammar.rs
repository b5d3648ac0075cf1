//! Zone model and the closed prompt grammar.
//!
//! A primary prompt states count and location in report style
//! ("Bilateral pulmonary infection, two infected areas, all left lung and
//! lower right lung."); the auxiliary prompt is a deterministic paraphrase
//! in a different surface register ("Chest image shows opacities in left
//! fields and right lower zone.").

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Zone {
    #[serde(rename = "left upper")]
    LeftUpper,
    #[serde(rename = "left lower")]
    LeftLower,
    #[serde(rename = "right upper")]
    RightUpper,
    #[serde(rename = "right lower")]
    RightLower,
}

pub const ALL_ZONES: [Zone; 4] = [
    Zone::LeftUpper,
    Zone::LeftLower,
    Zone::RightUpper,
    Zone::RightLower,
];

impl Zone {
    pub fn is_left(self) -> bool {
        matches!(self, Zone::LeftUpper | Zone::LeftLower)
    }

    pub fn is_upper(self) -> bool {
        matches!(self, Zone::LeftUpper | Zone::RightUpper)
    }

    pub fn mirrored(self) -> Zone {
        match self {
            Zone::LeftUpper => Zone::RightUpper,
            Zone::LeftLower => Zone::RightLower,
            Zone::RightUpper => Zone::LeftUpper,
            Zone::RightLower => Zone::LeftLower,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Zone::LeftUpper => "left upper",
            Zone::LeftLower => "left lower",
            Zone::RightUpper => "right upper",
            Zone::RightLower => "right lower",
        }
    }
}

fn count_word(n: usize) -> &'static str {
    match n {
        1 => "one",
        2 => "two",
        3 => "three",
        _ => unreachable!("lesion count is 0..=3"),
    }
}

/// Side-merged zone phrases for the primary register
/// ("all left lung" when both left zones are hit, else "upper left lung").
fn primary_phrases(zones: &BTreeSet<Zone>) -> Vec<String> {
    let mut out = Vec::new();
    for (side, upper, lower) in [
        ("left", Zone::LeftUpper, Zone::LeftLower),
        ("right", Zone::RightUpper, Zone::RightLower),
    ] {
        let has_u = zones.contains(&upper);
        let has_l = zones.contains(&lower);
        match (has_u, has_l) {
            (true, true) => out.push(format!("all {side} lung")),
            (true, false) => out.push(format!("upper {side} lung")),
            (false, true) => out.push(format!("lower {side} lung")),
            (false, false) => {}
        }
    }
    out
}

fn auxiliary_phrases(zones: &BTreeSet<Zone>) -> Vec<String> {
    let mut out = Vec::new();
    for (side, upper, lower) in [
        ("left", Zone::LeftUpper, Zone::LeftLower),
        ("right", Zone::RightUpper, Zone::RightLower),
    ] {
        let has_u = zones.contains(&upper);
        let has_l = zones.contains(&lower);
        match (has_u, has_l) {
            (true, true) => out.push(format!("{side} fields")),
            (true, false) => out.push(format!("{side} upper zone")),
            (false, true) => out.push(format!("{side} lower zone")),
            (false, false) => {}
        }
    }
    out
}

pub const HEALTHY_PRIMARY: &str = "No pulmonary infection, both lungs are clear.";
pub const HEALTHY_AUXILIARY: &str = "Chest image shows clear lungs without opacity.";

/// Report-style primary prompt for a lesion zone set.
pub fn generate_primary(zones: &BTreeSet<Zone>) -> String {
    if zones.is_empty() {
        return HEALTHY_PRIMARY.to_string();
    }
    let laterality = {
        let left = zones.iter().any(|z| z.is_left());
        let right = zones.iter().any(|z| !z.is_left());
        if left && right {
            "Bilateral"
        } else {
            "Unilateral"
        }
    };
    let area = if zones.len() == 1 { "area" } else { "areas" };
    format!(
        "{laterality} pulmonary infection, {} infected {area}, {}.",
        count_word(zones.len()),
        primary_phrases(zones).join(" and ")
    )
}

/// Clinical-style paraphrase of the same zone set, distinct in surface form
/// from the primary prompt.
pub fn generate_auxiliary(zones: &BTreeSet<Zone>) -> String {
    if zones.is_empty() {
        return HEALTHY_AUXILIARY.to_string();
    }
    format!(
        "Chest image shows opacities in {}.",
        auxiliary_phrases(zones).join(" and ")
    )
}

/// Re-derive the zone set named by a primary prompt. Inverse of
/// [`generate_primary`] on the grammar's image.
pub fn parse_primary_zones(primary: &str) -> BTreeSet<Zone> {
    let text = primary.to_lowercase();
    let mut zones = BTreeSet::new();
    for (side, upper, lower) in [
        ("left", Zone::LeftUpper, Zone::LeftLower),
        ("right", Zone::RightUpper, Zone::RightLower),
    ] {
        if text.contains(&format!("all {side} lung")) {
            zones.insert(upper);
            zones.insert(lower);
        }
        if text.contains(&format!("upper {side} lung")) {
            zones.insert(upper);
        }
        if text.contains(&format!("lower {side} lung")) {
            zones.insert(lower);
        }
    }
    zones
}

/// Every zone set the generator can emit (all subsets of at most 3 zones,
/// plus the empty healthy case).
pub fn enumerate_zone_sets() -> Vec<BTreeSet<Zone>> {
    (0..16u32)
        .filter(|bits| bits.count_ones() <= 3)
        .map(|bits| {
            ALL_ZONES
                .iter()
                .enumerate()
                .filter(|(i, _)| bits & (1 << i) != 0)
                .map(|(_, &z)| z)
                .collect()
        })
        .collect()
}
