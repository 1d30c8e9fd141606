//! Partial sketches bundled with the crate, with their prompts and regions.

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::sketch::{Region, Sketch};

const INDEX: &str = include_str!("../../assets/sketches/index.toml");

/// The eight category sketches, in order. `flower` is an extra fixture.
pub const CATEGORIES: [&str; 8] = ["chair", "hat", "lamp", "pot", "boat", "dress", "shoe", "bust"];

const SOURCES: [(&str, &str); 9] = [
    ("chair", include_str!("../../assets/sketches/chair.svg")),
    ("hat", include_str!("../../assets/sketches/hat.svg")),
    ("lamp", include_str!("../../assets/sketches/lamp.svg")),
    ("pot", include_str!("../../assets/sketches/pot.svg")),
    ("boat", include_str!("../../assets/sketches/boat.svg")),
    ("dress", include_str!("../../assets/sketches/dress.svg")),
    ("shoe", include_str!("../../assets/sketches/shoe.svg")),
    ("bust", include_str!("../../assets/sketches/bust.svg")),
    ("flower", include_str!("../../assets/sketches/flower.svg")),
];

#[derive(Deserialize)]
struct Index {
    sketch: Vec<Entry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    prompt: String,
    alt_prompt: String,
    region: [f64; 4],
}

#[derive(Clone, Debug)]
pub struct CannedSketch {
    pub name: &'static str,
    pub svg: &'static str,
    pub prompt: String,
    pub alt_prompt: String,
    pub region: Region,
}

impl CannedSketch {
    pub fn sketch(&self) -> Result<Sketch> {
        super::svg_import(self.svg)
    }
}

pub fn all() -> Vec<CannedSketch> {
    let index: Index = toml::from_str(INDEX).expect("bundled index parses");
    SOURCES
        .iter()
        .map(|(name, svg)| {
            let e = index.sketch.iter().find(|e| e.name == *name).expect("every bundled sketch is indexed");
            let [x0, y0, x1, y1] = e.region;
            CannedSketch {
                name,
                svg,
                prompt: e.prompt.clone(),
                alt_prompt: e.alt_prompt.clone(),
                region: Region::new(x0, y0, x1, y1).expect("bundled region is valid"),
            }
        })
        .collect()
}

pub fn get(name: &str) -> Result<CannedSketch> {
    all()
        .into_iter()
        .find(|c| c.name == name)
        .ok_or_else(|| Error::Input(format!("no canned sketch `{name}` (have: {})", SOURCES.map(|s| s.0).join(", "))))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_asset_imports_and_round_trips() {
        let all = all();
        assert_eq!(all.len(), 9);
        for c in all {
            let s = c.sketch().unwrap();
            assert!(s.user_count() >= 3, "{}", c.name);
            assert_eq!(s.agent_count(), 0);
            assert_eq!(super::super::svg_export(&s), c.svg, "{}", c.name);
            assert_ne!(c.prompt, c.alt_prompt);
        }
        assert!(get("unicorn").is_err());
    }
}
