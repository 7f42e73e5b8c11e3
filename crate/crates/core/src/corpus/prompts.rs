use std::sync::OnceLock;

use regex::Regex;

use super::generate::{ClipRecord, Genre};
use crate::error::{LabError, Result};
use crate::rng::fnv1a;

pub const NUM_TEMPLATES: usize = 5;
pub const COND_DIM: usize = 32;

const TEMPLATES: [&str; NUM_TEMPLATES] = [
    "{genre} music with {instruments} in {mode} mode set to {cycle} rhythm.",
    "A {genre} piece in {mode} mode over a {cycle} cycle, played on {instruments}.",
    "{instruments} performing {genre} music in the {mode} mode with a {cycle} rhythm.",
    "Recording of {genre} music: {mode} mode, {cycle} cycle, featuring {instruments}.",
    "{cycle} rhythm and {mode} mode guide this {genre} performance by {instruments}.",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptRecord {
    pub clip_id: String,
    pub template_index: usize,
    pub text: String,
}

/// Metadata recovered from a rendered prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptFields {
    pub genre: Genre,
    pub melodic_mode: String,
    pub rhythm_cycle: String,
    pub instruments: Vec<String>,
}

pub fn template(index: usize) -> Option<&'static str> {
    TEMPLATES.get(index).copied()
}

pub fn render_prompt(clip: &ClipRecord, template_index: usize) -> Result<PromptRecord> {
    let t = template(template_index)
        .ok_or_else(|| LabError::Range(format!("template index {template_index} outside 0..{NUM_TEMPLATES}")))?;
    let text = t
        .replace("{genre}", clip.genre.name())
        .replace("{instruments}", &clip.instruments.join(", "))
        .replace("{mode}", &clip.melodic_mode)
        .replace("{cycle}", &clip.rhythm_cycle);
    Ok(PromptRecord {
        clip_id: clip.id.clone(),
        template_index,
        text,
    })
}

fn inverse_patterns() -> &'static [Regex; NUM_TEMPLATES] {
    static PATTERNS: OnceLock<[Regex; NUM_TEMPLATES]> = OnceLock::new();
    PATTERNS.get_or_init(|| {
        TEMPLATES.map(|t| {
            let mut p = regex::escape(t);
            for (field, group) in [
                ("genre", r"(?P<genre>\w+)"),
                ("instruments", r"(?P<instruments>[\w-]+(?:, [\w-]+)*)"),
                ("mode", r"(?P<mode>[\w-]+)"),
                ("cycle", r"(?P<cycle>[\w-]+)"),
            ] {
                p = p.replace(&regex::escape(&format!("{{{field}}}")), group);
            }
            Regex::new(&format!("^{p}$")).expect("template pattern compiles")
        })
    })
}

/// Inverse of [`render_prompt`] for the given template.
pub fn parse_prompt(text: &str, template_index: usize) -> Result<PromptFields> {
    let re = inverse_patterns()
        .get(template_index)
        .ok_or_else(|| LabError::Range(format!("template index {template_index} outside 0..{NUM_TEMPLATES}")))?;
    let caps = re
        .captures(text)
        .ok_or_else(|| LabError::Data(format!("prompt does not match template {template_index}: {text}")))?;
    Ok(PromptFields {
        genre: caps["genre"].parse()?,
        melodic_mode: caps["mode"].to_string(),
        rhythm_cycle: caps["cycle"].to_string(),
        instruments: caps["instruments"].split(", ").map(str::to_string).collect(),
    })
}

/// Hashed bag of lowercase alphanumeric tokens, L2-normalised.
pub fn embed_prompt(text: &str) -> Vec<f64> {
    let mut v = vec![0.0; COND_DIM];
    let lower = text.to_lowercase();
    for tok in lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
        let h = fnv1a(tok.as_bytes());
        let idx = (h % COND_DIM as u64) as usize;
        let sign = if (h >> 32) & 1 == 0 { 1.0 } else { -1.0 };
        v[idx] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}
