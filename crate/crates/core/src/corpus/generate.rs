//! Procedural clip synthesis for the two genres.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use crate::error::{LabError, Result};
use crate::rng::RngState;

pub const SAMPLE_RATE: u32 = 8192;
pub const CLIP_SAMPLES: usize = 16_384;
pub const PEAK: f64 = 0.9;

/// Interval between entries of the melody f0 trace in the event log.
pub const F0_STEP_S: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Genre {
    /// Ornament-heavy: drone, scale tones and dense pitch glides.
    GenreA,
    /// Long-form modal: slow phrases with one mid-clip modulation.
    GenreB,
}

impl Genre {
    pub const ALL: [Genre; 2] = [Genre::GenreA, Genre::GenreB];

    pub fn name(self) -> &'static str {
        match self {
            Genre::GenreA => "GenreA",
            Genre::GenreB => "GenreB",
        }
    }

    pub fn long_name(self) -> &'static str {
        match self {
            Genre::GenreA => "GenreA_Ornament",
            Genre::GenreB => "GenreB_Modal",
        }
    }

    pub fn letter(self) -> char {
        match self {
            Genre::GenreA => 'A',
            Genre::GenreB => 'B',
        }
    }

    pub fn modes(self) -> &'static [(&'static str, [f64; 7])] {
        match self {
            Genre::GenreA => &MODES_A,
            Genre::GenreB => &MODES_B,
        }
    }

    pub fn cycles(self) -> &'static [(&'static str, &'static [u8])] {
        match self {
            Genre::GenreA => &CYCLES_A,
            Genre::GenreB => &CYCLES_B,
        }
    }

    pub fn instruments(self) -> &'static [&'static str] {
        match self {
            Genre::GenreA => &INSTRUMENTS_A,
            Genre::GenreB => &INSTRUMENTS_B,
        }
    }

    pub fn mode_names(self) -> Vec<&'static str> {
        self.modes().iter().map(|m| m.0).collect()
    }

    pub fn cycle_names(self) -> Vec<&'static str> {
        self.cycles().iter().map(|c| c.0).collect()
    }
}

impl fmt::Display for Genre {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Genre {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "GenreA" | "GenreA_Ornament" | "A" | "a" => Ok(Genre::GenreA),
            "GenreB" | "GenreB_Modal" | "B" | "b" => Ok(Genre::GenreB),
            _ => Err(LabError::Vocabulary {
                field: "genre",
                value: s.into(),
            }),
        }
    }
}

/// Scale degrees in cents above the tonic.
const MODES_A: [(&str, [f64; 7]); 5] = [
    ("Mode-A1", [0.0, 100.0, 300.0, 500.0, 700.0, 800.0, 1000.0]),
    ("Mode-A2", [0.0, 200.0, 400.0, 600.0, 700.0, 900.0, 1100.0]),
    ("Mode-A3", [0.0, 100.0, 400.0, 500.0, 700.0, 800.0, 1100.0]),
    ("Mode-A4", [0.0, 200.0, 300.0, 500.0, 700.0, 900.0, 1000.0]),
    ("Mode-A5", [0.0, 200.0, 400.0, 500.0, 700.0, 900.0, 1000.0]),
];

/// Neutral and augmented seconds give these their own colour.
const MODES_B: [(&str, [f64; 7]); 5] = [
    ("Mode-B1", [0.0, 200.0, 350.0, 500.0, 700.0, 900.0, 1050.0]),
    ("Mode-B2", [0.0, 150.0, 300.0, 500.0, 700.0, 800.0, 1000.0]),
    ("Mode-B3", [0.0, 90.0, 400.0, 500.0, 700.0, 800.0, 1000.0]),
    ("Mode-B4", [0.0, 150.0, 350.0, 500.0, 650.0, 800.0, 1000.0]),
    ("Mode-B5", [0.0, 200.0, 300.0, 450.0, 700.0, 850.0, 1000.0]),
];

/// Accent weight per beat (2 = strong, 1 = normal, 0 = empty).
const CYCLES_A: [(&str, &[u8]); 3] = [
    ("Cycle-A1", &[2, 1, 1, 1, 2, 1, 1, 1, 0, 1, 1, 1, 2, 1, 1, 1]),
    ("Cycle-A2", &[2, 1, 2, 1, 1, 0, 1, 2, 1, 1]),
    ("Cycle-A3", &[0, 1, 1, 2, 1, 2, 1]),
];

const CYCLES_B: [(&str, &[u8]); 3] = [
    ("Cycle-B1", &[2, 1, 2, 1, 2, 1, 2, 1, 1]),
    ("Cycle-B2", &[2, 1, 1, 2, 1, 2, 1, 1, 2, 1]),
    ("Cycle-B3", &[2, 1, 1, 2, 1, 1, 2, 1]),
];

const INSTRUMENTS_A: [&str; 5] = ["Voice", "Lute", "Reed-Organ", "Hand-Drum", "Bowed-Lute"];
const INSTRUMENTS_B: [&str; 5] = ["Fiddle", "Flute", "Zither", "Frame-Drum", "Long-Lute"];

fn is_drum(name: &str) -> bool {
    name.ends_with("Drum")
}

/// Harmonic amplitudes and whether the tone is plucked (decaying).
fn timbre(name: &str) -> (&'static [f64], bool) {
    match name {
        "Voice" => (&[1.0, 0.5, 0.3, 0.2, 0.1], false),
        "Lute" => (&[1.0, 0.7, 0.5, 0.4, 0.3, 0.2], true),
        "Reed-Organ" => (&[1.0, 0.8, 0.6, 0.5, 0.4, 0.3, 0.2], false),
        "Bowed-Lute" => (&[1.0, 0.6, 0.5, 0.3, 0.25, 0.2], false),
        "Fiddle" => (&[1.0, 0.6, 0.4, 0.3, 0.2, 0.15], false),
        "Flute" => (&[1.0, 0.2, 0.1], false),
        "Zither" => (&[1.0, 0.5, 0.35, 0.2, 0.1, 0.05], true),
        "Long-Lute" => (&[1.0, 0.8, 0.3, 0.3, 0.1], true),
        _ => (&[1.0, 0.5, 0.25], false),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlideEvent {
    pub start_s: f64,
    pub duration_s: f64,
    /// Signed pitch movement in cents.
    pub span_cents: f64,
}

/// Generator-side trace used by tests and diagnostics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    pub glides: Vec<GlideEvent>,
    /// Times at which a new melody note starts.
    pub note_onsets_s: Vec<f64>,
    /// Melody fundamental every [`F0_STEP_S`] seconds.
    pub f0_hz: Vec<f64>,
    /// GenreB only: (time, from-mode, to-mode) of the modulation.
    pub modulation: Option<(f64, String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub id: String,
    pub source_group: u32,
    pub genre: Genre,
    pub melodic_mode: String,
    pub rhythm_cycle: String,
    pub instruments: Vec<String>,
    pub waveform: Vec<f64>,
    pub sample_rate: u32,
    pub duration_s: f64,
}

fn lookup<'a, T>(table: &'a [(&'static str, T)], name: &str, field: &'static str) -> Result<&'a T> {
    table
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, v)| v)
        .ok_or_else(|| LabError::Vocabulary {
            field,
            value: name.into(),
        })
}

struct Note {
    start: f64,
    end: f64,
    cents: f64,
}

pub fn generate_clip(
    genre: Genre,
    mode: &str,
    cycle: &str,
    instruments: &[String],
    seed: u64,
) -> Result<ClipRecord> {
    Ok(generate_clip_traced(genre, mode, cycle, instruments, seed)?.0)
}

/// [`generate_clip`] plus the generator's event log.
pub fn generate_clip_traced(
    genre: Genre,
    mode: &str,
    cycle: &str,
    instruments: &[String],
    seed: u64,
) -> Result<(ClipRecord, EventLog)> {
    let scale = *lookup(genre.modes(), mode, "mode")?;
    let accents = *lookup(genre.cycles(), cycle, "cycle")?;
    for i in instruments {
        if !genre.instruments().contains(&i.as_str()) {
            return Err(LabError::Vocabulary {
                field: "instrument",
                value: i.clone(),
            });
        }
    }
    let mut rng = RngState::new(seed);
    let dur = CLIP_SAMPLES as f64 / SAMPLE_RATE as f64;
    let mut log = EventLog::default();

    let (notes, tonic) = match genre {
        Genre::GenreA => {
            let tonic = 180.0 * rng.uniform_range(0.0, 0.4).exp2();
            (melody_a(&scale, dur, &mut rng, &mut log), tonic)
        }
        Genre::GenreB => {
            let tonic = 150.0 * rng.uniform_range(0.0, 0.4).exp2();
            let idx = genre.modes().iter().position(|m| m.0 == mode).unwrap();
            let shift = 1 + rng.below(genre.modes().len() - 1);
            let (other_name, other) = genre.modes()[(idx + shift) % genre.modes().len()];
            log.modulation = Some((dur / 2.0, mode.to_string(), other_name.to_string()));
            (melody_b(&scale, &other, dur, &mut rng), tonic)
        }
    };
    log.note_onsets_s = notes.iter().map(|n| n.start).collect();

    let melodic: Vec<&str> = instruments
        .iter()
        .map(String::as_str)
        .filter(|i| !is_drum(i))
        .collect();
    let voice = melodic.first().copied().unwrap_or(match genre {
        Genre::GenreA => "Voice",
        Genre::GenreB => "Flute",
    });
    let support = melodic.get(1).copied();

    let mut wave = vec![0.0; CLIP_SAMPLES];
    let offset = glide_offsets(&log.glides, CLIP_SAMPLES);
    render_melody(&mut wave, &notes, tonic, &offset, voice, 1.0);
    if let Some(s) = support {
        // Second melodic instrument doubles the line an octave down, softly.
        render_melody(&mut wave, &notes, tonic / 2.0, &offset, s, 0.35);
    }
    if genre == Genre::GenreA {
        render_drone(&mut wave, tonic, &mut rng);
    }
    if instruments.iter().any(|i| is_drum(i)) {
        render_percussion(&mut wave, accents, genre, &mut rng);
    }

    log.f0_hz = (0..(dur / F0_STEP_S).round() as usize)
        .map(|k| {
            let t = k as f64 * F0_STEP_S;
            let n = notes
                .iter()
                .rfind(|n| n.start <= t)
                .unwrap_or(&notes[0]);
            let i = ((t * SAMPLE_RATE as f64) as usize).min(CLIP_SAMPLES - 1);
            tonic * ((n.cents + offset[i]) / 1200.0).exp2()
        })
        .collect();

    let peak = wave.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let k = PEAK / peak;
        wave.iter_mut().for_each(|v| *v *= k);
    }
    let clip = ClipRecord {
        id: String::new(),
        source_group: 0,
        genre,
        melodic_mode: mode.to_string(),
        rhythm_cycle: cycle.to_string(),
        instruments: instruments.to_vec(),
        waveform: wave,
        sample_rate: SAMPLE_RATE,
        duration_s: dur,
    };
    Ok((clip, log))
}

/// Degree index (may exceed one octave) to cents.
fn degree_cents(scale: &[f64; 7], degree: i32) -> f64 {
    let oct = degree.div_euclid(7);
    scale[degree.rem_euclid(7) as usize] + 1200.0 * oct as f64
}

fn melody_a(scale: &[f64; 7], dur: f64, rng: &mut RngState, log: &mut EventLog) -> Vec<Note> {
    let mut notes = Vec::new();
    let mut t = 0.0;
    let mut degree = rng.below(5) as i32;
    let mut offset = 0.0;
    while t < dur {
        let len = rng.uniform_range(0.2, 0.35);
        let end = (t + len).min(dur);
        notes.push(Note {
            start: t,
            end,
            cents: degree_cents(scale, degree),
        });
        // Glides sit inside the note, clear of its boundaries.
        let mut cursor = t + 0.015 + rng.uniform_range(0.0, 0.03);
        loop {
            let span = rng.uniform_range(30.0, 80.0);
            let gdur = rng.uniform_range(0.040, (0.0022 * span).min(0.120));
            if cursor + gdur > end - 0.015 {
                break;
            }
            let dir = if offset > 0.0 { -1.0 } else { 1.0 };
            offset += dir * span;
            log.glides.push(GlideEvent {
                start_s: cursor,
                duration_s: gdur,
                span_cents: dir * span,
            });
            cursor += gdur + rng.uniform_range(0.02, 0.05);
        }
        let step = [-2, -1, -1, 1, 1, 2][rng.below(6)];
        degree = (degree + step).clamp(0, 8);
        t = end;
    }
    notes
}

fn melody_b(first: &[f64; 7], second: &[f64; 7], dur: f64, rng: &mut RngState) -> Vec<Note> {
    let mut notes = Vec::new();
    let mut t = 0.0;
    let mut degree = rng.below(3) as i32;
    while t < dur {
        let len = rng.uniform_range(0.35, 0.6);
        let end = (t + len).min(dur);
        let scale = if t < dur / 2.0 { first } else { second };
        notes.push(Note {
            start: t,
            end,
            cents: degree_cents(scale, degree),
        });
        let step = [-1, -1, 1, 1, 0, 2][rng.below(6)];
        degree = (degree + step).clamp(0, 9);
        t = end;
    }
    notes
}

/// Per-sample pitch offset in cents produced by the glide events.
fn glide_offsets(glides: &[GlideEvent], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    let sr = SAMPLE_RATE as f64;
    let mut base = 0.0;
    let mut idx = 0;
    for (i, o) in out.iter_mut().enumerate() {
        let t = i as f64 / sr;
        while idx < glides.len() && t >= glides[idx].start_s + glides[idx].duration_s {
            base += glides[idx].span_cents;
            idx += 1;
        }
        *o = base;
        if let Some(g) = glides.get(idx) {
            if t >= g.start_s {
                *o += g.span_cents * (t - g.start_s) / g.duration_s;
            }
        }
    }
    out
}

fn render_melody(wave: &mut [f64], notes: &[Note], tonic: f64, offset: &[f64], instrument: &str, gain: f64) {
    let (harmonics, plucked) = timbre(instrument);
    let sr = SAMPLE_RATE as f64;
    let nyquist = sr / 2.0;
    let mut phase = 0.0;
    let mut ni = 0;
    for (i, w) in wave.iter_mut().enumerate() {
        let t = i as f64 / sr;
        while ni + 1 < notes.len() && t >= notes[ni + 1].start {
            ni += 1;
        }
        let n = &notes[ni];
        let f0 = tonic * ((n.cents + offset[i]) / 1200.0).exp2();
        phase = (phase + TAU * f0 / sr) % TAU;
        let since = t - n.start;
        let until = n.end - t;
        let attack = (since / 0.01).min(1.0) * (until / 0.01).clamp(0.0, 1.0);
        let env = if plucked {
            attack * (-since * 6.0).exp()
        } else {
            attack
        };
        let mut s = 0.0;
        for (h, a) in harmonics.iter().enumerate() {
            let k = (h + 1) as f64;
            if f0 * k < nyquist {
                s += a * (k * phase).sin();
            }
        }
        *w += gain * env * s;
    }
}

fn render_drone(wave: &mut [f64], tonic: f64, rng: &mut RngState) {
    let sr = SAMPLE_RATE as f64;
    let p0 = rng.uniform_range(0.0, TAU);
    for (i, w) in wave.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let mut s = 0.0;
        for (f, a) in [(tonic / 2.0, 0.3), (tonic * 0.75, 0.2), (tonic, 0.15)] {
            for (h, ha) in [1.0, 0.6, 0.4, 0.3].iter().enumerate() {
                let k = (h + 1) as f64;
                s += a * ha * (TAU * f * k * t + p0 * k).sin();
            }
        }
        *w += s;
    }
}

fn render_percussion(wave: &mut [f64], accents: &[u8], genre: Genre, rng: &mut RngState) {
    let sr = SAMPLE_RATE as f64;
    let beat = match genre {
        Genre::GenreA => 0.125,
        Genre::GenreB => 0.25,
    };
    let pitch = match genre {
        Genre::GenreA => 140.0,
        Genre::GenreB => 90.0,
    };
    let mut b = 0usize;
    loop {
        let start = (b as f64 * beat * sr) as usize;
        if start >= wave.len() {
            break;
        }
        let accent = accents[b % accents.len()];
        if accent > 0 {
            let amp = 0.25 * accent as f64;
            let len = ((0.08 * sr) as usize).min(wave.len() - start);
            for j in 0..len {
                let t = j as f64 / sr;
                let env = (-t * 40.0).exp();
                let noise = rng.uniform_range(-1.0, 1.0) * (-t * 120.0).exp();
                wave[start + j] += amp * (env * (TAU * pitch * t).sin() + 0.3 * noise);
            }
        }
        b += 1;
    }
}

/// Counts pitch-glide events visible in an f0 trace: maximal runs where the
/// pitch moves more than `threshold_cents` within `window_s`, ignoring windows
/// that straddle a note onset.
pub fn detect_glides(log: &EventLog, window_s: f64, threshold_cents: f64) -> usize {
    let lag = (window_s / F0_STEP_S).round() as usize;
    let cents: Vec<f64> = log.f0_hz.iter().map(|f| 1200.0 * f.log2()).collect();
    let mut events = 0;
    let mut inside = false;
    for k in 0..cents.len().saturating_sub(lag) {
        let (t0, t1) = (k as f64 * F0_STEP_S, (k + lag) as f64 * F0_STEP_S);
        let crosses = log.note_onsets_s.iter().any(|&o| o > t0 && o <= t1 + 1e-12);
        let moving = !crosses && (cents[k + lag] - cents[k]).abs() > threshold_cents;
        if moving && !inside {
            events += 1;
        }
        inside = moving;
    }
    events
}
