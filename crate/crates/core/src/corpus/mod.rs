//! Two-genre synthetic corpus: generators, prompts, codecs and dataset files.

pub mod codec;
pub mod generate;
pub mod prompts;


use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{LabError, Result};
use crate::rng::RngState;

pub use codec::{decode_latent, detokenize, encode_latent, tokenize};
pub use generate::{generate_clip, generate_clip_traced, ClipRecord, EventLog, Genre, CLIP_SAMPLES, SAMPLE_RATE};
pub use prompts::{embed_prompt, parse_prompt, render_prompt, PromptFields, PromptRecord, COND_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorpusConfig {
    pub seed: u64,
    pub groups_per_genre: usize,
    pub clips_per_group: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 0,
            groups_per_genre: 50,
            clips_per_group: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub clips: Vec<ClipRecord>,
    pub prompts: Vec<PromptRecord>,
}

impl Corpus {
    /// Indices of the clips of one genre, in corpus order.
    pub fn genre_indices(&self, genre: Genre) -> Vec<usize> {
        (0..self.clips.len())
            .filter(|&i| self.clips[i].genre == genre)
            .collect()
    }

    pub fn prompt_for(&self, index: usize) -> &PromptRecord {
        &self.prompts[index]
    }
}

pub fn clip_id(genre: Genre, group: usize, clip: usize) -> String {
    format!("{}{group:03}-{clip:02}", genre.letter())
}

/// Shared traits of one synthetic song: mode, cycle and instrumentation.
fn group_traits(genre: Genre, rng: &mut RngState) -> (String, String, Vec<String>) {
    let mode = genre.modes()[rng.below(genre.modes().len())].0.to_string();
    let cycle = genre.cycles()[rng.below(genre.cycles().len())].0.to_string();
    let pool = genre.instruments();
    let mut picks: Vec<usize> = (0..pool.len()).collect();
    rng.shuffle(&mut picks);
    let n = 2 + rng.below(2);
    let mut chosen: Vec<usize> = picks[..n].to_vec();
    chosen.sort_unstable();
    (mode, cycle, chosen.iter().map(|&i| pool[i].to_string()).collect())
}

pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    if config.groups_per_genre == 0 || config.clips_per_group == 0 {
        return Err(LabError::Config("corpus needs at least one group and one clip per group".into()));
    }
    let root = RngState::new(config.seed);
    let mut clips = Vec::new();
    let mut prompts = Vec::new();
    for (gi, genre) in Genre::ALL.into_iter().enumerate() {
        for group in 0..config.groups_per_genre {
            let gid = gi * config.groups_per_genre + group;
            let mut grng = root.derive_str(&format!("group/{}/{group}", genre.letter()));
            let (mode, cycle, instruments) = group_traits(genre, &mut grng);
            for c in 0..config.clips_per_group {
                let id = clip_id(genre, group, c);
                let mut crng = root.derive_str(&id);
                let mut clip = generate_clip(genre, &mode, &cycle, &instruments, crng.next_u64())?;
                clip.id = id;
                clip.source_group = gid as u32;
                let template = crng.below(prompts::NUM_TEMPLATES);
                prompts.push(render_prompt(&clip, template)?);
                clips.push(clip);
            }
        }
    }
    Ok(Corpus {
        config: *config,
        clips,
        prompts,
    })
}

const MANIFEST_COLUMNS: [&str; 7] = ["id", "group", "genre", "mode", "cycle", "instruments", "template_index"];

fn tsv_writer(path: &Path) -> Result<csv::Writer<File>> {
    Ok(csv::WriterBuilder::new()
        .delimiter(b'\t')
        .quote_style(csv::QuoteStyle::Never)
        .from_path(path)?)
}

fn tsv_reader(path: &Path) -> Result<csv::Reader<File>> {
    Ok(csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .comment(Some(b'#'))
        .quoting(false)
        .from_path(path)?)
}

fn wave_path(dir: &Path, id: &str) -> std::path::PathBuf {
    dir.join("waves").join(format!("{id}.f32"))
}

/// Writes `manifest.tsv`, `prompts.tsv` and `waves/<id>.f32`.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    fs::create_dir_all(dir.join("waves"))?;
    let c = &corpus.config;
    {
        let mut f = BufWriter::new(File::create(dir.join("manifest.tsv"))?);
        writeln!(
            f,
            "# seed={} groups_per_genre={} clips_per_group={} sample_rate={}",
            c.seed, c.groups_per_genre, c.clips_per_group, SAMPLE_RATE
        )?;
        let mut w = csv::WriterBuilder::new()
            .delimiter(b'\t')
            .quote_style(csv::QuoteStyle::Never)
            .from_writer(f);
        w.write_record(MANIFEST_COLUMNS)?;
        for (clip, p) in corpus.clips.iter().zip(&corpus.prompts) {
            w.write_record([
                clip.id.as_str(),
                &clip.source_group.to_string(),
                clip.genre.long_name(),
                &clip.melodic_mode,
                &clip.rhythm_cycle,
                &clip.instruments.join(","),
                &p.template_index.to_string(),
            ])?;
        }
        w.flush()?;
    }
    let mut w = tsv_writer(&dir.join("prompts.tsv"))?;
    w.write_record(["clip_id", "template_index", "text"])?;
    for p in &corpus.prompts {
        w.write_record([p.clip_id.as_str(), &p.template_index.to_string(), &p.text])?;
    }
    w.flush()?;
    for clip in &corpus.clips {
        let mut f = BufWriter::new(File::create(wave_path(dir, &clip.id))?);
        for &x in &clip.waveform {
            f.write_all(&(x as f32).to_le_bytes())?;
        }
        f.flush()?;
    }
    Ok(())
}

fn parse_config_line(line: &str) -> Result<CorpusConfig> {
    let mut cfg = CorpusConfig::default();
    for kv in line.trim_start_matches('#').split_whitespace() {
        let Some((k, v)) = kv.split_once('=') else { continue };
        let n: u64 = v
            .parse()
            .map_err(|_| LabError::Data(format!("bad manifest header value {kv}")))?;
        match k {
            "seed" => cfg.seed = n,
            "groups_per_genre" => cfg.groups_per_genre = n as usize,
            "clips_per_group" => cfg.clips_per_group = n as usize,
            _ => {}
        }
    }
    Ok(cfg)
}

fn field<'a>(rec: &'a csv::StringRecord, i: usize, path: &Path) -> Result<&'a str> {
    rec.get(i)
        .ok_or_else(|| LabError::Data(format!("{}: missing column {}", path.display(), i)))
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let manifest = dir.join("manifest.tsv");
    let mut first = String::new();
    File::open(&manifest)?.read_to_string(&mut first)?;
    let config = parse_config_line(first.lines().next().unwrap_or(""))?;

    let mut clips = Vec::new();
    let mut templates = Vec::new();
    for rec in tsv_reader(&manifest)?.records() {
        let rec = rec?;
        let id = field(&rec, 0, &manifest)?.to_string();
        let group = field(&rec, 1, &manifest)?
            .parse()
            .map_err(|_| LabError::Data(format!("bad group for {id}")))?;
        let genre: Genre = field(&rec, 2, &manifest)?.parse()?;
        let instruments = field(&rec, 5, &manifest)?.split(',').map(str::to_string).collect();
        templates.push(field(&rec, 6, &manifest)?.to_string());
        let waveform = read_wave(&wave_path(dir, &id))?;
        clips.push(ClipRecord {
            duration_s: waveform.len() as f64 / SAMPLE_RATE as f64,
            id,
            source_group: group,
            genre,
            melodic_mode: field(&rec, 3, &manifest)?.to_string(),
            rhythm_cycle: field(&rec, 4, &manifest)?.to_string(),
            instruments,
            waveform,
            sample_rate: SAMPLE_RATE,
        });
    }

    let ppath = dir.join("prompts.tsv");
    let mut prompts = Vec::new();
    for rec in tsv_reader(&ppath)?.records() {
        let rec = rec?;
        prompts.push(PromptRecord {
            clip_id: field(&rec, 0, &ppath)?.to_string(),
            template_index: field(&rec, 1, &ppath)?
                .parse()
                .map_err(|_| LabError::Data("bad template index in prompts.tsv".into()))?,
            text: field(&rec, 2, &ppath)?.to_string(),
        });
    }
    if prompts.len() != clips.len()
        || prompts
            .iter()
            .zip(&clips)
            .zip(&templates)
            .any(|((p, c), t)| p.clip_id != c.id || p.template_index.to_string() != *t)
    {
        return Err(LabError::Data("prompts.tsv does not line up with manifest.tsv".into()));
    }
    Ok(Corpus { config, clips, prompts })
}

/// Little-endian f32 samples.
pub fn read_wave(path: &Path) -> Result<Vec<f64>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() % 4 != 0 {
        return Err(LabError::Format {
            path: path.to_path_buf(),
            reason: "length is not a multiple of 4 bytes".into(),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect())
}

/// Waveforms of a dataset directory: a corpus written by [`write_corpus`]
/// (in manifest order), or else every `.f32` file in the directory or its
/// `waves/` subdirectory, in file-name order.
pub fn read_clip_dir(dir: &Path) -> Result<Vec<Vec<f64>>> {
    if dir.join("manifest.tsv").exists() {
        return Ok(read_corpus(dir)?.clips.into_iter().map(|c| c.waveform).collect());
    }
    let waves = dir.join("waves");
    let root = if waves.is_dir() { waves } else { dir.to_path_buf() };
    let mut paths: Vec<_> = fs::read_dir(&root)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "f32"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(LabError::Data(format!("no clips found in {}", dir.display())));
    }
    paths.iter().map(|p| read_wave(p)).collect()
}
