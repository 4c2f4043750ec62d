//! Stage-1 inputs: sampled frames, the speaker-centered task prompt and the
//! affective guidance prompts (dialogue context, audio description, lexical
//! valence/arousal/dominance cues), composed into one prompt per utterance.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::{history_view, Conversation, Utterance};
use crate::error::{Error, Result};

/// The template file shipped with the crate.
pub const BUNDLED_TEMPLATES: &str = include_str!("../assets/templates.txt");
/// A small sample lexicon shipped with the crate.
pub const BUNDLED_LEXICON: &str = include_str!("../assets/vad_lexicon.tsv");

pub const SECTION_DELIMITER: &str = "---SECTION---";
/// Blank line between composed prompt parts.
pub const PROMPT_SEPARATOR: &str = "\n\n";
pub const NO_AUDIO_SENTENCE: &str = "No audio description is available for the current utterance.";
pub const NO_VAD_SENTENCE: &str = "No affective words were found in the current utterance.";
pub const CURRENT_MARKER: &str = "[current] ";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub task: String,
    pub context: String,
    pub audio: String,
    pub vad: String,
}

impl PromptTemplates {
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.replace("\r\n", "\n");
        let sections: Vec<&str> = text
            .split(&format!("\n{SECTION_DELIMITER}\n"))
            .map(|s| s.trim_end_matches('\n'))
            .collect();
        let [task, context, audio, vad] = sections[..] else {
            return Err(Error::invalid(format!(
                "template file needs 4 sections, found {}",
                sections.len()
            )));
        };
        for (name, body, placeholder) in [
            ("task", task, "{speaker}"),
            ("context", context, "{lines}"),
            ("audio", audio, "{descriptors}"),
            ("vad", vad, "{vad_entries}"),
        ] {
            if !body.contains(placeholder) {
                return Err(Error::invalid(format!("{name} template lacks {placeholder}")));
            }
        }
        Ok(PromptTemplates {
            task: task.into(),
            context: context.into(),
            audio: audio.into(),
            vad: vad.into(),
        })
    }

    pub fn bundled() -> Self {
        Self::parse(BUNDLED_TEMPLATES).expect("bundled templates are well-formed")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Low,
    Mid,
    High,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rate {
    Slow,
    Mid,
    Fast,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Low, Level::Mid, Level::High];

    fn as_str(self) -> &'static str {
        match self {
            Level::Low => "low",
            Level::Mid => "mid",
            Level::High => "high",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.as_str() == s)
    }
}

impl Rate {
    pub const ALL: [Rate; 3] = [Rate::Slow, Rate::Mid, Rate::Fast];

    fn as_str(self) -> &'static str {
        match self {
            Rate::Slow => "slow",
            Rate::Mid => "mid",
            Rate::Fast => "fast",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.as_str() == s)
    }
}

/// Categorical prosody summary of one utterance, computed upstream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AudioDescriptors {
    pub pitch: Level,
    pub energy: Level,
    pub rate: Rate,
}

impl fmt::Display for AudioDescriptors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "pitch {}, energy {}, speaking rate {}",
            self.pitch.as_str(),
            self.energy.as_str(),
            self.rate.as_str()
        )
    }
}

/// Recovers descriptors from a rendered audio prompt.
pub fn parse_descriptors(text: &str) -> Option<AudioDescriptors> {
    let word_after = |key: &str| -> Option<&str> {
        let start = text.find(key)? + key.len();
        let rest = &text[start..];
        let end = rest.find(|c: char| !c.is_ascii_alphabetic()).unwrap_or(rest.len());
        Some(&rest[..end])
    };
    Some(AudioDescriptors {
        pitch: Level::parse(word_after("pitch ")?)?,
        energy: Level::parse(word_after("energy ")?)?,
        rate: Rate::parse(word_after("speaking rate ")?)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vad {
    pub valence: f64,
    pub arousal: f64,
    pub dominance: f64,
}

impl Vad {
    /// Distance from the neutral point in the valence/arousal plane.
    pub fn salience(&self) -> f64 {
        (self.valence - 0.5).abs() + (self.arousal - 0.5).abs()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VadLexicon {
    entries: HashMap<String, Vad>,
}

impl VadLexicon {
    /// Parses `term<TAB>valence<TAB>arousal<TAB>dominance` rows; `#` lines are comments.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |m: String| Error::Parse {
                line: i + 1,
                message: m,
            };
            let cols: Vec<&str> = line.split('\t').collect();
            let [term, v, a, d] = cols[..] else {
                return Err(bad(format!("expected 4 tab-separated columns, got {}", cols.len())));
            };
            let term = term.trim().to_lowercase();
            if term.is_empty() {
                return Err(bad("empty term".into()));
            }
            let num = |s: &str| -> Result<f64> {
                let x: f64 = s.trim().parse().map_err(|e| bad(format!("{s:?}: {e}")))?;
                if !(0.0..=1.0).contains(&x) {
                    return Err(bad(format!("{x} outside [0, 1]")));
                }
                Ok(x)
            };
            let vad = Vad {
                valence: num(v)?,
                arousal: num(a)?,
                dominance: num(d)?,
            };
            entries.insert(term, vad);
        }
        Ok(VadLexicon { entries })
    }

    pub fn bundled() -> Self {
        Self::parse(BUNDLED_LEXICON).expect("bundled lexicon is well-formed")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn from_entries(entries: impl IntoIterator<Item = (String, Vad)>) -> Self {
        VadLexicon {
            entries: entries.into_iter().map(|(k, v)| (k.to_lowercase(), v)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn vad_lookup(token: &str, lex: &VadLexicon) -> Option<Vad> {
    lex.entries.get(&token.to_lowercase()).copied()
}

/// Whitespace split, surrounding punctuation stripped, lowercased.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Up to `top_n` distinct lexicon hits ranked by salience, earlier position first on ties.
pub fn select_vad_tokens(transcript: &str, lex: &VadLexicon, top_n: usize) -> Vec<(String, Vad)> {
    let mut seen = HashSet::new();
    let mut hits: Vec<(usize, String, Vad)> = tokenize(transcript)
        .into_iter()
        .enumerate()
        .filter(|(_, t)| seen.insert(t.clone()))
        .filter_map(|(pos, t)| vad_lookup(&t, lex).map(|v| (pos, t, v)))
        .collect();
    hits.sort_by(|a, b| b.2.salience().total_cmp(&a.2.salience()).then(a.0.cmp(&b.0)));
    hits.into_iter().take(top_n).map(|(_, t, v)| (t, v)).collect()
}

pub fn sample_frame_indices(total_frames: usize, k: usize) -> Result<Vec<usize>> {
    if total_frames == 0 {
        return Err(Error::invalid("zero-length clip"));
    }
    if k == 0 {
        return Err(Error::invalid("frame count must be positive"));
    }
    let m = k.min(total_frames);
    Ok((0..m).map(|j| (j * total_frames / m).min(total_frames - 1)).collect())
}

pub fn build_task_prompt(templates: &PromptTemplates, utterance: &Utterance) -> Result<String> {
    if utterance.speaker_id.is_empty() {
        return Err(Error::invalid("empty speaker_id"));
    }
    Ok(templates.task.replace("{speaker}", &utterance.speaker_id))
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Renders the last `window` utterances of a causal history, current one last.
pub fn build_context_prompt(templates: &PromptTemplates, history: &[Utterance], window: usize) -> Result<String> {
    if history.is_empty() {
        return Err(Error::invalid("empty dialogue history"));
    }
    if window == 0 {
        return Err(Error::invalid("context window must be positive"));
    }
    let start = history.len().saturating_sub(window);
    let last = history.len() - 1;
    let lines: Vec<String> = history[start..]
        .iter()
        .enumerate()
        .map(|(k, u)| {
            let marker = if start + k == last { CURRENT_MARKER } else { "" };
            format!("{marker}{}: {}", one_line(&u.speaker_id), one_line(&u.transcript))
        })
        .collect();
    Ok(templates.context.replace("{lines}", &lines.join("\n")))
}

pub fn build_audio_prompt(templates: &PromptTemplates, descriptors: Option<&AudioDescriptors>) -> String {
    match descriptors {
        Some(d) => templates.audio.replace("{descriptors}", &d.to_string()),
        None => NO_AUDIO_SENTENCE.to_string(),
    }
}

pub fn build_vad_prompt(templates: &PromptTemplates, transcript: &str, lex: &VadLexicon, top_n: usize) -> String {
    let picked = select_vad_tokens(transcript, lex, top_n);
    if picked.is_empty() {
        return NO_VAD_SENTENCE.to_string();
    }
    let entries: Vec<String> = picked
        .iter()
        .map(|(t, v)| format!("{t} (V={:.2}, A={:.2}, D={:.2})", v.valence, v.arousal, v.dominance))
        .collect();
    templates.vad.replace("{vad_entries}", &entries.join("; "))
}

/// Joins the non-empty parts in order with a blank line.
pub fn compose_prompt(task: &str, ctx: &str, aud: &str, vad: &str) -> Result<String> {
    if task.is_empty() {
        return Err(Error::invalid("task prompt must not be empty"));
    }
    Ok([task, ctx, aud, vad]
        .into_iter()
        .filter(|p| !p.is_empty())
        .collect::<Vec<_>>()
        .join(PROMPT_SEPARATOR))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptConfig {
    pub frames_per_clip: usize,
    pub context_window: usize,
    pub vad_top_n: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            frames_per_clip: 8,
            context_window: 8,
            vad_top_n: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PromptBundle {
    pub conv_id: String,
    pub index: usize,
    pub frame_indices: Vec<usize>,
    pub reference_image: Option<String>,
    pub task_prompt: String,
    pub ctx_prompt: String,
    pub aud_prompt: String,
    pub vad_prompt: String,
    pub composed: String,
}

/// Assembles every Stage-1 input for utterance `i` of `conv`.
pub fn build_prompt_bundle(
    conv: &Conversation,
    i: usize,
    total_frames: usize,
    templates: &PromptTemplates,
    lex: &VadLexicon,
    cfg: &PromptConfig,
) -> Result<PromptBundle> {
    let history = history_view(conv, i)?;
    let u = &history[i];
    let task_prompt = build_task_prompt(templates, u)?;
    let ctx_prompt = build_context_prompt(templates, history, cfg.context_window)?;
    let aud_prompt = build_audio_prompt(templates, u.audio_descriptors.as_ref());
    let vad_prompt = build_vad_prompt(templates, &u.transcript, lex, cfg.vad_top_n);
    let composed = compose_prompt(&task_prompt, &ctx_prompt, &aud_prompt, &vad_prompt)?;
    Ok(PromptBundle {
        conv_id: conv.conv_id.clone(),
        index: i,
        frame_indices: sample_frame_indices(total_frames, cfg.frames_per_clip)?,
        reference_image: u.media.reference_image_path.clone(),
        task_prompt,
        ctx_prompt,
        aud_prompt,
        vad_prompt,
        composed,
    })
}
