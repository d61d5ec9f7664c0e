//! Formalized reasoning labels.
//!
//! A label names the landmarks visible on a candidate view and the direction
//! of that view relative to the agent, filled into a fixed sentence
//! template. The same machinery builds ground-truth labels, negative
//! reasoning samples, and the two-choice reflection prompts.

use std::f64::consts::PI;
use std::fmt;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::envworld::{Episode, Observation, View, World, AGENT_HEADING};
use crate::error::{Error, Result};
use crate::rng::{mix, rng_from};

const TAU: f64 = 2.0 * PI;

pub const MOVE_PREFIX: &str = "I should go to an observation with ";
pub const DIRECTION_PREFIX: &str = "I should go ";
pub const STOP_LABEL: &str = "I should stop here.";
pub const REFLECTION_PREAMBLE: &str =
    "Choose the correct one from the given two navigational reasoning outputs.";
pub const CAPTION_PREFIX: &str = "a room with ";

/// Wraps an angle into `[-π, π)`.
pub fn normalize_angle(angle: f64) -> f64 {
    let mut a = angle - TAU * ((angle + PI) / TAU).floor();
    if a >= PI {
        a -= TAU;
    }
    if a < -PI {
        a += TAU;
    }
    a
}

/// Bearing from `current` to `target` in the horizontal plane, relative to
/// `current_heading`, in `[-π, π)`.
pub fn relative_heading(current: [f64; 3], target: [f64; 3], current_heading: f64) -> Result<f64> {
    let dx = target[0] - current[0];
    let dy = target[1] - current[1];
    if dx == 0.0 && dy == 0.0 {
        return Err(Error::DegenerateBearing);
    }
    Ok(normalize_angle(dx.atan2(dy) - current_heading))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DirectionText {
    #[serde(rename = "above")]
    Above,
    #[serde(rename = "below")]
    Below,
    #[serde(rename = "in front of")]
    InFrontOf,
    #[serde(rename = "to the left of")]
    LeftOf,
    #[serde(rename = "to the right of")]
    RightOf,
    #[serde(rename = "behind")]
    Behind,
}

impl DirectionText {
    pub const ALL: [DirectionText; 6] = [
        DirectionText::Above,
        DirectionText::Below,
        DirectionText::InFrontOf,
        DirectionText::LeftOf,
        DirectionText::RightOf,
        DirectionText::Behind,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DirectionText::Above => "above",
            DirectionText::Below => "below",
            DirectionText::InFrontOf => "in front of",
            DirectionText::LeftOf => "to the left of",
            DirectionText::RightOf => "to the right of",
            DirectionText::Behind => "behind",
        }
    }

    /// Short form used in synthesized instructions ("go left toward ...").
    pub fn instruction_word(self) -> &'static str {
        match self {
            DirectionText::Above => "up",
            DirectionText::Below => "down",
            DirectionText::InFrontOf => "forward",
            DirectionText::LeftOf => "left",
            DirectionText::RightOf => "right",
            DirectionText::Behind => "back",
        }
    }

    pub fn is_vertical(self) -> bool {
        matches!(self, DirectionText::Above | DirectionText::Below)
    }

    pub fn parse(text: &str) -> Option<DirectionText> {
        Self::ALL.into_iter().find(|d| d.as_str() == text)
    }
}

impl fmt::Display for DirectionText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Elevation first, then quarter-plane heading buckets, each closed on the
/// left and open on the right.
pub fn map_direction(rel_heading: f64, elevation: f64) -> DirectionText {
    if elevation > 0.0 {
        return DirectionText::Above;
    }
    if elevation < 0.0 {
        return DirectionText::Below;
    }
    let h = normalize_angle(rel_heading);
    if (-PI / 4.0..PI / 4.0).contains(&h) {
        DirectionText::InFrontOf
    } else if (PI / 4.0..3.0 * PI / 4.0).contains(&h) {
        DirectionText::RightOf
    } else if (-3.0 * PI / 4.0..-PI / 4.0).contains(&h) {
        DirectionText::LeftOf
    } else {
        DirectionText::Behind
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionContext {
    pub text: String,
}

pub trait CaptionProvider {
    fn caption(&self, view: &View) -> CaptionContext;
}

/// Caption grammar: `a room with X`, `a room with X and Y`,
/// `a room with X, Y and Z`.
pub fn render_caption(tags: &[String]) -> String {
    let body = match tags {
        [] => String::new(),
        [only] => only.clone(),
        [init @ .., last] => format!("{} and {}", init.join(", "), last),
    };
    format!("{CAPTION_PREFIX}{body}")
}

/// Joins view tags into a caption, optionally dropping one tag and inserting
/// a random vocabulary tag to mimic captioner noise.
#[derive(Debug, Clone)]
pub struct SyntheticCaptioner {
    seed: u64,
    p_drop: f64,
    p_add: f64,
    vocab: Vec<String>,
}

impl SyntheticCaptioner {
    pub fn new(seed: u64, p_drop: f64, p_add: f64, vocab: Vec<String>) -> Result<Self> {
        for p in [p_drop, p_add] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("caption noise probability {p} outside [0, 1]")));
            }
        }
        Ok(SyntheticCaptioner { seed, p_drop, p_add, vocab })
    }

    pub fn noiseless() -> Self {
        SyntheticCaptioner { seed: 0, p_drop: 0.0, p_add: 0.0, vocab: Vec::new() }
    }

    fn view_key(&self, view: &View) -> u64 {
        let mut words = vec![self.seed, view.heading.to_bits(), view.elevation.to_bits()];
        words.extend(view.landmark_tags.iter().map(|t| {
            t.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
        }));
        mix(&words)
    }
}

impl CaptionProvider for SyntheticCaptioner {
    fn caption(&self, view: &View) -> CaptionContext {
        let mut tags = view.landmark_tags.clone();
        if self.p_drop > 0.0 || self.p_add > 0.0 {
            let mut rng = rng_from(self.view_key(view));
            if tags.len() > 1 && rng.random::<f64>() < self.p_drop {
                let i = rng.random_range(0..tags.len());
                tags.remove(i);
            }
            if rng.random::<f64>() < self.p_add {
                let fresh: Vec<&String> = self.vocab.iter().filter(|v| !tags.contains(v)).collect();
                if !fresh.is_empty() {
                    let pick = fresh[rng.random_range(0..fresh.len())].clone();
                    let at = rng.random_range(0..=tags.len());
                    tags.insert(at, pick);
                }
            }
        }
        CaptionContext { text: render_caption(&tags) }
    }
}

/// Splits a caption of the synthetic grammar into its landmark list, keeping
/// first occurrences in order.
pub fn extract_landmarks(caption: &CaptionContext) -> Result<Vec<String>> {
    let body = caption.text.strip_prefix(CAPTION_PREFIX).unwrap_or(&caption.text);
    let mut out: Vec<String> = Vec::new();
    for chunk in body.split(", ").flat_map(|c| c.split(" and ")) {
        let chunk = chunk.trim();
        if !chunk.is_empty() && !out.iter().any(|x| x == chunk) {
            out.push(chunk.to_string());
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyLandmarks);
    }
    Ok(out)
}

/// Which parts of the reasoning the label carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelStyle {
    #[default]
    Formalized,
    DirectionOnly,
    LandmarkOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoTLabel {
    pub text: String,
    pub landmarks: Vec<String>,
    /// `None` only for the stop label.
    pub direction: Option<DirectionText>,
    /// Token count, filled in once the policy vocabulary tokenizes the text.
    pub token_len: usize,
}

impl CoTLabel {
    pub fn stop() -> CoTLabel {
        CoTLabel { text: STOP_LABEL.to_string(), landmarks: Vec::new(), direction: None, token_len: 0 }
    }

    pub fn is_stop(&self) -> bool {
        self.direction.is_none()
    }
}

pub fn render_label(landmarks: &[String], direction: DirectionText, style: LabelStyle) -> String {
    match style {
        LabelStyle::Formalized => format!("{MOVE_PREFIX}{} {} me.", landmarks.join(", "), direction),
        LabelStyle::DirectionOnly => format!("{DIRECTION_PREFIX}{direction} me."),
        LabelStyle::LandmarkOnly => format!("{MOVE_PREFIX}{}.", landmarks.join(", ")),
    }
}

pub fn build_cot_label(landmarks: &[String], direction: DirectionText) -> Result<CoTLabel> {
    build_styled_label(landmarks, direction, LabelStyle::Formalized)
}

pub fn build_styled_label(landmarks: &[String], direction: DirectionText, style: LabelStyle) -> Result<CoTLabel> {
    if landmarks.is_empty() {
        return Err(Error::InvalidInput("landmark list is empty".into()));
    }
    Ok(CoTLabel {
        text: render_label(landmarks, direction, style),
        landmarks: landmarks.to_vec(),
        direction: Some(direction),
        token_len: 0,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParsedReasoning {
    Move { landmarks: Vec<String>, direction: Option<DirectionText> },
    Stop,
}

fn split_direction(text: &str) -> Option<(&str, DirectionText)> {
    for d in DirectionText::ALL {
        if let Some(rest) = text.strip_suffix(d.as_str()) {
            return Some((rest, d));
        }
        // "to the above of" is accepted for the vertical directions.
        if d.is_vertical() {
            if let Some(rest) = text.strip_suffix(&format!("to the {d} of")) {
                return Some((rest, d));
            }
        }
    }
    None
}

fn parse_landmarks(text: &str) -> Option<Vec<String>> {
    let items: Vec<String> = text.split(", ").map(str::to_string).collect();
    let ok = items
        .iter()
        .all(|s| !s.is_empty() && s.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit()));
    ok.then_some(items)
}

/// Inverse of [`render_label`] for the given style; `None` when the text
/// does not follow the template.
pub fn parse_label(text: &str, style: LabelStyle) -> Option<ParsedReasoning> {
    if text == STOP_LABEL {
        return Some(ParsedReasoning::Stop);
    }
    match style {
        LabelStyle::Formalized => {
            let body = text.strip_prefix(MOVE_PREFIX)?.strip_suffix(" me.")?;
            let (rest, direction) = split_direction(body)?;
            let landmarks = parse_landmarks(rest.strip_suffix(' ')?)?;
            Some(ParsedReasoning::Move { landmarks, direction: Some(direction) })
        }
        LabelStyle::DirectionOnly => {
            let body = text.strip_prefix(DIRECTION_PREFIX)?.strip_suffix(" me.")?;
            let (rest, direction) = split_direction(body)?;
            rest.is_empty().then_some(ParsedReasoning::Move { landmarks: Vec::new(), direction: Some(direction) })
        }
        LabelStyle::LandmarkOnly => {
            let body = text.strip_prefix(MOVE_PREFIX)?.strip_suffix('.')?;
            let landmarks = parse_landmarks(body)?;
            Some(ParsedReasoning::Move { landmarks, direction: None })
        }
    }
}

/// Label for moving from `at` through navigable candidate `nav_index`.
pub fn candidate_label(
    world: &World,
    at: usize,
    observation: &Observation,
    nav_index: usize,
    provider: &dyn CaptionProvider,
    style: LabelStyle,
) -> Result<CoTLabel> {
    let nav = observation
        .navigable
        .get(nav_index)
        .ok_or_else(|| Error::InvalidInput(format!("navigable index {nav_index} out of range")))?;
    let view = &observation.views[nav.view_index];
    let landmarks = match extract_landmarks(&provider.caption(view)) {
        Ok(l) => l,
        Err(Error::EmptyLandmarks) => view.landmark_tags.clone(),
        Err(e) => return Err(e),
    };
    let heading = relative_heading(world.position(at), world.position(nav.neighbor), AGENT_HEADING)?;
    build_styled_label(&landmarks, map_direction(heading, view.elevation), style)
}

/// Ground-truth label for step `t` of `episode`; the final step gets the
/// fixed stop label.
pub fn build_gt_label(
    world: &World,
    episode: &Episode,
    t: usize,
    provider: &dyn CaptionProvider,
    style: LabelStyle,
) -> Result<CoTLabel> {
    let action = episode
        .gt_actions
        .get(t)
        .ok_or_else(|| Error::InvalidInput(format!("step {t} outside the episode")))?;
    match *action {
        crate::envworld::Action::Stop => Ok(CoTLabel::stop()),
        crate::envworld::Action::Move(i) => {
            let at = episode.gt_path[t];
            candidate_label(world, at, &world.observe(at)?, i, provider, style)
        }
    }
}

/// Label for a uniformly drawn navigable candidate other than `gt_index`.
#[allow(clippy::too_many_arguments)]
pub fn build_negative(
    world: &World,
    at: usize,
    observation: &Observation,
    gt_index: usize,
    provider: &dyn CaptionProvider,
    style: LabelStyle,
    seed: u64,
) -> Result<CoTLabel> {
    let j = sample_negative_index(observation.n_navigable(), gt_index, seed)?;
    candidate_label(world, at, observation, j, provider, style)
}

pub fn sample_negative_index(n_navigable: usize, gt_index: usize, seed: u64) -> Result<usize> {
    if n_navigable < 2 {
        return Err(Error::NoNegativeAvailable);
    }
    let r = rng_from(seed).random_range(0..n_navigable - 1);
    Ok(if r >= gt_index { r + 1 } else { r })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReflectionSample {
    pub prompt: String,
    pub positive: String,
    pub negative: String,
    pub answer: String,
    /// `false`: the positive sits in slot 1; `true`: slot 2.
    pub order_bit: bool,
}

pub fn reflection_prompt(first: &str, second: &str) -> String {
    let (first, second) = (first.trim_end_matches('.'), second.trim_end_matches('.'));
    format!("{REFLECTION_PREAMBLE} Output 1: {first}. Output 2: {second}. Selection: ")
}

pub fn reflection_answer(order_bit: bool) -> &'static str {
    if order_bit {
        "Output 2."
    } else {
        "Output 1."
    }
}

pub fn build_reflection_sample(positive: &CoTLabel, negative: &CoTLabel, seed: u64) -> Result<ReflectionSample> {
    reflection_with_order(positive, negative, rng_from(seed).random::<bool>())
}

pub fn reflection_with_order(positive: &CoTLabel, negative: &CoTLabel, order_bit: bool) -> Result<ReflectionSample> {
    if positive.text == negative.text {
        return Err(Error::DegeneratePair);
    }
    let (first, second) = if order_bit {
        (&negative.text, &positive.text)
    } else {
        (&positive.text, &negative.text)
    };
    Ok(ReflectionSample {
        prompt: reflection_prompt(first, second),
        positive: positive.text.clone(),
        negative: negative.text.clone(),
        answer: reflection_answer(order_bit).to_string(),
        order_bit,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    Gt,
    Negative,
    Reflection,
}

/// One line of a label dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub episode_id: u64,
    pub step: usize,
    pub label_text: String,
    pub landmarks: Vec<String>,
    pub direction: Option<DirectionText>,
    pub kind: LabelKind,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub order_bit: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub answer: Option<String>,
}
