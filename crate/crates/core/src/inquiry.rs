//! Turning free-text requests into condition triples
//! `(capacity, skill, max machines)`.
//!
//! The default backend is a small keyword grammar. A remote language-model
//! backend speaks an OpenAI-style chat-completions protocol and can fall
//! back to the grammar when the remote answer is unusable.

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkillLevel {
    High,
    Moderate,
    Low,
}

impl SkillLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            SkillLevel::High => "high",
            SkillLevel::Moderate => "moderate",
            SkillLevel::Low => "low",
        }
    }

    /// Human processing rate in parts/hour.
    pub fn rate(self) -> u32 {
        match self {
            SkillLevel::High => 120,
            SkillLevel::Moderate => 60,
            SkillLevel::Low => 0,
        }
    }
}

impl fmt::Display for SkillLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SkillLevel {
    type Err = InquiryError;

    fn from_str(s: &str) -> Result<Self, InquiryError> {
        match s.trim().to_ascii_lowercase().as_str() {
            "high" => Ok(SkillLevel::High),
            "moderate" | "medium" => Ok(SkillLevel::Moderate),
            "low" => Ok(SkillLevel::Low),
            other => Err(InquiryError::Malformed(format!("unknown skill level {other:?}"))),
        }
    }
}

/// Requirements extracted from one inquiry. At least one slot is present.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConditionClass {
    /// Required capacity, parts/hour.
    pub capacity: Option<u32>,
    pub skill: Option<SkillLevel>,
    pub max_machines: Option<u32>,
}

impl ConditionClass {
    pub fn new(
        capacity: Option<u32>,
        skill: Option<SkillLevel>,
        max_machines: Option<u32>,
    ) -> Result<Self, InquiryError> {
        let c = ConditionClass {
            capacity,
            skill,
            max_machines,
        };
        if c.is_empty() {
            return Err(InquiryError::Malformed("a condition needs at least one slot".into()));
        }
        Ok(c)
    }

    pub fn is_empty(&self) -> bool {
        self.capacity.is_none() && self.skill.is_none() && self.max_machines.is_none()
    }
}

impl fmt::Display for ConditionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_class(self))
    }
}

/// Parses the canonical `(a, b, d)` rendering.
impl FromStr for ConditionClass {
    type Err = InquiryError;

    fn from_str(s: &str) -> Result<Self, InquiryError> {
        let inner = s
            .trim()
            .strip_prefix('(')
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(|| InquiryError::Malformed(format!("not a triple: {s:?}")))?;
        let parts: Vec<&str> = inner.split(',').map(|p| p.trim().trim_matches(['"', '\''])).collect();
        if parts.len() != 3 {
            return Err(InquiryError::Malformed(format!("expected three slots in {s:?}")));
        }
        let none = |p: &str| p.eq_ignore_ascii_case("none") || p.eq_ignore_ascii_case("null");
        let number = |p: &str| -> Result<Option<u32>, InquiryError> {
            if none(p) {
                Ok(None)
            } else {
                p.parse()
                    .map(Some)
                    .map_err(|_| InquiryError::Malformed(format!("slot {p:?} is not a count")))
            }
        };
        let skill = if none(parts[1]) { None } else { Some(parts[1].parse()?) };
        ConditionClass::new(number(parts[0])?, skill, number(parts[2])?)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum InquiryError {
    #[error("no capacity, skill or machine requirement recognized in {text:?}")]
    Unrecognized { text: String },
    #[error("number word {word:?} is beyond twenty; write it in digits")]
    NumberTooLarge { word: String },
    #[error("empty inquiry")]
    Empty,
    #[error("malformed condition: {0}")]
    Malformed(String),
    #[error("remote backend failed: {message}")]
    Remote {
        message: String,
        /// Grammar result when fallback is enabled and the grammar succeeded.
        fallback: Option<ConditionClass>,
    },
}

/// Canonical rendering, e.g. `(240, None, 9)`.
pub fn format_class(c: &ConditionClass) -> String {
    let slot = |v: Option<String>| v.unwrap_or_else(|| "None".into());
    format!(
        "({}, {}, {})",
        slot(c.capacity.map(|v| v.to_string())),
        slot(c.skill.map(|v| v.to_string())),
        slot(c.max_machines.map(|v| v.to_string())),
    )
}

/// A plain-English request stating exactly the present slots.
pub fn template_sentence(c: &ConditionClass) -> String {
    let mut parts = Vec::new();
    if let Some(cap) = c.capacity {
        parts.push(format!("a capacity of {cap} parts per hour"));
    }
    if let Some(s) = c.skill {
        parts.push(format!("{s} skill workers"));
    }
    if let Some(m) = c.max_machines {
        parts.push(format!("no more than {m} machines"));
    }
    format!("I need a production line with {}.", parts.join(" and "))
}

const SMALL_NUMBERS: [&str; 21] = [
    "zero",
    "one",
    "two",
    "three",
    "four",
    "five",
    "six",
    "seven",
    "eight",
    "nine",
    "ten",
    "eleven",
    "twelve",
    "thirteen",
    "fourteen",
    "fifteen",
    "sixteen",
    "seventeen",
    "eighteen",
    "nineteen",
    "twenty",
];

const LARGE_NUMBER_WORDS: [&str; 10] = [
    "thirty", "forty", "fifty", "sixty", "seventy", "eighty", "ninety", "hundred", "thousand", "million",
];

const RATE_MARK: &str = "\u{1}rate";

#[derive(Clone, Debug, PartialEq)]
enum Token {
    Word(String),
    Number(u32),
    Rate,
}

fn number_word(w: &str) -> Option<u32> {
    SMALL_NUMBERS.iter().position(|&n| n == w).map(|k| k as u32)
}

/// Lowercases, folds the throughput unit spellings into one marker and
/// splits into words and numbers.
fn tokenize(text: &str) -> Result<Vec<Token>, InquiryError> {
    let mut s = format!(" {} ", text.to_lowercase());
    for unit in [
        "parts per hour",
        "part per hour",
        "units per hour",
        "unit per hour",
        "pieces per hour",
        "parts an hour",
        "parts/hour",
        "part/hour",
        "parts/hr",
        "part/hr",
        "parts/h",
        "part/h",
        "units/hour",
        "units/hr",
        "pcs/h",
        "per hour",
        "/hour",
        "/hr",
        "/h ",
        "pph",
    ] {
        s = s.replace(unit, &format!(" {RATE_MARK} "));
    }
    let mut out = Vec::new();
    for raw in s.split(|c: char| !(c.is_alphanumeric() || c == '-' || c == '\u{1}')) {
        if raw.is_empty() {
            continue;
        }
        if raw == RATE_MARK {
            out.push(Token::Rate);
            continue;
        }
        // compound number words such as "twenty-one" are beyond the grammar
        let pieces: Vec<&str> = raw.split('-').filter(|p| !p.is_empty()).collect();
        if pieces.len() > 1
            && pieces
                .iter()
                .all(|p| number_word(p).is_some() || LARGE_NUMBER_WORDS.contains(p))
        {
            return Err(InquiryError::NumberTooLarge { word: raw.to_string() });
        }
        for p in pieces {
            if LARGE_NUMBER_WORDS.contains(&p) {
                return Err(InquiryError::NumberTooLarge { word: p.to_string() });
            }
            if let Some(n) = number_word(p) {
                out.push(Token::Number(n));
            } else if p.chars().all(|c| c.is_ascii_digit()) {
                let n = p
                    .parse()
                    .map_err(|_| InquiryError::Malformed(format!("number {p} out of range")))?;
                out.push(Token::Number(n));
            } else {
                out.push(Token::Word(p.to_string()));
            }
        }
    }
    Ok(out)
}

fn is_word(t: Option<&Token>, words: &[&str]) -> bool {
    matches!(t, Some(Token::Word(w)) if words.contains(&w.as_str()))
}

const MACHINE_WORDS: [&str; 2] = ["machine", "machines"];
const CAPACITY_WORDS: [&str; 5] = ["capacity", "throughput", "output", "rate", "production"];
const SKILL_ANCHORS: [&str; 13] = [
    "skill",
    "skills",
    "skilled",
    "worker",
    "workers",
    "operator",
    "operators",
    "staff",
    "labor",
    "labour",
    "employees",
    "people",
    "humans",
];
const FILLER: [&str; 12] = [
    "of", "at", "least", "minimum", "minimal", "a", "the", "about", "around", "is", "be", "to",
];

fn capacity_slot(tokens: &[Token]) -> Option<u32> {
    // a number directly before a throughput unit, optionally with "parts" in between
    for (k, t) in tokens.iter().enumerate() {
        if let Token::Number(n) = t {
            let next = tokens.get(k + 1);
            if next == Some(&Token::Rate) {
                return Some(*n);
            }
            if is_word(next, &["parts", "part", "units", "pieces"]) && tokens.get(k + 2) == Some(&Token::Rate) {
                return Some(*n);
            }
        }
    }
    // "capacity of (at least) N" without a unit
    for (k, t) in tokens.iter().enumerate() {
        if !is_word(Some(t), &CAPACITY_WORDS) {
            continue;
        }
        for next in tokens.iter().skip(k + 1).take(4) {
            match next {
                Token::Number(n) => {
                    return Some(*n);
                }
                Token::Word(w) if FILLER.contains(&w.as_str()) => continue,
                _ => break,
            }
        }
    }
    None
}

fn machine_slot(tokens: &[Token]) -> Option<u32> {
    for (k, t) in tokens.iter().enumerate() {
        if let Token::Number(n) = t {
            // N machines, N cnc machines, N robotic machines
            let direct = is_word(tokens.get(k + 1), &MACHINE_WORDS);
            let one_between =
                matches!(tokens.get(k + 1), Some(Token::Word(_))) && is_word(tokens.get(k + 2), &MACHINE_WORDS);
            if direct || one_between {
                return Some(*n);
            }
        }
    }
    // "machines: at most N", "machine count up to N"
    for (k, t) in tokens.iter().enumerate() {
        if !is_word(Some(t), &MACHINE_WORDS) {
            continue;
        }
        for next in tokens.iter().skip(k + 1).take(5) {
            match next {
                Token::Number(n) => return Some(*n),
                Token::Word(w)
                    if [
                        "no",
                        "more",
                        "than",
                        "at",
                        "most",
                        "up",
                        "to",
                        "count",
                        "limit",
                        "of",
                        "max",
                        "maximum",
                        "is",
                        "not",
                        "exceeding",
                    ]
                    .contains(&w.as_str()) =>
                {
                    continue
                }
                _ => break,
            }
        }
    }
    None
}

fn skill_slot(tokens: &[Token]) -> Option<SkillLevel> {
    let level = |t: &Token| match t {
        Token::Word(w) => match w.as_str() {
            "high" | "highly" => Some(SkillLevel::High),
            "moderate" | "moderately" | "medium" | "average" => Some(SkillLevel::Moderate),
            "low" | "lowly" | "unskilled" => Some(SkillLevel::Low),
            _ => None,
        },
        _ => None,
    };
    for (k, t) in tokens.iter().enumerate() {
        let Some(l) = level(t) else { continue };
        if matches!(t, Token::Word(w) if w == "unskilled") {
            return Some(l);
        }
        let lo = k.saturating_sub(3);
        let near = tokens[lo..k].iter().chain(tokens.iter().skip(k + 1).take(2));
        if near.into_iter().any(|n| is_word(Some(n), &SKILL_ANCHORS)) {
            return Some(l);
        }
    }
    None
}

/// Grammar parse. Pure function of the text.
pub fn parse_inquiry(text: &str) -> Result<ConditionClass, InquiryError> {
    if text.trim().is_empty() {
        return Err(InquiryError::Empty);
    }
    let tokens = tokenize(text)?;
    let c = ConditionClass {
        capacity: capacity_slot(&tokens),
        skill: skill_slot(&tokens),
        max_machines: machine_slot(&tokens),
    };
    if c.is_empty() {
        return Err(InquiryError::Unrecognized { text: text.to_string() });
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BackendDescriptor {
    pub name: String,
    pub remote: bool,
}

pub trait InquiryBackend: Send + Sync {
    fn descriptor(&self) -> BackendDescriptor;
    fn parse(&self, text: &str) -> Result<ConditionClass, InquiryError>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GrammarBackend;

impl InquiryBackend for GrammarBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            name: "grammar".into(),
            remote: false,
        }
    }

    fn parse(&self, text: &str) -> Result<ConditionClass, InquiryError> {
        parse_inquiry(text)
    }
}

pub const ENV_ENDPOINT: &str = "GMS_INQUIRY_ENDPOINT";
pub const ENV_API_KEY: &str = "GMS_INQUIRY_API_KEY";
pub const ENV_MODEL: &str = "GMS_INQUIRY_MODEL";
pub const ENV_TIMEOUT_MS: &str = "GMS_INQUIRY_TIMEOUT_MS";

pub const EXTRACTION_PROMPT: &str = "Extract the production-line requirements from the user's request as a \
triple (capacity in parts/hour, human skill level high|moderate|low, maximum number of machines). \
Write None for anything not stated. Reply with the triple only, for example (240, None, 9).";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
}

impl RemoteConfig {
    /// `None` when no endpoint is configured.
    pub fn from_env() -> Option<Self> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Option<Self> {
        let endpoint = get(ENV_ENDPOINT).filter(|e| !e.is_empty())?;
        let timeout = get(ENV_TIMEOUT_MS).and_then(|t| t.parse().ok()).unwrap_or(10_000);
        Some(RemoteConfig {
            endpoint,
            api_key: get(ENV_API_KEY).filter(|k| !k.is_empty()),
            model: get(ENV_MODEL).unwrap_or_else(|| "gpt-4o-mini".into()),
            timeout: Duration::from_millis(timeout),
        })
    }
}

/// Sends one prompt and returns the raw reply text.
pub trait Transport: Send + Sync {
    fn complete(&self, config: &RemoteConfig, system: &str, user: &str) -> Result<String, String>;
}

impl<F> Transport for F
where
    F: Fn(&RemoteConfig, &str, &str) -> Result<String, String> + Send + Sync,
{
    fn complete(&self, config: &RemoteConfig, system: &str, user: &str) -> Result<String, String> {
        self(config, system, user)
    }
}

/// Chat-completions over HTTP.
#[derive(Clone, Copy, Debug, Default)]
pub struct HttpTransport;

impl Transport for HttpTransport {
    fn complete(&self, config: &RemoteConfig, system: &str, user: &str) -> Result<String, String> {
        let body = serde_json::json!({
            "model": config.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        });
        let agent = ureq::AgentBuilder::new().timeout(config.timeout).build();
        let mut req = agent.post(&config.endpoint).set("content-type", "application/json");
        if let Some(key) = &config.api_key {
            req = req.set("authorization", &format!("Bearer {key}"));
        }
        let reply = req.send_string(&body.to_string()).map_err(|e| e.to_string())?;
        let text = reply.into_string().map_err(|e| e.to_string())?;
        let json: serde_json::Value = serde_json::from_str(&text).map_err(|e| format!("reply is not JSON: {e}"))?;
        json.pointer("/choices/0/message/content")
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .ok_or_else(|| "reply has no message content".to_string())
    }
}

pub struct RemoteBackend {
    pub config: RemoteConfig,
    pub fallback: bool,
    transport: Box<dyn Transport>,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig, fallback: bool) -> Self {
        Self::with_transport(config, fallback, HttpTransport)
    }

    pub fn with_transport(config: RemoteConfig, fallback: bool, transport: impl Transport + 'static) -> Self {
        RemoteBackend {
            config,
            fallback,
            transport: Box::new(transport),
        }
    }

    fn fail(&self, text: &str, message: String) -> InquiryError {
        InquiryError::Remote {
            message,
            fallback: if self.fallback { parse_inquiry(text).ok() } else { None },
        }
    }
}

/// The first parenthesized triple in a reply.
fn extract_triple(reply: &str) -> Option<&str> {
    let start = reply.find('(')?;
    let end = start + reply[start..].find(')')?;
    Some(&reply[start..=end])
}

impl InquiryBackend for RemoteBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            name: format!("remote:{}", self.config.model),
            remote: true,
        }
    }

    /// With fallback enabled a failed remote call that the grammar can still
    /// answer yields the grammar's triple; otherwise the error carries it.
    fn parse(&self, text: &str) -> Result<ConditionClass, InquiryError> {
        if text.trim().is_empty() {
            return Err(InquiryError::Empty);
        }
        let outcome = self
            .transport
            .complete(&self.config, EXTRACTION_PROMPT, text)
            .and_then(|reply| {
                extract_triple(&reply)
                    .ok_or_else(|| format!("no triple in reply {reply:?}"))
                    .and_then(|t| t.parse::<ConditionClass>().map_err(|e| e.to_string()))
            });
        match outcome {
            Ok(c) => Ok(c),
            Err(message) => match self.fail(text, message) {
                InquiryError::Remote { fallback: Some(c), .. } => Ok(c),
                e => Err(e),
            },
        }
    }
}

/// Remote backend when the environment configures one, grammar otherwise.
pub fn backend_from_env(fallback: bool) -> Box<dyn InquiryBackend> {
    match RemoteConfig::from_env() {
        Some(cfg) => Box::new(RemoteBackend::new(cfg, fallback)),
        None => Box::new(GrammarBackend),
    }
}
