//! Template-based vibration–text corpus and canonical fault labels.
//!
//! Each clip's metadata is turned into a small set of fields, which are then
//! poured into one of six sentence templates. Templates carry inline synonym
//! slots written `{first|second}`; the first alternative is the base form.
//! A seed picks every alternative, so a description can always be rebuilt
//! from `(fields, template_id, seed)`.
//!
//! [`parse_fields`] is the keyword-table inverse used to check that every
//! description still names the right fault.

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synth::{self, FaultCondition, FaultType, ManifestRecord, Split};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CorpusError {
    #[error("unknown template id {0}")]
    UnknownTemplate(usize),
    #[error("manifest is empty")]
    EmptyManifest,
    #[error("n_variants must be at least 1")]
    NoVariants,
    #[error("unparseable description: {0}")]
    Unparseable(String),
    #[error("no label in set {set:?} for {fault_type} at {severity_um} um")]
    UnknownClass {
        set: String,
        fault_type: FaultType,
        severity_um: u32,
    },
}

/// Question asked when requesting a diagnosis.
pub const DIAGNOSIS_QUESTION: &str = "What is the bearing condition?";
/// Question paired with descriptions during alignment training.
pub const DESCRIBE_QUESTION: &str = "Describe the vibration signal.";

pub const SEVERITY_QUESTION: &str = "How severe is the damage?";
pub const LOCATION_QUESTION: &str = "Where is the fault located?";
pub const ACTION_QUESTION: &str = "What maintenance is recommended?";
pub const FOLLOW_UP_QUESTIONS: [&str; 3] = [SEVERITY_QUESTION, LOCATION_QUESTION, ACTION_QUESTION];

const TEMPLATES: [(&str, &str); 6] = [
    (
        "A {bearing|bearing unit} running at {speed} rpm under {load} N {shows|exhibits} {characteristics}, indicating a {severity} {location} fault.",
        "A {bearing|bearing unit} running at {speed} rpm under {load} N {shows|exhibits} {characteristics}, indicating a healthy condition.",
    ),
    (
        "At {speed} rpm and {load} N of radial load, the vibration {contains|is dominated by} {characteristics}; this points to {severity} damage on the {location}.",
        "At {speed} rpm and {load} N of radial load, the vibration {contains|is dominated by} {characteristics}; no damage is evident and the bearing is healthy.",
    ),
    (
        "The {signal|recording} at {speed} rpm with {load} N load {contains|reveals} {characteristics}, consistent with a {severity} {location} defect.",
        "The {signal|recording} at {speed} rpm with {load} N load {contains|reveals} only {characteristics}, consistent with a healthy bearing.",
    ),
    (
        "Diagnosis: {location} fault, severity {severity}. The {bearing|shaft bearing} ran at {speed} rpm under {load} N and {showed|produced} {characteristics}.",
        "Diagnosis: healthy bearing. The {bearing|shaft bearing} ran at {speed} rpm under {load} N and {showed|produced} {characteristics}.",
    ),
    (
        "{Under|With} a load of {load} N at {speed} rpm, {characteristics} {reveal|suggest} a {severity} fault on the {location}.",
        "{Under|With} a load of {load} N at {speed} rpm, {characteristics} {reveal|suggest} a healthy bearing with no fault.",
    ),
    (
        "{Vibration|Acceleration} data from a {speed} rpm, {load} N test {shows|indicates} {characteristics}, the signature of {severity} {location} damage.",
        "{Vibration|Acceleration} data from a {speed} rpm, {load} N test {shows|indicates} {characteristics}, the signature of a healthy bearing.",
    ),
];

pub const TEMPLATE_COUNT: usize = TEMPLATES.len();

fn location_variants(t: FaultType) -> &'static [&'static str] {
    match t {
        FaultType::Healthy => &[],
        FaultType::InnerRace => &["inner race", "inner ring"],
        FaultType::OuterRace => &["outer race", "outer ring"],
        FaultType::Roller => &["roller", "rolling element"],
    }
}

fn characteristic_variants(t: FaultType) -> &'static [&'static str] {
    match t {
        FaultType::Healthy => &[
            "stationary background noise",
            "stationary broadband background noise",
        ],
        FaultType::InnerRace => &[
            "periodic high-frequency impact pulses",
            "periodic high-frequency impulsive bursts",
        ],
        FaultType::OuterRace => &[
            "evenly spaced impact pulses at a steady repetition rate",
            "evenly spaced impulsive bursts at a steady repetition rate",
        ],
        FaultType::Roller => &[
            "intermittent impact pulses modulated at the cage rate",
            "intermittent impulsive bursts modulated at the cage rate",
        ],
    }
}

const QUALITATIVE: [(u32, &str); 3] = [(150, "mild"), (250, "moderate"), (450, "severe")];

/// Slot values for one description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptionFields {
    pub fault_type: FaultType,
    /// Base location phrase, empty for healthy bearings.
    pub location: String,
    /// `"150 µm"`, or `"none"` for healthy bearings.
    pub severity: String,
    pub speed_rpm: f64,
    pub load_n: f64,
    pub characteristics: String,
}

impl DescriptionFields {
    pub fn from_condition(cond: &FaultCondition) -> Self {
        let t = cond.fault_type;
        Self {
            fault_type: t,
            location: location_variants(t).first().copied().unwrap_or("").to_string(),
            severity: severity_text(cond.severity_um),
            speed_rpm: cond.speed_rpm,
            load_n: cond.load_n,
            characteristics: characteristic_variants(t)[0].to_string(),
        }
    }
}

fn severity_text(um: u32) -> String {
    if um == 0 {
        "none".to_string()
    } else {
        format!("{um} µm")
    }
}

fn format_number(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

/// Source of synonym choices while rendering.
trait VariantPicker {
    fn pick(&mut self, n: usize) -> usize;
}

struct SeededPicker(ChaCha8Rng);

impl VariantPicker for SeededPicker {
    fn pick(&mut self, n: usize) -> usize {
        if n <= 1 {
            0
        } else {
            self.0.random_range(0..n)
        }
    }
}

struct BasePicker;

impl VariantPicker for BasePicker {
    fn pick(&mut self, _n: usize) -> usize {
        0
    }
}

/// Fills template `template_id` using seed-chosen synonym variants.
pub fn render_description(
    fields: &DescriptionFields,
    template_id: usize,
    seed: u64,
) -> Result<String, CorpusError> {
    render_with(fields, template_id, &mut SeededPicker(ChaCha8Rng::seed_from_u64(seed)))
}

/// Fills template `template_id` with the first alternative of every synonym slot.
pub fn render_base(fields: &DescriptionFields, template_id: usize) -> Result<String, CorpusError> {
    render_with(fields, template_id, &mut BasePicker)
}

fn pick_variant(value: &str, table: &[&str], picker: &mut dyn VariantPicker) -> String {
    if table.contains(&value) {
        table[picker.pick(table.len())].to_string()
    } else {
        value.to_string()
    }
}

fn render_with(
    fields: &DescriptionFields,
    template_id: usize,
    picker: &mut dyn VariantPicker,
) -> Result<String, CorpusError> {
    let (faulty, healthy) = TEMPLATES
        .get(template_id)
        .ok_or(CorpusError::UnknownTemplate(template_id))?;
    let template = if fields.fault_type == FaultType::Healthy {
        healthy
    } else {
        faulty
    };

    // Field variants are drawn first and in a fixed order so the draw sequence
    // does not depend on where fields appear in the template.
    let location = pick_variant(&fields.location, location_variants(fields.fault_type), picker);
    let characteristics = pick_variant(
        &fields.characteristics,
        characteristic_variants(fields.fault_type),
        picker,
    );
    let severity = match picker.pick(2) {
        1 => QUALITATIVE
            .iter()
            .find(|(um, _)| severity_text(*um) == fields.severity)
            .map(|(_, q)| q.to_string())
            .unwrap_or_else(|| fields.severity.clone()),
        _ => fields.severity.clone(),
    };

    let mut out = String::with_capacity(template.len() + 64);
    let mut rest = *template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let close = open + rest[open..].find('}').expect("template braces balanced");
        let slot = &rest[open + 1..close];
        if slot.contains('|') {
            let alts: Vec<&str> = slot.split('|').collect();
            out.push_str(alts[picker.pick(alts.len())]);
        } else {
            match slot {
                "speed" => out.push_str(&format_number(fields.speed_rpm)),
                "load" => out.push_str(&format_number(fields.load_n)),
                "location" => out.push_str(&location),
                "severity" => out.push_str(&severity),
                "characteristics" => out.push_str(&characteristics),
                other => unreachable!("unknown template slot {other}"),
            }
        }
        rest = &rest[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Fields recovered from a rendered description.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedFields {
    pub fault_type: FaultType,
    /// Base location phrase (`None` for healthy).
    pub location: Option<String>,
    /// Numeric form, e.g. `"150 µm"`, or `"none"` for healthy.
    pub severity: String,
    pub speed_rpm: Option<f64>,
    pub load_n: Option<f64>,
}

/// Keyword-table inverse of [`render_description`].
pub fn parse_fields(description: &str) -> Result<ParsedFields, CorpusError> {
    let text = description.to_lowercase();
    let unparseable = |why: &str| CorpusError::Unparseable(format!("{why}: {description:?}"));

    let mut found: BTreeSet<FaultType> = BTreeSet::new();
    for t in [FaultType::InnerRace, FaultType::OuterRace, FaultType::Roller] {
        if location_variants(t).iter().any(|v| text.contains(v)) {
            found.insert(t);
        }
    }
    let fault_type = match found.len() {
        0 if text.contains("stationary") && text.contains("healthy") => FaultType::Healthy,
        0 => return Err(unparseable("no fault location or healthy marker")),
        1 => *found.iter().next().unwrap(),
        _ => return Err(unparseable("conflicting fault locations")),
    };

    let severity = if fault_type == FaultType::Healthy {
        "none".to_string()
    } else {
        parse_severity(&text).ok_or_else(|| unparseable("no severity"))?
    };

    Ok(ParsedFields {
        fault_type,
        location: location_variants(fault_type).first().map(|s| s.to_string()),
        severity,
        speed_rpm: number_before(&text, " rpm"),
        load_n: number_before(&text, " n "),
    })
}

fn parse_severity(text: &str) -> Option<String> {
    let mut hits = BTreeSet::new();
    for (um, q) in QUALITATIVE {
        if text.split(|c: char| !c.is_alphanumeric()).any(|w| w == q) {
            hits.insert(um);
        }
        if text.contains(&format!("{um} µm")) || text.contains(&format!("{um} um")) {
            hits.insert(um);
        }
    }
    if hits.len() == 1 {
        hits.into_iter().next().map(severity_text)
    } else {
        None
    }
}

fn number_before(text: &str, unit: &str) -> Option<f64> {
    let idx = text.find(unit)?;
    let head = &text[..idx];
    let start = head
        .rfind(|c: char| !(c.is_ascii_digit() || c == '.'))
        .map_or(0, |i| i + 1);
    head[start..].parse().ok()
}

/// One label of a [`LabelSet`] and the class it names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub label: String,
    pub fault_type: FaultType,
    /// `None` matches any severity of this fault type.
    pub severity_um: Option<u32>,
}

/// Ordered canonical label strings, one per class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    pub name: String,
    pub entries: Vec<LabelEntry>,
}

impl LabelSet {
    /// Healthy plus inner-ring and roller indentations at three sizes.
    pub fn dirg7() -> Self {
        let mut entries = vec![LabelEntry {
            label: "healthy 0A".into(),
            fault_type: FaultType::Healthy,
            severity_um: Some(0),
        }];
        for (t, name) in [(FaultType::InnerRace, "inner ring"), (FaultType::Roller, "roller")] {
            for um in [450, 250, 150] {
                entries.push(LabelEntry {
                    label: format!("{name} indentation {um} um"),
                    fault_type: t,
                    severity_um: Some(um),
                });
            }
        }
        Self {
            name: "dirg7".into(),
            entries,
        }
    }

    pub fn hit3() -> Self {
        let e = |label: &str, t| LabelEntry {
            label: label.into(),
            fault_type: t,
            severity_um: None,
        };
        Self {
            name: "hit3".into(),
            entries: vec![
                e("healthy", FaultType::Healthy),
                e("inner ring defect", FaultType::InnerRace),
                e("outer ring defect", FaultType::OuterRace),
            ],
        }
    }

    pub fn toy4() -> Self {
        let e = |label: &str, t| LabelEntry {
            label: label.into(),
            fault_type: t,
            severity_um: None,
        };
        Self {
            name: "toy4".into(),
            entries: vec![
                e("healthy", FaultType::Healthy),
                e("inner race fault", FaultType::InnerRace),
                e("outer race fault", FaultType::OuterRace),
                e("roller fault", FaultType::Roller),
            ],
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "dirg7" => Some(Self::dirg7()),
            "hit3" => Some(Self::hit3()),
            "toy4" => Some(Self::toy4()),
            _ => None,
        }
    }

    pub fn labels(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.label.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.label == label)
    }

    /// Checks label uniqueness and that no condition matches two labels.
    pub fn validate(&self) -> Result<(), String> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(&e.label) {
                return Err(format!("duplicate label {:?}", e.label));
            }
        }
        for (i, a) in self.entries.iter().enumerate() {
            for b in &self.entries[i + 1..] {
                let overlap = a.fault_type == b.fault_type
                    && (a.severity_um.is_none()
                        || b.severity_um.is_none()
                        || a.severity_um == b.severity_um);
                if overlap {
                    return Err(format!("labels {:?} and {:?} overlap", a.label, b.label));
                }
            }
        }
        Ok(())
    }
}

/// The canonical label string for a condition.
pub fn canonical_label(cond: &FaultCondition, set: &LabelSet) -> Result<String, CorpusError> {
    set.entries
        .iter()
        .find(|e| {
            e.fault_type == cond.fault_type
                && e.severity_um.is_none_or(|s| s == cond.severity_um)
        })
        .map(|e| e.label.clone())
        .ok_or_else(|| CorpusError::UnknownClass {
            set: set.name.clone(),
            fault_type: cond.fault_type,
            severity_um: cond.severity_um,
        })
}

/// Templated answers to the follow-up questions, keyed by the true condition.
pub fn follow_up_pairs(cond: &FaultCondition) -> Vec<(String, String)> {
    let severity = match cond.severity_um {
        0 => "no damage".to_string(),
        um => format!("{um} um"),
    };
    let location = location_variants(cond.fault_type)
        .first()
        .copied()
        .unwrap_or("no fault present")
        .to_string();
    let action = match cond.severity_um {
        0 => "continue normal operation",
        150 => "monitor the bearing closely",
        250 => "schedule a bearing replacement",
        _ => "replace the bearing immediately",
    }
    .to_string();
    vec![
        (SEVERITY_QUESTION.to_string(), severity),
        (LOCATION_QUESTION.to_string(), location),
        (ACTION_QUESTION.to_string(), action),
    ]
}

/// One line of the corpus JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub clip: String,
    pub text: String,
    pub label: String,
    pub fields: DescriptionFields,
    pub split: Split,
    pub template_id: usize,
    pub seed: u64,
}

/// `n_variants` descriptions per manifest clip, each with its own `(template, seed)` draw.
pub fn build_corpus(
    manifest: &[ManifestRecord],
    labels: &LabelSet,
    n_variants: usize,
    seed: u64,
) -> Result<Vec<CorpusRecord>, CorpusError> {
    if manifest.is_empty() {
        return Err(CorpusError::EmptyManifest);
    }
    if n_variants == 0 {
        return Err(CorpusError::NoVariants);
    }
    let mut out = Vec::with_capacity(manifest.len() * n_variants);
    for (i, rec) in manifest.iter().enumerate() {
        let cond = rec.condition();
        let fields = DescriptionFields::from_condition(&cond);
        let label = canonical_label(&cond, labels)?;
        for v in 0..n_variants {
            let pair_seed = synth::derive_seed(seed, i, v);
            let template_id = (pair_seed % TEMPLATE_COUNT as u64) as usize;
            let text = render_description(&fields, template_id, pair_seed)?;
            out.push(CorpusRecord {
                clip: rec.path.clone(),
                text,
                label: label.clone(),
                fields: fields.clone(),
                split: rec.split,
                template_id,
                seed: pair_seed,
            });
        }
    }
    Ok(out)
}

/// Serializes records as UTF-8 JSONL with LF endings.
pub fn corpus_to_jsonl(records: &[CorpusRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("corpus records serialize"));
        out.push('\n');
    }
    out
}

pub fn read_corpus(path: &Path) -> std::io::Result<Vec<CorpusRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
        })
        .collect()
}
