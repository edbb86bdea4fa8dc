//! BIDS-lite datasets: loading and validation, diagnosis-group derivation,
//! amyloid status, cohort selection and conversion from a flat table.
//!
//! Layout:
//!
//! ```text
//! <root>/participants.tsv
//! <root>/sub-<ID>/sub-<ID>_sessions.tsv
//! <root>/sub-<ID>/ses-<label>/anat/sub-<ID>_ses-<label>_T1w.nii[.gz]
//! <root>/sub-<ID>/ses-<label>/pet/sub-<ID>_ses-<label>_pet.nii[.gz]
//! ```

mod convert;
pub(crate) mod tsv;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::label::Label;
use crate::volume::{self, VolumeError};
use tsv::{optional, Table};

pub use convert::{convert_generic_tabular, GENERIC_COLUMNS};

pub const PARTICIPANT_COLUMNS: [&str; 6] = [
    "participant_id",
    "sex",
    "age_baseline",
    "diagnosis_baseline",
    "amyloid_tracer",
    "amyloid_suvr",
];
pub const SESSION_COLUMNS: [&str; 5] =
    ["session_id", "months_from_baseline", "diagnosis", "mmse", "cdr_global"];

/// Follow-up window for the sMCI/pMCI split.
pub const DEFAULT_PROGRESSION_WINDOW_MONTHS: u32 = 36;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{0}: participants.tsv not found")]
    MissingParticipantsFile(PathBuf),
    #[error("missing metadata: {0}")]
    MissingMetadata(String),
    #[error("{path}: malformed TSV: {detail}")]
    MalformedTsv { path: PathBuf, detail: String },
    #[error("participant {0} has no baseline session (months_from_baseline = 0)")]
    MissingBaseline(String),
    #[error("participant {participant}: baseline session diagnosis {session} disagrees with participants.tsv ({table})")]
    InconsistentBaseline { participant: String, session: Diagnosis, table: Diagnosis },
    #[error("image {path} is not a readable NIfTI volume: {source}")]
    InvalidImage {
        path: PathBuf,
        #[source]
        source: VolumeError,
    },
    #[error("{0}: unexpected layout")]
    UnexpectedLayout(String),
    #[error("baseline diagnosis is {0}, not MCI")]
    NotMciAtBaseline(Diagnosis),
    #[error("unknown amyloid tracer `{0}`")]
    UnknownTracer(String),
    #[error("invalid amyloid SUVR {0}")]
    InvalidSuvr(f64),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("group {group} of task `{task}` is empty")]
    EmptyGroup { task: String, group: &'static str },
    #[error("participant {0} matches both groups")]
    OverlappingGroups(String),
    #[error("two images for {participant}/{session}/{modality}")]
    DuplicateScan { participant: String, session: String, modality: Modality },
    #[error("image {0} referenced by the tabular file does not exist")]
    MissingImage(PathBuf),
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DatasetError>;

macro_rules! text_enum {
    ($name:ident { $($variant:ident => $text:literal $(| $alias:literal)*),+ $(,)? }) => {
        impl $name {
            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }
        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($text $(| $alias)* => Ok($name::$variant),)+
                    other => Err(format!("invalid {} `{}`", stringify!($name), other)),
                }
            }
        }
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sex {
    M,
    F,
    Unknown,
}
text_enum!(Sex { M => "M", F => "F", Unknown => "n/a" | "unknown" | "U" });

/// Clinical diagnosis. EMCI and LMCI collapse to MCI on parsing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Diagnosis {
    CN,
    MCI,
    AD,
}
text_enum!(Diagnosis { CN => "CN", MCI => "MCI" | "EMCI" | "LMCI", AD => "AD" });

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AmyloidTracer {
    PiB,
    AV45,
}
text_enum!(AmyloidTracer { PiB => "PiB", AV45 => "AV45" });

impl AmyloidTracer {
    /// SUVR positivity cutoff of the tracer.
    pub fn cutoff(self) -> f64 {
        match self {
            AmyloidTracer::PiB => 1.47,
            AmyloidTracer::AV45 => 1.10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "T1w")]
    T1w,
    #[serde(rename = "FDG-PET")]
    FdgPet,
}
text_enum!(Modality { T1w => "T1w", FdgPet => "FDG-PET" });

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::T1w, Modality::FdgPet];

    fn folder(self) -> &'static str {
        match self {
            Modality::T1w => "anat",
            Modality::FdgPet => "pet",
        }
    }

    fn suffix(self) -> &'static str {
        match self {
            Modality::T1w => "T1w",
            Modality::FdgPet => "pet",
        }
    }

    /// Path of the image relative to the dataset root, without extension.
    pub fn relative_stem(self, participant: &str, session: &str) -> PathBuf {
        Path::new(participant)
            .join(session)
            .join(self.folder())
            .join(format!("{participant}_{session}_{}", self.suffix()))
    }
}

/// Global clinical dementia rating.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CdrGlobal {
    Zero,
    Half,
    One,
    Two,
    Three,
}
text_enum!(CdrGlobal { Zero => "0" | "0.0", Half => "0.5", One => "1" | "1.0", Two => "2" | "2.0", Three => "3" | "3.0" });

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmyloidMeasure {
    pub tracer: AmyloidTracer,
    pub suvr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticipantRecord {
    pub participant_id: String,
    pub sex: Sex,
    pub age_at_baseline: f64,
    pub baseline_diagnosis: Diagnosis,
    /// Tracer and SUVR are present together or not at all.
    pub amyloid: Option<AmyloidMeasure>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub participant_id: String,
    pub session_label: String,
    pub months_from_baseline: u32,
    pub diagnosis: Diagnosis,
    pub mmse: Option<u8>,
    pub cdr_global: Option<CdrGlobal>,
    pub image_paths: BTreeMap<Modality, PathBuf>,
}

/// Validated, immutable view of a BIDS-lite dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    root: PathBuf,
    participants: Vec<ParticipantRecord>,
    sessions: BTreeMap<String, Vec<SessionRecord>>,
}

impl DatasetIndex {
    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Participants sorted by id.
    pub fn participants(&self) -> &[ParticipantRecord] {
        &self.participants
    }

    pub fn participant(&self, id: &str) -> Option<&ParticipantRecord> {
        self.participants
            .binary_search_by(|p| p.participant_id.as_str().cmp(id))
            .ok()
            .map(|i| &self.participants[i])
    }

    /// Sessions of a participant in increasing follow-up order.
    pub fn sessions(&self, participant_id: &str) -> &[SessionRecord] {
        self.sessions.get(participant_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn baseline(&self, participant_id: &str) -> Option<&SessionRecord> {
        self.sessions(participant_id).first().filter(|s| s.months_from_baseline == 0)
    }

    pub fn n_sessions(&self) -> usize {
        self.sessions.values().map(Vec::len).sum()
    }

    /// Baseline image of a participant for a modality.
    pub fn baseline_image(&self, participant_id: &str, modality: Modality) -> Option<&Path> {
        self.baseline(participant_id)?.image_paths.get(&modality).map(PathBuf::as_path)
    }

    /// Every file the index was built from, sorted.
    pub fn source_files(&self) -> Vec<PathBuf> {
        let mut files = vec![self.root.join("participants.tsv")];
        for p in &self.participants {
            let id = &p.participant_id;
            files.push(self.root.join(id).join(format!("{id}_sessions.tsv")));
            for s in self.sessions(id) {
                files.extend(s.image_paths.values().cloned());
            }
        }
        files.sort();
        files
    }
}

fn is_valid_entity(value: &str, prefix: &str) -> bool {
    value
        .strip_prefix(prefix)
        .is_some_and(|rest| !rest.is_empty() && rest.chars().all(|c| c.is_ascii_alphanumeric()))
}

fn is_valid_session_label(value: &str) -> bool {
    value
        .strip_prefix("ses-M")
        .is_some_and(|rest| !rest.is_empty() && rest.chars().all(|c| c.is_ascii_digit()))
}

pub(crate) fn parse_participant(table: &Table, cols: &[usize], row: usize) -> Result<ParticipantRecord> {
    let f = &table.rows[row];
    let get = |i: usize| f[cols[i]].as_str();
    let participant_id = get(0).to_string();
    if !is_valid_entity(&participant_id, "sub-") {
        return Err(table.malformed(row, format!("invalid participant_id `{participant_id}`")));
    }
    let sex = match optional(get(1)) {
        None => Sex::Unknown,
        Some(s) => s.parse().map_err(|e: String| table.malformed(row, e))?,
    };
    let age_at_baseline: f64 = get(2)
        .parse()
        .ok()
        .filter(|a: &f64| a.is_finite() && *a >= 0.0)
        .ok_or_else(|| table.malformed(row, format!("invalid age_baseline `{}`", get(2))))?;
    let baseline_diagnosis = get(3).parse().map_err(|e: String| table.malformed(row, e))?;
    let amyloid = match (optional(get(4)), optional(get(5))) {
        (None, None) => None,
        (Some(tracer), Some(suvr)) => {
            let tracer = tracer
                .parse()
                .map_err(|_| table.malformed(row, format!("unknown amyloid tracer `{tracer}`")))?;
            let suvr: f64 = suvr
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite() && *v > 0.0)
                .ok_or_else(|| table.malformed(row, format!("invalid amyloid_suvr `{suvr}`")))?;
            Some(AmyloidMeasure { tracer, suvr })
        }
        _ => {
            return Err(table.malformed(row, "amyloid_tracer and amyloid_suvr must be given together"))
        }
    };
    Ok(ParticipantRecord { participant_id, sex, age_at_baseline, baseline_diagnosis, amyloid })
}

/// Session fields except images; `cols` follows [`SESSION_COLUMNS`].
pub(crate) fn parse_session(
    table: &Table,
    cols: &[usize],
    row: usize,
    participant_id: &str,
) -> Result<SessionRecord> {
    let f = &table.rows[row];
    let get = |i: usize| f[cols[i]].as_str();
    let session_label = get(0).to_string();
    if !is_valid_session_label(&session_label) {
        return Err(table.malformed(row, format!("invalid session_id `{session_label}`")));
    }
    let months_from_baseline = get(1)
        .parse()
        .map_err(|_| table.malformed(row, format!("invalid months_from_baseline `{}`", get(1))))?;
    let diagnosis = get(2).parse().map_err(|e: String| table.malformed(row, e))?;
    let mmse = match optional(get(3)) {
        None => None,
        Some(v) => Some(
            v.parse::<u8>()
                .ok()
                .filter(|m| *m <= 30)
                .ok_or_else(|| table.malformed(row, format!("invalid mmse `{v}`")))?,
        ),
    };
    let cdr_global = match optional(get(4)) {
        None => None,
        Some(v) => Some(v.parse().map_err(|e: String| table.malformed(row, e))?),
    };
    Ok(SessionRecord {
        participant_id: participant_id.to_string(),
        session_label,
        months_from_baseline,
        diagnosis,
        mmse,
        cdr_global,
        image_paths: BTreeMap::new(),
    })
}

fn subdirectories(dir: &Path, prefix: &str) -> Result<BTreeSet<String>> {
    let entries = fs::read_dir(dir).map_err(|source| DatasetError::Io { path: dir.to_path_buf(), source })?;
    let mut names = BTreeSet::new();
    for entry in entries {
        let entry = entry.map_err(|source| DatasetError::Io { path: dir.to_path_buf(), source })?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with(prefix) && entry.path().is_dir() {
            names.insert(name);
        }
    }
    Ok(names)
}

fn find_image(root: &Path, participant: &str, session: &str, modality: Modality) -> Result<Option<PathBuf>> {
    let stem = root.join(modality.relative_stem(participant, session));
    let candidates: Vec<PathBuf> = ["nii", "nii.gz"]
        .iter()
        .map(|ext| PathBuf::from(format!("{}.{ext}", stem.display())))
        .filter(|p| p.is_file())
        .collect();
    match candidates.as_slice() {
        [] => Ok(None),
        [one] => {
            volume::read_header(one).map_err(|source| DatasetError::InvalidImage { path: one.clone(), source })?;
            Ok(Some(one.clone()))
        }
        _ => Err(DatasetError::DuplicateScan {
            participant: participant.into(),
            session: session.into(),
            modality,
        }),
    }
}

/// Loads and validates a BIDS-lite tree.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<DatasetIndex> {
    let root = root.as_ref().to_path_buf();
    let participants_path = root.join("participants.tsv");
    if !participants_path.is_file() {
        return Err(DatasetError::MissingParticipantsFile(root));
    }
    let table = Table::read(&participants_path)?;
    let cols = table.columns(&PARTICIPANT_COLUMNS)?;
    let mut participants = Vec::with_capacity(table.rows.len());
    let mut seen = BTreeSet::new();
    for row in 0..table.rows.len() {
        let record = parse_participant(&table, &cols, row)?;
        if !seen.insert(record.participant_id.clone()) {
            return Err(table.malformed(row, format!("duplicate participant_id {}", record.participant_id)));
        }
        participants.push(record);
    }
    participants.sort_by(|a, b| a.participant_id.cmp(&b.participant_id));

    let folders = subdirectories(&root, "sub-")?;
    if let Some(orphan) = folders.difference(&seen).next() {
        return Err(DatasetError::MissingMetadata(format!(
            "folder {orphan} has no row in participants.tsv"
        )));
    }
    if let Some(absent) = seen.difference(&folders).next() {
        return Err(DatasetError::MissingMetadata(format!(
            "participant {absent} listed in participants.tsv has no folder"
        )));
    }

    let mut sessions = BTreeMap::new();
    for participant in &participants {
        let id = &participant.participant_id;
        let list = load_sessions(&root, participant)?;
        sessions.insert(id.clone(), list);
    }
    Ok(DatasetIndex { root, participants, sessions })
}

fn load_sessions(root: &Path, participant: &ParticipantRecord) -> Result<Vec<SessionRecord>> {
    let id = &participant.participant_id;
    let path = root.join(id).join(format!("{id}_sessions.tsv"));
    if !path.is_file() {
        return Err(DatasetError::MissingMetadata(format!("{} not found", path.display())));
    }
    let table = Table::read(&path)?;
    let cols = table.columns(&SESSION_COLUMNS)?;
    let mut list = (0..table.rows.len())
        .map(|row| parse_session(&table, &cols, row, id))
        .collect::<Result<Vec<_>>>()?;
    list.sort_by_key(|s| s.months_from_baseline);
    for pair in list.windows(2) {
        if pair[0].months_from_baseline == pair[1].months_from_baseline {
            return Err(DatasetError::MalformedTsv {
                path: path.clone(),
                detail: format!("two sessions at month {}", pair[0].months_from_baseline),
            });
        }
    }
    let labels: BTreeSet<&str> = list.iter().map(|s| s.session_label.as_str()).collect();
    if labels.len() != list.len() {
        return Err(DatasetError::MalformedTsv { path, detail: "duplicate session_id".into() });
    }
    match list.first() {
        Some(b) if b.months_from_baseline == 0 => {
            if b.diagnosis != participant.baseline_diagnosis {
                return Err(DatasetError::InconsistentBaseline {
                    participant: id.clone(),
                    session: b.diagnosis,
                    table: participant.baseline_diagnosis,
                });
            }
        }
        _ => return Err(DatasetError::MissingBaseline(id.clone())),
    }

    let folders = subdirectories(&root.join(id), "ses-")?;
    if let Some(orphan) = folders.iter().find(|f| !labels.contains(f.as_str())) {
        return Err(DatasetError::MissingMetadata(format!(
            "folder {id}/{orphan} has no row in {id}_sessions.tsv"
        )));
    }
    for session in &mut list {
        for modality in Modality::ALL {
            if let Some(image) = find_image(root, id, &session.session_label, modality)? {
                session.image_paths.insert(modality, image);
            }
        }
    }
    Ok(list)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProgressionLabel {
    #[serde(rename = "sMCI")]
    Stable,
    #[serde(rename = "pMCI")]
    Progressive,
    #[serde(rename = "unlabeled")]
    Unlabeled,
}

/// sMCI/pMCI status of a participant who is MCI at baseline.
///
/// Progression means an AD diagnosis at any visit up to `window_months`;
/// either label requires follow-up reaching the window.
pub fn derive_progression_label(sessions: &[SessionRecord], window_months: u32) -> Result<ProgressionLabel> {
    let baseline = sessions
        .iter()
        .find(|s| s.months_from_baseline == 0)
        .ok_or_else(|| DatasetError::MissingBaseline(
            sessions.first().map(|s| s.participant_id.clone()).unwrap_or_default(),
        ))?;
    if baseline.diagnosis != Diagnosis::MCI {
        return Err(DatasetError::NotMciAtBaseline(baseline.diagnosis));
    }
    let follow_up = sessions.iter().map(|s| s.months_from_baseline).max().unwrap_or(0);
    if follow_up < window_months {
        return Ok(ProgressionLabel::Unlabeled);
    }
    let progressed = sessions
        .iter()
        .any(|s| s.months_from_baseline <= window_months && s.diagnosis == Diagnosis::AD);
    Ok(if progressed { ProgressionLabel::Progressive } else { ProgressionLabel::Stable })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AmyloidStatus {
    Positive,
    Negative,
}

/// Positive iff the SUVR strictly exceeds the tracer cutoff.
pub fn amyloid_status(tracer: &str, suvr: f64) -> Result<AmyloidStatus> {
    let tracer: AmyloidTracer = tracer.parse().map_err(|_| DatasetError::UnknownTracer(tracer.to_string()))?;
    amyloid_status_for(tracer, suvr)
}

pub fn amyloid_status_for(tracer: AmyloidTracer, suvr: f64) -> Result<AmyloidStatus> {
    if !(suvr.is_finite() && suvr > 0.0) {
        return Err(DatasetError::InvalidSuvr(suvr));
    }
    Ok(if suvr > tracer.cutoff() { AmyloidStatus::Positive } else { AmyloidStatus::Negative })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DerivedLabel {
    CN,
    AD,
    MCI,
    #[serde(rename = "sMCI")]
    SMCI,
    #[serde(rename = "pMCI")]
    PMCI,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AmyloidConstraint {
    Positive,
    Negative,
    #[default]
    Any,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    pub label: DerivedLabel,
    #[serde(default)]
    pub amyloid: AmyloidConstraint,
}

/// Binary task: `group_a` is labeled -1, `group_b` +1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub group_a: GroupSpec,
    pub group_b: GroupSpec,
    #[serde(default = "default_window")]
    pub window_months: u32,
}

fn default_window() -> u32 {
    DEFAULT_PROGRESSION_WINDOW_MONTHS
}

impl TaskSpec {
    pub fn new(name: impl Into<String>, group_a: GroupSpec, group_b: GroupSpec) -> Self {
        TaskSpec { name: name.into(), group_a, group_b, window_months: DEFAULT_PROGRESSION_WINDOW_MONTHS }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_".contains(c)) {
            return Err(DatasetError::InvalidTask(format!(
                "name `{}` must be nonempty and use only [A-Za-z0-9_-]",
                self.name
            )));
        }
        if self.group_a == self.group_b {
            return Err(DatasetError::InvalidTask("group_a and group_b are identical".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortEntry {
    pub participant_id: String,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CohortTable {
    entries: Vec<CohortEntry>,
}

impl CohortTable {
    pub fn new(entries: Vec<CohortEntry>) -> Result<Self> {
        let ids: BTreeSet<&str> = entries.iter().map(|e| e.participant_id.as_str()).collect();
        if ids.len() != entries.len() {
            return Err(DatasetError::InvalidTask("cohort lists a participant twice".into()));
        }
        let table = CohortTable { entries };
        let (neg, pos) = table.class_counts();
        if neg == 0 || pos == 0 {
            return Err(DatasetError::EmptyGroup {
                task: "cohort".into(),
                group: if neg == 0 { "group_a" } else { "group_b" },
            });
        }
        Ok(table)
    }

    pub fn entries(&self) -> &[CohortEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.entries.iter().map(|e| e.label).collect()
    }

    pub fn participant_ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.participant_id.clone()).collect()
    }

    /// (group_a, group_b) sizes.
    pub fn class_counts(&self) -> (usize, usize) {
        crate::label::class_counts(&self.labels())
    }

    /// Keeps the entries at `indices` (ascending positions into this table).
    pub fn subset(&self, indices: &[usize]) -> Result<CohortTable> {
        CohortTable::new(indices.iter().map(|&i| self.entries[i].clone()).collect())
    }
}

fn matches_group(index: &DatasetIndex, p: &ParticipantRecord, group: &GroupSpec, window: u32) -> Result<bool> {
    let label_ok = match group.label {
        DerivedLabel::CN => p.baseline_diagnosis == Diagnosis::CN,
        DerivedLabel::AD => p.baseline_diagnosis == Diagnosis::AD,
        DerivedLabel::MCI => p.baseline_diagnosis == Diagnosis::MCI,
        DerivedLabel::SMCI | DerivedLabel::PMCI => {
            if p.baseline_diagnosis != Diagnosis::MCI {
                false
            } else {
                let wanted = if group.label == DerivedLabel::SMCI {
                    ProgressionLabel::Stable
                } else {
                    ProgressionLabel::Progressive
                };
                derive_progression_label(index.sessions(&p.participant_id), window)? == wanted
            }
        }
    };
    if !label_ok {
        return Ok(false);
    }
    Ok(match (group.amyloid, p.amyloid) {
        (AmyloidConstraint::Any, _) => true,
        (_, None) => false,
        (constraint, Some(m)) => {
            let status = amyloid_status_for(m.tracer, m.suvr)?;
            match constraint {
                AmyloidConstraint::Positive => status == AmyloidStatus::Positive,
                _ => status == AmyloidStatus::Negative,
            }
        }
    })
}

/// Participants of each group that have every required modality at baseline,
/// in participant-id order.
pub fn select_cohort(index: &DatasetIndex, task: &TaskSpec, required_modalities: &[Modality]) -> Result<CohortTable> {
    task.validate()?;
    let mut entries = Vec::new();
    for p in index.participants() {
        let id = &p.participant_id;
        let has_images = required_modalities.iter().all(|&m| index.baseline_image(id, m).is_some());
        if !has_images {
            continue;
        }
        let in_a = matches_group(index, p, &task.group_a, task.window_months)?;
        let in_b = matches_group(index, p, &task.group_b, task.window_months)?;
        let label = match (in_a, in_b) {
            (true, true) => return Err(DatasetError::OverlappingGroups(id.clone())),
            (true, false) => Label::Negative,
            (false, true) => Label::Positive,
            (false, false) => continue,
        };
        entries.push(CohortEntry { participant_id: id.clone(), label });
    }
    let (neg, pos) = crate::label::class_counts(&entries.iter().map(|e| e.label).collect::<Vec<_>>());
    if neg == 0 || pos == 0 {
        return Err(DatasetError::EmptyGroup {
            task: task.name.clone(),
            group: if neg == 0 { "group_a" } else { "group_b" },
        });
    }
    CohortTable::new(entries)
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use crate::volume::{write_volume, Grid, Volume3D};

    /// (id, baseline diagnosis, [(months, diagnosis)], amyloid, with_t1w)
    pub type Spec<'a> = (&'a str, Diagnosis, Vec<(u32, Diagnosis)>, Option<(AmyloidTracer, f64)>, bool);

    pub fn write_tree(root: &Path, specs: &[Spec]) {
        let grid = Grid::new([2, 2, 2], [1.0; 3], [0.0; 3]).unwrap();
        let vol = Volume3D::filled(grid, 1.0).unwrap();
        let mut rows = Vec::new();
        for (id, dx, visits, amyloid, t1) in specs {
            let (tracer, suvr) = match amyloid {
                Some((t, s)) => (t.to_string(), s.to_string()),
                None => ("n/a".into(), "n/a".into()),
            };
            rows.push(vec![id.to_string(), "F".into(), "70.5".into(), dx.to_string(), tracer, suvr]);
            let dir = root.join(id);
            fs::create_dir_all(&dir).unwrap();
            let session_rows: Vec<Vec<String>> = visits
                .iter()
                .map(|(m, d)| vec![format!("ses-M{m:02}"), m.to_string(), d.to_string(), "n/a".into(), "n/a".into()])
                .collect();
            tsv::write(&dir.join(format!("{id}_sessions.tsv")), &SESSION_COLUMNS, &session_rows).unwrap();
            if *t1 {
                let anat = dir.join("ses-M00").join("anat");
                fs::create_dir_all(&anat).unwrap();
                write_volume(&vol, anat.join(format!("{id}_ses-M00_T1w.nii.gz"))).unwrap();
            }
        }
        tsv::write(&root.join("participants.tsv"), &PARTICIPANT_COLUMNS, &rows).unwrap();
    }
}
