//! Conversion of a flat subject/session table plus an image folder into a
//! BIDS-lite tree.
//!
//! The input has one row per (participant, session) with the participant
//! and session columns of the BIDS-lite tables, plus `image_file_t1w` and
//! `image_file_pet` holding paths relative to the image folder (or `n/a`).
//! Images are copied byte for byte, so converting twice yields identical trees.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::tsv::{self, optional, Table};
use super::{
    load_dataset, parse_participant, parse_session, DatasetError, DatasetIndex, Modality, ParticipantRecord,
    Result, SessionRecord, PARTICIPANT_COLUMNS, SESSION_COLUMNS,
};
use crate::volume;

pub const GENERIC_COLUMNS: [&str; 13] = [
    "participant_id",
    "sex",
    "age_baseline",
    "diagnosis_baseline",
    "amyloid_tracer",
    "amyloid_suvr",
    "session_id",
    "months_from_baseline",
    "diagnosis",
    "mmse",
    "cdr_global",
    "image_file_t1w",
    "image_file_pet",
];

struct PendingSession {
    record: SessionRecord,
    sources: BTreeMap<Modality, PathBuf>,
    raw: Vec<String>,
}

fn extension_of(path: &Path) -> Option<&'static str> {
    let name = path.file_name()?.to_string_lossy();
    if name.ends_with(".nii.gz") {
        Some("nii.gz")
    } else if name.ends_with(".nii") {
        Some("nii")
    } else {
        None
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

/// Writes a BIDS-lite tree under `out_root` and returns it loaded back.
pub fn convert_generic_tabular(
    tabular_path: impl AsRef<Path>,
    image_dir: impl AsRef<Path>,
    out_root: impl AsRef<Path>,
) -> Result<DatasetIndex> {
    let image_dir = image_dir.as_ref();
    let out_root = out_root.as_ref();
    let table = Table::read(tabular_path.as_ref())?;
    let cols = table.columns(&GENERIC_COLUMNS)?;
    let participant_cols = &cols[0..6];
    let session_cols = &cols[6..11];
    let image_cols = [(Modality::T1w, cols[11]), (Modality::FdgPet, cols[12])];

    let mut participants: BTreeMap<String, (ParticipantRecord, Vec<String>)> = BTreeMap::new();
    let mut sessions: BTreeMap<String, BTreeMap<String, PendingSession>> = BTreeMap::new();

    for row in 0..table.rows.len() {
        let fields = &table.rows[row];
        let participant = parse_participant(&table, participant_cols, row)?;
        let id = participant.participant_id.clone();
        let raw_participant: Vec<String> = participant_cols.iter().map(|&c| fields[c].clone()).collect();
        match participants.get(&id) {
            Some((_, existing)) if *existing != raw_participant => {
                return Err(table.malformed(row, format!("participant columns of {id} differ between rows")));
            }
            Some(_) => {}
            None => {
                participants.insert(id.clone(), (participant, raw_participant));
            }
        }

        let mut record = parse_session(&table, session_cols, row, &id)?;
        let mut sources = BTreeMap::new();
        for (modality, col) in image_cols {
            if let Some(rel) = optional(&fields[col]) {
                let src = image_dir.join(rel);
                if !src.is_file() {
                    return Err(DatasetError::MissingImage(src));
                }
                if extension_of(&src).is_none() {
                    return Err(table.malformed(row, format!("{rel} is not a .nii or .nii.gz file")));
                }
                volume::read_header(&src).map_err(|source| DatasetError::InvalidImage { path: src.clone(), source })?;
                sources.insert(modality, src);
            }
        }
        let raw: Vec<String> = session_cols.iter().map(|&c| fields[c].clone()).collect();
        let per_participant = sessions.entry(id.clone()).or_default();
        match per_participant.get_mut(&record.session_label) {
            Some(existing) => {
                if let Some(&modality) = sources.keys().find(|m| existing.sources.contains_key(m)) {
                    return Err(DatasetError::DuplicateScan {
                        participant: id,
                        session: record.session_label,
                        modality,
                    });
                }
                if existing.raw != raw {
                    return Err(table.malformed(row, format!("conflicting rows for {id}/{}", record.session_label)));
                }
                existing.sources.extend(sources);
            }
            None => {
                record.image_paths.clear();
                per_participant.insert(record.session_label.clone(), PendingSession { record, sources, raw });
            }
        }
    }

    fs::create_dir_all(out_root).map_err(io(out_root))?;
    let participant_rows: Vec<Vec<String>> = participants.values().map(|(_, raw)| raw.clone()).collect();
    tsv::write(&out_root.join("participants.tsv"), &PARTICIPANT_COLUMNS, &participant_rows)?;

    for (id, list) in &sessions {
        let dir = out_root.join(id);
        fs::create_dir_all(&dir).map_err(io(&dir))?;
        let mut ordered: Vec<&PendingSession> = list.values().collect();
        ordered.sort_by_key(|s| s.record.months_from_baseline);
        let rows: Vec<Vec<String>> = ordered.iter().map(|s| s.raw.clone()).collect();
        tsv::write(&dir.join(format!("{id}_sessions.tsv")), &SESSION_COLUMNS, &rows)?;
        for pending in ordered {
            for (modality, src) in &pending.sources {
                let stem = out_root.join(modality.relative_stem(id, &pending.record.session_label));
                let dest = PathBuf::from(format!("{}.{}", stem.display(), extension_of(src).unwrap()));
                let parent = dest.parent().unwrap();
                fs::create_dir_all(parent).map_err(io(parent))?;
                fs::copy(src, &dest).map_err(io(&dest))?;
            }
        }
    }
    load_dataset(out_root)
}
