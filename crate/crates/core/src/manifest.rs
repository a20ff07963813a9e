//! Manifest CSV reading and writing.
//!
//! Header (required, any order on read, this order on write):
//! `video_id,subject_id,domain_id,phase,raw_score,frame_dir,n_frames,fps_extracted`

use std::collections::HashSet;
use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::types::{DatasetManifest, Phase, VideoRecord};

pub const MANIFEST_COLUMNS: [&str; 8] = [
    "video_id",
    "subject_id",
    "domain_id",
    "phase",
    "raw_score",
    "frame_dir",
    "n_frames",
    "fps_extracted",
];

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_manifest(file, &path.display().to_string())
}

/// Parses manifest CSV from any reader; `source` names the input in errors.
pub fn read_manifest<R: Read>(reader: R, source: &str) -> Result<DatasetManifest> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: source.to_string(),
        line,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let mut idx = [0usize; 8];
    for (slot, col) in idx.iter_mut().zip(MANIFEST_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.trim() == col)
            .ok_or_else(|| parse_err(1, format!("missing column {col:?}")))?;
    }

    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        let field = |i: usize| row.get(idx[i]).unwrap_or("").trim();

        let video_id = field(0).to_string();
        if !seen.insert(video_id.clone()) {
            return Err(parse_err(line, format!("duplicate video_id {video_id:?}")));
        }
        let phase: Phase = field(3).parse().map_err(|e: String| parse_err(line, e))?;
        let raw_score: f64 = field(4)
            .parse()
            .map_err(|_| parse_err(line, format!("bad raw_score {:?}", field(4))))?;
        let n_frames: usize = field(6)
            .parse()
            .map_err(|_| parse_err(line, format!("bad n_frames {:?}", field(6))))?;
        let fps_extracted: f64 = field(7)
            .parse()
            .map_err(|_| parse_err(line, format!("bad fps_extracted {:?}", field(7))))?;
        let record = VideoRecord {
            video_id,
            subject_id: field(1).to_string(),
            domain_id: field(2).to_string(),
            phase,
            raw_score,
            frame_dir: PathBuf::from(field(5)),
            n_frames,
            fps_extracted,
        };
        record.validate().map_err(|e| parse_err(line, e.to_string()))?;
        records.push(record);
    }
    DatasetManifest::new(records)
}

pub fn save_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(manifest_to_csv(manifest).as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Serialises a manifest. Floats use the shortest round-trip representation,
/// so save/load/save is byte-stable.
pub fn manifest_to_csv(manifest: &DatasetManifest) -> String {
    let mut wtr = csv::WriterBuilder::new().from_writer(Vec::new());
    wtr.write_record(MANIFEST_COLUMNS).expect("in-memory write");
    for r in manifest.records() {
        wtr.write_record([
            r.video_id.clone(),
            r.subject_id.clone(),
            r.domain_id.clone(),
            r.phase.to_string(),
            r.raw_score.to_string(),
            r.frame_dir.to_string_lossy().into_owned(),
            r.n_frames.to_string(),
            r.fps_extracted.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(wtr.into_inner().expect("in-memory flush")).expect("utf-8 input")
}

/// Resolves a record's frame directory against the manifest's data root.
pub fn resolve_frame_dir(root: &Path, record: &VideoRecord) -> PathBuf {
    if record.frame_dir.is_absolute() {
        record.frame_dir.clone()
    } else {
        root.join(&record.frame_dir)
    }
}
