use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::corpus::wav::{read_wav_resampled, write_wav};
use crate::corpus::{denormalize_label, normalize_label, UtteranceRecord, TARGET_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::types::{EmotionTriple, Partition};

/// Columns of a corpus manifest, in order.
pub const MANIFEST_HEADER: [&str; 7] = [
    "id",
    "audio_path",
    "transcript",
    "arousal",
    "valence",
    "dominance",
    "split",
];

/// Loads a manifest CSV. Labels are on the raw 1 to 7 scale and are
/// normalized on load; audio paths are resolved against `audio_root` and
/// resampled to 16 kHz when needed.
pub fn load_manifest(path: &Path, audio_root: &Path) -> Result<Vec<UtteranceRecord>> {
    let row_err = |row: usize, message: String| Error::ManifestRow {
        path: path.to_owned(),
        row,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::Audio {
                path: path.to_owned(),
                message: format!("cannot open manifest: {e}"),
            },
            _ => Error::Csv(e),
        })?;
    let header = reader.headers()?.clone();
    if header.iter().map(str::trim).ne(MANIFEST_HEADER) {
        return Err(row_err(
            1,
            format!("expected header `{}`", MANIFEST_HEADER.join(",")),
        ));
    }

    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, row) in reader.records().enumerate() {
        // Row numbers are 1-based and count the header line.
        let row_no = i + 2;
        let row = row.map_err(|e| row_err(row_no, e.to_string()))?;
        if row.len() != MANIFEST_HEADER.len() {
            return Err(row_err(
                row_no,
                format!("expected {} fields, found {}", MANIFEST_HEADER.len(), row.len()),
            ));
        }
        let id = row[0].trim().to_owned();
        if id.is_empty() {
            return Err(row_err(row_no, "empty id".into()));
        }
        if !seen.insert(id.clone()) {
            return Err(row_err(row_no, format!("duplicate id `{id}`")));
        }
        let mut labels = [0.0; 3];
        for (k, slot) in labels.iter_mut().enumerate() {
            let name = MANIFEST_HEADER[3 + k];
            let raw: f64 = row[3 + k]
                .trim()
                .parse()
                .map_err(|_| row_err(row_no, format!("{name}: `{}` is not a number", &row[3 + k])))?;
            *slot = normalize_label(raw).map_err(|e| row_err(row_no, format!("{name}: {e}")))?;
        }
        let partition: Partition = row[6].parse().map_err(|e: Error| row_err(row_no, e.to_string()))?;
        let audio_path = resolve(audio_root, row[1].trim());
        let audio = read_wav_resampled(&audio_path, TARGET_SAMPLE_RATE)
            .map_err(|e| row_err(row_no, e.to_string()))?;
        if audio.is_empty() {
            return Err(row_err(row_no, format!("{}: no samples", audio_path.display())));
        }
        records.push(UtteranceRecord {
            id,
            audio,
            sample_rate: TARGET_SAMPLE_RATE,
            transcript: row[2].to_owned(),
            labels: EmotionTriple::from_array(labels),
            partition,
        });
    }
    Ok(records)
}

fn resolve(root: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_owned()
    } else {
        root.join(p)
    }
}

/// Writes records as `audio_root/wav/<id>.wav` plus a manifest whose audio
/// paths are relative to `audio_root`.
pub fn save_manifest(records: &[UtteranceRecord], path: &Path, audio_root: &Path) -> Result<()> {
    let wav_dir = audio_root.join("wav");
    fs::create_dir_all(&wav_dir)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut writer = csv::WriterBuilder::new()
        .quote_style(csv::QuoteStyle::NonNumeric)
        .from_path(path)?;
    writer.write_record(MANIFEST_HEADER)?;
    for record in records {
        record.validate()?;
        let rel = format!("wav/{}.wav", record.id);
        write_wav(&audio_root.join(&rel), &record.audio, record.sample_rate)?;
        let [a, v, d] = record.labels.to_array();
        let raw = [denormalize_label(a)?, denormalize_label(v)?, denormalize_label(d)?];
        writer.write_record([
            record.id.clone(),
            rel,
            record.transcript.clone(),
            raw[0].to_string(),
            raw[1].to_string(),
            raw[2].to_string(),
            record.partition.name().to_owned(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::wav::write_wav;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn loads_and_normalizes_rows() {
        let dir = tempfile::tempdir().unwrap();
        write_wav(&dir.path().join("a.wav"), &[0.1, 0.2, 0.3], 16_000).unwrap();
        write_wav(&dir.path().join("b.wav"), &[0.5; 8], 8_000).unwrap();
        let manifest = write(
            dir.path(),
            "m.csv",
            "id,audio_path,transcript,arousal,valence,dominance,split\n\
             u1,a.wav,\"hello, world\",1,1,1,train\n\
             u2,b.wav,\"bye\",7,4,1,test2\n",
        );
        let records = load_manifest(&manifest, dir.path()).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].labels, EmotionTriple::new(0.0, 0.0, 0.0));
        assert_eq!(records[0].transcript, "hello, world");
        assert_eq!(records[1].labels, EmotionTriple::new(1.0, 0.5, 0.0));
        assert_eq!(records[1].partition, Partition::Test2);
        assert!(records[1].partition.is_unseen());
        assert_eq!(records[1].partition.scenario_label(), Some("Unseen Scenarios"));
        // 8 kHz input is brought to 16 kHz.
        assert_eq!(records[1].audio.len(), 16);
    }

    #[test]
    fn errors_name_the_row() {
        let dir = tempfile::tempdir().unwrap();
        write_wav(&dir.path().join("a.wav"), &[0.1; 4], 16_000).unwrap();
        let header = "id,audio_path,transcript,arousal,valence,dominance,split\n";
        let cases = [
            ("u1,a.wav,x,8,1,1,train\n", "row 2: arousal"),
            ("u1,a.wav,x,1,1,1,nowhere\n", "row 2: invalid input: unknown partition"),
            ("u1,missing.wav,x,1,1,1,train\n", "row 2"),
            ("u1,a.wav,x,1,abc,1,train\n", "row 2: valence"),
            ("u1,a.wav,x,1,1,1,train\nu1,a.wav,x,1,1,1,train\n", "row 3: duplicate id"),
        ];
        for (body, needle) in cases {
            let m = write(dir.path(), "m.csv", &format!("{header}{body}"));
            let err = load_manifest(&m, dir.path()).unwrap_err().to_string();
            assert!(err.contains(needle), "`{err}` lacks `{needle}`");
        }
        let m = write(dir.path(), "bad_header.csv", "id,path\n");
        assert!(load_manifest(&m, dir.path()).is_err());
        assert!(load_manifest(&dir.path().join("nope.csv"), dir.path()).is_err());
    }
}
