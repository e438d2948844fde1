use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Deserialize;
use unicode_normalization::UnicodeNormalization;

use super::{CorpusError, Instance, Label, Language, RecordProblem};

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum LabelToken {
    Int(i64),
    Text(String),
}

impl LabelToken {
    fn resolve(&self) -> Option<Label> {
        match self {
            LabelToken::Int(0) => Some(Label::NonReclamatory),
            LabelToken::Int(1) => Some(Label::Reclamatory),
            LabelToken::Int(_) => None,
            LabelToken::Text(s) => Label::parse_token(s),
        }
    }

    fn describe(&self) -> String {
        match self {
            LabelToken::Int(i) => i.to_string(),
            LabelToken::Text(s) => s.clone(),
        }
    }
}

#[derive(Debug, Deserialize)]
struct RawRecord {
    id: String,
    tweet: String,
    #[serde(default)]
    bio: Option<String>,
    label: LabelToken,
    #[serde(default)]
    language: Option<String>,
}

enum Format {
    JsonLines,
    Delimited(u8),
}

fn format_for(path: &Path) -> Result<Format, CorpusError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl") | Some("ndjson") => Ok(Format::JsonLines),
        Some("csv") => Ok(Format::Delimited(b',')),
        Some("tsv") => Ok(Format::Delimited(b'\t')),
        _ => Err(CorpusError::UnsupportedFormat(path.display().to_string())),
    }
}

/// Loads and validates a corpus file for one language.
///
/// Every failing record is collected with its line number; if any fail, the
/// whole load fails with [`CorpusError::InvalidRecords`].
pub fn load_corpus(
    path: impl AsRef<Path>,
    language: Language,
) -> Result<Vec<Instance>, CorpusError> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(CorpusError::MissingFile(path.display().to_string()));
    }
    let format = format_for(path)?;
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;

    let mut raw: Vec<(usize, Result<RawRecord, String>)> = Vec::new();
    match format {
        Format::JsonLines => {
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(io_err)?;
                if line.trim().is_empty() {
                    continue;
                }
                let parsed = serde_json::from_str::<RawRecord>(&line)
                    .map_err(|e| format!("malformed row: {e}"));
                raw.push((i + 1, parsed));
            }
        }
        Format::Delimited(delimiter) => {
            let mut reader = csv::ReaderBuilder::new()
                .delimiter(delimiter)
                .flexible(false)
                .from_reader(file);
            let headers = reader
                .headers()
                .map_err(|e| {
                    CorpusError::InvalidRecords(vec![RecordProblem {
                        line: 1,
                        message: format!("malformed header: {e}"),
                    }])
                })?
                .clone();
            for row in reader.records() {
                match row {
                    Ok(record) => {
                        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
                        let parsed = record
                            .deserialize::<RawRecord>(Some(&headers))
                            .map_err(|e| format!("malformed row: {e}"));
                        raw.push((line, parsed));
                    }
                    Err(e) => {
                        let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
                        raw.push((line, Err(format!("malformed row: {e}"))));
                    }
                }
            }
        }
    }

    if raw.is_empty() {
        log::warn!("corpus file {} contains no records", path.display());
        return Ok(Vec::new());
    }

    let mut problems = Vec::new();
    let mut seen = HashSet::new();
    let mut instances = Vec::with_capacity(raw.len());
    for (line, record) in raw {
        let record = match record {
            Ok(r) => r,
            Err(message) => {
                problems.push(RecordProblem { line, message });
                continue;
            }
        };
        match validate(record, language, &mut seen) {
            Ok(instance) => instances.push(instance),
            Err(message) => problems.push(RecordProblem { line, message }),
        }
    }
    if !problems.is_empty() {
        return Err(CorpusError::InvalidRecords(problems));
    }
    Ok(instances)
}

fn validate(
    record: RawRecord,
    language: Language,
    seen: &mut HashSet<String>,
) -> Result<Instance, String> {
    let id = record.id.trim().to_string();
    if id.is_empty() {
        return Err("empty id".into());
    }
    let label = record
        .label
        .resolve()
        .ok_or_else(|| format!("unknown label token {:?}", record.label.describe()))?;
    if let Some(tag) = record.language.as_deref().filter(|t| !t.trim().is_empty()) {
        let parsed: Language = tag
            .parse()
            .map_err(|_| format!("unknown language tag {tag:?}"))?;
        if parsed != language {
            return Err(format!(
                "record language {parsed} does not match corpus language {language}"
            ));
        }
    }
    let tweet: String = record.tweet.nfc().collect();
    if tweet.split_whitespace().next().is_none() {
        return Err("tweet is empty".into());
    }
    let bio: String = record.bio.unwrap_or_default().nfc().collect();
    if !seen.insert(id.clone()) {
        return Err(format!("duplicate id {id:?}"));
    }
    Ok(Instance {
        id,
        tweet,
        bio,
        label,
        language,
    })
}

/// Writes instances as line-delimited JSON records.
pub fn write_corpus(path: impl AsRef<Path>, instances: &[Instance]) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for instance in instances {
        serde_json::to_writer(&mut out, instance)?;
        out.write_all(b"\n").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}
