//! Indicator corpus: text normalization and CSV/TSV ingestion.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CorpusError {
    #[error("indicator text is empty after preprocessing")]
    EmptyIndicator,
    #[error("missing required column `{0}`")]
    MissingColumn(&'static str),
    #[error("duplicate id `{id}` (rows {first} and {second})")]
    DuplicateId { id: String, first: usize, second: usize },
    #[error("row {row} rejected: {reason}")]
    RowRejected { row: usize, reason: Box<CorpusError> },
    #[error("cannot read corpus: {0}")]
    Unreadable(String),
}

/// Normalizes indicator text: lowercase, keep only `a-z`, `0-9` and spaces,
/// collapse runs of spaces, trim.
///
/// Everything else is deleted rather than replaced, so `self-efficacy`
/// becomes `selfefficacy`. Whitespace of any kind counts as a space.
pub fn preprocess(raw: &str) -> Result<String, CorpusError> {
    let mut out = String::with_capacity(raw.len());
    let mut pending_space = false;
    for ch in raw.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            pending_space = !out.is_empty();
        } else if ch.is_ascii_lowercase() || ch.is_ascii_digit() {
            if pending_space {
                out.push(' ');
                pending_space = false;
            }
            out.push(ch);
        }
    }
    if out.is_empty() {
        Err(CorpusError::EmptyIndicator)
    } else {
        Ok(out)
    }
}

/// One survey item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Indicator {
    pub id: String,
    pub text: String,
    pub raw_text: String,
    pub construct_label: Option<String>,
    pub source: Option<String>,
}

impl Indicator {
    pub fn new(
        id: impl Into<String>,
        raw_text: impl Into<String>,
        construct_label: Option<String>,
        source: Option<String>,
    ) -> Result<Self, CorpusError> {
        let raw_text = raw_text.into();
        let text = preprocess(&raw_text)?;
        Ok(Self { id: id.into(), text, raw_text, construct_label, source })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Csv,
    Tsv,
}

impl CorpusFormat {
    /// Guesses from the file extension; anything but `.tsv`/`.tab` is CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("tsv") | Some("tab") => CorpusFormat::Tsv,
            _ => CorpusFormat::Csv,
        }
    }

    fn delimiter(self) -> u8 {
        match self {
            CorpusFormat::Csv => b',',
            CorpusFormat::Tsv => b'\t',
        }
    }
}

/// An ordered set of indicators with a label index. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    indicators: Vec<Indicator>,
    label_index: BTreeMap<String, Vec<String>>,
    positions: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(indicators: Vec<Indicator>) -> Result<Self, CorpusError> {
        let mut positions = HashMap::with_capacity(indicators.len());
        for (i, ind) in indicators.iter().enumerate() {
            if let Some(first) = positions.insert(ind.id.clone(), i) {
                return Err(CorpusError::DuplicateId { id: ind.id.clone(), first: first + 2, second: i + 2 });
            }
        }
        let label_index = build_label_index(&indicators);
        Ok(Self { indicators, label_index, positions })
    }

    pub fn indicators(&self) -> &[Indicator] {
        &self.indicators
    }

    pub fn len(&self) -> usize {
        self.indicators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indicators.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Indicator> {
        self.positions.get(id).map(|&i| &self.indicators[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.positions.get(id).copied()
    }

    /// Construct label → indicator ids, in corpus order.
    pub fn label_index(&self) -> &BTreeMap<String, Vec<String>> {
        &self.label_index
    }

    pub fn ids(&self) -> Vec<String> {
        self.indicators.iter().map(|i| i.id.clone()).collect()
    }

    pub fn texts(&self) -> Vec<String> {
        self.indicators.iter().map(|i| i.text.clone()).collect()
    }

    /// Canonical serialization: header `id,text,construct,source`, raw text
    /// in the text column, RFC 4180 quoting only where needed.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), CorpusError> {
        let mut wtr = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(writer);
        let io = |e: csv::Error| CorpusError::Unreadable(e.to_string());
        wtr.write_record(["id", "text", "construct", "source"]).map_err(io)?;
        for ind in &self.indicators {
            wtr.write_record([
                ind.id.as_str(),
                ind.raw_text.as_str(),
                ind.construct_label.as_deref().unwrap_or(""),
                ind.source.as_deref().unwrap_or(""),
            ])
            .map_err(io)?;
        }
        wtr.flush().map_err(|e| CorpusError::Unreadable(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let file = std::fs::File::create(path).map_err(|e| CorpusError::Unreadable(e.to_string()))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

fn build_label_index(indicators: &[Indicator]) -> BTreeMap<String, Vec<String>> {
    let mut index: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for ind in indicators {
        if let Some(label) = &ind.construct_label {
            index.entry(label.clone()).or_default().push(ind.id.clone());
        }
    }
    index
}

/// Loads a corpus file. Row numbers in errors count the header as row 1.
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Corpus, CorpusError> {
    let file = std::fs::File::open(path).map_err(|e| CorpusError::Unreadable(format!("{}: {e}", path.display())))?;
    read_corpus(file, format)
}

pub fn read_corpus<R: Read>(reader: R, format: CorpusFormat) -> Result<Corpus, CorpusError> {
    let mut rdr = csv::ReaderBuilder::new().delimiter(format.delimiter()).flexible(false).from_reader(reader);
    let headers = rdr.headers().map_err(|e| CorpusError::Unreadable(e.to_string()))?.clone();
    let column = |name: &str| headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name));
    let id_col = column("id").ok_or(CorpusError::MissingColumn("id"))?;
    let text_col = column("text").ok_or(CorpusError::MissingColumn("text"))?;
    let construct_col = column("construct");
    let source_col = column("source");

    let optional = |record: &csv::StringRecord, col: Option<usize>| {
        col.and_then(|c| record.get(c)).map(str::trim).filter(|s| !s.is_empty()).map(String::from)
    };

    let mut indicators = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| CorpusError::Unreadable(format!("row {row}: {e}")))?;
        let id = record.get(id_col).unwrap_or("").trim().to_string();
        if let Some(&first) = seen.get(&id) {
            return Err(CorpusError::DuplicateId { id, first, second: row });
        }
        let raw = record.get(text_col).unwrap_or("");
        let ind = Indicator::new(id.clone(), raw, optional(&record, construct_col), optional(&record, source_col))
            .map_err(|e| CorpusError::RowRejected { row, reason: Box::new(e) })?;
        seen.insert(id, row);
        indicators.push(ind);
    }
    Corpus::new(indicators)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn preprocess_examples() {
        assert_eq!(preprocess("I felt indecisive.").unwrap(), "i felt indecisive");
        assert_eq!(preprocess(""), Err(CorpusError::EmptyIndicator));
        assert_eq!(preprocess("health self-efficacy").unwrap(), "health selfefficacy");
        assert_eq!(preprocess("  PHQ-9 item 3\t(past  2 weeks) ").unwrap(), "phq9 item 3 past 2 weeks");
        assert_eq!(preprocess("naïve café").unwrap(), "nave caf");
        assert_eq!(preprocess("!!!"), Err(CorpusError::EmptyIndicator));
    }

    proptest! {
        #[test]
        fn preprocess_idempotent(s in "\\PC{0,40}") {
            if let Ok(once) = preprocess(&s) {
                prop_assert_eq!(preprocess(&once).unwrap(), once.clone());
                prop_assert!(once.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == ' '));
                prop_assert!(!once.contains("  ") && once.trim() == once);
            }
        }
    }

    #[test]
    fn loads_three_rows() {
        let data = "id,text,construct,source\nq1,I felt worried.,Anxiety,PROMIS\nq2,I felt sad,Depression,\nq3,\"Hello, world\",,\n";
        let corpus = read_corpus(data.as_bytes(), CorpusFormat::Csv).unwrap();
        assert_eq!(corpus.len(), 3);
        assert_eq!(corpus.get("q3").unwrap().text, "hello world");
        assert_eq!(corpus.get("q3").unwrap().construct_label, None);
        assert_eq!(corpus.label_index()["Anxiety"], vec!["q1".to_string()]);
        assert_eq!(corpus.get("q1").unwrap().source.as_deref(), Some("PROMIS"));
    }

    #[test]
    fn duplicate_id_reports_rows() {
        let data = "id,text\nq1,a\nq2,b\nq3,c\nq1,d\n";
        let err = read_corpus(data.as_bytes(), CorpusFormat::Csv).unwrap_err();
        assert_eq!(err, CorpusError::DuplicateId { id: "q1".into(), first: 2, second: 5 });
    }

    #[test]
    fn punctuation_only_row_rejected() {
        let data = "id,text\nq1,fine\nq2,!!!\n";
        let err = read_corpus(data.as_bytes(), CorpusFormat::Csv).unwrap_err();
        assert_eq!(err, CorpusError::RowRejected { row: 3, reason: Box::new(CorpusError::EmptyIndicator) });
    }

    #[test]
    fn missing_column() {
        let err = read_corpus("id,body\nq1,x\n".as_bytes(), CorpusFormat::Csv).unwrap_err();
        assert_eq!(err, CorpusError::MissingColumn("text"));
    }

    #[test]
    fn tsv_and_column_order() {
        let data = "source\ttext\tid\nsrc\tSleep well\tz9\n";
        let corpus = read_corpus(data.as_bytes(), CorpusFormat::Tsv).unwrap();
        assert_eq!(corpus.indicators()[0].id, "z9");
        assert_eq!(corpus.indicators()[0].text, "sleep well");
    }

    proptest! {
        #[test]
        fn save_load_round_trip(rows in proptest::collection::vec(("[a-zA-Z ,.\"-]{1,20}[a-z]", proptest::option::of("[A-Za-z][A-Za-z ]{0,7}[a-z]")), 1..12)) {
            let indicators: Vec<Indicator> = rows.iter().enumerate()
                .map(|(i, (t, l))| Indicator::new(format!("id{i}"), t.clone(), l.clone(), None).unwrap())
                .collect();
            let corpus = Corpus::new(indicators).unwrap();
            let mut first = Vec::new();
            corpus.write_csv(&mut first).unwrap();
            let reloaded = read_corpus(first.as_slice(), CorpusFormat::Csv).unwrap();
            let mut second = Vec::new();
            reloaded.write_csv(&mut second).unwrap();
            prop_assert_eq!(&first, &second);
            let again = read_corpus(second.as_slice(), CorpusFormat::Csv).unwrap();
            prop_assert_eq!(again, reloaded);
        }
    }
}
