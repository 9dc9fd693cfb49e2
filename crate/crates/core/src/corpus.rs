//! Tables, questions, and the token streams the encoders consume.
//!
//! Tables and questions are read from JSON-lines files. A prepared corpus
//! directory holds one pair of files per split:
//!
//! ```text
//! train.tables.jsonl   train.questions.jsonl
//! dev.tables.jsonl     dev.questions.jsonl
//! test.tables.jsonl    test.questions.jsonl
//! ```

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Reserved token standing in for every value of a numeric column.
pub const REAL_TOKEN: &str = "<REAL>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnType {
    Text,
    Real,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Invalid(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub id: String,
    pub column_names: Vec<String>,
    pub column_types: Vec<ColumnType>,
    /// Row-major cells.
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn n_columns(&self) -> usize {
        self.column_names.len()
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn column_cells(&self, column: usize) -> impl Iterator<Item = &str> + '_ {
        self.rows.iter().map(move |row| row[column].as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Question {
    pub id: String,
    pub raw_text: String,
    pub tokens: Vec<String>,
    pub table_id: String,
    pub split: Split,
}

/// Token view of a single column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnView {
    pub name_tokens: Vec<String>,
    /// One token list per cell; Real columns collapse to `[["<REAL>"]]`.
    pub value_tokens: Vec<Vec<String>>,
}

fn is_joiner(c: char, prev: Option<char>, next: Option<char>) -> bool {
    let (Some(p), Some(n)) = (prev, next) else {
        return false;
    };
    match c {
        '-' | '.' => p.is_alphanumeric() && n.is_alphanumeric(),
        ',' => p.is_ascii_digit() && n.is_ascii_digit(),
        _ => false,
    }
}

/// Lowercasing whitespace tokenizer.
///
/// Each whitespace-delimited chunk is lowercased and every non-alphanumeric
/// character becomes a standalone token, except `-` and `.` between two
/// alphanumerics and `,` between two digits (`e-mail`, `3.5`, `1,000`).
/// The reserved `<REAL>` token passes through verbatim.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        if chunk == REAL_TOKEN {
            out.push(chunk.to_string());
            continue;
        }
        let chars: Vec<char> = chunk.to_lowercase().chars().collect();
        let mut current = String::new();
        for (i, &c) in chars.iter().enumerate() {
            let prev = i.checked_sub(1).map(|p| chars[p]);
            let next = chars.get(i + 1).copied();
            if c.is_alphanumeric() || is_joiner(c, prev, next) {
                current.push(c);
            } else {
                if !current.is_empty() {
                    out.push(std::mem::take(&mut current));
                }
                out.push(c.to_string());
            }
        }
        if !current.is_empty() {
            out.push(current);
        }
    }
    out
}

pub fn column_views(table: &Table) -> Vec<ColumnView> {
    (0..table.n_columns())
        .map(|c| {
            let name_tokens = tokenize(&table.column_names[c]);
            let value_tokens = match table.column_types[c] {
                ColumnType::Real => vec![vec![REAL_TOKEN.to_string()]],
                ColumnType::Text => table.column_cells(c).map(tokenize).collect(),
            };
            ColumnView {
                name_tokens,
                value_tokens,
            }
        })
        .collect()
}

#[derive(Deserialize)]
struct RawTable {
    id: String,
    header: Vec<String>,
    types: Vec<ColumnType>,
    #[serde(default)]
    rows: Vec<Vec<serde_json::Value>>,
}

#[derive(Serialize)]
struct TableRecord<'a> {
    id: &'a str,
    header: &'a [String],
    types: &'a [ColumnType],
    rows: &'a [Vec<String>],
}

#[derive(Deserialize)]
struct RawQuestion {
    #[serde(default)]
    id: Option<String>,
    question: String,
    table_id: String,
}

#[derive(Serialize)]
struct QuestionRecord<'a> {
    id: &'a str,
    question: &'a str,
    table_id: &'a str,
}

fn cell_text(value: serde_json::Value) -> String {
    match value {
        serde_json::Value::String(s) => s,
        serde_json::Value::Null => String::new(),
        other => other.to_string(),
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn nonblank_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let mut lines = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            lines.push((i + 1, line));
        }
    }
    Ok(lines)
}

fn parse_table(path: &Path, line_no: usize, line: &str) -> Result<Table> {
    let malformed = |message: String| Error::Malformed {
        path: path.to_path_buf(),
        line: line_no,
        message,
    };
    let raw: RawTable = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
    let n = raw.header.len();
    if n == 0 {
        return Err(malformed("table has no columns".into()));
    }
    if raw.types.len() != n {
        return Err(malformed(format!("{} header entries but {} types", n, raw.types.len())));
    }
    let mut rows = Vec::with_capacity(raw.rows.len());
    for (r, row) in raw.rows.into_iter().enumerate() {
        if row.len() != n {
            return Err(Error::RaggedRow {
                path: path.to_path_buf(),
                line: line_no,
                row: r,
                found: row.len(),
                expected: n,
            });
        }
        rows.push(row.into_iter().map(cell_text).collect());
    }
    Ok(Table {
        id: raw.id,
        column_names: raw.header,
        column_types: raw.types,
        rows,
    })
}

/// Reads a tables JSONL file, preserving file order.
pub fn load_tables(path: impl AsRef<Path>) -> Result<Vec<Table>> {
    use rayon::prelude::*;

    let path = path.as_ref();
    let lines = nonblank_lines(path)?;
    let tables = lines
        .par_iter()
        .map(|(no, line)| parse_table(path, *no, line))
        .collect::<Result<Vec<_>>>()?;
    let mut seen = HashSet::new();
    for t in &tables {
        if !seen.insert(t.id.as_str()) {
            return Err(Error::DuplicateId(t.id.clone()));
        }
    }
    Ok(tables)
}

#[derive(Debug, Clone, Default)]
pub struct QuestionLoad {
    pub questions: Vec<Question>,
    /// Records dropped because their table is not in the split's pool.
    pub dropped_missing_table: usize,
}

/// Reads a questions JSONL file against the split's table pool.
///
/// Records naming a table that is not in `tables` are dropped and counted.
pub fn load_questions(path: impl AsRef<Path>, split: Split, tables: &[Table]) -> Result<QuestionLoad> {
    let path = path.as_ref();
    let known: HashSet<&str> = tables.iter().map(|t| t.id.as_str()).collect();
    let mut load = QuestionLoad::default();
    let mut ids = HashSet::new();
    for (line_no, line) in nonblank_lines(path)? {
        let raw: RawQuestion = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        let tokens = tokenize(&raw.question);
        if tokens.is_empty() {
            return Err(Error::Malformed {
                path: path.to_path_buf(),
                line: line_no,
                message: "question has no tokens".into(),
            });
        }
        if !known.contains(raw.table_id.as_str()) {
            log::warn!(
                "{}:{}: question references unknown table `{}`, dropped",
                path.display(),
                line_no,
                raw.table_id
            );
            load.dropped_missing_table += 1;
            continue;
        }
        let id = raw.id.unwrap_or_else(|| format!("{}-{:06}", split.as_str(), line_no));
        if !ids.insert(id.clone()) {
            return Err(Error::DuplicateId(id));
        }
        load.questions.push(Question {
            id,
            raw_text: raw.question,
            tokens,
            table_id: raw.table_id,
            split,
        });
    }
    Ok(load)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

pub fn write_tables(path: impl AsRef<Path>, tables: &[Table]) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    for t in tables {
        let rec = TableRecord {
            id: &t.id,
            header: &t.column_names,
            types: &t.column_types,
            rows: &t.rows,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_questions(path: impl AsRef<Path>, questions: &[Question]) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    for q in questions {
        let rec = QuestionRecord {
            id: &q.id,
            question: &q.raw_text,
            table_id: &q.table_id,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Tables and questions of one split, with id lookups.
#[derive(Debug, Clone, Default)]
pub struct SplitData {
    pub tables: Vec<Table>,
    pub questions: Vec<Question>,
    table_pos: HashMap<String, usize>,
    question_pos: HashMap<String, usize>,
}

impl SplitData {
    pub fn new(tables: Vec<Table>, questions: Vec<Question>) -> Result<Self> {
        let mut table_pos = HashMap::with_capacity(tables.len());
        for (i, t) in tables.iter().enumerate() {
            if table_pos.insert(t.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(t.id.clone()));
            }
        }
        let mut question_pos = HashMap::with_capacity(questions.len());
        for (i, q) in questions.iter().enumerate() {
            if !table_pos.contains_key(&q.table_id) {
                return Err(Error::UnknownId(q.table_id.clone()));
            }
            if question_pos.insert(q.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(q.id.clone()));
            }
        }
        Ok(SplitData {
            tables,
            questions,
            table_pos,
            question_pos,
        })
    }

    pub fn table(&self, id: &str) -> Option<&Table> {
        self.table_pos.get(id).map(|&i| &self.tables[i])
    }

    pub fn question(&self, id: &str) -> Option<&Question> {
        self.question_pos.get(id).map(|&i| &self.questions[i])
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty() && self.questions.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub train: SplitData,
    pub dev: SplitData,
    pub test: SplitData,
}

pub fn tables_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{split}.tables.jsonl"))
}

pub fn questions_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{split}.questions.jsonl"))
}

impl Corpus {
    pub fn split(&self, split: Split) -> &SplitData {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, split: Split) -> &mut SplitData {
        match split {
            Split::Train => &mut self.train,
            Split::Dev => &mut self.dev,
            Split::Test => &mut self.test,
        }
    }

    /// Loads every split present in `dir`. Missing split files yield an
    /// empty split. Returns the corpus and the number of dropped questions.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<(Corpus, usize)> {
        let dir = dir.as_ref();
        let mut corpus = Corpus::default();
        let mut dropped = 0;
        for split in Split::ALL {
            let tp = tables_path(dir, split);
            if !tp.exists() {
                continue;
            }
            let tables = load_tables(&tp)?;
            let qp = questions_path(dir, split);
            let questions = if qp.exists() {
                let load = load_questions(&qp, split, &tables)?;
                dropped += load.dropped_missing_table;
                load.questions
            } else {
                Vec::new()
            };
            *corpus.split_mut(split) = SplitData::new(tables, questions)?;
        }
        Ok((corpus, dropped))
    }

    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for split in Split::ALL {
            let data = self.split(split);
            if data.is_empty() {
                continue;
            }
            write_tables(tables_path(dir, split), &data.tables)?;
            write_questions(questions_path(dir, split), &data.questions)?;
        }
        Ok(())
    }

    /// Hex SHA-256 over the canonical serialization of one split.
    pub fn fingerprint(&self, split: Split) -> String {
        let data = self.split(split);
        let mut hasher = Sha256::new();
        for t in &data.tables {
            let rec = TableRecord {
                id: &t.id,
                header: &t.column_names,
                types: &t.column_types,
                rows: &t.rows,
            };
            hasher.update(serde_json::to_vec(&rec).expect("table serializes"));
            hasher.update(b"\n");
        }
        for q in &data.questions {
            let rec = QuestionRecord {
                id: &q.id,
                question: &q.raw_text,
                table_id: &q.table_id,
            };
            hasher.update(serde_json::to_vec(&rec).expect("question serializes"));
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("What is X?"), toks(&["what", "is", "x", "?"]));
        assert!(tokenize("").is_empty());
        assert_eq!(
            tokenize("Terrence Ross's jersey"),
            toks(&["terrence", "ross", "'", "s", "jersey"])
        );
    }

    #[test]
    fn tokenize_keeps_interior_joiners() {
        assert_eq!(
            tokenize("e-mail 3.5 1,000 (x)"),
            toks(&["e-mail", "3.5", "1,000", "(", "x", ")"])
        );
        assert_eq!(tokenize("end-"), toks(&["end", "-"]));
        assert_eq!(tokenize("a,b"), toks(&["a", ",", "b"]));
    }

    #[test]
    fn real_token_is_verbatim() {
        assert_eq!(tokenize("<REAL> <real>"), toks(&["<REAL>", "<", "real", ">"]));
    }

    proptest! {
        #[test]
        fn tokenize_idempotent_and_clean(s in "\\PC{0,40}") {
            let once = tokenize(&s);
            let twice = tokenize(&once.join(" "));
            prop_assert_eq!(&once, &twice);
            for t in &once {
                prop_assert!(!t.is_empty());
                if t != REAL_TOKEN {
                    // Some uppercase letters (e.g. U+1D53B) have no lowercase form.
                    prop_assert_eq!(&t.to_lowercase(), t);
                }
            }
        }
    }

    fn table(types: &[ColumnType], names: &[&str], rows: &[&[&str]]) -> Table {
        Table {
            id: "t".into(),
            column_names: names.iter().map(|s| s.to_string()).collect(),
            column_types: types.to_vec(),
            rows: rows.iter().map(|r| r.iter().map(|s| s.to_string()).collect()).collect(),
        }
    }

    #[test]
    fn column_views_examples() {
        let t = table(
            &[ColumnType::Text, ColumnType::Real],
            &["Home Team", "Score"],
            &[&["a b", "3"], &["c", "10"]],
        );
        let views = column_views(&t);
        assert_eq!(views.len(), 2);
        assert_eq!(views[0].name_tokens, toks(&["home", "team"]));
        assert_eq!(views[0].value_tokens, vec![toks(&["a", "b"]), toks(&["c"])]);
        assert_eq!(views[1].value_tokens, vec![toks(&[REAL_TOKEN])]);

        let empty = table(&[ColumnType::Text], &["City"], &[]);
        assert!(column_views(&empty)[0].value_tokens.is_empty());
    }

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_tables_examples() {
        let f = write_tmp("");
        assert!(load_tables(f.path()).unwrap().is_empty());

        let f = write_tmp(r#"{"id":"t1","header":["City"],"types":["text"],"rows":[["york"]]}"#);
        let t = load_tables(f.path()).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!((t[0].n_columns(), t[0].n_rows()), (1, 1));

        let f = write_tmp(
            "{\"id\":\"t0\",\"header\":[\"a\"],\"types\":[\"real\"],\"rows\":[[1.5]]}\n\
             {\"id\":\"t1\",\"header\":[\"a\",\"b\"],\"types\":[\"text\",\"text\"],\"rows\":[[\"x\",\"y\",\"z\"]]}\n",
        );
        match load_tables(f.path()) {
            Err(Error::RaggedRow {
                line, found, expected, ..
            }) => {
                assert_eq!((line, found, expected), (2, 3, 2));
            }
            other => panic!("expected ragged row, got {other:?}"),
        }
    }

    #[test]
    fn load_tables_rejects_duplicates_and_bad_json() {
        let line = r#"{"id":"t1","header":["City"],"types":["text"],"rows":[]}"#;
        let f = write_tmp(&format!("{line}\n{line}\n"));
        assert!(matches!(load_tables(f.path()), Err(Error::DuplicateId(id)) if id == "t1"));

        let f = write_tmp(&format!("{line}\n{{not json\n"));
        assert!(matches!(load_tables(f.path()), Err(Error::Malformed { line: 2, .. })));
    }

    #[test]
    fn numeric_cells_become_strings() {
        let f = write_tmp(r#"{"id":"t","header":["n"],"types":["real"],"rows":[[3],[2.5]]}"#);
        let t = load_tables(f.path()).unwrap();
        assert_eq!(t[0].rows, vec![vec!["3".to_string()], vec!["2.5".to_string()]]);
    }

    #[test]
    fn load_questions_examples() {
        let tables = vec![table(&[ColumnType::Text], &["City"], &[])];
        let mut tables = tables;
        tables[0].id = "t1".into();

        let f =
            write_tmp("{\"question\":\"Who won?\",\"table_id\":\"t1\"}\n{\"question\":\"x\",\"table_id\":\"gone\"}\n");
        let load = load_questions(f.path(), Split::Dev, &tables).unwrap();
        assert_eq!(load.questions.len(), 1);
        assert_eq!(load.dropped_missing_table, 1);
        let q = &load.questions[0];
        assert_eq!(q.tokens, toks(&["who", "won", "?"]));
        assert_eq!(q.table_id, "t1");
        assert_eq!(q.split, Split::Dev);

        let f = write_tmp("");
        assert!(load_questions(f.path(), Split::Train, &tables)
            .unwrap()
            .questions
            .is_empty());
    }
}
