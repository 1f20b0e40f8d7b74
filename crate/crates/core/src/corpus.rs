//! Posts, datasets and the cleaning rules applied before anything reaches a
//! classifier.
//!
//! Cleaning is three independent passes, each returning a fresh dataset and
//! a [`CleaningReport`]:
//!
//! 1. [`clean_posts`]: normalize text with [`clean_text`], drop posts that
//!    end up empty.
//! 2. [`dedup`]: drop byte-identical texts, first occurrence wins.
//! 3. [`drop_cross_split`]: drop training posts whose text also appears in
//!    the development split.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::label::SeverityLabel;

/// Literal substituted for every URL token.
pub const URL_PLACEHOLDER: &str = "httpurl";

const URL_PREFIXES: [&str; 3] = ["http://", "https://", "www."];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Post {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<SeverityLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subreddit: Option<String>,
}

impl Post {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Post {
            id: id.into(),
            text: text.into(),
            label: None,
            subreddit: None,
        }
    }

    pub fn labeled(id: impl Into<String>, text: impl Into<String>, label: SeverityLabel) -> Self {
        Post {
            label: Some(label),
            ..Post::new(id, text)
        }
    }

    pub fn with_subreddit(mut self, subreddit: impl Into<String>) -> Self {
        self.subreddit = Some(subreddit.into());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Labeled,
    Unlabeled,
}

/// An ordered collection of posts with unique, non-empty ids.
///
/// A labeled dataset has a label on every post; an unlabeled one has none.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    posts: Vec<Post>,
    kind: DatasetKind,
}

impl Dataset {
    pub fn new(kind: DatasetKind, posts: Vec<Post>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(posts.len());
        for post in &posts {
            if post.id.is_empty() {
                return Err(Error::Dataset("post with empty id".into()));
            }
            if !seen.insert(post.id.as_str()) {
                return Err(Error::DuplicateId(post.id.clone()));
            }
            match (kind, &post.label) {
                (DatasetKind::Labeled, None) => {
                    return Err(Error::Dataset(format!(
                        "post {:?} has no label in a labeled dataset",
                        post.id
                    )))
                }
                (DatasetKind::Unlabeled, Some(_)) => {
                    return Err(Error::Dataset(format!(
                        "post {:?} carries a label in an unlabeled dataset",
                        post.id
                    )))
                }
                _ => {}
            }
        }
        Ok(Dataset { posts, kind })
    }

    pub fn labeled(posts: Vec<Post>) -> Result<Self> {
        Self::new(DatasetKind::Labeled, posts)
    }

    pub fn unlabeled(posts: Vec<Post>) -> Result<Self> {
        Self::new(DatasetKind::Unlabeled, posts)
    }

    /// Labeled if every post has a label, unlabeled if none has; mixed is
    /// an error. An empty list is unlabeled.
    pub fn infer(posts: Vec<Post>) -> Result<Self> {
        let n_labeled = posts.iter().filter(|p| p.label.is_some()).count();
        let kind = if n_labeled == 0 {
            DatasetKind::Unlabeled
        } else if n_labeled == posts.len() {
            DatasetKind::Labeled
        } else {
            return Err(Error::Dataset(format!(
                "{n_labeled} of {} posts are labeled; a dataset must be fully labeled or fully unlabeled",
                posts.len()
            )));
        };
        Self::new(kind, posts)
    }

    pub fn kind(&self) -> DatasetKind {
        self.kind
    }

    pub fn posts(&self) -> &[Post] {
        &self.posts
    }

    pub fn into_posts(self) -> Vec<Post> {
        self.posts
    }

    pub fn len(&self) -> usize {
        self.posts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.posts.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Post> {
        self.posts.iter()
    }

    pub fn texts(&self) -> Vec<String> {
        self.posts.iter().map(|p| p.text.clone()).collect()
    }

    /// Gold labels in dataset order; `None` for unlabeled datasets.
    pub fn labels(&self) -> Option<Vec<SeverityLabel>> {
        self.posts.iter().map(|p| p.label).collect()
    }

    /// Same posts with labels removed.
    pub fn to_unlabeled(&self) -> Dataset {
        let posts = self
            .posts
            .iter()
            .map(|p| Post {
                label: None,
                ..p.clone()
            })
            .collect();
        Dataset {
            posts,
            kind: DatasetKind::Unlabeled,
        }
    }

    /// Hex SHA-256 of the canonical JSONL encoding.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(to_jsonl_bytes(self));
        hex::encode(hasher.finalize())
    }

    // Posts from a dataset that was already validated; kind and id
    // uniqueness carry over to any subset.
    fn subset(&self, posts: Vec<Post>) -> Dataset {
        Dataset {
            posts,
            kind: self.kind,
        }
    }
}

impl<'a> IntoIterator for &'a Dataset {
    type Item = &'a Post;
    type IntoIter = std::slice::Iter<'a, Post>;

    fn into_iter(self) -> Self::IntoIter {
        self.posts.iter()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub n_input: usize,
    pub n_output: usize,
    pub n_empty_dropped: usize,
    pub n_dupes_dropped: usize,
    pub n_cross_split_dropped: usize,
}

impl CleaningReport {
    fn identity(n: usize) -> Self {
        CleaningReport {
            n_input: n,
            n_output: n,
            ..Default::default()
        }
    }

    /// Report for `self` followed by `next` (which consumed `self`'s output).
    pub fn then(self, next: CleaningReport) -> CleaningReport {
        debug_assert_eq!(self.n_output, next.n_input);
        CleaningReport {
            n_input: self.n_input,
            n_output: next.n_output,
            n_empty_dropped: self.n_empty_dropped + next.n_empty_dropped,
            n_dupes_dropped: self.n_dupes_dropped + next.n_dupes_dropped,
            n_cross_split_dropped: self.n_cross_split_dropped + next.n_cross_split_dropped,
        }
    }

    pub fn n_dropped(&self) -> usize {
        self.n_empty_dropped + self.n_dupes_dropped + self.n_cross_split_dropped
    }

    pub fn is_consistent(&self) -> bool {
        self.n_input == self.n_output + self.n_dropped()
    }
}

fn is_url_token(token: &str) -> bool {
    let bytes = token.as_bytes();
    URL_PREFIXES.iter().any(|prefix| {
        bytes.len() >= prefix.len() && bytes[..prefix.len()].eq_ignore_ascii_case(prefix.as_bytes())
    })
}

/// Normalizes one post's text.
///
/// Newlines, tabs and carriage returns become spaces, runs of whitespace
/// collapse to one space, the ends are trimmed, and any whitespace-delimited
/// token starting with `http://`, `https://` or `www.` (any case) is
/// replaced by [`URL_PLACEHOLDER`].
pub fn clean_text(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    for token in raw.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        if is_url_token(token) {
            out.push_str(URL_PLACEHOLDER);
        } else {
            out.push_str(token);
        }
    }
    out
}

/// Applies [`clean_text`] to every post and drops posts left empty.
pub fn clean_posts(ds: &Dataset) -> (Dataset, CleaningReport) {
    let mut report = CleaningReport::identity(ds.len());
    let posts: Vec<Post> = ds
        .iter()
        .filter_map(|p| {
            let text = clean_text(&p.text);
            if text.is_empty() {
                report.n_empty_dropped += 1;
                None
            } else {
                Some(Post { text, ..p.clone() })
            }
        })
        .collect();
    report.n_output = posts.len();
    (ds.subset(posts), report)
}

/// Drops every post whose text byte-equals an earlier post's text.
pub fn dedup(ds: &Dataset) -> (Dataset, CleaningReport) {
    let mut report = CleaningReport::identity(ds.len());
    let mut seen: HashSet<&str> = HashSet::with_capacity(ds.len());
    let posts: Vec<Post> = ds
        .iter()
        .filter(|p| seen.insert(p.text.as_str()))
        .cloned()
        .collect();
    report.n_dupes_dropped = ds.len() - posts.len();
    report.n_output = posts.len();
    (ds.subset(posts), report)
}

/// Drops training posts whose text byte-equals any development post's text.
/// The development split is only read.
pub fn drop_cross_split(train: &Dataset, dev: &Dataset) -> (Dataset, CleaningReport) {
    let dev_texts: HashSet<&str> = dev.iter().map(|p| p.text.as_str()).collect();
    let mut report = CleaningReport::identity(train.len());
    let posts: Vec<Post> = train
        .iter()
        .filter(|p| !dev_texts.contains(p.text.as_str()))
        .cloned()
        .collect();
    report.n_cross_split_dropped = train.len() - posts.len();
    report.n_output = posts.len();
    (train.subset(posts), report)
}

/// Cleaning plus in-split dedup for a single dataset.
pub fn clean_and_dedup(ds: &Dataset) -> (Dataset, CleaningReport) {
    let (cleaned, r1) = clean_posts(ds);
    let (deduped, r2) = dedup(&cleaned);
    (deduped, r1.then(r2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Jsonl,
    Csv,
    Tsv,
}

impl DatasetFormat {
    /// Picks a format from the file extension; anything unrecognized is JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref()
        {
            Some("csv") => DatasetFormat::Csv,
            Some("tsv") | Some("tab") => DatasetFormat::Tsv,
            _ => DatasetFormat::Jsonl,
        }
    }
}

fn read_utf8(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    String::from_utf8(bytes).map_err(|e| {
        let valid = e.utf8_error().valid_up_to();
        let line = e.as_bytes()[..valid]
            .iter()
            .filter(|&&b| b == b'\n')
            .count()
            + 1;
        Error::row(path, line, "<file>", "invalid UTF-8")
    })
}

/// Loads a dataset file. With `kind == None` the kind is inferred from
/// whether rows carry labels.
pub fn load_dataset(
    path: &Path,
    format: DatasetFormat,
    kind: Option<DatasetKind>,
) -> Result<Dataset> {
    let content = read_utf8(path)?;
    let rows = match format {
        DatasetFormat::Jsonl => parse_jsonl(path, &content)?,
        DatasetFormat::Csv => parse_delimited(path, &content, b',')?,
        DatasetFormat::Tsv => parse_delimited(path, &content, b'\t')?,
    };
    let kind = match kind {
        Some(kind) => kind,
        None if rows.iter().any(|(_, p)| p.label.is_some()) => DatasetKind::Labeled,
        None => DatasetKind::Unlabeled,
    };

    let mut seen = HashSet::with_capacity(rows.len());
    for (line, post) in &rows {
        if !seen.insert(post.id.as_str()) {
            return Err(Error::row(
                path,
                *line,
                "id",
                format!("duplicate post id {:?}", post.id),
            ));
        }
        match (kind, post.label) {
            (DatasetKind::Labeled, None) => {
                return Err(Error::row(
                    path,
                    *line,
                    "label",
                    "missing label in labeled dataset",
                ))
            }
            (DatasetKind::Unlabeled, Some(_)) => {
                return Err(Error::row(
                    path,
                    *line,
                    "label",
                    "label present in unlabeled dataset",
                ))
            }
            _ => {}
        }
    }
    Dataset::new(kind, rows.into_iter().map(|(_, p)| p).collect())
}

fn optional_string(
    path: &Path,
    line: usize,
    obj: &Map<String, Value>,
    field: &str,
) -> Result<Option<String>> {
    match obj.get(field) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(Error::row(path, line, field, "expected a string")),
    }
}

fn required_string(
    path: &Path,
    line: usize,
    obj: &Map<String, Value>,
    field: &str,
) -> Result<String> {
    optional_string(path, line, obj, field)?
        .ok_or_else(|| Error::row(path, line, field, "missing required field"))
}

fn build_post(
    path: &Path,
    line: usize,
    id: String,
    text: String,
    label: Option<String>,
    subreddit: Option<String>,
) -> Result<Post> {
    if id.is_empty() {
        return Err(Error::row(path, line, "id", "empty id"));
    }
    let label = match label {
        Some(s) => Some(
            s.parse::<SeverityLabel>()
                .map_err(|e| Error::row(path, line, "label", e.to_string()))?,
        ),
        None => None,
    };
    Ok(Post {
        id,
        text,
        label,
        subreddit,
    })
}

fn parse_jsonl(path: &Path, content: &str) -> Result<Vec<(usize, Post)>> {
    let mut rows = Vec::new();
    for (idx, raw) in content.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(raw)
            .map_err(|e| Error::row(path, line, "<row>", e.to_string()))?;
        let Value::Object(obj) = value else {
            return Err(Error::row(path, line, "<row>", "expected a JSON object"));
        };
        let post = build_post(
            path,
            line,
            required_string(path, line, &obj, "id")?,
            required_string(path, line, &obj, "text")?,
            optional_string(path, line, &obj, "label")?,
            optional_string(path, line, &obj, "subreddit")?,
        )?;
        rows.push((line, post));
    }
    Ok(rows)
}

fn parse_delimited(path: &Path, content: &str, delimiter: u8) -> Result<Vec<(usize, Post)>> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .from_reader(content.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::row(path, 1, "<header>", e.to_string()))?
        .clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case(name))
    };
    let id_col = column("id").ok_or_else(|| Error::row(path, 1, "id", "missing column"))?;
    let text_col = column("text").ok_or_else(|| Error::row(path, 1, "text", "missing column"))?;
    let label_col = column("label");
    let subreddit_col = column("subreddit");

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::row(path, line, "<row>", e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let cell = |col: Option<usize>| {
            col.and_then(|c| record.get(c))
                .filter(|s| !s.is_empty())
                .map(str::to_string)
        };
        let id = cell(Some(id_col))
            .ok_or_else(|| Error::row(path, line, "id", "missing required field"))?;
        let text = record
            .get(text_col)
            .ok_or_else(|| Error::row(path, line, "text", "missing required field"))?
            .to_string();
        rows.push((
            line,
            build_post(path, line, id, text, cell(label_col), cell(subreddit_col))?,
        ));
    }
    Ok(rows)
}

fn to_jsonl_bytes(ds: &Dataset) -> Vec<u8> {
    let mut buf = Vec::new();
    for post in ds {
        serde_json::to_writer(&mut buf, post).expect("post serialization is infallible");
        buf.push(b'\n');
    }
    buf
}

pub fn save_dataset(ds: &Dataset, path: &Path, format: DatasetFormat) -> Result<()> {
    let bytes = match format {
        DatasetFormat::Jsonl => to_jsonl_bytes(ds),
        DatasetFormat::Csv => to_delimited_bytes(ds, b','),
        DatasetFormat::Tsv => to_delimited_bytes(ds, b'\t'),
    };
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

fn to_delimited_bytes(ds: &Dataset, delimiter: u8) -> Vec<u8> {
    let mut writer = csv::WriterBuilder::new()
        .delimiter(delimiter)
        .from_writer(Vec::new());
    writer
        .write_record(["id", "text", "label", "subreddit"])
        .expect("in-memory write");
    for post in ds {
        writer
            .write_record([
                post.id.as_str(),
                post.text.as_str(),
                post.label.map_or("", SeverityLabel::as_str),
                post.subreddit.as_deref().unwrap_or(""),
            ])
            .expect("in-memory write");
    }
    writer.into_inner().expect("in-memory flush")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unlabeled(items: &[(&str, &str)]) -> Dataset {
        Dataset::unlabeled(
            items
                .iter()
                .map(|(id, text)| Post::new(*id, *text))
                .collect(),
        )
        .unwrap()
    }

    fn ids(ds: &Dataset) -> Vec<&str> {
        ds.iter().map(|p| p.id.as_str()).collect()
    }

    #[test]
    fn clean_text_examples() {
        assert_eq!(clean_text("I feel\tlow\ntoday  "), "I feel low today");
        assert_eq!(clean_text(""), "");
        assert_eq!(
            clean_text("see https://a.b/c?d=1 and www.x.org now"),
            "see httpurl and httpurl now"
        );
        assert_eq!(clean_text("HTTP://SHOUT.COM\r\nok"), "httpurl ok");
        assert_eq!(clean_text("a\r\n\r\nb"), "a b");
        // prefix must start the token
        assert_eq!(clean_text("(https://x.y)"), "(https://x.y)");
        assert_eq!(clean_text("wwwhat"), "wwwhat");
    }

    #[test]
    fn dedup_keeps_first_occurrence() {
        let ds = unlabeled(&[("a", "hi"), ("b", "hi"), ("c", "yo")]);
        let (out, report) = dedup(&ds);
        assert_eq!(ids(&out), ["a", "c"]);
        assert_eq!(report.n_dupes_dropped, 1);
        assert!(report.is_consistent());

        let ds = unlabeled(&[("a", "x"), ("b", "y"), ("c", "z")]);
        let (out, report) = dedup(&ds);
        assert_eq!(out, ds);
        assert_eq!(report.n_dupes_dropped, 0);

        let ds = unlabeled(&[("1", "s"), ("2", "t"), ("3", "s"), ("4", "u"), ("5", "s")]);
        let (out, report) = dedup(&ds);
        assert_eq!(ids(&out), ["1", "2", "4"]);
        assert_eq!(report.n_dupes_dropped, 2);
    }

    #[test]
    fn dedup_is_case_sensitive() {
        let ds = unlabeled(&[("a", "Hi"), ("b", "hi")]);
        assert_eq!(dedup(&ds).0.len(), 2);
    }

    #[test]
    fn cross_split_examples() {
        let train = unlabeled(&[("1", "x"), ("2", "y")]);
        let dev = unlabeled(&[("d", "y")]);
        let (out, report) = drop_cross_split(&train, &dev);
        assert_eq!(ids(&out), ["1"]);
        assert_eq!(report.n_cross_split_dropped, 1);

        let dev = unlabeled(&[("d", "q")]);
        assert_eq!(drop_cross_split(&train, &dev).0, train);

        let train = unlabeled(&[("1", "y"), ("2", "x"), ("3", "y")]);
        let dev = unlabeled(&[("d", "y")]);
        let (out, report) = drop_cross_split(&train, &dev);
        assert_eq!(ids(&out), ["2"]);
        assert_eq!(report.n_cross_split_dropped, 2);
    }

    #[test]
    fn clean_posts_drops_empty() {
        let ds = unlabeled(&[("a", " \t\n"), ("b", "ok ")]);
        let (out, report) = clean_posts(&ds);
        assert_eq!(ids(&out), ["b"]);
        assert_eq!(out.posts()[0].text, "ok");
        assert_eq!(report.n_empty_dropped, 1);
        assert!(report.is_consistent());
    }

    #[test]
    fn dataset_invariants() {
        assert!(matches!(
            Dataset::unlabeled(vec![Post::new("a", "x"), Post::new("a", "y")]),
            Err(Error::DuplicateId(_))
        ));
        assert!(Dataset::unlabeled(vec![Post::new("", "x")]).is_err());
        assert!(Dataset::labeled(vec![Post::new("a", "x")]).is_err());
        assert!(Dataset::unlabeled(vec![Post::labeled("a", "x", SeverityLabel::Low)]).is_err());
        assert!(Dataset::infer(vec![
            Post::labeled("a", "x", SeverityLabel::Low),
            Post::new("b", "y")
        ])
        .is_err());
    }

    #[test]
    fn jsonl_parse_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        fs::write(
            &path,
            "{\"id\":\"1\",\"text\":\"hi\",\"label\":\"severe\",\"extra\":3}\n",
        )
        .unwrap();
        let ds = load_dataset(&path, DatasetFormat::Jsonl, None).unwrap();
        assert_eq!(ds.kind(), DatasetKind::Labeled);
        assert_eq!(ds.posts()[0].label, Some(SeverityLabel::Severe));

        fs::write(&path, "{\"id\":\"1\",\"text\":\"a\",\"label\":\"low\"}\n{\"id\":\"2\",\"text\":\"hi\",\"label\":\"mild\"}\n").unwrap();
        let msg = load_dataset(&path, DatasetFormat::Jsonl, None)
            .unwrap_err()
            .to_string();
        assert!(msg.contains(":2:"), "{msg}");
        assert!(msg.contains("unknown label"), "{msg}");
        assert!(msg.contains("low, moderate, severe"), "{msg}");

        fs::write(
            &path,
            "{\"id\":\"1\",\"text\":\"a\"}\n{\"id\":\"1\",\"text\":\"b\"}\n",
        )
        .unwrap();
        let msg = load_dataset(&path, DatasetFormat::Jsonl, None)
            .unwrap_err()
            .to_string();
        assert!(msg.contains("duplicate"), "{msg}");

        fs::write(&path, "{\"id\":\"1\"}\n").unwrap();
        let msg = load_dataset(&path, DatasetFormat::Jsonl, None)
            .unwrap_err()
            .to_string();
        assert!(msg.contains("`text`"), "{msg}");

        fs::write(&path, "{\"id\":\"1\",\"text\":\"a\"}\nnot json\n").unwrap();
        let msg = load_dataset(&path, DatasetFormat::Jsonl, None)
            .unwrap_err()
            .to_string();
        assert!(msg.contains(":2:"), "{msg}");

        fs::write(
            &path,
            b"{\"id\":\"1\",\"text\":\"a\"}\n{\"id\":\"2\",\"text\":\"\xff\"}\n",
        )
        .unwrap();
        let msg = load_dataset(&path, DatasetFormat::Jsonl, None)
            .unwrap_err()
            .to_string();
        assert!(msg.contains("UTF-8") && msg.contains(":2:"), "{msg}");

        fs::write(&path, "{\"id\":\"1\",\"text\":\"a\",\"label\":\"low\"}\n").unwrap();
        assert!(load_dataset(&path, DatasetFormat::Jsonl, Some(DatasetKind::Unlabeled)).is_err());
    }

    #[test]
    fn csv_and_tsv_ingestion() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(
            &path,
            "text,id,label\n\"hello, \"\"world\"\"\",7,Moderate\nbye,8,low\n",
        )
        .unwrap();
        let ds = load_dataset(&path, DatasetFormat::from_path(&path), None).unwrap();
        assert_eq!(ds.posts()[0].text, "hello, \"world\"");
        assert_eq!(ds.posts()[0].id, "7");
        assert_eq!(ds.posts()[0].label, Some(SeverityLabel::Moderate));

        let tsv = dir.path().join("d.tsv");
        fs::write(&tsv, "id\ttext\tsubreddit\na\tx y\tr/adhd\n").unwrap();
        let ds = load_dataset(&tsv, DatasetFormat::from_path(&tsv), None).unwrap();
        assert_eq!(ds.kind(), DatasetKind::Unlabeled);
        assert_eq!(ds.posts()[0].subreddit.as_deref(), Some("r/adhd"));

        fs::write(&path, "id,label\n1,low\n").unwrap();
        assert!(load_dataset(&path, DatasetFormat::Csv, None).is_err());
    }

    #[test]
    fn round_trip_three_posts() {
        let ds = Dataset::labeled(vec![
            Post::labeled("a", "one, two", SeverityLabel::Low),
            Post::labeled("b", "quote \" here", SeverityLabel::Severe).with_subreddit("r/x"),
            Post::labeled("c", "ünïcode", SeverityLabel::Moderate),
        ])
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        for format in [DatasetFormat::Jsonl, DatasetFormat::Csv, DatasetFormat::Tsv] {
            let path = dir.path().join("rt");
            save_dataset(&ds, &path, format).unwrap();
            assert_eq!(load_dataset(&path, format, None).unwrap(), ds, "{format:?}");
        }
    }

    #[test]
    fn inputs_are_not_mutated() {
        let ds = unlabeled(&[("a", " hi "), ("b", "hi")]);
        let before = ds.clone();
        let _ = clean_and_dedup(&ds);
        let _ = drop_cross_split(&ds, &ds);
        assert_eq!(ds, before);
    }

    proptest! {
        #[test]
        fn clean_text_idempotent(s in "\\PC*|[ \\t\\n\\r\\u{a0}\\u{2028}a-zA-Z:/.w]*") {
            let once = clean_text(&s);
            prop_assert_eq!(clean_text(&once), once.clone());
            prop_assert!(!once.contains(['\n', '\t', '\r']));
            prop_assert_eq!(once.trim(), once.as_str());
        }

        #[test]
        fn dedup_idempotent(texts in proptest::collection::vec("[abc]{0,2}", 0..30)) {
            let posts = texts.iter().enumerate().map(|(i, t)| Post::new(i.to_string(), t.clone())).collect();
            let ds = Dataset::unlabeled(posts).unwrap();
            let (once, _) = dedup(&ds);
            let (twice, report) = dedup(&once);
            prop_assert_eq!(&once, &twice);
            prop_assert_eq!(report.n_dupes_dropped, 0);
        }

        #[test]
        fn cross_split_leaves_no_shared_text(
            train in proptest::collection::vec("[abcd]{1,2}", 0..30),
            dev in proptest::collection::vec("[abcd]{1,2}", 0..10),
        ) {
            let mk = |v: &[String], p: &str| Dataset::unlabeled(
                v.iter().enumerate().map(|(i, t)| Post::new(format!("{p}{i}"), t.clone())).collect()
            ).unwrap();
            let (train_ds, dev_ds) = (mk(&train, "t"), mk(&dev, "d"));
            let (out, report) = drop_cross_split(&train_ds, &dev_ds);
            for p in &out {
                for q in &dev_ds {
                    prop_assert_ne!(&p.text, &q.text);
                }
            }
            prop_assert!(report.is_consistent());
        }
    }
}
