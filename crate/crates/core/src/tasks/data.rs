//! Feature and example files.
//!
//! All formats are tab-separated text. Blank lines and lines starting with
//! `#` are skipped.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_label(path: &Path, line: usize, s: &str) -> Result<bool> {
    match s.trim() {
        "1" => Ok(true),
        "0" => Ok(false),
        other => Err(parse_err(path, line, format!("label `{other}` is not 0 or 1"))),
    }
}

/// External feature vectors keyed by id, all of one dimension.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureFile {
    pub dim: usize,
    pub vectors: BTreeMap<String, Vec<f64>>,
}

impl FeatureFile {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, id: &str, v: Vec<f64>) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::TaskData(format!(
                "feature `{id}` has {} values, expected {}",
                v.len(),
                self.dim
            )));
        }
        if self.vectors.insert(id.to_owned(), v).is_some() {
            return Err(Error::TaskData(format!("duplicate feature id `{id}`")));
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&[f64]> {
        self.vectors
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::TaskData(format!("no feature vector for `{id}`")))
    }

    /// Header `dim=<d>`, then `id<TAB>v1,v2,...`.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = content_lines(text);
        let (hl, header) = lines
            .next()
            .ok_or_else(|| parse_err(origin, 1, "missing `dim=<d>` header"))?;
        let dim: usize = header
            .trim()
            .strip_prefix("dim=")
            .and_then(|d| d.parse().ok())
            .filter(|&d| d > 0)
            .ok_or_else(|| parse_err(origin, hl, format!("bad header `{header}`, expected dim=<d>")))?;
        let mut out = Self::new(dim);
        for (ln, line) in lines {
            let (id, vals) = line
                .split_once('\t')
                .ok_or_else(|| parse_err(origin, ln, "expected `id<TAB>values`"))?;
            let v = vals
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| parse_err(origin, ln, format!("bad value: {e}")))?;
            if v.len() != dim {
                return Err(parse_err(origin, ln, format!("{} values, header says {dim}", v.len())));
            }
            if out.vectors.insert(id.to_owned(), v).is_some() {
                return Err(parse_err(origin, ln, format!("duplicate id `{id}`")));
            }
        }
        Ok(out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&read(path)?, path)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("dim={}\n", self.dim);
        for (id, v) in &self.vectors {
            let vals: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            writeln!(out, "{id}\t{}", vals.join(",")).unwrap();
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TcExample {
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub label: bool,
}

pub fn parse_tc_examples(text: &str, origin: &Path) -> Result<Vec<TcExample>> {
    content_lines(text)
        .map(|(ln, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            let [h, r, t, l] = f[..] else {
                return Err(parse_err(origin, ln, format!("expected 4 fields, found {}", f.len())));
            };
            Ok(TcExample {
                head: h.to_owned(),
                relation: r.to_owned(),
                tail: t.to_owned(),
                label: parse_label(origin, ln, l)?,
            })
        })
        .collect()
}

pub fn load_tc_examples(path: impl AsRef<Path>) -> Result<Vec<TcExample>> {
    let path = path.as_ref();
    parse_tc_examples(&read(path)?, path)
}

pub fn tc_examples_text(examples: &[TcExample]) -> String {
    let mut out = String::new();
    for e in examples {
        writeln!(out, "{}\t{}\t{}\t{}", e.head, e.relation, e.tail, e.label as u8).unwrap();
    }
    out
}

/// Zero-shot classes with their split.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClassSplit {
    pub seen: BTreeSet<String>,
    pub unseen: BTreeSet<String>,
}

impl ClassSplit {
    pub fn all(&self) -> impl Iterator<Item = &String> {
        self.seen.iter().chain(&self.unseen)
    }

    pub fn is_seen(&self, class: &str) -> Option<bool> {
        if self.seen.contains(class) {
            Some(true)
        } else if self.unseen.contains(class) {
            Some(false)
        } else {
            None
        }
    }
}

/// `class<TAB>seen|unseen`
pub fn parse_classes(text: &str, origin: &Path) -> Result<ClassSplit> {
    let mut out = ClassSplit::default();
    for (ln, line) in content_lines(text) {
        let Some((c, split)) = line.split_once('\t') else {
            return Err(parse_err(origin, ln, "expected `class<TAB>seen|unseen`"));
        };
        let fresh = match split.trim() {
            "seen" => out.seen.insert(c.to_owned()) && !out.unseen.contains(c),
            "unseen" => out.unseen.insert(c.to_owned()) && !out.seen.contains(c),
            other => return Err(parse_err(origin, ln, format!("split `{other}` is not seen|unseen"))),
        };
        if !fresh {
            return Err(parse_err(origin, ln, format!("class `{c}` listed twice")));
        }
    }
    Ok(out)
}

pub fn load_classes(path: impl AsRef<Path>) -> Result<ClassSplit> {
    let path = path.as_ref();
    parse_classes(&read(path)?, path)
}

/// An image with a class. Without a label the class is the image's gold
/// class; with one it is an explicit training pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ZslExample {
    pub image: String,
    pub class: String,
    pub label: Option<bool>,
}

/// `image_id<TAB>class[<TAB>label]`
pub fn parse_zsl_examples(text: &str, origin: &Path) -> Result<Vec<ZslExample>> {
    content_lines(text)
        .map(|(ln, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            match f[..] {
                [i, c] => Ok(ZslExample {
                    image: i.to_owned(),
                    class: c.to_owned(),
                    label: None,
                }),
                [i, c, l] => Ok(ZslExample {
                    image: i.to_owned(),
                    class: c.to_owned(),
                    label: Some(parse_label(origin, ln, l)?),
                }),
                _ => Err(parse_err(origin, ln, format!("expected 2 or 3 fields, found {}", f.len()))),
            }
        })
        .collect()
}

pub fn load_zsl_examples(path: impl AsRef<Path>) -> Result<Vec<ZslExample>> {
    let path = path.as_ref();
    parse_zsl_examples(&read(path)?, path)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaExample {
    pub group: String,
    /// Feature id of the question-choice pair.
    pub qc: String,
    pub keywords: Vec<String>,
    pub label: bool,
}

/// Candidates per question.
pub const QA_GROUP_SIZE: usize = 5;

/// `group<TAB>qc_id<TAB>kw1,kw2<TAB>label`
pub fn parse_qa_examples(text: &str, origin: &Path) -> Result<Vec<QaExample>> {
    content_lines(text)
        .map(|(ln, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            let [g, qc, kw, l] = f[..] else {
                return Err(parse_err(origin, ln, format!("expected 4 fields, found {}", f.len())));
            };
            let keywords: Vec<String> = kw
                .split(',')
                .map(str::trim)
                .filter(|k| !k.is_empty())
                .map(str::to_owned)
                .collect();
            if keywords.is_empty() {
                return Err(parse_err(origin, ln, "no keywords"));
            }
            Ok(QaExample {
                group: g.to_owned(),
                qc: qc.to_owned(),
                keywords,
                label: parse_label(origin, ln, l)?,
            })
        })
        .collect()
}

pub fn load_qa_examples(path: impl AsRef<Path>) -> Result<Vec<QaExample>> {
    let path = path.as_ref();
    parse_qa_examples(&read(path)?, path)
}

pub fn qa_examples_text(examples: &[QaExample]) -> String {
    let mut out = String::new();
    for e in examples {
        writeln!(out, "{}\t{}\t{}\t{}", e.group, e.qc, e.keywords.join(","), e.label as u8).unwrap();
    }
    out
}

/// Example indices per group, in order of first appearance. Every group must
/// hold exactly five candidates, one of them positive.
pub fn qa_groups(examples: &[QaExample]) -> Result<Vec<Vec<usize>>> {
    let mut order: Vec<&str> = Vec::new();
    let mut members: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        let m = members.entry(&e.group).or_default();
        if m.is_empty() {
            order.push(&e.group);
        }
        m.push(i);
    }
    order
        .into_iter()
        .map(|g| {
            let m = members.remove(g).unwrap();
            let pos = m.iter().filter(|&&i| examples[i].label).count();
            if m.len() != QA_GROUP_SIZE || pos != 1 {
                return Err(Error::TaskData(format!(
                    "group `{g}` has {} candidates and {pos} positives, expected {QA_GROUP_SIZE} and 1",
                    m.len()
                )));
            }
            Ok(m)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("x.tsv")
    }

    #[test]
    fn features_round_trip() {
        let mut f = FeatureFile::new(2);
        f.insert("a", vec![0.5, -1.0]).unwrap();
        f.insert("b", vec![1e-3, 2.0]).unwrap();
        assert_eq!(FeatureFile::parse(&f.to_text(), p()).unwrap(), f);
        assert!(f.insert("a", vec![0.0, 0.0]).is_err());
        assert!(f.insert("c", vec![0.0]).is_err());
    }

    #[test]
    fn feature_errors_carry_lines() {
        let e = FeatureFile::parse("dim=2\na\t1,2\nb\t1\n", p()).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }), "{e}");
        assert!(FeatureFile::parse("a\t1,2\n", p()).is_err());
        assert!(FeatureFile::parse("dim=1\na\t1\na\t2\n", p()).is_err());
    }

    #[test]
    fn tc_rows() {
        let ex = parse_tc_examples("# c\na\tr\tb\t1\nb\tr\ta\t0\n", p()).unwrap();
        assert_eq!(ex.len(), 2);
        assert!(ex[0].label && !ex[1].label);
        assert_eq!(parse_tc_examples(&tc_examples_text(&ex), p()).unwrap(), ex);
        assert!(parse_tc_examples("a\tr\tb\t2\n", p()).is_err());
        assert!(parse_tc_examples("a\tr\tb\n", p()).is_err());
    }

    #[test]
    fn classes_and_images() {
        let c = parse_classes("cat\tseen\ndog\tunseen\n", p()).unwrap();
        assert_eq!(c.is_seen("cat"), Some(true));
        assert_eq!(c.is_seen("dog"), Some(false));
        assert_eq!(c.is_seen("cow"), None);
        assert!(parse_classes("cat\tseen\ncat\tunseen\n", p()).is_err());
        let z = parse_zsl_examples("i1\tcat\ni2\tdog\t0\n", p()).unwrap();
        assert_eq!(z[0].label, None);
        assert_eq!(z[1].label, Some(false));
    }

    #[test]
    fn qa_grouping() {
        let mut text = String::new();
        for g in ["q1", "q2"] {
            for c in 0..5 {
                text.push_str(&format!("{g}\t{g}c{c}\tk1,k2\t{}\n", (c == 2) as u8));
            }
        }
        let ex = parse_qa_examples(&text, p()).unwrap();
        assert_eq!(ex[0].keywords, ["k1", "k2"]);
        let groups = qa_groups(&ex).unwrap();
        assert_eq!(groups, vec![vec![0, 1, 2, 3, 4], vec![5, 6, 7, 8, 9]]);
        assert!(qa_groups(&ex[..9]).is_err());
        let mut two = ex.clone();
        two[0].label = true;
        assert!(qa_groups(&two).is_err());
    }
}
