use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{Corpus, Dataset, QqPair, Query, QueryBag};
use crate::error::{Error, Result};

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            Error::invalid(format!("{}:{}: {e}", path.display(), n + 1))
        })?);
    }
    Ok(out)
}

/// On-disk layout of a prepared dataset directory.
#[derive(Debug, Clone)]
pub struct CorpusFiles {
    pub dir: PathBuf,
}

impl CorpusFiles {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        CorpusFiles { dir: dir.into() }
    }

    pub fn queries(&self) -> PathBuf {
        self.dir.join("queries.jsonl")
    }

    pub fn bags(&self) -> PathBuf {
        self.dir.join("bags.jsonl")
    }

    pub fn pairs(&self, split: &str) -> PathBuf {
        self.dir.join(format!("{split}.jsonl"))
    }

    pub fn save(&self, data: &Dataset) -> Result<()> {
        write_jsonl(&self.queries(), &data.corpus.queries)?;
        write_jsonl(&self.bags(), &data.corpus.bags)?;
        write_jsonl(&self.pairs("train"), &data.train)?;
        write_jsonl(&self.pairs("valid"), &data.valid)?;
        write_jsonl(&self.pairs("test"), &data.test)
    }

    pub fn load(&self) -> Result<Dataset> {
        let queries: Vec<Query> = read_jsonl(&self.queries())?;
        let bags: Vec<QueryBag> = read_jsonl(&self.bags())?;
        let corpus = Corpus::new(queries, bags)?;
        let load = |s: &str| -> Result<Vec<QqPair>> { read_jsonl(&self.pairs(s)) };
        Dataset::from_parts(corpus, load("train")?, load("valid")?, load("test")?)
    }
}
