use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Augmentation, ParallelCorpus, Provenance, SentencePair};
use crate::error::{Error, Result};

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let bytes = fs::read(path).map_err(Error::at(path))?;
    let text = std::str::from_utf8(&bytes)?;
    Ok(text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect())
}

pub fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<()> {
    let mut out = String::new();
    for l in lines {
        out.push_str(l.as_ref());
        out.push('\n');
    }
    fs::write(path, out).map_err(Error::at(path))
}

/// Two line-aligned files, one sentence per line.
pub fn read_aligned(source: &Path, target: &Path) -> Result<ParallelCorpus> {
    let s = read_lines(source)?;
    let t = read_lines(target)?;
    if s.len() != t.len() {
        return Err(Error::Align { hyps: s.len(), refs: t.len() });
    }
    Ok(s.iter().zip(&t).map(|(a, b)| SentencePair::from_lines(a, b)).collect())
}

/// `source<TAB>target` per line.
pub fn read_tsv(path: &Path) -> Result<ParallelCorpus> {
    read_lines(path)?
        .iter()
        .enumerate()
        .map(|(n, line)| {
            let (s, t) = line
                .split_once('\t')
                .ok_or_else(|| Error::format("tsv corpus", format!("{}:{}: no tab", path.display(), n + 1)))?;
            Ok(SentencePair::from_lines(s, t))
        })
        .collect::<Result<Vec<_>>>()
        .map(ParallelCorpus::new)
}

pub fn write_tsv(path: &Path, corpus: &ParallelCorpus) -> Result<()> {
    let lines: Vec<String> = corpus
        .iter()
        .map(|p| format!("{}\t{}", p.source.join(" "), p.target.join(" ")))
        .collect();
    write_lines(path, &lines)
}

/// One sidecar record: lines `start..end` share provenance and augmentation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub start: usize,
    pub end: usize,
    pub provenance: Provenance,
    pub augmentation: Augmentation,
    pub stage: String,
}

fn manifest_path(tsv: &Path) -> PathBuf {
    let mut name = tsv.as_os_str().to_owned();
    name.push(".manifest.jsonl");
    PathBuf::from(name)
}

pub(crate) fn manifest_records(corpus: &ParallelCorpus, stage: &str) -> Vec<ManifestRecord> {
    let mut out: Vec<ManifestRecord> = Vec::new();
    for (i, p) in corpus.iter().enumerate() {
        match out.last_mut() {
            Some(r) if r.provenance == p.provenance && r.augmentation == p.augmentation => r.end = i + 1,
            _ => out.push(ManifestRecord {
                start: i,
                end: i + 1,
                provenance: p.provenance,
                augmentation: p.augmentation,
                stage: stage.to_string(),
            }),
        }
    }
    out
}

/// Writes the TSV plus its `.manifest.jsonl` sidecar.
pub fn write_corpus(path: &Path, corpus: &ParallelCorpus, stage: &str) -> Result<()> {
    write_tsv(path, corpus)?;
    let mut text = String::new();
    for r in manifest_records(corpus, stage) {
        text.push_str(&serde_json::to_string(&r).expect("manifest record serializes"));
        text.push('\n');
    }
    let m = manifest_path(path);
    fs::write(&m, text).map_err(Error::at(m))
}

/// Reads a TSV corpus, applying labels from its sidecar when present.
/// Without a sidecar every pair is clean gold data.
pub fn read_corpus(path: &Path) -> Result<ParallelCorpus> {
    let mut corpus = read_tsv(path)?;
    let m = manifest_path(path);
    if !m.exists() {
        return Ok(corpus);
    }
    let mut covered = 0;
    for (n, line) in read_lines(&m)?.iter().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let r: ManifestRecord = serde_json::from_str(line)
            .map_err(|e| Error::format("corpus manifest", format!("line {}: {e}", n + 1)))?;
        if r.start != covered || r.end <= r.start || r.end > corpus.len() {
            return Err(Error::format(
                "corpus manifest",
                format!("line {}: span {}..{} does not continue at {covered}", n + 1, r.start, r.end),
            ));
        }
        for p in &mut corpus.pairs[r.start..r.end] {
            p.provenance = r.provenance;
            p.augmentation = r.augmentation;
        }
        covered = r.end;
    }
    if covered != corpus.len() {
        return Err(Error::format(
            "corpus manifest",
            format!("covers {covered} of {} lines", corpus.len()),
        ));
    }
    Ok(corpus)
}
