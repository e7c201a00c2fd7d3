//! Append-only JSONL trajectory storage, one record per line.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::mdp::{MdpError, Trajectory, Vocabulary};

/// Single-writer trajectory log. Readers only see complete lines, so a read
/// racing an append observes a consistent prefix.
#[derive(Debug)]
pub struct TrajectoryStore {
    path: PathBuf,
    vocab: Vocabulary,
    writer: Option<BufWriter<File>>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MdpError + '_ {
    move |source| MdpError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl TrajectoryStore {
    /// Creates (or truncates) a store at `path`.
    pub fn create(path: impl Into<PathBuf>, vocab: Vocabulary) -> Result<Self, MdpError> {
        let path = path.into();
        let f = File::create(&path).map_err(io_err(&path))?;
        Ok(Self {
            path,
            vocab,
            writer: Some(BufWriter::new(f)),
        })
    }

    /// Opens a store for appending, creating the file if needed.
    pub fn open(path: impl Into<PathBuf>, vocab: Vocabulary) -> Result<Self, MdpError> {
        let path = path.into();
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        Ok(Self {
            path,
            vocab,
            writer: Some(BufWriter::new(f)),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, t: &Trajectory) -> Result<(), MdpError> {
        t.validate(&self.vocab)?;
        let w = self.writer.as_mut().expect("writer present while store is open");
        let mut line = t.to_json_line();
        line.push('\n');
        w.write_all(line.as_bytes()).map_err(io_err(&self.path))?;
        w.flush().map_err(io_err(&self.path))
    }

    pub fn append_all<'a>(
        &mut self,
        ts: impl IntoIterator<Item = &'a Trajectory>,
    ) -> Result<(), MdpError> {
        ts.into_iter().try_for_each(|t| self.append(t))
    }

    /// Flushes and fsyncs the underlying file.
    pub fn sync(&mut self) -> Result<(), MdpError> {
        if let Some(w) = self.writer.as_mut() {
            w.flush().map_err(io_err(&self.path))?;
            w.get_ref().sync_data().map_err(io_err(&self.path))?;
        }
        Ok(())
    }

    pub fn read_all(&self) -> Result<Vec<Trajectory>, MdpError> {
        read_trajectories(&self.path)
    }
}

/// Reads every complete line of a JSONL trajectory file. A trailing line
/// without a newline is an in-progress append and is skipped.
pub fn read_trajectories(path: impl AsRef<Path>) -> Result<Vec<Trajectory>, MdpError> {
    let path = path.as_ref();
    let mut buf = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut buf))
        .map_err(io_err(path))?;
    parse_jsonl(&buf)
}

/// Parses JSONL text. Only newline-terminated records are returned.
pub fn parse_jsonl(text: &str) -> Result<Vec<Trajectory>, MdpError> {
    let complete = match text.rfind('\n') {
        Some(i) => &text[..i],
        None => return Ok(Vec::new()),
    };
    complete
        .split('\n')
        .filter(|l| !l.trim().is_empty())
        .map(Trajectory::from_json_line)
        .collect()
}
