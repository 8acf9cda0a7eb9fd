//! Append-only JSON-lines journals, one file per record kind.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug)]
pub struct Journal {
    dir: PathBuf,
    files: Mutex<HashMap<&'static str, File>>,
}

impl Journal {
    pub fn open(dir: impl AsRef<Path>) -> std::io::Result<Self> {
        fs::create_dir_all(dir.as_ref())?;
        Ok(Self { dir: dir.as_ref().to_path_buf(), files: Mutex::new(HashMap::new()) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(format!("{name}.jsonl"))
    }

    /// Appends one record and syncs it to disk before returning.
    pub fn append<T: Serialize>(&self, name: &'static str, record: &T) -> std::io::Result<()> {
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        let mut files = self.files.lock().unwrap_or_else(|p| p.into_inner());
        if !files.contains_key(name) {
            let f = OpenOptions::new().create(true).append(true).open(self.path(name))?;
            files.insert(name, f);
        }
        let f = files.get_mut(name).expect("inserted above");
        f.write_all(&line)?;
        f.flush()?;
        f.sync_data()
    }

    /// Reads every complete record. An unterminated last line is a torn
    /// write and is skipped.
    pub fn load<T: DeserializeOwned>(&self, name: &str) -> std::io::Result<Vec<T>> {
        let file = match File::open(self.path(name)) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e),
        };
        let mut reader = BufReader::new(file);
        let mut out = Vec::new();
        let mut good = 0u64;
        loop {
            let mut line = String::new();
            if reader.read_line(&mut line)? == 0 {
                break;
            }
            if !line.ends_with('\n') {
                log::warn!("dropping torn record at end of {name}");
                OpenOptions::new().write(true).open(self.path(name))?.set_len(good)?;
                break;
            }
            good += line.len() as u64;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| {
                std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{name}: {e}"))
            })?);
        }
        Ok(out)
    }
}
