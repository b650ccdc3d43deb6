use std::path::{Path, PathBuf};

use crate::error::CliError;

/// Line-delimited records with a one-line header.
pub struct RecordFile {
    path: PathBuf,
    writer: csv::Writer<std::fs::File>,
}

fn output_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Output {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

impl RecordFile {
    pub fn create(dir: &Path, name: &str, header: &[&str]) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| output_error(dir, e))?;
        let path = dir.join(name);
        let mut writer = csv::Writer::from_path(&path).map_err(|e| output_error(&path, e))?;
        writer.write_record(header).map_err(|e| output_error(&path, e))?;
        Ok(RecordFile { path, writer })
    }

    pub fn row<I, S>(&mut self, fields: I) -> Result<(), CliError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.writer
            .write_record(fields)
            .map_err(|e| output_error(&self.path, e))
    }

    pub fn finish(mut self) -> Result<PathBuf, CliError> {
        self.writer.flush().map_err(|e| output_error(&self.path, e))?;
        Ok(self.path)
    }
}
