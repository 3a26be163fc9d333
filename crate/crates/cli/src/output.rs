use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::CliError;

/// Writes `path` through a temporary file in the same directory and renames
/// it into place, so readers never see a partial file.
pub fn write_atomic<F>(path: &Path, body: F) -> Result<(), CliError>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<(), CliError>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let tmp = tempfile::NamedTempFile::new_in(dir)?;
    let (file, tmp_path) = tmp.into_parts();
    let mut w = BufWriter::new(file);
    body(&mut w)?;
    w.flush()?;
    w.get_ref().sync_all()?;
    tmp_path
        .persist(path)
        .map_err(|e| CliError::generic(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value).map_err(|e| CliError::generic(e.to_string()))?;
        w.write_all(b"\n")?;
        Ok(())
    })
}

/// Writes a JSON file wrapped in the versioned envelope.
pub fn write_envelope<T: Serialize>(path: &Path, kind: &str, value: &T) -> Result<(), CliError> {
    write_atomic(path, |w| Ok(flars_core::persist::save_json(kind, value, &mut *w)?))
}

pub fn csv_error(e: csv::Error) -> CliError {
    CliError::generic(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn failed_body_leaves_target_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        std::fs::write(&p, "old").unwrap();
        let r = write_atomic(&p, |w| {
            w.write_all(b"new")?;
            Err(CliError::generic("boom"))
        });
        assert!(r.is_err());
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "old");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
        write_atomic(&p, |w| Ok(w.write_all(b"new")?)).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "new");
    }
}
