//! Write-to-temp, rename-on-success file output.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

/// Writes a file atomically: the payload goes to `<path>.tmp` in the same
/// directory and is renamed over the target only after `write` succeeds,
/// so a failed run never leaves a truncated artifact behind.
pub fn atomic_write<F>(path: &Path, write: F) -> io::Result<()>
where
    F: FnOnce(&mut BufWriter<fs::File>) -> io::Result<()>,
{
    let tmp = tmp_path(path);
    let result = (|| {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        write(&mut w)?;
        w.flush()?;
        Ok(())
    })();
    match result {
        Ok(()) => fs::rename(&tmp, path),
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}

fn tmp_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn failed_write_leaves_no_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("out.bin");
        let err = atomic_write(&target, |_w| {
            Err(io::Error::new(io::ErrorKind::Other, "boom"))
        });
        assert!(err.is_err());
        assert!(!target.exists());
        assert!(!dir.path().join("out.bin.tmp").exists());
    }

    #[test]
    fn successful_write_lands_once() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("out.bin");
        atomic_write(&target, |w| w.write_all(b"payload")).unwrap();
        assert_eq!(fs::read(&target).unwrap(), b"payload");
    }
}
