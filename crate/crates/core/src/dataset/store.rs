use std::fs;
use std::path::{Path, PathBuf};

use base64::Engine as _;

use super::PipelineError;

/// Subdirectory holding a stage's image files.
pub const IMAGE_DIR: &str = "images";

/// Resolves image references and stores new images.
///
/// References are read relative to `read_root` (then `write_root`), and new
/// images go to `write_root/images/` with references relative to
/// `write_root`, so an output directory is self-contained once its image
/// directory is in place.
#[derive(Debug, Clone)]
pub struct ImageStore {
    read_root: PathBuf,
    write_root: PathBuf,
}

fn image_err(reference: &str, reason: impl ToString) -> PipelineError {
    let shown: String = reference.chars().take(64).collect();
    PipelineError::Image { reference: shown, reason: reason.to_string() }
}

/// Keeps file names portable.
fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') { c } else { '_' })
        .collect()
}

impl ImageStore {
    pub fn new(read_root: impl Into<PathBuf>, write_root: impl Into<PathBuf>) -> Self {
        ImageStore { read_root: read_root.into(), write_root: write_root.into() }
    }

    /// Reads and writes under one directory.
    pub fn at(root: impl Into<PathBuf>) -> Self {
        let root = root.into();
        ImageStore { read_root: root.clone(), write_root: root }
    }

    pub fn write_root(&self) -> &Path {
        &self.write_root
    }

    /// Bytes behind a reference: a `data:` URI, a file path, or bare base64.
    pub fn load(&self, reference: &str) -> Result<Vec<u8>, PipelineError> {
        let b64 = &base64::engine::general_purpose::STANDARD;
        if let Some(rest) = reference.strip_prefix("data:") {
            let (_, payload) = rest.split_once(";base64,").ok_or_else(|| image_err(reference, "data URI is not base64"))?;
            return b64.decode(payload.trim()).map_err(|e| image_err(reference, e));
        }
        let path = Path::new(reference);
        let candidates = if path.is_absolute() {
            vec![path.to_path_buf()]
        } else {
            vec![self.read_root.join(path), self.write_root.join(path)]
        };
        if let Some(p) = candidates.iter().find(|p| p.is_file()) {
            return fs::read(p).map_err(|e| image_err(reference, e));
        }
        // Paths are short and contain separators or extensions; long
        // strings that decode cleanly are taken as inline images.
        if reference.len() >= 32 {
            if let Ok(bytes) = b64.decode(reference.trim()) {
                return Ok(bytes);
            }
        }
        Err(image_err(reference, "no such file"))
    }

    /// Writes `bytes` as `images/<name>` and returns that reference.
    pub fn save(&self, name: &str, bytes: &[u8]) -> Result<String, PipelineError> {
        let dir = self.write_root.join(IMAGE_DIR);
        fs::create_dir_all(&dir).map_err(|e| image_err(name, e))?;
        let file = sanitize(name);
        fs::write(dir.join(&file), bytes).map_err(|e| image_err(name, e))?;
        Ok(format!("{IMAGE_DIR}/{file}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_and_resolves_inline_images() {
        let dir = tempfile::tempdir().unwrap();
        let store = ImageStore::at(dir.path());
        let reference = store.save("a/b c.png", b"bytes").unwrap();
        assert_eq!(reference, "images/a_b_c.png");
        assert_eq!(store.load(&reference).unwrap(), b"bytes");

        let data = vec![7u8; 40];
        let encoded = base64::engine::general_purpose::STANDARD.encode(&data);
        assert_eq!(store.load(&encoded).unwrap(), data);
        assert_eq!(store.load(&format!("data:image/png;base64,{encoded}")).unwrap(), data);
        assert!(store.load("missing.png").is_err());
    }

    #[test]
    fn falls_back_to_write_root() {
        let input = tempfile::tempdir().unwrap();
        let output = tempfile::tempdir().unwrap();
        let store = ImageStore::new(input.path(), output.path());
        let reference = store.save("x.png", b"1").unwrap();
        assert_eq!(store.load(&reference).unwrap(), b"1");
        std::fs::write(input.path().join("src.png"), b"2").unwrap();
        assert_eq!(store.load("src.png").unwrap(), b"2");
    }
}
