//! Dataset manifests.
//!
//! Line-oriented text: a small header (`name=`, `role=`), optional
//! `ref=<path>` lines for the reference pool, then one image path per line.
//! Blank lines and `#` comments are ignored. Paths are validated at open
//! time (file exists and has a decodable image header).

use std::fmt;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Eval,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Train => write!(f, "train"),
            Role::Eval => write!(f, "eval"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub role: Role,
    pub image_paths: Vec<PathBuf>,
    pub reference_paths: Vec<PathBuf>,
}

fn check_image_path(path: &Path) -> Result<()> {
    image::image_dimensions(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: format!("manifest entry is not a readable image: {e}"),
    })?;
    Ok(())
}

impl DatasetManifest {
    /// Parse and validate a manifest file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let mut name = None;
        let mut role = None;
        let mut image_paths = Vec::new();
        let mut reference_paths = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(v) = line.strip_prefix("name=") {
                name = Some(v.trim().to_string());
            } else if let Some(v) = line.strip_prefix("role=") {
                role = Some(match v.trim() {
                    "train" => Role::Train,
                    "eval" => Role::Eval,
                    other => {
                        return Err(Error::Manifest(format!(
                            "{}:{}: unknown role '{other}'",
                            path.display(),
                            lineno + 1
                        )))
                    }
                });
            } else if let Some(v) = line.strip_prefix("ref=") {
                reference_paths.push(resolve(dir, v.trim()));
            } else {
                image_paths.push(resolve(dir, line));
            }
        }
        let name = name.ok_or_else(|| {
            Error::Manifest(format!("{}: missing name= header", path.display()))
        })?;
        let role = role.ok_or_else(|| {
            Error::Manifest(format!("{}: missing role= header", path.display()))
        })?;
        if image_paths.is_empty() {
            return Err(Error::Manifest(format!(
                "{}: manifest lists no images",
                path.display()
            )));
        }
        for p in image_paths.iter().chain(reference_paths.iter()) {
            check_image_path(p)?;
        }
        Ok(DatasetManifest {
            name,
            role,
            image_paths,
            reference_paths,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        out.push_str(&format!("name={}\n", self.name));
        out.push_str(&format!("role={}\n", self.role));
        for p in &self.reference_paths {
            out.push_str(&format!("ref={}\n", p.display()));
        }
        for p in &self.image_paths {
            out.push_str(&format!("{}\n", p.display()));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Build a manifest from every PNG in a directory (sorted by file name).
    pub fn from_dir(dir: impl AsRef<Path>, name: &str, role: Role) -> Result<Self> {
        let dir = dir.as_ref();
        let mut image_paths = Vec::new();
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let p = entry.path();
            if p.extension().and_then(|e| e.to_str()).map(|e| e.eq_ignore_ascii_case("png"))
                == Some(true)
            {
                image_paths.push(p);
            }
        }
        image_paths.sort();
        if image_paths.is_empty() {
            return Err(Error::Manifest(format!(
                "no .png files under {}",
                dir.display()
            )));
        }
        Ok(DatasetManifest {
            name: name.to_string(),
            role,
            image_paths,
            reference_paths: Vec::new(),
        })
    }
}

fn resolve(dir: &Path, p: &str) -> PathBuf {
    let pb = PathBuf::from(p);
    if pb.is_absolute() {
        pb
    } else {
        dir.join(pb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{save_image, ImageTensor, ValueRange};

    fn write_png(dir: &Path, name: &str) -> PathBuf {
        let p = dir.join(name);
        let img = ImageTensor::constant(3, 4, 4, 0.5, ValueRange::Unit).unwrap();
        save_image(&img, &p).unwrap();
        p
    }

    #[test]
    fn round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "a.png");
        write_png(dir.path(), "b.png");
        write_png(dir.path(), "r.png");
        let m = DatasetManifest {
            name: "toy".into(),
            role: Role::Train,
            image_paths: vec![dir.path().join("a.png"), dir.path().join("b.png")],
            reference_paths: vec![dir.path().join("r.png")],
        };
        let mp = dir.path().join("m.txt");
        m.save(&mp).unwrap();
        let loaded = DatasetManifest::load(&mp).unwrap();
        assert_eq!(loaded, m);
    }

    #[test]
    fn missing_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mp = dir.path().join("m.txt");
        std::fs::write(&mp, "name=x\nrole=eval\n/nonexistent/img.png\n").unwrap();
        assert!(DatasetManifest::load(&mp).is_err());
    }

    #[test]
    fn header_required() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_png(dir.path(), "a.png");
        let mp = dir.path().join("m.txt");
        std::fs::write(&mp, format!("{}\n", p.display())).unwrap();
        assert!(DatasetManifest::load(&mp).is_err());
    }

    #[test]
    fn from_dir_sorts_pngs() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "b.png");
        write_png(dir.path(), "a.png");
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let m = DatasetManifest::from_dir(dir.path(), "d", Role::Eval).unwrap();
        assert_eq!(m.image_paths.len(), 2);
        assert!(m.image_paths[0].ends_with("a.png"));
    }
}
