//! Bundled example knowledge bases, embedded so `bumper init` and the tests
//! need no files outside the binary.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy)]
pub struct FixtureFile {
    /// Path relative to the fixture's root directory.
    pub path: &'static str,
    pub contents: &'static str,
}

#[derive(Debug, Clone, Copy)]
pub struct Fixture {
    pub name: &'static str,
    pub files: &'static [FixtureFile],
}

macro_rules! file {
    ($fixture:literal, $path:literal) => {
        FixtureFile { path: $path, contents: include_str!(concat!("../fixtures/", $fixture, "/", $path)) }
    };
}

pub const MEASLES: Fixture = Fixture {
    name: "measles",
    files: &[
        file!("measles", "config.json"),
        file!("measles", "mock.json"),
        file!("measles", "data/sia_months.csv"),
        file!("measles", "data/high_transmission.csv"),
        file!("measles", "data/low_transmission.csv"),
        file!("measles", "data/methodology.txt"),
    ],
};

pub const RUGBY: Fixture = Fixture {
    name: "rugby",
    files: &[
        file!("rugby", "config.json"),
        file!("rugby", "mock.json"),
        file!("rugby", "data/team_strengths.csv"),
    ],
};

pub const STARTER: Fixture = Fixture {
    name: "starter",
    files: &[file!("starter", "config.json"), file!("starter", "data/example.csv")],
};

pub const ALL: [Fixture; 3] = [MEASLES, RUGBY, STARTER];

impl Fixture {
    pub fn file(&self, path: &str) -> Option<&'static str> {
        self.files.iter().find(|f| f.path == path).map(|f| f.contents)
    }

    /// Writes the fixture into `dir/<name>/`, returning the config path.
    /// Existing files are left alone unless `force` is set.
    pub fn write_to(&self, dir: &Path, force: bool) -> io::Result<PathBuf> {
        let root = dir.join(self.name);
        for f in self.files {
            let target = root.join(f.path);
            if target.exists() && !force {
                return Err(io::Error::new(
                    io::ErrorKind::AlreadyExists,
                    format!("{} exists (use --force to overwrite)", target.display()),
                ));
            }
        }
        for f in self.files {
            let target = root.join(f.path);
            if let Some(parent) = target.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(&target, f.contents)?;
        }
        Ok(root.join("config.json"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::BumperConfig;
    use crate::llm::MockScript;

    #[test]
    fn fixtures_parse() {
        for fx in ALL {
            let cfg = BumperConfig::from_json(fx.file("config.json").unwrap(), ".").unwrap();
            cfg.validate().unwrap();
            if let Some(mock) = fx.file("mock.json") {
                serde_json::from_str::<MockScript>(mock).unwrap();
            }
        }
    }

    #[test]
    fn write_respects_force() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RUGBY.write_to(dir.path(), false).unwrap();
        assert!(cfg.is_file());
        assert!(RUGBY.write_to(dir.path(), false).is_err());
        RUGBY.write_to(dir.path(), true).unwrap();
    }
}
