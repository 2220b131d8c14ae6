//! Files written by the commands. Every file opens with a comment header
//! naming the tool version, the config hash and the seed.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Provenance shared by all files of one invocation.
#[derive(Debug, Clone)]
pub struct Stamp {
    pub config_hash: String,
    pub seed: u64,
}

impl Stamp {
    fn header(&self, w: &mut impl Write, extra: &[String]) -> std::io::Result<()> {
        writeln!(w, "# pairlim {VERSION}")?;
        writeln!(w, "# config_sha256 {}", self.config_hash)?;
        writeln!(w, "# seed {}", self.seed)?;
        for line in extra {
            writeln!(w, "# {line}")?;
        }
        Ok(())
    }
}

/// Reals with 17 significant digits, enough to round-trip any f64.
pub fn real(x: f64) -> String {
    format!("{x:.16e}")
}

pub struct Output {
    pub dir: PathBuf,
    pub stamp: Stamp,
    pub written: Vec<PathBuf>,
}

impl Output {
    pub fn new(dir: &Path, stamp: Stamp) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            stamp,
            written: Vec::new(),
        })
    }

    fn create(&mut self, name: &str) -> std::io::Result<BufWriter<File>> {
        let path = self.dir.join(name);
        let f = File::create(&path)?;
        self.written.push(path);
        Ok(BufWriter::new(f))
    }

    /// A CSV table with the provenance header and `extra` comment lines.
    pub fn csv(
        &mut self,
        name: &str,
        extra: &[String],
        columns: &[String],
        rows: impl IntoIterator<Item = Vec<String>>,
    ) -> std::io::Result<()> {
        let mut w = self.create(name)?;
        self.stamp.header(&mut w, extra)?;
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(columns)?;
        for row in rows {
            csv.write_record(&row)?;
        }
        csv.flush()?;
        Ok(())
    }

    /// A TOML document with the provenance header.
    pub fn toml<T: Serialize>(&mut self, name: &str, value: &T) -> std::io::Result<()> {
        let body = toml::to_string(value).map_err(std::io::Error::other)?;
        let mut w = self.create(name)?;
        self.stamp.header(&mut w, &[])?;
        w.write_all(body.as_bytes())?;
        w.flush()
    }

    /// A JSON document; JSON has no comments, so provenance goes in fields.
    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> std::io::Result<()> {
        #[derive(Serialize)]
        struct Stamped<'a, T> {
            tool: String,
            config_sha256: &'a str,
            seed: u64,
            #[serde(flatten)]
            body: &'a T,
        }
        let hash = self.stamp.config_hash.clone();
        let doc = Stamped {
            tool: format!("pairlim {VERSION}"),
            config_sha256: &hash,
            seed: self.stamp.seed,
            body: value,
        };
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, &doc).map_err(std::io::Error::other)?;
        writeln!(w)?;
        w.flush()
    }

    pub fn file_names(&self) -> Vec<String> {
        self.written
            .iter()
            .filter_map(|p| p.file_name().map(|s| s.to_string_lossy().into_owned()))
            .collect()
    }
}
