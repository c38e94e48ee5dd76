//! Output directory handling and the artifact file formats: CSV fields with
//! 17-significant-digit decimal floats, JSON summaries, and a sibling
//! metadata JSON (config hash + seed) next to every file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use condkl::{Field, MomentField, StructuredGrid};
use serde::Serialize;

/// Formats a float with 17 significant digits; round-trips f64 exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Locked output directory; the lockfile blocks concurrent writers and is
/// removed when the guard drops.
pub struct OutDir {
    path: PathBuf,
    lock: PathBuf,
    config_sha256: String,
    seed: u64,
}

impl OutDir {
    pub fn create(path: &Path, config_sha256: String, seed: u64) -> Result<Self> {
        fs::create_dir_all(path)
            .with_context(|| format!("cannot create output directory {}", path.display()))?;
        let lock = path.join(".condkl.lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                bail!(
                    "output directory {} is locked by another run (remove {} if stale)",
                    path.display(),
                    lock.display()
                );
            }
            Err(e) => {
                return Err(e).context("cannot create lockfile");
            }
        }
        Ok(Self { path: path.to_path_buf(), lock, config_sha256, seed })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn write_meta(&self, name: &str) -> Result<()> {
        #[derive(Serialize)]
        struct Meta<'a> {
            config_sha256: &'a str,
            seed: u64,
        }
        let meta_name = format!("{}.meta.json", name.trim_end_matches(".csv"));
        self.write_json_raw(&meta_name, &Meta { config_sha256: &self.config_sha256, seed: self.seed })
    }

    fn write_json_raw<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value).context("serialize JSON")?;
        fs::write(self.path.join(name), text + "\n")
            .with_context(|| format!("cannot write {name}"))?;
        Ok(())
    }

    /// JSON document plus its sibling metadata.
    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        self.write_json_raw(name, value)?;
        let stem = name.trim_end_matches(".json");
        self.write_meta(&format!("{stem}.csv"))
    }

    /// CSV with an explicit header row plus its sibling metadata.
    pub fn write_csv(&self, name: &str, header: &str, rows: &[Vec<String>]) -> Result<()> {
        let mut text = String::with_capacity(rows.len() * 64 + header.len() + 1);
        text.push_str(header);
        text.push('\n');
        for row in rows {
            text.push_str(&row.join(","));
            text.push('\n');
        }
        fs::write(self.path.join(name), text)
            .with_context(|| format!("cannot write {name}"))?;
        self.write_meta(name)
    }

    /// Scalar field, one row per node in x1-fastest order.
    pub fn write_field(&self, name: &str, grid: &StructuredGrid, field: &Field) -> Result<()> {
        let rows: Vec<Vec<String>> = (0..grid.len())
            .map(|idx| {
                let p = grid.node(idx);
                vec![fmt_f64(p[0]), fmt_f64(p[1]), fmt_f64(field[idx])]
            })
            .collect();
        self.write_csv(name, "x1,x2,value", &rows)
    }

    /// Mean/std field pair in one file.
    pub fn write_moments(
        &self,
        name: &str,
        grid: &StructuredGrid,
        moments: &MomentField,
    ) -> Result<()> {
        let rows: Vec<Vec<String>> = (0..grid.len())
            .map(|idx| {
                let p = grid.node(idx);
                vec![
                    fmt_f64(p[0]),
                    fmt_f64(p[1]),
                    fmt_f64(moments.mean[idx]),
                    fmt_f64(moments.std[idx]),
                ]
            })
            .collect();
        self.write_csv(name, "x1,x2,mean,std", &rows)
    }
}

impl Drop for OutDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}
